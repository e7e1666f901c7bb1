use super::FloatGrid;

/// Plain SGD with heavy-ball momentum: `v = mu*v + g; p -= lr*v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<FloatGrid>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `params` and `grads` must keep the same order
    /// and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut FloatGrid], grads: &[FloatGrid]) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| FloatGrid::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<FloatGrid>,
    v: Vec<FloatGrid>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut FloatGrid], grads: &[FloatGrid]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| FloatGrid::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pv, &gv), mv), vv) in it {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        let target = FloatGrid::from_vec(vec![1.0, -2.0, 0.5]);
        let mut sgd = SgdMomentum::new(0.05, 0.9);
        let mut adam = Adam::new(0.05);
        let mut a = FloatGrid::zeros(&[3]);
        let mut b = FloatGrid::zeros(&[3]);
        for _ in 0..500 {
            let ga = a.sub(&target).unwrap().scale(2.0);
            sgd.step(&mut [&mut a], &[ga]);
            let gb = b.sub(&target).unwrap().scale(2.0);
            adam.step(&mut [&mut b], &[gb]);
        }
        assert!(a.max_abs_diff(&target) < 1e-6);
        assert!(b.max_abs_diff(&target) < 1e-3);
    }
}
