use super::{FloatGrid, Tape, Var};
use crate::error::{Error, Result};

/// Largest relative error between tape gradients and central differences.
///
/// `f` records a scalar function of its input var on the given tape. The
/// error for each coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &FloatGrid, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    Ok(run(f, x, h, None)?.max_rel_err)
}

/// Result of [`grad_check_piecewise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiecewiseCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose `[x - h, x + h]` window straddles a kink.
    pub skipped: usize,
}

/// Relative one-sided slope disagreement above which a coordinate is
/// treated as straddling a kink.
pub const KINK_TOL: f64 = 1e-4;

/// [`grad_check`] for piecewise-smooth functions (relu, abs).
///
/// A coordinate whose forward and backward one-sided slopes differ by more
/// than `KINK_TOL` relative is excluded, since central differences are
/// not an oracle across a kink. Every other coordinate is compared as in
/// `grad_check`; their central-difference error from any kink is then at
/// most `KINK_TOL / 2` relative.
pub fn grad_check_piecewise<F>(f: F, x: &FloatGrid, h: f64) -> Result<PiecewiseCheck>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    run(f, x, h, Some(KINK_TOL))
}

fn run<F>(f: F, x: &FloatGrid, h: f64, kink_tol: Option<f64>) -> Result<PiecewiseCheck>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    if !(1e-5..=1e-3).contains(&h) {
        return Err(Error::range("h", h, "[1e-5, 1e-3]"));
    }
    let eval = |g: &FloatGrid| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(g.clone());
        let out = f(&mut tape, v);
        let y = tape.value(out).item();
        if !y.is_finite() {
            return Err(Error::NonFinite { module: "grad_check", step: 0 });
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v);
    let f0 = tape.value(out).item();
    if !f0.is_finite() {
        return Err(Error::NonFinite { module: "grad_check", step: 0 });
    }
    let analytic = tape.backward(out).get_or_zero(v);

    let mut report = PiecewiseCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if let Some(tol) = kink_tol {
            let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
            if (fwd - bwd).abs() > tol * fwd.abs().max(bwd.abs()).max(1e-8) {
                report.skipped += 1;
                continue;
            }
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};

    fn check(name: &str, x: &FloatGrid, f: impl Fn(&mut Tape, Var) -> Var) {
        let err = grad_check(f, x, 1e-5).unwrap();
        assert!(err < 1e-5, "{name}: rel err {err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = FloatGrid::from_vec(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v);
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).get(v).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v);
                t.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = FloatGrid::from_vec(vec![0.3, -1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let c = tape.leaf(FloatGrid::scalar(4.0));
        let out = tape.sum(c);
        let g = tape.backward(out).get_or_zero(v);
        assert!(g.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn rejects_bad_step() {
        let x = FloatGrid::from_vec(vec![1.0]);
        assert!(grad_check(|t, v| t.sum(v), &x, 1.0).is_err());
    }

    /// Every primitive on random 16-element inputs.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = Rng::seeded(99);
        let x = gaussian(&mut rng, &[16]);
        let m = x.reshape(&[4, 4]).unwrap();
        let img = x.reshape(&[1, 4, 4]).unwrap();
        let other = gaussian(&mut rng, &[16]);
        let w = gaussian(&mut rng, &[2, 1, 3, 3]);
        let b = gaussian(&mut rng, &[2]);
        let proj = gaussian(&mut rng, &[4, 3]);
        let cbias = gaussian(&mut rng, &[1]);
        let rbias = gaussian(&mut rng, &[4]);

        // Random linear readout so vector-valued ops reduce to a scalar.
        fn readout(t: &mut Tape, y: Var, seed: u64) -> Var {
            let r = gaussian(&mut Rng::seeded(seed), t.value(y).shape());
            let r = t.leaf(r);
            let p = t.mul(y, r);
            t.sum(p)
        }

        check("add", &x, |t, v| {
            let o = t.leaf(other.clone());
            let y = t.add(v, o);
            readout(t, y, 1)
        });
        check("sub", &x, |t, v| {
            let o = t.leaf(other.clone());
            let y = t.sub(o, v);
            readout(t, y, 2)
        });
        check("mul", &x, |t, v| {
            let y = t.mul(v, v);
            readout(t, y, 3)
        });
        check("scale", &x, |t, v| {
            let y = t.scale(v, -2.5);
            let y = t.add_scalar(y, 0.3);
            readout(t, y, 4)
        });
        check("matmul", &m, |t, v| {
            let p = t.leaf(proj.clone());
            let y = t.matmul(v, p);
            readout(t, y, 5)
        });
        check("matmul rhs", &m, |t, v| {
            let p = t.leaf(proj.transpose());
            let y = t.matmul(p, v);
            readout(t, y, 6)
        });
        check("transpose", &m, |t, v| {
            let y = t.transpose(v);
            readout(t, y, 7)
        });
        check("conv3x3", &img, |t, v| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.conv3x3(v, wv, Some(bv), 1);
            readout(t, y, 8)
        });
        check("conv3x3 stride 2", &img, |t, v| {
            let wv = t.leaf(w.clone());
            let y = t.conv3x3(v, wv, None, 2);
            readout(t, y, 9)
        });
        check("conv3x3 weight", &w.reshape(&[18]).unwrap(), |t, v| {
            let wv = t.reshape(v, &[2, 1, 3, 3]);
            let iv = t.leaf(img.clone());
            let y = t.conv3x3(iv, wv, None, 2);
            readout(t, y, 10)
        });
        check("relu", &x, |t, v| {
            let y = t.relu(v);
            readout(t, y, 11)
        });
        check("tanh", &x, |t, v| {
            let y = t.tanh(v);
            readout(t, y, 17)
        });
        check("abs", &x, |t, v| {
            let y = t.abs(v);
            readout(t, y, 12)
        });
        check("softmax_rows", &m, |t, v| {
            let y = t.softmax_rows(v);
            readout(t, y, 13)
        });
        check("normalize_rows", &m, |t, v| {
            let y = t.normalize_rows(v);
            readout(t, y, 14)
        });
        check("cosine", &x, |t, v| {
            let o = t.leaf(other.clone());
            t.cosine(v, o)
        });
        check("mean", &x, |t, v| {
            let y = t.mul(v, v);
            t.mean(y)
        });
        check("slice/concat", &m, |t, v| {
            let a = t.slice0(v, 1, 2);
            let c = t.slice0(v, 0, 1);
            let y = t.concat0(&[a, c, a]);
            readout(t, y, 15)
        });
        check("add_channel", &img, |t, v| {
            let cb = t.leaf(cbias.clone());
            let y = t.add_channel(v, cb);
            let y = t.mul(y, y);
            readout(t, y, 16)
        });
        check("add_row", &m, |t, v| {
            let rb = t.leaf(rbias.clone());
            let y = t.add_row(v, rb);
            let y = t.mul(y, y);
            readout(t, y, 17)
        });
        check("upsample2", &img, |t, v| {
            let y = t.upsample2(v);
            readout(t, y, 18)
        });
        check("spatial_mean", &img, |t, v| {
            let y = t.mul(v, v);
            let y = t.spatial_mean(y);
            readout(t, y, 19)
        });
    }

    #[test]
    fn bias_gradients() {
        // Gradients w.r.t. the broadcast operands.
        let mut rng = Rng::seeded(4);
        let img = gaussian(&mut rng, &[2, 3, 3]);
        let cb = gaussian(&mut rng, &[2]);
        let err = grad_check(
            |t, v| {
                let i = t.leaf(img.clone());
                let y = t.add_channel(i, v);
                let y = t.mul(y, y);
                t.sum(y)
            },
            &cb,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn piecewise_check_skips_only_kinks() {
        // |x| with x_0 inside the FD window of the kink.
        let x = FloatGrid::from_vec(vec![2e-6, 0.7, -1.3]);
        let f = |t: &mut Tape, v: Var| {
            let a = t.abs(v);
            t.sum(a)
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() > 0.1);
        let r = grad_check_piecewise(f, &x, 1e-5).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_rel_err < 1e-8);
    }
}
