//! Parameter containers shared by the trainable networks.

use crate::error::{Error, Result};
use crate::numerics::{gaussian, FloatGrid, Rng, Tape, Var};

/// A set of parameter grids with a fixed order, used for optimizer steps
/// and serialization.
pub trait Parameters {
    fn params(&self) -> Vec<&FloatGrid>;
    fn params_mut(&mut self) -> Vec<&mut FloatGrid>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Overwrites every parameter, checking shapes against the current ones.
    fn load_params(&mut self, grids: Vec<FloatGrid>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != grids.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                grids.len()
            )));
        }
        for (slot, g) in slots.iter_mut().zip(grids) {
            if slot.shape() != g.shape() {
                return Err(Error::shape("load_params", slot.shape(), g.shape()));
            }
            **slot = g;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

/// He-normal initialised grid with the given fan-in.
pub fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> FloatGrid {
    gaussian(rng, shape).scale((2.0 / fan_in as f64).sqrt())
}

/// 3x3 convolution layer with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: FloatGrid,
    pub bias: FloatGrid,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
}

impl Conv {
    pub fn new(rng: &mut Rng, c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            weight: he_normal(rng, &[c_out, c_in, 3, 3], c_in * 9),
            bias: FloatGrid::zeros(&[c_out]),
            stride,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            weight: FloatGrid::zeros(&[c_out, c_in, 3, 3]),
            bias: FloatGrid::zeros(&[c_out]),
            stride,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> ConvVars {
        self.bind_with(tape, true)
    }

    /// Records the weights as leaves (`trainable`) or as constants.
    pub fn bind_with(&self, tape: &mut Tape, trainable: bool) -> ConvVars {
        let mut put = |g: &FloatGrid| {
            if trainable {
                tape.leaf(g.clone())
            } else {
                tape.constant(g.clone())
            }
        };
        ConvVars {
            weight: put(&self.weight),
            bias: put(&self.bias),
            stride: self.stride,
        }
    }

    /// Zeroes the weights reading input channels `range`.
    pub fn zero_input_channels(&mut self, range: std::ops::Range<usize>) {
        let c_in = self.c_in();
        for (i, w) in self.weight.data_mut().iter_mut().enumerate() {
            if range.contains(&((i / 9) % c_in)) {
                *w = 0.0;
            }
        }
    }

    /// Weights reading input channels `range`, flattened.
    pub fn input_channel_weights(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let c_in = self.c_in();
        self.weight
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| range.contains(&((i / 9) % c_in)))
            .map(|(_, &w)| w)
            .collect()
    }
}

impl ConvVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        tape.conv3x3(x, self.weight, Some(self.bias), self.stride)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

impl Parameters for Conv {
    fn params(&self) -> Vec<&FloatGrid> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut FloatGrid> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Collects gradients for `vars`, zero-filling those the loss ignores.
pub fn collect_grads(grads: &crate::numerics::Gradients, vars: &[Var]) -> Vec<FloatGrid> {
    vars.iter().map(|&v| grads.get_or_zero(v)).collect()
}

/// Adds `src` into `acc` elementwise, initialising `acc` on first use.
pub fn accumulate_grads(acc: &mut Vec<FloatGrid>, src: Vec<FloatGrid>) {
    if acc.is_empty() {
        *acc = src;
        return;
    }
    for (a, s) in acc.iter_mut().zip(src) {
        a.data_mut().iter_mut().zip(s.data()).for_each(|(x, y)| *x += y);
    }
}
