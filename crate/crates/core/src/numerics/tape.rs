//! Tape-based reverse-mode differentiation over a closed set of grid ops.
//!
//! Each op evaluates eagerly and appends a node holding its value and the
//! indices of its inputs. [`Tape::backward`] walks the nodes in reverse,
//! seeding the scalar loss with 1 and accumulating vector-Jacobian
//! products into every ancestor.
//!
//! ```
//! use sav_core::numerics::{FloatGrid, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(FloatGrid::from_vec(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss);
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use super::{kernels, FloatGrid};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv3x3 {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    Cosine(Var, Var),
    Mean(Var),
    Sum(Var),
    Slice0 { src: Var, start: usize },
    Concat0(Vec<Var>),
    Reshape(Var),
    AddChannel(Var, Var),
    AddRow(Var, Var),
    Upsample2(Var),
    SpatialMean(Var),
}

struct Node {
    value: FloatGrid,
    op: Op,
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Cosine(a, b) => vec![*a, *b],
            Op::AddChannel(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::NormalizeRows(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Upsample2(a)
            | Op::SpatialMean(a) => vec![*a],
            Op::Slice0 { src, .. } => vec![*src],
            Op::Concat0(parts) => parts.clone(),
            Op::Conv3x3 {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
        }
    }
}

/// Single-owner recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<FloatGrid>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&FloatGrid> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var) -> FloatGrid {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| FloatGrid::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &FloatGrid {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: FloatGrid, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    /// Records an input. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, value: FloatGrid) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient. Ops whose inputs
    /// are all constants are skipped by [`backward`](Self::backward).
    pub fn constant(&mut self, value: FloatGrid) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let v = self.value(a).add(self.value(b)).expect("checked");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let v = self.value(a).sub(self.value(b)).expect("checked");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("checked");
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: {sa:?} x {sb:?}"
        );
        let v = kernels::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Zero-padded 3x3 convolution with optional bias and stride.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Var {
        let (si, sw) = (self.shape(input), self.shape(weight));
        assert!(
            si.len() == 3 && sw.len() == 4 && sw[1] == si[0] && sw[2] == 3 && sw[3] == 3,
            "conv3x3: input {si:?} weight {sw:?}"
        );
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[sw[0]], "conv3x3 bias");
        }
        let v = kernels::conv3x3(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
        );
        self.push(
            v,
            Op::Conv3x3 {
                input,
                weight,
                bias,
                stride,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "softmax_rows needs a matrix");
        let v = kernels::softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Each row divided by its L2 norm; zero rows map to zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "normalize_rows needs a matrix");
        let v = kernels::normalize_rows(self.value(a));
        self.push(v, Op::NormalizeRows(a))
    }

    /// Scalar cosine similarity of two flattened grids of equal length.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "cosine length");
        let v = FloatGrid::scalar(kernels::cosine(self.value(a), self.value(b)));
        self.push(v, Op::Cosine(a, b))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = FloatGrid::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = FloatGrid::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice0(&mut self, src: Var, start: usize, len: usize) -> Var {
        let g = self.value(src);
        let lead = g.shape()[0];
        assert!(start + len <= lead && len > 0, "slice0 out of range");
        let inner = g.len() / lead;
        let mut shape = g.shape().to_vec();
        shape[0] = len;
        let v = FloatGrid::from_parts(shape, g.data()[start * inner..(start + len) * inner].to_vec());
        self.push(v, Op::Slice0 { src, start })
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        let grids: Vec<&FloatGrid> = parts.iter().map(|&p| self.value(p)).collect();
        let v = FloatGrid::concat0(&grids).expect("concat0: trailing extents differ");
        self.push(v, Op::Concat0(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape).expect("reshape: element count");
        self.push(v, Op::Reshape(a))
    }

    /// `[C, H, W] + [C]` broadcast over pixels.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(bias), &[c], "add_channel bias");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[ch]);
        }
        self.push(FloatGrid::from_parts(vec![c, h, w], out), Op::AddChannel(x, bias))
    }

    /// `[R, C] + [C]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 2 && self.shape(bias) == [s[1]], "add_row bias");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(s[1]) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        self.push(FloatGrid::from_parts(s, out), Op::AddRow(x, bias))
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` grid.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let v = kernels::upsample2(self.value(a));
        self.push(v, Op::Upsample2(a))
    }

    /// Global average pool `[C, H, W] -> [C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let v = kernels::spatial_mean(self.value(a));
        self.push(v, Op::SpatialMean(a))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<FloatGrid>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(FloatGrid::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn propagate(&self, op: &Op, out: &FloatGrid, g: &FloatGrid, grads: &mut [Option<FloatGrid>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y).expect("shape"));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y).expect("shape"));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                accumulate(grads, *a, kernels::matmul_nt(g, val(*b)));
                accumulate(grads, *b, kernels::matmul_tn(val(*a), g));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Conv3x3 {
                input,
                weight,
                bias,
                stride,
            } => {
                let need = |v: Var| self.nodes[v.0].needs_grad;
                let (gi, gw, gb) = kernels::conv3x3_backward(
                    val(*input),
                    val(*weight),
                    g,
                    *stride,
                    (need(*input), need(*weight)),
                );
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias.filter(|b| need(*b)) {
                    accumulate(grads, b, gb);
                }
            }
            Op::Relu(a) => {
                let ga = g
                    .zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gv, y| gv * (1.0 - y * y)).expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(val(*a), |gv, x| gv * sign(x)).expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let c = out.shape()[1];
                let mut ga = vec![0.0; out.len()];
                for ((gr, yr), dst) in g
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(ga.chunks_mut(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, &gv), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gv - dot);
                    }
                }
                accumulate(grads, *a, FloatGrid::from_parts(out.shape().to_vec(), ga));
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let c = x.shape()[1];
                let mut ga = vec![0.0; x.len()];
                for (((xr, yr), gr), dst) in x
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .zip(ga.chunks_mut(c))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    for ((d, &y), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - y * dot) / n;
                    }
                }
                accumulate(grads, *a, FloatGrid::from_parts(x.shape().to_vec(), ga));
            }
            Op::Cosine(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (na, nb) = (xa.norm(), xb.norm());
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let c = out.item();
                let gs = g.item();
                let ga = flat_zip(xb, xa, |vb, va| gs * (vb / (na * nb) - c * va / (na * na)));
                let gb = flat_zip(xa, xb, |va, vb| gs * (va / (na * nb) - c * vb / (nb * nb)));
                accumulate(grads, *a, ga.reshape(xa.shape()).expect("len"));
                accumulate(grads, *b, gb.reshape(xb.shape()).expect("len"));
            }
            Op::Mean(a) => {
                let x = val(*a);
                accumulate(grads, *a, FloatGrid::full(x.shape(), g.item() / x.len() as f64));
            }
            Op::Sum(a) => accumulate(grads, *a, FloatGrid::full(val(*a).shape(), g.item())),
            Op::Slice0 { src, start } => {
                let x = val(*src);
                let inner = x.len() / x.shape()[0];
                let mut ga = vec![0.0; x.len()];
                ga[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                accumulate(grads, *src, FloatGrid::from_parts(x.shape().to_vec(), ga));
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for p in parts {
                    let x = val(*p);
                    let part = g.data()[offset..offset + x.len()].to_vec();
                    offset += x.len();
                    accumulate(grads, *p, FloatGrid::from_parts(x.shape().to_vec(), part));
                }
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.reshape(val(*a).shape()).expect("len"));
            }
            Op::AddChannel(x, b) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, kernels::spatial_mean(g).scale(plane_len(g) as f64));
            }
            Op::AddRow(x, b) => {
                accumulate(grads, *x, g.clone());
                let c = g.shape()[1];
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, *b, FloatGrid::from_parts(vec![c], gb));
            }
            Op::Upsample2(a) => {
                let (c, h, w) = val(*a).chw();
                let mut ga = vec![0.0; c * h * w];
                let gd = g.data();
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            ga[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *a, FloatGrid::from_parts(vec![c, h, w], ga));
            }
            Op::SpatialMean(a) => {
                let (c, h, w) = val(*a).chw();
                let hw = (h * w) as f64;
                let mut ga = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    ga.extend(std::iter::repeat_n(g[ch] / hw, h * w));
                }
                accumulate(grads, *a, FloatGrid::from_parts(vec![c, h, w], ga));
            }
        }
    }
}

fn plane_len(g: &FloatGrid) -> usize {
    let (_, h, w) = g.chw();
    h * w
}

/// Inputs this close to the kink of `abs` count as on it.
const ABS_KINK: f64 = 1e-12;

/// Subgradient of `abs`, zero on the kink.
fn sign(x: f64) -> f64 {
    if x > ABS_KINK {
        1.0
    } else if x < -ABS_KINK {
        -1.0
    } else {
        0.0
    }
}

fn flat_zip(a: &FloatGrid, b: &FloatGrid, f: impl Fn(f64, f64) -> f64) -> FloatGrid {
    FloatGrid::from_vec(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn accumulate(grads: &mut [Option<FloatGrid>], v: Var, g: FloatGrid) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }

}
