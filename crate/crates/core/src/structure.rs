//! Structure loss between an input frame and a predicted clean frame, and
//! its gradient with respect to the noisy latent.

use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvVars};
use crate::numerics::{gaussian, FloatGrid, Rng, Tape, Var};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureMode {
    /// Mean absolute difference of patch self-similarity matrices.
    SelfSimilarity,
    /// One minus the cosine of mean-pooled features.
    PooledCosine,
}

impl std::str::FromStr for StructureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self-similarity" => Ok(Self::SelfSimilarity),
            "pooled-cosine" => Ok(Self::PooledCosine),
            other => Err(Error::Config(format!("unknown structure mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureConfig {
    pub mode: StructureMode,
    pub lambda: f64,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self {
            mode: StructureMode::SelfSimilarity,
            lambda: 0.1,
        }
    }
}

impl StructureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::range("lambda", self.lambda, ">= 0"));
        }
        Ok(())
    }
}

/// Fixed random two-layer conv network, both layers stride 2:
/// `tanh(conv(x))` then a linear conv. Output patches are the spatial
/// positions of the second layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: [Conv; 2],
}

pub const FEATURE_HIDDEN: usize = 16;
pub const FEATURE_DIM: usize = 32;
const FEATURE_SEED: u64 = 0x5EED_FEA7;
const FEATURE_BIAS_STD: f64 = 0.1;

impl FeatureExtractor {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        let mut c1 = Conv::new(rng, channels, FEATURE_HIDDEN, 2);
        c1.bias = gaussian(rng, &[FEATURE_HIDDEN]).scale(FEATURE_BIAS_STD);
        let mut c2 = Conv::new(rng, FEATURE_HIDDEN, FEATURE_DIM, 2);
        c2.bias = gaussian(rng, &[FEATURE_DIM]).scale(FEATURE_BIAS_STD);
        Self { layers: [c1, c2] }
    }

    /// The extractor used throughout the pipeline, fixed by a built-in seed.
    pub fn standard(channels: usize) -> Self {
        Self::new(channels, &mut Rng::seeded(FEATURE_SEED))
    }

    pub fn channels(&self) -> usize {
        self.layers[0].c_in()
    }

    fn bind(&self, tape: &mut Tape) -> [ConvVars; 2] {
        [self.layers[0].bind_with(tape, false), self.layers[1].bind_with(tape, false)]
    }

    /// `[D, h, w]` feature map of a `[C, H, W]` frame.
    pub fn feature_map_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let [c1, c2] = self.bind(tape);
        let h = c1.apply(tape, x);
        let h = tape.tanh(h);
        c2.apply(tape, h)
    }

    /// `[K, D]` patch features.
    pub fn patches_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let f = self.feature_map_tape(tape, x);
        let (d, h, w) = tape.value(f).chw();
        let flat = tape.reshape(f, &[d, h * w]);
        tape.transpose(flat)
    }

    fn check(&self, x: &FloatGrid) -> Result<()> {
        if x.rank() != 3 || x.shape()[0] != self.channels() {
            return Err(Error::shape("FeatureExtractor", &[self.channels(), 0, 0], x.shape()));
        }
        Ok(())
    }

    pub fn patches(&self, x: &FloatGrid) -> Result<FloatGrid> {
        self.check(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.patches_tape(&mut tape, xv);
        Ok(tape.value(p).clone())
    }

    /// Mean of the patch features, `[D]`.
    pub fn pooled(&self, x: &FloatGrid) -> Result<FloatGrid> {
        self.check(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.feature_map_tape(&mut tape, xv);
        let p = tape.spatial_mean(f);
        Ok(tape.value(p).clone())
    }
}

/// Pairwise cosine matrix of the rows of `features`.
pub fn self_similarity_of(features: &FloatGrid) -> FloatGrid {
    let n = crate::numerics::normalize_rows(features);
    crate::numerics::matmul(&n, &n.transpose()).expect("square")
}

/// `S_ij = cos(f_i, f_j)` over the extractor's patches.
pub fn self_similarity(x: &FloatGrid, fe: &FeatureExtractor) -> Result<FloatGrid> {
    Ok(self_similarity_of(&fe.patches(x)?))
}

fn self_similarity_tape(tape: &mut Tape, patches: Var) -> Var {
    let n = tape.normalize_rows(patches);
    let nt = tape.transpose(n);
    tape.matmul(n, nt)
}

/// The parts of the loss that depend only on the input frame.
#[derive(Clone, Debug)]
pub struct StructureTarget {
    mode: StructureMode,
    value: FloatGrid,
}

impl StructureTarget {
    pub fn new(x_in: &FloatGrid, fe: &FeatureExtractor, mode: StructureMode) -> Result<Self> {
        let value = match mode {
            StructureMode::SelfSimilarity => self_similarity(x_in, fe)?,
            StructureMode::PooledCosine => fe.pooled(x_in)?,
        };
        Ok(Self { mode, value })
    }

    pub fn mode(&self) -> StructureMode {
        self.mode
    }

    /// Records the loss of `x_pred` against this target.
    pub fn loss_tape(&self, tape: &mut Tape, fe: &FeatureExtractor, x_pred: Var) -> Var {
        let target = tape.constant(self.value.clone());
        match self.mode {
            StructureMode::SelfSimilarity => {
                let p = fe.patches_tape(tape, x_pred);
                let s = self_similarity_tape(tape, p);
                let d = tape.sub(s, target);
                let a = tape.abs(d);
                tape.mean(a)
            }
            StructureMode::PooledCosine => {
                let f = fe.feature_map_tape(tape, x_pred);
                let p = tape.spatial_mean(f);
                let c = tape.cosine(p, target);
                let neg = tape.scale(c, -1.0);
                tape.add_scalar(neg, 1.0)
            }
        }
    }

    pub fn loss(&self, x_pred: &FloatGrid, fe: &FeatureExtractor) -> Result<f64> {
        fe.check(x_pred)?;
        let mut tape = Tape::new();
        let x = tape.constant(x_pred.clone());
        let l = self.loss_tape(&mut tape, fe, x);
        Ok(tape.value(l).item())
    }
}

/// Structure loss in `[0, 2]`; zero when the frames coincide.
pub fn structure_loss(
    x_in: &FloatGrid,
    x_pred: &FloatGrid,
    fe: &FeatureExtractor,
    mode: StructureMode,
) -> Result<f64> {
    x_in.expect_same_shape("structure_loss", x_pred)?;
    StructureTarget::new(x_in, fe, mode)?.loss(x_pred, fe)
}

/// Loss value and latent gradient from [`latent_gradient`].
#[derive(Clone, Debug)]
pub struct LatentGradient {
    pub loss: f64,
    pub grad: FloatGrid,
}

/// Gradient of the structure loss of `decode(x0_hat(z_t))` with respect to
/// `z_t`, holding `eps_hat` constant.
pub fn latent_gradient(
    z_t: &FloatGrid,
    t: usize,
    eps_hat: &FloatGrid,
    target: &StructureTarget,
    ae: &Autoencoder,
    fe: &FeatureExtractor,
    schedule: &NoiseSchedule,
) -> Result<LatentGradient> {
    z_t.expect_same_shape("latent_gradient", eps_hat)?;
    let mut tape = Tape::new();
    let z = tape.leaf(z_t.clone());
    let loss = latent_loss_tape(&mut tape, z, t, eps_hat, target, ae, fe, schedule)?;
    let grad = tape.backward(loss).get_or_zero(z);
    let value = tape.value(loss).item();
    if !grad.is_finite() || !value.is_finite() {
        return Err(Error::NonFinite {
            module: "structure",
            step: t,
        });
    }
    Ok(LatentGradient { loss: value, grad })
}

/// Records `L_s(x_in, decode((z - sqrt(1 - abar) eps) / sqrt(abar)))`.
#[allow(clippy::too_many_arguments)]
pub fn latent_loss_tape(
    tape: &mut Tape,
    z: Var,
    t: usize,
    eps_hat: &FloatGrid,
    target: &StructureTarget,
    ae: &Autoencoder,
    fe: &FeatureExtractor,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::range("t", 0.0, ">= 1"));
    }
    let noise = tape.constant(eps_hat.scale((1.0 - ab).sqrt()));
    let diff = tape.sub(z, noise);
    let x0 = tape.scale(diff, 1.0 / ab.sqrt());
    let vars = ae.bind(tape, false);
    let x_pred = ae.decode_tape(tape, &vars, x0);
    Ok(target.loss_tape(tape, fe, x_pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, grad_check};

    fn frame(seed: u64, size: usize) -> FloatGrid {
        gaussian(&mut Rng::seeded(seed), &[3, size, size]).map(|v| (0.5 + 0.25 * v).clamp(0.0, 1.0))
    }

    #[test]
    fn self_similarity_is_symmetric_with_unit_diagonal() {
        let fe = FeatureExtractor::standard(3);
        let s = self_similarity(&frame(1, 16), &fe).unwrap();
        let k = s.shape()[0];
        assert_eq!(k, 16);
        for i in 0..k {
            assert!((s[i * k + i] - 1.0).abs() < 1e-12);
            for j in 0..k {
                assert!((s[i * k + j] - s[j * k + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_patches_give_all_ones() {
        let feats = FloatGrid::new(vec![4, 3], [0.2, -1.0, 0.5].repeat(4)).unwrap();
        let s = self_similarity_of(&feats);
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_pairwise_cosine_oracle() {
        let fe = FeatureExtractor::standard(3);
        let x = frame(2, 16);
        let p = fe.patches(&x).unwrap();
        let s = self_similarity(&x, &fe).unwrap();
        let k = p.shape()[0];
        for i in 0..k {
            for j in 0..k {
                let want = cosine(&p.index0(i), &p.index0(j)).unwrap();
                assert!((s[i * k + j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_identity_range_and_oracle() {
        let fe = FeatureExtractor::standard(3);
        let (a, b) = (frame(3, 16), frame(4, 16));
        for mode in [StructureMode::SelfSimilarity, StructureMode::PooledCosine] {
            assert_eq!(structure_loss(&a, &a, &fe, mode).unwrap(), 0.0);
            let l = structure_loss(&a, &b, &fe, mode).unwrap();
            assert!(l > 0.0 && l <= 2.0, "{mode:?} {l}");
        }
        // Recompute both losses from raw definitions.
        let (sa, sb) = (self_similarity(&a, &fe).unwrap(), self_similarity(&b, &fe).unwrap());
        let want = sa.mean_abs_diff(&sb);
        let got = structure_loss(&a, &b, &fe, StructureMode::SelfSimilarity).unwrap();
        assert!((got - want).abs() < 1e-12);
        let pa = fe.patches(&a).unwrap();
        let pb = fe.patches(&b).unwrap();
        let mean = |p: &FloatGrid| {
            let (k, d) = (p.shape()[0], p.shape()[1]);
            FloatGrid::from_vec((0..d).map(|j| (0..k).map(|i| p[i * d + j]).sum::<f64>() / k as f64).collect())
        };
        let want = 1.0 - cosine(&mean(&pa), &mean(&pb)).unwrap();
        let got = structure_loss(&a, &b, &fe, StructureMode::PooledCosine).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(structure_loss(&a, &frame(1, 8), &fe, StructureMode::PooledCosine).is_err());
    }

    #[test]
    fn orthogonal_pooled_features_give_one() {
        let mut t = Tape::new();
        let a = t.constant(FloatGrid::from_vec(vec![1.0, 0.0]));
        let b = t.constant(FloatGrid::from_vec(vec![0.0, 3.0]));
        let c = t.cosine(a, b);
        let neg = t.scale(c, -1.0);
        let l = t.add_scalar(neg, 1.0);
        assert_eq!(t.value(l).item(), 1.0);
    }

    #[test]
    fn gradient_vanishes_at_zero_loss() {
        // eps = 0, identity decoder, x_in = z / sqrt(abar): x_pred == x_in.
        let sched = NoiseSchedule::default();
        let fe = FeatureExtractor::standard(3);
        let ae = Autoencoder::identity(3);
        let x = frame(5, 16);
        let t = 12;
        let z = x.scale(sched.alpha_bar(t).unwrap().sqrt());
        let eps = FloatGrid::zeros(z.shape());
        for mode in [StructureMode::SelfSimilarity, StructureMode::PooledCosine] {
            let target = StructureTarget::new(&x, &fe, mode).unwrap();
            let g = latent_gradient(&z, t, &eps, &target, &ae, &fe, &sched).unwrap();
            assert!(g.loss.abs() < 1e-12);
            assert!(g.grad.norm() < 1e-6, "{mode:?} {}", g.grad.norm());
        }
    }

    #[test]
    fn pooled_gradient_matches_finite_differences() {
        let sched = NoiseSchedule::default();
        let fe = FeatureExtractor::standard(3);
        let ae = Autoencoder::identity(3);
        let target = StructureTarget::new(&frame(6, 8), &fe, StructureMode::PooledCosine).unwrap();
        let mut rng = Rng::seeded(7);
        let z = gaussian(&mut rng, &[3, 8, 8]);
        let eps = gaussian(&mut rng, &[3, 8, 8]);
        let err = grad_check(
            |tape, zv| latent_loss_tape(tape, zv, 9, &eps, &target, &ae, &fe, &sched).unwrap(),
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let g = latent_gradient(&z, 9, &eps, &target, &ae, &fe, &sched).unwrap();
        assert_eq!(g.grad.shape(), z.shape());
    }
}
