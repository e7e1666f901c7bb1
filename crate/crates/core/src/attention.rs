//! Multi-head self-attention maps and the binary saliency masks derived
//! from them.

use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_rows, FloatGrid};

/// Row-stochastic `[HW, HW]` attention matrix per head, for an `H x W`
/// feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    maps: Vec<FloatGrid>,
    height: usize,
    width: usize,
    head_dim: usize,
}

const ROW_SUM_TOL: f64 = 1e-6;

impl AttentionRecord {
    /// Validates shapes and row sums of the per-head maps.
    pub fn new(maps: Vec<FloatGrid>, height: usize, width: usize, head_dim: usize) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty("AttentionRecord"));
        }
        let n = height * width;
        for a in &maps {
            if a.shape() != [n, n] {
                return Err(Error::shape("AttentionRecord", &[n, n], a.shape()));
            }
            for row in a.data().chunks(n) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::range("attention row sum", s, "1 +- 1e-6"));
                }
            }
        }
        Ok(Self {
            maps,
            height,
            width,
            head_dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.maps.len()
    }

    pub fn map(&self, head: usize) -> &FloatGrid {
        &self.maps[head]
    }

    pub fn maps(&self) -> &[FloatGrid] {
        &self.maps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Attention received by each patch: column means, averaged over heads.
    ///
    /// Per-patch head values are summed in sorted order, so the result does
    /// not depend on head order down to the last bit.
    pub fn saliency(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let per_head: Vec<Vec<f64>> = self
            .maps
            .iter()
            .map(|a| {
                let mut col = vec![0.0; n];
                for row in a.data().chunks(n) {
                    col.iter_mut().zip(row).for_each(|(c, v)| *c += v);
                }
                col.iter().map(|c| c / n as f64).collect()
            })
            .collect();
        (0..n)
            .map(|j| {
                let mut vals: Vec<f64> = per_head.iter().map(|h| h[j]).collect();
                vals.sort_by(f64::total_cmp);
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    }
}

/// `A[h] = softmax(Q_h K_h^T / sqrt(d))` with `Q_h = X W_Q[h]`, `K_h = X W_K[h]`.
pub fn compute_attention(
    x: &FloatGrid,
    w_q: &[FloatGrid],
    w_k: &[FloatGrid],
    height: usize,
    width: usize,
) -> Result<AttentionRecord> {
    if x.rank() != 2 || x.shape()[0] != height * width {
        return Err(Error::shape("compute_attention", &[height * width, 0], x.shape()));
    }
    if w_q.len() != w_k.len() || w_q.is_empty() {
        return Err(Error::Config("need one W_Q and one W_K per head".into()));
    }
    let d = w_q[0].shape().get(1).copied().unwrap_or(0);
    let mut maps = Vec::with_capacity(w_q.len());
    for (wq, wk) in w_q.iter().zip(w_k) {
        if wq.shape() != [x.shape()[1], d] || wk.shape() != wq.shape() {
            return Err(Error::shape("compute_attention", &[x.shape()[1], d], wk.shape()));
        }
        let q = matmul(x, wq)?;
        let k = matmul(x, wk)?;
        let scores = matmul(&q, &k.transpose())?.scale(1.0 / (d as f64).sqrt());
        maps.push(softmax_rows(&scores)?);
    }
    AttentionRecord::new(maps, height, width, d)
}

/// Binary `H x W` mask of patches whose saliency exceeds the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    pub mask: FloatGrid,
    pub psi: f64,
}

impl SaliencyMask {
    /// Thresholds `saliency` at its mean with a strict `>`.
    pub fn from_saliency(saliency: &[f64], height: usize, width: usize) -> Result<Self> {
        if saliency.len() != height * width || saliency.is_empty() {
            return Err(Error::shape("saliency_mask", &[height * width], &[saliency.len()]));
        }
        let psi = saliency.iter().sum::<f64>() / saliency.len() as f64;
        let m = saliency.iter().map(|&s| if s > psi { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            mask: FloatGrid::from_parts(vec![height, width], m),
            psi,
        })
    }

    pub fn ones(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// The mask as a `[1, H, W]` condition channel.
    pub fn to_channel(&self) -> FloatGrid {
        let s = self.mask.shape();
        self.mask.reshape(&[1, s[0], s[1]]).expect("same length")
    }
}

pub fn saliency_mask(rec: &AttentionRecord) -> SaliencyMask {
    SaliencyMask::from_saliency(&rec.saliency(), rec.height, rec.width).expect("record is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};

    fn random_record(seed: u64, heads: usize) -> AttentionRecord {
        let mut rng = Rng::seeded(seed);
        let x = gaussian(&mut rng, &[9, 6]);
        let wq: Vec<_> = (0..heads).map(|_| gaussian(&mut rng, &[6, 4])).collect();
        let wk: Vec<_> = (0..heads).map(|_| gaussian(&mut rng, &[6, 4])).collect();
        compute_attention(&x, &wq, &wk, 3, 3).unwrap()
    }

    #[test]
    fn zero_features_give_uniform_attention() {
        let x = FloatGrid::zeros(&[4, 3]);
        let w = vec![FloatGrid::full(&[3, 2], 0.7)];
        let rec = compute_attention(&x, &w, &w, 2, 2).unwrap();
        assert!(rec.map(0).data().iter().all(|&v| v == 0.25));
        let m = saliency_mask(&rec);
        assert_eq!(m.ones(), 0);
    }

    #[test]
    fn rows_are_stochastic() {
        let rec = random_record(1, 2);
        for a in rec.maps() {
            for row in a.data().chunks(9) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn hand_set_projection_matches_softmax_oracle() {
        // 2x2 map, C = d = 2, W_Q = W_K = I: scores = X X^T / sqrt(2).
        let x = FloatGrid::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5]).unwrap();
        let eye = FloatGrid::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rec = compute_attention(&x, &[eye.clone()], &[eye], 2, 2).unwrap();
        // Row 0 scores: [1, 0, 1, -1] / sqrt(2), softmax evaluated independently.
        let r = 2f64.sqrt();
        let e = [(1.0 / r).exp(), 1.0, (1.0 / r).exp(), (-1.0 / r).exp()];
        let z: f64 = e.iter().sum();
        for j in 0..4 {
            assert!((rec.map(0)[j] - e[j] / z).abs() < 1e-9);
        }
        // Row 3 frozen from a numpy softmax (scores [-1, 0.5, -0.5, 1.25] / sqrt 2).
        let want = [0.09783775, 0.28258254, 0.1393326, 0.4802471];
        for j in 0..4 {
            assert!((rec.map(0)[12 + j] - want[j]).abs() < 1e-6, "{:?}", rec.map(0));
        }
    }

    #[test]
    fn direct_threshold_example() {
        let m = SaliencyMask::from_saliency(&[0.1, 0.2, 0.3, 0.4], 2, 2).unwrap();
        assert_eq!(m.mask.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!((m.psi - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nonconstant_saliency_has_both_values() {
        for seed in 0..10 {
            let m = saliency_mask(&random_record(seed, 2));
            assert!(m.ones() > 0 && m.ones() < 9);
        }
    }

    #[test]
    fn head_permutation_invariance() {
        let rec = random_record(5, 3);
        let mut maps = rec.maps().to_vec();
        maps.rotate_left(1);
        let permuted = AttentionRecord::new(maps, 3, 3, 4).unwrap();
        assert_eq!(saliency_mask(&rec), saliency_mask(&permuted));
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let bad = FloatGrid::full(&[4, 4], 0.3);
        assert!(AttentionRecord::new(vec![bad], 2, 2, 1).is_err());
    }
}
