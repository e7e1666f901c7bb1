//! Temporal consistency, prompt consistency and frame accuracy over a small
//! fixed embedder.

use crate::dataset::{Corpus, Style};
use crate::error::{Error, Result};
use crate::numerics::{cosine, FloatGrid};
use crate::structure::FeatureExtractor;
use crate::video::FrameSequence;

/// Image branch: pooled features of the fixed extractor minus a corpus
/// mean. Text branch: one row per style token in the same space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    features: FeatureExtractor,
    center: FloatGrid,
    text: FloatGrid,
}

impl Embedder {
    pub fn new(features: FeatureExtractor, center: FloatGrid, text: FloatGrid) -> Result<Self> {
        let d = center.len();
        if text.rank() != 2 || text.shape()[1] != d {
            return Err(Error::shape("Embedder.text", &[Style::ALL.len(), d], text.shape()));
        }
        if !center.is_finite() || !text.is_finite() {
            return Err(Error::Format("embedder tables must be finite".into()));
        }
        Ok(Self { features, center, text })
    }

    /// Centers on the mean pooled feature of every training-split frame and
    /// places each style token at the centroid of its oracle-styled frames.
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        let first = corpus.content.first().ok_or(Error::Empty("Embedder::fit"))?;
        let features = FeatureExtractor::standard(first.frame_shape()[0]);
        let mut per_style: Vec<Vec<FloatGrid>> = vec![Vec::new(); Style::ALL.len()];
        for &v in &corpus.train_videos {
            for style in Style::ALL {
                for frame in corpus.styled[v][style.id()].frames() {
                    per_style[style.id()].push(features.pooled(&frame)?);
                }
            }
        }
        let all: Vec<&FloatGrid> = per_style.iter().flatten().collect();
        if all.is_empty() {
            return Err(Error::Empty("Embedder::fit"));
        }
        let center = mean_of(&all);
        let mut text = Vec::new();
        for rows in &per_style {
            let c = mean_of(&rows.iter().collect::<Vec<_>>());
            text.extend(c.data().iter().zip(center.data()).map(|(a, b)| a - b));
        }
        let d = center.len();
        Self::new(features, center, FloatGrid::new(vec![Style::ALL.len(), d], text)?)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &FloatGrid {
        &self.center
    }

    pub fn text_table(&self) -> &FloatGrid {
        &self.text
    }

    pub fn embed_frame(&self, x: &FloatGrid) -> Result<FloatGrid> {
        self.features.pooled(x)?.sub(&self.center)
    }

    pub fn embed_style(&self, style_id: usize) -> Result<FloatGrid> {
        if style_id >= self.text.shape()[0] {
            return Err(Error::UnknownStyle(style_id.to_string()));
        }
        Ok(self.text.index0(style_id))
    }
}

fn mean_of(rows: &[&FloatGrid]) -> FloatGrid {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.data()) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    FloatGrid::from_vec(acc.into_iter().map(|a| a / n).collect())
}

fn embed_all(seq: &FrameSequence, emb: &Embedder) -> Result<Vec<FloatGrid>> {
    seq.frames().map(|f| emb.embed_frame(&f)).collect()
}

/// Mean cosine between consecutive frame embeddings.
pub fn temporal_consistency(seq: &FrameSequence, emb: &Embedder) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::range("frames", seq.len() as f64, ">= 2"));
    }
    let e = embed_all(seq, emb)?;
    let mut total = 0.0;
    for pair in e.windows(2) {
        total += cosine(&pair[0], &pair[1])?;
    }
    Ok(total / (e.len() - 1) as f64)
}

/// Mean cosine between each frame embedding and the style embedding.
pub fn prompt_consistency(seq: &FrameSequence, style_id: usize, emb: &Embedder) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::Empty("prompt_consistency"));
    }
    let text = emb.embed_style(style_id)?;
    let mut total = 0.0;
    for f in embed_all(seq, emb)? {
        total += cosine(&f, &text)?;
    }
    Ok(total / seq.len() as f64)
}

/// Mean cosine between corresponding input and output frame embeddings.
pub fn frame_accuracy(input: &FrameSequence, output: &FrameSequence, emb: &Embedder) -> Result<f64> {
    if input.len() != output.len() {
        return Err(Error::shape("frame_accuracy", &[input.len()], &[output.len()]));
    }
    if input.is_empty() {
        return Err(Error::Empty("frame_accuracy"));
    }
    let (a, b) = (embed_all(input, emb)?, embed_all(output, emb)?);
    let mut total = 0.0;
    for (x, y) in a.iter().zip(&b) {
        total += cosine(x, y)?;
    }
    Ok(total / a.len() as f64)
}

/// The three metrics for one stylized video.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct MetricTriad {
    pub temporal_consistency: f64,
    pub prompt_consistency: f64,
    pub frame_accuracy: f64,
}

pub fn evaluate(input: &FrameSequence, output: &FrameSequence, style_id: usize, emb: &Embedder) -> Result<MetricTriad> {
    Ok(MetricTriad {
        temporal_consistency: temporal_consistency(output, emb)?,
        prompt_consistency: prompt_consistency(output, style_id, emb)?,
        frame_accuracy: frame_accuracy(input, output, emb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig};
    use crate::numerics::{gaussian, Rng};

    fn small_corpus() -> Corpus {
        build_dataset(&DatasetConfig {
            videos: 5,
            frames: 4,
            size: 16,
            ..Default::default()
        })
        .unwrap()
    }

    fn noise_seq(seed: u64, frames: usize) -> FrameSequence {
        let g = gaussian(&mut Rng::seeded(seed), &[frames, 3, 16, 16]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        FrameSequence::new(g).unwrap()
    }

    #[test]
    fn identity_cases_are_one() {
        let corpus = small_corpus();
        let emb = Embedder::fit(&corpus).unwrap();
        let v = &corpus.content[0];
        assert!((frame_accuracy(v, v, &emb).unwrap() - 1.0).abs() < 1e-12);
        let still = FrameSequence::from_frames(&vec![v.frame(0); 3]).unwrap();
        assert!((temporal_consistency(&still, &emb).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frame_parallel_to_token_scores_one() {
        let corpus = small_corpus();
        let emb = Embedder::fit(&corpus).unwrap();
        let frame = corpus.content[0].frame(1);
        let e = emb.embed_frame(&frame).unwrap();
        let custom = Embedder::new(
            emb.features.clone(),
            emb.center.clone(),
            FloatGrid::stack(&vec![e.scale(2.5); 5]).unwrap(),
        )
        .unwrap();
        let seq = FrameSequence::from_frames(&[frame]).unwrap();
        assert!((prompt_consistency(&seq, 3, &custom).unwrap() - 1.0).abs() < 1e-12);
        assert!(prompt_consistency(&seq, 5, &custom).is_err());
    }

    #[test]
    fn temporal_consistency_matches_pairwise_oracle() {
        let corpus = small_corpus();
        let emb = Embedder::fit(&corpus).unwrap();
        let seq = noise_seq(3, 4);
        let mut total = 0.0;
        for f in 1..4 {
            let a = emb.features.pooled(&seq.frame(f - 1)).unwrap().sub(&emb.center).unwrap();
            let b = emb.features.pooled(&seq.frame(f)).unwrap().sub(&emb.center).unwrap();
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            total += dot / (a.norm() * b.norm());
        }
        assert!((temporal_consistency(&seq, &emb).unwrap() - total / 3.0).abs() < 1e-12);
        assert!(temporal_consistency(&noise_seq(1, 1), &emb).is_err());
    }

    #[test]
    fn styled_frames_beat_unstyled_for_their_token() {
        let corpus = small_corpus();
        let emb = Embedder::fit(&corpus).unwrap();
        for style in Style::ALL.into_iter().filter(|s| *s != Style::Plain) {
            for &v in &corpus.heldout_videos {
                let styled = prompt_consistency(&corpus.styled[v][style.id()], style.id(), &emb).unwrap();
                let plain = prompt_consistency(&corpus.content[v], style.id(), &emb).unwrap();
                assert!(styled > plain, "{style}: {styled} vs {plain}");
            }
        }
    }

    #[test]
    fn noise_lowers_frame_accuracy() {
        let corpus = small_corpus();
        let emb = Embedder::fit(&corpus).unwrap();
        let v = &corpus.content[corpus.heldout_videos[0]];
        let noise = gaussian(&mut Rng::seeded(4), v.grid().shape());
        let noisy = FrameSequence::new(v.grid().zip_map(&noise, |a, n| (a + 0.5 * n).clamp(0.0, 1.0)).unwrap()).unwrap();
        assert!(frame_accuracy(v, &noisy, &emb).unwrap() < 1.0 - 1e-3);
    }

    #[test]
    fn permutation_changes_temporal_but_not_accuracy() {
        let corpus = small_corpus();
        let emb = Embedder::fit(&corpus).unwrap();
        let a = noise_seq(5, 4);
        let b = noise_seq(6, 4);
        let order = [2, 0, 3, 1];
        let perm = |s: &FrameSequence| FrameSequence::from_frames(&order.map(|i| s.frame(i))).unwrap();
        let fa = frame_accuracy(&a, &b, &emb).unwrap();
        let fp = frame_accuracy(&perm(&a), &perm(&b), &emb).unwrap();
        assert!((fa - fp).abs() < 1e-12);
        let ordered = FrameSequence::from_frames(&[a.frame(0), a.frame(0), b.frame(0), b.frame(0)]).unwrap();
        let shuffled = FrameSequence::from_frames(&[a.frame(0), b.frame(0), a.frame(0), b.frame(0)]).unwrap();
        assert!(temporal_consistency(&ordered, &emb).unwrap() > temporal_consistency(&shuffled, &emb).unwrap());
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let corpus = small_corpus();
        let emb = Embedder::fit(&corpus).unwrap();
        for seed in 0..4 {
            let (a, b) = (noise_seq(seed, 3), noise_seq(seed + 10, 3));
            let m = evaluate(&a, &b, (seed % 5) as usize, &emb).unwrap();
            for v in [m.temporal_consistency, m.prompt_consistency, m.frame_accuracy] {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}
