//! Recurrent local deflicker: refines each stylized frame from itself, its
//! predecessor and the previous refined output.

use serde::{Deserialize, Serialize};

use crate::dataset::{add_flicker, Corpus, Style};
use crate::error::{Error, Result};
use crate::layers::{accumulate_grads, collect_grads, Conv, ConvVars, Parameters};
use crate::numerics::{Adam, FloatGrid, Rng, Tape, Var};
use crate::video::FrameSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    /// Weight of the L1 fidelity term.
    pub alpha: f64,
    /// Weight of the L1 temporal term on static pixels.
    pub beta: f64,
    /// Per-pixel change threshold separating moving from static content.
    pub tau: f64,
    pub hidden: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            tau: 0.1,
            hidden: 16,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.tau < 0.0 || self.hidden == 0 {
            return Err(Error::Config("temporal weights must be >= 0 and hidden >= 1".into()));
        }
        Ok(())
    }
}

/// `h1 = relu(conv([x_f | x_prev]))`, `h2 = relu(conv([h1 | y_prev]))`,
/// `y = clip(x_f + head(h2) * (y_prev - x_f))`.
///
/// The head is a per-pixel blend gain, zero at initialisation; whenever
/// `y_prev == x_f` the output is `x_f` whatever the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Deflicker {
    pub channels: usize,
    frames_conv: Conv,
    fuse_conv: Conv,
    head: Conv,
}

impl Deflicker {
    pub fn new(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            channels,
            frames_conv: Conv::new(rng, 2 * channels, hidden, 1),
            fuse_conv: Conv::new(rng, hidden + channels, hidden, 1),
            head: Conv::zeros(hidden, channels, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.frames_conv.c_out()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> [ConvVars; 3] {
        [
            self.frames_conv.bind_with(tape, trainable),
            self.fuse_conv.bind_with(tape, trainable),
            self.head.bind_with(tape, trainable),
        ]
    }

    /// Unclipped refinement.
    fn forward_tape(&self, tape: &mut Tape, vars: &[ConvVars; 3], x: Var, x_prev: Var, y_prev: Var) -> Var {
        let pair = tape.concat0(&[x, x_prev]);
        let h1 = vars[0].apply(tape, pair);
        let h1 = tape.relu(h1);
        let fused = tape.concat0(&[h1, y_prev]);
        let h2 = vars[1].apply(tape, fused);
        let h2 = tape.relu(h2);
        let gain = vars[2].apply(tape, h2);
        let towards_prev = tape.sub(y_prev, x);
        let r = tape.mul(gain, towards_prev);
        tape.add(x, r)
    }

    /// Refined frame; the first frame (`prev == None`) passes through.
    pub fn refine_frame(
        &self,
        x_raw: &FloatGrid,
        prev: Option<(&FloatGrid, &FloatGrid)>,
    ) -> Result<FloatGrid> {
        let Some((x_prev, y_prev)) = prev else {
            return Ok(x_raw.clone());
        };
        x_raw.expect_same_shape("refine_frame", x_prev)?;
        x_raw.expect_same_shape("refine_frame", y_prev)?;
        if x_raw.shape()[0] != self.channels {
            return Err(Error::shape("refine_frame", &[self.channels], &x_raw.shape()[..1]));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x_raw.clone());
        let xp = tape.constant(x_prev.clone());
        let yp = tape.constant(y_prev.clone());
        let y = self.forward_tape(&mut tape, &vars, x, xp, yp);
        Ok(tape.value(y).clip(0.0, 1.0))
    }

    /// Runs the recurrence over a whole sequence.
    pub fn refine_sequence(&self, raw: &FrameSequence) -> Result<FrameSequence> {
        let frames: Vec<FloatGrid> = raw.frames().collect();
        let mut out: Vec<FloatGrid> = Vec::with_capacity(frames.len());
        for (f, x) in frames.iter().enumerate() {
            let prev = (f > 0).then(|| (&frames[f - 1], &out[f - 1]));
            let y = self.refine_frame(x, prev)?;
            out.push(y);
        }
        FrameSequence::from_frames(&out)
    }
}

impl Parameters for Deflicker {
    fn params(&self) -> Vec<&FloatGrid> {
        let mut p = self.frames_conv.params();
        p.extend(self.fuse_conv.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut FloatGrid> {
        let mut p = self.frames_conv.params_mut();
        p.extend(self.fuse_conv.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

/// `1` at pixels where any channel of `b - a` exceeds `tau` in magnitude,
/// broadcast over channels.
pub fn change_mask(a: &FloatGrid, b: &FloatGrid, tau: f64) -> Result<FloatGrid> {
    a.expect_same_shape("change_mask", b)?;
    let (c, h, w) = a.chw();
    let mut moving = vec![false; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            let k = ch * h * w + i;
            moving[i] |= (a[k] - b[k]).abs() > tau;
        }
    }
    let data = (0..c * h * w).map(|k| if moving[k % (h * w)] { 1.0 } else { 0.0 }).collect();
    Ok(FloatGrid::from_parts(vec![c, h, w], data))
}

/// A flickered sequence paired with the content video that defines which
/// pixels are static.
#[derive(Clone, Debug)]
pub struct FlickerExample {
    pub original: FrameSequence,
    pub raw: FrameSequence,
}

/// Every style of the given videos with independent per-frame brightness
/// flicker of up to `amplitude`.
pub fn flicker_corpus(corpus: &Corpus, videos: &[usize], amplitude: f64, rng: &mut Rng) -> Result<Vec<FlickerExample>> {
    let mut out = Vec::with_capacity(videos.len() * Style::ALL.len());
    for &v in videos {
        for style in Style::ALL {
            out.push(FlickerExample {
                original: corpus.content[v].clone(),
                raw: add_flicker(&corpus.styled[v][style.id()], amplitude, rng)?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeflickerTrainConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for DeflickerTrainConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-3 }
    }
}

/// Loss of one sequence with `y_prev` detached; returns (loss, grads).
fn sequence_loss(net: &Deflicker, ex: &FlickerExample, cfg: &TemporalConfig) -> Result<(f64, Vec<FloatGrid>)> {
    let raw: Vec<FloatGrid> = ex.raw.frames().collect();
    let orig: Vec<FloatGrid> = ex.original.frames().collect();
    let mut y_prev = raw[0].clone();
    let mut total = 0.0;
    let mut acc = Vec::new();
    let pairs = (raw.len() - 1) as f64;
    for f in 1..raw.len() {
        let static_mask = change_mask(&orig[f], &orig[f - 1], cfg.tau)?.map(|m| 1.0 - m);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, true);
        let x = tape.constant(raw[f].clone());
        let xp = tape.constant(raw[f - 1].clone());
        let yp = tape.constant(y_prev.clone());
        let y = net.forward_tape(&mut tape, &vars, x, xp, yp);
        let fid = tape.sub(y, x);
        let fid = tape.abs(fid);
        let fid = tape.mean(fid);
        let tmp = tape.sub(y, yp);
        let sm = tape.constant(static_mask);
        let tmp = tape.mul(tmp, sm);
        let tmp = tape.abs(tmp);
        let tmp = tape.mean(tmp);
        let fid = tape.scale(fid, cfg.alpha / pairs);
        let tmp = tape.scale(tmp, cfg.beta / pairs);
        let loss = tape.add(fid, tmp);
        total += tape.value(loss).item();
        let all: Vec<Var> = vars.iter().flat_map(|v| v.vars()).collect();
        accumulate_grads(&mut acc, collect_grads(&tape.backward(loss), &all));
        y_prev = tape.value(y).clip(0.0, 1.0);
    }
    Ok((total, acc))
}

/// Trains a deflicker net; returns weights and per-step losses.
pub fn train_deflicker(
    data: &[FlickerExample],
    cfg: &TemporalConfig,
    train: &DeflickerTrainConfig,
    rng: &mut Rng,
) -> Result<(Deflicker, Vec<f64>)> {
    cfg.validate()?;
    let first = data.first().ok_or(Error::Empty("train_deflicker"))?;
    if data.iter().any(|e| e.raw.len() < 2 || e.raw.len() != e.original.len()) {
        return Err(Error::Config("deflicker sequences need >= 2 frames and matching originals".into()));
    }
    let mut net = Deflicker::new(first.raw.frame_shape()[0], cfg.hidden, rng);
    let mut opt = Adam::new(train.lr);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let ex = &data[rng.below(data.len())];
        let (loss, grads) = sequence_loss(&net, ex, cfg)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                module: "temporal",
                step,
            });
        }
        opt.step(&mut net.params_mut(), &grads);
        losses.push(loss);
    }
    Ok((net, losses))
}

/// Mean absolute frame-to-frame change over pixels that are static in
/// `reference` (every pixel when `reference` is `None`).
pub fn flicker_score(seq: &FrameSequence, reference: Option<&FrameSequence>, tau: f64) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::range("frames", seq.len() as f64, ">= 2"));
    }
    if let Some(r) = reference {
        if r.len() != seq.len() || r.frame_shape() != seq.frame_shape() {
            return Err(Error::shape("flicker_score", r.grid().shape(), seq.grid().shape()));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for f in 1..seq.len() {
        let (a, b) = (seq.frame(f - 1), seq.frame(f));
        let moving = match reference {
            Some(r) => change_mask(&r.frame(f - 1), &r.frame(f), tau)?,
            None => FloatGrid::zeros(a.shape()),
        };
        let (mut s, mut n) = (0.0, 0usize);
        for k in 0..a.len() {
            if moving[k] == 0.0 {
                s += (b[k] - a[k]).abs();
                n += 1;
            }
        }
        if n > 0 {
            total += s / n as f64;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}
