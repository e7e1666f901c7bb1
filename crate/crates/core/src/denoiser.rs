//! Conditional noise predictor `eps(z_t, t, c_I, c_T, c_M)`: a small conv
//! network with one multi-head self-attention block, and its training loop.

use serde::{Deserialize, Serialize};

use crate::attention::{saliency_mask, AttentionRecord};
use crate::autoencoder::Autoencoder;
use crate::dataset::{Corpus, Style, Triple, TripleSampler};
use crate::error::{Error, Result};
use crate::layers::{accumulate_grads, collect_grads, Conv, ConvVars, Parameters};
use crate::numerics::{gaussian, FloatGrid, Rng, SgdMomentum, Tape, Var};
use crate::parallel::par_map;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    /// Rows of the timestep embedding table.
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden: 32,
            heads: 2,
            head_dim: 8,
            vocab: Style::ALL.len(),
            steps: crate::schedule::DEFAULT_STEPS,
        }
    }
}

impl DenoiserConfig {
    /// Input channels: `[z_t | c_I | c_M | present_I | present_M]`.
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hidden == 0 || self.head_dim == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("model.heads must be >= 1".into()));
        }
        if self.vocab == 0 || self.steps == 0 {
            return Err(Error::Config("model.vocab and model.steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Guidance conditions; `None` is the null condition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionSet {
    /// Content latent, same shape as `z_t`.
    pub content: Option<FloatGrid>,
    /// Style token id.
    pub style: Option<usize>,
    /// Binary `[1, H, W]` mask at latent resolution.
    pub mask: Option<FloatGrid>,
}

impl ConditionSet {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn content_only(c: &FloatGrid) -> Self {
        Self {
            content: Some(c.clone()),
            ..Self::default()
        }
    }

    pub fn style_only(s: usize) -> Self {
        Self {
            style: Some(s),
            ..Self::default()
        }
    }

    pub fn mask_only(m: &FloatGrid) -> Self {
        Self {
            mask: Some(m.clone()),
            ..Self::default()
        }
    }

    fn validate(&self, z_shape: &[usize], vocab: usize) -> Result<()> {
        if let Some(c) = &self.content {
            if c.shape() != z_shape {
                return Err(Error::shape("ConditionSet.content", z_shape, c.shape()));
            }
        }
        if let Some(m) = &self.mask {
            let want = [1, z_shape[1], z_shape[2]];
            if m.shape() != want {
                return Err(Error::shape("ConditionSet.mask", &want, m.shape()));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Format("mask values must be 0 or 1".into()));
            }
        }
        if let Some(s) = self.style {
            if s >= vocab {
                return Err(Error::range("style id", s as f64, format!("0..{vocab}")));
            }
        }
        Ok(())
    }
}

/// Noise estimate and the attention maps of the mid-network block.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub eps: FloatGrid,
    pub attention: AttentionRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    conv_in: Conv,
    time_emb: FloatGrid,
    style_emb: FloatGrid,
    conv_mid: Conv,
    w_q: Vec<FloatGrid>,
    w_k: Vec<FloatGrid>,
    w_v: Vec<FloatGrid>,
    w_o: Vec<FloatGrid>,
    conv_post: Conv,
    conv_out: Conv,
}

/// Tape handles for every parameter, in [`Parameters::params`] order.
#[derive(Clone, Debug)]
pub struct DenoiserVars {
    conv_in: ConvVars,
    time_emb: Var,
    style_emb: Var,
    conv_mid: ConvVars,
    w_q: Vec<Var>,
    w_k: Vec<Var>,
    w_v: Vec<Var>,
    w_o: Vec<Var>,
    conv_post: ConvVars,
    conv_out: ConvVars,
    all: Vec<Var>,
}

impl DenoiserVars {
    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

const EMBED_STD: f64 = 0.5;

impl Denoiser {
    /// Random init with the condition and presence input slices and the
    /// output head set to zero.
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (h, d, l) = (config.hidden, config.head_dim, config.latent_channels);
        let mut conv_in = Conv::new(rng, config.input_channels(), h, 1);
        conv_in.zero_input_channels(l..config.input_channels());
        let time_emb = gaussian(rng, &[config.steps, h]).scale(EMBED_STD);
        let style_emb = gaussian(rng, &[config.vocab, h]).scale(EMBED_STD);
        let conv_mid = Conv::new(rng, h, h, 1);
        let mut proj = |rows: usize, cols: usize| -> Vec<FloatGrid> {
            (0..config.heads)
                .map(|_| gaussian(rng, &[rows, cols]).scale((1.0 / rows as f64).sqrt()))
                .collect()
        };
        let w_q = proj(h, d);
        let w_k = proj(h, d);
        let w_v = proj(h, d);
        let out_scale = (1.0 / (d * config.heads) as f64).sqrt();
        let w_o = (0..config.heads)
            .map(|_| gaussian(rng, &[d, h]).scale(out_scale))
            .collect();
        let conv_post = Conv::new(rng, h, h, 1);
        let conv_out = Conv::zeros(h, l, 1);
        Ok(Self {
            config,
            conv_in,
            time_emb,
            style_emb,
            conv_mid,
            w_q,
            w_k,
            w_v,
            w_o,
            conv_post,
            conv_out,
        })
    }

    /// Weights of `conv_in` reading the `c_I`, `c_M` and presence channels.
    pub fn condition_input_weights(&self) -> Vec<f64> {
        let l = self.config.latent_channels;
        self.conv_in.input_channel_weights(l..self.config.input_channels())
    }

    /// Records parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenoiserVars {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        self.vars_from(vars)
    }

    /// Wraps caller-provided vars, one per parameter in `params()` order.
    pub fn vars_from(&self, all: Vec<Var>) -> DenoiserVars {
        assert_eq!(all.len(), self.params().len(), "one var per parameter");
        let n = self.config.heads;
        let conv = |i: usize, c: &Conv| ConvVars {
            weight: all[i],
            bias: all[i + 1],
            stride: c.stride,
        };
        let heads = |start: usize| all[start..start + n].to_vec();
        DenoiserVars {
            conv_in: conv(0, &self.conv_in),
            time_emb: all[2],
            style_emb: all[3],
            conv_mid: conv(4, &self.conv_mid),
            w_q: heads(6),
            w_k: heads(6 + n),
            w_v: heads(6 + 2 * n),
            w_o: heads(6 + 3 * n),
            conv_post: conv(6 + 4 * n, &self.conv_post),
            conv_out: conv(8 + 4 * n, &self.conv_out),
            all,
        }
    }

    fn check_inputs(&self, z_shape: &[usize], t: usize, conds: &ConditionSet) -> Result<()> {
        if z_shape.len() != 3 || z_shape[0] != self.config.latent_channels {
            return Err(Error::shape(
                "denoiser input",
                &[self.config.latent_channels, 0, 0],
                z_shape,
            ));
        }
        if t == 0 || t > self.config.steps {
            return Err(Error::range("t", t as f64, format!("1..={}", self.config.steps)));
        }
        conds.validate(z_shape, self.config.vocab)
    }

    /// Records the forward pass; returns the noise estimate and the
    /// per-head attention maps.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &DenoiserVars,
        z_t: Var,
        t: usize,
        conds: &ConditionSet,
    ) -> Result<(Var, Vec<Var>)> {
        let (h3, maps) = self.trunk_tape(tape, vars, z_t, t, conds)?;
        let h4 = vars.conv_post.apply(tape, h3);
        let h4 = tape.relu(h4);
        Ok((vars.conv_out.apply(tape, h4), maps))
    }

    /// Everything up to and including the attention block.
    fn trunk_tape(
        &self,
        tape: &mut Tape,
        vars: &DenoiserVars,
        z_t: Var,
        t: usize,
        conds: &ConditionSet,
    ) -> Result<(Var, Vec<Var>)> {
        let z_shape = tape.value(z_t).shape().to_vec();
        self.check_inputs(&z_shape, t, conds)?;
        let (h, w) = (z_shape[1], z_shape[2]);
        let plane = |v: f64| FloatGrid::full(&[1, h, w], v);
        let c_i = conds.content.clone().unwrap_or_else(|| FloatGrid::zeros(&z_shape));
        let c_m = conds.mask.clone().unwrap_or_else(|| plane(0.0));
        let extra = FloatGrid::concat0(&[
            &c_i,
            &c_m,
            &plane(if conds.content.is_some() { 1.0 } else { 0.0 }),
            &plane(if conds.mask.is_some() { 1.0 } else { 0.0 }),
        ])?;
        let extra = tape.constant(extra);
        let x = tape.concat0(&[z_t, extra]);

        let hid = self.config.hidden;
        let mut h1 = vars.conv_in.apply(tape, x);
        let te = tape.slice0(vars.time_emb, t - 1, 1);
        let te = tape.reshape(te, &[hid]);
        h1 = tape.add_channel(h1, te);
        if let Some(s) = conds.style {
            let se = tape.slice0(vars.style_emb, s, 1);
            let se = tape.reshape(se, &[hid]);
            h1 = tape.add_channel(h1, se);
        }
        let h1 = tape.relu(h1);
        let h2 = vars.conv_mid.apply(tape, h1);
        let h2 = tape.relu(h2);

        let flat = tape.reshape(h2, &[hid, h * w]);
        let tokens = tape.transpose(flat);
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        let mut mixed = tokens;
        let mut maps = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let q = tape.matmul(tokens, vars.w_q[head]);
            let q = tape.scale(q, scale);
            let k = tape.matmul(tokens, vars.w_k[head]);
            let v = tape.matmul(tokens, vars.w_v[head]);
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let a = tape.softmax_rows(scores);
            maps.push(a);
            let o = tape.matmul(a, v);
            let o = tape.matmul(o, vars.w_o[head]);
            mixed = tape.add(mixed, o);
        }
        let back = tape.transpose(mixed);
        Ok((tape.reshape(back, &[hid, h, w]), maps))
    }

    pub fn forward(&self, z_t: &FloatGrid, t: usize, conds: &ConditionSet) -> Result<DenoiserOutput> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let z = tape.constant(z_t.clone());
        let (eps, maps) = self.forward_tape(&mut tape, &vars, z, t, conds)?;
        let eps = tape.value(eps).clone();
        if !eps.is_finite() {
            return Err(Error::NonFinite {
                module: "denoiser",
                step: t,
            });
        }
        let attention = AttentionRecord::new(
            maps.iter().map(|&m| tape.value(m).clone()).collect(),
            z_t.shape()[1],
            z_t.shape()[2],
            self.config.head_dim,
        )?;
        Ok(DenoiserOutput { eps, attention })
    }

    /// Mask channel from the attention of a pass with the mask nulled.
    pub fn mask_condition(&self, z_t: &FloatGrid, t: usize, conds: &ConditionSet) -> Result<FloatGrid> {
        let no_mask = ConditionSet {
            mask: None,
            ..conds.clone()
        };
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let z = tape.constant(z_t.clone());
        let (_, maps) = self.trunk_tape(&mut tape, &vars, z, t, &no_mask)?;
        let rec = AttentionRecord::new(
            maps.iter().map(|&m| tape.value(m).clone()).collect(),
            z_t.shape()[1],
            z_t.shape()[2],
            self.config.head_dim,
        )?;
        Ok(mask_condition_from_attention(&rec))
    }

    /// `mean((eps - eps_hat)^2)` for one sample, recorded on `tape`.
    pub fn loss_tape(&self, tape: &mut Tape, vars: &DenoiserVars, sample: &TrainSample) -> Result<Var> {
        let z_t = tape.constant(sample.z_t.clone());
        let (eps_hat, _) = self.forward_tape(tape, vars, z_t, sample.t, &sample.conds)?;
        let target = tape.constant(sample.eps.clone());
        let d = tape.sub(eps_hat, target);
        let sq = tape.mul(d, d);
        Ok(tape.mean(sq))
    }

    /// Loss and parameter gradients for one sample.
    pub fn loss_and_grads(&self, sample: &TrainSample) -> Result<(f64, Vec<FloatGrid>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let loss = self.loss_tape(&mut tape, &vars, sample)?;
        let grads = collect_grads(&tape.backward(loss), vars.vars());
        Ok((tape.value(loss).item(), grads))
    }
}

/// Reshapes the saliency mask of `rec` into a `[1, H, W]` condition.
pub fn mask_condition_from_attention(rec: &AttentionRecord) -> FloatGrid {
    saliency_mask(rec).to_channel()
}

impl Parameters for Denoiser {
    fn params(&self) -> Vec<&FloatGrid> {
        let mut p = self.conv_in.params();
        p.push(&self.time_emb);
        p.push(&self.style_emb);
        p.extend(self.conv_mid.params());
        p.extend(self.w_q.iter());
        p.extend(self.w_k.iter());
        p.extend(self.w_v.iter());
        p.extend(self.w_o.iter());
        p.extend(self.conv_post.params());
        p.extend(self.conv_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut FloatGrid> {
        let mut p = self.conv_in.params_mut();
        p.push(&mut self.time_emb);
        p.push(&mut self.style_emb);
        p.extend(self.conv_mid.params_mut());
        p.extend(self.w_q.iter_mut());
        p.extend(self.w_k.iter_mut());
        p.extend(self.w_v.iter_mut());
        p.extend(self.w_o.iter_mut());
        p.extend(self.conv_post.params_mut());
        p.extend(self.conv_out.params_mut());
        p
    }
}

/// A noised training example with its (possibly nulled) conditions.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub z_t: FloatGrid,
    pub t: usize,
    pub eps: FloatGrid,
    pub conds: ConditionSet,
}

/// Which conditions survive dropout for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Keep {
    pub content: bool,
    pub style: bool,
    pub mask: bool,
}

/// Independent Bernoulli null draws, in content, style, mask order.
pub fn draw_dropout(rng: &mut Rng, p_drop: f64) -> Keep {
    Keep {
        content: !rng.bernoulli(p_drop),
        style: !rng.bernoulli(p_drop),
        mask: !rng.bernoulli(p_drop),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub p_drop: f64,
    /// Held-out examples scored by [`evaluate_loss`].
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            momentum: 0.9,
            p_drop: 0.1,
            eval_samples: 64,
        }
    }
}

/// Encoded content and styled frames of a corpus.
#[derive(Clone, Debug)]
pub struct LatentCorpus {
    /// `content[video][frame]`
    pub content: Vec<Vec<FloatGrid>>,
    /// `styled[video][style][frame]`
    pub styled: Vec<Vec<Vec<FloatGrid>>>,
}

impl LatentCorpus {
    pub fn encode(corpus: &Corpus, ae: &Autoencoder) -> Result<Self> {
        let enc = |seq: &crate::video::FrameSequence| -> Result<Vec<FloatGrid>> {
            seq.frames().map(|f| ae.encode(&f)).collect()
        };
        Ok(Self {
            content: corpus.content.iter().map(enc).collect::<Result<_>>()?,
            styled: corpus
                .styled
                .iter()
                .map(|v| v.iter().map(enc).collect::<Result<_>>())
                .collect::<Result<_>>()?,
        })
    }

    /// `(z0, c_I, style)` for a triple.
    pub fn example(&self, t: &Triple) -> (&FloatGrid, &FloatGrid, usize) {
        (
            &self.styled[t.video][t.style.id()][t.frame],
            &self.content[t.video][t.frame],
            t.style.id(),
        )
    }
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` and noises `z0`.
pub fn noised(
    z0: &FloatGrid,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(FloatGrid, usize, FloatGrid)> {
    let t = 1 + rng.below(schedule.steps());
    let eps = gaussian(rng, z0.shape());
    Ok((schedule.forward_sample(z0, t, &eps)?, t, eps))
}

/// SGD-with-momentum trainer applying per-condition dropout and deriving
/// the mask condition from the model's own attention.
pub struct Trainer {
    pub config: TrainConfig,
    opt: SgdMomentum,
    /// Worker threads for per-sample gradients; results are reduced in
    /// sample order, so the value does not affect the weights.
    pub threads: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        let opt = SgdMomentum::new(config.lr, config.momentum);
        Self {
            config,
            opt,
            threads: 1,
        }
    }

    /// Builds a sample from a clean example, applying dropout.
    pub fn prepare(
        &self,
        model: &Denoiser,
        z0: &FloatGrid,
        content: &FloatGrid,
        style: usize,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<TrainSample> {
        let (z_t, t, eps) = noised(z0, schedule, rng)?;
        let keep = draw_dropout(rng, self.config.p_drop);
        let mut conds = ConditionSet {
            content: keep.content.then(|| content.clone()),
            style: keep.style.then_some(style),
            mask: None,
        };
        if keep.mask {
            conds.mask = Some(model.mask_condition(&z_t, t, &conds)?);
        }
        Ok(TrainSample { z_t, t, eps, conds })
    }

    /// One optimizer step on the mean loss of `batch`.
    pub fn step(&mut self, model: &mut Denoiser, batch: &[TrainSample], step: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("train batch"));
        }
        let results = par_map(batch, self.threads, |s| model.loss_and_grads(s));
        let mut acc = Vec::new();
        let mut total = 0.0;
        for r in results {
            let (l, g) = r?;
            total += l;
            accumulate_grads(&mut acc, g);
        }
        let inv = 1.0 / batch.len() as f64;
        let loss = total * inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                module: "denoiser",
                step,
            });
        }
        let grads: Vec<FloatGrid> = acc.iter().map(|g| g.scale(inv)).collect();
        self.opt.step(&mut model.params_mut(), &grads);
        Ok(loss)
    }
}

/// Fixed held-out evaluation set: all conditions present, mask from the
/// model's attention at evaluation time.
#[derive(Clone, Debug)]
pub struct EvalSet {
    items: Vec<(Triple, usize, FloatGrid)>,
}

impl EvalSet {
    pub fn new(corpus: &Corpus, latents: &LatentCorpus, n: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Self> {
        let held = corpus.heldout();
        if held.is_empty() {
            return Err(Error::Empty("held-out split"));
        }
        let mut rng = Rng::new(seed, 0xE7A1);
        let items = (0..n)
            .map(|_| {
                let tr = held[rng.below(held.len())];
                let t = 1 + rng.below(schedule.steps());
                let (z0, _, _) = latents.example(&tr);
                (tr, t, gaussian(&mut rng, z0.shape()))
            })
            .collect();
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Mean loss over an evaluation set with every condition present.
pub fn evaluate_loss(model: &Denoiser, latents: &LatentCorpus, eval: &EvalSet, schedule: &NoiseSchedule) -> Result<f64> {
    let mut total = 0.0;
    for (tr, t, eps) in &eval.items {
        let (z0, content, style) = latents.example(tr);
        let z_t = schedule.forward_sample(z0, *t, eps)?;
        let mut conds = ConditionSet {
            content: Some(content.clone()),
            style: Some(style),
            mask: None,
        };
        conds.mask = Some(model.mask_condition(&z_t, *t, &conds)?);
        let out = model.forward(&z_t, *t, &conds)?;
        total += out.eps.sub(eps)?.data().iter().map(|v| v * v).sum::<f64>() / eps.len() as f64;
    }
    Ok(total / eval.items.len() as f64)
}

/// Loss trajectory of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

/// Trains `model` on the corpus training split with balanced style tokens.
pub fn train_denoiser(
    model: &mut Denoiser,
    corpus: &Corpus,
    latents: &LatentCorpus,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    threads: usize,
    rng: &mut Rng,
) -> Result<TrainReport> {
    let mut sampler = TripleSampler::new(corpus)?;
    let eval = EvalSet::new(corpus, latents, config.eval_samples, schedule, rng.seed())?;
    let heldout_initial = evaluate_loss(model, latents, &eval, schedule)?;
    let mut trainer = Trainer::new(config.clone());
    trainer.threads = threads;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let tr = sampler.sample(rng);
            let (z0, content, style) = latents.example(&tr);
            batch.push(trainer.prepare(model, z0, content, style, schedule, rng)?);
        }
        let loss = trainer.step(model, &batch, step)?;
        if step % 100 == 0 {
            log::info!("denoiser step {step}: loss {loss:.4}");
        }
        losses.push(loss);
    }
    let heldout_final = evaluate_loss(model, latents, &eval, schedule)?;
    Ok(TrainReport {
        losses,
        heldout_initial,
        heldout_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            hidden: 6,
            heads: 2,
            head_dim: 3,
            vocab: 5,
            steps: 10,
        }
    }

    /// Gives the zero-initialised head random values so every parameter
    /// influences the output.
    fn randomize_head(m: &mut Denoiser, rng: &mut Rng) {
        m.conv_out = Conv::new(rng, m.config.hidden, m.config.latent_channels, 1);
    }

    fn conds(rng: &mut Rng, shape: &[usize]) -> ConditionSet {
        let mask = gaussian(rng, &[1, shape[1], shape[2]]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        ConditionSet {
            content: Some(gaussian(rng, shape)),
            style: Some(3),
            mask: Some(mask),
        }
    }

    #[test]
    fn output_shape_and_attention_rows() {
        let mut rng = Rng::seeded(1);
        let mut m = Denoiser::new(small(), &mut rng).unwrap();
        randomize_head(&mut m, &mut rng);
        let z = gaussian(&mut rng, &[2, 4, 4]);
        let out = m.forward(&z, 3, &conds(&mut rng, &[2, 4, 4])).unwrap();
        assert_eq!(out.eps.shape(), z.shape());
        assert_eq!(out.attention.heads(), 2);
        for a in out.attention.maps() {
            for row in a.data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let null = m.forward(&z, 3, &ConditionSet::null()).unwrap();
        assert!(null.eps.is_finite());
        assert!(m.forward(&z, 0, &ConditionSet::null()).is_err());
        assert!(m.forward(&z, 11, &ConditionSet::null()).is_err());
        assert!(m.forward(&z, 1, &ConditionSet::style_only(5)).is_err());
        assert!(m.forward(&gaussian(&mut rng, &[3, 4, 4]), 1, &ConditionSet::null()).is_err());
    }

    #[test]
    fn fresh_weights_ignore_content_and_mask() {
        let mut rng = Rng::seeded(2);
        let mut m = Denoiser::new(small(), &mut rng).unwrap();
        assert!(m.condition_input_weights().iter().all(|&w| w == 0.0));
        randomize_head(&mut m, &mut rng);
        let z = gaussian(&mut rng, &[2, 4, 4]);
        let a = conds(&mut rng, &[2, 4, 4]);
        let b = conds(&mut rng, &[2, 4, 4]);
        let ea = m.forward(&z, 5, &a).unwrap().eps;
        assert_eq!(ea, m.forward(&z, 5, &b).unwrap().eps);
        let nulled = ConditionSet {
            content: None,
            mask: None,
            ..a
        };
        assert_eq!(ea, m.forward(&z, 5, &nulled).unwrap().eps);
    }

    #[test]
    fn initial_loss_is_unit_variance() {
        // Zero head => eps_hat = 0 => E[mean(eps^2)] = 1.
        let mut rng = Rng::seeded(3);
        let m = Denoiser::new(small(), &mut rng).unwrap();
        let mut total = 0.0;
        for _ in 0..20 {
            let eps = gaussian(&mut rng, &[2, 8, 8]);
            let s = TrainSample {
                z_t: gaussian(&mut rng, &[2, 8, 8]),
                t: 4,
                eps,
                conds: ConditionSet::null(),
            };
            total += m.loss_and_grads(&s).unwrap().0;
        }
        assert!((total / 20.0 - 1.0).abs() < 0.1, "{}", total / 20.0);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = Rng::seeded(4);
        let mut m = Denoiser::new(small(), &mut rng).unwrap();
        randomize_head(&mut m, &mut rng);
        // Break the zero init so condition slices carry gradient signal too.
        for w in m.conv_in.weight.data_mut().iter_mut().filter(|w| **w == 0.0) {
            *w = 0.1 * rng.uniform_range(-1.0, 1.0);
        }
        let sample = TrainSample {
            z_t: gaussian(&mut rng, &[2, 4, 4]),
            t: 7,
            eps: gaussian(&mut rng, &[2, 4, 4]),
            conds: conds(&mut rng, &[2, 4, 4]),
        };
        let params: Vec<FloatGrid> = m.params().into_iter().cloned().collect();
        for k in 0..params.len() {
            let err = grad_check(
                |tape, x| {
                    let vars = params
                        .iter()
                        .enumerate()
                        .map(|(j, p)| if j == k { x } else { tape.constant(p.clone()) })
                        .collect();
                    let vars = m.vars_from(vars);
                    m.loss_tape(tape, &vars, &sample).unwrap()
                },
                &params[k],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "param {k}: {err}");
        }
    }

    #[test]
    fn dropout_frequencies() {
        let mut rng = Rng::seeded(5);
        let mut nulled = [0usize; 3];
        for _ in 0..1000 {
            let k = draw_dropout(&mut rng, 0.1);
            nulled[0] += !k.content as usize;
            nulled[1] += !k.style as usize;
            nulled[2] += !k.mask as usize;
        }
        // 4 sigma of Binomial(1000, 0.1) is ~38.
        for n in nulled {
            assert!((n as f64 - 100.0).abs() < 38.0, "{nulled:?}");
        }
        let mut rng = Rng::seeded(6);
        for _ in 0..1000 {
            let k = draw_dropout(&mut rng, 0.0);
            assert!(k.content && k.style && k.mask);
        }
    }

    #[test]
    fn training_steps_are_deterministic_and_thread_independent() {
        let run = |threads: usize| {
            let mut rng = Rng::seeded(7);
            let mut m = Denoiser::new(small(), &mut rng).unwrap();
            let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
            let mut trainer = Trainer::new(TrainConfig {
                lr: 1e-2,
                ..TrainConfig::default()
            });
            trainer.threads = threads;
            let z0 = gaussian(&mut rng, &[2, 4, 4]);
            let c = gaussian(&mut rng, &[2, 4, 4]);
            let mut losses = Vec::new();
            for step in 0..4 {
                let batch: Vec<_> = (0..3)
                    .map(|_| trainer.prepare(&m, &z0, &c, 1, &sched, &mut rng).unwrap())
                    .collect();
                losses.push(trainer.step(&mut m, &batch, step).unwrap());
            }
            (m, losses)
        };
        let (a, la) = run(1);
        let (b, lb) = run(1);
        let (c, lc) = run(3);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(la, lb);
        assert_eq!(la, lc);
        assert!(a.conv_out.weight.data().iter().any(|&w| w != 0.0));
    }
}
