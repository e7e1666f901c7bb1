//! Guided ancestral sampling of a frame sequence.

use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::dataset::Style;
use crate::denoiser::{mask_condition_from_attention, ConditionSet, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{composed_guidance, GuidanceScales};
use crate::numerics::{gaussian, FloatGrid, Rng};
use crate::parallel::par_map;
use crate::schedule::NoiseSchedule;
use crate::structure::{latent_gradient, FeatureExtractor, StructureConfig, StructureTarget};
use crate::temporal::Deflicker;
use crate::video::FrameSequence;

/// Scaling of the reverse-step mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanConvention {
    /// `(z - beta_t / sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
    Paper,
    /// `(z - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)`.
    #[default]
    Ddpm,
}

impl std::str::FromStr for MeanConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "ddpm" => Ok(Self::Ddpm),
            other => Err(Error::Config(format!("unknown mean convention '{other}'"))),
        }
    }
}

/// Mean of `p(z_{t-1} | z_t)` for a noise estimate `eps`.
pub fn step_mean(
    z_t: &FloatGrid,
    eps: &FloatGrid,
    t: usize,
    schedule: &NoiseSchedule,
    convention: MeanConvention,
) -> Result<FloatGrid> {
    z_t.expect_same_shape("step_mean", eps)?;
    let beta = schedule.beta(t)?;
    let ab = schedule.alpha_bar(t)?;
    let denom = match convention {
        MeanConvention::Paper => ab.sqrt(),
        MeanConvention::Ddpm => schedule.alpha(t)?.sqrt(),
    };
    z_t.lincomb(1.0 / denom, eps, -beta / ((1.0 - ab).sqrt() * denom))
}

/// One ancestral step with fixed variance `beta_tilde_t`. No noise is drawn
/// at `t = 1`.
pub fn ddpm_step(
    z_t: &FloatGrid,
    eps: &FloatGrid,
    t: usize,
    schedule: &NoiseSchedule,
    convention: MeanConvention,
    rng: &mut Rng,
) -> Result<FloatGrid> {
    let mean = step_mean(z_t, eps, t, schedule, convention)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = schedule.posterior_variance(t)?.sqrt();
    mean.lincomb(1.0, &gaussian(rng, z_t.shape()), sigma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub scales: GuidanceScales,
    pub structure: StructureConfig,
    /// Fraction of `steps` of forward noise applied to each input frame.
    pub noising_strength: f64,
    pub mean_convention: MeanConvention,
    pub style: Style,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            seed: 0,
            scales: GuidanceScales::default(),
            structure: StructureConfig::default(),
            noising_strength: 0.8,
            mean_convention: MeanConvention::Ddpm,
            style: Style::Invert,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::range("steps", self.steps as f64, format!("[1, {}]", schedule.steps())));
        }
        if !(self.noising_strength > 0.0 && self.noising_strength <= 1.0) {
            return Err(Error::range("noising_strength", self.noising_strength, "(0, 1]"));
        }
        self.scales.validate()?;
        self.structure.validate()
    }

    /// First denoising step, `round(noising_strength * steps)`.
    pub fn start_step(&self) -> usize {
        (self.noising_strength * self.steps as f64).round() as usize
    }
}

/// Everything a sampling run reads.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub schedule: NoiseSchedule,
    pub autoencoder: Autoencoder,
    pub denoiser: Denoiser,
    pub features: FeatureExtractor,
    pub deflicker: Option<Deflicker>,
}

/// Per-step intermediates of one frame.
#[derive(Clone, Debug, Default)]
pub struct FrameTrace {
    /// `(t, z_t)` before each step, then `(0, z_0)`.
    pub latents: Vec<(usize, FloatGrid)>,
    /// `(t, mask)` with the `[1, H, W]` saliency mask of each step.
    pub masks: Vec<(usize, FloatGrid)>,
    pub structure_losses: Vec<f64>,
    /// Rng position when each step starts.
    pub rng_positions: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub frame: FloatGrid,
    pub trace: Option<FrameTrace>,
}

fn non_finite(step: usize) -> Error {
    Error::NonFinite {
        module: "sampler",
        step,
    }
}

/// Stylizes a single `[C, H, W]` frame.
pub fn stylize_frame(x: &FloatGrid, cfg: &SamplerConfig, pipe: &Pipeline, record: bool) -> Result<FrameOutput> {
    cfg.validate(&pipe.schedule)?;
    if cfg.style.id() >= pipe.denoiser.config.vocab {
        return Err(Error::range("style", cfg.style.id() as f64, format!("< {}", pipe.denoiser.config.vocab)));
    }
    let ae = &pipe.autoencoder;
    let schedule = &pipe.schedule;
    let mut trace = record.then(FrameTrace::default);
    let mut rng = Rng::seeded(cfg.seed);

    let base_noise = gaussian(&mut rng, x.shape());
    let t_start = cfg.start_step();
    let x_t = if t_start == 0 {
        x.clone()
    } else {
        schedule.forward_sample(x, t_start, &base_noise)?
    };
    let mut z = ae.encode(&x_t)?;
    let content = ae.encode(x)?;
    let target = StructureTarget::new(x, &pipe.features, cfg.structure.mode)?;
    let lambda = cfg.structure.lambda;
    let scales = cfg.scales;
    let style = cfg.style.id();

    for t in (1..=t_start).rev() {
        if let Some(tr) = trace.as_mut() {
            tr.latents.push((t, z.clone()));
            tr.rng_positions.push(rng.position());
        }
        let cond = ConditionSet {
            content: Some(content.clone()),
            style: Some(style),
            mask: None,
        };
        let out = pipe.denoiser.forward(&z, t, &cond)?;
        let mask = mask_condition_from_attention(&out.attention);

        let shifted = if lambda != 0.0 {
            let g = latent_gradient(&z, t, &out.eps, &target, ae, &pipe.features, schedule)?;
            if let Some(tr) = trace.as_mut() {
                tr.structure_losses.push(g.loss);
            }
            z.lincomb(1.0, &g.grad, -lambda)?
        } else {
            z.clone()
        };

        let passes = [
            (scales.null_weight(), ConditionSet::null()),
            (scales.s_i, ConditionSet::content_only(&content)),
            (scales.s_t, ConditionSet::style_only(style)),
            (scales.s_m, ConditionSet::mask_only(&mask)),
        ];
        // A zero-weight term contributes exactly nothing, so its pass is skipped.
        let mut eps: Vec<Option<FloatGrid>> = Vec::with_capacity(4);
        for (weight, conds) in &passes {
            eps.push(if *weight == 0.0 {
                None
            } else {
                Some(pipe.denoiser.forward(&shifted, t, conds)?.eps)
            });
        }
        let filler = FloatGrid::zeros(z.shape());
        let pick = |i: usize| eps[i].as_ref().unwrap_or(&filler);
        let eps_tilde = composed_guidance(pick(0), pick(1), pick(2), pick(3), &scales)?;

        z = ddpm_step(&z, &eps_tilde, t, schedule, cfg.mean_convention, &mut rng)?;
        if !z.is_finite() {
            return Err(non_finite(t));
        }
        if let Some(tr) = trace.as_mut() {
            tr.masks.push((t, mask));
        }
    }
    if let Some(tr) = trace.as_mut() {
        tr.latents.push((0, z.clone()));
    }
    let frame = ae.decode(&z)?;
    if !frame.is_finite() {
        return Err(non_finite(0));
    }
    Ok(FrameOutput {
        frame: frame.clip(0.0, 1.0),
        trace,
    })
}

#[derive(Clone, Debug)]
pub struct VideoOutput {
    /// Per-frame sampler outputs before temporal refinement.
    pub raw: FrameSequence,
    /// Final frames; equal to `raw` when the pipeline has no deflicker net.
    pub refined: FrameSequence,
    pub traces: Vec<FrameTrace>,
}

/// Stylizes every frame from the same seed, then chains the deflicker net.
pub fn stylize_video(
    seq: &FrameSequence,
    cfg: &SamplerConfig,
    pipe: &Pipeline,
    threads: usize,
    record: bool,
) -> Result<VideoOutput> {
    if seq.is_empty() {
        return Err(Error::Empty("stylize_video"));
    }
    let frames: Vec<FloatGrid> = seq.frames().collect();
    let outputs = par_map(&frames, threads, |x| stylize_frame(x, cfg, pipe, record));
    let mut raw = Vec::with_capacity(frames.len());
    let mut traces = Vec::new();
    for (f, out) in outputs.into_iter().enumerate() {
        let out = out?;
        log::debug!("frame {f} stylized");
        raw.push(out.frame);
        traces.extend(out.trace);
    }
    let mut raw = FrameSequence::from_frames(&raw)?;
    raw.fps = seq.fps;
    let refined = match &pipe.deflicker {
        Some(net) => {
            let mut r = net.refine_sequence(&raw)?;
            r.fps = seq.fps;
            r
        }
        None => raw.clone(),
    };
    Ok(VideoOutput { raw, refined, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::layers::Parameters;
    use crate::structure::StructureMode;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(30, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn ddpm_mean_matches_posterior_mean_for_every_t() {
        let s = schedule();
        let mut rng = Rng::seeded(1);
        for t in 1..=30 {
            let z = gaussian(&mut rng, &[2, 3, 3]);
            let eps = gaussian(&mut rng, &[2, 3, 3]);
            let mean = step_mean(&z, &eps, t, &s, MeanConvention::Ddpm).unwrap();
            let x0 = s.predict_x0_from_eps(&z, &eps, t).unwrap();
            let post = s.posterior_mean(&z, &x0, t).unwrap();
            assert!(mean.max_abs_diff(&post) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn paper_mean_differs_by_the_alpha_ratio() {
        let s = schedule();
        let mut rng = Rng::seeded(2);
        let z = gaussian(&mut rng, &[1, 2, 2]);
        let eps = gaussian(&mut rng, &[1, 2, 2]);
        for t in [1, 2, 15, 30] {
            let p = step_mean(&z, &eps, t, &s, MeanConvention::Paper).unwrap();
            let d = step_mean(&z, &eps, t, &s, MeanConvention::Ddpm).unwrap();
            let ratio = (s.alpha(t).unwrap() / s.alpha_bar(t).unwrap()).sqrt();
            assert!(p.max_abs_diff(&d.scale(ratio)) < 1e-12);
        }
    }

    #[test]
    fn ddpm_step_noise_only_after_first_step() {
        let s = schedule();
        let z = FloatGrid::zeros(&[1, 4, 4]);
        let mut rng = Rng::seeded(3);
        let out = ddpm_step(&z, &z, 1, &s, MeanConvention::Ddpm, &mut rng).unwrap();
        assert_eq!(out, z);
        assert_eq!(rng.position(), 0);
        let out = ddpm_step(&z, &z, 10, &s, MeanConvention::Ddpm, &mut rng).unwrap();
        let expected = gaussian(&mut Rng::seeded(3), &[1, 4, 4]).scale(s.posterior_variance(10).unwrap().sqrt());
        assert!(out.max_abs_diff(&expected) < 1e-15);
        assert!(ddpm_step(&z, &z, 0, &s, MeanConvention::Ddpm, &mut rng).is_err());
        assert!(ddpm_step(&z, &z, 31, &s, MeanConvention::Ddpm, &mut rng).is_err());
    }

    fn pipeline(seed: u64) -> Pipeline {
        let mut rng = Rng::seeded(seed);
        let mut denoiser = Denoiser::new(
            DenoiserConfig {
                latent_channels: 3,
                hidden: 6,
                heads: 2,
                head_dim: 4,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        // Random output head so the conditions actually matter.
        for p in denoiser.params_mut() {
            if p.data().iter().all(|&v| v == 0.0) {
                *p = gaussian(&mut rng, p.shape()).scale(0.1);
            }
        }
        Pipeline {
            schedule: schedule(),
            autoencoder: Autoencoder::identity(3),
            denoiser,
            features: FeatureExtractor::standard(3),
            deflicker: None,
        }
    }

    fn frame(seed: u64) -> FloatGrid {
        gaussian(&mut Rng::seeded(seed), &[3, 8, 8]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
    }

    fn config() -> SamplerConfig {
        SamplerConfig {
            steps: 10,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical_and_in_range() {
        let pipe = pipeline(1);
        let a = stylize_frame(&frame(1), &config(), &pipe, false).unwrap().frame;
        let b = stylize_frame(&frame(1), &config(), &pipe, false).unwrap().frame;
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let other = SamplerConfig { seed: 6, ..config() };
        assert_ne!(a, stylize_frame(&frame(1), &other, &pipe, false).unwrap().frame);
    }

    #[test]
    fn zero_scales_match_unconditional_loop() {
        let pipe = pipeline(2);
        let cfg = SamplerConfig {
            scales: GuidanceScales::new(0.0, 0.0, 0.0),
            structure: StructureConfig {
                lambda: 0.0,
                ..Default::default()
            },
            ..config()
        };
        let x = frame(3);
        let got = stylize_frame(&x, &cfg, &pipe, false).unwrap().frame;

        let s = &pipe.schedule;
        let mut rng = Rng::seeded(cfg.seed);
        let noise = gaussian(&mut rng, x.shape());
        let mut z = s.forward_sample(&x, 8, &noise).unwrap();
        for t in (1..=8).rev() {
            let eps = pipe.denoiser.forward(&z, t, &ConditionSet::null()).unwrap().eps;
            z = ddpm_step(&z, &eps, t, s, MeanConvention::Ddpm, &mut rng).unwrap();
        }
        assert_eq!(got, z.clip(0.0, 1.0));
    }

    #[test]
    fn vanishing_noise_reconstructs_the_input() {
        let pipe = pipeline(3);
        let cfg = SamplerConfig {
            noising_strength: 0.01,
            ..config()
        };
        let x = frame(4);
        assert_eq!(cfg.start_step(), 0);
        assert_eq!(stylize_frame(&x, &cfg, &pipe, false).unwrap().frame, x);
    }

    #[test]
    fn structure_term_changes_output() {
        let pipe = pipeline(4);
        let x = frame(5);
        let base = SamplerConfig {
            structure: StructureConfig {
                mode: StructureMode::PooledCosine,
                lambda: 0.0,
            },
            ..config()
        };
        let with = SamplerConfig {
            structure: StructureConfig {
                mode: StructureMode::PooledCosine,
                lambda: 5.0,
            },
            ..config()
        };
        let a = stylize_frame(&x, &base, &pipe, false).unwrap().frame;
        let b = stylize_frame(&x, &with, &pipe, false).unwrap().frame;
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn trace_records_every_step() {
        let pipe = pipeline(5);
        let out = stylize_frame(&frame(6), &config(), &pipe, true).unwrap();
        let tr = out.trace.unwrap();
        assert_eq!(tr.masks.len(), 8);
        assert_eq!(tr.latents.len(), 9);
        assert_eq!(tr.structure_losses.len(), 8);
        assert_eq!(tr.masks[0].1.shape(), &[1, 8, 8]);
        // Base noise is 192 words; each step after the first consumes 192 more.
        let expected: Vec<u64> = (0..8).map(|i| 192 * (i + 1)).collect();
        assert_eq!(tr.rng_positions, expected);
    }

    #[test]
    fn every_frame_reuses_the_same_noise_stream() {
        let pipe = pipeline(6);
        let seq = FrameSequence::from_frames(&[frame(7), frame(8), frame(9)]).unwrap();
        let out = stylize_video(&seq, &config(), &pipe, 1, true).unwrap();
        assert_eq!(out.traces.len(), 3);
        for tr in &out.traces[1..] {
            assert_eq!(tr.rng_positions, out.traces[0].rng_positions);
        }
        // Same base noise: equal inputs give equal outputs regardless of position.
        let same = FrameSequence::from_frames(&[frame(7), frame(7)]).unwrap();
        let out = stylize_video(&same, &config(), &pipe, 1, false).unwrap();
        assert_eq!(out.raw.frame(0), out.raw.frame(1));
    }

    #[test]
    fn threads_do_not_change_results() {
        let pipe = pipeline(7);
        let seq = FrameSequence::from_frames(&[frame(1), frame(2), frame(3)]).unwrap();
        let a = stylize_video(&seq, &config(), &pipe, 1, false).unwrap();
        let b = stylize_video(&seq, &config(), &pipe, 3, false).unwrap();
        assert_eq!(a.refined, b.refined);
    }

    #[test]
    fn single_frame_skips_temporal() {
        let mut pipe = pipeline(8);
        let mut rng = Rng::seeded(1);
        let mut net = Deflicker::new(3, 4, &mut rng);
        for p in net.params_mut() {
            *p = gaussian(&mut rng, p.shape());
        }
        pipe.deflicker = Some(net);
        let seq = FrameSequence::from_frames(&[frame(1)]).unwrap();
        let out = stylize_video(&seq, &config(), &pipe, 1, false).unwrap();
        let single = stylize_frame(&frame(1), &config(), &pipe, false).unwrap().frame;
        assert_eq!(out.refined.frame(0), single);
    }

    #[test]
    fn non_finite_model_aborts_at_first_step() {
        let mut pipe = pipeline(10);
        for p in pipe.denoiser.params_mut() {
            *p = p.map(|_| f64::NAN);
        }
        match stylize_frame(&frame(1), &config(), &pipe, false) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, config().start_step()),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let pipe = pipeline(9);
        let x = frame(1);
        for cfg in [
            SamplerConfig { steps: 0, ..config() },
            SamplerConfig { steps: 31, ..config() },
            SamplerConfig {
                noising_strength: 0.0,
                ..config()
            },
            SamplerConfig {
                noising_strength: 1.5,
                ..config()
            },
        ] {
            assert!(stylize_frame(&x, &cfg, &pipe, false).is_err());
        }
        let empty = FrameSequence::new(FloatGrid::zeros(&[0, 3, 8, 8])).unwrap();
        assert!(stylize_video(&empty, &config(), &pipe, 1, false).is_err());
    }
}
