//! Training and loading steps shared by the command line and tests.

use std::path::Path;

use serde::Serialize;

use crate::autoencoder::{train_autoencoder, AeMode, Autoencoder};
use crate::config::RunConfig;
use crate::dataset::Corpus;
use crate::denoiser::{train_denoiser, Denoiser, LatentCorpus, TrainReport};
use crate::error::Result;
use crate::io;
use crate::numerics::{FloatGrid, Rng};
use crate::sampler::Pipeline;
use crate::structure::FeatureExtractor;
use crate::temporal::{flicker_corpus, train_deflicker, Deflicker, FlickerExample};

const AE_STREAM: u64 = 0;
const DENOISER_STREAM: u64 = 1;
const DEFLICKER_STREAM: u64 = 2;
const FLICKER_STREAM: u64 = 3;

fn stream(cfg: &RunConfig, index: u64) -> Rng {
    Rng::seeded(cfg.training.seed).derive(index)
}

/// Content and styled frames of the given videos.
pub fn frames_of(corpus: &Corpus, videos: &[usize]) -> Vec<FloatGrid> {
    let mut out = Vec::new();
    for &v in videos {
        out.extend(corpus.content[v].frames());
        for s in &corpus.styled[v] {
            out.extend(s.frames());
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct AeReport {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub heldout_mse: f64,
}

pub fn fit_autoencoder(corpus: &Corpus, cfg: &RunConfig) -> Result<(Autoencoder, AeReport)> {
    let train = frames_of(corpus, &corpus.train_videos);
    let (ae, losses) = train_autoencoder(
        &train,
        &cfg.autoencoder_config(),
        &cfg.training.autoencoder,
        &mut stream(cfg, AE_STREAM),
    )?;
    let heldout_mse = ae.reconstruction_mse(&frames_of(corpus, &corpus.heldout_videos))?;
    let report = AeReport {
        steps: losses.len(),
        final_loss: losses.last().copied(),
        heldout_mse,
    };
    Ok((ae, report))
}

pub fn fit_denoiser(corpus: &Corpus, ae: &Autoencoder, cfg: &RunConfig, threads: usize) -> Result<(Denoiser, TrainReport)> {
    let schedule = cfg.schedule()?;
    let latents = LatentCorpus::encode(corpus, ae)?;
    let mut rng = stream(cfg, DENOISER_STREAM);
    let mut model = Denoiser::new(cfg.denoiser_config(), &mut rng)?;
    let report = train_denoiser(&mut model, corpus, &latents, &schedule, &cfg.training.denoiser, threads, &mut rng)?;
    Ok((model, report))
}

/// Flickered oracle-styled versions of `videos`.
pub fn flicker_examples(corpus: &Corpus, videos: &[usize], cfg: &RunConfig, salt: u64) -> Result<Vec<FlickerExample>> {
    let mut rng = stream(cfg, FLICKER_STREAM).derive(salt);
    flicker_corpus(corpus, videos, cfg.training.flicker_amplitude, &mut rng)
}

pub fn fit_deflicker(corpus: &Corpus, cfg: &RunConfig) -> Result<(Deflicker, Vec<f64>)> {
    let data = flicker_examples(corpus, &corpus.train_videos, cfg, 0)?;
    train_deflicker(&data, &cfg.temporal, &cfg.training.deflicker, &mut stream(cfg, DEFLICKER_STREAM))
}

pub fn load_autoencoder(cfg: &RunConfig, path: &Path) -> Result<Autoencoder> {
    let ae_cfg = cfg.autoencoder_config();
    if ae_cfg.mode == AeMode::Identity {
        return Ok(Autoencoder::identity(ae_cfg.channels));
    }
    let mut ae = Autoencoder::new(ae_cfg, &mut Rng::seeded(0));
    io::load_params(path, &mut ae)?;
    Ok(ae)
}

pub fn load_denoiser(cfg: &RunConfig, path: &Path) -> Result<Denoiser> {
    let mut model = Denoiser::new(cfg.denoiser_config(), &mut Rng::seeded(0))?;
    io::load_params(path, &mut model)?;
    Ok(model)
}

pub fn load_deflicker(cfg: &RunConfig, path: &Path) -> Result<Deflicker> {
    let mut net = Deflicker::new(cfg.model.channels, cfg.temporal.hidden, &mut Rng::seeded(0));
    io::load_params(path, &mut net)?;
    Ok(net)
}

/// Weights from `cfg.paths`; the deflicker net only when `deflicker` is set.
pub fn load_pipeline(cfg: &RunConfig, deflicker: bool) -> Result<Pipeline> {
    Ok(Pipeline {
        schedule: cfg.schedule()?,
        autoencoder: load_autoencoder(cfg, &cfg.paths.autoencoder)?,
        denoiser: load_denoiser(cfg, &cfg.paths.denoiser)?,
        features: FeatureExtractor::standard(cfg.model.channels),
        deflicker: if deflicker {
            Some(load_deflicker(cfg, &cfg.paths.deflicker)?)
        } else {
            None
        },
    })
}
