//! Latent stage: an encoder/decoder pair between pixel frames and latents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{accumulate_grads, collect_grads, Conv, ConvVars, Parameters};
use crate::numerics::{Adam, FloatGrid, Rng, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeMode {
    Identity,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub mode: AeMode,
    /// Pixel channels.
    pub channels: usize,
    pub latent_channels: usize,
    pub hidden: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            mode: AeMode::Learned,
            channels: 3,
            latent_channels: 4,
            hidden: 16,
        }
    }
}

impl AutoencoderConfig {
    pub fn identity(channels: usize) -> Self {
        Self {
            mode: AeMode::Identity,
            channels,
            latent_channels: channels,
            ..Self::default()
        }
    }

    /// Latent `[C, H, W]` for a pixel frame of `[channels, height, width]`.
    pub fn latent_shape(&self, height: usize, width: usize) -> [usize; 3] {
        match self.mode {
            AeMode::Identity => [self.channels, height, width],
            AeMode::Learned => [self.latent_channels, height.div_ceil(2), width.div_ceil(2)],
        }
    }
}

/// Encoder: conv + relu, strided conv. Decoder: 2x upsample, conv + relu, conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    layers: Vec<Conv>,
}

/// Tape handles of the four conv layers; empty in identity mode.
#[derive(Clone, Debug)]
pub struct AeVars(Vec<ConvVars>);

impl AeVars {
    pub fn vars(&self) -> Vec<Var> {
        self.0.iter().flat_map(|c| c.vars()).collect()
    }
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, rng: &mut Rng) -> Self {
        let layers = match config.mode {
            AeMode::Identity => Vec::new(),
            AeMode::Learned => {
                let (c, h, l) = (config.channels, config.hidden, config.latent_channels);
                vec![
                    Conv::new(rng, c, h, 1),
                    Conv::new(rng, h, l, 2),
                    Conv::new(rng, l, h, 1),
                    Conv::new(rng, h, c, 1),
                ]
            }
        };
        Self { config, layers }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            config: AutoencoderConfig::identity(channels),
            layers: Vec::new(),
        }
    }

    pub fn mode(&self) -> AeMode {
        self.config.mode
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AeVars {
        AeVars(self.layers.iter().map(|c| c.bind_with(tape, trainable)).collect())
    }

    pub fn encode_tape(&self, tape: &mut Tape, vars: &AeVars, x: Var) -> Var {
        match self.config.mode {
            AeMode::Identity => x,
            AeMode::Learned => {
                let h = vars.0[0].apply(tape, x);
                let h = tape.relu(h);
                vars.0[1].apply(tape, h)
            }
        }
    }

    pub fn decode_tape(&self, tape: &mut Tape, vars: &AeVars, z: Var) -> Var {
        match self.config.mode {
            AeMode::Identity => z,
            AeMode::Learned => {
                let u = tape.upsample2(z);
                let h = vars.0[2].apply(tape, u);
                let h = tape.relu(h);
                vars.0[3].apply(tape, h)
            }
        }
    }

    fn check_channels(&self, op: &'static str, g: &FloatGrid, want: usize) -> Result<()> {
        if g.rank() != 3 || g.shape()[0] != want {
            return Err(Error::shape(op, &[want, 0, 0], g.shape()));
        }
        Ok(())
    }

    pub fn encode(&self, x: &FloatGrid) -> Result<FloatGrid> {
        self.check_channels("encode", x, self.config.channels)?;
        if self.mode() == AeMode::Identity {
            return Ok(x.clone());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.encode_tape(&mut tape, &vars, xv);
        Ok(tape.value(z).clone())
    }

    pub fn decode(&self, z: &FloatGrid) -> Result<FloatGrid> {
        let want = match self.mode() {
            AeMode::Identity => self.config.channels,
            AeMode::Learned => self.config.latent_channels,
        };
        self.check_channels("decode", z, want)?;
        if self.mode() == AeMode::Identity {
            return Ok(z.clone());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let x = self.decode_tape(&mut tape, &vars, zv);
        Ok(tape.value(x).clone())
    }

    /// Mean squared reconstruction error over `frames`.
    pub fn reconstruction_mse(&self, frames: &[FloatGrid]) -> Result<f64> {
        if frames.is_empty() {
            return Err(Error::Empty("reconstruction_mse"));
        }
        let mut total = 0.0;
        for f in frames {
            let r = self.decode(&self.encode(f)?)?;
            total += r.sub(f)?.data().iter().map(|v| v * v).sum::<f64>() / f.len() as f64;
        }
        Ok(total / frames.len() as f64)
    }
}

impl Parameters for Autoencoder {
    fn params(&self) -> Vec<&FloatGrid> {
        self.layers.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut FloatGrid> {
        self.layers.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch: 8,
            lr: 3e-3,
        }
    }
}

/// Fits a learned autoencoder to `frames` with full-frame MSE.
/// Returns the weights and the per-step batch losses.
pub fn train_autoencoder(
    frames: &[FloatGrid],
    config: &AutoencoderConfig,
    train: &AeTrainConfig,
    rng: &mut Rng,
) -> Result<(Autoencoder, Vec<f64>)> {
    if frames.is_empty() {
        return Err(Error::Empty("train_autoencoder"));
    }
    let mut ae = Autoencoder::new(config.clone(), rng);
    if ae.mode() == AeMode::Identity {
        return Ok((ae, Vec::new()));
    }
    let mut opt = Adam::new(train.lr);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut acc = Vec::new();
        let mut batch_loss = 0.0;
        for _ in 0..train.batch {
            let x = &frames[rng.below(frames.len())];
            let mut tape = Tape::new();
            let vars = ae.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let z = ae.encode_tape(&mut tape, &vars, xv);
            let y = ae.decode_tape(&mut tape, &vars, z);
            let d = tape.sub(y, xv);
            let sq = tape.mul(d, d);
            let loss = tape.mean(sq);
            batch_loss += tape.value(loss).item();
            accumulate_grads(&mut acc, collect_grads(&tape.backward(loss), &vars.vars()));
        }
        let scale = 1.0 / train.batch as f64;
        let grads: Vec<FloatGrid> = acc.iter().map(|g| g.scale(scale)).collect();
        let loss = batch_loss * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                module: "autoencoder",
                step,
            });
        }
        opt.step(&mut ae.params_mut(), &grads);
        losses.push(loss);
        if step % 250 == 0 {
            log::debug!("autoencoder step {step}: loss {loss:.5}");
        }
    }
    Ok((ae, losses))
}
