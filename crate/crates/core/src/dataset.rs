//! Synthetic content videos, procedural oracle styles and the training corpus.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{FloatGrid, Rng};
use crate::video::FrameSequence;

/// Closed style vocabulary; each token is bound to a pixel transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Plain,
    Invert,
    Stripes,
    Warm,
    Mosaic,
}

pub const STRIPE_PERIOD: usize = 8;
pub const MOSAIC_BLOCK: usize = 4;
const WARM_GAINS: [f64; 3] = [1.3, 1.0, 0.6];

impl Style {
    pub const ALL: [Style; 5] = [
        Style::Plain,
        Style::Invert,
        Style::Stripes,
        Style::Warm,
        Style::Mosaic,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Plain => "plain",
            Style::Invert => "invert",
            Style::Stripes => "stripes",
            Style::Warm => "warm",
            Style::Mosaic => "mosaic",
        }
    }

    /// Applies the oracle transform to one `[C, H, W]` frame.
    pub fn apply(self, frame: &FloatGrid) -> FloatGrid {
        let (c, h, w) = frame.chw();
        match self {
            Style::Plain => frame.clone(),
            Style::Invert => frame.map(|v| 1.0 - v),
            Style::Stripes => {
                let mut out = frame.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    let row = (i / w) % h;
                    let phase = std::f64::consts::TAU * row as f64 / STRIPE_PERIOD as f64;
                    *v *= 0.6 + 0.4 * phase.cos();
                }
                out
            }
            Style::Warm => {
                let mut out = frame.clone();
                for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
                    let gain = if c == 3 { WARM_GAINS[ch] } else { WARM_GAINS[0] };
                    plane.iter_mut().for_each(|v| *v = (*v * gain).min(1.0));
                }
                out
            }
            Style::Mosaic => {
                let mut out = frame.clone();
                let b = MOSAIC_BLOCK;
                for plane in out.data_mut().chunks_mut(h * w) {
                    for by in (0..h).step_by(b) {
                        for bx in (0..w).step_by(b) {
                            let (ye, xe) = ((by + b).min(h), (bx + b).min(w));
                            let mut s = 0.0;
                            for y in by..ye {
                                for x in bx..xe {
                                    s += plane[y * w + x];
                                }
                            }
                            let m = s / ((ye - by) * (xe - bx)) as f64;
                            for y in by..ye {
                                for x in bx..xe {
                                    plane[y * w + x] = m;
                                }
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Style {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStyle(s.to_string()))
    }
}

pub fn apply_style(seq: &FrameSequence, style: Style) -> Result<FrameSequence> {
    seq.map_frames(|f| style.apply(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
}

/// A moving shape; positions are pixel-centre coordinates `(row, col)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingShape {
    pub kind: ShapeKind,
    pub radius: f64,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub color: Vec<f64>,
}

impl MovingShape {
    pub fn center(&self, frame: usize) -> (f64, f64) {
        (
            self.start.0 + frame as f64 * self.velocity.0,
            self.start.1 + frame as f64 * self.velocity.1,
        )
    }

    fn covers(&self, center: (f64, f64), y: f64, x: f64) -> bool {
        let (dy, dx) = (y - center.0, x - center.1);
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.radius * self.radius,
            ShapeKind::Square => dy.abs() <= self.radius && dx.abs() <= self.radius,
        }
    }
}

/// Parameters of one synthetic content video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    pub shape: MovingShape,
    /// Background colours at the two ends of a linear gradient.
    pub background: (Vec<f64>, Vec<f64>),
    /// Gradient direction in radians.
    pub gradient_angle: f64,
    /// Amplitude of the static background texture.
    pub texture: f64,
}

/// Ranges used when drawing random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRanges {
    pub radius: (f64, f64),
    pub max_speed: f64,
    pub texture: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            radius: (3.0, 6.0),
            max_speed: 1.0,
            texture: 0.05,
        }
    }
}

impl SceneSpec {
    /// Random scene whose shape stays inside the canvas for all frames.
    pub fn random(
        rng: &mut Rng,
        size: (usize, usize),
        channels: usize,
        frames: usize,
        ranges: &SceneRanges,
    ) -> Self {
        let (h, w) = (size.0 as f64, size.1 as f64);
        let kind = if rng.bernoulli(0.5) {
            ShapeKind::Disk
        } else {
            ShapeKind::Square
        };
        let radius = rng
            .uniform_range(ranges.radius.0, ranges.radius.1)
            .min(0.25 * h.min(w));
        let span = (frames.max(2) - 1) as f64;
        // Speed limited so the path fits; start chosen inside the feasible box.
        let max_v = ranges
            .max_speed
            .min((h - 2.0 * radius) / span)
            .min((w - 2.0 * radius) / span)
            .max(0.0);
        let velocity = (
            rng.uniform_range(-max_v, max_v),
            rng.uniform_range(-max_v, max_v),
        );
        let pick = |rng: &mut Rng, extent: f64, v: f64| {
            let travel = v * span;
            let lo = radius - travel.min(0.0);
            let hi = extent - radius - travel.max(0.0);
            rng.uniform_range(lo, hi.max(lo))
        };
        let start = (pick(rng, h, velocity.0), pick(rng, w, velocity.1));
        let color = |rng: &mut Rng| (0..channels).map(|_| rng.uniform_range(0.1, 0.9)).collect::<Vec<_>>();
        let bg0 = color(rng);
        let bg1 = color(rng);
        // Shape colour pushed away from the background mean for contrast.
        let shape_color = bg0
            .iter()
            .zip(&bg1)
            .map(|(a, b)| {
                let m = 0.5 * (a + b);
                if m > 0.5 {
                    rng.uniform_range(0.0, 0.3)
                } else {
                    rng.uniform_range(0.7, 1.0)
                }
            })
            .collect();
        SceneSpec {
            height: size.0,
            width: size.1,
            channels,
            frames,
            shape: MovingShape {
                kind,
                radius,
                start,
                velocity,
                color: shape_color,
            },
            background: (bg0, bg1),
            gradient_angle: rng.uniform_range(0.0, std::f64::consts::TAU),
            texture: ranges.texture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.frames == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        for c in [&self.shape.color, &self.background.0, &self.background.1] {
            if c.len() != self.channels || c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("scene colours must have one [0,1] value per channel".into()));
            }
        }
        let r = self.shape.radius;
        for f in 0..self.frames {
            let (cy, cx) = self.shape.center(f);
            let inside = cy - r >= -1e-9
                && cx - r >= -1e-9
                && cy + r <= self.height as f64 + 1e-9
                && cx + r <= self.width as f64 + 1e-9;
            if !inside {
                return Err(Error::Config(format!("shape leaves the canvas at frame {f}")));
            }
        }
        Ok(())
    }
}

/// Renders a scene: static textured gradient background plus one shape
/// translating at constant velocity.
pub fn generate_video(spec: &SceneSpec, rng: &mut Rng) -> Result<FrameSequence> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let (sin, cos) = spec.gradient_angle.sin_cos();
    let extent = (h as f64).abs() * sin.abs() + (w as f64) * cos.abs();
    let texture: Vec<f64> = (0..h * w).map(|_| rng.uniform_range(-1.0, 1.0) * spec.texture).collect();
    let mut background = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let proj = (px - 0.5 * w as f64) * cos + (py - 0.5 * h as f64) * sin;
            let s = (proj / extent.max(1.0) + 0.5).clamp(0.0, 1.0);
            for ch in 0..c {
                let v = (1.0 - s) * spec.background.0[ch] + s * spec.background.1[ch];
                background[(ch * h + y) * w + x] = (v + texture[y * w + x]).clamp(0.0, 1.0);
            }
        }
    }
    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let mut data = background.clone();
        let center = spec.shape.center(f);
        for y in 0..h {
            for x in 0..w {
                if spec.shape.covers(center, y as f64 + 0.5, x as f64 + 0.5) {
                    for ch in 0..c {
                        data[(ch * h + y) * w + x] = spec.shape.color[ch];
                    }
                }
            }
        }
        frames.push(FloatGrid::from_parts(vec![c, h, w], data));
    }
    FrameSequence::from_frames(&frames)
}

/// Per-frame global brightness jitter, uniform in `[-amplitude, amplitude]`.
pub fn add_flicker(seq: &FrameSequence, amplitude: f64, rng: &mut Rng) -> Result<FrameSequence> {
    let offsets: Vec<f64> = (0..seq.len())
        .map(|_| rng.uniform_range(-amplitude, amplitude))
        .collect();
    let frames: Vec<FloatGrid> = seq
        .frames()
        .zip(&offsets)
        .map(|(f, &o)| f.map(|v| (v + o).clamp(0.0, 1.0)))
        .collect();
    FrameSequence::from_frames(&frames)
}

/// Corpus sizing and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub videos: usize,
    pub size: usize,
    pub channels: usize,
    pub frames: usize,
    pub seed: u64,
    pub ranges: SceneRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            videos: 10,
            size: 32,
            channels: 3,
            frames: 16,
            seed: 2024,
            ranges: SceneRanges::default(),
        }
    }
}

/// One `(content frame, style token, styled frame)` training example,
/// stored as indices into the corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub video: usize,
    pub frame: usize,
    pub style: Style,
}

/// Content videos, their oracle-styled versions and a video-level split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub content: Vec<FrameSequence>,
    /// `styled[video][style.id()]`
    pub styled: Vec<Vec<FrameSequence>>,
    pub train_videos: Vec<usize>,
    pub heldout_videos: Vec<usize>,
}

impl Corpus {
    pub fn content_frame(&self, t: &Triple) -> FloatGrid {
        self.content[t.video].frame(t.frame)
    }

    pub fn styled_frame(&self, t: &Triple) -> FloatGrid {
        self.styled[t.video][t.style.id()].frame(t.frame)
    }

    fn triples_for(&self, videos: &[usize]) -> Vec<Triple> {
        let mut out = Vec::new();
        for &v in videos {
            for frame in 0..self.content[v].len() {
                for style in Style::ALL {
                    out.push(Triple { video: v, frame, style });
                }
            }
        }
        out
    }

    pub fn train(&self) -> Vec<Triple> {
        self.triples_for(&self.train_videos)
    }

    pub fn heldout(&self) -> Vec<Triple> {
        self.triples_for(&self.heldout_videos)
    }

    pub fn len(&self) -> usize {
        self.content.iter().map(|v| v.len() * Style::ALL.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }

    /// All frames of all content videos, e.g. for autoencoder training.
    pub fn all_frames(&self) -> Vec<FloatGrid> {
        let mut out: Vec<FloatGrid> = self.content.iter().flat_map(|v| v.frames()).collect();
        for per_video in &self.styled {
            for s in per_video {
                out.extend(s.frames());
            }
        }
        out
    }
}

/// Generates `cfg.videos` scenes with per-video derived streams and a
/// deterministic 80/20 video-level split.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Corpus> {
    if cfg.videos == 0 {
        return Err(Error::Empty("build_dataset"));
    }
    let root = Rng::seeded(cfg.seed);
    let mut content = Vec::with_capacity(cfg.videos);
    let mut styled = Vec::with_capacity(cfg.videos);
    for v in 0..cfg.videos {
        let mut rng = root.derive(v as u64);
        let spec = SceneSpec::random(&mut rng, (cfg.size, cfg.size), cfg.channels, cfg.frames, &cfg.ranges);
        let video = generate_video(&spec, &mut rng)?;
        styled.push(
            Style::ALL
                .iter()
                .map(|&s| apply_style(&video, s))
                .collect::<Result<Vec<_>>>()?,
        );
        content.push(video);
    }
    let mut order: Vec<usize> = (0..cfg.videos).collect();
    root.derive(u64::MAX - 1).shuffle(&mut order);
    let n_train = ((cfg.videos as f64) * 0.8).round().max(1.0) as usize;
    let (train, held) = order.split_at(n_train.min(cfg.videos));
    let (mut train_videos, mut heldout_videos) = (train.to_vec(), held.to_vec());
    train_videos.sort_unstable();
    heldout_videos.sort_unstable();
    Ok(Corpus {
        content,
        styled,
        train_videos,
        heldout_videos,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: DatasetConfig,
    train_videos: Vec<usize>,
    heldout_videos: Vec<usize>,
}

const MANIFEST: &str = "manifest.json";

fn content_path(dir: &Path, v: usize) -> PathBuf {
    dir.join(format!("content_{v:03}.savt"))
}

/// Writes one container per content video plus a JSON manifest. Styled
/// versions are recomputed on load.
pub fn save_corpus(corpus: &Corpus, cfg: &DatasetConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (v, video) in corpus.content.iter().enumerate() {
        io::save_tensor(&content_path(dir, v), video.grid())?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        train_videos: corpus.train_videos.clone(),
        heldout_videos: corpus.heldout_videos.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    io::write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

pub fn load_corpus(dir: &Path) -> Result<(DatasetConfig, Corpus)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST}: {e}")))?;
    let n = manifest.config.videos;
    if manifest.train_videos.iter().chain(&manifest.heldout_videos).any(|&v| v >= n) {
        return Err(Error::Format("split references a missing video".into()));
    }
    let mut content = Vec::with_capacity(n);
    let mut styled = Vec::with_capacity(n);
    for v in 0..n {
        let video = FrameSequence::new(io::load_tensor(&content_path(dir, v))?)?;
        styled.push(
            Style::ALL
                .iter()
                .map(|&s| apply_style(&video, s))
                .collect::<Result<Vec<_>>>()?,
        );
        content.push(video);
    }
    Ok((
        manifest.config,
        Corpus {
            content,
            styled,
            train_videos: manifest.train_videos,
            heldout_videos: manifest.heldout_videos,
        },
    ))
}

/// Draws training triples with the style token cycling round-robin and
/// the (video, frame) pair uniform over the training split.
#[derive(Clone, Debug)]
pub struct TripleSampler {
    videos: Vec<usize>,
    frames: usize,
    next_style: usize,
}

impl TripleSampler {
    pub fn new(corpus: &Corpus) -> Result<Self> {
        if corpus.train_videos.is_empty() {
            return Err(Error::Empty("TripleSampler"));
        }
        Ok(Self {
            videos: corpus.train_videos.clone(),
            frames: corpus.content[corpus.train_videos[0]].len(),
            next_style: 0,
        })
    }

    pub fn sample(&mut self, rng: &mut Rng) -> Triple {
        let style = Style::ALL[self.next_style];
        self.next_style = (self.next_style + 1) % Style::ALL.len();
        Triple {
            video: self.videos[rng.below(self.videos.len())],
            frame: rng.below(self.frames),
            style,
        }
    }
}
