//! Ordered frames sharing one shape, values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::numerics::FloatGrid;

/// Frames stored as one `[F, C, H, W]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: FloatGrid,
    /// Informational only.
    pub fps: f64,
}

pub const DEFAULT_FPS: f64 = 8.0;

impl FrameSequence {
    /// Wraps a `[F, C, H, W]` grid whose values lie in `[0, 1]`.
    pub fn new(frames: FloatGrid) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::shape("FrameSequence", &[0, 0, 0, 0], frames.shape()));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::range("pixel", *v, "[0, 1]"));
        }
        Ok(Self {
            frames,
            fps: DEFAULT_FPS,
        })
    }

    pub fn from_frames(frames: &[FloatGrid]) -> Result<Self> {
        Self::new(FloatGrid::stack(frames)?)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]` of each frame.
    pub fn frame_shape(&self) -> &[usize] {
        &self.frames.shape()[1..]
    }

    pub fn frame(&self, i: usize) -> FloatGrid {
        self.frames.index0(i)
    }

    pub fn frames(&self) -> impl Iterator<Item = FloatGrid> + '_ {
        (0..self.len()).map(|i| self.frame(i))
    }

    pub fn grid(&self) -> &FloatGrid {
        &self.frames
    }

    pub fn map_frames(&self, f: impl Fn(&FloatGrid) -> FloatGrid) -> Result<Self> {
        let out: Vec<FloatGrid> = self.frames().map(|fr| f(&fr)).collect();
        Self::from_frames(&out).map(|s| Self { fps: self.fps, ..s })
    }
}
