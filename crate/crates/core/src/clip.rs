//! RGBA frame clips.
//!
//! A [`FrameClip`] is the unit every stage works on: `N` frames of
//! `H x W` RGBA values in `[0, 1]`. Alpha-only data (ground-truth mattes,
//! predicted mattes, hole masks) reuses the same container with the value
//! replicated into all four channels, so the `A` plane is always the
//! authoritative alpha reading.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4, ArrayView3, ArrayViewMut3, Axis};

/// Channel count of every stored frame (R, G, B, A).
pub const CHANNELS: usize = 4;

/// A clip of `N` RGBA frames with values in `[0, 1]`, laid out `(N, 4, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClip {
    data: Array4<f64>,
}

impl FrameClip {
    /// Wraps an `(N, 4, H, W)` array, enforcing the clip invariants:
    /// at least one frame and every value inside `[0, 1]`.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (n, c, _, _) = data.dim();
        if n == 0 {
            return Err(Error::Validation("clip must have at least one frame".into()));
        }
        if c != CHANNELS {
            return Err(Error::shape("FrameClip::new", "4 channels", c));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "channel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    /// Builds an alpha-only clip from `(N, H, W)` values, replicating the
    /// matte into all four channels.
    pub fn from_alpha(alpha: Array3<f64>) -> Result<Self> {
        let (n, h, w) = alpha.dim();
        let mut data = Array4::zeros((n, CHANNELS, h, w));
        for c in 0..CHANNELS {
            data.index_axis_mut(Axis(1), c).assign(&alpha);
        }
        Self::new(data)
    }

    /// Builds an opaque clip from separate RGB planes `(N, 3, H, W)`,
    /// forcing `A = 1` everywhere.
    pub fn from_rgb(rgb: Array4<f64>) -> Result<Self> {
        let (n, c, h, w) = rgb.dim();
        if c != 3 {
            return Err(Error::shape("FrameClip::from_rgb", "3 channels", c));
        }
        let mut data = Array4::ones((n, CHANNELS, h, w));
        data.slice_mut(ndarray::s![.., ..3, .., ..]).assign(&rgb);
        Self::new(data)
    }

    /// Combines RGB planes with an explicit alpha plane.
    pub fn from_rgb_alpha(rgb: Array4<f64>, alpha: Array3<f64>) -> Result<Self> {
        let mut clip = Self::from_rgb(rgb)?;
        let (n, h, w) = alpha.dim();
        if (n, h, w) != (clip.frame_count(), clip.height(), clip.width()) {
            return Err(Error::shape(
                "FrameClip::from_rgb_alpha",
                format!("alpha ({}, {}, {})", clip.frame_count(), clip.height(), clip.width()),
                format!("({n}, {h}, {w})"),
            ));
        }
        clip.data.index_axis_mut(Axis(1), 3).assign(&alpha);
        Self::new(clip.data)
    }

    pub fn frame_count(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// Full `(N, 4, H, W)` view.
    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    /// RGB planes as an owned `(N, 3, H, W)` array.
    pub fn rgb(&self) -> Array4<f64> {
        self.data.slice(ndarray::s![.., ..3, .., ..]).to_owned()
    }

    /// Alpha plane `(N, H, W)`.
    pub fn alpha(&self) -> Array3<f64> {
        self.data.index_axis(Axis(1), 3).to_owned()
    }

    /// Alpha plane of a single frame.
    pub fn alpha_frame(&self, i: usize) -> ndarray::ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), i).index_axis_move(Axis(0), 3)
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn frame_mut(&mut self, i: usize) -> ArrayViewMut3<'_, f64> {
        self.data.index_axis_mut(Axis(0), i)
    }

    /// Checks that `other` has the same frame count and dimensions.
    pub fn check_same_shape(&self, other: &FrameClip, context: &str) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::shape(
                context,
                format!("{:?}", self.data.dim()),
                format!("{:?}", other.data.dim()),
            ));
        }
        Ok(())
    }
}
