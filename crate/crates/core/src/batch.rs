//! Video, image and caption batches.

use ndarray::{Array2, Array4, Array5, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clips laid out as `(batch, frame, channel, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch<T> {
    pub data: Array5<T>,
}

/// Images laid out as `(n, channel, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    pub data: Array4<T>,
}

impl<T: Scalar> VideoBatch<T> {
    pub fn new(data: Array5<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("video batch has non-finite entries".into()));
        }
        if data.dim().1 == 0 {
            return Err(Error::shape("video batch needs at least one frame"));
        }
        Ok(VideoBatch {
            data: crate::kernels::standard(data),
        })
    }

    /// `(B, F, C, H, W)`
    pub fn dim(&self) -> (usize, usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    /// Clip `b` as a single-element batch.
    pub fn clip(&self, b: usize) -> VideoBatch<T> {
        VideoBatch {
            data: self.data.slice_axis(Axis(0), (b..b + 1).into()).to_owned(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> VideoBatch<U> {
        VideoBatch {
            data: self.data.mapv(|v| U::of(v.as_f64())),
        }
    }

    /// Stacks single- or multi-clip batches along the batch axis.
    pub fn stack(parts: &[VideoBatch<T>]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(format!("stack clips: {e}")))?;
        Ok(VideoBatch {
            data: crate::kernels::standard(data),
        })
    }
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image batch has non-finite entries".into()));
        }
        Ok(ImageBatch {
            data: crate::kernels::standard(data),
        })
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }
}

/// `(B, F, C, H, W)` to `(B·F, C, H, W)`, frame-major within each clip.
pub fn fold_frames<T: Scalar>(v: &VideoBatch<T>) -> ImageBatch<T> {
    let (b, f, c, h, w) = v.dim();
    ImageBatch {
        data: v
            .data
            .clone()
            .into_shape_with_order((b * f, c, h, w))
            .expect("video batches are stored contiguously"),
    }
}

/// Inverse of [`fold_frames`].
pub fn unfold_frames<T: Scalar>(x: &ImageBatch<T>, frames: usize) -> Result<VideoBatch<T>> {
    let (n, c, h, w) = x.dim();
    if frames == 0 || n % frames != 0 {
        return Err(Error::shape(format!("{n} images do not split into clips of {frames} frames")));
    }
    Ok(VideoBatch {
        data: x
            .data
            .clone()
            .into_shape_with_order((n / frames, frames, c, h, w))
            .expect("image batches are stored contiguously"),
    })
}

/// Position of `(clip, frame)` in a folded batch.
pub fn folded_index(clip: usize, frame: usize, frames: usize) -> usize {
    clip * frames + frame
}

/// Caption token ids `(B, L)`; id 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Array2<u32>,
}

impl TextTokens {
    pub fn new(ids: Array2<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(TextTokens { ids })
    }

    pub fn batch(&self) -> usize {
        self.ids.nrows()
    }

    pub fn len(&self) -> usize {
        self.ids.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.ncols() == 0
    }

    /// Repeats every row `times` times (captions shared by all frames of a clip).
    pub fn repeat_rows(&self, times: usize) -> TextTokens {
        let (b, l) = self.ids.dim();
        TextTokens {
            ids: Array2::from_shape_fn((b * times, l), |(r, c)| self.ids[[r / times, c]]),
        }
    }

    pub fn rows(&self, idx: &[usize]) -> TextTokens {
        TextTokens {
            ids: self.ids.select(Axis(0), idx),
        }
    }

    pub fn stack(parts: &[TextTokens]) -> Result<TextTokens> {
        let views: Vec<_> = parts.iter().map(|p| p.ids.view()).collect();
        Ok(TextTokens {
            ids: ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(format!("stack tokens: {e}")))?,
        })
    }
}
