//! Shared data carriers: binary masks and frame pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length mismatch");
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// Foreground where the foreground probability channel (index 1) of a
    /// 2-channel logit map wins.
    pub fn from_logits(logits: &Tensor) -> Mask {
        let (c, h, w) = logits.dims3();
        assert_eq!(c, 2, "segmentation logits must have 2 channels");
        let bg = logits.channel(0);
        let fg = logits.channel(1);
        Mask::from_vec(h, w, fg.iter().zip(bg).map(|(f, b)| f > b).collect())
    }
}

/// Two consecutive RGB frames with whatever ground truth is available.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    /// `[3, h, w]`, values in `[0, 1]`.
    pub frame_t: Tensor,
    pub frame_t1: Tensor,
    pub mask_gt: Option<Mask>,
    /// `[2, h, w]`: `(u, v)` in pixels, frame t to frame t+1.
    pub flow_gt: Option<Tensor>,
    pub flow_valid: Option<Mask>,
}

impl FramePair {
    pub fn new(frame_t: Tensor, frame_t1: Tensor) -> Self {
        Self {
            frame_t,
            frame_t1,
            mask_gt: None,
            flow_gt: None,
            flow_valid: None,
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.frame_t.spatial()
    }

    /// Checks that every present array shares the frame shape.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.frame_t.dims3();
        if c != 3 {
            return Err(Error::Shape(format!("frame_t has {c} channels, expected 3")));
        }
        if self.frame_t1.shape() != self.frame_t.shape() {
            return Err(Error::Shape(format!(
                "frame_t1 {:?} vs frame_t {:?}",
                self.frame_t1.shape(),
                self.frame_t.shape()
            )));
        }
        if let Some(m) = &self.mask_gt {
            if m.shape() != (h, w) {
                return Err(Error::Shape(format!("mask {:?} vs frame {:?}", m.shape(), (h, w))));
            }
        }
        if let Some(f) = &self.flow_gt {
            if f.shape() != [2, h, w] {
                return Err(Error::Shape(format!("flow {:?} vs frame {:?}", f.shape(), (h, w))));
            }
        }
        if let Some(m) = &self.flow_valid {
            if m.shape() != (h, w) {
                return Err(Error::Shape(format!("flow_valid {:?} vs frame {:?}", m.shape(), (h, w))));
            }
        }
        Ok(())
    }

    /// Mirror every array horizontally; flow `u` changes sign.
    pub fn flip_horizontal(&self) -> FramePair {
        FramePair {
            frame_t: self.frame_t.flip_horizontal(),
            frame_t1: self.frame_t1.flip_horizontal(),
            mask_gt: self.mask_gt.as_ref().map(Mask::flip_horizontal),
            flow_gt: self.flow_gt.as_ref().map(|f| {
                let mut out = f.flip_horizontal();
                for v in out.channel_mut(0) {
                    *v = -*v;
                }
                out
            }),
            flow_valid: self.flow_valid.as_ref().map(Mask::flip_horizontal),
        }
    }
}
