//! Deterministic synthetic forgeries with ground-truth masks, training
//! augmentation and the distortion harness.

pub mod augment;
pub mod dataset;
pub mod distort;
pub mod forge;
pub mod region;
pub mod texture;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub use region::Region;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Authentic,
    Forged,
}

impl Label {
    pub fn is_forged(self) -> bool {
        self == Label::Forged
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Authentic,
    Splice,
    CopyMove,
    Inpaint,
}

/// How a sample was made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub operation: Operation,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    /// Source offset `(dy, dx)` of the pasted pixels relative to the
    /// destination (donor for splices, same image for copy-moves).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_offset: Option<(i64, i64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_quality: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_quality: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// 3×H×W in `[0, 1]`.
    pub image: Tensor<f32>,
    /// 1×H×W of 0/1.
    pub mask: Tensor<f32>,
    pub label: Label,
    pub provenance: Provenance,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn forged_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    /// Label agrees with the mask.
    pub fn is_consistent(&self) -> bool {
        self.label.is_forged() == (self.forged_pixels() > 0)
            && self.mask.shape() == [1, self.height(), self.width()]
    }
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize(image: &mut Tensor<f32>) {
    for v in image.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}
