//! Dataset manifests, canvas padding, synthetic tampering, augmentation and
//! robustness distortions.

pub mod augment;
pub mod canvas;
pub mod distort;
pub mod io;
pub mod manifest;
pub mod source;
pub mod synth;

use crate::error::{shape_err, Error, Result};
use crate::grid::{BinaryGrid, ImageGrid};

pub use augment::{augment, AugmentConfig, Augmentation, AugmentationRegistry};
pub use canvas::{crop_to_extent, pad_to_canvas, prepare_for_canvas, resize_oversized};
pub use distort::{apply_distortion, default_robustness_specs, Distortion, DistortionRegistry, DistortionSpec};
pub use manifest::{load_manifest, DatasetManifest, Label, ManifestEntry, ManifestSummary};
pub use source::{SampleSource, Subset};
pub use synth::{synthesize_manipulation, Manipulation, ManipulationRegistry, Rect, Tampered};

/// An image with its ground-truth tamper mask at native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub image: ImageGrid,
    pub mask: BinaryGrid,
}

impl RawSample {
    pub fn new(image: ImageGrid, mask: BinaryGrid) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(shape_err!(
                "image {:?} and mask {:?} differ in size",
                image.dims(),
                mask.dims()
            ));
        }
        if !mask.is_binary() {
            return Err(Error::Invalid("sample mask is not binary".into()));
        }
        Ok(Self { image, mask })
    }

    /// An untampered sample: the mask is all zeros.
    pub fn authentic(image: ImageGrid) -> Self {
        let mask = BinaryGrid::zeros(image.height, image.width);
        Self { image, mask }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

/// A sample placed at the top-left of a fixed zero canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSample {
    pub image: ImageGrid,
    pub mask: BinaryGrid,
    /// `(h, w)` of the original content window.
    pub orig_extent: (usize, usize),
}

impl PaddedSample {
    pub fn canvas(&self) -> (usize, usize) {
        self.image.dims()
    }
}
