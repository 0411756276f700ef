//! Robustness distortions applied to raw inputs before padding.
//!
//! Each distortion kind is a [`Distortion`] implementation registered by name
//! in a [`DistortionRegistry`]; a [`DistortionSpec`] selects one at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::ImageReader;
use serde::{Deserialize, Serialize};

use super::io::{grid_to_rgb, rgb_to_grid};
use super::RawSample;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionSpec {
    None,
    Jpeg { quality: u8 },
    GaussianBlur { kernel: usize },
}

impl DistortionSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DistortionSpec::None => "none",
            DistortionSpec::Jpeg { .. } => "jpeg",
            DistortionSpec::GaussianBlur { .. } => "gaussian_blur",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistortionSpec::None => Ok(()),
            DistortionSpec::Jpeg { quality } if (50..=100).contains(&quality) => Ok(()),
            DistortionSpec::Jpeg { quality } => {
                Err(Error::Invalid(format!("jpeg quality {quality} outside [50, 100]")))
            }
            DistortionSpec::GaussianBlur { kernel } if kernel >= 3 && kernel % 2 == 1 => Ok(()),
            DistortionSpec::GaussianBlur { kernel } => Err(Error::Invalid(format!(
                "blur kernel {kernel} must be odd and at least 3"
            ))),
        }
    }

    /// Row label as used in robustness tables.
    pub fn label(&self) -> String {
        match self {
            DistortionSpec::None => "None".into(),
            DistortionSpec::Jpeg { quality } => format!("JPEG Compress({quality})"),
            DistortionSpec::GaussianBlur { kernel } => format!("Gaussian Blur(size={kernel})"),
        }
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistortionSpec::None => write!(f, "none"),
            DistortionSpec::Jpeg { quality } => write!(f, "jpeg:{quality}"),
            DistortionSpec::GaussianBlur { kernel } => write!(f, "blur:{kernel}"),
        }
    }
}

/// Parses `none`, `jpeg:<q>` and `blur:<k>` (also `gaussian_blur:<k>`).
impl FromStr for DistortionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |what: &str| -> Result<usize> {
            arg.parse()
                .map_err(|_| Error::Invalid(format!("`{s}`: expected {what} after ':'")))
        };
        let spec = match kind {
            "none" => DistortionSpec::None,
            "jpeg" => DistortionSpec::Jpeg {
                quality: num("quality")?.min(255) as u8,
            },
            "blur" | "gaussian_blur" => DistortionSpec::GaussianBlur {
                kernel: num("kernel size")?,
            },
            _ => return Err(Error::Invalid(format!("unknown distortion `{s}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// The evaluation grid: clean; JPEG at q = 100..50 in steps of 10; blur at
/// k = 3, 5, 11.
pub fn default_robustness_specs() -> Vec<DistortionSpec> {
    let mut specs = vec![DistortionSpec::None];
    specs.extend([100, 90, 80, 70, 60, 50].map(|quality| DistortionSpec::Jpeg { quality }));
    specs.extend([3, 5, 11].map(|kernel| DistortionSpec::GaussianBlur { kernel }));
    specs
}

pub trait Distortion: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, image: &ImageGrid) -> Result<ImageGrid>;
}

pub struct Identity;

impl Distortion for Identity {
    fn name(&self) -> &'static str {
        "none"
    }
    fn apply(&self, image: &ImageGrid) -> Result<ImageGrid> {
        Ok(image.clone())
    }
}

/// JPEG encode/decode round trip at a fixed quality.
pub struct JpegRoundTrip {
    pub quality: u8,
}

impl Distortion for JpegRoundTrip {
    fn name(&self) -> &'static str {
        "jpeg"
    }

    fn apply(&self, image: &ImageGrid) -> Result<ImageGrid> {
        let rgb = grid_to_rgb(image);
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, self.quality).encode_image(&rgb)?;
        let decoded = ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg)
            .decode()?
            .to_rgb8();
        Ok(rgb_to_grid(&decoded))
    }
}

pub struct GaussianBlur {
    pub weights: Vec<f64>,
}

impl GaussianBlur {
    pub fn with_kernel(kernel: usize) -> Result<Self> {
        DistortionSpec::GaussianBlur { kernel }.validate()?;
        Ok(Self {
            weights: gaussian_kernel(kernel),
        })
    }
}

impl Distortion for GaussianBlur {
    fn name(&self) -> &'static str {
        "gaussian_blur"
    }

    fn apply(&self, image: &ImageGrid) -> Result<ImageGrid> {
        Ok(blur_image(image, &self.weights))
    }
}

/// Standard deviation implied by an odd kernel size, following the OpenCV
/// convention used by `GaussianBlur(ksize, sigma=0)`.
pub fn sigma_for_kernel(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps of odd length `kernel`.
pub fn gaussian_kernel(kernel: usize) -> Vec<f64> {
    gaussian_taps(kernel, sigma_for_kernel(kernel))
}

pub fn gaussian_taps(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as f64;
    let raw: Vec<f64> = (0..kernel)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable convolution of one plane with edge replication.
pub fn blur_plane(src: &[f32], h: usize, w: usize, taps: &[f64]) -> Vec<f32> {
    let r = (taps.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                let xx = clamp(x as isize + t as isize - r, w);
                acc += k * src[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                let yy = clamp(y as isize + t as isize - r, h);
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

pub fn blur_image(image: &ImageGrid, taps: &[f64]) -> ImageGrid {
    let mut data = Vec::with_capacity(image.data.len());
    for c in 0..ImageGrid::CHANNELS {
        data.extend(blur_plane(image.plane(c), image.height, image.width, taps));
    }
    ImageGrid {
        height: image.height,
        width: image.width,
        data,
    }
}

type Factory = fn(&DistortionSpec) -> Result<Box<dyn Distortion>>;

/// Distortion kinds by name.
pub struct DistortionRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for DistortionRegistry {
    fn default() -> Self {
        let mut reg = Self {
            factories: BTreeMap::new(),
        };
        reg.register("none", |_| Ok(Box::new(Identity)));
        reg.register("jpeg", |spec| match *spec {
            DistortionSpec::Jpeg { quality } => Ok(Box::new(JpegRoundTrip { quality })),
            _ => unreachable!(),
        });
        reg.register("gaussian_blur", |spec| match *spec {
            DistortionSpec::GaussianBlur { kernel } => Ok(Box::new(GaussianBlur::with_kernel(kernel)?)),
            _ => unreachable!(),
        });
        reg
    }
}

impl DistortionRegistry {
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, spec: &DistortionSpec) -> Result<Box<dyn Distortion>> {
        spec.validate()?;
        let factory = self
            .factories
            .get(spec.kind())
            .ok_or_else(|| Error::Invalid(format!("no distortion registered as `{}`", spec.kind())))?;
        factory(spec)
    }
}

/// Distorts the image and leaves the mask untouched.
pub fn apply_distortion(sample: &RawSample, spec: &DistortionSpec) -> Result<RawSample> {
    let d = DistortionRegistry::default().build(spec)?;
    Ok(RawSample {
        image: d.apply(&sample.image)?,
        mask: sample.mask.clone(),
    })
}
