//! Train-time augmentation. Every augmentation is a named
//! [`Augmentation`] enabled independently with its own probability; geometric
//! ones act identically on image and mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::canvas::{resize_image_bilinear, resize_mask_nearest};
use super::distort::{blur_image, gaussian_kernel};
use super::synth::{ManipulationRegistry, MIN_SIDE};
use super::RawSample;
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, ImageGrid};

/// Per-augmentation probabilities and ranges.
///
/// The training blur keeps its own kernel list, separate from the
/// robustness-suite kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip: f64,
    pub vflip: f64,
    pub rot90: f64,
    pub rescale: f64,
    pub rescale_range: (f64, f64),
    pub blur: f64,
    pub blur_kernels: Vec<usize>,
    pub manipulate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            vflip: 0.1,
            rot90: 0.1,
            rescale: 0.3,
            rescale_range: (0.75, 1.25),
            blur: 0.1,
            blur_kernels: vec![3, 5],
            manipulate: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip: 0.0,
            vflip: 0.0,
            rot90: 0.0,
            rescale: 0.0,
            blur: 0.0,
            manipulate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip", self.hflip),
            ("vflip", self.vflip),
            ("rot90", self.rot90),
            ("rescale", self.rescale),
            ("blur", self.blur),
            ("manipulate", self.manipulate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{name}"), "probability outside [0, 1]"));
            }
        }
        let (lo, hi) = self.rescale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("augment.rescale_range", "expected 0 < lo <= hi"));
        }
        if self.blur_kernels.iter().any(|&k| k < 3 || k % 2 == 0) {
            return Err(Error::config("augment.blur_kernels", "kernels must be odd and >= 3"));
        }
        Ok(())
    }
}

pub trait Augmentation: Send + Sync {
    fn name(&self) -> &'static str;
    fn probability(&self, cfg: &AugmentConfig) -> f64;
    fn apply(&self, sample: RawSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RawSample;
}

pub fn hflip(sample: &RawSample) -> RawSample {
    let (h, w) = sample.dims();
    let mut image = ImageGrid::zeros(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                image.set(c, y, x, sample.image.get(c, y, w - 1 - x));
            }
        }
    }
    let mask = BinaryGrid::from_fn(h, w, |y, x| sample.mask.get(y, w - 1 - x) == 1);
    RawSample { image, mask }
}

pub fn vflip(sample: &RawSample) -> RawSample {
    let (h, w) = sample.dims();
    let mut image = ImageGrid::zeros(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                image.set(c, y, x, sample.image.get(c, h - 1 - y, x));
            }
        }
    }
    let mask = BinaryGrid::from_fn(h, w, |y, x| sample.mask.get(h - 1 - y, x) == 1);
    RawSample { image, mask }
}

/// 90° clockwise: output `(y, x)` reads input `(h - 1 - x, y)`.
pub fn rot90_cw(sample: &RawSample) -> RawSample {
    let (h, w) = sample.dims();
    let mut image = ImageGrid::zeros(w, h);
    for c in 0..3 {
        for y in 0..w {
            for x in 0..h {
                image.set(c, y, x, sample.image.get(c, h - 1 - x, y));
            }
        }
    }
    let mask = BinaryGrid::from_fn(w, h, |y, x| sample.mask.get(h - 1 - x, y) == 1);
    RawSample { image, mask }
}

struct HFlip;
struct VFlip;
struct Rot90;
struct Rescale;
struct Blur;
struct Manipulate;

impl Augmentation for HFlip {
    fn name(&self) -> &'static str {
        "hflip"
    }
    fn probability(&self, cfg: &AugmentConfig) -> f64 {
        cfg.hflip
    }
    fn apply(&self, s: RawSample, _: &AugmentConfig, _: &mut ChaCha8Rng) -> RawSample {
        hflip(&s)
    }
}

impl Augmentation for VFlip {
    fn name(&self) -> &'static str {
        "vflip"
    }
    fn probability(&self, cfg: &AugmentConfig) -> f64 {
        cfg.vflip
    }
    fn apply(&self, s: RawSample, _: &AugmentConfig, _: &mut ChaCha8Rng) -> RawSample {
        vflip(&s)
    }
}

impl Augmentation for Rot90 {
    fn name(&self) -> &'static str {
        "rot90"
    }
    fn probability(&self, cfg: &AugmentConfig) -> f64 {
        cfg.rot90
    }
    fn apply(&self, s: RawSample, _: &AugmentConfig, rng: &mut ChaCha8Rng) -> RawSample {
        let turns = rng.random_range(1..=3);
        (0..turns).fold(s, |acc, _| rot90_cw(&acc))
    }
}

impl Augmentation for Rescale {
    fn name(&self) -> &'static str {
        "rescale"
    }
    fn probability(&self, cfg: &AugmentConfig) -> f64 {
        cfg.rescale
    }
    fn apply(&self, s: RawSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RawSample {
        let (lo, hi) = cfg.rescale_range;
        let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (h, w) = s.dims();
        let nh = ((h as f64 * f).round() as usize).max(MIN_SIDE.min(h));
        let nw = ((w as f64 * f).round() as usize).max(MIN_SIDE.min(w));
        if (nh, nw) == (h, w) {
            return s;
        }
        RawSample {
            image: resize_image_bilinear(&s.image, nh, nw),
            mask: resize_mask_nearest(&s.mask, nh, nw),
        }
    }
}

impl Augmentation for Blur {
    fn name(&self) -> &'static str {
        "blur"
    }
    fn probability(&self, cfg: &AugmentConfig) -> f64 {
        cfg.blur
    }
    fn apply(&self, s: RawSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RawSample {
        let Some(&k) = cfg.blur_kernels.get(rng.random_range(0..cfg.blur_kernels.len().max(1))) else {
            return s;
        };
        RawSample {
            image: blur_image(&s.image, &gaussian_kernel(k)),
            mask: s.mask,
        }
    }
}

impl Augmentation for Manipulate {
    fn name(&self) -> &'static str {
        "manipulate"
    }
    fn probability(&self, cfg: &AugmentConfig) -> f64 {
        cfg.manipulate
    }
    fn apply(&self, s: RawSample, _: &AugmentConfig, rng: &mut ChaCha8Rng) -> RawSample {
        match ManipulationRegistry::default().apply_random(&s, rng) {
            Ok(t) => t.sample,
            Err(_) => s,
        }
    }
}

/// Augmentations in application order.
pub struct AugmentationRegistry {
    entries: Vec<Box<dyn Augmentation>>,
}

impl Default for AugmentationRegistry {
    fn default() -> Self {
        Self {
            entries: vec![
                Box::new(Manipulate),
                Box::new(Rescale),
                Box::new(HFlip),
                Box::new(VFlip),
                Box::new(Rot90),
                Box::new(Blur),
            ],
        }
    }
}

impl AugmentationRegistry {
    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|a| a.name()).collect()
    }

    /// One uniform draw per registered augmentation regardless of outcome,
    /// so enabling one augmentation never reshuffles the others' draws.
    pub fn run(&self, sample: &RawSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RawSample {
        let mut out = sample.clone();
        for aug in &self.entries {
            let u: f64 = rng.random();
            let mut sub = ChaCha8Rng::seed_from_u64(rng.random());
            if u < aug.probability(cfg) {
                out = aug.apply(out, cfg, &mut sub);
            }
        }
        out
    }
}

/// Deterministic in `(sample, seed, cfg)`.
pub fn augment(sample: &RawSample, seed: u64, cfg: &AugmentConfig) -> RawSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentationRegistry::default().run(sample, cfg, &mut rng)
}
