//! Synthetic tampering: one random rectangle per call, either copy-moved
//! within the image or inpainted. Also generates the procedural base images
//! used for the desk-scale corpora.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::distort::{blur_plane, gaussian_taps};
use super::RawSample;
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, ImageGrid};

/// Smallest side accepted by [`synthesize_manipulation`].
pub const MIN_SIDE: usize = 32;

/// Blur strength of the blur-fill inpainting proxy.
pub const INPAINT_BLUR_SIGMA: f64 = 8.0;

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.top < o.top + o.height
            && o.top < self.top + self.height
            && self.left < o.left + o.width
            && o.left < self.left + self.width
    }
}

/// Result of a synthetic manipulation.
#[derive(Debug, Clone)]
pub struct Tampered {
    pub sample: RawSample,
    pub mode: &'static str,
    /// The altered region; equals the new mask support on authentic input.
    pub rect: Rect,
    /// Copy-move source region.
    pub source: Option<Rect>,
}

/// One tampering strategy. Implementations alter exactly `rect` of the image.
pub trait Manipulation: Send + Sync {
    fn name(&self) -> &'static str;

    /// Fills `rect` in `image`; returns the source rectangle if pixels were copied.
    fn alter(&self, image: &mut ImageGrid, rect: Rect, rng: &mut ChaCha8Rng) -> Option<Rect>;
}

pub struct CopyMove;

impl Manipulation for CopyMove {
    fn name(&self) -> &'static str {
        "copy_move"
    }

    fn alter(&self, image: &mut ImageGrid, dst: Rect, rng: &mut ChaCha8Rng) -> Option<Rect> {
        let src = non_overlapping_rect(image.dims(), dst, rng);
        let before = image.clone();
        for c in 0..ImageGrid::CHANNELS {
            for dy in 0..dst.height {
                for dx in 0..dst.width {
                    let v = before.get(c, src.top + dy, src.left + dx);
                    image.set(c, dst.top + dy, dst.left + dx, v);
                }
            }
        }
        Some(src)
    }
}

/// Fills the rectangle with the image's mean colour.
pub struct InpaintMean;

impl Manipulation for InpaintMean {
    fn name(&self) -> &'static str {
        "inpaint_mean"
    }

    fn alter(&self, image: &mut ImageGrid, rect: Rect, _rng: &mut ChaCha8Rng) -> Option<Rect> {
        for c in 0..ImageGrid::CHANNELS {
            let plane = image.plane(c);
            let mean = (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32;
            for y in rect.top..rect.top + rect.height {
                for x in rect.left..rect.left + rect.width {
                    image.set(c, y, x, mean);
                }
            }
        }
        None
    }
}

/// Replaces the rectangle with a heavy Gaussian blur of itself.
pub struct InpaintBlur;

impl Manipulation for InpaintBlur {
    fn name(&self) -> &'static str {
        "inpaint_blur"
    }

    fn alter(&self, image: &mut ImageGrid, rect: Rect, _rng: &mut ChaCha8Rng) -> Option<Rect> {
        let radius = (3.0 * INPAINT_BLUR_SIGMA).ceil() as usize;
        let taps = gaussian_taps(2 * radius + 1, INPAINT_BLUR_SIGMA);
        for c in 0..ImageGrid::CHANNELS {
            let mut region = Vec::with_capacity(rect.area());
            for y in rect.top..rect.top + rect.height {
                for x in rect.left..rect.left + rect.width {
                    region.push(image.get(c, y, x));
                }
            }
            let blurred = blur_plane(&region, rect.height, rect.width, &taps);
            for (i, v) in blurred.into_iter().enumerate() {
                image.set(c, rect.top + i / rect.width, rect.left + i % rect.width, v);
            }
        }
        None
    }
}

/// Tampering strategies by name.
pub struct ManipulationRegistry {
    entries: Vec<Box<dyn Manipulation>>,
}

impl Default for ManipulationRegistry {
    fn default() -> Self {
        let mut reg = Self { entries: Vec::new() };
        reg.register(Box::new(CopyMove));
        reg.register(Box::new(InpaintMean));
        reg.register(Box::new(InpaintBlur));
        reg
    }
}

impl ManipulationRegistry {
    pub fn register(&mut self, m: Box<dyn Manipulation>) {
        self.entries.retain(|e| e.name() != m.name());
        self.entries.push(m);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Manipulation> {
        self.entries.iter().find(|e| e.name() == name).map(|b| b.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    /// Draws a strategy uniformly, picks a rectangle and applies it. The new
    /// mask is the union of the input mask and the altered rectangle.
    pub fn apply_random(&self, sample: &RawSample, rng: &mut ChaCha8Rng) -> Result<Tampered> {
        let (h, w) = sample.dims();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Invalid(format!(
                "{h}x{w} image is below the {MIN_SIDE}x{MIN_SIDE} minimum for tampering"
            )));
        }
        let strategy = self
            .entries
            .choose(rng)
            .ok_or_else(|| Error::Invalid("no manipulation registered".into()))?;
        let rect = random_rect((h, w), rng);
        let mut image = sample.image.clone();
        let source = strategy.alter(&mut image, rect, rng);
        let mut mask = sample.mask.clone();
        for y in rect.top..rect.top + rect.height {
            for x in rect.left..rect.left + rect.width {
                mask.set(y, x, true);
            }
        }
        Ok(Tampered {
            sample: RawSample { image, mask },
            mode: strategy.name(),
            rect,
            source,
        })
    }
}

/// Rectangle with sides in `[side/8, side/3]`.
fn random_rect((h, w): (usize, usize), rng: &mut impl Rng) -> Rect {
    let rh = rng.random_range((h / 8).max(4)..=(h / 3).max(4));
    let rw = rng.random_range((w / 8).max(4)..=(w / 3).max(4));
    Rect {
        top: rng.random_range(0..=h - rh),
        left: rng.random_range(0..=w - rw),
        height: rh,
        width: rw,
    }
}

/// Same-size rectangle disjoint from `avoid`. Sides are at most a third of
/// the image, so a disjoint placement always exists.
fn non_overlapping_rect((h, w): (usize, usize), avoid: Rect, rng: &mut impl Rng) -> Rect {
    let cand = |top, left| Rect {
        top,
        left,
        height: avoid.height,
        width: avoid.width,
    };
    for _ in 0..64 {
        let r = cand(
            rng.random_range(0..=h - avoid.height),
            rng.random_range(0..=w - avoid.width),
        );
        if !r.overlaps(&avoid) {
            return r;
        }
    }
    // Deterministic fallback: first disjoint slot in raster order.
    for top in 0..=h - avoid.height {
        for left in 0..=w - avoid.width {
            let r = cand(top, left);
            if !r.overlaps(&avoid) {
                return r;
            }
        }
    }
    unreachable!("rectangle sides exceed a third of the image")
}

/// Tampers `sample` with one random rectangle, deterministically in `seed`.
pub fn synthesize_manipulation(sample: &RawSample, seed: u64) -> Result<Tampered> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ManipulationRegistry::default().apply_random(sample, &mut rng)
}

/// Procedural "natural-looking" image: smooth colour field, a few soft
/// shapes, an oriented texture and sensor-like noise.
pub fn generate_base_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageGrid {
    let mut img = ImageGrid::zeros(h, w);
    // Smooth background from a 3x3 colour lattice.
    let lattice: Vec<[f32; 3]> = (0..9)
        .map(|_| {
            [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ]
        })
        .collect();
    for y in 0..h {
        let fy = y as f32 / (h - 1).max(1) as f32 * 2.0;
        let (y0, ty) = ((fy.floor() as usize).min(1), fy - (fy.floor()).min(1.0));
        for x in 0..w {
            let fx = x as f32 / (w - 1).max(1) as f32 * 2.0;
            let (x0, tx) = ((fx.floor() as usize).min(1), fx - (fx.floor()).min(1.0));
            for c in 0..3 {
                let at = |yy: usize, xx: usize| lattice[yy * 3 + xx][c];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                img.set(c, y, x, top * (1.0 - ty) + bot * ty);
            }
        }
    }
    // Soft ellipses.
    let n_shapes = rng.random_range(3..7);
    for _ in 0..n_shapes {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let ry = rng.random_range(0.08..0.3) * h as f32;
        let rx = rng.random_range(0.08..0.3) * w as f32;
        let colour = [
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let alpha = rng.random_range(0.5..0.95f32);
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f32 - cy) / ry).powi(2) + ((x as f32 - cx) / rx).powi(2);
                let a = alpha * (1.0 / (1.0 + ((d - 1.0) * 8.0).exp()));
                for (c, &col) in colour.iter().enumerate() {
                    let v = img.get(c, y, x);
                    img.set(c, y, x, v * (1.0 - a) + col * a);
                }
            }
        }
    }
    // Oriented texture plus noise.
    let freq = rng.random_range(0.05..0.4f32);
    let angle = rng.random_range(0.0..std::f32::consts::PI);
    let amp = rng.random_range(0.02..0.08f32);
    let sigma = rng.random_range(0.02..0.05f32);
    let noise = Normal::new(0.0f32, sigma).expect("positive sigma");
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..h {
        for x in 0..w {
            let t = amp * ((x as f32 * ca + y as f32 * sa) * freq).sin();
            for c in 0..3 {
                let v = img.get(c, y, x) + t + noise.sample(rng);
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// A deterministic corpus of `n` tampered samples with sizes drawn from
/// `[min_side, max_side]`.
pub fn synthetic_corpus(n: usize, min_side: usize, max_side: usize, seed: u64) -> Result<Vec<Tampered>> {
    let registry = ManipulationRegistry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let h = rng.random_range(min_side..=max_side);
            let w = rng.random_range(min_side..=max_side);
            let base = RawSample::authentic(generate_base_image(h, w, &mut rng));
            registry.apply_random(&base, &mut rng)
        })
        .collect()
}

/// Unlabelled procedural images, e.g. for encoder pre-training.
pub fn unlabeled_corpus(n: usize, h: usize, w: usize, seed: u64) -> Vec<ImageGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_base_image(h, w, &mut rng)).collect()
}

/// Binary mask of a rectangle.
pub fn rect_mask(h: usize, w: usize, rect: Rect) -> BinaryGrid {
    BinaryGrid::from_fn(h, w, |y, x| rect.contains(y, x))
}
