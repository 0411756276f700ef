mod common;

use common::{random_mask, rng};
use pmae::data::io::{save_image, save_mask};
use pmae::data::synth::synthetic_corpus;
use pmae::data::{
    augment, crop_to_extent, load_manifest, pad_to_canvas, AugmentConfig, DatasetManifest, Label, ManifestEntry,
    RawSample, SampleSource,
};
use pmae::grid::ImageGrid;
use proptest::prelude::*;
use rand::Rng;

fn random_sample(h: usize, w: usize, g: &mut impl Rng) -> RawSample {
    let mut img = ImageGrid::zeros(h, w);
    img.data.iter_mut().for_each(|v| *v = g.random_range(0.0..1.0));
    RawSample::new(img, random_mask(h, w, g)).unwrap()
}

#[test]
fn crop_inverts_pad_on_random_samples() {
    let mut g = rng(3);
    for _ in 0..100 {
        let (h, w) = (g.random_range(1..=48), g.random_range(1..=48));
        let s = random_sample(h, w, &mut g);
        let padded = pad_to_canvas(&s, 48, 48).unwrap();
        assert_eq!(crop_to_extent(&padded), s);
        for y in 0..48 {
            for x in 0..48 {
                if y >= h || x >= w {
                    assert_eq!(padded.mask.get(y, x), 0);
                    assert!((0..3).all(|c| padded.image.get(c, y, x) == 0.0));
                }
            }
        }
        // pad ∘ crop ∘ pad is idempotent
        assert_eq!(pad_to_canvas(&crop_to_extent(&padded), 48, 48).unwrap(), padded);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_is_deterministic_and_binary(seed in any::<u64>(), h in 8usize..40, w in 8usize..40) {
        let s = random_sample(h, w, &mut rng(seed));
        let cfg = AugmentConfig::default();
        let a = augment(&s, seed, &cfg);
        prop_assert_eq!(&a, &augment(&s, seed, &cfg));
        prop_assert!(a.mask.is_binary());
        prop_assert_eq!(a.image.dims(), a.mask.dims());
    }

    #[test]
    fn synthetic_samples_are_consistent(seed in any::<u64>()) {
        for t in synthetic_corpus(2, 32, 64, seed).unwrap() {
            prop_assert!(t.sample.mask.is_binary());
            prop_assert_eq!(t.sample.mask.count_ones(), t.rect.area());
            prop_assert_eq!(t.sample.image.dims(), t.sample.mask.dims());
        }
    }
}

#[test]
fn manifest_on_disk_loads_as_a_sample_source() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic_corpus(3, 32, 48, 9).unwrap();
    let mut entries = Vec::new();
    for (i, t) in corpus.iter().enumerate() {
        let img = dir.path().join(format!("{i}.png"));
        let mask = dir.path().join(format!("{i}_mask.png"));
        save_image(&t.sample.image, &img).unwrap();
        save_mask(&t.sample.mask, &mask).unwrap();
        entries.push(ManifestEntry {
            image: img,
            mask: Some(mask),
            label: Label::Manipulated,
        });
    }
    let authentic = dir.path().join("auth.png");
    save_image(&corpus[0].sample.image, &authentic).unwrap();
    entries.push(ManifestEntry {
        image: authentic,
        mask: None,
        label: Label::Authentic,
    });
    let path = dir.path().join("manifest.jsonl");
    DatasetManifest { entries }.write(&path).unwrap();

    let m = load_manifest(&path).unwrap();
    assert_eq!(m.len(), 4);
    let s = m.summary();
    assert_eq!((s.manipulated, s.authentic), (3, 1));
    for i in 0..3 {
        let got = SampleSource::get(&m, i).unwrap();
        assert_eq!(got.mask, corpus[i].sample.mask);
        assert!(got.image.mean_abs_diff(&corpus[i].sample.image) < 1.0 / 255.0);
    }
    assert!(SampleSource::get(&m, 3).unwrap().mask.is_empty_mask());
}
