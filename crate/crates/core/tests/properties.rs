//! Property tests for the data layer, metrics, and model plumbing
//! invariants.

use ildiff_core::adapter::{patch_mask, temporal_mix, FeatureClip, FeatureSource};
use ildiff_core::clip::FrameClip;
use ildiff_core::config::ModelConfig;
use ildiff_core::dataset::{
    load_clip, load_manifest, manifest_stats, save_clip, save_manifest, ManifestRecord,
};
use ildiff_core::diffusion::{forward_noise, NoiseSchedule};
use ildiff_core::latent::{adjust_latent, decode_rgb, decode_transparent, init_tr_decoder, init_vae, LatentClip, LatentOffset};
use ildiff_core::metrics::{flicker_index, psnr, ssim};
use ildiff_core::nn::Params;
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn clip_strategy(max_frames: usize, max_dim: usize) -> impl Strategy<Value = FrameClip> {
    (1..=max_frames, 1..=max_dim, 1..=max_dim).prop_flat_map(|(n, h, w)| {
        proptest::collection::vec(0.0f64..=1.0, n * 4 * h * w).prop_map(move |values| {
            FrameClip::new(Array4::from_shape_vec((n, 4, h, w), values).unwrap()).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Quantized save followed by load reproduces every channel within
    /// half a quantization step.
    #[test]
    fn clip_roundtrip_error_bounded(clip in clip_strategy(3, 6)) {
        let tmp = tempfile::TempDir::new().unwrap();
        save_clip(&clip, tmp.path()).unwrap();
        let loaded = load_clip(tmp.path()).unwrap();
        prop_assert_eq!(loaded.frame_count(), clip.frame_count());
        for (a, b) in clip.data().iter().zip(loaded.data().iter()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{} vs {}", a, b);
        }
    }
}

fn record_strategy() -> impl Strategy<Value = ManifestRecord> {
    (
        1usize..60,
        1usize..40,
        proptest::collection::vec(0usize..8, 1..4),
    )
        .prop_map(|(caption_len, frame_count, word_ids)| {
            let vocab = ["disk", "ring", "rounded-rect", "star", "wave", "dot", "bar", "arc"];
            ManifestRecord {
                id: "r".into(),
                frames_dir: "r/rgb".into(),
                frame_count,
                caption_en: "x".repeat(caption_len),
                caption_cn: String::new(),
                trigger_words: word_ids.iter().map(|&i| vocab[i].to_string()).collect(),
                keyframe_index: frame_count - 1,
            }
        })
}

/// Independent recomputation of manifest statistics with explicit loops,
/// summing in record order exactly like the definition.
fn brute_force_stats(records: &[ManifestRecord]) -> (f64, f64, BTreeMap<String, u64>) {
    let mut len_sum = 0.0;
    let mut frames_sum = 0.0;
    let mut freqs: BTreeMap<String, u64> = BTreeMap::new();
    for r in records {
        len_sum += r.caption_en.chars().count() as f64;
        frames_sum += r.frame_count as f64;
        let mut seen: Vec<&str> = Vec::new();
        for w in &r.trigger_words {
            if !seen.contains(&w.as_str()) {
                seen.push(w);
                *freqs.entry(w.clone()).or_insert(0) += 1;
            }
        }
    }
    let n = records.len() as f64;
    (len_sum / n, frames_sum / n, freqs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn manifest_stats_matches_brute_force(records in proptest::collection::vec(record_strategy(), 1..200)) {
        let stats = manifest_stats(&records).unwrap();
        let (len, frames, freqs) = brute_force_stats(&records);
        prop_assert_eq!(stats.avg_description_length, len);
        prop_assert_eq!(stats.avg_frame_count, frames);
        prop_assert_eq!(stats.trigger_word_frequencies, freqs);
        prop_assert_eq!(stats.sample_count, records.len());
    }
}

#[test]
fn manifest_stats_matches_brute_force_on_1000_records() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(404);
    let vocab = ["disk", "ring", "rounded-rect", "star", "wave"];
    let records: Vec<ManifestRecord> = (0..1000)
        .map(|i| {
            let frame_count = rng.gen_range(2..40);
            ManifestRecord {
                id: format!("clip_{i:04}"),
                frames_dir: format!("clip_{i:04}/rgb"),
                frame_count,
                caption_en: "y".repeat(rng.gen_range(1..120)),
                caption_cn: String::new(),
                trigger_words: (0..rng.gen_range(1..4))
                    .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
                    .collect(),
                keyframe_index: rng.gen_range(0..frame_count),
            }
        })
        .collect();
    let stats = manifest_stats(&records).unwrap();
    let (len, frames, freqs) = brute_force_stats(&records);
    assert_eq!(stats.avg_description_length, len);
    assert_eq!(stats.avg_frame_count, frames);
    assert_eq!(stats.trigger_word_frequencies, freqs);
}

/// Flipping any single invariant-carrying field must make the manifest load
/// fail.
#[test]
fn manifest_mutations_are_rejected() {
    let tmp = tempfile::TempDir::new().unwrap();
    let clip = FrameClip::from_alpha(Array3::ones((4, 2, 2))).unwrap();
    save_clip(&clip, tmp.path().join("clip_0000/rgb")).unwrap();
    let valid = ManifestRecord {
        id: "clip_0000".into(),
        frames_dir: "clip_0000/rgb".into(),
        frame_count: 4,
        caption_en: "a clip".into(),
        caption_cn: String::new(),
        trigger_words: vec!["disk".into()],
        keyframe_index: 3,
    };
    let path = tmp.path().join("manifest.json");
    save_manifest(&[valid.clone()], &path).unwrap();
    assert!(load_manifest(&path).is_ok());

    // keyframe_index >= frame_count
    let mut bad = valid.clone();
    bad.keyframe_index = 4;
    save_manifest(&[bad], &path).unwrap();
    assert!(load_manifest(&path).is_err(), "keyframe violation accepted");

    // empty trigger words
    let mut bad = valid.clone();
    bad.trigger_words.clear();
    save_manifest(&[bad], &path).unwrap();
    assert!(load_manifest(&path).is_err(), "empty trigger words accepted");

    // frame_count disagrees with files on disk
    let mut bad = valid.clone();
    bad.frame_count = 5;
    bad.keyframe_index = 0;
    save_manifest(&[bad], &path).unwrap();
    assert!(load_manifest(&path).is_err(), "frame_count mismatch accepted");

    // frames_dir pointing nowhere
    let mut bad = valid.clone();
    bad.frames_dir = "missing/rgb".into();
    save_manifest(&[bad], &path).unwrap();
    assert!(load_manifest(&path).is_err(), "missing frames_dir accepted");
}

fn image_pair_strategy() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (8usize..=16, 8usize..=16).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(-1.0f64..=2.0, h * w),
            proptest::collection::vec(-1.0f64..=2.0, h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    Array2::from_shape_vec((h, w), a).unwrap(),
                    Array2::from_shape_vec((h, w), b).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    /// SSIM stays inside [-1, 1] even for adversarial out-of-range pairs,
    /// and both metrics are symmetric.
    #[test]
    fn ssim_bounds_and_symmetry((a, b) in image_pair_strategy()) {
        let s_ab = ssim(a.view(), b.view(), 1.0).unwrap();
        let s_ba = ssim(b.view(), a.view(), 1.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s_ab), "ssim {} out of range", s_ab);
        prop_assert_eq!(s_ab, s_ba);
        let p_ab = psnr(a.view(), b.view(), 1.0).unwrap();
        let p_ba = psnr(b.view(), a.view(), 1.0).unwrap();
        prop_assert_eq!(p_ab, p_ba);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn flicker_of_identical_clip_is_zero(clip in clip_strategy(4, 6)) {
        prop_assume!(clip.frame_count() >= 2);
        prop_assert_eq!(flicker_index(&clip, &clip).unwrap(), 0.0);
    }

    /// Noising is linear in (x, eps) jointly.
    #[test]
    fn forward_noise_superposition(
        x1 in proptest::collection::vec(-2.0f64..2.0, 16),
        x2 in proptest::collection::vec(-2.0f64..2.0, 16),
        e1 in proptest::collection::vec(-2.0f64..2.0, 16),
        e2 in proptest::collection::vec(-2.0f64..2.0, 16),
        t in 1usize..=10,
    ) {
        let shape = (1, 4, 2, 2);
        let to = |v: Vec<f64>| Array4::from_shape_vec(shape, v).unwrap();
        let (x1, x2, e1, e2) = (to(x1), to(x2), to(e1), to(e2));
        let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let lhs = forward_noise(&(&x1 + &x2), t, &(&e1 + &e2), &sched).unwrap();
        let rhs = &forward_noise(&x1, t, &e1, &sched).unwrap()
            + &forward_noise(&x2, t, &e2, &sched).unwrap();
        for (u, v) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    /// Latent adjustment is the fixed-order elementwise sum.
    #[test]
    fn adjust_latent_matches_elementwise_sum(
        z in proptest::collection::vec(-3.0f64..3.0, 32),
        dz in proptest::collection::vec(-3.0f64..3.0, 32),
        g in proptest::collection::vec(-3.0f64..3.0, 32),
    ) {
        let shape = (2, 4, 2, 2);
        let zc = LatentClip::new(Array4::from_shape_vec(shape, z.clone()).unwrap(), 4).unwrap();
        let dzc = LatentOffset::new(Array4::from_shape_vec(shape, dz.clone()).unwrap()).unwrap();
        let gc = LatentOffset::new(Array4::from_shape_vec(shape, g.clone()).unwrap()).unwrap();
        let adj = adjust_latent(&zc, &dzc, &gc).unwrap();
        for (i, v) in adj.latents().iter().enumerate() {
            prop_assert_eq!(*v, (z[i] + dz[i]) + g[i]);
        }
    }

    /// Decoders never produce non-finite values for latents of magnitude
    /// up to 10.
    #[test]
    fn decoders_total_on_bounded_latents(values in proptest::collection::vec(-10.0f64..=10.0, 64)) {
        let config = ModelConfig::tiny();
        let mut params = Params::new();
        init_vae(&mut params, 3, &config);
        init_tr_decoder(&mut params, 3, &config);
        let z = LatentClip::new(Array4::from_shape_vec((1, 4, 4, 4), values).unwrap(), 4).unwrap();
        let rgb = decode_rgb(&z, &params, &config).unwrap();
        prop_assert!(rgb.data().iter().all(|v| v.is_finite()));
        let (r, a) = decode_transparent(&z, &params, &config).unwrap();
        prop_assert!(r.data().iter().all(|v| v.is_finite()));
        prop_assert!(a.data().iter().all(|v| v.is_finite()));
    }

    /// Depth-0 temporal mixing is the bitwise identity.
    #[test]
    fn temporal_depth_zero_identity(values in proptest::collection::vec(-4.0f64..4.0, 2 * 8 * 4 * 4)) {
        let config = ModelConfig::tiny();
        let params = Params::new();
        let feats = FeatureClip::new(
            Array4::from_shape_vec((2, 8, 4, 4), values).unwrap(),
            FeatureSource::Student,
        )
        .unwrap();
        let mixed = temporal_mix(&feats, 0, &params, &config).unwrap();
        prop_assert_eq!(mixed.features(), feats.features());
    }

    /// Masked patch counts are exact for any ratio and grid.
    #[test]
    fn patch_mask_count_exact(ratio in 0.0f64..0.999, gh in 1usize..5, gw in 1usize..5, seed in 0u64..1000) {
        let patch = 4;
        let mask = patch_mask(gh * patch, gw * patch, patch, ratio, seed).unwrap();
        let total = gh * gw;
        let expect = (ratio * total as f64).round() as usize;
        let masked_pixels: f64 = mask.iter().map(|v| 1.0 - v).sum();
        prop_assert_eq!(masked_pixels as usize, expect * patch * patch);
    }
}

/// Ground-truth alpha only changes near sprite boundaries between
/// consecutive frames (band bounded by displacement + 2px of anti-aliasing).
#[test]
fn synth_temporal_consistency_band() {
    use ildiff_core::synth::{generate_clip, ClipSpec, SpriteShape, SpriteSpec};
    let speed = 1.5f64;
    let spec = ClipSpec {
        height: 48,
        width: 48,
        frame_count: 6,
        background_color: [1.0, 1.0, 1.0],
        sprites: vec![SpriteSpec {
            shape: SpriteShape::Disk,
            fill_color: [0.2, 0.3, 0.8],
            center: (14.0, 24.0),
            size: 6.0,
            aspect: 1.0,
            thickness: 0.0,
            corner_radius: 0.0,
            velocity: (speed, 0.0),
            wobble: None,
            semi_open: false,
        }],
        seed: 0,
    };
    let clip = generate_clip(&spec).unwrap();
    let alpha = clip.alpha.alpha();
    for f in 0..5 {
        for y in 0..48 {
            for x in 0..48 {
                let delta = (alpha[[f + 1, y, x]] - alpha[[f, y, x]]).abs();
                if delta > 0.0 {
                    // Pixel must lie within (radius + displacement + 2) of
                    // the sprite center at frame f.
                    let cx = 14.0 + speed * f as f64;
                    let d = ((y as f64 - 24.0).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    assert!(
                        d <= 6.0 + speed + 2.0,
                        "alpha changed {delta} at distance {d} from boundary band"
                    );
                }
            }
        }
    }
}

/// Every generated semi-open clip exposes hole pixels whose RGB matches the
/// background exactly while ground-truth alpha is 0 there.
#[test]
fn synth_semi_open_fixture_nonempty() {
    use ildiff_core::synth::{generate_dataset, DatasetTemplate, SpriteShape};
    let tmp = tempfile::TempDir::new().unwrap();
    let template = DatasetTemplate {
        height: 32,
        width: 32,
        frame_count: 3,
        min_sprites: 1,
        max_sprites: 1,
        shapes: vec![SpriteShape::Ring],
        semi_open_prob: 1.0,
        ..DatasetTemplate::default()
    };
    let manifest = generate_dataset(5, &template, 77, tmp.path()).unwrap();
    let data = ildiff_core::stages::LoadedDataset::load(&manifest).unwrap();
    for i in 0..data.len() {
        let holes = data.holes[i].as_ref().expect("ring clips carry hole masks");
        let hole_alpha = holes.alpha();
        let gt_alpha = data.alpha[i].alpha();
        let mut found = 0;
        for ((f, y, x), &m) in hole_alpha.indexed_iter() {
            if m == 1.0 {
                found += 1;
                assert_eq!(gt_alpha[[f, y, x]], 0.0, "hole interior must be transparent");
            }
        }
        assert!(found > 0, "clip {i} has an empty hole mask");
    }
}
