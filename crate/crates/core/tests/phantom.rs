use hresformer::phantom::{
    augment, decode_volume, encode_volume, generate_phantom, load_split, load_volume, make_split, normalize,
    parse_manifest, save_volume, write_dataset, OrganSpec, PhantomSpec, SplitKind, HVOL_HEADER,
};
use hresformer::{DataConfig, Error};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sphere_spec(radius: f64, n: usize) -> PhantomSpec {
    PhantomSpec {
        dims: [n; 3],
        organs: vec![OrganSpec {
            count: (1, 1),
            semi_axes: [(radius, radius); 3],
            mean: 1.0,
            sigma: 0.0,
        }],
        background_mean: 0.0,
        background_sigma: 0.0,
        jitter: 0.0,
        seed: 3,
    }
}

#[test]
fn centred_sphere_matches_discrete_ball_count() {
    let v = generate_phantom(&sphere_spec(4.0, 16), 0).unwrap();
    // Voxel centres (i + 0.5) within distance 4 of the volume centre 8.
    let mut want = 0;
    for d in 0..16 {
        for h in 0..16 {
            for w in 0..16 {
                let r2: f64 = [d, h, w].iter().map(|&i| (i as f64 + 0.5 - 8.0).powi(2)).sum();
                if r2 <= 16.0 {
                    want += 1;
                }
            }
        }
    }
    let got = v.labels.iter().filter(|&&l| l == 1).count();
    assert_eq!(got, want);
    assert_eq!(want, 280);
    // No noise: intensity is exactly the class mean.
    for (x, &l) in v.intensity.data().iter().zip(&v.labels) {
        assert_eq!(*x, l as f32);
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = PhantomSpec::from_data_config(&DataConfig::default(), 3, 11);
    let a = generate_phantom(&spec, 5).unwrap();
    let b = generate_phantom(&spec, 5).unwrap();
    assert_eq!(encode_volume(&a).unwrap(), encode_volume(&b).unwrap());
    let c = generate_phantom(&spec, 6).unwrap();
    assert_ne!(a.labels, c.labels);
}

#[test]
fn zero_organs_gives_background_only() {
    let mut spec = sphere_spec(3.0, 8);
    spec.organs[0].count = (0, 0);
    let v = generate_phantom(&spec, 1).unwrap();
    assert!(v.labels.iter().all(|&l| l == 0));
}

#[test]
fn default_phantom_has_every_class_and_no_overlap_loss() {
    let spec = PhantomSpec::from_data_config(&DataConfig::default(), 3, 0);
    for seed in 0..5 {
        let v = generate_phantom(&spec, seed).unwrap();
        v.validate().unwrap();
        for c in 0..3u8 {
            assert!(v.labels.contains(&c), "case {seed} lacks class {c}");
        }
    }
}

#[test]
fn impossible_placement_is_a_generation_error() {
    let mut spec = sphere_spec(4.0, 8);
    spec.organs[0].count = (2, 2);
    assert!(matches!(generate_phantom(&spec, 0), Err(Error::Generation(_))));
    let mut spec = sphere_spec(5.0, 8);
    spec.jitter = 1.0;
    assert!(matches!(generate_phantom(&spec, 0), Err(Error::Generation(_))));
}

#[test]
fn hvol_roundtrip_and_size() {
    let spec = PhantomSpec::from_data_config(
        &DataConfig {
            depth: 4,
            height: 12,
            width: 10,
            ..DataConfig::default()
        },
        3,
        2,
    );
    let v = generate_phantom(&spec, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case_009.hvol");
    save_volume(&path, &v).unwrap();
    let n = 4 * 12 * 10;
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 4 + 4 * 5 + 4 * n + n);
    assert_eq!(HVOL_HEADER, 24);
    let back = load_volume(&path).unwrap();
    assert_eq!(back, v);
    let bits = |x: &[f32]| x.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.intensity.data()), bits(v.intensity.data()));
}

#[test]
fn hvol_rejects_corruption() {
    let v = generate_phantom(&sphere_spec(2.0, 6), 0).unwrap();
    let good = encode_volume(&v).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_volume(&bad, "x"), Err(Error::Format(m)) if m.contains("magic")));
    assert!(matches!(decode_volume(&good[..good.len() - 1], "x"), Err(Error::Format(_))));
    assert!(matches!(decode_volume(&good[..10], "x"), Err(Error::Format(_))));
    let mut bad = good.clone();
    *bad.last_mut().unwrap() = 7;
    assert!(matches!(decode_volume(&bad, "x"), Err(Error::Format(m)) if m.contains("label")));
}

#[test]
fn split_sizes_and_determinism() {
    let s = make_split(20, 5, 5, 4);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (20, 5, 5));
    let mut ids: Vec<&str> = [&s.train, &s.val, &s.test]
        .iter()
        .flat_map(|v| v.iter().map(|c| c.case_id.as_str()))
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 30);
    assert_eq!(make_split(20, 5, 5, 4), s);
    assert_ne!(make_split(20, 5, 5, 5), s);
}

#[test]
fn train_and_test_volumes_all_differ() {
    let data = DataConfig {
        depth: 8,
        height: 24,
        width: 24,
        ..DataConfig::default()
    };
    let spec = PhantomSpec::from_data_config(&data, 3, 1);
    let s = make_split(20, 5, 5, 0);
    let gen = |cases: &[hresformer::phantom::CaseRef]| -> Vec<_> {
        cases.iter().map(|c| generate_phantom(&spec, c.seed).unwrap()).collect()
    };
    let (train, test) = (gen(&s.train), gen(&s.test));
    for a in &train {
        for b in &test {
            assert_ne!(a.intensity.data(), b.intensity.data());
        }
    }
}

#[test]
fn dataset_manifest_roundtrip() {
    let data = DataConfig {
        depth: 4,
        height: 16,
        width: 16,
        ..DataConfig::default()
    };
    let spec = PhantomSpec::from_data_config(&data, 3, 8);
    let split = make_split(3, 1, 2, 0);
    let dir = tempfile::tempdir().unwrap();
    let entries = write_dataset(dir.path(), &spec, &split).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(parse_manifest(&text).unwrap(), entries);
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.split(' ').count() == 3));
    let test = load_split(dir.path(), SplitKind::Test).unwrap();
    assert_eq!(test.len(), 2);
    assert_eq!(test[0].case_id, split.test[0].case_id);
    assert_eq!(test[0].labels, generate_phantom(&spec, split.test[0].seed).unwrap().labels);
    assert!(parse_manifest("a b").is_err());
    assert!(parse_manifest("a b nope").is_err());
}

#[test]
fn normalize_gives_zero_mean_unit_variance() {
    let v = generate_phantom(&PhantomSpec::from_data_config(&DataConfig::default(), 3, 0), 0).unwrap();
    let x = normalize(&v.intensity);
    let n = x.numel() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
}

proptest! {
    #[test]
    fn augmentation_keeps_labels_aligned(seed in 0u64..200) {
        let v = generate_phantom(&sphere_spec(2.0, 6), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = augment(&v, 0.0, &mut rng);
        // Without noise the label map still indexes the intensities.
        for (x, &l) in a.intensity.data().iter().zip(&a.labels) {
            prop_assert_eq!(*x, l as f32);
        }
        let mut counts = [0usize; 2];
        for &l in &a.labels {
            counts[l as usize] += 1;
        }
        prop_assert_eq!(counts[1], v.labels.iter().filter(|&&l| l == 1).count());
    }
}
