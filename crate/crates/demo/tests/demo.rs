use hresformer::checkpoint::{Checkpoint, Progress};
use hresformer::{Config, HResFormer};
use hresformer_demo::{window_layout, AttentionDemo, Phantom};

#[test]
fn slice_rgba_is_opaque_and_overlay_only_touches_organs() {
    let p = Phantom::generate(3, 0, 8, 32, 32).unwrap();
    assert_eq!((p.depth(), p.height(), p.width()), (8, 32, 32));
    let plain = p.slice_rgba(4, false);
    let over = p.slice_rgba(4, true);
    assert_eq!(plain.len(), 4 * 32 * 32);
    assert!(plain.chunks(4).all(|px| px[3] == 255 && px[0] == px[1] && px[1] == px[2]));
    let labels = &p.volume().labels[4 * 1024..5 * 1024];
    assert!(labels.iter().any(|&l| l > 0));
    for (i, &l) in labels.iter().enumerate() {
        assert_eq!(l == 0, plain[4 * i..4 * i + 4] == over[4 * i..4 * i + 4], "pixel {i}");
    }
    // Out-of-range slices clamp to the last one.
    assert_eq!(p.slice_rgba(99, true), p.slice_rgba(7, true));
}

#[test]
fn unshifted_windows_show_the_whole_tile() {
    let v = window_layout([4, 8, 8], [2, 4, 4], false, [1, 5, 2]).unwrap();
    let (ids, vis) = v.split_at(64);
    assert_eq!(ids.iter().copied().max(), Some(3));
    for y in 0..8 {
        for x in 0..8 {
            let same = y / 4 == 1 && x / 4 == 0;
            assert_eq!(vis[y * 8 + x] == 1, same, "({y}, {x})");
            assert_eq!(ids[y * 8 + x] == ids[5 * 8 + 2], same);
        }
    }
}

#[test]
fn shifted_corner_window_is_masked_into_pieces() {
    // After a half-window roll the bottom-right tile mixes four regions; the
    // query only keeps its own piece.
    let v = window_layout([2, 8, 8], [2, 4, 4], true, [0, 7, 7]).unwrap();
    let vis = &v[64..];
    let seen: Vec<usize> = (0..64).filter(|&i| vis[i] == 1).collect();
    let want: Vec<usize> = (0..64).filter(|&i| i / 8 >= 6 && i % 8 >= 6).collect();
    assert_eq!(seen, want);
    assert!(window_layout([2, 8, 8], [2, 4, 4], true, [2, 0, 0]).is_err());
}

#[test]
fn attention_rows_are_distributions_over_the_reduced_grid() {
    let p = Phantom::generate(1, 0, 4, 32, 32).unwrap();
    for r in [1, 2, 4] {
        let a = AttentionDemo::random(5, r, 0.5).unwrap();
        let (w, t, k) = a.weights(&p.slice_input(2), 3, 4).unwrap();
        assert_eq!(t, [8, 8]);
        assert_eq!(k, [8 / r, 8 / r]);
        assert_eq!(w.len(), k[0] * k[1]);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(w.iter().all(|v| *v >= 0.0));
    }
    let a = AttentionDemo::random(5, 2, 0.5).unwrap();
    assert!(a.weights(&p.slice_input(0), 8, 0).is_err());
}

#[test]
fn checkpoint_attention_uses_first_stage_reduction() {
    let config = Config::default();
    let (_, params) = HResFormer::new(&config.model, 0).unwrap();
    let r = config.model.reductions_2d[0];
    let ck = Checkpoint {
        config,
        params,
        momentum: Vec::new(),
        progress: Progress::default(),
    };
    let bytes = ck.encode();
    let a = AttentionDemo::from_checkpoint_bytes(&bytes).unwrap();
    let p = Phantom::generate(1, 0, 4, 64, 64).unwrap();
    let (w, t, k) = a.weights(&p.slice_input(1), 0, 0).unwrap();
    assert_eq!(t, [16, 16]);
    assert_eq!(k, [16 / r, 16 / r]);
    assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    assert!(AttentionDemo::from_checkpoint_bytes(&bytes[..10]).is_err());
}
