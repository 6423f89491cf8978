use std::rc::Rc;

use hresformer::gradcheck::{check, random_tensor};
use hresformer::loss::{
    ce_loss, deep_supervised_loss, dice_loss, downsample_labels, dsc_metric, weighted_loss, DICE_EPS,
};
use hresformer::model::Pyramid;
use hresformer::{Graph, Tensor, Var};
use proptest::prelude::*;

fn scalar(v: Var<'_, f64>) -> f64 {
    v.value().data()[0]
}

/// One-hot logits with the given margin at the true class.
fn onehot_logits(labels: &[u8], k: usize, shape: [usize; 3], margin: f64) -> Tensor<f64> {
    let n = labels.len();
    Tensor::from_fn([k, shape[0], shape[1], shape[2]], |i| {
        if labels[i % n] as usize == i / n {
            margin
        } else {
            0.0
        }
    })
}

#[test]
fn ce_uniform_logits_is_log_k() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([4, 2, 3]));
    let ce = ce_loss(x, Rc::from(vec![0u8, 1, 2, 3, 3, 1])).unwrap();
    assert!((scalar(ce) - 4f64.ln()).abs() < 1e-14);
}

#[test]
fn ce_saturates_at_large_margin() {
    let g = Graph::<f64>::new();
    let labels = [2u8, 0, 1];
    let x = g.constant(onehot_logits(&labels, 3, [1, 1, 3], 1e4));
    assert!(scalar(ce_loss(x, Rc::from(labels.to_vec())).unwrap()).abs() < 1e-12);
}

#[test]
fn ce_two_voxel_hand_case() {
    // voxel 0: logits (1, 3), label 1; voxel 1: logits (2, -1), label 1.
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, -1.0]).unwrap());
    let got = scalar(ce_loss(x, Rc::from(vec![1u8, 1])).unwrap());
    let p0 = 3f64.exp() / (1f64.exp() + 3f64.exp());
    let p1 = (-1f64).exp() / (2f64.exp() + (-1f64).exp());
    let want = -(p0.ln() + p1.ln()) / 2.0;
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
}

#[test]
fn ce_rejects_out_of_range_label() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2, 3]));
    assert!(ce_loss(x, Rc::from(vec![0u8, 2, 1])).is_err());
    assert!(dice_loss(x, Rc::from(vec![0u8, 2, 1])).is_err());
}

#[test]
fn dice_hard_correct_and_disjoint() {
    let g = Graph::<f64>::new();
    let labels = vec![0u8, 1, 1, 2, 2, 2, 0, 1];
    let x = g.constant(onehot_logits(&labels, 3, [1, 2, 4], 1e4));
    let correct = scalar(dice_loss(x, Rc::from(labels.clone())).unwrap());
    assert!(correct.abs() < 1e-9, "{correct}");
    let wrong: Vec<u8> = labels.iter().map(|&l| (l + 1) % 3).collect();
    let disjoint = scalar(dice_loss(x, Rc::from(wrong)).unwrap());
    assert!((disjoint - 1.0).abs() < 1e-5, "{disjoint}");
}

/// Soft Dice evaluated as explicit set sums over voxels.
fn dice_oracle(p: &[Vec<f64>], g: &[u8]) -> f64 {
    let k = p.len();
    let mut acc = 0.0;
    for c in 1..k {
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (v, &l) in g.iter().enumerate() {
            let gv = if l as usize == c { 1.0 } else { 0.0 };
            inter += p[c][v] * gv;
            sp += p[c][v];
            sg += gv;
        }
        acc += (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS);
    }
    1.0 - acc / (k - 1) as f64
}

#[test]
fn dice_half_probability_half_foreground() {
    let n = 16;
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let g = Graph::<f64>::new();
    let got = scalar(dice_loss(g.constant(Tensor::zeros([2, n])), Rc::from(labels.clone())).unwrap());
    let want = dice_oracle(&[vec![0.5; n], vec![0.5; n]], &labels);
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    // 1 - (2·4 + ε)/(8 + 8 + ε)
    assert!((got - (1.0 - (8.0 + DICE_EPS) / (16.0 + DICE_EPS))).abs() <= 1e-12);
}

#[test]
fn dice_matches_overlap_oracle_on_random_soft_maps() {
    let k = 3;
    let logits = random_tensor(&[k, 2, 3, 5], 3.0, 9);
    let labels: Vec<u8> = (0..30).map(|i| ((i * 7 + i / 4) % 3) as u8).collect();
    let g = Graph::<f64>::new();
    let x = g.constant(logits);
    let p = x.softmax(0).unwrap().value();
    let planes: Vec<Vec<f64>> = p.data().chunks(30).map(|c| c.to_vec()).collect();
    let got = scalar(dice_loss(x, Rc::from(labels.clone())).unwrap());
    assert!((got - dice_oracle(&planes, &labels)).abs() <= 1e-12);
}

#[test]
fn hard_dice_loss_agrees_with_dsc_counts() {
    let truth: Vec<u8> = (0..40).map(|i| ((i / 3) % 3) as u8).collect();
    let pred: Vec<u8> = (0..40).map(|i| ((i / 4 + i % 2) % 3) as u8).collect();
    let g = Graph::<f64>::new();
    let x = g.constant(onehot_logits(&pred, 3, [1, 5, 8], 1e4));
    let loss = scalar(dice_loss(x, Rc::from(truth.clone())).unwrap());
    let mut acc = 0.0;
    for c in 1..3u8 {
        let p = pred.iter().filter(|&&l| l == c).count() as f64;
        let t = truth.iter().filter(|&&l| l == c).count() as f64;
        let i = pred.iter().zip(&truth).filter(|(&a, &b)| a == c && b == c).count() as f64;
        acc += (2.0 * i + DICE_EPS) / (p + t + DICE_EPS);
    }
    assert!((loss - (1.0 - acc / 2.0)).abs() <= 1e-12);
}

#[test]
fn ce_plus_dice_gradcheck() {
    let labels: Rc<[u8]> = Rc::from(vec![1u8, 0, 2, 2, 0, 1, 1, 0]);
    for seed in 0..3 {
        let r = check(
            &[random_tensor(&[3, 2, 4], 1.5, seed)],
            |_, v| ce_loss(v[0], labels.clone())?.add(dice_loss(v[0], labels.clone())?),
            None,
            seed,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "seed {seed}: {}", r.max_rel_err);
    }
}

#[test]
fn label_downsampling_is_nearest() {
    let labels: Vec<u8> = (0..32).map(|i| i as u8).collect();
    assert_eq!(downsample_labels(&labels, [2, 4, 4], [2, 4, 4]), labels);
    // (j + 0.5)·2 floors to 2j + 1.
    assert_eq!(downsample_labels(&labels, [2, 4, 4], [1, 2, 2]), vec![21, 23, 29, 31]);
}

const FULL: [usize; 3] = [4, 8, 8];

fn phantom_labels() -> Vec<u8> {
    (0..256)
        .map(|i| {
            let (d, h, w) = (i / 64, (i / 8) % 8, i % 8);
            if h < 4 && w < 4 {
                1
            } else if d >= 2 && h >= 4 {
                2
            } else {
                0
            }
        })
        .collect()
}

fn scale_dims(i: usize) -> [usize; 3] {
    [FULL[0].div_ceil(1 << i).max(1), FULL[1] >> i, FULL[2] >> i]
}

/// Outputs of both branches built from per-scale logits.
fn pyramid<'g>(g: &'g Graph<f64>, make: impl Fn(usize, [usize; 3]) -> Tensor<f64>) -> Pyramid<'g, f64> {
    let outs = |off: usize| (0..4).map(|i| g.constant(make(off + i, scale_dims(i)))).collect::<Vec<_>>();
    let p2d = outs(0);
    let p3d_res = outs(4);
    Pyramid {
        p3d: p3d_res.clone(),
        p2d,
        p3d_res,
    }
}

#[test]
fn perfect_pyramid_has_near_zero_loss() {
    let labels = phantom_labels();
    let g = Graph::<f64>::new();
    let pyr = pyramid(&g, |_, dims| onehot_logits(&downsample_labels(&labels, FULL, dims), 3, dims, 60.0));
    let (_, report) = deep_supervised_loss(&pyr, &labels, FULL, [1.0, 0.5, 0.25, 0.125]).unwrap();
    assert!(report.total < 1e-6, "{}", report.total);
    assert_eq!(report.terms.len(), 8);
}

#[test]
fn loss_report_recomputes_from_components() {
    let labels = phantom_labels();
    let g = Graph::<f64>::new();
    let pyr = pyramid(&g, |i, dims| random_tensor(&[3, dims[0], dims[1], dims[2]], 2.0, i as u64));
    let (total, report) = deep_supervised_loss(&pyr, &labels, FULL, [1.0, 0.5, 0.25, 0.125]).unwrap();
    // Independent sum over the 16 scalars with the normalized weights.
    let w = [8.0 / 15.0, 4.0 / 15.0, 2.0 / 15.0, 1.0 / 15.0];
    let mut want = 0.0;
    for (j, t) in report.terms.iter().enumerate() {
        assert!((t.weight - w[j % 4]).abs() < 1e-15);
        want += w[j % 4] * t.ce + w[j % 4] * t.dice;
    }
    assert!((report.total - want).abs() <= 1e-12);
    assert!((scalar(total) - report.recompute()).abs() <= 1e-12);
    let names: Vec<&str> = report.terms.iter().map(|t| t.output.as_str()).collect();
    assert_eq!(names[0], "p2d_0");
    assert_eq!(names[7], "p3d_res_3");

    // Each component is an independent CE/Dice of the matching output.
    let t5 = &report.terms[5];
    let lab = Rc::from(downsample_labels(&labels, FULL, scale_dims(1)));
    assert!((t5.ce - scalar(ce_loss(pyr.p3d_res[1], Rc::clone(&lab)).unwrap())).abs() < 1e-15);
    assert!((t5.dice - scalar(dice_loss(pyr.p3d_res[1], lab).unwrap())).abs() < 1e-15);
}

#[test]
fn weights_scale_linearly_and_normalization_removes_scale() {
    let labels = phantom_labels();
    let g = Graph::<f64>::new();
    let pyr = pyramid(&g, |i, dims| random_tensor(&[3, dims[0], dims[1], dims[2]], 1.0, 40 + i as u64));
    let w = [0.4, 0.3, 0.2, 0.1];
    let (_, a) = weighted_loss(&pyr, &labels, FULL, w).unwrap();
    let (_, b) = weighted_loss(&pyr, &labels, FULL, w.map(|x| 2.0 * x)).unwrap();
    assert!((b.total - 2.0 * a.total).abs() <= 1e-12);
    let (_, n1) = deep_supervised_loss(&pyr, &labels, FULL, w).unwrap();
    let (_, n2) = deep_supervised_loss(&pyr, &labels, FULL, w.map(|x| 2.0 * x)).unwrap();
    assert!((n1.total - a.total).abs() <= 1e-12);
    assert!((n1.total - n2.total).abs() <= 1e-12);
}

#[test]
fn loss_rejects_wrong_label_count() {
    let g = Graph::<f64>::new();
    let pyr = pyramid(&g, |_, dims| Tensor::zeros([3, dims[0], dims[1], dims[2]]));
    assert!(deep_supervised_loss(&pyr, &[0u8; 10], FULL, [1.0; 4]).is_err());
}

#[test]
fn dsc_cases() {
    let a: Vec<u8> = (0..300).map(|i| (i % 3) as u8).collect();
    assert_eq!(dsc_metric(&a, &a, 3).unwrap().mean, 1.0);

    let p = vec![1u8; 10];
    let t = vec![0u8; 10];
    let d = dsc_metric(&p, &t, 2).unwrap();
    assert_eq!(d.per_class, vec![0.0]);

    // |P| = |G| = 100, overlap 50.
    let mut p = vec![0u8; 300];
    let mut t = vec![0u8; 300];
    p[..100].fill(1);
    t[50..150].fill(1);
    assert_eq!(dsc_metric(&p, &t, 2).unwrap().mean, 0.5);

    // Class 2 absent from both scores 1.
    let d = dsc_metric(&p, &t, 3).unwrap();
    assert_eq!(d.per_class, vec![0.5, 1.0]);
    assert_eq!(d.mean, 0.75);

    assert!(dsc_metric(&[0, 3], &[0, 0], 3).is_err());
    assert!(dsc_metric(&[0], &[0, 0], 3).is_err());
}

proptest! {
    #[test]
    fn dsc_properties(a in proptest::collection::vec(0u8..4, 1..60), seed in 0u64..1000) {
        let b: Vec<u8> = a.iter().enumerate().map(|(i, &x)| ((x as u64 + seed * (i as u64 % 3)) % 4) as u8).collect();
        let self_score = dsc_metric(&a, &a, 4).unwrap();
        prop_assert_eq!(self_score.mean, 1.0);
        let ab = dsc_metric(&a, &b, 4).unwrap();
        let ba = dsc_metric(&b, &a, 4).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert!(ab.per_class.iter().all(|&d| (0.0..=1.0).contains(&d)));
    }

    #[test]
    fn loss_ranges(seed in 0u64..500) {
        let labels: Vec<u8> = (0..24).map(|i| ((i as u64 * (seed + 1)) % 3) as u8).collect();
        let g = Graph::<f64>::new();
        let x = g.constant(random_tensor(&[3, 24], 4.0, seed));
        let ce = scalar(ce_loss(x, Rc::from(labels.clone())).unwrap());
        let dice = scalar(dice_loss(x, Rc::from(labels)).unwrap());
        prop_assert!(ce >= 0.0);
        prop_assert!((0.0..=1.0 + 1e-6).contains(&dice));
    }
}
