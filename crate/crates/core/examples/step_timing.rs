use std::rc::Rc;
use std::time::Instant;

use hresformer::{Graph, HResFormer, ModelConfig, Tensor};

fn main() {
    let mut cfg = ModelConfig::default();
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 {
        cfg.hlgm_blocks = args[1].parse().unwrap();
    }
    let (model, store) = HResFormer::new(&cfg, 0).unwrap();
    println!("params {}", store.num_scalars());
    let vol = Tensor::<f32>::from_fn([1, 16, 64, 64], |i| ((i * 7919) % 97) as f32 / 97.0);
    let labels: Rc<[u8]> = Rc::from(vec![0u8; 16 * 64 * 64]);
    let steps: usize = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let mut best = f64::INFINITY;
    for _ in 0..steps {
        let t = Instant::now();
        let g = Graph::new();
        let p = store.bind(&g);
        let pyr = model.forward(&p, g.constant(vol.clone())).unwrap();
        let t1 = t.elapsed();
        let loss = pyr.p3d_res[0].cross_entropy(labels.clone()).unwrap();
        let loss = loss.add(pyr.p2d[0].cross_entropy(labels.clone()).unwrap()).unwrap();
        g.backward(loss).unwrap();
        println!("forward {:?} total {:?} nodes {}", t1, t.elapsed(), g.len());
        best = best.min(t.elapsed().as_secs_f64());
    }
    println!("best step {:.1} ms", best * 1e3);
    let mut by: std::collections::BTreeMap<String, u64> = Default::default();
    let (total, recs) = model.measured_flops(&store, [16, 64, 64]).unwrap();
    for r in recs {
        let key: String = r.scope.split('/').take(2).collect::<Vec<_>>().join("/");
        *by.entry(key).or_default() += r.flops;
    }
    println!("total flops {total} analytic {}", model.flops([16, 64, 64]).unwrap());
    for (k, v) in by {
        println!("{k:40} {:.1}M", v as f64 / 1e6);
    }
}
