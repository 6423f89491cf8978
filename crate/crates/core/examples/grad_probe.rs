//! Prints per-parameter value and gradient norms after a few steps.

use hresformer::phantom::{generate_phantom, make_split, PhantomSpec};
use hresformer::train::Trainer;
use hresformer::Config;

fn main() -> hresformer::Result<()> {
    let mut cfg = Config::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let spec = PhantomSpec::from_data_config(&cfg.data, cfg.model.num_classes, 1234);
    let split = make_split(2, 0, 0, 7);
    let vols: Vec<_> = split.train.iter().map(|c| generate_phantom(&spec, c.seed)).collect::<Result<_, _>>()?;
    let mut t = Trainer::new(&cfg)?;
    for s in 0..4 {
        let loss = t.step(&vols[s % 2..s % 2 + 1], cfg.train.lr, 0, s)?;
        println!("step {s} loss {loss:.4}");
    }
    let norm = |x: &[f32]| x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    for p in t.store.iter() {
        let g = p.grad.as_ref().map(|g| norm(g.data())).unwrap_or(0.0);
        let v = norm(p.value.data());
        println!("{:50} |w| {:9.4} |g| {:9.4} ratio {:9.4}", p.name, v, g, g / v.max(1e-8));
    }
    Ok(())
}
