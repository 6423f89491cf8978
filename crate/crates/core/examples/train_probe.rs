//! Trains on a generated phantom split and reports hybrid vs 2D-only test DSC.
//! Usage: train_probe [key=value ...]

use std::time::Instant;

use hresformer::phantom::{generate_phantom, make_split, PhantomSpec};
use hresformer::train::{evaluate, Trainer};
use hresformer::Config;

fn main() -> hresformer::Result<()> {
    let mut cfg = Config::default();
    let mut selfval = false;
    for arg in std::env::args().skip(1) {
        if arg == "selfval" {
            selfval = true;
            continue;
        }
        let (k, v) = arg.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let d = &cfg.data;
    let spec = PhantomSpec::from_data_config(d, cfg.model.num_classes, 1234);
    let split = make_split(d.n_train, d.n_val, d.n_test, 7);
    let load = |cases: &[hresformer::phantom::CaseRef]| -> hresformer::Result<Vec<_>> {
        cases.iter().map(|c| generate_phantom(&spec, c.seed)).collect()
    };
    let (train, mut val, test) = (load(&split.train)?, load(&split.val)?, load(&split.test)?);
    if selfval {
        val = train.clone();
    }
    let mut t = Trainer::new(&cfg)?;
    let start = Instant::now();
    t.fit(&train, &val, None, |m| {
        println!("{} {:.1}s", m.csv_row(), start.elapsed().as_secs_f64());
    })?;
    let ev = evaluate(&t.model, &t.store, &test)?;
    println!("hybrid\n{}", ev.hybrid.to_csv());
    println!("2d\n{}", ev.only_2d.to_csv());
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
