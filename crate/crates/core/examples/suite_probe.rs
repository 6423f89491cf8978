use std::time::Instant;

fn main() -> hresformer::Result<()> {
    for seed in 0..3 {
        let t = Instant::now();
        for e in hresformer::suite::run_suite(seed)? {
            println!("{seed} {:<14} {:.3e} {} {:?}", e.block, e.result.max_rel_err, e.result.checked, e.result.worst);
        }
        println!("{:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}
