//! `hresformer` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hresformer::checkpoint::Checkpoint;
use hresformer::phantom::{load_split, load_volume, make_split, save_volume, write_dataset, PhantomSpec, SplitKind};
use hresformer::train::{evaluate, Trainer, BEST_CKPT};
use hresformer::{model::count_params, Config, HResFormer};

#[derive(Parser)]
#[command(name = "hresformer", version, about = "Hybrid 2D/3D transformer segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for `infer`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes a phantom dataset (HVOL volumes plus manifest.txt).
    GenData(Common),
    /// Trains on the dataset's train/val split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of a fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores a checkpoint on the test split; writes eval.csv and eval_2d.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/best.hrfm`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Segments one HVOL volume and writes the prediction as HVOL.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Runs the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Prints the number of scalar parameters.
    CountParams(Common),
    /// Prints the forward FLOPs of one configured volume.
    CountFlops {
        #[command(flatten)]
        common: Common,
        /// Also print FLOPs per top-level scope.
        #[arg(long)]
        breakdown: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(c: &Common) -> hresformer::Result<Config> {
    let mut cfg = Config::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &Config) -> PathBuf {
    c.out.clone().unwrap_or_else(|| cfg.train.out_dir.clone())
}

fn run(cmd: Cmd) -> hresformer::Result<ExitCode> {
    match cmd {
        Cmd::GenData(c) => {
            let cfg = load_config(&c)?;
            let dir = c.out.clone().unwrap_or_else(|| cfg.train.data_dir.clone());
            let d = &cfg.data;
            let spec = PhantomSpec::from_data_config(d, cfg.model.num_classes, cfg.train.seed);
            let split = make_split(d.n_train, d.n_val, d.n_test, cfg.train.seed);
            let entries = write_dataset(&dir, &spec, &split)?;
            println!("wrote {} volumes to {}", entries.len(), dir.display());
        }
        Cmd::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let train = load_split(&cfg.train.data_dir, SplitKind::Train)?;
            let val = load_split(&cfg.train.data_dir, SplitKind::Val)?;
            let mut trainer = match resume {
                Some(path) => {
                    let mut ck = Checkpoint::load(&path)?;
                    if ck.config.model != cfg.model {
                        return Err(hresformer::Error::Config("checkpoint model differs from --config".into()));
                    }
                    ck.config.train = cfg.train.clone();
                    Trainer::from_checkpoint(ck)?
                }
                None => Trainer::new(&cfg)?,
            };
            let start = Instant::now();
            trainer.fit(&train, &val, Some(&out), |m| {
                println!("{} ({:.1}s)", m.csv_row(), start.elapsed().as_secs_f64());
            })?;
            println!("checkpoints in {}", out.display());
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let path = checkpoint.unwrap_or_else(|| out.join(BEST_CKPT));
            let (model, store) = restore(&path)?;
            let test = load_split(&cfg.train.data_dir, SplitKind::Test)?;
            let ev = evaluate(&model, &store, &test)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("eval.csv"), ev.hybrid.to_csv())?;
            fs::write(out.join("eval_2d.csv"), ev.only_2d.to_csv())?;
            print!("{}", ev.hybrid.to_csv());
        }
        Cmd::Infer {
            common,
            checkpoint,
            input,
        } => {
            let cfg = load_config(&common)?;
            let (model, store) = restore(&checkpoint)?;
            let mut vol = load_volume(&input)?;
            if vol.num_classes != cfg.model.num_classes {
                return Err(hresformer::Error::Config(format!(
                    "volume has {} classes, config {}",
                    vol.num_classes, cfg.model.num_classes
                )));
            }
            vol.labels = model.infer(&store, &hresformer::train::model_input(&vol))?;
            let out = common.out.unwrap_or_else(|| with_suffix(&input, "pred"));
            save_volume(&out, &vol)?;
            println!("{}", out.display());
        }
        Cmd::Gradcheck { seed } => {
            let entries = hresformer::suite::run_suite(seed)?;
            let mut ok = true;
            for e in &entries {
                let verdict = if e.passed() { "ok" } else { "FAIL" };
                println!("{:16} {:.3e} (tol {:.0e}) {verdict}", e.block, e.result.max_rel_err, e.tol);
                ok &= e.passed();
            }
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::CountParams(c) => {
            let cfg = load_config(&c)?;
            let (_, store) = HResFormer::new(&cfg.model, cfg.train.seed)?;
            println!("{}", count_params(&store));
        }
        Cmd::CountFlops { common, breakdown } => {
            let cfg = load_config(&common)?;
            let (model, _) = HResFormer::new(&cfg.model, cfg.train.seed)?;
            let d = &cfg.data;
            let dims = [d.depth, d.height, d.width];
            println!("{}", model.flops(dims)?);
            if breakdown {
                println!("2d {}", model.net2d.flops(dims[0], dims[1], dims[2]));
                println!("hlgm {}", model.hlgm.flops(dims)?);
                println!("3d {}", model.net3d.flops(model.hlgm.out_dims(dims))?);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn restore(path: &Path) -> hresformer::Result<(HResFormer, hresformer::ParamStore<f32>)> {
    let t = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
    Ok((t.model, t.store))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.hvol"))
}
