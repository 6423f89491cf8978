//! Training loop, poly learning-rate schedule, validation and evaluation.
//!
//! One optimizer step sees `batch_size` volumes; their losses are averaged
//! by accumulating `1/B`-scaled gradients. The learning rate is updated
//! once per epoch. Shuffling and augmentation draw from
//! `ChaCha8Rng(seed)` on stream `epoch`, so a run resumed at an epoch
//! boundary repeats the uninterrupted run exactly.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Progress};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{deep_supervised_loss, dsc_metric, Dsc};
use crate::model::HResFormer;
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::phantom::{augment, normalize, LabeledVolume};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_mean_dsc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CKPT: &str = "last.hrfm";
pub const BEST_CKPT: &str = "best.hrfm";

/// `base_lr · (1 − epoch / max_epochs)^power`.
pub fn poly_lr(epoch: usize, max_epochs: usize, base_lr: f64, power: f64) -> Result<f64> {
    if epoch >= max_epochs {
        return Err(Error::invalid("poly_lr", format!("epoch {epoch} >= max_epochs {max_epochs}")));
    }
    Ok(base_lr * (1.0 - epoch as f64 / max_epochs as f64).powf(power))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mean_dsc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{:.8},{:.6},{:.6}", self.epoch, self.lr, self.train_loss, self.val_mean_dsc)
    }
}

pub fn render_metrics(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Model input: the volume normalized to zero mean, unit variance.
pub fn model_input(v: &LabeledVolume) -> crate::tensor::Tensor<f32> {
    normalize(&v.intensity)
}

pub struct Trainer {
    pub cfg: Config,
    pub model: HResFormer,
    pub store: ParamStore<f32>,
    pub opt: Sgd<f32>,
    pub progress: Progress,
}

impl Trainer {
    /// Fresh parameters initialized from `cfg.train.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.train.validate()?;
        let (model, store) = HResFormer::new(&cfg.model, cfg.train.seed)?;
        let opt = Sgd::new(&store, cfg.train.momentum);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            opt,
            progress: Progress {
                best_val: -1.0,
                ..Progress::default()
            },
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let (model, fresh) = HResFormer::new(&ckpt.config.model, ckpt.config.train.seed)?;
        ckpt.check_compatible(&fresh)?;
        let opt = if ckpt.momentum.is_empty() {
            Sgd::new(&ckpt.params, ckpt.config.train.momentum)
        } else {
            Sgd::from_buffers(ckpt.config.train.momentum, ckpt.momentum)
        };
        Ok(Self {
            cfg: ckpt.config,
            model,
            store: ckpt.params,
            opt,
            progress: ckpt.progress,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.store.clone();
        params.zero_grad();
        Checkpoint {
            config: self.cfg.clone(),
            params,
            momentum: self.opt.buffers().to_vec(),
            progress: self.progress,
        }
    }

    /// Forward, loss and backward over one batch, then an SGD step.
    /// Returns the mean loss; `batch` is the batch index used in
    /// divergence reports.
    pub fn step(&mut self, volumes: &[LabeledVolume], lr: f64, epoch: usize, batch: usize) -> Result<f64> {
        let scale = 1.0 / volumes.len() as f64;
        let weights = self.cfg.train.ds_weights;
        self.store.zero_grad();
        let mut total = 0.0;
        let diverged = |loss: f64| Error::Diverged { epoch, batch, lr, loss };
        for v in volumes {
            let g = Graph::new();
            let p = self.store.bind(&g);
            let forward = self
                .model
                .forward(&p, g.constant(model_input(v)))
                .and_then(|pyr| deep_supervised_loss(&pyr, &v.labels, v.dims(), weights));
            let (loss, report) = match forward {
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            if !report.total.is_finite() {
                return Err(diverged(report.total));
            }
            total += report.total * scale;
            g.backward(loss.scale(scale)?)?;
            self.store.accumulate_grads(&g, &p);
        }
        self.opt.step(&mut self.store, lr)?;
        self.progress.steps += 1;
        Ok(total)
    }

    /// Runs epoch `progress.epochs_done` and validates. Returns `None` when
    /// `max_steps` was already reached.
    pub fn run_epoch(&mut self, train: &[LabeledVolume], val: &[LabeledVolume]) -> Result<Option<EpochMetrics>> {
        let t = &self.cfg.train;
        let epoch = self.progress.epochs_done;
        if train.is_empty() {
            return Err(Error::invalid("train", "empty training split"));
        }
        if t.max_steps > 0 && self.progress.steps >= t.max_steps {
            return Ok(None);
        }
        let lr = poly_lr(epoch, t.epochs, t.lr, t.poly_power)?;
        let mut rng = epoch_rng(t.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (augment_on, noise, bs, max_steps) = (t.augment, t.noise_std, t.batch_size, t.max_steps);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            if max_steps > 0 && self.progress.steps >= max_steps {
                break;
            }
            let vols: Vec<LabeledVolume> = chunk
                .iter()
                .map(|&i| {
                    if augment_on {
                        augment(&train[i], noise, &mut rng)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            loss_sum += self.step(&vols, lr, epoch, b)?;
            batches += 1;
        }
        let val_mean_dsc = if val.is_empty() {
            f64::NAN
        } else {
            let table = evaluate(&self.model, &self.store, val)?.hybrid;
            table.mean_row().1
        };
        self.progress.epochs_done += 1;
        if val_mean_dsc > self.progress.best_val {
            self.progress.best_val = val_mean_dsc;
            self.progress.best_epoch = epoch;
        }
        Ok(Some(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_mean_dsc,
        }))
    }

    /// Trains until `epochs` (or `max_steps`). With `out_dir`, writes
    /// `metrics.csv`, `last.hrfm` after every epoch and `best.hrfm` whenever
    /// validation DSC improves. Rows of earlier epochs already present in
    /// `metrics.csv` are kept when resuming.
    pub fn fit(
        &mut self,
        train: &[LabeledVolume],
        val: &[LabeledVolume],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut csv = String::new();
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            csv = kept_rows(&dir.join(METRICS_FILE), self.progress.epochs_done);
        }
        let mut rows = Vec::new();
        while self.progress.epochs_done < self.cfg.train.epochs {
            let prev_best = self.progress.best_val;
            let Some(m) = self.run_epoch(train, val)? else { break };
            on_epoch(&m);
            if let Some(dir) = out_dir {
                csv.push_str(&m.csv_row());
                csv.push('\n');
                fs::write(dir.join(METRICS_FILE), &csv)?;
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join(LAST_CKPT))?;
                if self.progress.best_val > prev_best {
                    ckpt.save(&dir.join(BEST_CKPT))?;
                }
            }
            rows.push(m);
        }
        Ok(rows)
    }
}

fn kept_rows(path: &Path, epochs_done: usize) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
            if epoch.is_some_and(|e| e < epochs_done) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub num_classes: usize,
    pub rows: Vec<(String, Dsc)>,
}

impl EvalTable {
    /// Column means: per-class DSC averaged over cases, and the mean of the
    /// per-case means.
    pub fn mean_row(&self) -> (Vec<f64>, f64) {
        let n = self.rows.len().max(1) as f64;
        let per_class = (0..self.num_classes - 1)
            .map(|c| self.rows.iter().map(|(_, d)| d.per_class[c]).sum::<f64>() / n)
            .collect();
        let mean = self.rows.iter().map(|(_, d)| d.mean).sum::<f64>() / n;
        (per_class, mean)
    }

    /// `case_id,dsc_1,..,dsc_{K-1},mean` with a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id");
        for c in 1..self.num_classes {
            out.push_str(&format!(",dsc_{c}"));
        }
        out.push_str(",mean\n");
        let mut row = |id: &str, per: &[f64], mean: f64| {
            out.push_str(id);
            for v in per {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(",{mean:.6}\n"));
        };
        for (id, d) in &self.rows {
            row(id, &d.per_class, d.mean);
        }
        let (per, mean) = self.mean_row();
        row("mean", &per, mean);
        out
    }
}

/// DSC tables for the hybrid output and for the 2D branch alone.
pub struct Evaluation {
    pub hybrid: EvalTable,
    pub only_2d: EvalTable,
}

pub fn evaluate(model: &HResFormer, store: &ParamStore<f32>, cases: &[LabeledVolume]) -> Result<Evaluation> {
    let k = model.cfg.num_classes;
    let mut hybrid = EvalTable {
        num_classes: k,
        rows: Vec::new(),
    };
    let mut only_2d = hybrid.clone();
    for v in cases {
        if v.num_classes != k {
            return Err(Error::invalid(
                "evaluate",
                format!("case {} has {} classes, model predicts {k}", v.case_id, v.num_classes),
            ));
        }
        let seg = model.segment(store, &model_input(v))?;
        hybrid.rows.push((v.case_id.clone(), dsc_metric(&seg.labels, &v.labels, k)?));
        only_2d.rows.push((v.case_id.clone(), dsc_metric(&seg.labels_2d, &v.labels, k)?));
    }
    Ok(Evaluation { hybrid, only_2d })
}

/// DSC table of precomputed label maps against the cases' ground truth.
pub fn score_predictions(cases: &[LabeledVolume], preds: &[Vec<u8>], num_classes: usize) -> Result<EvalTable> {
    let mut table = EvalTable {
        num_classes,
        rows: Vec::new(),
    };
    for (v, p) in cases.iter().zip(preds) {
        if v.num_classes != num_classes {
            return Err(Error::invalid("evaluate", format!("class-count mismatch for {}", v.case_id)));
        }
        table.rows.push((v.case_id.clone(), dsc_metric(p, &v.labels, num_classes)?));
    }
    Ok(table)
}
