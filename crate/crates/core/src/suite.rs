//! The block-by-block finite-difference suite: every building block and
//! the full network in double precision with randomized parameters.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{MsaConfig, WindowSpec};
use crate::backbone2d::{GrBlock, PatchEmbed2d};
use crate::backbone3d::L3dBlock;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::gradcheck::{check, check_module, project, random_tensor, randomize_params, GradCheck};
use crate::graph::{Graph, Var};
use crate::hlgm::{Gmf, HlgmBlock, Lmf};
use crate::loss::{ce_loss, dice_loss};
use crate::model::HResFormer;
use crate::nn::Cpff;
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

pub const BLOCK_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// Entries probed per input or parameter tensor.
const PROBES: usize = 4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub block: &'static str,
    pub tol: f64,
    pub result: GradCheck,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.result.max_rel_err <= self.tol
    }
}

fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> Result<M>) -> Result<(M, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
    let mut store = store.cast::<f64>();
    randomize_params(&mut store, 0.5, seed);
    Ok((m, store))
}

fn run<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    check_module(store, inputs, f, Some(PROBES), seed)
}

/// Runs all blocks for one seed.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut push = |block, tol, result| out.push(SuiteEntry { block, tol, result });
    let vol = |shape: &[usize], k: u64| random_tensor(shape, 1.0, seed * 31 + k);
    let msa = MsaConfig::new(4, 2)?;

    let (m, s) = build(seed, |pb| PatchEmbed2d::new(pb, "embed", 1, 4))?;
    push("patch_embed", BLOCK_TOL, run(&s, &[vol(&[2, 1, 8, 8], 1)], seed, |_, p, v| project(m.forward(p, v[0])?, seed))?);

    let (m, s) = build(seed, |pb| GrBlock::new(pb, "gr", msa, 2, 2))?;
    push("gr_block", BLOCK_TOL, run(&s, &[vol(&[2, 4, 4, 4], 2)], seed, |_, p, v| project(m.forward(p, v[0])?, seed))?);

    let ((a, b), s) = build(seed, |pb| {
        Ok((
            L3dBlock::new(pb, "l3d", msa, WindowSpec::new([2, 2, 2]), 2)?,
            L3dBlock::new(pb, "sl3d", msa, WindowSpec::shifted([2, 2, 2]), 2)?,
        ))
    })?;
    push("l3d_sl3d_pair", BLOCK_TOL, run(&s, &[vol(&[1, 4, 2, 4, 4], 3)], seed, |_, p, v| {
        project(b.forward(p, a.forward(p, v[0])?)?, seed)
    })?);

    let two = [vol(&[1, 4, 2, 4, 4], 4), vol(&[1, 4, 2, 4, 4], 5)];
    let (m, s) = build(seed, |pb| Lmf::new(pb, "lmf", msa, [2, 2, 2]))?;
    push("lmf", BLOCK_TOL, run(&s, &two, seed, |_, p, v| project(m.forward(p, v[0], v[1])?, seed))?);

    let (m, s) = build(seed, |pb| Gmf::new(pb, "gmf", msa, 2))?;
    push("gmf", BLOCK_TOL, run(&s, &two, seed, |_, p, v| project(m.forward(p, v[0], v[1])?, seed))?);

    let (m, s) = build(seed, |pb| Cpff::new(pb, "cpff", 3, 4, 2))?;
    push("cpff", BLOCK_TOL, run(&s, &[vol(&[1, 4, 2, 4, 4], 6)], seed, |_, p, v| project(m.forward(p, v[0])?, seed))?);

    let cfg = ModelConfig::tiny();
    let (m, s) = build(seed, |pb| HlgmBlock::new(pb, "block", &cfg))?;
    push("hlgm_block", BLOCK_TOL, run(&s, &two, seed, |_, p, v| {
        let (fp, fv) = m.forward(p, v[0], v[1])?;
        project(fp, seed)?.add(project(fv, seed + 1)?)
    })?);

    let labels: Rc<[u8]> = (0..24).map(|i| ((i * 5 + seed as usize) % 3) as u8).collect();
    push("ce_dice_loss", BLOCK_TOL, check(&[random_tensor(&[3, 2, 3, 4], 2.0, seed)], |_, v| {
        ce_loss(v[0], labels.clone())?.add(dice_loss(v[0], labels.clone())?)
    }, None, seed)?);

    let (model, store) = HResFormer::new(&cfg, seed)?;
    let mut store = store.cast::<f64>();
    randomize_params(&mut store, 0.5, seed);
    push("end_to_end", END_TO_END_TOL, run(&store, &[vol(&[1, 4, 16, 16], 7)], seed, |_, p, v| {
        project(model.forward(p, v[0])?.p3d_res[0], seed)
    })?);
    Ok(out)
}
