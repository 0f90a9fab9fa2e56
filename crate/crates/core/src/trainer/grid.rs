//! Experiment grids: leave-one-domain-out evaluation, the cumulative
//! component ablation, and the factorization-step sweep. Cells run as
//! independent seeded jobs (parallelizable without affecting results).

use super::checkpoint::save_checkpoint;
use super::config::{AblationFlags, RunConfig};
use super::train::{evaluate, train_run, IterLog};
use crate::data::Dataset;
use crate::error::Result;
use crate::fsio::atomic_write;
use crate::report::{write_metrics, MetricsTable};
use crate::rng;
use crate::scalar::Scalar;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

pub const SWEEP_T_VALUES: [usize; 6] = [2, 4, 6, 8, 10, 12];
pub const EVAL_BATCH: usize = 64;

/// One trained and evaluated cell of a grid.
pub struct CellResult {
    pub row: String,
    pub target: String,
    pub seed: u64,
    pub accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

/// A named ablation row with its per-target table.
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub table: MetricsTable,
    pub cells: Vec<CellResult>,
}

fn write_train_log(path: &Path, log: &[IterLog]) -> Result<()> {
    let mut csv = String::from("iter,lr,ce,hj,recon,kl,total\n");
    for l in log {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.iter, l.lr, l.ce, l.hj, l.recon, l.kl, l.total
        ));
    }
    atomic_write(path, csv.as_bytes())
}

/// Trains one cell (fixed flags, fixed target domain) with a seed derived
/// from (base seed, row name, target), evaluates on the held-out domain, and
/// optionally persists the checkpoint and training log.
pub fn run_cell<S: Scalar>(
    base: &RunConfig,
    flags: &AblationFlags,
    row_name: &str,
    target: &str,
    dataset: &Dataset<S>,
    out_dir: Option<&Path>,
) -> Result<CellResult> {
    let mut cfg = base.clone();
    cfg.flags = flags.clone();
    cfg.train.target_domain = target.to_string();
    cfg.train.seed = rng::derive_seed(base.train.seed, &format!("cell/{row_name}/{target}"));
    let outcome = train_run(&cfg, dataset)?;
    let accuracy = evaluate(&outcome.model, dataset, target, EVAL_BATCH)?;
    let checkpoint = if let Some(dir) = out_dir {
        let cell_dir = dir.join(row_name).join(target);
        std::fs::create_dir_all(&cell_dir)?;
        let ckpt = cell_dir.join("checkpoint.ckpt");
        save_checkpoint(&ckpt, &outcome.model, &cfg, cfg.train.iterations)?;
        write_train_log(&cell_dir.join("train_log.csv"), &outcome.log)?;
        Some(ckpt)
    } else {
        None
    };
    Ok(CellResult {
        row: row_name.to_string(),
        target: target.to_string(),
        seed: cfg.train.seed,
        accuracy,
        checkpoint,
    })
}

/// Full leave-one-domain-out protocol for one flag row: one training run per
/// target domain, cells in parallel (each internally deterministic).
pub fn leave_one_out<S: Scalar>(
    base: &RunConfig,
    flags: &AblationFlags,
    row_name: &str,
    dataset: &Dataset<S>,
    out_dir: Option<&Path>,
) -> Result<AblationRow> {
    let targets = dataset.domains();
    let cells: Result<Vec<CellResult>> = targets
        .par_iter()
        .map(|target| run_cell(base, flags, row_name, target, dataset, out_dir))
        .collect();
    let cells = cells?;
    let table = MetricsTable::new(
        cells
            .iter()
            .map(|c| (c.target.clone(), c.accuracy))
            .collect(),
    );
    if let Some(dir) = out_dir {
        let row_dir = dir.join(row_name);
        std::fs::create_dir_all(&row_dir)?;
        write_metrics(&row_dir.join("metrics"), &table, flags, base.train.seed)?;
    }
    Ok(AblationRow {
        name: row_name.to_string(),
        flags: flags.clone(),
        table,
        cells,
    })
}

/// The cumulative component ablation: baseline, +SSR, +SFE, +SFC; one
/// leave-one-domain-out table per row.
pub fn run_ablation<S: Scalar>(
    base: &RunConfig,
    dataset: &Dataset<S>,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    AblationFlags::cumulative_rows(base.flags.t_steps)
        .into_iter()
        .map(|(name, flags)| leave_one_out(base, &flags, &name, dataset, out_dir))
        .collect()
}

/// Factorization-step sweep over the full grid; per-T seeds are independent
/// and recorded in the emitted metrics.
pub fn sweep_factorization_steps<S: Scalar>(
    base: &RunConfig,
    dataset: &Dataset<S>,
    t_values: &[usize],
    out_dir: Option<&Path>,
) -> Result<Vec<(usize, AblationRow)>> {
    t_values
        .iter()
        .map(|&t| {
            let flags = AblationFlags {
                ssr: true,
                sfe: true,
                sfc: true,
                block_mask: [true; 4],
                t_steps: t,
            };
            let row = leave_one_out(base, &flags, &format!("sweep_t{t}"), dataset, out_dir)?;
            Ok((t, row))
        })
        .collect()
}
