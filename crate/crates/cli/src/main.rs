//! Command-line front end: dataset generation, training, evaluation, the
//! ablation grid, the factorization-step sweep, embedding exports, and
//! report rendering.
//!
//! Exit codes: 0 success, 1 user error, 2 numeric abort.

use clap::{CommandFactory, Parser, Subcommand};
use dgfamba_core::data::{default_domains, generate_dataset, DatasetConfig, Dataset};
use dgfamba_core::error::Error;
use dgfamba_core::fsio::atomic_write;
use dgfamba_core::report::{
    domain_mixing_score, export_embeddings_2d, format_metrics_table, parse_metrics_csv,
    write_metrics, MetricsSummary, MetricsTable,
};
use dgfamba_core::trainer::{
    evaluate, load_checkpoint, run_ablation, save_checkpoint, sweep_factorization_steps,
    train_run, RunConfig, EVAL_BATCH, SWEEP_T_VALUES,
};
use dgfamba_core::Real;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dgfamba",
    about = "Desk-scale flow-factorized state space model for domain generalization",
    version
)]
struct Cli {
    /// Seed override (takes precedence over the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; keys mirror the config field names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; defaults to $DGFAMBA_OUT, then ./dgfamba-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic four-domain shape dataset.
    GenerateData {
        /// Samples per (domain, class) cell.
        #[arg(long, default_value_t = 250)]
        n_per_cell: usize,
        /// Overwrite an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
        /// Dataset directory (default <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one leave-one-domain-out run and evaluate its held-out domain.
    Train {
        /// Dataset directory (default <out>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out target domain (overrides the config file).
        #[arg(long)]
        target: Option<String>,
    },
    /// Evaluate a checkpoint on its held-out domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Domain to evaluate; must be the run's held-out target.
        #[arg(long)]
        domain: String,
    },
    /// Run the cumulative component ablation (baseline, +SSR, +SFE, +SFC).
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep the factorization steps T over {2, 4, 6, 8, 10, 12}.
    SweepT {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Project features of every sample onto their top-2 variance axes.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Hooked layer to export (default: the last layer).
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Re-render emitted metrics files and verify their averages.
    Report {
        /// Metrics files (.json or .csv).
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
    },
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("DGFAMBA_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dgfamba-out"))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn data_dir(cli: &Cli, arg: &Option<PathBuf>) -> PathBuf {
    arg.clone().unwrap_or_else(|| out_root(cli).join("data"))
}

fn load_dataset(path: &Path) -> Result<Dataset<Real>, Error> {
    if !path.join("manifest.json").exists() {
        return Err(Error::Data(format!(
            "no dataset at {} (run `dgfamba generate-data` first)",
            path.display()
        )));
    }
    Dataset::load(path)
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::GenerateData {
            n_per_cell,
            force,
            data,
        } => {
            let cfg = load_config(&cli)?;
            let dir = data_dir(&cli, data);
            let ds_cfg = DatasetConfig {
                seed: cfg.train.seed,
                n_per_cell: *n_per_cell,
                image_size: cfg.train.backbone.image_size,
            };
            let manifest = generate_dataset(&dir, &default_domains(), &ds_cfg, *force)?;
            println!(
                "generated {} samples ({} domains x {} classes x {}) under {}",
                manifest.files.len(),
                manifest.domains.len(),
                manifest.classes.len(),
                manifest.n_per_cell,
                dir.display()
            );
            Ok(())
        }
        Cmd::Train { data, target } => {
            let mut cfg = load_config(&cli)?;
            if let Some(t) = target {
                cfg.train.target_domain = t.clone();
            }
            if cfg.train.target_domain.is_empty() {
                return Err(Error::Config(
                    "no target domain: pass --target or set target_domain in the config".into(),
                ));
            }
            let ds = load_dataset(&data_dir(&cli, data))?;
            let out = out_root(&cli).join(format!("train-{}", cfg.train.target_domain));
            let outcome = match train_run(&cfg, &ds) {
                Ok(o) => o,
                Err(e) => {
                    if let Error::NumericAbort {
                        iteration,
                        ref term,
                        value,
                    } = e
                    {
                        let dump = serde_json::json!({
                            "iteration": iteration,
                            "term": term,
                            "value": value,
                        });
                        let path = out.join("abort_dump.json");
                        let _ = atomic_write(&path, dump.to_string().as_bytes());
                        eprintln!("numeric abort dumped to {}", path.display());
                    }
                    return Err(e);
                }
            };
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join("checkpoint.ckpt");
            save_checkpoint(&ckpt, &outcome.model, &cfg, cfg.train.iterations)?;
            let mut log_csv = String::from("iter,lr,ce,hj,recon,kl,total\n");
            for l in &outcome.log {
                log_csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    l.iter, l.lr, l.ce, l.hj, l.recon, l.kl, l.total
                ));
            }
            atomic_write(&out.join("train_log.csv"), log_csv.as_bytes())?;
            let acc = evaluate(&outcome.model, &ds, &cfg.train.target_domain, EVAL_BATCH)?;
            let table = MetricsTable::new(vec![(cfg.train.target_domain.clone(), acc)]);
            write_metrics(&out.join("metrics"), &table, &cfg.flags, cfg.train.seed)?;
            println!(
                "target {}: accuracy {:.2}% (checkpoint {})",
                cfg.train.target_domain,
                acc,
                ckpt.display()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            domain,
        } => {
            let (model, cfg, sidecar) = load_checkpoint::<Real>(checkpoint)?;
            if *domain != cfg.train.target_domain {
                return Err(Error::Config(format!(
                    "domain '{domain}' was not held out by this run (target was '{}')",
                    cfg.train.target_domain
                )));
            }
            let ds = load_dataset(&data_dir(&cli, data))?;
            let acc = evaluate(&model, &ds, domain, EVAL_BATCH)?;
            println!(
                "{domain}: {acc:.2}% (iteration {}, seed {})",
                sidecar.iteration, sidecar.seed
            );
            Ok(())
        }
        Cmd::Ablate { data } => {
            let cfg = load_config(&cli)?;
            let ds = load_dataset(&data_dir(&cli, data))?;
            let out = out_root(&cli).join("ablation");
            let rows = run_ablation(&cfg, &ds, Some(&out))?;
            for row in &rows {
                println!("[{}]", row.name);
                print!("{}", format_metrics_table(&row.table.rows, 1)?);
                println!();
            }
            println!("metrics written under {}", out.display());
            Ok(())
        }
        Cmd::SweepT { data } => {
            let cfg = load_config(&cli)?;
            let ds = load_dataset(&data_dir(&cli, data))?;
            let out = out_root(&cli).join("sweep-t");
            let rows = sweep_factorization_steps(&cfg, &ds, &SWEEP_T_VALUES, Some(&out))?;
            for (t, row) in &rows {
                println!("[T = {t}] (seed per cell logged in metrics.json)");
                print!("{}", format_metrics_table(&row.table.rows, 1)?);
                println!();
            }
            println!("metrics written under {}", out.display());
            Ok(())
        }
        Cmd::ExportEmbeddings {
            checkpoint,
            data,
            layer,
        } => {
            let (model, cfg, _) = load_checkpoint::<Real>(checkpoint)?;
            let ds = load_dataset(&data_dir(&cli, data))?;
            let layer = layer.unwrap_or_else(|| cfg.train.backbone.num_layers());
            let out = out_root(&cli).join("embeddings");
            std::fs::create_dir_all(&out)?;
            let csv = out.join(format!("layer{layer}.csv"));
            let png = out.join(format!("layer{layer}.png"));
            let export = export_embeddings_2d(&model, &ds, layer, &csv, &png)?;
            let score = domain_mixing_score(&export.points, &export.domains);
            println!(
                "exported {} points (variance axes {:.4}, {:.4}) to {}",
                export.points.dim().0,
                export.variances[0],
                export.variances[1],
                csv.display()
            );
            // invented diagnostic: leave-one-out 1-NN domain accuracy; lower = better mixing
            println!("domain-mixing score (1-NN domain accuracy, invented metric): {score:.4}");
            Ok(())
        }
        Cmd::Report { metrics } => {
            for path in metrics {
                let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
                let (table, declared_avg) = match ext {
                    "json" => {
                        let summary: MetricsSummary =
                            serde_json::from_slice(&std::fs::read(path)?)?;
                        (MetricsTable::new(summary.rows.clone()), Some(summary.average))
                    }
                    "csv" => (parse_metrics_csv(&std::fs::read_to_string(path)?)?, None),
                    other => {
                        return Err(Error::Config(format!(
                            "unsupported metrics extension '{other}' for {}",
                            path.display()
                        )))
                    }
                };
                if let Some(avg) = declared_avg {
                    let recomputed = table.average();
                    if (avg - recomputed).abs() > 1e-9 {
                        return Err(Error::Data(format!(
                            "average in {} does not recompute: {avg} vs {recomputed}",
                            path.display()
                        )));
                    }
                }
                println!("[{}]", path.display());
                print!("{}", format_metrics_table(&table.rows, 1)?);
                println!();
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            let _ = Cli::command();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
