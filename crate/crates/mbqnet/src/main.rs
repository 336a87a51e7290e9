//! Command-line pipeline: score -> plan -> train -> adapt-bn -> eval, plus a
//! per-bit-baseline calibrate path and read-only diagnostics. Stages talk to
//! each other only through files in the configured output directory.

use clap::{Parser, Subcommand};
use mbqnet::checkpoint::{load_checkpoint, save_checkpoint};
use mbqnet::config::{apply_overrides, validate_config, RunConfig};
use mbqnet::coreset::{build_plan, read_plan, storage_filter, write_plan};
use mbqnet::diagnostics::{
    activation_mae_all, gradient_angle, score_similarity_matrix, write_alignment_csv,
    write_mae_csv, write_similarity_csv, AlignmentRow,
};
use mbqnet::error::Error;
use mbqnet::model::{build_model, MultiBitModel};
use mbqnet::scoring::{read_scores, score_baseline, score_bitwise_dynamics, ScoreMethod};
use mbqnet::train::{
    bn_adapt, calibrate_baseline, evaluate, train_batchwise, train_bitwise, write_metrics_jsonl,
    BatchwiseOpts, BitwiseOpts, TrainScheme,
};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mbqnet", about = "Multi-bit quantization-aware training")]
struct Cli {
    /// TOML configuration file; omitted = all defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract per-bit importance scores (writes scores.scores).
    Score,
    /// Sample per-(bit, epoch) coresets from a scores file (writes coreset.plan).
    Plan {
        /// Scores file; default <output_dir>/scores.scores.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Train the multi-bit model (writes model.ckpt and metrics.jsonl).
    Train {
        /// Coreset plan; omitted = full-data training.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Recompute BN running statistics over the training split.
    AdaptBn {
        /// Checkpoint to update; default <output_dir>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-bit BN calibration pass (baseline; requires bn_policy = per-bit).
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-bit accuracy over the switchable range (writes eval.csv).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Read-only CSV reports: gradient alignment, activation MAE, score similarity.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scores file for the similarity report; default <output_dir>/scores.scores.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Invalid(_))) => {
            eprintln!("error: {}", e);
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> mbqnet::Result<RunConfig> {
    let doc = match &cli.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", p.display(), e)))?,
        None => String::new(),
    };
    let doc = apply_overrides(&doc, &cli.set)?;
    validate_config(&doc)
}

fn fresh_model(cfg: &RunConfig) -> mbqnet::Result<MultiBitModel> {
    build_model(cfg.model_spec()?, cfg.seed)
}

fn run(cli: Cli) -> mbqnet::Result<()> {
    let cfg = load_config(&cli)?;
    let hash = cfg.hash();
    fs::create_dir_all(&cfg.output_dir)?;
    let out = |name: &str| cfg.output_dir.join(name);

    match cli.cmd {
        Cmd::Score => {
            let (train, _) = cfg.load_datasets()?;
            let mut model = fresh_model(&cfg)?;
            let mut tc = cfg.train_config();
            tc.scheme = TrainScheme::BitWise;
            let mut scores = match cfg.scoring.method {
                ScoreMethod::Dynamics => score_bitwise_dynamics(
                    &mut model,
                    &train,
                    &tc,
                    cfg.scoring.epochs,
                    cfg.scoring.window,
                )?,
                m => score_baseline(m, &mut model, &train, &tc, cfg.scoring.epochs)?,
            };
            scores.meta.config_hash = hash;
            let path = out("scores.scores");
            mbqnet::scoring::write_scores(&scores, &path)?;
            println!("wrote {}", path.display());
        }
        Cmd::Plan { scores } => {
            let scores_path = scores.unwrap_or_else(|| out("scores.scores"));
            let matrix = read_scores(&scores_path)?;
            let survivors = if cfg.coreset.keep_fraction < 1.0 {
                Some(storage_filter(&matrix, cfg.coreset.keep_fraction)?)
            } else {
                None
            };
            let mut plan = build_plan(
                &matrix,
                cfg.coreset.pruning_rate,
                cfg.coreset.temperature,
                cfg.train.epochs,
                cfg.seed,
                survivors.as_deref(),
            )?;
            plan.config_hash = hash;
            let path = out("coreset.plan");
            write_plan(&plan, &path)?;
            println!("wrote {}", path.display());
        }
        Cmd::Train { plan } => {
            let (train, val) = cfg.load_datasets()?;
            let mut model = fresh_model(&cfg)?;
            let tc = cfg.train_config();
            let records = match cfg.train.scheme {
                TrainScheme::BatchWise => {
                    let plan = plan.map(|p| read_plan(&p)).transpose()?;
                    let opts = BatchwiseOpts {
                        plan: plan.as_ref(),
                        bias_correction: cfg.train.bias_correction,
                        eval_data: Some(&val),
                        ..BatchwiseOpts::default()
                    };
                    train_batchwise(&mut model, &train, &tc, opts)?
                }
                TrainScheme::BitWise => {
                    if plan.is_some() {
                        return Err(Error::Config(
                            "train.scheme = bit-wise does not take a coreset plan".to_string(),
                        ));
                    }
                    let opts = BitwiseOpts {
                        bias_correction: cfg.train.bias_correction,
                        ..BitwiseOpts::default()
                    };
                    train_bitwise(&mut model, &train, &tc, opts)?
                }
            };
            let metrics = out("metrics.jsonl");
            write_metrics_jsonl(&records, &mut fs::File::create(&metrics)?)?;
            let ckpt = out("model.ckpt");
            save_checkpoint(&model, &hash, &ckpt)?;
            println!("wrote {}", metrics.display());
            println!("wrote {}", ckpt.display());
        }
        Cmd::AdaptBn { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| out("model.ckpt"));
            let (mut model, _) = load_checkpoint(&path)?;
            let (train, _) = cfg.load_datasets()?;
            let bits = model.spec.ranges.switchable.clone();
            bn_adapt(
                &mut model,
                &train,
                &bits,
                1,
                cfg.train.batch_size,
                cfg.train.bias_correction,
            )?;
            save_checkpoint(&model, &hash, &path)?;
            println!("updated {}", path.display());
        }
        Cmd::Calibrate { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| out("model.ckpt"));
            let (mut model, _) = load_checkpoint(&path)?;
            let (train, _) = cfg.load_datasets()?;
            let bits = model.spec.ranges.switchable.clone();
            let records = calibrate_baseline(
                &mut model,
                &train,
                &bits,
                &cfg.train_config(),
                cfg.train.bias_correction,
            )?;
            let metrics = out("calibration.jsonl");
            write_metrics_jsonl(&records, &mut fs::File::create(&metrics)?)?;
            save_checkpoint(&model, &hash, &path)?;
            println!("updated {}", path.display());
        }
        Cmd::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| out("model.ckpt"));
            let (mut model, ckpt_hash) = load_checkpoint(&path)?;
            let (_, val) = cfg.load_datasets()?;
            let mut csv = format!("# config_hash={}\nbit,loss,accuracy\n", ckpt_hash);
            for &b in &model.spec.ranges.switchable.clone() {
                let (acc, loss) = evaluate(
                    &mut model,
                    &val,
                    b,
                    cfg.train.batch_size,
                    cfg.train.bias_correction,
                )?;
                csv.push_str(&format!("{},{:.6},{:.6}\n", b, loss, acc));
            }
            print!("{}", csv);
            let table = out("eval.csv");
            fs::write(&table, csv)?;
            println!("wrote {}", table.display());
        }
        Cmd::Diagnose { checkpoint, scores } => {
            let path = checkpoint.unwrap_or_else(|| out("model.ckpt"));
            let (mut model, ckpt_hash) = load_checkpoint(&path)?;
            let (_, val) = cfg.load_datasets()?;
            let n = val.len().min(cfg.train.batch_size);
            let idx: Vec<u32> = (0..n as u32).collect();
            let (x, labels) = val.gather(&idx);

            let trained = model.spec.ranges.trained.clone();
            let lo = *trained.first().expect("validated");
            let hi = *trained.last().expect("validated");
            let rep = gradient_angle(&mut model, &x, &labels, lo, hi)?;
            let mut rows = vec![AlignmentRow {
                step: 0,
                layer: "overall".to_string(),
                angle: rep.overall,
            }];
            rows.extend(rep.per_layer.iter().map(|(name, angle)| AlignmentRow {
                step: 0,
                layer: name.clone(),
                angle: *angle,
            }));
            let align = out("alignment.csv");
            write_alignment_csv(&rows, &align)?;
            embed_hash(&align, &ckpt_hash)?;
            println!("wrote {}", align.display());

            let mut mae_rows = Vec::new();
            for &b in &trained {
                for (site, mae) in activation_mae_all(&mut model, &x, b, cfg.train.bias_correction)?
                    .into_iter()
                    .enumerate()
                {
                    mae_rows.push((site, b, cfg.train.bias_correction, mae));
                }
            }
            let mae = out("activation_mae.csv");
            write_mae_csv(&mae_rows, &mae)?;
            embed_hash(&mae, &ckpt_hash)?;
            println!("wrote {}", mae.display());

            let scores_path = scores.unwrap_or_else(|| out("scores.scores"));
            if scores_path.exists() {
                let matrix = read_scores(&scores_path)?;
                if matrix.bits.len() >= 2 {
                    let sim = score_similarity_matrix(&matrix)?;
                    let sim_path = out("score_similarity.csv");
                    write_similarity_csv(&matrix.bits, &sim, &sim_path)?;
                    embed_hash(&sim_path, &ckpt_hash)?;
                    println!("wrote {}", sim_path.display());
                }
            }
        }
    }
    Ok(())
}

/// Prefix a CSV artifact with the provenance comment line.
fn embed_hash(path: &PathBuf, hash: &str) -> mbqnet::Result<()> {
    let body = fs::read_to_string(path)?;
    fs::write(path, format!("# config_hash={}\n{}", hash, body))?;
    Ok(())
}
