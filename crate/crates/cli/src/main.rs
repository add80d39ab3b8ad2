use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use hotvae::data::{self, label_stats, Split};
use hotvae::run::{self, checkpoint, CheckpointMeta, RunConfig};
use hotvae::Error;

#[derive(Parser, Debug)]
#[command(name = "hotvae", version, about = "Two-branch VAE with a label-graph attention decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command. Besides the named flags, any config
/// key can be given as `--key value` (or `--key=value`).
#[derive(clap::Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes loss_log.csv and a checkpoint under `out`.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Write feature-branch probabilities for every row of an input file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out>/predictions.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Select thresholds on validation, score a split; writes metrics.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per decoder depth; writes ablation_depth.csv.
    AblateDepth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the complete and the prior label graph; writes ablation_graph.csv.
    AblateGraph {
        #[command(flatten)]
        common: Common,
    },
    /// Print label statistics of the configured dataset.
    Stats {
        #[command(flatten)]
        common: Common,
    },
}

/// Splits `--key value` / `--key=value` tokens into pairs. A flag followed
/// by another flag or nothing is read as `true`.
fn override_pairs(tokens: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        let key = t
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("expected a --key, found {t:?}"))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if i + 1 < tokens.len() && !tokens[i + 1].starts_with("--") {
            out.push((key.to_string(), tokens[i + 1].clone()));
            i += 2;
        } else {
            out.push((key.to_string(), "true".to_string()));
            i += 1;
        }
    }
    Ok(out)
}

fn apply_overrides(mut cfg: RunConfig, common: &Common) -> anyhow::Result<RunConfig> {
    for (k, v) in override_pairs(&common.overrides)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    apply_overrides(base, common)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let prepared = run::prepare(&cfg).with_context(|| data_context(&cfg))?;
    let outcome = run::train_with(&cfg, &prepared, Default::default(), |r| {
        let v = r.val_ma_f1.map_or("NA".into(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {:>4}  total {:.5}  bce {:.5}  int {:.5}  rank {:.5}  kl {:.3}  val maF1 {v}",
            r.epoch, r.loss.total, r.loss.bce, r.loss.int, r.loss.rank, r.loss.kl
        );
    })?;
    write(&cfg.out.join("loss_log.csv"), &run::loss_log_csv(&outcome.log))?;
    let ck = cfg.out.join("checkpoint");
    let meta = CheckpointMeta {
        epoch: outcome.best_epoch,
        standardizer: prepared.standardizer.clone(),
        thresholds: None,
        feature_names: prepared.dataset.feature_names.clone(),
        label_names: prepared.dataset.label_names.clone(),
    };
    checkpoint::save(&ck, &outcome.best, &cfg, meta)?;
    println!(
        "trained {} steps; best epoch {}; checkpoint {}",
        outcome.steps,
        outcome.best_epoch,
        ck.display()
    );
    Ok(())
}

fn checkpoint_config(ck: &checkpoint::Checkpoint, common: &Common) -> anyhow::Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => ck.manifest.config.clone(),
    };
    apply_overrides(base, common)
}

fn cmd_predict(ckdir: &Path, input: &Path, output: Option<&Path>, common: &Common) -> anyhow::Result<()> {
    let ck = checkpoint::load(ckdir)?;
    let cfg = checkpoint_config(&ck, common)?;
    let num_labels = Some(ck.manifest.spec.labels);
    let format = match cfg.format {
        run::DataFormat::Csv => data::Format::Csv,
        _ => data::format_for(input, num_labels)?,
    };
    let ds = data::load_dataset(input, format)?;
    let x = match &ck.manifest.standardizer {
        Some(st) => st.apply(&ds.features)?,
        None => ds.features.clone(),
    };
    let probs = ck.model.predict(&x)?;
    let mut text = ck.manifest.label_names.join(",") + "\n";
    for row in probs.to_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let path = output.map_or_else(|| cfg.out.join("predictions.csv"), Path::to_path_buf);
    write(&path, &text)?;
    println!("wrote {} rows to {}", probs.shape()[0], path.display());
    Ok(())
}

fn cmd_evaluate(ckdir: &Path, split: &str, common: &Common) -> anyhow::Result<()> {
    let ck = checkpoint::load(ckdir)?;
    let cfg = checkpoint_config(&ck, common)?;
    let split: Split = split.parse()?;
    let prepared = run::prepare(&cfg).with_context(|| data_context(&cfg))?;
    let eval = run::evaluate(&ck.model, &prepared, split, &cfg)?;
    write(&cfg.out.join("metrics.csv"), &eval.report.to_csv())?;
    print!("{}", eval.report.to_table());
    Ok(())
}

fn cmd_ablate(depth: bool, common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let prepared = run::prepare(&cfg).with_context(|| data_context(&cfg))?;
    let root = cfg.out.join(if depth { "ablation_depth" } else { "ablation_graph" });
    let (file, text, rows) = if depth {
        let rows = run::ablate_depth(&cfg, &prepared, Some(&root));
        ("ablation_depth.csv", run::ablation_csv("n", "maF1", &rows), rows)
    } else {
        let rows = run::ablate_graph(&cfg, &prepared, Some(&root));
        ("ablation_graph.csv", run::ablation_csv("graph", "medianAUC", &rows), rows)
    };
    write(&cfg.out.join(file), &text)?;
    print!("{text}");
    if rows.iter().any(|r| r.status != "ok") {
        return Err(anyhow!(Error::Validation(format!(
            "{} of {} ablation runs failed",
            rows.iter().filter(|r| r.status != "ok").count(),
            rows.len()
        ))));
    }
    Ok(())
}

fn cmd_stats(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let ds = run::train::load_configured(&cfg).with_context(|| data_context(&cfg))?;
    let s = label_stats(&ds);
    println!("dataset            {}", ds.name);
    println!("samples            {}", ds.len());
    println!("features           {}", ds.num_features());
    println!("labels             {}", ds.num_labels());
    println!("labels/sample      mean {:.2}  median {}  max {}", s.labels_per_sample_mean, s.labels_per_sample_median, s.labels_per_sample_max);
    println!("samples/label      mean {:.2}  median {}  max {}", s.samples_per_label_mean, s.samples_per_label_median, s.samples_per_label_max);
    Ok(())
}

/// Exit status per error category.
fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return (1, "error");
    };
    let cat = e.category();
    let code = match cat {
        "parameter" => 2,
        "data" => 3,
        "shape" => 4,
        "degenerate" => 5,
        "numeric" => 6,
        "metric" => 7,
        "checkpoint" => 8,
        "io" => 9,
        _ => 1,
    };
    (code, cat)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Predict {
            checkpoint,
            input,
            output,
            common,
        } => cmd_predict(checkpoint, input, output.as_deref(), common),
        Command::Evaluate {
            checkpoint,
            split,
            common,
        } => cmd_evaluate(checkpoint, split, common),
        Command::AblateDepth { common } => cmd_ablate(true, common),
        Command::AblateGraph { common } => cmd_ablate(false, common),
        Command::Stats { common } => cmd_stats(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, cat) = exit_code(&e);
            eprintln!("error[{cat}]: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn data_context(cfg: &RunConfig) -> String {
    match &cfg.data {
        Some(p) => format!("loading {}", p.display()),
        None => "no data path configured".to_string(),
    }
}
