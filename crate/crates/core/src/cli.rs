//! Command-line front end. Exit codes: 0 on success, 1 on a runtime
//! failure, 2 on a usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adapters::{wrap_model, AdaptedModel};
use crate::checkpoint;
use crate::config::{CorpusSource, ExperimentConfig};
use crate::data::{Corpus, CorpusFormat};
use crate::error::{Error, Result};
use crate::model::TransformerBackbone;
use crate::training::{
    build_corpus, cluster_report, comparison_csv, compare_regimes, evaluate, head_kind, prepare_splits,
    pretrain_backbone, pretrain_corpus, run_regime, EpochRecord, LoraSettings, Regime, EPOCH_CSV_HEADER,
};

#[derive(Debug, Parser)]
#[command(name = "chameleon", version, about = "Clustered batches and context-generated LoRA heads")]
pub struct Cli {
    /// TOML configuration file; every key is optional.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir` and CHAMELEON_OUT_DIR).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Read examples from this file instead of generating a synthetic corpus.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_format)]
    pub format: Option<CorpusFormat>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain, round and freeze a backbone, then save it.
    Pretrain,
    /// Train one regime and write per-epoch metrics and adapter weights.
    Train {
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Start from a saved backbone instead of pretraining.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Validation loss and perplexity of saved weights.
    Eval {
        #[arg(long)]
        backbone: PathBuf,
        /// Adapter file written by `train`; omit for the unadapted backbone.
        #[arg(long)]
        adapters: Option<PathBuf>,
    },
    /// Train all three regimes over several seeds.
    Compare {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Cluster the training split and print the result as JSON.
    Cluster {
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<CorpusFormat, String> {
    match s {
        "plain" => Ok(CorpusFormat::Plain),
        "jsonl" => Ok(CorpusFormat::Jsonl),
        _ => Err(format!("unknown format '{s}' (plain or jsonl)")),
    }
}

/// Everything needed to reproduce a run, written before training starts.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub corpus_checksum: String,
    pub corpus_examples: usize,
    pub vocab_size: usize,
    pub seeds: Vec<u64>,
    pub config: &'a ExperimentConfig,
}

/// Exit code for an error: 2 when the input or configuration is at fault.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::Io { .. }
        | Error::Malformed { .. }
        | Error::EmptyCorpus
        | Error::EmptyValidation
        | Error::Infeasible { .. } => 2,
        _ => 1,
    }
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env();
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    let o = &cli.overrides;
    if let Some(p) = &o.corpus {
        cfg.corpus.source = CorpusSource::File;
        cfg.corpus.path = Some(p.clone());
    }
    if let Some(f) = o.format {
        cfg.corpus.format = f;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(r) = o.rank {
        cfg.train.lora.rank = r;
    }
    if let Some(lr) = o.lr {
        cfg.train.optimizer.lr = lr;
    }
    if let Some(e) = o.pretrain_epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(s) = o.seed {
        cfg.train.seeds.model = s;
        cfg.train.seeds.cluster = s;
    }
    if let Command::Train { regime: Some(r), .. } = &cli.command {
        cfg.train.regime = *r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, corpus: &Corpus, seeds: Vec<u64>) -> Result<()> {
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        corpus_checksum: corpus.checksum(),
        corpus_examples: corpus.len(),
        vocab_size: corpus.vocab.len(),
        seeds,
        config: cfg,
    };
    write_file(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
}

fn backbone_for(cfg: &ExperimentConfig, corpus: &Corpus, path: Option<&Path>) -> Result<TransformerBackbone> {
    match path {
        Some(p) => {
            let mut bb = checkpoint::load_backbone(p)?;
            if bb.config().vocab_size != corpus.vocab.len() {
                return Err(Error::InvalidConfig(format!(
                    "backbone vocabulary {} does not match corpus vocabulary {}",
                    bb.config().vocab_size,
                    corpus.vocab.len()
                )));
            }
            bb.freeze();
            Ok(bb)
        }
        None => {
            let pre = pretrain_corpus(cfg, corpus)?;
            let seed = cfg.train.seeds.model;
            Ok(pretrain_backbone(cfg, corpus.vocab.len(), pre.as_ref(), seed)?.0)
        }
    }
}

struct EpochLog {
    csv: String,
    jsonl: String,
}

impl EpochLog {
    fn new(header: &str) -> Self {
        EpochLog {
            csv: format!("{header}\n"),
            jsonl: String::new(),
        }
    }

    fn push(&mut self, csv_row: String, json: impl Serialize) {
        self.csv.push_str(&csv_row);
        self.csv.push('\n');
        self.jsonl.push_str(&serde_json::to_string(&json).expect("record serializes"));
        self.jsonl.push('\n');
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Defaults = cli.command {
        print!("{}", ExperimentConfig::defaults_toml());
        return Ok(());
    }
    let cfg = resolve_config(cli)?;
    let corpus = build_corpus(&cfg)?;
    let stdout = std::io::stdout();
    match &cli.command {
        Command::Defaults => unreachable!(),
        Command::Pretrain => {
            let dir = prepare_out_dir(&cfg)?;
            write_manifest(&dir, "pretrain", &cfg, &corpus, vec![cfg.train.seeds.model])?;
            let bb = backbone_for(&cfg, &corpus, None)?;
            let path = dir.join("backbone.bin");
            checkpoint::save_backbone(&path, &bb)?;
            writeln!(stdout.lock(), "{}", path.display()).ok();
        }
        Command::Train { backbone, .. } => {
            let dir = prepare_out_dir(&cfg)?;
            write_manifest(&dir, "train", &cfg, &corpus, vec![cfg.train.seeds.model])?;
            let bb = backbone_for(&cfg, &corpus, backbone.as_deref())?;
            if backbone.is_none() {
                checkpoint::save_backbone(&dir.join("backbone.bin"), &bb)?;
            }
            let bb = Arc::new(bb);
            let (train, val) = prepare_splits(&cfg, &bb, &corpus)?;
            let mut log = EpochLog::new(EPOCH_CSV_HEADER);
            let run = run_regime(Arc::clone(&bb), &train, &val, &cfg.train, &mut |r: &EpochRecord| {
                log::info!("epoch {}: train {:.4} val {:.4}", r.epoch, r.train_loss, r.val_loss);
                log.push(r.csv_row(), r);
            })?;
            write_file(&dir.join("metrics.csv"), &log.csv)?;
            write_file(&dir.join("metrics.jsonl"), &log.jsonl)?;
            let meta = serde_json::json!({
                "kind": "adapters",
                "regime": cfg.train.regime,
                "lora": cfg.train.lora,
                "seed": cfg.train.seeds.model,
                "backbone_checksum": bb.checksum(),
            });
            checkpoint::save_adapters(&dir.join("adapters.bin"), run.model.adapters(), meta)?;
            write!(stdout.lock(), "{}", log.csv).ok();
        }
        Command::Eval { backbone, adapters } => {
            let bb = Arc::new(backbone_for(&cfg, &corpus, Some(backbone))?);
            let mut model = AdaptedModel::unadapted(Arc::clone(&bb))?;
            let mut regime = Regime::Unadapted;
            if let Some(path) = adapters {
                let (manifest, _) = checkpoint::load(path)?;
                let meta = &manifest.metadata;
                regime = serde_json::from_value(meta["regime"].clone())?;
                let lora: LoraSettings = serde_json::from_value(meta["lora"].clone())?;
                if regime != Regime::Unadapted {
                    model = wrap_model(model, &lora.spec(head_kind(regime)), 0)?;
                    checkpoint::load_adapters_into(path, model.adapters_mut())?;
                }
            }
            let (_, val) = prepare_splits(&cfg, &bb, &corpus)?;
            let schedule = val.schedule(cfg.train.batch_size, cfg.train.seeds.cluster, cfg.train.drop_policy);
            let (loss, ppl) = evaluate(&mut model, &val, &schedule)?;
            let out = serde_json::json!({ "regime": regime, "val_loss": loss, "val_perplexity": ppl });
            writeln!(stdout.lock(), "{out}").ok();
        }
        Command::Compare { seeds } => {
            if seeds.is_empty() {
                return Err(Error::InvalidConfig("no seeds given".into()));
            }
            let dir = prepare_out_dir(&cfg)?;
            write_manifest(&dir, "compare", &cfg, &corpus, seeds.clone())?;
            let mut jsonl = String::new();
            let report = compare_regimes(&cfg, &corpus, seeds, &Regime::ALL, &mut |seed, r| {
                log::info!("seed {seed} {} epoch {}: val {:.4}", r.regime, r.epoch, r.val_loss);
                let line = serde_json::json!({ "seed": seed, "record": r });
                jsonl.push_str(&line.to_string());
                jsonl.push('\n');
            })?;
            let csv = comparison_csv(&report.rows());
            write_file(&dir.join("compare.csv"), &csv)?;
            write_file(&dir.join("epochs.jsonl"), &jsonl)?;
            write_file(&dir.join("compare.json"), &serde_json::to_string_pretty(&report)?)?;
            let mut w = stdout.lock();
            write!(w, "{csv}").ok();
            writeln!(w, "chameleon below static LoRA in {} of {} seeds", report.chameleon_wins(), seeds.len()).ok();
        }
        Command::Cluster { backbone } => {
            let bb = backbone_for(&cfg, &corpus, backbone.as_deref())?;
            let report = cluster_report(&cfg, &bb, &corpus)?;
            writeln!(stdout.lock(), "{}", serde_json::to_string(&report)?).ok();
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("chameleon").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config() {
        let cli = parse(&["train", "--regime", "static_lora", "--epochs", "2", "--rank", "4", "--out", "x"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.train.regime, Regime::StaticLora);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lora.rank, 4);
        assert_eq!(cfg.output.dir, PathBuf::from("x"));
    }

    #[test]
    fn corpus_flag_switches_source() {
        let cfg = resolve_config(&parse(&["cluster", "--corpus", "c.txt"])).unwrap();
        assert_eq!(cfg.corpus.source, CorpusSource::File);
    }

    #[test]
    fn bad_regime_is_a_usage_error() {
        let err = Cli::try_parse_from(["chameleon", "train", "--regime", "lora"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_errors_map_to_two() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFiniteLoss { batch: 0 }), 1);
    }
}
