//! Command-line driver for the synthetic contextual-biasing experiments.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ctxbias::adapter::Model;
use ctxbias::bias_list::build_rare_vocab;
use ctxbias::checkpoint;
use ctxbias::harness::{
    evaluate, load_corpus, pretrain_base, run_suite, save_corpus, synth_corpus, train_adapters,
    write_alignments, write_freq_table, Condition, Config, Corpus, GaMode,
};
use ctxbias::metrics::EvalReport;

#[derive(Parser)]
#[command(
    name = "ctxbias",
    version,
    about = "Contextual biasing experiments on a synthetic transducer corpus"
)]
struct Cli {
    /// TOML configuration file; every value has a built-in default and
    /// every relevant flag overrides the file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus, word-frequency table, and frame alignments.
    Synth(SynthArgs),
    /// Train the base transducer and its auxiliary CTC head from scratch.
    Pretrain(PretrainArgs),
    /// Train biasing adapters on top of a pretrained base checkpoint.
    Train(TrainArgs),
    /// Decode and score the test split under one biasing condition.
    Eval(EvalArgs),
    /// Run the whole experiment grid and write the results files.
    Suite(SuiteArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for corpus.json, freq.tsv, and alignments.txt.
    #[arg(long, default_value = "runs/corpus")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus JSON written by `synth`.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long, default_value = "runs/base.ckpt")]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss_threshold: Option<f64>,
    #[arg(long)]
    ctc_weight: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Pretrained base checkpoint.
    #[arg(long, value_name = "FILE")]
    base: PathBuf,
    /// Checkpoint to write.
    #[arg(long, default_value = "runs/adapted.ckpt")]
    out: PathBuf,
    /// Guided-attention mode: none, ce, or ctc.
    #[arg(long)]
    ga: Option<GaMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep base parameters frozen (true by default).
    #[arg(long, value_name = "BOOL")]
    freeze_base: Option<bool>,
    /// Frame labels from forced alignment instead of generator ground truth.
    #[arg(long)]
    force_align: bool,
    #[arg(long)]
    rare_k: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Distractors per utterance bias list (the default condition, with 0).
    #[arg(long, conflicts_with_all = ["empty_bias", "plain"])]
    distractors: Option<usize>,
    /// Decode with the <no_bias>-only list.
    #[arg(long, conflicts_with = "plain")]
    empty_bias: bool,
    /// Decode without the biasing pass.
    #[arg(long)]
    plain: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    rare_k: Option<usize>,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    /// Directory for results.json, plot_bwer.tsv, and table.txt.
    #[arg(long, default_value = "runs/suite")]
    out_dir: PathBuf,
    /// Comma-separated distractor counts, e.g. 0,5,20,50,100.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<usize>>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    rare_k: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::builtin(),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(config, a),
        Command::Pretrain(a) => cmd_pretrain(config, a),
        Command::Train(a) => cmd_train(config, a),
        Command::Eval(a) => cmd_eval(config, a),
        Command::Suite(a) => cmd_suite(config, a),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_synth(mut cfg: Config, a: SynthArgs) -> Result<()> {
    if let Some(v) = a.seed {
        cfg.synth.seed = v;
    }
    if let Some(v) = a.vocab_size {
        cfg.synth.vocab_size = v;
    }
    if let Some(v) = a.n_train {
        cfg.synth.n_train = v;
    }
    if let Some(v) = a.n_test {
        cfg.synth.n_test = v;
    }
    if let Some(v) = a.noise_std {
        cfg.synth.noise_std = v;
    }
    cfg.synth.validate()?;

    let corpus = synth_corpus(&cfg.synth);
    fs::create_dir_all(&a.out_dir)?;
    save_corpus(&corpus, &a.out_dir.join("corpus.json"))?;
    write_freq_table(
        BufWriter::new(File::create(a.out_dir.join("freq.tsv"))?),
        &corpus.words,
        &corpus.counts,
    )?;
    write_alignments(
        BufWriter::new(File::create(a.out_dir.join("alignments.txt"))?),
        &corpus,
    )?;
    println!(
        "wrote {} train / {} test utterances to {}",
        corpus.train.len(),
        corpus.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn load_model(cfg: &Config, corpus: &Corpus, ckpt: &Path) -> Result<Model> {
    let store = checkpoint::load(ckpt)?;
    Ok(Model::from_store(
        cfg.model.model_config(&corpus.config),
        store,
    ))
}

fn cmd_pretrain(mut cfg: Config, a: PretrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    if let Some(v) = a.lr {
        cfg.pretrain.lr = v;
    }
    if let Some(v) = a.epochs {
        cfg.pretrain.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.pretrain.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.pretrain.seed = v;
    }
    if let Some(v) = a.loss_threshold {
        cfg.pretrain.loss_threshold = v;
    }
    if let Some(v) = a.ctc_weight {
        cfg.pretrain.ctc_weight = v;
    }
    cfg.pretrain.validate()?;

    let mut model = Model::new(cfg.model.model_config(&corpus.config), cfg.model.seed);
    let curve = pretrain_base(&mut model, &corpus, &cfg.pretrain)?;
    create_parent(&a.out)?;
    checkpoint::save(&model.store, &a.out)?;
    println!(
        "pretrained for {} epochs, final loss {:.3}; saved {}",
        curve.epoch_losses.len(),
        curve.epoch_losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(mut cfg: Config, a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let mut model = load_model(&cfg, &corpus, &a.base)?;
    if let Some(v) = a.ga {
        cfg.train.ga_mode = v;
    }
    if let Some(v) = a.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.freeze_base {
        cfg.train.freeze_base = v;
    }
    if a.force_align {
        cfg.train.force_align = true;
    }
    if let Some(v) = a.rare_k {
        cfg.suite.rare_k = v;
    }
    cfg.train.validate()?;

    let rare = build_rare_vocab(&corpus.vocab(), &corpus.counts, cfg.suite.rare_k);
    let curve = train_adapters(&mut model, &corpus, &rare, &cfg.train)?;
    create_parent(&a.out)?;
    checkpoint::save(&model.store, &a.out)?;
    println!(
        "trained {} adapters for {} epochs, final loss {:.3}, skipped {} infeasible; saved {}",
        cfg.train.ga_mode,
        curve.epoch_losses.len(),
        curve.epoch_losses.last().copied().unwrap_or(f64::NAN),
        curve.skipped_infeasible,
        a.out.display()
    );
    Ok(())
}

fn print_report(report: &EvalReport) {
    let line = |name: &str, counts: &ctxbias::metrics::ErrorCounts| {
        let rate = match counts.rate() {
            Some(r) => format!("{:6.2}%", 100.0 * r),
            None => "     -".to_string(),
        };
        println!(
            "{name:<6} {rate}  ({} sub + {} del + {} ins over {} ref words)",
            counts.substitutions, counts.deletions, counts.insertions, counts.ref_words
        );
    };
    println!("utterances {}", report.utterances);
    line("WER", &report.all);
    line("U-WER", &report.unbiased);
    line("B-WER", &report.biased);
}

fn cmd_eval(mut cfg: Config, a: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let model = load_model(&cfg, &corpus, &a.checkpoint)?;
    if let Some(v) = a.rare_k {
        cfg.suite.rare_k = v;
    }
    let condition = if a.plain {
        Condition::Plain
    } else if a.empty_bias {
        Condition::EmptyBias
    } else {
        Condition::Distractors(a.distractors.unwrap_or(0))
    };
    let seed = a.seed.unwrap_or(cfg.suite.eval_seed);
    let workers = a.workers.unwrap_or(cfg.suite.workers);

    let rare = build_rare_vocab(&corpus.vocab(), &corpus.counts, cfg.suite.rare_k);
    let report = evaluate(&model, &corpus.test, &rare, condition, seed, workers)?;
    print_report(&report);
    if let Some(path) = a.json {
        create_parent(&path)?;
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        fs::write(&path, text)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_suite(mut cfg: Config, a: SuiteArgs) -> Result<()> {
    if let Some(v) = a.sweep {
        cfg.suite.sweep = v;
    }
    if let Some(v) = a.workers {
        cfg.suite.workers = v;
    }
    if let Some(v) = a.rare_k {
        cfg.suite.rare_k = v;
    }
    if let Some(v) = a.eval_seed {
        cfg.suite.eval_seed = v;
    }
    cfg.validate()?;

    let outcome = run_suite(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("results.json"), outcome.results_json())?;
    fs::write(a.out_dir.join("plot_bwer.tsv"), outcome.plot_tsv())?;
    let table = outcome.table();
    fs::write(a.out_dir.join("table.txt"), &table)?;
    print!("{table}");
    println!("wrote results to {}", a.out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_flag_parses_comma_separated_counts() {
        let cli = Cli::try_parse_from(["ctxbias", "suite", "--sweep", "0,5,20"]).unwrap();
        match cli.command {
            Command::Suite(a) => assert_eq!(a.sweep, Some(vec![0, 5, 20])),
            _ => panic!("expected suite"),
        }
    }

    #[test]
    fn eval_conditions_are_mutually_exclusive() {
        let err = Cli::try_parse_from([
            "ctxbias",
            "eval",
            "--corpus",
            "c.json",
            "--checkpoint",
            "m.ckpt",
            "--distractors",
            "5",
            "--empty-bias",
        ]);
        assert!(err.is_err());
    }
}
