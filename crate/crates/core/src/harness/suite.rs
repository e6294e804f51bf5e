//! The full experiment: one pretrained base, three biased systems, and a
//! distractor sweep, emitting machine- and human-readable results.

use std::fmt::Write as _;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use super::config::{Config, GaMode, TrainConfig};
use super::eval::{evaluate, Condition};
use super::synth::synth_corpus;
use super::train::{pretrain_base, train_adapters, TrainingCurve};
use crate::adapter::Model;
use crate::bias_list::build_rare_vocab;
use crate::metrics::EvalReport;

/// One evaluated (system, condition) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRecord {
    pub system: String,
    /// "plain", "distractors", or "empty_bias".
    pub condition: String,
    pub n_distractors: Option<usize>,
    pub report: EvalReport,
    pub wer: Option<f64>,
    pub u_wer: Option<f64>,
    pub b_wer: Option<f64>,
}

impl SuiteRecord {
    fn new(system: &str, condition: &str, n: Option<usize>, report: EvalReport) -> Self {
        Self {
            system: system.to_string(),
            condition: condition.to_string(),
            n_distractors: n,
            report,
            wer: report.wer(),
            u_wer: report.u_wer(),
            b_wer: report.b_wer(),
        }
    }
}

/// Records plus the training curves behind them.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub records: Vec<SuiteRecord>,
    pub pretrain: TrainingCurve,
    pub adapters: Vec<(String, TrainingCurve)>,
}

fn pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.2}", 100.0 * v),
        None => "-".to_string(),
    }
}

impl SuiteOutcome {
    /// The record for a system under a distractor count.
    pub fn at(&self, system: &str, n: usize) -> &SuiteRecord {
        self.records
            .iter()
            .find(|r| r.system == system && r.n_distractors == Some(n))
            .unwrap_or_else(|| panic!("no record for {system} at N={n}"))
    }

    /// The record for a system under a non-sweep condition.
    pub fn condition(&self, system: &str, condition: &str) -> &SuiteRecord {
        self.records
            .iter()
            .find(|r| r.system == system && r.condition == condition)
            .unwrap_or_else(|| panic!("no {condition} record for {system}"))
    }

    /// Machine-readable results: every record with all report fields.
    pub fn results_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.records).expect("records serialize");
        s.push('\n');
        s
    }

    /// Plot data: one (system, N, B-WER) line per sweep point, percent.
    pub fn plot_tsv(&self) -> String {
        let mut out = String::from("system\tn\tb_wer\n");
        for r in &self.records {
            if let Some(n) = r.n_distractors {
                let b = r.b_wer.unwrap_or(f64::NAN);
                writeln!(out, "{}\t{}\t{:.4}", r.system, n, 100.0 * b).unwrap();
            }
        }
        out
    }

    /// Fixed-width table with exactly the columns system, N, WER, U-WER,
    /// and B-WER. Percentages with two decimals; "-" where no rate exists.
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<12} {:>6} {:>8} {:>8} {:>8}",
            "system", "N", "WER", "U-WER", "B-WER"
        )
        .unwrap();
        for r in &self.records {
            let n = match (r.condition.as_str(), r.n_distractors) {
                (_, Some(n)) => n.to_string(),
                ("empty_bias", None) => "empty".to_string(),
                _ => "-".to_string(),
            };
            writeln!(
                out,
                "{:<12} {:>6} {:>8} {:>8} {:>8}",
                r.system,
                n,
                pct(r.wer),
                pct(r.u_wer),
                pct(r.b_wer)
            )
            .unwrap();
        }
        out
    }
}

/// Runs everything: corpus synthesis, base pretraining, adapter training
/// for the CA, CA+GA-CE, and CA+GA-CTC systems with shared seeds, and the
/// evaluation grid (vanilla once, each biased system at every sweep point
/// plus the empty list). Progress goes to stderr; outputs are functions of
/// the configuration alone.
pub fn run_suite(cfg: &Config) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let corpus = synth_corpus(&cfg.synth);
    let vocab = corpus.vocab();
    let rare = build_rare_vocab(&vocab, &corpus.counts, cfg.suite.rare_k);
    let model_cfg = cfg.model.model_config(&cfg.synth);

    eprintln!(
        "suite: pretraining on {} utterances ({} words, {} rare)",
        corpus.train.len(),
        cfg.synth.vocab_size,
        rare.rare_tokens().len()
    );
    let mut base = Model::new(model_cfg, cfg.model.seed);
    let pretrain = pretrain_base(&mut base, &corpus, &cfg.pretrain)?;
    eprintln!(
        "suite: pretraining stopped after {} epochs at loss {:.3}",
        pretrain.epoch_losses.len(),
        pretrain.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );

    let trainings = [
        ("ca", GaMode::None),
        ("ca_ga_ce", GaMode::GaCe),
        ("ca_ga_ctc", GaMode::GaCtc),
    ];
    let mut systems = Vec::new();
    let mut adapters = Vec::new();
    for (name, ga_mode) in trainings {
        let tc = TrainConfig { ga_mode, ..cfg.train };
        let mut model = Model {
            cfg: base.cfg,
            store: base.store.clone(),
        };
        let curve = train_adapters(&mut model, &corpus, &rare, &tc)?;
        eprintln!(
            "suite: {name} trained for {} epochs, final loss {:.3}, skipped {}",
            curve.epoch_losses.len(),
            curve.epoch_losses.last().copied().unwrap_or(f64::NAN),
            curve.skipped_infeasible
        );
        adapters.push((name.to_string(), curve));
        systems.push((name, model));
    }

    let seed = cfg.suite.eval_seed;
    let workers = cfg.suite.workers;
    let mut records = Vec::new();
    let vanilla = evaluate(&base, &corpus.test, &rare, Condition::Plain, seed, workers)?;
    records.push(SuiteRecord::new("vanilla", "plain", None, vanilla));
    for (name, model) in &systems {
        for &n in &cfg.suite.sweep {
            let report = evaluate(
                model,
                &corpus.test,
                &rare,
                Condition::Distractors(n),
                seed,
                workers,
            )?;
            records.push(SuiteRecord::new(name, "distractors", Some(n), report));
        }
        let report = evaluate(model, &corpus.test, &rare, Condition::EmptyBias, seed, workers)?;
        records.push(SuiteRecord::new(name, "empty_bias", None, report));
        eprintln!("suite: evaluated {name}");
    }

    Ok(SuiteOutcome {
        records,
        pretrain,
        adapters,
    })
}
