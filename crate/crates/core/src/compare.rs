//! Trains every mode on one corpus and summarises verification and probe
//! results per mode, mean and standard deviation over seeds.

use std::fmt::Write as _;

use crate::dataset::{language_inventory, FeatureStore, LabeledSet, Split, UtteranceMeta};
use crate::error::{Error, Result};
use crate::eval::{evaluate_protocol, slr_probe, EvalConfig, ProbeConfig};
use crate::exec::Execution;
use crate::losses::Mode;
use crate::trainer::{fit, TrainConfig};
use crate::trials::{build_bilingual_protocol, ProtocolConfig, Trial};

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub modes: Vec<Mode>,
    /// Run `i` uses training seed `train.seed + i` and probe seed `probe.seed + i`.
    pub seeds: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            modes: Mode::ALL.to_vec(),
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub eer: f64,
    pub min_dcf: f64,
    pub slr_accuracy: f64,
    pub logs_finite: bool,
    pub final_total_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; a single value has std 0.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeRow {
    pub mode: Mode,
    pub eer: MeanStd,
    pub min_dcf: MeanStd,
    pub slr_accuracy: MeanStd,
    pub logs_finite: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub runs: Vec<RunResult>,
    pub rows: Vec<ModeRow>,
    pub trials: usize,
}

impl CompareReport {
    pub fn row(&self, mode: Mode) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Aligned table with EER and minDCF in percent-style units as in the
    /// usual verification tables (EER ×100, minDCF raw, accuracy ×100).
    pub fn to_text(&self, provenance: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in provenance {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let seeds = self.runs.iter().filter(|r| self.rows.first().is_some_and(|f| f.mode == r.mode)).count();
        let _ = writeln!(out, "# trials = {}, seeds = {}", self.trials, seeds);
        let _ = writeln!(out, "{:<10} {:>16} {:>16} {:>16} {:>7}", "mode", "EER(%)", "minDCF", "SLR Acc.(%)", "finite");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>16} {:>16} {:>16} {:>7}",
                r.mode.to_string(),
                format!("{:.2} ± {:.2}", 100.0 * r.eer.mean, 100.0 * r.eer.std),
                format!("{:.4} ± {:.4}", r.min_dcf.mean, r.min_dcf.std),
                format!("{:.2} ± {:.2}", 100.0 * r.slr_accuracy.mean, 100.0 * r.slr_accuracy.std),
                if r.logs_finite { "yes" } else { "no" },
            );
        }
        out
    }

    /// One line per mode, raw fractions.
    pub fn to_csv(&self, provenance: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in provenance {
            let _ = writeln!(out, "# {k} = {v}");
        }
        out.push_str("mode,eer_mean,eer_std,min_dcf_mean,min_dcf_std,slr_acc_mean,slr_acc_std,logs_finite\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.mode, r.eer.mean, r.eer.std, r.min_dcf.mean, r.min_dcf.std, r.slr_accuracy.mean, r.slr_accuracy.std, r.logs_finite
            );
        }
        out
    }

    pub fn runs_text(&self) -> String {
        let mut out = String::from("mode seed eer min_dcf slr_acc logs_finite final_total\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                r.mode, r.seed, r.eer, r.min_dcf, r.slr_accuracy, r.logs_finite, r.final_total_loss
            );
        }
        out
    }
}

/// The cross-lingual protocol over the eval split.
pub fn eval_protocol(metadata: &[UtteranceMeta], protocol: &ProtocolConfig) -> Result<Vec<Trial>> {
    let eval: Vec<UtteranceMeta> = metadata.iter().filter(|m| m.split == Split::Eval).cloned().collect();
    build_bilingual_protocol(&eval, protocol)
}

/// Trains on the train split, then scores `trials` and probes the eval
/// split for every mode and seed.
pub fn run_compare(
    metadata: &[UtteranceMeta],
    features: &FeatureStore,
    cfg: &CompareConfig,
    exec: Execution,
) -> Result<CompareReport> {
    if cfg.modes.is_empty() || cfg.seeds == 0 {
        return Err(Error::contract("compare needs at least one mode and one seed"));
    }
    let languages = language_inventory(metadata);
    let train = LabeledSet::new(metadata, features, Split::Train, &languages)?;
    let eval = LabeledSet::new(metadata, features, Split::Eval, &languages)?;
    let trials = eval_protocol(metadata, &cfg.protocol)?;

    let mut runs = Vec::with_capacity(cfg.modes.len() * cfg.seeds);
    for &mode in &cfg.modes {
        for i in 0..cfg.seeds as u64 {
            let tc = TrainConfig { mode, seed: cfg.train.seed + i, ..cfg.train.clone() };
            let outcome = fit(&tc, &train)?;
            let (report, _) = evaluate_protocol(&outcome.model, &trials, features, &cfg.eval, exec)?;
            let pc = ProbeConfig { seed: cfg.probe.seed + i, ..cfg.probe.clone() };
            let probe = slr_probe(&outcome.model, &eval, &pc, exec)?;
            runs.push(RunResult {
                mode,
                seed: tc.seed,
                eer: report.eer,
                min_dcf: report.min_dcf,
                slr_accuracy: probe.accuracy,
                logs_finite: outcome.log.iter().all(|l| l.all_finite()),
                final_total_loss: outcome.log.last().map_or(f64::NAN, |l| l.terms.total),
            });
        }
    }

    let rows = cfg
        .modes
        .iter()
        .map(|&mode| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| r.mode == mode).collect();
            let col = |f: fn(&RunResult) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            ModeRow {
                mode,
                eer: col(|r| r.eer),
                min_dcf: col(|r| r.min_dcf),
                slr_accuracy: col(|r| r.slr_accuracy),
                logs_finite: rs.iter().all(|r| r.logs_finite),
            }
        })
        .collect();
    Ok(CompareReport { runs, rows, trials: trials.len() })
}
