//! Equal error rate and detection cost.
//!
//! Candidate thresholds are one below the lowest score, every midpoint
//! between consecutive distinct scores, and one above the highest. A trial
//! is accepted when `score >= threshold`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub targets: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        let s = ScoreSet { scores, targets };
        s.check_lengths()?;
        Ok(s)
    }

    /// Builds a set from separate target and nontarget score lists.
    pub fn from_split(targets: &[f64], nontargets: &[f64]) -> Self {
        ScoreSet {
            scores: targets.iter().chain(nontargets).copied().collect(),
            targets: targets.iter().map(|_| true).chain(nontargets.iter().map(|_| false)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn check_lengths(&self) -> Result<()> {
        if self.scores.len() != self.targets.len() {
            return Err(Error::contract(format!(
                "{} scores for {} labels",
                self.scores.len(),
                self.targets.len()
            )));
        }
        Ok(())
    }
}

/// Miss and false-alarm rates at every candidate threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub thresholds: Vec<f64>,
    pub frr: Vec<f64>,
    pub far: Vec<f64>,
}

pub fn sweep(set: &ScoreSet) -> Result<Sweep> {
    set.check_lengths()?;
    if let Some(bad) = set.scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {bad}")));
    }
    let n_tar = set.targets.iter().filter(|&&t| t).count();
    let n_non = set.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::contract(format!(
            "need both labels, got {n_tar} targets and {n_non} nontargets"
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    let mut thresholds = Vec::with_capacity(set.len() + 1);
    let mut frr = Vec::with_capacity(set.len() + 1);
    let mut far = Vec::with_capacity(set.len() + 1);
    // counts of scores strictly below the current threshold
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let lowest = set.scores[order[0]];
    thresholds.push(lowest - 1.0);
    frr.push(0.0);
    far.push(1.0);
    let mut i = 0;
    while i < order.len() {
        let v = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == v {
            if set.targets[order[i]] {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
        let t = if i < order.len() { 0.5 * (v + set.scores[order[i]]) } else { v + 1.0 };
        thresholds.push(t);
        frr.push(tar_below as f64 / n_tar as f64);
        far.push((n_non - non_below) as f64 / n_non as f64);
    }
    Ok(Sweep { thresholds, frr, far })
}

/// Equal error rate and its threshold. The first candidate with
/// `FRR >= FAR` ends the search; when the rates cross strictly between two
/// candidates both the rate and the threshold are interpolated linearly.
pub fn compute_eer(set: &ScoreSet) -> Result<(f64, f64)> {
    let s = sweep(set)?;
    let i = (0..s.thresholds.len())
        .find(|&i| s.frr[i] >= s.far[i])
        .expect("last candidate rejects everything");
    if s.frr[i] == s.far[i] || i == 0 {
        return Ok((s.frr[i], s.thresholds[i]));
    }
    let d0 = s.frr[i - 1] - s.far[i - 1];
    let d1 = s.frr[i] - s.far[i];
    let w = -d0 / (d1 - d0);
    let eer = s.frr[i - 1] + w * (s.frr[i] - s.frr[i - 1]);
    let threshold = s.thresholds[i - 1] + w * (s.thresholds[i] - s.thresholds[i - 1]);
    Ok((eer, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.05, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::contract(format!("p_target {} must be in (0, 1)", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) || !self.c_miss.is_finite() || !self.c_fa.is_finite() {
            return Err(Error::contract("detection costs must be finite and > 0"));
        }
        Ok(())
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn normaliser(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)) / self.normaliser()
    }
}

/// Minimum normalized detection cost and the threshold achieving it
/// (lowest such threshold on ties).
pub fn compute_min_dcf(set: &ScoreSet, params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    let s = sweep(set)?;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..s.thresholds.len() {
        let c = params.normalized_cost(s.frr[i], s.far[i]);
        if c < best.0 {
            best = (c, s.thresholds[i]);
        }
    }
    Ok(best)
}
