//! Training objectives.
//!
//! Every function here records onto a [`Tape`] and returns a 1×1 node, so
//! the same code serves training and gradient checking.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added under square roots in norms and standard deviations.
pub const EPS: f64 = 1e-8;

/// Which disentanglement objective is added to the speaker loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Speaker loss only.
    Baseline,
    /// Adversarial language loss through gradient reversal.
    Grl,
    /// Absolute cosine between speaker and language vectors.
    Cos,
    /// Mean absolute Pearson correlation between speaker and language vectors.
    Mapc,
    /// Gradient reversal plus correlation penalty.
    Ours,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::Grl, Mode::Cos, Mode::Mapc, Mode::Ours];

    /// Whether the gradient reversal node is active in the embedding step.
    pub fn uses_grl(self) -> bool {
        matches!(self, Mode::Grl | Mode::Ours)
    }

    /// Whether the language feature vector enters the embedding loss.
    pub fn needs_language_features(self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Grl => "grl",
            Mode::Cos => "cos",
            Mode::Mapc => "mapc",
            Mode::Ours => "ours",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown mode `{s}` (expected baseline|grl|cos|mapc|ours)")))
    }
}

/// Scalar values of every objective term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub spk: f64,
    pub lang: f64,
    pub corr: f64,
    pub cos: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn all_finite(&self) -> bool {
        [self.spk, self.lang, self.corr, self.cos, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&mut self, other: &LossTerms) {
        self.spk += other.spk;
        self.lang += other.lang;
        self.corr += other.corr;
        self.cos += other.cos;
        self.total += other.total;
    }

    pub(crate) fn scaled(mut self, k: f64) -> LossTerms {
        self.spk *= k;
        self.lang *= k;
        self.corr *= k;
        self.cos *= k;
        self.total *= k;
        self
    }
}

/// Tape nodes for the individual terms; `None` where the mode does not
/// need a term.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub spk: Var,
    pub lang: Option<Var>,
    pub corr: Option<Var>,
    pub cos: Option<Var>,
}

/// Mean categorical cross-entropy of `logits` (N×K) against class ids.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = tape.shape(logits);
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows of logits but {} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let mut pick = Tensor::zeros(n, k);
    for (i, &l) in labels.iter().enumerate() {
        pick.set(i, l, -1.0 / n as f64);
    }
    let log_probs = tape.log_softmax(logits);
    let pick = tape.constant(pick);
    tape.dot(log_probs, pick)
}

/// Angular prototypical loss.
///
/// `embeddings` holds `speakers × per_speaker` rows, grouped by speaker. The
/// last utterance of each speaker is the query; the mean of the others is
/// the prototype. Logits are `scale · cos(query_j, proto_k) + bias` and the
/// loss is cross-entropy with target `j`.
pub fn angular_prototypical(
    tape: &mut Tape,
    embeddings: Var,
    speakers: usize,
    per_speaker: usize,
    scale: Var,
    bias: Var,
) -> Result<Var> {
    if per_speaker < 2 {
        return Err(Error::contract(format!(
            "angular prototypical loss needs at least 2 utterances per speaker, got {per_speaker}"
        )));
    }
    let rows = tape.shape(embeddings).0;
    if rows != speakers * per_speaker {
        return Err(Error::shape(
            "angular_prototypical",
            format!("{rows} rows for {speakers}x{per_speaker} grouping"),
        ));
    }
    if tape.value(scale).item()? <= 0.0 {
        return Err(Error::contract("angular prototypical scale must be > 0"));
    }

    let mut query_sel = Tensor::zeros(speakers, rows);
    let mut proto_sel = Tensor::zeros(speakers, rows);
    let share = 1.0 / (per_speaker - 1) as f64;
    for k in 0..speakers {
        let base = k * per_speaker;
        query_sel.set(k, base + per_speaker - 1, 1.0);
        for u in 0..per_speaker - 1 {
            proto_sel.set(k, base + u, share);
        }
    }
    let query_sel = tape.constant(query_sel);
    let proto_sel = tape.constant(proto_sel);
    let queries = tape.matmul(query_sel, embeddings)?;
    let protos = tape.matmul(proto_sel, embeddings)?;
    let queries = tape.l2_normalize(queries, EPS)?;
    let protos = tape.l2_normalize(protos, EPS)?;
    let protos_t = tape.transpose(protos);
    let cos = tape.matmul(queries, protos_t)?;
    let logits = tape.mul(cos, scale)?;
    let logits = tape.add(logits, bias)?;
    let targets: Vec<usize> = (0..speakers).collect();
    cross_entropy(tape, logits, &targets)
}

/// Mean over rows of `|cos(speaker_i, language_i)|`.
pub fn cosine_min(tape: &mut Tape, speaker: Var, language: Var) -> Result<Var> {
    if tape.shape(speaker) != tape.shape(language) {
        return Err(Error::shape(
            "cosine_min",
            format!("{:?} vs {:?}", tape.shape(speaker), tape.shape(language)),
        ));
    }
    let a = tape.l2_normalize(speaker, EPS)?;
    let b = tape.l2_normalize(language, EPS)?;
    let prod = tape.mul(a, b)?;
    let cos = tape.row_sum(prod);
    let cos = tape.abs(cos);
    Ok(tape.mean(cos))
}

/// Mean absolute Pearson correlation.
///
/// For each dimension `j`, correlates column `j` of `speaker` with column
/// `j` of `language` across the batch, then averages the absolute values
/// over dimensions. Standard deviations use the population convention with
/// [`EPS`] inside the square root.
pub fn mapc(tape: &mut Tape, speaker: Var, language: Var) -> Result<Var> {
    let shape = tape.shape(speaker);
    if shape != tape.shape(language) {
        return Err(Error::shape(
            "mapc",
            format!("{:?} vs {:?}", shape, tape.shape(language)),
        ));
    }
    if shape.0 < 2 {
        return Err(Error::contract(format!(
            "correlation needs a batch of at least 2, got {}",
            shape.0
        )));
    }
    let mean_a = tape.col_mean(speaker);
    let mean_b = tape.col_mean(language);
    let ca = tape.sub(speaker, mean_a)?;
    let cb = tape.sub(language, mean_b)?;
    let prod = tape.mul(ca, cb)?;
    let cov = tape.col_mean(prod);
    let sa = tape.col_std(speaker, EPS)?;
    let sb = tape.col_std(language, EPS)?;
    let denom = tape.mul(sa, sb)?;
    let corr = tape.div(cov, denom)?;
    let corr = tape.abs(corr);
    Ok(tape.mean(corr))
}

/// Assembles the embedding-step objective for `mode`.
///
/// | mode     | total                          |
/// |----------|--------------------------------|
/// | baseline | spk                            |
/// | grl      | spk + λ·lang                   |
/// | cos      | spk + cos                      |
/// | mapc     | spk + corr                     |
/// | ours     | spk + corr + λ·lang            |
pub fn total_loss(tape: &mut Tape, terms: &LossNodes, lambda: f64, mode: Mode) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("lambda must be >= 0, got {lambda}")));
    }
    let need = |v: Option<Var>, name: &str| {
        v.ok_or_else(|| Error::contract(format!("mode {mode} needs the {name} term")))
    };
    let total = match mode {
        Mode::Baseline => terms.spk,
        Mode::Grl => {
            let lang = tape.scale(need(terms.lang, "language")?, lambda);
            tape.add(terms.spk, lang)?
        }
        Mode::Cos => {
            let cos = need(terms.cos, "cosine")?;
            tape.add(terms.spk, cos)?
        }
        Mode::Mapc => {
            let corr = need(terms.corr, "correlation")?;
            tape.add(terms.spk, corr)?
        }
        Mode::Ours => {
            let corr = need(terms.corr, "correlation")?;
            let lang = tape.scale(need(terms.lang, "language")?, lambda);
            let partial = tape.add(terms.spk, corr)?;
            tape.add(partial, lang)?
        }
    };
    Ok(total)
}
