//! Spoken-language recognition probe on frozen speaker embeddings.
//!
//! A fresh classifier with the language head's shape (FC-tanh, FC-tanh,
//! FC) is trained from scratch on the embeddings; its held-out accuracy
//! measures how much language information the embeddings still carry.

use rand::seq::SliceRandom;

use super::Embedder;
use crate::autodiff::Tape;
use crate::dataset::LabeledSet;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::cross_entropy;
use crate::model::{BoundLinear, Linear};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::{adam_update, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of utterances used for training; the rest is held out.
    pub train_fraction: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 20, lr: 0.001, train_fraction: 0.8, batch_size: 8, hidden: 64, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("probe.epochs".into(), self.epochs.to_string()),
            ("probe.lr".into(), self.lr.to_string()),
            ("probe.train_fraction".into(), self.train_fraction.to_string()),
            ("probe.batch_size".into(), self.batch_size.to_string()),
            ("probe.hidden".into(), self.hidden.to_string()),
            ("probe.seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Frequency of the most common language in the held-out part.
    pub majority_rate: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains the probe on `(embedding, language)` rows.
pub fn slr_probe_embeddings(embeddings: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    if embeddings.len() != labels.len() {
        return Err(Error::contract(format!("{} embeddings for {} labels", embeddings.len(), labels.len())));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::contract("probe needs at least two languages"));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::contract("probe: train fraction in (0, 1), positive batch size and width"));
    }
    let classes = distinct[distinct.len() - 1] + 1;
    let dim = embeddings[0].len();
    if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::contract("probe embeddings must share a positive dimension"));
    }

    let n = embeddings.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(cfg.seed, "probe-split")));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let mut init = rng::seeded(rng::derive(cfg.seed, "probe-init"));
    let mut layers = [
        Linear::xavier(&mut init, dim, cfg.hidden),
        Linear::xavier(&mut init, cfg.hidden, dim),
        Linear::xavier(&mut init, dim, classes),
    ];
    let shapes: Vec<(usize, usize)> = layers.iter().flat_map(|l| [l.weight.shape(), l.bias.shape()]).collect();
    let mut opt = AdamState::new(&shapes);
    let names = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"];

    let rows = |idx: &[usize]| Tensor::from_fn(idx.len(), dim, |r, c| embeddings[idx[r]][c]);
    let forward = |tape: &mut Tape, layers: &[Linear; 3], x: Tensor, trainable: bool| -> Result<(crate::autodiff::Var, Vec<crate::autodiff::Var>)> {
        let mut vars = Vec::with_capacity(6);
        let mut h = tape.constant(x);
        for (i, l) in layers.iter().enumerate() {
            let w = tape.leaf(l.weight.clone(), trainable);
            let b = tape.leaf(l.bias.clone(), trainable);
            vars.push(w);
            vars.push(b);
            h = BoundLinear { weight: w, bias: b }.forward(tape, h)?;
            if i < 2 {
                h = tape.tanh(h);
            }
        }
        Ok((h, vars))
    };

    let mut shuffle = rng::seeded(rng::derive(cfg.seed, "probe-batches"));
    let mut batch_order = train.to_vec();
    for _ in 0..cfg.epochs {
        batch_order.shuffle(&mut shuffle);
        for chunk in batch_order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let (logits, vars) = forward(&mut tape, &layers, rows(chunk), true)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&mut tape, logits, &y)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().zip(&shapes).map(|(&v, &s)| grads.get_or_zeros(v, s)).collect();
            let [l1, l2, l3] = &mut layers;
            let mut params = [
                (names[0], &mut l1.weight),
                (names[1], &mut l1.bias),
                (names[2], &mut l2.weight),
                (names[3], &mut l2.bias),
                (names[4], &mut l3.weight),
                (names[5], &mut l3.bias),
            ];
            adam_update(&mut params, &g, &mut opt, cfg.lr)?;
        }
    }

    let mut tape = Tape::new();
    let (logits, _) = forward(&mut tape, &layers, rows(test), false)?;
    let out = tape.value(logits);
    let mut correct = 0;
    let mut counts = vec![0usize; classes];
    for (r, &i) in test.iter().enumerate() {
        let row = out.row_slice(r);
        let pred = (0..classes).fold(0, |best, k| if row[k] > row[best] { k } else { best });
        if pred == labels[i] {
            correct += 1;
        }
        counts[labels[i]] += 1;
    }
    let m = test.len() as f64;
    Ok(ProbeResult {
        accuracy: correct as f64 / m,
        majority_rate: *counts.iter().max().expect("at least one class") as f64 / m,
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Embeds every utterance of `set` whole and probes the embeddings for
/// their language labels.
pub fn slr_probe(embedder: &dyn Embedder, set: &LabeledSet<'_>, cfg: &ProbeConfig, exec: Execution) -> Result<ProbeResult> {
    let embeddings = exec.try_map(set.len(), |i| embedder.embed(set.items[i].frames))?;
    let labels: Vec<usize> = set.items.iter().map(|u| u.language).collect();
    slr_probe_embeddings(&embeddings, &labels, cfg)
}
