//! Acceptance suite. Runs every headline criterion and prints one
//! PASS/FAIL line each; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::time::Instant;

use langdis::autodiff::finite_difference_check;
use langdis::compare::{eval_protocol, run_compare, CompareConfig};
use langdis::dataset::{generate_synthetic, language_inventory, Batch, LabeledSet, Split, SyntheticConfig, UtteranceMeta, UNKNOWN_LANGUAGE};
use langdis::eval::{compute_eer, compute_min_dcf, evaluate_protocol, DcfParams, EvalConfig, ScoreSet};
use langdis::exec::Execution;
use langdis::losses::{angular_prototypical, cosine_min, cross_entropy, mapc};
use langdis::model::{ModelBundle, ModelConfig, ParamGroup};
use langdis::rng;
use langdis::trainer::{embedding_objective, fit, fit_observed, group_gradients, Phase, SpeakerLoss, TrainConfig};
use langdis::trials::{build_bilingual_protocol, validate_protocol, write_trials, ProtocolConfig, Trial, TrialLabel};
use langdis::{Checkpoint, Mode, Tape, Tensor};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn normal(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

// ---------------------------------------------------------------- gradients

fn tiny_model(seed: u64, feat: usize, layers: usize) -> ModelBundle {
    let cfg = ModelConfig {
        feat_dim: feat,
        hidden_dim: 4,
        embed_dim: 3,
        num_speakers: 3,
        num_languages: 2,
        encoder_layers: layers,
        language_hidden: 4,
    };
    ModelBundle::init(cfg, seed).unwrap()
}

fn tiny_batch(r: &mut impl Rng, feat: usize, frames: usize) -> Batch {
    let (speakers, per) = (3, 2);
    let n = speakers * per;
    Batch {
        frames: normal(r, n * frames, feat),
        frames_per_utt: frames,
        speakers,
        per_speaker: per,
        speaker_labels: (0..n).map(|i| i / per).collect(),
        language_labels: Some((0..n).map(|i| i % 2).collect()),
        utterance_ids: (0..n).map(|i| format!("u{i}")).collect(),
    }
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    let mut bias_grad = 0.0_f64;
    let mut note = |err: f64, what: String| {
        if err > worst {
            worst = err;
            worst_at = what;
        }
    };
    for cfg_seed in 0..20u64 {
        let mut r = rng::seeded(1000 + cfg_seed);
        let n = r.random_range(3..7);
        let k = r.random_range(2..5);
        let d = r.random_range(2..5);

        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let logits = normal(&mut r, n, k);
        let e = finite_difference_check(|t, v| cross_entropy(t, v[0], &labels), &[logits], 1e-5).unwrap();
        note(e, format!("cross-entropy config {cfg_seed}"));

        let (spk, per) = (r.random_range(2..4), r.random_range(2..4));
        let emb = normal(&mut r, spk * per, d);
        let w = Tensor::from_fn(1, 1, |_, _| r.random_range(1.0..10.0));
        let b = Tensor::from_fn(1, 1, |_, _| r.random_range(-5.0..0.0));
        // a shared bias shifts every logit equally, so its true derivative
        // is zero and a ratio test would only compare rounding noise
        let e = finite_difference_check(
            |t, v| {
                let bias = t.constant(b.clone());
                angular_prototypical(t, v[0], spk, per, v[1], bias)
            },
            &[emb.clone(), w.clone()],
            1e-5,
        )
        .unwrap();
        note(e, format!("angular prototypical config {cfg_seed}"));
        let mut tape = Tape::new();
        let vars = [tape.param(emb), tape.param(w), tape.param(b)];
        let loss = angular_prototypical(&mut tape, vars[0], spk, per, vars[1], vars[2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        bias_grad = bias_grad.max(grads.get_or_zeros(vars[2], (1, 1)).data()[0].abs());

        let es = normal(&mut r, n, d);
        let el = normal(&mut r, n, d);
        let e = finite_difference_check(|t, v| cosine_min(t, v[0], v[1]), &[es.clone(), el.clone()], 1e-5).unwrap();
        note(e, format!("cosine config {cfg_seed}"));
        let e = finite_difference_check(|t, v| mapc(t, v[0], v[1]), &[es, el], 1e-5).unwrap();
        note(e, format!("mapc config {cfg_seed}"));

        // full objective through the model, every parameter, every mode
        let feat = r.random_range(2..4);
        let model = tiny_model(cfg_seed, feat, 1 + (cfg_seed as usize % 2));
        let frames = r.random_range(2..4);
        let batch = tiny_batch(&mut r, feat, frames);
        let mut all = Vec::new();
        model.visit(|name, _, t| all.push((name.to_owned(), t.clone())));
        let gauge = all.iter().position(|(name, _)| name == "proto.bias").unwrap();
        let params: Vec<Tensor> = all.iter().enumerate().filter(|(i, _)| *i != gauge).map(|(_, (_, t))| t.clone()).collect();
        for mode in Mode::ALL {
            let tc = TrainConfig { mode, lambda: 0.5, speaker_loss: SpeakerLoss::Both, ..TrainConfig::default() };
            let objective = |t: &mut Tape, vars: Vec<langdis::Var>| {
                let bound = model.bind_vars(vars)?;
                Ok(embedding_objective(t, &bound, &batch, &tc, false)?.0)
            };
            let f = |t: &mut Tape, v: &[langdis::Var]| {
                let mut vars = v.to_vec();
                vars.insert(gauge, t.constant(all[gauge].1.clone()));
                objective(t, vars)
            };
            let e = finite_difference_check(f, &params, 1e-5).unwrap();
            note(e, format!("total loss mode {mode} config {cfg_seed}"));

            let mut tape = Tape::new();
            let vars: Vec<langdis::Var> = all.iter().map(|(_, t)| tape.param(t.clone())).collect();
            let loss = objective(&mut tape, vars.clone()).unwrap();
            let grads = tape.backward(loss).unwrap();
            bias_grad = bias_grad.max(grads.get_or_zeros(vars[gauge], (1, 1)).data()[0].abs());
        }
    }
    outcome(
        worst < 1e-4 && bias_grad < 1e-12,
        format!("max relative error {worst:.2e} (worst: {worst_at}); limit 1e-4; max |d/d bias| {bias_grad:.1e}"),
    )
}

// ---------------------------------------------------------------- GRL

fn grl_semantics() -> Outcome {
    let mut r = rng::seeded(7);
    let model = tiny_model(3, 4, 2);
    let batch = tiny_batch(&mut r, 4, 5);
    let labels = batch.language_labels.clone().unwrap();
    let run = |active: bool| {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &[ParamGroup::Speaker]);
        let x = tape.constant(batch.frames.clone());
        let es = bound.embed(&mut tape, x, batch.frames_per_utt).unwrap();
        let (logits, el) = bound.language_forward(&mut tape, es, active).unwrap();
        let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
        let forward = (tape.value(logits).clone(), tape.value(el).clone(), tape.scalar_value(loss).unwrap());
        let grads = tape.backward(loss).unwrap();
        let enc: Vec<(String, Tensor)> = group_gradients(&model, &bound, &grads, ParamGroup::Speaker)
            .into_iter()
            .filter(|(n, _)| n.starts_with("encoder"))
            .collect();
        (forward, enc)
    };
    let (f_on, g_on) = run(true);
    let (f_off, g_off) = run(false);
    let same_forward = f_on == f_off;
    let mut mismatches = 0;
    let mut coords = 0;
    let mut nonzero = 0;
    for ((_, a), (_, b)) in g_on.iter().zip(&g_off) {
        for (x, y) in a.data().iter().zip(b.data()) {
            coords += 1;
            if *y != 0.0 {
                nonzero += 1;
            }
            if x.to_bits() != (-y).to_bits() {
                mismatches += 1;
            }
        }
    }
    outcome(
        same_forward && mismatches == 0 && nonzero > 0 && !g_on.is_empty(),
        format!("forward identical: {same_forward}; {coords} encoder coordinates, {mismatches} differ from exact negation"),
    )
}

// ---------------------------------------------------------------- freeze

fn small_corpus(speakers: usize, seed: u64) -> langdis::dataset::SyntheticCorpus {
    generate_synthetic(&SyntheticConfig {
        num_speakers: speakers,
        eval_speakers: speakers / 4,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn freeze_contracts() -> Outcome {
    let corpus = small_corpus(24, 11);
    let langs = language_inventory(&corpus.metadata);
    let set = LabeledSet::new(&corpus.metadata, &corpus.features, Split::Train, &langs).unwrap();
    let mut checked = 0;
    let mut broken = Vec::new();
    let mut moved = (0, 0);
    for mode in Mode::ALL {
        let tc = TrainConfig { mode, epochs: 5, seed: 5, ..TrainConfig::default() };
        fit_observed(&tc, &set, &mut |rec| {
            checked += 1;
            match rec.phase {
                Phase::Discriminator => {
                    if rec.speaker_before != rec.speaker_after {
                        broken.push(format!("{mode} step {} discriminator moved speaker side", rec.step));
                    }
                    moved.0 += usize::from(rec.language_before != rec.language_after);
                }
                Phase::Embedding => {
                    if rec.language_before != rec.language_after {
                        broken.push(format!("{mode} step {} embedding moved language classifier", rec.step));
                    }
                    moved.1 += usize::from(rec.speaker_before != rec.speaker_after);
                }
            }
        })
        .unwrap();
    }
    outcome(
        broken.is_empty() && moved.0 > 0 && moved.1 > 0,
        format!(
            "{checked} updates hashed over 5 modes x 5 epochs, {} violations{}",
            broken.len(),
            broken.first().map_or(String::new(), |b| format!(" (first: {b})"))
        ),
    )
}

// ---------------------------------------------------------------- metrics

/// Every distinct score and one above the maximum; rates by direct counting.
fn oracle_points(set: &ScoreSet) -> Vec<(f64, f64)> {
    let mut cands: Vec<f64> = set.scores.clone();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(cands[cands.len() - 1] + 1.0);
    let nt = set.targets.iter().filter(|&&t| t).count() as f64;
    let nn = set.targets.len() as f64 - nt;
    let mut pts = vec![(0.0, 1.0)];
    for t in cands {
        let miss = set.scores.iter().zip(&set.targets).filter(|(s, &y)| y && **s < t).count() as f64;
        let fa = set.scores.iter().zip(&set.targets).filter(|(s, &y)| !y && **s >= t).count() as f64;
        pts.push((miss / nt, fa / nn));
    }
    pts
}

fn oracle_eer(set: &ScoreSet) -> f64 {
    let pts = oracle_points(set);
    let i = pts.iter().position(|(frr, far)| frr >= far).unwrap();
    let (f1, a1) = pts[i];
    if f1 == a1 || i == 0 {
        return f1;
    }
    let (f0, a0) = pts[i - 1];
    // where the segment from (f0, a0) to (f1, a1) crosses frr == far
    let w = (a0 - f0) / ((f1 - f0) - (a1 - a0));
    f0 + w * (f1 - f0)
}

fn oracle_min_dcf(set: &ScoreSet, p: &DcfParams) -> f64 {
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    oracle_points(set)
        .into_iter()
        .map(|(frr, far)| (p.c_miss * p.p_target * frr + p.c_fa * (1.0 - p.p_target) * far) / norm)
        .fold(f64::INFINITY, f64::min)
}

fn metric_oracles() -> Outcome {
    let mut worst = 0.0_f64;
    let mut transform_gap = 0.0_f64;
    for i in 0..100u64 {
        let mut r = rng::seeded(500 + i);
        let n = r.random_range(2..=50);
        let mut targets: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        targets[0] = true;
        targets[1] = false;
        let sep = r.random_range(0.0..2.0);
        let ties = i % 3 == 0;
        let scores: Vec<f64> = targets
            .iter()
            .map(|&t| {
                let s = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r) + if t { sep } else { 0.0 };
                if ties {
                    (s * 2.0).round() / 2.0
                } else {
                    s
                }
            })
            .collect();
        let set = ScoreSet::new(scores.clone(), targets.clone()).unwrap();
        let params = DcfParams { p_target: [0.01, 0.05, 0.5][i as usize % 3], c_miss: 1.0, c_fa: 1.0 };
        let (eer, _) = compute_eer(&set).unwrap();
        let (dcf, _) = compute_min_dcf(&set, &params).unwrap();
        worst = worst.max((eer - oracle_eer(&set)).abs()).max((dcf - oracle_min_dcf(&set, &params)).abs());

        for f in [|x: f64| x.exp(), |x: f64| x * x * x + x, |x: f64| x.atan() * 3.0 - 1.0] {
            let moved = ScoreSet::new(scores.iter().map(|&x| f(x)).collect(), targets.clone()).unwrap();
            transform_gap = transform_gap.max((compute_eer(&moved).unwrap().0 - eer).abs());
        }
    }
    outcome(
        worst < 1e-9 && transform_gap < 1e-12,
        format!("100 sets: max |EER/minDCF - oracle| = {worst:.2e} (limit 1e-9); max EER change under monotone maps {transform_gap:.2e}"),
    )
}

// ---------------------------------------------------------------- protocol

fn random_metadata(r: &mut impl Rng) -> Vec<UtteranceMeta> {
    let speakers = r.random_range(2..=50);
    let languages = r.random_range(2..=4);
    let mut out = Vec::new();
    for s in 0..speakers {
        let spoken = r.random_range(1..=languages.min(3));
        let mut langs: Vec<usize> = (0..languages).collect();
        langs.shuffle(r);
        for &l in &langs[..spoken] {
            for u in 0..r.random_range(1..=6) {
                let lang = if r.random_bool(0.05) { UNKNOWN_LANGUAGE.to_owned() } else { format!("L{l}") };
                out.push(UtteranceMeta::new(format!("s{s:02}-L{l}-{u}"), format!("s{s:02}"), lang, Split::Eval));
            }
        }
    }
    // make sure at least one bilingual speaker and one same-language pair exist
    out.push(UtteranceMeta::new("zz-a", "zz", "L0", Split::Eval));
    out.push(UtteranceMeta::new("zz-b", "zz", "L1", Split::Eval));
    out.push(UtteranceMeta::new("zy-a", "zy", "L0", Split::Eval));
    out
}

fn seeded_keep(mut ids: Vec<String>, cap: usize, seed: u64, label: &str) -> BTreeSet<String> {
    ids.sort();
    ids.dedup();
    if ids.len() > cap {
        ids.shuffle(&mut rng::seeded(rng::derive(seed, label)));
        ids.truncate(cap);
    }
    ids.into_iter().collect()
}

/// Brute force: apply the caps, enumerate every unordered pair of the
/// surviving pool, then downsample and order with the same seeded draws.
fn protocol_oracle(meta: &[UtteranceMeta], cfg: &ProtocolConfig) -> Vec<Trial> {
    let known: Vec<&UtteranceMeta> = meta.iter().filter(|m| m.language_id != UNKNOWN_LANGUAGE).collect();
    let langs: BTreeSet<&str> = known.iter().map(|m| m.language_id.as_str()).collect();
    let mut allowed = BTreeSet::new();
    for l in &langs {
        let spk: Vec<String> = known.iter().filter(|m| m.language_id == *l).map(|m| m.speaker_id.clone()).collect();
        for s in seeded_keep(spk, cfg.max_speakers_per_language, cfg.seed, &format!("speakers:{l}")) {
            allowed.insert((l.to_string(), s));
        }
    }
    let kept: Vec<&UtteranceMeta> = known
        .iter()
        .copied()
        .filter(|m| allowed.contains(&(m.language_id.clone(), m.speaker_id.clone())))
        .collect();
    let speakers: BTreeSet<&str> = kept.iter().map(|m| m.speaker_id.as_str()).collect();
    let mut pool = Vec::new();
    for s in speakers {
        let ids: Vec<String> = kept.iter().filter(|m| m.speaker_id == s).map(|m| m.utterance_id.clone()).collect();
        let keep = seeded_keep(ids, cfg.max_samples_per_speaker, cfg.seed, &format!("samples:{s}"));
        pool.extend(kept.iter().copied().filter(|m| keep.contains(&m.utterance_id)));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, a) in pool.iter().enumerate() {
        for b in &pool[i + 1..] {
            let pair = if a.utterance_id < b.utterance_id {
                (a.utterance_id.clone(), b.utterance_id.clone())
            } else {
                (b.utterance_id.clone(), a.utterance_id.clone())
            };
            if a.speaker_id == b.speaker_id && a.language_id != b.language_id {
                pos.push(pair);
            } else if a.speaker_id != b.speaker_id && a.language_id == b.language_id {
                neg.push(pair);
            }
        }
    }
    pos.sort();
    neg.sort();
    let mut k = pos.len().min(neg.len());
    if let Some(b) = cfg.pairs_budget {
        k = k.min(b / 2);
    }
    let pick = |pairs: Vec<(String, String)>, label: &str| -> Vec<(String, String)> {
        if k >= pairs.len() {
            return pairs;
        }
        let mut idx = index::sample(&mut rng::seeded(rng::derive(cfg.seed, label)), pairs.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pairs[i].clone()).collect()
    };
    let mut pos = pick(pos, "downsample:target");
    let mut neg = pick(neg, "downsample:nontarget");
    pos.shuffle(&mut rng::seeded(rng::derive(cfg.seed, "order:target")));
    neg.shuffle(&mut rng::seeded(rng::derive(cfg.seed, "order:nontarget")));
    pos.into_iter()
        .map(|(a, b)| Trial::new(a, b, TrialLabel::Target))
        .chain(neg.into_iter().map(|(a, b)| Trial::new(a, b, TrialLabel::Nontarget)))
        .collect()
}

fn protocol_invariants() -> Outcome {
    let mut violations = 0;
    let mut mismatches = 0;
    let mut unbalanced = 0;
    let mut total = 0;
    for i in 0..50u64 {
        let mut r = rng::seeded(9000 + i);
        let meta = random_metadata(&mut r);
        let cfg = ProtocolConfig {
            max_speakers_per_language: r.random_range(2..=30),
            max_samples_per_speaker: r.random_range(1..=5),
            pairs_budget: if i % 4 == 0 { Some(r.random_range(2..200)) } else { None },
            seed: i,
        };
        let trials = match build_bilingual_protocol(&meta, &cfg) {
            Ok(t) => t,
            Err(_) => {
                // caps can leave no bilingual speaker; the oracle must agree
                if protocol_oracle(&meta, &cfg).iter().any(|t| t.label == TrialLabel::Target) {
                    mismatches += 1;
                }
                continue;
            }
        };
        total += trials.len();
        violations += validate_protocol(&trials, &meta, Some(&cfg)).violations.len();
        let pos = trials.iter().filter(|t| t.label == TrialLabel::Target).count();
        if pos * 2 != trials.len() {
            unbalanced += 1;
        }
        if trials != protocol_oracle(&meta, &cfg) {
            mismatches += 1;
        }
    }
    outcome(
        violations == 0 && mismatches == 0 && unbalanced == 0,
        format!("50 instances, {total} trials: {violations} violations, {mismatches} oracle mismatches, {unbalanced} unbalanced"),
    )
}

// ---------------------------------------------------------------- MAPC

fn mapc_value(a: &Tensor, b: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let v = mapc(&mut tape, x, y).unwrap();
    tape.scalar_value(v).unwrap()
}

fn column_variance(t: &Tensor, c: usize) -> f64 {
    let n = t.rows() as f64;
    let mean = (0..t.rows()).map(|i| t.get(i, c)).sum::<f64>() / n;
    (0..t.rows()).map(|i| (t.get(i, c) - mean).powi(2)).sum::<f64>() / n
}

// The eps inside the std moves an affine pair off 1 by about eps / var, so
// the affine check draws columns whose variance is at least 1e-2.
fn mapc_properties() -> Outcome {
    let mut out_of_range = 0;
    let mut affine_gap = 0.0_f64;
    let mut asymmetric = 0;
    for i in 0..300u64 {
        let mut r = rng::seeded(300 + i);
        let n = r.random_range(2..40);
        let d = r.random_range(1..8);
        let mut a = normal(&mut r, n, d);
        while (0..d).any(|c| column_variance(&a, c) < 1e-2) {
            a = normal(&mut r, n, d);
        }
        let b = if i % 5 == 0 { Tensor::from_fn(n, d, |_, _| r.random_range(-1.0..1.0) * 1e3) } else { normal(&mut r, n, d) };
        let v = mapc_value(&a, &b);
        if !(-1e-6..=1.0 + 1e-6).contains(&v) {
            out_of_range += 1;
        }
        if v.to_bits() != mapc_value(&b, &a).to_bits() {
            asymmetric += 1;
        }
        let slopes: Vec<f64> = (0..d)
            .map(|_| r.random_range(0.1..5.0) * if r.random_bool(0.5) { -1.0 } else { 1.0 })
            .collect();
        let shifts: Vec<f64> = (0..d).map(|_| r.random_range(-10.0..10.0)).collect();
        let mapped = Tensor::from_fn(n, d, |row, c| slopes[c] * a.get(row, c) + shifts[c]);
        affine_gap = affine_gap.max((mapc_value(&a, &mapped) - 1.0).abs());
    }
    outcome(
        out_of_range == 0 && asymmetric == 0 && affine_gap < 1e-6,
        format!("300 cases: {out_of_range} outside [0, 1], {asymmetric} asymmetric, max |mapc(affine) - 1| = {affine_gap:.2e}"),
    )
}

// ---------------------------------------------------------------- end to end

fn end_to_end() -> Vec<(String, Outcome)> {
    let corpus = generate_synthetic(&SyntheticConfig {
        num_speakers: 100,
        num_languages: 4,
        languages_per_speaker: 2,
        confound: 2.0,
        pseudo_label_error_rate: 0.05,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = CompareConfig {
        train: TrainConfig { epochs: 30, ..TrainConfig::default() },
        modes: vec![Mode::Baseline, Mode::Ours],
        seeds: 3,
        ..CompareConfig::default()
    };
    let report = run_compare(&corpus.metadata, &corpus.features, &cfg, Execution::default()).unwrap();
    for line in report.to_text(&[]).lines() {
        println!("    {line}");
    }
    let base = report.row(Mode::Baseline).unwrap();
    let ours = report.row(Mode::Ours).unwrap();
    let rel = (base.eer.mean - ours.eer.mean) / base.eer.mean;
    let drop = 100.0 * (base.slr_accuracy.mean - ours.slr_accuracy.mean);
    vec![
        (
            "end-to-end (a) cross-lingual EER".into(),
            outcome(
                rel >= 0.10,
                format!(
                    "baseline {:.2}% vs ours {:.2}%: {:.1}% relative reduction (need >= 10%)",
                    100.0 * base.eer.mean,
                    100.0 * ours.eer.mean,
                    100.0 * rel
                ),
            ),
        ),
        (
            "end-to-end (b) SLR probe accuracy".into(),
            outcome(
                drop >= 3.0,
                format!(
                    "baseline {:.1}% vs ours {:.1}%: {drop:.1} points lower (need >= 3)",
                    100.0 * base.slr_accuracy.mean,
                    100.0 * ours.slr_accuracy.mean
                ),
            ),
        ),
        (
            "end-to-end (c) finite training logs".into(),
            outcome(ours.logs_finite, format!("ours finite over {} seeds: {}", cfg.seeds, ours.logs_finite)),
        ),
    ]
}

// ---------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let run = || {
        let corpus = small_corpus(24, 21);
        let langs = language_inventory(&corpus.metadata);
        let set = LabeledSet::new(&corpus.metadata, &corpus.features, Split::Train, &langs).unwrap();
        let tc = TrainConfig { epochs: 3, seed: 4, ..TrainConfig::default() };
        let model = fit(&tc, &set).unwrap().model;
        let ckpt = Checkpoint::new(model.clone(), tc.to_pairs()).to_text();
        let pc = ProtocolConfig { seed: 8, ..ProtocolConfig::default() };
        let trials = eval_protocol(&corpus.metadata, &pc).unwrap();
        let mut trial_bytes = Vec::new();
        write_trials(&mut trial_bytes, &trials, &pc.to_pairs()).unwrap();
        let report = |exec| {
            let (rep, _) = evaluate_protocol(&model, &trials, &corpus.features, &EvalConfig::default(), exec).unwrap();
            rep.to_text(&tc.to_pairs())
        };
        (ckpt, trial_bytes, report(Execution::Parallel), report(Execution::Sequential))
    };
    let a = run();
    let b = run();
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.2 == a.3 && b.2 == b.3];
    outcome(
        same.iter().all(|&s| s),
        format!(
            "checkpoint {}, trial list {}, report {}, sequential == parallel {}",
            same[0], same[1], same[2], same[3]
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; none apply here.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: Vec<(&str, fn() -> Vec<(String, Outcome)>)> = vec![
        ("gradient correctness", || vec![("gradient correctness".into(), gradient_correctness())]),
        ("GRL semantics", || vec![("GRL semantics".into(), grl_semantics())]),
        ("freeze contracts", || vec![("freeze contracts".into(), freeze_contracts())]),
        ("metric oracles", || vec![("metric oracles".into(), metric_oracles())]),
        ("protocol invariants", || vec![("protocol invariants".into(), protocol_invariants())]),
        ("MAPC properties", || vec![("MAPC properties".into(), mapc_properties())]),
        ("end-to-end", end_to_end),
        ("determinism", || vec![("determinism".into(), determinism())]),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let started = Instant::now();
        let results = run();
        let secs = started.elapsed().as_secs_f64();
        for (label, o) in results {
            println!("{} {label}: {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            failed += usize::from(!o.pass);
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
