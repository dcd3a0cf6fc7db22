//! Alternating two-phase training.
//!
//! Every mini-batch gets a discriminator update (language classifier only,
//! speaker side frozen) followed by an embedding update (speaker side only,
//! language classifier frozen) on the same batch.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::{Gradients, Tape, Var};
use crate::dataset::{sample_batch, Batch, LabeledSet};
use crate::error::{Error, Result};
use crate::losses::{angular_prototypical, cosine_min, cross_entropy, mapc, total_loss, LossNodes, LossTerms, Mode};
use crate::model::{BoundModel, ModelBundle, ModelConfig, ParamGroup};
use crate::rng;
use crate::tensor::Tensor;

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeakerLoss {
    /// Angular prototypical loss on the embeddings; the speaker head is unused.
    AngularPrototypical,
    /// Cross-entropy over the speaker head's logits.
    Softmax,
    /// Sum of both.
    Both,
}

impl SpeakerLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerLoss::AngularPrototypical => "angproto",
            SpeakerLoss::Softmax => "softmax",
            SpeakerLoss::Both => "both",
        }
    }
}

impl fmt::Display for SpeakerLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpeakerLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angproto" => Ok(SpeakerLoss::AngularPrototypical),
            "softmax" => Ok(SpeakerLoss::Softmax),
            "both" => Ok(SpeakerLoss::Both),
            _ => Err(Error::contract(format!("unknown speaker loss `{s}` (angproto|softmax|both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub lr0: f64,
    pub decay_per_epoch: f64,
    pub epochs: usize,
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
    /// Random crop length per utterance; 0 trains on whole utterances.
    pub frames_per_utt: usize,
    pub seed: u64,
    pub speaker_loss: SpeakerLoss,
    /// Weight on the correlation term (1 in the published objective).
    pub corr_weight: f64,
    /// Global gradient-norm clip; 0 disables. Never applied in baseline mode.
    pub grad_clip: f64,
    /// Discriminator updates per batch.
    pub discriminator_steps: usize,
    /// Whether baseline mode still fits the language classifier.
    pub baseline_trains_language: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub language_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ours,
            lambda: 0.5,
            lr0: 0.001,
            decay_per_epoch: 0.03,
            epochs: 30,
            speakers_per_batch: 8,
            utts_per_speaker: 2,
            frames_per_utt: 0,
            seed: 0,
            speaker_loss: SpeakerLoss::Both,
            corr_weight: 1.0,
            grad_clip: 5.0,
            discriminator_steps: 1,
            baseline_trains_language: true,
            hidden_dim: 64,
            embed_dim: 32,
            encoder_layers: 2,
            language_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(format!("train config: {m}")));
        if !(0.0..1.0).contains(&self.decay_per_epoch) {
            return fail(format!("decay per epoch {} must be in [0, 1)", self.decay_per_epoch));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!("learning rate {} must be finite and >= 0", self.lr0));
        }
        if !(self.corr_weight >= 0.0 && self.corr_weight.is_finite()) {
            return fail(format!("correlation weight {} must be finite and >= 0", self.corr_weight));
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("gradient clip {} must be >= 0", self.grad_clip));
        }
        if self.speakers_per_batch == 0 || self.utts_per_speaker == 0 {
            return fail("batch needs at least one speaker and one utterance each".into());
        }
        if self.speakers_per_batch * self.utts_per_speaker < 2 {
            return fail("correlation needs at least 2 utterances per batch".into());
        }
        if self.utts_per_speaker < 2
            && matches!(self.speaker_loss, SpeakerLoss::AngularPrototypical | SpeakerLoss::Both)
        {
            return fail("angular prototypical loss needs >= 2 utterances per speaker".into());
        }
        Ok(())
    }

    /// `lr0 · (1 − decay)^epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * (1.0 - self.decay_per_epoch).powi(epoch as i32)
    }

    fn clip(&self) -> Option<f64> {
        (self.mode != Mode::Baseline && self.grad_clip > 0.0).then_some(self.grad_clip)
    }

    fn trains_discriminator(&self) -> bool {
        self.discriminator_steps > 0 && (self.mode != Mode::Baseline || self.baseline_trains_language)
    }

    pub fn model_config(&self, feat_dim: usize, num_speakers: usize, num_languages: usize) -> ModelConfig {
        ModelConfig {
            feat_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            num_speakers,
            num_languages,
            encoder_layers: self.encoder_layers,
            language_hidden: self.language_hidden,
        }
    }

    /// Flat `train.*` key-value view, as used by config files and artifacts.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("train.mode", self.mode.to_string()),
            ("train.lambda", self.lambda.to_string()),
            ("train.lr0", self.lr0.to_string()),
            ("train.decay", self.decay_per_epoch.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.speakers_per_batch", self.speakers_per_batch.to_string()),
            ("train.utts_per_speaker", self.utts_per_speaker.to_string()),
            ("train.frames_per_utt", self.frames_per_utt.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.speaker_loss", self.speaker_loss.to_string()),
            ("train.corr_weight", self.corr_weight.to_string()),
            ("train.grad_clip", self.grad_clip.to_string()),
            ("train.discriminator_steps", self.discriminator_steps.to_string()),
            ("train.baseline_trains_language", self.baseline_trains_language.to_string()),
            ("train.hidden_dim", self.hidden_dim.to_string()),
            ("train.embed_dim", self.embed_dim.to_string()),
            ("train.encoder_layers", self.encoder_layers.to_string()),
            ("train.language_hidden", self.language_hidden.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }
}

/// Bias-corrected Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    fn check(&self, names: &[&str], grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || names.len() != grads.len() {
            return Err(Error::contract(format!(
                "adam state holds {} parameters, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        for ((name, g), m) in names.iter().zip(grads).zip(&self.m) {
            if g.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_update",
                    format!("{name}: gradient {:?} vs moment {:?}", g.shape(), m.shape()),
                ));
            }
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric(format!("NaN gradient for parameter {name}")));
            }
        }
        Ok(())
    }

    fn apply(&mut self, i: usize, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// One bias-corrected Adam step over `params`. Nothing is modified when a
/// gradient contains NaN.
pub fn adam_update(params: &mut [(&str, &mut Tensor)], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    let names: Vec<&str> = params.iter().map(|(n, _)| *n).collect();
    state.check(&names, grads)?;
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_update", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        state.apply(i, p, g, lr);
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

fn group_shapes(model: &ModelBundle, group: ParamGroup) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    model.visit(|_, g, t| {
        if g == group {
            out.push(t.shape());
        }
    });
    out
}

/// Gradients of one group, named, in visit order.
pub fn group_gradients(model: &ModelBundle, bound: &BoundModel, grads: &Gradients, group: ParamGroup) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let mut i = 0;
    model.visit(|name, g, t| {
        if g == group {
            out.push((name.to_owned(), grads.get_or_zeros(bound.vars[i], t.shape())));
        }
        i += 1;
    });
    out
}

fn apply_group(
    model: &mut ModelBundle,
    group: ParamGroup,
    named: Vec<(String, Tensor)>,
    state: &mut AdamState,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
    let mut grads: Vec<Tensor> = named.iter().map(|(_, g)| g.clone()).collect();
    state.check(&names, &grads)?;
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    state.step += 1;
    let mut k = 0;
    model.visit_mut(|_, g, t| {
        if g == group {
            state.apply(k, t, &grads[k], lr);
            k += 1;
        }
    });
    if group == ParamGroup::Speaker {
        model.clamp_proto_scale();
    }
    Ok(())
}

fn language_labels(batch: &Batch) -> Result<&[usize]> {
    batch
        .language_labels
        .as_deref()
        .ok_or_else(|| Error::contract("batch has no language labels"))
}

/// Forward and backward of the discriminator objective. Only the language
/// classifier receives gradients.
pub fn discriminator_gradients(model: &ModelBundle, batch: &Batch) -> Result<(f64, Vec<(String, Tensor)>)> {
    let labels = language_labels(batch)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[ParamGroup::Language]);
    let x = tape.constant(batch.frames.clone());
    let es = bound.embed(&mut tape, x, batch.frames_per_utt)?;
    let (logits, _) = bound.language_forward(&mut tape, es, false)?;
    let loss = cross_entropy(&mut tape, logits, labels)?;
    let value = tape.scalar_value(loss)?;
    let grads = tape.backward(loss)?;
    Ok((value, group_gradients(model, &bound, &grads, ParamGroup::Language)))
}

/// Builds the embedding-step objective on `tape` and returns it with the
/// individual (unweighted) terms. Language-side terms are evaluated in every
/// mode when labels are present, but only the ones the mode uses reach the
/// objective.
pub fn embedding_objective(
    tape: &mut Tape,
    bound: &BoundModel,
    batch: &Batch,
    config: &TrainConfig,
    grl_active: bool,
) -> Result<(Var, LossNodes)> {
    batch.check_grouping()?;
    let mode = config.mode;
    let x = tape.constant(batch.frames.clone());
    let es = bound.embed(tape, x, batch.frames_per_utt)?;

    let proto = |tape: &mut Tape| {
        angular_prototypical(tape, es, batch.speakers, batch.per_speaker, bound.proto_scale, bound.proto_bias)
    };
    let softmax = |tape: &mut Tape| {
        let logits = bound.speaker_logits(tape, es)?;
        cross_entropy(tape, logits, &batch.speaker_labels)
    };
    let spk = match config.speaker_loss {
        SpeakerLoss::AngularPrototypical => proto(tape)?,
        SpeakerLoss::Softmax => softmax(tape)?,
        SpeakerLoss::Both => {
            let a = proto(tape)?;
            let b = softmax(tape)?;
            tape.add(a, b)?
        }
    };

    let mut raw = LossNodes { spk, lang: None, corr: None, cos: None };
    let mut weighted = raw;
    if let Some(labels) = batch.language_labels.as_deref() {
        let (logits, el) = bound.language_forward(tape, es, grl_active)?;
        let lang = cross_entropy(tape, logits, labels)?;
        let corr = mapc(tape, es, el)?;
        let cos = cosine_min(tape, es, el)?;
        raw = LossNodes { spk, lang: Some(lang), corr: Some(corr), cos: Some(cos) };
        weighted = raw;
        if config.corr_weight != 1.0 {
            weighted.corr = Some(tape.scale(corr, config.corr_weight));
        }
    } else if mode != Mode::Baseline {
        return Err(Error::contract(format!("mode {mode} needs language labels")));
    }
    let total = total_loss(tape, &weighted, config.lambda, mode)?;
    Ok((total, raw))
}

/// Forward and backward of the embedding objective for `config.mode`. Only
/// speaker-side parameters receive gradients; the GRL is active for the
/// adversarial modes.
pub fn embedding_gradients(model: &ModelBundle, batch: &Batch, config: &TrainConfig) -> Result<(LossTerms, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[ParamGroup::Speaker]);
    let (total, nodes) = embedding_objective(&mut tape, &bound, batch, config, config.mode.uses_grl())?;
    let value = |tape: &Tape, v: Option<Var>| v.map_or(Ok(0.0), |v| tape.scalar_value(v));
    let terms = LossTerms {
        spk: tape.scalar_value(nodes.spk)?,
        lang: value(&tape, nodes.lang)?,
        corr: value(&tape, nodes.corr)?,
        cos: value(&tape, nodes.cos)?,
        total: tape.scalar_value(total)?,
    };
    let grads = tape.backward(total)?;
    Ok((terms, group_gradients(model, &bound, &grads, ParamGroup::Speaker)))
}

/// Takes a seeded random window of `frames` frames from every utterance.
pub fn crop_batch(batch: &Batch, frames: usize, seed: u64, step: u64) -> Result<Batch> {
    let full = batch.frames_per_utt;
    if frames == 0 || frames == full {
        return Ok(batch.clone());
    }
    if frames > full {
        return Err(Error::contract(format!("crop of {frames} frames from {full}-frame utterances")));
    }
    let mut r = rng::stream(rng::derive(seed, "crop"), step);
    let parts: Vec<Tensor> = (0..batch.utterances())
        .map(|u| {
            let start = r.random_range(0..=full - frames);
            batch.frames.slice_rows(u * full + start, frames)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Batch {
        frames: Tensor::concat_rows(&refs)?,
        frames_per_utt: frames,
        ..batch.clone()
    })
}

/// Model plus the two optimiser states.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelBundle,
    pub config: TrainConfig,
    speaker_opt: AdamState,
    language_opt: AdamState,
}

impl Trainer {
    pub fn new(model: ModelBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let speaker_opt = AdamState::new(&group_shapes(&model, ParamGroup::Speaker));
        let language_opt = AdamState::new(&group_shapes(&model, ParamGroup::Language));
        Ok(Trainer { model, config, speaker_opt, language_opt })
    }

    pub fn speaker_optimizer(&self) -> &AdamState {
        &self.speaker_opt
    }

    pub fn language_optimizer(&self) -> &AdamState {
        &self.language_opt
    }

    /// Language-classifier update with the speaker side frozen. Returns the
    /// language cross-entropy before the update.
    pub fn discriminator_step(&mut self, batch: &Batch, lr: f64) -> Result<LossTerms> {
        let (lang, grads) = discriminator_gradients(&self.model, batch)?;
        apply_group(&mut self.model, ParamGroup::Language, grads, &mut self.language_opt, lr, self.config.clip())?;
        Ok(LossTerms { lang, total: lang, ..LossTerms::default() })
    }

    /// Speaker-side update with the language classifier frozen.
    pub fn embedding_step(&mut self, batch: &Batch, lr: f64) -> Result<LossTerms> {
        let (terms, grads) = embedding_gradients(&self.model, batch, &self.config)?;
        apply_group(&mut self.model, ParamGroup::Speaker, grads, &mut self.speaker_opt, lr, self.config.clip())?;
        Ok(terms)
    }
}

/// Which phase a [`StepRecord`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Embedding,
}

/// Group fingerprints around one update, reported to a training observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub phase: Phase,
    pub speaker_before: u64,
    pub speaker_after: u64,
    pub language_before: u64,
    pub language_after: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mode: Mode,
    pub lr: f64,
    /// Batch means of the embedding-step terms.
    pub terms: LossTerms,
    /// Batch mean of the discriminator's language loss.
    pub disc_lang: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} mode={} lr={} l_spk={} l_lang={} l_corr={} l_cos={} l_total={} l_disc={} wall_s={:.3}",
            self.epoch,
            self.mode,
            self.lr,
            self.terms.spk,
            self.terms.lang,
            self.terms.corr,
            self.terms.cos,
            self.terms.total,
            self.disc_lang,
            self.wall_seconds
        )
    }

    pub fn all_finite(&self) -> bool {
        self.terms.all_finite() && self.disc_lang.is_finite()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| l.to_line() + "\n").collect()
    }
}

pub fn steps_per_epoch(set: &LabeledSet<'_>, config: &TrainConfig) -> usize {
    set.len().div_ceil(config.speakers_per_batch * config.utts_per_speaker).max(1)
}

pub fn fit(config: &TrainConfig, set: &LabeledSet<'_>) -> Result<TrainOutcome> {
    fit_inner(config, set, None)
}

/// [`fit`], reporting group fingerprints around every update.
pub fn fit_observed(config: &TrainConfig, set: &LabeledSet<'_>, observer: &mut dyn FnMut(&StepRecord)) -> Result<TrainOutcome> {
    fit_inner(config, set, Some(observer))
}

fn fit_inner(config: &TrainConfig, set: &LabeledSet<'_>, mut observer: Option<&mut dyn FnMut(&StepRecord)>) -> Result<TrainOutcome> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let model_config = config.model_config(set.feat_dim(), set.speakers.len(), set.languages.len().max(1));
    let model = ModelBundle::init(model_config, rng::derive(config.seed, "init"))?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let per_epoch = steps_per_epoch(set, config);
    let batch_seed = rng::derive(config.seed, "sampler");
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.learning_rate(epoch);
        let mut sum = LossTerms::default();
        let mut disc_sum = 0.0;
        for _ in 0..per_epoch {
            let batch = sample_batch(set, config.speakers_per_batch, config.utts_per_speaker, batch_seed, step)?;
            let batch = crop_batch(&batch, config.frames_per_utt, config.seed, step)?;
            if config.trains_discriminator() {
                for _ in 0..config.discriminator_steps {
                    let before = observer.as_ref().map(|_| fingerprints(&trainer.model));
                    let t = trainer.discriminator_step(&batch, lr)?;
                    disc_sum += t.lang / config.discriminator_steps as f64;
                    if let (Some(obs), Some(b)) = (observer.as_mut(), before) {
                        obs(&record(epoch, step, Phase::Discriminator, b, fingerprints(&trainer.model)));
                    }
                }
            }
            let before = observer.as_ref().map(|_| fingerprints(&trainer.model));
            let t = trainer.embedding_step(&batch, lr)?;
            if let (Some(obs), Some(b)) = (observer.as_mut(), before) {
                obs(&record(epoch, step, Phase::Embedding, b, fingerprints(&trainer.model)));
            }
            sum.accumulate(&t);
            step += 1;
        }
        let k = 1.0 / per_epoch as f64;
        log.push(EpochLog {
            epoch,
            mode: config.mode,
            lr,
            terms: sum.scaled(k),
            disc_lang: disc_sum * k,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { model: trainer.model, log, steps: step })
}

fn fingerprints(model: &ModelBundle) -> (u64, u64) {
    (
        model.group_fingerprint(ParamGroup::Speaker),
        model.group_fingerprint(ParamGroup::Language),
    )
}

fn record(epoch: usize, step: u64, phase: Phase, before: (u64, u64), after: (u64, u64)) -> StepRecord {
    StepRecord {
        epoch,
        step,
        phase,
        speaker_before: before.0,
        speaker_after: after.0,
        language_before: before.1,
        language_after: after.1,
    }
}
