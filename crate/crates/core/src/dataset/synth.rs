//! Synthetic multilingual corpus with an additive language confound.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureStore, Split, UtteranceMeta};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_speakers: usize,
    pub num_languages: usize,
    pub languages_per_speaker: usize,
    pub utts_per_speaker_per_language: usize,
    pub frames: usize,
    pub feat_dim: usize,
    /// Weight α of the language vector added to every frame.
    pub confound: f64,
    pub noise_std: f64,
    /// Fraction of training-split language labels replaced by a wrong language.
    pub pseudo_label_error_rate: f64,
    /// Speakers held out (all their utterances) as the eval split.
    pub eval_speakers: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_speakers: 100,
            num_languages: 4,
            languages_per_speaker: 2,
            utts_per_speaker_per_language: 4,
            frames: 20,
            feat_dim: 16,
            confound: 2.0,
            noise_std: 0.5,
            pseudo_label_error_rate: 0.05,
            eval_speakers: 30,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(format!("synthetic config: {m}")));
        if self.num_speakers == 0 || self.num_languages == 0 {
            return fail("need at least one speaker and one language".into());
        }
        if self.languages_per_speaker == 0 || self.languages_per_speaker > self.num_languages {
            return fail(format!(
                "languages per speaker {} must be in 1..={}",
                self.languages_per_speaker, self.num_languages
            ));
        }
        if self.utts_per_speaker_per_language == 0 || self.frames == 0 || self.feat_dim == 0 {
            return fail("utterance count, frames and feature dimension must be positive".into());
        }
        if !(self.confound >= 0.0 && self.confound.is_finite()) {
            return fail(format!("confound strength {} must be finite and >= 0", self.confound));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise std {} must be finite and >= 0", self.noise_std));
        }
        if !(0.0..1.0).contains(&self.pseudo_label_error_rate) {
            return fail(format!("pseudo-label error rate {} must be in [0, 1)", self.pseudo_label_error_rate));
        }
        if self.pseudo_label_error_rate > 0.0 && self.num_languages < 2 {
            return fail("label corruption needs at least two languages".into());
        }
        if self.eval_speakers > self.num_speakers {
            return fail(format!("{} eval speakers out of {}", self.eval_speakers, self.num_speakers));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub features: FeatureStore,
    /// Metadata carrying the (possibly corrupted) pseudo-labels.
    pub metadata: Vec<UtteranceMeta>,
    /// True language of every utterance.
    pub true_languages: BTreeMap<String, String>,
    pub speaker_vectors: Vec<Vec<f64>>,
    pub language_vectors: Vec<Vec<f64>>,
}

fn unit_vector(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

pub fn speaker_name(k: usize, total: usize) -> String {
    format!("spk{k:0w$}", w = width(total))
}

pub fn language_name(j: usize, total: usize) -> String {
    format!("lang{j:0w$}", w = width(total))
}

/// Builds a corpus where frame = s_speaker + α·l_language + noise. The last
/// `eval_speakers` speakers form the eval split; only training labels are
/// corrupted.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut r = rng::seeded(rng::derive(cfg.seed, "synthetic"));
    let speaker_vectors: Vec<Vec<f64>> = (0..cfg.num_speakers).map(|_| unit_vector(&mut r, cfg.feat_dim)).collect();
    let language_vectors: Vec<Vec<f64>> = (0..cfg.num_languages).map(|_| unit_vector(&mut r, cfg.feat_dim)).collect();

    let mut features = FeatureStore::new();
    let mut metadata = Vec::new();
    let mut true_languages = BTreeMap::new();
    let train_speakers = cfg.num_speakers - cfg.eval_speakers;
    for (k, s) in speaker_vectors.iter().enumerate() {
        let split = if k < train_speakers { Split::Train } else { Split::Eval };
        let mut langs = index::sample(&mut r, cfg.num_languages, cfg.languages_per_speaker).into_vec();
        langs.sort_unstable();
        let spk = speaker_name(k, cfg.num_speakers);
        for &j in &langs {
            let l = &language_vectors[j];
            let lang = language_name(j, cfg.num_languages);
            for u in 0..cfg.utts_per_speaker_per_language {
                let frames = Tensor::from_fn(cfg.frames, cfg.feat_dim, |_, c| {
                    let n: f64 = StandardNormal.sample(&mut r);
                    s[c] + cfg.confound * l[c] + cfg.noise_std * n
                });
                let id = format!("{spk}-{lang}-{u:03}");
                let label = if split == Split::Train && r.random::<f64>() < cfg.pseudo_label_error_rate {
                    let wrong = r.random_range(0..cfg.num_languages - 1);
                    let wrong = if wrong >= j { wrong + 1 } else { wrong };
                    language_name(wrong, cfg.num_languages)
                } else {
                    lang.clone()
                };
                features.insert(id.clone(), frames);
                true_languages.insert(id.clone(), lang.clone());
                metadata.push(UtteranceMeta::new(id, spk.clone(), label, split));
            }
        }
    }
    Ok(SyntheticCorpus {
        features,
        metadata,
        true_languages,
        speaker_vectors,
        language_vectors,
    })
}
