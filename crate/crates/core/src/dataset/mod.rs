//! Utterance metadata, feature storage, synthetic corpora and batch sampling.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};

pub use io::{load_features, load_metadata, read_features, read_metadata, save_features, save_metadata, write_features, write_metadata};
pub use synth::{generate_synthetic, SyntheticConfig, SyntheticCorpus};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Language label for utterances nobody could identify. Such utterances
/// stay in the metadata but are excluded from training and trial lists.
pub const UNKNOWN_LANGUAGE: &str = "UNKNOWN";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(format!("unknown split `{s}` (expected train|eval)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub speaker_id: String,
    pub language_id: String,
    pub split: Split,
}

impl UtteranceMeta {
    pub fn new(utterance_id: impl Into<String>, speaker_id: impl Into<String>, language_id: impl Into<String>, split: Split) -> Self {
        UtteranceMeta {
            utterance_id: utterance_id.into(),
            speaker_id: speaker_id.into(),
            language_id: language_id.into(),
            split,
        }
    }

    pub fn is_unknown_language(&self) -> bool {
        self.language_id == UNKNOWN_LANGUAGE
    }
}

/// Per-utterance `T × F_in` feature matrices, keyed by utterance id.
pub type FeatureStore = BTreeMap<String, Tensor>;

/// Rejects duplicate utterance ids.
pub fn check_unique_ids(metadata: &[UtteranceMeta]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for m in metadata {
        if !seen.insert(m.utterance_id.as_str()) {
            return Err(Error::contract(format!("duplicate utterance id `{}`", m.utterance_id)));
        }
    }
    Ok(())
}

/// Sorted distinct known languages.
pub fn language_inventory(metadata: &[UtteranceMeta]) -> Vec<String> {
    metadata
        .iter()
        .filter(|m| !m.is_unknown_language())
        .map(|m| m.language_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// One utterance with integer class labels.
#[derive(Clone, Debug)]
pub struct LabeledUtterance<'a> {
    pub id: &'a str,
    pub speaker: usize,
    pub language: usize,
    pub frames: &'a Tensor,
}

/// Utterances of one split with speaker and language class indices,
/// ready for training or probing.
#[derive(Clone, Debug)]
pub struct LabeledSet<'a> {
    pub items: Vec<LabeledUtterance<'a>>,
    pub speakers: Vec<String>,
    pub languages: Vec<String>,
    by_speaker: Vec<Vec<usize>>,
}

impl<'a> LabeledSet<'a> {
    /// Collects the `split` utterances with a known language. Language
    /// indices refer to `languages` (normally [`language_inventory`] of the
    /// whole corpus so that splits agree).
    pub fn new(
        metadata: &'a [UtteranceMeta],
        features: &'a FeatureStore,
        split: Split,
        languages: &[String],
    ) -> Result<Self> {
        check_unique_ids(metadata)?;
        let chosen: Vec<&UtteranceMeta> = metadata
            .iter()
            .filter(|m| m.split == split && !m.is_unknown_language())
            .collect();
        let speakers: Vec<String> = chosen
            .iter()
            .map(|m| m.speaker_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut by_speaker = vec![Vec::new(); speakers.len()];
        let mut items = Vec::with_capacity(chosen.len());
        let mut shape = None;
        for m in chosen {
            let frames = features
                .get(&m.utterance_id)
                .ok_or_else(|| Error::contract(format!("no features for utterance `{}`", m.utterance_id)))?;
            match shape {
                None => shape = Some(frames.shape()),
                Some(s) if s != frames.shape() => {
                    return Err(Error::contract(format!(
                        "utterance `{}` has shape {:?}, others {:?}",
                        m.utterance_id,
                        frames.shape(),
                        s
                    )))
                }
                _ => {}
            }
            let speaker = speakers.binary_search(&m.speaker_id).expect("collected above");
            let language = languages
                .iter()
                .position(|l| *l == m.language_id)
                .ok_or_else(|| Error::contract(format!("language `{}` not in inventory", m.language_id)))?;
            by_speaker[speaker].push(items.len());
            items.push(LabeledUtterance {
                id: &m.utterance_id,
                speaker,
                language,
                frames,
            });
        }
        Ok(LabeledSet {
            items,
            speakers,
            languages: languages.to_vec(),
            by_speaker,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn frames_per_utt(&self) -> usize {
        self.items.first().map_or(0, |u| u.frames.rows())
    }

    pub fn feat_dim(&self) -> usize {
        self.items.first().map_or(0, |u| u.frames.cols())
    }

    pub fn utterances_of(&self, speaker: usize) -> &[usize] {
        &self.by_speaker[speaker]
    }
}

/// `speakers × per_speaker` utterances stacked speaker-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// All frames, `(speakers · per_speaker · T) × F_in`.
    pub frames: Tensor,
    pub frames_per_utt: usize,
    pub speakers: usize,
    pub per_speaker: usize,
    /// Speaker class per utterance.
    pub speaker_labels: Vec<usize>,
    /// Language class per utterance, when available.
    pub language_labels: Option<Vec<usize>>,
    pub utterance_ids: Vec<String>,
}

impl Batch {
    pub fn utterances(&self) -> usize {
        self.speakers * self.per_speaker
    }

    /// Rejects batches whose labels do not follow the speaker-major grouping.
    pub fn check_grouping(&self) -> Result<()> {
        let n = self.utterances();
        if self.frames.rows() != n * self.frames_per_utt || self.speaker_labels.len() != n {
            return Err(Error::contract(format!(
                "batch of {}x{} utterances has {} frames and {} labels",
                self.speakers,
                self.per_speaker,
                self.frames.rows(),
                self.speaker_labels.len()
            )));
        }
        for k in 0..self.speakers {
            let group = &self.speaker_labels[k * self.per_speaker..(k + 1) * self.per_speaker];
            if group.iter().any(|&s| s != group[0]) {
                return Err(Error::contract(format!("batch group {k} mixes speakers")));
            }
        }
        if let Some(l) = &self.language_labels {
            if l.len() != n {
                return Err(Error::contract("language labels do not match batch size"));
            }
        }
        Ok(())
    }
}

/// Draws `speakers` distinct speakers and `per_speaker` utterances of each.
///
/// Deterministic in `(seed, step)`. Within a speaker, utterances are taken
/// round-robin over that speaker's languages in shuffled order, so a batch
/// sees cross-lingual pairs whenever the speaker has them.
pub fn sample_batch(set: &LabeledSet<'_>, speakers: usize, per_speaker: usize, seed: u64, step: u64) -> Result<Batch> {
    if speakers == 0 || per_speaker == 0 {
        return Err(Error::contract("batch needs at least one speaker and one utterance each"));
    }
    let eligible: Vec<usize> = (0..set.speakers.len())
        .filter(|&s| set.by_speaker[s].len() >= per_speaker)
        .collect();
    if eligible.len() < speakers {
        return Err(Error::contract(format!(
            "need {speakers} speakers with >= {per_speaker} utterances, only {} available",
            eligible.len()
        )));
    }
    let mut r = rng::stream(rng::derive(seed, "batch"), step);
    let picked = index::sample(&mut r, eligible.len(), speakers);

    let t = set.frames_per_utt();
    let f = set.feat_dim();
    let mut data = Vec::with_capacity(speakers * per_speaker * t * f);
    let mut speaker_labels = Vec::with_capacity(speakers * per_speaker);
    let mut language_labels = Vec::with_capacity(speakers * per_speaker);
    let mut ids = Vec::with_capacity(speakers * per_speaker);
    for p in picked.iter() {
        let s = eligible[p];
        let mut by_lang: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &set.by_speaker[s] {
            by_lang.entry(set.items[i].language).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = by_lang.into_values().collect();
        groups.shuffle(&mut r);
        for g in groups.iter_mut() {
            g.shuffle(&mut r);
        }
        let mut taken = 0;
        let mut cursor = vec![0usize; groups.len()];
        'outer: loop {
            for (g, c) in groups.iter().zip(cursor.iter_mut()) {
                if taken == per_speaker {
                    break 'outer;
                }
                if *c < g.len() {
                    let u = &set.items[g[*c]];
                    *c += 1;
                    data.extend_from_slice(u.frames.data());
                    speaker_labels.push(u.speaker);
                    language_labels.push(u.language);
                    ids.push(u.id.to_owned());
                    taken += 1;
                }
            }
        }
    }
    Ok(Batch {
        frames: Tensor::new(speakers * per_speaker * t, f, data)?,
        frames_per_utt: t,
        speakers,
        per_speaker,
        speaker_labels,
        language_labels: Some(language_labels),
        utterance_ids: ids,
    })
}
