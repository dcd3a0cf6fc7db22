//! Bilingual verification protocols.
//!
//! Targets pair two utterances of one speaker in different languages;
//! nontargets pair two speakers in the same language. Both sides are
//! balanced and every random choice is seeded.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::dataset::UtteranceMeta;
use crate::error::{Error, Result};
use crate::rng;

/// Above this many candidate nontarget pairs the builder switches from
/// exhaustive enumeration to rejection sampling.
pub const ENUMERATION_LIMIT: u64 = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }

    pub fn as_digit(self) -> char {
        if self.is_target() {
            '1'
        } else {
            '0'
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

impl Trial {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, label: TrialLabel) -> Self {
        Trial { enroll_id: enroll_id.into(), test_id: test_id.into(), label }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub max_speakers_per_language: usize,
    pub max_samples_per_speaker: usize,
    /// Upper bound on the total number of trials (split evenly between sides).
    pub pairs_budget: Option<usize>,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            max_speakers_per_language: 1000,
            max_samples_per_speaker: 15,
            pairs_budget: None,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_speakers_per_language == 0 || self.max_samples_per_speaker == 0 {
            return Err(Error::contract("protocol caps must be >= 1"));
        }
        if self.pairs_budget.is_some_and(|b| b < 2) {
            return Err(Error::contract("pairs budget must allow at least one trial per side"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("trials.max_speakers_per_language".into(), self.max_speakers_per_language.to_string()),
            ("trials.max_samples_per_speaker".into(), self.max_samples_per_speaker.to_string()),
            (
                "trials.pairs_budget".into(),
                self.pairs_budget.map_or_else(|| "none".to_owned(), |b| b.to_string()),
            ),
            ("trials.seed".into(), self.seed.to_string()),
        ]
    }
}

/// Sorts, seeded-shuffles and truncates `ids`; the survivors come back sorted.
pub fn seeded_subset(mut ids: Vec<String>, cap: usize, seed: u64, label: &str) -> Vec<String> {
    ids.sort();
    ids.dedup();
    if ids.len() > cap {
        ids.shuffle(&mut rng::seeded(rng::derive(seed, label)));
        ids.truncate(cap);
        ids.sort();
    }
    ids
}

/// Utterances surviving the per-language speaker cap and the per-speaker
/// sample cap, sorted by id.
pub fn select_utterances<'a>(metadata: &'a [UtteranceMeta], config: &ProtocolConfig) -> Vec<&'a UtteranceMeta> {
    let known: Vec<&UtteranceMeta> = metadata.iter().filter(|m| !m.is_unknown_language()).collect();
    let mut speakers_by_lang: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for m in &known {
        speakers_by_lang.entry(&m.language_id).or_default().push(m.speaker_id.clone());
    }
    let mut allowed: BTreeSet<(String, String)> = BTreeSet::new();
    for (lang, spks) in speakers_by_lang {
        for s in seeded_subset(spks, config.max_speakers_per_language, config.seed, &format!("speakers:{lang}")) {
            allowed.insert((lang.to_owned(), s));
        }
    }
    let mut utts_by_speaker: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for m in &known {
        if allowed.contains(&(m.language_id.clone(), m.speaker_id.clone())) {
            utts_by_speaker.entry(&m.speaker_id).or_default().push(m.utterance_id.clone());
        }
    }
    let by_id: HashMap<&str, &UtteranceMeta> = known.iter().map(|m| (m.utterance_id.as_str(), *m)).collect();
    let mut out: Vec<&UtteranceMeta> = utts_by_speaker
        .into_iter()
        .flat_map(|(spk, ids)| seeded_subset(ids, config.max_samples_per_speaker, config.seed, &format!("samples:{spk}")))
        .map(|id| by_id[id.as_str()])
        .collect();
    out.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    out
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a < b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

/// Keeps `k` of the sorted `pairs`, chosen uniformly with a seeded draw;
/// the survivors stay sorted.
fn downsample<T: Clone>(pairs: &[T], k: usize, seed: u64, label: &str) -> Vec<T> {
    if k >= pairs.len() {
        return pairs.to_vec();
    }
    let mut picked = index::sample(&mut rng::seeded(rng::derive(seed, label)), pairs.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pairs[i].clone()).collect()
}

/// Builds a balanced cross-lingual protocol.
pub fn build_bilingual_protocol(metadata: &[UtteranceMeta], config: &ProtocolConfig) -> Result<Vec<Trial>> {
    config.validate()?;
    crate::dataset::check_unique_ids(metadata)?;
    let languages: BTreeSet<&str> = metadata
        .iter()
        .filter(|m| !m.is_unknown_language())
        .map(|m| m.language_id.as_str())
        .collect();
    let speakers: BTreeSet<&str> = metadata
        .iter()
        .filter(|m| !m.is_unknown_language())
        .map(|m| m.speaker_id.as_str())
        .collect();
    if languages.len() < 2 || speakers.len() < 2 {
        return Err(Error::contract(format!(
            "protocol needs >= 2 languages and >= 2 speakers, got {} and {}",
            languages.len(),
            speakers.len()
        )));
    }

    let pool = select_utterances(metadata, config);

    let mut positives = Vec::new();
    let mut by_speaker: BTreeMap<&str, Vec<&UtteranceMeta>> = BTreeMap::new();
    for m in &pool {
        by_speaker.entry(&m.speaker_id).or_default().push(m);
    }
    for utts in by_speaker.values() {
        for (i, a) in utts.iter().enumerate() {
            for b in &utts[i + 1..] {
                if a.language_id != b.language_id {
                    positives.push(ordered(&a.utterance_id, &b.utterance_id));
                }
            }
        }
    }
    positives.sort();
    if positives.is_empty() {
        return Err(Error::EmptyProtocol("no speaker has utterances in two languages".into()));
    }

    let mut by_language: BTreeMap<&str, Vec<&UtteranceMeta>> = BTreeMap::new();
    for m in &pool {
        by_language.entry(&m.language_id).or_default().push(m);
    }
    let mut negative_total: u64 = 0;
    for utts in by_language.values() {
        let n = utts.len() as u64;
        negative_total += n * n.saturating_sub(1) / 2;
        let mut per_spk: BTreeMap<&str, u64> = BTreeMap::new();
        for m in utts {
            *per_spk.entry(&m.speaker_id).or_default() += 1;
        }
        negative_total -= per_spk.values().map(|c| c * c.saturating_sub(1) / 2).sum::<u64>();
    }
    if negative_total == 0 {
        return Err(Error::EmptyProtocol("no same-language pair of different speakers".into()));
    }

    let mut k = positives.len().min(usize::try_from(negative_total).unwrap_or(usize::MAX));
    if let Some(b) = config.pairs_budget {
        k = k.min(b / 2);
    }
    let positives = downsample(&positives, k, config.seed, "downsample:target");

    let negatives = if negative_total <= ENUMERATION_LIMIT || (k as u64) * 2 > negative_total {
        let mut all = Vec::with_capacity(negative_total as usize);
        for utts in by_language.values() {
            for (i, a) in utts.iter().enumerate() {
                for b in &utts[i + 1..] {
                    if a.speaker_id != b.speaker_id {
                        all.push(ordered(&a.utterance_id, &b.utterance_id));
                    }
                }
            }
        }
        all.sort();
        downsample(&all, k, config.seed, "downsample:nontarget")
    } else {
        sample_negatives(&by_language, k, config.seed)
    };

    let finish = |mut pairs: Vec<(String, String)>, label: TrialLabel, tag: &str| {
        pairs.shuffle(&mut rng::seeded(rng::derive(config.seed, tag)));
        pairs.into_iter().map(move |(a, b)| Trial::new(a, b, label))
    };
    let mut trials: Vec<Trial> = finish(positives, TrialLabel::Target, "order:target").collect();
    trials.extend(finish(negatives, TrialLabel::Nontarget, "order:nontarget"));
    Ok(trials)
}

/// Uniform draws over all same-language different-speaker pairs, without
/// replacement, for pools too large to enumerate.
fn sample_negatives(by_language: &BTreeMap<&str, Vec<&UtteranceMeta>>, k: usize, seed: u64) -> Vec<(String, String)> {
    let pools: Vec<&Vec<&UtteranceMeta>> = by_language.values().collect();
    let weights: Vec<u64> = pools.iter().map(|p| (p.len() as u64) * (p.len() as u64).saturating_sub(1) / 2).collect();
    let total: u64 = weights.iter().sum();
    let mut r = rng::seeded(rng::derive(seed, "sample:nontarget"));
    let mut chosen = BTreeSet::new();
    while chosen.len() < k {
        let mut x = r.random_range(0..total);
        let mut li = 0;
        while x >= weights[li] {
            x -= weights[li];
            li += 1;
        }
        let pool = pools[li];
        let i = r.random_range(0..pool.len());
        let j = r.random_range(0..pool.len() - 1);
        let j = if j >= i { j + 1 } else { j };
        let (a, b) = (pool[i], pool[j]);
        if a.speaker_id != b.speaker_id {
            chosen.insert(ordered(&a.utterance_id, &b.utterance_id));
        }
    }
    chosen.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    UnknownId,
    SelfPair,
    DuplicateTrial,
    UnknownLanguage,
    TargetSpeaker,
    TargetLanguage,
    NontargetSpeaker,
    NontargetLanguage,
    SpeakerCap,
    SampleCap,
    Balance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Offending trial index, when the rule is about a single trial.
    pub trial: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.trial {
            Some(i) => write!(f, "trial {i}: {:?}: {}", self.rule, self.detail),
            None => write!(f, "{:?}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub trials: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every protocol rule. Cap rules are only checked when `caps` is given.
pub fn validate_protocol(trials: &[Trial], metadata: &[UtteranceMeta], caps: Option<&ProtocolConfig>) -> ValidationReport {
    let by_id: HashMap<&str, &UtteranceMeta> = metadata.iter().map(|m| (m.utterance_id.as_str(), m)).collect();
    let mut violations = Vec::new();
    let mut v = |trial: Option<usize>, rule: Rule, detail: String| violations.push(Violation { trial, rule, detail });
    let mut seen = HashMap::new();
    let mut used: BTreeSet<&str> = BTreeSet::new();
    let (mut targets, mut nontargets) = (0usize, 0usize);

    for (i, t) in trials.iter().enumerate() {
        if t.label.is_target() {
            targets += 1;
        } else {
            nontargets += 1;
        }
        if t.enroll_id == t.test_id {
            v(Some(i), Rule::SelfPair, format!("`{}` paired with itself", t.enroll_id));
        }
        if let Some(j) = seen.insert(ordered(&t.enroll_id, &t.test_id), i) {
            v(Some(i), Rule::DuplicateTrial, format!("same pair as trial {j}"));
        }
        let (Some(a), Some(b)) = (by_id.get(t.enroll_id.as_str()), by_id.get(t.test_id.as_str())) else {
            for id in [&t.enroll_id, &t.test_id] {
                if !by_id.contains_key(id.as_str()) {
                    v(Some(i), Rule::UnknownId, format!("`{id}` not in metadata"));
                }
            }
            continue;
        };
        used.insert(&a.utterance_id);
        used.insert(&b.utterance_id);
        if a.is_unknown_language() || b.is_unknown_language() {
            v(Some(i), Rule::UnknownLanguage, "references an utterance of unknown language".into());
            continue;
        }
        let same_spk = a.speaker_id == b.speaker_id;
        let same_lang = a.language_id == b.language_id;
        match t.label {
            TrialLabel::Target => {
                if !same_spk {
                    v(Some(i), Rule::TargetSpeaker, format!("speakers {} and {}", a.speaker_id, b.speaker_id));
                }
                if same_lang {
                    v(Some(i), Rule::TargetLanguage, format!("both in {}", a.language_id));
                }
            }
            TrialLabel::Nontarget => {
                if same_spk {
                    v(Some(i), Rule::NontargetSpeaker, format!("both by {}", a.speaker_id));
                }
                if !same_lang {
                    v(Some(i), Rule::NontargetLanguage, format!("languages {} and {}", a.language_id, b.language_id));
                }
            }
        }
    }
    if targets != nontargets {
        v(None, Rule::Balance, format!("{targets} targets vs {nontargets} nontargets"));
    }
    if let Some(cfg) = caps {
        let mut spk_per_lang: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        let mut utts_per_spk: BTreeMap<&str, usize> = BTreeMap::new();
        for id in &used {
            let m = by_id[id];
            spk_per_lang.entry(&m.language_id).or_default().insert(&m.speaker_id);
            *utts_per_spk.entry(&m.speaker_id).or_default() += 1;
        }
        for (lang, s) in spk_per_lang {
            if s.len() > cfg.max_speakers_per_language {
                v(None, Rule::SpeakerCap, format!("{lang} uses {} speakers", s.len()));
            }
        }
        for (spk, n) in utts_per_spk {
            if n > cfg.max_samples_per_speaker {
                v(None, Rule::SampleCap, format!("{spk} uses {n} utterances"));
            }
        }
    }
    ValidationReport { trials: trials.len(), violations }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub targets: usize,
    pub nontargets: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProtocolStats {
    pub counts: LabelCounts,
    /// Trials touching each language (a cross-lingual target counts once
    /// for each of its two languages).
    pub by_language: BTreeMap<String, LabelCounts>,
    /// Distinct speakers with at least one utterance of the language in use.
    pub speakers_per_language: BTreeMap<String, usize>,
}

pub fn protocol_stats(trials: &[Trial], metadata: &[UtteranceMeta]) -> Result<ProtocolStats> {
    let by_id: HashMap<&str, &UtteranceMeta> = metadata.iter().map(|m| (m.utterance_id.as_str(), m)).collect();
    let mut stats = ProtocolStats::default();
    let mut speakers: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for t in trials {
        let look = |id: &str| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::contract(format!("trial references unknown utterance `{id}`")))
        };
        let a = look(&t.enroll_id)?;
        let b = look(&t.test_id)?;
        let bump = |c: &mut LabelCounts| {
            if t.label.is_target() {
                c.targets += 1;
            } else {
                c.nontargets += 1;
            }
        };
        bump(&mut stats.counts);
        let langs: BTreeSet<&str> = [a.language_id.as_str(), b.language_id.as_str()].into();
        for l in langs {
            bump(stats.by_language.entry(l.to_owned()).or_default());
        }
        for m in [a, b] {
            speakers.entry(m.language_id.clone()).or_default().insert(&m.speaker_id);
        }
    }
    stats.speakers_per_language = speakers.into_iter().map(|(l, s)| (l, s.len())).collect();
    Ok(stats)
}

/// Writes `label enrollId testId` lines after `# key = value` header lines.
pub fn write_trials<W: Write>(mut w: W, trials: &[Trial], header: &[(String, String)]) -> std::io::Result<()> {
    for (k, v) in header {
        writeln!(w, "# {k} = {v}")?;
    }
    for t in trials {
        writeln!(w, "{} {} {}", t.label.as_digit(), t.enroll_id, t.test_id)?;
    }
    w.flush()
}

/// Parses a trial list; returns the trials and the `# key = value` header.
pub fn read_trials<R: BufRead>(r: R, source: &str) -> Result<(Vec<Trial>, Vec<(String, String)>)> {
    let mut trials = Vec::new();
    let mut header = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if let Some(h) = line.strip_prefix('#') {
            if let Some((k, v)) = h.trim().split_once(" = ") {
                header.push((k.to_owned(), v.to_owned()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::parse(source, i + 1, format!("expected `label enrollId testId`, got `{line}`")));
        }
        let label = match fields[0] {
            "1" => TrialLabel::Target,
            "0" => TrialLabel::Nontarget,
            other => return Err(Error::parse(source, i + 1, format!("label must be 1 or 0, got `{other}`"))),
        };
        if !fields[1].is_ascii() || !fields[2].is_ascii() {
            return Err(Error::parse(source, i + 1, "trial ids must be ASCII"));
        }
        trials.push(Trial::new(fields[1], fields[2], label));
    }
    Ok((trials, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Split, UNKNOWN_LANGUAGE};

    fn m(id: &str, spk: &str, lang: &str) -> UtteranceMeta {
        UtteranceMeta::new(id, spk, lang, Split::Eval)
    }

    fn tiny() -> Vec<UtteranceMeta> {
        vec![m("A_en", "A", "en"), m("A_fr", "A", "fr"), m("B_en", "B", "en")]
    }

    #[test]
    fn exhaustive_tiny_case() {
        let t = build_bilingual_protocol(&tiny(), &ProtocolConfig::default()).unwrap();
        assert_eq!(
            t,
            vec![
                Trial::new("A_en", "A_fr", TrialLabel::Target),
                Trial::new("A_en", "B_en", TrialLabel::Nontarget)
            ]
        );
        let s = protocol_stats(&t, &tiny()).unwrap();
        assert_eq!(s.counts, LabelCounts { targets: 1, nontargets: 1 });
        assert!(validate_protocol(&t, &tiny(), Some(&ProtocolConfig::default())).is_ok());
    }

    #[test]
    fn monolingual_speakers_give_empty_protocol() {
        let meta = vec![m("a1", "A", "en"), m("a2", "A", "en"), m("b1", "B", "fr")];
        assert!(matches!(
            build_bilingual_protocol(&meta, &ProtocolConfig::default()),
            Err(Error::EmptyProtocol(_))
        ));
        let one_lang = vec![m("a1", "A", "en"), m("b1", "B", "en")];
        assert!(matches!(build_bilingual_protocol(&one_lang, &ProtocolConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_language_is_excluded() {
        let mut meta = tiny();
        meta.push(m("A_x", "A", UNKNOWN_LANGUAGE));
        meta.push(m("B_x", "B", UNKNOWN_LANGUAGE));
        let t = build_bilingual_protocol(&meta, &ProtocolConfig::default()).unwrap();
        assert!(t.iter().all(|t| !t.enroll_id.ends_with('x') && !t.test_id.ends_with('x')));
    }

    #[test]
    fn corrupted_target_is_flagged_once() {
        let mut meta = tiny();
        meta.push(m("A_en2", "A", "en"));
        meta.push(m("B_fr", "B", "fr"));
        let cfg = ProtocolConfig::default();
        let mut t = build_bilingual_protocol(&meta, &cfg).unwrap();
        assert!(validate_protocol(&t, &meta, Some(&cfg)).is_ok());
        let i = t.iter().position(|t| t.label.is_target()).unwrap();
        let spk = &meta.iter().find(|x| x.utterance_id == t[i].enroll_id).unwrap().clone();
        let same_lang = meta
            .iter()
            .find(|x| x.speaker_id == spk.speaker_id && x.language_id == spk.language_id && x.utterance_id != spk.utterance_id)
            .unwrap();
        t[i].test_id = same_lang.utterance_id.clone();
        let report = validate_protocol(&t, &meta, Some(&cfg));
        assert_eq!(report.violations.len(), 1, "{:?}", report.violations);
        assert_eq!(report.violations[0].rule, Rule::TargetLanguage);
        assert_eq!(report.violations[0].trial, Some(i));
    }

    #[test]
    fn validation_flags_each_rule() {
        let meta = vec![m("a", "A", "en"), m("b", "A", "fr"), m("c", "B", "en"), m("u", "B", UNKNOWN_LANGUAGE)];
        let trials = vec![
            Trial::new("a", "c", TrialLabel::Target),
            Trial::new("a", "b", TrialLabel::Nontarget),
            Trial::new("a", "zz", TrialLabel::Nontarget),
            Trial::new("a", "u", TrialLabel::Nontarget),
            Trial::new("c", "a", TrialLabel::Nontarget),
        ];
        let rules: Vec<Rule> = validate_protocol(&trials, &meta, None).violations.iter().map(|v| v.rule).collect();
        for r in [
            Rule::TargetSpeaker,
            Rule::NontargetSpeaker,
            Rule::NontargetLanguage,
            Rule::UnknownId,
            Rule::UnknownLanguage,
            Rule::DuplicateTrial,
            Rule::Balance,
        ] {
            assert!(rules.contains(&r), "{r:?} missing from {rules:?}");
        }
    }

    #[test]
    fn caps_and_budget_are_enforced() {
        let mut meta = Vec::new();
        for s in 0..12 {
            for l in ["en", "fr"] {
                for u in 0..5 {
                    meta.push(m(&format!("s{s:02}_{l}_{u}"), &format!("s{s:02}"), l));
                }
            }
        }
        let cfg = ProtocolConfig { max_speakers_per_language: 7, max_samples_per_speaker: 4, pairs_budget: Some(40), seed: 3 };
        let t = build_bilingual_protocol(&meta, &cfg).unwrap();
        assert!(t.len() <= 40 && !t.is_empty());
        let budget_only = ProtocolConfig { pairs_budget: Some(40), ..ProtocolConfig::default() };
        assert_eq!(build_bilingual_protocol(&meta, &budget_only).unwrap().len(), 40);
        let report = validate_protocol(&t, &meta, Some(&cfg));
        assert!(report.is_ok(), "{:?}", report.violations);
        let stats = protocol_stats(&t, &meta).unwrap();
        assert!(stats.speakers_per_language.values().all(|&n| n <= 7));
    }

    #[test]
    fn stats_are_additive_over_labels() {
        let mut meta = tiny();
        meta.push(m("B_fr", "B", "fr"));
        meta.push(m("C_fr", "C", "fr"));
        let t = build_bilingual_protocol(&meta, &ProtocolConfig::default()).unwrap();
        let (pos, neg): (Vec<Trial>, Vec<Trial>) = t.iter().cloned().partition(|t| t.label.is_target());
        let all = protocol_stats(&t, &meta).unwrap();
        let p = protocol_stats(&pos, &meta).unwrap();
        let n = protocol_stats(&neg, &meta).unwrap();
        assert_eq!(all.counts.targets, p.counts.targets + n.counts.targets);
        assert_eq!(all.counts.nontargets, p.counts.nontargets + n.counts.nontargets);
        for (l, c) in &all.by_language {
            let pc = p.by_language.get(l).copied().unwrap_or_default();
            let nc = n.by_language.get(l).copied().unwrap_or_default();
            assert_eq!(c.targets, pc.targets + nc.targets);
            assert_eq!(c.nontargets, pc.nontargets + nc.nontargets);
        }
        assert_eq!(protocol_stats(&[], &meta).unwrap(), ProtocolStats::default());
        assert!(protocol_stats(&[Trial::new("nope", "A_en", TrialLabel::Target)], &meta).is_err());
    }

    #[test]
    fn rejection_sampler_draws_valid_distinct_pairs() {
        let mut meta = Vec::new();
        for s in 0..30 {
            for l in ["en", "fr"] {
                for u in 0..3 {
                    meta.push(m(&format!("s{s}_{l}_{u}"), &format!("s{s}"), l));
                }
            }
        }
        let mut by_language: BTreeMap<&str, Vec<&UtteranceMeta>> = BTreeMap::new();
        for x in &meta {
            by_language.entry(&x.language_id).or_default().push(x);
        }
        let pairs = sample_negatives(&by_language, 200, 1);
        assert_eq!(pairs.len(), 200);
        let lookup: HashMap<&str, &UtteranceMeta> = meta.iter().map(|x| (x.utterance_id.as_str(), x)).collect();
        for (a, b) in &pairs {
            assert!(a < b);
            assert_ne!(lookup[a.as_str()].speaker_id, lookup[b.as_str()].speaker_id);
            assert_eq!(lookup[a.as_str()].language_id, lookup[b.as_str()].language_id);
        }
        assert_eq!(pairs, sample_negatives(&by_language, 200, 1));
    }

    #[test]
    fn trial_file_roundtrip() {
        let t = build_bilingual_protocol(&tiny(), &ProtocolConfig::default()).unwrap();
        let header = ProtocolConfig::default().to_pairs();
        let mut buf = Vec::new();
        write_trials(&mut buf, &t, &header).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.ends_with("1 A_en A_fr\n0 A_en B_en\n"));
        let (back, h) = read_trials(&buf[..], "t").unwrap();
        assert_eq!(back, t);
        assert_eq!(h, header);
        assert!(matches!(read_trials(&b"2 a b\n"[..], "t"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_trials(&b"1 a b\n1 a\n"[..], "t"), Err(Error::Parse { line: 2, .. })));
    }
}
