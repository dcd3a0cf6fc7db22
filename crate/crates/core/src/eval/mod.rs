//! Verification scoring, error rates and the language-recognition probe.

mod metrics;
mod probe;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

pub use metrics::{compute_eer, compute_min_dcf, sweep, DcfParams, ScoreSet, Sweep};
pub use probe::{slr_probe, slr_probe_embeddings, ProbeConfig, ProbeResult};

use crate::dataset::FeatureStore;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::ModelBundle;
use crate::tensor::Tensor;
use crate::trials::{Trial, TrialLabel};

/// Anything that maps a `T × F_in` frame block to a fixed-size vector.
pub trait Embedder: Sync {
    fn embed(&self, frames: &Tensor) -> Result<Vec<f64>>;

    /// Embeds several equal-length segments; implementations may batch.
    fn embed_segments(&self, segments: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        segments.iter().map(|s| self.embed(s)).collect()
    }
}

impl Embedder for ModelBundle {
    fn embed(&self, frames: &Tensor) -> Result<Vec<f64>> {
        ModelBundle::embed(self, frames)
    }

    fn embed_segments(&self, segments: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let Some(first) = segments.first() else {
            return Ok(Vec::new());
        };
        let refs: Vec<&Tensor> = segments.iter().collect();
        let stacked = Tensor::concat_rows(&refs)?;
        let e = self.embed_many(&stacked, first.rows())?;
        Ok((0..e.rows()).map(|r| e.row_slice(r).to_vec()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentConfig {
    pub num_segments: usize,
    /// Frames per segment; 0 means half the utterance.
    pub seg_frames: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { num_segments: 10, seg_frames: 0 }
    }
}

impl SegmentConfig {
    pub fn frames_for(&self, total: usize) -> usize {
        if self.seg_frames == 0 {
            (total / 2).max(1)
        } else {
            self.seg_frames
        }
    }
}

/// Evenly spaced segment starts covering `[0, total - seg]`.
pub fn segment_starts(total: usize, num_segments: usize, seg: usize) -> Result<Vec<usize>> {
    if num_segments == 0 || seg == 0 {
        return Err(Error::contract("need at least one segment of at least one frame"));
    }
    if total < seg {
        return Err(Error::contract(format!("utterance of {total} frames is shorter than a {seg}-frame segment")));
    }
    let span = total - seg;
    if num_segments == 1 {
        return Ok(vec![0]);
    }
    Ok((0..num_segments).map(|i| i * span / (num_segments - 1)).collect())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Mean of the unit-normalized segment embeddings. The segment score of
/// two utterances is the dot product of their signatures, which equals the
/// mean cosine over all ordered segment pairs.
pub fn utterance_signature(embedder: &dyn Embedder, frames: &Tensor, cfg: &SegmentConfig) -> Result<Vec<f64>> {
    let seg = cfg.frames_for(frames.rows());
    let starts = segment_starts(frames.rows(), cfg.num_segments, seg)?;
    let segments: Vec<Tensor> = starts
        .iter()
        .map(|&s| frames.slice_rows(s, seg))
        .collect::<Result<_>>()?;
    let embs = embedder.embed_segments(&segments)?;
    let dim = embs.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for e in &embs {
        for (m, u) in mean.iter_mut().zip(unit(e)) {
            *m += u;
        }
    }
    let k = embs.len() as f64;
    Ok(mean.into_iter().map(|m| m / k).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cosine similarity over all `num_segments²` segment pairs.
pub fn segment_score(embedder: &dyn Embedder, a: &Tensor, b: &Tensor, cfg: &SegmentConfig) -> Result<f64> {
    let sa = utterance_signature(embedder, a, cfg)?;
    let sb = utterance_signature(embedder, b, cfg)?;
    Ok(dot(&sa, &sb))
}

/// Signatures of `ids`, in order.
pub fn signatures(
    embedder: &dyn Embedder,
    ids: &[&str],
    features: &FeatureStore,
    cfg: &SegmentConfig,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    exec.try_map(ids.len(), |i| {
        let frames = features
            .get(ids[i])
            .ok_or_else(|| Error::contract(format!("no features for utterance `{}`", ids[i])))?;
        utterance_signature(embedder, frames, cfg)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialScore {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
    pub score: f64,
}

/// Scores every trial. Each distinct utterance is embedded once.
pub fn score_trials(
    embedder: &dyn Embedder,
    trials: &[Trial],
    features: &FeatureStore,
    cfg: &SegmentConfig,
    exec: Execution,
) -> Result<Vec<TrialScore>> {
    let mut ids: Vec<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll_id.as_str(), t.test_id.as_str()])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    for id in &ids {
        if !features.contains_key(*id) {
            return Err(Error::contract(format!("no features for utterance `{id}`")));
        }
    }
    let sigs = signatures(embedder, &ids, features, cfg, exec)?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    Ok(trials
        .iter()
        .map(|t| TrialScore {
            enroll_id: t.enroll_id.clone(),
            test_id: t.test_id.clone(),
            label: t.label,
            score: dot(&sigs[index[t.enroll_id.as_str()]], &sigs[index[t.test_id.as_str()]]),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub segments: SegmentConfig,
    pub dcf: DcfParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { segments: SegmentConfig::default(), dcf: DcfParams::default() }
    }
}

impl EvalConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("eval.num_segments".into(), self.segments.num_segments.to_string()),
            ("eval.seg_frames".into(), self.segments.seg_frames.to_string()),
            ("eval.p_target".into(), self.dcf.p_target.to_string()),
            ("eval.c_miss".into(), self.dcf.c_miss.to_string()),
            ("eval.c_fa".into(), self.dcf.c_fa.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub dcf: DcfParams,
    pub slr_accuracy: Option<f64>,
    pub trials_evaluated: usize,
    pub targets: usize,
    pub nontargets: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[TrialScore], dcf: &DcfParams) -> Result<Self> {
        let set = ScoreSet {
            scores: scores.iter().map(|s| s.score).collect(),
            targets: scores.iter().map(|s| s.label.is_target()).collect(),
        };
        let (eer, eer_threshold) = compute_eer(&set)?;
        let (min_dcf, min_dcf_threshold) = compute_min_dcf(&set, dcf)?;
        let targets = set.targets.iter().filter(|&&t| t).count();
        Ok(EvalReport {
            eer,
            eer_threshold,
            min_dcf,
            min_dcf_threshold,
            dcf: *dcf,
            slr_accuracy: None,
            trials_evaluated: set.len(),
            targets,
            nontargets: set.len() - targets,
        })
    }

    /// Flat `key = value` text, preceded by the provenance pairs.
    pub fn to_text(&self, provenance: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in provenance {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "report.eer = {}", self.eer);
        let _ = writeln!(out, "report.eer_threshold = {}", self.eer_threshold);
        let _ = writeln!(out, "report.min_dcf = {}", self.min_dcf);
        let _ = writeln!(out, "report.min_dcf_threshold = {}", self.min_dcf_threshold);
        let _ = writeln!(out, "report.p_target = {}", self.dcf.p_target);
        let _ = writeln!(out, "report.c_miss = {}", self.dcf.c_miss);
        let _ = writeln!(out, "report.c_fa = {}", self.dcf.c_fa);
        let slr = self.slr_accuracy.map_or_else(|| "none".to_owned(), |a| a.to_string());
        let _ = writeln!(out, "report.slr_accuracy = {slr}");
        let _ = writeln!(out, "report.trials = {}", self.trials_evaluated);
        let _ = writeln!(out, "report.targets = {}", self.targets);
        let _ = writeln!(out, "report.nontargets = {}", self.nontargets);
        out
    }
}

/// Scores a protocol and summarises it.
pub fn evaluate_protocol(
    embedder: &dyn Embedder,
    trials: &[Trial],
    features: &FeatureStore,
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<(EvalReport, Vec<TrialScore>)> {
    let scores = score_trials(embedder, trials, features, &cfg.segments, exec)?;
    let report = EvalReport::from_scores(&scores, &cfg.dcf)?;
    Ok((report, scores))
}

/// `enrollId testId label score` per line, scores in shortest round-trip form.
pub fn write_scores<W: Write>(mut w: W, scores: &[TrialScore]) -> std::io::Result<()> {
    for s in scores {
        writeln!(w, "{} {} {} {}", s.enroll_id, s.test_id, s.label.as_digit(), s.score)?;
    }
    w.flush()
}

pub fn read_scores<R: BufRead>(r: R, source: &str) -> Result<Vec<TrialScore>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 4 {
            return Err(Error::parse(source, i + 1, format!("expected 4 fields, got `{line}`")));
        }
        let label = match f[2] {
            "1" => TrialLabel::Target,
            "0" => TrialLabel::Nontarget,
            x => return Err(Error::parse(source, i + 1, format!("bad label `{x}`"))),
        };
        let score = f[3]
            .parse()
            .map_err(|_| Error::parse(source, i + 1, format!("bad score `{}`", f[3])))?;
        out.push(TrialScore { enroll_id: f[0].to_owned(), test_id: f[1].to_owned(), label, score });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;
    use crate::rng;
    use crate::trials::{build_bilingual_protocol, ProtocolConfig};
    use rand::Rng;

    /// Mean frame, i.e. an embedder that sees the frames' average.
    struct MeanFrame;

    impl Embedder for MeanFrame {
        fn embed(&self, frames: &Tensor) -> Result<Vec<f64>> {
            let mut m = vec![0.0; frames.cols()];
            for r in 0..frames.rows() {
                for (a, b) in m.iter_mut().zip(frames.row_slice(r)) {
                    *a += b / frames.rows() as f64;
                }
            }
            Ok(m)
        }
    }

    /// Ignores its input: a fresh pseudo-random vector keyed by the frames.
    struct RandomEmbedder;

    impl Embedder for RandomEmbedder {
        fn embed(&self, frames: &Tensor) -> Result<Vec<f64>> {
            let key = frames.to_bits().iter().fold(0u64, |h, b| h.rotate_left(5) ^ b);
            let mut r = rng::seeded(key);
            Ok((0..8).map(|_| r.random::<f64>() - 0.5).collect())
        }
    }

    fn model() -> ModelBundle {
        ModelBundle::init(
            ModelConfig { feat_dim: 4, hidden_dim: 6, embed_dim: 5, num_speakers: 3, num_languages: 2, encoder_layers: 2, language_hidden: 6 },
            11,
        )
        .unwrap()
    }

    fn frames(seed: u64, t: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(t, 4, |_, _| r.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn starts_are_even_and_in_range() {
        assert_eq!(segment_starts(20, 5, 10).unwrap(), vec![0, 2, 5, 7, 10]);
        assert_eq!(segment_starts(10, 3, 10).unwrap(), vec![0, 0, 0]);
        assert_eq!(segment_starts(10, 1, 4).unwrap(), vec![0]);
        assert!(matches!(segment_starts(3, 2, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn self_similarity_with_full_segments() {
        let m = model();
        let a = frames(1, 12);
        let cfg = SegmentConfig { num_segments: 10, seg_frames: 12 };
        assert!((segment_score(&m, &a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_segment_is_plain_cosine() {
        let m = model();
        let (a, b) = (frames(1, 12), frames(2, 12));
        let cfg = SegmentConfig { num_segments: 1, seg_frames: 12 };
        let ea = m.embed(&a).unwrap();
        let eb = m.embed(&b).unwrap();
        let cos = dot(&ea, &eb) / (dot(&ea, &ea).sqrt() * dot(&eb, &eb).sqrt());
        assert!((segment_score(&m, &a, &b, &cfg).unwrap() - cos).abs() < 1e-12);
    }

    #[test]
    fn score_is_symmetric_and_matches_pairwise_mean() {
        let m = model();
        let (a, b) = (frames(3, 16), frames(4, 16));
        let cfg = SegmentConfig { num_segments: 4, seg_frames: 6 };
        let ab = segment_score(&m, &a, &b, &cfg).unwrap();
        assert!((ab - segment_score(&m, &b, &a, &cfg).unwrap()).abs() < 1e-12);
        // direct mean over all 16 ordered pairs
        let segs = |x: &Tensor| -> Vec<Vec<f64>> {
            segment_starts(16, 4, 6).unwrap().iter().map(|&s| m.embed(&x.slice_rows(s, 6).unwrap()).unwrap()).collect()
        };
        let (sa, sb) = (segs(&a), segs(&b));
        let mut total = 0.0;
        for x in &sa {
            for y in &sb {
                total += dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt());
            }
        }
        assert!((ab - total / 16.0).abs() < 1e-12);
    }

    #[test]
    fn batched_segments_match_single_embedding() {
        let m = model();
        let segs: Vec<Tensor> = (0..3).map(|i| frames(10 + i, 5)).collect();
        let batched = m.embed_segments(&segs).unwrap();
        for (s, b) in segs.iter().zip(batched) {
            let single = m.embed(s).unwrap();
            for (x, y) in single.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn corpus() -> crate::dataset::SyntheticCorpus {
        generate_synthetic(&SyntheticConfig {
            num_speakers: 40,
            eval_speakers: 40,
            frames: 8,
            feat_dim: 12,
            noise_std: 0.0,
            utts_per_speaker_per_language: 10,
            pseudo_label_error_rate: 0.0,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_embedder_separates_perfectly() {
        // frames replaced by the speaker's one-hot code
        let mut c = corpus();
        for (id, t) in c.features.iter_mut() {
            let spk: usize = id[3..5].parse().unwrap();
            *t = Tensor::from_fn(t.rows(), 40, |_, col| if col == spk { 1.0 } else { 0.0 });
        }
        let trials = build_bilingual_protocol(&c.metadata, &ProtocolConfig::default()).unwrap();
        let (report, _) = evaluate_protocol(&MeanFrame, &trials, &c.features, &EvalConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(report.eer, 0.0);
        assert_eq!(report.min_dcf, 0.0);
    }

    #[test]
    fn random_embedder_sits_at_chance() {
        let c = corpus();
        let trials = build_bilingual_protocol(&c.metadata, &ProtocolConfig { pairs_budget: Some(2000), ..ProtocolConfig::default() }).unwrap();
        assert_eq!(trials.len(), 2000);
        let (report, _) = evaluate_protocol(&RandomEmbedder, &trials, &c.features, &EvalConfig::default(), Execution::Parallel).unwrap();
        assert!((report.eer - 0.5).abs() <= 0.05, "{}", report.eer);
    }

    #[test]
    fn dumped_scores_reproduce_the_report() {
        let c = corpus();
        let trials = build_bilingual_protocol(&c.metadata, &ProtocolConfig { pairs_budget: Some(300), ..ProtocolConfig::default() }).unwrap();
        let m = ModelBundle::init(
            ModelConfig { feat_dim: 12, hidden_dim: 8, embed_dim: 6, num_speakers: 2, num_languages: 2, encoder_layers: 1, language_hidden: 4 },
            2,
        )
        .unwrap();
        let cfg = EvalConfig::default();
        let (report, scores) = evaluate_protocol(&m, &trials, &c.features, &cfg, Execution::Parallel).unwrap();
        let mut buf = Vec::new();
        write_scores(&mut buf, &scores).unwrap();
        let back = read_scores(&buf[..], "dump").unwrap();
        assert_eq!(back, scores);
        assert_eq!(EvalReport::from_scores(&back, &cfg.dcf).unwrap(), report);
        let (seq, _) = evaluate_protocol(&m, &trials, &c.features, &cfg, Execution::Sequential).unwrap();
        assert_eq!(seq.to_text(&[]), report.to_text(&[]));
    }

    #[test]
    fn missing_utterance_is_named() {
        let c = corpus();
        let trials = vec![Trial::new("ghost", "spk00-lang0-000", TrialLabel::Target)];
        match evaluate_protocol(&MeanFrame, &trials, &c.features, &EvalConfig::default(), Execution::Sequential) {
            Err(Error::Contract(m)) => assert!(m.contains("ghost")),
            other => panic!("{other:?}"),
        }
    }
}
