//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. A file layer is read first and
//! command-line flags are applied on top. Setting the same key twice with
//! different values inside one layer is an error that names both places.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dataset::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ProbeConfig};
use crate::exec::Execution;
use crate::losses::Mode;
use crate::trainer::TrainConfig;
use crate::trials::ProtocolConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Text => "text",
            ReportFormat::Csv => "csv",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::contract(format!("unknown report format `{s}` (text|csv)"))),
        }
    }
}

/// Everything a command needs besides file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SyntheticConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub modes: Vec<Mode>,
    pub seeds: usize,
    pub execution: Execution,
    pub report_format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SyntheticConfig::default(),
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            modes: Mode::ALL.to_vec(),
            seeds: 3,
            execution: Execution::default(),
            report_format: ReportFormat::default(),
        }
    }
}

/// Where a value came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Origin {
    pub source: String,
    /// 1-based line for file values, 0 for flags.
    pub line: usize,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            f.write_str(&self.source)
        } else {
            write!(f, "{}:{}", self.source, self.line)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

impl Setting {
    pub fn flag(key: impl Into<String>, value: impl Into<String>, flag: impl Into<String>) -> Self {
        Setting { key: key.into(), value: value.into(), origin: Origin { source: flag.into(), line: 0 } }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn bool_value(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn via<T: FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|e: Error| match e {
        Error::Contract(m) => m,
        other => other.to_string(),
    })
}

fn modes_value(v: &str) -> std::result::Result<Vec<Mode>, String> {
    let modes = v.split(',').map(|m| via::<Mode>(m.trim())).collect::<std::result::Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err("empty mode list".into());
    }
    Ok(modes)
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "synth.num_speakers",
        "synth.num_languages",
        "synth.languages_per_speaker",
        "synth.utts_per_speaker_per_language",
        "synth.frames",
        "synth.feat_dim",
        "synth.confound",
        "synth.noise_std",
        "synth.pseudo_label_error_rate",
        "synth.eval_speakers",
        "synth.seed",
        "train.mode",
        "train.lambda",
        "train.lr0",
        "train.decay",
        "train.epochs",
        "train.speakers_per_batch",
        "train.utts_per_speaker",
        "train.frames_per_utt",
        "train.seed",
        "train.speaker_loss",
        "train.corr_weight",
        "train.grad_clip",
        "train.discriminator_steps",
        "train.baseline_trains_language",
        "train.hidden_dim",
        "train.embed_dim",
        "train.encoder_layers",
        "train.language_hidden",
        "trials.max_speakers_per_language",
        "trials.max_samples_per_speaker",
        "trials.pairs_budget",
        "trials.seed",
        "eval.num_segments",
        "eval.seg_frames",
        "eval.p_target",
        "eval.c_miss",
        "eval.c_fa",
        "probe.epochs",
        "probe.lr",
        "probe.train_fraction",
        "probe.batch_size",
        "probe.hidden",
        "probe.seed",
        "compare.modes",
        "compare.seeds",
        "run.execution",
        "report.format",
    ];

    /// Applies one setting. The error is a bare message; callers attach the origin.
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.synth;
        let t = &mut self.train;
        let p = &mut self.protocol;
        match key {
            "synth.num_speakers" => s.num_speakers = num(v)?,
            "synth.num_languages" => s.num_languages = num(v)?,
            "synth.languages_per_speaker" => s.languages_per_speaker = num(v)?,
            "synth.utts_per_speaker_per_language" => s.utts_per_speaker_per_language = num(v)?,
            "synth.frames" => s.frames = num(v)?,
            "synth.feat_dim" => s.feat_dim = num(v)?,
            "synth.confound" => s.confound = num(v)?,
            "synth.noise_std" => s.noise_std = num(v)?,
            "synth.pseudo_label_error_rate" => s.pseudo_label_error_rate = num(v)?,
            "synth.eval_speakers" => s.eval_speakers = num(v)?,
            "synth.seed" => s.seed = num(v)?,
            "train.mode" => t.mode = via(v)?,
            "train.lambda" => t.lambda = num(v)?,
            "train.lr0" => t.lr0 = num(v)?,
            "train.decay" => t.decay_per_epoch = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.speakers_per_batch" => t.speakers_per_batch = num(v)?,
            "train.utts_per_speaker" => t.utts_per_speaker = num(v)?,
            "train.frames_per_utt" => t.frames_per_utt = num(v)?,
            "train.seed" => t.seed = num(v)?,
            "train.speaker_loss" => t.speaker_loss = via(v)?,
            "train.corr_weight" => t.corr_weight = num(v)?,
            "train.grad_clip" => t.grad_clip = num(v)?,
            "train.discriminator_steps" => t.discriminator_steps = num(v)?,
            "train.baseline_trains_language" => t.baseline_trains_language = bool_value(v)?,
            "train.hidden_dim" => t.hidden_dim = num(v)?,
            "train.embed_dim" => t.embed_dim = num(v)?,
            "train.encoder_layers" => t.encoder_layers = num(v)?,
            "train.language_hidden" => t.language_hidden = num(v)?,
            "trials.max_speakers_per_language" => p.max_speakers_per_language = num(v)?,
            "trials.max_samples_per_speaker" => p.max_samples_per_speaker = num(v)?,
            "trials.pairs_budget" => p.pairs_budget = if v == "none" { None } else { Some(num(v)?) },
            "trials.seed" => p.seed = num(v)?,
            "eval.num_segments" => self.eval.segments.num_segments = num(v)?,
            "eval.seg_frames" => self.eval.segments.seg_frames = num(v)?,
            "eval.p_target" => self.eval.dcf.p_target = num(v)?,
            "eval.c_miss" => self.eval.dcf.c_miss = num(v)?,
            "eval.c_fa" => self.eval.dcf.c_fa = num(v)?,
            "probe.epochs" => self.probe.epochs = num(v)?,
            "probe.lr" => self.probe.lr = num(v)?,
            "probe.train_fraction" => self.probe.train_fraction = num(v)?,
            "probe.batch_size" => self.probe.batch_size = num(v)?,
            "probe.hidden" => self.probe.hidden = num(v)?,
            "probe.seed" => self.probe.seed = num(v)?,
            "compare.modes" => self.modes = modes_value(v)?,
            "compare.seeds" => self.seeds = num(v)?,
            "run.execution" => self.execution = via(v)?,
            "report.format" => self.report_format = via(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn synth_pairs(&self) -> Vec<(String, String)> {
        let s = &self.synth;
        [
            ("synth.num_speakers", s.num_speakers.to_string()),
            ("synth.num_languages", s.num_languages.to_string()),
            ("synth.languages_per_speaker", s.languages_per_speaker.to_string()),
            ("synth.utts_per_speaker_per_language", s.utts_per_speaker_per_language.to_string()),
            ("synth.frames", s.frames.to_string()),
            ("synth.feat_dim", s.feat_dim.to_string()),
            ("synth.confound", s.confound.to_string()),
            ("synth.noise_std", s.noise_std.to_string()),
            ("synth.pseudo_label_error_rate", s.pseudo_label_error_rate.to_string()),
            ("synth.eval_speakers", s.eval_speakers.to_string()),
            ("synth.seed", s.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    /// Every key in [`KEYS`](Self::KEYS) order with its effective value.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.synth_pairs();
        out.extend(self.train.to_pairs());
        out.extend(self.protocol.to_pairs());
        out.extend(self.eval.to_pairs());
        out.extend(self.probe.to_pairs());
        let modes: Vec<&str> = self.modes.iter().map(|m| m.as_str()).collect();
        out.push(("compare.modes".into(), modes.join(",")));
        out.push(("compare.seeds".into(), self.seeds.to_string()));
        out.push(("run.execution".into(), self.execution.to_string()));
        out.push(("report.format".into(), self.report_format.to_string()));
        out
    }

    /// `key = value` lines that parse back to `self`.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks every section against its own contract.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.protocol.validate()?;
        self.eval.dcf.validate()?;
        if self.seeds == 0 {
            return Err(Error::contract("compare.seeds must be >= 1"));
        }
        Ok(())
    }

    /// Defaults, then the file settings, then the flags.
    pub fn resolve(file: &[Setting], flags: &[Setting]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for layer in [file, flags] {
            for s in merge_layer(layer)?.values() {
                cfg.set(&s.key, &s.value)
                    .map_err(|m| Error::parse(&s.origin.source, s.origin.line, format!("{}: {m}", s.key)))?;
            }
        }
        Ok(cfg)
    }
}

/// Collapses one layer to a value per key, rejecting conflicting repeats.
fn merge_layer(layer: &[Setting]) -> Result<BTreeMap<&str, &Setting>> {
    let mut seen: BTreeMap<&str, &Setting> = BTreeMap::new();
    for s in layer {
        if let Some(prev) = seen.get(s.key.as_str()) {
            if prev.value != s.value {
                return Err(Error::parse(
                    &s.origin.source,
                    s.origin.line,
                    format!(
                        "conflicting values for `{}`: `{}` from {} and `{}` from {}",
                        s.key, prev.value, prev.origin, s.value, s.origin
                    ),
                ));
            }
        }
        seen.insert(&s.key, s);
    }
    Ok(seen)
}

/// Parses a config file. Unknown keys and lines without `=` are parse
/// errors carrying the line number.
pub fn parse_config_text(text: &str, source: &str) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(source, i + 1, format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !RunConfig::KEYS.contains(&k) {
            return Err(Error::parse(source, i + 1, format!("unknown key `{k}`")));
        }
        if v.is_empty() {
            return Err(Error::parse(source, i + 1, format!("missing value for `{k}`")));
        }
        out.push(Setting { key: k.to_owned(), value: v.to_owned(), origin: Origin { source: source.to_owned(), line: i + 1 } });
    }
    Ok(out)
}

/// Recovers the configuration embedded in an artifact: every line of the
/// form `key = value` or `# key = value` whose key is a known setting.
pub fn embedded_settings(text: &str, source: &str) -> Vec<Setting> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let line = raw.strip_prefix("# ").unwrap_or(raw);
            let (k, v) = line.split_once(" = ")?;
            RunConfig::KEYS.contains(&k).then(|| Setting {
                key: k.to_owned(),
                value: v.to_owned(),
                origin: Origin { source: source.to_owned(), line: i + 1 },
            })
        })
        .collect()
}
