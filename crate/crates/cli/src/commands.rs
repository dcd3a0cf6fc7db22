use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use langdis::compare::{run_compare, CompareConfig};
use langdis::config::{embedded_settings, parse_config_text, ReportFormat, RunConfig, Setting};
use langdis::dataset::{
    generate_synthetic, language_inventory, load_features, load_metadata, save_features, save_metadata, LabeledSet, Split,
    UtteranceMeta,
};
use langdis::eval::{evaluate_protocol, slr_probe, write_scores};
use langdis::trainer::fit;
use langdis::trials::{build_bilingual_protocol, protocol_stats, read_trials, validate_protocol, write_trials};
use langdis::{Checkpoint, Error, Result};

use crate::{ConfigArgs, DataArgs};

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist")))
        }
        _ => Ok(()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves the effective configuration. `inherited` is used as the file
/// layer when neither `--config` nor `--from` is given.
fn resolve(args: &ConfigArgs, seed_key: Option<&str>, extra: Vec<Setting>, inherited: Vec<Setting>) -> Result<RunConfig> {
    let file = match (&args.config, &args.from) {
        (Some(p), _) => {
            require_file(p)?;
            parse_config_text(&read_text(p)?, &p.display().to_string())?
        }
        (None, Some(p)) => {
            require_file(p)?;
            embedded_settings(&read_text(p)?, &p.display().to_string())
        }
        (None, None) => inherited,
    };
    let mut flags = Vec::new();
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::parse("--set", 0, format!("expected KEY=VALUE, got `{s}`")))?;
        let k = k.trim();
        if !RunConfig::KEYS.contains(&k) {
            return Err(Error::parse("--set", 0, format!("unknown key `{k}`")));
        }
        flags.push(Setting::flag(k, v.trim(), format!("--set {k}")));
    }
    if let (Some(seed), Some(key)) = (args.seed, seed_key) {
        flags.push(Setting::flag(key, seed.to_string(), "--seed"));
    }
    if let Some(e) = &args.exec {
        flags.push(Setting::flag("run.execution", e.as_str(), "--exec"));
    }
    flags.extend(extra);
    let cfg = RunConfig::resolve(&file, &flags)?;
    cfg.validate()?;
    Ok(cfg)
}

fn opt_flag<T: ToString>(key: &str, value: Option<T>, flag: &str) -> Option<Setting> {
    value.map(|v| Setting::flag(key, v.to_string(), flag))
}

fn checkpoint_settings(ckpt: &Checkpoint, source: &str) -> Vec<Setting> {
    let text: String = ckpt.meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    embedded_settings(&text, source)
}

fn split_filter(split: &str) -> Result<Option<Split>> {
    if split == "all" {
        return Ok(None);
    }
    split
        .parse::<Split>()
        .map(Some)
        .map_err(|m| Error::parse("--split", 0, format!("{m} (train|eval|all)")))
}

fn load_data(data: &DataArgs) -> Result<(Vec<UtteranceMeta>, langdis::dataset::FeatureStore)> {
    require_file(&data.metadata)?;
    require_file(&data.features)?;
    Ok((load_metadata(&data.metadata)?, load_features(&data.features)?))
}

pub fn synth(out: &Path, args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = resolve(args, Some("synth.seed"), Vec::new(), Vec::new())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let corpus = generate_synthetic(&cfg.synth)?;
    save_metadata(&out.join("metadata.csv"), &corpus.metadata)?;
    save_features(&out.join("features.bin"), &corpus.features)?;
    let mut truth = String::from("utteranceId,languageId\n");
    for (id, lang) in &corpus.true_languages {
        truth.push_str(&format!("{id},{lang}\n"));
    }
    write_text(&out.join("true_languages.csv"), &truth)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    println!(
        "wrote {} utterances ({} speakers, {} languages) to {}",
        corpus.metadata.len(),
        cfg.synth.num_speakers,
        cfg.synth.num_languages,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn build_trials(metadata: &Path, out: &Path, split: &str, args: &ConfigArgs) -> Result<ExitCode> {
    require_file(metadata)?;
    require_parent(out)?;
    let split = split_filter(split)?;
    let cfg = resolve(args, Some("trials.seed"), Vec::new(), Vec::new())?;
    let all = load_metadata(metadata)?;
    let chosen: Vec<UtteranceMeta> = all.into_iter().filter(|m| split.is_none_or(|s| m.split == s)).collect();
    let trials = build_bilingual_protocol(&chosen, &cfg.protocol)?;
    let file = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    write_trials(BufWriter::new(file), &trials, &cfg.to_pairs()).map_err(|e| Error::io(out, e))?;
    let stats = protocol_stats(&trials, &chosen)?;
    println!(
        "wrote {} trials ({} target / {} nontarget) to {}",
        trials.len(),
        stats.counts.targets,
        stats.counts.nontargets,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn validate_trials(metadata: &Path, trials_path: &Path, check_caps: bool, args: &ConfigArgs) -> Result<ExitCode> {
    require_file(metadata)?;
    require_file(trials_path)?;
    let meta = load_metadata(metadata)?;
    let file = fs::File::open(trials_path).map_err(|e| Error::io(trials_path, e))?;
    let (trials, header) = read_trials(BufReader::new(file), &trials_path.display().to_string())?;
    // caps default to the ones the list was built with
    let inherited: String = header.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let cfg = resolve(args, None, Vec::new(), embedded_settings(&inherited, &trials_path.display().to_string()))?;
    let report = validate_protocol(&trials, &meta, check_caps.then_some(&cfg.protocol));
    let stats = protocol_stats(&trials, &meta);
    println!("trials = {}", report.trials);
    if let Ok(s) = &stats {
        println!("targets = {}", s.counts.targets);
        println!("nontargets = {}", s.counts.nontargets);
        for (lang, c) in &s.by_language {
            let spk = s.speakers_per_language.get(lang).copied().unwrap_or(0);
            println!("language {lang}: {} target, {} nontarget, {spk} speakers", c.targets, c.nontargets);
        }
    }
    println!("violations = {}", report.violations.len());
    for v in &report.violations {
        println!("  {v}");
    }
    Ok(if report.is_ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn train(
    data: &DataArgs,
    out: &Path,
    mode: Option<String>,
    lambda: Option<f64>,
    epochs: Option<usize>,
    log: Option<&Path>,
    args: &ConfigArgs,
) -> Result<ExitCode> {
    require_parent(out)?;
    if let Some(l) = log {
        require_parent(l)?;
    }
    let extra = [
        opt_flag("train.mode", mode, "--mode"),
        opt_flag("train.lambda", lambda, "--lambda"),
        opt_flag("train.epochs", epochs, "--epochs"),
    ]
    .into_iter()
    .flatten()
    .collect();
    let cfg = resolve(args, Some("train.seed"), extra, Vec::new())?;
    let (meta, features) = load_data(data)?;
    let languages = language_inventory(&meta);
    let set = LabeledSet::new(&meta, &features, Split::Train, &languages)?;
    let outcome = fit(&cfg.train, &set)?;
    let log_text = outcome.log_text();
    match log {
        Some(p) => write_text(p, &log_text)?,
        None => print!("{log_text}"),
    }
    Checkpoint::new(outcome.model, cfg.to_pairs()).save(out)?;
    if outcome.log.iter().all(|l| l.all_finite()) {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numeric(format!("training diverged; checkpoint kept at {}", out.display())))
    }
}

pub fn evaluate(
    checkpoint: &Path,
    trials_path: &Path,
    features: &Path,
    out: Option<&Path>,
    scores: Option<&Path>,
    args: &ConfigArgs,
) -> Result<ExitCode> {
    for p in [checkpoint, trials_path, features] {
        require_file(p)?;
    }
    for p in [out, scores].into_iter().flatten() {
        require_parent(p)?;
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = resolve(args, None, Vec::new(), checkpoint_settings(&ckpt, &checkpoint.display().to_string()))?;
    let file = fs::File::open(trials_path).map_err(|e| Error::io(trials_path, e))?;
    let (trials, _) = read_trials(BufReader::new(file), &trials_path.display().to_string())?;
    let store = load_features(features)?;
    let (report, per_trial) = evaluate_protocol(&ckpt.model, &trials, &store, &cfg.eval, cfg.execution)?;
    if let Some(p) = scores {
        let f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
        write_scores(BufWriter::new(f), &per_trial).map_err(|e| Error::io(p, e))?;
    }
    emit(out, &report.to_text(&cfg.to_pairs()))?;
    Ok(ExitCode::SUCCESS)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

pub fn probe(checkpoint: &Path, data: &DataArgs, split: &str, out: Option<&Path>, args: &ConfigArgs) -> Result<ExitCode> {
    require_file(checkpoint)?;
    if let Some(p) = out {
        require_parent(p)?;
    }
    let split = split_filter(split)?.ok_or_else(|| Error::parse("--split", 0, "probe needs train or eval"))?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = resolve(args, Some("probe.seed"), Vec::new(), checkpoint_settings(&ckpt, &checkpoint.display().to_string()))?;
    let (meta, features) = load_data(data)?;
    let languages = language_inventory(&meta);
    let set = LabeledSet::new(&meta, &features, split, &languages)?;
    let r = slr_probe(&ckpt.model, &set, &cfg.probe, cfg.execution)?;
    let mut text = cfg.to_text();
    text.push_str(&format!("probe.split = {split}\n"));
    text.push_str(&format!("probe.accuracy = {}\n", r.accuracy));
    text.push_str(&format!("probe.majority_rate = {}\n", r.majority_rate));
    text.push_str(&format!("probe.train_size = {}\n", r.train_size));
    text.push_str(&format!("probe.test_size = {}\n", r.test_size));
    emit(out, &text)?;
    Ok(ExitCode::SUCCESS)
}

pub struct CompareFlags {
    pub seeds: Option<usize>,
    pub modes: Option<String>,
    pub epochs: Option<usize>,
    pub format: Option<String>,
}

pub fn compare(data: Option<&Path>, flags: CompareFlags, out: Option<&Path>, runs: Option<&Path>, args: &ConfigArgs) -> Result<ExitCode> {
    let data_args = data.map(|d| DataArgs { metadata: d.join("metadata.csv"), features: d.join("features.bin") });
    if let Some(d) = &data_args {
        require_file(&d.metadata)?;
        require_file(&d.features)?;
    }
    for p in [out, runs].into_iter().flatten() {
        require_parent(p)?;
    }
    let extra = [
        opt_flag("compare.seeds", flags.seeds, "--seeds"),
        opt_flag("compare.modes", flags.modes, "--modes"),
        opt_flag("train.epochs", flags.epochs, "--epochs"),
        opt_flag("report.format", flags.format, "--format"),
    ]
    .into_iter()
    .flatten()
    .collect();
    let cfg = resolve(args, Some("train.seed"), extra, Vec::new())?;
    let (meta, features) = match &data_args {
        Some(d) => load_data(d)?,
        None => {
            let c = generate_synthetic(&cfg.synth)?;
            (c.metadata, c.features)
        }
    };
    let cc = CompareConfig {
        train: cfg.train.clone(),
        protocol: cfg.protocol.clone(),
        eval: cfg.eval.clone(),
        probe: cfg.probe.clone(),
        modes: cfg.modes.clone(),
        seeds: cfg.seeds,
    };
    let report = run_compare(&meta, &features, &cc, cfg.execution)?;
    let provenance = cfg.to_pairs();
    let text = match cfg.report_format {
        ReportFormat::Text => report.to_text(&provenance),
        ReportFormat::Csv => report.to_csv(&provenance),
    };
    emit(out, &text)?;
    if let Some(p) = runs {
        write_text(p, &report.runs_text())?;
    }
    Ok(ExitCode::SUCCESS)
}
