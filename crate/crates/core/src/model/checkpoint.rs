//! Text checkpoint container.
//!
//! ```text
//! # langdis checkpoint v1
//! model.feat_dim = 16
//! ...                          (model config, then free-form metadata)
//! param encoder.0.weight 16 64
//! <one line per row, values in shortest round-trip exponent form>
//! ...
//! ```
//!
//! Values are written with `{:e}`, which round-trips `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "# langdis checkpoint v1";

/// Model parameters plus the metadata needed to reproduce them
/// (effective configuration, seed, step counter).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelBundle,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: ModelBundle, meta: Vec<(String, String)>) -> Self {
        Checkpoint { model, meta }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let c = &self.model.config;
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in [
            ("feat_dim", c.feat_dim),
            ("hidden_dim", c.hidden_dim),
            ("embed_dim", c.embed_dim),
            ("num_speakers", c.num_speakers),
            ("num_languages", c.num_languages),
            ("encoder_layers", c.encoder_layers),
            ("language_hidden", c.language_hidden),
        ] {
            let _ = writeln!(out, "model.{k} = {v}");
        }
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k} = {v}");
        }
        self.model.visit(|name, _, t| {
            let _ = writeln!(out, "param {name} {} {}", t.rows(), t.cols());
            for r in 0..t.rows() {
                let row: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:e}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        });
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(Error::parse(source, 1, "missing checkpoint header")),
        }
        let mut config = ModelConfig::default();
        let mut seen = 0usize;
        let mut meta = Vec::new();
        while let Some(&(i, line)) = lines.peek() {
            if line.starts_with("param ") {
                break;
            }
            lines.next();
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::parse(source, i + 1, format!("expected `key = value`, got `{line}`")))?;
            if let Some(field) = k.strip_prefix("model.") {
                let n: usize = v
                    .parse()
                    .map_err(|_| Error::parse(source, i + 1, format!("bad count for {k}: `{v}`")))?;
                let slot = match field {
                    "feat_dim" => &mut config.feat_dim,
                    "hidden_dim" => &mut config.hidden_dim,
                    "embed_dim" => &mut config.embed_dim,
                    "num_speakers" => &mut config.num_speakers,
                    "num_languages" => &mut config.num_languages,
                    "encoder_layers" => &mut config.encoder_layers,
                    "language_hidden" => &mut config.language_hidden,
                    _ => return Err(Error::parse(source, i + 1, format!("unknown model key `{k}`"))),
                };
                *slot = n;
                seen += 1;
            } else {
                meta.push((k.to_owned(), v.to_owned()));
            }
        }
        if seen != 7 {
            return Err(Error::parse(source, 1, "incomplete model configuration"));
        }

        let mut model = ModelBundle::init(config, 0)?;
        let mut failure: Option<Error> = None;
        model.visit_mut(|name, _, t| {
            if failure.is_some() {
                return;
            }
            if let Err(e) = read_param(&mut lines, name, t, source) {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some((i, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(source, i + 1, format!("trailing content `{l}`")));
        }
        Ok(Checkpoint { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_text(&text, &path.display().to_string())
    }
}

fn read_param<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    name: &str,
    t: &mut Tensor,
    source: &str,
) -> Result<()> {
    let (i, header) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 0, format!("missing parameter {name}")))?;
    let parts: Vec<&str> = header.split(' ').collect();
    let want_rows = t.rows().to_string();
    let want_cols = t.cols().to_string();
    if parts.len() != 4 || parts[0] != "param" || parts[1] != name || parts[2] != want_rows || parts[3] != want_cols {
        return Err(Error::parse(
            source,
            i + 1,
            format!("expected `param {name} {want_rows} {want_cols}`, got `{header}`"),
        ));
    }
    for r in 0..t.rows() {
        let (i, line) = lines
            .next()
            .ok_or_else(|| Error::parse(source, 0, format!("truncated parameter {name}")))?;
        let values: Vec<&str> = line.split(' ').collect();
        if values.len() != t.cols() {
            return Err(Error::parse(
                source,
                i + 1,
                format!("{name} row {r}: expected {} values, got {}", t.cols(), values.len()),
            ));
        }
        for (c, v) in values.iter().enumerate() {
            let x: f64 = v
                .parse()
                .map_err(|_| Error::parse(source, i + 1, format!("bad number `{v}`")))?;
            t.set(r, c, x);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelBundle {
        let cfg = ModelConfig {
            feat_dim: 3,
            hidden_dim: 4,
            embed_dim: 2,
            num_speakers: 5,
            num_languages: 3,
            encoder_layers: 2,
            language_hidden: 3,
        };
        let mut m = ModelBundle::init(cfg, 77).unwrap();
        // awkward values: subnormal, negative zero, large exponents
        m.proto_bias.data_mut()[0] = -0.0;
        m.encoder[0].bias.data_mut()[0] = 5e-324;
        m.encoder[0].bias.data_mut()[1] = 1.0 / 3.0;
        m.encoder[0].bias.data_mut()[2] = -1.7976931348623157e308;
        m
    }

    #[test]
    fn text_roundtrip_is_bit_exact() {
        let ck = Checkpoint::new(
            model(),
            vec![("train.seed".into(), "7".into()), ("rng.step".into(), "120".into())],
        );
        let text = ck.to_text();
        let back = Checkpoint::from_text(&text, "mem").unwrap();
        assert_eq!(back.meta, ck.meta);
        let mut a = Vec::new();
        ck.model.visit(|_, _, t| a.extend(t.to_bits()));
        let mut b = Vec::new();
        back.model.visit(|_, _, t| b.extend(t.to_bits()));
        assert_eq!(a, b);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(Checkpoint::from_text("nope", "m"), Err(Error::Parse { line: 1, .. })));
        let text = Checkpoint::new(model(), vec![]).to_text();
        let broken = text.replacen("param pool.context 4 1", "param pool.context 4 2", 1);
        assert!(matches!(Checkpoint::from_text(&broken, "m"), Err(Error::Parse { .. })));
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated, "m").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(model(), vec![("k".into(), "v".into())]);
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }
}
