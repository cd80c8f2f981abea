//! Flat `key = value` experiment configuration with layered overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::train::{Preset, TrainConfig};

/// File name of the effective configuration written into output directories.
pub const ECHO_FILE: &str = "config.echo";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every option of every command in one flat namespace.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub metrics: MetricsConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::with_preset(Preset::Desk)
    }
}

pub fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Paper => "paper",
        Preset::Desk => "desk",
    }
}

pub fn parse_preset(s: &str) -> Result<Preset> {
    match s.trim() {
        "paper" => Ok(Preset::Paper),
        "desk" => Ok(Preset::Desk),
        other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or desk)"))),
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got {line:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("{origin}:{}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

/// Converts override text into JSON, guided by the type of the current value.
fn parse_value(current: &Value, text: &str) -> Value {
    let t = text.trim();
    if t.eq_ignore_ascii_case("none") || t.eq_ignore_ascii_case("null") {
        return Value::Null;
    }
    match current {
        Value::String(_) => Value::String(t.to_string()),
        Value::Array(_) => Value::Array(
            t.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(scalar)
                .collect(),
        ),
        _ => scalar(t),
    }
}

fn scalar(t: &str) -> Value {
    match t {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        _ => {}
    }
    if let Ok(i) = t.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = t.parse::<f64>() {
        if f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15 {
            return Value::from(f as i64);
        }
        if let Some(n) = serde_json::Number::from_f64(f) {
            return Value::Number(n);
        }
    }
    Value::String(t.to_string())
}

impl ExperimentConfig {
    pub fn with_preset(preset: Preset) -> Self {
        ExperimentConfig {
            preset,
            train: TrainConfig::preset(preset),
            synth: SynthConfig::default(),
            metrics: MetricsConfig::default(),
            paths: Paths::default(),
        }
    }

    fn sections(&self) -> Result<[Map<String, Value>; 4]> {
        Ok([
            object(serde_json::to_value(&self.train)?),
            object(serde_json::to_value(&self.synth)?),
            object(serde_json::to_value(&self.metrics)?),
            object(serde_json::to_value(&self.paths)?),
        ])
    }

    /// Applies overrides in order; later entries win. `preset` is only
    /// honored by [`ExperimentConfig::resolve`].
    pub fn apply(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let mut sections = self.sections()?;
        for (key, text) in overrides {
            if key == "preset" {
                continue;
            }
            let section = sections
                .iter_mut()
                .find(|s| s.contains_key(key))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            let v = parse_value(&section[key], text);
            section.insert(key.clone(), v);
        }
        let [t, s, m, p] = sections;
        let bad = |key: &str, e: serde_json::Error| Error::Config(format!("{key}: {e}"));
        self.train = serde_json::from_value(Value::Object(t)).map_err(|e| bad("train", e))?;
        self.synth = serde_json::from_value(Value::Object(s)).map_err(|e| bad("synth", e))?;
        self.metrics = serde_json::from_value(Value::Object(m)).map_err(|e| bad("metrics", e))?;
        self.paths = serde_json::from_value(Value::Object(p)).map_err(|e| bad("paths", e))?;
        Ok(())
    }

    /// Preset defaults, then the config file, then flag overrides.
    pub fn resolve(preset_flag: Option<Preset>, file: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let file_kv = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                parse_kv(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        let file_preset = file_kv
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| parse_preset(v))
            .transpose()?;
        let preset = preset_flag.or(file_preset).unwrap_or(Preset::Desk);
        let mut cfg = ExperimentConfig::with_preset(preset);
        cfg.apply(&file_kv)?;
        cfg.apply(flags)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// The effective configuration as `key = value` lines.
    pub fn echo(&self) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", preset_name(self.preset));
        let names = ["train", "synth", "metrics", "paths"];
        for (name, section) in names.iter().zip(self.sections()?) {
            let _ = writeln!(s, "\n# {name}");
            for (k, v) in section {
                let _ = writeln!(s, "{k} = {}", format_value(&v));
            }
        }
        Ok(s)
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
        let p = dir.join(ECHO_FILE);
        fs::write(&p, self.echo()?).map_err(|e| Error::from(e).at(&p))?;
        Ok(p)
    }
}

/// Shortest of plain and scientific notation, so `10000.0` reads `1e4`.
pub fn format_f64(v: f64) -> String {
    let plain = format!("{v}");
    let sci = format!("{v:e}");
    if sci.len() < plain.len() {
        sci
    } else {
        plain
    }
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) if n.is_f64() => format_f64(n.as_f64().unwrap_or(f64::NAN)),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(format_value).collect::<Vec<_>>().join(","),
        Value::Object(_) => v.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainMode;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn f64_formatting() {
        assert_eq!(format_f64(1e4), "1e4");
        assert_eq!(format_f64(1e5), "1e5");
        assert_eq!(format_f64(1e-4), "1e-4");
        assert_eq!(format_f64(0.5), "0.5");
        assert_eq!(format_f64(2.2), "2.2");
    }

    #[test]
    fn overrides_are_typed_and_ordered() {
        let mut c = ExperimentConfig::default();
        c.apply(&kv(&[
            ("alpha", "0"),
            ("batch_size", "1e1"),
            ("mode", "no_dmse"),
            ("width", "1/8"),
            ("lr_decay_every", "100"),
            ("stops", "-1, 0, 1"),
            ("size", "none"),
            ("split", "123"),
            ("alpha", "2.5"),
        ]))
        .unwrap();
        assert_eq!(c.train.alpha, 2.5);
        assert_eq!(c.train.batch_size, 10);
        assert_eq!(c.train.mode, TrainMode::NoDmse);
        assert_eq!(c.train.width.to_string(), "1/8");
        assert_eq!(c.train.lr_decay_every, Some(100));
        assert_eq!(c.metrics.stops, vec![-1, 0, 1]);
        assert_eq!(c.synth.size, None);
        assert_eq!(c.synth.split, "123");
        c.apply(&kv(&[("lr_decay_every", "none")])).unwrap();
        assert_eq!(c.train.lr_decay_every, None);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut c = ExperimentConfig::default();
        assert!(c.apply(&kv(&[("lamda", "1")])).is_err());
        assert!(c.apply(&kv(&[("batch_size", "four")])).is_err());
        assert!(parse_kv("lambda 1", "x").is_err());
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = ExperimentConfig::with_preset(Preset::Paper);
        c.apply(&kv(&[("l_white", "3.5"), ("data", "/tmp/d")])).unwrap();
        let text = c.echo().unwrap();
        assert!(text.contains("lambda = 1e4\n") && text.contains("alpha = 1e5\n"));
        assert!(text.contains("batch_size = 6\n") && text.contains("lr0 = 1e-4\n"));
        let back = parse_kv(&text, "echo").unwrap();
        let mut d = ExperimentConfig::with_preset(parse_preset(&back[0].1).unwrap());
        d.apply(&back).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn resolve_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("exp.cfg");
        fs::write(&f, "# experiment\npreset = paper\nlambda = 5\nseed = 3 # trailing\n").unwrap();
        let c = ExperimentConfig::resolve(None, Some(&f), &kv(&[("lambda", "7")])).unwrap();
        assert_eq!(c.preset, Preset::Paper);
        assert_eq!((c.train.lambda, c.train.seed, c.train.batch_size), (7.0, 3, 6));
        let d = ExperimentConfig::resolve(Some(Preset::Desk), Some(&f), &[]).unwrap();
        assert_eq!((d.train.lambda, d.train.batch_size), (5.0, 4));
    }
}
