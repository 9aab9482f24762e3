//! Run configuration: command-line flags over an optional `key=value` file
//! over built-in defaults. Every resolved value is kept as text so it can be
//! echoed into output artifacts.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// Parses a config file: one `key = value` per line, `#` comments, blank
/// lines ignored. Underscores in keys are read as dashes.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!(
                "config line {}: duplicate key '{key}'",
                n + 1
            )));
        }
    }
    Ok(out)
}

/// Resolves parameters for one command and records what was resolved.
#[derive(Debug)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                parse_config_text(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
        })
    }

    #[cfg(test)]
    pub fn from_map(file: BTreeMap<String, String>) -> Self {
        Self {
            file,
            resolved: BTreeMap::new(),
        }
    }

    /// `flag`, else the file's value for `key`, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(text) => text.parse().map_err(|e| {
                    CliError::Usage(format!("config key '{key}': cannot parse '{text}': {e}"))
                })?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`Resolver::get`] without a default; `None` when unset everywhere.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(text) => Some(text.parse().map_err(|e| {
                    CliError::Usage(format!("config key '{key}': cannot parse '{text}': {e}"))
                })?),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    pub fn path(
        &mut self,
        key: &str,
        flag: Option<PathBuf>,
        default: &str,
    ) -> Result<PathBuf, CliError> {
        let p = self.get(
            key,
            flag.map(|p| p.display().to_string()),
            default.to_string(),
        )?;
        Ok(PathBuf::from(p))
    }

    /// Fails on file keys the command never asked for, then returns the
    /// resolved configuration.
    pub fn finish(self, command: &str) -> Result<RunConfig, CliError> {
        let unknown: Vec<&String> = self
            .file
            .keys()
            .filter(|k| !self.resolved.contains_key(*k))
            .collect();
        if let Some(k) = unknown.first() {
            return Err(CliError::Usage(format!(
                "config key '{k}' is not a parameter of '{command}'"
            )));
        }
        let mut values = self.resolved;
        values.insert("command".into(), command.into());
        Ok(RunConfig { values })
    }
}

/// Fully resolved parameters, sorted by key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn lines(&self) -> impl Iterator<Item = String> + '_ {
        self.values.iter().map(|(k, v)| format!("{k}={v}"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}

/// A float that also accepts powers of two written `2^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pow2Float(pub f64);

impl FromStr for Pow2Float {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let v = match s.split_once('^') {
            Some((base, exp)) => {
                let b: f64 = base
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad base in '{s}'"))?;
                let e: i32 = exp
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad exponent in '{s}'"))?;
                b.powi(e)
            }
            None => s.parse().map_err(|_| format!("not a number: '{s}'"))?,
        };
        Ok(Pow2Float(v))
    }
}

impl Display for Pow2Float {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let e = self.0.log2();
        if self.0 > 0.0 && e.fract() == 0.0 && e.abs() < 64.0 {
            write!(f, "2^{}", e as i32)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Comma-separated list of floats.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatList(pub Vec<f64>);

impl FromStr for FloatList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("not a number: '{x}'"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(FloatList)
    }
}

impl Display for FloatList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_with_comments() {
        let m = parse_config_text("# run\nalpha = 0.8\n\ndt_min=2^-8  # finest\n").unwrap();
        assert_eq!(m["alpha"], "0.8");
        assert_eq!(m["dt-min"], "2^-8");
        assert!(parse_config_text("alpha").is_err());
        assert!(parse_config_text("a=1\na=2").is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = parse_config_text("alpha=0.8\nomega=3").unwrap();
        let mut r = Resolver::from_map(file);
        assert_eq!(r.get("alpha", Some(0.4), 0.6).unwrap(), 0.4);
        assert_eq!(r.get("omega", None, 5.0).unwrap(), 3.0);
        assert_eq!(r.get("steps", None::<usize>, 15).unwrap(), 15);
        let cfg = r.finish("edit").unwrap();
        assert_eq!(
            cfg.lines().collect::<Vec<_>>(),
            ["alpha=0.4", "command=edit", "omega=3", "steps=15"]
        );
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let mut r = Resolver::from_map(parse_config_text("alpah=0.8").unwrap());
        r.get("alpha", None, 0.6).unwrap();
        assert!(matches!(r.finish("edit"), Err(CliError::Usage(_))));
    }

    #[test]
    fn pow2_syntax() {
        assert_eq!("2^-8".parse::<Pow2Float>().unwrap().0, 1.0 / 256.0);
        assert_eq!("0.125".parse::<Pow2Float>().unwrap().0, 0.125);
        assert_eq!(Pow2Float(0.125).to_string(), "2^-3");
        assert_eq!(Pow2Float(0.3).to_string(), "0.3");
        assert!("2^x".parse::<Pow2Float>().is_err());
    }

    #[test]
    fn float_lists() {
        let l: FloatList = "0.2, 0.4,1".parse().unwrap();
        assert_eq!(l.0, vec![0.2, 0.4, 1.0]);
        assert_eq!(l.to_string(), "0.2,0.4,1");
    }
}
