//! Layered run configuration: command-line flags override config-file
//! values, which override built-in defaults. The fully resolved map is
//! echoed to `run.json` so any artifact directory can be regenerated from
//! it alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use solalt::{Error, Result};

/// A sectioned key-value config file: `[section]` headers (one per
/// subcommand), `key = value` lines, `#` comments, blank lines ignored.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = crate::commands::read_text(path)?;
        ConfigFile::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::Parse { line: i + 1, msg: "empty section name".into() });
                }
                sections.entry(name.to_owned()).or_default();
                current = Some(name.to_owned());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `key = value` or `[section]`, got {line:?}"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
            }
            let Some(section) = &current else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("key {key:?} appears before any [section] header"),
                });
            };
            sections
                .get_mut(section)
                .unwrap()
                .insert(key.to_owned(), value.trim().to_owned());
        }
        Ok(ConfigFile { sections })
    }

    fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections.get(name)
    }
}

/// What resolution falls back to when neither a flag nor a config-file
/// value supplies the key.
pub enum Fallback {
    /// Resolution fails with a data error naming the key.
    Required,
    /// The built-in default is used.
    Default(String),
    /// The key is simply absent from the resolved settings.
    Optional,
}

/// One resolvable setting: its name, the flag value (if the flag was
/// given, already rendered to a string), and the fallback.
pub struct KeySpec {
    pub key: &'static str,
    pub flag: Option<String>,
    pub fallback: Fallback,
}

pub fn req(key: &'static str, flag: Option<String>) -> KeySpec {
    KeySpec { key, flag, fallback: Fallback::Required }
}

pub fn def(key: &'static str, flag: Option<String>, default: impl ToString) -> KeySpec {
    KeySpec { key, flag, fallback: Fallback::Default(default.to_string()) }
}

pub fn opt(key: &'static str, flag: Option<String>) -> KeySpec {
    KeySpec { key, flag, fallback: Fallback::Optional }
}

/// Resolve one subcommand's settings. Unknown keys in the command's config
/// section are rejected so typos fail loudly instead of silently falling
/// back to defaults.
pub fn resolve(
    command: &str,
    file: &ConfigFile,
    keys: Vec<KeySpec>,
) -> Result<BTreeMap<String, String>> {
    if let Some(section) = file.section(command) {
        for k in section.keys() {
            if !keys.iter().any(|spec| spec.key == k) {
                return Err(Error::domain(format!(
                    "unknown setting {k:?} in [{command}] config section"
                )));
            }
        }
    }
    let mut out = BTreeMap::new();
    for spec in keys {
        let from_file = file.section(command).and_then(|s| s.get(spec.key)).cloned();
        let value = match (spec.flag.or(from_file), spec.fallback) {
            (Some(v), _) => Some(v),
            (None, Fallback::Default(d)) => Some(d),
            (None, Fallback::Optional) => None,
            (None, Fallback::Required) => {
                let flag_name = spec.key.replace('_', "-");
                return Err(Error::domain(format!(
                    "missing required setting `{}` for `{command}`: pass --{flag_name} \
                     or set it under [{command}] in the config file",
                    spec.key
                )));
            }
        };
        if let Some(v) = value {
            out.insert(spec.key.to_owned(), v);
        }
    }
    Ok(out)
}

/// Typed accessors over a resolved settings map. Parse failures are data
/// errors naming the offending key and value.
pub struct Settings(pub BTreeMap<String, String>);

impl Settings {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::contract(format!("resolved settings lack `{key}`")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.str(key)?))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<T> {
        let raw = self.str(key)?;
        raw.parse().map_err(|_| {
            Error::domain(format!("setting `{key}` = {raw:?} is not a valid {kind}"))
        })
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parsed(key, "number")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key, "non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key, "non-negative integer")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key, "boolean (true/false)")
    }
}

/// The record every run writes next to its artifacts: tool version, the
/// subcommand, and the fully resolved settings. Output locations are not
/// part of it, so `replay` can rebuild the same artifacts anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub tool_version: String,
    pub command: String,
    pub settings: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(command: &str, settings: BTreeMap<String, String>) -> RunConfig {
        RunConfig {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            settings,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = crate::commands::read_text(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::domain(format!("run file {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> Option<String> {
        None
    }

    #[test]
    fn config_file_parses_sections_comments_and_blanks() {
        let f = ConfigFile::parse(
            "# pipeline defaults\n\n[prep]\nper_bin = 12\nseed = 7\n\n[train-base]\nlr = 0.01\n",
        )
        .unwrap();
        assert_eq!(f.section("prep").unwrap()["per_bin"], "12");
        assert_eq!(f.section("train-base").unwrap()["lr"], "0.01");
        assert!(f.section("sample").is_none());
    }

    #[test]
    fn config_file_rejects_malformed_lines() {
        let e = ConfigFile::parse("[prep]\nnot a pair\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = ConfigFile::parse("orphan = 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = ConfigFile::parse("[]\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let f = ConfigFile::parse("[prep]\nper_bin = 12\nseed = 7\n").unwrap();
        let m = resolve(
            "prep",
            &f,
            vec![
                def("per_bin", Some("99".into()), 500),
                req("seed", none()),
                def("width", none(), 32),
            ],
        )
        .unwrap();
        assert_eq!(m["per_bin"], "99");
        assert_eq!(m["seed"], "7");
        assert_eq!(m["width"], "32");
    }

    #[test]
    fn missing_required_setting_names_key_and_flag() {
        let e = resolve("prep", &ConfigFile::default(), vec![req("seed", none())]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("`seed`") && msg.contains("--seed"), "{msg}");
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let f = ConfigFile::parse("[prep]\nper_bim = 12\n").unwrap();
        let e = resolve("prep", &f, vec![def("per_bin", none(), 500)]).unwrap_err();
        assert!(e.to_string().contains("per_bim"), "{e}");
    }

    #[test]
    fn optional_keys_are_simply_absent() {
        let m = resolve("label", &ConfigFile::default(), vec![opt("bins", none())]).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn settings_accessors_report_bad_values() {
        let mut map = BTreeMap::new();
        map.insert("epochs".to_owned(), "five".to_owned());
        let s = Settings(map);
        let e = s.usize("epochs").unwrap_err();
        assert!(e.to_string().contains("five"), "{e}");
        assert!(s.get("absent").is_none());
    }

    #[test]
    fn run_config_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut settings = BTreeMap::new();
        settings.insert("seed".to_owned(), "7".to_owned());
        settings.insert("per_bin".to_owned(), "12".to_owned());
        let rc = RunConfig::new("prep", settings);
        rc.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        RunConfig::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }
}
