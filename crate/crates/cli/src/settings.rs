//! Effective run settings: defaults, then a `key = value` config file, then
//! explicit flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Keys accepted in config files, with their flag spelling.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("data", "--data"),
    ("format", "--format"),
    ("rho", "--rho"),
    ("seed", "--seed"),
    ("features", "--features"),
    ("categories", "--categories"),
    ("rating_max", "--rating-max"),
    ("sigma", "--sigma"),
    ("lambda", "--lambda"),
    ("eta", "--eta"),
    ("epsilon", "--epsilon"),
    ("max_rounds", "--max-rounds"),
    ("batch_size", "--batch-size"),
    ("tolerance", "--tolerance"),
    ("patience", "--patience"),
    ("init_scale", "--init-scale"),
    ("lazy_rows", "--lazy-rows"),
    ("threads", "--threads"),
    ("checkpoint_every", "--checkpoint-every"),
    ("method", "--method"),
    ("k", "--k"),
    ("lr", "--lr"),
    ("reg", "--reg"),
    ("epochs", "--epochs"),
    ("seeds", "--seeds"),
];

fn canonical(key: &str) -> &str {
    match key {
        "F" => "features",
        "C" => "categories",
        "R" => "rating_max",
        other => other,
    }
}

pub fn flag_name(key: &str) -> String {
    KNOWN_KEYS
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, f)| f.to_string())
        .unwrap_or_else(|| format!("--{}", key.replace('_', "-")))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Validation(format!(
                "--config: {origin}:{}: expected 'key = value'",
                i + 1
            )));
        };
        let key = canonical(key.trim());
        if !KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
            return Err(CliError::Validation(format!(
                "--config: {origin}:{}: unknown key '{key}'",
                i + 1
            )));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("--config: cannot read {}: {e}", path.display())))?;
    parse_config_text(&text, &path.display().to_string())
}

/// Layered string settings.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn default_value(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.values.entry(key.to_string()).or_insert_with(|| value.to_string());
        self
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.values.insert(key.to_string(), value.to_string());
        self
    }

    pub fn set_opt<T: Display>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.set(key, v);
        }
        self
    }

    pub fn merge(&mut self, layer: &BTreeMap<String, String>) -> &mut Self {
        for (k, v) in layer {
            self.values.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self
            .raw(key)
            .ok_or_else(|| CliError::Validation(format!("{}: missing required value", flag_name(key))))?;
        raw.parse()
            .map_err(|e| CliError::Validation(format!("{}: invalid value '{raw}': {e}", flag_name(key))))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let raw = self
            .raw(key)
            .ok_or_else(|| CliError::Validation(format!("{}: missing required value", flag_name(key))))?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Validation(format!("{}: invalid value '{s}': {e}", flag_name(key))))
            })
            .collect()
    }

    pub fn effective(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
