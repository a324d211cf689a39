//! Plain-text key=value configuration: one `key=value` per line, `#` starts
//! a comment, blank lines ignored. Consumers take the keys they understand;
//! anything left over is rejected by name, so typos fail loudly.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::dsprites::{FactorSel, LatticeSpec, FACTOR_NAMES, FACTOR_SIZES};
use crate::error::{Error, Result};

/// Parsed config with take-and-check-leftovers semantics.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", ln + 1))
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if map.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("duplicate key {k}")));
            }
        }
        Ok(KvConfig { map })
    }

    pub fn load(path: &Path) -> Result<KvConfig> {
        KvConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    /// Takes and parses a key, falling back to `default` when absent.
    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: cannot parse value {v:?}"))),
        }
    }

    pub fn take_required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self
            .map
            .remove(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))?;
        v.parse()
            .map_err(|_| Error::Config(format!("key {key}: cannot parse value {v:?}")))
    }

    /// Errors on any key nobody consumed, naming the first offender.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.map.keys().next() {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        Ok(())
    }
}

/// One factor selection: `all`, a single label, or `start:stop:step`
/// (stop exclusive).
pub fn parse_factor_sel(value: &str, size: usize) -> Result<FactorSel> {
    if value == "all" {
        return Ok(FactorSel::all(size));
    }
    let parts: Vec<&str> = value.split(':').collect();
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Config(format!("bad factor selection component {s:?}")))
    };
    match parts.as_slice() {
        [v] => Ok(FactorSel::fixed(parse(v)?)),
        [start, stop, step] => {
            let sel = FactorSel {
                start: parse(start)?,
                stop: parse(stop)?,
                step: parse(step)?,
            };
            if sel.step == 0 || sel.start >= sel.stop || sel.stop > size {
                return Err(Error::Config(format!(
                    "factor selection {value:?} out of range (size {size})"
                )));
            }
            Ok(sel)
        }
        _ => Err(Error::Config(format!(
            "factor selection must be 'all', a label, or start:stop:step, got {value:?}"
        ))),
    }
}

/// Consumes `preset` plus the five factor keys from a config. Presets:
/// `full` (default) and `desk256`; explicit factor keys override the preset
/// axis by axis.
pub fn take_lattice(cfg: &mut KvConfig) -> Result<LatticeSpec> {
    let preset = cfg.take("preset").unwrap_or_else(|| "full".into());
    let mut spec = match preset.as_str() {
        "full" => LatticeSpec::default(),
        "desk256" => LatticeSpec::desk_256(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (expected full or desk256)"
            )))
        }
    };
    for (i, name) in FACTOR_NAMES.iter().enumerate() {
        if let Some(v) = cfg.take(name) {
            spec.sels[i] = parse_factor_sel(&v, FACTOR_SIZES[i])?;
        }
    }
    Ok(spec)
}

/// Renders a lattice spec back to the config syntax, for resolved echoes.
pub fn lattice_to_keys(spec: &LatticeSpec) -> Vec<(String, String)> {
    spec.sels
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = if *s == FactorSel::all(FACTOR_SIZES[i]) {
                "all".to_string()
            } else if s.step == 1 && s.stop == s.start + 1 {
                s.start.to_string()
            } else {
                format!("{}:{}:{}", s.start, s.stop, s.step)
            };
            (FACTOR_NAMES[i].to_string(), v)
        })
        .collect()
}

/// Writes the fully-resolved settings beside a run's outputs.
pub fn write_resolved(dir: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut sorted: Vec<&(String, String)> = pairs.iter().collect();
    sorted.sort();
    let mut text = String::from("# resolved configuration\n");
    for (k, v) in sorted {
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config.txt"), text)?;
    Ok(())
}
