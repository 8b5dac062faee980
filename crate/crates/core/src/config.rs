//! Flat `section.key = value` run configuration with typed access,
//! file/flag layering, and an echo for reproducibility.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Known keys and their defaults; `None` means unset until provided.
const SCHEMA: &[(&str, Option<&str>)] = &[
    ("run.seed", None),
    ("data.signals", None),
    ("data.adjacency", None),
    ("data.t_h", Some("12")),
    ("data.t_p", Some("12")),
    ("data.stride", Some("1")),
    ("diffusion.N", Some("100")),
    ("diffusion.beta_1", Some("0.0001")),
    ("diffusion.beta_N", Some("0.2")),
    ("diffusion.schedule", Some("quadratic")),
    ("sample.S", Some("8")),
    ("sample.k", Some("1")),
    ("sample.M", Some("0")),
    ("sample.mode", Some("ddpm")),
    ("loss.future_only", Some("false")),
    ("ugnet.C", Some("32")),
    ("ugnet.K", Some("3")),
    ("ugnet.depth", Some("2")),
    ("ugnet.d_embed", Some("64")),
    ("ugnet.gcn_activation", Some("identity")),
    ("ugnet.channel_growth", Some("false")),
    ("ugnet.no_spatial", Some("false")),
    ("ugnet.no_temporal", Some("false")),
    ("ugnet.no_ustructure", Some("false")),
    ("train.batch_size", Some("8")),
    ("train.lr", Some("0.002")),
    ("train.lr_halve_every", Some("5")),
    ("train.patience", Some("10")),
    ("train.max_epochs", Some("50")),
    ("train.val_s", Some("4")),
    ("train.val_m", Some("20")),
    ("train.val_window_stride", Some("1")),
    ("train.max_steps_per_epoch", Some("0")),
    ("train.clip_norm", Some("1.0")),
    ("synth.V", Some("8")),
    ("synth.rho", Some("0.9")),
    ("synth.lambda", Some("0.4")),
    ("synth.sigma", Some("1.0")),
    ("synth.length", Some("20000")),
    ("eval.checkpoint", None),
    ("eval.split", Some("test")),
    ("eval.window_stride", Some("1")),
    ("eval.max_windows", Some("0")),
    ("eval.windows", Some("")),
    ("bench.M_list", Some("20,40,100")),
    ("bench.k_list", Some("1,2")),
    ("bench.S_list", Some("8")),
    ("bench.repeats", Some("5")),
];

/// Preset bundles applied with `--profile`.
const PROFILES: &[(&str, &[(&str, &str)])] = &[(
    "tiny",
    &[
        ("ugnet.C", "16"),
        ("ugnet.d_embed", "32"),
        ("diffusion.N", "50"),
        ("diffusion.beta_N", "0.3"),
        ("train.max_epochs", "5"),
        ("train.max_steps_per_epoch", "220"),
        ("train.patience", "5"),
        ("train.val_m", "10"),
        ("train.val_window_stride", "64"),
        ("sample.mode", "ddim"),
        ("sample.M", "20"),
        ("sample.k", "2"),
        ("eval.window_stride", "32"),
    ],
)];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        for (key, default) in SCHEMA {
            if let Some(d) = default {
                values.insert((*key).to_string(), (*d).to_string());
            }
        }
        Self { values }
    }
}

impl RunConfig {
    fn known(key: &str) -> bool {
        SCHEMA.iter().any(|(k, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !Self::known(key) {
            return Err(Error::Config(format!("unknown key '{}'", key)));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Layer a config file over the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected 'key = value'", path.display(), lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {}", path.display(), lineno + 1, e)))?;
        }
        Ok(())
    }

    pub fn apply_profile(&mut self, name: &str) -> Result<()> {
        let profile = PROFILES
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown profile '{}'", name)))?;
        for (key, value) in profile.1 {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required key '{}'", key)))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::Config(format!("'{}' must be a non-negative integer", key)))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::Config(format!("'{}' must be an unsigned integer", key)))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::Config(format!("'{}' must be a number", key)))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("'{}' must be a boolean, got '{}'", key, other))),
        }
    }

    pub fn get_path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    /// Comma-separated integer list; empty value gives an empty list.
    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.require(key)?;
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("'{}': bad integer '{}'", key, p)))
            })
            .collect()
    }

    /// Seed is deliberately optional so commands can enforce their own
    /// reproducibility policy.
    pub fn seed(&self) -> Result<Option<u64>> {
        match self.get("run.seed") {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config("'run.seed' must be an unsigned integer".to_string())),
        }
    }

    /// Sorted `key = value` listing of every effective value.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{} = {}\n", k, v));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_present() {
        let c = RunConfig::default();
        assert_eq!(c.get_usize("diffusion.N").unwrap(), 100);
        assert_eq!(c.get_f64("diffusion.beta_1").unwrap(), 1e-4);
        assert_eq!(c.get_usize("sample.S").unwrap(), 8);
        assert!(c.seed().unwrap().is_none());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("diffusion.n", "10").is_err());
        assert!(c.set("bogus.key", "1").is_err());
    }

    #[test]
    fn file_then_override_precedence() {
        let dir = std::env::temp_dir().join(format!("stgcast-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "# comment\ndiffusion.N = 77\ntrain.lr = 0.01\n").unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&path).unwrap();
        assert_eq!(c.get_usize("diffusion.N").unwrap(), 77);
        c.set("diffusion.N", "100").unwrap();
        c.set("diffusion.beta_N", "0.2").unwrap();
        assert_eq!(c.get_usize("diffusion.N").unwrap(), 100);
        assert!(c.echo().contains("diffusion.N = 100"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_file_line_reports_location() {
        let dir = std::env::temp_dir().join(format!("stgcast-cfg2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "diffusion.N 100\n").unwrap();
        let mut c = RunConfig::default();
        let err = c.apply_file(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tiny_profile_applies() {
        let mut c = RunConfig::default();
        c.apply_profile("tiny").unwrap();
        assert_eq!(c.get_usize("ugnet.C").unwrap(), 16);
        assert_eq!(c.get_usize("diffusion.N").unwrap(), 50);
        assert!(c.apply_profile("huge").is_err());
    }

    #[test]
    fn list_parsing() {
        let c = RunConfig::default();
        assert_eq!(c.get_usize_list("bench.M_list").unwrap(), vec![20, 40, 100]);
        assert_eq!(c.get_usize_list("eval.windows").unwrap(), Vec::<usize>::new());
    }
}
