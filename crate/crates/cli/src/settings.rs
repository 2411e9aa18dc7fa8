//! Run settings assembled from three layers, weakest first: a plain-text
//! config file of `key = value` lines, the SWINNOW_SEED environment
//! variable, then `--set key=value` flags. Every key is validated against a
//! fixed vocabulary so typos die loudly instead of silently using defaults.

use std::collections::BTreeMap;
use std::path::Path;

use swinnow_core::attention::WindowSpec;
use swinnow_core::data::SynthParams;
use swinnow_core::model::ModelConfig;
use swinnow_core::train::RunConfig;
use swinnow_core::{Error, Result};

/// Every accepted settings key with its meaning; doubles as the help text
/// printed on an unknown-key error.
pub const KEYS: &[(&str, &str)] = &[
    ("in_channels", "model input channels: 4, 7, 16 or 19"),
    ("embed_dim", "stage-1 token width C"),
    ("patch_t", "patch extent along time (default 1)"),
    ("patch_hw", "patch extent along height and width"),
    ("t_in", "input frames per sample"),
    ("t_out", "predicted frames per sample"),
    ("enc_depths", "encoder blocks per stage, e.g. 4,4,4 (even numbers)"),
    ("dec_depths", "decoder blocks per stage, e.g. 4,4,4 (even numbers)"),
    ("heads", "attention heads per stage, e.g. 3,6,12"),
    ("window", "attention window t,h,w (default 1,7,7)"),
    ("shift", "cyclic shift t,h,w (default 0,2,2)"),
    ("weight_decay", "decoupled Adam weight decay"),
    ("seed", "master seed for weights, sampling and shuffling"),
    ("data_seed", "synthetic-world seed (defaults to seed)"),
    ("height", "synthetic domain height"),
    ("width", "synthetic domain width"),
    ("blobs", "moving blobs per synthetic world"),
    ("velocity", "max blob speed in pixels per frame"),
    ("diffusion", "blob spreading rate"),
    ("missing_prob", "chance a target pixel is masked out"),
    ("lr0", "initial learning rate"),
    ("patience", "epochs of no improvement tolerated before halving"),
    ("factor", "learning-rate multiplier on plateau"),
    ("batch_size", "samples per optimizer step"),
    ("epochs", "training epochs"),
    ("train_samples", "training split size"),
    ("val_samples", "validation split size (0 disables validation)"),
    ("test_samples", "test split size (gen and eval)"),
    ("augment", "true/false: random flips and quarter turns in training"),
];

#[derive(Debug, Default, Clone)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    /// Layers file, environment and flag overrides in precedence order.
    pub fn gather(config: Option<&Path>, sets: &[String]) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            s.apply_file(&text, &path.display().to_string())?;
        }
        if let Ok(seed) = std::env::var("SWINNOW_SEED") {
            seed.trim().parse::<u64>().map_err(|_| {
                Error::config(format!("SWINNOW_SEED must be an unsigned integer, got {seed:?}"))
            })?;
            s.map.insert("seed".into(), seed.trim().to_string());
        }
        for kv in sets {
            s.apply_pair(kv, "--set")?;
        }
        Ok(s)
    }

    fn apply_file(&mut self, text: &str, origin: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_pair(line, &format!("{origin}:{}", ln + 1))?;
        }
        Ok(())
    }

    fn apply_pair(&mut self, kv: &str, origin: &str) -> Result<()> {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::config(format!("{origin}: expected key = value, got {kv:?}"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !KEYS.iter().any(|(k, _)| *k == key) {
            let known: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
            return Err(Error::config(format!(
                "{origin}: unknown key {key:?}; known keys: {}",
                known.join(", ")
            )));
        }
        if value.is_empty() {
            return Err(Error::config(format!("{origin}: key {key:?} has an empty value")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("key {key:?} wants {what}, got {v:?}"))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse::<usize>(key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse::<u64>(key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse::<f64>(key, "a number")?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::config(format!("key {key:?} wants true/false, got {v:?}"))),
        }
    }

    fn triple(&self, key: &str) -> Result<Option<[usize; 3]>> {
        let Some(v) = self.map.get(key) else { return Ok(None) };
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::config(format!("key {key:?} wants three integers like 1,7,7, got {v:?}"))
            })?;
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "key {key:?} wants exactly three comma-separated values, got {v:?}"
            )));
        }
        Ok(Some([parts[0], parts[1], parts[2]]))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let in_channels = self.usize_or("in_channels", 4)?;
        let embed_dim = self.usize_or("embed_dim", 16)?;
        let patch_hw = self.usize_or("patch_hw", 2)?;
        let mut cfg = ModelConfig::new(in_channels, embed_dim, patch_hw);
        cfg.patch[0] = self.usize_or("patch_t", cfg.patch[0])?;
        cfg.t_in = self.usize_or("t_in", cfg.t_in)?;
        cfg.t_out = self.usize_or("t_out", cfg.t_out)?;
        if let Some(d) = self.triple("enc_depths")? {
            cfg.enc_depths = d.to_vec();
        }
        if let Some(d) = self.triple("dec_depths")? {
            cfg.dec_depths = d.to_vec();
        }
        if let Some(h) = self.triple("heads")? {
            cfg.heads = h.to_vec();
        }
        let window = self.triple("window")?.unwrap_or(cfg.window.window);
        let shift = self.triple("shift")?.unwrap_or(cfg.window.shift);
        cfg.window = WindowSpec::new(window, shift)?;
        cfg.weight_decay = self.f64_or("weight_decay", cfg.weight_decay)?;
        cfg.seed = self.u64_or("seed", cfg.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_params(&self, model: &ModelConfig) -> Result<SynthParams> {
        let height = self.usize_or("height", 64)?;
        let width = self.usize_or("width", 64)?;
        let seed = self.u64_or("data_seed", self.u64_or("seed", 0)?)?;
        let mut p = SynthParams::new(height, width, seed);
        p.t_in = model.t_in;
        p.t_out = model.t_out;
        p.blobs = self.usize_or("blobs", p.blobs)?;
        p.velocity = self.f64_or("velocity", p.velocity)?;
        p.diffusion = self.f64_or("diffusion", p.diffusion)?;
        p.missing_prob = self.f64_or("missing_prob", p.missing_prob)?;
        p.validate()?;
        Ok(p)
    }

    pub fn run_config(&self, out_dir: &Path) -> Result<RunConfig> {
        let model = self.model_config()?;
        let synth = self.synth_params(&model)?;
        let mut run = RunConfig::new(model, synth, out_dir);
        run.lr0 = self.f64_or("lr0", run.lr0)?;
        run.patience = self.usize_or("patience", run.patience)?;
        run.factor = self.f64_or("factor", run.factor)?;
        run.batch_size = self.usize_or("batch_size", run.batch_size)?;
        run.epochs = self.usize_or("epochs", run.epochs)?;
        run.train_samples = self.usize_or("train_samples", run.train_samples)?;
        run.val_samples = self.usize_or("val_samples", run.val_samples)?;
        run.augment = self.bool_or("augment", run.augment)?;
        run.validate()?;
        Ok(run)
    }

    pub fn test_samples(&self) -> Result<usize> {
        self.usize_or("test_samples", 16)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_override_file_values() {
        let f = write_config("embed_dim = 32\nseed = 7\n# comment\n\nheight=32\n");
        let s = Settings::gather(Some(f.path()), &["embed_dim=48".into()]).unwrap();
        let cfg = s.model_config().unwrap();
        assert_eq!(cfg.embed_dim, 48);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_config_errors() {
        let f = write_config("embed_dmi = 32\n");
        let err = Settings::gather(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        assert!(err.to_string().contains("embed_dim"), "should list known keys: {err}");

        let f = write_config("just a line\n");
        let err = Settings::gather(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let s = Settings::gather(None, &["epochs=three".into()]).unwrap();
        let err = s.run_config(Path::new("/tmp/x")).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
        let s = Settings::gather(None, &["window=7,7".into()]).unwrap();
        let err = s.model_config().unwrap_err();
        assert!(err.to_string().contains("three"), "{err}");
    }

    #[test]
    fn defaults_materialize_a_valid_run() {
        let s = Settings::gather(None, &[]).unwrap();
        let run = s.run_config(Path::new("/tmp/run")).unwrap();
        assert_eq!(run.model.embed_dim, 16);
        assert_eq!(run.model.t_in, run.synth.t_in);
        assert_eq!(run.batch_size, 4);
    }

    #[test]
    fn data_seed_splits_off_from_the_master_seed() {
        let s = Settings::gather(None, &["seed=9".into(), "data_seed=10".into()]).unwrap();
        let m = s.model_config().unwrap();
        let p = s.synth_params(&m).unwrap();
        assert_eq!(m.seed, 9);
        assert_eq!(p.seed, 10);
    }
}
