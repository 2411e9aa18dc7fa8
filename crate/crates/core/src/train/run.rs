//! The training loop: shuffled minibatches, Adam, plateau-driven learning
//! rate, JSONL metrics, and best-checkpoint persistence. Everything is keyed
//! off the run's seeds, so two identical configurations produce identical
//! logs apart from wall-clock timings.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_matching, write_snapshot, Snapshot};
use crate::data::{augment, draw_augment, generate_sequence, load_split, make_batch};
use crate::data::{Sample, SynthParams};
use crate::error::{Error, Result};
use crate::metric::{per_variable_scores, persistence_baseline, training_loss, variable_names};
use crate::model::{Model, ModelConfig};
use crate::rng::Stream;
use crate::tensor::{no_grad, Scalar};
use crate::train::adam::Adam;
use crate::train::schedule::Plateau;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthParams,
    pub lr0: f64,
    pub patience: usize,
    pub factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_samples: usize,
    /// Zero disables validation (and with it the schedule and best tracking);
    /// the final state is checkpointed instead.
    pub val_samples: usize,
    pub augment: bool,
    pub out_dir: PathBuf,
    /// When set, samples come from `sample_<split>_*.w4ct` files here instead
    /// of being synthesized; `train_samples` is then ignored and
    /// `val_samples` only gates whether the val split is read at all.
    pub data_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(model: ModelConfig, synth: SynthParams, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            model,
            synth,
            lr0: 1e-4,
            patience: 3,
            factor: 0.5,
            batch_size: 4,
            epochs: 20,
            train_samples: 64,
            val_samples: 16,
            augment: false,
            out_dir: out_dir.into(),
            data_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::config(format!("initial learning rate {} is not usable", self.lr0)));
        }
        if self.patience == 0 {
            return Err(Error::config("plateau patience must be at least 1"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::config(format!(
                "learning rate factor {} must lie strictly inside (0, 1)",
                self.factor
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epoch count must be positive"));
        }
        if self.data_dir.is_none() && self.train_samples == 0 {
            return Err(Error::config("a synthetic run needs at least one training sample"));
        }
        if self.synth.t_in != self.model.t_in || self.synth.t_out != self.model.t_out {
            return Err(Error::config(format!(
                "generator frames (in {}, out {}) disagree with the model (in {}, out {})",
                self.synth.t_in, self.synth.t_out, self.model.t_in, self.model.t_out
            )));
        }
        if self.augment && self.synth.height != self.synth.width {
            return Err(Error::config(format!(
                "augmentation draws quarter turns, which need a square domain; got {}x{}",
                self.synth.height, self.synth.width
            )));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_var: Option<BTreeMap<String, f64>>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub checkpoint: PathBuf,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN)
    }
}

/// Where a split's samples come from. Synthetic samples are regenerated on
/// demand (cheap next to a forward pass), which keeps big runs out of memory
/// trouble; loaded samples are shared via their refcounted buffers.
enum Source<'a> {
    Loaded(&'a [Sample]),
    Synth { params: &'a SynthParams, split: &'static str, count: usize },
}

impl Source<'_> {
    fn len(&self) -> usize {
        match self {
            Source::Loaded(s) => s.len(),
            Source::Synth { count, .. } => *count,
        }
    }

    fn get(&self, i: usize) -> Result<Sample> {
        match self {
            Source::Loaded(s) => Ok(s[i].clone()),
            Source::Synth { params, split, .. } => generate_sequence(params, split, i as u64),
        }
    }
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut s = Stream::new(seed, &format!("shuffle.{epoch}"));
    for i in (1..n).rev() {
        order.swap(i, s.below(i + 1));
    }
    order
}

fn gather_batch(
    source: &Source,
    indices: &[usize],
    run: &RunConfig,
    epoch: usize,
    augmented: bool,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let mut s = source.get(idx)?;
        if augmented {
            let a = draw_augment(run.model.seed, &format!("aug.{epoch}.{idx}"));
            if !a.is_identity() {
                s = augment(&s, a)?;
            }
        }
        out.push(s);
    }
    Ok(out)
}

fn validate_split(
    model: &Model<f32>,
    source: &Source,
    batch_size: usize,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let names = variable_names();
    let n = source.len();
    let mut per = vec![0.0; names.len()];
    no_grad(|| -> Result<()> {
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(batch_size) {
            let samples = chunk.iter().map(|&i| source.get(i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (x, y, m) = make_batch(&refs, &model.config)?;
            let pred = model.forward(&x)?;
            let pv = per_variable_scores(&names, &pred, &y, &m)?;
            for v in 0..per.len() {
                per[v] += pv[v] * chunk.len() as f64 / n as f64;
            }
        }
        Ok(())
    })?;
    let score = per.iter().sum::<f64>() / per.len() as f64;
    let map = names.iter().zip(&per).map(|(n, &v)| (n.to_string(), v)).collect();
    Ok((score, map))
}

fn save_state(
    path: &Path,
    model: &Model<f32>,
    adam: &Adam,
    plateau: &Plateau,
    epoch: usize,
) -> Result<()> {
    let mut snap = Snapshot::new(model.config.fingerprint());
    snap.push_store("param.", &model.store);
    adam.add_to_snapshot(&mut snap, &model.store);
    snap.push_scalar("state.epoch", epoch as f64);
    snap.push_scalar("state.lr", plateau.lr);
    snap.push_scalar("state.best", plateau.best);
    snap.push_scalar("state.stall", plateau.stall as f64);
    write_snapshot(path, &snap)
}

pub fn train(run: &RunConfig) -> Result<TrainReport> {
    run.validate()?;
    let loaded_train;
    let loaded_val;
    let (train_src, val_src) = match &run.data_dir {
        Some(dir) => {
            loaded_train = load_split(dir, "train")?;
            let val = if run.val_samples > 0 {
                loaded_val = load_split(dir, "val")?;
                Some(Source::Loaded(&loaded_val))
            } else {
                None
            };
            (Source::Loaded(&loaded_train), val)
        }
        None => {
            let train =
                Source::Synth { params: &run.synth, split: "train", count: run.train_samples };
            let val = (run.val_samples > 0).then_some(Source::Synth {
                params: &run.synth,
                split: "val",
                count: run.val_samples,
            });
            (train, val)
        }
    };

    let model: Model<f32> = Model::build(run.model.clone())?;
    let mut adam = Adam::new(run.lr0, run.model.weight_decay);
    let mut plateau = Plateau::new(run.lr0, run.patience, run.factor, 1e-7);
    let names = variable_names();

    fs::create_dir_all(&run.out_dir)
        .map_err(|e| Error::config(format!("cannot create {:?}: {e}", run.out_dir)))?;
    let metrics_path = run.out_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path)
        .map_err(|e| Error::config(format!("cannot write {metrics_path:?}: {e}")))?;
    let ckpt_path = run.out_dir.join("best.swnc");

    let n_train = train_src.len();
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut best_val = None;
    let mut best_epoch = None;
    let mut steps: u64 = 0;

    for epoch in 1..=run.epochs {
        let t0 = Instant::now();
        let order = shuffled(n_train, run.model.seed, epoch);
        let mut train_loss = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let samples = gather_batch(&train_src, chunk, run, epoch, run.augment)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (x, y, m) = make_batch(&refs, &model.config)?;
            let loss = training_loss(&names, &model.forward(&x)?, &y, &m)?;
            let lval = loss.item()?.to_f64();
            if !lval.is_finite() {
                return Err(Error::numeric(format!(
                    "training loss became {lval} at step {}, lr {:.3e}; \
                     a smaller learning rate usually cures this",
                    steps + 1,
                    adam.lr
                )));
            }
            model.store.zero_grads();
            loss.backward()?;
            adam.lr = plateau.lr;
            adam.step_params(&model.store)?;
            steps += 1;
            train_loss += lval * chunk.len() as f64 / n_train as f64;
        }

        let mut log = EpochLog {
            epoch,
            train_loss,
            val_score: None,
            per_var: None,
            lr: plateau.lr,
            seconds: 0.0,
        };
        if let Some(val) = &val_src {
            let (score, per) = validate_split(&model, val, run.batch_size)?;
            let improved = plateau.observe(score);
            log.val_score = Some(score);
            log.per_var = Some(per);
            if improved {
                best_val = Some(score);
                best_epoch = Some(epoch);
                save_state(&ckpt_path, &model, &adam, &plateau, epoch)?;
            }
        }
        log.seconds = t0.elapsed().as_secs_f64();
        let line = serde_json::to_string(&log)
            .map_err(|e| Error::format(format!("metrics serialization: {e}")))?;
        writeln!(metrics, "{line}")
            .map_err(|e| Error::config(format!("cannot append {metrics_path:?}: {e}")))?;
        logs.push(log);
    }
    if val_src.is_none() {
        save_state(&ckpt_path, &model, &adam, &plateau, run.epochs)?;
    }

    Ok(TrainReport { epochs: logs, best_val, best_epoch, checkpoint: ckpt_path, steps })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub model_score: f64,
    pub model_per_var: BTreeMap<String, f64>,
    pub baseline_score: f64,
    pub baseline_per_var: BTreeMap<String, f64>,
}

/// Scores a checkpoint against samples, next to the persistence baseline
/// (last observed frame of each target variable held for every lead time).
/// Pure read: nothing on disk changes.
pub fn evaluate(
    config: &ModelConfig,
    checkpoint: &Path,
    samples: &[Sample],
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    if batch_size == 0 {
        return Err(Error::config("evaluation batch size must be positive"));
    }
    let model: Model<f32> = Model::build(config.clone())?;
    let snap = read_matching(checkpoint, config.fingerprint())?;
    snap.restore_store("param.", &model.store)?;

    let names = variable_names();
    let n = samples.len();
    let mut model_pv = vec![0.0; names.len()];
    let mut base_pv = vec![0.0; names.len()];
    no_grad(|| -> Result<()> {
        let refs: Vec<&Sample> = samples.iter().collect();
        for chunk in refs.chunks(batch_size) {
            let (x, y, m) = make_batch(chunk, config)?;
            let b = chunk.len();
            let (h, w) = chunk[0].grid();
            let pred = model.forward(&x)?;
            let pv = per_variable_scores(&names, &pred, &y, &m)?;
            let past = x.slice(&[0; 5], &[b, config.target_vars, config.t_in, h, w])?;
            let base = persistence_baseline(&past, config.t_out)?;
            let bv = per_variable_scores(&names, &base, &y, &m)?;
            for v in 0..names.len() {
                model_pv[v] += pv[v] * b as f64 / n as f64;
                base_pv[v] += bv[v] * b as f64 / n as f64;
            }
        }
        Ok(())
    })?;
    let to_map = |per: &[f64]| -> BTreeMap<String, f64> {
        names.iter().zip(per).map(|(nm, &v)| (nm.to_string(), v)).collect()
    };
    Ok(EvalReport {
        samples: n,
        model_score: model_pv.iter().sum::<f64>() / names.len() as f64,
        model_per_var: to_map(&model_pv),
        baseline_score: base_pv.iter().sum::<f64>() / names.len() as f64,
        baseline_per_var: to_map(&base_pv),
    })
}

/// Rewrites a metrics JSONL text with every `seconds` field removed, for
/// comparing two runs that should agree in everything but wall time.
pub fn comparable_log(text: &str) -> Result<String> {
    let mut out = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("metrics line is not JSON: {e}")))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seconds");
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run(dir: &Path) -> RunConfig {
        // Smallest model that still exercises all three stages.
        let mut model = ModelConfig::new(4, 8, 2);
        model.t_in = 2;
        model.t_out = 4;
        model.enc_depths = vec![2, 2, 2];
        model.dec_depths = vec![2, 2, 2];
        model.window = crate::attention::WindowSpec::new([1, 3, 3], [0, 1, 1]).unwrap();
        model.seed = 11;
        let mut synth = SynthParams::new(16, 16, 5);
        synth.t_in = 2;
        synth.t_out = 4;
        let mut run = RunConfig::new(model, synth, dir);
        run.epochs = 2;
        run.train_samples = 4;
        run.val_samples = 2;
        run.batch_size = 2;
        run
    }

    #[test]
    fn config_validation_rejects_mismatched_frames_and_bad_knobs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = tiny_run(tmp.path());
        run.synth.t_out = 8;
        assert!(run.validate().is_err());
        let mut run = tiny_run(tmp.path());
        run.factor = 1.0;
        assert!(run.validate().is_err());
        let mut run = tiny_run(tmp.path());
        run.patience = 0;
        assert!(run.validate().is_err());
        let mut run = tiny_run(tmp.path());
        run.synth.width = 32;
        run.augment = true;
        assert!(run.validate().is_err());
        run.augment = false;
        run.synth.t_in = 2; // width change alone is fine without augmentation
        assert!(run.validate().is_ok());
    }

    #[test]
    fn training_writes_logs_and_a_loadable_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let run = tiny_run(tmp.path());
        let report = train(&run).unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert!(report.steps == 4, "2 epochs x 2 batches, got {}", report.steps);
        assert!(report.best_val.is_some());
        assert!(report.checkpoint.exists());
        let text = fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: EpochLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.epoch, 1);
        assert!(first.val_score.is_some());
        assert!(first.per_var.as_ref().unwrap().contains_key("temperature"));

        // The checkpoint must evaluate without touching training state.
        let samples: Vec<Sample> =
            (0..2).map(|i| generate_sequence(&run.synth, "test", i).unwrap()).collect();
        let eval = evaluate(&run.model, &report.checkpoint, &samples, 2).unwrap();
        assert!(eval.model_score.is_finite());
        assert!(eval.baseline_score.is_finite());
        assert_eq!(eval.samples, 2);
    }

    #[test]
    fn identical_runs_agree_apart_from_wall_time() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let mut run_a = tiny_run(tmp_a.path());
        run_a.augment = true;
        let mut run_b = tiny_run(tmp_b.path());
        run_b.augment = true;
        train(&run_a).unwrap();
        train(&run_b).unwrap();
        let a = fs::read_to_string(tmp_a.path().join("metrics.jsonl")).unwrap();
        let b = fs::read_to_string(tmp_b.path().join("metrics.jsonl")).unwrap();
        assert_ne!(a, b, "seconds should differ in raw logs");
        assert_eq!(comparable_log(&a).unwrap(), comparable_log(&b).unwrap());
    }

    #[test]
    fn no_validation_run_still_checkpoints_the_final_state() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = tiny_run(tmp.path());
        run.val_samples = 0;
        run.epochs = 1;
        let report = train(&run).unwrap();
        assert!(report.best_val.is_none());
        assert!(report.checkpoint.exists());
        assert!(report.epochs[0].val_score.is_none());
        let text = fs::read_to_string(tmp.path().join("metrics.jsonl")).unwrap();
        assert!(!text.contains("val_score"));
    }

    #[test]
    fn training_from_a_data_directory_matches_its_synthetic_twin() {
        // Writing the synthetic split to disk and training from the files
        // must give the same trajectory as generating in-process.
        let tmp_synth = tempfile::tempdir().unwrap();
        let tmp_disk = tempfile::tempdir().unwrap();
        let data = tempfile::tempdir().unwrap();
        let run_synth = tiny_run(tmp_synth.path());
        crate::data::write_split(data.path(), "train", run_synth.train_samples, &run_synth.synth)
            .unwrap();
        crate::data::write_split(data.path(), "val", run_synth.val_samples, &run_synth.synth)
            .unwrap();
        let mut run_disk = tiny_run(tmp_disk.path());
        run_disk.data_dir = Some(data.path().to_path_buf());
        train(&run_synth).unwrap();
        train(&run_disk).unwrap();
        let a = fs::read_to_string(tmp_synth.path().join("metrics.jsonl")).unwrap();
        let b = fs::read_to_string(tmp_disk.path().join("metrics.jsonl")).unwrap();
        assert_eq!(comparable_log(&a).unwrap(), comparable_log(&b).unwrap());
    }

    #[test]
    fn evaluation_rejects_a_checkpoint_from_another_config() {
        let tmp = tempfile::tempdir().unwrap();
        let run = tiny_run(tmp.path());
        let report = train(&run).unwrap();
        let mut other = run.model.clone();
        other.seed = 999;
        let samples = vec![generate_sequence(&run.synth, "test", 0).unwrap()];
        let err = evaluate(&other, &report.checkpoint, &samples, 1).unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");
    }
}
