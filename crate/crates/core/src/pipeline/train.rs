//! Deterministic multi-task training with plain gradient descent.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::align::pad_channels;
use crate::autodiff::{Tape, Var};
use crate::degrade::{make_sample, PatchShape, Task};
use crate::error::{Error, Result};
use crate::mtl::{
    classification_loss, total_loss, weighted_loss, LossBreakdown, TaskWeightRow, TaskWeightState,
    WeightLog,
};
use crate::rng::derive_seed;
use crate::routing::load_balance_loss;

use super::config::ExperimentConfig;
use super::model::Model;

/// Squared error summed over bands and averaged over pixels.
pub fn band_squared_error<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let bands = pred.shape().first().copied().unwrap_or(1);
    Ok(pred.sub(target)?.square().mean().scale(bands as f64))
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub batch_seed: u64,
    pub loss: LossBreakdown,
    pub weights: Vec<TaskWeightRow>,
    pub backward_passes: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
    pub initial_checksum: u64,
    pub final_checksum: u64,
}

impl TrainReport {
    /// Per-task weight trajectory, one value per step the task was present.
    pub fn weight_trajectory(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &self.steps {
            for w in &s.weights {
                out.entry(w.task.clone()).or_default().push(w.weight);
            }
        }
        out
    }
}

/// Seed of the batch drawn at `step`.
pub fn batch_seed(config: &ExperimentConfig, step: usize) -> u64 {
    derive_seed(config.seed, &[0x7EA1, step as u64])
}

pub fn patch_shape(config: &ExperimentConfig) -> PatchShape {
    PatchShape {
        channels: config.bands(),
        height: config.patch_size,
        width: config.patch_size,
    }
}

/// Drives the optimisation of one model.
pub struct Trainer {
    pub model: Model,
    pub weights: TaskWeightState,
    pools: BTreeMap<String, Vec<String>>,
    next_step: usize,
}

impl Trainer {
    pub fn new(model: Model, pools: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let cfg = model.config();
        for t in &cfg.tasks {
            if pools.get(t.id()).is_none_or(|p| p.is_empty()) {
                return Err(Error::config(format!("no prompts for task {t}")));
            }
        }
        let weights = TaskWeightState::new(cfg.gamma, cfg.t_w)?;
        Ok(Self {
            model,
            weights,
            pools,
            next_step: 0,
        })
    }

    /// One step: a round-robin batch with `batch_per_task` samples of every
    /// task, one forward and exactly one backward pass, then a descent update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.next_step;
        let cfg = self.model.config().clone();
        let seed = batch_seed(&cfg, step);
        let shape = patch_shape(&cfg);

        let tape = Tape::new();
        let p = self.model.store().bind(&tape);
        let mut losses = Vec::new();
        let mut tasks: Vec<&str> = Vec::new();
        let mut cls = Vec::new();
        let mut per_stage: Vec<Vec<_>> = Vec::new();
        let mut task_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for j in 0..cfg.batch_per_task {
            for (ti, task) in cfg.tasks.iter().enumerate() {
                let sample_seed = derive_seed(seed, &[j as u64, ti as u64]);
                let sample = make_sample(*task, sample_seed, shape, &self.pools[task.id()])?;
                let pass = self.model.forward(&p, &sample.degraded, &sample.prompt)?;
                let target = tape.constant(pad_channels(&sample.clean, cfg.channels)?.tensor);
                let loss = band_squared_error(pass.output, target)?;
                let entry = task_sums.entry(task.id().to_string()).or_insert((0.0, 0));
                entry.0 += loss.item();
                entry.1 += 1;
                losses.push(loss);
                tasks.push(task.id());
                let head = p[self.model.classifier().weight];
                cls.push(classification_loss(pass.token.z, task.class_index(), head)?);
                for (s, d) in pass.decisions.into_iter().enumerate() {
                    if per_stage.len() <= s {
                        per_stage.push(Vec::new());
                    }
                    per_stage[s].push(d);
                }
            }
        }

        let observations: Vec<(String, f64)> = task_sums
            .into_iter()
            .map(|(t, (sum, n))| (t, sum / n as f64))
            .collect();
        if observations.iter().any(|(_, l)| !l.is_finite()) {
            return Err(Error::NonFiniteLoss { step, batch_seed: seed });
        }
        let rows = self.weights.step(&observations)?;
        let weight_map: BTreeMap<String, f64> = rows.iter().map(|r| (r.task.clone(), r.weight)).collect();

        let dwa = weighted_loss(&losses, &tasks, &weight_map)?;
        let mut balance = load_balance_loss(&per_stage[0])?;
        for stage in &per_stage[1..] {
            balance = balance.add(load_balance_loss(stage)?)?;
        }
        let balance = balance.scale(1.0 / per_stage.len() as f64);
        let mut cls_total = cls[0];
        for c in &cls[1..] {
            cls_total = cls_total.add(*c)?;
        }
        let cls_mean = cls_total.scale(1.0 / cls.len() as f64);
        let (total, breakdown) = total_loss(dwa, balance, cls_mean)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch_seed: seed });
        }
        let grads = tape.backward(total)?;
        self.model.store_mut().sgd_step(&p, &grads, cfg.learning_rate);
        // a divergent update is charged to the batch that produced it
        let store = self.model.store();
        if !store.ids().all(|id| store.get(id).all_finite()) {
            return Err(Error::NonFiniteLoss { step, batch_seed: seed });
        }
        self.next_step += 1;
        Ok(StepRecord {
            step,
            batch_seed: seed,
            loss: breakdown,
            weights: rows,
            backward_passes: tape.backward_passes(),
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Step-level loss log: `step,total,dwa,balance,cls,seconds`.
struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["step", "total", "dwa", "balance", "cls", "seconds"])?;
        writer.flush()?;
        Ok(Self { writer })
    }

    fn append(&mut self, r: &StepRecord) -> Result<()> {
        self.writer.write_record([
            r.step.to_string(),
            format!("{:.9}", r.loss.total),
            format!("{:.9}", r.loss.dwa),
            format!("{:.9}", r.loss.balance),
            format!("{:.9}", r.loss.cls),
            format!("{:.4}", r.seconds),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Trains `config.steps` steps. With an output directory, writes
/// `train_log.csv`, `dwa_log.csv` (both flushed every step), `config.json`,
/// `train_report.json` and the final checkpoint under `checkpoint/`.
pub fn train(
    config: &ExperimentConfig,
    pools: BTreeMap<String, Vec<String>>,
    out: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    let model = Model::build(config)?;
    let initial_checksum = model.store().checksum();
    let mut trainer = Trainer::new(model, pools)?;
    let mut logs = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            config.save(&dir.join("config.json"))?;
            Some((
                LossLog::create(&dir.join("train_log.csv"))?,
                WeightLog::create(&dir.join("dwa_log.csv"))?,
            ))
        }
        None => None,
    };
    let mut steps = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let Some(dir) = out {
                    fs::write(dir.join("abort.json"), serde_json::to_string_pretty(&serde_json::json!({
                        "error": e.to_string(),
                    }))?)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((loss_log, weight_log)) = logs.as_mut() {
            loss_log.append(&rec)?;
            weight_log.append(rec.step, &rec.weights)?;
        }
        steps.push(rec);
    }
    let model = trainer.model;
    let checkpoint = match out {
        Some(dir) => {
            let ck = dir.join("checkpoint");
            model.save(&ck)?;
            Some(ck)
        }
        None => None,
    };
    let report = TrainReport {
        steps,
        checkpoint,
        initial_checksum,
        final_checksum: model.store().checksum(),
    };
    if let Some(dir) = out {
        fs::write(dir.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok((model, report))
}

/// Tasks as id strings.
pub fn task_ids(tasks: &[Task]) -> Vec<&'static str> {
    tasks.iter().map(|t| t.id()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::default_pools;

    fn tiny(tasks: Vec<Task>, steps: usize) -> ExperimentConfig {
        ExperimentConfig {
            d: 8,
            d_e: 8,
            d_p: 8,
            steps,
            tasks,
            batch_per_task: 1,
            ..ExperimentConfig::desk()
        }
    }

    #[test]
    fn zero_steps_keep_initialisation() {
        let cfg = tiny(vec![Task::Denoise], 0);
        let (model, report) = train(&cfg, default_pools(), None).unwrap();
        assert!(report.steps.is_empty());
        assert_eq!(report.final_checksum, report.initial_checksum);
        assert_eq!(model.store().checksum(), Model::build(&cfg).unwrap().store().checksum());
    }

    #[test]
    fn single_task_weight_is_one_and_one_backward_per_step() {
        let (_, report) = train(&tiny(vec![Task::Brightness], 3), default_pools(), None).unwrap();
        for s in &report.steps {
            assert_eq!(s.weights.len(), 1);
            assert_eq!(s.weights[0].weight, 1.0);
            assert_eq!(s.backward_passes, 1);
        }
    }

    #[test]
    fn logs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(vec![Task::Denoise, Task::Destripe], 2);
        let (_, report) = train(&cfg, default_pools(), Some(dir.path())).unwrap();
        let log = std::fs::read_to_string(dir.path().join("dwa_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + 2 * 2);
        let train_log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(train_log.lines().count(), 3);
        assert!(report.checkpoint.unwrap().join("manifest.json").exists());
    }

    #[test]
    fn missing_pool_is_config_error() {
        let cfg = tiny(vec![Task::Denoise], 1);
        let err = train(&cfg, BTreeMap::new(), None).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_seed() {
        let cfg = tiny(vec![Task::Denoise], 5);
        let mut model = Model::build(&cfg).unwrap();
        let bias = model.store().find("level.bias").unwrap();
        model.store_mut().get_mut(bias).data_mut()[0] = f64::NAN;
        let mut trainer = Trainer::new(model, default_pools()).unwrap();
        match trainer.step() {
            Err(Error::NonFiniteLoss { step, batch_seed: s }) => {
                assert_eq!(step, 0);
                assert_eq!(s, batch_seed(&cfg, 0));
            }
            other => panic!("expected a non-finite abort, got {:?}", other.map(|r| r.loss)),
        }
    }
}
