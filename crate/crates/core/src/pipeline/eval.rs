//! Held-out evaluation with fixed prompts, against the identity baseline.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::degrade::{gen_clean_patch, make_eval_sample, Task};
use crate::error::Result;
use crate::metrics::{save_metrics_csv, MetricsAccumulator, MetricsRecord};
use crate::rng::derive_seed;
use crate::routing::FIXED_PROMPTS;
use crate::tensor::Tensor;

use super::model::Model;
use super::train::patch_shape;

/// Expert sets chosen for one fixed prompt on the probe image.
#[derive(Debug, Clone, Serialize)]
pub struct PromptRoute {
    pub class: String,
    pub prompt: String,
    /// Selected experts per stage.
    pub experts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub records: Vec<MetricsRecord>,
    /// The same samples scored with the degraded input as the prediction.
    pub baseline: Vec<MetricsRecord>,
    pub routes: Vec<PromptRoute>,
    pub distinct_route_sets: usize,
    pub skipped_tasks: Vec<String>,
}

impl EvalReport {
    pub fn record(&self, task: Task) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.task == task.id())
    }

    pub fn baseline_record(&self, task: Task) -> Option<&MetricsRecord> {
        self.baseline.iter().find(|r| r.task == task.id())
    }
}

/// Seed of the `index`-th held-out sample of `task`.
pub fn eval_seed(base: u64, task: Task, index: usize) -> u64 {
    derive_seed(base, &[0xE7A1, task.class_index() as u64, index as u64])
}

/// Scores `model` on `config.eval_samples` held-out samples per task. Requested
/// tasks the model was not trained on are skipped with a warning.
pub fn evaluate(model: &Model, tasks: Option<&[Task]>) -> Result<EvalReport> {
    let cfg = model.config();
    let shape = patch_shape(cfg);
    let requested: Vec<Task> = tasks.map(<[Task]>::to_vec).unwrap_or_else(|| cfg.tasks.clone());
    let mut records = Vec::new();
    let mut baseline = Vec::new();
    let mut skipped = Vec::new();
    for task in requested {
        if !cfg.tasks.contains(&task) {
            eprintln!("warning: task {task} is not in the checkpoint config; skipped");
            skipped.push(task.id().to_string());
            continue;
        }
        let mut acc = MetricsAccumulator::new(task.id());
        let mut base = MetricsAccumulator::new(task.id());
        for i in 0..cfg.eval_samples {
            let sample = make_eval_sample(task, eval_seed(cfg.seed, task, i), i, shape)?;
            let pred = model.predict(&sample.degraded, &sample.prompt)?.map(|v| v.clamp(0.0, 1.0));
            acc.add(&pred, &sample.clean)?;
            base.add(&sample.degraded, &sample.clean)?;
        }
        records.push(acc.finish()?);
        baseline.push(base.finish()?);
    }

    let probe = gen_clean_patch(derive_seed(cfg.seed, &[0xB0BE]), shape.channels, shape.height, shape.width)?;
    let routes = route_fixed_prompts(model, &probe)?;
    let distinct: BTreeSet<&Vec<Vec<usize>>> = routes.iter().map(|r| &r.experts).collect();
    Ok(EvalReport {
        records,
        baseline,
        distinct_route_sets: distinct.len(),
        routes,
        skipped_tasks: skipped,
    })
}

pub fn route_fixed_prompts(model: &Model, probe: &Tensor) -> Result<Vec<PromptRoute>> {
    FIXED_PROMPTS
        .iter()
        .map(|(class, prompt)| {
            Ok(PromptRoute {
                class: class.to_string(),
                prompt: prompt.to_string(),
                experts: model.route(probe, prompt)?,
            })
        })
        .collect()
}

/// Writes `metrics.csv`, `baseline.csv` and `eval_report.json` into `out`.
pub fn write_eval(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    save_metrics_csv(&report.records, &out.join("metrics.csv"))?;
    save_metrics_csv(&report.baseline, &out.join("baseline.csv"))?;
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Loads a checkpoint, evaluates it and writes the outputs.
pub fn evaluate_checkpoint(checkpoint: &Path, tasks: Option<&[Task]>, out: &Path) -> Result<EvalReport> {
    let model = Model::load(checkpoint)?;
    let report = evaluate(&model, tasks)?;
    write_eval(&report, out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::ExperimentConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            d: 8,
            d_e: 8,
            d_p: 8,
            eval_samples: 2,
            tasks: vec![Task::Denoise],
            ..ExperimentConfig::desk()
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_skips_unknown_tasks() {
        let model = Model::build(&tiny()).unwrap();
        let a = evaluate(&model, Some(&[Task::Denoise, Task::Deblur])).unwrap();
        assert_eq!(a.skipped_tasks, vec!["deblur"]);
        assert_eq!(a.records.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        write_eval(&a, &dir.path().join("a")).unwrap();
        let b = evaluate(&model, Some(&[Task::Denoise, Task::Deblur])).unwrap();
        write_eval(&b, &dir.path().join("b")).unwrap();
        let read = |s: &str| std::fs::read(dir.path().join(s).join("metrics.csv")).unwrap();
        assert_eq!(read("a"), read("b"));
        assert_eq!(a.routes.len(), 11);
    }

    #[test]
    fn baseline_matches_direct_input_scores() {
        let cfg = tiny();
        let model = Model::build(&cfg).unwrap();
        let report = evaluate(&model, None).unwrap();
        let mut acc = MetricsAccumulator::new("denoise");
        for i in 0..cfg.eval_samples {
            let s = make_eval_sample(Task::Denoise, eval_seed(cfg.seed, Task::Denoise, i), i, patch_shape(&cfg)).unwrap();
            acc.add(&s.degraded, &s.clean).unwrap();
        }
        assert_eq!(report.baseline_record(Task::Denoise).unwrap(), &acc.finish().unwrap());
    }
}
