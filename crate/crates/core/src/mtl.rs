//! Step-level dynamic weight averaging over tasks and the combined training loss.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 0.7;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Floor on the EMA denominator of the descent rate.
pub const RATE_GUARD: f64 = 1e-12;
/// Coefficient of the load-balance term.
pub const BALANCE_COEF: f64 = 0.01;

/// Descent rate `ℓ/ℓ̄` plus whether the denominator hit the guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub value: f64,
    pub guarded: bool,
}

/// Per-task loss averages carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWeightState {
    gamma: f64,
    temperature: f64,
    ema: BTreeMap<String, f64>,
}

/// One task's row of a weighting step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskWeightRow {
    pub task: String,
    pub loss: f64,
    pub ema: f64,
    pub rate: f64,
    pub weight: f64,
}

impl TaskWeightState {
    pub fn new(gamma: f64, temperature: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::config(format!("EMA decay must lie in [0, 1), got {gamma}")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!(
                "weighting temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            gamma,
            temperature,
            ema: BTreeMap::new(),
        })
    }

    pub fn ema(&self, task: &str) -> Option<f64> {
        self.ema.get(task).copied()
    }

    /// `ℓ̄ ← γℓ̄ + (1−γ)ℓ`; the first observation initialises. A non-finite loss
    /// leaves the state untouched.
    pub fn update_ema(&mut self, task: &str, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::input(format!("non-finite loss {loss} for task {task}")));
        }
        let next = match self.ema.get(task) {
            Some(&prev) => self.gamma * prev + (1.0 - self.gamma) * loss,
            None => loss,
        };
        self.ema.insert(task.to_string(), next);
        Ok(next)
    }

    pub fn descent_rate(&self, task: &str, loss: f64) -> Result<Rate> {
        let ema = self
            .ema(task)
            .ok_or_else(|| Error::input(format!("no loss average for task {task}")))?;
        Ok(Rate {
            value: loss / ema.max(RATE_GUARD),
            guarded: ema < RATE_GUARD,
        })
    }

    /// One weighting step over the tasks present in a batch: update each EMA,
    /// compute rates against the updated averages, then weights. Absent tasks
    /// keep their averages and do not count towards `M`.
    pub fn step(&mut self, observations: &[(String, f64)]) -> Result<Vec<TaskWeightRow>> {
        if observations.is_empty() {
            return Err(Error::input("weighting step needs at least one task"));
        }
        if let Some((task, loss)) = observations.iter().find(|(_, l)| !l.is_finite()) {
            return Err(Error::input(format!("non-finite loss {loss} for task {task}")));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some((task, _)) = observations.iter().find(|(t, _)| !seen.insert(t)) {
            return Err(Error::input(format!("task {task} observed twice in one step")));
        }
        let mut rows = Vec::with_capacity(observations.len());
        let mut rates = Vec::with_capacity(observations.len());
        for (task, loss) in observations {
            let ema = self.update_ema(task, *loss)?;
            let rate = self.descent_rate(task, *loss)?.value;
            rates.push(rate);
            rows.push(TaskWeightRow {
                task: task.clone(),
                loss: *loss,
                ema,
                rate,
                weight: 0.0,
            });
        }
        for (row, w) in rows.iter_mut().zip(task_weights(&rates, self.temperature)?) {
            row.weight = w;
        }
        Ok(rows)
    }
}

/// `w = M·softmax(r/T)`; sums to the number of rates.
pub fn task_weights(rates: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config("weighting temperature must be positive"));
    }
    if rates.is_empty() || rates.iter().any(|r| !r.is_finite()) {
        return Err(Error::input("task weights need finite rates"));
    }
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = rates.iter().map(|r| ((r - max) / temperature).exp()).collect();
    // equal rates give exps of exactly 1, so m/sum is exactly 1 too
    let norm = rates.len() as f64 / exps.iter().sum::<f64>();
    Ok(exps.into_iter().map(|e| e * norm).collect())
}

/// `(1/N)·Σ_i w_{task_i}·L_i` over scalar per-sample losses.
pub fn weighted_loss<'t>(
    losses: &[Var<'t>],
    tasks: &[&str],
    weights: &BTreeMap<String, f64>,
) -> Result<Var<'t>> {
    if losses.is_empty() || losses.len() != tasks.len() {
        return Err(Error::input("weighted loss needs one task per sample"));
    }
    let mut acc: Option<Var<'t>> = None;
    for (&loss, task) in losses.iter().zip(tasks) {
        let w = weights
            .get(*task)
            .ok_or_else(|| Error::config(format!("no weight for task {task}")))?;
        let term = loss.scale(*w);
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("nonempty").scale(1.0 / losses.len() as f64))
}

/// Cross-entropy of `zᵀ·W` against `label`; `W` is `len(z)×classes`.
pub fn classification_loss<'t>(token: Var<'t>, label: usize, head: Var<'t>) -> Result<Var<'t>> {
    let hs = head.shape();
    if hs.len() != 2 || label >= hs[1] {
        return Err(Error::input(format!(
            "label {label} outside a classifier of shape {hs:?}"
        )));
    }
    let z = token.reshape(&[1, token.value().len()])?;
    let logp = z.matmul(head)?.reshape(&[hs[1]])?.log_softmax_lastdim();
    Ok(logp.gather(&[label])?.sum().neg())
}

/// Scalar components of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub dwa: f64,
    pub balance: f64,
    pub cls: f64,
    pub total: f64,
}

/// `dwa + 0.01·sg(dwa)·balance + cls`.
pub fn total_loss<'t>(
    dwa: Var<'t>,
    balance: Var<'t>,
    cls: Var<'t>,
) -> Result<(Var<'t>, LossBreakdown)> {
    let scaled_balance = balance.mul(dwa.stop_gradient())?.scale(BALANCE_COEF);
    let total = dwa.add(scaled_balance)?.add(cls)?;
    let breakdown = LossBreakdown {
        dwa: dwa.item(),
        balance: balance.item(),
        cls: cls.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// Convenience for tests and bindings: scalar losses on a fresh tape.
pub fn weighted_loss_value(losses: &[f64], tasks: &[&str], weights: &BTreeMap<String, f64>) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = losses.iter().map(|&l| tape.constant(Tensor::scalar(l))).collect();
    Ok(weighted_loss(&vars, tasks, weights)?.item())
}

/// Per-step weighting log with columns `step,task,loss,ema,rate,weight`,
/// flushed after every step.
pub struct WeightLog {
    writer: csv::Writer<File>,
}

impl WeightLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["step", "task", "loss", "ema", "rate", "weight"])?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, step: usize, rows: &[TaskWeightRow]) -> Result<()> {
        for r in rows {
            self.writer.write_record([
                step.to_string(),
                r.task.clone(),
                format!("{:.9}", r.loss),
                format!("{:.9}", r.ema),
                format!("{:.9}", r.rate),
                format!("{:.9}", r.weight),
            ])?;
        }
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
        pairs.iter().map(|(t, l)| (t.to_string(), *l)).collect()
    }

    #[test]
    fn ema_example() {
        let mut s = TaskWeightState::new(0.7, 0.1).unwrap();
        assert_eq!(s.update_ema("a", 1.0).unwrap(), 1.0);
        assert!((s.update_ema("a", 2.0).unwrap() - 1.3).abs() < 1e-15);
        assert!(s.update_ema("a", f64::NAN).is_err());
        assert!((s.ema("a").unwrap() - 1.3).abs() < 1e-15);
    }

    #[test]
    fn rate_guard() {
        let mut s = TaskWeightState::new(0.7, 0.1).unwrap();
        s.update_ema("a", 0.0).unwrap();
        let r = s.descent_rate("a", 1e-13).unwrap();
        assert!(r.guarded && r.value.is_finite());
        assert!((r.value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn weight_example() {
        let w = task_weights(&[1.0, 1.1], 0.1).unwrap();
        assert!((w[0] - 0.5379).abs() < 1e-4 && (w[1] - 1.4621).abs() < 1e-4, "{w:?}");
        assert_eq!(task_weights(&[0.8, 0.8, 0.8], 0.1).unwrap(), vec![1.0, 1.0, 1.0]);
        assert!(task_weights(&[1.0], 0.0).is_err());
    }

    #[test]
    fn first_step_has_unit_weights_and_absent_tasks_keep_ema() {
        let mut s = TaskWeightState::new(0.7, 0.1).unwrap();
        let rows = s.step(&obs(&[("a", 2.0), ("b", 0.5)])).unwrap();
        assert!(rows.iter().all(|r| r.weight == 1.0 && r.rate == 1.0));
        let rows = s.step(&obs(&[("a", 1.0)])).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].weight, 1.0);
        assert_eq!(s.ema("b"), Some(0.5));
        let before = s.clone();
        assert!(s.step(&obs(&[("a", 1.0), ("b", f64::INFINITY)])).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn plateau_outweighs_decay() {
        let mut s = TaskWeightState::new(DEFAULT_GAMMA, DEFAULT_TEMPERATURE).unwrap();
        for t in 0..40 {
            let rows = s.step(&obs(&[("flat", 1.0), ("fast", 0.9f64.powi(t))])).unwrap();
            if t >= 10 {
                assert!(rows[0].weight > rows[1].weight, "step {t}: {rows:?}");
            }
        }
    }

    #[test]
    fn weighted_loss_and_missing_weight() {
        let w: BTreeMap<String, f64> = [("a".to_string(), 2.0), ("b".to_string(), 0.5)].into();
        let v = weighted_loss_value(&[1.0, 4.0], &["a", "b"], &w).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
        assert!(matches!(
            weighted_loss_value(&[1.0], &["c"], &w),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_classifier_gives_log_classes() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::randn(&[6], 1.0, &mut crate::rng::stream(0, 0)));
        let head = tape.constant(Tensor::zeros(&[6, 11]));
        let l = classification_loss(z, 3, head).unwrap().item();
        assert!((l - 11f64.ln()).abs() < 1e-12);
        assert!(classification_loss(z, 11, head).is_err());
    }

    #[test]
    fn balance_term_gradient_skips_dwa_path() {
        let tape = Tape::new();
        let dwa = tape.param(Tensor::scalar(2.0));
        let bal = tape.param(Tensor::scalar(3.0));
        let cls = tape.param(Tensor::scalar(0.5));
        let (total, b) = total_loss(dwa, bal, cls).unwrap();
        assert!((b.total - (2.0 + 0.01 * 2.0 * 3.0 + 0.5)).abs() < 1e-15);
        let g = tape.backward(total).unwrap();
        assert_eq!(g.wrt(dwa).item(), 1.0);
        assert!((g.wrt(bal).item() - 0.02).abs() < 1e-15);
        assert_eq!(g.wrt(cls).item(), 1.0);
    }

    #[test]
    fn log_is_flushed_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dwa.csv");
        let mut log = WeightLog::create(&path).unwrap();
        let mut s = TaskWeightState::new(0.7, 0.1).unwrap();
        log.append(0, &s.step(&obs(&[("a", 1.0)])).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,task,loss,ema,rate,weight\n0,a,"));
    }

    proptest! {
        #[test]
        fn weights_sum_to_task_count(rates in proptest::collection::vec(0.0f64..5.0, 1..8), t in 0.01f64..2.0) {
            let w = task_weights(&rates, t).unwrap();
            prop_assert!((w.iter().sum::<f64>() - rates.len() as f64).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x > 0.0 || rates.len() > 1));
        }
    }
}
