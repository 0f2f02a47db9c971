//! Sketch-driven rollouts and the accuracy metrics.
//!
//! A rollout executes the sub-policy of each sketch entry in turn. At every
//! step the active sub-policy acts on the current observation and the world
//! advances; control passes to the next entry once the stop probability at the
//! pre-step observation exceeds the threshold, or when the per-sub-task step cap
//! is hit. A sub-task succeeds if the agent is within the reach radius of its
//! destination when control passes on.

use crate::alignment::{ctc_forward, decode_argmax, taco_forward, Sketch};
use crate::navworld::{self, expert_action_from_observation, sample_sketch, World, WorldConfig};
use crate::policy::{PolicyLibrary, SubtaskClassifier};
use crate::training::Dataset;
use crate::{rng, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Something that can drive the agent through sub-tasks.
pub trait Controller {
    fn action(&self, subtask: usize, obs: &[f64]) -> Vec<f64>;
    fn stop_prob(&self, subtask: usize, obs: &[f64]) -> f64;
    fn knows(&self, subtask: usize) -> bool;
}

impl Controller for PolicyLibrary {
    fn action(&self, subtask: usize, obs: &[f64]) -> Vec<f64> {
        self.policies()[subtask].mean_action(obs)
    }

    fn stop_prob(&self, subtask: usize, obs: &[f64]) -> f64 {
        let p = &self.policies()[subtask];
        p.stop_prob(obs, &p.ones_mask()).expect("all-ones mask matches")
    }

    fn knows(&self, subtask: usize) -> bool {
        subtask < self.k()
    }
}

/// The scripted expert with a stop head that fires inside the reach radius.
#[derive(Clone, Debug)]
pub struct ScriptedOracle {
    pub world: WorldConfig,
}

impl Controller for ScriptedOracle {
    fn action(&self, subtask: usize, obs: &[f64]) -> Vec<f64> {
        expert_action_from_observation(obs, subtask, &self.world).to_vec()
    }

    fn stop_prob(&self, subtask: usize, obs: &[f64]) -> f64 {
        let d = obs[2 * subtask].hypot(obs[2 * subtask + 1]);
        if d < self.world.reach_radius {
            1.0
        } else {
            0.0
        }
    }

    fn knows(&self, subtask: usize) -> bool {
        subtask < self.world.n_destinations()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub l_test: usize,
    pub stop_threshold: f64,
    pub per_subtask_step_cap: usize,
    /// Mean actions when set; otherwise unit-variance Gaussian samples.
    pub deterministic_actions: bool,
    pub rng_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_tasks: 100,
            l_test: 4,
            stop_threshold: 0.5,
            per_subtask_step_cap: 300,
            deterministic_actions: true,
            rng_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.per_subtask_step_cap == 0 || self.l_test == 0 {
            return Err(Error::Structural("n_tasks, l_test and per_subtask_step_cap must be positive".into()));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold <= 1.0) {
            return Err(Error::Structural("stop_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    StopThreshold,
    StepCap,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutResult {
    pub success: Vec<bool>,
    pub steps: Vec<usize>,
    pub terminated_by: Vec<Termination>,
}

impl RolloutResult {
    pub fn task_success(&self) -> bool {
        self.success.iter().all(|&s| s)
    }
}

/// Executes `sketch` in `world`. `noise` supplies action noise when actions
/// are not deterministic.
pub fn rollout(
    ctrl: &impl Controller,
    world: &World,
    world_cfg: &WorldConfig,
    sketch: &Sketch,
    cfg: &EvalConfig,
    noise: &mut impl Rng,
) -> Result<RolloutResult> {
    if let Some(&bad) = sketch.ids().iter().find(|&&k| !ctrl.knows(k)) {
        return Err(Error::Structural(format!("sub-task id {bad} missing from the controller")));
    }
    let mut pos = world.agent_start;
    let mut out = RolloutResult {
        success: Vec::with_capacity(sketch.len()),
        steps: Vec::with_capacity(sketch.len()),
        terminated_by: Vec::with_capacity(sketch.len()),
    };
    for &k in sketch.ids() {
        let mut steps = 0;
        let termination = loop {
            let obs = navworld::observe(world, pos);
            let mut a = ctrl.action(k, &obs);
            if !cfg.deterministic_actions {
                for v in &mut a {
                    let z: f64 = StandardNormal.sample(noise);
                    *v += z;
                }
            }
            let stop = ctrl.stop_prob(k, &obs);
            pos = navworld::step(pos, &a, world_cfg.dt);
            steps += 1;
            if stop > cfg.stop_threshold {
                break Termination::StopThreshold;
            }
            if steps >= cfg.per_subtask_step_cap {
                break Termination::StepCap;
            }
        };
        out.success.push(navworld::reached(world, pos, k, world_cfg));
        out.steps.push(steps);
        out.terminated_by.push(termination);
    }
    Ok(out)
}

/// Task `i` of an evaluation: the world and sketch it uses.
pub fn eval_task(world_cfg: &WorldConfig, cfg: &EvalConfig, i: usize) -> (World, Sketch) {
    let world = World::sample(world_cfg, &mut rng::stream(cfg.rng_seed, &format!("eval/world/{i}")));
    let sketch = sample_sketch(
        cfg.l_test,
        world_cfg.n_destinations(),
        &mut rng::stream(cfg.rng_seed, &format!("eval/sketch/{i}")),
    );
    (world, sketch)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskStats {
    pub task_accuracy: f64,
    pub subtask_accuracy: f64,
    pub rollouts: Vec<RolloutResult>,
}

/// Runs `cfg.n_tasks` freshly sampled tasks.
pub fn evaluate_tasks(ctrl: &impl Controller, world_cfg: &WorldConfig, cfg: &EvalConfig) -> Result<TaskStats> {
    cfg.validate()?;
    world_cfg.validate()?;
    let mut rollouts = Vec::with_capacity(cfg.n_tasks);
    for i in 0..cfg.n_tasks {
        let (world, sketch) = eval_task(world_cfg, cfg, i);
        let mut noise = rng::stream(cfg.rng_seed, &format!("eval/noise/{i}"));
        rollouts.push(rollout(ctrl, &world, world_cfg, &sketch, cfg, &mut noise)?);
    }
    Ok(TaskStats {
        task_accuracy: task_fraction(&rollouts),
        subtask_accuracy: subtask_fraction(&rollouts),
        rollouts,
    })
}

/// Fraction of rollouts whose every sub-task succeeded.
pub fn task_fraction(rollouts: &[RolloutResult]) -> f64 {
    rollouts.iter().filter(|r| r.task_success()).count() as f64 / rollouts.len().max(1) as f64
}

/// Fraction of sub-tasks that succeeded over all rollouts.
pub fn subtask_fraction(rollouts: &[RolloutResult]) -> f64 {
    let total: usize = rollouts.iter().map(|r| r.success.len()).sum();
    let ok: usize = rollouts.iter().map(|r| r.success.iter().filter(|&&s| s).count()).sum();
    ok as f64 / total.max(1) as f64
}

pub fn task_accuracy(ctrl: &impl Controller, world_cfg: &WorldConfig, cfg: &EvalConfig) -> Result<f64> {
    Ok(evaluate_tasks(ctrl, world_cfg, cfg)?.task_accuracy)
}

pub fn subtask_accuracy(ctrl: &impl Controller, world_cfg: &WorldConfig, cfg: &EvalConfig) -> Result<f64> {
    Ok(evaluate_tasks(ctrl, world_cfg, cfg)?.subtask_accuracy)
}

/// The model whose forward variables are decoded.
#[derive(Clone, Copy, Debug)]
pub enum Aligner<'a> {
    Library(&'a PolicyLibrary),
    Classifier(&'a SubtaskClassifier),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentScore {
    /// Mean per-trajectory agreement in percent; `None` if every trajectory was excluded.
    pub pct: Option<f64>,
    pub n_excluded: usize,
    pub per_trajectory: Vec<Option<f64>>,
}

/// Percentage of timesteps whose decoded sub-task equals `truth`.
pub fn agreement_pct(decoded: &[usize], truth: &[usize]) -> f64 {
    let hits = decoded.iter().zip(truth).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / truth.len() as f64
}

/// Decodes one item of `data` with `aligner`.
pub fn decode_item(aligner: Aligner<'_>, data: &Dataset, index: usize) -> Result<Vec<usize>> {
    let item = data
        .items()
        .get(index)
        .ok_or_else(|| Error::Structural(format!("index {index} out of range for {} items", data.len())))?;
    let lattice = match aligner {
        Aligner::Library(lib) => taco_forward(lib, &item.trajectory, &item.sketch, &lib.ones_masks())?,
        Aligner::Classifier(clf) => ctc_forward(clf, &item.trajectory, &item.sketch)?,
    };
    Ok(decode_argmax(&lattice))
}

/// Mean per-trajectory alignment accuracy over held-out items carrying
/// ground-truth alignments. Degenerate lattices are excluded and counted.
pub fn alignment_accuracy(aligner: Aligner<'_>, heldout: &Dataset) -> Result<AlignmentScore> {
    let mut per = Vec::with_capacity(heldout.len());
    for (i, item) in heldout.items().iter().enumerate() {
        let truth = item
            .alignment
            .as_ref()
            .ok_or_else(|| Error::Structural(format!("held-out item {i} has no ground-truth alignment")))?;
        match decode_item(aligner, heldout, i) {
            Ok(decoded) => per.push(Some(agreement_pct(&decoded, truth))),
            Err(Error::DegenerateLattice { .. }) => per.push(None),
            Err(e) => return Err(e),
        }
    }
    let scored: Vec<f64> = per.iter().flatten().copied().collect();
    Ok(AlignmentScore {
        pct: (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        n_excluded: per.len() - scored.len(),
        per_trajectory: per,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub algorithm: String,
    pub n_demos: usize,
    #[serde(rename = "L_train")]
    pub l_train: usize,
    #[serde(rename = "L_test")]
    pub l_test: usize,
    pub task_accuracy: f64,
    pub subtask_accuracy: f64,
    pub alignment_accuracy_pct: Option<f64>,
    pub n_excluded: usize,
    pub seed: u64,
}

/// Long-format rows `algorithm,n_demos,L_train,L_test,seed,metric,value`.
pub fn write_metrics_long_csv(reports: &[MetricsReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["algorithm", "n_demos", "L_train", "L_test", "seed", "metric", "value"])?;
    for r in reports {
        let metrics = [
            ("task_accuracy", Some(r.task_accuracy)),
            ("subtask_accuracy", Some(r.subtask_accuracy)),
            ("alignment_accuracy_pct", r.alignment_accuracy_pct),
        ];
        for (name, value) in metrics {
            w.write_record([
                r.algorithm.clone(),
                r.n_demos.to_string(),
                r.l_train.to_string(),
                r.l_test.to_string(),
                r.seed.to_string(),
                name.to_string(),
                value.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Succeeds everywhere except the last sub-task of each task, where it never moves.
    struct FailsLast {
        oracle: ScriptedOracle,
        last: std::cell::Cell<usize>,
    }

    impl Controller for FailsLast {
        fn action(&self, subtask: usize, obs: &[f64]) -> Vec<f64> {
            if subtask == self.last.get() {
                vec![0.0, 0.0]
            } else {
                self.oracle.action(subtask, obs)
            }
        }
        fn stop_prob(&self, subtask: usize, obs: &[f64]) -> f64 {
            if subtask == self.last.get() {
                1.0
            } else {
                self.oracle.stop_prob(subtask, obs)
            }
        }
        fn knows(&self, subtask: usize) -> bool {
            self.oracle.knows(subtask)
        }
    }

    #[test]
    fn oracle_is_perfect() {
        let world = WorldConfig::default();
        let cfg = EvalConfig {
            n_tasks: 20,
            ..EvalConfig::default()
        };
        let stats = evaluate_tasks(&ScriptedOracle { world: world.clone() }, &world, &cfg).unwrap();
        assert_eq!(stats.task_accuracy, 1.0);
        assert_eq!(stats.subtask_accuracy, 1.0);
    }

    #[test]
    fn unreachable_threshold_hits_cap() {
        let world_cfg = WorldConfig::default();
        let lib = PolicyLibrary::init(4, 8, 2, &[8], 0).unwrap();
        let cfg = EvalConfig {
            stop_threshold: 1.0,
            per_subtask_step_cap: 20,
            ..EvalConfig::default()
        };
        let (world, sketch) = eval_task(&world_cfg, &cfg, 0);
        let r = rollout(&lib, &world, &world_cfg, &sketch, &cfg, &mut rng::stream(0, "n")).unwrap();
        assert!(r.terminated_by.iter().all(|&t| t == Termination::StepCap));
        assert!(r.steps.iter().all(|&s| s == 20));
    }

    #[test]
    fn failing_last_subtask_counts() {
        let world_cfg = WorldConfig::default();
        let cfg = EvalConfig {
            n_tasks: 1,
            ..EvalConfig::default()
        };
        let (world, _) = eval_task(&world_cfg, &cfg, 0);
        let sketch = Sketch::new(vec![2, 0, 1, 3]).unwrap();
        let ctrl = FailsLast {
            oracle: ScriptedOracle { world: world_cfg.clone() },
            last: std::cell::Cell::new(3),
        };
        let r = rollout(&ctrl, &world, &world_cfg, &sketch, &cfg, &mut rng::stream(0, "n")).unwrap();
        assert_eq!(task_fraction(std::slice::from_ref(&r)), 0.0);
        assert_eq!(subtask_fraction(&[r]), 0.75);
    }

    #[test]
    fn agreement_counts_matches() {
        assert_eq!(agreement_pct(&[0, 0, 1, 1], &[0, 0, 1, 1]), 100.0);
        assert_eq!(agreement_pct(&[0, 0, 0, 1], &[0, 0, 1, 1]), 75.0);
    }

    #[test]
    fn unknown_subtask_is_structural() {
        let world_cfg = WorldConfig::default();
        let lib = PolicyLibrary::init(2, 8, 2, &[4], 0).unwrap();
        let cfg = EvalConfig::default();
        let (world, _) = eval_task(&world_cfg, &cfg, 0);
        let sketch = Sketch::new(vec![0, 3]).unwrap();
        assert!(rollout(&lib, &world, &world_cfg, &sketch, &cfg, &mut rng::stream(0, "n")).is_err());
    }
}
