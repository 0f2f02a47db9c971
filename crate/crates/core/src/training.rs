//! Learners and optimizer.
//!
//! Every objective is assembled as one autodiff graph per mini-batch whose
//! output is the batch negative log-likelihood divided by the total number of
//! timesteps in the batch. Trajectories whose lattice underflows are dropped
//! from the batch, counted, and the batch is rebuilt without them.

use crate::alignment::{
    check_lattice, ctc_forward, ctc_lattice_nodes, ctc_stop_targets, decode_argmax, policy_terms, soft_alignment,
    taco_lattice_nodes, LatticeNodes, Sketch, SoftAlignment, StopTargets, Trajectory,
};
use crate::autodiff::{Array, GraphBuilder, NodeId};
use crate::policy::{DropoutMask, LibraryNodes, MlpNodes, PolicyLibrary, SubtaskClassifier};
use crate::{rng, Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

/// One demonstration with its sketch and, optionally, its per-timestep sub-task ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub trajectory: Trajectory,
    pub sketch: Sketch,
    pub alignment: Option<Vec<usize>>,
}

/// Demonstrations over a dictionary of `k` sub-tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    k: usize,
}

impl Dataset {
    pub fn new(items: Vec<Item>, k: usize) -> Result<Self> {
        for (i, item) in items.iter().enumerate() {
            if item.sketch.max_id() >= k {
                return Err(Error::Data(format!("item {i}: sketch id {} outside 0..{k}", item.sketch.max_id())));
            }
            if item.sketch.len() > item.trajectory.len() {
                return Err(Error::Data(format!("item {i}: sketch longer than trajectory")));
            }
            if let Some(ids) = &item.alignment {
                if ids.len() != item.trajectory.len() {
                    return Err(Error::Data(format!("item {i}: alignment length differs from T")));
                }
                if Sketch::collapse(ids).ok().as_ref() != Some(&item.sketch) {
                    return Err(Error::Data(format!("item {i}: alignment does not collapse to its sketch")));
                }
            }
        }
        if let Some(first) = items.first() {
            let (ds, da) = (first.trajectory.state_dim(), first.trajectory.action_dim());
            if items
                .iter()
                .any(|it| it.trajectory.state_dim() != ds || it.trajectory.action_dim() != da)
            {
                return Err(Error::Data("items disagree on state or action dimension".into()));
            }
        }
        Ok(Self { items, k })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.trajectory.state_dim())
    }

    pub fn action_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.trajectory.action_dim())
    }

    pub fn total_steps(&self) -> usize {
        self.items.iter().map(|i| i.trajectory.len()).sum()
    }

    /// The same demonstrations with ground-truth alignments removed.
    pub fn without_alignments(&self) -> Self {
        let items = self
            .items
            .iter()
            .map(|i| Item {
                alignment: None,
                ..i.clone()
            })
            .collect();
        Self { items, k: self.k }
    }

    /// First `n` items.
    pub fn take(&self, n: usize) -> Self {
        Self {
            items: self.items[..n.min(self.items.len())].to_vec(),
            k: self.k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    GtBc,
    CtcBcArgmax,
    CtcBcProb,
    Taco,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Self::GtBc, Self::CtcBcArgmax, Self::CtcBcProb, Self::Taco];

    pub fn name(self) -> &'static str {
        match self {
            Self::GtBc => "gt-bc",
            Self::CtcBcArgmax => "ctc-bc-argmax",
            Self::CtcBcProb => "ctc-bc-prob",
            Self::Taco => "taco",
        }
    }

    pub fn uses_classifier(self) -> bool {
        matches!(self, Self::CtcBcArgmax | Self::CtcBcProb)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Structural(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_initial: f64,
    pub dropout_decay: f64,
    pub rng_seed: u64,
    pub hidden_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Taco,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            dropout_initial: 0.5,
            dropout_decay: 0.99,
            rng_seed: 0,
            hidden_sizes: vec![100],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_initial) {
            return Err(Error::Structural("dropout_initial must lie in [0, 1)".into()));
        }
        if !(self.dropout_decay > 0.0 && self.dropout_decay <= 1.0) {
            return Err(Error::Structural("dropout_decay must lie in (0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Structural("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Structural("batch_size must be at least 1".into()));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Structural("hidden_sizes must list at least one positive width".into()));
        }
        Ok(())
    }

    /// Stop-head dropout rate used during `epoch` (0-based).
    pub fn dropout_rate(&self, epoch: usize) -> f64 {
        self.dropout_initial * self.dropout_decay.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dropout_rate: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub algorithm: Algorithm,
    /// Policy-learning epochs.
    pub history: Vec<EpochRecord>,
    /// Classifier epochs of the two-stage baselines; empty otherwise.
    pub classifier_history: Vec<EpochRecord>,
    pub library: PolicyLibrary,
    pub classifier: Option<SubtaskClassifier>,
    pub wall_clock_s: f64,
    /// Trajectory-epochs dropped because their lattice underflowed.
    pub skipped_trajectories: usize,
    /// Optimizer steps skipped because of a non-finite gradient.
    pub skipped_steps: usize,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Writes `epoch,loss,dropout_rate,wall_clock_s`. Timings are written as zero
/// unless `wall_clock` is set, which keeps the file reproducible.
pub fn write_history_csv(records: &[EpochRecord], wall_clock: bool, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(EpochRecord {
            wall_clock_s: if wall_clock { r.wall_clock_s } else { 0.0 },
            ..r.clone()
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Array>,
    v: Vec<Array>,
    t: i32,
    skipped: usize,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            skipped: 0,
        }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// Applies one bias-corrected adaptive-moment update. Returns `false`, leaving
/// parameters and moments untouched, if any gradient entry is non-finite.
pub fn adaptive_step(params: &mut [&mut Array], grads: &[Array], state: &mut Adam) -> Result<bool> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::Structural("parameter and gradient shapes differ".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Array::zeros(g.shape())).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t);
    let c2 = 1.0 - b2.powi(state.t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(true)
}

/// Per-step cloning weights for one sub-policy: `action[t]` weights the action
/// log-density at `s_t`; `stop[t]` and `go[t]` weight the log-probabilities of
/// emitting and not emitting the stop action at `s_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CloneWeights {
    pub action: Vec<f64>,
    pub stop: Vec<f64>,
    pub go: Vec<f64>,
}

impl CloneWeights {
    fn zeros(t: usize) -> Self {
        Self {
            action: vec![0.0; t],
            stop: vec![0.0; t],
            go: vec![0.0; t],
        }
    }
}

/// Binary stop labels for a segmentation: 1 at the last step of every segment.
pub fn segment_stop_targets(ids: &[usize]) -> Vec<f64> {
    (0..ids.len())
        .map(|t| if t + 1 == ids.len() || ids[t + 1] != ids[t] { 1.0 } else { 0.0 })
        .collect()
}

/// Hard cloning weights from a per-timestep segmentation.
pub fn segmentation_weights(ids: &[usize]) -> BTreeMap<usize, CloneWeights> {
    let stops = segment_stop_targets(ids);
    let mut out: BTreeMap<usize, CloneWeights> = BTreeMap::new();
    for (t, &k) in ids.iter().enumerate() {
        let w = out.entry(k).or_insert_with(|| CloneWeights::zeros(ids.len()));
        w.action[t] = 1.0;
        w.stop[t] = stops[t];
        w.go[t] = 1.0 - stops[t];
    }
    out
}

/// Soft cloning weights: actions weighted by `p_t(l)`, and the stop decision at
/// `s_t` of the sub-policy at position `l` labelled with the derived target and
/// weighted by the mass `p_{t-1}(l)` it acts on.
pub fn soft_weights(tau: &Sketch, p: &SoftAlignment, targets: &StopTargets) -> BTreeMap<usize, CloneWeights> {
    let big_t = p.steps();
    let mut out: BTreeMap<usize, CloneWeights> = BTreeMap::new();
    for (l, &k) in tau.ids().iter().enumerate() {
        let w = out.entry(k).or_insert_with(|| CloneWeights::zeros(big_t));
        for t in 0..big_t {
            w.action[t] += p.get(t, l);
            if t > 0 {
                if let Some(y) = targets.get(t, l) {
                    let mass = p.get(t - 1, l);
                    w.stop[t] += mass * y;
                    w.go[t] += mass * (1.0 - y);
                }
            }
        }
    }
    out
}

/// Negative weighted log-likelihood of one trajectory under the library.
pub fn weighted_clone_nll(
    g: &mut GraphBuilder,
    lib: &PolicyLibrary,
    nodes: &LibraryNodes,
    masks: &[Option<NodeId>],
    rho: &Trajectory,
    weights: &BTreeMap<usize, CloneWeights>,
) -> Result<NodeId> {
    let terms = policy_terms(g, lib, nodes, masks, rho, weights.keys().copied())?;
    let mut parts = Vec::new();
    for (k, w) in weights {
        let term = &terms[k];
        let a = g.constant(Array::vector(w.action.clone()));
        parts.push(g.mul(a, term.log_prob));
        let stop_ll = g.log_sigmoid(term.stop_logit);
        let s = g.constant(Array::vector(w.stop.clone()));
        parts.push(g.mul(s, stop_ll));
        let neg = g.neg(term.stop_logit);
        let go_ll = g.log_sigmoid(neg);
        let c = g.constant(Array::vector(w.go.clone()));
        parts.push(g.mul(c, go_ll));
    }
    let all = g.concat(&parts);
    let total = g.sum(all);
    Ok(g.neg(total))
}

/// Graph for a mini-batch objective.
pub struct BatchLoss {
    /// Batch negative log-likelihood divided by the batch's total timesteps.
    pub loss: NodeId,
    /// Lattices built for the batch, keyed by batch position.
    pub lattices: Vec<(usize, LatticeNodes)>,
}

fn normalized(g: &mut GraphBuilder, nlls: &[NodeId], steps: usize) -> NodeId {
    let all = g.concat(nlls);
    let total = g.sum(all);
    g.scale(total, 1.0 / steps as f64)
}

fn batch_steps(batch: &[&Item]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Structural("empty batch".into()));
    }
    Ok(batch.iter().map(|i| i.trajectory.len()).sum())
}

fn mask_row(masks: &[Vec<Option<NodeId>>], i: usize) -> &[Option<NodeId>] {
    masks.get(i).map_or(&[], Vec::as_slice)
}

/// Behavioural cloning against ground-truth segmentations. `masks[i][k]` is
/// the stop-head dropout leaf of sub-policy `k` for batch item `i`, if any.
pub fn gt_bc_loss(
    g: &mut GraphBuilder,
    lib: &PolicyLibrary,
    nodes: &LibraryNodes,
    masks: &[Vec<Option<NodeId>>],
    batch: &[&Item],
) -> Result<NodeId> {
    let steps = batch_steps(batch)?;
    let mut nlls = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let ids = item
            .alignment
            .as_ref()
            .ok_or_else(|| Error::Structural("gt-bc requires ground-truth alignments".into()))?;
        let w = segmentation_weights(ids);
        nlls.push(weighted_clone_nll(g, lib, nodes, mask_row(masks, i), &item.trajectory, &w)?);
    }
    Ok(normalized(g, &nlls, steps))
}

/// Negative joint log-likelihood of sketches and actions given states.
pub fn taco_loss(
    g: &mut GraphBuilder,
    lib: &PolicyLibrary,
    nodes: &LibraryNodes,
    masks: &[Vec<Option<NodeId>>],
    batch: &[&Item],
) -> Result<BatchLoss> {
    let steps = batch_steps(batch)?;
    let mut nlls = Vec::with_capacity(batch.len());
    let mut lattices = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let lat = taco_lattice_nodes(g, lib, nodes, mask_row(masks, i), &item.trajectory, &item.sketch)?;
        nlls.push(g.neg(lat.log_likelihood));
        lattices.push((i, lat));
    }
    Ok(BatchLoss {
        loss: normalized(g, &nlls, steps),
        lattices,
    })
}

/// Negative CTC log-likelihood of the sketches.
pub fn ctc_loss(g: &mut GraphBuilder, clf: &MlpNodes, k: usize, batch: &[&Item]) -> Result<BatchLoss> {
    let steps = batch_steps(batch)?;
    let mut nlls = Vec::with_capacity(batch.len());
    let mut lattices = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        let lat = ctc_lattice_nodes(g, clf, k, &item.trajectory, &item.sketch)?;
        nlls.push(g.neg(lat.log_likelihood));
        lattices.push((i, lat));
    }
    Ok(BatchLoss {
        loss: normalized(g, &nlls, steps),
        lattices,
    })
}

/// Cloning with soft alignments; `weights[i]` belongs to `batch[i]`.
pub fn soft_bc_loss(
    g: &mut GraphBuilder,
    lib: &PolicyLibrary,
    nodes: &LibraryNodes,
    masks: &[Vec<Option<NodeId>>],
    batch: &[&Item],
    weights: &[&BTreeMap<usize, CloneWeights>],
) -> Result<NodeId> {
    let steps = batch_steps(batch)?;
    let mut nlls = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        nlls.push(weighted_clone_nll(g, lib, nodes, mask_row(masks, i), &item.trajectory, weights[i])?);
    }
    Ok(normalized(g, &nlls, steps))
}

/// Loss value and parameter gradients of one evaluated batch.
pub struct BatchResult {
    pub loss: f64,
    pub grads: Vec<Array>,
    /// Batch positions dropped because their lattice underflowed.
    pub skipped: Vec<usize>,
    pub steps: usize,
}

/// The learnable part of a run.
enum Model {
    Library(PolicyLibrary),
    Classifier(SubtaskClassifier),
}

impl Model {
    fn parameters(&self) -> Vec<&Array> {
        match self {
            Self::Library(l) => l.parameters(),
            Self::Classifier(c) => c.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Array> {
        match self {
            Self::Library(l) => l.parameters_mut(),
            Self::Classifier(c) => c.parameters_mut(),
        }
    }
}

/// Which objective a learning stage optimizes.
enum Stage<'a> {
    GtBc,
    Taco,
    Ctc,
    Soft(&'a [Option<BTreeMap<usize, CloneWeights>>]),
    /// Hard segmentations decoded per item; `None` marks skipped items.
    Decoded(&'a [Option<Vec<usize>>]),
}

fn sample_masks(lib: &PolicyLibrary, rate: f64, seed: u64, epoch: usize, item: usize) -> Vec<DropoutMask> {
    let mut r = rng::stream(seed, &format!("train/dropout/{epoch}/{item}"));
    lib.policies()
        .iter()
        .map(|p| DropoutMask::sample(p.stop.hidden_units(), rate, &mut r))
        .collect()
}

/// Evaluates one batch, dropping trajectories whose lattice degenerates.
fn batch_gradient(
    model: &Model,
    stage: &Stage<'_>,
    batch: &[(usize, &Item)],
    rate: f64,
    seed: u64,
    epoch: usize,
) -> Result<BatchResult> {
    let mut active: Vec<usize> = (0..batch.len()).collect();
    let mut skipped = Vec::new();
    loop {
        if active.is_empty() {
            return Ok(BatchResult {
                loss: 0.0,
                grads: Vec::new(),
                skipped,
                steps: 0,
            });
        }
        let items: Vec<&Item> = active.iter().map(|&i| batch[i].1).collect();
        let mut g = GraphBuilder::new();
        let mut extra: Vec<Array> = Vec::new();
        let (loss, lattices) = match model {
            Model::Classifier(clf) => {
                let nodes = clf.register(&mut g);
                let b = ctc_loss(&mut g, &nodes, clf.k(), &items)?;
                (b.loss, b.lattices)
            }
            Model::Library(lib) => {
                let nodes = lib.register(&mut g);
                let mut masks = Vec::with_capacity(items.len());
                for &i in &active {
                    let sampled = sample_masks(lib, rate, seed, epoch, batch[i].0);
                    let mut row = Vec::with_capacity(sampled.len());
                    for m in sampled {
                        row.push(Some(g.leaf(&[m.len()])));
                        extra.push(m.multipliers());
                    }
                    masks.push(row);
                }
                match stage {
                    Stage::Taco => {
                        let b = taco_loss(&mut g, lib, &nodes, &masks, &items)?;
                        (b.loss, b.lattices)
                    }
                    Stage::GtBc => (gt_bc_loss(&mut g, lib, &nodes, &masks, &items)?, Vec::new()),
                    Stage::Soft(all) => {
                        let w: Vec<_> = active
                            .iter()
                            .map(|&i| all[batch[i].0].as_ref().expect("filtered"))
                            .collect();
                        (soft_bc_loss(&mut g, lib, &nodes, &masks, &items, &w)?, Vec::new())
                    }
                    Stage::Decoded(all) => {
                        let w: Vec<_> = active
                            .iter()
                            .map(|&i| segmentation_weights(all[batch[i].0].as_ref().expect("filtered")))
                            .collect();
                        let refs: Vec<_> = w.iter().collect();
                        (soft_bc_loss(&mut g, lib, &nodes, &masks, &items, &refs)?, Vec::new())
                    }
                    Stage::Ctc => unreachable!("classifier stage uses the classifier model"),
                }
            }
        };
        let graph = g.finish()?;
        let params = model.parameters();
        let n_params = params.len();
        let mut bindings = params;
        bindings.extend(extra.iter());
        let mut result = graph.evaluate(&bindings);
        let mut degenerate = None;
        for (pos, lat) in &lattices {
            match check_lattice(result, lat) {
                Ok(e) => result = Ok(e),
                Err(Error::DegenerateLattice { .. }) => {
                    degenerate = Some(*pos);
                    result = Err(Error::Refused(String::new()));
                    break;
                }
                Err(e) => {
                    result = Err(e);
                }
            }
        }
        if let Some(pos) = degenerate {
            skipped.push(active.remove(pos));
            continue;
        }
        let eval = result?;
        let grads = graph.backward(&eval, loss)?.into_leaves();
        return Ok(BatchResult {
            loss: eval.scalar(loss),
            grads: grads.into_iter().take(n_params).collect(),
            skipped,
            steps: items.iter().map(|i| i.trajectory.len()).sum(),
        });
    }
}

struct StageOutcome {
    history: Vec<EpochRecord>,
    skipped_trajectories: usize,
    skipped_steps: usize,
}

fn run_stage(
    model: &mut Model,
    stage: &Stage<'_>,
    items: &[(usize, &Item)],
    cfg: &TrainConfig,
    name: &str,
    start: Instant,
) -> Result<StageOutcome> {
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut skipped_trajectories = 0;
    let dropout = matches!(model, Model::Library(_));
    for epoch in 0..cfg.epochs {
        let rate = if dropout { cfg.dropout_rate(epoch) } else { 0.0 };
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::stream(cfg.rng_seed, &format!("train/{name}/shuffle/{epoch}")));
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &Item)> = chunk.iter().map(|&i| items[i]).collect();
            let r = batch_gradient(model, stage, &batch, rate, cfg.rng_seed, epoch)?;
            skipped_trajectories += r.skipped.len();
            if !r.skipped.is_empty() {
                log::warn!("epoch {epoch}: skipped {} degenerate trajectories", r.skipped.len());
            }
            if r.steps == 0 {
                continue;
            }
            total += r.loss * r.steps as f64;
            steps += r.steps;
            adaptive_step(&mut model.parameters_mut(), &r.grads, &mut adam)?;
        }
        let loss = if steps > 0 { total / steps as f64 } else { f64::NAN };
        log::debug!("{name} epoch {epoch}: loss {loss:.6}");
        history.push(EpochRecord {
            epoch,
            loss,
            dropout_rate: rate,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(StageOutcome {
        history,
        skipped_trajectories,
        skipped_steps: adam.skipped(),
    })
}

/// Negative log-likelihood per timestep of `data` under a library, using
/// the ground-truth segmentations. No dropout.
pub fn segmented_nll(lib: &PolicyLibrary, data: &Dataset) -> Result<f64> {
    let items: Vec<&Item> = data.items().iter().collect();
    let mut g = GraphBuilder::new();
    let nodes = lib.register(&mut g);
    let loss = gt_bc_loss(&mut g, lib, &nodes, &[], &items)?;
    let graph = g.finish()?;
    Ok(graph.evaluate(&lib.parameters())?.scalar(loss))
}

/// Per-timestep negative joint log-likelihood of `data`, skipping degenerate
/// trajectories. Returns the loss and the number skipped.
pub fn taco_nll(lib: &PolicyLibrary, data: &Dataset) -> Result<(f64, usize)> {
    let model = Model::Library(lib.clone());
    let batch: Vec<(usize, &Item)> = data.items().iter().enumerate().collect();
    let r = batch_gradient(&model, &Stage::Taco, &batch, 0.0, 0, 0)?;
    Ok((r.loss, r.skipped.len()))
}

/// Trains the configured algorithm. Reproducible from `cfg.rng_seed`.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Structural("training data is empty".into()));
    }
    if cfg.algorithm == Algorithm::GtBc && data.items().iter().any(|i| i.alignment.is_none()) {
        return Err(Error::Structural(
            "gt-bc requires ground-truth alignments on every training item".into(),
        ));
    }
    let start = Instant::now();
    let (d_s, d_a, k) = (data.state_dim(), data.action_dim(), data.k());
    let lib = PolicyLibrary::init(k, d_s, d_a, &cfg.hidden_sizes, rng::derive_seed(cfg.rng_seed, "train/policies"))?;
    let items: Vec<(usize, &Item)> = data.items().iter().enumerate().collect();
    let mut model = Model::Library(lib);
    let mut classifier_history = Vec::new();
    let mut classifier = None;
    let mut skipped_trajectories = 0;
    let mut skipped_steps = 0;
    let outcome = match cfg.algorithm {
        Algorithm::GtBc => run_stage(&mut model, &Stage::GtBc, &items, cfg, "policies", start)?,
        Algorithm::Taco => run_stage(&mut model, &Stage::Taco, &items, cfg, "policies", start)?,
        Algorithm::CtcBcArgmax | Algorithm::CtcBcProb => {
            let clf = SubtaskClassifier::init(d_s, d_a, k, &cfg.hidden_sizes, rng::derive_seed(cfg.rng_seed, "train/classifier"))?;
            let mut clf_model = Model::Classifier(clf);
            let first = run_stage(&mut clf_model, &Stage::Ctc, &items, cfg, "classifier", start)?;
            classifier_history = first.history;
            skipped_trajectories += first.skipped_trajectories;
            skipped_steps += first.skipped_steps;
            let Model::Classifier(clf) = clf_model else { unreachable!() };
            let mut lattices = Vec::with_capacity(items.len());
            for (i, item) in &items {
                match ctc_forward(&clf, &item.trajectory, &item.sketch) {
                    Ok(l) => lattices.push(Some(l)),
                    Err(Error::DegenerateLattice { .. }) => {
                        log::warn!("item {i}: degenerate CTC lattice, excluded from cloning");
                        skipped_trajectories += 1;
                        lattices.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
            let usable: Vec<(usize, &Item)> = items.iter().copied().filter(|(i, _)| lattices[*i].is_some()).collect();
            let outcome = if cfg.algorithm == Algorithm::CtcBcArgmax {
                let decoded: Vec<Option<Vec<usize>>> = lattices.iter().map(|l| l.as_ref().map(decode_argmax)).collect();
                run_stage(&mut model, &Stage::Decoded(&decoded), &usable, cfg, "policies", start)?
            } else {
                let weights: Vec<_> = lattices
                    .iter()
                    .map(|l| {
                        l.as_ref().map(|l| {
                            let p = soft_alignment(l);
                            soft_weights(&l.sketch, &p, &ctc_stop_targets(&p))
                        })
                    })
                    .collect();
                run_stage(&mut model, &Stage::Soft(&weights), &usable, cfg, "policies", start)?
            };
            classifier = Some(clf);
            outcome
        }
    };
    let Model::Library(library) = model else { unreachable!() };
    Ok(TrainReport {
        algorithm: cfg.algorithm,
        history: outcome.history,
        classifier_history,
        library,
        classifier,
        wall_clock_s: start.elapsed().as_secs_f64(),
        skipped_trajectories: skipped_trajectories + outcome.skipped_trajectories,
        skipped_steps: skipped_steps + outcome.skipped_steps,
    })
}

/// Classifier-only CTC training, exposed for inspection of the first stage.
pub fn train_classifier(cfg: &TrainConfig, data: &Dataset) -> Result<(SubtaskClassifier, Vec<EpochRecord>)> {
    cfg.validate()?;
    let clf = SubtaskClassifier::init(
        data.state_dim(),
        data.action_dim(),
        data.k(),
        &cfg.hidden_sizes,
        rng::derive_seed(cfg.rng_seed, "train/classifier"),
    )?;
    let items: Vec<(usize, &Item)> = data.items().iter().enumerate().collect();
    let mut model = Model::Classifier(clf);
    let outcome = run_stage(&mut model, &Stage::Ctc, &items, cfg, "classifier", Instant::now())?;
    let Model::Classifier(clf) = model else { unreachable!() };
    Ok((clf, outcome.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_item(t: usize, ids: Vec<usize>, seed: u64) -> Item {
        let mut r = rng::stream(seed, "toy");
        let s = (0..t * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = (0..t * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        let trajectory = Trajectory::new(Array::matrix(t, 3, s).unwrap(), Array::matrix(t, 2, a).unwrap()).unwrap();
        Item {
            sketch: Sketch::collapse(&ids).unwrap(),
            alignment: Some(ids),
            trajectory,
        }
    }

    #[test]
    fn segment_stops() {
        assert_eq!(segment_stop_targets(&[1, 1, 2, 2]), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(segment_stop_targets(&[3, 3, 3]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!(matches!("bc".parse::<Algorithm>(), Err(Error::Structural(_))));
    }

    #[test]
    fn dropout_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.dropout_rate(0), 0.5);
        assert!(cfg.dropout_rate(1) < cfg.dropout_rate(0));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut x = Array::vector(vec![1.0, -2.0]);
        let mut adam = Adam::new(0.1);
        adaptive_step(&mut [&mut x], &[Array::zeros(&[2])], &mut adam).unwrap();
        assert_eq!(x.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut x = Array::vector(vec![1.0]);
        let mut adam = Adam::new(0.1);
        let applied = adaptive_step(&mut [&mut x], &[Array::vector(vec![f64::NAN])], &mut adam).unwrap();
        assert!(!applied);
        assert_eq!(adam.skipped(), 1);
        assert_eq!(x.data(), &[1.0]);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut x = Array::scalar(5.0);
        let mut adam = Adam::new(0.01);
        let mut reached = None;
        for step in 0..2000 {
            let g = Array::scalar(2.0 * x.item());
            adaptive_step(&mut [&mut x], &[g], &mut adam).unwrap();
            if x.item().abs() < 0.01 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", x.item());
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let mut x = Array::vector(vec![0.0, 0.0]);
        let mut adam = Adam::new(0.01);
        let g = Array::vector(vec![3.0, -0.5]);
        let mut prev = x.clone();
        for _ in 0..500 {
            prev = x.clone();
            adaptive_step(&mut [&mut x], std::slice::from_ref(&g), &mut adam).unwrap();
        }
        assert!((prev.data()[0] - x.data()[0] - 0.01).abs() < 1e-6);
        assert!((x.data()[1] - prev.data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn gt_bc_requires_alignment() {
        let mut item = toy_item(4, vec![0, 0, 1, 1], 0);
        item.alignment = None;
        let lib = PolicyLibrary::init(2, 3, 2, &[4], 0).unwrap();
        let mut g = GraphBuilder::new();
        let nodes = lib.register(&mut g);
        assert!(matches!(gt_bc_loss(&mut g, &lib, &nodes, &[], &[&item]), Err(Error::Structural(_))));
    }

    #[test]
    fn train_rejects_gt_bc_without_alignments() {
        let data = Dataset::new(vec![toy_item(4, vec![0, 0, 1, 1], 0)], 2).unwrap().without_alignments();
        let cfg = TrainConfig {
            algorithm: Algorithm::GtBc,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &data), Err(Error::Structural(_))));
    }

    #[test]
    fn dataset_validates_alignment() {
        let mut item = toy_item(4, vec![0, 0, 1, 1], 0);
        item.alignment = Some(vec![0, 1, 0, 1]);
        assert!(Dataset::new(vec![item], 2).is_err());
        assert!(Dataset::new(vec![toy_item(4, vec![0, 0, 3, 3], 0)], 2).is_err());
    }

    #[test]
    fn soft_weights_of_one_hot_match_segmentation_actions() {
        let ids = vec![1, 1, 0, 0, 0, 2];
        let tau = Sketch::collapse(&ids).unwrap();
        let pos = tau.positions_of(&ids).unwrap();
        let p = SoftAlignment::from_positions(&pos, tau.len());
        let soft = soft_weights(&tau, &p, &ctc_stop_targets(&p));
        let hard = segmentation_weights(&ids);
        for (k, w) in &hard {
            assert_eq!(soft[k].action, w.action);
        }
    }
}
