//! Forward lattices over sketch-consistent alignments.
//!
//! Both lattices share one recursion shape: a path is a monotone assignment of
//! the `T` timesteps to the `L` sketch positions, starting at the first and
//! ending at the last position. The CTC lattice weights the nodes with
//! classifier probabilities `p(b_l | s_t, a_t)`; the joint lattice weights nodes
//! with the sub-policy action densities and edges with the stop (`l-1 -> l`) and
//! non-stop (`l -> l`) probabilities of the sub-policies.
//!
//! Rows are rescaled to sum to one after every step. The log-likelihood is the sum
//! of the log normalizers, which equals the log of the unscaled final entry
//! because the last row has a single feasible cell. Lattices are built as
//! autodiff graphs so that training can differentiate through them; the
//! `*_forward` functions evaluate the same graphs and return plain values.

use crate::autodiff::{Array, Evaluation, GraphBuilder, NodeId, LOG_FLOOR};
use crate::policy::{
    classifier_log_probs, state_action_matrix, DropoutMask, LibraryNodes, PolicyLibrary, SubtaskClassifier,
};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::Write;

/// Largest number of paths [`enumerate_paths`] will materialize.
pub const MAX_ENUMERATED_PATHS: u128 = 1_000_000;

/// Bounds applied to derived stop targets.
pub const STOP_TARGET_EPS: f64 = 1e-6;

/// Below this, a soft-alignment entry is treated as zero when deriving stop targets.
pub const STOP_TARGET_MIN_MASS: f64 = 1e-12;

/// A `T`-step state/action demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Array,
    actions: Array,
}

impl Trajectory {
    pub fn new(states: Array, actions: Array) -> Result<Self> {
        if states.shape().len() != 2 || actions.shape().len() != 2 {
            return Err(Error::Structural("states and actions must be matrices".into()));
        }
        if states.rows() == 0 {
            return Err(Error::Structural("a trajectory needs at least one step".into()));
        }
        if states.rows() != actions.rows() {
            return Err(Error::Structural(format!(
                "{} states but {} actions",
                states.rows(),
                actions.rows()
            )));
        }
        if !states.is_finite() || !actions.is_finite() {
            return Err(Error::Structural("trajectory entries must be finite".into()));
        }
        Ok(Self { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn states(&self) -> &Array {
        &self.states
    }

    pub fn actions(&self) -> &Array {
        &self.actions
    }

    pub fn state(&self, t: usize) -> &[f64] {
        self.states.row(t)
    }

    pub fn action(&self, t: usize) -> &[f64] {
        self.actions.row(t)
    }

    pub fn state_dim(&self) -> usize {
        self.states.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.cols()
    }
}

/// Ordered sub-task ids with no two adjacent entries equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sketch(Vec<usize>);

impl Sketch {
    pub fn new(subtasks: Vec<usize>) -> Result<Self> {
        if subtasks.is_empty() {
            return Err(Error::Structural("a sketch needs at least one sub-task".into()));
        }
        if subtasks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Structural(format!(
                "sketch {subtasks:?} repeats a sub-task in adjacent positions"
            )));
        }
        Ok(Self(subtasks))
    }

    /// Removes adjacent duplicates from a per-timestep assignment.
    pub fn collapse(ids: &[usize]) -> Result<Self> {
        let mut out: Vec<usize> = Vec::new();
        for &id in ids {
            if out.last() != Some(&id) {
                out.push(id);
            }
        }
        Self::new(out)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, l: usize) -> usize {
        self.0[l]
    }

    pub fn max_id(&self) -> usize {
        *self.0.iter().max().expect("non-empty")
    }

    /// Sketch positions for a per-timestep id sequence that collapses to this
    /// sketch, or `None` if it does not.
    pub fn positions_of(&self, ids: &[usize]) -> Option<Vec<usize>> {
        let mut pos = Vec::with_capacity(ids.len());
        let mut l = 0;
        for (t, &id) in ids.iter().enumerate() {
            if t == 0 {
                if id != self.0[0] {
                    return None;
                }
            } else if id != self.0[l] {
                l += 1;
                if l >= self.0.len() || id != self.0[l] {
                    return None;
                }
            }
            pos.push(l);
        }
        (l + 1 == self.0.len()).then_some(pos)
    }
}

/// A length-`T` monotone assignment of timesteps to sketch positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Path {
    positions: Vec<usize>,
}

impl Path {
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// The per-timestep sub-task ids under `sketch`.
    pub fn ids(&self, sketch: &Sketch) -> Vec<usize> {
        self.positions.iter().map(|&l| sketch.get(l)).collect()
    }
}

fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Number of monotone surjective assignments of `t` steps onto `l` positions.
pub fn path_count(t: usize, l: usize) -> u128 {
    if l == 0 || l > t {
        return 0;
    }
    binomial(t as u64 - 1, l as u64 - 1)
}

fn check_lengths(t: usize, l: usize) -> Result<()> {
    if l == 0 || t == 0 {
        return Err(Error::Structural("T and L must be at least 1".into()));
    }
    if l > t {
        return Err(Error::Structural(format!("sketch length {l} exceeds trajectory length {t}")));
    }
    Ok(())
}

/// All paths for a `t`-step trajectory and an `l`-entry sketch.
pub fn enumerate_paths(t: usize, l: usize) -> Result<Vec<Path>> {
    check_lengths(t, l)?;
    let count = path_count(t, l);
    if count > MAX_ENUMERATED_PATHS {
        return Err(Error::Refused(format!(
            "{count} paths for T={t}, L={l} exceeds the enumeration limit of {MAX_ENUMERATED_PATHS}"
        )));
    }
    // A path is fixed by the L-1 switch times chosen from 1..T.
    let mut out = Vec::with_capacity(count as usize);
    let mut switches: Vec<usize> = (1..l).collect();
    loop {
        let mut positions = Vec::with_capacity(t);
        let mut pos = 0;
        for step in 0..t {
            while pos < switches.len() && switches[pos] == step {
                pos += 1;
            }
            positions.push(pos);
        }
        out.push(Path { positions });
        // Advance to the next combination in lexicographic order.
        let k = switches.len();
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            if switches[i] < t - (k - i) {
                switches[i] += 1;
                for j in i + 1..k {
                    switches[j] = switches[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Feasible sketch positions at step `t` (0-based, inclusive bounds).
pub fn feasible_band(t: usize, big_t: usize, big_l: usize) -> (usize, usize) {
    let lo = (big_l + t).saturating_sub(big_t);
    let hi = t.min(big_l - 1);
    (lo, hi)
}

/// Rescaled forward variables of one trajectory/sketch pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentLattice {
    /// `T × L`; each row sums to one over its feasible band.
    pub alpha: Array,
    /// Per-step normalizers.
    pub scale: Vec<f64>,
    /// `Σ_t log scale_t`, the log of the unscaled final forward variable.
    pub log_likelihood: f64,
    pub sketch: Sketch,
}

/// Per-timestep distribution over sketch positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAlignment {
    pub p: Array,
}

/// Graph handles for a lattice recursion.
#[derive(Clone, Debug)]
pub struct LatticeNodes {
    /// Rescaled row per step; each is the output of the normalizing division.
    pub rows: Vec<NodeId>,
    pub scales: Vec<NodeId>,
    pub log_likelihood: NodeId,
    pub steps: usize,
    pub positions: usize,
}

/// Edge weights of the joint lattice: per sketch position and step, the
/// probability that the sub-policy stops and the probability that it continues.
struct Transitions {
    stop: NodeId,
    stay: NodeId,
}

fn position_major(l: usize, t: usize, big_t: usize) -> usize {
    l * big_t + t
}

/// Builds the rescaled recursion. `emissions`, and the transition vectors when
/// given, are flat position-major vectors (entry `l*T + t`).
fn build_recursion(
    g: &mut GraphBuilder,
    emissions: NodeId,
    transitions: Option<Transitions>,
    big_t: usize,
    big_l: usize,
) -> LatticeNodes {
    let row_indices = |t: usize| -> Vec<Option<usize>> {
        (0..big_l).map(|l| Some(position_major(l, t, big_t))).collect()
    };
    let mut rows = Vec::with_capacity(big_t);
    let mut scales = Vec::with_capacity(big_t);
    let mut logs = Vec::with_capacity(big_t);
    for t in 0..big_t {
        let (lo, hi) = feasible_band(t, big_t, big_l);
        let band: Vec<Option<usize>> = (0..big_l).map(|l| (lo..=hi).contains(&l).then_some(l)).collect();
        let unnormalized = if t == 0 {
            let mut first = vec![None; big_l];
            first[0] = Some(position_major(0, 0, big_t));
            g.select(emissions, first)
        } else {
            let prev = rows[t - 1];
            let shift: Vec<Option<usize>> = (0..big_l).map(|l| l.checked_sub(1)).collect();
            let inflow = match &transitions {
                Some(tr) => {
                    let stop = g.select(tr.stop, row_indices(t));
                    let stay = g.select(tr.stay, row_indices(t));
                    let leaving = g.mul(prev, stop);
                    let arriving = g.select(leaving, shift);
                    let staying = g.mul(prev, stay);
                    g.add(arriving, staying)
                }
                None => {
                    let arriving = g.select(prev, shift);
                    g.add(prev, arriving)
                }
            };
            let e = g.select(emissions, row_indices(t));
            let weighted = g.mul(e, inflow);
            if lo > 0 {
                g.select(weighted, band)
            } else {
                weighted
            }
        };
        let c = g.sum(unnormalized);
        let row = g.div_scalar(unnormalized, c);
        rows.push(row);
        scales.push(c);
        logs.push(g.log(c));
    }
    let all = g.concat(&logs);
    let log_likelihood = g.sum(all);
    LatticeNodes {
        rows,
        scales,
        log_likelihood,
        steps: big_t,
        positions: big_l,
    }
}

/// CTC lattice graph for classifier parameters registered as `clf`.
pub fn ctc_lattice_nodes(
    g: &mut GraphBuilder,
    clf: &crate::policy::MlpNodes,
    k: usize,
    rho: &Trajectory,
    tau: &Sketch,
) -> Result<LatticeNodes> {
    let (big_t, big_l) = (rho.len(), tau.len());
    check_lengths(big_t, big_l)?;
    if tau.max_id() >= k {
        return Err(Error::Structural(format!("sketch id {} outside 0..{k}", tau.max_id())));
    }
    let inputs = g.constant(state_action_matrix(rho.states(), rho.actions()));
    let log_probs = classifier_log_probs(g, clf, inputs);
    let indices = (0..big_l)
        .flat_map(|l| (0..big_t).map(move |t| Some(t * k + tau.get(l))))
        .collect();
    let picked = g.select(log_probs, indices);
    let emissions = g.exp(picked);
    Ok(build_recursion(g, emissions, None, big_t, big_l))
}

/// Per-sub-task graph quantities on one trajectory's states.
pub struct PolicyTerms {
    /// Action log-density per step.
    pub log_prob: NodeId,
    /// Stop logit per step.
    pub stop_logit: NodeId,
}

/// Registers the per-step action log-densities and stop logits of every
/// sub-policy appearing in `tau`, keyed by sub-task id.
pub fn policy_terms(
    g: &mut GraphBuilder,
    lib: &PolicyLibrary,
    nodes: &LibraryNodes,
    masks: &[Option<NodeId>],
    rho: &Trajectory,
    ids: impl IntoIterator<Item = usize>,
) -> Result<BTreeMap<usize, PolicyTerms>> {
    let states = g.constant(rho.states().clone());
    let actions = g.constant(rho.actions().clone());
    let mut terms = BTreeMap::new();
    for id in ids {
        if terms.contains_key(&id) {
            continue;
        }
        lib.policy(id)?;
        let p = &nodes.policies[id];
        let log_prob = p.action_log_prob(g, states, actions);
        let stop_logit = p.stop_logits(g, states, masks.get(id).copied().flatten());
        terms.insert(id, PolicyTerms { log_prob, stop_logit });
    }
    Ok(terms)
}

/// Joint lattice graph. `masks[k]` is the dropout multiplier leaf for the stop
/// network of sub-policy `k`, or `None` for no dropout.
pub fn taco_lattice_nodes(
    g: &mut GraphBuilder,
    lib: &PolicyLibrary,
    nodes: &LibraryNodes,
    masks: &[Option<NodeId>],
    rho: &Trajectory,
    tau: &Sketch,
) -> Result<LatticeNodes> {
    let (big_t, big_l) = (rho.len(), tau.len());
    check_lengths(big_t, big_l)?;
    let terms = policy_terms(g, lib, nodes, masks, rho, tau.ids().iter().copied())?;
    let mut emission_parts = Vec::with_capacity(big_l);
    let mut stop_parts = Vec::with_capacity(big_l);
    let mut stay_parts = Vec::with_capacity(big_l);
    let mut probs: BTreeMap<usize, (NodeId, NodeId, NodeId)> = BTreeMap::new();
    for &id in tau.ids() {
        let entry = *probs.entry(id).or_insert_with(|| {
            let term = &terms[&id];
            let emission = g.exp(term.log_prob);
            let stop = g.sigmoid(term.stop_logit);
            let neg = g.neg(term.stop_logit);
            let stay = g.sigmoid(neg);
            (emission, stop, stay)
        });
        emission_parts.push(entry.0);
        stop_parts.push(entry.1);
        stay_parts.push(entry.2);
    }
    let emissions = g.concat(&emission_parts);
    let stop = g.concat(&stop_parts);
    let stay = g.concat(&stay_parts);
    Ok(build_recursion(g, emissions, Some(Transitions { stop, stay }), big_t, big_l))
}

/// Maps an evaluation failure inside a lattice to [`Error::DegenerateLattice`]
/// and checks for rows whose normalizer underflowed.
pub fn check_lattice(result: Result<Evaluation>, nodes: &LatticeNodes) -> Result<Evaluation> {
    let eval = match result {
        Ok(e) => e,
        Err(Error::Numeric { index, message, node }) => {
            if let Some(t) = nodes.rows.iter().position(|r| r.index() == index) {
                return Err(Error::DegenerateLattice { t });
            }
            return Err(Error::Numeric { index, message, node });
        }
        Err(e) => return Err(e),
    };
    for (t, &c) in nodes.scales.iter().enumerate() {
        let v = eval.scalar(c);
        if !(v >= LOG_FLOOR) || !v.is_finite() {
            return Err(Error::DegenerateLattice { t });
        }
    }
    Ok(eval)
}

/// Reads the plain lattice values out of an evaluation.
pub fn lattice_values(eval: &Evaluation, nodes: &LatticeNodes, sketch: &Sketch) -> AlignmentLattice {
    let mut alpha = Vec::with_capacity(nodes.steps * nodes.positions);
    for &r in &nodes.rows {
        alpha.extend_from_slice(eval.value(r).data());
    }
    AlignmentLattice {
        alpha: Array::matrix(nodes.steps, nodes.positions, alpha).expect("sized by construction"),
        scale: nodes.scales.iter().map(|&c| eval.scalar(c)).collect(),
        log_likelihood: eval.scalar(nodes.log_likelihood),
        sketch: sketch.clone(),
    }
}

/// CTC forward variables of `tau` given `rho` under `clf`.
pub fn ctc_forward(clf: &SubtaskClassifier, rho: &Trajectory, tau: &Sketch) -> Result<AlignmentLattice> {
    let mut g = GraphBuilder::new();
    let nodes = clf.register(&mut g);
    let lattice = ctc_lattice_nodes(&mut g, &nodes, clf.k(), rho, tau)?;
    let graph = g.finish()?;
    let eval = check_lattice(graph.evaluate(&clf.parameters()), &lattice)?;
    Ok(lattice_values(&eval, &lattice, tau))
}

/// Joint forward variables of `tau` and the actions of `rho` given its states.
/// `masks` holds one dropout mask per sub-policy (all-ones for evaluation).
pub fn taco_forward(
    lib: &PolicyLibrary,
    rho: &Trajectory,
    tau: &Sketch,
    masks: &[DropoutMask],
) -> Result<AlignmentLattice> {
    if masks.len() != lib.k() {
        return Err(Error::Structural(format!(
            "{} dropout masks for {} sub-policies",
            masks.len(),
            lib.k()
        )));
    }
    let mut g = GraphBuilder::new();
    let nodes = lib.register(&mut g);
    let mask_nodes: Vec<Option<NodeId>> = masks.iter().map(|m| Some(g.leaf(&[m.len()]))).collect();
    let lattice = taco_lattice_nodes(&mut g, lib, &nodes, &mask_nodes, rho, tau)?;
    let graph = g.finish()?;
    let multipliers: Vec<Array> = masks.iter().map(DropoutMask::multipliers).collect();
    let mut bindings = lib.parameters();
    bindings.extend(multipliers.iter());
    let eval = check_lattice(graph.evaluate(&bindings), &lattice)?;
    Ok(lattice_values(&eval, &lattice, tau))
}

impl AlignmentLattice {
    pub fn steps(&self) -> usize {
        self.alpha.rows()
    }

    pub fn positions(&self) -> usize {
        self.alpha.cols()
    }

    /// Per-step argmax sketch position; ties go to the smaller position.
    pub fn decode_positions(&self) -> Vec<usize> {
        (0..self.steps())
            .map(|t| {
                let row = self.alpha.row(t);
                let mut best = 0;
                for (l, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = l;
                    }
                }
                best
            })
            .collect()
    }

    /// Writes one `t,l,alpha,scale` row per feasible cell (0-based indices).
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "l", "alpha", "scale"])?;
        let (big_t, big_l) = (self.steps(), self.positions());
        for t in 0..big_t {
            let (lo, hi) = feasible_band(t, big_t, big_l);
            for l in lo..=hi {
                w.serialize((t, l, self.alpha.get(t, l), self.scale[t]))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-step argmax of the forward variables, mapped to sub-task ids.
pub fn decode_argmax(lattice: &AlignmentLattice) -> Vec<usize> {
    lattice
        .decode_positions()
        .into_iter()
        .map(|l| lattice.sketch.get(l))
        .collect()
}

/// Row-normalized forward variables.
pub fn soft_alignment(lattice: &AlignmentLattice) -> SoftAlignment {
    let (big_t, big_l) = (lattice.steps(), lattice.positions());
    let mut p = Vec::with_capacity(big_t * big_l);
    for t in 0..big_t {
        let row = lattice.alpha.row(t);
        let total: f64 = row.iter().sum();
        p.extend(row.iter().map(|v| v / total));
    }
    SoftAlignment {
        p: Array::matrix(big_t, big_l, p).expect("sized by construction"),
    }
}

/// Stop-action targets derived from a soft alignment.
///
/// `stop[t][l]` is the target probability that the sub-policy at sketch position
/// `l` emits the stop action in state `s_t`, for `t >= 1`. Row 0 is always
/// undefined because stops are consumed by transitions into step `t` from `t-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct StopTargets {
    pub stop: Vec<Vec<Option<f64>>>,
}

impl StopTargets {
    pub fn get(&self, t: usize, l: usize) -> Option<f64> {
        self.stop[t][l]
    }
}

impl SoftAlignment {
    pub fn steps(&self) -> usize {
        self.p.rows()
    }

    pub fn positions(&self) -> usize {
        self.p.cols()
    }

    pub fn get(&self, t: usize, l: usize) -> f64 {
        self.p.get(t, l)
    }

    /// One-hot rows for a path.
    pub fn from_positions(positions: &[usize], big_l: usize) -> Self {
        let mut p = vec![0.0; positions.len() * big_l];
        for (t, &l) in positions.iter().enumerate() {
            p[t * big_l + l] = 1.0;
        }
        Self {
            p: Array::matrix(positions.len(), big_l, p).expect("sized by construction"),
        }
    }
}

/// Unclamped non-stop probabilities that carry `p_t` to `p_{t+1}` through the
/// stay/stop transfer relations. `None` marks cells whose source mass is below
/// [`STOP_TARGET_MIN_MASS`].
pub fn raw_continue_targets(p: &SoftAlignment) -> Vec<Vec<Option<f64>>> {
    let (big_t, big_l) = (p.steps(), p.positions());
    let mut out = vec![vec![None; big_l]; big_t];
    for t in 0..big_t.saturating_sub(1) {
        let (now, next) = (p.p.row(t), p.p.row(t + 1));
        for l in 0..big_l {
            if now[l] < STOP_TARGET_MIN_MASS {
                continue;
            }
            let inflow = if l == 0 {
                0.0
            } else if now[l - 1] < STOP_TARGET_MIN_MASS {
                // Negligible mass upstream: whatever it does cannot move p.
                0.0
            } else {
                match out[t + 1][l - 1] {
                    Some(stay_prev) => now[l - 1] * (1.0 - stay_prev),
                    None => continue,
                }
            };
            out[t + 1][l] = Some((next[l] - inflow) / now[l]);
        }
    }
    out
}

/// Stop targets from a soft alignment, clamped to `[ε, 1-ε]`. The final
/// sketch position has no successor, so its defined targets are exactly 0.
pub fn ctc_stop_targets(p: &SoftAlignment) -> StopTargets {
    let raw = raw_continue_targets(p);
    let last = p.positions().saturating_sub(1);
    let stop = raw
        .into_iter()
        .map(|row| {
            row.into_iter()
                .enumerate()
                .map(|(l, c)| {
                    c.map(|stay| {
                        if l == last {
                            0.0
                        } else {
                            (1.0 - stay).clamp(STOP_TARGET_EPS, 1.0 - STOP_TARGET_EPS)
                        }
                    })
                })
                .collect()
        })
        .collect();
    StopTargets { stop }
}

/// Probability of a path under the stop heads: the product, from the second
/// step on, of the stop probability at each switch and the non-stop
/// probability elsewhere.
pub fn path_prior(lib: &PolicyLibrary, rho: &Trajectory, tau: &Sketch, path: &Path) -> Result<f64> {
    let pos = path.positions();
    let mut prob = 1.0;
    for t in 1..rho.len() {
        let (prev, now) = (pos[t - 1], pos[t]);
        if now == prev {
            let p = lib.policy(tau.get(now))?;
            prob *= 1.0 - p.stop_prob(rho.state(t), &p.ones_mask())?;
        } else {
            let p = lib.policy(tau.get(prev))?;
            prob *= p.stop_prob(rho.state(t), &p.ones_mask())?;
        }
    }
    Ok(prob)
}

/// Exact joint likelihood by summing over every path.
pub fn brute_force_joint(lib: &PolicyLibrary, rho: &Trajectory, tau: &Sketch) -> Result<f64> {
    let paths = enumerate_paths(rho.len(), tau.len())?;
    let mut total = 0.0;
    for path in &paths {
        let mut term = path_prior(lib, rho, tau, path)?;
        for (t, &l) in path.positions().iter().enumerate() {
            term *= lib.policy(tau.get(l))?.action_log_prob(rho.state(t), rho.action(t)).exp();
        }
        total += term;
    }
    Ok(total)
}

/// Exact CTC likelihood by summing over every path.
pub fn brute_force_ctc(clf: &SubtaskClassifier, rho: &Trajectory, tau: &Sketch) -> Result<f64> {
    let paths = enumerate_paths(rho.len(), tau.len())?;
    let log_probs: Vec<Vec<f64>> = (0..rho.len())
        .map(|t| clf.log_probs(rho.state(t), rho.action(t)))
        .collect();
    Ok(paths
        .iter()
        .map(|path| {
            path.positions()
                .iter()
                .enumerate()
                .map(|(t, &l)| log_probs[t][tau.get(l)].exp())
                .product::<f64>()
        })
        .sum())
}
