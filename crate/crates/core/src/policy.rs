//! Sub-policy networks and the CTC sub-task classifier.
//!
//! A [`SubPolicy`] owns two separate tanh MLPs: an action head producing the
//! mean of a unit-variance Gaussian over actions, and a stop head producing one
//! logit for the termination action. A [`PolicyLibrary`] holds one sub-policy per
//! sub-task id. Every network can be evaluated directly on plain slices (for
//! rollouts) or registered in an autodiff graph (for training).

use crate::autodiff::{Array, GraphBuilder, NodeId};
use crate::rng;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Checkpoint schema version written by [`Checkpoint`].
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fully connected layer, `y = x W + b` with `W` stored input-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array,
    pub bias: Array,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// Multilayer perceptron with tanh hidden activations and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Graph handles for the parameters of one [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpNodes {
    layers: Vec<(NodeId, NodeId)>,
    hidden: Vec<usize>,
}

fn layer_widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(output);
    widths
}

impl Mlp {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn init(input: usize, hidden: &[usize], output: usize, rng: &mut impl Rng) -> Self {
        let widths = layer_widths(input, hidden, output);
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Dense {
                    weight: Array::matrix(w[0], w[1], data).expect("sized by construction"),
                    bias: Array::zeros(&[w[1]]),
                }
            })
            .collect();
        Self { layers }
    }

    /// All parameters zero; the output is identically zero.
    pub fn zeros(input: usize, hidden: &[usize], output: usize) -> Self {
        let widths = layer_widths(input, hidden, output);
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Array::zeros(&[w[0], w[1]]),
                bias: Array::zeros(&[w[1]]),
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Structural("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Structural("consecutive layer widths disagree".into()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::Structural("bias length differs from layer width".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Dense::outputs)
            .collect()
    }

    /// Total number of hidden units, i.e. the dropout mask length.
    pub fn hidden_units(&self) -> usize {
        self.hidden_sizes().iter().sum()
    }

    pub fn parameters(&self) -> Vec<&Array> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Plain forward pass for a single input, with an optional per-hidden-unit
    /// multiplier (an already rescaled dropout mask).
    pub fn forward(&self, x: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut offset = 0;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let n = layer.outputs();
            let mut out = layer.bias.data().to_vec();
            for (p, &hv) in h.iter().enumerate() {
                let row = layer.weight.row(p);
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += hv * w;
                }
            }
            if i < last {
                for o in out.iter_mut() {
                    *o = o.tanh();
                }
                if let Some(m) = mask {
                    for (o, &mv) in out.iter_mut().zip(&m[offset..offset + n]) {
                        *o *= mv;
                    }
                }
                offset += n;
            }
            h = out;
        }
        h
    }

    /// Creates one leaf per parameter, in [`Mlp::parameters`] order.
    pub fn register(&self, g: &mut GraphBuilder) -> MlpNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.shape()), g.leaf(l.bias.shape())))
            .collect();
        MlpNodes {
            layers,
            hidden: self.hidden_sizes(),
        }
    }
}

impl MlpNodes {
    /// Applies the network to a `rows × input` matrix node. `mask`, when given,
    /// is a vector node of length equal to the total hidden units; its slices
    /// multiply the hidden activations of each layer.
    pub fn apply(&self, g: &mut GraphBuilder, x: NodeId, mask: Option<NodeId>) -> NodeId {
        let mut h = x;
        let mut offset = 0;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w);
            h = g.add_row(z, b);
            if i < last {
                h = g.tanh(h);
                if let Some(m) = mask {
                    let n = self.hidden[i];
                    let part = g.select(m, (offset..offset + n).map(Some).collect());
                    h = g.mul_row(h, part);
                    offset += n;
                }
            }
        }
        h
    }
}

/// Inverted-dropout mask over the hidden units of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    keep_rate: f64,
}

impl DropoutMask {
    /// Keeps every unit; equivalent to no dropout.
    pub fn ones(units: usize) -> Self {
        Self {
            keep: vec![true; units],
            keep_rate: 1.0,
        }
    }

    /// Drops each unit independently with probability `drop_rate`.
    pub fn sample(units: usize, drop_rate: f64, rng: &mut impl Rng) -> Self {
        if drop_rate <= 0.0 {
            return Self::ones(units);
        }
        let keep_rate = 1.0 - drop_rate;
        Self {
            keep: (0..units).map(|_| rng.random::<f64>() < keep_rate).collect(),
            keep_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep_rate(&self) -> f64 {
        self.keep_rate
    }

    /// Multipliers applied to hidden activations: `1/keep_rate` or `0`.
    pub fn multipliers(&self) -> Array {
        let scale = 1.0 / self.keep_rate;
        Array::vector(
            self.keep
                .iter()
                .map(|&k| if k { scale } else { 0.0 })
                .collect(),
        )
    }
}

/// One sub-task's policy: Gaussian action head and a separate stop head.
#[derive(Clone, Debug, PartialEq)]
pub struct SubPolicy {
    pub action: Mlp,
    pub stop: Mlp,
}

/// Graph handles for a registered [`SubPolicy`].
#[derive(Clone, Debug)]
pub struct PolicyNodes {
    pub action: MlpNodes,
    pub stop: MlpNodes,
}

/// Sum over action dimensions of the unit-variance Gaussian log-density.
pub fn gaussian_log_density(mean: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(action)
        .map(|(m, a)| -0.5 * (a - m) * (a - m) - 0.5 * LN_2PI)
        .sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Builds a sub-policy with `hidden_sizes` for both heads, reproducible from `seed`.
pub fn init_policy(d_s: usize, d_a: usize, hidden_sizes: &[usize], seed: u64) -> Result<SubPolicy> {
    if d_s == 0 || d_a == 0 {
        return Err(Error::Structural("state and action dimensions must be positive".into()));
    }
    if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
        return Err(Error::Structural("hidden_sizes must list at least one positive width".into()));
    }
    Ok(SubPolicy {
        action: Mlp::init(d_s, hidden_sizes, d_a, &mut rng::stream(seed, "policy/action")),
        stop: Mlp::init(d_s, hidden_sizes, 1, &mut rng::stream(seed, "policy/stop")),
    })
}

impl SubPolicy {
    pub fn state_dim(&self) -> usize {
        self.action.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action.output_dim()
    }

    pub fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        self.action.forward(state, None)
    }

    /// `μ(s)` plus unit-variance Gaussian noise.
    pub fn sample_action(&self, state: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        self.mean_action(state)
            .into_iter()
            .map(|m| {
                let noise: f64 = StandardNormal.sample(rng);
                m + noise
            })
            .collect()
    }

    pub fn action_log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        gaussian_log_density(&self.mean_action(state), action)
    }

    pub fn stop_logit(&self, state: &[f64], mask: &DropoutMask) -> Result<f64> {
        if mask.len() != self.stop.hidden_units() {
            return Err(Error::Structural(format!(
                "dropout mask has {} entries, stop network has {} hidden units",
                mask.len(),
                self.stop.hidden_units()
            )));
        }
        let m = mask.multipliers();
        Ok(self.stop.forward(state, Some(m.data()))[0])
    }

    /// Probability of the termination action in `state`.
    pub fn stop_prob(&self, state: &[f64], mask: &DropoutMask) -> Result<f64> {
        self.stop_logit(state, mask).map(sigmoid)
    }

    pub fn ones_mask(&self) -> DropoutMask {
        DropoutMask::ones(self.stop.hidden_units())
    }

    pub fn parameters(&self) -> Vec<&Array> {
        let mut p = self.action.parameters();
        p.extend(self.stop.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array> {
        let mut p = self.action.parameters_mut();
        p.extend(self.stop.parameters_mut());
        p
    }

    pub fn register(&self, g: &mut GraphBuilder) -> PolicyNodes {
        PolicyNodes {
            action: self.action.register(g),
            stop: self.stop.register(g),
        }
    }
}

impl PolicyNodes {
    /// Per-row Gaussian log-density of `actions` (rows × d_a constant or node)
    /// under the action head applied to `states` (rows × d_s). Returns a
    /// vector node with one entry per row.
    pub fn action_log_prob(&self, g: &mut GraphBuilder, states: NodeId, actions: NodeId) -> NodeId {
        let mean = self.action.apply(g, states, None);
        let d_a = g.node_shape(actions)[1];
        let diff = g.sub(mean, actions);
        let sq = g.square(diff);
        let rows = g.sum_rows(sq);
        let half = g.scale(rows, -0.5);
        g.offset(half, -0.5 * LN_2PI * d_a as f64)
    }

    /// Per-row stop logits as a vector node. `mask` is the multiplier vector leaf.
    pub fn stop_logits(&self, g: &mut GraphBuilder, states: NodeId, mask: Option<NodeId>) -> NodeId {
        let logits = self.stop.apply(g, states, mask);
        let rows = g.node_shape(logits)[0];
        g.reshape(logits, &[rows])
    }

    /// Per-row stop probabilities as a vector node in (0, 1).
    pub fn stop_probs(&self, g: &mut GraphBuilder, states: NodeId, mask: Option<NodeId>) -> NodeId {
        let z = self.stop_logits(g, states, mask);
        g.sigmoid(z)
    }
}

/// The dictionary of sub-policies, indexed by sub-task id `0..K`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLibrary {
    policies: Vec<SubPolicy>,
    hidden_sizes: Vec<usize>,
}

/// Graph handles for a registered [`PolicyLibrary`].
#[derive(Clone, Debug)]
pub struct LibraryNodes {
    pub policies: Vec<PolicyNodes>,
}

impl PolicyLibrary {
    pub fn init(k: usize, d_s: usize, d_a: usize, hidden_sizes: &[usize], seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Structural("a library needs at least one sub-policy".into()));
        }
        let policies = (0..k)
            .map(|i| init_policy(d_s, d_a, hidden_sizes, rng::derive_seed(seed, &format!("policy/{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            policies,
            hidden_sizes: hidden_sizes.to_vec(),
        })
    }

    pub fn new(policies: Vec<SubPolicy>) -> Result<Self> {
        let first = policies
            .first()
            .ok_or_else(|| Error::Structural("a library needs at least one sub-policy".into()))?;
        let (d_s, d_a) = (first.state_dim(), first.action_dim());
        let hidden_sizes = first.action.hidden_sizes();
        if policies.iter().any(|p| p.state_dim() != d_s || p.action_dim() != d_a) {
            return Err(Error::Structural("sub-policies disagree on dimensions".into()));
        }
        Ok(Self {
            policies,
            hidden_sizes,
        })
    }

    pub fn k(&self) -> usize {
        self.policies.len()
    }

    pub fn state_dim(&self) -> usize {
        self.policies[0].state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policies[0].action_dim()
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    pub fn policy(&self, k: usize) -> Result<&SubPolicy> {
        self.policies
            .get(k)
            .ok_or_else(|| Error::Structural(format!("sub-task id {k} missing from library of {}", self.k())))
    }

    pub fn policy_mut(&mut self, k: usize) -> Option<&mut SubPolicy> {
        self.policies.get_mut(k)
    }

    pub fn policies(&self) -> &[SubPolicy] {
        &self.policies
    }

    /// All parameters, policy by policy, action head before stop head.
    pub fn parameters(&self) -> Vec<&Array> {
        self.policies.iter().flat_map(SubPolicy::parameters).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array> {
        self.policies
            .iter_mut()
            .flat_map(SubPolicy::parameters_mut)
            .collect()
    }

    /// Registers every parameter as a leaf, in [`PolicyLibrary::parameters`] order.
    pub fn register(&self, g: &mut GraphBuilder) -> LibraryNodes {
        LibraryNodes {
            policies: self.policies.iter().map(|p| p.register(g)).collect(),
        }
    }

    /// One all-ones mask per stop network.
    pub fn ones_masks(&self) -> Vec<DropoutMask> {
        self.policies.iter().map(SubPolicy::ones_mask).collect()
    }
}

/// CTC emission model `p(b | s, a)` over the `K` sub-task ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SubtaskClassifier {
    pub net: Mlp,
}

impl SubtaskClassifier {
    pub fn init(d_s: usize, d_a: usize, k: usize, hidden_sizes: &[usize], seed: u64) -> Result<Self> {
        if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
            return Err(Error::Structural("hidden_sizes must list at least one positive width".into()));
        }
        Ok(Self {
            net: Mlp::init(d_s + d_a, hidden_sizes, k, &mut rng::stream(seed, "classifier")),
        })
    }

    pub fn zeros(d_s: usize, d_a: usize, k: usize, hidden_sizes: &[usize]) -> Self {
        Self {
            net: Mlp::zeros(d_s + d_a, hidden_sizes, k),
        }
    }

    pub fn k(&self) -> usize {
        self.net.output_dim()
    }

    /// Log-softmax over sub-task ids for one `(s, a)` pair.
    pub fn log_probs(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut x = state.to_vec();
        x.extend_from_slice(action);
        let logits = self.net.forward(&x, None);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        logits.iter().map(|z| z - lse).collect()
    }

    pub fn parameters(&self) -> Vec<&Array> {
        self.net.parameters()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array> {
        self.net.parameters_mut()
    }

    pub fn register(&self, g: &mut GraphBuilder) -> MlpNodes {
        self.net.register(g)
    }
}

/// Row-wise log-softmax of the classifier applied to `inputs` (rows × (d_s+d_a)).
pub fn classifier_log_probs(g: &mut GraphBuilder, nodes: &MlpNodes, inputs: NodeId) -> NodeId {
    let logits = nodes.apply(g, inputs, None);
    g.log_softmax_rows(logits)
}

/// Stacks states and actions side by side, the classifier's input layout.
pub fn state_action_matrix(states: &Array, actions: &Array) -> Array {
    let (t, ds, da) = (states.rows(), states.cols(), actions.cols());
    let mut data = Vec::with_capacity(t * (ds + da));
    for r in 0..t {
        data.extend_from_slice(states.row(r));
        data.extend_from_slice(actions.row(r));
    }
    Array::matrix(t, ds + da, data).expect("sized by construction")
}

#[derive(Serialize, Deserialize)]
struct DenseRecord {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyRecord {
    theta_action: Vec<DenseRecord>,
    theta_stop: Vec<DenseRecord>,
}

/// On-disk form of a trained model.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
    pub d_s: usize,
    pub d_a: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub hidden_sizes: Vec<usize>,
    /// Size of the training set, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_demos: Option<usize>,
    /// Sketch length of the training set, when known.
    #[serde(default, rename = "L_train", skip_serializing_if = "Option::is_none")]
    pub l_train: Option<usize>,
    policies: Vec<PolicyRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classifier: Option<Vec<DenseRecord>>,
}

fn mlp_to_records(mlp: &Mlp) -> Vec<DenseRecord> {
    mlp.layers()
        .iter()
        .map(|l| DenseRecord {
            weight: (0..l.inputs()).map(|r| l.weight.row(r).to_vec()).collect(),
            bias: l.bias.data().to_vec(),
        })
        .collect()
}

fn mlp_from_records(records: &[DenseRecord]) -> Result<Mlp> {
    let layers = records
        .iter()
        .map(|r| {
            Ok(Dense {
                weight: Array::from_rows(&r.weight).map_err(|e| Error::Data(e.to_string()))?,
                bias: Array::vector(r.bias.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(layers).map_err(|e| Error::Data(e.to_string()))
}

impl Checkpoint {
    pub fn new(lib: &PolicyLibrary, classifier: Option<&SubtaskClassifier>, algorithm: Option<&str>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            algorithm: algorithm.map(str::to_string),
            d_s: lib.state_dim(),
            d_a: lib.action_dim(),
            k: lib.k(),
            hidden_sizes: lib.hidden_sizes().to_vec(),
            n_demos: None,
            l_train: None,
            policies: lib
                .policies()
                .iter()
                .map(|p| PolicyRecord {
                    theta_action: mlp_to_records(&p.action),
                    theta_stop: mlp_to_records(&p.stop),
                })
                .collect(),
            classifier: classifier.map(|c| mlp_to_records(&c.net)),
        }
    }

    pub fn library(&self) -> Result<PolicyLibrary> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} is not supported (expected {})",
                self.version, CHECKPOINT_VERSION
            )));
        }
        let policies = self
            .policies
            .iter()
            .map(|p| {
                Ok(SubPolicy {
                    action: mlp_from_records(&p.theta_action)?,
                    stop: mlp_from_records(&p.theta_stop)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lib = PolicyLibrary::new(policies).map_err(|e| Error::Data(e.to_string()))?;
        if lib.k() != self.k || lib.state_dim() != self.d_s || lib.action_dim() != self.d_a {
            return Err(Error::Data("checkpoint header disagrees with its parameters".into()));
        }
        Ok(lib)
    }

    pub fn classifier(&self) -> Result<Option<SubtaskClassifier>> {
        self.classifier
            .as_ref()
            .map(|c| mlp_from_records(c).map(|net| SubtaskClassifier { net }))
            .transpose()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid checkpoint: {e}")))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
