//! NavWorld: a planar world with four destinations and a velocity-controlled agent.
//!
//! The state is the `(x, y)` offset from the agent to each destination, so
//! `d_s = 8`; the action is a velocity, so `d_a = 2`. Destinations are ids
//! `0..4`, named Green, Red, Yellow and Black.

use crate::alignment::{Sketch, Trajectory};
use crate::autodiff::Array;
use crate::training::{Dataset, Item};
use crate::{rng, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const DESTINATION_NAMES: [&str; 4] = ["Green", "Red", "Yellow", "Black"];
pub const DATASET_VERSION: u32 = 1;

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Destination centers followed by the agent start center.
    pub centers: Vec<Point>,
    pub position_std: f64,
    pub reach_radius: f64,
    pub dt: f64,
    pub v_max: f64,
    /// Expert steps allowed per sub-task during generation.
    pub subtask_step_cap: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            centers: vec![[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [0.0, 0.0]],
            position_std: 0.15,
            reach_radius: 0.15,
            dt: 0.1,
            v_max: 1.0,
            subtask_step_cap: 200,
        }
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl WorldConfig {
    pub fn n_destinations(&self) -> usize {
        self.centers.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_destinations()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.len() < 3 {
            return Err(Error::Structural("need at least two destinations and a start center".into()));
        }
        if self.centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Structural("centers must be finite".into()));
        }
        if !(self.position_std >= 0.0) || !(self.reach_radius > 0.0) || !(self.dt > 0.0) || !(self.v_max > 0.0) {
            return Err(Error::Structural(
                "position_std must be non-negative; reach_radius, dt and v_max positive".into(),
            ));
        }
        if self.subtask_step_cap == 0 {
            return Err(Error::Structural("subtask_step_cap must be positive".into()));
        }
        let n = self.n_destinations();
        let mut min_gap = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                min_gap = min_gap.min(dist(self.centers[i], self.centers[j]));
            }
        }
        if self.reach_radius >= min_gap / 2.0 {
            return Err(Error::Structural(format!(
                "reach_radius {} must be below half the closest destination spacing {min_gap}",
                self.reach_radius
            )));
        }
        Ok(())
    }
}

/// Demonstration-time control noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DartNoise {
    /// Used when the schedule is empty.
    pub action_noise_std: f64,
    /// Standard deviations cycled by demonstration index.
    pub std_schedule: Vec<f64>,
}

impl Default for DartNoise {
    fn default() -> Self {
        Self {
            action_noise_std: 0.1,
            std_schedule: vec![0.05, 0.1, 0.2],
        }
    }
}

impl DartNoise {
    pub fn none() -> Self {
        Self {
            action_noise_std: 0.0,
            std_schedule: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std_schedule.iter().chain([&self.action_noise_std]).any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Structural("noise standard deviations must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn std_for(&self, demo: usize) -> f64 {
        if self.std_schedule.is_empty() {
            self.action_noise_std
        } else {
            self.std_schedule[demo % self.std_schedule.len()]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub destinations: Vec<Point>,
    pub agent_start: Point,
}

impl World {
    /// Every center perturbed by isotropic Gaussian noise of `position_std`.
    pub fn sample(cfg: &WorldConfig, rng: &mut impl Rng) -> Self {
        let mut pts: Vec<Point> = Vec::with_capacity(cfg.centers.len());
        for c in &cfg.centers {
            let zx: f64 = StandardNormal.sample(rng);
            let zy: f64 = StandardNormal.sample(rng);
            pts.push([c[0] + cfg.position_std * zx, c[1] + cfg.position_std * zy]);
        }
        let agent_start = pts.pop().expect("validated");
        Self {
            destinations: pts,
            agent_start,
        }
    }

    pub fn destination(&self, id: usize) -> Point {
        self.destinations[id]
    }
}

pub fn observe(world: &World, agent: Point) -> Vec<f64> {
    world
        .destinations
        .iter()
        .flat_map(|d| [d[0] - agent[0], d[1] - agent[1]])
        .collect()
}

fn clip(v: Point, v_max: f64) -> Point {
    let n = v[0].hypot(v[1]);
    if n > v_max {
        [v[0] * v_max / n, v[1] * v_max / n]
    } else {
        v
    }
}

/// Proportional controller with gain `1/dt`, clipped to speed `v_max`.
pub fn expert_action(world: &World, agent: Point, target: usize, cfg: &WorldConfig) -> Point {
    let d = world.destination(target);
    clip([(d[0] - agent[0]) / cfg.dt, (d[1] - agent[1]) / cfg.dt], cfg.v_max)
}

/// The expert's action read from an observation, which is all it depends on.
pub fn expert_action_from_observation(obs: &[f64], target: usize, cfg: &WorldConfig) -> Point {
    clip([obs[2 * target] / cfg.dt, obs[2 * target + 1] / cfg.dt], cfg.v_max)
}

pub fn step(agent: Point, action: &[f64], dt: f64) -> Point {
    [agent[0] + dt * action[0], agent[1] + dt * action[1]]
}

pub fn reached(world: &World, agent: Point, target: usize, cfg: &WorldConfig) -> bool {
    dist(world.destination(target), agent) < cfg.reach_radius
}

/// A uniformly drawn length-`l` sketch over `k` ids, no adjacent repeats.
pub fn sample_sketch(l: usize, k: usize, rng: &mut impl Rng) -> Sketch {
    let mut ids: Vec<usize> = Vec::with_capacity(l);
    for _ in 0..l {
        let next = match ids.last() {
            None => rng.random_range(0..k),
            Some(&prev) => {
                let r = rng.random_range(0..k - 1);
                if r >= prev {
                    r + 1
                } else {
                    r
                }
            }
        };
        ids.push(next);
    }
    Sketch::new(ids).expect("no adjacent repeats by construction")
}

/// One generated demonstration, in its on-disk form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub sketch: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<usize>>,
    /// Agent position before each step.
    pub latent_positions: Vec<Point>,
    pub sigma_demo: f64,
    pub destinations: Vec<Point>,
}

impl DemoRecord {
    pub fn to_item(&self) -> Result<Item> {
        let trajectory = Trajectory::new(Array::from_rows(&self.states)?, Array::from_rows(&self.actions)?)?;
        Ok(Item {
            trajectory,
            sketch: Sketch::new(self.sketch.clone())?,
            alignment: self.alignment.clone(),
        })
    }

    pub fn world(&self, start: Point) -> World {
        World {
            destinations: self.destinations.clone(),
            agent_start: start,
        }
    }
}

/// Runs the noisy expert through `sketch`. Recorded actions are the clean
/// expert actions; executed actions carry `N(0, sigma²)` noise.
pub fn generate_demo(
    cfg: &WorldConfig,
    sigma: f64,
    sketch: &Sketch,
    rng: &mut impl Rng,
) -> Result<DemoRecord> {
    let world = World::sample(cfg, rng);
    if sketch.max_id() >= world.destinations.len() {
        return Err(Error::Structural(format!("sketch id {} is not a destination", sketch.max_id())));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Structural(e.to_string()))?;
    let mut pos = world.agent_start;
    let mut rec = DemoRecord {
        sketch: sketch.ids().to_vec(),
        states: Vec::new(),
        actions: Vec::new(),
        alignment: Some(Vec::new()),
        latent_positions: Vec::new(),
        sigma_demo: sigma,
        destinations: world.destinations.clone(),
    };
    let alignment = rec.alignment.as_mut().expect("set above");
    for (l, &target) in sketch.ids().iter().enumerate() {
        let mut steps = 0;
        while !reached(&world, pos, target, cfg) {
            if steps == cfg.subtask_step_cap {
                return Err(Error::Generation(format!(
                    "sub-task {l} (destination {target}) not reached within {} steps",
                    cfg.subtask_step_cap
                )));
            }
            let a = expert_action(&world, pos, target, cfg);
            rec.states.push(observe(&world, pos));
            rec.actions.push(a.to_vec());
            rec.latent_positions.push(pos);
            alignment.push(target);
            let executed = [a[0] + normal.sample(rng), a[1] + normal.sample(rng)];
            pos = step(pos, &executed, cfg.dt);
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Generation(format!(
                "sub-task {l} (destination {target}) was already satisfied on arrival"
            )));
        }
    }
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub d_s: usize,
    pub d_a: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub config: WorldConfig,
    pub noise: DartNoise,
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
}

/// Generates `n` demonstrations of length-`l` sketches. Demo `i` draws its
/// sketch from stream `gen/sketch/{i}` and its world and noise from
/// `gen/demo/{i}`.
pub fn generate_dataset(
    cfg: &WorldConfig,
    noise: &DartNoise,
    n: usize,
    l: usize,
    seed: u64,
) -> Result<(DatasetHeader, Vec<DemoRecord>)> {
    cfg.validate()?;
    noise.validate()?;
    let k = cfg.n_destinations();
    if n == 0 {
        return Err(Error::Structural("n must be at least 1".into()));
    }
    if l == 0 || l > k {
        return Err(Error::Structural(format!("sketch length must lie in 1..={k}")));
    }
    let demos = (0..n)
        .map(|i| {
            let sketch = sample_sketch(l, k, &mut rng::stream(seed, &format!("gen/sketch/{i}")));
            generate_demo(cfg, noise.std_for(i), &sketch, &mut rng::stream(seed, &format!("gen/demo/{i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = DatasetHeader {
        version: DATASET_VERSION,
        d_s: cfg.state_dim(),
        d_a: 2,
        k,
        config: cfg.clone(),
        noise: noise.clone(),
        n,
        l,
        seed,
    };
    Ok((header, demos))
}

/// Sidecar header path: `data.jsonl` → `data.header.json`.
pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("header.json")
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, demos: &[DemoRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in demos {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut h = BufWriter::new(File::create(header_path(path))?);
    serde_json::to_writer_pretty(&mut h, header)?;
    h.write_all(b"\n")?;
    h.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DemoRecord>)> {
    let hp = header_path(path);
    let header: DatasetHeader = serde_json::from_reader(BufReader::new(
        File::open(&hp).map_err(|e| Error::Data(format!("cannot open dataset header {}: {e}", hp.display())))?,
    ))
    .map_err(|e| Error::Data(format!("malformed dataset header {}: {e}", hp.display())))?;
    if header.version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "dataset version {} is not supported (expected {DATASET_VERSION})",
            header.version
        )));
    }
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut demos = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DemoRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        demos.push(d);
    }
    Ok((header, demos))
}

/// Converts records into a validated [`Dataset`] over the header's `K` ids.
pub fn to_dataset(header: &DatasetHeader, demos: &[DemoRecord]) -> Result<Dataset> {
    let items = demos
        .iter()
        .enumerate()
        .map(|(i, d)| d.to_item().map_err(|e| Error::Data(format!("demo {i}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if items
        .iter()
        .any(|i| i.trajectory.state_dim() != header.d_s || i.trajectory.action_dim() != header.d_a)
    {
        return Err(Error::Data("demo dimensions disagree with the header".into()));
    }
    Dataset::new(items, header.k)
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Dataset)> {
    let (header, demos) = read_dataset(path)?;
    let data = to_dataset(&header, &demos)?;
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_world() -> World {
        World {
            destinations: vec![[1.0, 2.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]],
            agent_start: [0.0, 0.0],
        }
    }

    #[test]
    fn observation_layout() {
        let w = fixed_world();
        let o = observe(&w, [0.0, 0.0]);
        assert_eq!(&o[..2], &[1.0, 2.0]);
        assert_eq!(&observe(&w, [1.0, 2.0])[..2], &[0.0, 0.0]);
        let mut moved = w.clone();
        for d in &mut moved.destinations {
            d[0] += 3.0;
            d[1] -= 1.5;
        }
        assert_eq!(observe(&moved, [3.25, 0.5]), observe(&w, [0.25, 2.0]));
    }

    #[test]
    fn expert_and_step() {
        let cfg = WorldConfig::default();
        let w = fixed_world();
        assert_eq!(expert_action(&w, [1.0, 2.0], 0, &cfg), [0.0, 0.0]);
        let a = expert_action(&w, [0.0, 0.0], 0, &cfg);
        assert!((a[0].hypot(a[1]) - cfg.v_max).abs() < 1e-12);
        assert_eq!(step([0.0, 0.0], &[1.0, 0.0], 0.1), [0.1, 0.0]);
        let half = step(step([0.3, -0.2], &[0.7, 0.4], 0.05), &[0.7, 0.4], 0.05);
        let full = step([0.3, -0.2], &[0.7, 0.4], 0.1);
        assert!((half[0] - full[0]).abs() < 1e-15 && (half[1] - full[1]).abs() < 1e-15);
    }

    #[test]
    fn closed_loop_reaches_in_bound() {
        let cfg = WorldConfig::default();
        let w = fixed_world();
        let mut pos = [0.0, 0.0];
        let d0 = dist(pos, w.destination(0));
        let bound = (d0 / (cfg.v_max * cfg.dt)).ceil() as usize + 2;
        let mut steps = 0;
        while !reached(&w, pos, 0, &cfg) {
            pos = step(pos, &expert_action(&w, pos, 0, &cfg), cfg.dt);
            steps += 1;
            assert!(steps <= bound);
        }
    }

    #[test]
    fn clean_demo_labels_are_expert_actions() {
        let cfg = WorldConfig::default();
        let sketch = Sketch::new(vec![0, 2, 1]).unwrap();
        let d = generate_demo(&cfg, 0.0, &sketch, &mut rng::stream(1, "t")).unwrap();
        let world = d.world([0.0, 0.0]);
        for (t, s) in d.states.iter().enumerate() {
            let target = d.alignment.as_ref().unwrap()[t];
            let a = expert_action(&world, d.latent_positions[t], target, &cfg);
            assert_eq!(d.actions[t], a.to_vec());
            let from_obs = expert_action_from_observation(s, target, &cfg);
            assert!((from_obs[0] - a[0]).abs() < 1e-12 && (from_obs[1] - a[1]).abs() < 1e-12);
        }
        assert_eq!(Sketch::collapse(d.alignment.as_ref().unwrap()).unwrap(), sketch);
    }

    #[test]
    fn config_validation() {
        let cfg = WorldConfig { reach_radius: 1.5, ..WorldConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(WorldConfig::default().validate().is_ok());
    }

    #[test]
    fn sketches_never_repeat_adjacently() {
        let mut r = rng::stream(0, "s");
        for _ in 0..1000 {
            let s = sample_sketch(4, 4, &mut r);
            assert!(s.ids().windows(2).all(|w| w[0] != w[1]));
        }
    }
}
