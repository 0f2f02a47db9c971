#![allow(dead_code)]

use rand::Rng;
use taco::alignment::{Sketch, SoftAlignment, Trajectory};
use taco::autodiff::Array;
use taco::rng::{self, StreamRng};

pub fn stream(seed: u64, name: &str) -> StreamRng {
    rng::stream(seed, name)
}

pub fn random_trajectory(t: usize, d_s: usize, d_a: usize, r: &mut impl Rng) -> Trajectory {
    let s = (0..t * d_s).map(|_| r.random_range(-1.0..1.0)).collect();
    let a = (0..t * d_a).map(|_| r.random_range(-1.0..1.0)).collect();
    Trajectory::new(Array::matrix(t, d_s, s).unwrap(), Array::matrix(t, d_a, a).unwrap()).unwrap()
}

pub fn random_sketch(l: usize, k: usize, r: &mut impl Rng) -> Sketch {
    taco::navworld::sample_sketch(l, k, r)
}

/// A soft alignment produced by a random stop process: position `l` hands
/// its mass to `l+1` with a probability drawn from `[lo, hi]`.
pub fn stop_process_alignment(t: usize, l: usize, lo: f64, hi: f64, r: &mut impl Rng) -> SoftAlignment {
    let mut rows = vec![vec![0.0; l]];
    rows[0][0] = 1.0;
    for _ in 1..t {
        let prev = rows.last().unwrap().clone();
        let stops: Vec<f64> = (0..l).map(|j| if j + 1 < l { r.random_range(lo..hi) } else { 0.0 }).collect();
        let mut next = vec![0.0; l];
        for j in 0..l {
            next[j] += prev[j] * (1.0 - stops[j]);
            if j + 1 < l {
                next[j + 1] += prev[j] * stops[j];
            }
        }
        rows.push(next);
    }
    SoftAlignment { p: Array::from_rows(&rows).unwrap() }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Per-timestep ids for a random segmentation of `t` steps along `sketch`.
pub fn random_segmentation(sketch: &Sketch, t: usize, r: &mut impl Rng) -> Vec<usize> {
    let l = sketch.len();
    let mut cuts: Vec<usize> = (1..t).collect();
    for i in 0..cuts.len() {
        let j = r.random_range(i..cuts.len());
        cuts.swap(i, j);
    }
    let mut cuts = cuts[..l - 1].to_vec();
    cuts.sort_unstable();
    let mut pos = 0;
    (0..t)
        .map(|step| {
            while pos < cuts.len() && cuts[pos] == step {
                pos += 1;
            }
            sketch.get(pos)
        })
        .collect()
}

/// A random annotated item with `t` steps and `l` sub-tasks from `k` skills.
pub fn random_item(t: usize, l: usize, k: usize, d_s: usize, d_a: usize, r: &mut impl Rng) -> taco::training::Item {
    let trajectory = random_trajectory(t, d_s, d_a, r);
    let sketch = random_sketch(l, k, r);
    let alignment = Some(random_segmentation(&sketch, t, r));
    taco::training::Item { trajectory, sketch, alignment }
}

/// Worst finite-difference error over the first `n_leaves` leaves.
pub fn worst_fd(graph: &taco::autodiff::Graph, bindings: &[&Array], out: taco::autodiff::NodeId, n_leaves: usize, step: f64) -> f64 {
    (0..n_leaves)
        .map(|leaf| taco::autodiff::finite_difference_check(graph, bindings, out, leaf, step).unwrap())
        .fold(0.0, f64::max)
}

/// A NavWorld dataset with the default world and noise.
pub fn navworld_data(n: usize, l: usize, seed: u64) -> taco::training::Dataset {
    use taco::navworld::{generate_dataset, to_dataset, DartNoise, WorldConfig};
    let (h, demos) = generate_dataset(&WorldConfig::default(), &DartNoise::default(), n, l, seed).unwrap();
    to_dataset(&h, &demos).unwrap()
}
