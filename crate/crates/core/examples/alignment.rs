//! Forward lattices for one trajectory: the joint TACO lattice against its
//! brute-force path sum, the CTC lattice, argmax decoding, soft alignments and
//! the stop targets derived from them.

use rand::Rng;
use taco::alignment::*;
use taco::autodiff::Array;
use taco::policy::{PolicyLibrary, SubtaskClassifier};

fn main() -> taco::Result<()> {
    let mut r = taco::rng::stream(0, "example/alignment");
    let (t, d_s, d_a) = (8, 3, 2);
    let states = Array::matrix(t, d_s, (0..t * d_s).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let actions = Array::matrix(t, d_a, (0..t * d_a).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let rho = Trajectory::new(states, actions)?;
    let tau = Sketch::new(vec![2, 0, 1])?;
    println!("T={t}, sketch {:?}, {} paths", tau.ids(), path_count(t, tau.len()));

    let lib = PolicyLibrary::init(3, d_s, d_a, &[16], 1)?;
    let joint = taco_forward(&lib, &rho, &tau, &lib.ones_masks())?;
    let brute = brute_force_joint(&lib, &rho, &tau)?;
    println!("TACO log-likelihood {:.6}, brute force {:.6}", joint.log_likelihood, brute.ln());
    println!("decoded: {:?}", decode_argmax(&joint));

    let clf = SubtaskClassifier::init(d_s, d_a, 3, &[16], 2)?;
    let ctc = ctc_forward(&clf, &rho, &tau)?;
    println!("CTC log-likelihood {:.6}, brute force {:.6}", ctc.log_likelihood, brute_force_ctc(&clf, &rho, &tau)?.ln());

    let p = soft_alignment(&ctc);
    let targets = ctc_stop_targets(&p);
    println!("t  p_t(l)                      stop targets");
    for step in 0..t {
        let row: Vec<String> = p.p.row(step).iter().map(|v| format!("{v:.3}")).collect();
        let stops: Vec<String> = (0..tau.len())
            .map(|l| targets.get(step, l).map_or("  -  ".into(), |v| format!("{v:.3}")))
            .collect();
        println!("{step}  [{}]  [{}]", row.join(", "), stops.join(", "));
    }

    let mut csv = Vec::new();
    joint.write_csv(&mut csv)?;
    println!("lattice CSV has {} feasible cells", String::from_utf8_lossy(&csv).lines().count() - 1);
    Ok(())
}
