//! Compares the supervised and CTC-aligned baselines against TACO on the same
//! small NavWorld dataset.
//!
//! Usage: `cargo run --release --example baselines -- [n_demos] [epochs]`

use taco::evaluation::*;
use taco::navworld::*;
use taco::training::*;

fn main() -> taco::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(150);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(25);
    let world = WorldConfig::default();
    let (h, demos) = generate_dataset(&world, &DartNoise::default(), n, 3, 3)?;
    let data = to_dataset(&h, &demos)?;
    let (h, demos) = generate_dataset(&world, &DartNoise::default(), 50, 3, 4)?;
    let heldout = to_dataset(&h, &demos)?;

    println!("{:<15} {:>9} {:>9} {:>8}", "algorithm", "align %", "task L=4", "train s");
    for algorithm in Algorithm::ALL {
        let cfg = TrainConfig { algorithm, epochs, batch_size: 8, learning_rate: 3e-3, ..Default::default() };
        let report = train(&cfg, &data)?;
        let aligner = match &report.classifier {
            Some(c) => Aligner::Classifier(c),
            None => Aligner::Library(&report.library),
        };
        let align = alignment_accuracy(aligner, &heldout)?.pct.unwrap_or(f64::NAN);
        let task = task_accuracy(&report.library, &world, &EvalConfig::default())?;
        println!("{:<15} {align:>9.2} {task:>9.2} {:>8.1}", algorithm.name(), report.wall_clock_s);
    }
    Ok(())
}
