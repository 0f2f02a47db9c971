//! Trains TACO from sketches only and reports alignment and zero-shot task
//! accuracy on longer sketches.
//!
//! Usage: `cargo run --release --example train_taco -- [n_demos] [epochs]`

use taco::evaluation::*;
use taco::navworld::*;
use taco::training::*;

fn main() -> taco::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let world = WorldConfig::default();
    let (h, demos) = generate_dataset(&world, &DartNoise::default(), n, 3, 1)?;
    let data = to_dataset(&h, &demos)?.without_alignments();
    let (h, demos) = generate_dataset(&world, &DartNoise::default(), 50, 3, 2)?;
    let heldout = to_dataset(&h, &demos)?;

    let cfg = TrainConfig { epochs, batch_size: 8, learning_rate: 3e-3, ..Default::default() };
    let report = train(&cfg, &data)?;
    for r in report.history.iter().step_by((epochs / 5).max(1)) {
        println!("epoch {:>3}  loss {:.4}  dropout {:.3}", r.epoch, r.loss, r.dropout_rate);
    }
    let align = alignment_accuracy(Aligner::Library(&report.library), &heldout)?;
    println!("held-out alignment accuracy {:.2}%", align.pct.unwrap_or(f64::NAN));
    for l_test in [3, 4] {
        let stats = evaluate_tasks(&report.library, &world, &EvalConfig { l_test, ..Default::default() })?;
        println!("L_test={l_test}: task {:.2}, sub-task {:.2}", stats.task_accuracy, stats.subtask_accuracy);
    }
    Ok(())
}
