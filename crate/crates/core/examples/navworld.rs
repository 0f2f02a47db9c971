//! Generates NavWorld demonstrations, writes them to disk and reads them back.
//!
//! Usage: `cargo run --example navworld -- [n] [length] [out.jsonl]`

use taco::navworld::*;

fn main() -> taco::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(20);
    let length: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let dir = std::env::temp_dir().join("taco-example");
    std::fs::create_dir_all(&dir)?;
    let out = args.get(2).map(Into::into).unwrap_or_else(|| dir.join("navworld.jsonl"));

    let cfg = WorldConfig::default();
    let (header, demos) = generate_dataset(&cfg, &DartNoise::default(), n, length, 0)?;
    write_dataset(&out, &header, &demos)?;
    let (_, data) = load_dataset(&out)?;
    let lengths: Vec<usize> = demos.iter().map(|d| d.states.len()).collect();
    println!(
        "{} demos, L={}, mean T {:.1}, min {}, max {} -> {}",
        data.len(),
        header.l,
        lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
        lengths.iter().min().unwrap(),
        lengths.iter().max().unwrap(),
        out.display()
    );
    let d = &demos[0];
    println!("demo 0: sketch {:?}, sigma {}, first state {:?}", d.sketch, d.sigma_demo, d.states[0]);
    println!("        first label {:?}", d.actions[0]);
    Ok(())
}
