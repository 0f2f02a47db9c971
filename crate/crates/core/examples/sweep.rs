//! A small accuracy-versus-dataset-size sweep written as a long-format CSV,
//! through the same entry point as the `taco sweep` command.
//!
//! Usage: `cargo run --release --example sweep -- [out.csv]`

fn main() {
    let dir = std::env::temp_dir().join("taco-sweep-example");
    let out = std::env::args().nth(1).unwrap_or_else(|| dir.join("sweep.csv").display().to_string());
    let config = dir.join("sweep.toml");
    let written = std::fs::create_dir_all(&dir)
        .and_then(|_| std::fs::write(&config, "[train]\nbatch_size = 8\nlearning_rate = 0.003\n"));
    if let Err(e) = written {
        eprintln!("cannot write {}: {e}", config.display());
        std::process::exit(2);
    }
    let config = config.display().to_string();
    let code = taco::cli::run([
        "taco", "sweep", "--sizes", "50,150", "--algos", "taco,gt-bc,ctc-bc-argmax", "--seeds", "0", "--epochs", "25",
        "--n-tasks", "50", "--heldout", "30", "--config", &config, "--out", &out,
    ]);
    if code == 0 {
        print!("{}", std::fs::read_to_string(&out).unwrap_or_default());
    }
    std::process::exit(code);
}
