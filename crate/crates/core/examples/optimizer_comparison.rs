//! AdamW, Muon and NorMuon on the bundled teacher task, with an
//! efficiency-gain table against AdamW.
//!
//! Run with `cargo run --release --example optimizer_comparison`.

use std::path::Path;

use normuon::experiment::{efficiency_table, format_gain_table, run_experiment, Curve, ExperimentConfig, SMOOTHING_WINDOW};

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/baseline.toml");
    let out = std::env::temp_dir().join("normuon-comparison");
    let mut curves = Vec::new();
    for name in ["adamw", "muon", "normuon"] {
        let cfg = ExperimentConfig::load(&config, &[format!("optimizer=\"{name}\"")]).unwrap();
        let summary = run_experiment(&cfg, &out.join(name)).unwrap();
        println!(
            "{name:<8} loss {:.4e} -> {:.4e} ({:.0}x)",
            summary.first_loss,
            summary.final_loss,
            summary.first_loss / summary.final_loss
        );
        curves.push(Curve::load(&summary.dir).unwrap());
    }
    let rows = efficiency_table(&curves[0], &curves[1..], SMOOTHING_WINDOW).unwrap();
    print!("{}", format_gain_table(&rows));
    println!("run directories under {}", out.display());
}
