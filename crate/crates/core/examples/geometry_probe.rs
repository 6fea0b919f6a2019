//! Condition number and per-neuron norm spread of Muon and NorMuon updates
//! along a training run.
//!
//! Run with `cargo run --release --example geometry_probe`.

use normuon::diagnostics::ProbeRecord;
use normuon::optim::{Algorithm, OptimizerConfig};
use normuon::trainer::{trajectory_probe, Activation, LrSchedule, MlpModel, SyntheticTask, TrainConfig};

fn probes(alg: Algorithm) -> Vec<ProbeRecord> {
    let cfg = TrainConfig::new(alg, OptimizerConfig::defaults_for(alg).with_lr(1e-3), 200)
        .with_schedule(LrSchedule::warmup_linear_decay(20));
    let model = MlpModel::new(&[32, 64, 16], Activation::Tanh, 0).unwrap();
    trajectory_probe(model, &SyntheticTask::default(), cfg, "layer0.weight", 40).unwrap()
}

fn main() {
    let muon = probes(Algorithm::Muon);
    let normuon = probes(Algorithm::NorMuon);
    println!("{:>5} {:<10} {:>12} {:>10}", "step", "stage", "cond", "norm_cv");
    for run in [&muon, &normuon] {
        for p in run.iter() {
            println!(
                "{:>5} {:<10} {:>12.3e} {:>10.4}",
                p.step, p.report.source_label, p.report.condition_number, p.report.norm_cv
            );
        }
    }
}
