//! The ablation variants on the bundled teacher task.
//!
//! Run with `cargo run --release --example ablations`.

use std::path::Path;

use normuon::experiment::ExperimentConfig;
use normuon::optim::Algorithm;
use normuon::trainer::train_loop;

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/baseline.toml");
    for alg in [
        Algorithm::NorMuon,
        Algorithm::MuonAdam,
        Algorithm::NorMuonFront,
        Algorithm::NorMuonSelective,
        Algorithm::MuonRmsNormalized,
    ] {
        let cfg = ExperimentConfig::load(&config, &[format!("optimizer=\"{}\"", alg.name()), "probes=[]".into()]).unwrap();
        let out = train_loop(cfg.build_model().unwrap(), &cfg.task, cfg.train_config()).unwrap();
        let r = &out.record;
        println!(
            "{:<20} final loss {:.4e}, checksum {}",
            alg.name(),
            r.final_loss(),
            &r.checksum[..16]
        );
    }
}
