//! Row-sharded NorMuon across simulated ranks: equivalence with a single
//! device and the communication ledger.
//!
//! Run with `cargo run --example distributed_sim`.

use normuon::distsim::{
    assign_owners, comm_audit, distributed_step, shard_grads, shard_rowwise, CommLedger, RmsMode, ShardedParam,
    SimOptions, Topology,
};
use normuon::matrix::Matrix;
use normuon::optim::{step, Algorithm, OptimizerConfig, ParamState};
use normuon::rng::SeededRng;

fn main() {
    let shapes = [(5, 8), (8, 8), (12, 4)];
    let mut rng = SeededRng::new(5);
    let init: Vec<Matrix> = shapes.iter().map(|&(m, n)| rng.gaussian_matrix(m, n, 1.0)).collect();
    let grads: Vec<Vec<Matrix>> = (0..10)
        .map(|_| shapes.iter().map(|&(m, n)| rng.gaussian_matrix(m, n, 1.0)).collect())
        .collect();
    let cfg = OptimizerConfig::normuon();

    let mut single: Vec<ParamState> = init.iter().map(|w| ParamState::new(w.clone(), Algorithm::NorMuon)).collect();
    for g in &grads {
        for (s, g) in single.iter_mut().zip(g) {
            step(Algorithm::NorMuon, s, g, &cfg).unwrap();
        }
    }

    for world in [1, 2, 4] {
        for mode in [RmsMode::Global, RmsMode::ShardLocal] {
            let mut params: Vec<ShardedParam> = init
                .iter()
                .enumerate()
                .map(|(i, w)| shard_rowwise(&format!("p{i}"), w, Algorithm::NorMuon, world).unwrap())
                .collect();
            assign_owners(&mut params, world);
            let topo = Topology::new(world);
            let mut ledger = CommLedger::new(world);
            for g in &grads {
                let sharded = shard_grads(&params, g);
                ledger.merge(&distributed_step(&mut params, &sharded, &cfg, &topo, &SimOptions::with_mode(mode)).unwrap());
            }
            let diff = params
                .iter()
                .zip(&single)
                .flat_map(|(p, s)| {
                    let w = p.gather_weights();
                    w.as_slice()
                        .iter()
                        .zip(s.w.as_slice())
                        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
                        .collect::<Vec<_>>()
                })
                .fold(0.0, f64::max);
            let audit = comm_audit(&ledger, shapes.iter().map(|(m, n)| m * n).sum());
            println!(
                "world {world} {:<12} max rel diff {diff:.2e}, bytes/element/step {:>4} (standard {})",
                format!("{mode:?}"),
                audit.total_bytes_per_element,
                audit.standard_bytes_per_element
            );
        }
    }
}
