use normuon::distsim::{
    assign_owners, comm_audit, distributed_step, owner_ranks, shard_grads, shard_ranges,
    shard_rowwise, RmsMode, ShardedParam, SimOptions, Topology,
};
use normuon::matrix::Matrix;
use normuon::optim::{step, Algorithm, OptimizerConfig, ParamState, StateSlots};
use normuon::rng::SeededRng;
use proptest::prelude::*;

const SHAPES: [(usize, usize); 3] = [(5, 8), (8, 8), (12, 4)];

/// Gradient of a quadratic pull towards a fixed target plus seeded noise.
fn grad_for(w: &Matrix, target: &Matrix, rng: &mut SeededRng) -> Matrix {
    let noise = rng.gaussian_matrix(w.rows(), w.cols(), 0.1);
    w.sub(target).unwrap().add(&noise).unwrap()
}

struct Setup {
    init: Vec<Matrix>,
    targets: Vec<Matrix>,
}

fn setup(seed: u64) -> Setup {
    let mut rng = SeededRng::new(seed);
    Setup {
        init: SHAPES.iter().map(|&(m, n)| rng.gaussian_matrix(m, n, 1.0)).collect(),
        targets: SHAPES.iter().map(|&(m, n)| rng.gaussian_matrix(m, n, 1.0)).collect(),
    }
}

fn config_for(alg: Algorithm) -> OptimizerConfig {
    OptimizerConfig::defaults_for(alg).with_weight_decay(0.01)
}

fn single_device(alg: Algorithm, s: &Setup, steps: usize) -> Vec<Matrix> {
    let cfg = config_for(alg);
    let mut states: Vec<ParamState> = s.init.iter().map(|w| ParamState::new(w.clone(), alg)).collect();
    let mut rng = SeededRng::with_stream(99, 1);
    for _ in 0..steps {
        for (st, t) in states.iter_mut().zip(&s.targets) {
            let g = grad_for(&st.w, t, &mut rng);
            step(alg, st, &g, &cfg).unwrap();
        }
    }
    states.into_iter().map(|s| s.w).collect()
}

fn distributed(alg: Algorithm, s: &Setup, steps: usize, world: usize, opts: &SimOptions) -> Vec<ShardedParam> {
    let cfg = config_for(alg);
    let topo = Topology::new(world);
    let mut params: Vec<ShardedParam> = s
        .init
        .iter()
        .enumerate()
        .map(|(i, w)| shard_rowwise(&format!("p{i}"), w, alg, world).unwrap())
        .collect();
    assign_owners(&mut params, world);
    let mut rng = SeededRng::with_stream(99, 1);
    for _ in 0..steps {
        // same gradient stream as the single-device run: one param at a time
        let full: Vec<Matrix> = params
            .iter()
            .zip(&s.targets)
            .map(|(p, t)| grad_for(&p.gather_weights(), t, &mut rng))
            .collect();
        let grads = shard_grads(&params, &full);
        distributed_step(&mut params, &grads, &cfg, &topo, opts).unwrap();
    }
    params
}

fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

#[test]
fn one_rank_is_bit_exact_for_every_mode() {
    let s = setup(5);
    for alg in Algorithm::ALL {
        let reference = single_device(alg, &s, 20);
        for mode in [RmsMode::Global, RmsMode::ShardLocal] {
            let params = distributed(alg, &s, 20, 1, &SimOptions::with_mode(mode));
            for (p, r) in params.iter().zip(&reference) {
                assert_eq!(&p.gather_weights(), r, "{alg} {mode:?}");
            }
        }
    }
}

#[test]
fn global_mode_matches_single_device() {
    let s = setup(6);
    for alg in Algorithm::ALL {
        let reference = single_device(alg, &s, 20);
        for world in [2, 4] {
            let params = distributed(alg, &s, 20, world, &SimOptions::with_mode(RmsMode::Global));
            for (p, r) in params.iter().zip(&reference) {
                let d = max_rel_diff(&p.gather_weights(), r);
                assert!(d <= 1e-10, "{alg} world {world}: {d}");
            }
        }
    }
}

#[test]
fn shard_local_mode_departs_from_single_device() {
    let s = setup(7);
    let reference = single_device(Algorithm::NorMuon, &s, 5);
    let params = distributed(Algorithm::NorMuon, &s, 5, 2, &SimOptions::with_mode(RmsMode::ShardLocal));
    let d = params
        .iter()
        .zip(&reference)
        .map(|(p, r)| max_rel_diff(&p.gather_weights(), r))
        .fold(0.0, f64::max);
    assert!(d > 1e-12);
}

#[test]
fn execution_order_and_threads_do_not_matter() {
    let s = setup(8);
    let base = distributed(Algorithm::NorMuon, &s, 6, 4, &SimOptions::default());
    for order in [vec![3, 2, 1, 0], vec![1, 3, 0, 2]] {
        let opts = SimOptions {
            rank_order: order,
            ..SimOptions::default()
        };
        assert_eq!(distributed(Algorithm::NorMuon, &s, 6, 4, &opts), base);
    }
    let threaded = SimOptions {
        threaded: true,
        ..SimOptions::default()
    };
    assert_eq!(distributed(Algorithm::NorMuon, &s, 6, 4, &threaded), base);
}

#[test]
fn local_row_statistics_match_single_device() {
    let s = setup(9);
    let cfg = config_for(Algorithm::NorMuon);
    let mut single = ParamState::new(s.init[2].clone(), Algorithm::NorMuon);
    let g = SeededRng::new(1).gaussian_matrix(12, 4, 1.0);
    step(Algorithm::NorMuon, &mut single, &g, &cfg).unwrap();
    let StateSlots::RowMoment { v_row: full_v, .. } = &single.slots else { unreachable!() };

    let mut params = vec![shard_rowwise("p", &s.init[2], Algorithm::NorMuon, 3).unwrap()];
    let grads = shard_grads(&params, &[g]);
    distributed_step(&mut params, &grads, &cfg, &Topology::new(3), &SimOptions::default()).unwrap();
    for shard in &params[0].shards {
        let StateSlots::RowMoment { v_row, .. } = &shard.state.slots else { unreachable!() };
        assert_eq!(v_row.as_slice(), &full_v.as_slice()[shard.rows.clone()]);
    }
}

fn audit_for(world: usize, elem_bytes_param: u64, alg: Algorithm) -> normuon::distsim::CommAudit {
    let s = setup(10);
    let topo = Topology {
        world_size: world,
        elem_bytes_param,
        ..Topology::default()
    };
    let mut params: Vec<ShardedParam> = s
        .init
        .iter()
        .enumerate()
        .map(|(i, w)| shard_rowwise(&format!("p{i}"), w, alg, world).unwrap())
        .collect();
    assign_owners(&mut params, world);
    let mut ledger = normuon::distsim::CommLedger::new(world);
    for _ in 0..3 {
        let full: Vec<Matrix> = params.iter().map(|p| p.gather_weights()).collect();
        let grads = shard_grads(&params, &full);
        let delta = distributed_step(&mut params, &grads, &config_for(alg), &topo, &SimOptions::default()).unwrap();
        ledger.merge(&delta);
    }
    let elements = SHAPES.iter().map(|(m, n)| m * n).sum();
    comm_audit(&ledger, elements)
}

#[test]
fn communication_per_element() {
    for world in [2, 3, 4] {
        let a = audit_for(world, 4, Algorithm::NorMuon);
        assert_eq!(a.standard_bytes_per_element, 12.0);
        assert_eq!(a.total_bytes_per_element, 16.0);
        assert_eq!(a.ratio, 16.0 / 12.0);
        let b = audit_for(world, 2, Algorithm::NorMuon);
        assert_eq!(b.ratio, 1.5);
        let adam = audit_for(world, 4, Algorithm::AdamW);
        assert_eq!(adam.optimizer_bytes_per_element, 0.0);
    }
    let single = audit_for(1, 4, Algorithm::NorMuon);
    assert_eq!(single.optimizer_bytes_per_element, 0.0);
}

proptest! {
    #[test]
    fn shards_reconstruct(m in 1usize..20, n in 1usize..6, extra in 0usize..3, seed in any::<u64>()) {
        let w = SeededRng::new(seed).gaussian_matrix(m, n, 1.0);
        for world in 1..=(m + 2).min(m + extra + 1) {
            let p = shard_rowwise("w", &w, Algorithm::NorMuon, world).unwrap();
            prop_assert_eq!(p.gather_weights(), w.clone());
            let ranges = shard_ranges(m, world);
            prop_assert_eq!(ranges.len(), world);
            prop_assert_eq!(ranges[0].start, 0);
            prop_assert_eq!(ranges[world - 1].end, m);
            for pair in ranges.windows(2) {
                prop_assert_eq!(pair[0].end, pair[1].start);
            }
        }
    }

    #[test]
    fn owner_loads_are_balanced(numels in prop::collection::vec(1usize..500, 1..20), world in 1usize..6) {
        let owners = owner_ranks(&numels, world);
        let mut load = vec![0usize; world];
        for (n, o) in numels.iter().zip(&owners) {
            prop_assert!(*o < world);
            load[*o] += n;
        }
        let spread = load.iter().max().unwrap() - load.iter().min().unwrap();
        prop_assert!(spread <= *numels.iter().max().unwrap());
    }

    #[test]
    fn ledger_counters_are_monotone(world in 1usize..5, steps in 1usize..4) {
        let s = setup(11);
        let topo = Topology::new(world);
        let mut params: Vec<ShardedParam> = s.init.iter().enumerate()
            .map(|(i, w)| shard_rowwise(&format!("p{i}"), w, Algorithm::NorMuon, world).unwrap())
            .collect();
        assign_owners(&mut params, world);
        let mut ledger = normuon::distsim::CommLedger::new(world);
        let mut prev: Vec<u64> = vec![0; 5];
        for _ in 0..steps {
            let full: Vec<Matrix> = params.iter().map(|p| p.gather_weights().scale(0.5)).collect();
            let grads = shard_grads(&params, &full);
            let delta = distributed_step(&mut params, &grads, &OptimizerConfig::normuon(), &topo, &SimOptions::default()).unwrap();
            ledger.merge(&delta);
            let now: Vec<u64> = ledger.channels().iter().map(|c| c.total_bytes()).collect();
            for (a, b) in prev.iter().zip(&now) {
                prop_assert!(b >= a);
            }
            prev = now;
        }
        if world == 1 {
            prop_assert_eq!(ledger.optimizer_bytes(), 0);
        }
    }
}
