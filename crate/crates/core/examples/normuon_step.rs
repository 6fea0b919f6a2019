//! A few NorMuon steps on one matrix, showing the row statistics and the
//! RMS-matched step size.
//!
//! Run with `cargo run --example normuon_step`.

use normuon::optim::{step_traced, Algorithm, OptimizerConfig, ParamState, StateSlots};
use normuon::rng::SeededRng;

fn main() {
    let (m, n) = (6, 4);
    let mut rng = SeededRng::new(3);
    let cfg = OptimizerConfig::normuon().with_lr(0.02).with_weight_decay(0.01);
    let mut state = ParamState::new(rng.gaussian_matrix(m, n, 1.0), Algorithm::NorMuon);

    for t in 1..=3 {
        // rows of very different scale: the kind of imbalance NorMuon evens out
        let mut g = rng.gaussian_matrix(m, n, 1.0);
        for i in 0..m {
            for x in g.row_mut(i) {
                *x *= (i + 1) as f64;
            }
        }
        let (report, trace) = step_traced(Algorithm::NorMuon, &mut state, &g, &cfg).unwrap();
        let o = trace.orthogonalized.as_ref().unwrap();
        println!("step {t}");
        println!("  row norms of O     {:?}", rounded(o.row_norms().as_slice()));
        println!("  row norms of O-hat {:?}", rounded(trace.direction.row_norms().as_slice()));
        if let StateSlots::RowMoment { v_row, .. } = &state.slots {
            println!("  v_row              {:?}", rounded(v_row.as_slice()));
        }
        println!(
            "  effective lr {:.5}, |update|_F {:.6} (target 0.2 * lr * sqrt(mn) = {:.6})",
            report.effective_lr,
            report.update_fro_norm,
            0.2 * cfg.lr * ((m * n) as f64).sqrt()
        );
    }
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
