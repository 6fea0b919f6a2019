//! Newton-Schulz orthogonalization against the exact polar factor.
//!
//! Run with `cargo run --example ns5_vs_polar`.

use normuon::matrix::Matrix;
use normuon::orthogonalize::{ns5, polar_exact, NsConfig};
use normuon::rng::SeededRng;
use normuon::svd::svd_small;

fn describe(label: &str, m: &Matrix) {
    let s = svd_small(m).unwrap().sigma.into_vec();
    let (hi, lo) = (s[0], s[s.len() - 1]);
    println!("  {label:<8} sigma in [{lo:.4}, {hi:.4}], cond {:.2}", hi / lo);
}

fn main() {
    let cfg = NsConfig::default();
    println!("quintic map after 5 iterations:");
    for x in [0.05, 0.1, 0.3, 0.6, 1.0] {
        println!("  {x:>5} -> {:.4}", cfg.poly_iterated(x));
    }

    let mut rng = SeededRng::new(1);
    for (m, n) in [(16, 16), (16, 64), (64, 16)] {
        let a = rng.gaussian_matrix(m, n, 1.0);
        let o = ns5(&a, &cfg).unwrap();
        let p = polar_exact(&a).unwrap();
        let diff = svd_small(&o.sub(&p).unwrap()).unwrap().sigma.as_slice()[0];
        println!("{m}x{n} gaussian, spectral distance to polar factor {diff:.4}");
        describe("input", &a);
        describe("ns5", &o);
        describe("polar", &p);
    }
}
