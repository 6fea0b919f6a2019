//! Backpropagation against central finite differences.
//!
//! Run with `cargo run --example gradient_check`.

use normuon::trainer::{gen_synthetic, gradient_check, Activation, MlpModel, SyntheticTask, TaskKind};

fn main() {
    for kind in [TaskKind::TeacherRegression, TaskKind::GaussianClassification] {
        for act in [Activation::Tanh, Activation::Relu] {
            let task = SyntheticTask {
                kind,
                input_dim: 6,
                output_dim: 4,
                sample_count: 12,
                teacher_hidden: 5,
                seed: 8,
                ..SyntheticTask::default()
            };
            let model = MlpModel::new(&[6, 7, 4], act, 3).unwrap();
            let check = gradient_check(&model, &gen_synthetic(&task).unwrap()).unwrap();
            println!(
                "{kind:?}/{act:?}: {} entries, max relative error {:.2e} at {} [{}]",
                check.entries, check.max_rel_err, check.worst.0, check.worst.1
            );
        }
    }
}
