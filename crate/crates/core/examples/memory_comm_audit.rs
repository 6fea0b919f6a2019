//! Optimizer-state memory and per-element communication for a small MLP.
//!
//! Run with `cargo run --example memory_comm_audit`.

use normuon::experiment::{audit, ExperimentConfig};

fn main() {
    for (label, bytes) in [("fp32 params", 4), ("bf16 params", 2)] {
        let cfg = ExperimentConfig::from_toml_str(
            "",
            &["distsim.world_size=4".into(), format!("distsim.elem_bytes_param={bytes}")],
        )
        .unwrap();
        let report = audit(&cfg).unwrap();
        if bytes == 4 {
            println!("optimizer state elements ({} model elements):", report["model_elements"]);
            for row in report["memory"].as_array().unwrap() {
                println!("  {:<22} {}", row["optimizer"].as_str().unwrap(), row["state_elements"]);
            }
        }
        let c = |key: &str| report["communication"][key].as_f64().unwrap();
        // biases stay on AdamW and skip the gather/scatter, so the model-wide
        // extra is a little under the 4 bytes a hidden matrix pays
        println!(
            "{label}: standard {:.1} B/elem/step, optimizer path adds {:.3}, ratio {:.3}",
            c("standard_bytes_per_element"),
            c("optimizer_bytes_per_element"),
            c("ratio")
        );
    }
}
