//! Learning-rate multipliers of the three schedules.
//!
//! Run with `cargo run --example lr_schedules`.

use normuon::trainer::LrSchedule;

fn main() {
    let total = 100;
    let schedules = [
        ("constant", LrSchedule::constant()),
        ("warmup_linear_decay", LrSchedule::warmup_linear_decay(10)),
        ("wsd", LrSchedule::wsd(10, 0.8)),
    ];
    print!("{:>5}", "step");
    for (name, _) in &schedules {
        print!(" {name:>20}");
    }
    println!();
    for step in (0..=total).step_by(10) {
        print!("{step:>5}");
        for (_, s) in &schedules {
            print!(" {:>20.3}", s.multiplier(step, total).unwrap());
        }
        println!();
    }
}
