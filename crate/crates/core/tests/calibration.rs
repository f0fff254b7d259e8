//! Regenerates `data/tol_disc.json`. Run with
//! `cargo test -p hydrokam-core --test calibration -- --ignored`.
//!
//! The constant is fitted on seeds disjoint from the acceptance runs, at
//! three refinement levels, as `safety * max(violation / (dt + dx^2))`.

mod common;

use common::{controlled_instance, data_path, worst_estimate_margin, CalibrationLevel, TolDisc};

const CALIBRATION_SEEDS: std::ops::Range<u64> = 1000..1010;
const SAFETY: f64 = 2.0;

#[test]
#[ignore]
fn calibrate_tol_disc() {
    let mut levels = Vec::new();
    let mut ratio: f64 = 0.0;
    for (m, dt) in [(16usize, 1e-2), (32, 5e-3), (32, 2e-3), (64, 1e-3), (128, 5e-4)] {
        let dx = 1.0 / m as f64;
        let mut worst: f64 = 0.0;
        for seed in CALIBRATION_SEEDS {
            let inst = controlled_instance(m, seed);
            worst = worst.max(-worst_estimate_margin(&inst, dt));
        }
        worst += 0.0;
        ratio = ratio.max(worst / (dt + dx * dx));
        println!("M = {m}, dt = {dt}: worst violation {worst:e}");
        levels.push(CalibrationLevel {
            m,
            dt,
            worst_violation: worst,
        });
    }
    let tol = TolDisc {
        c: SAFETY * ratio + 0.0,
        observed_ratio: ratio,
        safety: SAFETY,
        levels,
    };
    let text = serde_json::to_string_pretty(&tol).unwrap();
    std::fs::write(data_path("tol_disc.json"), text + "\n").unwrap();
    println!("C = {}", tol.c);
}
