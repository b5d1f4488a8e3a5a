//! Desk-scale two-stage training followed by the four evaluation tables.
//!
//! `cargo run --release --example desk_run -- [config.json]`

use std::time::Instant;

use equireg::shapes::{shape_set, ShapeSetConfig};
use equireg::train::{evaluate, train, Condition, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg: TrainConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    let t0 = Instant::now();
    let (params, report) = train(&cfg)?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    println!("stage1 accuracy {:.4}", report.stage1_accuracy.unwrap_or(f64::NAN));
    for e in report.stage1.epochs.iter().chain(&report.stage2.epochs) {
        println!("epoch {:>2} occ {:.4} reg {:.4}", e.epoch, e.occ, e.reg);
    }
    let held_out = shape_set(&ShapeSetConfig {
        count: 20,
        seed: 1001,
        ..ShapeSetConfig::default()
    })?;
    let grid = [30.0, 60.0, 90.0, 120.0, 150.0, 180.0];
    for c in Condition::ALL {
        let t = Instant::now();
        let table = evaluate(&params, &held_out, c.name(), &c.perturbation(), &grid, 50, 11, cfg.exec)?;
        let cells: Vec<String> = table.means().iter().map(|m| format!("{m:.2}")).collect();
        println!(
            "{:<8} mean {:.3} spread {:.3} cells [{}] ({:.1}s)",
            c.name(),
            table.mean(),
            table.spread(),
            cells.join(", "),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
