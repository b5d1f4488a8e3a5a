//! Acceptance run: one PASS/FAIL line per criterion. Criteria 1-8 are
//! measured twice (parallel, then sequential) and criterion 9 compares the
//! two runs bit for bit.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use common::central_diff;
use equireg::decoder::decode_logits;
use equireg::encoder::{encode, EncoderConfig};
use equireg::geom3::{isotropic_rotation_error, sample_rotation};
use equireg::register::register_features;
use equireg::selfcheck::{equivariance_battery, layer_gradient_errors_with, svd_gradient_error_with, SelfcheckConfig};
use equireg::shapes::{sample_queries, sample_surface, shape_set, ShapeSetConfig};
use equireg::train::{evaluate, train, Condition, EvalTable, TrainConfig, DEFAULT_GRID};
use equireg::{Exec, ModelParams, RandomStream, Rotation, VnFeature};

const EVAL_SHAPES: usize = 20;
const EVAL_SHAPE_SEED: u64 = 1001;
const EVAL_SEED: u64 = 11;
const PAIRS_PER_CELL: usize = 50;
const TRAINED_GRID: [f64; 6] = [30.0, 60.0, 90.0, 120.0, 150.0, 180.0];

struct Line {
    id: usize,
    passed: bool,
    detail: String,
}

#[derive(Default)]
struct Run {
    lines: Vec<Line>,
    /// Every reported number, in order, for the determinism comparison.
    numbers: Vec<(String, f64)>,
    artifacts: Vec<(String, Vec<u8>)>,
}

impl Run {
    fn record(&mut self, name: &str, v: f64) -> f64 {
        self.numbers.push((name.to_string(), v));
        v
    }

    fn line(&mut self, id: usize, passed: bool, detail: String) {
        self.lines.push(Line { id, passed, detail });
    }
}

fn own_fd(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    central_diff(f, x, &(0..x.len()).collect::<Vec<_>>(), h)
}

fn frob_residual(q: &VnFeature, qp: &VnFeature, r: &Rotation) -> f64 {
    q.rotated(r)
        .rows()
        .iter()
        .zip(qp.rows())
        .map(|(a, b)| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn criterion1(run: &mut Run) {
    let t = Instant::now();
    let cfg = SelfcheckConfig {
        seed: 101,
        weight_seeds: 5,
        clouds: 100,
        rotations: 10,
        points: 256,
        encoder: EncoderConfig::desk(),
        ..SelfcheckConfig::default()
    };
    let b = equivariance_battery(&cfg).expect("equivariance battery runs");
    let secs = t.elapsed().as_secs_f64();
    let defect = run.record("c1.defect", b.max_error);
    run.line(
        1,
        defect < 1e-10 && secs < 120.0,
        format!("max relative defect {defect:.3e} over {} cases (< 1e-10), {secs:.1}s (< 120s)", b.cases),
    );
}

fn table_numbers(run: &mut Run, key: &str, t: &EvalTable) {
    for c in &t.cells {
        run.record(&format!("{key}.{}", c.max_angle_deg), c.mean_error_deg);
    }
    run.artifacts.push((format!("{key}.csv"), t.to_csv().into_bytes()));
}

fn eval(params: &ModelParams, cond: Condition, grid: &[f64], exec: Exec) -> (EvalTable, f64) {
    let shapes = shape_set(&ShapeSetConfig {
        count: EVAL_SHAPES,
        seed: EVAL_SHAPE_SEED,
        ..ShapeSetConfig::default()
    })
    .expect("eval shapes");
    let t = Instant::now();
    let table = evaluate(params, &shapes, cond.name(), &cond.perturbation(), grid, PAIRS_PER_CELL, EVAL_SEED, exec)
        .expect("evaluation runs");
    (table, t.elapsed().as_secs_f64())
}

fn criterion2(run: &mut Run, params: &ModelParams, exec: Exec) {
    let (t, secs) = eval(params, Condition::Copy, &DEFAULT_GRID, exec);
    table_numbers(run, "c2", &t);
    let worst = t.means().into_iter().fold(0.0f64, f64::max);
    let spread = t.spread();
    run.line(
        2,
        worst < 0.1 && spread < 0.05 && secs < 300.0,
        format!("worst cell {worst:.3e} deg (< 0.1), spread {spread:.3e} deg (< 0.05), {secs:.1}s (< 300s)"),
    );
}

fn criterion3(run: &mut Run) {
    let t = Instant::now();
    let mut rng = RandomStream::new(303);
    let mut recovery = 0.0f64;
    for _ in 0..1000 {
        let q = VnFeature::global((0..16).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect());
        let r = sample_rotation(PI, &mut rng).unwrap();
        let sol = register_features(&q, &q.rotated(&r)).unwrap();
        recovery = recovery.max(isotropic_rotation_error(&r, &sol.r_est));
    }
    let mut violation = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let q = VnFeature::global((0..16).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect());
        let r = sample_rotation(PI, &mut rng).unwrap();
        let mut qp = q.rotated(&r);
        for row in qp.rows_mut() {
            for x in row.iter_mut() {
                *x += 0.1 * rng.normal();
            }
        }
        let best = frob_residual(&q, &qp, &register_features(&q, &qp).unwrap().r_est);
        for _ in 0..1000 {
            let cand = sample_rotation(PI, &mut rng).unwrap();
            violation = violation.max(best - frob_residual(&q, &qp, &cand));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    run.record("c3.recovery", recovery);
    run.record("c3.violation", violation);
    run.line(
        3,
        recovery < 1e-6 && violation <= 1e-9 && secs < 120.0,
        format!(
            "recovery {recovery:.3e} deg (< 1e-6), worst optimality excess {violation:.3e} (<= 1e-9), {secs:.1}s (< 120s)"
        ),
    );
}

fn criterion4(run: &mut Run) {
    let t = Instant::now();
    let (layers, n) = layer_gradient_errors_with(50, 404, &own_fd).expect("layer gradients");
    let svd = svd_gradient_error_with(500, 405, &own_fd).expect("svd gradients");
    let secs = t.elapsed().as_secs_f64();
    run.record("c4.layers", layers);
    run.record("c4.svd", svd);
    run.line(
        4,
        layers < 1e-5 && svd < 1e-4 && secs < 180.0,
        format!("layers {layers:.3e} over {n} tensors (< 1e-5), svd path {svd:.3e} over 500 (< 1e-4), {secs:.1}s (< 180s)"),
    );
}

fn flat_line(run: &mut Run, id: usize, key: &str, t: &EvalTable, ratio: f64, extra: Option<(bool, String)>) {
    table_numbers(run, key, t);
    let (mean, spread) = (t.mean(), t.spread());
    let finite = t.means().iter().all(|m| m.is_finite());
    let (ok_extra, extra_msg) = extra.unwrap_or((true, String::new()));
    let cells: Vec<String> = t.means().iter().map(|m| format!("{m:.2}")).collect();
    run.line(
        id,
        finite && spread <= ratio * mean && ok_extra,
        format!(
            "{} mean {mean:.3} deg, spread {spread:.3} (<= {ratio} x mean = {:.3}){extra_msg}, cells [{}]",
            t.condition,
            ratio * mean,
            cells.join(", ")
        ),
    );
}

fn criterion8_invariance(params: &ModelParams) -> f64 {
    let shapes = shape_set(&ShapeSetConfig {
        count: 10,
        seed: 808,
        ..ShapeSetConfig::default()
    })
    .unwrap();
    let mut rng = RandomStream::new(808);
    let mut worst = 0.0f64;
    for s in &shapes {
        let pc = sample_surface(s, 512, &mut rng).unwrap();
        let q = encode(&pc, params).unwrap();
        let r = sample_rotation(PI, &mut rng).unwrap();
        let batch = sample_queries(s, 64, &mut rng);
        let rq: Vec<_> = batch.queries.iter().map(|p| r.apply(p)).collect();
        let a = decode_logits(&q, &batch.queries, &params.decoder).unwrap();
        let b = decode_logits(&q.rotated(&r), &rq, &params.decoder).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((sigmoid(*x) - sigmoid(*y)).abs());
        }
    }
    worst
}

fn measure(exec: Exec) -> Run {
    let mut run = Run::default();
    criterion1(&mut run);

    let cfg = TrainConfig {
        exec,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (params, report) = train(&cfg).expect("desk training runs");
    let train_secs = t.elapsed().as_secs_f64();
    run.artifacts.push(("checkpoint".into(), params.to_bytes()));
    for (i, l) in report.stage1.step_losses.iter().chain(&report.stage2.step_losses).enumerate() {
        run.record(&format!("loss.{i}"), *l);
    }

    criterion2(&mut run, &params, exec);
    criterion3(&mut run);
    criterion4(&mut run);

    let (noise, _) = eval(&params, Condition::Noise, &TRAINED_GRID, exec);
    let n_mean = noise.mean();
    let shapes_ok = cfg.shapes.count >= 20 && train_secs <= 1800.0;
    flat_line(
        &mut run,
        5,
        "c5",
        &noise,
        0.5,
        Some((
            n_mean <= 10.0 && shapes_ok,
            format!(
                ", mean <= 10 deg, trained on {} shapes in {train_secs:.0}s (<= 1800s)",
                cfg.shapes.count
            ),
        )),
    );
    let (density, _) = eval(&params, Condition::Density, &TRAINED_GRID, exec);
    let d_mean = density.mean();
    flat_line(
        &mut run,
        6,
        "c6",
        &density,
        0.5,
        Some((d_mean > n_mean, format!(", above noise mean {n_mean:.3}"))),
    );
    let (crop, _) = eval(&params, Condition::Crop, &TRAINED_GRID, exec);
    flat_line(&mut run, 7, "c7", &crop, 0.6, None);

    let acc = run.record("c8.accuracy", report.stage1_accuracy.unwrap_or(f64::NAN));
    let inv = run.record("c8.invariance", criterion8_invariance(&params));
    run.line(
        8,
        acc >= 0.9 && inv < 1e-12,
        format!("held-out query accuracy {acc:.4} (>= 0.9), decoder rotation defect {inv:.3e} (< 1e-12)"),
    );
    run
}

fn main() {
    let first = measure(Exec::Parallel);
    for l in &first.lines {
        println!("criterion {}: {} | {}", l.id, if l.passed { "PASS" } else { "FAIL" }, l.detail);
    }
    let second = measure(Exec::Sequential);
    let mut mismatches = Vec::new();
    if first.numbers.len() != second.numbers.len() {
        mismatches.push("number count".to_string());
    }
    for ((ka, a), (_, b)) in first.numbers.iter().zip(&second.numbers) {
        // Wall times are not recorded, so every number must repeat bit for bit.
        if a.to_bits() != b.to_bits() {
            mismatches.push(ka.clone());
        }
    }
    for ((ka, a), (_, b)) in first.artifacts.iter().zip(&second.artifacts) {
        if a != b {
            mismatches.push(ka.clone());
        }
    }
    let rerun_verdicts = first.lines.iter().zip(&second.lines).all(|(a, b)| a.passed == b.passed);
    let det = mismatches.is_empty() && rerun_verdicts;
    println!(
        "criterion 9: {} | {} numbers and {} artifacts compared across a parallel and a sequential run, {} mismatched{}",
        if det { "PASS" } else { "FAIL" },
        first.numbers.len(),
        first.artifacts.len(),
        mismatches.len(),
        if mismatches.is_empty() { String::new() } else { format!(": {}", mismatches.join(", ")) }
    );
    let all = first.lines.iter().all(|l| l.passed) && det;
    if !all {
        eprintln!("acceptance: at least one criterion failed");
        std::process::exit(1);
    }
}
