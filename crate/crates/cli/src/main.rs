use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use equireg::cloud_io::{read_cloud, write_cloud};
use equireg::encoder::encode;
use equireg::geom3::rotation_to_axis_angle;
use equireg::register::register_features;
use equireg::selfcheck::{self, SelfcheckConfig};
use equireg::shapes::{sample_surface, shape_set, ShapeSetConfig};
use equireg::train::{evaluate, train, Condition, TrainConfig, DEFAULT_GRID};
use equireg::{Error, ModelParams, RandomStream};

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser)]
#[command(name = "equireg", version, about = "Rotation-equivariant point cloud registration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate procedural shapes and sample a cloud from each.
    Gen {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        shapes: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        points: usize,
    },
    /// Run both training stages from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training report path (default: `<out>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate the rotation taking `source` onto `target`.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Mean isotropic error per max-angle cell under one perturbation condition.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// copy, noise, density or crop.
        #[arg(long)]
        condition: String,
        /// Comma-separated max angles in degrees.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GRID.to_vec())]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 50)]
        pairs_per_cell: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of evaluation shapes.
        #[arg(long, default_value_t = 20)]
        shapes: usize,
        #[arg(long, default_value_t = 1001)]
        shape_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the invariant batteries; exit 1 if any fails.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_relu_fault: bool,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => EXIT_USAGE,
            Error::NonFiniteLoss { .. } | Error::GradientUnavailable(_) => EXIT_NUMERIC,
            Error::Integrity(_) | Error::Io(_) => EXIT_DATA,
            Error::State(_) => EXIT_CHECK,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

type CmdResult = Result<(), Failure>;

fn io_ctx(path: &Path, e: std::io::Error) -> Failure {
    fail(EXIT_DATA, format!("{}: {e}", path.display()))
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("EQUIREG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn cmd_gen(shapes: u64, out: &Path, seed: u64, points: usize) -> CmdResult {
    let set = shape_set(&ShapeSetConfig {
        count: shapes as usize,
        seed,
        ..ShapeSetConfig::default()
    })?;
    std::fs::create_dir_all(out).map_err(|e| io_ctx(out, e))?;
    let root = RandomStream::new(seed).split(0xC10D);
    for (i, s) in set.iter().enumerate() {
        let spec = out.join(format!("shape_{i:04}.json"));
        let json = serde_json::to_string_pretty(s).expect("shape serialises");
        std::fs::write(&spec, json + "\n").map_err(|e| io_ctx(&spec, e))?;
        let pc = sample_surface(s, points, &mut root.split(i as u64))?;
        write_cloud(out.join(format!("shape_{i:04}.pcb")), &pc.points)?;
    }
    println!("wrote {} shapes to {}", set.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, report: Option<&Path>) -> CmdResult {
    let text = std::fs::read_to_string(config)
        .map_err(|e| fail(EXIT_USAGE, format!("cannot read config {}: {e}", config.display())))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| fail(EXIT_USAGE, format!("bad config {}: {e}", config.display())))?;
    let (params, rep) = train(&cfg)?;
    params.save(out)?;
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", out.display())));
    let json = serde_json::to_string_pretty(&rep).expect("report serialises");
    std::fs::write(&report_path, json + "\n").map_err(|e| io_ctx(&report_path, e))?;
    let last = |r: &equireg::train::StageReport| r.epochs.last().map_or(f64::NAN, |e| e.total);
    println!(
        "stage1 loss {:.6} | stage2 loss {:.6} | accuracy {:.4} | {:.1}s",
        last(&rep.stage1),
        last(&rep.stage2),
        rep.stage1_accuracy.unwrap_or(f64::NAN),
        rep.wall_time_s
    );
    println!("checkpoint {} | report {}", out.display(), report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct RegisterRecord {
    rotation: [[f64; 3]; 3],
    axis: [f64; 3],
    angle_deg: f64,
    degenerate: bool,
    singular_values: [f64; 3],
}

fn cmd_register(ckpt: &Path, source: &Path, target: &Path, json: bool) -> CmdResult {
    let params = ModelParams::load(ckpt)?;
    let src = read_cloud(source)?;
    let tgt = read_cloud(target)?;
    let k = params.config.encoder.graph.k;
    for (p, pc) in [(source, &src), (target, &tgt)] {
        if pc.len() <= k {
            return Err(fail(
                EXIT_DATA,
                format!("{}: {} points, need more than {k}", p.display(), pc.len()),
            ));
        }
    }
    let sol = register_features(&encode(&src, &params)?, &encode(&tgt, &params)?)?;
    let aa = rotation_to_axis_angle(&sol.r_est);
    let rec = RegisterRecord {
        rotation: sol.r_est.rows(),
        axis: aa.axis,
        angle_deg: aa.angle.to_degrees(),
        degenerate: sol.degenerate,
        singular_values: sol.svd.s,
    };
    if json {
        println!("{}", serde_json::to_string(&rec).expect("record serialises"));
    } else {
        println!("rotation:");
        for r in rec.rotation {
            println!("  {:>24.17e} {:>24.17e} {:>24.17e}", r[0], r[1], r[2]);
        }
        println!(
            "axis: {:.17e} {:.17e} {:.17e}",
            rec.axis[0], rec.axis[1], rec.axis[2]
        );
        println!("angle_deg: {:.12}", rec.angle_deg);
        println!("degenerate: {}", rec.degenerate);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    condition: &str,
    grid: &[f64],
    pairs_per_cell: usize,
    seed: u64,
    n_shapes: usize,
    shape_seed: u64,
    out: &Path,
    json: Option<&Path>,
) -> CmdResult {
    let cond = Condition::parse(condition)?;
    if pairs_per_cell == 0 || n_shapes == 0 {
        return Err(fail(EXIT_USAGE, "--pairs-per-cell and --shapes must be >= 1"));
    }
    let params = ModelParams::load(ckpt)?;
    let shapes = shape_set(&ShapeSetConfig {
        count: n_shapes,
        seed: shape_seed,
        ..ShapeSetConfig::default()
    })?;
    let table = evaluate(
        &params,
        &shapes,
        cond.name(),
        &cond.perturbation(),
        grid,
        pairs_per_cell,
        seed,
        equireg::Exec::Parallel,
    )?;
    let csv = table.to_csv();
    std::fs::write(out, &csv).map_err(|e| io_ctx(out, e))?;
    if let Some(j) = json {
        let text = serde_json::to_string_pretty(&table).expect("table serialises");
        std::fs::write(j, text + "\n").map_err(|e| io_ctx(j, e))?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_selfcheck(inject_relu_fault: bool) -> CmdResult {
    equireg::vn::inject_relu_grad_fault(inject_relu_fault);
    let report = selfcheck::run(&SelfcheckConfig::default())?;
    for b in &report.batteries {
        println!(
            "{:<13} {} max_error {:.3e} (tolerance {:.0e}, {} cases)",
            b.name,
            if b.passed { "PASS" } else { "FAIL" },
            b.max_error,
            b.tolerance,
            b.cases
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(fail(EXIT_CHECK, "self-check failed"))
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.cmd {
        Cmd::Gen {
            shapes,
            out,
            seed,
            points,
        } => cmd_gen(shapes, &out, seed, points),
        Cmd::Train { config, out, report } => cmd_train(&config, &out, report.as_deref()),
        Cmd::Register {
            ckpt,
            source,
            target,
            json,
        } => cmd_register(&ckpt, &source, &target, json),
        Cmd::Eval {
            ckpt,
            condition,
            grid,
            pairs_per_cell,
            seed,
            shapes,
            shape_seed,
            out,
            json,
        } => cmd_eval(
            &ckpt,
            &condition,
            &grid,
            pairs_per_cell,
            seed,
            shapes,
            shape_seed,
            &out,
            json.as_deref(),
        ),
        Cmd::Selfcheck { inject_relu_fault } => cmd_selfcheck(inject_relu_fault),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
