//! Two-stage training and the angle-sweep evaluation.
//!
//! Stage 1 fits encoder and decoder to occupancy only. Stage 2 trains on
//! perturbed pairs with `w_reg L_reg + w_occ (L_occ1 + L_occ2)`, where the
//! registration term is back-propagated through the Procrustes SVD.
//!
//! Every batch element draws from its own split stream and the gradient
//! reduction runs in index order, so results are bit-identical whether the
//! batch is evaluated sequentially or in parallel.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::{occupancy_accuracy, occupancy_loss_grad};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::geom3::{isotropic_rotation_error, Point3, Rotation};
use crate::model::{ModelConfig, ModelParams};
use crate::register::{
    backward_with_fallback, cross_covariance_backward, needs_fallback, register_features, registration_loss,
    registration_loss_grad,
};
use crate::rng::RandomStream;
use crate::shapes::{make_pair, sample_queries_mixed, sample_surface, PerturbationConfig, QueryBatch, ShapeModel, ShapeSetConfig};
use crate::vn::VnFeature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySampling {
    /// Share of queries drawn near the surface; the rest are uniform in the cube.
    pub near_fraction: f64,
    pub near_sigma: f64,
}

impl Default for QuerySampling {
    /// Uniform queries only.
    fn default() -> Self {
        Self {
            near_fraction: 0.0,
            near_sigma: 0.05,
        }
    }
}

impl QuerySampling {
    pub fn sample(&self, shape: &ShapeModel, n: usize, rng: &mut RandomStream) -> QueryBatch {
        sample_queries_mixed(shape, n, self.near_fraction, self.near_sigma, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub points_per_cloud: usize,
    pub queries_per_cloud: usize,
    pub lr: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 30,
            batch_size: 8,
            points_per_cloud: 512,
            queries_per_cloud: 512,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub pair_batch_size: usize,
    pub perturbation: PerturbationConfig,
    /// Further perturbations; each pair draws uniformly from `perturbation`
    /// and these.
    #[serde(default)]
    pub extra_perturbations: Vec<PerturbationConfig>,
    pub max_angle_deg: f64,
    pub queries_per_cloud: usize,
    pub lr: f64,
    pub w_occ: f64,
    pub w_reg: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 30,
            pair_batch_size: 4,
            perturbation: PerturbationConfig::noisy(512, 0.01),
            extra_perturbations: Vec::new(),
            max_angle_deg: 180.0,
            queries_per_cloud: 512,
            lr: 1e-3,
            w_occ: 1.0,
            w_reg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub shapes: ShapeSetConfig,
    #[serde(default)]
    pub queries: QuerySampling,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub exec: Exec,
}

fn default_seed() -> u64 {
    7
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            shapes: ShapeSetConfig::default(),
            queries: QuerySampling::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            seed: default_seed(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            exec: Exec::default(),
        }
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        let s1 = &self.stage1;
        if s1.steps_per_epoch == 0 || s1.batch_size == 0 || s1.queries_per_cloud == 0 {
            return Err(invalid("stage 1 counts must be positive"));
        }
        if s1.points_per_cloud <= self.model.encoder.graph.k {
            return Err(invalid("stage 1 points_per_cloud must exceed the graph k"));
        }
        check_lr(s1.lr)?;
        let s2 = &self.stage2;
        if s2.steps_per_epoch == 0 || s2.pair_batch_size == 0 || s2.queries_per_cloud == 0 {
            return Err(invalid("stage 2 counts must be positive"));
        }
        s2.perturbation.validate()?;
        for p in &s2.extra_perturbations {
            p.validate()?;
        }
        check_lr(s2.lr)?;
        if !(s2.w_occ >= 0.0 && s2.w_reg >= 0.0) || (s2.w_occ == 0.0 && s2.w_reg == 0.0) {
            return Err(invalid("stage 2 loss weights must be >= 0 and not both zero"));
        }
        if !(0.0..=180.0).contains(&s2.max_angle_deg) {
            return Err(invalid("stage 2 max_angle_deg must lie in [0, 180]"));
        }
        if !(0.0..=1.0).contains(&self.queries.near_fraction) || !(self.queries.near_sigma >= 0.0) {
            return Err(invalid("query sampling parameters out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub occ: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub epochs: Vec<EpochStats>,
    /// Total loss of every step, in order.
    pub step_losses: Vec<f64>,
    /// Steps whose SVD backward used the perturbation fallback.
    pub fallback_steps: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub stage1: StageReport,
    pub stage2: StageReport,
    pub wall_time_s: f64,
    /// Held-out occupancy accuracy after stage 1.
    pub stage1_accuracy: Option<f64>,
    pub final_eval: Option<EvalTable>,
}

/// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
pub struct Adam {
    lr: f64,
    t: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let lr = self.lr;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                p[i] -= step;
            }
        }
    }
}

struct ElementGrad {
    occ: f64,
    reg: f64,
    total: f64,
    fallback: bool,
    grads: ModelParams,
}

fn non_finite(stage: &'static str, step: usize, value: f64) -> Error {
    Error::NonFiniteLoss { stage, step, value }
}

fn stage1_element(
    params: &ModelParams,
    shapes: &[ShapeModel],
    cfg: &TrainConfig,
    step: usize,
    rng: &mut RandomStream,
) -> Result<ElementGrad> {
    let s1 = &cfg.stage1;
    let shape = &shapes[rng.below(shapes.len())];
    let cloud = sample_surface(shape, s1.points_per_cloud, rng)?;
    let batch = cfg.queries.sample(shape, s1.queries_per_cloud, rng);
    let (q, tape) = params
        .encoder
        .encode_recorded(&cfg.model.encoder.graph, &cloud.points, &mut rng.split(0))?;
    if !q.is_finite() {
        return Err(non_finite("stage1", step, f64::NAN));
    }
    let og = occupancy_loss_grad(&q, &batch, &params.decoder)?;
    if !og.loss.is_finite() {
        return Err(non_finite("stage1", step, og.loss));
    }
    let mut grads = params.zeros_like();
    tape.backward(&og.grad_q, &mut grads.encoder)?;
    grads.decoder = og.grad_params;
    Ok(ElementGrad {
        occ: og.loss,
        reg: 0.0,
        total: og.loss,
        fallback: false,
        grads,
    })
}

/// Stage-2 objective `w_reg L_reg + w_occ (L_occ1 + L_occ2)` of one pair
/// and its gradient with respect to every parameter.
#[derive(Debug, Clone)]
pub struct PairObjective {
    pub occ: f64,
    pub reg: f64,
    pub total: f64,
    /// The SVD backward used the perturbation fallback.
    pub fallback: bool,
    pub grads: ModelParams,
}

/// `batches` holds the labelled queries of source and target; pass `None`
/// when `w_occ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective(
    params: &ModelParams,
    w_occ: f64,
    w_reg: f64,
    source: &[Point3],
    target: &[Point3],
    r_gt: &Rotation,
    batches: Option<(&QueryBatch, &QueryBatch)>,
    rng: &RandomStream,
) -> Result<PairObjective> {
    let graph = &params.config.encoder.graph;
    let (q1, tape1) = params.encoder.encode_recorded(graph, source, &mut rng.split(0))?;
    let (q2, tape2) = params.encoder.encode_recorded(graph, target, &mut rng.split(1))?;
    if !(q1.is_finite() && q2.is_finite()) {
        return Err(non_finite("stage2", 0, f64::NAN));
    }
    let sol = register_features(&q1, &q2)?;
    let reg = registration_loss(r_gt, &sol);
    let mut grads = params.zeros_like();
    let mut g1 = VnFeature::zeros(1, q1.channels());
    let mut g2 = VnFeature::zeros(1, q2.channels());
    let mut fallback = false;
    if w_reg > 0.0 {
        let g_r = registration_loss_grad(r_gt, &sol.r_est) * w_reg;
        fallback = needs_fallback(&sol);
        let g_h = backward_with_fallback(&sol, &g_r)?;
        let (d1, d2) = cross_covariance_backward(&q1, &q2, &g_h);
        g1.axpy(1.0, &d1);
        g2.axpy(1.0, &d2);
    }
    let mut occ = 0.0;
    if let (true, Some((b1, b2))) = (w_occ > 0.0, batches) {
        let o1 = occupancy_loss_grad(&q1, b1, &params.decoder)?;
        let o2 = occupancy_loss_grad(&q2, b2, &params.decoder)?;
        occ = o1.loss + o2.loss;
        g1.axpy(w_occ, &o1.grad_q);
        g2.axpy(w_occ, &o2.grad_q);
        for ((d, a), b) in grads
            .decoder
            .tensors_mut()
            .into_iter()
            .zip(o1.grad_params.tensors())
            .zip(o2.grad_params.tensors())
        {
            for i in 0..d.len() {
                d[i] = w_occ * (a[i] + b[i]);
            }
        }
    }
    let total = w_reg * reg + w_occ * occ;
    if !total.is_finite() {
        return Err(non_finite("stage2", 0, total));
    }
    tape1.backward(&g1, &mut grads.encoder)?;
    tape2.backward(&g2, &mut grads.encoder)?;
    Ok(PairObjective {
        occ,
        reg,
        total,
        fallback,
        grads,
    })
}

fn stage2_element(
    params: &ModelParams,
    shapes: &[ShapeModel],
    cfg: &TrainConfig,
    step: usize,
    rng: &mut RandomStream,
) -> Result<ElementGrad> {
    let s2 = &cfg.stage2;
    let shape = &shapes[rng.below(shapes.len())];
    let pert = match rng.below(1 + s2.extra_perturbations.len()) {
        0 => &s2.perturbation,
        i => &s2.extra_perturbations[i - 1],
    };
    let (src, tgt, r_gt) = make_pair(shape, pert, s2.max_angle_deg.to_radians(), rng)?;
    let batches = if s2.w_occ > 0.0 {
        let b1 = cfg.queries.sample(shape, s2.queries_per_cloud, rng);
        let b2 = cfg.queries.sample(&shape.rotated(&r_gt), s2.queries_per_cloud, rng);
        Some((b1, b2))
    } else {
        None
    };
    let obj = pair_objective(
        params,
        s2.w_occ,
        s2.w_reg,
        &src.points,
        &tgt.points,
        &r_gt,
        batches.as_ref().map(|(a, b)| (a, b)),
        rng,
    )
    .map_err(|e| match e {
        Error::NonFiniteLoss { stage, value, .. } => Error::NonFiniteLoss { stage, step, value },
        other => other,
    })?;
    Ok(ElementGrad {
        occ: obj.occ,
        reg: obj.reg,
        total: obj.total,
        fallback: obj.fallback,
        grads: obj.grads,
    })
}

type ElementFn = fn(&ModelParams, &[ShapeModel], &TrainConfig, usize, &mut RandomStream) -> Result<ElementGrad>;

struct StageSpec {
    name: &'static str,
    stream: u64,
    epochs: usize,
    steps_per_epoch: usize,
    batch: usize,
    lr: f64,
    element: ElementFn,
}

fn run_stage(
    spec: StageSpec,
    cfg: &TrainConfig,
    mut params: ModelParams,
    shapes: &[ShapeModel],
) -> Result<(ModelParams, StageReport)> {
    if shapes.is_empty() {
        return Err(invalid("training needs a nonempty shape set"));
    }
    let started = Instant::now();
    let stage_rng = RandomStream::new(cfg.seed).split(spec.stream);
    let mut adam = Adam::new(&params, spec.lr);
    let mut report = StageReport::default();
    let mut step = 0;
    for epoch in 0..spec.epochs {
        let (mut occ, mut reg, mut total) = (0.0, 0.0, 0.0);
        for _ in 0..spec.steps_per_epoch {
            let step_rng = stage_rng.split(step as u64);
            let results = cfg.exec.map(spec.batch, |b| {
                (spec.element)(&params, shapes, cfg, step, &mut step_rng.split(b as u64))
            });
            let mut grads = params.zeros_like();
            let (mut s_occ, mut s_reg, mut s_total) = (0.0, 0.0, 0.0);
            let mut fallback = false;
            for r in results {
                let e = r?;
                grads.add_assign(&e.grads);
                s_occ += e.occ;
                s_reg += e.reg;
                s_total += e.total;
                fallback |= e.fallback;
            }
            let inv = 1.0 / spec.batch as f64;
            for t in grads.tensors_mut() {
                for x in t.iter_mut() {
                    *x *= inv;
                }
            }
            adam.step(&mut params, &grads);
            let step_total = s_total * inv;
            report.step_losses.push(step_total);
            report.fallback_steps += fallback as usize;
            occ += s_occ * inv;
            reg += s_reg * inv;
            total += step_total;
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(dir) = &cfg.checkpoint_dir {
                    params.save(dir.join(format!("{}_step{step:06}.eqrg", spec.name)))?;
                }
            }
        }
        let n = spec.steps_per_epoch as f64;
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            occ: occ / n,
            reg: reg / n,
            total: total / n,
        });
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Occupancy-only training.
pub fn train_stage1(cfg: &TrainConfig, params: ModelParams, shapes: &[ShapeModel]) -> Result<(ModelParams, StageReport)> {
    cfg.validate()?;
    let s1 = &cfg.stage1;
    run_stage(
        StageSpec {
            name: "stage1",
            stream: 1,
            epochs: s1.epochs,
            steps_per_epoch: s1.steps_per_epoch,
            batch: s1.batch_size,
            lr: s1.lr,
            element: stage1_element,
        },
        cfg,
        params,
        shapes,
    )
}

/// Joint occupancy and registration training on perturbed pairs.
pub fn train_stage2(cfg: &TrainConfig, params: ModelParams, shapes: &[ShapeModel]) -> Result<(ModelParams, StageReport)> {
    cfg.validate()?;
    let s2 = &cfg.stage2;
    run_stage(
        StageSpec {
            name: "stage2",
            stream: 2,
            epochs: s2.epochs,
            steps_per_epoch: s2.steps_per_epoch,
            batch: s2.pair_batch_size,
            lr: s2.lr,
            element: stage2_element,
        },
        cfg,
        params,
        shapes,
    )
}

/// Shape set, initial weights, stage 1, held-out accuracy, then stage 2.
pub fn train(cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let shapes = crate::shapes::shape_set(&cfg.shapes)?;
    let init = ModelParams::init(&cfg.model, &mut RandomStream::new(cfg.seed).split(0))?;
    let (p1, r1) = train_stage1(cfg, init, &shapes)?;
    let acc = occupancy_accuracy_on(&p1, &shapes, cfg, cfg.seed ^ 0xACC)?;
    let (p2, r2) = train_stage2(cfg, p1, &shapes)?;
    Ok((
        p2,
        TrainReport {
            config: cfg.clone(),
            seed: cfg.seed,
            stage1: r1,
            stage2: r2,
            wall_time_s: started.elapsed().as_secs_f64(),
            stage1_accuracy: Some(acc),
            final_eval: None,
        },
    ))
}

/// Mean accuracy over one fresh cloud and query batch per shape, drawn from
/// streams disjoint from training.
pub fn occupancy_accuracy_on(params: &ModelParams, shapes: &[ShapeModel], cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let root = RandomStream::new(seed);
    let accs = cfg.exec.map(shapes.len(), |i| -> Result<f64> {
        let mut rng = root.split(i as u64);
        let shape = &shapes[i];
        let cloud = sample_surface(shape, cfg.stage1.points_per_cloud, &mut rng)?;
        let batch = cfg.queries.sample(shape, cfg.stage1.queries_per_cloud, &mut rng);
        let q = params.encoder.encode(&cfg.model.encoder.graph, &cloud.points)?;
        occupancy_accuracy(&q, &batch, &params.decoder)
    });
    let mut sum = 0.0;
    for a in accs {
        sum += a?;
    }
    Ok(sum / shapes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub max_angle_deg: f64,
    pub mean_error_deg: f64,
    pub n_pairs: usize,
    pub degenerate_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub condition: String,
    pub seed: u64,
    pub cells: Vec<EvalCell>,
}

pub const CSV_HEADER: &str = "condition,max_angle_deg,mean_error_deg,n_pairs,seed";
pub const DEFAULT_GRID: [f64; 7] = [0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0];

impl EvalTable {
    pub fn means(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.mean_error_deg).collect()
    }

    pub fn mean(&self) -> f64 {
        let m = self.means();
        m.iter().sum::<f64>() / m.len() as f64
    }

    /// `max cell - min cell`.
    pub fn spread(&self) -> f64 {
        let m = self.means();
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                self.condition, c.max_angle_deg, c.mean_error_deg, c.n_pairs, self.seed
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Copy,
    Noise,
    Density,
    Crop,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Copy, Condition::Noise, Condition::Density, Condition::Crop];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Copy => "copy",
            Condition::Noise => "noise",
            Condition::Density => "density",
            Condition::Crop => "crop",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown condition {s:?} (copy, noise, density, crop)")))
    }

    /// Copy: exact permuted copy of 1024 points. Noise: sigma 0.01 on both
    /// clouds. Density: 1024 against an independent 512-point draw. Crop:
    /// 70% half-space crop of both clouds.
    pub fn perturbation(self) -> PerturbationConfig {
        match self {
            Condition::Copy => PerturbationConfig::rotated_copy(1024),
            Condition::Noise => PerturbationConfig::noisy(1024, 0.01),
            Condition::Density => PerturbationConfig::density(1024, 512),
            Condition::Crop => PerturbationConfig::cropped(1024, 0.7),
        }
    }
}

/// Mean isotropic error per max-angle cell. Cell `i` draws its pairs from
/// `seed` split by `i`, then by pair index, so cells are independent and
/// the table does not depend on the execution policy.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ModelParams,
    shapes: &[ShapeModel],
    condition: &str,
    cfg: &PerturbationConfig,
    grid_deg: &[f64],
    pairs_per_cell: usize,
    seed: u64,
    exec: Exec,
) -> Result<EvalTable> {
    if shapes.is_empty() || pairs_per_cell == 0 || grid_deg.is_empty() {
        return Err(invalid("evaluation needs shapes, pairs and a nonempty grid"));
    }
    if grid_deg.iter().any(|a| !(0.0..=180.0).contains(a)) {
        return Err(invalid("grid angles must lie in [0, 180]"));
    }
    cfg.validate()?;
    let root = RandomStream::new(seed);
    let graph = &params.config.encoder.graph;
    let jobs = grid_deg.len() * pairs_per_cell;
    let results = exec.map(jobs, |j| -> Result<(f64, bool)> {
        let (cell, pair) = (j / pairs_per_cell, j % pairs_per_cell);
        let mut rng = root.split(cell as u64).split(pair as u64);
        let shape = &shapes[rng.below(shapes.len())];
        let (src, tgt, r_gt) = make_pair(shape, cfg, grid_deg[cell].to_radians(), &mut rng)?;
        let q1 = params.encoder.encode(graph, &src.points)?;
        let q2 = params.encoder.encode(graph, &tgt.points)?;
        let sol = register_features(&q1, &q2)?;
        Ok((isotropic_rotation_error(&r_gt, &sol.r_est), sol.degenerate))
    });
    let mut cells = Vec::with_capacity(grid_deg.len());
    let mut it = results.into_iter();
    for &angle in grid_deg {
        let (mut sum, mut degen) = (0.0, 0);
        for _ in 0..pairs_per_cell {
            let (e, d) = it.next().expect("one result per job")?;
            sum += e;
            degen += d as usize;
        }
        cells.push(EvalCell {
            max_angle_deg: angle,
            mean_error_deg: sum / pairs_per_cell as f64,
            n_pairs: pairs_per_cell,
            degenerate_pairs: degen,
        });
    }
    Ok(EvalTable {
        condition: condition.to_string(),
        seed,
        cells,
    })
}
