//! Invariant batteries: equivariance, permutation invariance, gradients
//! against central differences, and Procrustes optimality.

use serde::Serialize;

use crate::decoder::{decode_logits, occupancy_loss, occupancy_loss_grad, DecoderConfig, DecoderParams};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::geom3::{isotropic_rotation_error, sample_rotation, Mat3, Point3, Rotation};
use crate::register::{backward_through_svd, register_features, solve_rotation};
use crate::rng::RandomStream;
use crate::shapes::{sample_surface, shape_set, ShapeSetConfig};
use crate::vn::{
    build_graph, edge_conv_backward, edge_conv_init, vn_linear, vn_linear_backward, vn_mean_pool,
    vn_mean_pool_backward, vn_relu, vn_relu_backward, EdgeConv, GraphConfig, VnFeature, VnLinear, VnRelu,
};

use std::f64::consts::PI;

#[derive(Debug, Clone, Serialize)]
pub struct BatteryResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfcheckReport {
    pub batteries: Vec<BatteryResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.batteries.iter().all(|b| b.passed)
    }
}

#[derive(Debug, Clone)]
pub struct SelfcheckConfig {
    pub seed: u64,
    pub weight_seeds: usize,
    pub clouds: usize,
    pub rotations: usize,
    pub points: usize,
    pub gradient_cases: usize,
    pub procrustes_triples: usize,
    pub procrustes_candidates: usize,
    /// Encoder used by the equivariance and permutation batteries.
    pub encoder: EncoderConfig,
}

impl Default for SelfcheckConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            weight_seeds: 2,
            clouds: 10,
            rotations: 5,
            points: 256,
            gradient_cases: 10,
            procrustes_triples: 100,
            procrustes_candidates: 1000,
            encoder: EncoderConfig::fast(),
        }
    }
}

fn battery(name: &'static str, max_error: f64, tolerance: f64, cases: usize) -> BatteryResult {
    BatteryResult {
        name,
        passed: max_error.is_finite() && max_error < tolerance,
        max_error,
        tolerance,
        cases,
    }
}

fn clouds(cfg: &SelfcheckConfig) -> Result<Vec<Vec<Point3>>> {
    let shapes = shape_set(&ShapeSetConfig {
        count: cfg.clouds,
        seed: cfg.seed,
        ..ShapeSetConfig::default()
    })?;
    let root = RandomStream::new(cfg.seed).split(1);
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(sample_surface(s, cfg.points, &mut root.split(i as u64))?.points))
        .collect()
}

/// Relative defect `||f(P R) - f(P) R||_inf / ||f(P)||_inf`, worst case.
pub fn equivariance_battery(cfg: &SelfcheckConfig) -> Result<BatteryResult> {
    let ecfg = &cfg.encoder;
    let clouds = clouds(cfg)?;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for w in 0..cfg.weight_seeds {
        let mut rng = RandomStream::new(cfg.seed).split(100 + w as u64);
        let params = EncoderParams::init(ecfg, &mut rng)?;
        for pts in &clouds {
            let q = params.encode(&ecfg.graph, pts)?;
            for _ in 0..cfg.rotations {
                let r = sample_rotation(PI, &mut rng)?;
                let rotated: Vec<Point3> = pts.iter().map(|p| r.apply(p)).collect();
                let qr = params.encode(&ecfg.graph, &rotated)?;
                worst = worst.max(qr.max_abs_diff(&q.rotated(&r)) / q.max_abs());
                cases += 1;
            }
        }
    }
    Ok(battery("equivariance", worst, 1e-10, cases))
}

/// Permuted clouds must give the same feature; also checks decoder joint-rotation invariance.
pub fn permutation_battery(cfg: &SelfcheckConfig) -> Result<BatteryResult> {
    let ecfg = &cfg.encoder;
    let clouds = clouds(cfg)?;
    let mut rng = RandomStream::new(cfg.seed).split(200);
    let params = EncoderParams::init(ecfg, &mut rng)?;
    let decoder = DecoderParams::init(ecfg.c_out, &DecoderConfig::default(), &mut rng)?;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for pts in &clouds {
        let q = params.encode(&ecfg.graph, pts)?;
        let perm = rng.permutation(pts.len());
        let shuffled: Vec<Point3> = perm.iter().map(|&i| pts[i]).collect();
        worst = worst.max(params.encode(&ecfg.graph, &shuffled)?.max_abs_diff(&q) / q.max_abs());
        let r = sample_rotation(PI, &mut rng)?;
        let queries: Vec<Point3> = (0..16).map(|_| [rng.uniform() - 0.5, rng.uniform() - 0.5, rng.uniform() - 0.5]).collect();
        let rq: Vec<Point3> = queries.iter().map(|p| r.apply(p)).collect();
        let a = decode_logits(&q, &queries, &decoder)?;
        let b = decode_logits(&q.rotated(&r), &rq, &decoder)?;
        for (x, y) in a.iter().zip(&b) {
            let (px, py) = (sigmoid(*x), sigmoid(*y));
            worst = worst.max((px - py).abs());
        }
        cases += 1;
    }
    Ok(battery("permutation", worst, 1e-12, cases))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-30.0, 30.0)).exp())
}

/// `||a - b||_inf / ||b||_inf`, with `b` the reference.
pub fn normwise_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Differentiation oracle: `(f, x, h)` to the gradient of `f` at `x`.
pub type FiniteDiff = dyn Fn(&mut dyn FnMut(&[f64]) -> f64, &[f64], f64) -> Vec<f64>;

/// Central differences of `f` at `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn flatten(v: &VnFeature) -> Vec<f64> {
    v.rows().iter().flatten().copied().collect()
}

fn unflatten(points: usize, channels: usize, x: &[f64]) -> VnFeature {
    VnFeature::from_rows(points, channels, x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
        .expect("shape preserved")
}

fn random_feature(n: usize, c: usize, rng: &mut RandomStream) -> VnFeature {
    VnFeature::from_rows(n, c, (0..n * c).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect())
        .expect("shape preserved")
}

fn random_vec(len: usize, rng: &mut RandomStream) -> Vec<f64> {
    (0..len).map(|_| rng.normal()).collect()
}

/// Smallest `|<v, k>| / (|v| |k|)` over all rows; configurations below
/// `1e-4` sit too close to the relu kink for a finite-difference check.
pub fn relu_margin(v: &VnFeature, p: &VnRelu) -> f64 {
    let mut m = f64::INFINITY;
    for n in 0..v.points() {
        let rows = v.point(n);
        let dir = |d: usize| {
            let mut k = [0.0; 3];
            for (u, r) in p.u[d * p.channels..(d + 1) * p.channels].iter().zip(rows) {
                for i in 0..3 {
                    k[i] += u * r[i];
                }
            }
            k
        };
        let shared = dir(0);
        for (c, r) in rows.iter().enumerate() {
            let k = if p.dirs == 1 { shared } else { dir(c) };
            let a = r[0] * k[0] + r[1] * k[1] + r[2] * k[2];
            let nv = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            let nk = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
            m = m.min(a.abs() / (nv * nk));
        }
    }
    m
}

const LAYER_STEP: f64 = 1e-5;
const SVD_STEP: f64 = 1e-6;

/// Layer gradients (`vn_linear`, `vn_relu` shared and per-channel, mean
/// pool, edge conv, decoder) against central differences; returns the worst
/// normwise relative error and the number of checked tensors.
pub fn layer_gradient_errors(cases: usize, seed: u64) -> Result<(f64, usize)> {
    layer_gradient_errors_with(cases, seed, &central_difference)
}

/// [`layer_gradient_errors`] with a caller-supplied reference.
pub fn layer_gradient_errors_with(cases: usize, seed: u64, central_difference: &FiniteDiff) -> Result<(f64, usize)> {
    let mut rng = RandomStream::new(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut record = |e: f64, worst: &mut f64| {
        *worst = worst.max(e);
        checked += 1;
    };
    let (n, c_in, c_out) = (4, 5, 6);
    for _ in 0..cases {
        // vn_linear
        let v = random_feature(n, c_in, &mut rng);
        let lin = VnLinear::new(c_out, c_in, random_vec(c_out * c_in, &mut rng))?;
        let g = random_feature(n, c_out, &mut rng);
        let (gi, gw) = vn_linear_backward(&v, &lin, &g);
        let fd_w = central_difference(
            &mut |w| vn_linear(&v, &VnLinear::new(c_out, c_in, w.to_vec()).unwrap()).unwrap().dot(&g),
            &lin.w,
            LAYER_STEP,
        );
        record(normwise_rel_error(&gw, &fd_w), &mut worst);
        let fd_v = central_difference(
            &mut |x| vn_linear(&unflatten(n, c_in, x), &lin).unwrap().dot(&g),
            &flatten(&v),
            LAYER_STEP,
        );
        record(normwise_rel_error(&flatten(&gi), &fd_v), &mut worst);

        // vn_relu, both direction layouts
        for per_channel in [false, true] {
            let (v, relu) = loop {
                let v = random_feature(n, c_out, &mut rng);
                let relu = if per_channel {
                    VnRelu::per_channel(c_out, random_vec(c_out * c_out, &mut rng))?
                } else {
                    VnRelu::shared(random_vec(c_out, &mut rng))
                };
                if relu_margin(&v, &relu) > 1e-4 {
                    break (v, relu);
                }
            };
            let g = random_feature(n, c_out, &mut rng);
            let (gi, gu) = vn_relu_backward(&v, &relu, &g);
            let fd_u = central_difference(
                &mut |u| {
                    let p = VnRelu { u: u.to_vec(), ..relu.clone() };
                    vn_relu(&v, &p).unwrap().dot(&g)
                },
                &relu.u,
                LAYER_STEP,
            );
            record(normwise_rel_error(&gu, &fd_u), &mut worst);
            let fd_v = central_difference(
                &mut |x| vn_relu(&unflatten(n, c_out, x), &relu).unwrap().dot(&g),
                &flatten(&v),
                LAYER_STEP,
            );
            record(normwise_rel_error(&flatten(&gi), &fd_v), &mut worst);
        }

        // mean pool
        let v = random_feature(n, c_in, &mut rng);
        let g = random_feature(1, c_in, &mut rng);
        let gi = vn_mean_pool_backward(n, &g);
        let fd = central_difference(
            &mut |x| vn_mean_pool(&unflatten(n, c_in, x)).unwrap().dot(&g),
            &flatten(&v),
            LAYER_STEP,
        );
        record(normwise_rel_error(&flatten(&gi), &fd), &mut worst);

        // edge conv
        let (pts, graph, ec) = loop {
            let pts: Vec<Point3> = (0..12).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
            let graph = build_graph(&pts, &GraphConfig { k: 4, ..GraphConfig::default() }, &mut rng)?;
            let ec = EdgeConv {
                lin: VnLinear::new(c_in, 2, random_vec(2 * c_in, &mut rng))?,
                relu: VnRelu::shared(random_vec(c_in, &mut rng)),
            };
            if edge_margin(&pts, &graph, &ec)? > 1e-4 {
                break (pts, graph, ec);
            }
        };
        let g = random_feature(pts.len(), c_in, &mut rng);
        let eg = edge_conv_backward(&pts, &graph, &ec, &g)?;
        let fd_w = central_difference(
            &mut |w| {
                let p = EdgeConv {
                    lin: VnLinear::new(c_in, 2, w.to_vec()).unwrap(),
                    relu: ec.relu.clone(),
                };
                edge_conv_init(&pts, &graph, &p).unwrap().dot(&g)
            },
            &ec.lin.w,
            LAYER_STEP,
        );
        record(normwise_rel_error(&eg.lin, &fd_w), &mut worst);
        let fd_u = central_difference(
            &mut |u| {
                let p = EdgeConv {
                    lin: ec.lin.clone(),
                    relu: VnRelu::shared(u.to_vec()),
                };
                edge_conv_init(&pts, &graph, &p).unwrap().dot(&g)
            },
            &ec.relu.u,
            LAYER_STEP,
        );
        record(normwise_rel_error(&eg.relu, &fd_u), &mut worst);

        // decoder, wrt q and every parameter tensor
        let (q, dec, batch) = loop {
            let q = random_feature(1, c_in, &mut rng);
            let dec = DecoderParams::init(c_in, &DecoderConfig { hidden: vec![8, 8] }, &mut rng)?;
            let queries: Vec<Point3> = (0..6).map(|_| [rng.normal() * 0.3, rng.normal() * 0.3, rng.normal() * 0.3]).collect();
            let labels = (0..6).map(|_| rng.below(2) as u8).collect();
            let batch = crate::shapes::QueryBatch { queries, labels };
            if decoder_margin(&q, &batch.queries, &dec) > 1e-4 {
                break (q, dec, batch);
            }
        };
        let og = occupancy_loss_grad(&q, &batch, &dec)?;
        let fd_q = central_difference(
            &mut |x| occupancy_loss(&unflatten(1, c_in, x), &batch, &dec).unwrap(),
            &flatten(&q),
            LAYER_STEP,
        );
        record(normwise_rel_error(&flatten(&og.grad_q), &fd_q), &mut worst);
        let base: Vec<Vec<f64>> = dec.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, analytic) in og.grad_params.tensors().iter().enumerate() {
            let fd = central_difference(
                &mut |x| {
                    let mut d = dec.clone();
                    d.tensors_mut()[ti].copy_from_slice(x);
                    occupancy_loss(&q, &batch, &d).unwrap()
                },
                &base[ti],
                LAYER_STEP,
            );
            record(normwise_rel_error(analytic, &fd), &mut worst);
        }
    }
    Ok((worst, checked))
}

/// Relu margin of the edge-conv activations.
pub fn edge_margin(pts: &[Point3], graph: &crate::vn::NeighborTable, ec: &EdgeConv) -> Result<f64> {
    let mut rows = Vec::with_capacity(pts.len() * graph.k() * 2);
    for i in 0..pts.len() {
        for &j in graph.neighbors(i) {
            let (xi, xj) = (pts[i], pts[j]);
            rows.push([xj[0] - xi[0], xj[1] - xi[1], xj[2] - xi[2]]);
            rows.push(xi);
        }
    }
    let e = VnFeature::from_rows(pts.len() * graph.k(), 2, rows)?;
    Ok(relu_margin(&vn_linear(&e, &ec.lin)?, &ec.relu))
}

/// Smallest `|pre-activation| / max|pre-activation|` of the decoder hidden units.
pub fn decoder_margin(q: &VnFeature, queries: &[Point3], dec: &DecoderParams) -> f64 {
    let mut sub = dec.clone();
    let mut m = f64::INFINITY;
    // Pre-activations of layer l are the logits of the network truncated after l.
    for l in 0..dec.layers.len() - 1 {
        sub.layers = dec.layers[..=l].to_vec();
        let z = decode_logits_multi(q, queries, &sub);
        let scale = z.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for x in z {
            m = m.min(x.abs() / scale);
        }
    }
    m
}

fn decode_logits_multi(q: &VnFeature, queries: &[Point3], sub: &DecoderParams) -> Vec<f64> {
    // Route every unit of the last layer through a one-hot head.
    let last = sub.layers.last().expect("nonempty");
    let mut out = Vec::new();
    for u in 0..last.n_out {
        let mut single = sub.clone();
        let l = single.layers.last_mut().unwrap();
        l.w = last.w[u * last.n_in..(u + 1) * last.n_in].to_vec();
        l.b = vec![last.b[u]];
        l.n_out = 1;
        out.extend(decode_logits(q, queries, &single).expect("shapes match"));
    }
    out
}

/// Random `H` whose singular values are separated by at least `gap * s1`
/// (including `s3` from zero).
pub fn well_separated_h(gap: f64, rng: &mut RandomStream) -> Mat3 {
    loop {
        let h = Mat3::from_fn(|_, _| rng.normal());
        if let Ok(sol) = solve_rotation(&h) {
            let s = sol.svd.s;
            if s[0] - s[1] > gap * s[0] && s[1] - s[2] > gap * s[0] && s[2] > gap * s[0] {
                return h;
            }
        }
    }
}

/// SVD-path gradient `dL/dH` for `L = <G, R(H)>` against central differences.
pub fn svd_gradient_error(cases: usize, seed: u64) -> Result<f64> {
    svd_gradient_error_with(cases, seed, &central_difference)
}

/// [`svd_gradient_error`] with a caller-supplied reference.
pub fn svd_gradient_error_with(cases: usize, seed: u64, central_difference: &FiniteDiff) -> Result<f64> {
    let mut rng = RandomStream::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let h = well_separated_h(0.05, &mut rng);
        let g = Mat3::from_fn(|_, _| rng.normal());
        let analytic = backward_through_svd(&solve_rotation(&h)?, &g)?;
        let x: Vec<f64> = h.iter().copied().collect();
        let fd = central_difference(
            &mut |x| {
                let hm = Mat3::from_column_slice(x);
                solve_rotation(&hm).unwrap().r_est.matrix().component_mul(&g).sum()
            },
            &x,
            SVD_STEP,
        );
        let a: Vec<f64> = analytic.iter().copied().collect();
        worst = worst.max(normwise_rel_error(&a, &fd));
    }
    Ok(worst)
}

/// Layer and SVD batteries combined; passes when layers are below `1e-5`
/// and the SVD path below `1e-4`.
pub fn gradient_battery(cfg: &SelfcheckConfig) -> Result<BatteryResult> {
    let (layers, n) = layer_gradient_errors(cfg.gradient_cases, cfg.seed ^ 0x6AD)?;
    let svd = svd_gradient_error(10 * cfg.gradient_cases, cfg.seed ^ 0x5FD)?;
    // Report on the layer scale: the SVD error is normalised to its looser bound.
    let worst = layers.max(svd * 1e-5 / 1e-4);
    Ok(battery("gradient", worst, 1e-5, n + 10 * cfg.gradient_cases))
}

/// Noiseless recovery plus sampled optimality of the Procrustes solution.
pub fn procrustes_battery(cfg: &SelfcheckConfig) -> Result<BatteryResult> {
    let mut rng = RandomStream::new(cfg.seed).split(300);
    let mut worst = 0.0f64;
    for _ in 0..cfg.procrustes_triples {
        let q = random_feature(1, 16, &mut rng);
        let r_gt = sample_rotation(PI, &mut rng)?;
        let exact = register_features(&q, &q.rotated(&r_gt))?;
        // Recovery error in degrees against a 1e-6 degree bound, rescaled.
        worst = worst.max(isotropic_rotation_error(&r_gt, &exact.r_est) * 1e-3);
        let mut qp = q.rotated(&r_gt);
        for r in qp.rows_mut() {
            for x in r.iter_mut() {
                *x += 0.1 * rng.normal();
            }
        }
        let sol = register_features(&q, &qp)?;
        let best = residual(&q, &qp, &sol.r_est);
        for _ in 0..cfg.procrustes_candidates {
            let r = sample_rotation(PI, &mut rng)?;
            worst = worst.max(best - residual(&q, &qp, &r));
        }
    }
    Ok(battery("procrustes", worst, 1e-9, cfg.procrustes_triples))
}

fn residual(q: &VnFeature, qp: &VnFeature, r: &Rotation) -> f64 {
    let d = q.rotated(r);
    d.rows()
        .iter()
        .zip(qp.rows())
        .map(|(a, b)| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

pub fn run(cfg: &SelfcheckConfig) -> Result<SelfcheckReport> {
    Ok(SelfcheckReport {
        batteries: vec![
            equivariance_battery(cfg)?,
            permutation_battery(cfg)?,
            gradient_battery(cfg)?,
            procrustes_battery(cfg)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vn::inject_relu_grad_fault;

    fn small() -> SelfcheckConfig {
        SelfcheckConfig {
            weight_seeds: 1,
            clouds: 2,
            rotations: 2,
            points: 64,
            gradient_cases: 2,
            procrustes_triples: 5,
            procrustes_candidates: 50,
            ..SelfcheckConfig::default()
        }
    }

    #[test]
    fn small_run_passes() {
        let r = run(&small()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn relu_fault_is_detected() {
        inject_relu_grad_fault(true);
        let r = gradient_battery(&small());
        inject_relu_grad_fault(false);
        assert!(!r.unwrap().passed);
    }
}
