use std::cell::Cell;

use super::graph::NeighborTable;
use super::VnFeature;
use crate::error::{invalid, Result};
use crate::geom3::Point3;

thread_local! {
    static RELU_GRAD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: drops the direction term from the vn-relu gradient on the
/// calling thread so that gradient checks can be shown to catch a broken
/// backward pass.
#[doc(hidden)]
pub fn inject_relu_grad_fault(on: bool) {
    RELU_GRAD_FAULT.with(|f| f.set(on));
}

/// Degenerate-direction threshold on `||k||^2`, i.e. `||k|| < 1e-12`.
const DEGENERATE_K_SQ: f64 = 1e-24;

#[inline]
fn dot3(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn axpy(y: &mut Point3, a: f64, x: &Point3) {
    y[0] += a * x[0];
    y[1] += a * x[1];
    y[2] += a * x[2];
}

/// `f(V) = W V` with `W` of shape `c_out x c_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VnLinear {
    pub c_out: usize,
    pub c_in: usize,
    pub w: Vec<f64>,
}

impl VnLinear {
    pub fn new(c_out: usize, c_in: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != c_out * c_in {
            return Err(invalid(format!(
                "linear weights have {} entries, expected {c_out} x {c_in}",
                w.len()
            )));
        }
        Ok(Self { c_out, c_in, w })
    }

    pub fn identity(c: usize) -> Self {
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        Self { c_out: c, c_in: c, w }
    }
}

/// Direction predictor `k = U V`. `U` has one row (a direction shared by all
/// channels) or `channels` rows (one direction per channel).
#[derive(Debug, Clone, PartialEq)]
pub struct VnRelu {
    pub dirs: usize,
    pub channels: usize,
    pub u: Vec<f64>,
}

impl VnRelu {
    pub fn shared(u: Vec<f64>) -> Self {
        Self {
            dirs: 1,
            channels: u.len(),
            u,
        }
    }

    pub fn per_channel(channels: usize, u: Vec<f64>) -> Result<Self> {
        if u.len() != channels * channels {
            return Err(invalid("per-channel relu needs channels x channels weights"));
        }
        Ok(Self {
            dirs: channels,
            channels,
            u,
        })
    }

    pub fn shared_direction(&self) -> bool {
        self.dirs == 1
    }
}

pub(crate) fn linear_rows(p: &VnLinear, input: &[Point3], out: &mut [Point3]) {
    for (o, dst) in out.iter_mut().enumerate() {
        let wrow = &p.w[o * p.c_in..(o + 1) * p.c_in];
        let mut acc = [0.0; 3];
        for (w, v) in wrow.iter().zip(input) {
            axpy(&mut acc, *w, v);
        }
        *dst = acc;
    }
}

/// Accumulates into `g_in` and `g_w`.
pub(crate) fn linear_rows_backward(
    p: &VnLinear,
    input: &[Point3],
    g_out: &[Point3],
    g_in: Option<&mut [Point3]>,
    g_w: &mut [f64],
) {
    for (o, g) in g_out.iter().enumerate() {
        let gw = &mut g_w[o * p.c_in..(o + 1) * p.c_in];
        for (slot, v) in gw.iter_mut().zip(input) {
            *slot += dot3(g, v);
        }
    }
    if let Some(g_in) = g_in {
        for (o, g) in g_out.iter().enumerate() {
            let wrow = &p.w[o * p.c_in..(o + 1) * p.c_in];
            for (gi, w) in g_in.iter_mut().zip(wrow) {
                axpy(gi, *w, g);
            }
        }
    }
}

fn direction(p: &VnRelu, d: usize, input: &[Point3]) -> Point3 {
    let urow = &p.u[d * p.channels..(d + 1) * p.channels];
    let mut k = [0.0; 3];
    for (u, v) in urow.iter().zip(input) {
        axpy(&mut k, *u, v);
    }
    k
}

pub(crate) fn relu_rows(p: &VnRelu, input: &[Point3], out: &mut [Point3]) {
    let shared = if p.dirs == 1 {
        Some(direction(p, 0, input))
    } else {
        None
    };
    for (c, (v, dst)) in input.iter().zip(out.iter_mut()).enumerate() {
        let k = shared.unwrap_or_else(|| direction(p, c, input));
        let b = dot3(&k, &k);
        let a = dot3(v, &k);
        *dst = if a >= 0.0 || b < DEGENERATE_K_SQ {
            *v
        } else {
            let t = a / b;
            [v[0] - t * k[0], v[1] - t * k[1], v[2] - t * k[2]]
        };
    }
}

/// Accumulates into `g_in` and `g_u`.
pub(crate) fn relu_rows_backward(
    p: &VnRelu,
    input: &[Point3],
    g_out: &[Point3],
    g_in: &mut [Point3],
    g_u: &mut [f64],
) {
    let fault = RELU_GRAD_FAULT.with(|f| f.get());
    let c_n = p.channels;
    let mut g_k = vec![[0.0; 3]; p.dirs];
    let ks: Vec<Point3> = (0..p.dirs).map(|d| direction(p, d, input)).collect();
    for c in 0..c_n {
        let d = if p.dirs == 1 { 0 } else { c };
        let k = &ks[d];
        let v = &input[c];
        let g = &g_out[c];
        let b = dot3(k, k);
        let a = dot3(v, k);
        if a >= 0.0 || b < DEGENERATE_K_SQ {
            axpy(&mut g_in[c], 1.0, g);
            continue;
        }
        // out = v - (a / b) k
        let gk = dot3(g, k);
        axpy(&mut g_in[c], 1.0, g);
        axpy(&mut g_in[c], -gk / b, k);
        if !fault {
            let acc = &mut g_k[d];
            axpy(acc, -gk / b, v);
            axpy(acc, -a / b, g);
            axpy(acc, 2.0 * a * gk / (b * b), k);
        }
    }
    for (d, gk) in g_k.iter().enumerate() {
        let urow = &p.u[d * c_n..(d + 1) * c_n];
        let gurow = &mut g_u[d * c_n..(d + 1) * c_n];
        for c in 0..c_n {
            axpy(&mut g_in[c], urow[c], gk);
            gurow[c] += dot3(gk, &input[c]);
        }
    }
}

pub fn vn_linear(v: &VnFeature, p: &VnLinear) -> Result<VnFeature> {
    if v.channels() != p.c_in {
        return Err(invalid(format!(
            "vn_linear expects {} input channels, got {}",
            p.c_in,
            v.channels()
        )));
    }
    let mut out = VnFeature::zeros(v.points(), p.c_out);
    for n in 0..v.points() {
        linear_rows(p, v.point(n), out.point_mut(n));
    }
    Ok(out)
}

/// Returns `(dL/dV, dL/dW)`.
pub fn vn_linear_backward(v: &VnFeature, p: &VnLinear, g: &VnFeature) -> (VnFeature, Vec<f64>) {
    let mut g_in = VnFeature::zeros(v.points(), p.c_in);
    let mut g_w = vec![0.0; p.w.len()];
    for n in 0..v.points() {
        linear_rows_backward(p, v.point(n), g.point(n), Some(g_in.point_mut(n)), &mut g_w);
    }
    (g_in, g_w)
}

/// Vectorised ReLU: each channel row is kept when `<v, k> >= 0`, otherwise its
/// component along `k` is removed. A direction with `||k|| < 1e-12` passes
/// the input through.
pub fn vn_relu(v: &VnFeature, p: &VnRelu) -> Result<VnFeature> {
    if v.channels() != p.channels {
        return Err(invalid(format!(
            "vn_relu expects {} channels, got {}",
            p.channels,
            v.channels()
        )));
    }
    let mut out = VnFeature::zeros(v.points(), v.channels());
    for n in 0..v.points() {
        relu_rows(p, v.point(n), out.point_mut(n));
    }
    Ok(out)
}

/// Returns `(dL/dV, dL/dU)`.
pub fn vn_relu_backward(v: &VnFeature, p: &VnRelu, g: &VnFeature) -> (VnFeature, Vec<f64>) {
    let mut g_in = VnFeature::zeros(v.points(), v.channels());
    let mut g_u = vec![0.0; p.u.len()];
    for n in 0..v.points() {
        relu_rows_backward(p, v.point(n), g.point(n), g_in.point_mut(n), &mut g_u);
    }
    (g_in, g_u)
}

/// Lexicographic order of `groups` blocks of `width` rows each. Summing in
/// this order makes pooled results independent of the input ordering.
pub(crate) fn canonical_order(rows: &[Point3], width: usize, groups: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups).collect();
    order.sort_by(|&a, &b| {
        let ra = rows[a * width..(a + 1) * width].iter().flatten();
        let rb = rows[b * width..(b + 1) * width].iter().flatten();
        ra.zip(rb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn mean_rows(rows: &[Point3], width: usize, groups: usize, out: &mut [Point3]) {
    for o in out.iter_mut() {
        *o = [0.0; 3];
    }
    for g in canonical_order(rows, width, groups) {
        for (o, r) in out.iter_mut().zip(&rows[g * width..(g + 1) * width]) {
            axpy(o, 1.0, r);
        }
    }
    let inv = 1.0 / groups as f64;
    for o in out.iter_mut() {
        *o = [o[0] * inv, o[1] * inv, o[2] * inv];
    }
}

/// Channelwise mean over points, `N x C x 3 -> 1 x C x 3`.
pub fn vn_mean_pool(v: &VnFeature) -> Result<VnFeature> {
    if v.points() == 0 {
        return Err(invalid("mean pool over zero points"));
    }
    let mut out = VnFeature::zeros(1, v.channels());
    mean_rows(v.rows(), v.channels(), v.points(), out.rows_mut());
    Ok(out)
}

pub fn vn_mean_pool_backward(points: usize, g: &VnFeature) -> VnFeature {
    let inv = 1.0 / points as f64;
    let row: Vec<Point3> = g.rows().iter().map(|r| [r[0] * inv, r[1] * inv, r[2] * inv]).collect();
    let mut out = VnFeature::zeros(points, g.channels());
    for n in 0..points {
        out.point_mut(n).copy_from_slice(&row);
    }
    out
}

/// Edge-convolution lift from raw points to `C0` vector channels: per edge
/// `(i, j)` the two-channel feature `(x_j - x_i, x_i)` goes through a vn-linear
/// `2 -> C0` and a vn-relu, then is mean-pooled over the neighbours of `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConv {
    pub lin: VnLinear,
    pub relu: VnRelu,
}

impl EdgeConv {
    pub fn channels(&self) -> usize {
        self.lin.c_out
    }

    fn validate(&self) -> Result<()> {
        if self.lin.c_in != 2 || self.relu.channels != self.lin.c_out {
            return Err(invalid("edge conv needs a 2 -> C0 linear and a C0-channel relu"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConvGrad {
    pub lin: Vec<f64>,
    pub relu: Vec<f64>,
}

#[inline]
fn edge_input(points: &[Point3], i: usize, j: usize) -> [Point3; 2] {
    let (xi, xj) = (points[i], points[j]);
    [[xj[0] - xi[0], xj[1] - xi[1], xj[2] - xi[2]], xi]
}

fn check_graph(points: &[Point3], graph: &NeighborTable) -> Result<()> {
    if graph.points() != points.len() {
        return Err(invalid(format!(
            "graph has {} rows for {} points",
            graph.points(),
            points.len()
        )));
    }
    Ok(())
}

pub fn edge_conv_init(points: &[Point3], graph: &NeighborTable, p: &EdgeConv) -> Result<VnFeature> {
    p.validate()?;
    check_graph(points, graph)?;
    let c0 = p.channels();
    let k = graph.k();
    let mut out = VnFeature::zeros(points.len(), c0);
    let mut lin = vec![[0.0; 3]; c0];
    let mut edges = vec![[0.0; 3]; k * c0];
    for i in 0..points.len() {
        for (slot, &j) in graph.neighbors(i).iter().enumerate() {
            let e = edge_input(points, i, j);
            linear_rows(&p.lin, &e, &mut lin);
            relu_rows(&p.relu, &lin, &mut edges[slot * c0..(slot + 1) * c0]);
        }
        mean_rows(&edges, c0, k, out.point_mut(i));
    }
    Ok(out)
}

pub fn edge_conv_backward(
    points: &[Point3],
    graph: &NeighborTable,
    p: &EdgeConv,
    g: &VnFeature,
) -> Result<EdgeConvGrad> {
    p.validate()?;
    check_graph(points, graph)?;
    let c0 = p.channels();
    let inv_k = 1.0 / graph.k() as f64;
    let mut grad = EdgeConvGrad {
        lin: vec![0.0; p.lin.w.len()],
        relu: vec![0.0; p.relu.u.len()],
    };
    let mut lin = vec![[0.0; 3]; c0];
    let mut g_edge = vec![[0.0; 3]; c0];
    let mut g_lin = vec![[0.0; 3]; c0];
    for i in 0..points.len() {
        for (dst, r) in g_edge.iter_mut().zip(g.point(i)) {
            *dst = [r[0] * inv_k, r[1] * inv_k, r[2] * inv_k];
        }
        for &j in graph.neighbors(i) {
            let e = edge_input(points, i, j);
            linear_rows(&p.lin, &e, &mut lin);
            g_lin.iter_mut().for_each(|x| *x = [0.0; 3]);
            relu_rows_backward(&p.relu, &lin, &g_edge, &mut g_lin, &mut grad.relu);
            linear_rows_backward(&p.lin, &e, &g_lin, None, &mut grad.lin);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3::sample_rotation;
    use crate::rng::RandomStream;
    use crate::vn::{build_graph, GraphConfig};
    use std::f64::consts::PI;

    fn random_feature(n: usize, c: usize, rng: &mut RandomStream) -> VnFeature {
        let rows = (0..n * c)
            .map(|_| [rng.normal(), rng.normal(), rng.normal()])
            .collect();
        VnFeature::from_rows(n, c, rows).unwrap()
    }

    fn random_vec(len: usize, rng: &mut RandomStream) -> Vec<f64> {
        (0..len).map(|_| rng.normal()).collect()
    }

    #[test]
    fn identity_linear_is_identity() {
        let mut rng = RandomStream::new(1);
        let v = random_feature(5, 4, &mut rng);
        assert_eq!(vn_linear(&v, &VnLinear::identity(4)).unwrap(), v);
    }

    #[test]
    fn linear_sums_channels() {
        let v = VnFeature::from_rows(1, 2, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let p = VnLinear::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(vn_linear(&v, &p).unwrap().rows(), &[[5.0, 7.0, 9.0]]);
        assert!(vn_linear(&v, &VnLinear::identity(3)).is_err());
    }

    #[test]
    fn relu_examples() {
        // With a single channel, k = u v; pick a second channel to steer k.
        let cases = [
            ([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            ([-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
            ([-1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),
        ];
        for (vc, expect) in cases {
            // channel 0 is the probe, channel 1 = k direction (1, 0, 0); u selects channel 1.
            let v = VnFeature::from_rows(1, 2, vec![vc, [1.0, 0.0, 0.0]]).unwrap();
            let p = VnRelu::shared(vec![0.0, 1.0]);
            let out = vn_relu(&v, &p).unwrap();
            for k in 0..3 {
                assert!((out.get(0, 0)[k] - expect[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn relu_degenerate_direction_passes_through() {
        let v = VnFeature::from_rows(1, 2, vec![[-1.0, 0.5, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let p = VnRelu::shared(vec![0.0, 1.0]);
        assert_eq!(vn_relu(&v, &p).unwrap(), v);
    }

    #[test]
    fn relu_projection_is_idempotent() {
        let mut rng = RandomStream::new(2);
        for _ in 0..50 {
            let v = random_feature(3, 6, &mut rng);
            let p = VnRelu::shared(random_vec(6, &mut rng));
            let once = vn_relu(&v, &p).unwrap();
            // Re-project `once` with the k computed from the original input.
            for n in 0..3 {
                let k = direction(&p, 0, v.point(n));
                let b = dot3(&k, &k);
                for c in 0..6 {
                    let x = once.get(n, c);
                    let a = dot3(&x, &k);
                    let twice = if a >= 0.0 {
                        x
                    } else {
                        [x[0] - a / b * k[0], x[1] - a / b * k[1], x[2] - a / b * k[2]]
                    };
                    for d in 0..3 {
                        assert!((twice[d] - x[d]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_examples() {
        let mut rng = RandomStream::new(3);
        let v = random_feature(1, 4, &mut rng);
        assert_eq!(vn_mean_pool(&v).unwrap(), v);
        let a = [1.0, -2.0, 0.5];
        let opp = VnFeature::from_rows(2, 1, vec![a, [-a[0], -a[1], -a[2]]]).unwrap();
        assert_eq!(vn_mean_pool(&opp).unwrap().rows(), &[[0.0, 0.0, 0.0]]);
        let v = random_feature(50, 3, &mut rng);
        let perm = rng.permutation(50);
        let mut rows = Vec::new();
        for &i in &perm {
            rows.extend_from_slice(v.point(i));
        }
        let pv = VnFeature::from_rows(50, 3, rows).unwrap();
        assert_eq!(vn_mean_pool(&pv).unwrap(), vn_mean_pool(&v).unwrap());
    }

    #[test]
    fn layers_are_equivariant() {
        let mut rng = RandomStream::new(4);
        for _ in 0..20 {
            let v = random_feature(7, 5, &mut rng);
            let r = sample_rotation(PI, &mut rng).unwrap();
            let lin = VnLinear::new(3, 5, random_vec(15, &mut rng)).unwrap();
            let a = vn_linear(&v.rotated(&r), &lin).unwrap();
            let b = vn_linear(&v, &lin).unwrap().rotated(&r);
            assert!(a.max_abs_diff(&b) < 1e-12);
            for relu in [
                VnRelu::shared(random_vec(5, &mut rng)),
                VnRelu::per_channel(5, random_vec(25, &mut rng)).unwrap(),
            ] {
                let a = vn_relu(&v.rotated(&r), &relu).unwrap();
                let b = vn_relu(&v, &relu).unwrap().rotated(&r);
                assert!(a.max_abs_diff(&b) < 1e-12);
            }
        }
    }

    #[test]
    fn coincident_points_only_see_absolute_channel() {
        let pts = vec![[0.1, 0.2, 0.3]; 6];
        let g = build_graph(&pts, &GraphConfig { k: 3, ..GraphConfig::default() }, &mut RandomStream::new(0)).unwrap();
        let mut rng = RandomStream::new(5);
        let mut p = EdgeConv {
            lin: VnLinear::new(4, 2, random_vec(8, &mut rng)).unwrap(),
            relu: VnRelu::shared(random_vec(4, &mut rng)),
        };
        let out = edge_conv_init(&pts, &g, &p).unwrap();
        // Changing the relative-coordinate weights must not matter.
        for o in 0..4 {
            p.lin.w[o * 2] = rng.normal();
        }
        assert_eq!(edge_conv_init(&pts, &g, &p).unwrap(), out);
    }

    #[test]
    fn edge_conv_relative_channel_mean() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let g = build_graph(&pts, &GraphConfig { k: 2, ..GraphConfig::default() }, &mut RandomStream::new(0)).unwrap();
        let p = EdgeConv {
            lin: VnLinear::new(1, 2, vec![1.0, 0.0]).unwrap(),
            relu: VnRelu::shared(vec![1.0]),
        };
        // k = the feature itself, so <v, k> >= 0 and the relu passes through.
        let out = edge_conv_init(&pts, &g, &p).unwrap();
        for i in 0..pts.len() {
            let mut m = [0.0; 3];
            for &j in g.neighbors(i) {
                for d in 0..3 {
                    m[d] += (pts[j][d] - pts[i][d]) / 2.0;
                }
            }
            for d in 0..3 {
                assert!((out.get(i, 0)[d] - m[d]).abs() < 1e-15);
            }
        }
    }
}
