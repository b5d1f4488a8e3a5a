//! Occupancy decoder `v(p; Q)` built on rotation-invariant scalars and the
//! cross-entropy reconstruction loss.
//!
//! The decoder sees `<q_c, p>` for every feature channel plus `||p||^2`, so
//! rotating `Q` and `p` together leaves its output unchanged.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom3::Point3;
use crate::rng::RandomStream;
use crate::shapes::QueryBatch;
use crate::vn::VnFeature;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
        }
    }
}

/// Fully connected layer, `w` row-major `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_out: usize,
    pub n_in: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_out, self.n_in, &self.w)
    }
}

/// MLP `(C + 1) -> hidden... -> 1` with leaky-ReLU hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<Dense>,
}

impl DecoderParams {
    pub fn init(channels: usize, cfg: &DecoderConfig, rng: &mut RandomStream) -> Result<Self> {
        if cfg.hidden.contains(&0) {
            return Err(invalid("decoder widths must be >= 1"));
        }
        let mut widths = vec![channels + 1];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|io| {
                let (n_in, n_out) = (io[0], io[1]);
                let a = (6.0 / n_in as f64).sqrt();
                Dense {
                    n_out,
                    n_in,
                    w: (0..n_in * n_out).map(|_| rng.uniform_range(-a, a)).collect(),
                    b: vec![0.0; n_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn channels(&self) -> usize {
        self.layers[0].n_in - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                    ..*l
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }
}

impl Dense {
    fn placeholder() -> Self {
        Dense {
            n_out: 0,
            n_in: 0,
            w: vec![],
            b: vec![],
        }
    }
}

fn invariant_scalars(q: &VnFeature, queries: &[Point3]) -> DMatrix<f64> {
    let c = q.channels();
    let rows = q.rows();
    DMatrix::from_fn(queries.len(), c + 1, |i, j| {
        let p = &queries[i];
        if j < c {
            let r = &rows[j];
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2]
        } else {
            p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
        }
    })
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

struct Forward {
    /// Layer inputs; `inputs[0]` is the scalar matrix.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<DMatrix<f64>>,
}

fn check(q: &VnFeature, params: &DecoderParams) -> Result<()> {
    if q.points() != 1 || q.channels() != params.channels() {
        return Err(invalid(format!(
            "decoder expects a 1 x {} feature, got {} x {}",
            params.channels(),
            q.points(),
            q.channels()
        )));
    }
    Ok(())
}

fn forward(q: &VnFeature, queries: &[Point3], params: &DecoderParams) -> Forward {
    let mut inputs = vec![invariant_scalars(q, queries)];
    let mut pre = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate() {
        let x = inputs.last().unwrap();
        let mut z = x * layer.weight_matrix().transpose();
        for mut row in z.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&layer.b) {
                *v += b;
            }
        }
        if li + 1 < params.layers.len() {
            inputs.push(z.map(leaky));
        }
        pre.push(z);
    }
    Forward { inputs, pre }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Raw (unclamped) logits for a batch of query points.
pub fn decode_logits(q: &VnFeature, queries: &[Point3], params: &DecoderParams) -> Result<Vec<f64>> {
    check(q, params)?;
    let f = forward(q, queries, params);
    Ok(f.pre.last().unwrap().iter().copied().collect())
}

/// Occupancy probability in `[0, 1]`.
pub fn decode_occupancy(q: &VnFeature, p: &Point3, params: &DecoderParams) -> Result<f64> {
    let l = decode_logits(q, std::slice::from_ref(p), params)?[0];
    Ok(sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
}

/// Mean binary cross-entropy of logits clamped to `[-30, 30]`.
pub fn bce_with_logits(logits: &[f64], labels: &[u8]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            let l = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            if y == 1 {
                softplus(-l)
            } else {
                softplus(l)
            }
        })
        .sum::<f64>()
        / n
}

pub fn occupancy_loss(q: &VnFeature, batch: &QueryBatch, params: &DecoderParams) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty query batch"));
    }
    Ok(bce_with_logits(&decode_logits(q, &batch.queries, params)?, &batch.labels))
}

/// Fraction of queries whose thresholded prediction matches the label.
pub fn occupancy_accuracy(q: &VnFeature, batch: &QueryBatch, params: &DecoderParams) -> Result<f64> {
    let logits = decode_logits(q, &batch.queries, params)?;
    let hits = logits
        .iter()
        .zip(&batch.labels)
        .filter(|(&l, &y)| (l >= 0.0) == (y == 1))
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

pub struct OccupancyGrad {
    pub loss: f64,
    pub grad_q: VnFeature,
    pub grad_params: DecoderParams,
}

/// Loss with gradients with respect to the feature and the decoder weights.
pub fn occupancy_loss_grad(q: &VnFeature, batch: &QueryBatch, params: &DecoderParams) -> Result<OccupancyGrad> {
    check(q, params)?;
    if batch.is_empty() {
        return Err(invalid("empty query batch"));
    }
    let f = forward(q, &batch.queries, params);
    let logits = f.pre.last().unwrap();
    let n = batch.len();
    let loss = bce_with_logits(logits.as_slice(), &batch.labels);

    let mut delta = DMatrix::from_fn(n, 1, |i, _| {
        let l = logits[(i, 0)];
        if l.abs() > LOGIT_CLAMP {
            0.0
        } else {
            (sigmoid(l) - batch.labels[i] as f64) / n as f64
        }
    });
    let mut grads = vec![Dense::placeholder(); params.layers.len()];
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let x = &f.inputs[li];
        let gw = delta.transpose() * x;
        let gb: Vec<f64> = delta.column_iter().map(|c| c.sum()).collect();
        let mut w = Vec::with_capacity(layer.n_out * layer.n_in);
        for o in 0..layer.n_out {
            for i in 0..layer.n_in {
                w.push(gw[(o, i)]);
            }
        }
        grads[li] = Dense {
            n_out: layer.n_out,
            n_in: layer.n_in,
            w,
            b: gb,
        };
        let g_in = &delta * layer.weight_matrix();
        delta = if li > 0 {
            let z = &f.pre[li - 1];
            g_in.zip_map(z, |g, z| if z >= 0.0 { g } else { LEAKY_SLOPE * g })
        } else {
            g_in
        };
    }
    // delta now holds dL/dS; S[i, c] = <q_c, p_i>.
    let c = q.channels();
    let mut rows = vec![[0.0; 3]; c];
    for (i, p) in batch.queries.iter().enumerate() {
        for (ch, r) in rows.iter_mut().enumerate() {
            let g = delta[(i, ch)];
            r[0] += g * p[0];
            r[1] += g * p[1];
            r[2] += g * p[2];
        }
    }
    Ok(OccupancyGrad {
        loss,
        grad_q: VnFeature::global(rows),
        grad_params: DecoderParams { layers: grads },
    })
}
