//! Rotation-equivariant, permutation-invariant global feature extractor
//! `f: R^{N x 3} -> R^{C x 3}`.
//!
//! Pipeline: edge-conv lift to `c0` channels, then a vn-linear / vn-relu pair
//! per hidden width, a mean pool over points and a final vn-linear to `c_out`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom3::Point3;
use crate::rng::RandomStream;
use crate::shapes::PointCloud;
use crate::vn::{build_graph, EdgeConv, GraphConfig, ParamGrad, Tape, VnFeature, VnLinear, VnRelu};

/// Seed of the neighbour-sampling stream used by [`EncoderParams::encode`] in ball mode.
pub const BALL_SEED: u64 = 0xBA11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub c0: usize,
    pub hidden: Vec<usize>,
    pub c_out: usize,
    pub graph: GraphConfig,
}

impl EncoderConfig {
    /// `c0 = 32`, hidden `(64, 128)`, `c_out = 342`.
    pub fn desk() -> Self {
        Self {
            c0: 32,
            hidden: vec![64, 128],
            c_out: 342,
            graph: GraphConfig::default(),
        }
    }

    /// Same stack with a 64-channel output.
    pub fn fast() -> Self {
        Self {
            c_out: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c0 == 0 || self.hidden.contains(&0) {
            return Err(invalid("encoder widths must be >= 1"));
        }
        if self.c_out < 3 {
            return Err(invalid("encoder c_out must be >= 3"));
        }
        self.graph.validate()
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub edge: EdgeConv,
    pub hidden: Vec<(VnLinear, VnRelu)>,
    pub head: VnLinear,
}

fn uniform_vec(len: usize, fan_in: usize, rng: &mut RandomStream) -> Vec<f64> {
    // Variance 1 / fan_in.
    let a = (3.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.uniform_range(-a, a)).collect()
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut RandomStream) -> Result<Self> {
        cfg.validate()?;
        let edge = EdgeConv {
            lin: VnLinear::new(cfg.c0, 2, uniform_vec(cfg.c0 * 2, 2, rng))?,
            relu: VnRelu::shared(uniform_vec(cfg.c0, cfg.c0, rng)),
        };
        let mut hidden = Vec::with_capacity(cfg.hidden.len());
        let mut prev = cfg.c0;
        for &h in &cfg.hidden {
            let lin = VnLinear::new(h, prev, uniform_vec(h * prev, prev, rng))?;
            let relu = VnRelu::shared(uniform_vec(h, h, rng));
            hidden.push((lin, relu));
            prev = h;
        }
        let head = VnLinear::new(cfg.c_out, prev, uniform_vec(cfg.c_out * prev, prev, rng))?;
        Ok(Self { edge, hidden, head })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &[f64]| vec![0.0; v.len()];
        Self {
            edge: EdgeConv {
                lin: VnLinear { w: z(&self.edge.lin.w), ..self.edge.lin.clone() },
                relu: VnRelu { u: z(&self.edge.relu.u), ..self.edge.relu.clone() },
            },
            hidden: self
                .hidden
                .iter()
                .map(|(l, r)| {
                    (
                        VnLinear { w: z(&l.w), ..l.clone() },
                        VnRelu { u: z(&r.u), ..r.clone() },
                    )
                })
                .collect(),
            head: VnLinear { w: z(&self.head.w), ..self.head.clone() },
        }
    }

    /// All weight tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = vec![&self.edge.lin.w, &self.edge.relu.u];
        for (l, r) in &self.hidden {
            t.push(&l.w);
            t.push(&r.u);
        }
        t.push(&self.head.w);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = vec![&mut self.edge.lin.w, &mut self.edge.relu.u];
        for (l, r) in &mut self.hidden {
            t.push(&mut l.w);
            t.push(&mut r.u);
        }
        t.push(&mut self.head.w);
        t
    }

    pub fn c_out(&self) -> usize {
        self.head.c_out
    }

    /// Global feature `Q = f(P)`. Ball mode draws neighbours from a stream seeded with [`BALL_SEED`].
    pub fn encode(&self, cfg: &GraphConfig, points: &[Point3]) -> Result<VnFeature> {
        let mut rng = RandomStream::new(BALL_SEED);
        Ok(self.encode_recorded(cfg, points, &mut rng)?.0)
    }

    /// Forward pass that keeps the tape for a later [`EncoderTape::backward`].
    pub fn encode_recorded<'a>(
        &'a self,
        cfg: &GraphConfig,
        points: &'a [Point3],
        rng: &mut RandomStream,
    ) -> Result<(VnFeature, EncoderTape<'a>)> {
        let graph = build_graph(points, cfg, rng)?;
        let mut tape = Tape::new();
        let mut h = tape.edge_conv(points, graph, &self.edge)?;
        for (lin, relu) in &self.hidden {
            h = tape.linear(h, lin)?;
            h = tape.relu(h, relu)?;
        }
        let pooled = tape.mean_pool(h)?;
        let q = tape.linear(pooled, &self.head)?;
        Ok((q, EncoderTape { tape }))
    }
}

pub struct EncoderTape<'a> {
    tape: Tape<'a>,
}

impl EncoderTape<'_> {
    /// Accumulates `dL/dtheta` into `grads` given `dL/dQ`.
    pub fn backward(mut self, grad_q: &VnFeature, grads: &mut EncoderParams) -> Result<()> {
        let (node_grads, _) = self.tape.backward(grad_q)?;
        let mut it = node_grads.into_iter();
        let add = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        match it.next() {
            Some(ParamGrad::EdgeConv { lin, relu }) => {
                add(&mut grads.edge.lin.w, &lin);
                add(&mut grads.edge.relu.u, &relu);
            }
            _ => return Err(invalid("encoder tape does not start with edge conv")),
        }
        for (l, r) in grads.hidden.iter_mut() {
            match (it.next(), it.next()) {
                (Some(ParamGrad::Linear(gw)), Some(ParamGrad::Relu(gu))) => {
                    add(&mut l.w, &gw);
                    add(&mut r.u, &gu);
                }
                _ => return Err(invalid("encoder tape hidden layout mismatch")),
            }
        }
        match (it.next(), it.next()) {
            (Some(ParamGrad::MeanPool), Some(ParamGrad::Linear(gw))) => add(&mut grads.head.w, &gw),
            _ => return Err(invalid("encoder tape head layout mismatch")),
        }
        Ok(())
    }
}

/// `encode` with the encoder and graph settings of a full model.
pub fn encode(pc: &PointCloud, params: &crate::model::ModelParams) -> Result<VnFeature> {
    params
        .encoder
        .encode(&params.config.encoder.graph, &pc.points)
}
