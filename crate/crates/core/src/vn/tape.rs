//! Record of a forward pass through vn layers, replayed in reverse for
//! parameter gradients.

use super::graph::NeighborTable;
use super::layers::{
    edge_conv_backward, edge_conv_init, vn_linear, vn_linear_backward, vn_mean_pool,
    vn_mean_pool_backward, vn_relu, vn_relu_backward, EdgeConv, VnLinear, VnRelu,
};
use super::VnFeature;
use crate::error::{invalid, Error, Result};
use crate::geom3::Point3;

enum Node<'a> {
    EdgeConv {
        points: &'a [Point3],
        graph: NeighborTable,
        params: &'a EdgeConv,
    },
    Linear {
        input: VnFeature,
        params: &'a VnLinear,
    },
    Relu {
        input: VnFeature,
        params: &'a VnRelu,
    },
    MeanPool {
        points: usize,
    },
}

/// Gradient for one recorded node, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    EdgeConv { lin: Vec<f64>, relu: Vec<f64> },
    Linear(Vec<f64>),
    Relu(Vec<f64>),
    MeanPool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    out_shape: Option<(usize, usize)>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<'a>, out: &VnFeature) {
        self.nodes.push(node);
        self.out_shape = Some((out.points(), out.channels()));
    }

    pub fn edge_conv(
        &mut self,
        points: &'a [Point3],
        graph: NeighborTable,
        params: &'a EdgeConv,
    ) -> Result<VnFeature> {
        if !self.nodes.is_empty() {
            return Err(invalid("edge conv must be the first recorded op"));
        }
        let out = edge_conv_init(points, &graph, params)?;
        self.push(
            Node::EdgeConv {
                points,
                graph,
                params,
            },
            &out,
        );
        Ok(out)
    }

    pub fn linear(&mut self, input: VnFeature, params: &'a VnLinear) -> Result<VnFeature> {
        let out = vn_linear(&input, params)?;
        self.push(Node::Linear { input, params }, &out);
        Ok(out)
    }

    pub fn relu(&mut self, input: VnFeature, params: &'a VnRelu) -> Result<VnFeature> {
        let out = vn_relu(&input, params)?;
        self.push(Node::Relu { input, params }, &out);
        Ok(out)
    }

    pub fn mean_pool(&mut self, input: VnFeature) -> Result<VnFeature> {
        let out = vn_mean_pool(&input)?;
        self.push(
            Node::MeanPool {
                points: input.points(),
            },
            &out,
        );
        Ok(out)
    }

    /// Reverse sweep from `seed = dL/d(output)`. Consumes the recorded nodes;
    /// returns per-node parameter gradients in forward order and, unless the
    /// first node is an edge conv, the gradient with respect to the tape input.
    pub fn backward(&mut self, seed: &VnFeature) -> Result<(Vec<ParamGrad>, Option<VnFeature>)> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called with nothing recorded".into()));
        }
        if self.out_shape != Some((seed.points(), seed.channels())) {
            return Err(invalid(format!(
                "seed gradient shape {:?} does not match recorded output {:?}",
                (seed.points(), seed.channels()),
                self.out_shape
            )));
        }
        self.out_shape = None;
        let mut grads = Vec::with_capacity(self.nodes.len());
        let mut g = Some(seed.clone());
        while let Some(node) = self.nodes.pop() {
            let upstream = g.take().expect("gradient flows to every non-leaf node");
            match node {
                Node::EdgeConv {
                    points,
                    graph,
                    params,
                } => {
                    let eg = edge_conv_backward(points, &graph, params, &upstream)?;
                    grads.push(ParamGrad::EdgeConv {
                        lin: eg.lin,
                        relu: eg.relu,
                    });
                }
                Node::Linear { input, params } => {
                    let (gi, gw) = vn_linear_backward(&input, params, &upstream);
                    grads.push(ParamGrad::Linear(gw));
                    g = Some(gi);
                }
                Node::Relu { input, params } => {
                    let (gi, gu) = vn_relu_backward(&input, params, &upstream);
                    grads.push(ParamGrad::Relu(gu));
                    g = Some(gi);
                }
                Node::MeanPool { points } => {
                    grads.push(ParamGrad::MeanPool);
                    g = Some(vn_mean_pool_backward(points, &upstream));
                }
            }
        }
        grads.reverse();
        Ok((grads, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut tape = Tape::new();
        let seed = VnFeature::zeros(1, 1);
        assert!(matches!(tape.backward(&seed), Err(Error::State(_))));
    }

    #[test]
    fn nodes_are_consumed_once() {
        let lin = VnLinear::identity(2);
        let mut tape = Tape::new();
        let v = VnFeature::from_rows(1, 2, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let out = tape.linear(v, &lin).unwrap();
        assert!(tape.backward(&out).is_ok());
        assert!(matches!(tape.backward(&out), Err(Error::State(_))));
    }

    #[test]
    fn squared_norm_of_identity_linear() {
        // L = ||W V||^2 with W = I gives dL/dW = 2 V V^T (channel Gram matrix).
        let mut rng = RandomStream::new(1);
        let c = 3;
        let rows: Vec<Point3> = (0..c).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
        let v = VnFeature::from_rows(1, c, rows.clone()).unwrap();
        let lin = VnLinear::identity(c);
        let mut tape = Tape::new();
        let out = tape.linear(v, &lin).unwrap();
        let seed = VnFeature::from_rows(1, c, out.rows().iter().map(|r| [2.0 * r[0], 2.0 * r[1], 2.0 * r[2]]).collect()).unwrap();
        let (grads, _) = tape.backward(&seed).unwrap();
        let ParamGrad::Linear(gw) = &grads[0] else {
            panic!("expected linear grad")
        };
        for i in 0..c {
            for j in 0..c {
                let expect = 2.0 * (0..3).map(|d| rows[i][d] * rows[j][d]).sum::<f64>();
                assert!((gw[i * c + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let mut rng = RandomStream::new(2);
        let lin = VnLinear::new(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let relu = VnRelu::shared((0..4).map(|_| rng.normal()).collect());
        let v = VnFeature::from_rows(5, 3, (0..15).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect()).unwrap();
        let mut tape = Tape::new();
        let h = tape.linear(v, &lin).unwrap();
        let h = tape.relu(h, &relu).unwrap();
        let out = tape.mean_pool(h).unwrap();
        let (grads, gin) = tape.backward(&VnFeature::zeros(1, out.channels())).unwrap();
        for g in grads {
            match g {
                ParamGrad::Linear(w) | ParamGrad::Relu(w) => assert!(w.iter().all(|&x| x == 0.0)),
                _ => {}
            }
        }
        assert!(gin.unwrap().max_abs() == 0.0);
    }

    #[test]
    fn seed_shape_is_checked() {
        let lin = VnLinear::identity(2);
        let mut tape = Tape::new();
        tape.linear(VnFeature::zeros(3, 2), &lin).unwrap();
        assert!(tape.backward(&VnFeature::zeros(1, 2)).is_err());
    }
}
