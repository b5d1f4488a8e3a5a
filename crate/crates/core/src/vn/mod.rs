//! Vector-neuron features and the equivariant layer set.
//!
//! A feature holds `points x channels` rows, each a 3-vector. Rotations act by
//! right-multiplying every row, and every layer here commutes with that action.

mod graph;
mod layers;
mod tape;

pub use graph::{build_graph, GraphConfig, GraphMode, NeighborTable};
pub use layers::{
    edge_conv_backward, edge_conv_init, inject_relu_grad_fault, vn_linear, vn_linear_backward,
    vn_mean_pool, vn_mean_pool_backward, vn_relu, vn_relu_backward, EdgeConv, EdgeConvGrad,
    VnLinear, VnRelu,
};
pub use tape::{ParamGrad, Tape};

use crate::error::{invalid, Result};
use crate::geom3::{Point3, Rotation};

#[derive(Debug, Clone, PartialEq)]
pub struct VnFeature {
    points: usize,
    channels: usize,
    data: Vec<Point3>,
}

impl VnFeature {
    pub fn zeros(points: usize, channels: usize) -> Self {
        Self {
            points,
            channels,
            data: vec![[0.0; 3]; points * channels],
        }
    }

    pub fn from_rows(points: usize, channels: usize, data: Vec<Point3>) -> Result<Self> {
        if data.len() != points * channels {
            return Err(invalid(format!(
                "feature data has {} rows, expected {points} x {channels}",
                data.len()
            )));
        }
        if !data.iter().flatten().all(|x| x.is_finite()) {
            return Err(invalid("feature has non-finite entries"));
        }
        Ok(Self {
            points,
            channels,
            data,
        })
    }

    /// Global `C x 3` feature from its channel rows.
    pub fn global(rows: Vec<Point3>) -> Self {
        let channels = rows.len();
        Self {
            points: 1,
            channels,
            data: rows,
        }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> &[Point3] {
        &self.data
    }

    pub fn rows_mut(&mut self) -> &mut [Point3] {
        &mut self.data
    }

    pub fn into_rows(self) -> Vec<Point3> {
        self.data
    }

    pub fn point(&self, n: usize) -> &[Point3] {
        &self.data[n * self.channels..(n + 1) * self.channels]
    }

    pub fn point_mut(&mut self, n: usize) -> &mut [Point3] {
        let c = self.channels;
        &mut self.data[n * c..(n + 1) * c]
    }

    pub fn get(&self, n: usize, c: usize) -> Point3 {
        self.data[n * self.channels + c]
    }

    /// `V R`: the rotation applied to every channel vector.
    pub fn rotated(&self, r: &Rotation) -> Self {
        Self {
            points: self.points,
            channels: self.channels,
            data: self.data.iter().map(|v| r.apply(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }

    /// `self += a * other`; panics on shape mismatch.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        assert_eq!((self.points, self.channels), (other.points, other.channels));
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            for k in 0..3 {
                d[k] += a * s[k];
            }
        }
    }

    /// Largest absolute entry of `self - other`; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.points, self.channels), (other.points, other.channels));
        self.data
            .iter()
            .flatten()
            .zip(other.data.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .flatten()
            .zip(other.data.iter().flatten())
            .map(|(a, b)| a * b)
            .sum()
    }
}
