//! Fixed-size 3D geometry: rotations, rotation sampling, error metrics and a
//! one-sided Jacobi SVD for 3x3 matrices.
//!
//! Points and feature rows are row vectors and transform as `x' = x R`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::rng::RandomStream;

pub type Mat3 = Matrix3<f64>;
pub type Point3 = [f64; 3];

const ORTHO_TOL: f64 = 1e-9;

/// Element of SO(3), acting on row vectors from the right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates orthonormality and `det = +1` to 1e-9.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(invalid("rotation matrix has non-finite entries"));
        }
        let defect = (m.transpose() * m - Mat3::identity()).abs().max();
        if defect > ORTHO_TOL {
            return Err(invalid(format!("matrix is not orthonormal (defect {defect:e})")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(invalid(format!("matrix determinant is {det}, expected +1")));
        }
        Ok(Rotation(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Mat3::from_fn(|i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// `self` followed by `other` in the row-vector convention: `x (A B)`.
    pub fn then(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    /// `p R` for a row vector `p`.
    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        rotate_row(p, &self.0)
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Rotation::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

/// `p M` for a row vector `p`.
#[inline]
pub fn rotate_row(p: &Point3, m: &Mat3) -> Point3 {
    [
        p[0] * m[(0, 0)] + p[1] * m[(1, 0)] + p[2] * m[(2, 0)],
        p[0] * m[(0, 1)] + p[1] * m[(1, 1)] + p[2] * m[(2, 1)],
        p[0] * m[(0, 2)] + p[1] * m[(1, 2)] + p[2] * m[(2, 2)],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub axis: [f64; 3],
    pub angle: f64,
}

impl AxisAngle {
    pub fn new(axis: [f64; 3], angle: f64) -> Self {
        Self { axis, angle }
    }
}

fn skew(a: &[f64; 3]) -> Mat3 {
    Mat3::new(0.0, -a[2], a[1], a[2], 0.0, -a[0], -a[1], a[0], 0.0)
}

/// Rodrigues construction. Non-unit axes are normalized; a zero axis is rejected.
pub fn rotation_from_axis_angle(aa: &AxisAngle) -> Result<Rotation> {
    let a = Vector3::from(aa.axis);
    let norm = a.norm();
    if !(norm.is_finite() && norm > 1e-12) || !aa.angle.is_finite() {
        return Err(invalid("axis must be finite and non-zero"));
    }
    let a = a / norm;
    let k = skew(&[a[0], a[1], a[2]]);
    let (s, c) = aa.angle.sin_cos();
    // Column-convention Rodrigues is I + sK + (1-c)K^2; the row convention is its transpose.
    Ok(Rotation(Mat3::identity() - k * s + k * k * (1.0 - c)))
}

/// Inverse of [`rotation_from_axis_angle`]. The angle is in `[0, pi]`; at
/// zero angle the axis is reported as `(1, 0, 0)`.
pub fn rotation_to_axis_angle(r: &Rotation) -> AxisAngle {
    // Work with the column-convention matrix.
    let m = r.0.transpose();
    let w = [
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ];
    let two_sin = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let two_cos = m.trace() - 1.0;
    let angle = two_sin.atan2(two_cos);
    if two_sin < 1e-300 && two_cos > 0.0 {
        return AxisAngle::new([1.0, 0.0, 0.0], 0.0);
    }
    if angle < PI * 0.5 {
        return AxisAngle::new([w[0] / two_sin, w[1] / two_sin, w[2] / two_sin], angle);
    }
    // Near pi the skew part vanishes; read the axis from the symmetric part
    // B = cos I + (1 - cos) a a^T and take the sign from the skew part.
    let c = angle.cos();
    let b = (m + m.transpose()) * 0.5;
    let d = [b[(0, 0)], b[(1, 1)], b[(2, 2)]];
    let i = (0..3).max_by(|&x, &y| d[x].total_cmp(&d[y])).unwrap();
    let denom = 1.0 - c;
    let mut col = [b[(0, i)] / denom, b[(1, i)] / denom, b[(2, i)] / denom];
    col[i] = (d[i] - c) / denom;
    let n = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
    let mut axis = [col[0] / n, col[1] / n, col[2] / n];
    if axis[0] * w[0] + axis[1] * w[1] + axis[2] * w[2] < 0.0 {
        axis = [-axis[0], -axis[1], -axis[2]];
    }
    AxisAngle::new(axis, angle)
}

/// Axis uniform on the sphere, angle uniform on `[0, max_angle]`.
pub fn sample_rotation(max_angle: f64, rng: &mut RandomStream) -> Result<Rotation> {
    if !(0.0..=PI).contains(&max_angle) {
        return Err(invalid(format!("max_angle {max_angle} outside [0, pi]")));
    }
    let angle = max_angle * rng.uniform();
    let axis = rng.unit_vector();
    rotation_from_axis_angle(&AxisAngle::new(axis, angle))
}

/// `sum_ij a_ij b_ij`, evaluated in a fixed order so it is symmetric in its arguments.
fn frob_inner(a: &Mat3, b: &Mat3) -> f64 {
    let mut t = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            t += a[(i, j)] * b[(i, j)];
        }
    }
    t
}

/// Angle of `r_gt^T r_est` in degrees, in `[0, 180]`.
///
/// Equal to `acos(clamp((tr(r_gt^T r_est) - 1) / 2))`. Below 90 degrees the
/// angle is read from the chordal distance instead, which keeps resolution
/// near zero where `acos` bottoms out at ~1e-6 degrees.
pub fn isotropic_rotation_error(r_gt: &Rotation, r_est: &Rotation) -> f64 {
    let cos = ((frob_inner(&r_gt.0, &r_est.0) - 1.0) * 0.5).clamp(-1.0, 1.0);
    let rad = if cos > 0.0 {
        let d = r_gt.0 - r_est.0;
        let chord = frob_inner(&d, &d).sqrt();
        2.0 * (chord / (2.0 * 2f64.sqrt())).min(1.0).asin()
    } else {
        cos.acos()
    };
    rad.to_degrees()
}

/// `|| r_gt^T r_est - I ||_F^2`.
pub fn chordal_sq(r_gt: &Rotation, r_est: &Rotation) -> f64 {
    let d = r_gt.0.transpose() * r_est.0 - Mat3::identity();
    frob_inner(&d, &d)
}

/// `U diag(s) V^T` with `s` descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub s: [f64; 3],
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        self.u * Mat3::from_diagonal(&Vector3::from(self.s)) * self.v.transpose()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd3(h: &Mat3) -> Result<Svd3> {
    if !h.iter().all(|x| x.is_finite()) {
        return Err(invalid("svd3 input has non-finite entries"));
    }
    let mut a = *h;
    let mut v = Mat3::identity();
    for _sweep in 0..60 {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (ap, aq) = (a.column(p), a.column(q));
            let alpha = ap.norm_squared();
            let beta = aq.norm_squared();
            let gamma = ap.dot(&aq);
            if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut a, &mut v] {
                for r in 0..3 {
                    let x = m[(r, p)];
                    let y = m[(r, q)];
                    m[(r, p)] = c * x - s * y;
                    m[(r, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = [a.column(0).norm(), a.column(1).norm(), a.column(2).norm()];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let s = [norms[order[0]], norms[order[1]], norms[order[2]]];
    let mut u = Mat3::zeros();
    let mut vs = Mat3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        vs.set_column(dst, &v.column(src));
    }

    let tiny = s[0] * 1e-14;
    let rank = s.iter().filter(|&&x| x > tiny && x > 0.0).count();
    for i in 0..rank {
        u.set_column(i, &(a.column(order[i]) / s[i]));
    }
    // Complete U to an orthonormal basis for rank-deficient input.
    match rank {
        0 => u = Mat3::identity(),
        1 => {
            let u0 = u.column(0).into_owned();
            let pick = if u0[0].abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let u1 = (pick - u0 * u0.dot(&pick)).normalize();
            u.set_column(1, &u1);
            u.set_column(2, &u0.cross(&u1));
        }
        2 => {
            let u2 = u.column(0).cross(&u.column(1)).normalize();
            u.set_column(2, &u2);
        }
        _ => {}
    }
    Ok(Svd3 { u, s, v: vs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn zero_angle_is_identity() {
        let r = rotation_from_axis_angle(&AxisAngle::new([0.0, 0.0, 1.0], 0.0)).unwrap();
        assert_eq!(r, Rotation::identity());
    }

    #[test]
    fn quarter_turn_about_z_rows() {
        let r = rotation_from_axis_angle(&AxisAngle::new([0.0, 0.0, 1.0], FRAC_PI_2)).unwrap();
        let expect = Mat3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(close(r.matrix(), &expect, 1e-15));
        // x maps to y under p' = p R.
        let p = r.apply(&[1.0, 0.0, 0.0]);
        assert!((p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_turn_about_x() {
        let r = rotation_from_axis_angle(&AxisAngle::new([1.0, 0.0, 0.0], PI)).unwrap();
        let expect = Mat3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!(close(r.matrix(), &expect, 1e-15));
    }

    #[test]
    fn zero_axis_rejected() {
        assert!(rotation_from_axis_angle(&AxisAngle::new([0.0; 3], 1.0)).is_err());
    }

    #[test]
    fn axis_angle_recovered() {
        let mut rng = RandomStream::new(11);
        for _ in 0..1000 {
            let axis = rng.unit_vector();
            let angle = rng.uniform_range(1e-3, PI - 1e-6);
            let r = rotation_from_axis_angle(&AxisAngle::new(axis, angle)).unwrap();
            let aa = rotation_to_axis_angle(&r);
            assert!((aa.angle - angle).abs() < 1e-9, "{} vs {}", aa.angle, angle);
            for k in 0..3 {
                assert!((aa.axis[k] - axis[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sample_rotation_degenerate_interval_and_range() {
        let mut rng = RandomStream::new(5);
        for _ in 0..10 {
            assert_eq!(sample_rotation(0.0, &mut rng).unwrap(), Rotation::identity());
        }
        assert!(sample_rotation(-0.1, &mut rng).is_err());
        assert!(sample_rotation(PI + 1e-9, &mut rng).is_err());
        let a = sample_rotation(1.0, &mut RandomStream::new(42)).unwrap();
        let b = sample_rotation(1.0, &mut RandomStream::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_angle_mean() {
        let mut rng = RandomStream::new(99);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| rotation_to_axis_angle(&sample_rotation(PI, &mut rng).unwrap()).angle)
            .sum::<f64>()
            / n as f64;
        assert!((mean - FRAC_PI_2).abs() < 0.02 * FRAC_PI_2);
    }

    #[test]
    fn error_metric_examples() {
        let i = Rotation::identity();
        assert_eq!(isotropic_rotation_error(&i, &i), 0.0);
        let half = rotation_from_axis_angle(&AxisAngle::new([0.0, 0.0, 1.0], PI)).unwrap();
        assert!((isotropic_rotation_error(&i, &half) - 180.0).abs() < 1e-9);
        let sixty = rotation_from_axis_angle(&AxisAngle::new([0.0, 1.0, 0.0], PI / 3.0)).unwrap();
        assert!((isotropic_rotation_error(&i, &sixty) - 60.0).abs() < 1e-9);
    }

    #[test]
    fn chordal_examples() {
        let i = Rotation::identity();
        assert_eq!(chordal_sq(&i, &i), 0.0);
        let half = rotation_from_axis_angle(&AxisAngle::new([1.0, 2.0, 3.0], PI)).unwrap();
        assert!((chordal_sq(&i, &half) - 8.0).abs() < 1e-12);
        let quarter = rotation_from_axis_angle(&AxisAngle::new([0.0, 1.0, 0.0], FRAC_PI_2)).unwrap();
        assert!((chordal_sq(&i, &quarter) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn small_error_resolution() {
        let i = Rotation::identity();
        let tiny = rotation_from_axis_angle(&AxisAngle::new([0.0, 0.0, 1.0], 1e-10)).unwrap();
        let deg = isotropic_rotation_error(&i, &tiny);
        assert!((deg - 1e-10f64.to_degrees()).abs() < 1e-15);
    }

    #[test]
    fn svd_examples() {
        let s = svd3(&Mat3::identity()).unwrap();
        assert_eq!(s.s, [1.0, 1.0, 1.0]);
        let d = Mat3::from_diagonal(&Vector3::new(1.0, 3.0, 2.0));
        let s = svd3(&d).unwrap();
        assert_eq!(s.s, [3.0, 2.0, 1.0]);
        let r = Mat3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        let s = svd3(&r).unwrap();
        assert_eq!(s.s, [1.0, 1.0, 0.0]);
        assert!((s.reconstruct() - r).norm() < 1e-12);
        assert!(close(&(s.u.transpose() * s.u), &Mat3::identity(), 1e-14));
        let z = svd3(&Mat3::zeros()).unwrap();
        assert_eq!(z.s, [0.0; 3]);
        assert!(svd3(&Mat3::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn svd_rank_one() {
        let a = Vector3::new(0.3, -0.2, 0.9);
        let b = Vector3::new(-1.0, 0.5, 0.25);
        let h = a * b.transpose();
        let s = svd3(&h).unwrap();
        assert!((s.reconstruct() - h).norm() < 1e-14);
        assert!(close(&(s.u.transpose() * s.u), &Mat3::identity(), 1e-14));
        assert!(close(&(s.v.transpose() * s.v), &Mat3::identity(), 1e-14));
    }
}
