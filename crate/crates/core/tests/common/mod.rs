//! Independent oracles shared by the integration tests. Nothing here calls
//! into the crate's own SVD, Procrustes or difference helpers.

#![allow(dead_code)]

use equireg::geom3::Mat3;
use equireg::{Rotation, VnFeature};
use nalgebra::{Matrix4, SymmetricEigen};

/// Optimal `R` for `q R ~ q'` via Horn's closed-form quaternion method:
/// the top eigenvector of the 4x4 symmetric matrix built from `S = q^T q'`.
pub fn horn_rotation(q: &VnFeature, q_prime: &VnFeature) -> Mat3 {
    let mut s = [[0.0; 3]; 3];
    for (a, b) in q.rows().iter().zip(q_prime.rows()) {
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += a[i] * b[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    #[rustfmt::skip]
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let top = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(top);
    let (w, x, y, z) = (v[0], v[1], v[2], v[3]);
    // Column-vector rotation M with q'_i ~ M q_i; the row form is M^T.
    #[rustfmt::skip]
    let m = Mat3::new(
        w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z),         2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),         w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),         2.0 * (y * z + w * x),         w * w - x * x - y * y + z * z,
    );
    m.transpose()
}

/// Rotation angle of `a^T b` in degrees from the trace. Coarse near zero.
pub fn acos_angle_deg(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Central differences of `f` at `x` along the listed coordinates.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs(m: &Mat3) -> f64 {
    m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

pub fn is_rotation(r: &Rotation, tol: f64) -> bool {
    let m = r.matrix();
    max_abs(&(m.transpose() * m - Mat3::identity())) < tol && (m.determinant() - 1.0).abs() < tol
}
