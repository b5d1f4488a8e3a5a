//! Closed-form rotation alignment of two global features, the chordal
//! registration loss and the reverse pass through the SVD.
//!
//! The feature rows of `Q` and `Q'` act as two matched point sets. With
//! `H = Q^T Q' = U S V^T`, the rotation minimising `||Q R - Q'||_F` over SO(3)
//! in the row-vector convention is `R = U diag(1, 1, det(U V^T)) V^T`.

use crate::error::{invalid, Error, Result};
use crate::geom3::{chordal_sq, rotate_row, svd3, Mat3, Rotation, Svd3};
use crate::vn::VnFeature;

/// Relative spectral gap below which a solution is flagged degenerate.
pub const DEGENERATE_GAP: f64 = 1e-9;
/// Relative gap that triggers the perturbation fallback during training.
pub const TRAINING_GAP: f64 = 1e-6;
const FALLBACK_SHIFT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesSolution {
    pub h: Mat3,
    pub svd: Svd3,
    /// `det(V U^T)`, +1 or -1.
    pub lambda_det: f64,
    pub r_est: Rotation,
    /// Set when `s2 - s3` or `s3` is within `1e-9 s1` of zero.
    pub degenerate: bool,
}

fn check_global(q: &VnFeature, name: &str) -> Result<()> {
    if q.points() != 1 {
        return Err(invalid(format!("{name} must be a global 1 x C feature")));
    }
    Ok(())
}

/// `H = Q^T Q'`, summed over channels.
pub fn cross_covariance(q: &VnFeature, q_prime: &VnFeature) -> Result<Mat3> {
    check_global(q, "q")?;
    check_global(q_prime, "q_prime")?;
    if q.channels() != q_prime.channels() {
        return Err(invalid(format!(
            "channel mismatch: {} vs {}",
            q.channels(),
            q_prime.channels()
        )));
    }
    let mut h = Mat3::zeros();
    for (a, b) in q.rows().iter().zip(q_prime.rows()) {
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] += a[i] * b[j];
            }
        }
    }
    Ok(h)
}

/// Returns `(dL/dQ, dL/dQ')` given `dL/dH`.
pub fn cross_covariance_backward(q: &VnFeature, q_prime: &VnFeature, grad_h: &Mat3) -> (VnFeature, VnFeature) {
    let gt = grad_h.transpose();
    let gq = q_prime.rows().iter().map(|r| rotate_row(r, &gt)).collect();
    let gqp = q.rows().iter().map(|r| rotate_row(r, grad_h)).collect();
    (VnFeature::global(gq), VnFeature::global(gqp))
}

fn is_degenerate(s: &[f64; 3], gap: f64) -> bool {
    s[0] == 0.0 || s[1] - s[2] <= gap * s[0] || s[2] <= gap * s[0]
}

pub fn solve_rotation(h: &Mat3) -> Result<ProcrustesSolution> {
    let svd = svd3(h)?;
    let lambda_det = if (svd.u.determinant() * svd.v.determinant()) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let mut u = svd.u;
    for r in 0..3 {
        u[(r, 2)] *= lambda_det;
    }
    let r_est = Rotation::from_matrix_unchecked(u * svd.v.transpose());
    Ok(ProcrustesSolution {
        h: *h,
        svd,
        lambda_det,
        r_est,
        degenerate: is_degenerate(&svd.s, DEGENERATE_GAP),
    })
}

/// Rotation `R` minimising `||Q R - Q'||_F`.
pub fn register_features(q: &VnFeature, q_prime: &VnFeature) -> Result<ProcrustesSolution> {
    solve_rotation(&cross_covariance(q, q_prime)?)
}

pub fn registration_loss(r_gt: &Rotation, sol: &ProcrustesSolution) -> f64 {
    chordal_sq(r_gt, &sol.r_est)
}

/// `d/dR ||R_gt^T R - I||_F^2 = 2 R_gt (R_gt^T R - I)`.
pub fn registration_loss_grad(r_gt: &Rotation, r_est: &Rotation) -> Mat3 {
    let g = r_gt.matrix();
    g * (g.transpose() * r_est.matrix() - Mat3::identity()) * 2.0
}

/// `dL/dH` from `dL/dR` for `R = U diag(1, 1, d) V^T`.
///
/// Fails for degenerate solutions; see [`backward_with_fallback`].
pub fn backward_through_svd(sol: &ProcrustesSolution, upstream: &Mat3) -> Result<Mat3> {
    if sol.degenerate {
        return Err(Error::GradientUnavailable(format!(
            "repeated or vanishing singular values {:?}",
            sol.svd.s
        )));
    }
    Ok(svd_backward_unchecked(sol, upstream))
}

/// Backward pass used in training: when the spectral gap is below
/// `1e-6 s1`, the gradient is taken at `H + 1e-9 I` instead.
pub fn backward_with_fallback(sol: &ProcrustesSolution, upstream: &Mat3) -> Result<Mat3> {
    if needs_fallback(sol) {
        let shifted = solve_rotation(&(sol.h + Mat3::identity() * FALLBACK_SHIFT * sol.svd.s[0].max(1.0)))?;
        return Ok(svd_backward_unchecked(&shifted, upstream));
    }
    Ok(svd_backward_unchecked(sol, upstream))
}

/// `true` when [`backward_with_fallback`] would perturb `H`.
pub fn needs_fallback(sol: &ProcrustesSolution) -> bool {
    sol.degenerate || is_degenerate(&sol.svd.s, TRAINING_GAP)
}

fn svd_backward_unchecked(sol: &ProcrustesSolution, upstream: &Mat3) -> Mat3 {
    // Absorb the sign into the third singular pair: H = U diag(s1, s2, d s3) (V diag(1, 1, d))^T,
    // and R = U Vd^T is the polar factor. The SVD differentials
    //   (U^T dU)_ij = (s_j M_ij + s_i M_ji) / (s_j^2 - s_i^2),
    //   (V^T dV)_ij = (s_i M_ij + s_j M_ji) / (s_j^2 - s_i^2),   M = U^T dH V,
    // combine to dR = U X Vd^T with X_ij = (M_ij - M_ji) / (s_i + s_j).
    let d = sol.lambda_det;
    let s = [sol.svd.s[0], sol.svd.s[1], d * sol.svd.s[2]];
    let mut vd = sol.svd.v;
    for r in 0..3 {
        vd[(r, 2)] *= d;
    }
    let u = sol.svd.u;
    let g = u.transpose() * upstream * vd;
    let mut a = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let denom = s[i] + s[j];
            if denom.abs() > 1e-300 {
                a[(i, j)] = (g[(i, j)] - g[(j, i)]) / denom;
            }
        }
    }
    u * a * vd.transpose()
}
