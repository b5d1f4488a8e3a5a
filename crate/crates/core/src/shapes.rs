//! Procedural watertight solids with exact occupancy, surface and query
//! samplers, and the pair perturbations used for registration experiments.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::geom3::{sample_rotation, Point3, Rotation};
use crate::rng::RandomStream;

/// Bounding radius every shape must fit in. A ball of radius 0.5 lies inside
/// the unit cube for any pose.
const FIT_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveKind {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Ellipsoid { radii: [f64; 3] },
    /// Segment along the local z axis from `-half_length` to `half_length`.
    Capsule { radius: f64, half_length: f64 },
}

impl PrimitiveKind {
    fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        let good = match *self {
            PrimitiveKind::Sphere { radius } => ok(radius),
            PrimitiveKind::Box { half_extents } => half_extents.iter().all(|&x| ok(x)),
            PrimitiveKind::Ellipsoid { radii } => radii.iter().all(|&x| ok(x)),
            PrimitiveKind::Capsule { radius, half_length } => ok(radius) && ok(half_length),
        };
        if good {
            Ok(())
        } else {
            Err(invalid(format!("degenerate primitive parameters: {self:?}")))
        }
    }

    fn bound_radius(&self) -> f64 {
        match *self {
            PrimitiveKind::Sphere { radius } => radius,
            PrimitiveKind::Box { half_extents: h } => norm(&h),
            PrimitiveKind::Ellipsoid { radii: r } => r[0].max(r[1]).max(r[2]),
            PrimitiveKind::Capsule { radius, half_length } => radius + half_length,
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            PrimitiveKind::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            PrimitiveKind::Box { half_extents: h } => 8.0 * h[0] * h[1] * h[2],
            PrimitiveKind::Ellipsoid { radii: r } => 4.0 / 3.0 * PI * r[0] * r[1] * r[2],
            PrimitiveKind::Capsule { radius, half_length } => {
                PI * radius * radius * 2.0 * half_length + 4.0 / 3.0 * PI * radius.powi(3)
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            PrimitiveKind::Sphere { radius } => 4.0 * PI * radius * radius,
            PrimitiveKind::Box { half_extents: h } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[2] * h[0]),
            PrimitiveKind::Ellipsoid { radii } => ellipsoid_area(radii),
            PrimitiveKind::Capsule { radius, half_length } => {
                2.0 * PI * radius * 2.0 * half_length + 4.0 * PI * radius * radius
            }
        }
    }

    /// Closed inside test in the primitive's local frame.
    fn contains(&self, q: &Point3) -> bool {
        self.level(q) <= 0.0
    }

    /// Signed-ish level value: negative inside, zero on the boundary.
    fn level(&self, q: &Point3) -> f64 {
        match *self {
            PrimitiveKind::Sphere { radius } => dot(q, q) - radius * radius,
            PrimitiveKind::Box { half_extents: h } => (q[0].abs() - h[0])
                .max(q[1].abs() - h[1])
                .max(q[2].abs() - h[2]),
            PrimitiveKind::Ellipsoid { radii: r } => {
                (q[0] / r[0]).powi(2) + (q[1] / r[1]).powi(2) + (q[2] / r[2]).powi(2) - 1.0
            }
            PrimitiveKind::Capsule { radius, half_length } => {
                let z = q[2].clamp(-half_length, half_length);
                q[0] * q[0] + q[1] * q[1] + (q[2] - z) * (q[2] - z) - radius * radius
            }
        }
    }

    /// Area-uniform point on the boundary, local frame.
    fn sample_surface(&self, rng: &mut RandomStream) -> Point3 {
        match *self {
            PrimitiveKind::Sphere { radius } => scale(&rng.unit_vector(), radius),
            PrimitiveKind::Box { half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total = areas[0] + areas[1] + areas[2];
                let t = rng.uniform() * total;
                let axis = if t < areas[0] {
                    0
                } else if t < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let mut p = [0.0; 3];
                for (k, slot) in p.iter_mut().enumerate() {
                    *slot = rng.uniform_range(-h[k], h[k]);
                }
                p[axis] = if rng.uniform() < 0.5 { -h[axis] } else { h[axis] };
                p
            }
            PrimitiveKind::Ellipsoid { radii: r } => {
                // Push sphere samples through diag(r) and thin by the area element.
                let rmin = r[0].min(r[1]).min(r[2]);
                loop {
                    let u = rng.unit_vector();
                    let g = ((u[0] / r[0]).powi(2) + (u[1] / r[1]).powi(2) + (u[2] / r[2]).powi(2))
                        .sqrt()
                        * rmin;
                    if rng.uniform() < g {
                        return [u[0] * r[0], u[1] * r[1], u[2] * r[2]];
                    }
                }
            }
            PrimitiveKind::Capsule { radius, half_length } => {
                let side = 4.0 * PI * radius * half_length;
                let caps = 4.0 * PI * radius * radius;
                if rng.uniform() * (side + caps) < side {
                    let phi = rng.uniform() * 2.0 * PI;
                    let z = rng.uniform_range(-half_length, half_length);
                    [radius * phi.cos(), radius * phi.sin(), z]
                } else {
                    let u = rng.unit_vector();
                    let shift = if u[2] >= 0.0 { half_length } else { -half_length };
                    [radius * u[0], radius * u[1], radius * u[2] + shift]
                }
            }
        }
    }

    fn scaled(&self, s: f64) -> Self {
        match *self {
            PrimitiveKind::Sphere { radius } => PrimitiveKind::Sphere { radius: radius * s },
            PrimitiveKind::Box { half_extents: h } => PrimitiveKind::Box {
                half_extents: scale(&h, s),
            },
            PrimitiveKind::Ellipsoid { radii } => PrimitiveKind::Ellipsoid {
                radii: scale(&radii, s),
            },
            PrimitiveKind::Capsule { radius, half_length } => PrimitiveKind::Capsule {
                radius: radius * s,
                half_length: half_length * s,
            },
        }
    }
}

/// Surface area of an ellipsoid by midpoint quadrature of the area element
/// over the unit sphere.
fn ellipsoid_area(r: [f64; 3]) -> f64 {
    // Area = abc * integral over the unit sphere of |(u/a, v/b, w/c)|, written in
    // (cos theta, phi): Simpson in cos theta, midpoint (spectral for periodic) in phi.
    const NU: usize = 512;
    const NP: usize = 64;
    let prod = r[0] * r[1] * r[2];
    let h = 2.0 / NU as f64;
    let mut total = 0.0;
    for i in 0..=NU {
        let z = -1.0 + i as f64 * h;
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let mut ring = 0.0;
        for j in 0..NP {
            let (sp, cp) = ((j as f64 + 0.5) * 2.0 * PI / NP as f64).sin_cos();
            ring += ((rho * cp / r[0]).powi(2) + (rho * sp / r[1]).powi(2) + (z / r[2]).powi(2)).sqrt();
        }
        let w = if i == 0 || i == NU {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += w * ring;
    }
    total * prod * (h / 3.0) * (2.0 * PI / NP as f64)
}

/// A primitive placed in the shape's body frame: body point `p` maps to the
/// local point `(p - center) O^T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub kind: PrimitiveKind,
    pub center: Point3,
    pub orientation: Rotation,
}

impl Primitive {
    pub fn new(kind: PrimitiveKind, center: Point3, orientation: Rotation) -> Self {
        Self {
            kind,
            center,
            orientation,
        }
    }

    pub fn centered(kind: PrimitiveKind) -> Self {
        Self::new(kind, [0.0; 3], Rotation::identity())
    }

    fn to_local(&self, p: &Point3) -> Point3 {
        let d = sub(p, &self.center);
        self.orientation.transpose().apply(&d)
    }

    fn to_body(&self, q: &Point3) -> Point3 {
        add(&self.orientation.apply(q), &self.center)
    }

    pub fn contains(&self, p: &Point3) -> bool {
        self.kind.contains(&self.to_local(p))
    }

    fn strictly_inside(&self, p: &Point3) -> bool {
        self.kind.level(&self.to_local(p)) < 0.0
    }

    /// Distance from the boundary in level-set units; zero on the surface.
    pub fn level(&self, p: &Point3) -> f64 {
        self.kind.level(&self.to_local(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Box,
    Ellipsoid,
    Capsule,
    Union,
}

/// An origin-centred solid: one primitive or a connected union of 2..=4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    pub id: u64,
    primitives: Vec<Primitive>,
    pose: Rotation,
}

impl ShapeModel {
    pub fn new(id: u64, primitives: Vec<Primitive>, pose: Rotation) -> Result<Self> {
        if primitives.is_empty() || primitives.len() > 4 {
            return Err(invalid(format!(
                "a shape needs 1 to 4 primitives, got {}",
                primitives.len()
            )));
        }
        for p in &primitives {
            p.kind.validate()?;
            if !p.center.iter().all(|c| c.is_finite()) {
                return Err(invalid("primitive center is not finite"));
            }
            let reach = norm(&p.center) + p.kind.bound_radius();
            if reach > FIT_RADIUS {
                return Err(invalid(format!(
                    "primitive reaches radius {reach:.4}, outside the unit cube ball"
                )));
            }
        }
        if primitives.len() > 1 && !union_is_connected(&primitives) {
            return Err(invalid("union primitives do not overlap"));
        }
        Ok(Self {
            id,
            primitives,
            pose,
        })
    }

    pub fn single(id: u64, kind: PrimitiveKind) -> Result<Self> {
        Self::new(id, vec![Primitive::centered(kind)], Rotation::identity())
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        Self::single(0, PrimitiveKind::Sphere { radius })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn pose(&self) -> &Rotation {
        &self.pose
    }

    pub fn kind(&self) -> ShapeKind {
        if self.primitives.len() > 1 {
            return ShapeKind::Union;
        }
        match self.primitives[0].kind {
            PrimitiveKind::Sphere { .. } => ShapeKind::Sphere,
            PrimitiveKind::Box { .. } => ShapeKind::Box,
            PrimitiveKind::Ellipsoid { .. } => ShapeKind::Ellipsoid,
            PrimitiveKind::Capsule { .. } => ShapeKind::Capsule,
        }
    }

    /// The same solid with its pose followed by `r`: occupancy at `p R`
    /// equals the original occupancy at `p`.
    pub fn rotated(&self, r: &Rotation) -> Self {
        Self {
            id: self.id,
            primitives: self.primitives.clone(),
            pose: self.pose.then(r),
        }
    }

    pub fn with_pose(&self, pose: Rotation) -> Self {
        Self {
            id: self.id,
            primitives: self.primitives.clone(),
            pose,
        }
    }

    fn to_body(&self, p: &Point3) -> Point3 {
        self.pose.transpose().apply(p)
    }

    /// Nearest-boundary level over the union, in body coordinates; used by tests.
    pub fn surface_residual(&self, p: &Point3) -> f64 {
        let b = self.to_body(p);
        self.primitives
            .iter()
            .map(|pr| pr.level(&b).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn union_is_connected(prims: &[Primitive]) -> bool {
    let n = prims.len();
    let mut probe = RandomStream::new(0x5eed);
    let samples: Vec<Vec<Point3>> = prims
        .iter()
        .map(|p| {
            let mut pts: Vec<Point3> = (0..512)
                .map(|_| p.to_body(&p.kind.sample_surface(&mut probe)))
                .collect();
            pts.push(p.center);
            pts
        })
        .collect();
    let overlap = |i: usize, j: usize| {
        samples[j].iter().any(|q| prims[i].contains(q))
            || samples[i].iter().any(|q| prims[j].contains(q))
    };
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && overlap(i, j) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Exact inside test (closed set).
pub fn occupancy_oracle(shape: &ShapeModel, p: &Point3) -> u8 {
    let b = shape.to_body(p);
    shape.primitives.iter().any(|pr| pr.contains(&b)) as u8
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub shape_id: Option<u64>,
    pub noise_sigma: f64,
    pub sample_count: usize,
    pub crop_fraction: Option<f64>,
    pub permutation_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub provenance: Provenance,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.len() < 3 {
            return Err(invalid(format!(
                "point cloud needs at least 3 points, got {}",
                points.len()
            )));
        }
        if !points.iter().flatten().all(|x| x.is_finite()) {
            return Err(invalid("point cloud has non-finite coordinates"));
        }
        let sample_count = points.len();
        Ok(Self {
            points,
            provenance: Provenance {
                sample_count,
                ..Provenance::default()
            },
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `P R`.
    pub fn rotated(&self, r: &Rotation) -> Self {
        Self {
            points: self.points.iter().map(|p| r.apply(p)).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub queries: Vec<Point3>,
    pub labels: Vec<u8>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Surface samples, area-uniform per primitive. For unions, primitives are
/// picked in proportion to area and samples buried inside another primitive
/// are rejected, which leaves the exposed surface uniformly covered.
pub fn sample_surface(shape: &ShapeModel, n: usize, rng: &mut RandomStream) -> Result<PointCloud> {
    if n < 3 {
        return Err(invalid(format!("need at least 3 surface samples, got {n}")));
    }
    let areas: Vec<f64> = shape.primitives.iter().map(|p| p.kind.area()).collect();
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(n);
    let max_tries = 1000 * n;
    let mut tries = 0;
    while points.len() < n {
        tries += 1;
        if tries > max_tries {
            return Err(invalid("surface sampler could not find exposed surface"));
        }
        let mut t = rng.uniform() * total;
        let mut which = areas.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if t < *a {
                which = i;
                break;
            }
            t -= a;
        }
        let prim = &shape.primitives[which];
        let body = prim.to_body(&prim.kind.sample_surface(rng));
        let buried = shape
            .primitives
            .iter()
            .enumerate()
            .any(|(j, other)| j != which && other.strictly_inside(&body));
        if !buried {
            points.push(shape.pose.apply(&body));
        }
    }
    let mut pc = PointCloud::new(points)?;
    pc.provenance.shape_id = Some(shape.id);
    Ok(pc)
}

/// Queries uniform in `[-0.5, 0.5]^3` labelled by the occupancy oracle.
pub fn sample_queries(shape: &ShapeModel, n: usize, rng: &mut RandomStream) -> QueryBatch {
    sample_queries_mixed(shape, n, 0.0, 0.0, rng)
}

/// Uniform queries with an optional share drawn near the surface (surface
/// sample plus isotropic Gaussian offset of std `near_sigma`, clamped to the cube).
pub fn sample_queries_mixed(
    shape: &ShapeModel,
    n: usize,
    near_fraction: f64,
    near_sigma: f64,
    rng: &mut RandomStream,
) -> QueryBatch {
    let n_near = ((near_fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut queries = Vec::with_capacity(n);
    for _ in 0..n - n_near {
        queries.push([
            rng.uniform() - 0.5,
            rng.uniform() - 0.5,
            rng.uniform() - 0.5,
        ]);
    }
    if n_near > 0 {
        if let Ok(surf) = sample_surface(shape, n_near.max(3), rng) {
            for p in surf.points.iter().take(n_near) {
                let mut q = *p;
                for c in q.iter_mut() {
                    *c = (*c + near_sigma * rng.normal()).clamp(-0.5, 0.5);
                }
                queries.push(q);
            }
        }
    }
    let labels = queries.iter().map(|q| occupancy_oracle(shape, q)).collect();
    QueryBatch { queries, labels }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub noise_sigma: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// Fraction of points kept by the half-space crop, applied to both clouds.
    pub crop_fraction: f64,
    pub permute: bool,
    /// Draw the target independently from the surface instead of copying the source.
    #[serde(default)]
    pub resample: bool,
}

impl PerturbationConfig {
    pub fn rotated_copy(n: usize) -> Self {
        Self {
            noise_sigma: 0.0,
            n_source: n,
            n_target: n,
            crop_fraction: 1.0,
            permute: true,
            resample: false,
        }
    }

    pub fn noisy(n: usize, sigma: f64) -> Self {
        Self {
            noise_sigma: sigma,
            ..Self::rotated_copy(n)
        }
    }

    pub fn density(n_source: usize, n_target: usize) -> Self {
        Self {
            n_target,
            resample: true,
            ..Self::rotated_copy(n_source)
        }
    }

    pub fn cropped(n: usize, fraction: f64) -> Self {
        Self {
            crop_fraction: fraction,
            ..Self::rotated_copy(n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma must be finite and >= 0"));
        }
        if self.n_source < 3 || self.n_target < 3 {
            return Err(invalid("point counts must be >= 3"));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(invalid("crop_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

pub fn add_noise(pc: &mut PointCloud, sigma: f64, rng: &mut RandomStream) {
    if sigma == 0.0 {
        return;
    }
    for p in pc.points.iter_mut() {
        for c in p.iter_mut() {
            *c += sigma * rng.normal();
        }
    }
    pc.provenance.noise_sigma = sigma;
}

/// Keeps the `ceil(fraction * N)` points with the largest projection onto a
/// random unit direction.
pub fn crop_halfspace(pc: &PointCloud, fraction: f64, rng: &mut RandomStream) -> Result<PointCloud> {
    let dir = rng.unit_vector();
    crop_halfspace_along(pc, fraction, &dir)
}

pub fn crop_halfspace_along(pc: &PointCloud, fraction: f64, dir: &Point3) -> Result<PointCloud> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("crop fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(pc.clone());
    }
    let n = pc.len();
    let keep = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    if keep < 3 {
        return Err(invalid(format!("crop keeps only {keep} points")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let proj: Vec<f64> = pc.points.iter().map(|p| dot(p, dir)).collect();
    order.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    let mut out = pc.permuted(&kept);
    out.provenance.crop_fraction = Some(fraction);
    out.provenance.sample_count = keep;
    Ok(out)
}

/// Source/target pair on one shape related by a sampled rotation:
/// `target = perturb(copy or resample of source) r_gt`.
pub fn make_pair(
    shape: &ShapeModel,
    cfg: &PerturbationConfig,
    max_angle: f64,
    rng: &mut RandomStream,
) -> Result<(PointCloud, PointCloud, Rotation)> {
    cfg.validate()?;
    let r_gt = sample_rotation(max_angle, rng)?;
    let mut source = sample_surface(shape, cfg.n_source, rng)?;
    let mut target = if cfg.resample || cfg.n_target != cfg.n_source {
        sample_surface(shape, cfg.n_target, rng)?
    } else {
        source.clone()
    };
    if cfg.crop_fraction < 1.0 {
        source = crop_halfspace(&source, cfg.crop_fraction, rng)?;
        target = crop_halfspace(&target, cfg.crop_fraction, rng)?;
    }
    add_noise(&mut source, cfg.noise_sigma, rng);
    add_noise(&mut target, cfg.noise_sigma, rng);
    if cfg.permute {
        let seed = rng.next_u64();
        let perm = RandomStream::new(seed).permutation(target.len());
        target = target.permuted(&perm);
        target.provenance.permutation_seed = Some(seed);
    }
    Ok((source, target.rotated(&r_gt), r_gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSetConfig {
    pub count: usize,
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub seed: u64,
}

impl Default for ShapeSetConfig {
    fn default() -> Self {
        Self {
            count: 30,
            min_primitives: 3,
            max_primitives: 4,
            seed: 1,
        }
    }
}

fn random_kind(rng: &mut RandomStream) -> PrimitiveKind {
    let dim = |rng: &mut RandomStream| rng.uniform_range(0.06, 0.22);
    match rng.below(3) {
        0 => PrimitiveKind::Box {
            half_extents: [dim(rng), dim(rng), dim(rng)],
        },
        1 => PrimitiveKind::Ellipsoid {
            radii: [dim(rng), dim(rng), dim(rng)],
        },
        _ => PrimitiveKind::Capsule {
            radius: rng.uniform_range(0.04, 0.12),
            half_length: dim(rng),
        },
    }
}

fn random_orientation(rng: &mut RandomStream) -> Rotation {
    sample_rotation(PI, rng).expect("pi is a valid max angle")
}

/// Random connected union of `n_prims` box/ellipsoid/capsule primitives
/// (spheres are left out so the rotation stays observable), recentred on
/// its volume-weighted centre and scaled to a bounding radius of 0.45.
pub fn random_union(id: u64, n_prims: usize, rng: &mut RandomStream) -> Result<ShapeModel> {
    if !(2..=4).contains(&n_prims) {
        return Err(invalid("unions have 2 to 4 primitives"));
    }
    let mut prims: Vec<Primitive> = vec![Primitive::new(
        random_kind(rng),
        [0.0; 3],
        random_orientation(rng),
    )];
    while prims.len() < n_prims {
        let host = prims[rng.below(prims.len())];
        let b = host.kind.bound_radius();
        let center = loop {
            let q = [
                rng.uniform_range(-b, b),
                rng.uniform_range(-b, b),
                rng.uniform_range(-b, b),
            ];
            // Keep new centres in the outer part of the host so the union is not blob-like.
            if host.kind.contains(&q) && norm(&q) > 0.4 * b {
                break host.to_body(&q);
            }
        };
        prims.push(Primitive::new(random_kind(rng), center, random_orientation(rng)));
    }
    let vol: f64 = prims.iter().map(|p| p.kind.volume()).sum();
    let mut centroid = [0.0; 3];
    for p in &prims {
        let w = p.kind.volume() / vol;
        for k in 0..3 {
            centroid[k] += w * p.center[k];
        }
    }
    let reach = prims
        .iter()
        .map(|p| norm(&sub(&p.center, &centroid)) + p.kind.bound_radius())
        .fold(0.0, f64::max);
    let s = 0.45 / reach;
    let prims = prims
        .into_iter()
        .map(|p| Primitive::new(p.kind.scaled(s), scale(&sub(&p.center, &centroid), s), p.orientation))
        .collect();
    ShapeModel::new(id, prims, random_orientation(rng))
}

/// Deterministic set of asymmetric union shapes.
pub fn shape_set(cfg: &ShapeSetConfig) -> Result<Vec<ShapeModel>> {
    if cfg.min_primitives < 2 || cfg.max_primitives > 4 || cfg.min_primitives > cfg.max_primitives {
        return Err(invalid("primitive counts must satisfy 2 <= min <= max <= 4"));
    }
    let root = RandomStream::new(cfg.seed);
    (0..cfg.count)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let span = cfg.max_primitives - cfg.min_primitives + 1;
            let n = cfg.min_primitives + rng.below(span);
            random_union(i as u64, n, &mut rng)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::InvalidArgument(m) => invalid(format!("shape generation failed: {m}")),
            other => other,
        })
}

#[inline]
pub(crate) fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn add(a: &Point3, b: &Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn scale(a: &Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
