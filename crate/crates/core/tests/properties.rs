mod common;

use common::{horn_rotation, is_rotation, max_abs};
use equireg::cloud_io::{from_pcb, to_pcb};
use equireg::encoder::EncoderConfig;
use equireg::geom3::{isotropic_rotation_error, rotation_from_axis_angle, rotation_to_axis_angle, sample_rotation, AxisAngle};
use equireg::register::register_features;
use equireg::shapes::{sample_surface, shape_set, ShapeSetConfig};
use equireg::{ModelConfig, ModelParams, Point3, RandomStream, VnFeature};
use proptest::prelude::*;

use std::f64::consts::PI;

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-3).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn axis_angle_round_trip(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64, angle in 1e-3..(PI - 1e-3)) {
        prop_assume!(unit([x, y, z]).is_some());
        let axis = unit([x, y, z]).unwrap();
        let r = rotation_from_axis_angle(&AxisAngle::new(axis, angle)).unwrap();
        prop_assert!(is_rotation(&r, 1e-12));
        let back = rotation_to_axis_angle(&r);
        prop_assert!((back.angle - angle).abs() < 1e-9);
        for i in 0..3 {
            prop_assert!((back.axis[i] - axis[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn isotropic_error_is_symmetric_and_bounded(a in any::<u64>(), b in any::<u64>()) {
        let r1 = sample_rotation(PI, &mut RandomStream::new(a)).unwrap();
        let r2 = sample_rotation(PI, &mut RandomStream::new(b)).unwrap();
        let e12 = isotropic_rotation_error(&r1, &r2);
        let e21 = isotropic_rotation_error(&r2, &r1);
        prop_assert_eq!(e12, e21);
        prop_assert!((0.0..=180.0).contains(&e12));
        prop_assert!(isotropic_rotation_error(&r1, &r1) < 1e-12);
    }

    #[test]
    fn sampled_angle_never_exceeds_bound(seed in any::<u64>(), max_deg in 0.0..180.0f64) {
        let r = sample_rotation(max_deg.to_radians(), &mut RandomStream::new(seed)).unwrap();
        let e = isotropic_rotation_error(&equireg::Rotation::identity(), &r);
        prop_assert!(e <= max_deg + 1e-9, "{} > {}", e, max_deg);
    }

    #[test]
    fn procrustes_recovers_and_matches_horn(seed in any::<u64>(), channels in 3usize..40) {
        let mut rng = RandomStream::new(seed);
        let q = VnFeature::global((0..channels).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect());
        let r = sample_rotation(PI, &mut rng).unwrap();
        let sol = register_features(&q, &q.rotated(&r)).unwrap();
        prop_assume!(!sol.degenerate);
        prop_assert!(isotropic_rotation_error(&r, &sol.r_est) < 1e-6);
        prop_assert!(is_rotation(&sol.r_est, 1e-12));
        prop_assert!(max_abs(&(sol.r_est.matrix() - horn_rotation(&q, &q.rotated(&r)))) < 1e-8);
    }

    #[test]
    fn pcb_round_trip_is_bit_exact(pts in prop::collection::vec(prop::array::uniform3(any::<f64>()), 0..64)) {
        let back: Vec<Point3> = from_pcb(&to_pcb(&pts)).unwrap();
        prop_assert_eq!(back.len(), pts.len());
        for (a, b) in pts.iter().flatten().zip(back.iter().flatten()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn stream_split_is_pure(seed in any::<u64>(), id in any::<u64>()) {
        let root = RandomStream::new(seed);
        let mut a = root.split(id);
        let mut b = root.split(id);
        let mut c = root.split(id.wrapping_add(1));
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        prop_assert_eq!(x, y);
        prop_assert_ne!(x, z);
    }

    #[test]
    fn permutation_is_bijection(seed in any::<u64>(), n in 0usize..200) {
        let mut p = RandomStream::new(seed).permutation(n);
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip_and_corruption(seed in any::<u64>(), flip in any::<prop::sample::Index>()) {
        let cfg = ModelConfig::fast();
        let p = ModelParams::init(&cfg, &mut RandomStream::new(seed)).unwrap();
        let bytes = p.to_bytes();
        prop_assert_eq!(&ModelParams::from_bytes(&bytes).unwrap(), &p);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x10;
        prop_assert!(matches!(ModelParams::from_bytes(&bad), Err(equireg::Error::Integrity(_))));
    }

    #[test]
    fn encoder_is_equivariant_and_permutation_invariant(seed in any::<u64>()) {
        let ecfg = EncoderConfig::fast();
        let mut rng = RandomStream::new(seed);
        let params = equireg::encoder::EncoderParams::init(&ecfg, &mut rng).unwrap();
        let shape = shape_set(&ShapeSetConfig { count: 1, seed, ..ShapeSetConfig::default() }).unwrap().remove(0);
        let pc = sample_surface(&shape, 96, &mut rng).unwrap();
        let r = sample_rotation(PI, &mut rng).unwrap();
        let q = params.encode(&ecfg.graph, &pc.points).unwrap();
        let qr = params.encode(&ecfg.graph, &pc.rotated(&r).points).unwrap();
        prop_assert!(qr.max_abs_diff(&q.rotated(&r)) <= 1e-10 * q.max_abs());
        let perm = rng.permutation(pc.len());
        let qp = params.encode(&ecfg.graph, &pc.permuted(&perm).points).unwrap();
        prop_assert!(qp.max_abs_diff(&q) <= 1e-12 * q.max_abs());
    }
}
