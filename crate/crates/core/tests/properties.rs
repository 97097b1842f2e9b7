use assemkit::codec::{detokenize, detokenize_value, tokenize, tokenize_value, tokens_to_vector, PoseTokens, MAX_BIN};
use assemkit::encoder::{encode, EncoderConfig, EncoderParams};
use assemkit::geometry::{
    apply_transform, farthest_point_indices, geodesic_angle, knn_graph, random_se3, rotation_defect, Mat3, Vec3,
};
use assemkit::mesh::{box_mesh, canonical_normalize};
use assemkit::metrics::{chamfer, scd_between};
use assemkit::planner::{build_connectivity, infer_order};
use assemkit::rng::rng_from_seed;
use assemkit::{PointCloud, RigidTransform};
use proptest::prelude::*;

fn cloud_strategy(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), min..max)
        .prop_map(|pts| PointCloud::from_slices(&pts).unwrap())
}

fn translated(cloud: &PointCloud, shift: Vec3) -> PointCloud {
    apply_transform(cloud, &RigidTransform::from_translation(shift))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_bins_round_trip(bins in prop::array::uniform9(0..=MAX_BIN)) {
        let tokens = PoseTokens::new(bins).unwrap();
        prop_assert_eq!(tokenize(&tokens_to_vector(&tokens)), tokens);
        let text: PoseTokens = tokens.to_string().parse().unwrap();
        prop_assert_eq!(text, tokens);
    }

    #[test]
    fn value_round_trip_within_half_bin(x in -1.0f64..=1.0) {
        prop_assert!((detokenize_value(tokenize_value(x)) - x).abs() <= 0.005 + 1e-12);
    }

    #[test]
    fn decoded_rotations_are_orthonormal(bins in prop::array::uniform9(0..=MAX_BIN)) {
        if let Ok(pose) = detokenize(&PoseTokens::new(bins).unwrap(), 1.0) {
            prop_assert!(rotation_defect(pose.rotation()) < 1e-9);
        }
    }

    #[test]
    fn compose_with_inverse_is_identity(seed in any::<u64>()) {
        let t = random_se3(seed, None, Some(2.0)).unwrap();
        let id = t.compose(&t.inverse());
        prop_assert!(geodesic_angle(id.rotation(), &Mat3::identity()) < 1e-7);
        prop_assert!(id.translation().norm() < 1e-12);
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(a in cloud_strategy(1, 40), b in cloud_strategy(1, 40)) {
        prop_assert_eq!(chamfer(&a, &a), 0.0);
        let (ab, ba) = (chamfer(&a, &b), chamfer(&b, &a));
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn scd_of_equal_poses_is_zero(a in cloud_strategy(1, 40), seed in any::<u64>()) {
        let t = random_se3(seed, None, Some(1.0)).unwrap();
        prop_assert!(scd_between(&t, &t, &a) < 1e-24);
    }

    #[test]
    fn fps_is_a_prefix_chain(a in cloud_strategy(2, 60), k in 1usize..20) {
        let k = k.min(a.len());
        let long = farthest_point_indices(a.points(), a.len()).unwrap();
        let short = farthest_point_indices(a.points(), k).unwrap();
        prop_assert_eq!(&long[..k], &short[..]);
    }

    #[test]
    fn knn_excludes_self_and_is_sorted(a in cloud_strategy(6, 40)) {
        let g = knn_graph(a.points(), 5).unwrap();
        for (i, nbrs) in g.iter().enumerate() {
            prop_assert_eq!(nbrs.len(), 5);
            prop_assert!(!nbrs.contains(&i));
            let d: Vec<f64> = nbrs.iter().map(|&j| (a.points()[j] - a.points()[i]).norm()).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn normalize_is_idempotent(lo in prop::array::uniform3(-3.0f64..0.0), size in prop::array::uniform3(0.1f64..4.0)) {
        let hi = [lo[0] + size[0], lo[1] + size[1], lo[2] + size[2]];
        let m = box_mesh(Vec3::from(lo), Vec3::from(hi)).unwrap();
        let (once, _) = canonical_normalize(&[m]).unwrap();
        let (twice, n) = canonical_normalize(&once).unwrap();
        prop_assert!((n.scale - 1.0).abs() < 1e-12);
        let (blo, bhi) = twice[0].bounds();
        prop_assert!(((bhi - blo).max() - 1.0).abs() < 1e-12);
        prop_assert!(blo.z.abs() < 1e-12);
        for (p, q) in once[0].vertices().iter().zip(twice[0].vertices()) {
            prop_assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn connectivity_is_symmetric_and_monotone_in_tau(
        parts in prop::collection::vec(cloud_strategy(3, 12), 2..5),
        shifts in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 5),
        tau in 0.01f64..0.5,
    ) {
        let clouds: Vec<PointCloud> =
            parts.iter().zip(&shifts).map(|(c, s)| translated(c, Vec3::from(*s) * 0.5)).collect();
        let small = build_connectivity(&clouds, tau).unwrap();
        let large = build_connectivity(&clouds, 2.0 * tau).unwrap();
        for i in 0..clouds.len() {
            for j in 0..clouds.len() {
                prop_assert_eq!(small.get(i, j), small.get(j, i));
                prop_assert!(!small.get(i, j) || large.get(i, j));
            }
        }
    }

    #[test]
    fn order_is_a_permutation_starting_lowest(
        parts in prop::collection::vec(cloud_strategy(3, 12), 2..5),
    ) {
        // stacked unit-ish clouds always touch at tau = 3
        let clouds: Vec<PointCloud> =
            parts.iter().enumerate().map(|(k, c)| translated(c, Vec3::new(0.0, 0.0, k as f64))).collect();
        let m = build_connectivity(&clouds, 3.0).unwrap();
        let order = infer_order(&clouds, &m).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..clouds.len()).collect::<Vec<_>>());
        let lowest = clouds.iter().map(PointCloud::min_z).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(clouds[order[0]].min_z(), lowest);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn encoder_is_equivariant(seed in any::<u64>()) {
        let params = EncoderParams::init(EncoderConfig::desk(8), &mut rng_from_seed(seed)).unwrap();
        let mut rng = rng_from_seed(seed ^ 1);
        let pts: Vec<Vec3> = (0..48).map(|_| Vec3::from_fn(|_, _| rand::Rng::gen_range(&mut rng, -1.0..1.0))).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let t = random_se3(seed, None, Some(1.0)).unwrap();
        let (a, b) = (encode(&cloud, &params).unwrap(), encode(&apply_transform(&cloud, &t), &params).unwrap());
        for (x, y) in a.equivariant.values.iter().zip(&b.equivariant.values) {
            prop_assert!((t.apply_point(x) - y).norm() <= 1e-9 * (1.0 + x.norm()));
        }
        for (x, y) in a.invariant.values.iter().zip(&b.invariant.values) {
            prop_assert!((x - y).norm() <= 1e-9 * (1.0 + x.norm()));
        }
    }
}
