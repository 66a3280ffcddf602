use proptest::prelude::*;

use uio_core::checkpoint::Checkpoint;
use uio_core::dense_codec::{depth_to_raster, normals_to_raster, raster_to_depth, raster_to_normals, DepthMap, NormalMap};
use uio_core::nn::Tensor;
use uio_core::rng::{derive_seed, keyed_rng};
use uio_core::sparse_codec::{Keypoint, KeypointSet, NormPoint, SparseCodec, Visibility, NUM_JOINTS};
use uio_core::text_tok::SubwordModel;
use uio_core::vocab::VocabLayout;
use rand::RngCore;

fn arb_keypoint() -> impl Strategy<Value = Keypoint> {
    prop_oneof![
        Just(Keypoint { point: None, visibility: Visibility::NotVisible }),
        (0.0f64..=1.0, 0.0f64..=1.0, prop_oneof![Just(Visibility::Partial), Just(Visibility::Full)])
            .prop_map(|(x, y, visibility)| Keypoint { point: Some(NormPoint { x, y }), visibility }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn keypoints_round_trip(joints in proptest::collection::vec(arb_keypoint(), NUM_JOINTS)) {
        let layout = VocabLayout::default();
        let tok = SubwordModel::bytes_only();
        let codec = SparseCodec::new(&layout, &tok);
        let k = KeypointSet::new(joints).unwrap();
        let back = codec.decode_keypoints(&codec.encode_keypoints(&k).unwrap(), false).unwrap();
        for (a, b) in k.joints.iter().zip(&back.joints) {
            prop_assert_eq!(a.visibility, b.visibility);
            match (a.point, b.point) {
                (None, None) => {}
                (Some(p), Some(q)) => prop_assert!((p.x - q.x).abs() <= 1e-3 && (p.y - q.y).abs() <= 1e-3),
                other => prop_assert!(false, "presence mismatch {:?}", other),
            }
        }
    }

    #[test]
    fn depth_error_bounded_by_half_level(data in proptest::collection::vec(0.0f64..=5.0, 16), max_depth in 5.0f64..50.0) {
        let d = DepthMap { height: 4, width: 4, data, max_depth };
        let back = raster_to_depth(&depth_to_raster(&d).unwrap().quantize_8bit(), max_depth).unwrap();
        for (a, b) in d.data.iter().zip(&back.data) {
            prop_assert!((a - b).abs() <= max_depth / 510.0 + 1e-12);
        }
    }

    #[test]
    fn normals_within_a_degree(v in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 9)) {
        let data: Vec<[f64; 3]> = v
            .iter()
            .map(|&(x, y, z)| {
                let n = (x * x + y * y + z * z).sqrt().max(1e-3);
                if n < 1e-2 { [0.0, 0.0, 1.0] } else { [x / n, y / n, z / n] }
            })
            .collect();
        let nm = NormalMap { height: 3, width: 3, data };
        let (back, _) = raster_to_normals(&normals_to_raster(&nm).unwrap().quantize_8bit()).unwrap();
        for (a, b) in nm.data.iter().zip(&back.data) {
            let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
            prop_assert!(dot.acos().to_degrees() < 1.0);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(rows in 1usize..5, cols in 1usize..5, vals in proptest::collection::vec(-1e6f64..1e6, 25)) {
        let mut c = Checkpoint::new("test", serde_json::json!({"step": rows}));
        c.push("w", Tensor::from_vec(rows, cols, vals[..rows * cols].to_vec()));
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.kind.as_str(), "test");
        prop_assert_eq!(back.get("w").unwrap().data(), &vals[..rows * cols]);
    }

    #[test]
    fn keyed_streams_are_pure(seed in any::<u64>(), step in any::<u64>(), slot in 0u64..64) {
        prop_assert_eq!(keyed_rng(seed, step, slot).next_u64(), keyed_rng(seed, step, slot).next_u64());
        prop_assert_ne!(keyed_rng(seed, step, slot).next_u64(), keyed_rng(seed, step, slot + 1).next_u64());
        prop_assert_eq!(derive_seed(seed, "a"), derive_seed(seed, "a"));
    }
}
