use neurovit::groundtruth::{rasterize_labels, LabelMode};
use neurovit::metrics::{dice, hd95, BinaryMask};
use neurovit::swc::{SwcMorphology, SwcNode};
use proptest::prelude::*;

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    ([1usize..8, 1usize..8, 1usize..6]).prop_flat_map(|[w, h, d]| {
        let n = w * h * d;
        (
            prop::collection::vec(prop::bool::weighted(0.3), n),
            prop::collection::vec(prop::bool::weighted(0.3), n),
        )
            .prop_map(move |(a, b)| {
                (
                    BinaryMask::new([w, h, d], a).unwrap(),
                    BinaryMask::new([w, h, d], b).unwrap(),
                )
            })
    })
}

fn directed_max(from: &BinaryMask, to: &BinaryMask) -> f32 {
    let (sf, st) = (from.surface(), to.surface());
    sf.iter()
        .map(|p| {
            st.iter()
                .map(|q| (0..3).map(|k| (p[k] as i64 - q[k] as i64).pow(2)).sum::<i64>())
                .min()
                .unwrap()
        })
        .max()
        .map_or(0.0, |d2| (d2 as f64).sqrt() as f32)
}

fn chain(radius: f32) -> SwcMorphology {
    let node = |id: u64, x: f32, parent: i64| SwcNode {
        id,
        type_code: 3,
        x,
        y: 6.0,
        z: 2.0,
        radius,
        parent_id: parent,
    };
    SwcMorphology::new(vec![node(1, 3.0, -1), node(2, 8.0, 1), node(3, 12.0, 2)]).unwrap()
}

proptest! {
    #[test]
    fn metrics_are_symmetric((a, b) in mask_pair()) {
        prop_assert_eq!(dice(&a, &b).unwrap().to_bits(), dice(&b, &a).unwrap().to_bits());
        let (ab, ba) = (hd95(&a, &b).ok(), hd95(&b, &a).ok());
        prop_assert_eq!(ab, ba);
        if let Some(h) = ab {
            prop_assert!(h <= directed_max(&a, &b).max(directed_max(&b, &a)));
        }
    }

    #[test]
    fn larger_radius_covers_more(r in 0.3f32..3.0, grow in 0.0f32..2.0) {
        let dims = [16, 12, 5];
        for mode in [LabelMode::Binary, LabelMode::Soft] {
            let small = rasterize_labels(&chain(r), dims, mode).unwrap();
            let big = rasterize_labels(&chain(r + grow), dims, mode).unwrap();
            for (s, b) in small.voxels().iter().zip(big.voxels()) {
                prop_assert!(s <= b);
            }
        }
    }

    #[test]
    fn soft_labels_agree_with_binary(r in 0.3f32..3.0) {
        let dims = [16, 12, 5];
        let bin = rasterize_labels(&chain(r), dims, LabelMode::Binary).unwrap();
        let soft = rasterize_labels(&chain(r), dims, LabelMode::Soft).unwrap();
        for (b, s) in bin.voxels().iter().zip(soft.voxels()) {
            prop_assert!((0.0..=1.0).contains(s));
            if *s > 0.0 {
                prop_assert_eq!(*b, 1.0);
            }
        }
    }
}
