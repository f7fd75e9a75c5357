//! Property tests for the spec's structural invariants.

use calibgraph::datagen::{split_dataset, DatasetManifest, ManifestMeta, Split, ViewSample};
use calibgraph::geometry::{warp_labels, Homography, Intrinsics};
use calibgraph::loss::{bce_link_loss, topological_mse, LossConfig};
use calibgraph::scene::{encode_onehot, merge_classes, ClassPalette, MergeMap};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;

fn small_labels() -> impl Strategy<Value = Array2<u8>> {
    proptest::collection::vec(0u8..4, 64)
        .prop_map(|v| Array2::from_shape_vec((8, 8), v).unwrap())
}

fn well_conditioned_h() -> impl Strategy<Value = Homography> {
    (
        0.7f64..1.3,
        -0.2f64..0.2,
        -4.0f64..4.0,
        -0.2f64..0.2,
        0.7f64..1.3,
        -4.0f64..4.0,
        -1e-3f64..1e-3,
        -1e-3f64..1e-3,
    )
        .prop_map(|(a, b, c, d, e, f, g, h)| {
            Homography::from_row_major([a, b, c, d, e, f, g, h, 1.0]).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn onehot_is_simplex_vertex(labels in small_labels()) {
        let oh = encode_onehot(&labels.view(), 4);
        for y in 0..8 {
            for x in 0..8 {
                let sum: f64 = (0..4).map(|c| oh[(c, y, x)]).sum();
                prop_assert_eq!(sum, 1.0);
                for c in 0..4 {
                    let v = oh[(c, y, x)];
                    prop_assert!(v == 0.0 || v == 1.0);
                }
            }
        }
    }

    #[test]
    fn projection_merge_is_idempotent(labels in small_labels(), targets in proptest::collection::vec(0u8..4, 4)) {
        // A projection: map every id onto a chosen target id, where targets
        // themselves map to themselves (mapping ∘ mapping = mapping).
        let palette = ClassPalette::intersection_default();
        let mut mapping = BTreeMap::new();
        for id in 0u8..4 {
            mapping.insert(id, targets[targets[id as usize] as usize]);
        }
        // Force idempotence of the raw table before building the map.
        let fixed: BTreeMap<u8, u8> = mapping
            .iter()
            .map(|(&k, &v)| (k, *mapping.get(&v).unwrap_or(&v)))
            .collect();
        let is_projection = fixed.iter().all(|(_, &v)| fixed[&v] == v);
        prop_assume!(is_projection);
        let merge = MergeMap::new(fixed, &palette).unwrap();
        let once = merge_classes(&labels.view(), &merge).unwrap();
        let twice = merge_classes(&once.view(), &merge).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn warp_output_labels_closed(labels in small_labels(), h in well_conditioned_h()) {
        let out = warp_labels(&labels.view(), &h, (8, 8), 0).unwrap();
        let input: std::collections::BTreeSet<u8> = labels.iter().copied().collect();
        for &l in out.iter() {
            prop_assert!(l == 0 || input.contains(&l));
        }
    }

    #[test]
    fn homography_json_roundtrip_is_exact(h in well_conditioned_h()) {
        let s = serde_json::to_string(&h).unwrap();
        let back: Homography = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(back, h);
    }

    #[test]
    fn bce_nonnegative_and_improves_toward_labels(
        p in proptest::collection::vec(0.05f64..0.95, 8),
        y in proptest::collection::vec(0u8..2, 8),
        idx in 0usize..8,
    ) {
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        let base = bce_link_loss(&p, &y, 1e-7).unwrap();
        prop_assert!(base >= 0.0);
        // Move one probability toward its label: the loss strictly drops.
        let mut p2 = p.clone();
        p2[idx] = p2[idx] + 0.04 * (y[idx] - p2[idx]);
        let moved = bce_link_loss(&p2, &y, 1e-7).unwrap();
        prop_assert!(moved < base);
    }

    #[test]
    fn topo_mse_zero_iff_identical(labels in small_labels(), shift in 0usize..3) {
        let cfg = LossConfig { patches_per_side: 4, ..LossConfig::default() };
        let a = encode_onehot(&labels.view(), 4);
        prop_assert_eq!(topological_mse(&a.view(), &a.view(), &cfg).unwrap(), 0.0);
        // A cyclic row shift of a non-uniform grid must score positive.
        let mut rolled = labels.clone();
        if shift > 0 {
            for y in 0..8 {
                for x in 0..8 {
                    rolled[(y, x)] = labels[((y + shift) % 8, x)];
                }
            }
        }
        if rolled != labels {
            let b = encode_onehot(&rolled.view(), 4);
            prop_assert!(topological_mse(&a.view(), &b.view(), &cfg).unwrap() > 0.0);
        }
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(n in 3usize..60, frac in 0.05f64..0.9, seed in 0u64..50) {
        let samples: Vec<ViewSample> = (0..n)
            .map(|i| ViewSample {
                id: format!("v{i:06}"),
                split: Split::Unassigned,
                image_path: PathBuf::from("x.png"),
                h_gt: Homography::identity(),
                intrinsics: Intrinsics::centered(10.0, (8, 8)).unwrap(),
                extrinsics_rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                extrinsics_translation: [0.0, 0.0, 1.0],
                scene_id: "p".into(),
            })
            .collect();
        let manifest = DatasetManifest {
            meta: ManifestMeta {
                scene_id: "p".into(),
                bev_size: (8, 8),
                meters_per_pixel: 1.0,
                num_classes: 4,
                out_size: (8, 8),
                min_foreground: 0.0,
                dropped_low_foreground: 0,
                split_counts: BTreeMap::new(),
                config_snapshot: serde_json::Value::Null,
            },
            samples,
        };
        let split = split_dataset(&manifest, frac, seed).unwrap();
        let dict = split.ids_in_split(Split::Dictionary).len();
        let train = split.ids_in_split(Split::Train).len();
        let test = split.ids_in_split(Split::Test).len();
        prop_assert_eq!(dict + train + test, n);
        prop_assert!(dict >= 1);
        prop_assert!(train.abs_diff(test) <= 1);
        prop_assert!(split.samples.iter().all(|s| s.split != Split::Unassigned));
    }

    #[test]
    fn topo_mse_monotone_in_alpha(labels_a in small_labels(), labels_b in small_labels(), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
        let lo = a1.min(a2);
        let hi = a1.max(a2);
        let x = encode_onehot(&labels_a.view(), 4);
        let y: Array3<f64> = encode_onehot(&labels_b.view(), 4);
        let c_lo = LossConfig { alpha: lo, patches_per_side: 4, ..LossConfig::default() };
        let c_hi = LossConfig { alpha: hi, patches_per_side: 4, ..LossConfig::default() };
        let v_lo = topological_mse(&x.view(), &y.view(), &c_lo).unwrap();
        let v_hi = topological_mse(&x.view(), &y.view(), &c_hi).unwrap();
        prop_assert!(v_hi >= v_lo);
    }
}
