use posecast::decode::{argmax_decode, integral_backward, integral_decode, normalize, two_step_decode};
use posecast::io::{read_heatmap, write_heatmap};
use posecast::losses::{compose_loss, Decomposition, HeatmapLoss, JointLossKind, LossSpec};
use posecast::metrics::{MetricReport, PoseEvalItem};
use posecast::{GridSpec, Heatmap, HeatmapF32, JointSet};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = GridSpec> {
    (1usize..=3, 1usize..=4, 1usize..=9, 1usize..=9)
        .prop_map(|(k, d, h, w)| GridSpec::new(k, d, h, w).unwrap())
}

fn heatmap() -> impl Strategy<Value = Heatmap> {
    spec().prop_flat_map(|spec| {
        proptest::collection::vec(-12.0f64..12.0, spec.len()).prop_map(move |v| Heatmap::new(spec, v).unwrap())
    })
}

fn inside(spec: GridSpec) -> impl Strategy<Value = JointSet> {
    let [w, h, d] = [spec.width, spec.height, spec.depth].map(|n| (n - 1) as f64);
    proptest::collection::vec((0.0..=w, 0.0..=h, 0.0..=d), spec.joints)
        .prop_map(|c| JointSet::fully_masked(c.into_iter().map(|(x, y, z)| [x, y, z]).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layout_is_a_bijection(spec in spec()) {
        for i in 0..spec.cells() {
            let cell = spec.cell_coordinate(i).unwrap();
            prop_assert_eq!(spec.linear_index(cell).unwrap(), i);
        }
    }

    #[test]
    fn heatmap_file_round_trip_is_bit_exact(h in heatmap()) {
        let mut buf = Vec::new();
        write_heatmap(&h, &mut buf).unwrap();
        let back: Heatmap = read_heatmap(buf.as_slice()).unwrap();
        prop_assert_eq!(back.spec(), h.spec());
        let same = back.scores().iter().zip(h.scores()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn decoded_coordinates_stay_on_the_grid(h in heatmap()) {
        let spec = *h.spec();
        let bounds = [spec.width, spec.height, spec.depth].map(|n| (n - 1) as f64);
        let nh = normalize(&h).unwrap();
        for set in [integral_decode(&nh), two_step_decode(&nh), argmax_decode(&h)] {
            for c in set.coords() {
                for a in 0..3 {
                    prop_assert!(c[a] >= 0.0 && c[a] <= bounds[a] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sharp_peak_decodes_to_its_cell(spec in spec(), seed in any::<u64>()) {
        let peak = (seed as usize) % spec.cells();
        let scores: Vec<f64> = (0..spec.len()).map(|i| if i % spec.cells() == peak { 50.0 } else { 0.0 }).collect();
        let h = Heatmap::new(spec, scores).unwrap();
        let soft = integral_decode(&normalize(&h).unwrap());
        let hard = argmax_decode(&h);
        for (a, b) in soft.coords().iter().zip(hard.coords()) {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            prop_assert!(d < 1e-9);
        }
    }

    #[test]
    fn backward_rows_sum_to_zero(h in heatmap(), up in proptest::collection::vec(-3.0f64..3.0, 9)) {
        let upstream: Vec<[f64; 3]> = (0..h.spec().joints).map(|k| [up[3 * k], up[3 * k + 1], up[3 * k + 2]]).collect();
        let g = integral_backward(&h, &upstream).unwrap();
        for s in g.joint_sums() {
            prop_assert!(s.abs() < 1e-9);
        }
        prop_assert!(g.d_scores().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn composed_total_matches_its_terms(
        (h, gt) in heatmap().prop_flat_map(|h| { let s = *h.spec(); (Just(h), inside(s)) }),
        weight in 0.0f64..5.0,
        kind in prop_oneof![Just(JointLossKind::L1), Just(JointLossKind::L2)],
    ) {
        let mut spec = LossSpec::new(HeatmapLoss::H1GaussianMse, kind);
        spec.joint_weight = weight;
        let v = compose_loss(&spec, &h, &gt).unwrap();
        prop_assert!((v.total - (v.heatmap_term + weight * v.joint_term)).abs() <= 1e-12 * v.total.abs().max(1.0));
        prop_assert!(v.heatmap_term >= 0.0 && v.joint_term >= 0.0);
    }

    #[test]
    fn joint_only_decompositions_agree(
        (h, gt) in heatmap().prop_flat_map(|h| { let s = *h.spec(); (Just(h), inside(s)) }),
    ) {
        let direct = LossSpec::joint_only(JointLossKind::L1);
        let two = direct.clone().with_decomposition(Decomposition::TwoStep);
        let a = compose_loss(&direct, &h, &gt).unwrap();
        let b = compose_loss(&two, &h, &gt).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-9);
    }

    #[test]
    fn report_fractions_are_bounded(
        pairs in proptest::collection::vec(proptest::collection::vec(-6.0f64..6.0, 24), 1..6),
    ) {
        let items: Vec<PoseEvalItem> = pairs
            .iter()
            .map(|v| {
                let pose = |o: usize| (0..4).map(|k| [v[o + 3 * k], v[o + 3 * k + 1], v[o + 3 * k + 2]]).collect();
                PoseEvalItem::with_default_kappa(
                    JointSet::fully_masked(pose(0)).unwrap(),
                    JointSet::fully_masked(pose(12)).unwrap(),
                    2.0,
                    4.0,
                )
                .unwrap()
            })
            .collect();
        let r = MetricReport::compute("integral", &items, 1.0).unwrap();
        prop_assert!(r.validate().is_ok());
        for f in [r.auc, r.ap, r.pckh_0_5, r.pckh_0_1] {
            prop_assert!((0.0..=1.0).contains(&f));
        }
        prop_assert!(r.pa_mpjpe.unwrap() <= r.mpjpe.unwrap() + 1e-9);
    }
}

#[test]
fn single_precision_path_agrees_with_double() {
    let spec = GridSpec::new(2, 3, 5, 7).unwrap();
    let scores: Vec<f64> = (0..spec.len()).map(|i| ((i * 37 % 23) as f64 - 11.0) / 3.0).collect();
    let h = Heatmap::new(spec, scores.clone()).unwrap();
    let hf = HeatmapF32::new(spec, scores.iter().map(|&s| s as f32).collect()).unwrap();
    let (a, b) = (integral_decode(&normalize(&h).unwrap()), integral_decode(&normalize(&hf).unwrap()));
    for (p, q) in a.coords().iter().zip(b.coords()) {
        for i in 0..3 {
            assert!((p[i] - q[i] as f64).abs() < 1e-4);
        }
    }
}
