//! Randomised invariants.

use proptest::prelude::*;
use reflow_core::autodiff::Tensor;
use reflow_core::data::{read_dataset, split_sizes, write_dataset, Dataset, PointSet, Split};
use reflow_core::flow::interpolate;
use reflow_core::frontend::{length_regulate, DurationPlan};
use reflow_core::metrics::{frechet_distance, FeatureSet};
use reflow_core::ode::{solve, SolverSpec};
use reflow_core::Result;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_hits_endpoints(x0 in matrix(3, 2), x1 in matrix(3, 2)) {
        prop_assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1.clone());
        let mid = interpolate(&x0, &x1, 0.5).unwrap();
        for ((m, a), b) in mid.data().iter().zip(x0.data()).zip(x1.data()) {
            prop_assert!((m - 0.5 * (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in matrix(12, 3), b in matrix(9, 3)) {
        let fa = FeatureSet::new(a, "a").unwrap();
        let fb = FeatureSet::new(b, "b").unwrap();
        let ab = frechet_distance(&fa, &fb).unwrap();
        let ba = frechet_distance(&fb, &fa).unwrap();
        prop_assert!(ab >= -1e-10);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()));
        prop_assert!(frechet_distance(&fa, &fa).unwrap().abs() < 1e-9);
    }

    #[test]
    fn frechet_of_a_shift_is_its_squared_norm(a in matrix(10, 2), dx in -2.0f64..2.0, dy in -2.0f64..2.0) {
        let shifted: Vec<f64> = a.data().chunks(2).flat_map(|r| [r[0] + dx, r[1] + dy]).collect();
        let b = Tensor::new(vec![10, 2], shifted).unwrap();
        let fd = frechet_distance(&FeatureSet::new(a, "a").unwrap(), &FeatureSet::new(b, "b").unwrap()).unwrap();
        prop_assert!((fd - (dx * dx + dy * dy)).abs() < 1e-7);
    }

    #[test]
    fn length_regulation_repeats_rows(durs in prop::collection::vec(1u32..6, 1..8), c in 1usize..4) {
        let l = durs.len();
        let hidden = Tensor::new(vec![l, c], (0..l * c).map(|i| i as f64).collect()).unwrap();
        let plan = DurationPlan::new(durs.clone()).unwrap();
        let grid = length_regulate(&hidden, &plan).unwrap();
        prop_assert_eq!(grid.frames(), durs.iter().sum::<u32>() as usize);
        let index = plan.frame_index();
        for (f, &k) in index.iter().enumerate() {
            prop_assert_eq!(&grid.features().data()[f * c..(f + 1) * c], &hidden.data()[k * c..(k + 1) * c]);
        }
    }

    #[test]
    fn log_duration_rounding_is_at_least_one(logs in prop::collection::vec(-20.0f64..4.0, 1..10)) {
        let plan = DurationPlan::from_log_durations(&logs).unwrap();
        for (&d, &l) in plan.durations().iter().zip(&logs) {
            prop_assert!(d >= 1);
            prop_assert!((d as f64 - l.exp().max(1.0)).abs() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn split_sizes_partition(n in 0usize..5000) {
        let (a, b, c) = split_sizes(n);
        prop_assert_eq!(a + b + c, n);
        if n >= 3 {
            prop_assert!(b >= 1 && c >= 1);
        }
    }

    #[test]
    fn euler_nfe_equals_steps(steps in 1usize..200) {
        let field = |z: &Tensor, _t: f64| -> Result<Tensor> { Ok(z.scale(-1.0)) };
        let r = solve(&field, &Tensor::ones(&[2]), &SolverSpec::euler(steps)).unwrap();
        prop_assert_eq!(r.nfe, steps);
        let exact = (1.0 - 1.0 / steps as f64).powi(steps as i32);
        prop_assert!((r.z1.data()[0] - exact).abs() < 1e-12);
    }

    #[test]
    fn rk45_tracks_linear_growth(a in -2.0f64..2.0, z0 in -3.0f64..3.0) {
        let field = move |z: &Tensor, _t: f64| -> Result<Tensor> { Ok(z.scale(a)) };
        let r = solve(&field, &Tensor::new(vec![1], vec![z0]).unwrap(), &SolverSpec::rk45(1e-8, 1e-10)).unwrap();
        prop_assert!((r.z1.data()[0] - z0 * a.exp()).abs() < 1e-6);
        prop_assert_eq!(r.nfe, 1 + 6 * (r.accepted_steps + r.rejected_steps));
    }

    #[test]
    fn points_file_round_trip(raw in prop::collection::vec(-1e3f32..1e3, 2..40), dim in 1usize..3) {
        let n = raw.len() / dim;
        prop_assume!(n >= 1);
        let data: Vec<f64> = raw[..n * dim].iter().map(|&v| v as f64).collect();
        let splits: Vec<Split> = (0..n).map(|i| [Split::Train, Split::Val, Split::Test][i % 3]).collect();
        let set = PointSet::new(Tensor::new(vec![n, dim], data).unwrap(), splits).unwrap();
        let bytes = write_dataset(&Dataset::Points(set.clone())).unwrap();
        match read_dataset(&bytes).unwrap() {
            Dataset::Points(back) => prop_assert_eq!(back, set),
            other => prop_assert!(false, "read back {}", other.kind_name()),
        }
        prop_assert!(read_dataset(&bytes[..bytes.len() - 1]).is_err());
    }
}
