//! Property tests for structural invariants: layer round trips, metric
//! axioms, trailing minors of near-identity Jacobians, and seminorm basics.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use flowlab::decompose::trailing_minors_nonzero;
use flowlab::field::ScalarField;
use flowlab::flows::{AcfLayer, AffineLayer, Inn, Layer, PermutationLayer};
use flowlab::metrics::{dudley, mmd_grid, tv_ipm, w1, CompactBox, Kernel};
use flowlab::sobolev::{seminorm_diff, Aggregate, SeminormSpec};
use flowlab::transport::{Grid, GridMeasure};

fn finite_point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, dim)
}

fn measure_pair(res: usize) -> impl Strategy<Value = (GridMeasure, GridMeasure)> {
    let cells = res * res;
    (
        prop::collection::vec(0.01..1.0f64, cells),
        prop::collection::vec(0.01..1.0f64, cells),
    )
        .prop_map(move |(wa, wb)| {
            let grid = Grid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![res, res]).unwrap();
            (
                GridMeasure::new(grid.clone(), wa).unwrap(),
                GridMeasure::new(grid, wb).unwrap(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn acf_round_trip(x in finite_point(3), a in -0.9..0.9f64, b in -2.0..2.0f64) {
        let layer = AcfLayer::new(
            3,
            1,
            vec![
                ScalarField::from_fn(1, move |c| a * c[0].tanh()),
                ScalarField::from_fn(1, move |c| -a * c[0].sin()),
            ],
            vec![
                ScalarField::constant(1, b),
                ScalarField::from_fn(1, move |c| b * c[0]),
            ],
        ).unwrap();
        let inn = Inn::new(3, vec![Layer::Acf(layer)]).unwrap();
        let back = inn.inverse(&inn.forward(&x).unwrap()).unwrap();
        for (u, v) in x.iter().zip(&back) {
            prop_assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn affine_round_trip(x in finite_point(2), m in -2.0..2.0f64, s in 0.1..2.0f64) {
        // Rows kept well away from singular: diag dominated by s.
        let a = DMatrix::from_row_slice(2, 2, &[1.0 + s, m * 0.1, m * 0.1, 1.0 + s]);
        let layer = AffineLayer::new(a, DVector::from_column_slice(&[m, -m])).unwrap();
        let inn = Inn::new(2, vec![Layer::Affine(layer)]).unwrap();
        let back = inn.inverse(&inn.forward(&x).unwrap()).unwrap();
        for (u, v) in x.iter().zip(&back) {
            prop_assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn permutation_preserves_multiset(x in finite_point(4)) {
        let layer = PermutationLayer::new(vec![2, 3, 1, 0]).unwrap();
        let inn = Inn::new(4, vec![Layer::Permutation(layer)]).unwrap();
        let y = inn.forward(&x).unwrap();
        let mut xs = x.clone();
        let mut ys = y.clone();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        prop_assert_eq!(xs, ys);
        let back = inn.inverse(&y).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn near_identity_has_nonzero_trailing_minors(
        entries in prop::collection::vec(-1.0..1.0f64, 9),
        scale in 0.0..0.9f64,
    ) {
        let e = DMatrix::from_row_slice(3, 3, &entries);
        let norm = e.norm();
        let j = if norm > 0.0 {
            DMatrix::identity(3, 3) + e * (scale / norm)
        } else {
            DMatrix::identity(3, 3)
        };
        // Frobenius norm bounds the operator norm, so J - I is a strict
        // contraction and every trailing minor must be nonzero.
        prop_assert!(trailing_minors_nonzero(&j));
    }

    #[test]
    fn tv_is_a_symmetric_bounded_metric((mu, nu) in measure_pair(4)) {
        let ab = tv_ipm(&mu, &nu).unwrap();
        let ba = tv_ipm(&nu, &mu).unwrap();
        prop_assert!((ab.ipm - ba.ipm).abs() <= 1e-12);
        prop_assert!(ab.ipm >= -1e-12 && ab.ipm <= 2.0 + 1e-12);
        prop_assert!(ab.sup_a >= -1e-12 && ab.sup_a <= 1.0 + 1e-12);
        prop_assert!((ab.ipm - 2.0 * ab.sup_a).abs() <= 1e-9);
        let self_dist = tv_ipm(&mu, &mu).unwrap().ipm;
        prop_assert!(self_dist.abs() <= 1e-12);
    }

    #[test]
    fn w1_symmetry_and_identity((mu, nu) in measure_pair(3)) {
        let ab = w1(&mu, &nu).unwrap();
        let ba = w1(&nu, &mu).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(ab >= -1e-12);
        prop_assert!(w1(&mu, &mu).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn ipm_ordering_chain((mu, nu) in measure_pair(4)) {
        // Smaller test classes give smaller distances.
        let tv = tv_ipm(&mu, &nu).unwrap().ipm;
        let dud = dudley(&mu, &nu).unwrap();
        let m = mmd_grid(&mu, &nu, &Kernel::Gaussian { gamma: 1.0 }).unwrap();
        prop_assert!(dud <= tv + 1e-9);
        prop_assert!(m <= tv + 1e-9);
        prop_assert!(m >= -1e-12 && dud >= -1e-12);
    }

    #[test]
    fn w1_triangle_inequality(
        (mu, nu) in measure_pair(3),
        w in prop::collection::vec(0.01..1.0f64, 9),
    ) {
        let grid = Grid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![3, 3]).unwrap();
        let rho = GridMeasure::new(grid, w).unwrap();
        let ab = w1(&mu, &nu).unwrap();
        let ac = w1(&mu, &rho).unwrap();
        let cb = w1(&rho, &nu).unwrap();
        prop_assert!(ab <= ac + cb + 1e-9);
    }

    #[test]
    fn seminorm_diff_axioms(a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let k = CompactBox::new(vec![(-1.0, 1.0)]).unwrap();
        let spec = SeminormSpec::new(k, 1, Aggregate::PInf, 16).unwrap();
        let f = move |x: &[f64]| Ok(vec![a * x[0] + b]);
        let zero = seminorm_diff(&f, &f, &spec).unwrap();
        prop_assert!(zero.abs() <= 1e-9);
        let g = |x: &[f64]| Ok(vec![x[0]]);
        let d = seminorm_diff(&f, &g, &spec).unwrap();
        prop_assert!(d >= -1e-12);
        // Linear difference (a-1)x + b on [-1,1]: sup of the value is
        // |a-1| + |b|, sup of the derivative is |a-1|, and the two add up.
        let expect = ((a - 1.0).abs() + b.abs()) + (a - 1.0).abs();
        prop_assert!((d - expect).abs() <= 1e-6);
    }
}
