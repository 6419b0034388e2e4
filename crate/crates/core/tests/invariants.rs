use hymik_core::constraints::{
    build_gc_constraints, build_sc_constraints, krige_correct, max_violation, reduce_to_full_rank, split_constraints,
    stacked_rank, SplitPolicy,
};
use hymik_core::inference::generalized_log_det;
use hymik_core::sparse::{cholesky, SparseMatrix};
use hymik_core::structures::{build_icar_structure, build_interaction_structure, build_rw_structure, Graph};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dense_random(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| vals[(i * cols + j) % vals.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_is_a_projector_pair(n_t in 3usize..7, n_s in 2usize..7, sc in any::<bool>(), temporal in any::<bool>()) {
        let raw = if sc { build_sc_constraints(n_t, n_s) } else { build_gc_constraints(n_t, n_s) }.unwrap();
        let full = reduce_to_full_rank(&raw).unwrap();
        let policy = if temporal { SplitPolicy::Temporal } else { SplitPolicy::Spatial };
        let s = split_constraints(&full, n_t, n_s, policy).unwrap();
        prop_assert!(s.z.matmul(&s.z).add_scaled(1.0, &s.z, -1.0).max_abs() < 1e-12);
        prop_assert!(s.a1.matmul(&s.z).max_abs() < 1e-12);
        prop_assert_eq!(s.k1() + s.k2(), full.n_rows());
        prop_assert_eq!(stacked_rank(&[&s.a1, &s.a2, full.matrix()]), full.n_rows());
    }

    #[test]
    fn kriged_vector_satisfies_constraints(
        n_t in 3usize..6,
        rows in 2usize..5,
        cols in 2usize..5,
        shift in 0.01f64..2.0,
        vals in prop::collection::vec(-3.0f64..3.0, 7..40),
    ) {
        let rd = build_interaction_structure(
            &build_rw_structure(n_t, 1).unwrap(),
            &build_icar_structure(&Graph::grid(rows, cols)).unwrap(),
        );
        let q = rd.matrix.add_diagonal(shift);
        let a = reduce_to_full_rank(&build_gc_constraints(n_t, rows * cols).unwrap()).unwrap();
        let x: Vec<f64> = (0..q.nrows()).map(|i| vals[i % vals.len()] * (1.0 + i as f64).sqrt()).collect();
        let f = cholesky(&q).unwrap();
        let y = krige_correct(&x, a.matrix(), &f).unwrap();
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_violation(a.matrix(), &y) < 1e-10 * scale);
        // correcting twice changes nothing
        let z = krige_correct(&y, a.matrix(), &f).unwrap();
        prop_assert!(y.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-10 * scale));
    }

    #[test]
    fn cholesky_solves(n in 2usize..25, shift in 0.05f64..3.0, b in prop::collection::vec(-5.0f64..5.0, 25)) {
        let q = build_rw_structure(n.max(3), 2).unwrap().matrix.add_diagonal(shift);
        let f = cholesky(&q).unwrap();
        let rhs = &b[..q.nrows()];
        let x = f.solve(rhs).unwrap();
        let r = q.mul_vec(&x);
        prop_assert!(r.iter().zip(rhs).all(|(a, b)| (a - b).abs() < 1e-9 * (1.0 + b.abs())));
        let dense = q.to_dense().cholesky().unwrap();
        let ld: f64 = dense.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        prop_assert!((f.log_det() - ld).abs() < 1e-9 * (1.0 + ld.abs()));
    }

    #[test]
    fn sparse_products_match_dense(
        m in 1usize..6,
        k in 1usize..6,
        n in 1usize..6,
        vals in prop::collection::vec(-2.0f64..2.0, 1..30),
    ) {
        let mask = |i: usize, j: usize| (i * 7 + j * 3) % 4 != 0;
        let a = dense_random(m, k, &vals).map_with_location(|i, j, v| if mask(i, j) { v } else { 0.0 });
        let b = dense_random(k, n, &vals[vals.len() / 2..].iter().chain(&vals).copied().collect::<Vec<_>>());
        let prod = SparseMatrix::from_dense(&a).matmul(&SparseMatrix::from_dense(&b)).to_dense();
        prop_assert!((prod - &a * &b).amax() < 1e-12);
    }

    #[test]
    fn log_pdet_is_homogeneous(n in 3usize..12, order in 1usize..3, c in 0.1f64..20.0) {
        let r = build_rw_structure(n, order).unwrap();
        let a = if order == 1 {
            hymik_core::constraints::ConstraintSet::sum_to_zero(n)
        } else {
            hymik_core::constraints::ConstraintSet::sum_and_trend(n)
        };
        let base = generalized_log_det(&r.matrix, a.matrix()).unwrap();
        let scaled = generalized_log_det(&r.matrix.scale(c), a.matrix()).unwrap();
        let expect = (n - r.rank_deficiency) as f64 * c.ln();
        prop_assert!((scaled - base - expect).abs() < 1e-9);
    }
}
