//! The active-set solver against exhaustive enumeration of active sets.

use dmpc_core::qp::{kkt_residuals, solve_qp, QpError, QpProblem, QpStatus, SolverSettings};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Minimizes over every subset of rows treated as equalities and keeps the
/// best primal-feasible candidate. `None` when no candidate is feasible.
fn enumerate(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = p.dim();
    let m = p.rows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        rhs.rows_mut(0, n).copy_from(&(-&p.linear));
        for (j, &r) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = p.a_in[(r, c)];
                kkt[(c, n + j)] = p.a_in[(r, c)];
            }
            rhs[n + j] = p.b_in[r];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let u = sol.rows(0, n).into_owned();
        let slack = &p.b_in - &p.a_in * &u;
        if slack.iter().any(|s| *s < -1e-9) {
            continue;
        }
        let obj = p.objective(&u);
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((u, obj));
        }
    }
    best
}

fn problem() -> impl Strategy<Value = QpProblem> {
    (1usize..=3, 0usize..=5).prop_flat_map(|(n, m)| {
        (
            prop::collection::vec(-1.0f64..1.0, n * n),
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(-1.0f64..1.0, m * n),
            prop::collection::vec(-1.0f64..1.0, m),
        )
            .prop_map(move |(g, f, a, b)| {
                let g = DMatrix::from_vec(n, n, g);
                let h = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
                let h = (&h + h.transpose()) * 0.5;
                QpProblem::new(h, DVector::from_vec(f), DMatrix::from_vec(m, n, a), DVector::from_vec(b))
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn matches_exhaustive_enumeration(p in problem()) {
        let sol = solve_qp(&p, &SolverSettings::default(), None).unwrap();
        match enumerate(&p) {
            Some((_, obj)) => {
                prop_assert_eq!(sol.status, QpStatus::Optimal);
                prop_assert!((sol.objective - obj).abs() <= 1e-6 * obj.abs().max(1.0),
                    "solver {} oracle {}", sol.objective, obj);
                let kkt = kkt_residuals(&p, &sol.u, &sol.lambda);
                prop_assert!(kkt.max() < 1e-8, "{:?}", kkt);
            }
            None => prop_assert_eq!(sol.status, QpStatus::Infeasible),
        }
    }

    #[test]
    fn warm_start_does_not_change_the_optimum(p in problem(), prefer in prop::collection::vec(0usize..5, 0..4)) {
        let cold = solve_qp(&p, &SolverSettings::default(), None).unwrap();
        let warm = solve_qp(&p, &SolverSettings::default(), Some(&prefer)).unwrap();
        prop_assert_eq!(cold.status, warm.status);
        if cold.is_optimal() {
            prop_assert!((cold.u - warm.u).amax() < 1e-8);
        }
    }
}

#[test]
fn rejects_indefinite_and_singular_hessians() {
    let f = DVector::zeros(2);
    let none = || (DMatrix::zeros(0, 2), DVector::zeros(0));
    let (a, b) = none();
    let indefinite = QpProblem::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), f.clone(), a, b);
    assert_eq!(solve_qp(&indefinite, &SolverSettings::default(), None).unwrap_err(), QpError::NotPositiveDefinite);
    let (a, b) = none();
    let singular = QpProblem::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), f, a, b);
    assert_eq!(solve_qp(&singular, &SolverSettings::default(), None).unwrap_err(), QpError::NotPositiveDefinite);
}
