//! Analytic gradient and Hessian of a translation graph.
//!
//! Range term on node i with `h = (t - a) / |t - a|`, `e = d - |t - a|`,
//! `y = rho'(e)`, `l = rho''(e)`:
//!   gradient `-w y h`, Hessian `w (l h h^T - y (I - h h^T) / |t - a|)`.
//! Smoothness term between consecutive nodes with `D = t_k - t_{k-1}`:
//!   gradient `w D / sqrt(1 + |D|^2 / xi^2)` on `t_k` (negated on `t_{k-1}`),
//!   Hessian `[X -X; -X X]`. When `t_{k-1}` is a fixed node only the `t_k`
//!   block remains; that is the boundary term tying the window to the frozen
//!   previous estimate.

use super::{HessianApprox, HessianBuilder, HessianMode, SolverError};
use crate::factors::FactorError;
use crate::graph::{Factor, FactorGraph, Slot, StateVector};
use nalgebra::{DVector, Matrix3, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub cost: f64,
    pub gradient: DVector<f64>,
    pub hessian: HessianApprox<3>,
    pub skipped: usize,
}

fn add_grad(g: &mut DVector<f64>, i: usize, v: &Vector3<f64>) {
    let mut view = g.fixed_rows_mut::<3>(3 * i);
    view += v;
}

/// Adds the symmetric pair pattern `[H -H; -H H]` for a binary edge.
fn add_pair(b: &mut HessianBuilder<3>, sa: Option<usize>, sb: Option<usize>, h: &Matrix3<f64>) {
    if let Some(i) = sa {
        b.add(i, i, h);
    }
    if let Some(j) = sb {
        b.add(j, j, h);
    }
    if let (Some(i), Some(j)) = (sa, sb) {
        b.add(i, j, &(-h));
    }
}

/// Cost, gradient and curvature of a translation graph at `x`.
pub fn linearize(
    g: &FactorGraph<Vector3<f64>>,
    x: &StateVector<Vector3<f64>>,
    mode: HessianMode,
) -> Result<Linearization, SolverError> {
    g.check_state(x)?;
    let n = x.len();
    let mut grad = DVector::zeros(3 * n);
    let mut b = HessianBuilder::<3>::new(n, g.is_chain());
    let mut cost = 0.0;
    let mut skipped = 0;
    let free = |s: Slot<'_, Vector3<f64>>| match s {
        Slot::Free(k) => (Some(k), x.blocks()[k]),
        Slot::Fixed(v) => (None, *v),
    };
    for edge in g.edges() {
        let (a, bslot) = g.edge_slots(edge)?;
        let (ia, ta) = free(a);
        let second = bslot.map(free);
        match &edge.factor {
            Factor::Range(f) => {
                let (c, gr, h) = match f.derivatives(&ta) {
                    Ok(v) => v,
                    Err(FactorError::SingularGeometry { .. }) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                cost += c;
                if let Some(i) = ia {
                    add_grad(&mut grad, i, &gr);
                    let h = match mode {
                        HessianMode::Exact => h,
                        HessianMode::GaussNewton => f.gauss_newton_hessian(&ta)?,
                    };
                    b.add(i, i, &h);
                }
            }
            Factor::Smoothness(f) => {
                let (ib, tb) = second.expect("binary edge");
                let (c, gr, xblk) = f.derivatives(&ta, &tb);
                cost += c;
                if let Some(i) = ia {
                    add_grad(&mut grad, i, &gr);
                }
                if let Some(j) = ib {
                    add_grad(&mut grad, j, &(-gr));
                }
                add_pair(&mut b, ia, ib, &xblk);
            }
            Factor::RelTranslation(f) => {
                let (ib, tb) = second.expect("binary edge");
                let (c, gr, h) = f.derivatives(&ta, &tb);
                cost += c;
                if let Some(i) = ia {
                    add_grad(&mut grad, i, &gr);
                }
                if let Some(j) = ib {
                    add_grad(&mut grad, j, &(-gr));
                }
                let h = match mode {
                    HessianMode::Exact => h,
                    HessianMode::GaussNewton => f.gauss_newton_block(&ta, &tb),
                };
                add_pair(&mut b, ia, ib, &h);
            }
            Factor::RelRotation(_) | Factor::RelTransform(_) | Factor::PoseSmoothness(_) => {
                unreachable!("graph rejects rotation factors on translation nodes")
            }
        }
    }
    Ok(Linearization {
        cost,
        gradient: grad,
        hessian: b.finish(),
        skipped,
    })
}

/// Gradient of the total cost with respect to the free translations.
pub fn assemble_gradient(
    g: &FactorGraph<Vector3<f64>>,
    x: &StateVector<Vector3<f64>>,
) -> Result<DVector<f64>, SolverError> {
    Ok(linearize(g, x, HessianMode::Exact)?.gradient)
}

/// Analytic Hessian (or its Gauss-Newton part) over the free translations.
pub fn assemble_hessian(
    g: &FactorGraph<Vector3<f64>>,
    x: &StateVector<Vector3<f64>>,
    mode: HessianMode,
) -> Result<HessianApprox<3>, SolverError> {
    Ok(linearize(g, x, mode)?.hessian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{RangeFactor, RelTranslationFactor, RobustLoss, SmoothnessFactor};
    use crate::graph::EdgeNodes;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn window(rng: &mut ChaCha8Rng, n: usize) -> FactorGraph<Vector3<f64>> {
        let loss = RobustLoss::new(rng.random_range(0.3..2.0)).unwrap();
        let mut g = FactorGraph::new();
        g.add_fixed_node(0, rv(rng, 2.0)).unwrap();
        for k in 1..=n {
            g.add_node(k, rv(rng, 2.0)).unwrap();
            let rf = RangeFactor::new(
                rng.random_range(0.5..5.0),
                rv(rng, 4.0),
                rng.random_range(0.1..1.0),
                loss,
            )
            .unwrap();
            g.add_factor(EdgeNodes::Unary(k), Factor::Range(rf))
                .unwrap();
            let sf = SmoothnessFactor::new(rng.random_range(0.01..0.1), 1.0, 1.0, loss).unwrap();
            g.add_factor(EdgeNodes::Binary(k, k - 1), Factor::Smoothness(sf))
                .unwrap();
        }
        g
    }

    fn fd_gradient(g: &FactorGraph<Vector3<f64>>, x: &StateVector<Vector3<f64>>) -> DVector<f64> {
        let v = x.to_dvector();
        DVector::from_fn(v.len(), |i, _| {
            let h = 1e-6 * (1.0 + v[i].abs());
            let mut p = v.clone();
            let mut m = v.clone();
            p[i] += h;
            m[i] -= h;
            let fp = g.total_cost(&StateVector::from_dvector(&p)).unwrap();
            let fm = g.total_cost(&StateVector::from_dvector(&m)).unwrap();
            (fp - fm) / (2.0 * h)
        })
    }

    #[test]
    fn zero_residual_gradient_vanishes() {
        let loss = RobustLoss::default();
        let a = Vector3::new(3.0, 0.0, 0.0);
        let t = Vector3::new(0.0, 1.0, 0.0);
        let mut g = FactorGraph::new();
        g.add_fixed_node(0, t).unwrap();
        for k in 1..4 {
            g.add_node(k, t).unwrap();
            let rf = RangeFactor::new((t - a).norm(), a, 1.0, loss).unwrap();
            g.add_factor(EdgeNodes::Unary(k), Factor::Range(rf))
                .unwrap();
            let sf = SmoothnessFactor::new(0.03, 1.0, 1.0, loss).unwrap();
            g.add_factor(EdgeNodes::Binary(k, k - 1), Factor::Smoothness(sf))
                .unwrap();
        }
        let grad = assemble_gradient(&g, &g.initial_state()).unwrap();
        assert!(grad.norm() < 1e-15);
    }

    #[test]
    fn single_range_gradient() {
        let loss = RobustLoss::new(0.7).unwrap();
        let mut g = FactorGraph::new();
        let t = Vector3::new(1.0, 2.0, 0.0);
        let a = Vector3::new(-1.0, 0.5, 1.0);
        for k in 0..3 {
            g.add_node(k, t * k as f64).unwrap();
        }
        let rf = RangeFactor::new(1.0, a, 0.6, loss).unwrap();
        g.add_factor(EdgeNodes::Unary(1), Factor::Range(rf))
            .unwrap();
        let grad = assemble_gradient(&g, &g.initial_state()).unwrap();
        let h = (t - a) / (t - a).norm();
        let y = crate::factors::pseudo_huber(1.0 - (t - a).norm(), 0.7).1;
        let expected = -0.6 * y * h;
        assert!((grad.fixed_rows::<3>(3) - expected).norm() < 1e-15);
        assert_eq!(grad.fixed_rows::<3>(0).norm(), 0.0);
        assert_eq!(grad.fixed_rows::<3>(6).norm(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..100 {
            let g = window(&mut rng, 10);
            let x = g.initial_state();
            let an = assemble_gradient(&g, &x).unwrap();
            let fd = fd_gradient(&g, &x);
            assert!(
                (&an - &fd).norm() <= 1e-6 * an.norm().max(1e-8),
                "{} vs {}",
                an,
                fd
            );
        }
    }

    #[test]
    fn hessian_matches_finite_differences_on_toys() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let g = window(&mut rng, 3);
            let x = g.initial_state();
            let hess = assemble_hessian(&g, &x, HessianMode::Exact)
                .unwrap()
                .to_dense();
            let v = x.to_dvector();
            for i in 0..v.len() {
                let h = 1e-6;
                let mut p = v.clone();
                let mut m = v.clone();
                p[i] += h;
                m[i] -= h;
                let gp = assemble_gradient(&g, &StateVector::from_dvector(&p)).unwrap();
                let gm = assemble_gradient(&g, &StateVector::from_dvector(&m)).unwrap();
                let col = (gp - gm) / (2.0 * h);
                for r in 0..v.len() {
                    assert!(
                        (col[r] - hess[(r, i)]).abs() < 1e-5,
                        "({r},{i}) {} vs {}",
                        col[r],
                        hess[(r, i)]
                    );
                }
            }
            assert!((&hess - hess.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn hessian_matches_second_differences_of_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = window(&mut rng, 3);
        let x = g.initial_state();
        let hess = assemble_hessian(&g, &x, HessianMode::Exact)
            .unwrap()
            .to_dense();
        let v = x.to_dvector();
        let f = |v: &DVector<f64>| g.total_cost(&StateVector::from_dvector(v)).unwrap();
        let h = 1e-4;
        for i in 0..v.len() {
            for j in 0..v.len() {
                let mut pp = v.clone();
                let mut pm = v.clone();
                let mut mp = v.clone();
                let mut mm = v.clone();
                pp[i] += h;
                pp[j] += h;
                pm[i] += h;
                pm[j] -= h;
                mp[i] -= h;
                mp[j] += h;
                mm[i] -= h;
                mm[j] -= h;
                let fd = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
                assert!(
                    (fd - hess[(i, j)]).abs() < 1e-5,
                    "({i},{j}) {fd} vs {}",
                    hess[(i, j)]
                );
            }
        }
    }

    #[test]
    fn window_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let g = window(&mut rng, 10);
        let hess = assemble_hessian(&g, &g.initial_state(), HessianMode::Exact).unwrap();
        assert!(matches!(hess, HessianApprox::Tridiagonal(_)));
        assert_eq!(hess.structural_nonzeros(), 252);
        let dense = hess.to_dense();
        for r in 0..30usize {
            for c in 0..30usize {
                if (r / 3).abs_diff(c / 3) > 1 {
                    assert_eq!(dense[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_factor_set_gives_zero() {
        let mut g = FactorGraph::<Vector3<f64>>::new();
        for k in 0..3 {
            g.add_node(k, Vector3::repeat(k as f64)).unwrap();
        }
        let h = assemble_hessian(&g, &g.initial_state(), HessianMode::Exact).unwrap();
        assert_eq!(h.to_dense(), DMatrix::zeros(9, 9));
    }

    #[test]
    fn non_chain_uses_dense_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut g = window(&mut rng, 4);
        let w = Matrix3::from_diagonal(&Vector3::new(1.0, 0.5, 0.2));
        let f =
            RelTranslationFactor::new(rv(&mut rng, 1.0), w, RobustLoss::new(0.5).unwrap()).unwrap();
        g.add_factor(EdgeNodes::Binary(1, 4), Factor::RelTranslation(f))
            .unwrap();
        let x = g.initial_state();
        let hess = assemble_hessian(&g, &x, HessianMode::Exact).unwrap();
        assert!(matches!(hess, HessianApprox::Dense(_)));
        let an = assemble_gradient(&g, &x).unwrap();
        let fd = fd_gradient(&g, &x);
        assert!((&an - &fd).norm() <= 1e-6 * an.norm());
        let step = super::super::sparse_solve(&hess, 10.0, &an).unwrap();
        let resid = hess.mul_vec(&step) + &step * 10.0 - &an;
        assert!(resid.norm() < 1e-10);
    }

    #[test]
    fn gauss_newton_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..20 {
            let g = window(&mut rng, 6);
            let h = assemble_hessian(&g, &g.initial_state(), HessianMode::GaussNewton)
                .unwrap()
                .to_dense();
            let eig = h.symmetric_eigenvalues();
            assert!(eig.iter().all(|&l| l > -1e-12));
        }
    }
}
