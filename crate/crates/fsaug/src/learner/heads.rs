//! Closed-form few-shot heads.
//!
//! Prototype: per-class label-weighted mean of support embeddings, queries
//! scored by negative squared Euclidean distance.
//!
//! Ridge: kernel-form solve W = Xᵀ (X Xᵀ + λI)⁻¹ Y (support rows are far
//! fewer than the embedding dimension), queries scored by alpha (e W) + beta
//! with a learned scale and bias. The Gram matrix is symmetric positive
//! definite by construction, so the solve is a Cholesky factorization.

use super::{HeadKind, Mat, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum HeadState<T> {
    Prototype {
        /// N x D class prototypes.
        protos: Mat<T>,
        /// Total label mass per class.
        mass: Vec<T>,
    },
    Ridge {
        /// D x N readout weights.
        w: Mat<T>,
        /// n_s x N solve result Z = (X Xᵀ + λI)⁻¹ Y.
        z: Mat<T>,
        /// Lower Cholesky factor of the Gram matrix.
        chol: Mat<T>,
    },
}

/// Fit a head on support embeddings (n_s x D) and labels (n_s x N).
pub fn head_fit<T: Real>(
    kind: HeadKind,
    support: &Mat<T>,
    labels: &Mat<T>,
    ridge_lambda: f64,
) -> Result<HeadState<T>> {
    match kind {
        HeadKind::Prototype => {
            let ways = labels.cols;
            let dim = support.cols;
            let mut protos = Mat::zeros(ways, dim);
            let mut mass = vec![T::zero(); ways];
            for i in 0..support.rows {
                let erow = support.row(i);
                for c in 0..ways {
                    let y = labels.at(i, c);
                    if y == T::zero() {
                        continue;
                    }
                    mass[c] += y;
                    let prow = &mut protos.data[c * dim..(c + 1) * dim];
                    for (p, &e) in prow.iter_mut().zip(erow) {
                        *p += y * e;
                    }
                }
            }
            for (c, &m) in mass.iter().enumerate() {
                if m <= T::zero() {
                    return Err(Error::DegenerateClass { slot: c });
                }
                let inv = T::one() / m;
                for p in &mut protos.data[c * dim..(c + 1) * dim] {
                    *p *= inv;
                }
            }
            Ok(HeadState::Prototype { protos, mass })
        }
        HeadKind::Ridge => {
            let n = support.rows;
            let mut gram = support.matmul_nt(support);
            let lambda = T::from_f64(ridge_lambda);
            for i in 0..n {
                *gram.at_mut(i, i) += lambda;
            }
            let chol = cholesky(&gram)?;
            let z = chol_solve(&chol, labels);
            let w = support.matmul_tn(&z);
            Ok(HeadState::Ridge { w, z, chol })
        }
    }
}

/// Score queries (n_q x D), producing one logit per way per query.
pub fn head_logits<T: Real>(state: &HeadState<T>, query: &Mat<T>, alpha: T, beta: T) -> Mat<T> {
    match state {
        HeadState::Prototype { protos, .. } => {
            let mut logits = Mat::zeros(query.rows, protos.rows);
            for q in 0..query.rows {
                let erow = query.row(q);
                for c in 0..protos.rows {
                    let prow = protos.row(c);
                    let mut dist = T::zero();
                    for (&e, &p) in erow.iter().zip(prow) {
                        let d = e - p;
                        dist += d * d;
                    }
                    *logits.at_mut(q, c) = -dist;
                }
            }
            logits
        }
        HeadState::Ridge { w, .. } => {
            let mut logits = query.matmul(w);
            for v in &mut logits.data {
                *v = alpha * *v + beta;
            }
            logits
        }
    }
}

pub(super) struct HeadBackward<T> {
    pub d_support: Mat<T>,
    pub d_query: Mat<T>,
    pub d_alpha: T,
    pub d_beta: T,
}

/// Exact gradients through the head solve given dL/dlogits.
pub(super) fn head_backward<T: Real>(
    state: &HeadState<T>,
    support: &Mat<T>,
    support_labels: &Mat<T>,
    query: &Mat<T>,
    alpha: T,
    dlogits: &Mat<T>,
) -> HeadBackward<T> {
    match state {
        HeadState::Prototype { protos, mass } => {
            let dim = protos.cols;
            let mut d_query = Mat::zeros(query.rows, dim);
            let mut d_protos = Mat::zeros(protos.rows, dim);
            for q in 0..query.rows {
                let erow = query.row(q);
                for c in 0..protos.rows {
                    let g = dlogits.at(q, c);
                    if g == T::zero() {
                        continue;
                    }
                    let prow = protos.row(c);
                    let two = T::from_f64(2.0);
                    for d in 0..dim {
                        let diff = erow[d] - prow[d];
                        *d_query.at_mut(q, d) -= two * diff * g;
                        *d_protos.at_mut(c, d) += two * diff * g;
                    }
                }
            }
            // Prototype c = sum_i (y_ic / mass_c) e_i.
            let mut d_support = Mat::zeros(support.rows, dim);
            for i in 0..support.rows {
                for c in 0..protos.rows {
                    let y = support_labels.at(i, c);
                    if y == T::zero() {
                        continue;
                    }
                    let scale = y / mass[c];
                    let prow = d_protos.row(c);
                    let srow = &mut d_support.data[i * dim..(i + 1) * dim];
                    for (s, &p) in srow.iter_mut().zip(prow) {
                        *s += scale * p;
                    }
                }
            }
            HeadBackward {
                d_support,
                d_query,
                d_alpha: T::zero(),
                d_beta: T::zero(),
            }
        }
        HeadState::Ridge { w, z, chol } => {
            // logits = alpha * (E W) + beta.
            let raw = query.matmul(w);
            let mut d_alpha = T::zero();
            let mut d_beta = T::zero();
            for (&s, &r) in dlogits.data.iter().zip(&raw.data) {
                d_alpha += s * r;
                d_beta += s;
            }

            // dL/dW = alpha Eᵀ S; dL/dE = alpha S Wᵀ.
            let mut d_w = query.matmul_tn(dlogits);
            for v in &mut d_w.data {
                *v *= alpha;
            }
            let mut d_query = dlogits.matmul_nt(w);
            for v in &mut d_query.data {
                *v *= alpha;
            }

            // W = Xᵀ A Y with A = (X Xᵀ + λI)⁻¹:
            //   dL/dX = Z dWᵀ + (P + Pᵀ) X, P = -A X dW Zᵀ.
            let mut d_support = z.matmul_nt(&d_w);
            let m1 = support.matmul(&d_w);
            let m2 = chol_solve(chol, &m1);
            let mut p = m2.matmul_nt(z);
            for v in &mut p.data {
                *v = -*v;
            }
            let p_t = p.transpose();
            for (a, &b) in p.data.iter_mut().zip(&p_t.data) {
                *a += b;
            }
            let extra = p.matmul(support);
            for (a, &b) in d_support.data.iter_mut().zip(&extra.data) {
                *a += b;
            }

            HeadBackward {
                d_support,
                d_query,
                d_alpha,
                d_beta,
            }
        }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub(super) fn cholesky<T: Real>(g: &Mat<T>) -> Result<Mat<T>> {
    let n = g.rows;
    debug_assert_eq!(g.rows, g.cols);
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g.at(i, j);
            for k in 0..j {
                sum -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if sum <= T::zero() || !sum.is_finite() {
                    return Err(Error::NumericFailure {
                        stage: "ridge-cholesky".into(),
                    });
                }
                *l.at_mut(i, j) = sum.sqrt();
            } else {
                *l.at_mut(i, j) = sum / l.at(j, j);
            }
        }
    }
    Ok(l)
}

/// Solve (L Lᵀ) X = B for X, column-block RHS.
pub(super) fn chol_solve<T: Real>(l: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let n = l.rows;
    debug_assert_eq!(b.rows, n);
    let cols = b.cols;
    let mut x = b.clone();
    // Forward: L y = b.
    for i in 0..n {
        for k in 0..i {
            let lik = l.at(i, k);
            if lik == T::zero() {
                continue;
            }
            for c in 0..cols {
                let v = x.at(k, c);
                *x.at_mut(i, c) -= lik * v;
            }
        }
        let inv = T::one() / l.at(i, i);
        for c in 0..cols {
            *x.at_mut(i, c) *= inv;
        }
    }
    // Backward: Lᵀ x = y.
    for i in (0..n).rev() {
        for k in i + 1..n {
            let lki = l.at(k, i);
            if lki == T::zero() {
                continue;
            }
            for c in 0..cols {
                let v = x.at(k, c);
                *x.at_mut(i, c) -= lki * v;
            }
        }
        let inv = T::one() / l.at(i, i);
        for c in 0..cols {
            *x.at_mut(i, c) *= inv;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use rand::Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = RngStream::root(seed).child("mat", 0);
        let mut m = Mat::zeros(rows, cols);
        for v in &mut m.data {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    fn one_hot_labels(assignments: &[usize], ways: usize) -> Mat<f64> {
        let mut m = Mat::zeros(assignments.len(), ways);
        for (i, &c) in assignments.iter().enumerate() {
            *m.at_mut(i, c) = 1.0;
        }
        m
    }

    #[test]
    fn prototype_is_class_mean_for_one_hot() {
        let support = Mat::from_rows(vec![
            vec![1.0, 0.0],
            vec![3.0, 2.0],
            vec![0.0, 4.0],
            vec![2.0, 6.0],
        ]);
        let labels = one_hot_labels(&[0, 0, 1, 1], 2);
        let state = head_fit(HeadKind::Prototype, &support, &labels, 1.0).unwrap();
        let HeadState::Prototype { protos, .. } = state else {
            panic!()
        };
        assert_eq!(protos.row(0), &[2.0, 1.0]);
        assert_eq!(protos.row(1), &[1.0, 5.0]);
    }

    #[test]
    fn prototype_zero_mass_is_degenerate() {
        let support = Mat::from_rows(vec![vec![1.0, 0.0]]);
        let labels = one_hot_labels(&[0], 2); // class 1 has no mass
        match head_fit(HeadKind::Prototype, &support, &labels, 1.0) {
            Err(Error::DegenerateClass { slot: 1 }) => {}
            other => panic!("expected degenerate-class, got {other:?}"),
        }
    }

    #[test]
    fn prototype_logits_zero_at_prototype() {
        let support = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let labels = one_hot_labels(&[0, 1], 2);
        let state = head_fit(HeadKind::Prototype, &support, &labels, 1.0).unwrap();
        let query = Mat::from_rows(vec![vec![1.0, 0.0]]);
        let logits = head_logits(&state, &query, 1.0, 0.0);
        assert_eq!(logits.at(0, 0), 0.0);
        assert!(logits.at(0, 1) < 0.0);
    }

    #[test]
    fn prototype_equidistant_queries_tie() {
        let support = Mat::from_rows(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let labels = one_hot_labels(&[0, 1], 2);
        let state = head_fit(HeadKind::Prototype, &support, &labels, 1.0).unwrap();
        let query = Mat::from_rows(vec![vec![0.0, 3.0]]);
        let logits = head_logits(&state, &query, 1.0, 0.0);
        assert_eq!(logits.at(0, 0), logits.at(0, 1));
    }

    #[test]
    fn ridge_matches_normal_equation_oracle() {
        // Kernel-form solve vs brute-force (XᵀX + λI)⁻¹ XᵀY via Gaussian
        // elimination, 50 random systems, 64-bit, 1e-8 absolute.
        for trial in 0..50 {
            let n = 3;
            let d = 6;
            let ways = 4;
            let x = random_mat(n, d, 1000 + trial);
            let y = random_mat(n, ways, 2000 + trial);
            let lambda = 0.7;
            let state = head_fit(HeadKind::Ridge, &x, &y, lambda).unwrap();
            let HeadState::Ridge { w, .. } = &state else {
                panic!()
            };

            // Oracle: solve (XᵀX + λI) W = XᵀY by Gaussian elimination.
            let xtx = x.matmul_tn(&x);
            let mut a = xtx.clone();
            for i in 0..d {
                *a.at_mut(i, i) += lambda;
            }
            let rhs = x.matmul_tn(&y);
            let oracle = gauss_solve(&a, &rhs);
            for (i, (&got, &want)) in w.data.iter().zip(&oracle.data).enumerate() {
                assert!(
                    (got - want).abs() <= 1e-8,
                    "trial {trial} idx {i}: {got} vs {want}"
                );
            }
        }
    }

    fn gauss_solve(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let n = a.rows;
        let cols = b.cols;
        let mut m = a.clone();
        let mut x = b.clone();
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if m.at(r, col).abs() > m.at(pivot, col).abs() {
                    pivot = r;
                }
            }
            for c in 0..n {
                let tmp = m.at(col, c);
                *m.at_mut(col, c) = m.at(pivot, c);
                *m.at_mut(pivot, c) = tmp;
            }
            for c in 0..cols {
                let tmp = x.at(col, c);
                *x.at_mut(col, c) = x.at(pivot, c);
                *x.at_mut(pivot, c) = tmp;
            }
            let p = m.at(col, col);
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = m.at(r, col) / p;
                for c in 0..n {
                    let v = m.at(col, c);
                    *m.at_mut(r, c) -= f * v;
                }
                for c in 0..cols {
                    let v = x.at(col, c);
                    *x.at_mut(r, c) -= f * v;
                }
            }
        }
        for r in 0..n {
            let p = m.at(r, r);
            for c in 0..cols {
                *x.at_mut(r, c) /= p;
            }
        }
        x
    }

    #[test]
    fn ridge_huge_lambda_shrinks_to_zero() {
        let x = random_mat(4, 8, 77);
        let y = random_mat(4, 3, 78);
        let norm = |m: &Mat<f64>| m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w_small = match head_fit(HeadKind::Ridge, &x, &y, 1.0).unwrap() {
            HeadState::Ridge { w, .. } => w,
            _ => unreachable!(),
        };
        let w_large = match head_fit(HeadKind::Ridge, &x, &y, 1e8).unwrap() {
            HeadState::Ridge { w, .. } => w,
            _ => unreachable!(),
        };
        assert!(norm(&w_large) < 1e-4 * norm(&w_small));
    }

    #[test]
    fn ridge_solve_residual_is_small() {
        // (X Xᵀ + λI) Z = Y to 1e-8 relative.
        let x = random_mat(6, 10, 5);
        let y = random_mat(6, 5, 6);
        let lambda = 0.3;
        let state = head_fit(HeadKind::Ridge, &x, &y, lambda).unwrap();
        let HeadState::Ridge { z, .. } = &state else {
            panic!()
        };
        let mut gram = x.matmul_nt(&x);
        for i in 0..6 {
            *gram.at_mut(i, i) += lambda;
        }
        let gz = gram.matmul(z);
        let scale = y.data.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        for (&got, &want) in gz.data.iter().zip(&y.data) {
            assert!((got - want).abs() <= 1e-8 * scale.max(1.0));
        }
    }

    #[test]
    fn ridge_alpha_zero_gives_constant_logits() {
        let x = random_mat(4, 6, 11);
        let y = one_hot_labels(&[0, 1, 2, 0], 3);
        let state = head_fit(HeadKind::Ridge, &x, &y, 1.0).unwrap();
        let q = random_mat(3, 6, 12);
        let logits = head_logits(&state, &q, 0.0, 2.5);
        assert!(logits.data.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn prototype_logits_invariant_under_support_permutation() {
        let support = random_mat(6, 5, 21);
        let labels = one_hot_labels(&[0, 1, 2, 0, 1, 2], 3);
        let query = random_mat(4, 5, 22);
        let state = head_fit(HeadKind::Prototype, &support, &labels, 1.0).unwrap();
        let base = head_logits(&state, &query, 1.0, 0.0);

        let perm = [5, 3, 1, 4, 0, 2];
        let permuted = Mat::from_rows(perm.iter().map(|&i| support.row(i).to_vec()).collect());
        let permuted_labels =
            Mat::from_rows(perm.iter().map(|&i| labels.row(i).to_vec()).collect());
        let state2 = head_fit(HeadKind::Prototype, &permuted, &permuted_labels, 1.0).unwrap();
        let other = head_logits(&state2, &query, 1.0, 0.0);
        for (&a, &b) in base.data.iter().zip(&other.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
