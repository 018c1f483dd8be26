//! Symmetric block-tridiagonal matrices and their Cholesky factorization.
//!
//! A chain-structured window touches only consecutive nodes, so the Hessian
//! has nonzero blocks on the diagonal and the first off-diagonals. Factoring
//! block by block costs O(n B^3) instead of O((n B)^3).

use nalgebra::{Cholesky, DMatrix, DVector, SMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal<const B: usize> {
    /// Diagonal blocks `(i, i)`.
    pub diag: Vec<SMatrix<f64, B, B>>,
    /// Subdiagonal blocks: `lower[i]` is block `(i + 1, i)`.
    pub lower: Vec<SMatrix<f64, B, B>>,
}

impl<const B: usize> BlockTridiagonal<B> {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![SMatrix::zeros(); n],
            lower: vec![SMatrix::zeros(); n.saturating_sub(1)],
        }
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn dim(&self) -> usize {
        B * self.diag.len()
    }

    /// Scalar entries inside the stored block pattern.
    pub fn structural_nonzeros(&self) -> usize {
        let n = self.diag.len();
        if n == 0 {
            0
        } else {
            B * B * (n + 2 * (n - 1))
        }
    }

    /// Adds `m` to block `(i, j)` with `|i - j| <= 1`; the mirror is implied.
    pub fn add_block(&mut self, i: usize, j: usize, m: &SMatrix<f64, B, B>) {
        if i == j {
            self.diag[i] += m;
        } else if i == j + 1 {
            self.lower[j] += m;
        } else if j == i + 1 {
            self.lower[i] += m.transpose();
        } else {
            panic!("block ({i}, {j}) outside the tridiagonal band");
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (i, d) in self.diag.iter().enumerate() {
            m.fixed_view_mut::<B, B>(B * i, B * i).copy_from(d);
        }
        for (i, l) in self.lower.iter().enumerate() {
            m.fixed_view_mut::<B, B>(B * (i + 1), B * i).copy_from(l);
            m.fixed_view_mut::<B, B>(B * i, B * (i + 1))
                .copy_from(&l.transpose());
        }
        m
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (i, d) in self.diag.iter().enumerate() {
            let r = d * v.fixed_rows::<B>(B * i);
            let mut view = out.fixed_rows_mut::<B>(B * i);
            view += r;
        }
        for (i, l) in self.lower.iter().enumerate() {
            let below = l * v.fixed_rows::<B>(B * i);
            let above = l.transpose() * v.fixed_rows::<B>(B * (i + 1));
            let mut view = out.fixed_rows_mut::<B>(B * (i + 1));
            view += below;
            let mut view = out.fixed_rows_mut::<B>(B * i);
            view += above;
        }
        out
    }

    /// `self + lambda I`.
    pub fn damped(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for d in &mut out.diag {
            *d += SMatrix::<f64, B, B>::identity() * lambda;
        }
        out
    }

    /// Block Cholesky `A = L L^T` with `L` lower block-bidiagonal.
    pub fn cholesky(&self) -> Option<BlockCholesky<B>> {
        let n = self.diag.len();
        let mut l_diag: Vec<SMatrix<f64, B, B>> = Vec::with_capacity(n);
        let mut l_lower: Vec<SMatrix<f64, B, B>> = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut s = self.diag[i];
            if i > 0 {
                let m = &l_lower[i - 1];
                s -= m * m.transpose();
            }
            let li = Cholesky::new(s)?.unpack();
            if i + 1 < n {
                // M = A_{i+1,i} L_i^{-T}
                let mt = li.solve_lower_triangular(&self.lower[i].transpose())?;
                l_lower.push(mt.transpose());
            }
            l_diag.push(li);
        }
        Some(BlockCholesky {
            diag: l_diag,
            lower: l_lower,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCholesky<const B: usize> {
    diag: Vec<SMatrix<f64, B, B>>,
    lower: Vec<SMatrix<f64, B, B>>,
}

impl<const B: usize> BlockCholesky<B> {
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.diag.len();
        let mut y: Vec<SMatrix<f64, B, 1>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut b: SMatrix<f64, B, 1> = rhs.fixed_rows::<B>(B * i).into_owned();
            if i > 0 {
                b -= self.lower[i - 1] * y[i - 1];
            }
            y.push(self.diag[i].solve_lower_triangular(&b).unwrap_or(b));
        }
        let mut x = vec![SMatrix::<f64, B, 1>::zeros(); n];
        for i in (0..n).rev() {
            let mut b = y[i];
            if i + 1 < n {
                b -= self.lower[i].transpose() * x[i + 1];
            }
            x[i] = self.diag[i].tr_solve_lower_triangular(&b).unwrap_or(b);
        }
        DVector::from_iterator(B * n, x.iter().flat_map(|b| b.iter().copied()))
    }
}
