//! Householder QR with limited column pivoting for rank-deficient least squares.
//!
//! Columns are processed in their given order. A column whose remaining norm
//! falls below `tol` times its original norm is linearly dependent on the
//! columns already accepted; it is moved to the end and reported as aliased.
//! Earlier columns therefore always win, which keeps the choice of dropped
//! column predictable from the design's column order.

use nalgebra::DMatrix;

/// Default relative tolerance for declaring a column aliased.
pub const ALIAS_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PivotedQr {
    n: usize,
    /// Column-major working storage: Householder vectors on and below the
    /// diagonal, R strictly above it.
    work: Vec<f64>,
    r_diag: Vec<f64>,
    v_norm2: Vec<f64>,
    order: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    /// Factorises the `n x p` column-major matrix `a`.
    pub fn new(a: Vec<f64>, n: usize, p: usize, tol: f64) -> Self {
        assert_eq!(a.len(), n * p);
        let mut work = a;
        let mut order: Vec<usize> = (0..p).collect();
        let norms0: Vec<f64> = (0..p).map(|j| norm(&work[j * n..(j + 1) * n])).collect();
        let mut r_diag = vec![0.0; p];
        let mut v_norm2 = vec![0.0; p];
        let mut k = 0;
        let mut last = p;
        while k < last && k < n {
            let col = &work[k * n + k..(k + 1) * n];
            let nrm = norm(col);
            let orig = norms0[order[k]];
            if orig == 0.0 || nrm <= tol * orig {
                // rotate column k to position last - 1
                let moved: Vec<f64> = work[k * n..(k + 1) * n].to_vec();
                work.copy_within((k + 1) * n..last * n, k * n);
                work[(last - 1) * n..last * n].copy_from_slice(&moved);
                let o = order.remove(k);
                order.insert(last - 1, o);
                last -= 1;
                continue;
            }
            let x0 = work[k * n + k];
            let alpha = if x0 >= 0.0 { -nrm } else { nrm };
            work[k * n + k] = x0 - alpha;
            let vv: f64 = work[k * n + k..(k + 1) * n].iter().map(|v| v * v).sum();
            r_diag[k] = alpha;
            v_norm2[k] = vv;
            if vv > 0.0 {
                let (head, tail) = work.split_at_mut((k + 1) * n);
                let v = &head[k * n + k..];
                for j in 0..(p - k - 1) {
                    let col = &mut tail[j * n + k..(j + 1) * n];
                    let s: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                    let f = 2.0 * s / vv;
                    for (c, vi) in col.iter_mut().zip(v) {
                        *c -= f * vi;
                    }
                }
            }
            k += 1;
        }
        Self {
            n,
            work,
            r_diag,
            v_norm2,
            order,
            rank: k,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Original indices of the accepted columns, in factorisation order.
    pub fn retained(&self) -> &[usize] {
        &self.order[..self.rank]
    }

    /// Original indices of the aliased columns.
    pub fn aliased(&self) -> &[usize] {
        &self.order[self.rank..]
    }

    /// Applies `Q^T` to `y` in place.
    pub fn apply_qt(&self, y: &mut [f64]) {
        let n = self.n;
        for k in 0..self.rank {
            let vv = self.v_norm2[k];
            if vv == 0.0 {
                continue;
            }
            let v = &self.work[k * n + k..(k + 1) * n];
            let s: f64 = v.iter().zip(&y[k..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * s / vv;
            for (yi, vi) in y[k..].iter_mut().zip(v) {
                *yi -= f * vi;
            }
        }
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.r_diag[i]
        } else {
            self.work[j * self.n + i]
        }
    }

    /// Least-squares coefficients for the retained columns (in the order of
    /// [`retained`](Self::retained)).
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let mut qty = y.to_vec();
        self.apply_qt(&mut qty);
        let r = self.rank;
        let mut beta = vec![0.0; r];
        for i in (0..r).rev() {
            let mut s = qty[i];
            for j in i + 1..r {
                s -= self.r(i, j) * beta[j];
            }
            beta[i] = s / self.r(i, i);
        }
        beta
    }

    /// `(R^T R)^{-1}` over the retained columns, in factorisation order.
    pub fn unscaled_covariance(&self) -> DMatrix<f64> {
        let r = self.rank;
        let mut rinv = DMatrix::<f64>::zeros(r, r);
        for j in 0..r {
            rinv[(j, j)] = 1.0 / self.r(j, j);
            for i in (0..j).rev() {
                let mut s = 0.0;
                for k in i + 1..=j {
                    s += self.r(i, k) * rinv[(k, j)];
                }
                rinv[(i, j)] = -s / self.r(i, i);
            }
        }
        &rinv * rinv.transpose()
    }
}

fn norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    scale * v.iter().map(|x| (x / scale) * (x / scale)).sum::<f64>().sqrt()
}
