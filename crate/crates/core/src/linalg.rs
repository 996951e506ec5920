//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SVD};

use crate::spectral::C64;

/// Real `2N × 2N` form of a complex-linear map acting on stacked `(re, im)`.
pub fn real_form(c: &DMatrix<C64>) -> DMatrix<f64> {
    let (r, k) = c.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * k);
    for i in 0..r {
        for j in 0..k {
            let z = c[(i, j)];
            out[(i, j)] = z.re;
            out[(i, k + j)] = -z.im;
            out[(r + i, j)] = z.im;
            out[(r + i, k + j)] = z.re;
        }
    }
    out
}

/// Stacks real and imaginary parts of a complex matrix row-wise: `[Re C; Im C]`.
pub fn stack_rows(c: &DMatrix<C64>) -> DMatrix<f64> {
    let (r, k) = c.shape();
    DMatrix::from_fn(2 * r, k, |i, j| if i < r { c[(i, j)].re } else { c[(i - r, j)].im })
}

/// `(e^z − 1)/z`, stable near zero.
pub fn phi1(z: C64) -> C64 {
    if z.norm() < 1e-2 {
        let mut term = C64::new(1.0, 0.0);
        let mut sum = term;
        for k in 2..10 {
            term = term * z / k as f64;
            sum += term;
        }
        sum
    } else {
        (z.exp() - 1.0) / z
    }
}

/// `∫₀¹ r e^{zr} dr`, stable near zero.
pub fn phi_ramp(z: C64) -> C64 {
    if z.norm() < 1e-2 {
        // Σ z^k / (k! (k+2))
        let mut fact = 1.0;
        let mut zk = C64::new(1.0, 0.0);
        let mut sum = C64::new(0.5, 0.0);
        for k in 1..10 {
            fact *= k as f64;
            zk *= z;
            sum += zk / (fact * (k + 2) as f64);
        }
        sum
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Exact discretisation of `x' = L x + B w` over `dt` with `w` held constant:
/// returns `(e^{L dt}, ∫₀^dt e^{Lτ} dτ B)`.
pub fn exact_step(l: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = l.nrows();
    let q = b.ncols();
    let mut aug = DMatrix::zeros(n + q, n + q);
    aug.view_mut((0, 0), (n, n)).copy_from(&(l * dt));
    aug.view_mut((0, n), (n, q)).copy_from(&(b * dt));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, q)).into_owned())
}

/// Singular value decomposition with values sorted in descending order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn sorted_svd(a: &DMatrix<f64>) -> SortedSvd {
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let su = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let sv = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let su = realign_left(a, su, &sv, &singular_values);
    SortedSvd { u: su, singular_values, v_t: sv }
}

/// Replaces left vectors of non-negligible singular values by the
/// re-orthonormalized `A vᵢ / σᵢ`: with tied singular values the returned `U`
/// can drift out of the column space by far more than roundoff.
#[allow(clippy::needless_range_loop)]
fn realign_left(a: &DMatrix<f64>, mut u: DMatrix<f64>, v_t: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let top = s.first().copied().unwrap_or(0.0);
    let keep = s.iter().filter(|&&x| x > 1e-13 * top).count();
    for i in 0..u.ncols() {
        let mut col = if i < keep { a * v_t.row(i).transpose() / s[i] } else { u.column(i).into_owned() };
        for _ in 0..2 {
            for j in 0..i {
                let proj = u.column(j).dot(&col);
                col -= u.column(j) * proj;
            }
        }
        let norm = col.norm();
        if norm > 0.0 {
            u.set_column(i, &(col / norm));
        }
    }
    u
}

impl SortedSvd {
    /// Number of singular values above `rel_tol · σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.singular_values.iter().filter(|&&s| s > rel_tol * top).count()
    }

    /// Tikhonov-filtered pseudo-inverse applied to `b`, truncated at `rank`.
    pub fn solve(&self, b: &DVector<f64>, rank: usize, ridge: f64) -> DVector<f64> {
        let mut x = DVector::zeros(self.v_t.ncols());
        for i in 0..rank {
            let s = self.singular_values[i];
            let coef = self.u.column(i).dot(b) * s / (s * s + ridge);
            x += self.v_t.row(i).transpose() * coef;
        }
        x
    }

    /// Orthonormal basis of the leading `rank` left singular vectors.
    pub fn range(&self, rank: usize) -> DMatrix<f64> {
        self.u.columns(0, rank).into_owned()
    }
}

/// Orthonormal basis for the complement of `basis` (orthonormal columns) in `R^dim`.
pub fn orthogonal_complement(basis: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let k = basis.ncols();
    if k == 0 {
        return DMatrix::identity(dim, dim);
    }
    let proj = DMatrix::identity(dim, dim) - basis * basis.transpose();
    let svd = sorted_svd(&proj);
    let rank = (dim - k).min(svd.rank(1e-8));
    svd.range(rank)
}

/// Smallest principal angle between the lines spanned by `a` and `b`.
pub fn line_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = (dot.abs() / (na * nb)).min(1.0);
    // acos loses precision near 1; use the sine form
    let s = (1.0 - c * c).max(0.0).sqrt();
    s.atan2(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_functions_match_closed_forms() {
        for z in [C64::new(1e-4, 2e-4), C64::new(0.3, -1.2), C64::new(0.0, 5e-3)] {
            let direct1 = if z.norm() > 1e-6 { (z.exp() - 1.0) / z } else { C64::new(1.0, 0.0) };
            assert!((phi1(z) - direct1).norm() < 1e-12);
            // crude quadrature oracle for ∫ r e^{zr}
            let n = 20000;
            let q: C64 = (0..n)
                .map(|i| {
                    let r = (i as f64 + 0.5) / n as f64;
                    (z * r).exp() * r
                })
                .sum::<C64>()
                / n as f64;
            assert!((phi_ramp(z) - q).norm() < 1e-8);
        }
    }

    #[test]
    fn exact_step_scalar() {
        let l = DMatrix::from_element(1, 1, -2.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let (e, f) = exact_step(&l, &b, 0.5);
        assert!((e[(0, 0)] - (-1.0f64).exp()).abs() < 1e-14);
        assert!((f[(0, 0)] - (1.0 - (-1.0f64).exp()) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn real_form_multiplies_like_complex() {
        let c = DMatrix::from_row_slice(1, 1, &[C64::new(0.0, 1.0)]);
        let r = real_form(&c);
        let x = DVector::from_vec(vec![2.0, 3.0]);
        let y = r * x;
        // i (2 + 3i) = -3 + 2i
        assert_eq!(y.as_slice(), &[-3.0, 2.0]);
    }
}
