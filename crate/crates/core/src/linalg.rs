//! Dense kernels for the gradient geometry.
//!
//! Everything here operates on flat `&[F]` parameter vectors and on
//! [`GradientMatrix`], a row stack of client gradients. The sizes are
//! desk-scale: the number of rows is the number of remaining clients
//! (single digits), while the row length is the model dimension.

use crate::error::{Error, Result};
use crate::{cast, Float};

/// Eigenvalues with magnitude below `TOL_RANK_REL * |lambda_max|` are
/// treated as zero when a Gram matrix is pseudo-inverted.
pub const TOL_RANK_REL: f64 = 1e-10;
/// The direction solve reports a degenerate instance when the null-space
/// component of the unlearning gradient is below `TOL_NULL_REL * ||g_u||`.
pub const TOL_NULL_REL: f64 = 1e-9;
/// Relative residual under which the normal-plane projection collapses
/// (input parallel to the displacement).
pub const PROJECTION_COLLAPSE_REL: f64 = 1e-14;
/// Default relative tolerance for conflict counting.
pub const CONFLICT_TOL: f64 = 1e-8;

pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm_sq<F: Float>(a: &[F]) -> F {
    dot(a, a)
}

pub fn norm<F: Float>(a: &[F]) -> F {
    norm_sq(a).sqrt()
}

/// `a + c * b`, element-wise.
pub fn axpy<F: Float>(a: &[F], c: F, b: &[F]) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x + c * y).collect()
}

pub fn sub<F: Float>(a: &[F], b: &[F]) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn scale<F: Float>(a: &[F], c: F) -> Vec<F> {
    a.iter().map(|&x| x * c).collect()
}

/// Cosine similarity in `[-1, 1]`; `0` when either input has zero norm.
pub fn cos_sim<F: Float>(a: &[F], b: &[F]) -> F {
    let na = norm(a);
    let nb = norm(b);
    if na == F::zero() || nb == F::zero() {
        return F::zero();
    }
    let c = dot(a, b) / (na * nb);
    c.max(-F::one()).min(F::one())
}

/// Row stack of per-client gradients, ordered by ascending client id.
#[derive(Debug, Clone)]
pub struct GradientMatrix<F> {
    rows: Vec<Vec<F>>,
    client_ids: Vec<usize>,
    dim: usize,
}

impl<F: Float> GradientMatrix<F> {
    /// Builds the stack from `(client_id, gradient)` pairs. Rows are
    /// sorted by client id; ids must be distinct and rows equal-length.
    pub fn new(mut entries: Vec<(usize, Vec<F>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("gradient matrix needs at least one row".into()));
        }
        entries.sort_by_key(|(id, _)| *id);
        let dim = entries[0].1.len();
        let mut client_ids = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len());
        for (id, row) in entries {
            if row.len() != dim {
                return Err(Error::Config(format!(
                    "gradient for client {id} has length {}, expected {dim}",
                    row.len()
                )));
            }
            if client_ids.last() == Some(&id) {
                return Err(Error::Config(format!("duplicate client id {id} in gradient matrix")));
            }
            client_ids.push(id);
            rows.push(row);
        }
        Ok(Self { rows, client_ids, dim })
    }

    pub fn rows(&self) -> &[Vec<F>] {
        &self.rows
    }

    pub fn client_ids(&self) -> &[usize] {
        &self.client_ids
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `G x`: one dot product per row.
    pub fn mul_vec(&self, x: &[F]) -> Vec<F> {
        self.rows.iter().map(|r| dot(r, x)).collect()
    }

    /// `G^T y`: linear combination of the rows.
    pub fn mul_transpose_vec(&self, y: &[F]) -> Vec<F> {
        debug_assert_eq!(y.len(), self.rows.len());
        let mut out = vec![F::zero(); self.dim];
        for (coef, row) in y.iter().zip(&self.rows) {
            for (o, &r) in out.iter_mut().zip(row) {
                *o = *o + *coef * r;
            }
        }
        out
    }
}

/// Dense symmetric-friendly square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMat<F> {
    n: usize,
    a: Vec<F>,
}

impl<F: Float> SquareMat<F> {
    pub fn zeros(n: usize) -> Self {
        Self { n, a: vec![F::zero(); n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, F::one());
        }
        m
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "square matrix rows must have length n");
            for (j, &v) in r.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> F {
        self.a[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.a[i * self.n + j] = v;
    }

    pub fn frobenius(&self) -> F {
        self.a.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt()
    }

    fn off_diag_norm(&self) -> F {
        let mut acc = F::zero();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let v = self.at(i, j);
                acc = acc + v * v;
            }
        }
        (acc + acc).sqrt()
    }
}

/// `G G^T`, exactly symmetric by construction.
pub fn gram<F: Float>(g: &GradientMatrix<F>) -> SquareMat<F> {
    let m = g.len();
    let mut out = SquareMat::zeros(m);
    for i in 0..m {
        for j in i..m {
            let v = dot(&g.rows()[i], &g.rows()[j]);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix: `A = V diag(values) V^T`,
/// eigenvalues sorted descending, eigenvectors in the columns of
/// `vectors` (column `j` pairs with `values[j]`).
#[derive(Debug, Clone)]
pub struct EigenDecomp<F> {
    pub values: Vec<F>,
    pub vectors: SquareMat<F>,
}

impl<F: Float> EigenDecomp<F> {
    /// Applies the pseudo-inverse: `y = V diag(1/lambda_j) V^T x`, with
    /// eigenvalues at or below `tol_rank_rel * |lambda|_max` dropped.
    pub fn pinv_apply(&self, x: &[F], tol_rank_rel: F) -> Vec<F> {
        let n = self.values.len();
        debug_assert_eq!(x.len(), n);
        let lam_max = self
            .values
            .iter()
            .fold(F::zero(), |acc, v| acc.max(v.abs()));
        let cutoff = tol_rank_rel * lam_max;
        let mut y = vec![F::zero(); n];
        for (j, &lam) in self.values.iter().enumerate() {
            if lam <= cutoff {
                continue;
            }
            let mut proj = F::zero();
            for (i, &xi) in x.iter().enumerate() {
                proj = proj + self.vectors.at(i, j) * xi;
            }
            let coef = proj / lam;
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = *yi + coef * self.vectors.at(i, j);
            }
        }
        y
    }
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Converges to
/// machine precision for the tiny Gram matrices used here; errors if the
/// off-diagonal mass has not vanished after a fixed sweep budget.
pub fn sym_eig<F: Float>(a: &SquareMat<F>) -> Result<EigenDecomp<F>> {
    let n = a.n();
    let mut m = a.clone();
    let mut v = SquareMat::identity(n);
    if n == 0 {
        return Ok(EigenDecomp { values: vec![], vectors: v });
    }
    let scale = a.frobenius();
    let stop = F::epsilon() * scale;

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if m.off_diag_norm() <= stop {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                // Entry already negligible against the diagonal: zero it.
                if app.abs() + apq.abs() == app.abs() && aqq.abs() + apq.abs() == aqq.abs() {
                    m.set(p, q, F::zero());
                    m.set(q, p, F::zero());
                    continue;
                }
                if apq == F::zero() {
                    continue;
                }
                let two = cast::<F>(2.0);
                let theta = (aqq - app) / (two * apq);
                let t = if theta >= F::zero() {
                    F::one() / (theta + (theta * theta + F::one()).sqrt())
                } else {
                    -F::one() / (-theta + (theta * theta + F::one()).sqrt())
                };
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let mrp = m.at(r, p);
                    let mrq = m.at(r, q);
                    let new_rp = c * mrp - s * mrq;
                    let new_rq = s * mrp + c * mrq;
                    m.set(r, p, new_rp);
                    m.set(p, r, new_rp);
                    m.set(r, q, new_rq);
                    m.set(q, r, new_rq);
                }
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, F::zero());
                m.set(q, p, F::zero());
                for r in 0..n {
                    let vrp = v.at(r, p);
                    let vrq = v.at(r, q);
                    v.set(r, p, c * vrp - s * vrq);
                    v.set(r, q, s * vrp + c * vrq);
                }
            }
        }
    }
    if !converged && m.off_diag_norm() > stop {
        return Err(Error::Numerical(format!(
            "jacobi eigendecomposition did not converge in {JACOBI_MAX_SWEEPS} sweeps (n = {n})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m.at(j, j)
            .partial_cmp(&m.at(i, i))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values: Vec<F> = order.iter().map(|&i| m.at(i, i)).collect();
    let mut vectors = SquareMat::zeros(n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v.at(r, old_col));
        }
    }
    Ok(EigenDecomp { values, vectors })
}

/// Orthogonal projector onto the row space of a gradient matrix, built
/// once per round from the Gram matrix's eigendecomposition.
pub struct RowspaceProjector<'a, F: Float> {
    g: &'a GradientMatrix<F>,
    eig: EigenDecomp<F>,
    tol_rank_rel: F,
}

impl<'a, F: Float> RowspaceProjector<'a, F> {
    pub fn new(g: &'a GradientMatrix<F>, tol_rank_rel: F) -> Result<Self> {
        let eig = sym_eig(&gram(g))?;
        Ok(Self { g, eig, tol_rank_rel })
    }

    /// Row-space component of `x`: `G^T (G G^T)^+ G x`.
    pub fn rowspace_component(&self, x: &[F]) -> Vec<F> {
        let t = self.g.mul_vec(x);
        let y = self.eig.pinv_apply(&t, self.tol_rank_rel);
        self.g.mul_transpose_vec(&y)
    }

    /// Null-space component of `x`: `x - G^T (G G^T)^+ G x`.
    pub fn nullspace_component(&self, x: &[F]) -> Vec<F> {
        sub(x, &self.rowspace_component(x))
    }
}

/// Result of the constrained direction solve.
#[derive(Debug, Clone)]
pub enum OsdOutcome<F> {
    /// The steepest feasible direction: orthogonal to every row,
    /// `||d|| = ||g_u||`, non-positive inner product with `g_u`.
    Direction(Vec<F>),
    /// The unlearning gradient lies in the row space (up to tolerance):
    /// no feasible direction makes progress.
    Degenerate {
        /// `||null-space component|| / ||g_u||` at the point of failure.
        residual_rel: F,
    },
}

/// Solves for the update direction of the unlearning stage: the
/// minimizer of `g_u . d` over `{ d : G d = 0, ||d|| = ||g_u|| }`, which
/// is the negated null-space component of `g_u`, rescaled to `||g_u||`.
pub fn osd_direction<F: Float>(
    g: &GradientMatrix<F>,
    g_u: &[F],
    tol_rank_rel: F,
    tol_null_rel: F,
) -> Result<OsdOutcome<F>> {
    let gu_norm = norm(g_u);
    if gu_norm == F::zero() {
        return Err(Error::Config("direction solve requires a nonzero unlearning gradient".into()));
    }
    if g.dim() != g_u.len() {
        return Err(Error::Config(format!(
            "gradient matrix dim {} does not match unlearning gradient dim {}",
            g.dim(),
            g_u.len()
        )));
    }
    let proj = RowspaceProjector::new(g, tol_rank_rel)?;
    let rowspace = proj.rowspace_component(g_u);
    // raw = P g_u - g_u = -(null-space component of g_u)
    let raw = sub(&rowspace, g_u);
    let raw_norm = norm(&raw);
    if raw_norm <= tol_null_rel * gu_norm {
        return Ok(OsdOutcome::Degenerate { residual_rel: raw_norm / gu_norm });
    }
    Ok(OsdOutcome::Direction(scale(&raw, gu_norm / raw_norm)))
}

/// Outcome of [`project_normal_plane`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionStatus {
    /// `g` had a non-positive component along `g_a` and was left alone.
    Unchanged,
    /// `g` was projected onto the plane orthogonal to `g_a` and rescaled
    /// back to its original norm.
    Projected,
    /// `g` was parallel to `g_a`; the zero vector is returned and the
    /// caller should flag the round.
    Collapsed,
}

/// Removes the component of `g` along the displacement `g_a` when that
/// component points with `g_a`, preserving `||g||`; the displacement
/// from the original gradient stays within `sqrt(2) * ||g||`.
pub fn project_normal_plane<F: Float>(g: &[F], g_a: &[F]) -> (Vec<F>, ProjectionStatus) {
    debug_assert_eq!(g.len(), g_a.len());
    let ga_sq = norm_sq(g_a);
    let d = dot(g, g_a);
    if ga_sq == F::zero() || d <= F::zero() {
        return (g.to_vec(), ProjectionStatus::Unchanged);
    }
    let raw = axpy(g, -(d / ga_sq), g_a);
    let g_norm = norm(g);
    let raw_norm = norm(&raw);
    if raw_norm <= cast::<F>(PROJECTION_COLLAPSE_REL) * g_norm {
        return (vec![F::zero(); g.len()], ProjectionStatus::Collapsed);
    }
    (scale(&raw, g_norm / raw_norm), ProjectionStatus::Projected)
}

/// Number of rows of `g` whose inner product with `d` is below
/// `-tol * ||row|| * ||d||`: the clients the update direction hurts.
pub fn conflict_count<F: Float>(d: &[F], g: &GradientMatrix<F>, tol: F) -> usize {
    let dn = norm(d);
    g.rows()
        .iter()
        .filter(|row| dot(row, d) < -tol * norm(row) * dn)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    fn vec_approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "coord {i}: expected {y}, got {x} (tol {tol})");
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Independent oracle: orthonormal basis of null(G) via repeated
    /// Gram-Schmidt against the row space and the basis built so far.
    fn null_space_basis(rows: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
        let mut rowspace: Vec<Vec<f64>> = Vec::new();
        for r in rows {
            let mut v = r.clone();
            for _ in 0..2 {
                for b in &rowspace {
                    let c = dot(&v, b);
                    v = axpy(&v, -c, b);
                }
            }
            let n = norm(&v);
            if n > 1e-10 * norm(r).max(1.0) {
                v = scale(&v, 1.0 / n);
                rowspace.push(v);
            }
        }
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for k in 0..dim {
            if basis.len() == dim - rowspace.len() {
                break;
            }
            let mut v = vec![0.0; dim];
            v[k] = 1.0;
            for _ in 0..2 {
                for b in rowspace.iter().chain(&basis) {
                    let c = dot(&v, b);
                    v = axpy(&v, -c, b);
                }
            }
            let n = norm(&v);
            if n > 1e-8 {
                basis.push(scale(&v, 1.0 / n));
            }
        }
        basis
    }

    /// Oracle for the direction solve: project -g_u onto span(basis),
    /// normalize, rescale to ||g_u||.
    fn oracle_direction(rows: &[Vec<f64>], g_u: &[f64]) -> Option<Vec<f64>> {
        let basis = null_space_basis(rows, g_u.len());
        let mut p = vec![0.0; g_u.len()];
        for b in &basis {
            let c = -dot(g_u, b);
            p = axpy(&p, c, b);
        }
        let n = norm(&p);
        if n <= 1e-9 * norm(g_u) {
            return None;
        }
        Some(scale(&p, norm(g_u) / n))
    }

    #[test]
    fn dot_norm_basics() {
        approx(dot(&[1.0, 2.0, 3.0], &[4.0, -5.0, 6.0]), 12.0, 1e-15);
        approx(norm(&[3.0, 4.0]), 5.0, 1e-15);
    }

    #[test]
    fn cos_sim_bounds_and_zero() {
        approx(cos_sim(&[1.0, 0.0], &[1.0, 0.0]), 1.0, 1e-15);
        approx(cos_sim(&[1.0, 0.0], &[-1.0, 0.0]), -1.0, 1e-15);
        approx(cos_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0, 1e-15);
        approx(cos_sim(&[0.0, 0.0], &[1.0, 1.0]), 0.0, 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = random_vec(&mut rng, 9);
            let b = random_vec(&mut rng, 9);
            let c = cos_sim(&a, &b);
            assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn gram_of_orthonormal_rows_is_identity() {
        let g = GradientMatrix::new(vec![
            (0, vec![1.0, 0.0, 0.0]),
            (1, vec![0.0, 1.0, 0.0]),
        ])
        .unwrap();
        let a = gram(&g);
        for i in 0..2 {
            for j in 0..2 {
                approx(a.at(i, j), if i == j { 1.0 } else { 0.0 }, 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matrix_sorts_and_validates() {
        let g = GradientMatrix::new(vec![(3, vec![1.0]), (1, vec![2.0])]).unwrap();
        assert_eq!(g.client_ids(), &[1, 3]);
        approx(g.rows()[0][0], 2.0, 0.0);
        assert!(GradientMatrix::<f64>::new(vec![]).is_err());
        assert!(GradientMatrix::new(vec![(0, vec![1.0]), (0, vec![2.0])]).is_err());
        assert!(GradientMatrix::new(vec![(0, vec![1.0]), (1, vec![2.0, 3.0])]).is_err());
    }

    #[test]
    fn jacobi_diagonal_matrix() {
        let a = SquareMat::from_rows(&[
            vec![4.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ]);
        let e = sym_eig(&a).unwrap();
        vec_approx(&e.values, &[4.0, 2.0, -1.0], 1e-14);
    }

    #[test]
    fn jacobi_two_by_two_known_values() {
        // [[2, 1], [1, 2]] has eigenvalues 3 and 1 with eigenvectors
        // (1, 1)/sqrt(2) and (1, -1)/sqrt(2).
        let a = SquareMat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let e = sym_eig(&a).unwrap();
        vec_approx(&e.values, &[3.0, 1.0], 1e-14);
        let s = 1.0 / 2.0_f64.sqrt();
        let v0 = [e.vectors.at(0, 0), e.vectors.at(1, 0)];
        let v1 = [e.vectors.at(0, 1), e.vectors.at(1, 1)];
        assert!((v0[0] - s).abs() < 1e-12 && (v0[1] - s).abs() < 1e-12
            || (v0[0] + s).abs() < 1e-12 && (v0[1] + s).abs() < 1e-12);
        assert!((v1[0] - s).abs() < 1e-12 && (v1[1] + s).abs() < 1e-12
            || (v1[0] + s).abs() < 1e-12 && (v1[1] - s).abs() < 1e-12);
    }

    #[test]
    fn jacobi_reconstructs_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = 2 + trial % 7;
            let rows: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, n + 3)).collect();
            let entries: Vec<(usize, Vec<f64>)> = rows.into_iter().enumerate().collect();
            let g = GradientMatrix::new(entries).unwrap();
            let a = gram(&g);
            let e = sym_eig(&a).unwrap();
            // Eigenvalues descending, PSD up to roundoff.
            for w in e.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
            for &v in &e.values {
                assert!(v >= -1e-10 * a.frobenius());
            }
            // Columns orthonormal.
            for i in 0..n {
                for j in i..n {
                    let mut d = 0.0;
                    for r in 0..n {
                        d += e.vectors.at(r, i) * e.vectors.at(r, j);
                    }
                    approx(d, if i == j { 1.0 } else { 0.0 }, 1e-10);
                }
            }
            // Reconstruction within 1e-8 * ||A||_F.
            let tol = 1e-8 * a.frobenius();
            for i in 0..n {
                for j in 0..n {
                    let mut v = 0.0;
                    for k in 0..n {
                        v += e.vectors.at(i, k) * e.values[k] * e.vectors.at(j, k);
                    }
                    approx(v, a.at(i, j), tol);
                }
            }
        }
    }

    #[test]
    fn pinv_apply_inverts_on_range_and_kills_null() {
        // Rank-1 Gram from a duplicated row.
        let g = GradientMatrix::new(vec![
            (0, vec![1.0, 0.0]),
            (1, vec![1.0, 0.0]),
        ])
        .unwrap();
        let e = sym_eig(&gram(&g)).unwrap();
        // A = [[1,1],[1,1]]; A+ maps (1,1) -> (1/2, 1/2), kills (1,-1).
        let y = e.pinv_apply(&[1.0, 1.0], cast(TOL_RANK_REL));
        vec_approx(&y, &[0.5, 0.5], 1e-12);
        let z = e.pinv_apply(&[1.0, -1.0], cast(TOL_RANK_REL));
        vec_approx(&z, &[0.0, 0.0], 1e-12);
    }

    #[test]
    fn osd_direction_single_row_hand_case() {
        // G = [[1,0,0]], g_u = (1,1,0): null space is the yz-plane, the
        // steepest feasible direction is (0,-1,0) scaled to ||g_u||.
        let g = GradientMatrix::new(vec![(1, vec![1.0, 0.0, 0.0])]).unwrap();
        let g_u = [1.0, 1.0, 0.0];
        match osd_direction(&g, &g_u, cast(TOL_RANK_REL), cast(TOL_NULL_REL)).unwrap() {
            OsdOutcome::Direction(d) => {
                vec_approx(&d, &[0.0, -(2.0_f64.sqrt()), 0.0], 1e-12);
            }
            OsdOutcome::Degenerate { .. } => panic!("expected a direction"),
        }
    }

    #[test]
    fn osd_direction_orthogonal_gu_returns_negation() {
        let g = GradientMatrix::new(vec![
            (0, vec![1.0, 0.0, 0.0, 0.0]),
            (2, vec![0.0, 1.0, 0.0, 0.0]),
        ])
        .unwrap();
        let g_u = [0.0, 0.0, 3.0, -4.0];
        match osd_direction(&g, &g_u, cast(TOL_RANK_REL), cast(TOL_NULL_REL)).unwrap() {
            OsdOutcome::Direction(d) => vec_approx(&d, &[0.0, 0.0, -3.0, 4.0], 1e-12),
            OsdOutcome::Degenerate { .. } => panic!("expected a direction"),
        }
    }

    #[test]
    fn osd_direction_conflict_geometry_toy() {
        // Two remaining gradients span the xy-plane; g_u overlaps both.
        // The feasible direction must not hurt either remaining client,
        // while the plain negated gradient conflicts with both.
        let g = GradientMatrix::new(vec![
            (1, vec![1.0, 0.0, 0.0]),
            (2, vec![0.0, 1.0, 0.0]),
        ])
        .unwrap();
        let g_u: [f64; 3] = [1.0, 1.0, 1.0];
        let d = match osd_direction(&g, &g_u, cast(TOL_RANK_REL), cast(TOL_NULL_REL)).unwrap() {
            OsdOutcome::Direction(d) => d,
            OsdOutcome::Degenerate { .. } => panic!("expected a direction"),
        };
        for row in g.rows() {
            assert!(dot(row, &d).abs() <= 1e-12);
        }
        assert_eq!(conflict_count(&d, &g, cast(CONFLICT_TOL)), 0);
        let neg: Vec<f64> = g_u.iter().map(|&x| -x).collect();
        assert_eq!(conflict_count(&neg, &g, cast(CONFLICT_TOL)), 2);
    }

    #[test]
    fn osd_direction_degenerate_when_gu_in_rowspace() {
        let g = GradientMatrix::new(vec![
            (0, vec![1.0, 0.0, 0.0]),
            (1, vec![0.0, 1.0, 0.0]),
        ])
        .unwrap();
        let g_u = [0.5, -2.0, 0.0];
        match osd_direction(&g, &g_u, cast(TOL_RANK_REL), cast(TOL_NULL_REL)).unwrap() {
            OsdOutcome::Degenerate { residual_rel } => assert!(residual_rel < 1e-9),
            OsdOutcome::Direction(_) => panic!("expected degenerate"),
        }
    }

    #[test]
    fn osd_direction_zero_gu_rejected() {
        let g = GradientMatrix::new(vec![(0, vec![1.0, 0.0])]).unwrap();
        assert!(osd_direction(&g, &[0.0, 0.0], cast::<f64>(TOL_RANK_REL), cast(TOL_NULL_REL)).is_err());
    }

    #[test]
    fn osd_direction_rank_deficient_rows() {
        // Duplicated and linearly dependent rows must not break the
        // pseudo-inverse path.
        let g = GradientMatrix::new(vec![
            (0, vec![1.0, 1.0, 0.0, 0.0]),
            (1, vec![1.0, 1.0, 0.0, 0.0]),
            (2, vec![2.0, 2.0, 0.0, 0.0]),
        ])
        .unwrap();
        let g_u: [f64; 4] = [1.0, 0.0, 1.0, 0.0];
        match osd_direction(&g, &g_u, cast(TOL_RANK_REL), cast(TOL_NULL_REL)).unwrap() {
            OsdOutcome::Direction(d) => {
                for row in g.rows() {
                    assert!(dot(row, &d).abs() <= 1e-10 * norm(row) * norm(&d));
                }
                approx(norm(&d), norm(&g_u), 1e-12);
                assert!(dot(&d, &g_u) <= 0.0);
            }
            OsdOutcome::Degenerate { .. } => panic!("expected a direction"),
        }
    }

    #[test]
    fn osd_direction_matches_null_space_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut produced = 0;
        for trial in 0..50 {
            let d = rng.random_range(5..30);
            let m = rng.random_range(1..=6).min(d - 1);
            let mut rows: Vec<Vec<f64>> = (0..m).map(|_| random_vec(&mut rng, d)).collect();
            if trial % 3 == 0 && m > 1 {
                rows[m - 1] = rows[0].clone();
            }
            let g_u = random_vec(&mut rng, d);
            let entries: Vec<(usize, Vec<f64>)> = rows.clone().into_iter().enumerate().collect();
            let g = GradientMatrix::new(entries).unwrap();
            match osd_direction(&g, &g_u, cast(TOL_RANK_REL), cast(TOL_NULL_REL)).unwrap() {
                OsdOutcome::Direction(dir) => {
                    let oracle = oracle_direction(&rows, &g_u).expect("oracle found a direction");
                    let dn = norm(&dir);
                    for (i, (&a, &b)) in dir.iter().zip(&oracle).enumerate() {
                        assert!(
                            (a - b).abs() <= 1e-7 * dn,
                            "trial {trial} coord {i}: {a} vs oracle {b}"
                        );
                    }
                    produced += 1;
                }
                OsdOutcome::Degenerate { .. } => {
                    assert!(oracle_direction(&rows, &g_u).is_none());
                }
            }
        }
        assert!(produced >= 45, "random instances were almost never feasible");
    }

    #[test]
    fn projection_leaves_nonpositive_dot_unchanged() {
        let g = [1.0, -2.0, 0.5];
        let ga = [0.0, 1.0, 0.0];
        let (out, status) = project_normal_plane(&g, &ga);
        assert_eq!(status, ProjectionStatus::Unchanged);
        vec_approx(&out, &g, 0.0);
        // Zero displacement also leaves the gradient alone.
        let (out, status) = project_normal_plane(&g, &[0.0, 0.0, 0.0]);
        assert_eq!(status, ProjectionStatus::Unchanged);
        vec_approx(&out, &g, 0.0);
    }

    #[test]
    fn projection_hand_case() {
        // g = (1,1), g_a = (1,0): remove the x-component, rescale back
        // to ||g|| = sqrt(2) -> (0, sqrt(2)).
        let (out, status) = project_normal_plane(&[1.0, 1.0], &[1.0, 0.0]);
        assert_eq!(status, ProjectionStatus::Projected);
        vec_approx(&out, &[0.0, 2.0_f64.sqrt()], 1e-15);
    }

    #[test]
    fn projection_collapses_on_parallel_input() {
        let (out, status) = project_normal_plane(&[2.0, 2.0], &[1.0, 1.0]);
        assert_eq!(status, ProjectionStatus::Collapsed);
        vec_approx(&out, &[0.0, 0.0], 0.0);
    }

    #[test]
    fn projection_random_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..500 {
            let d = rng.random_range(2..40);
            let g = random_vec(&mut rng, d);
            let ga = random_vec(&mut rng, d);
            let (out, status) = project_normal_plane(&g, &ga);
            let gn = norm(&g);
            match status {
                ProjectionStatus::Unchanged => {
                    assert!(dot(&g, &ga) <= 0.0);
                    vec_approx(&out, &g, 0.0);
                }
                ProjectionStatus::Projected => {
                    assert!(dot(&out, &ga).abs() <= 1e-10 * norm(&ga) * gn);
                    approx(norm(&out), gn, 1e-10 * gn);
                    assert!(norm(&sub(&out, &g)) <= 2.0_f64.sqrt() * gn * (1.0 + 1e-12));
                    // Idempotent up to roundoff.
                    let (again, _) = project_normal_plane(&out, &ga);
                    vec_approx(&again, &out, 1e-9 * gn);
                }
                ProjectionStatus::Collapsed => panic!("random inputs should not be parallel"),
            }
        }
    }

    #[test]
    fn conflict_count_hand_cases() {
        let g = GradientMatrix::new(vec![
            (0, vec![1.0, 0.0]),
            (1, vec![0.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(conflict_count(&[1.0, 1.0], &g, cast(CONFLICT_TOL)), 0);
        assert_eq!(conflict_count(&[-1.0, 1.0], &g, cast(CONFLICT_TOL)), 1);
        assert_eq!(conflict_count(&[-1.0, -1.0], &g, cast(CONFLICT_TOL)), 2);
        // Orthogonal direction does not count as a conflict.
        assert_eq!(conflict_count(&[0.0, 1.0], &g, cast(CONFLICT_TOL)), 0);
        // d = -g_1 against G = [g_1] is the canonical single conflict.
        let single = GradientMatrix::new(vec![(0, vec![1.0, 2.0])]).unwrap();
        assert_eq!(conflict_count(&[-1.0, -2.0], &single, cast(CONFLICT_TOL)), 1);
    }

    #[test]
    fn float32_kernels_agree_with_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows64: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 10)).collect();
        let gu64 = random_vec(&mut rng, 10);
        let rows32: Vec<(usize, Vec<f32>)> = rows64
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.iter().map(|&x| x as f32).collect()))
            .collect();
        let g64 = GradientMatrix::new(rows64.into_iter().enumerate().collect()).unwrap();
        let g32 = GradientMatrix::new(rows32).unwrap();
        let gu32: Vec<f32> = gu64.iter().map(|&x| x as f32).collect();
        let d64 = match osd_direction(&g64, &gu64, 1e-10, 1e-9).unwrap() {
            OsdOutcome::Direction(d) => d,
            _ => panic!(),
        };
        let d32 = match osd_direction(&g32, &gu32, 1e-6f32, 1e-5f32).unwrap() {
            OsdOutcome::Direction(d) => d,
            _ => panic!(),
        };
        for (a, b) in d64.iter().zip(&d32) {
            assert!((a - *b as f64).abs() < 1e-3);
        }
    }
}
