use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::affinity::SparseMatrix;
use crate::error::{Error, Result};

/// Graphs up to this many nodes use the dense solver.
pub const DENSE_LIMIT: usize = 4096;
/// Ritz residual tolerance of the iterative solver.
pub const LANCZOS_TOL: f64 = 1e-8;
/// Eigenvalues closer than this are treated as one degenerate cluster.
const CLUSTER_TOL: f64 = 1e-6;
const LANCZOS_SEED: u64 = 0x1a2c05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EigenRoute {
    /// Dense up to [`DENSE_LIMIT`] nodes, Lanczos above.
    #[default]
    Auto,
    Dense,
    Lanczos,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Degrees with isolated nodes given self-degree 1.
pub fn degrees(z: &SparseMatrix) -> Vec<f64> {
    z.row_sums().into_iter().map(|d| if d > 0.0 { d } else { 1.0 }).collect()
}

/// `D^-1/2 Z D^-1/2`.
pub fn normalized_adjacency(z: &SparseMatrix) -> SparseMatrix {
    let s: Vec<f64> = degrees(z).iter().map(|d| 1.0 / d.sqrt()).collect();
    let rows = (0..z.n()).map(|i| z.row(i).map(|(j, v)| (j, s[i] * v * s[j])).collect()).collect();
    SparseMatrix::from_rows(rows).expect("same sparsity pattern")
}

/// Dense row-major `L = I - D^-1/2 Z D^-1/2`.
pub fn laplacian_dense(z: &SparseMatrix) -> Vec<f64> {
    let n = z.n();
    let mut l: Vec<f64> = normalized_adjacency(z).to_dense().iter().map(|v| -v).collect();
    for i in 0..n {
        l[i * n + i] += 1.0;
    }
    l
}

/// Smallest `count` eigenpairs of the normalised Laplacian of `z`.
pub fn eigensolve(z: &SparseMatrix, count: usize) -> Result<Vec<EigenPair>> {
    eigensolve_with(z, count, EigenRoute::Auto)
}

pub fn eigensolve_with(z: &SparseMatrix, count: usize, route: EigenRoute) -> Result<Vec<EigenPair>> {
    let n = z.n();
    let count = count.min(n);
    if count == 0 {
        return Ok(Vec::new());
    }
    let dense = match route {
        EigenRoute::Auto => n <= DENSE_LIMIT,
        EigenRoute::Dense => true,
        EigenRoute::Lanczos => false,
    };
    let mut pairs = if dense { dense_smallest(z, count) } else { lanczos_smallest(z, count)? };
    canonicalize(z, &mut pairs);
    Ok(pairs)
}

fn dense_smallest(z: &SparseMatrix, count: usize) -> Vec<EigenPair> {
    let n = z.n();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &laplacian_dense(z)));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    order
        .into_iter()
        .take(count)
        .map(|k| EigenPair {
            value: eig.eigenvalues[k],
            vector: eig.eigenvectors.column(k).iter().copied().collect(),
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Two passes of classical Gram-Schmidt against `basis`.
fn orthogonalize<'a>(v: &mut [f64], basis: impl Iterator<Item = &'a Vec<f64>> + Clone) {
    for _ in 0..2 {
        for q in basis.clone() {
            let c = dot(v, q);
            axpy(v, -c, q);
        }
    }
}

/// Lanczos with full reorthogonalisation on `I + D^-1/2 Z D^-1/2`, whose
/// largest eigenpairs are the smallest of the Laplacian. One pair is locked
/// per run and later runs are deflated against it, so repeated eigenvalues
/// are found with their full multiplicity.
fn lanczos_smallest(z: &SparseMatrix, count: usize) -> Result<Vec<EigenPair>> {
    let n = z.n();
    let m = normalized_adjacency(z);
    let apply = |x: &[f64], y: &mut [f64]| {
        m.matvec(x, y);
        axpy(y, 1.0, x);
    };
    let cap = (10.0 * count as f64 * (n as f64).sqrt()).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(LANCZOS_SEED);
    let mut locked: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut iters = 0usize;
    while locked.len() < count {
        let mut q0: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut q0, locked.iter());
        normalize(&mut q0);
        let mut basis = vec![q0];
        let (mut alpha, mut beta) = (Vec::<f64>::new(), Vec::<f64>::new());
        let mut w = vec![0.0; n];
        loop {
            let j = basis.len() - 1;
            apply(&basis[j], &mut w);
            let a = dot(&w, &basis[j]);
            alpha.push(a);
            axpy(&mut w, -a, &basis[j]);
            if j > 0 {
                axpy(&mut w, -beta[j - 1], &basis[j - 1]);
            }
            orthogonalize(&mut w, locked.iter().chain(basis.iter()));
            let b = dot(&w, &w).sqrt();
            iters += 1;
            let k = basis.len();
            let exhausted = b < 1e-12 || k + locked.len() >= n;
            if exhausted || k % 5 == 0 || iters >= cap {
                let (_, s) = top_ritz(&alpha, &beta);
                let residual = (b * s[k - 1]).abs();
                if exhausted || residual < LANCZOS_TOL {
                    let mut y = vec![0.0; n];
                    for (q, c) in basis.iter().zip(&s) {
                        axpy(&mut y, *c, q);
                    }
                    orthogonalize(&mut y, locked.iter());
                    normalize(&mut y);
                    locked.push(y);
                    break;
                }
                if iters >= cap {
                    return Err(Error::NoConvergence(iters));
                }
            }
            beta.push(b);
            let next: Vec<f64> = w.iter().map(|x| x / b).collect();
            basis.push(next);
        }
    }
    let mut ly = vec![0.0; n];
    let mut pairs: Vec<EigenPair> = locked
        .into_iter()
        .map(|y| {
            apply(&y, &mut ly);
            EigenPair {
                value: 2.0 - dot(&y, &ly),
                vector: y,
            }
        })
        .collect();
    pairs.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(pairs)
}

/// Largest eigenpair of the tridiagonal matrix `(alpha, beta)`.
fn top_ritz(alpha: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let k = alpha.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let top = (0..k).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).expect("k > 0");
    (eig.eigenvalues[top], eig.eigenvectors.column(top).iter().copied().collect())
}

/// Fixes the basis of each degenerate eigenvalue cluster and then each sign.
///
/// Within a cluster the first vector is the projection of `D^1/2 1`, the
/// rest are projections of unit coordinate vectors in index order, all
/// Gram-Schmidt orthonormalised. The entry of largest magnitude (first on
/// ties) is made positive.
fn canonicalize(z: &SparseMatrix, pairs: &mut [EigenPair]) {
    let n = z.n();
    let dsqrt: Vec<f64> = degrees(z).iter().map(|d| d.sqrt()).collect();
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[end].value - pairs[end - 1].value < CLUSTER_TOL {
            end += 1;
        }
        if end - start > 1 {
            let span: Vec<Vec<f64>> = pairs[start..end].iter().map(|p| p.vector.clone()).collect();
            let project = |u: &[f64]| {
                let mut p = vec![0.0; n];
                for v in &span {
                    axpy(&mut p, dot(u, v), v);
                }
                p
            };
            let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(span.len());
            let mut candidates = std::iter::once(dsqrt.clone()).chain((0..n).map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                e
            }));
            while chosen.len() < span.len() {
                let Some(u) = candidates.next() else { break };
                let mut p = project(&u);
                orthogonalize(&mut p, chosen.iter());
                if dot(&p, &p).sqrt() > 1e-3 {
                    normalize(&mut p);
                    chosen.push(p);
                }
            }
            if chosen.len() == span.len() {
                for (pair, v) in pairs[start..end].iter_mut().zip(chosen) {
                    pair.vector = v;
                }
            }
        }
        start = end;
    }
    for p in pairs.iter_mut() {
        normalize(&mut p.vector);
        let lead = p
            .vector
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| if v.abs() > best.1.abs() { (i, v) } else { best });
        if lead.1 < 0.0 {
            p.vector.iter_mut().for_each(|v| *v = -*v);
        }
    }
}
