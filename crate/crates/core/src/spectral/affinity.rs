use rayon::prelude::*;

use super::hsv::PixelEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Tensor};

/// Entries below this are not stored in semantic affinities.
pub const SEMANTIC_DROP: f64 = 1e-6;

/// Square sparse matrix in compressed-row form, columns sorted per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists. Duplicate columns add.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if c >= n {
                    return Err(Error::InvalidShape {
                        shape: vec![n, c],
                        reason: "column index out of range".into(),
                    });
                }
                if cols.len() > *row_ptr.last().expect("nonempty") && *cols.last().expect("nonempty") == c {
                    *vals.last_mut().expect("nonempty") += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n, row_ptr, cols, vals })
    }

    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: vec![n, n],
                got: vec![dense.len()],
            });
        }
        Self::from_rows(
            (0..n)
                .map(|i| (0..n).filter(|&j| dense[i * n + j] != 0.0).map(|j| (j, dense[i * n + j])).collect())
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// Largest `|A(i,j) - A(j,i)|`.
    pub fn asymmetry(&self) -> f64 {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// `max(f_i . f_j, 0)` between L2-normalised feature vectors of a
/// `C x H x W` map; nodes are grid pixels in row-major order.
pub fn affinity_semantic(f: &Tensor<f32>) -> Result<SparseMatrix> {
    expect_rank(f.shape(), 3, "semantic features")?;
    let (c, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    let mut rows = vec![0.0f64; hw * c];
    for p in 0..hw {
        let r = &mut rows[p * c..(p + 1) * c];
        for (ch, v) in r.iter_mut().enumerate() {
            *v = f.data()[ch * hw + p] as f64;
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let out: Vec<Vec<(usize, f64)>> = (0..hw)
        .into_par_iter()
        .map(|i| {
            let ri = &rows[i * c..(i + 1) * c];
            (0..hw)
                .filter_map(|j| {
                    let d: f64 = ri.iter().zip(&rows[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum();
                    (d >= SEMANTIC_DROP).then_some((j, d.min(1.0)))
                })
                .collect()
        })
        .collect();
    SparseMatrix::from_rows(out)
}

fn dist(a: &PixelEmbedding, b: &PixelEmbedding) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `k` nearest nodes of `j` (itself included), ties to the lower index.
pub(crate) fn knn(emb: &[PixelEmbedding], j: usize, k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = emb.iter().enumerate().map(|(i, e)| (i, dist(e, &emb[j]))).collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d
}

/// `1 - |X_i - X_j|` on K-nearest-neighbour pairs, clamped at 0 and
/// symmetrised by the entrywise maximum.
pub fn affinity_knn(emb: &[PixelEmbedding], k: usize) -> Result<SparseMatrix> {
    let n = emb.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidNeighbors { k, n });
    }
    let lists: Vec<Vec<(usize, f64)>> = (0..n).into_par_iter().map(|j| knn(emb, j, k)).collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (j, list) in lists.into_iter().enumerate() {
        for (i, d) in list {
            let v = (1.0 - d).max(0.0);
            if v > 0.0 {
                rows[i].push((j, v));
                rows[j].push((i, v));
            }
        }
    }
    for row in &mut rows {
        row.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
        row.dedup_by_key(|e| e.0);
    }
    SparseMatrix::from_rows(rows)
}

/// `Z_sem + alpha * Z_knn`.
pub fn affinity_combine(sem: &SparseMatrix, knn: &SparseMatrix, alpha: f64) -> Result<SparseMatrix> {
    if sem.n() != knn.n() {
        return Err(Error::ShapeMismatch {
            expected: vec![sem.n(), sem.n()],
            got: vec![knn.n(), knn.n()],
        });
    }
    let rows = (0..sem.n())
        .map(|i| sem.row(i).chain(knn.row(i).map(|(j, v)| (j, alpha * v))).collect())
        .collect();
    SparseMatrix::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_emb(n: usize, rng: &mut impl Rng) -> Vec<PixelEmbedding> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..0.6))).collect()
    }

    #[test]
    fn semantic_matches_dense_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::from_fn([3, 4, 5], |_| rng.random_range(-1.0f32..1.0));
        let z = affinity_semantic(&f).unwrap();
        let n = 20;
        for i in 0..n {
            for j in 0..n {
                let (mut d, mut ni, mut nj) = (0.0f64, 0.0f64, 0.0f64);
                for c in 0..3 {
                    let (a, b) = (f.data()[c * n + i] as f64, f.data()[c * n + j] as f64);
                    d += a * b;
                    ni += a * a;
                    nj += b * b;
                }
                let expect = (d / (ni.sqrt() * nj.sqrt())).max(0.0);
                let expect = if expect < SEMANTIC_DROP { 0.0 } else { expect };
                assert!((z.get(i, j) - expect).abs() < 1e-12);
            }
            assert!((z.get(i, i) - 1.0).abs() < 1e-12);
        }
        let anti = Tensor::new([1, 1, 2], vec![1.0f32, -1.0]).unwrap();
        assert_eq!(affinity_semantic(&anti).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = rand_emb(30, &mut rng);
        let k = 5;
        let z = affinity_knn(&emb, k).unwrap();
        let mut dense = vec![0.0f64; 900];
        for j in 0..30 {
            let mut all: Vec<(f64, usize)> = (0..30).map(|i| (dist(&emb[i], &emb[j]), i)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for &(d, i) in &all[..k] {
                let v = (1.0 - d).max(0.0);
                dense[i * 30 + j] = dense[i * 30 + j].max(v);
                dense[j * 30 + i] = dense[j * 30 + i].max(v);
            }
        }
        for i in 0..30 {
            assert_eq!(z.get(i, i), 1.0);
            for j in 0..30 {
                assert!((z.get(i, j) - dense[i * 30 + j]).abs() < 1e-15);
            }
        }
        assert!(matches!(affinity_knn(&emb, 30), Err(Error::InvalidNeighbors { k: 30, n: 30 })));
    }

    #[test]
    fn identical_pixels_have_unit_affinity() {
        let emb = vec![[0.1; 6], [0.1; 6], [0.9; 6]];
        let z = affinity_knn(&emb, 2).unwrap();
        assert_eq!(z.get(0, 1), 1.0);
        assert_eq!(z.get(1, 0), 1.0);
    }

    #[test]
    fn combine_is_entrywise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..36).map(|_| if rng.random_bool(0.4) { rng.random() } else { 0.0 }).collect();
        let b: Vec<f64> = (0..36).map(|_| if rng.random_bool(0.4) { rng.random() } else { 0.0 }).collect();
        let sa = SparseMatrix::from_dense(6, &a).unwrap();
        let sb = SparseMatrix::from_dense(6, &b).unwrap();
        assert_eq!(affinity_combine(&sa, &sb, 0.0).unwrap().to_dense(), a);
        let z = affinity_combine(&sa, &sb, 5.0).unwrap().to_dense();
        for i in 0..36 {
            assert!((z[i] - (a[i] + 5.0 * b[i])).abs() < 1e-15);
        }
        let small = SparseMatrix::from_dense(2, &[0.0; 4]).unwrap();
        assert!(affinity_combine(&sa, &small, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn affinities_are_symmetric_and_nonnegative(seed in any::<u64>(), n in 3usize..25, k in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = rand_emb(n, &mut rng);
            let f = Tensor::from_fn([4, 1, n], |_| rng.random_range(-1.0f32..1.0));
            let z = affinity_combine(&affinity_semantic(&f).unwrap(), &affinity_knn(&emb, k).unwrap(), 5.0).unwrap();
            prop_assert!(z.asymmetry() < 1e-6);
            prop_assert!(z.to_dense().iter().all(|&v| v >= 0.0));
        }
    }
}
