//! LU factorization for band matrices.
//!
//! The spline equality systems are 6M x 6M with at most 8 subdiagonals and 7
//! superdiagonals, so dense factorization would waste O(M^2) work. This is
//! the textbook banded Gaussian elimination with partial pivoting: storage
//! follows the usual band layout with `kl` extra superdiagonal rows to absorb
//! pivoting fill-in, giving O(M) factor and solve cost.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BandError {
    /// No usable pivot in this elimination column.
    #[error("matrix is singular at column {0}")]
    Singular(usize),
}

/// An n x n matrix with `kl` subdiagonals and `ku` superdiagonals.
/// Entries outside the band cannot be set.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    /// Column-major band storage, `2kl + ku + 1` rows per column. Entry
    /// (i, j) lives at `j * ldab + (kl + ku + i - j)`; the top `kl` rows of
    /// each column hold pivoting fill-in above the original band.
    ab: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> BandedMatrix {
        assert!(n > 0);
        let ldab = 2 * kl + ku + 1;
        BandedMatrix {
            n,
            kl,
            ku,
            ab: vec![0.0; ldab * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn ldab(&self) -> usize {
        2 * self.kl + self.ku + 1
    }

    /// True when (i, j) is inside the fill-extended band that storage covers.
    fn in_storage(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i + self.ku + self.kl >= j && j + self.kl >= i
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(self.in_storage(i, j), "({i}, {j}) outside band");
        j * self.ldab() + (self.kl + self.ku + i - j)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_storage(i, j) {
            self.ab[self.idx(i, j)]
        } else {
            0.0
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            i + self.ku >= j && j + self.kl >= i,
            "entry ({i}, {j}) outside the declared band"
        );
        let k = self.idx(i, j);
        self.ab[k] = v;
    }

    /// In-place PA = LU with partial pivoting. L's unit diagonal is implicit;
    /// its multipliers overwrite the subdiagonal band, U overwrites the rest.
    pub fn factor(mut self) -> Result<BandedLu, BandError> {
        let n = self.n;
        let kl = self.kl;
        let ku = self.ku;
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let row_end = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.ab[self.idx(k, k)].abs();
            for i in k + 1..=row_end {
                let v = self.ab[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best < 1e-300 {
                return Err(BandError::Singular(k));
            }
            piv[k] = p;
            let col_end = (k + ku + kl).min(n - 1);
            if p != k {
                for j in k..=col_end {
                    let a = self.idx(k, j);
                    let b = self.idx(p, j);
                    self.ab.swap(a, b);
                }
            }
            let pivot = self.ab[self.idx(k, k)];
            for i in k + 1..=row_end {
                let l = self.ab[self.idx(i, k)] / pivot;
                let li = self.idx(i, k);
                self.ab[li] = l;
                if l != 0.0 {
                    for j in k + 1..=col_end {
                        let u = self.ab[self.idx(k, j)];
                        let t = self.idx(i, j);
                        self.ab[t] -= l * u;
                    }
                }
            }
        }
        Ok(BandedLu {
            mat: self,
            piv,
        })
    }
}

/// Factored form; solves share the band storage of the input matrix.
#[derive(Debug, Clone)]
pub struct BandedLu {
    mat: BandedMatrix,
    piv: Vec<usize>,
}

impl BandedLu {
    /// Solves Ax = b for one right-hand side, overwriting `b` with x.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.mat.n;
        let kl = self.mat.kl;
        let ku = self.mat.ku;
        assert_eq!(b.len(), n);
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let row_end = (k + kl).min(n - 1);
            for i in k + 1..=row_end {
                b[i] -= self.mat.ab[self.mat.idx(i, k)] * b[k];
            }
        }
        for i in (0..n).rev() {
            let col_end = (i + ku + kl).min(n - 1);
            let mut s = b[i];
            for j in i + 1..=col_end {
                s -= self.mat.ab[self.mat.idx(i, j)] * b[j];
            }
            b[i] = s / self.mat.ab[self.mat.idx(i, i)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tridiagonal_hand_case() {
        // [2 1 0; 1 2 1; 0 1 2] x = [4; 8; 8] -> x = [1; 2; 3].
        let mut m = BandedMatrix::zeros(3, 1, 1);
        for i in 0..3 {
            m.set(i, i, 2.0);
        }
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        m.set(1, 2, 1.0);
        m.set(2, 1, 1.0);
        let lu = m.factor().unwrap();
        let mut b = vec![4.0, 8.0, 8.0];
        lu.solve_in_place(&mut b);
        for (got, want) in b.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn pivoting_rescues_tiny_diagonal() {
        // Without row swaps the 1e-30 pivot would destroy all accuracy.
        let mut m = BandedMatrix::zeros(2, 1, 1);
        m.set(0, 0, 1e-30);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        m.set(1, 1, 1.0);
        let lu = m.factor().unwrap();
        // Exact solution of [[1e-30, 1], [1, 1]] x = [1, 2] is ~[1, 1].
        let mut b = vec![1.0, 2.0];
        lu.solve_in_place(&mut b);
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((b[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_column_is_singular() {
        let mut m = BandedMatrix::zeros(3, 1, 1);
        m.set(0, 0, 1.0);
        m.set(2, 2, 1.0);
        m.set(0, 1, 0.0);
        // Column 1 is all zero.
        assert_eq!(m.factor().unwrap_err(), BandError::Singular(1));
    }

    #[test]
    #[should_panic(expected = "outside the declared band")]
    fn set_outside_band_panics() {
        let mut m = BandedMatrix::zeros(5, 1, 1);
        m.set(0, 3, 1.0);
    }

    #[test]
    fn matches_dense_lu_on_random_bands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, kl, ku) in &[(6usize, 2usize, 3usize), (40, 8, 7), (120, 8, 7), (17, 5, 1)] {
            let mut band = BandedMatrix::zeros(n, kl, ku);
            let mut dense = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i + ku >= j && j + kl >= i {
                        let v: f64 = rng.gen_range(-1.0..1.0);
                        // Mild diagonal boost keeps the random system far
                        // from singular without hiding pivoting behavior.
                        let v = if i == j { v + 3.0 } else { v };
                        band.set(i, j, v);
                        dense[(i, j)] = v;
                    }
                }
            }
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = rhs.clone();
            band.factor().unwrap().solve_in_place(&mut x);
            let dense_x = dense
                .lu()
                .solve(&DVector::from_column_slice(&rhs))
                .unwrap();
            for i in 0..n {
                assert!(
                    (x[i] - dense_x[i]).abs() <= 1e-9,
                    "n={n} row {i}: {} vs {}",
                    x[i],
                    dense_x[i]
                );
            }
        }
    }

    #[test]
    fn band_wider_than_matrix_is_fine() {
        // The spline system uses kl=8 even when n=6 (single piece).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let mut band = BandedMatrix::zeros(n, 8, 7);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v: f64 = rng.gen_range(-1.0..1.0);
                let v = if i == j { v + 2.0 } else { v };
                band.set(i, j, v);
                dense[(i, j)] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut x = rhs.clone();
        band.factor().unwrap().solve_in_place(&mut x);
        let dense_x = dense.lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
        for i in 0..n {
            assert!((x[i] - dense_x[i]).abs() <= 1e-10);
        }
    }
}
