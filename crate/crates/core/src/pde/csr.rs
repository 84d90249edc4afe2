//! Compressed sparse row matrices (square, `u32` column indices).

use nalgebra::DMatrix;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<u32>,
    pub val: Vec<f64>,
}

impl Csr {
    /// Builds from triplets; duplicates are summed in input order, which keeps
    /// the result deterministic.
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        assert!(n <= u32::MAX as usize, "matrix too large for u32 indices");
        trip.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col = Vec::with_capacity(trip.len());
        let mut val: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *val.last_mut().expect("duplicate follows an entry") += v;
            } else {
                col.push(c as u32);
                val.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { n, row_ptr, col, val }
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let cols = &self.col[self.row_ptr[r]..self.row_ptr[r + 1]];
        match cols.binary_search(&(c as u32)) {
            Ok(k) => self.val[self.row_ptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn spmv(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(r, out)| {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.val[k] * x[self.col[k] as usize];
            }
            *out = acc;
        });
    }

    /// Whether every stored entry equals its transpose bit for bit.
    pub fn is_symmetric_bitwise(&self) -> bool {
        (0..self.n).all(|r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).all(|k| {
                let c = self.col[k] as usize;
                self.get(c, r).to_bits() == self.val[k].to_bits()
            })
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.col[k] as usize)] = self.val[k];
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let a = Csr::from_triplets(2, vec![(1, 0, 1.0), (0, 0, 2.0), (1, 0, 0.5), (0, 1, 1.5)]);
        assert_eq!(a.get(1, 0), 1.5);
        assert_eq!(a.get(0, 0), 2.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert!(a.is_symmetric_bitwise());
        let mut y = vec![0.0; 2];
        a.spmv(&[1.0, 2.0], &mut y);
        assert_eq!(y, vec![5.0, 1.5]);
    }
}
