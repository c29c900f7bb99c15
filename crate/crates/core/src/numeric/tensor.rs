use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(dim_err(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector view of a slice.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `y = self · x` for a plain vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(dim_err(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect())
    }

    /// `y = selfᵀ · x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(dim_err(format!(
                "matvec_t: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * xr;
            }
        }
        Ok(out)
    }

    /// Rank-one accumulation `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(dim_err(format!(
                "outer product {}x{} into {}x{}",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            )));
        }
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &vc) in row.iter_mut().zip(v) {
                *w += s * vc;
            }
        }
        Ok(())
    }

    /// `self += scale · other` (same shape).
    pub fn axpy(&mut self, scale: f64, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(format!(
                "axpy {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Standard matrix product with a fixed i-k-j summation order.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(dim_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_column() {
        let a = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor2D::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), b);
    }

    #[test]
    fn scalar_product() {
        let a = Tensor2D::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Tensor2D::from_vec(1, 1, vec![5.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[10.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = matmul(
            &Tensor2D::from_rows(&a).unwrap(),
            &Tensor2D::from_rows(&b).unwrap(),
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[i][k] * b[k][j];
                }
                assert!((got.get(i, j) - s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor2D::zeros(2, 3);
        let b = Tensor2D::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
        assert!(Tensor2D::from_vec(2, 2, vec![1.0]).is_err());
        assert!(a.matvec(&[1.0]).is_err());
    }

    #[test]
    fn matvec_agrees_with_matmul() {
        let a = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let x = [0.5, -1.0];
        let mv = a.matvec(&x).unwrap();
        let mm = matmul(&a, &Tensor2D::column(&x)).unwrap();
        assert_eq!(mv, mm.into_vec());
        let y = [1.0, 0.0, -1.0];
        let mt = a.matvec_t(&y).unwrap();
        assert_eq!(mt, matmul(&a.transpose(), &Tensor2D::column(&y)).unwrap().into_vec());
    }
}
