//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Smallest admissible pivot of the unit-diagonal rescaling of an SPD matrix.
const PIVOT_FLOOR: f64 = 1e-11;

/// Cholesky factor of an SPD matrix after Jacobi scaling, or `None` when
/// the matrix is singular or numerically close to it.
pub(crate) struct ScaledCholesky {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    scale: DVector<f64>,
}

impl ScaledCholesky {
    pub(crate) fn new(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let d = a[(i, i)];
            if !(d > 0.0 && d.is_finite()) {
                return None;
            }
            scale[i] = d.sqrt();
        }
        let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (scale[i] * scale[j]));
        let chol = scaled.cholesky()?;
        let l = chol.l_dirty();
        if (0..n).any(|i| !(l[(i, i)] * l[(i, i)] > PIVOT_FLOOR)) {
            return None;
        }
        Some(Self { chol, scale })
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let scaled = b.component_div(&self.scale);
        self.chol.solve(&scaled).component_div(&self.scale)
    }

    #[cfg(test)]
    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        let n = self.scale.len();
        let inv = self.chol.inverse();
        DMatrix::from_fn(n, n, |i, j| inv[(i, j)] / (self.scale[i] * self.scale[j]))
    }
}

/// Accumulates `w * v v'` into the upper triangle of a row-major `p x p` buffer.
#[inline]
pub(crate) fn rank_one_upper(acc: &mut [f64], v: &[f64], w: f64) {
    let p = v.len();
    for a in 0..p {
        let wa = w * v[a];
        let row = &mut acc[a * p..(a + 1) * p];
        for b in a..p {
            row[b] += wa * v[b];
        }
    }
}

/// Symmetric matrix from an upper-triangle row-major buffer.
pub(crate) fn symmetric_from_upper(acc: &[f64], p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        acc[a * p + b]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_badly_scaled_system() {
        let a = DMatrix::from_row_slice(2, 2, &[1e8, 1e3, 1e3, 1.0 + 1e-2]);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let b = &a * &x;
        let sol = ScaledCholesky::new(&a).unwrap().solve(&b);
        assert!((sol - x).amax() < 1e-8);
    }

    #[test]
    fn rejects_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(ScaledCholesky::new(&a).is_none());
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(ScaledCholesky::new(&a).is_none());
    }

    #[test]
    fn inverse_matches() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = ScaledCholesky::new(&a).unwrap().inverse();
        assert!((&a * inv - DMatrix::identity(3, 3)).amax() < 1e-12);
    }
}
