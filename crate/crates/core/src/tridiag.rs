//! Prefactored Thomas solver for the implicit heat step.

/// Tridiagonal matrix `diag = 1 + 2r`, off-diagonals `−r`, factored once.
#[derive(Debug, Clone)]
pub(crate) struct SymmetricToeplitz {
    off: f64,
    /// Modified super-diagonal `c'_i`.
    upper: Vec<f64>,
    /// Reciprocal pivots.
    inv_pivot: Vec<f64>,
}

impl SymmetricToeplitz {
    /// `I − r·D²` on `m` unknowns with zero ghost values.
    pub(crate) fn heat(m: usize, r: f64) -> Self {
        let diag = 1.0 + 2.0 * r;
        let off = -r;
        let mut upper = vec![0.0; m];
        let mut inv_pivot = vec![0.0; m];
        let mut prev = 0.0;
        for i in 0..m {
            let piv = diag - off * prev;
            inv_pivot[i] = 1.0 / piv;
            prev = off / piv;
            upper[i] = prev;
        }
        SymmetricToeplitz {
            off,
            upper,
            inv_pivot,
        }
    }

    pub(crate) fn solve(&self, rhs: &[f64], out: &mut [f64]) {
        let m = rhs.len();
        let mut prev = 0.0;
        for i in 0..m {
            prev = (rhs[i] - self.off * prev) * self.inv_pivot[i];
            out[i] = prev;
        }
        for i in (0..m.saturating_sub(1)).rev() {
            out[i] -= self.upper[i] * out[i + 1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_against_matvec() {
        let m = 37;
        let r = 3.7;
        let a = SymmetricToeplitz::heat(m, r);
        let x: Vec<f64> = (0..m).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let mut b = vec![0.0; m];
        for i in 0..m {
            b[i] = (1.0 + 2.0 * r) * x[i];
            if i > 0 {
                b[i] -= r * x[i - 1];
            }
            if i + 1 < m {
                b[i] -= r * x[i + 1];
            }
        }
        let mut y = vec![0.0; m];
        a.solve(&b, &mut y);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
