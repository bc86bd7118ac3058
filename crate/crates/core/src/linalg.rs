//! Small dense helpers on top of nalgebra. Strip widths are tiny, so
//! everything here is plain `DMatrix<f64>`.

use nalgebra::{DMatrix, DVector, RowDVector};

pub type Mat = DMatrix<f64>;
pub type ColVec = DVector<f64>;
pub type RowVec = RowDVector<f64>;

/// Operator norm induced by the sup norm: the maximal absolute row sum.
pub fn max_row_sum(m: &Mat) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn row_sums(m: &Mat) -> Vec<f64> {
    m.row_iter().map(|r| r.iter().sum()).collect()
}

/// Largest entrywise absolute difference.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn min_entry(m: &Mat) -> f64 {
    m.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn ones(m: usize) -> ColVec {
    ColVec::from_element(m, 1.0)
}

pub fn uniform_row(m: usize) -> RowVec {
    RowVec::from_element(m, 1.0 / m as f64)
}

pub fn uniform_stochastic(m: usize) -> Mat {
    Mat::from_element(m, m, 1.0 / m as f64)
}

/// Identity pushed slightly towards the uniform matrix so that it is a
/// strictly positive stochastic matrix.
pub fn mollified_identity(m: usize, eta: f64) -> Mat {
    Mat::identity(m, m) * (1.0 - eta) + uniform_stochastic(m) * eta
}

/// Solves `lhs * X = rhs` for each right-hand side; `None` when singular.
pub fn solve_many(lhs: &Mat, rhs: &[&Mat]) -> Option<Vec<Mat>> {
    let lu = lhs.clone().lu();
    rhs.iter().map(|b| lu.solve(b)).collect()
}

/// Leading (Perron) eigenvalue of a nonnegative matrix by power iteration.
pub fn perron_root(m: &Mat) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[(0, 0)];
    }
    let mut v = ColVec::from_element(n, 1.0 / n as f64);
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = m * &v;
        let s: f64 = w.iter().sum();
        if s <= 0.0 {
            return 0.0;
        }
        let next = w / s;
        let diff = (&next - &v).amax();
        v = next;
        lambda = s;
        if diff < 1e-15 {
            break;
        }
    }
    lambda
}
