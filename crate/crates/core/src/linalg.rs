//! Small fixed-size dense linear algebra used by the geometry and fitting code.

use crate::scalar::{lit, Real};

pub type Mat<T, const N: usize> = [[T; N]; N];

pub fn zeros<T: Real, const N: usize>() -> Mat<T, N> {
    [[T::zero(); N]; N]
}

pub fn identity<T: Real, const N: usize>() -> Mat<T, N> {
    let mut m = zeros::<T, N>();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

pub fn mat_vec<T: Real, const N: usize>(m: &Mat<T, N>, x: &[T; N]) -> [T; N] {
    let mut y = [T::zero(); N];
    for i in 0..N {
        y[i] = (0..N).map(|j| m[i][j] * x[j]).sum();
    }
    y
}

pub fn mat_mul<T: Real, const N: usize>(a: &Mat<T, N>, b: &Mat<T, N>) -> Mat<T, N> {
    let mut c = zeros::<T, N>();
    for i in 0..N {
        for j in 0..N {
            c[i][j] = (0..N).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot vanishes (singular to working precision).
pub fn solve<T: Real, const N: usize>(a: &Mat<T, N>, b: &[T; N]) -> Option<[T; N]> {
    let mut m = *a;
    let mut x = *b;
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    if scale == T::zero() {
        return None;
    }
    let tiny = scale * T::epsilon() * lit(N as f64);
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&i, &j| {
                m[i][col]
                    .abs()
                    .partial_cmp(&m[j][col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if !(m[pivot][col].abs() > tiny) {
            return None;
        }
        m.swap(col, pivot);
        x.swap(col, pivot);
        for row in col + 1..N {
            let f = m[row][col] / m[col][col];
            if f == T::zero() {
                continue;
            }
            for k in col..N {
                let v = m[col][k];
                m[row][k] -= f * v;
            }
            let v = x[col];
            x[row] -= f * v;
        }
    }
    for col in (0..N).rev() {
        let mut acc = x[col];
        for k in col + 1..N {
            acc -= m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    Some(x)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns of the second matrix.
pub fn sym_eigen<T: Real, const N: usize>(a: &Mat<T, N>) -> ([T; N], Mat<T, N>) {
    let mut m = *a;
    let mut v = identity::<T, N>();
    let two = lit::<T>(2.0);
    for _sweep in 0..100 {
        let off: T = (0..N)
            .flat_map(|i| (0..N).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let diag: T = (0..N).map(|i| m[i][i] * m[i][i]).sum();
        if off <= diag * T::epsilon() * T::epsilon() || off == T::zero() {
            break;
        }
        for p in 0..N {
            for q in p + 1..N {
                if m[p][q] == T::zero() {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (two * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..N {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..N {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: [usize; N] = std::array::from_fn(|i| i);
    order.sort_by(|&i, &j| {
        m[i][i]
            .partial_cmp(&m[j][j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = std::array::from_fn(|k| m[order[k]][order[k]]);
    let mut vectors = zeros::<T, N>();
    for (k, &src) in order.iter().enumerate() {
        for r in 0..N {
            vectors[r][k] = v[r][src];
        }
    }
    (values, vectors)
}

pub fn det3<T: Real>(m: &Mat<T, 3>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse of a 3×3 matrix via the adjugate; `None` when singular.
pub fn inv3<T: Real>(m: &Mat<T, 3>) -> Option<Mat<T, 3>> {
    let det = det3(m);
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    if scale == T::zero() || !(det.abs() > scale * scale * scale * T::epsilon()) {
        return None;
    }
    let adj = [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
        ],
        [
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
        ],
        [
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ];
    let mut out = adj;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v /= det;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_matches_known_solution() {
        let a = [[4.0f64, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let x = [1.0, -2.0, 0.5];
        let b = mat_vec(&a, &x);
        let got = solve(&a, &b).unwrap();
        for i in 0..3 {
            assert!((got[i] - x[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn solve_rejects_singular() {
        let a = [[1.0, 2.0], [2.0, 4.0]];
        assert!(solve(&a, &[1.0, 2.0]).is_none());
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let a = [
            [4.0, 1.0, 0.5, 0.0],
            [1.0, 3.0, 0.2, 0.1],
            [0.5, 0.2, 2.0, 0.3],
            [0.0, 0.1, 0.3, 1.0],
        ];
        let (vals, vecs) = sym_eigen(&a);
        for w in vals.windows(2) {
            assert!(w[0] <= w[1]);
        }
        for i in 0..4 {
            for j in 0..4 {
                let r: f64 = (0..4).map(|k| vecs[i][k] * vals[k] * vecs[j][k]).sum();
                assert!((r - a[i][j]).abs() < 1e-12, "{i},{j}");
            }
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let m = [[2.0f64, 0.3, 1.0], [0.1, 1.5, -0.4], [0.0, 0.2, 1.0]];
        let inv = inv3(&m).unwrap();
        let p = mat_mul(&m, &inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p[i][j] - e).abs() < 1e-14);
            }
        }
        assert!(inv3(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_none());
    }
}
