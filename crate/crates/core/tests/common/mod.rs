//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

/// Cyclic Jacobi on a symmetric matrix; returns eigenvalues and column
/// eigenvectors `v[row][col]`, unsorted.
pub fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Sorted eigenvalues of `A x = σ M x` through `M^{-1/2} A M^{-1/2}`.
pub fn generalized_eigenvalues(a: &[Vec<f64>], m: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let (mu, q) = jacobi(m.to_vec());
    assert!(mu.iter().all(|&x| x > 0.0), "mass matrix not positive definite");
    // M^{-1/2} = Q diag(μ^{-1/2}) Qᵀ
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = (0..n).map(|k| q[i][k] * q[j][k] / mu[k].sqrt()).sum();
        }
    }
    let sa: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| s[i][k] * a[k][j]).sum()).collect())
        .collect();
    let mut c: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| sa[i][k] * s[k][j]).sum()).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (c[i][j] + c[j][i]);
            c[i][j] = avg;
            c[j][i] = avg;
        }
    }
    let mut ev = jacobi(c).0;
    ev.sort_by(f64::total_cmp);
    ev
}

/// Bilinear element matrices from 1D tensor products, corner order
/// (0,0), (1,0), (0,1), (1,1).
pub fn q1_stiffness(hx: f64, hy: f64, c: f64) -> [[f64; 4]; 4] {
    let k1 = [[1.0, -1.0], [-1.0, 1.0]];
    let m1 = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
    let mut e = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            let (ax, ay, bx, by) = (a % 2, a / 2, b % 2, b / 2);
            e[a][b] = c * (hy / hx * k1[ax][bx] * m1[ay][by] + hx / hy * m1[ax][bx] * k1[ay][by]);
        }
    }
    e
}

pub fn q1_mass(hx: f64, hy: f64, c: f64) -> [[f64; 4]; 4] {
    let m1 = [[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]];
    let mut e = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            e[a][b] = c * hx * hy * m1[a % 2][b % 2] * m1[a / 2][b / 2];
        }
    }
    e
}

/// Dense Neumann stiffness and weighted mass on a block of `nx × ny` cells
/// of size `h`, cell data row-major.
pub fn block_matrices(nx: usize, ny: usize, h: f64, k: &[f64], w: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = (nx + 1) * (ny + 1);
    let mut a = vec![vec![0.0; n]; n];
    let mut m = vec![vec![0.0; n]; n];
    for j in 0..ny {
        for i in 0..nx {
            let c = j * nx + i;
            let nodes = [j * (nx + 1) + i, j * (nx + 1) + i + 1, (j + 1) * (nx + 1) + i, (j + 1) * (nx + 1) + i + 1];
            let ke = q1_stiffness(h, h, k[c]);
            let me = q1_mass(h, h, w[c]);
            for p in 0..4 {
                for q in 0..4 {
                    a[nodes[p]][nodes[q]] += ke[p][q];
                    m[nodes[p]][nodes[q]] += me[p][q];
                }
            }
        }
    }
    (a, m)
}
