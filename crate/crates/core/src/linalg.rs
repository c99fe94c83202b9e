//! Fixed-size vector and matrix aliases shared by every module.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = SVector<f64, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat7 = SMatrix<f64, 7, 7>;
/// Sensitivity of a phase point (x, v) with respect to (t, x, v).
pub type Mat67 = SMatrix<f64, 6, 7>;

/// Rank-3 tensor stored as three matrices: `t[k][(i, j)] = d_i d_j d_k f`.
pub type Tensor3 = [Mat3; 3];

pub fn zero_tensor() -> Tensor3 {
    [Mat3::zeros(); 3]
}

/// Contract a rank-3 tensor with two vectors: `out_k = sum_ij T[k](i,j) a_i b_j`.
pub fn contract2(t: &Tensor3, a: &Vec3, b: &Vec3) -> Vec3 {
    Vec3::new(a.dot(&(t[0] * b)), a.dot(&(t[1] * b)), a.dot(&(t[2] * b)))
}

/// Contract a rank-3 tensor with one vector along its last slot: `sum_k T[k] a_k`.
pub fn contract1(t: &Tensor3, a: &Vec3) -> Mat3 {
    t[0] * a[0] + t[1] * a[1] + t[2] * a[2]
}

pub fn vec6(x: &Vec3, v: &Vec3) -> Vec6 {
    Vec6::new(x[0], x[1], x[2], v[0], v[1], v[2])
}

pub fn split6(z: &Vec6) -> (Vec3, Vec3) {
    (
        Vec3::new(z[0], z[1], z[2]),
        Vec3::new(z[3], z[4], z[5]),
    )
}

/// Unit vector perpendicular to `n`, chosen from the coordinate axis least aligned with it.
pub fn orthogonal_unit(n: &Vec3) -> Vec3 {
    let a = n.abs();
    let axis = if a[0] <= a[1] && a[0] <= a[2] {
        Vec3::x()
    } else if a[1] <= a[2] {
        Vec3::y()
    } else {
        Vec3::z()
    };
    axis.cross(n).normalize()
}

/// Points on the unit sphere from the Fibonacci lattice.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
