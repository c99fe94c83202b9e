//! Boundary-adapted moving frames. An anchor `p = (z, w)` fixes spherical
//! angles around the axis `n(z) x w`; the boundary is parametrised radially,
//! `eta(phi, theta) = rho(d) d`, and the tube by
//! `x = eta - x_perp n`, `v = -v_perp n + sum_k v_par_k (d_k eta - x_perp d_k n)`.

use serde::{Deserialize, Serialize};

use crate::characteristics::{BounceRecord, BounceType};
use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::geometry::DomainSpec;
use crate::linalg::{contract2, Mat3, Mat6, Vec3, Vec6};
use nalgebra::Matrix2;

/// Default half-angle of the excluded cone around the chart axis.
pub const POLE_EXCLUSION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartAnchor {
    pub z: Vec3,
    pub w: Vec3,
    /// Orthonormal basis; `e3` is the polar axis.
    pub e1: Vec3,
    pub e2: Vec3,
    pub e3: Vec3,
    pub north: Vec3,
    pub south: Vec3,
    pub exclusion: f64,
}

impl ChartAnchor {
    pub fn new(domain: &DomainSpec, z: Vec3, w: Vec3) -> Result<Self> {
        let n = domain.normal_at(&z)?;
        if n.dot(&w).abs() > 1e-12 || (w.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("anchor direction must be a unit tangent".into()));
        }
        let e3 = n.cross(&w).normalize();
        let zp = z - e3 * z.dot(&e3);
        if zp.norm() < 1e-12 {
            return Err(Error::InvalidArgument("anchor point lies on its own polar axis".into()));
        }
        let e1 = zp.normalize();
        let e2 = e3.cross(&e1);
        let north = domain
            .radial_boundary_point(&e3)
            .ok_or_else(|| Error::InvalidDomain("no boundary point on the polar axis".into()))?;
        let south = domain
            .radial_boundary_point(&(-e3))
            .ok_or_else(|| Error::InvalidDomain("no boundary point on the polar axis".into()))?;
        Ok(Self {
            z,
            w,
            e1,
            e2,
            e3,
            north,
            south,
            exclusion: POLE_EXCLUSION,
        })
    }

    /// Anchor at a boundary point with `w = tau_1(z)`.
    pub fn standard(domain: &DomainSpec, z: Vec3) -> Result<Self> {
        let f = domain.frame_at(&z)?;
        Self::new(domain, z, f.tau1)
    }

    /// Anchor used for a bounce: Types I and III take `w = tau_1(x^l)`,
    /// Type II takes the normalised tangential part of `v^l`.
    pub fn for_bounce(domain: &DomainSpec, b: &BounceRecord) -> Result<Self> {
        match b.bounce_type {
            BounceType::I | BounceType::III => Self::standard(domain, b.x_ell),
            BounceType::II => {
                let n = domain.normal_at(&b.x_ell)?;
                let tan = b.v_out - n * n.dot(&b.v_out);
                if tan.norm() < 1e-12 * (1.0 + b.v_out.norm()) {
                    return Self::standard(domain, b.x_ell);
                }
                let w = tan.normalize();
                // re-orthogonalise against rounding
                let w = (w - n * n.dot(&w)).normalize();
                Self::new(domain, b.x_ell, w)
            }
        }
    }

    fn direction(&self, phi: f64, theta: f64) -> [Vec3; 6] {
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let b = |a: f64, c: f64, d: f64| self.e1 * a + self.e2 * c + self.e3 * d;
        [
            b(st * cp, st * sp, ct),       // d
            b(-st * sp, st * cp, 0.0),     // d_phi
            b(ct * cp, ct * sp, -st),      // d_theta
            b(-st * cp, -st * sp, 0.0),    // d_phi_phi
            b(-ct * sp, ct * cp, 0.0),     // d_phi_theta
            b(-st * cp, -st * sp, -ct),    // d_theta_theta
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameCoords {
    pub x_perp: f64,
    /// `(phi, theta)`, with `phi` in `(-pi, pi]` and `theta` away from the poles.
    pub x_par: [f64; 2],
    pub v_perp: f64,
    pub v_par: [f64; 2],
}

impl FrameCoords {
    pub fn to_vec(&self) -> Vec6 {
        Vec6::new(self.x_perp, self.x_par[0], self.x_par[1], self.v_perp, self.v_par[0], self.v_par[1])
    }

    pub fn from_vec(c: &Vec6) -> Self {
        Self {
            x_perp: c[0],
            x_par: [c[1], c[2]],
            v_perp: c[3],
            v_par: [c[4], c[5]],
        }
    }
}

/// Boundary parametrisation and normal with derivatives up to second order.
#[derive(Debug, Clone, Copy)]
pub struct ChartPoint {
    pub eta: Vec3,
    pub d_eta: [Vec3; 2],
    pub dd_eta: [[Vec3; 2]; 2],
    pub n: Vec3,
    pub d_n: [Vec3; 2],
    pub dd_n: [[Vec3; 2]; 2],
}

impl ChartPoint {
    pub fn new(domain: &DomainSpec, anchor: &ChartAnchor, x_par: [f64; 2]) -> Result<Self> {
        let [phi, theta] = x_par;
        if theta <= anchor.exclusion || theta >= std::f64::consts::PI - anchor.exclusion {
            return Err(Error::OutOfChart(format!("theta = {theta} inside the polar exclusion")));
        }
        let [d, dp, dt, dpp, dpt, dtt] = anchor.direction(phi, theta);
        let dd = [[dpp, dpt], [dpt, dtt]];
        let di = [dp, dt];
        let rho = domain
            .radial_distance(&d)
            .ok_or_else(|| Error::OutOfChart("no boundary point along chart direction".into()))?;
        let y = d * rho;
        let g = domain.grad(&y);
        let h = domain.hess(&y);
        let t3 = domain.third(&y);
        let gd = g.dot(&d);
        if gd.abs() < 1e-14 {
            return Err(Error::OutOfChart("boundary is tangent to the radial direction".into()));
        }
        let mut rho_i = [0.0; 2];
        let mut y_i = [Vec3::zeros(); 2];
        for i in 0..2 {
            rho_i[i] = -rho * g.dot(&di[i]) / gd;
            y_i[i] = d * rho_i[i] + di[i] * rho;
        }
        let mut y_ij = [[Vec3::zeros(); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let partial = di[j] * rho_i[i] + di[i] * rho_i[j] + dd[i][j] * rho;
                let rho_ij = -(y_i[i].dot(&(h * y_i[j])) + g.dot(&partial)) / gd;
                y_ij[i][j] = d * rho_ij + partial;
            }
        }
        let s = g.norm();
        let n = g / s;
        let gi = [h * y_i[0], h * y_i[1]];
        let si = [n.dot(&gi[0]), n.dot(&gi[1])];
        let ni = [(gi[0] - n * si[0]) / s, (gi[1] - n * si[1]) / s];
        let mut nij = [[Vec3::zeros(); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let gij = contract2(&t3, &y_i[i], &y_i[j]) + h * y_ij[i][j];
                let sij = ni[j].dot(&gi[i]) + n.dot(&gij);
                nij[i][j] = (gij - ni[j] * si[i] - ni[i] * si[j] - n * sij) / s;
            }
        }
        Ok(Self {
            eta: y,
            d_eta: y_i,
            dd_eta: y_ij,
            n,
            d_n: ni,
            dd_n: nij,
        })
    }

    /// First fundamental form `g_ij = d_i eta . d_j eta`.
    pub fn metric(&self) -> Matrix2<f64> {
        let e = &self.d_eta;
        Matrix2::new(e[0].dot(&e[0]), e[0].dot(&e[1]), e[1].dot(&e[0]), e[1].dot(&e[1]))
    }

    /// Coefficients with `-d_i n = sum_k a_ik d_k eta`, i.e. `a = -[d_i n . d_j eta] g^{-1}`.
    pub fn shape_matrix(&self) -> Result<Matrix2<f64>> {
        let g = self.metric();
        let det = g.determinant();
        if det < 1e-12 {
            return Err(Error::SingularMetric { det });
        }
        let (n, e) = (&self.d_n, &self.d_eta);
        let b = Matrix2::new(n[0].dot(&e[0]), n[0].dot(&e[1]), n[1].dot(&e[0]), n[1].dot(&e[1]));
        let ginv = Matrix2::new(g[(1, 1)], -g[(0, 1)], -g[(1, 0)], g[(0, 0)]) / det;
        Ok(-b * ginv)
    }

    /// `n . (d_1 eta x d_2 eta)`.
    pub fn orientation(&self) -> f64 {
        self.n.dot(&self.d_eta[0].cross(&self.d_eta[1]))
    }

    /// Columns of the position block: `[-n, d_1 eta - x_perp d_1 n, d_2 eta - x_perp d_2 n]`.
    fn position_block(&self, x_perp: f64) -> Mat3 {
        Mat3::from_columns(&[
            -self.n,
            self.d_eta[0] - self.d_n[0] * x_perp,
            self.d_eta[1] - self.d_n[1] * x_perp,
        ])
    }
}

/// `G = (I + x_perp a)^{-1}` in closed form.
pub fn g_matrix(a: &Matrix2<f64>, x_perp: f64) -> Matrix2<f64> {
    let det = 1.0 + x_perp * (a[(0, 0)] + a[(1, 1)]) + x_perp * x_perp * (a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)]);
    Matrix2::new(
        1.0 + x_perp * a[(1, 1)],
        -x_perp * a[(0, 1)],
        -x_perp * a[(1, 0)],
        1.0 + x_perp * a[(0, 0)],
    ) / det
}

pub fn chart_forward(domain: &DomainSpec, anchor: &ChartAnchor, c: &FrameCoords) -> Result<(Vec3, Vec3)> {
    let p = ChartPoint::new(domain, anchor, c.x_par)?;
    let x = p.eta - p.n * c.x_perp;
    let mut v = -p.n * c.v_perp;
    for k in 0..2 {
        v += (p.d_eta[k] - p.d_n[k] * c.x_perp) * c.v_par[k];
    }
    Ok((x, v))
}

pub fn chart_inverse(domain: &DomainSpec, anchor: &ChartAnchor, x: &Vec3, v: &Vec3) -> Result<FrameCoords> {
    let proj = match domain.project_to_boundary(x) {
        Ok(p) => p,
        Err(Error::OutsideTube { .. }) => return Err(Error::OutOfTube { xi: domain.xi(x) }),
        Err(e) => return Err(e),
    };
    let xb = proj.point;
    let d = xb.normalize();
    let theta = d.dot(&anchor.e3).clamp(-1.0, 1.0).acos();
    let pole_gap = theta.min(std::f64::consts::PI - theta);
    if pole_gap <= anchor.exclusion {
        return Err(Error::NearPole {
            distance: pole_gap,
            exclusion: anchor.exclusion,
        });
    }
    let phi = d.dot(&anchor.e2).atan2(d.dot(&anchor.e1));
    let p = ChartPoint::new(domain, anchor, [phi, theta])?;
    let x_perp = (xb - x).dot(&p.n);
    let sol = p
        .position_block(x_perp)
        .lu()
        .solve(v)
        .ok_or(Error::SingularMetric { det: 0.0 })?;
    Ok(FrameCoords {
        x_perp,
        x_par: [phi, theta],
        v_perp: sol[0],
        v_par: [sol[1], sol[2]],
    })
}

/// Jacobian of `Phi_p` with respect to `(x_perp, x_par, v_perp, v_par)`.
///
/// The position column for `x_perp` is `-n`; the block structure is lower
/// triangular with equal diagonal blocks, so `det = det(A)^2`.
pub fn chart_jacobian(domain: &DomainSpec, anchor: &ChartAnchor, c: &FrameCoords) -> Result<Mat6> {
    let p = ChartPoint::new(domain, anchor, c.x_par)?;
    let a = p.position_block(c.x_perp);
    let mut j = Mat6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&a);
    let vp = c.v_par;
    let col0 = -(p.d_n[0] * vp[0] + p.d_n[1] * vp[1]);
    j.fixed_view_mut::<3, 1>(3, 0).copy_from(&col0);
    for i in 0..2 {
        let mut col = -p.d_n[i] * c.v_perp;
        for k in 0..2 {
            col += (p.dd_eta[i][k] - p.dd_n[i][k] * c.x_perp) * vp[k];
        }
        j.fixed_view_mut::<3, 1>(3, 1 + i).copy_from(&col);
    }
    Ok(j)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRhs {
    pub dx_perp: f64,
    pub dx_par: [f64; 2],
    pub f_perp: f64,
    pub f_par: [f64; 2],
}

impl FrameRhs {
    pub fn to_vec(&self) -> Vec6 {
        Vec6::new(self.dx_perp, self.dx_par[0], self.dx_par[1], self.f_perp, self.f_par[0], self.f_par[1])
    }
}

/// Right-hand side of the characteristics ODE in frame coordinates.
pub fn frame_rhs(
    domain: &DomainSpec,
    anchor: &ChartAnchor,
    c: &FrameCoords,
    s: f64,
    field: &FieldSpec,
) -> Result<FrameRhs> {
    let p = ChartPoint::new(domain, anchor, c.x_par)?;
    let a = p.shape_matrix()?;
    let gm = g_matrix(&a, c.x_perp);
    let vp = c.v_par;
    let x = p.eta - p.n * c.x_perp;
    let e = field.value(s, &x);

    let mut vv_eta = Vec3::zeros();
    let mut vv_n = Vec3::zeros();
    for j in 0..2 {
        for k in 0..2 {
            vv_eta += p.dd_eta[j][k] * (vp[j] * vp[k]);
            vv_n += p.dd_n[j][k] * (vp[j] * vp[k]);
        }
    }
    let v_dn = p.d_n[0] * vp[0] + p.d_n[1] * vp[1];
    let f_perp = vv_eta.dot(&p.n) - c.x_perp * vv_n.dot(&p.n) - e.dot(&p.n);

    let w = v_dn * (2.0 * c.v_perp) - vv_eta + vv_n * c.x_perp + e;
    let orient = p.orientation();
    let coef = [
        -w.dot(&p.n.cross(&p.d_eta[1])) / orient,
        w.dot(&p.n.cross(&p.d_eta[0])) / orient,
    ];
    let mut f_par = [0.0; 2];
    for (j, fj) in f_par.iter_mut().enumerate() {
        *fj = gm[(0, j)] * coef[0] + gm[(1, j)] * coef[1];
    }
    Ok(FrameRhs {
        dx_perp: c.v_perp,
        dx_par: vp,
        f_perp,
        f_par,
    })
}

/// Integrate the frame ODE from `s0` to `s1` with `steps` RK4 steps.
pub fn integrate_frame(
    domain: &DomainSpec,
    anchor: &ChartAnchor,
    c: &FrameCoords,
    s0: f64,
    s1: f64,
    steps: usize,
    field: &FieldSpec,
) -> Result<FrameCoords> {
    let h = (s1 - s0) / steps as f64;
    let rhs = |s: f64, y: &Vec6| -> Result<Vec6> {
        Ok(frame_rhs(domain, anchor, &FrameCoords::from_vec(y), s, field)?.to_vec())
    };
    let mut y = c.to_vec();
    let mut s = s0;
    for _ in 0..steps {
        let k1 = rhs(s, &y)?;
        let k2 = rhs(s + 0.5 * h, &(y + k1 * (0.5 * h)))?;
        let k3 = rhs(s + 0.5 * h, &(y + k2 * (0.5 * h)))?;
        let k4 = rhs(s + h, &(y + k3 * h))?;
        y += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        s += h;
    }
    Ok(FrameCoords::from_vec(&y))
}

/// Differential of the chart change `Phi_q^{-1} o Phi_p` at the phase point
/// with `p`-coordinates `c`.
pub fn chart_change(domain: &DomainSpec, p: &ChartAnchor, q: &ChartAnchor, c: &FrameCoords) -> Result<Mat6> {
    let (x, v) = chart_forward(domain, p, c)?;
    let cq = chart_inverse(domain, q, &x, &v)?;
    let jp = chart_jacobian(domain, p, c)?;
    let jq = chart_jacobian(domain, q, &cq)?;
    jq.lu()
        .solve(&jp)
        .ok_or(Error::SingularMetric { det: jq.determinant() })
}
