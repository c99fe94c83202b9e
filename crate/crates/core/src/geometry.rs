//! Implicit strictly convex domains `Omega = {xi < 0}`.
//!
//! Every domain kind supplies `xi` together with closed-form gradient, Hessian
//! and third derivatives. The remaining geometric machinery (outward normal,
//! tangent frame, nearest-point projection, radial boundary parametrisation)
//! is written once against those derivatives.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fibonacci_sphere, orthogonal_unit, zero_tensor, Mat3, Tensor3, Vec3};

/// Newton iteration cap for the nearest-point solve.
pub const PROJECTION_MAX_ITERS: usize = 50;

/// One term `coef * x^p0 * y^p1 * z^p2` of a polynomial level-set function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: [u32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainKind {
    UnitSphere,
    Ellipsoid {
        a: f64,
        b: f64,
        c: f64,
    },
    /// `xi(x) = sum of monomials`; the origin must lie inside and the domain
    /// must fit in the ball of radius `bound_radius`.
    Polynomial {
        terms: Vec<Monomial>,
        bound_radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        convexity: Option<f64>,
    },
}

/// Immutable description of a strictly convex domain together with the
/// derived length scales used throughout the toolkit.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    kind: DomainKind,
    convexity: f64,
    inradius: f64,
    outradius: f64,
}

/// Orthonormal frame at a boundary point with `tau1 x tau2 = n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFrame {
    pub point: Vec3,
    pub normal: Vec3,
    pub tau1: Vec3,
    pub tau2: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: Vec3,
    pub dist: f64,
    /// Tangential part of `point - x`; vanishes at the nearest point.
    pub stationarity: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub min_quotient: f64,
    pub ok: bool,
}

impl DomainSpec {
    pub fn unit_sphere() -> Self {
        Self {
            kind: DomainKind::UnitSphere,
            convexity: 2.0,
            inradius: 1.0,
            outradius: 1.0,
        }
    }

    pub fn ellipsoid(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && c > 0.0) || !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(Error::InvalidDomain(format!(
                "ellipsoid semi-axes must be positive, got ({a}, {b}, {c})"
            )));
        }
        let amax = a.max(b).max(c);
        let amin = a.min(b).min(c);
        Ok(Self {
            kind: DomainKind::Ellipsoid { a, b, c },
            convexity: 2.0 / (amax * amax),
            inradius: amin,
            outradius: amax,
        })
    }

    /// Polynomial domain. The convexity constant is taken from `convexity`
    /// when given, otherwise estimated as the smallest Hessian eigenvalue
    /// over a deterministic sample of the closed domain.
    pub fn polynomial(terms: Vec<Monomial>, bound_radius: f64, convexity: Option<f64>) -> Result<Self> {
        if terms.is_empty() || !(bound_radius > 0.0) {
            return Err(Error::InvalidDomain(
                "polynomial domain needs terms and a positive bound radius".into(),
            ));
        }
        let kind = DomainKind::Polynomial {
            terms,
            bound_radius,
            convexity,
        };
        let mut spec = Self {
            kind,
            convexity: convexity.unwrap_or(0.0),
            inradius: bound_radius,
            outradius: bound_radius,
        };
        if spec.xi(&Vec3::zeros()) >= 0.0 {
            return Err(Error::InvalidDomain("the origin must lie inside the domain".into()));
        }
        let mut dirs = fibonacci_sphere(2048);
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = 1.0;
            dirs.push(e);
            dirs.push(-e);
        }
        let radii: Vec<f64> = dirs
            .iter()
            .map(|d| spec.radial_distance(d).unwrap_or(bound_radius))
            .collect();
        spec.inradius = radii.iter().cloned().fold(f64::INFINITY, f64::min);
        spec.outradius = radii.iter().cloned().fold(0.0, f64::max);
        if convexity.is_none() {
            spec.convexity = spec.sampled_min_eigenvalue(4096, 0x5eed);
        }
        Ok(spec)
    }

    pub fn from_kind(kind: &DomainKind) -> Result<Self> {
        match kind {
            DomainKind::UnitSphere => Ok(Self::unit_sphere()),
            DomainKind::Ellipsoid { a, b, c } => Self::ellipsoid(*a, *b, *c),
            DomainKind::Polynomial {
                terms,
                bound_radius,
                convexity,
            } => Self::polynomial(terms.clone(), *bound_radius, *convexity),
        }
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    /// Lower bound `C_xi` on the Hessian quadratic form.
    pub fn convexity_constant(&self) -> f64 {
        self.convexity
    }

    /// Smallest distance from the origin to the boundary.
    pub fn inradius(&self) -> f64 {
        self.inradius
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.outradius
    }

    /// Width of the tubular neighbourhood on which nearest points are unique.
    pub fn tube_width(&self) -> f64 {
        0.1 * self.inradius
    }

    /// Tolerance on `|xi|` for a point to count as on the boundary.
    pub fn boundary_tolerance(&self) -> f64 {
        1e-9 * self.diameter()
    }

    pub fn xi(&self, x: &Vec3) -> f64 {
        match &self.kind {
            DomainKind::UnitSphere => x.norm_squared() - 1.0,
            DomainKind::Ellipsoid { a, b, c } => {
                (x[0] / a).powi(2) + (x[1] / b).powi(2) + (x[2] / c).powi(2) - 1.0
            }
            DomainKind::Polynomial { terms, .. } => poly_eval(terms, x, [0, 0, 0]),
        }
    }

    pub fn grad(&self, x: &Vec3) -> Vec3 {
        match &self.kind {
            DomainKind::UnitSphere => 2.0 * x,
            DomainKind::Ellipsoid { a, b, c } => {
                Vec3::new(2.0 * x[0] / (a * a), 2.0 * x[1] / (b * b), 2.0 * x[2] / (c * c))
            }
            DomainKind::Polynomial { terms, .. } => Vec3::new(
                poly_eval(terms, x, [1, 0, 0]),
                poly_eval(terms, x, [0, 1, 0]),
                poly_eval(terms, x, [0, 0, 1]),
            ),
        }
    }

    pub fn hess(&self, x: &Vec3) -> Mat3 {
        match &self.kind {
            DomainKind::UnitSphere => Mat3::identity() * 2.0,
            DomainKind::Ellipsoid { a, b, c } => {
                Mat3::from_diagonal(&Vec3::new(2.0 / (a * a), 2.0 / (b * b), 2.0 / (c * c)))
            }
            DomainKind::Polynomial { terms, .. } => {
                let mut h = Mat3::zeros();
                for i in 0..3 {
                    for j in i..3 {
                        let mut o = [0u32; 3];
                        o[i] += 1;
                        o[j] += 1;
                        let val = poly_eval(terms, x, o);
                        h[(i, j)] = val;
                        h[(j, i)] = val;
                    }
                }
                h
            }
        }
    }

    /// Third derivatives, `t[k][(i, j)] = d_i d_j d_k xi`.
    pub fn third(&self, x: &Vec3) -> Tensor3 {
        match &self.kind {
            DomainKind::UnitSphere | DomainKind::Ellipsoid { .. } => zero_tensor(),
            DomainKind::Polynomial { terms, .. } => {
                let mut t = zero_tensor();
                for (k, tk) in t.iter_mut().enumerate() {
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut o = [0u32; 3];
                            o[i] += 1;
                            o[j] += 1;
                            o[k] += 1;
                            tk[(i, j)] = poly_eval(terms, x, o);
                        }
                    }
                }
                t
            }
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.xi(x) <= self.boundary_tolerance()
    }

    /// Outward unit normal at a boundary point.
    pub fn normal_at(&self, x: &Vec3) -> Result<Vec3> {
        let r = self.xi(x).abs();
        if r > self.boundary_tolerance() {
            return Err(Error::NotOnBoundary {
                residual: r,
                tolerance: self.boundary_tolerance(),
            });
        }
        self.unit_normal(x)
    }

    /// `grad xi / |grad xi|` without the on-boundary check.
    pub fn unit_normal(&self, x: &Vec3) -> Result<Vec3> {
        let g = self.grad(x);
        let norm = g.norm();
        if norm < 1e-12 {
            return Err(Error::DegenerateGradient { norm });
        }
        Ok(g / norm)
    }

    pub fn frame_at(&self, x: &Vec3) -> Result<BoundaryFrame> {
        let n = self.normal_at(x)?;
        let tau1 = orthogonal_unit(&n);
        let tau2 = n.cross(&tau1);
        Ok(BoundaryFrame {
            point: *x,
            normal: n,
            tau1,
            tau2,
        })
    }

    /// Distance from the origin to the boundary along the unit direction `d`.
    pub fn radial_distance(&self, d: &Vec3) -> Option<f64> {
        match &self.kind {
            DomainKind::UnitSphere => Some(1.0 / d.norm()),
            DomainKind::Ellipsoid { a, b, c } => {
                let q = (d[0] / a).powi(2) + (d[1] / b).powi(2) + (d[2] / c).powi(2);
                Some(1.0 / q.sqrt())
            }
            DomainKind::Polynomial { bound_radius, .. } => {
                let f = |r: f64| self.xi(&(d * r));
                let (mut lo, mut hi) = (0.0, *bound_radius);
                if f(hi) <= 0.0 {
                    return None;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo < 1e-15 * hi {
                        break;
                    }
                }
                // polish with Newton along the ray
                let mut r = 0.5 * (lo + hi);
                for _ in 0..4 {
                    let g = self.grad(&(d * r)).dot(d);
                    if g.abs() < 1e-300 {
                        break;
                    }
                    let step = f(r) / g;
                    r -= step;
                    if step.abs() < 1e-16 * r {
                        break;
                    }
                }
                Some(r)
            }
        }
    }

    /// Boundary point in the direction of `x` seen from the origin.
    pub fn radial_boundary_point(&self, x: &Vec3) -> Option<Vec3> {
        let norm = x.norm();
        if norm < 1e-300 {
            return None;
        }
        let d = x / norm;
        self.radial_distance(&d).map(|r| d * r)
    }

    /// Boundary points from a Fibonacci lattice of directions.
    pub fn boundary_samples(&self, n: usize) -> Vec<Vec3> {
        fibonacci_sphere(n)
            .iter()
            .filter_map(|d| self.radial_boundary_point(d))
            .collect()
    }

    /// Distance from the boundary within which `project_to_boundary` accepts points.
    pub fn projection_reach(&self) -> f64 {
        2.0 * self.tube_width()
    }

    /// Nearest boundary point for `x` within `projection_reach()` of the boundary.
    ///
    /// Solves the stationarity system `y - x = lambda grad xi(y)`, `xi(y) = 0`
    /// by damped Newton starting from the radial boundary point of `x`.
    pub fn project_to_boundary(&self, x: &Vec3) -> Result<Projection> {
        let tube = self.projection_reach();
        let seed = self
            .radial_boundary_point(x)
            .ok_or(Error::OutsideTube { distance: f64::INFINITY, tube })?;
        let mut y = seed;
        let g0 = self.grad(&y);
        let mut lambda = (y - x).dot(&g0) / g0.norm_squared().max(1e-300);
        let residual = |y: &Vec3, lambda: f64| -> Vector4<f64> {
            let r = y - x - self.grad(y) * lambda;
            Vector4::new(r[0], r[1], r[2], self.xi(y))
        };
        let scale = 1.0 + x.norm();
        let mut res = residual(&y, lambda);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < PROJECTION_MAX_ITERS {
            iterations += 1;
            let g = self.grad(&y);
            let h = self.hess(&y);
            let mut jac = Matrix4::zeros();
            let top = Mat3::identity() - h * lambda;
            for i in 0..3 {
                for j in 0..3 {
                    jac[(i, j)] = top[(i, j)];
                }
                jac[(i, 3)] = -g[i];
                jac[(3, i)] = g[i];
            }
            let Some(step) = jac.lu().solve(&(-res)) else {
                break;
            };
            let mut damping = 1.0;
            let base = res.norm();
            let mut accepted = false;
            for _ in 0..30 {
                let y_new = y + Vec3::new(step[0], step[1], step[2]) * damping;
                let l_new = lambda + step[3] * damping;
                let r_new = residual(&y_new, l_new);
                if r_new.norm() < base || r_new.norm() < 1e-15 * scale {
                    y = y_new;
                    lambda = l_new;
                    res = r_new;
                    accepted = true;
                    break;
                }
                damping *= 0.5;
            }
            let step_norm = step.norm() * damping;
            if !accepted || step_norm < 1e-15 * scale || res.norm() < 1e-15 * scale {
                converged = res.norm() < 1e-10 * scale;
                break;
            }
        }
        if !converged && res.norm() >= 1e-10 * scale {
            return Err(Error::NoConvergence {
                iterations,
                residual: res.norm(),
            });
        }
        let dist = (x - y).norm();
        if dist >= tube {
            return Err(Error::OutsideTube { distance: dist, tube });
        }
        let n = self.unit_normal(&y)?;
        let diff = y - x;
        let stationarity = (diff - n * diff.dot(&n)).norm();
        Ok(Projection {
            point: y,
            dist,
            stationarity,
            iterations,
        })
    }

    /// Minimum Rayleigh quotient of the Hessian over sampled points of the
    /// closed domain. For each sample the minimum over unit directions is the
    /// smallest Hessian eigenvalue.
    pub fn validate_convexity(&self, n_samples: usize, seed: u64) -> Result<ConvexityReport> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        let min_quotient = self.sampled_min_eigenvalue(n_samples, seed);
        let ok = self.convexity > 0.0 && min_quotient >= self.convexity * (1.0 - 1e-9);
        Ok(ConvexityReport { min_quotient, ok })
    }

    fn sampled_min_eigenvalue(&self, n_samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = match &self.kind {
            DomainKind::Polynomial { bound_radius, .. } => *bound_radius,
            _ => self.outradius,
        };
        let mut min = f64::INFINITY;
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < n_samples && attempts < 200 * n_samples {
            attempts += 1;
            let x = Vec3::new(
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
            );
            // half the samples are pushed to the boundary along their ray
            let x = if accepted % 2 == 1 {
                match self.radial_boundary_point(&x) {
                    Some(b) => b,
                    None => continue,
                }
            } else {
                x
            };
            if x.norm() > r || self.xi(&x) > self.boundary_tolerance() {
                continue;
            }
            accepted += 1;
            let eig = SymmetricEigen::new(self.hess(&x));
            min = min.min(eig.eigenvalues.min());
        }
        min
    }
}

fn falling(p: u32, k: u32) -> f64 {
    (0..k).map(|i| (p - i) as f64).product()
}

fn poly_eval(terms: &[Monomial], x: &Vec3, order: [u32; 3]) -> f64 {
    terms
        .iter()
        .filter(|m| (0..3).all(|i| m.powers[i] >= order[i]))
        .map(|m| {
            let mut v = m.coef;
            for i in 0..3 {
                v *= falling(m.powers[i], order[i]) * x[i].powi((m.powers[i] - order[i]) as i32);
            }
            v
        })
        .sum()
}
