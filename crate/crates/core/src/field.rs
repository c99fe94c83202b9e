//! Time-dependent external fields `E(t, x)` with analytic derivatives up to
//! second order, plus sampling-based certification of the boundary sign
//! condition `E . n >= C_E > 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DomainSpec;
use crate::linalg::{zero_tensor, Mat3, Tensor3, Vec3};

/// Safety margin subtracted from the sampled sign minimum.
pub const SIGN_MARGIN: f64 = 1e-9;
/// Relative FD tolerance above which a field is rejected as malformed.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-6;

/// Scalar time modulation `g(t) = bias + amplitude * sin(frequency * t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Modulation {
    pub bias: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Default for Modulation {
    fn default() -> Self {
        Self {
            bias: 1.0,
            amplitude: 0.0,
            frequency: 1.0,
            phase: 0.0,
        }
    }
}

impl Modulation {
    pub fn constant() -> Self {
        Self::default()
    }

    /// `g(t) = sin(t)`.
    pub fn sine() -> Self {
        Self {
            bias: 0.0,
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.0,
        }
    }

    pub fn is_static(&self) -> bool {
        self.amplitude == 0.0
    }

    fn value(&self, t: f64) -> f64 {
        self.bias + self.amplitude * (self.frequency * t + self.phase).sin()
    }

    fn d1(&self, t: f64) -> f64 {
        self.amplitude * self.frequency * (self.frequency * t + self.phase).cos()
    }

    fn d2(&self, t: f64) -> f64 {
        -self.amplitude * self.frequency.powi(2) * (self.frequency * t + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldKind {
    Zero,
    Constant {
        e: [f64; 3],
        #[serde(default)]
        modulation: Modulation,
    },
    /// `E = gain * g(t) * x`.
    OutwardRadial {
        gain: f64,
        #[serde(default)]
        modulation: Modulation,
    },
    /// `E = gain * g(t) * (1 + |x|^2) * x`, the negative gradient of a quartic potential.
    RadialCubic {
        gain: f64,
        #[serde(default)]
        modulation: Modulation,
    },
    /// User-supplied affine field `E = g(t) * (A x + b)`.
    Linear {
        matrix: [[f64; 3]; 3],
        #[serde(default)]
        offset: [f64; 3],
        #[serde(default)]
        modulation: Modulation,
    },
}

/// External field, optionally frozen at `E(T, x)` for times beyond `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    #[serde(flatten)]
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

/// Value and derivatives of the field at one point.
///
/// `grad[(i, j)] = d E_i / d x_j` and `hess[i][(j, k)] = d_j d_k E_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldJet {
    pub e: Vec3,
    pub dt: Vec3,
    pub grad: Mat3,
    pub dtt: Vec3,
    pub dt_grad: Mat3,
    pub hess: Tensor3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldCertificate {
    /// Sampled minimum of `E . n` on the boundary minus a safety margin.
    pub c_e: f64,
    /// Sampled supremum of `|E|` and all derivatives up to order two.
    pub c2_norm: f64,
    pub sup_e: f64,
    pub sup_grad: f64,
    pub sup_dt: f64,
    pub holds_sign: bool,
    pub samples: usize,
}

impl FieldSpec {
    pub fn new(kind: FieldKind) -> Self {
        Self { kind, horizon: None }
    }

    pub fn zero() -> Self {
        Self::new(FieldKind::Zero)
    }

    pub fn constant(e: Vec3) -> Self {
        Self::new(FieldKind::Constant {
            e: [e[0], e[1], e[2]],
            modulation: Modulation::constant(),
        })
    }

    pub fn outward_radial(gain: f64) -> Self {
        Self::new(FieldKind::OutwardRadial {
            gain,
            modulation: Modulation::constant(),
        })
    }

    pub fn modulated_radial(gain: f64, modulation: Modulation) -> Self {
        Self::new(FieldKind::OutwardRadial { gain, modulation })
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = Some(horizon);
        self
    }

    fn modulation(&self) -> Modulation {
        match &self.kind {
            FieldKind::Zero => Modulation::constant(),
            FieldKind::Constant { modulation, .. }
            | FieldKind::OutwardRadial { modulation, .. }
            | FieldKind::RadialCubic { modulation, .. }
            | FieldKind::Linear { modulation, .. } => *modulation,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, FieldKind::Zero)
    }

    /// True when `E` does not depend on time.
    pub fn is_static(&self) -> bool {
        self.modulation().is_static()
    }

    /// Time actually fed to the analytic formulas, and whether the field is frozen.
    fn effective_time(&self, t: f64) -> (f64, bool) {
        match self.horizon {
            Some(h) if t > h => (h, true),
            _ => (t, false),
        }
    }

    /// Spatial profile `S(x)` with `E = g(t) S(x)`, its Jacobian and Hessian.
    fn spatial(&self, x: &Vec3) -> (Vec3, Mat3, Tensor3) {
        match &self.kind {
            FieldKind::Zero => (Vec3::zeros(), Mat3::zeros(), zero_tensor()),
            FieldKind::Constant { e, .. } => (Vec3::from(*e), Mat3::zeros(), zero_tensor()),
            FieldKind::OutwardRadial { gain, .. } => (x * *gain, Mat3::identity() * *gain, zero_tensor()),
            FieldKind::RadialCubic { gain, .. } => {
                let r2 = x.norm_squared();
                let s = x * (gain * (1.0 + r2));
                let j = (Mat3::identity() * (1.0 + r2) + x * x.transpose() * 2.0) * *gain;
                let mut h = zero_tensor();
                for (i, hi) in h.iter_mut().enumerate() {
                    for jj in 0..3 {
                        for k in 0..3 {
                            let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                            hi[(jj, k)] =
                                2.0 * gain * (d(i, jj) * x[k] + d(i, k) * x[jj] + d(jj, k) * x[i]);
                        }
                    }
                }
                (s, j, h)
            }
            FieldKind::Linear { matrix, offset, .. } => {
                let a = Mat3::from_row_slice(&matrix.concat());
                (a * x + Vec3::from(*offset), a, zero_tensor())
            }
        }
    }

    pub fn value(&self, t: f64, x: &Vec3) -> Vec3 {
        let (t, _) = self.effective_time(t);
        let (s, _, _) = self.spatial(x);
        s * self.modulation().value(t)
    }

    pub fn jet(&self, t: f64, x: &Vec3) -> FieldJet {
        let (t, frozen) = self.effective_time(t);
        let m = self.modulation();
        let (s, j, h) = self.spatial(x);
        let g = m.value(t);
        let (g1, g2) = if frozen { (0.0, 0.0) } else { (m.d1(t), m.d2(t)) };
        FieldJet {
            e: s * g,
            dt: s * g1,
            grad: j * g,
            dtt: s * g2,
            dt_grad: j * g1,
            hess: [h[0] * g, h[1] * g, h[2] * g],
        }
    }

    pub fn dt(&self, t: f64, x: &Vec3) -> Vec3 {
        self.jet(t, x).dt
    }

    pub fn grad_x(&self, t: f64, x: &Vec3) -> Mat3 {
        self.jet(t, x).grad
    }

    /// Potential `phi` with `E = -grad phi`, available for static conservative fields.
    pub fn potential(&self, x: &Vec3) -> Option<f64> {
        let m = self.modulation();
        if !m.is_static() {
            return None;
        }
        let g = m.bias;
        match &self.kind {
            FieldKind::Zero => Some(0.0),
            FieldKind::Constant { e, .. } => Some(-g * Vec3::from(*e).dot(x)),
            FieldKind::OutwardRadial { gain, .. } => Some(-g * gain * 0.5 * x.norm_squared()),
            FieldKind::RadialCubic { gain, .. } => {
                let r2 = x.norm_squared();
                Some(-g * gain * (0.5 * r2 + 0.25 * r2 * r2))
            }
            FieldKind::Linear { matrix, offset, .. } => {
                let a = Mat3::from_row_slice(&matrix.concat());
                if (a - a.transpose()).abs().max() > 1e-14 {
                    return None;
                }
                Some(-g * (0.5 * x.dot(&(a * x)) + Vec3::from(*offset).dot(x)))
            }
        }
    }

    /// Largest relative discrepancy between the analytic derivatives and
    /// central finite differences, over `n_samples` random points of
    /// `[0, 1] x [-1, 1]^3`. Discrepancies are measured against
    /// `max(|analytic|, 1)` so vanishing derivatives are compared absolutely.
    pub fn field_derivative_check(&self, n_samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let rel = |a: f64, fd: f64, scale: f64| (a - fd).abs() / scale.max(1.0);
        for _ in 0..n_samples {
            let t = rng.random_range(0.0..1.0);
            let x = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if self.horizon.is_some_and(|hz| (t - hz).abs() < 2.0 * h) {
                continue;
            }
            let jet = self.jet(t, &x);
            let jp = self.jet(t + h, &x);
            let jm = self.jet(t - h, &x);
            let fd_dt = (jp.e - jm.e) / (2.0 * h);
            let fd_dtt = (jp.dt - jm.dt) / (2.0 * h);
            let fd_dtg = (jp.grad - jm.grad) / (2.0 * h);
            let scale = jet.dt.amax();
            for i in 0..3 {
                worst = worst.max(rel(jet.dt[i], fd_dt[i], scale));
                worst = worst.max(rel(jet.dtt[i], fd_dtt[i], jet.dtt.amax()));
            }
            for (a, b) in jet.dt_grad.iter().zip(fd_dtg.iter()) {
                worst = worst.max(rel(*a, *b, jet.dt_grad.amax()));
            }
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let p = self.jet(t, &(x + e));
                let m = self.jet(t, &(x - e));
                let fd_col = (p.e - m.e) / (2.0 * h);
                let fd_grad = (p.grad - m.grad) / (2.0 * h);
                for i in 0..3 {
                    worst = worst.max(rel(jet.grad[(i, k)], fd_col[i], jet.grad.amax()));
                    for j in 0..3 {
                        let hmax = jet.hess.iter().map(|m| m.amax()).fold(0.0, f64::max);
                        worst = worst.max(rel(jet.hess[i][(j, k)], fd_grad[(i, j)], hmax));
                    }
                }
            }
        }
        worst
    }

    /// Certify the boundary sign condition and collect the sampled C^2 norm.
    ///
    /// Boundary points come from a randomly rotated Fibonacci lattice so the
    /// result depends only on `seed`; interior points for the norm are drawn
    /// uniformly from the domain.
    pub fn certify(
        &self,
        domain: &DomainSpec,
        t_grid: &[f64],
        boundary_samples: usize,
        seed: u64,
    ) -> Result<FieldCertificate> {
        if boundary_samples == 0 {
            return Err(Error::InvalidArgument("boundary_samples must be at least 1".into()));
        }
        if t_grid.is_empty() {
            return Err(Error::InvalidArgument("time grid is empty".into()));
        }
        let fd_err = self.field_derivative_check(16, seed);
        if fd_err > DERIVATIVE_TOLERANCE {
            return Err(Error::MalformedField { error: fd_err });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot = random_rotation(&mut rng);
        let boundary: Vec<Vec3> = crate::linalg::fibonacci_sphere(boundary_samples)
            .iter()
            .filter_map(|d| domain.radial_boundary_point(&(rot * d)))
            .collect();
        let r = domain.diameter() / 2.0;
        let mut interior = Vec::new();
        while interior.len() < boundary_samples.min(512) {
            let x = Vec3::new(
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
            );
            if domain.xi(&x) <= 0.0 {
                interior.push(x);
            }
        }

        let mut min_sign = f64::INFINITY;
        let (mut sup_e, mut sup_grad, mut sup_dt, mut c2): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
        for &t in t_grid {
            for (i, x) in boundary.iter().chain(interior.iter()).enumerate() {
                let jet = self.jet(t, x);
                if i < boundary.len() {
                    let n = domain.unit_normal(x)?;
                    min_sign = min_sign.min(jet.e.dot(&n));
                }
                sup_e = sup_e.max(jet.e.norm());
                sup_grad = sup_grad.max(jet.grad.norm());
                sup_dt = sup_dt.max(jet.dt.norm());
                let hess = jet.hess.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
                c2 = c2
                    .max(jet.e.norm())
                    .max(jet.dt.norm())
                    .max(jet.grad.norm())
                    .max(jet.dtt.norm())
                    .max(jet.dt_grad.norm())
                    .max(hess);
            }
        }
        let c_e = min_sign - SIGN_MARGIN;
        Ok(FieldCertificate {
            c_e,
            c2_norm: c2,
            sup_e,
            sup_grad,
            sup_dt,
            holds_sign: c_e > 0.0,
            samples: boundary.len() * t_grid.len(),
        })
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    // unit quaternion from three uniforms (Shoemake)
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
        u1.sqrt() * (tau * u3).cos(),
    ));
    q.to_rotation_matrix().into_inner()
}

/// Uniform time grid on `[0, horizon]` with `n` points.
pub fn time_grid(horizon: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0];
    }
    (0..n).map(|i| horizon * i as f64 / (n - 1) as f64).collect()
}
