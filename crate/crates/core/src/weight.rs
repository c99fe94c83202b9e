//! Kinetic weight `alpha`, a smoothed distance to the grazing set, with checks
//! of the velocity lemma and of the singular velocity-kernel bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::SpecularCycle;
use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::geometry::DomainSpec;
use crate::linalg::{Mat3, Vec3};

/// Largest accepted Monte-Carlo relative standard error.
pub const MC_REL_SE_LIMIT: f64 = 0.10;
const MC_CHUNKS: u64 = 64;

/// Smooth cutoff: identity on `[0, eps/4]`, constant `3 eps / 8` beyond `eps/2`,
/// C^2 and nondecreasing with slope at most one.
pub fn cutoff(eps: f64, x: f64) -> f64 {
    let q = 0.25 * eps;
    if x <= q {
        x
    } else if x >= 2.0 * q {
        cutoff_plateau(eps)
    } else {
        let u = (x - q) / q;
        q + q * (u - u.powi(3) + 0.5 * u.powi(4))
    }
}

pub fn cutoff_derivative(eps: f64, x: f64) -> f64 {
    let q = 0.25 * eps;
    if x <= q {
        1.0
    } else if x >= 2.0 * q {
        0.0
    } else {
        let u = (x - q) / q;
        (1.0 - u).powi(2) * (1.0 + 2.0 * u)
    }
}

pub fn cutoff_plateau(eps: f64) -> f64 {
    0.375 * eps
}

/// Tube width and cutoff scale derived from the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    /// Tube width.
    pub delta: f64,
    /// `min |xi|` on the inner tube surface `{d = delta}`.
    pub delta_prime: f64,
    /// Cutoff scale, equal to `delta_prime`.
    pub eps: f64,
    /// Plateau value of the cutoff.
    pub c_eps: f64,
}

impl WeightParams {
    pub fn new(domain: &DomainSpec) -> Self {
        let delta = domain.tube_width();
        let delta_prime = domain
            .boundary_samples(4096)
            .iter()
            .filter_map(|b| domain.unit_normal(b).ok().map(|n| domain.xi(&(b - n * delta)).abs()))
            .fold(f64::INFINITY, f64::min);
        Self {
            delta,
            delta_prime,
            eps: delta_prime,
            c_eps: cutoff_plateau(delta_prime),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaWeight {
    /// Squared grazing distance; `None` outside the tube where it is not defined.
    pub beta_sq: Option<f64>,
    pub alpha: f64,
    pub in_tube: bool,
    pub eps: f64,
    pub c_eps: f64,
    pub delta_prime: f64,
}

/// Velocity-independent data for `alpha(t, x, .)` at a fixed point.
#[derive(Debug, Clone, Copy)]
pub struct AlphaPoint {
    pub xi: f64,
    pub grad: Vec3,
    pub hess: Mat3,
    /// `E(t, xbar) . grad xi(xbar)` at the nearest boundary point.
    pub e_dot_grad: f64,
    pub in_tube: bool,
    pub params: WeightParams,
}

impl AlphaPoint {
    pub fn new(domain: &DomainSpec, field: &FieldSpec, params: &WeightParams, t: f64, x: &Vec3) -> Result<Self> {
        let xi = domain.xi(x);
        if xi > domain.boundary_tolerance() {
            return Err(Error::InvalidArgument(format!("point is outside the domain (xi = {xi:e})")));
        }
        let (in_tube, e_dot_grad) = match domain.project_to_boundary(x) {
            Ok(p) if p.dist < params.delta => (true, field.value(t, &p.point).dot(&domain.grad(&p.point))),
            Ok(_) | Err(Error::OutsideTube { .. }) => (false, 0.0),
            Err(e) => return Err(e),
        };
        Ok(Self {
            xi,
            grad: domain.grad(x),
            hess: domain.hess(x),
            e_dot_grad,
            in_tube,
            params: *params,
        })
    }

    pub fn beta_sq(&self, v: &Vec3) -> f64 {
        let vg = v.dot(&self.grad);
        vg * vg + self.xi * self.xi - 2.0 * v.dot(&(self.hess * v)) * self.xi - 2.0 * self.e_dot_grad * self.xi
    }

    pub fn alpha(&self, v: &Vec3) -> f64 {
        if self.in_tube {
            cutoff(self.params.eps, self.beta_sq(v).max(0.0).sqrt())
        } else {
            self.params.c_eps
        }
    }

    pub fn weight(&self, v: &Vec3) -> AlphaWeight {
        AlphaWeight {
            beta_sq: self.in_tube.then(|| self.beta_sq(v)),
            alpha: self.alpha(v),
            in_tube: self.in_tube,
            eps: self.params.eps,
            c_eps: self.params.c_eps,
            delta_prime: self.params.delta_prime,
        }
    }
}

pub fn alpha(
    domain: &DomainSpec,
    field: &FieldSpec,
    params: &WeightParams,
    t: f64,
    x: &Vec3,
    v: &Vec3,
) -> Result<AlphaWeight> {
    Ok(AlphaPoint::new(domain, field, params, t, x)?.weight(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub s: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityLemmaReport {
    pub c_trial: f64,
    pub holds: bool,
    /// Smallest `C` for which both inequalities hold on every sample.
    pub tight_c: f64,
    pub alpha_origin: f64,
    pub min_alpha: f64,
    pub samples: usize,
    pub violations: Vec<Violation>,
}

/// Check `e^{-C I(s)} alpha(s) <= alpha(t) <= e^{C I(s)} alpha(s)` with
/// `I(s) = int_s^t (|V| + 1)` on every dense-output node of the cycle.
///
/// The smallest admissible constant is `max |ln alpha(t) - ln alpha(s)| / I(s)`,
/// computed directly.
pub fn verify_velocity_lemma(
    domain: &DomainSpec,
    field: &FieldSpec,
    params: &WeightParams,
    cycle: &SpecularCycle,
    c_trial: f64,
) -> Result<VelocityLemmaReport> {
    let o = &cycle.origin;
    let alpha_t = alpha(domain, field, params, o.t, &o.x, &o.v)?.alpha;
    let mut integral = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut tight: f64 = 0.0;
    let mut min_alpha = alpha_t;
    let mut samples = 0;
    let mut violations = Vec::new();
    for arc in &cycle.arcs {
        for node in &arc.nodes {
            let w = node.v.norm() + 1.0;
            if let Some((ps, pw)) = prev {
                integral += 0.5 * (w + pw) * (ps - node.s);
            }
            prev = Some((node.s, w));
            let a_s = alpha(domain, field, params, node.s, &node.x, &node.v)?.alpha;
            samples += 1;
            min_alpha = min_alpha.min(a_s);
            let gap = (alpha_t.ln() - a_s.ln()).abs();
            if integral > 0.0 {
                tight = tight.max(gap / integral);
            } else if gap > 0.0 {
                tight = f64::INFINITY;
            }
            let grow = (c_trial * integral).exp();
            if alpha_t > grow * a_s {
                violations.push(Violation { s: node.s, lhs: alpha_t, rhs: grow * a_s });
            } else if a_s > grow * alpha_t {
                violations.push(Violation { s: node.s, lhs: a_s / grow, rhs: alpha_t });
            }
        }
    }
    Ok(VelocityLemmaReport {
        c_trial,
        holds: violations.is_empty(),
        tight_c: tight,
        alpha_origin: alpha_t,
        min_alpha,
        samples,
        violations,
    })
}

/// Reference constant `C_xi (|E| + |grad E| + |dE/dt| + 1) / C_E` with `C_xi`
/// the convexity constant.
pub fn velocity_lemma_constant(domain: &DomainSpec, sup_e: f64, sup_grad: f64, sup_dt: f64, c_e: f64) -> f64 {
    domain.convexity_constant() * (sup_e + sup_grad + sup_dt + 1.0) / c_e
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub beta: f64,
    pub kappa: f64,
    pub theta: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub lhs: f64,
    pub rel_se: f64,
    pub rhs_shape: f64,
    pub ratio: f64,
}

/// `4 pi int_0^inf rho^kappa e^{-theta rho^2} d rho`, the kernel mass.
pub fn kernel_mass(kappa: f64, theta: f64) -> f64 {
    let a = 0.5 * (kappa + 1.0);
    4.0 * std::f64::consts::PI * libm::tgamma(a) / (2.0 * theta.powf(a))
}

/// Shape of the kernel bound: `(|v|^2 |xi| + c)^{-(beta - 1)/2} + 1` with
/// `c = xi^2 - C_E xi`.
pub fn kernel_rhs_shape(xi: f64, speed: f64, beta: f64, c_e: f64) -> f64 {
    let c = xi * xi - c_e * xi;
    (speed * speed * xi.abs() + c).powf(-0.5 * (beta - 1.0)) + 1.0
}

/// Monte-Carlo estimate of `int e^{-theta |v-u|^2} |v-u|^{kappa-2} alpha(s,y,u)^{-beta} du`.
///
/// Writing `u = v + rho omega`, `rho^2` is drawn from a Gamma law so that the
/// Gaussian and the singular factor are absorbed into the sampling density.
#[allow(clippy::too_many_arguments)]
pub fn kernel_integral_check(
    domain: &DomainSpec,
    field: &FieldSpec,
    params: &WeightParams,
    y: &Vec3,
    v: &Vec3,
    s: f64,
    c_e: f64,
    kp: &KernelParams,
) -> Result<KernelCheck> {
    if !(kp.beta > 1.0 && kp.beta < 3.0) {
        return Err(Error::InvalidArgument(format!("beta = {} must lie in (1, 3)", kp.beta)));
    }
    if !(kp.kappa > 0.0 && kp.kappa <= 1.0) || kp.theta <= 0.0 || kp.samples < 2 {
        return Err(Error::InvalidArgument("kappa in (0, 1], theta > 0 and samples >= 2 required".into()));
    }
    let point = AlphaPoint::new(domain, field, params, s, y)?;
    let gamma = Gamma::new(0.5 * (kp.kappa + 1.0), 1.0 / kp.theta)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let per_chunk = kp.samples.div_ceil(MC_CHUNKS as usize);
    let sums: Vec<(f64, f64, usize)> = (0..MC_CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(kp.seed);
            rng.set_stream(chunk);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..per_chunk {
                let rho = gamma.sample(&mut rng).sqrt();
                let w: [f64; 3] = UnitSphere.sample(&mut rng);
                let u = v + Vec3::from(w) * rho;
                let f = point.alpha(&u).powf(-kp.beta);
                s1 += f;
                s2 += f * f;
            }
            (s1, s2, per_chunk)
        })
        .collect();
    let (s1, s2, n) = sums
        .iter()
        .fold((0.0, 0.0, 0usize), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    let n = n as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    let rel_se = if mean > 0.0 { (var / n).sqrt() / mean } else { 0.0 };
    if rel_se > MC_REL_SE_LIMIT {
        return Err(Error::MCVarianceTooHigh { rel_se, limit: MC_REL_SE_LIMIT });
    }
    let lhs = kernel_mass(kp.kappa, kp.theta) * mean;
    let rhs_shape = kernel_rhs_shape(point.xi, v.norm(), kp.beta, c_e);
    Ok(KernelCheck {
        lhs,
        rel_se,
        rhs_shape,
        ratio: lhs / rhs_shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::{build_cycle, PhaseState, TraceConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cutoff_properties_on_grid() {
        let eps = 0.19;
        let mut prev = 0.0;
        for i in 0..=4000 {
            let x = i as f64 * eps / 2000.0;
            let c = cutoff(eps, x);
            if x <= eps / 4.0 {
                assert_eq!(c, x);
            }
            if x >= eps / 2.0 {
                assert_eq!(c, cutoff_plateau(eps));
            }
            assert!(c >= prev);
            let d = cutoff_derivative(eps, x);
            assert!((0.0..=1.0).contains(&d));
            prev = c;
        }
        // C^1 and C^2 at both junctions
        let h = 1e-6;
        for x0 in [eps / 4.0, eps / 2.0] {
            let slope_l = (cutoff(eps, x0) - cutoff(eps, x0 - h)) / h;
            let slope_r = (cutoff(eps, x0 + h) - cutoff(eps, x0)) / h;
            assert!((slope_l - slope_r).abs() < 1e-4);
            let curv = (cutoff(eps, x0 + h) - 2.0 * cutoff(eps, x0) + cutoff(eps, x0 - h)) / (h * h);
            assert!(curv.abs() < 1e-2 / eps);
        }
    }

    #[test]
    fn delta_prime_of_unit_sphere() {
        let p = WeightParams::new(&DomainSpec::unit_sphere());
        assert_relative_eq!(p.delta, 0.1);
        assert_relative_eq!(p.delta_prime, 0.19, epsilon = 1e-12);
    }

    #[test]
    fn boundary_reduction() {
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        let x = Vec3::new(0.0, 0.6, 0.8);
        // grad xi = 2x, so v . grad xi = 1e-3
        let v = Vec3::new(1.0, 0.0, 0.0) + x * (1e-3 / 2.0);
        let w = alpha(&d, &FieldSpec::outward_radial(1.0), &p, 0.0, &x, &v).unwrap();
        assert!(w.in_tube);
        assert!((w.alpha - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn plateau_deep_inside() {
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        for v in [Vec3::zeros(), Vec3::new(3.0, -1.0, 0.2)] {
            let w = alpha(&d, &FieldSpec::outward_radial(1.0), &p, 0.0, &Vec3::new(0.1, 0.2, 0.0), &v).unwrap();
            assert!(!w.in_tube);
            assert_eq!(w.alpha, p.c_eps);
            assert!(w.beta_sq.is_none());
        }
    }

    #[test]
    fn beta_sq_term_by_term_on_axis() {
        // x = (0, 0, 1 - h), v = (1, 0, 0), E = x, xi = |x|^2 - 1:
        // v . grad xi = 0, xi = (1-h)^2 - 1, v H v = 2, E(xbar) . grad xi(xbar) = 2
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        let h = 1e-3;
        let x = Vec3::new(0.0, 0.0, 1.0 - h);
        let w = alpha(&d, &FieldSpec::outward_radial(1.0), &p, 0.0, &x, &Vec3::x()).unwrap();
        let xi = (1.0 - h) * (1.0 - h) - 1.0;
        let expected = xi * xi - 4.0 * xi - 4.0 * xi;
        assert_relative_eq!(w.beta_sq.unwrap(), expected, epsilon = 1e-15);
        assert_relative_eq!(w.alpha, cutoff(0.19, expected.sqrt()), epsilon = 1e-15);
    }

    #[test]
    fn alpha_continuous_across_tube_edge() {
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        let f = FieldSpec::outward_radial(1.0);
        let v = Vec3::new(0.3, 0.2, 0.1);
        let r = 0.9;
        let a_in = alpha(&d, &f, &p, 0.0, &Vec3::new(0.0, 0.0, r + 1e-9), &v).unwrap();
        let a_out = alpha(&d, &f, &p, 0.0, &Vec3::new(0.0, 0.0, r - 1e-9), &v).unwrap();
        assert!(a_in.in_tube && !a_out.in_tube);
        assert!((a_in.alpha - a_out.alpha).abs() < 1e-12);
    }

    #[test]
    fn velocity_lemma_degenerate_interval() {
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        let f = FieldSpec::outward_radial(1.0);
        let st = PhaseState::new(0.0, Vec3::new(0.0, 0.0, 0.95), Vec3::new(0.5, 0.0, 0.1));
        let mut c = build_cycle(&d, &f, &st, -0.5, 100, &TraceConfig::default()).unwrap();
        c.arcs.truncate(1);
        c.arcs[0].nodes.truncate(1);
        let r = verify_velocity_lemma(&d, &f, &p, &c, 0.0).unwrap();
        assert!(r.holds);
        assert_eq!(r.tight_c, 0.0);
    }

    #[test]
    fn velocity_lemma_constant_near_grazing() {
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        let f = FieldSpec::outward_radial(1.0);
        let cert = f.certify(&d, &crate::field::time_grid(1.0, 4), 512, 1).unwrap();
        let reference = velocity_lemma_constant(&d, cert.sup_e, cert.sup_grad, cert.sup_dt, cert.c_e);
        let vn: f64 = 0.02;
        let st = PhaseState::new(0.0, Vec3::z(), Vec3::new((1.0 - vn * vn).sqrt(), 0.0, vn));
        let c = build_cycle(&d, &f, &st, -1.0, 1000, &TraceConfig::default()).unwrap();
        let r = verify_velocity_lemma(&d, &f, &p, &c, 10.0 * reference).unwrap();
        assert!(r.tight_c.is_finite());
        assert!(r.tight_c <= 10.0 * reference, "tight {} vs {}", r.tight_c, reference);
        assert!(r.holds);
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn kernel_deep_inside_matches_radial_quadrature() {
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        let f = FieldSpec::outward_radial(1.0);
        for (kappa, theta, beta) in [(0.5, 1.0, 2.0), (1.0, 0.3, 2.5), (0.2, 2.0, 1.5)] {
            let kp = KernelParams { beta, kappa, theta, samples: 1000, seed: 4 };
            let k = kernel_integral_check(&d, &f, &p, &Vec3::zeros(), &Vec3::new(0.5, 0.0, 0.0), 0.0, 1.0, &kp).unwrap();
            // rho = q^2 removes the endpoint singularity
            let top = (40.0 / theta).sqrt().sqrt();
            let radial = simpson(
                |q: f64| 2.0 * q.powf(2.0 * kappa + 1.0) * (-theta * q.powi(4)).exp(),
                0.0,
                top,
                20000,
            );
            let oracle = 4.0 * std::f64::consts::PI * radial / p.c_eps.powf(beta);
            assert_relative_eq!(k.lhs, oracle, max_relative = 1e-9);
            assert!(k.rel_se < 1e-8);
        }
    }

    #[test]
    fn kernel_limits() {
        assert!((kernel_rhs_shape(-0.3, 1.0, 1.0 + 1e-12, 1.0) - 2.0).abs() < 1e-9);
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        let f = FieldSpec::outward_radial(1.0);
        let y = Vec3::new(0.0, 0.0, 0.97);
        let mut last = f64::INFINITY;
        for theta in [1.0, 1e2, 1e4, 1e6, 1e8] {
            let kp = KernelParams { beta: 2.0, kappa: 0.5, theta, samples: 20000, seed: 9 };
            let k = kernel_integral_check(&d, &f, &p, &y, &Vec3::new(0.4, 0.0, 0.0), 0.0, 1.0, &kp).unwrap();
            assert!(k.ratio < last);
            last = k.ratio;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn kernel_is_deterministic() {
        let d = DomainSpec::unit_sphere();
        let p = WeightParams::new(&d);
        let f = FieldSpec::outward_radial(1.0);
        let kp = KernelParams { beta: 2.5, kappa: 1.0, theta: 1.0, samples: 10000, seed: 2 };
        let y = Vec3::new(0.0, 0.0, 0.99);
        let a = kernel_integral_check(&d, &f, &p, &y, &Vec3::x(), 0.0, 1.0, &kp).unwrap();
        let b = kernel_integral_check(&d, &f, &p, &y, &Vec3::x(), 0.0, 1.0, &kp).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn beta_sq_nonnegative_under_sign_condition(
            dir in prop::array::uniform3(-1.0f64..1.0),
            depth in 0.0f64..0.09,
            v in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let dir = Vec3::from(dir);
            prop_assume!(dir.norm() > 0.1);
            let d = DomainSpec::ellipsoid(1.4, 1.0, 0.9).unwrap();
            let p = WeightParams::new(&d);
            let b = d.radial_boundary_point(&dir).unwrap();
            let x = b - d.unit_normal(&b).unwrap() * depth;
            let pt = AlphaPoint::new(&d, &FieldSpec::outward_radial(1.0), &p, 0.0, &x).unwrap();
            prop_assume!(pt.in_tube);
            prop_assert!(pt.beta_sq(&Vec3::from(v)) >= 0.0);
        }
    }
}
