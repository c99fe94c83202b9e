//! Collisionless transport along generalized characteristics:
//! `f(t, x, v) = exp(-int_0^t nu) f_0(X_cl(0), V_cl(0))`.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{build_cycle, reflect_with_normal, PhaseState, SpecularCycle, TraceConfig};
use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::geometry::DomainSpec;
use crate::linalg::{fibonacci_sphere, Vec3};

/// Bounce budget for a single backward trace.
pub const MAX_BOUNCES: usize = 100_000;

fn maxwellian(v: &Vec3, temperature: f64) -> f64 {
    (2.0 * PI * temperature).powf(-1.5) * (-v.norm_squared() / (2.0 * temperature)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialData {
    Zero,
    Uniform {
        value: f64,
    },
    Maxwellian {
        density: f64,
        temperature: f64,
    },
    /// `mu_T(v) (1 + amplitude exp(-|x - center|^2 / width^2))`.
    MaxwellianPerturbation {
        amplitude: f64,
        center: [f64; 3],
        width: f64,
        temperature: f64,
    },
    /// `density mu_T(v - drift)`; not reflection invariant unless `drift = 0`.
    DriftingMaxwellian {
        density: f64,
        drift: [f64; 3],
        temperature: f64,
    },
}

impl InitialData {
    pub fn value(&self, x: &Vec3, v: &Vec3) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Uniform { value } => *value,
            Self::Maxwellian { density, temperature } => density * maxwellian(v, *temperature),
            Self::MaxwellianPerturbation {
                amplitude,
                center,
                width,
                temperature,
            } => {
                let c = Vec3::from(*center);
                let env = (-(x - c).norm_squared() / (width * width)).exp();
                maxwellian(v, *temperature) * (1.0 + amplitude * env)
            }
            Self::DriftingMaxwellian {
                density,
                drift,
                temperature,
            } => density * maxwellian(&(v - Vec3::from(*drift)), *temperature),
        }
    }

    pub fn scaled(&self, k: f64) -> ScaledData<'_> {
        ScaledData { base: self, k }
    }

    /// Largest `|f_0(x, v) - f_0(x, R_x v)|` over `n` incoming boundary samples.
    pub fn compatibility_defect(&self, domain: &DomainSpec, n: usize, seed: u64) -> Result<f64> {
        let samples = boundary_phase_samples(domain, n, 3.0, seed)?;
        let mut worst: f64 = 0.0;
        for (x, v) in samples {
            let nrm = domain.unit_normal(&x)?;
            worst = worst.max((self.value(&x, &v) - self.value(&x, &reflect_with_normal(&nrm, &v))).abs());
        }
        Ok(worst)
    }

    pub fn compatible(&self, domain: &DomainSpec) -> Result<bool> {
        Ok(self.compatibility_defect(domain, 1024, 0)? <= 1e-14)
    }

    pub fn sup(&self) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Uniform { value } => value.abs(),
            Self::Maxwellian { density, temperature } => density.abs() * (2.0 * PI * temperature).powf(-1.5),
            Self::MaxwellianPerturbation {
                amplitude, temperature, ..
            } => (2.0 * PI * temperature).powf(-1.5) * (1.0 + amplitude.max(0.0)),
            Self::DriftingMaxwellian {
                density, temperature, ..
            } => density.abs() * (2.0 * PI * temperature).powf(-1.5),
        }
    }
}

pub trait Datum: Sync {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64;
}

impl Datum for InitialData {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        self.value(x, v)
    }
}

pub struct ScaledData<'a> {
    base: &'a InitialData,
    k: f64,
}

impl Datum for ScaledData<'_> {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        self.k * self.base.value(x, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AbsorptionRate {
    Zero,
    Constant {
        nu: f64,
    },
    /// `a + b <v>`.
    Linear {
        a: f64,
        b: f64,
    },
    /// `a + b <v> - v . E(s, x) / 2`; may change sign.
    FieldShifted {
        a: f64,
        b: f64,
    },
}

impl AbsorptionRate {
    pub fn value(&self, field: &FieldSpec, s: f64, x: &Vec3, v: &Vec3) -> f64 {
        let bracket = (1.0 + v.norm_squared()).sqrt();
        match self {
            Self::Zero => 0.0,
            Self::Constant { nu } => *nu,
            Self::Linear { a, b } => a + b * bracket,
            Self::FieldShifted { a, b } => a + b * bracket - 0.5 * v.dot(&field.value(s, x)),
        }
    }

    /// Smallest `C` with `|nu| <= C <v>` on the given samples.
    pub fn growth_constant(&self, field: &FieldSpec, samples: &[(f64, Vec3, Vec3)]) -> f64 {
        samples
            .iter()
            .map(|(s, x, v)| self.value(field, *s, x, v).abs() / (1.0 + v.norm_squared()).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::Constant { nu } => *nu >= 0.0,
            Self::Linear { a, b } => *a >= 0.0 && *b >= 0.0,
            Self::FieldShifted { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportValue {
    pub f: f64,
    pub absorption: f64,
    pub x0: Vec3,
    pub v0: Vec3,
    pub bounces: usize,
}

/// `int nu(s, X_cl(s), V_cl(s)) ds` over the whole cycle, Simpson per step with
/// the midpoint from dense output.
pub fn absorption_integral(field: &FieldSpec, nu: &AbsorptionRate, cycle: &SpecularCycle) -> f64 {
    if matches!(nu, AbsorptionRate::Zero) {
        return 0.0;
    }
    let mut total = 0.0;
    for arc in &cycle.arcs {
        for w in arc.nodes.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let h = a.s - b.s;
            if h == 0.0 {
                continue;
            }
            let mid = 0.5 * (a.s + b.s);
            let (xm, vm) = arc.eval(mid);
            total += h / 6.0
                * (nu.value(field, a.s, &a.x, &a.v) + 4.0 * nu.value(field, mid, &xm, &vm) + nu.value(field, b.s, &b.x, &b.v));
        }
    }
    total
}

pub fn evaluate_f<D: Datum + ?Sized>(
    domain: &DomainSpec,
    field: &FieldSpec,
    f0: &D,
    nu: &AbsorptionRate,
    state: &PhaseState,
    cfg: &TraceConfig,
) -> Result<TransportValue> {
    evaluate_from(domain, field, f0, nu, state, 0.0, cfg)
}

/// Same as [`evaluate_f`] with the data prescribed at time `s0` instead of 0.
pub fn evaluate_from<D: Datum + ?Sized>(
    domain: &DomainSpec,
    field: &FieldSpec,
    f0: &D,
    nu: &AbsorptionRate,
    state: &PhaseState,
    s0: f64,
    cfg: &TraceConfig,
) -> Result<TransportValue> {
    if state.t == s0 {
        return Ok(TransportValue {
            f: f0.eval(&state.x, &state.v),
            absorption: 0.0,
            x0: state.x,
            v0: state.v,
            bounces: 0,
        });
    }
    let cfg = TraceConfig { store_arcs: true, ..*cfg };
    let cycle = build_cycle(domain, field, state, s0, MAX_BOUNCES, &cfg)?;
    if cycle.is_truncated() {
        return Err(Error::MaxBouncesExceeded { max_bounces: MAX_BOUNCES });
    }
    let (x0, v0) = cycle.final_state().ok_or_else(|| Error::StepFailure("empty cycle".into()))?;
    let absorption = absorption_integral(field, nu, &cycle);
    Ok(TransportValue {
        f: (-absorption).exp() * f0.eval(&x0, &v0),
        absorption,
        x0,
        v0,
        bounces: cycle.bounces.len(),
    })
}

/// Boundary phase points `(x, v)` with `n . v < 0` (incoming in forward time),
/// speeds up to `max_speed`, away from the grazing set.
pub fn boundary_phase_samples(domain: &DomainSpec, n: usize, max_speed: f64, seed: u64) -> Result<Vec<(Vec3, Vec3)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let dirs = fibonacci_sphere(n.max(1));
    for d in dirs.into_iter().take(n) {
        let x = domain
            .radial_boundary_point(&d)
            .ok_or_else(|| Error::InvalidDomain("radial boundary point missing".into()))?;
        let nrm = domain.unit_normal(&x)?;
        let w: Vec3 = Vec3::from(UnitSphere.sample(&mut rng));
        let mut v = w * rng.random_range(0.05..max_speed);
        if nrm.dot(&v) > 0.0 {
            v = reflect_with_normal(&nrm, &v);
        }
        if nrm.dot(&v).abs() < 1e-3 * v.norm() {
            v -= nrm * (1e-2 * v.norm());
        }
        out.push((x, v));
    }
    Ok(out)
}

/// `max |f(t, x, v) - f(t, x, R_x v)|` over boundary samples `(t, x, v)`.
pub fn check_specular_invariance<D: Datum + ?Sized>(
    domain: &DomainSpec,
    field: &FieldSpec,
    f0: &D,
    nu: &AbsorptionRate,
    samples: &[(f64, Vec3, Vec3)],
    cfg: &TraceConfig,
) -> Result<f64> {
    let diffs: Vec<Result<f64>> = samples
        .par_iter()
        .map(|(t, x, v)| {
            let nrm = domain.unit_normal(x)?;
            let a = evaluate_f(domain, field, f0, nu, &PhaseState::new(*t, *x, *v), cfg)?.f;
            let rv = reflect_with_normal(&nrm, v);
            let b = evaluate_f(domain, field, f0, nu, &PhaseState::new(*t, *x, rv), cfg)?.f;
            Ok((a - b).abs())
        })
        .collect();
    diffs.into_iter().try_fold(0.0, |m, d| Ok(f64::max(m, d?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityQuadrature {
    pub order: usize,
    pub cutoff: f64,
}

impl Default for VelocityQuadrature {
    fn default() -> Self {
        Self { order: 16, cutoff: 8.0 }
    }
}

pub const MIN_QUADRATURE_ORDER: usize = 4;

impl VelocityQuadrature {
    /// Nodes and weights for `int g(v) dv`, written as `int (g / mu) mu dv`
    /// with the tensor Gauss-Hermite rule for the standard Maxwellian.
    pub fn nodes(&self) -> Result<Vec<(Vec3, f64)>> {
        if self.order < MIN_QUADRATURE_ORDER {
            return Err(Error::InvalidArgument(format!(
                "quadrature order {} below the minimum {MIN_QUADRATURE_ORDER}",
                self.order
            )));
        }
        let rule = GaussHermite::new(NonZeroUsize::new(self.order).expect("order checked above"));
        let pairs = rule.as_node_weight_pairs();
        let norm = PI.powf(-1.5);
        let mut out = Vec::with_capacity(pairs.len().pow(3));
        for (a, wa) in pairs {
            for (b, wb) in pairs {
                for (c, wc) in pairs {
                    let v = Vec3::new(*a, *b, *c) * 2f64.sqrt();
                    if v.norm() > self.cutoff {
                        continue;
                    }
                    out.push((v, norm * wa * wb * wc / maxwellian(&v, 1.0)));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub x: Vec3,
    pub density: f64,
    pub momentum: Vec3,
}

pub fn moments<D: Datum + ?Sized>(
    domain: &DomainSpec,
    field: &FieldSpec,
    f0: &D,
    nu: &AbsorptionRate,
    t: f64,
    x_grid: &[Vec3],
    quad: &VelocityQuadrature,
    cfg: &TraceConfig,
) -> Result<Vec<MomentRow>> {
    let nodes = quad.nodes()?;
    x_grid
        .iter()
        .map(|x| {
            let vals: Vec<Result<(f64, Vec3)>> = nodes
                .par_iter()
                .map(|(v, w)| {
                    let f = evaluate_f(domain, field, f0, nu, &PhaseState::new(t, *x, *v), cfg)?.f;
                    Ok((w * f, v * (w * f)))
                })
                .collect();
            let mut density = 0.0;
            let mut momentum = Vec3::zeros();
            for r in vals {
                let (d, m) = r?;
                density += d;
                momentum += m;
            }
            Ok(MomentRow { x: *x, density, momentum })
        })
        .collect()
}

pub fn moments_csv(rows: &[MomentRow]) -> String {
    let mut s = String::from("x,y,z,density,momentum_x,momentum_y,momentum_z\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.x[0], r.x[1], r.x[2], r.density, r.momentum[0], r.momentum[1], r.momentum[2]
        ));
    }
    s
}

/// Interior phase samples for positivity and maximum-principle checks.
pub fn interior_samples(domain: &DomainSpec, n: usize, max_speed: f64, seed: u64) -> Vec<(Vec3, Vec3)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = domain.inradius();
    (0..n)
        .map(|_| {
            let dir: Vec3 = Vec3::from(UnitSphere.sample(&mut rng));
            let x = dir * (0.9 * r * rng.random::<f64>().cbrt());
            let w: Vec3 = Vec3::from(UnitSphere.sample(&mut rng));
            (x, w * rng.random_range(0.0..max_speed))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> TraceConfig {
        TraceConfig::default()
    }

    fn bump() -> InitialData {
        InitialData::MaxwellianPerturbation {
            amplitude: 0.5,
            center: [0.3, 0.0, 0.0],
            width: 0.4,
            temperature: 1.0,
        }
    }

    #[test]
    fn constant_data_is_transported_unchanged() {
        let d = DomainSpec::unit_sphere();
        let st = PhaseState::new(1.5, Vec3::new(0.2, 0.1, 0.0), Vec3::new(1.0, -0.5, 0.3));
        let r = evaluate_f(&d, &FieldSpec::outward_radial(1.0), &InitialData::Uniform { value: 1.0 }, &AbsorptionRate::Zero, &st, &cfg()).unwrap();
        assert_eq!(r.f, 1.0);
        assert!(r.bounces > 0);
    }

    #[test]
    fn constant_absorption_gives_pure_decay() {
        let d = DomainSpec::unit_sphere();
        let st = PhaseState::new(0.7, Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0));
        let r = evaluate_f(&d, &FieldSpec::zero(), &InitialData::Uniform { value: 1.0 }, &AbsorptionRate::Constant { nu: 1.0 }, &st, &cfg()).unwrap();
        assert_relative_eq!(r.f, (-0.7f64).exp(), max_relative = 1e-13);
    }

    #[test]
    fn speed_only_data_is_invariant_without_field() {
        let d = DomainSpec::ellipsoid(1.3, 1.0, 0.8).unwrap();
        let f0 = InitialData::Maxwellian { density: 2.0, temperature: 0.7 };
        let st = PhaseState::new(2.0, Vec3::new(0.1, 0.3, -0.2), Vec3::new(1.2, -0.4, 0.9));
        let r = evaluate_f(&d, &FieldSpec::zero(), &f0, &AbsorptionRate::Zero, &st, &cfg()).unwrap();
        assert_relative_eq!(r.v0.norm(), st.v.norm(), max_relative = 1e-12);
        assert_relative_eq!(r.f, f0.value(&st.x, &st.v), max_relative = 1e-11);
    }

    #[test]
    fn linear_absorption_matches_speed_integral() {
        // E = 0: |V| constant, so int nu = t (a + b <v>)
        let d = DomainSpec::unit_sphere();
        let st = PhaseState::new(0.9, Vec3::new(0.0, 0.2, 0.1), Vec3::new(0.5, 1.5, -0.2));
        let nu = AbsorptionRate::Linear { a: 0.2, b: 0.3 };
        let r = evaluate_f(&d, &FieldSpec::zero(), &InitialData::Uniform { value: 1.0 }, &nu, &st, &cfg()).unwrap();
        let expected = 0.9 * (0.2 + 0.3 * (1.0 + st.v.norm_squared()).sqrt());
        assert_relative_eq!(r.absorption, expected, max_relative = 1e-11);
    }

    #[test]
    fn compatibility_defects() {
        let d = DomainSpec::unit_sphere();
        assert!(bump().compatible(&d).unwrap());
        let drift = InitialData::DriftingMaxwellian { density: 1.0, drift: [0.5, 0.0, 0.0], temperature: 1.0 };
        assert!(!drift.compatible(&d).unwrap());
        assert!(drift.compatibility_defect(&d, 256, 1).unwrap() > 1e-3);
    }

    #[test]
    fn initial_slice_mismatch_equals_defect() {
        let d = DomainSpec::unit_sphere();
        let samples: Vec<(f64, Vec3, Vec3)> = boundary_phase_samples(&d, 64, 2.0, 3).unwrap().into_iter().map(|(x, v)| (0.0, x, v)).collect();
        let m = check_specular_invariance(&d, &FieldSpec::zero(), &bump(), &AbsorptionRate::Zero, &samples, &cfg()).unwrap();
        assert!(m < 1e-15);
        let drift = InitialData::DriftingMaxwellian { density: 1.0, drift: [0.5, 0.0, 0.0], temperature: 1.0 };
        let m = check_specular_invariance(&d, &FieldSpec::zero(), &drift, &AbsorptionRate::Zero, &samples, &cfg()).unwrap();
        let defect = samples
            .iter()
            .map(|(_, x, v)| (drift.value(x, v) - drift.value(x, &reflect_with_normal(&d.unit_normal(x).unwrap(), v))).abs())
            .fold(0.0, f64::max);
        assert_relative_eq!(m, defect, max_relative = 1e-12);
    }

    #[test]
    fn specular_invariance_for_compatible_data() {
        let d = DomainSpec::unit_sphere();
        let samples: Vec<(f64, Vec3, Vec3)> = boundary_phase_samples(&d, 64, 2.0, 4).unwrap().into_iter().map(|(x, v)| (0.5, x, v)).collect();
        let nu = AbsorptionRate::Linear { a: 0.1, b: 0.2 };
        let m = check_specular_invariance(&d, &FieldSpec::zero(), &bump(), &nu, &samples, &cfg()).unwrap();
        assert!(m < 1e-8, "mismatch {m:e}");
        let m = check_specular_invariance(&d, &FieldSpec::outward_radial(1.0), &bump(), &nu, &samples, &cfg()).unwrap();
        assert!(m < 1e-8, "mismatch {m:e}");
    }

    #[test]
    fn maxwellian_density_is_stationary() {
        let d = DomainSpec::unit_sphere();
        let f0 = InitialData::Maxwellian { density: 1.0, temperature: 1.0 };
        let grid = [Vec3::zeros(), Vec3::new(0.5, 0.2, 0.0), Vec3::new(0.0, 0.0, 0.85)];
        let quad = VelocityQuadrature { order: 8, cutoff: 8.0 };
        let rows = moments(&d, &FieldSpec::zero(), &f0, &AbsorptionRate::Zero, 0.3, &grid, &quad, &cfg()).unwrap();
        for r in rows {
            assert!((r.density - 1.0).abs() < 1e-4, "density {}", r.density);
            assert!(r.momentum.norm() < 1e-4);
        }
    }

    #[test]
    fn zero_data_and_linearity() {
        let d = DomainSpec::unit_sphere();
        let grid = [Vec3::new(0.2, 0.0, 0.1)];
        let quad = VelocityQuadrature { order: 6, cutoff: 8.0 };
        let field = FieldSpec::outward_radial(0.5);
        let nu = AbsorptionRate::Constant { nu: 0.3 };
        let z = moments(&d, &field, &InitialData::Zero, &nu, 0.2, &grid, &quad, &cfg()).unwrap();
        assert_eq!(z[0].density, 0.0);
        assert_eq!(z[0].momentum, Vec3::zeros());
        let one = moments(&d, &field, &bump(), &nu, 0.2, &grid, &quad, &cfg()).unwrap();
        let two = moments(&d, &field, &bump().scaled(2.0), &nu, 0.2, &grid, &quad, &cfg()).unwrap();
        assert_eq!(two[0].density, 2.0 * one[0].density);
        assert_eq!(two[0].momentum, one[0].momentum * 2.0);
    }

    #[test]
    fn quadrature_order_floor() {
        assert!(VelocityQuadrature { order: 2, cutoff: 8.0 }.nodes().is_err());
    }

    #[test]
    fn semigroup_reseeding() {
        let d = DomainSpec::ellipsoid(1.2, 1.0, 0.9).unwrap();
        let field = FieldSpec::outward_radial(0.8);
        let nu = AbsorptionRate::Linear { a: 0.1, b: 0.4 };
        let f0 = bump();
        let st = PhaseState::new(1.0, Vec3::new(0.1, -0.2, 0.3), Vec3::new(0.7, 0.5, -0.6));
        let direct = evaluate_f(&d, &field, &f0, &nu, &st, &cfg()).unwrap().f;
        // f(t) = exp(-int_s^t nu) f(s, X_cl(s), V_cl(s))
        let s = 0.4;
        let c = build_cycle(&d, &field, &st, s, MAX_BOUNCES, &cfg()).unwrap();
        let (xs, vs) = c.final_state().unwrap();
        let inner = evaluate_f(&d, &field, &f0, &nu, &PhaseState::new(s, xs, vs), &cfg()).unwrap().f;
        let reseeded = (-absorption_integral(&field, &nu, &c)).exp() * inner;
        assert!((direct - reseeded).abs() < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn positivity_and_maximum_principle(seed in 0u64..1000, t in 0.0f64..1.0) {
            let d = DomainSpec::unit_sphere();
            let field = FieldSpec::outward_radial(1.0);
            let nu = AbsorptionRate::Linear { a: 0.0, b: 0.5 };
            let f0 = bump();
            for (x, v) in interior_samples(&d, 4, 3.0, seed) {
                let f = evaluate_f(&d, &field, &f0, &nu, &PhaseState::new(t, x, v), &cfg()).unwrap().f;
                prop_assert!(f >= 0.0);
                prop_assert!(f <= f0.sup() * (1.0 + 1e-12));
            }
        }
    }
}
