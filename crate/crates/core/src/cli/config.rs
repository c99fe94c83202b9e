//! Scenario files (TOML).
//!
//! ```toml
//! seed = 7
//! suites = ["trace", "bound-matrix"]
//!
//! [domain]
//! kind = "ellipsoid"
//! a = 1.5
//! b = 1.0
//! c = 0.8
//!
//! [field]
//! kind = "outward-radial"
//! gain = 1.0
//!
//! [launches.sampler]
//! count = 100
//! speed = [0.01, 2.0]
//! alpha = [0.001, 0.1]
//! seed = 3
//! ```
//!
//! Every other table (`trace`, `tolerances`, `output`, `velocity-lemma`,
//! `cancellation`, `jacobian`, `bound-matrix`, `kernel`, `transport`) is
//! optional and falls back to its defaults.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::characteristics::{PhaseState, TraceConfig};
use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::geometry::{DomainKind, DomainSpec};
use crate::linalg::Vec3;
use crate::transport::{AbsorptionRate, InitialData, VelocityQuadrature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteName {
    Trace,
    AlphaScan,
    VelocityLemma,
    ExitTime,
    BounceCount,
    Cancellation,
    JacobianFd,
    BoundMatrix,
    KernelIntegral,
    TransportInvariance,
}

impl SuiteName {
    pub const ALL: [SuiteName; 10] = [
        Self::Trace,
        Self::AlphaScan,
        Self::VelocityLemma,
        Self::ExitTime,
        Self::BounceCount,
        Self::Cancellation,
        Self::JacobianFd,
        Self::BoundMatrix,
        Self::KernelIntegral,
        Self::TransportInvariance,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Trace => "trace",
            Self::AlphaScan => "alpha-scan",
            Self::VelocityLemma => "velocity-lemma",
            Self::ExitTime => "exit-time",
            Self::BounceCount => "bounce-count",
            Self::Cancellation => "cancellation",
            Self::JacobianFd => "jacobian-fd",
            Self::BoundMatrix => "bound-matrix",
            Self::KernelIntegral => "kernel-integral",
            Self::TransportInvariance => "transport-invariance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }
}

impl std::fmt::Display for SuiteName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Launch {
    pub t: f64,
    pub x: [f64; 3],
    pub v: [f64; 3],
}

/// Boundary launches heading inward in backward time, with log-uniform speed
/// and log-uniform target `|v . grad xi|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampler {
    pub count: usize,
    pub speed: [f64; 2],
    pub alpha: [f64; 2],
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchSet {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub explicit: Vec<Launch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<Sampler>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSettings {
    /// Cycles run from the launch time `t` back to `t - horizon`.
    pub horizon: f64,
    pub max_bounces: usize,
    pub integrator: TraceConfig,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            max_bounces: 1000,
            integrator: TraceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub reflection: f64,
    pub energy_drift: f64,
    pub boundary_reduction: f64,
    /// Allowed ratio between the largest and smallest per-bin tight constant.
    pub velocity_spread: f64,
    pub exit_time_change: f64,
    pub bounce_count_change: f64,
    pub cancel_slope: f64,
    pub dv_slope: f64,
    pub jacobian_fd: f64,
    pub bound_matrix: f64,
    pub kernel_spread: f64,
    pub kernel_rel_se: f64,
    pub invariance: f64,
    pub stationarity: f64,
    /// Launches lost to grazing stalls before the run is declared stalled.
    pub stall_budget: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            reflection: 1e-12,
            energy_drift: 1e-7,
            boundary_reduction: 1e-12,
            velocity_spread: 2.0,
            exit_time_change: 0.2,
            bounce_count_change: 0.2,
            cancel_slope: 0.3,
            dv_slope: 0.2,
            jacobian_fd: 1e-5,
            bound_matrix: 1e-10,
            kernel_spread: 2.0,
            kernel_rel_se: 0.1,
            invariance: 1e-8,
            stationarity: 1e-4,
            stall_budget: 0,
        }
    }
}

impl Tolerances {
    /// Loosen (`k > 1`) or tighten every numeric tolerance. Ratio tolerances
    /// scale their excess over 1.
    pub fn scaled(&self, k: f64) -> Self {
        let ratio = |r: f64| 1.0 + (r - 1.0) * k;
        Self {
            reflection: self.reflection * k,
            energy_drift: self.energy_drift * k,
            boundary_reduction: self.boundary_reduction * k,
            velocity_spread: ratio(self.velocity_spread),
            exit_time_change: self.exit_time_change * k,
            bounce_count_change: self.bounce_count_change * k,
            cancel_slope: self.cancel_slope * k,
            dv_slope: self.dv_slope * k,
            jacobian_fd: self.jacobian_fd * k,
            bound_matrix: self.bound_matrix * k,
            kernel_spread: ratio(self.kernel_spread),
            kernel_rel_se: self.kernel_rel_se * k,
            invariance: self.invariance * k,
            stationarity: self.stationarity * k,
            stall_budget: self.stall_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    /// Relative paths are resolved against `--out`.
    pub report: String,
    pub moments_csv: String,
    pub trace: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            report: "report.json".into(),
            moments_csv: "moments.csv".into(),
            trace: "trace.json".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityLemmaSettings {
    /// Log-spaced bins over the sampler alpha range.
    pub bins: usize,
    /// Trial constant as a multiple of the certified reference constant.
    pub trial_factor: f64,
    pub certify_samples: usize,
}

impl Default for VelocityLemmaSettings {
    fn default() -> Self {
        Self {
            bins: 4,
            trial_factor: 10.0,
            certify_samples: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CancellationSettings {
    /// Direction of the launch point; the radial boundary point is used.
    pub base: [f64; 3],
    pub tangent: [f64; 3],
    pub speed: f64,
    /// Launch angles with the tangent plane, log-spaced.
    pub angles: [f64; 2],
    pub levels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cancel_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dv_slope: Option<f64>,
}

impl Default for CancellationSettings {
    fn default() -> Self {
        Self {
            base: [0.0, 0.0, 1.0],
            tangent: [1.0, 0.0, 0.0],
            speed: 1.0,
            angles: [5e-4, 5e-2],
            levels: 6,
            cancel_slope: None,
            dv_slope: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JacobianSettings {
    pub min_alpha: f64,
    pub max_bounces: usize,
    /// Backward span of each differentiated cycle.
    pub horizon: f64,
}

impl Default for JacobianSettings {
    fn default() -> Self {
        Self {
            min_alpha: 0.05,
            max_bounces: 10,
            horizon: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundMatrixSettings {
    pub samples: usize,
    pub m: [f64; 2],
    pub speed: [f64; 2],
}

impl Default for BoundMatrixSettings {
    fn default() -> Self {
        Self {
            samples: 100,
            m: [1.0, 100.0],
            speed: [0.01, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSettings {
    /// Boundary point direction; `y` moves inward along the normal.
    pub direction: [f64; 3],
    pub depths: Vec<f64>,
    pub speeds: Vec<f64>,
    pub betas: Vec<f64>,
    pub kappa: f64,
    pub theta: f64,
    pub samples: usize,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            direction: [0.0, 0.0, 1.0],
            depths: vec![1e-8, 3e-8, 1e-7, 3e-7, 1e-6],
            speeds: vec![0.125, 0.25, 0.5, 1.0, 2.0],
            betas: vec![2.0, 2.5, 2.9],
            kappa: 0.5,
            theta: 1.0,
            samples: 400_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSettings {
    pub initial: InitialData,
    pub absorption: AbsorptionRate,
    /// Evaluation time; the data is prescribed at time 0.
    pub time: f64,
    pub boundary_samples: usize,
    pub interior_samples: usize,
    pub max_speed: f64,
    pub quadrature: VelocityQuadrature,
    pub x_grid: Vec<[f64; 3]>,
}

impl Default for TransportSettings {
    fn default() -> Self {
        Self {
            initial: InitialData::Maxwellian {
                density: 1.0,
                temperature: 1.0,
            },
            absorption: AbsorptionRate::Zero,
            time: 0.5,
            boundary_samples: 200,
            interior_samples: 200,
            max_speed: 3.0,
            quadrature: VelocityQuadrature { order: 8, cutoff: 8.0 },
            x_grid: vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.8]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub suites: Vec<SuiteName>,
    pub domain: DomainKind,
    pub field: FieldSpec,
    #[serde(default)]
    pub launches: LaunchSet,
    #[serde(default)]
    pub trace: TraceSettings,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputPaths,
    #[serde(default)]
    pub velocity_lemma: VelocityLemmaSettings,
    #[serde(default)]
    pub cancellation: CancellationSettings,
    #[serde(default)]
    pub jacobian: JacobianSettings,
    #[serde(default)]
    pub bound_matrix: BoundMatrixSettings,
    #[serde(default)]
    pub kernel: KernelSettings,
    #[serde(default)]
    pub transport: TransportSettings,
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    let ok = r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && (!positive || r[0] > 0.0);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} range {r:?} is invalid")))
    }
}

impl Scenario {
    /// A scenario with the given geometry and field and every option at its default.
    pub fn new(domain: DomainKind, field: FieldSpec, suites: Vec<SuiteName>) -> Self {
        Self {
            seed: 0,
            suites,
            domain,
            field,
            launches: LaunchSet::default(),
            trace: TraceSettings::default(),
            tolerances: Tolerances::default(),
            output: OutputPaths::default(),
            velocity_lemma: VelocityLemmaSettings::default(),
            cancellation: CancellationSettings::default(),
            jacobian: JacobianSettings::default(),
            bound_matrix: BoundMatrixSettings::default(),
            kernel: KernelSettings::default(),
            transport: TransportSettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        DomainSpec::from_kind(&self.domain).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.trace.horizon > 0.0) {
            return Err(Error::Config("trace.horizon must be positive".into()));
        }
        if let Some(s) = &self.launches.sampler {
            check_range("launches.sampler.speed", s.speed, true)?;
            check_range("launches.sampler.alpha", s.alpha, true)?;
        }
        check_range("cancellation.angles", self.cancellation.angles, true)?;
        check_range("bound-matrix.m", self.bound_matrix.m, true)?;
        check_range("bound-matrix.speed", self.bound_matrix.speed, true)?;
        if self.cancellation.levels < 2 {
            return Err(Error::Config("cancellation.levels must be at least 2".into()));
        }
        if self.velocity_lemma.bins == 0 {
            return Err(Error::Config("velocity-lemma.bins must be at least 1".into()));
        }
        if self.kernel.betas.iter().any(|b| !(*b > 1.0 && *b < 3.0)) {
            return Err(Error::Config("kernel.betas must lie in (1, 3)".into()));
        }
        if self.kernel.depths.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("kernel.depths must be positive".into()));
        }
        Ok(())
    }

    /// Apply a `--seed` override to the scenario and its sampler.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(s) = &mut self.launches.sampler {
            s.seed = seed;
        }
    }

    pub fn domain_spec(&self) -> Result<DomainSpec> {
        DomainSpec::from_kind(&self.domain)
    }

    /// Explicit launches followed by sampled ones, in a fixed order.
    pub fn launch_states(&self, domain: &DomainSpec) -> Result<Vec<PhaseState>> {
        let mut out: Vec<PhaseState> = self
            .launches
            .explicit
            .iter()
            .map(|l| PhaseState::new(l.t, Vec3::from(l.x), Vec3::from(l.v)))
            .collect();
        if let Some(s) = &self.launches.sampler {
            out.extend(sample_launches(domain, s, self.trace.horizon)?);
        }
        Ok(out)
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        return r[0];
    }
    rng.random_range(r[0].ln()..r[1].ln()).exp()
}

/// Sampled launches at time `t0` from boundary points, velocity tilted into
/// the domain so that `|v . grad xi|` hits the drawn target where possible.
pub fn sample_launches(domain: &DomainSpec, s: &Sampler, t0: f64) -> Result<Vec<PhaseState>> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut out = Vec::with_capacity(s.count);
    while out.len() < s.count {
        let dir = Vec3::from(UnitSphere.sample(&mut rng));
        let w = Vec3::from(UnitSphere.sample(&mut rng));
        let speed = log_uniform(&mut rng, s.speed);
        let target = log_uniform(&mut rng, s.alpha);
        let x = domain
            .radial_boundary_point(&dir)
            .ok_or_else(|| Error::InvalidDomain("radial boundary point missing".into()))?;
        let n = domain.unit_normal(&x)?;
        let tan = w - n * n.dot(&w);
        if tan.norm() < 1e-6 {
            continue;
        }
        let sin = (target / (speed * domain.grad(&x).norm())).min(1.0);
        let v = (tan.normalize() * (1.0 - sin * sin).sqrt() + n * sin) * speed;
        out.push(PhaseState::new(t0, x, v));
    }
    Ok(out)
}
