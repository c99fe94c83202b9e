//! Verification suites. Each suite turns a scenario into a [`SuiteRecord`].

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Scenario, SuiteName, Tolerances};
use super::report::{Provenance, Report, Status, SuiteRecord};
use crate::characteristics::{
    backward_exit_time, build_cycle, classify, reflect_with_normal, BounceRecord, PhaseState, SpecularCycle, TraceConfig,
};
use crate::error::{Error, Result};
use crate::field::{time_grid, FieldCertificate, FieldSpec};
use crate::geometry::DomainSpec;
use crate::jacobians::{bound_matrix, chain_total, fd_total, group_growth, reduced_block, relative_error, grazing_family};
use crate::linalg::{loglog_slope, orthogonal_unit, Vec3};
use crate::transport::{
    boundary_phase_samples, check_specular_invariance, evaluate_f, interior_samples, moments, AbsorptionRate, InitialData,
    MomentRow,
};
use crate::weight::{
    cutoff, kernel_integral_check, velocity_lemma_constant, verify_velocity_lemma, AlphaPoint, KernelParams, WeightParams,
};

/// Everything the suites share: the built domain, the launches and the
/// effective tolerances.
pub struct Context<'a> {
    pub scenario: &'a Scenario,
    pub domain: DomainSpec,
    pub field: FieldSpec,
    pub params: WeightParams,
    pub launches: Vec<PhaseState>,
    pub tol: Tolerances,
    pub cfg: TraceConfig,
}

impl<'a> Context<'a> {
    pub fn new(scenario: &'a Scenario, tolerance_scale: f64) -> Result<Self> {
        scenario.validate()?;
        let domain = scenario.domain_spec().map_err(|e| Error::Config(e.to_string()))?;
        let launches = scenario.launch_states(&domain)?;
        for (i, l) in launches.iter().enumerate() {
            if domain.xi(&l.x) > domain.boundary_tolerance() {
                return Err(Error::Config(format!("launch {i} lies outside the domain")));
            }
        }
        Ok(Self {
            scenario,
            params: WeightParams::new(&domain),
            domain,
            field: scenario.field.clone(),
            launches,
            tol: scenario.tolerances.scaled(tolerance_scale),
            cfg: scenario.trace.integrator,
        })
    }

    fn s_end(&self, state: &PhaseState) -> f64 {
        state.t - self.scenario.trace.horizon
    }

    fn seed(&self, salt: u64) -> u64 {
        self.scenario.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
    }

    fn certificate(&self, samples: usize) -> Result<FieldCertificate> {
        self.field
            .certify(&self.domain, &time_grid(self.scenario.trace.horizon, 4), samples, self.seed(1))
    }

    fn alpha_at(&self, s: &PhaseState) -> Result<f64> {
        Ok(AlphaPoint::new(&self.domain, &self.field, &self.params, s.t, &s.x)?.alpha(&s.v))
    }

    fn cycle(&self, state: &PhaseState) -> Result<SpecularCycle> {
        build_cycle(
            &self.domain,
            &self.field,
            state,
            self.s_end(state),
            self.scenario.trace.max_bounces,
            &self.cfg,
        )
    }

    /// Apply `f` to every launch in parallel, keeping launch order. Grazing
    /// stalls are counted and dropped; any other error aborts.
    fn per_launch<T: Send>(&self, f: impl Fn(&PhaseState) -> Result<T> + Sync) -> Result<(Vec<T>, usize)> {
        let results: Vec<Result<T>> = self.launches.par_iter().map(&f).collect();
        let mut out = Vec::with_capacity(results.len());
        let mut stalls = 0;
        for r in results {
            match r {
                Ok(v) => out.push(v),
                Err(Error::GrazingStall { .. }) => stalls += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((out, stalls))
    }
}

/// Relative change of the sample maximum between the first half and the whole set.
fn doubling_change(values: &[f64]) -> (f64, f64, f64) {
    let half = values.len() / 2;
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let (a, b) = (max(&values[..half]), max(values));
    let change = if a > 0.0 { (b - a).abs() / a } else { f64::INFINITY };
    (a, b, change)
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn suite_trace(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let potential = ctx.field.potential(&Vec3::zeros()).is_some();
    let (rows, stalls) = ctx.per_launch(|st| {
        let c = ctx.cycle(st)?;
        let mut refl: f64 = 0.0;
        let mut speed: f64 = 0.0;
        for b in &c.bounces {
            let n = ctx.domain.unit_normal(&b.x_ell)?;
            refl = refl.max((reflect_with_normal(&n, &b.v_out) - b.v_in).norm() / b.v_in.norm().max(1.0));
            speed = speed.max((b.v_out.norm() - b.v_in.norm()).abs() / b.v_in.norm().max(1.0));
        }
        let drift = match (potential, c.final_state()) {
            (true, Some((x1, v1))) => {
                let phi0 = ctx.field.potential(&st.x).unwrap_or(0.0);
                let phi1 = ctx.field.potential(&x1).unwrap_or(0.0);
                let h0 = 0.5 * st.v.norm_squared() + phi0;
                let h1 = 0.5 * v1.norm_squared() + phi1;
                let scale = (0.5 * st.v.norm_squared() + phi0.abs()).max(f64::MIN_POSITIVE);
                (h1 - h0).abs() / scale
            }
            _ => 0.0,
        };
        Ok((refl, speed, drift, c.bounces.len(), c.is_truncated()))
    })?;
    rec.samples = rows.len();
    rec.stalls = stalls;
    if rows.is_empty() {
        return Ok(());
    }
    let refl = max_of(rows.iter().map(|r| r.0));
    let speed = max_of(rows.iter().map(|r| r.1));
    rec.constant("max_reflection_error", refl)
        .constant("max_speed_error", speed)
        .constant("max_bounces", rows.iter().map(|r| r.3).max().unwrap_or(0) as f64)
        .constant("mean_bounces", rows.iter().map(|r| r.3 as f64).sum::<f64>() / rows.len() as f64)
        .constant("truncated", rows.iter().filter(|r| r.4).count() as f64);
    rec.check(refl <= ctx.tol.reflection, format!("reflection error {refl:e}"));
    rec.check(speed <= ctx.tol.reflection, format!("speed error {speed:e}"));
    if potential {
        let drift = max_of(rows.iter().map(|r| r.2));
        rec.constant("max_energy_drift", drift);
        rec.check(drift <= ctx.tol.energy_drift, format!("energy drift {drift:e}"));
    } else {
        rec.note("field is not static conservative; energy drift not checked");
    }
    Ok(())
}

fn suite_alpha_scan(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let cert = ctx.certificate(ctx.scenario.velocity_lemma.certify_samples)?;
    let delta = ctx.params.delta;
    let (rows, stalls) = ctx.per_launch(|st| {
        let Some(b) = ctx.domain.radial_boundary_point(&st.x) else {
            return Err(Error::InvalidDomain("radial boundary point missing".into()));
        };
        let n = ctx.domain.unit_normal(&b)?;
        let on_boundary = ctx.domain.xi(&st.x).abs() <= ctx.domain.boundary_tolerance();
        let reduction = if on_boundary {
            let a = ctx.alpha_at(st)?;
            (a - cutoff(ctx.params.eps, st.v.dot(&ctx.domain.grad(&st.x)).abs())).abs()
        } else {
            0.0
        };
        let mut min_beta = f64::INFINITY;
        let mut max_jump: f64 = 0.0;
        let mut prev: Option<f64> = None;
        for k in 0..=64 {
            let x = b - n * (2.0 * delta * k as f64 / 64.0);
            let p = AlphaPoint::new(&ctx.domain, &ctx.field, &ctx.params, st.t, &x)?;
            if p.in_tube {
                min_beta = min_beta.min(p.beta_sq(&st.v) / (1.0 + st.v.norm_squared()));
            }
            let a = p.alpha(&st.v);
            if let Some(pa) = prev {
                max_jump = max_jump.max((a - pa).abs());
            }
            prev = Some(a);
        }
        Ok((on_boundary, reduction, min_beta, max_jump))
    })?;
    rec.samples = rows.len();
    rec.stalls = stalls;
    if rows.is_empty() {
        return Ok(());
    }
    let reduction = max_of(rows.iter().filter(|r| r.0).map(|r| r.1));
    let min_beta = rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    rec.constant("boundary_reduction_error", reduction)
        .constant("min_scaled_beta_sq", min_beta)
        .constant("max_alpha_jump", max_of(rows.iter().map(|r| r.3)))
        .constant("c_e", cert.c_e)
        .constant("eps", ctx.params.eps);
    rec.check(reduction <= ctx.tol.boundary_reduction, format!("boundary reduction {reduction:e}"));
    if cert.holds_sign {
        rec.check(min_beta >= -ctx.tol.boundary_reduction, format!("negative beta^2 {min_beta:e}"));
    } else {
        rec.note("field fails the sign condition; beta^2 sign not checked");
    }
    Ok(())
}

fn suite_velocity_lemma(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let vl = &ctx.scenario.velocity_lemma;
    let cert = ctx.certificate(vl.certify_samples)?;
    let reference = velocity_lemma_constant(&ctx.domain, cert.sup_e, cert.sup_grad, cert.sup_dt, cert.c_e);
    let c_trial = if cert.holds_sign { vl.trial_factor * reference } else { f64::INFINITY };
    let (rows, stalls) = ctx.per_launch(|st| {
        let c = ctx.cycle(st)?;
        let r = verify_velocity_lemma(&ctx.domain, &ctx.field, &ctx.params, &c, c_trial)?;
        Ok((r.alpha_origin, r.tight_c, r.holds))
    })?;
    rec.samples = rows.len();
    rec.stalls = stalls;
    rec.constant("reference_c", reference).constant("c_trial", c_trial);
    if rows.is_empty() {
        return Ok(());
    }
    let (lo, hi) = match &ctx.scenario.launches.sampler {
        Some(s) => (s.alpha[0], s.alpha[1]),
        None => (
            rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min),
            max_of(rows.iter().map(|r| r.0)),
        ),
    };
    let bins = vl.bins;
    let mut bin_max = vec![f64::NAN; bins];
    for (a, c, _) in &rows {
        let u = if hi > lo { (a.ln() - lo.ln()) / (hi.ln() - lo.ln()) } else { 0.0 };
        let k = ((u * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        bin_max[k] = if bin_max[k].is_nan() { *c } else { bin_max[k].max(*c) };
    }
    let filled: Vec<f64> = bin_max.iter().cloned().filter(|v| !v.is_nan()).collect();
    let tight = max_of(rows.iter().map(|r| r.1));
    let spread = max_of(filled.iter().cloned()) / filled.iter().cloned().fold(f64::INFINITY, f64::min);
    rec.constant("tight_c", tight).constant("spread", spread);
    for (k, v) in bin_max.iter().enumerate() {
        rec.constant(&format!("tight_c_bin_{k}"), *v);
    }
    rec.check(tight.is_finite(), "tight constant is not finite");
    rec.check(rows.iter().all(|r| r.2), "inequality violated at the trial constant");
    rec.check(spread < ctx.tol.velocity_spread, format!("spread {spread:.3} across alpha bins"));
    if !cert.holds_sign {
        rec.note("field is not certified; no trial constant");
    }
    Ok(())
}

fn suite_exit_time(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let (rows, stalls) = ctx.per_launch(|st| {
        let e = backward_exit_time(&ctx.domain, &ctx.field, st, &ctx.cfg)?;
        let v_perp = ctx.domain.unit_normal(&e.x_b)?.dot(&e.v_b).abs();
        let speed = st.v.norm();
        Ok((e.t_b * (1.0 + speed + speed * speed) / v_perp, speed))
    })?;
    rec.samples = rows.len();
    rec.stalls = stalls;
    if rows.len() < 2 {
        return Ok(());
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let (half, full, change) = doubling_change(&ratios);
    rec.constant("max_ratio_half", half)
        .constant("max_ratio", full)
        .constant("doubling_change", change)
        .constant("slow_launches", rows.iter().filter(|r| r.1 <= ctx.cfg.delta_type).count() as f64);
    rec.check(full.is_finite(), "exit ratio is not finite");
    rec.check(change < ctx.tol.exit_time_change, format!("doubling change {change:.3}"));
    Ok(())
}

fn suite_bounce_count(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let (rows, stalls) = ctx.per_launch(|st| {
        let c = ctx.cycle(st)?;
        if c.is_truncated() {
            return Ok(None);
        }
        let a = ctx.alpha_at(st)?;
        let s = c.final_time();
        let speed = st.v.norm();
        Ok(Some(c.ell_star(s) as f64 * a / ((st.t - s).abs() * (speed * speed + 1.0))))
    })?;
    rec.stalls = stalls;
    let truncated = rows.iter().filter(|r| r.is_none()).count();
    let ratios: Vec<f64> = rows.into_iter().flatten().collect();
    rec.samples = ratios.len();
    rec.constant("truncated", truncated as f64);
    if ratios.len() < 2 {
        return Ok(());
    }
    let (half, full, change) = doubling_change(&ratios);
    rec.constant("max_ratio_half", half)
        .constant("max_ratio", full)
        .constant("doubling_change", change);
    rec.check(full.is_finite(), "bounce-count ratio is not finite");
    rec.check(change < ctx.tol.bounce_count_change, format!("doubling change {change:.3}"));
    Ok(())
}

fn suite_cancellation(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let cs = &ctx.scenario.cancellation;
    let base = ctx
        .domain
        .radial_boundary_point(&Vec3::from(cs.base))
        .ok_or_else(|| Error::Config("cancellation.base has no boundary point".into()))?;
    let (lo, hi) = (cs.angles[0].ln(), cs.angles[1].ln());
    let angles: Vec<f64> = (0..cs.levels)
        .map(|k| (hi + (lo - hi) * k as f64 / (cs.levels - 1) as f64).exp())
        .collect();
    let rows = grazing_family(&ctx.domain, &ctx.field, &base, &Vec3::from(cs.tangent), cs.speed, &angles, &ctx.cfg)?;
    rec.samples = rows.len();
    let dts: Vec<f64> = rows.iter().map(|r| r.dt).collect();
    let cancel: Vec<f64> = rows.iter().map(|r| r.cancel.abs()).collect();
    let dv: Vec<f64> = rows.iter().map(|r| r.dv_perp).collect();
    let cancel_slope = loglog_slope(&dts, &cancel);
    let dv_slope = loglog_slope(&dts, &dv);
    rec.constant("dt_min", dts.iter().cloned().fold(f64::INFINITY, f64::min))
        .constant("dt_max", max_of(dts.iter().cloned()))
        .slope("cancel", cancel_slope)
        .slope("dv_perp", dv_slope);
    if let Some(expected) = cs.cancel_slope {
        rec.check(
            (cancel_slope - expected).abs() <= ctx.tol.cancel_slope,
            format!("cancellation slope {cancel_slope:.3}, expected {expected}"),
        );
    }
    if let Some(expected) = cs.dv_slope {
        rec.check(
            (dv_slope - expected).abs() <= ctx.tol.dv_slope,
            format!("normal-speed slope {dv_slope:.3}, expected {expected}"),
        );
    }
    Ok(())
}

/// Boundary launches are moved to the middle of their first backward arc so
/// that every coordinate can be perturbed in both directions.
fn interior_launch(ctx: &Context, st: &PhaseState, horizon: f64) -> Result<PhaseState> {
    if ctx.domain.xi(&st.x).abs() > ctx.domain.boundary_tolerance() {
        return Ok(*st);
    }
    let cfg = TraceConfig {
        store_arcs: true,
        ..ctx.cfg
    };
    let c = build_cycle(&ctx.domain, &ctx.field, st, st.t - horizon, 1, &cfg)?;
    let t1 = c.bounces.first().map_or(c.s_end, |b| b.t_ell);
    let mid = 0.5 * (st.t + t1);
    let (x, v) = c
        .state_at(mid)
        .ok_or_else(|| Error::StepFailure("first arc has no dense output".into()))?;
    Ok(PhaseState::new(mid, x, v))
}

fn suite_jacobian_fd(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let js = &ctx.scenario.jacobian;
    let cfg = TraceConfig {
        store_arcs: true,
        ..ctx.cfg
    };
    let (rows, stalls) = ctx.per_launch(|st| {
        let st = &interior_launch(ctx, st, js.horizon)?;
        if ctx.alpha_at(st)? < js.min_alpha {
            return Ok(None);
        }
        let s = st.t - js.horizon;
        let c = build_cycle(&ctx.domain, &ctx.field, st, s, js.max_bounces, &cfg)?;
        if c.is_truncated() {
            return Ok(None);
        }
        let chain = chain_total(&ctx.domain, &ctx.field, &c, s)?;
        let fd = fd_total(&ctx.domain, &ctx.field, st, s, js.max_bounces, &cfg)?;
        let (mut a, mut b) = (chain.total, fd.jacobian);
        for &k in &fd.skipped {
            a.column_mut(k).fill(0.0);
            b.column_mut(k).fill(0.0);
        }
        let fitted_m = c
            .bounces
            .first()
            .and_then(|b0| {
                let j = reduced_block(&ctx.domain, &ctx.field, &c, 1).ok()?;
                let t = classify(st.v.norm(), b0.r_ell, cfg.delta_type);
                bound_matrix(b0.r_ell, 1.0, st.v.norm(), t).ok().map(|bm| bm.fit_m(&j))
            })
            .unwrap_or(f64::NAN);
        Ok(Some((relative_error(&a, &b), c.bounces.len(), fd.skipped.len(), fitted_m)))
    })?;
    rec.stalls = stalls;
    let used: Vec<_> = rows.into_iter().flatten().collect();
    rec.samples = used.len();
    if used.is_empty() {
        return Ok(());
    }
    let err = max_of(used.iter().map(|r| r.0));
    rec.constant("max_relative_error", err)
        .constant("max_bounces", used.iter().map(|r| r.1).max().unwrap_or(0) as f64)
        .constant("skipped_columns", used.iter().map(|r| r.2).sum::<usize>() as f64)
        .constant("fitted_m", max_of(used.iter().map(|r| r.3).filter(|m| m.is_finite())));
    rec.check(err <= ctx.tol.jacobian_fd, format!("relative error {err:e}"));
    let skipped = used.iter().map(|r| r.2).sum::<usize>();
    rec.check(skipped == 0, format!("{skipped} finite-difference columns skipped"));
    Ok(())
}

fn suite_bound_matrix(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let bs = &ctx.scenario.bound_matrix;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed(2));
    let log_uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0].ln()..r[1].ln()).exp()
        }
    };
    let mut worst = [0.0f64; 3];
    let mut growth_ok = true;
    for _ in 0..bs.samples {
        let r = rng.random_range(0.01..=1.0);
        let speed = log_uniform(&mut rng, bs.speed);
        let m = log_uniform(&mut rng, bs.m);
        let bm = bound_matrix(r, m, speed, classify(speed, r, ctx.cfg.delta_type))?;
        let c = bm.check();
        worst[0] = worst[0].max(c.inverse_error);
        worst[1] = worst[1].max(c.reconstruction_error);
        worst[2] = worst[2].max(c.eigenvalue_error);
        let (prod, bound) = group_growth(&[r, 0.5 * r, 0.25 * r], m);
        growth_ok &= prod <= bound;
    }
    rec.samples = bs.samples;
    rec.constant("inverse_error", worst[0])
        .constant("reconstruction_error", worst[1])
        .constant("eigenvalue_error", worst[2]);
    if bs.samples == 0 {
        return Ok(());
    }
    rec.check(worst[0] <= ctx.tol.bound_matrix, format!("P P^-1 error {:e}", worst[0]));
    rec.check(worst[1] <= ctx.tol.bound_matrix, format!("reconstruction error {:e}", worst[1]));
    rec.check(worst[2] <= ctx.tol.bound_matrix, format!("eigenvalue error {:e}", worst[2]));
    rec.check(growth_ok, "group product exceeds its exponential bound");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelRow {
    pub depth: f64,
    pub speed: f64,
    pub beta: f64,
    pub ratio: f64,
    pub rel_se: f64,
}

/// The kernel scan at `samples` Monte-Carlo draws per point.
pub fn kernel_scan(ctx: &Context, c_e: f64, samples: usize) -> Result<Vec<KernelRow>> {
    let ks = &ctx.scenario.kernel;
    let b = ctx
        .domain
        .radial_boundary_point(&Vec3::from(ks.direction))
        .ok_or_else(|| Error::Config("kernel.direction has no boundary point".into()))?;
    let n = ctx.domain.unit_normal(&b)?;
    let tan = orthogonal_unit(&n);
    let mut grid = Vec::new();
    for &beta in &ks.betas {
        for &depth in &ks.depths {
            for &speed in &ks.speeds {
                grid.push((depth, speed, beta));
            }
        }
    }
    grid.iter()
        .enumerate()
        .map(|(i, &(depth, speed, beta))| {
            let kp = KernelParams {
                beta,
                kappa: ks.kappa,
                theta: ks.theta,
                samples,
                seed: ctx.seed(100 + i as u64),
            };
            let y = b - n * depth;
            match kernel_integral_check(&ctx.domain, &ctx.field, &ctx.params, &y, &(tan * speed), 0.0, c_e, &kp) {
                Ok(k) => Ok(KernelRow { depth, speed, beta, ratio: k.ratio, rel_se: k.rel_se }),
                Err(Error::MCVarianceTooHigh { rel_se, .. }) => Ok(KernelRow { depth, speed, beta, ratio: f64::NAN, rel_se }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn suite_kernel(ctx: &Context, rec: &mut SuiteRecord) -> Result<()> {
    let ks = &ctx.scenario.kernel;
    let cert = ctx.certificate(ctx.scenario.velocity_lemma.certify_samples)?;
    if !cert.holds_sign {
        rec.note("field fails the sign condition; C_E is not positive");
    }
    let rows = kernel_scan(ctx, cert.c_e, ks.samples)?;
    let doubled = kernel_scan(ctx, cert.c_e, 2 * ks.samples)?;
    rec.samples = rows.len();
    rec.constant("c_e", cert.c_e);
    if rows.is_empty() {
        return Ok(());
    }
    let rel_se = max_of(rows.iter().chain(&doubled).map(|r| r.rel_se));
    rec.constant("max_rel_se", rel_se);
    rec.check(rel_se <= ctx.tol.kernel_rel_se, format!("Monte-Carlo relative SE {rel_se:.3}"));
    for &beta in &ks.betas {
        let pick = |rs: &[KernelRow]| -> Vec<f64> { rs.iter().filter(|r| r.beta == beta).map(|r| r.ratio).collect() };
        let (a, b) = (pick(&rows), pick(&doubled));
        let (hi, lo) = (max_of(a.iter().cloned()), a.iter().cloned().fold(f64::INFINITY, f64::min));
        let spread = hi / lo;
        let fitted_change = (max_of(b.iter().cloned()) - hi).abs() / hi;
        rec.constant(&format!("fitted_c_beta_{beta}"), hi)
            .constant(&format!("spread_beta_{beta}"), spread)
            .constant(&format!("doubling_change_beta_{beta}"), fitted_change);
        rec.check(a.iter().all(|r| r.is_finite()), format!("non-finite ratio at beta {beta}"));
        rec.check(spread < ctx.tol.kernel_spread, format!("ratio spread {spread:.3} at beta {beta}"));
    }
    Ok(())
}

fn nonnegative_data(f0: &InitialData) -> bool {
    match f0 {
        InitialData::Zero => true,
        InitialData::Uniform { value } => *value >= 0.0,
        InitialData::Maxwellian { density, .. } | InitialData::DriftingMaxwellian { density, .. } => *density >= 0.0,
        InitialData::MaxwellianPerturbation { amplitude, .. } => *amplitude >= -1.0,
    }
}

fn suite_transport(ctx: &Context, rec: &mut SuiteRecord, moments_out: &mut Vec<MomentRow>) -> Result<()> {
    let ts = &ctx.scenario.transport;
    let (f0, nu) = (&ts.initial, &ts.absorption);
    let defect = f0.compatibility_defect(&ctx.domain, 1024, ctx.seed(3))?;
    let compatible = defect <= 1e-14;
    let reflect_invariant_nu = !matches!(nu, AbsorptionRate::FieldShifted { .. });
    rec.constant("compatibility_defect", defect);

    let bsamples: Vec<(f64, Vec3, Vec3)> = boundary_phase_samples(&ctx.domain, ts.boundary_samples, ts.max_speed, ctx.seed(4))?
        .into_iter()
        .map(|(x, v)| (ts.time, x, v))
        .collect();
    let mismatch = check_specular_invariance(&ctx.domain, &ctx.field, f0, nu, &bsamples, &ctx.cfg)?;
    rec.constant("invariance_mismatch", mismatch);
    if compatible && reflect_invariant_nu {
        rec.check(mismatch <= ctx.tol.invariance, format!("specular mismatch {mismatch:e}"));
    } else {
        rec.note("data or absorption not reflection invariant; mismatch is informational");
    }

    let interior = interior_samples(&ctx.domain, ts.interior_samples, ts.max_speed, ctx.seed(5));
    let values: Vec<Result<f64>> = interior
        .par_iter()
        .map(|(x, v)| Ok(evaluate_f(&ctx.domain, &ctx.field, f0, nu, &PhaseState::new(ts.time, *x, *v), &ctx.cfg)?.f))
        .collect();
    let mut fs = Vec::with_capacity(values.len());
    for v in values {
        match v {
            Ok(f) => fs.push(f),
            Err(Error::GrazingStall { .. }) => rec.stalls += 1,
            Err(e) => return Err(e),
        }
    }
    rec.samples = bsamples.len() + fs.len();
    let min_f = fs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_f = fs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    rec.constant("min_f", min_f).constant("max_f", max_f).constant("sup_f0", f0.sup());
    if nonnegative_data(f0) && !fs.is_empty() {
        rec.check(min_f >= 0.0, format!("negative value {min_f:e}"));
    }
    if nu.is_nonnegative() && !fs.is_empty() {
        rec.check(max_f <= f0.sup() * (1.0 + 1e-12), format!("maximum principle: {max_f:e} > {:e}", f0.sup()));
    }

    let grid: Vec<Vec3> = ts.x_grid.iter().map(|x| Vec3::from(*x)).collect();
    let rows = moments(&ctx.domain, &ctx.field, f0, nu, ts.time, &grid, &ts.quadrature, &ctx.cfg)?;
    if let (InitialData::Maxwellian { density, .. }, true, AbsorptionRate::Zero) = (f0, ctx.field.is_zero(), nu) {
        let err = max_of(rows.iter().map(|r| (r.density - density).abs() / density.abs().max(f64::MIN_POSITIVE)));
        rec.constant("stationarity_error", err);
        rec.check(err <= ctx.tol.stationarity, format!("density stationarity {err:e}"));
    }
    *moments_out = rows;
    Ok(())
}

/// Output of a run: the report plus the moment table of the transport suite.
pub struct RunOutput {
    pub report: Report,
    pub moments: Vec<MomentRow>,
}

pub fn run_suite(ctx: &Context, name: SuiteName, moments_out: &mut Vec<MomentRow>) -> SuiteRecord {
    let start = Instant::now();
    let mut rec = SuiteRecord::new(name);
    let res = match name {
        SuiteName::Trace => suite_trace(ctx, &mut rec),
        SuiteName::AlphaScan => suite_alpha_scan(ctx, &mut rec),
        SuiteName::VelocityLemma => suite_velocity_lemma(ctx, &mut rec),
        SuiteName::ExitTime => suite_exit_time(ctx, &mut rec),
        SuiteName::BounceCount => suite_bounce_count(ctx, &mut rec),
        SuiteName::Cancellation => suite_cancellation(ctx, &mut rec),
        SuiteName::JacobianFd => suite_jacobian_fd(ctx, &mut rec),
        SuiteName::BoundMatrix => suite_bound_matrix(ctx, &mut rec),
        SuiteName::KernelIntegral => suite_kernel(ctx, &mut rec),
        SuiteName::TransportInvariance => suite_transport(ctx, &mut rec, moments_out),
    };
    if let Err(e) = res {
        if matches!(e, Error::GrazingStall { .. }) {
            rec.stalls += 1;
        }
        rec.status = Status::Fail;
        rec.note(format!("error: {e}"));
    }
    rec.runtime_s = start.elapsed().as_secs_f64();
    rec
}

/// Run `suites` (or the scenario's own list when empty) in order.
pub fn run_scenario(scenario: &Scenario, suites: &[SuiteName], tolerance_scale: f64) -> Result<RunOutput> {
    let ctx = Context::new(scenario, tolerance_scale)?;
    let list = if suites.is_empty() { &scenario.suites[..] } else { suites };
    let mut moments = Vec::new();
    let records = list.iter().map(|&n| run_suite(&ctx, n, &mut moments)).collect();
    Ok(RunOutput {
        report: Report {
            provenance: Provenance::new(scenario)?,
            suites: records,
        },
        moments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub launch: PhaseState,
    pub bounces: Vec<BounceRecord>,
    pub truncated: bool,
    pub final_state: Option<(Vec3, Vec3)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Bounce sequences of every launch, for the `trace` subcommand.
pub fn trace_launches(ctx: &Context) -> Vec<TraceEntry> {
    ctx.launches
        .par_iter()
        .map(|st| match ctx.cycle(st) {
            Ok(c) => TraceEntry {
                launch: *st,
                truncated: c.is_truncated(),
                final_state: c.final_state(),
                bounces: c.bounces,
                error: None,
            },
            Err(e) => TraceEntry {
                launch: *st,
                bounces: Vec::new(),
                truncated: false,
                final_state: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::Sampler;
    use crate::geometry::DomainKind;

    fn scenario(suites: Vec<SuiteName>) -> Scenario {
        let mut s = Scenario::new(DomainKind::UnitSphere, FieldSpec::outward_radial(1.0), suites);
        s.launches.sampler = Some(Sampler {
            count: 8,
            speed: [0.1, 2.0],
            alpha: [0.05, 0.2],
            seed: 5,
        });
        s.trace.horizon = 0.5;
        s
    }

    #[test]
    fn doubling_change_of_constant_set_is_zero() {
        assert_eq!(doubling_change(&[1.0, 2.0, 1.0, 2.0]).2, 0.0);
        assert!((doubling_change(&[1.0, 1.0, 1.5, 1.0]).2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bound_matrix_suite_passes() {
        let s = scenario(vec![SuiteName::BoundMatrix]);
        let out = run_scenario(&s, &[], 1.0).unwrap();
        let r = &out.report.suites[0];
        assert_eq!(r.status, Status::Pass, "{:?}", r.notes);
        assert_eq!(r.samples, 100);
    }

    #[test]
    fn empty_sampler_is_informational() {
        let mut s = scenario(vec![SuiteName::Trace, SuiteName::ExitTime, SuiteName::BounceCount]);
        s.launches.sampler.as_mut().unwrap().count = 0;
        let out = run_scenario(&s, &[], 1.0).unwrap();
        for r in &out.report.suites {
            assert_eq!(r.status, Status::Informational);
            assert_eq!(r.samples, 0);
        }
        assert_eq!(out.report.exit_code(0), 0);
    }

    #[test]
    fn trace_suite_conserves_energy() {
        let s = scenario(vec![SuiteName::Trace]);
        let out = run_scenario(&s, &[], 1.0).unwrap();
        let r = &out.report.suites[0];
        assert_eq!(r.status, Status::Pass, "{:?}", r.notes);
        assert!(r.get("max_energy_drift").unwrap() <= 1e-7);
    }

    #[test]
    fn tolerance_scale_can_force_failure() {
        let s = scenario(vec![SuiteName::BoundMatrix]);
        let out = run_scenario(&s, &[], 1e-12).unwrap();
        assert_eq!(out.report.suites[0].status, Status::Fail);
    }

    #[test]
    fn outside_launch_is_config_error() {
        let mut s = scenario(vec![SuiteName::Trace]);
        s.launches.explicit.push(crate::cli::config::Launch {
            t: 0.0,
            x: [2.0, 0.0, 0.0],
            v: [1.0, 0.0, 0.0],
        });
        assert!(matches!(run_scenario(&s, &[], 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn trace_entries_follow_launch_order() {
        let s = scenario(vec![]);
        let ctx = Context::new(&s, 1.0).unwrap();
        let t = trace_launches(&ctx);
        assert_eq!(t.len(), ctx.launches.len());
        for (e, l) in t.iter().zip(&ctx.launches) {
            assert_eq!(e.launch, *l);
            assert!(e.error.is_none());
        }
    }
}
