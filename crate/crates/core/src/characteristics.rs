//! Backward characteristics `dX/ds = V`, `dV/ds = E(s, X)`, boundary events and
//! specular cycles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::geometry::DomainSpec;
use crate::linalg::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    /// Upper bound on the RK4 step.
    pub h_max: f64,
    /// Step is at most `speed_scale / (1 + |v|)`.
    pub speed_scale: f64,
    /// Relative grazing floor: bounces with `|n.v| < grazing_floor * (1 + |v|)` stall.
    pub grazing_floor: f64,
    /// Sub-samples per step used to catch double crossings near the boundary.
    pub substeps: usize,
    /// Speed / incidence threshold separating bounce types.
    pub delta_type: f64,
    /// Group length scale as a fraction of the domain diameter.
    pub l_xi_fraction: f64,
    /// Give up on `backward_exit_time` after this much time.
    pub max_exit_time: f64,
    /// Keep dense output for every arc.
    pub store_arcs: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            h_max: 1e-3,
            speed_scale: 0.05,
            grazing_floor: 1e-8,
            substeps: 4,
            delta_type: 0.05,
            l_xi_fraction: 0.1,
            max_exit_time: 100.0,
            store_arcs: true,
        }
    }
}

impl TraceConfig {
    pub fn step_size(&self, speed: f64) -> f64 {
        self.h_max.min(self.speed_scale / (1.0 + speed))
    }

    pub fn floor(&self, speed: f64) -> f64 {
        self.grazing_floor * (1.0 + speed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

impl PhaseState {
    pub fn new(t: f64, x: Vec3, v: Vec3) -> Self {
        Self { t, x, v }
    }
}

/// Dense-output node: state and acceleration at time `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcNode {
    pub s: f64,
    pub x: Vec3,
    pub v: Vec3,
    pub a: Vec3,
}

/// Backward arc, nodes ordered by decreasing time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Arc {
    pub nodes: Vec<ArcNode>,
}

impl Arc {
    pub fn start(&self) -> f64 {
        self.nodes.first().map_or(f64::NAN, |n| n.s)
    }

    pub fn end(&self) -> f64 {
        self.nodes.last().map_or(f64::NAN, |n| n.s)
    }

    /// Cubic Hermite interpolation of `(X, V)` at time `s`, clamped to the arc.
    pub fn eval(&self, s: f64) -> (Vec3, Vec3) {
        let n = &self.nodes;
        if n.len() == 1 || s >= n[0].s {
            return (n[0].x, n[0].v);
        }
        let last = n[n.len() - 1];
        if s <= last.s {
            return (last.x, last.v);
        }
        // nodes decrease in s; find k with n[k].s >= s > n[k+1].s
        let k = n.partition_point(|node| node.s >= s).saturating_sub(1).min(n.len() - 2);
        let (p, q) = (n[k], n[k + 1]);
        let h = q.s - p.s;
        let u = (s - p.s) / h;
        let (h00, h10, h01, h11) = hermite_basis(u);
        let x = p.x * h00 + p.v * (h10 * h) + q.x * h01 + q.v * (h11 * h);
        let v = p.v * h00 + p.a * (h10 * h) + q.v * h01 + q.a * (h11 * h);
        (x, v)
    }
}

fn hermite_basis(u: f64) -> (f64, f64, f64, f64) {
    let u2 = u * u;
    let u3 = u2 * u;
    (
        2.0 * u3 - 3.0 * u2 + 1.0,
        u3 - 2.0 * u2 + u,
        -2.0 * u3 + 3.0 * u2,
        u3 - u2,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEvent {
    pub s: f64,
    pub x: Vec3,
    pub v: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcResult {
    pub arc: Arc,
    pub hit: Option<BoundaryEvent>,
}

/// One classical RK4 step of size `dt` (negative for backward integration).
pub fn rk4_step(field: &FieldSpec, s: f64, x: &Vec3, v: &Vec3, dt: f64) -> (Vec3, Vec3) {
    let half = 0.5 * dt;
    let k1x = *v;
    let k1v = field.value(s, x);
    let k2x = v + k1v * half;
    let k2v = field.value(s + half, &(x + k1x * half));
    let k3x = v + k2v * half;
    let k3v = field.value(s + half, &(x + k2x * half));
    let k4x = v + k3v * dt;
    let k4v = field.value(s + dt, &(x + k3x * dt));
    let sixth = dt / 6.0;
    (
        x + (k1x + (k2x + k3x) * 2.0 + k4x) * sixth,
        v + (k1v + (k2v + k3v) * 2.0 + k4v) * sixth,
    )
}

/// Specular reflection `R_x v = v - 2 n (n . v)` at a boundary point.
pub fn reflect(domain: &DomainSpec, x: &Vec3, v: &Vec3) -> Result<Vec3> {
    let n = domain.normal_at(x)?;
    Ok(reflect_with_normal(&n, v))
}

pub fn reflect_with_normal(n: &Vec3, v: &Vec3) -> Vec3 {
    v - n * (2.0 * n.dot(v))
}

/// Boundary function sampled along a step: `xi` for interior starts and
/// `xi / (t0 - s)` for arcs launched from the boundary, which removes the
/// trivial root at the launch time.
struct EventFn<'a> {
    domain: &'a DomainSpec,
    t0: f64,
    from_boundary: bool,
}

impl EventFn<'_> {
    fn value(&self, s: f64, x: &Vec3) -> f64 {
        let xi = self.domain.xi(x);
        if self.from_boundary {
            xi / (self.t0 - s)
        } else {
            xi
        }
    }

    fn value_and_slope(&self, s: f64, x: &Vec3, v: &Vec3) -> (f64, f64) {
        let xi = self.domain.xi(x);
        let dxi = self.domain.grad(x).dot(v);
        if self.from_boundary {
            let w = self.t0 - s;
            (xi / w, (dxi * w + xi) / (w * w))
        } else {
            (xi, dxi)
        }
    }
}

/// Integrate backward from `state` to `s_target`, stopping at the first
/// boundary crossing.
pub fn integrate_arc(
    domain: &DomainSpec,
    field: &FieldSpec,
    state: &PhaseState,
    s_target: f64,
    cfg: &TraceConfig,
) -> Result<ArcResult> {
    if s_target > state.t {
        return Err(Error::InvalidArgument(format!(
            "s_target {} is after the launch time {}",
            s_target, state.t
        )));
    }
    let eps_bd = domain.boundary_tolerance();
    let xi0 = domain.xi(&state.x);
    if xi0 > eps_bd {
        return Err(Error::InvalidArgument(format!("launch point is outside the domain (xi = {xi0:e})")));
    }
    let speed = state.v.norm();
    let floor = cfg.floor(speed);
    let mut from_boundary = false;
    if xi0.abs() <= eps_bd {
        let g = domain.grad(&state.x);
        let n = g / g.norm();
        let vn = n.dot(&state.v);
        if vn.abs() < floor {
            return Err(Error::GrazingStall {
                time: state.t,
                v_perp: vn.abs(),
                floor,
            });
        }
        if vn < 0.0 {
            // backward motion leaves immediately
            let a = field.value(state.t, &state.x);
            return Ok(ArcResult {
                arc: Arc {
                    nodes: vec![ArcNode {
                        s: state.t,
                        x: state.x,
                        v: state.v,
                        a,
                    }],
                },
                hit: Some(BoundaryEvent {
                    s: state.t,
                    x: state.x,
                    v: state.v,
                }),
            });
        }
        from_boundary = true;
    }
    let ev = EventFn {
        domain,
        t0: state.t,
        from_boundary,
    };
    let h = cfg.step_size(speed);
    let mut nodes = Vec::new();
    let mut cur = ArcNode {
        s: state.t,
        x: state.x,
        v: state.v,
        a: field.value(state.t, &state.x),
    };
    // limit of the event function at the launch time
    let mut g_cur = if from_boundary {
        -domain.grad(&state.x).dot(&state.v)
    } else {
        xi0
    };
    let mut k: u64 = 0;
    nodes.push(cur);
    loop {
        if cur.s <= s_target {
            return Ok(ArcResult {
                arc: Arc { nodes },
                hit: None,
            });
        }
        k += 1;
        let s_next = (state.t - k as f64 * h).max(s_target);
        let dt = s_next - cur.s;
        let (x1, v1) = rk4_step(field, cur.s, &cur.x, &cur.v, dt);
        if !(x1.iter().all(|c| c.is_finite()) && v1.iter().all(|c| c.is_finite())) {
            return Err(Error::StepFailure(format!("non-finite state at s = {s_next}")));
        }
        let g1 = ev.value(s_next, &x1);

        // scan for a crossing inside the step when the boundary is within reach
        let mut bracket = None;
        let reach = (domain.grad(&x1).norm() * (v1.norm() + cur.v.norm()) + 1.0) * dt.abs();
        let near = domain.xi(&cur.x).max(domain.xi(&x1)) > -reach;
        if near && cfg.substeps > 1 {
            let mut g_prev = g_cur;
            let mut s_prev = cur.s;
            for j in 1..cfg.substeps {
                let sj = cur.s + dt * j as f64 / cfg.substeps as f64;
                let (xj, _) = rk4_step(field, cur.s, &cur.x, &cur.v, sj - cur.s);
                let gj = ev.value(sj, &xj);
                if g_prev < 0.0 && gj >= 0.0 {
                    bracket = Some((s_prev, g_prev, sj, gj));
                    break;
                }
                g_prev = gj;
                s_prev = sj;
            }
            if bracket.is_none() && g_prev < 0.0 && g1 >= 0.0 {
                bracket = Some((s_prev, g_prev, s_next, g1));
            }
        } else if g_cur < 0.0 && g1 >= 0.0 {
            bracket = Some((cur.s, g_cur, s_next, g1));
        }

        if let Some((s_in, g_in, s_out, g_out)) = bracket {
            let hit = locate_event(field, &ev, &cur, (s_in, g_in), (s_out, g_out), speed)?;
            let n = domain.unit_normal(&hit.x)?;
            let vn = n.dot(&hit.v).abs();
            if vn < floor {
                return Err(Error::GrazingStall {
                    time: hit.s,
                    v_perp: vn,
                    floor,
                });
            }
            nodes.push(ArcNode {
                s: hit.s,
                x: hit.x,
                v: hit.v,
                a: field.value(hit.s, &hit.x),
            });
            return Ok(ArcResult {
                arc: Arc { nodes },
                hit: Some(hit),
            });
        }
        cur = ArcNode {
            s: s_next,
            x: x1,
            v: v1,
            a: field.value(s_next, &x1),
        };
        g_cur = g1;
        nodes.push(cur);
    }
}

/// Root of the event function on `[s_out, s_in]` using the RK4 map from
/// `node` with a variable final step. Newton with bracketing safeguard.
fn locate_event(
    field: &FieldSpec,
    ev: &EventFn,
    node: &ArcNode,
    inside: (f64, f64),
    outside: (f64, f64),
    speed: f64,
) -> Result<BoundaryEvent> {
    let state_at = |s: f64| {
        if s == node.s {
            (node.x, node.v)
        } else {
            rk4_step(field, node.s, &node.x, &node.v, s - node.s)
        }
    };
    let (mut s_in, g_in) = inside;
    let (mut s_out, g_out) = outside;
    if g_out == 0.0 {
        let (x, v) = state_at(s_out);
        return Ok(BoundaryEvent { s: s_out, x, v });
    }
    // secant seed
    let mut s = s_in - g_in * (s_out - s_in) / (g_out - g_in);
    let tol = 4.0 * f64::EPSILON * (1.0 + node.s.abs());
    for _ in 0..100 {
        let (x, v) = state_at(s);
        let (g, dg) = ev.value_and_slope(s, &x, &v);
        if g == 0.0 {
            return Ok(BoundaryEvent { s, x, v });
        }
        if g < 0.0 {
            s_in = s;
        } else {
            s_out = s;
        }
        let width = (s_in - s_out).abs();
        let mut next = if dg.abs() > 1e-10 * speed.max(1e-300) {
            s - g / dg
        } else {
            f64::NAN
        };
        let lo = s_in.min(s_out);
        let hi = s_in.max(s_out);
        if !(next > lo && next < hi) {
            next = 0.5 * (s_in + s_out);
        }
        if (next - s).abs() <= tol || width <= tol {
            let (x, v) = state_at(next);
            return Ok(BoundaryEvent { s: next, x, v });
        }
        s = next;
    }
    let (x, v) = state_at(s);
    let residual = ev.domain.xi(&x).abs();
    if residual <= ev.domain.boundary_tolerance() {
        Ok(BoundaryEvent { s, x, v })
    } else {
        Err(Error::StepFailure(format!("event location did not converge (|xi| = {residual:e})")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitInfo {
    pub t_b: f64,
    pub x_b: Vec3,
    pub v_b: Vec3,
}

/// Backward exit time `t_b` and the exit state `(x_b, v_b)`.
pub fn backward_exit_time(
    domain: &DomainSpec,
    field: &FieldSpec,
    state: &PhaseState,
    cfg: &TraceConfig,
) -> Result<ExitInfo> {
    let cfg = TraceConfig {
        store_arcs: false,
        ..*cfg
    };
    let res = integrate_arc(domain, field, state, state.t - cfg.max_exit_time, &cfg)?;
    match res.hit {
        Some(hit) => Ok(ExitInfo {
            t_b: state.t - hit.s,
            x_b: hit.x,
            v_b: hit.v,
        }),
        None => Err(Error::NoExit {
            duration: cfg.max_exit_time,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BounceType {
    I,
    II,
    III,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BounceRecord {
    pub ell: usize,
    pub t_ell: f64,
    pub x_ell: Vec3,
    pub v_in: Vec3,
    pub v_out: Vec3,
    pub v_perp: f64,
    pub r_ell: f64,
    pub bounce_type: BounceType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// The cycle reached `s_end`.
    Reached,
    /// `max_bounces` were recorded before `s_end`.
    Truncated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecularCycle {
    pub origin: PhaseState,
    pub s_end: f64,
    pub bounces: Vec<BounceRecord>,
    /// `arcs[l]` runs from `t^l` back to `t^{l+1}` (or `s_end`).
    pub arcs: Vec<Arc>,
    /// Bounce index groups; consecutive groups share their end points.
    pub groups: Vec<Vec<usize>>,
    pub termination: Termination,
    pub l_xi: f64,
}

pub fn classify(speed: f64, r: f64, delta_type: f64) -> BounceType {
    if speed <= delta_type {
        BounceType::I
    } else if r <= delta_type.sqrt() {
        BounceType::II
    } else {
        BounceType::III
    }
}

/// Specular cycle of `state` backward to `s_end`, with at most `max_bounces` bounces.
pub fn build_cycle(
    domain: &DomainSpec,
    field: &FieldSpec,
    state: &PhaseState,
    s_end: f64,
    max_bounces: usize,
    cfg: &TraceConfig,
) -> Result<SpecularCycle> {
    if s_end >= state.t {
        return Err(Error::InvalidArgument(format!(
            "s_end {} must precede the launch time {}",
            s_end, state.t
        )));
    }
    let speed0 = state.v.norm();
    let mut bounces = Vec::new();
    let mut arcs = Vec::new();
    let mut cur = *state;
    let mut termination = Termination::Reached;
    loop {
        let res = integrate_arc(domain, field, &cur, s_end, cfg)?;
        if cfg.store_arcs {
            arcs.push(res.arc);
        }
        let Some(hit) = res.hit else { break };
        if bounces.len() == max_bounces {
            termination = Termination::Truncated;
            break;
        }
        let n = domain.unit_normal(&hit.x)?;
        let v_out = reflect_with_normal(&n, &hit.v);
        let v_perp = n.dot(&hit.v).abs();
        let out_speed = v_out.norm();
        let r = if out_speed > 0.0 { v_perp / out_speed } else { 0.0 };
        bounces.push(BounceRecord {
            ell: bounces.len() + 1,
            t_ell: hit.s,
            x_ell: hit.x,
            v_in: hit.v,
            v_out,
            v_perp,
            r_ell: r,
            bounce_type: classify(speed0, r, cfg.delta_type),
        });
        cur = PhaseState::new(hit.s, hit.x, v_out);
    }
    let l_xi = cfg.l_xi_fraction * domain.diameter();
    let times: Vec<f64> = std::iter::once(state.t).chain(bounces.iter().map(|b| b.t_ell)).collect();
    let groups = group_indices(&times, speed0, l_xi);
    Ok(SpecularCycle {
        origin: *state,
        s_end,
        bounces,
        arcs,
        groups,
        termination,
        l_xi,
    })
}

/// Split bounce indices `1..` into groups: a group closes at the first index
/// whose time lies at least `l_xi / speed` before the group's anchor. The
/// closing index also opens the next group.
pub fn group_indices(times: &[f64], speed: f64, l_xi: f64) -> Vec<Vec<usize>> {
    let n = times.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut groups = Vec::new();
    let mut group = Vec::new();
    let mut anchor = 0;
    for ell in 1..=n {
        group.push(ell);
        if speed * (times[anchor] - times[ell]).abs() >= l_xi {
            groups.push(std::mem::take(&mut group));
            group.push(ell);
            anchor = ell;
        }
    }
    if group.len() > 1 || groups.is_empty() {
        groups.push(group);
    }
    groups
}

impl SpecularCycle {
    /// Number of bounces between the launch time and `s`.
    pub fn ell_star(&self, s: f64) -> usize {
        self.bounces.iter().take_while(|b| b.t_ell > s).count()
    }

    /// Generalized characteristic `(X_cl(s), V_cl(s))`.
    pub fn state_at(&self, s: f64) -> Option<(Vec3, Vec3)> {
        if s > self.origin.t || s < self.s_end || self.arcs.is_empty() {
            return None;
        }
        let ell = self.ell_star(s);
        self.arcs.get(ell).map(|arc| arc.eval(s))
    }

    pub fn is_truncated(&self) -> bool {
        self.termination == Termination::Truncated
    }

    /// Time at which the cycle stops: `s_end`, or the last bounce when truncated.
    pub fn final_time(&self) -> f64 {
        match self.termination {
            Termination::Reached => self.s_end,
            Termination::Truncated => self.bounces.last().map_or(self.origin.t, |b| b.t_ell),
        }
    }

    /// State at the end of the cycle, taken from the last arc.
    pub fn final_state(&self) -> Option<(Vec3, Vec3)> {
        self.arcs.last().and_then(|a| a.nodes.last()).map(|n| (n.x, n.v))
    }

    /// Exit-time ratio `|t - t^1| (1 + |v| + |v|^2) / |v_perp^1|`.
    pub fn exit_ratio(&self) -> Option<f64> {
        let b = self.bounces.first()?;
        let speed = self.origin.v.norm();
        Some((self.origin.t - b.t_ell).abs() * (1.0 + speed + speed * speed) / b.v_perp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sphere() -> DomainSpec {
        DomainSpec::unit_sphere()
    }

    #[test]
    fn straight_line_without_hit() {
        let st = PhaseState::new(1.0, Vec3::zeros(), Vec3::z());
        let r = integrate_arc(&sphere(), &FieldSpec::zero(), &st, 0.5, &TraceConfig::default()).unwrap();
        assert!(r.hit.is_none());
        let last = r.arc.nodes.last().unwrap();
        assert_eq!(last.s, 0.5);
        assert_relative_eq!(last.x, Vec3::new(0.0, 0.0, -0.5), epsilon = 1e-14);
    }

    #[test]
    fn unit_chord_hit() {
        let st = PhaseState::new(1.0, Vec3::zeros(), Vec3::z());
        let r = integrate_arc(&sphere(), &FieldSpec::zero(), &st, -0.5, &TraceConfig::default()).unwrap();
        let hit = r.hit.unwrap();
        assert!(hit.s.abs() < 1e-13);
        assert_relative_eq!(hit.x, -Vec3::z(), epsilon = 1e-13);
    }

    #[test]
    fn parabolic_flight_oracle() {
        let st = PhaseState::new(2.0, Vec3::zeros(), Vec3::zeros());
        let f = FieldSpec::constant(Vec3::new(0.0, 0.0, -1.0));
        let r = integrate_arc(&sphere(), &f, &st, -5.0, &TraceConfig::default()).unwrap();
        let hit = r.hit.unwrap();
        assert!((hit.s - (2.0 - 2f64.sqrt())).abs() < 1e-12, "s* = {}", hit.s);
        assert_relative_eq!(hit.x, -Vec3::z(), epsilon = 1e-12);
        // dense output on the parabola X(s) = -(t - s)^2 / 2
        let (x, _) = r.arc.eval(1.2345);
        assert!((x[2] + 0.5 * (2.0f64 - 1.2345).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn exit_time_examples() {
        let cfg = TraceConfig::default();
        let d = sphere();
        let v = Vec3::new(0.6, 0.0, 0.8);
        let e = backward_exit_time(&d, &FieldSpec::zero(), &PhaseState::new(0.0, Vec3::zeros(), v), &cfg).unwrap();
        assert!((e.t_b - 1.0).abs() < 1e-13);
        assert_relative_eq!(e.x_b, -v, epsilon = 1e-13);

        let st = PhaseState::new(0.0, Vec3::new(0.0, 0.0, 0.5), Vec3::z());
        let e = backward_exit_time(&d, &FieldSpec::zero(), &st, &cfg).unwrap();
        assert!((e.t_b - 1.5).abs() < 1e-13);
        assert_relative_eq!(e.x_b, -Vec3::z(), epsilon = 1e-13);
    }

    #[test]
    fn exit_time_radial_field_matches_cosh_flight() {
        // X'' = X from rest at 0.5: X(t - s) = 0.5 cosh(t - s), exit at acosh(2)
        let st = PhaseState::new(0.0, Vec3::new(0.0, 0.0, 0.5), Vec3::zeros());
        let e = backward_exit_time(&sphere(), &FieldSpec::outward_radial(1.0), &st, &TraceConfig::default()).unwrap();
        let exact = 2f64.acosh();
        assert!((e.t_b - exact).abs() < 1e-11, "t_b = {} vs {}", e.t_b, exact);
        assert!((e.v_b[2] + 0.5 * exact.sinh()).abs() < 1e-10);
    }

    #[test]
    fn exit_time_refined_step_reference() {
        let st = PhaseState::new(0.3, Vec3::new(0.1, -0.2, 0.4), Vec3::new(0.3, 0.5, -0.2));
        let f = FieldSpec::modulated_radial(1.0, crate::field::Modulation { bias: 1.5, amplitude: 0.5, frequency: 2.0, phase: 0.0 });
        let coarse = backward_exit_time(&sphere(), &f, &st, &TraceConfig::default()).unwrap();
        let fine_cfg = TraceConfig { h_max: 1e-4, ..TraceConfig::default() };
        let fine = backward_exit_time(&sphere(), &f, &st, &fine_cfg).unwrap();
        assert!((coarse.t_b - fine.t_b).abs() < 1e-11);
        assert!((coarse.x_b - fine.x_b).norm() < 1e-11);
    }

    #[test]
    fn reflect_examples() {
        let d = sphere();
        let r = reflect(&d, &Vec3::z(), &Vec3::new(1.0, 0.0, -2.0)).unwrap();
        assert_relative_eq!(r, Vec3::new(1.0, 0.0, 2.0), epsilon = 1e-15);
        let t = Vec3::new(0.3, 0.7, 0.0);
        assert_eq!(reflect(&d, &Vec3::z(), &t).unwrap(), t);
        assert!(matches!(reflect(&d, &Vec3::new(0.0, 0.0, 0.5), &t), Err(Error::NotOnBoundary { .. })));
    }

    #[test]
    fn diameter_billiard_period_two() {
        let st = PhaseState::new(0.0, Vec3::zeros(), Vec3::x());
        let c = build_cycle(&sphere(), &FieldSpec::zero(), &st, -9.5, 100, &TraceConfig::default()).unwrap();
        assert_eq!(c.bounces.len(), 5);
        for w in c.bounces.windows(2) {
            assert!((w[0].t_ell - w[1].t_ell - 2.0).abs() < 1e-12);
        }
        assert_eq!(c.termination, Termination::Reached);
    }

    #[test]
    fn near_grazing_chords_on_sphere() {
        // start on the boundary at the north pole heading into the domain backward
        let vn: f64 = 0.1;
        let v = Vec3::new((1.0 - vn * vn).sqrt(), 0.0, vn);
        let st = PhaseState::new(0.0, Vec3::z(), v);
        let c = build_cycle(&sphere(), &FieldSpec::zero(), &st, -2.0, 100, &TraceConfig::default()).unwrap();
        assert!(c.bounces.len() >= 8);
        let mut prev = 0.0;
        for b in &c.bounces {
            assert!((prev - b.t_ell - 2.0 * vn).abs() < 1e-12);
            assert!((b.v_perp - vn).abs() < 1e-12);
            assert!((b.v_out.norm() - b.v_in.norm()).abs() < 1e-14);
            prev = b.t_ell;
        }
    }

    #[test]
    fn radial_field_bounce_times_controlled_by_v_perp() {
        // from rest near the boundary the outward field pushes the backward
        // trajectory into the wall over and over; t^l - t^{l+1} <= C |v_perp| / C_E
        let d = sphere();
        let st = PhaseState::new(0.0, Vec3::new(0.0, 0.0, 0.95), Vec3::zeros());
        let c = build_cycle(&d, &FieldSpec::outward_radial(1.0), &st, -3.0, 1000, &TraceConfig::default()).unwrap();
        assert!(c.bounces.len() >= 3);
        let mut worst: f64 = 0.0;
        for w in c.bounces.windows(2) {
            worst = worst.max((w[0].t_ell - w[1].t_ell) / w[1].v_perp);
        }
        // for this field the ratio is exactly 2 / C_E up to curvature of the flight
        assert!(worst.is_finite() && worst < 2.5, "ratio = {worst}");
    }

    #[test]
    fn grazing_launch_stalls() {
        let st = PhaseState::new(0.0, Vec3::z(), Vec3::x());
        let r = integrate_arc(&sphere(), &FieldSpec::zero(), &st, -1.0, &TraceConfig::default());
        assert!(matches!(r, Err(Error::GrazingStall { .. })));
    }

    #[test]
    fn energy_conserved_for_static_potential_field() {
        let d = DomainSpec::ellipsoid(1.3, 1.0, 0.8).unwrap();
        let f = FieldSpec::new(crate::field::FieldKind::RadialCubic {
            gain: 0.5,
            modulation: crate::field::Modulation::constant(),
        });
        let st = PhaseState::new(0.0, Vec3::new(0.1, 0.2, -0.1), Vec3::new(0.7, -0.4, 0.5));
        let c = build_cycle(&d, &f, &st, -4.0, 1000, &TraceConfig::default()).unwrap();
        let energy = |x: &Vec3, v: &Vec3| 0.5 * v.norm_squared() + f.potential(x).unwrap();
        let e0 = energy(&st.x, &st.v);
        for arc in &c.arcs {
            for n in &arc.nodes {
                assert!((energy(&n.x, &n.v) - e0).abs() < 1e-8);
            }
        }
        assert!(c.bounces.len() > 2);
    }

    #[test]
    fn groups_share_end_points() {
        let times = [0.0, -0.05, -0.1, -0.2, -0.25, -0.31, -0.4];
        let g = group_indices(&times, 1.0, 0.1);
        assert_eq!(g, vec![vec![1, 2], vec![2, 3], vec![3, 4, 5], vec![5, 6]]);
        assert_eq!(group_indices(&times, 0.0, 0.1), vec![vec![1, 2, 3, 4, 5, 6]]);
    }

    #[test]
    fn classification_thresholds() {
        assert_eq!(classify(0.04, 0.9, 0.05), BounceType::I);
        assert_eq!(classify(1.0, 0.2, 0.05), BounceType::II);
        assert_eq!(classify(1.0, 0.3, 0.05), BounceType::III);
    }

    #[test]
    fn cycle_dense_output_and_ell_star() {
        let st = PhaseState::new(0.0, Vec3::zeros(), Vec3::x());
        let c = build_cycle(&sphere(), &FieldSpec::zero(), &st, -4.0, 100, &TraceConfig::default()).unwrap();
        assert_eq!(c.ell_star(-0.5), 0);
        assert_eq!(c.ell_star(-1.5), 1);
        assert_eq!(c.ell_star(-3.5), 2);
        let (x, v) = c.state_at(-1.5).unwrap();
        assert_relative_eq!(x, Vec3::new(-0.5, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(v, -Vec3::x(), epsilon = 1e-12);
    }

    #[test]
    fn max_bounces_truncates() {
        let st = PhaseState::new(0.0, Vec3::zeros(), Vec3::x());
        let c = build_cycle(&sphere(), &FieldSpec::zero(), &st, -100.0, 3, &TraceConfig::default()).unwrap();
        assert!(c.is_truncated());
        assert_eq!(c.bounces.len(), 3);
    }

    proptest! {
        #[test]
        fn reflection_is_involutive_isometry(
            th in 0.0..std::f64::consts::PI, ph in 0.0..std::f64::consts::TAU,
            v in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let d = DomainSpec::ellipsoid(1.5, 1.0, 0.7).unwrap();
            let dir = Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
            let x = d.radial_boundary_point(&dir).unwrap();
            let v = Vec3::from(v);
            let r = reflect(&d, &x, &v).unwrap();
            prop_assert!((reflect(&d, &x, &r).unwrap() - v).norm() <= 1e-13 * (1.0 + v.norm()));
            prop_assert!((r.norm() - v.norm()).abs() <= 1e-13 * (1.0 + v.norm()));
        }

        #[test]
        fn bounces_lie_on_boundary(
            x in prop::array::uniform3(-0.5f64..0.5),
            v in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let d = DomainSpec::ellipsoid(1.2, 1.0, 0.9).unwrap();
            let f = FieldSpec::outward_radial(0.5);
            let st = PhaseState::new(0.0, Vec3::from(x), Vec3::from(v));
            let c = build_cycle(&d, &f, &st, -1.0, 200, &TraceConfig::default()).unwrap();
            let mut prev = 0.0;
            for b in &c.bounces {
                prop_assert!(d.xi(&b.x_ell).abs() <= d.boundary_tolerance());
                prop_assert!(b.t_ell < prev || (b.ell == 1 && b.t_ell <= prev));
                prev = b.t_ell;
            }
        }
    }
}
