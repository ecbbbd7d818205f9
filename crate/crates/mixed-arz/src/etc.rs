//! Event-triggered boundary control: trigger dynamics and the hold logic.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::model::LinearizedSystem;
use crate::sim::{ControlSample, Controller, SimState, Simulator};

/// Design parameters of the event-triggered controller.
///
/// `zeta`, `sigma`, `eta` and `m0` shape only the trigger dynamics; `mu`,
/// `a_coef`, `b_coef` and `varsigma` also enter the static feasibility
/// conditions checked by [`validate_etc_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct EtcParams {
    pub zeta: f64,
    pub sigma: f64,
    pub eta: f64,
    /// Decay rate of the Lyapunov weights (1/s).
    pub mu: f64,
    /// Rightward-state weights A1..A3.
    pub a_coef: [f64; 3],
    /// Leftward-state weight B.
    pub b_coef: f64,
    /// Boundary-trace weights for the dynamic variable.
    pub varsigma: [f64; 4],
    /// Initial value of the dynamic variable, strictly negative.
    pub m0: f64,
}

impl Default for EtcParams {
    fn default() -> EtcParams {
        EtcParams {
            zeta: 8e-3,
            sigma: 1e-4,
            eta: 0.9,
            mu: 5e-4,
            a_coef: [2e-4, 3e-5, 4e-5],
            b_coef: 9e-3,
            varsigma: [2e-10, 2e-9, 1.2e-12, 6e-3],
            m0: -10.0,
        }
    }
}

impl EtcParams {
    /// Rejects values outside the admissible set (positivity, m0 < 0).
    pub fn check(&self) -> Result<()> {
        let positives = [
            ("zeta", self.zeta),
            ("sigma", self.sigma),
            ("eta", self.eta),
            ("mu", self.mu),
            ("a1", self.a_coef[0]),
            ("a2", self.a_coef[1]),
            ("a3", self.a_coef[2]),
            ("b", self.b_coef),
            ("varsigma1", self.varsigma[0]),
            ("varsigma2", self.varsigma[1]),
            ("varsigma3", self.varsigma[2]),
            ("varsigma4", self.varsigma[3]),
        ];
        for (name, value) in positives {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Validation(format!(
                    "trigger parameter {name} must be positive and finite, got {value}"
                )));
            }
        }
        if !(self.m0 < 0.0) || !self.m0.is_finite() {
            return Err(Error::Validation(format!(
                "m0 must be strictly negative, got {}",
                self.m0
            )));
        }
        Ok(())
    }

    fn boundary_factor(&self, sys: &LinearizedSystem) -> f64 {
        (self.mu * sys.params.road_length / sys.lambda_minus).exp()
    }
}

/// One event: when it fired and what the controller saw at that instant.
#[derive(Debug, Clone, Copy)]
pub struct EventRecord {
    pub t: f64,
    /// Time since the previous event (0 for the initial event).
    pub dwell: f64,
    /// Control value sampled and held from this instant.
    pub u: f64,
    /// Lyapunov functional at the event.
    pub v: f64,
    /// Dynamic variable just before its update at the event step.
    pub m: f64,
}

/// Target-system state frozen at the last event.
#[derive(Debug, Clone)]
pub struct HeldState {
    pub alpha: [Vec<f64>; 3],
    pub beta: Vec<f64>,
}

/// Mutable trigger bookkeeping carried across a closed-loop run.
#[derive(Debug, Clone)]
pub struct TriggerState {
    /// Dynamic variable m, negative throughout any valid run.
    pub m: f64,
    pub t_last_event: f64,
    /// Control value currently applied (zero-order hold).
    pub held_control: f64,
    pub event_log: Vec<EventRecord>,
    /// Snapshot backing the discrepancy integral; None before the first event.
    pub held_state: Option<HeldState>,
}

impl TriggerState {
    pub fn new(m0: f64) -> TriggerState {
        TriggerState {
            m: m0,
            t_last_event: 0.0,
            held_control: 0.0,
            event_log: Vec::new(),
            held_state: None,
        }
    }
}

/// Continuous backstepping feedback for the current plant state.
pub fn continuous_control(
    state: &SimState,
    kernels: &KernelSet,
    sys: &LinearizedSystem,
) -> Result<f64> {
    kernels.control_value(sys, &state.w_plus, &state.w_minus)
}

/// The value a zero-order hold applies between events.
pub fn sampled_control(trigger: &TriggerState) -> f64 {
    trigger.held_control
}

/// Actuation discrepancy in integral form: the feedback functional applied
/// to the difference between the held and the current target states.
pub fn discrepancy(
    state: &SimState,
    trigger: &TriggerState,
    kernels: &KernelSet,
    sys: &LinearizedSystem,
) -> Result<f64> {
    let Some(held) = &trigger.held_state else {
        return Ok(0.0);
    };
    let (alpha, beta) = kernels.forward_transform(&state.w_plus, &state.w_minus)?;
    if beta.len() != held.beta.len() {
        return Err(Error::Validation(format!(
            "held state has {} nodes, current state has {}",
            held.beta.len(),
            beta.len()
        )));
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let d_alpha = [
        diff(&held.alpha[0], &alpha[0]),
        diff(&held.alpha[1], &alpha[1]),
        diff(&held.alpha[2], &alpha[2]),
    ];
    let d_beta = diff(&held.beta, &beta);
    kernels.control_from_target(sys, &d_alpha, &d_beta)
}

/// Lyapunov functional of the target state: exponentially weighted L2
/// energy, trapezoidal in x.
pub fn lyapunov(
    alpha: &[Vec<f64>; 3],
    beta: &[f64],
    params: &EtcParams,
    sys: &LinearizedSystem,
) -> f64 {
    let n = beta.len();
    let h = sys.params.road_length / (n - 1) as f64;
    let lm = sys.lambda_minus;
    let mut total = 0.0;
    for j in 0..n {
        let weight = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
        let x = h * j as f64;
        let mut sq = (params.b_coef / lm) * (params.mu * x / lm).exp() * beta[j] * beta[j];
        for i in 0..3 {
            let lam = sys.lambda_plus[i];
            sq += (params.a_coef[i] / lam) * (-params.mu * x / lam).exp() * alpha[i][j] * alpha[i][j];
        }
        total += weight * sq;
    }
    total * h
}

fn m_rate(
    m: f64,
    d: f64,
    v: f64,
    alpha_at_l: [f64; 3],
    beta_at_0: f64,
    params: &EtcParams,
    sys: &LinearizedSystem,
) -> f64 {
    let mut rate = -params.eta * m + params.b_coef * params.boundary_factor(sys) * d * d
        - params.sigma * params.mu * v;
    for i in 0..3 {
        rate -= params.varsigma[i] * alpha_at_l[i] * alpha_at_l[i];
    }
    rate - params.varsigma[3] * beta_at_0 * beta_at_0
}

/// Explicit Euler update of the dynamic variable; errors if the update
/// leaves the admissible half line.
pub fn m_step(
    m: f64,
    d: f64,
    v: f64,
    alpha_at_l: [f64; 3],
    beta_at_0: f64,
    params: &EtcParams,
    sys: &LinearizedSystem,
    dt: f64,
) -> Result<f64> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Validation(format!("dt must be positive, got {dt}")));
    }
    let next = m + dt * m_rate(m, d, v, alpha_at_l, beta_at_0, params, sys);
    if next >= 0.0 {
        return Err(Error::Numerics(format!(
            "dynamic variable left the negative half line (m = {next:.3e}); \
             the trigger parameters or the step size are inconsistent"
        )));
    }
    Ok(next)
}

/// The trigger inequality, inclusive at equality.
pub fn should_trigger(
    d: f64,
    v: f64,
    m: f64,
    params: &EtcParams,
    sys: &LinearizedSystem,
) -> bool {
    params.zeta * params.b_coef * params.boundary_factor(sys) * d * d
        >= params.zeta * params.mu * params.sigma * v - m
}

/// Outcome of one feasibility inequality.
#[derive(Debug, Clone)]
pub struct ConditionCheck {
    pub name: String,
    pub satisfied: bool,
    /// Advisory rows use empirical surrogates and never gate a run.
    pub advisory: bool,
    /// Signed slack, negative or zero when the inequality holds.
    pub margin: f64,
    pub detail: String,
}

/// Feasibility report over the static trigger-design conditions.
#[derive(Debug, Clone)]
pub struct EtcReport {
    pub checks: Vec<ConditionCheck>,
}

impl EtcReport {
    /// True when every non-advisory inequality holds.
    pub fn feasible(&self) -> bool {
        self.checks.iter().filter(|c| !c.advisory).all(|c| c.satisfied)
    }

    pub fn check(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for EtcReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.satisfied { "pass" } else { "FAIL" };
            let kind = if c.advisory { " (advisory)" } else { "" };
            writeln!(f, "{status}{kind}  {}  margin {:+.3e}  {}", c.name, c.margin, c.detail)?;
        }
        write!(
            f,
            "feasible: {}",
            if self.feasible() { "yes" } else { "no" }
        )
    }
}

/// Evaluates the static design inequalities for a parameter set on a given
/// system. Kernel-dependent lower bounds on the trace weights use empirical
/// surrogates and are reported as advisory; they are skipped when no kernel
/// set is supplied.
pub fn validate_etc_params(
    params: &EtcParams,
    sys: &LinearizedSystem,
    kernels: Option<&KernelSet>,
) -> EtcReport {
    let mut checks = Vec::new();
    let positivity = params.check();
    checks.push(ConditionCheck {
        name: "positivity".into(),
        satisfied: positivity.is_ok(),
        advisory: false,
        margin: if positivity.is_ok() { -1.0 } else { 1.0 },
        detail: match positivity {
            Ok(()) => "all weights positive, m0 < 0".into(),
            Err(e) => e.to_string(),
        },
    });
    let length = sys.params.road_length;
    for i in 0..3 {
        let bound = params.a_coef[i] * (-params.mu * length / sys.lambda_plus[i]).exp();
        let margin = params.varsigma[i] - bound;
        checks.push(ConditionCheck {
            name: format!("outlet_trace_budget_{}", i + 1),
            satisfied: margin <= 0.0,
            advisory: false,
            margin,
            detail: format!("varsigma{} = {:.3e}, budget {:.3e}", i + 1, params.varsigma[i], bound),
        });
    }
    let reflected: f64 = (0..3)
        .map(|i| params.a_coef[i] * sys.q_bc[i] * sys.q_bc[i])
        .sum();
    let margin52 = params.varsigma[3] + reflected - params.b_coef;
    checks.push(ConditionCheck {
        name: "inlet_budget".into(),
        satisfied: margin52 <= 0.0,
        advisory: false,
        margin: margin52,
        detail: format!(
            "varsigma4 + sum a_i q_i^2 = {:.3e}, b = {:.3e}",
            params.varsigma[3] + reflected,
            params.b_coef
        ),
    });
    let floor4 = (-2.0 * params.zeta * params.mu * (reflected - params.b_coef)).max(0.0);
    checks.push(ConditionCheck {
        name: "inlet_trace_floor".into(),
        satisfied: params.varsigma[3] >= floor4,
        advisory: false,
        margin: floor4 - params.varsigma[3],
        detail: format!("varsigma4 = {:.3e}, floor {:.3e}", params.varsigma[3], floor4),
    });
    let gamma_hat = coupling_rate_bound(sys);
    let decay = params.mu * (1.0 - params.sigma) - gamma_hat;
    checks.push(ConditionCheck {
        name: "decay_margin".into(),
        satisfied: decay > 0.0,
        advisory: true,
        margin: -decay,
        detail: format!("mu(1 - sigma) = {:.3e}, coupling bound {:.3e}", params.mu * (1.0 - params.sigma), gamma_hat),
    });
    checks.push(ConditionCheck {
        name: "eta_dominates_decay".into(),
        satisfied: params.eta >= decay,
        advisory: true,
        margin: decay - params.eta,
        detail: format!("eta = {:.3e}", params.eta),
    });
    if let Some(set) = kernels {
        let e_fac = params.boundary_factor(sys);
        let r_sq = (0..3).map(|i| sys.r_bc[i] * sys.r_bc[i]).sum::<f64>();
        let sigma_l = sys.sigma_at(length);
        for i in 0..3 {
            let n = set.grid_n;
            let trace = set.l(i).get(n, n);
            let eps_hat = 8.0 * trace * trace * sys.lambda_plus[i] * sys.lambda_plus[i]
                + 8.0 * sigma_l[(3, i)].abs() * r_sq;
            let floor = (params.zeta * params.b_coef * e_fac * eps_hat)
                .max(params.zeta * params.mu * eps_hat);
            checks.push(ConditionCheck {
                name: format!("dynamic_trace_floor_{}", i + 1),
                satisfied: params.varsigma[i] >= floor,
                advisory: true,
                margin: floor - params.varsigma[i],
                detail: format!("surrogate floor {:.3e} from kernel traces", floor),
            });
        }
    }
    EtcReport { checks }
}

fn coupling_rate_bound(sys: &LinearizedSystem) -> f64 {
    let n = sys.grid_n;
    let h = sys.params.road_length / n as f64;
    let mut sup = 0.0f64;
    for node in 0..=n {
        let sigma = sys.sigma_at(h * node as f64);
        for i in 0..4 {
            let row: f64 = (0..4).map(|j| sigma[(i, j)].abs()).sum();
            sup = sup.max(row);
        }
    }
    2.0 * sup
}

/// One trigger evaluation: decides, fires, and advances the dynamic
/// variable. `d_in` is the discrepancy before the decision; the returned
/// pair is (fired, discrepancy after the decision).
pub(crate) fn advance_trigger(
    trigger: &mut TriggerState,
    t: f64,
    dt: f64,
    u_continuous: f64,
    d_in: f64,
    v: f64,
    alpha_at_l: [f64; 3],
    beta_at_0: f64,
    force: bool,
    params: &EtcParams,
    sys: &LinearizedSystem,
    make_held: impl FnOnce() -> HeldState,
) -> Result<(bool, f64)> {
    let first = trigger.held_state.is_none();
    let mut d = if first { 0.0 } else { d_in };
    let mut fire = first || force;
    if !fire && should_trigger(d, v, trigger.m, params, sys) {
        fire = true;
    }
    if !fire {
        let candidate = trigger.m + dt * m_rate(trigger.m, d, v, alpha_at_l, beta_at_0, params, sys);
        if candidate >= 0.0 {
            fire = true;
        }
    }
    if fire {
        let dwell = t - trigger.t_last_event;
        trigger.held_control = u_continuous;
        trigger.held_state = Some(make_held());
        trigger.t_last_event = t;
        trigger.event_log.push(EventRecord {
            t,
            dwell,
            u: u_continuous,
            v,
            m: trigger.m,
        });
        d = 0.0;
    }
    trigger.m = m_step(trigger.m, d, v, alpha_at_l, beta_at_0, params, sys, dt)?;
    Ok((fire, d))
}

/// Event-triggered boundary controller over a solved kernel set.
pub struct EtcHook<'a> {
    kernels: &'a KernelSet,
    sys: &'a LinearizedSystem,
    params: EtcParams,
    pub trigger: TriggerState,
    /// Fire at every step, reducing the hook to the continuous law.
    pub force_every_step: bool,
}

impl<'a> EtcHook<'a> {
    pub fn new(
        kernels: &'a KernelSet,
        sys: &'a LinearizedSystem,
        params: EtcParams,
    ) -> Result<EtcHook<'a>> {
        params.check()?;
        let trigger = TriggerState::new(params.m0);
        Ok(EtcHook {
            kernels,
            sys,
            params,
            trigger,
            force_every_step: false,
        })
    }

    pub fn params(&self) -> &EtcParams {
        &self.params
    }
}

impl Controller for EtcHook<'_> {
    fn sample(&mut self, t: f64, state: &SimState, sim: &Simulator) -> Result<ControlSample> {
        let (alpha, beta) = self
            .kernels
            .forward_transform(&state.w_plus, &state.w_minus)?;
        let u_continuous = self.kernels.control_from_target(self.sys, &alpha, &beta)?;
        let v = lyapunov(&alpha, &beta, &self.params, self.sys);
        let n = beta.len() - 1;
        let alpha_at_l = [alpha[0][n], alpha[1][n], alpha[2][n]];
        let beta_at_0 = beta[0];
        let d_in = self.trigger.held_control - u_continuous;
        let (fire, d) = advance_trigger(
            &mut self.trigger,
            t,
            sim.grid.dt,
            u_continuous,
            d_in,
            v,
            alpha_at_l,
            beta_at_0,
            self.force_every_step,
            &self.params,
            self.sys,
            move || HeldState { alpha, beta },
        )?;
        Ok(ControlSample {
            u_applied: self.trigger.held_control,
            u_continuous,
            triggered: fire,
            lyapunov: v,
            m: self.trigger.m,
            d,
        })
    }
}

/// Continuous backstepping controller, sampled every step.
pub struct BacksteppingHook<'a> {
    kernels: &'a KernelSet,
    sys: &'a LinearizedSystem,
}

impl<'a> BacksteppingHook<'a> {
    pub fn new(kernels: &'a KernelSet, sys: &'a LinearizedSystem) -> BacksteppingHook<'a> {
        BacksteppingHook { kernels, sys }
    }
}

impl Controller for BacksteppingHook<'_> {
    fn sample(&mut self, _t: f64, state: &SimState, _sim: &Simulator) -> Result<ControlSample> {
        let (alpha, beta) = self
            .kernels
            .forward_transform(&state.w_plus, &state.w_minus)?;
        let u = self.kernels.control_from_target(self.sys, &alpha, &beta)?;
        Ok(ControlSample {
            u_applied: u,
            u_continuous: u,
            triggered: false,
            lyapunov: f64::NAN,
            m: f64::NAN,
            d: 0.0,
        })
    }
}

/// Count and cumulative released time of a recorded control history: steps
/// without an event, scaled by dt.
pub fn trigger_stats(control: &[crate::sim::ControlRecord], dt: f64) -> (usize, f64) {
    let count = control.iter().filter(|r| r.triggered).count();
    let release = (control.len() - count) as f64 * dt;
    (count, release)
}
