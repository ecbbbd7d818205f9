//! Anti-collocated boundary observer and output-feedback control.
//!
//! The observer runs a copy of the plant driven by the same boundary input,
//! corrected by output injection from the single measurement y(t) = w4(0, t)
//! and anchored by the measured inlet reflection.

use crate::error::{Error, Result};
use crate::etc::{advance_trigger, lyapunov, EtcParams, HeldState, TriggerState};
use crate::kernels::{KernelSet, ObserverKernels, SolverOptions};
use crate::model::LinearizedSystem;
use crate::sim::{ControlSample, Controller, SimState, Simulator};

/// Output-injection gain fields over the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGains {
    pub p_plus: [Vec<f64>; 3],
    pub p_minus: Vec<f64>,
}

impl ObserverGains {
    pub fn n_nodes(&self) -> usize {
        self.p_minus.len()
    }

    /// Zero injection on a grid of `n` nodes.
    pub fn zeros(n: usize) -> ObserverGains {
        ObserverGains {
            p_plus: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            p_minus: vec![0.0; n],
        }
    }
}

/// Reads the injection gains off a solved observer kernel set:
/// P(x) = -lambda4 * Theta(x, 0).
pub fn gains_from_kernels(kernels: &ObserverKernels, sys: &LinearizedSystem) -> ObserverGains {
    let n = kernels.grid_n;
    let lm = sys.lambda_minus;
    let mut gains = ObserverGains::zeros(n + 1);
    for p in 0..=n {
        for i in 0..3 {
            gains.p_plus[i][p] = -lm * kernels.theta(i).get(p, 0);
        }
        gains.p_minus[p] = -lm * kernels.theta_minus.get(p, 0);
    }
    gains
}

/// Solves the observer kernel equations and returns the injection gains.
pub fn solve_observer_gains(
    sys: &LinearizedSystem,
    grid_n: usize,
    options: &SolverOptions,
) -> Result<ObserverGains> {
    let kernels = ObserverKernels::solve(sys, grid_n, options)?;
    Ok(gains_from_kernels(&kernels, sys))
}

/// Estimated state plus its fixed injection gains.
#[derive(Debug, Clone)]
pub struct ObserverState {
    pub estimate: SimState,
    pub gains: ObserverGains,
}

impl ObserverState {
    pub fn new(gains: ObserverGains, initial: SimState) -> Result<ObserverState> {
        if gains.n_nodes() != initial.n_nodes() {
            return Err(Error::Validation(format!(
                "gains cover {} nodes, state has {}",
                gains.n_nodes(),
                initial.n_nodes()
            )));
        }
        Ok(ObserverState {
            estimate: initial,
            gains,
        })
    }

    /// Observer started from rest (zero estimate).
    pub fn from_rest(gains: ObserverGains) -> ObserverState {
        let n = gains.n_nodes();
        ObserverState {
            estimate: SimState::zeros(n),
            gains,
        }
    }
}

/// Advances the estimate one step: plant dynamics plus output injection of
/// the innovation at the current level, then the measured inlet condition
/// at the new level. `measurement_now` and `measurement_next` are the plant
/// w4(0, t) at the two time levels bracketing the step.
pub fn observer_step(
    obs: &ObserverState,
    measurement_now: f64,
    measurement_next: f64,
    u_applied: f64,
    sim: &Simulator,
) -> Result<ObserverState> {
    let innovation = measurement_now - obs.estimate.w_minus[0];
    let mut next = sim.step(&obs.estimate, u_applied)?;
    let nx = next.n_nodes() - 1;
    let dt = sim.grid.dt;
    if innovation != 0.0 {
        for i in 0..3 {
            for j in 1..=nx {
                next.w_plus[i][j] += dt * obs.gains.p_plus[i][j] * innovation;
            }
        }
        for j in 0..nx {
            next.w_minus[j] += dt * obs.gains.p_minus[j] * innovation;
        }
        next.w_minus[nx] = sim.r_bc[0] * next.w_plus[0][nx]
            + sim.r_bc[1] * next.w_plus[1][nx]
            + sim.r_bc[2] * next.w_plus[2][nx]
            + u_applied;
    }
    for i in 0..3 {
        next.w_plus[i][0] = sim.q_bc[i] * measurement_next;
    }
    Ok(ObserverState {
        estimate: next,
        gains: obs.gains.clone(),
    })
}

/// Trapezoidal L2 norms of the estimation error, split into the rightward
/// block and the leftward field.
pub fn estimation_error_norms(plant: &SimState, estimate: &SimState, dx: f64) -> (f64, f64) {
    let n = plant.n_nodes();
    let mut plus = 0.0;
    let mut minus = 0.0;
    for j in 0..n {
        let weight = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
        for i in 0..3 {
            let e = plant.w_plus[i][j] - estimate.w_plus[i][j];
            plus += weight * e * e;
        }
        let e = plant.w_minus[j] - estimate.w_minus[j];
        minus += weight * e * e;
    }
    ((plus * dx).sqrt(), (minus * dx).sqrt())
}

/// One estimation-error sample along a closed-loop run.
#[derive(Debug, Clone, Copy)]
pub struct ErrorSample {
    pub t: f64,
    pub e_plus: f64,
    pub e_minus: f64,
}

/// Event-triggered output-feedback controller: the trigger machinery of the
/// full-state hook, fed by the observer estimate instead of the plant.
pub struct ObserverEtcHook<'a> {
    kernels: &'a KernelSet,
    sys: &'a LinearizedSystem,
    params: EtcParams,
    pub trigger: TriggerState,
    pub observer: ObserverState,
    /// Use the plant outlet trace in the discrepancy instead of the
    /// estimated one (requires sensing at x = L).
    pub plant_trace_discrepancy: bool,
    /// Estimation-error norms recorded after every step.
    pub error_trace: Vec<ErrorSample>,
    pub force_every_step: bool,
    measurement: f64,
    held_outlet_gap: f64,
}

impl<'a> ObserverEtcHook<'a> {
    pub fn new(
        kernels: &'a KernelSet,
        sys: &'a LinearizedSystem,
        params: EtcParams,
        observer: ObserverState,
    ) -> Result<ObserverEtcHook<'a>> {
        params.check()?;
        if observer.estimate.n_nodes() != kernels.grid_n + 1 {
            return Err(Error::Validation(format!(
                "observer has {} nodes, kernels expect {}",
                observer.estimate.n_nodes(),
                kernels.grid_n + 1
            )));
        }
        let trigger = TriggerState::new(params.m0);
        Ok(ObserverEtcHook {
            kernels,
            sys,
            params,
            trigger,
            observer,
            plant_trace_discrepancy: false,
            error_trace: Vec::new(),
            force_every_step: false,
            measurement: 0.0,
            held_outlet_gap: 0.0,
        })
    }

    pub fn params(&self) -> &EtcParams {
        &self.params
    }

    fn outlet_gap(&self, plant: &SimState) -> f64 {
        let n = plant.n_nodes() - 1;
        (0..3)
            .map(|i| self.sys.r_bc[i] * (plant.w_plus[i][n] - self.observer.estimate.w_plus[i][n]))
            .sum()
    }
}

impl Controller for ObserverEtcHook<'_> {
    fn sample(&mut self, t: f64, state: &SimState, sim: &Simulator) -> Result<ControlSample> {
        self.measurement = state.w_minus[0];
        let est = &self.observer.estimate;
        let (alpha, beta) = self.kernels.forward_transform(&est.w_plus, &est.w_minus)?;
        let u_continuous = self.kernels.control_from_target(self.sys, &alpha, &beta)?;
        let v = lyapunov(&alpha, &beta, &self.params, self.sys);
        let n = beta.len() - 1;
        let alpha_at_l = [alpha[0][n], alpha[1][n], alpha[2][n]];
        let beta_at_0 = beta[0];
        let mut d_in = self.trigger.held_control - u_continuous;
        let outlet_gap = self.outlet_gap(state);
        if self.plant_trace_discrepancy {
            d_in += outlet_gap - self.held_outlet_gap;
        }
        let held_gap = &mut self.held_outlet_gap;
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
            move || {
                *held_gap = outlet_gap;
                HeldState { alpha, beta }
            },
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

    fn post_step(
        &mut self,
        t_next: f64,
        plant: &SimState,
        sim: &Simulator,
        u_applied: f64,
    ) -> Result<()> {
        self.observer = observer_step(
            &self.observer,
            self.measurement,
            plant.w_minus[0],
            u_applied,
            sim,
        )?;
        let (e_plus, e_minus) = estimation_error_norms(plant, &self.observer.estimate, sim.grid.dx);
        self.error_trace.push(ErrorSample {
            t: t_next,
            e_plus,
            e_minus,
        });
        Ok(())
    }
}
