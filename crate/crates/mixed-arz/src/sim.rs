//! Explicit upwind simulator for the linearized system in Riemann
//! coordinates, plus trajectory recording and physical-field reconstruction.

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::model::{Equilibrium, LinearizedSystem};

/// Spatial and temporal discretization of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Cell count; the state lives on nx + 1 nodes.
    pub nx: usize,
    /// Cell width (m), nx * dx = L.
    pub dx: f64,
    /// Time step (s).
    pub dt: f64,
    /// Simulation horizon (s).
    pub t_end: f64,
    /// Courant number bound the step must respect.
    pub cfl: f64,
}

impl GridSpec {
    /// Builds a grid with dt derived from the CFL bound: the largest step
    /// that divides t_end evenly while staying at or below cfl·dx/max|λ|.
    pub fn new(sys: &LinearizedSystem, nx: usize, cfl: f64, t_end: f64) -> Result<GridSpec> {
        if nx < 2 {
            return Err(Error::Validation(format!("nx must be at least 2, got {nx}")));
        }
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(Error::Validation(format!("cfl must lie in (0, 1], got {cfl}")));
        }
        if !(t_end >= 0.0) || !t_end.is_finite() {
            return Err(Error::Validation(format!("t_end must be nonnegative, got {t_end}")));
        }
        let dx = sys.params.road_length / nx as f64;
        let dt0 = cfl * dx / max_speed(sys);
        let dt = if t_end > 0.0 {
            let n_steps = (t_end / dt0).ceil() as usize;
            t_end / n_steps as f64
        } else {
            dt0
        };
        Ok(GridSpec { nx, dx, dt, t_end, cfl })
    }

    /// Builds a grid with an explicitly chosen dt, validated against the
    /// CFL bound.
    pub fn with_dt(sys: &LinearizedSystem, nx: usize, cfl: f64, t_end: f64, dt: f64) -> Result<GridSpec> {
        let mut grid = GridSpec::new(sys, nx, cfl, t_end)?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Validation(format!("dt must be positive, got {dt}")));
        }
        let limit = cfl * grid.dx / max_speed(sys);
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::Validation(format!(
                "dt = {dt} violates the CFL bound {limit:.6} at cfl = {cfl}"
            )));
        }
        grid.dt = dt;
        Ok(grid)
    }

    /// Number of steps covering [0, t_end].
    pub fn n_steps(&self) -> usize {
        if self.t_end <= 0.0 {
            0
        } else {
            (self.t_end / self.dt).round() as usize
        }
    }
}

fn max_speed(sys: &LinearizedSystem) -> f64 {
    sys.lambda_plus
        .iter()
        .cloned()
        .fold(sys.lambda_minus, f64::max)
}

/// Riemann-coordinate state at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    /// Rightward fields w1..w3, each over the nx + 1 nodes.
    pub w_plus: [Vec<f64>; 3],
    /// Leftward field w4 over the nodes.
    pub w_minus: Vec<f64>,
}

impl SimState {
    /// Zero state on n nodes.
    pub fn zeros(n: usize) -> SimState {
        SimState {
            t: 0.0,
            w_plus: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            w_minus: vec![0.0; n],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.w_minus.len()
    }

    fn is_finite(&self) -> bool {
        self.w_plus
            .iter()
            .flat_map(|f| f.iter())
            .chain(self.w_minus.iter())
            .all(|v| v.is_finite())
    }
}

/// Initial-condition families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcKind {
    /// One full sine period across the domain.
    Sinusoidal,
    /// Half sine period, localized bulge.
    NonRecurrent,
    /// Deviations growing linearly from zero at the inlet.
    Linear,
}

/// Builds the initial state: physical deviation profiles of the chosen
/// family, amplitude ±(ρ*/4, v*/4) times `scale`, mapped to w-coordinates.
pub fn make_initial_condition(
    kind: IcKind,
    eq: &Equilibrium,
    sys: &LinearizedSystem,
    grid: &GridSpec,
    scale: f64,
) -> SimState {
    let n = grid.nx + 1;
    let length = sys.params.road_length;
    let mut state = SimState::zeros(n);
    for j in 0..n {
        let x = grid.dx * j as f64;
        let shape = match kind {
            IcKind::Sinusoidal => (2.0 * std::f64::consts::PI * x / length).sin(),
            IcKind::NonRecurrent => (std::f64::consts::PI * x / length).sin(),
            IcKind::Linear => x / length,
        };
        let s = 0.25 * scale * shape;
        let z = Vector4::new(
            eq.rho_h_star * s,
            -eq.v_h_star * s,
            eq.rho_a_star * s,
            -eq.v_a_star * s,
        );
        let w = sys.to_riemann(x, &z);
        for i in 0..3 {
            state.w_plus[i][j] = w[i];
        }
        state.w_minus[j] = w[3];
    }
    state
}

/// One simulation context: characteristic speeds, coupling samples, and
/// boundary reflections on the run's grid. Fields are public so tests can
/// zero couplings or replace reflections.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub sys: LinearizedSystem,
    pub grid: GridSpec,
    pub x: Vec<f64>,
    pub lambda_plus: [f64; 3],
    pub lambda_minus: f64,
    pub q_bc: Vector3<f64>,
    pub r_bc: Vector3<f64>,
    pub sigma_pp: Vec<[[f64; 3]; 3]>,
    pub sigma_pm: Vec<[f64; 3]>,
    pub sigma_mp: Vec<[f64; 3]>,
}

impl Simulator {
    pub fn new(sys: &LinearizedSystem, grid: GridSpec) -> Simulator {
        let n = grid.nx + 1;
        let mut x = Vec::with_capacity(n);
        let mut sigma_pp = Vec::with_capacity(n);
        let mut sigma_pm = Vec::with_capacity(n);
        let mut sigma_mp = Vec::with_capacity(n);
        for j in 0..n {
            let xv = grid.dx * j as f64;
            let sigma = sys.sigma_at(xv);
            let mut pp = [[0.0; 3]; 3];
            let mut pm = [0.0; 3];
            let mut mp = [0.0; 3];
            for a in 0..3 {
                for b in 0..3 {
                    pp[a][b] = sigma[(a, b)];
                }
                pm[a] = sigma[(a, 3)];
                mp[a] = sigma[(3, a)];
            }
            x.push(xv);
            sigma_pp.push(pp);
            sigma_pm.push(pm);
            sigma_mp.push(mp);
        }
        Simulator {
            lambda_plus: sys.lambda_plus,
            lambda_minus: sys.lambda_minus,
            q_bc: sys.q_bc,
            r_bc: sys.r_bc,
            sys: sys.clone(),
            grid,
            x,
            sigma_pp,
            sigma_pm,
            sigma_mp,
        }
    }

    /// One upwind step with the control value applied at x = L.
    ///
    /// Order: interior advection, explicit sources at the old state, inlet
    /// reflection, outlet reflection plus control.
    pub fn step(&self, state: &SimState, u_bar_d: f64) -> Result<SimState> {
        let (dt, dx, nx) = (self.grid.dt, self.grid.dx, self.grid.nx);
        let limit = self.grid.cfl * dx
            / self.lambda_plus.iter().cloned().fold(self.lambda_minus, f64::max);
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::Numerics(format!(
                "refusing step: dt = {dt} exceeds the CFL bound {limit:.6}"
            )));
        }
        let mut next = state.clone();
        next.t = state.t + dt;
        for i in 0..3 {
            let c = self.lambda_plus[i] * dt / dx;
            for j in (1..=nx).rev() {
                next.w_plus[i][j] =
                    state.w_plus[i][j] - c * (state.w_plus[i][j] - state.w_plus[i][j - 1]);
            }
        }
        let cm = self.lambda_minus * dt / dx;
        for j in 0..nx {
            next.w_minus[j] = state.w_minus[j] + cm * (state.w_minus[j + 1] - state.w_minus[j]);
        }
        for j in 1..=nx {
            let pp = &self.sigma_pp[j];
            let pm = &self.sigma_pm[j];
            let (w0, w1, w2) = (
                state.w_plus[0][j],
                state.w_plus[1][j],
                state.w_plus[2][j],
            );
            let w4 = state.w_minus[j];
            for i in 0..3 {
                next.w_plus[i][j] +=
                    dt * (pp[i][0] * w0 + pp[i][1] * w1 + pp[i][2] * w2 + pm[i] * w4);
            }
        }
        for j in 0..nx {
            let mp = &self.sigma_mp[j];
            next.w_minus[j] += dt
                * (mp[0] * state.w_plus[0][j]
                    + mp[1] * state.w_plus[1][j]
                    + mp[2] * state.w_plus[2][j]);
        }
        for i in 0..3 {
            next.w_plus[i][0] = self.q_bc[i] * next.w_minus[0];
        }
        next.w_minus[nx] = self.r_bc[0] * next.w_plus[0][nx]
            + self.r_bc[1] * next.w_plus[1][nx]
            + self.r_bc[2] * next.w_plus[2][nx]
            + u_bar_d;
        if !next.is_finite() {
            return Err(Error::Numerics(format!(
                "state diverged at t = {:.3}",
                next.t
            )));
        }
        Ok(next)
    }

    /// Trapezoidal L2 norm over all four fields.
    pub fn l2_norm(&self, state: &SimState) -> f64 {
        let n = state.n_nodes();
        let mut total = 0.0;
        for j in 0..n {
            let weight = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            let mut sq = state.w_minus[j] * state.w_minus[j];
            for i in 0..3 {
                sq += state.w_plus[i][j] * state.w_plus[i][j];
            }
            total += weight * sq;
        }
        (total * self.grid.dx).sqrt()
    }

    /// Physical fields (absolute, not deviations) at each node.
    pub fn to_physical(&self, state: &SimState) -> PhysSnapshot {
        let n = state.n_nodes();
        let eq = self.sys.eq;
        let mut snap = PhysSnapshot {
            rho_h: Vec::with_capacity(n),
            v_h: Vec::with_capacity(n),
            rho_a: Vec::with_capacity(n),
            v_a: Vec::with_capacity(n),
        };
        for j in 0..n {
            let w = Vector4::new(
                state.w_plus[0][j],
                state.w_plus[1][j],
                state.w_plus[2][j],
                state.w_minus[j],
            );
            let z = self.sys.from_riemann(self.x[j], &w);
            snap.rho_h.push(eq.rho_h_star + z[0]);
            snap.v_h.push(eq.v_h_star + z[1]);
            snap.rho_a.push(eq.rho_a_star + z[2]);
            snap.v_a.push(eq.v_a_star + z[3]);
        }
        snap
    }
}

/// Absolute physical fields over the grid nodes at one time.
#[derive(Debug, Clone)]
pub struct PhysSnapshot {
    pub rho_h: Vec<f64>,
    pub v_h: Vec<f64>,
    pub rho_a: Vec<f64>,
    pub v_a: Vec<f64>,
}

/// What a controller reports for one step.
#[derive(Debug, Clone, Copy)]
pub struct ControlSample {
    /// Value actually applied at x = L this step.
    pub u_applied: f64,
    /// The continuous feedback law's value this step.
    pub u_continuous: f64,
    /// Whether an event fired this step.
    pub triggered: bool,
    /// Lyapunov functional, NaN for uncontrolled runs.
    pub lyapunov: f64,
    /// Dynamic trigger variable, NaN for uncontrolled runs.
    pub m: f64,
    /// Actuation discrepancy after the trigger decision.
    pub d: f64,
}

/// Boundary controller driven once per step by the run loop.
pub trait Controller {
    /// Decides this step's boundary input from the current plant state.
    fn sample(&mut self, t: f64, state: &SimState, sim: &Simulator) -> Result<ControlSample>;

    /// Called after the plant advances, with the new plant state; used by
    /// observer-based controllers to advance their internal estimate.
    fn post_step(
        &mut self,
        _t_next: f64,
        _plant: &SimState,
        _sim: &Simulator,
        _u_applied: f64,
    ) -> Result<()> {
        Ok(())
    }
}

/// Zero boundary input at every step.
pub struct OpenLoop;

impl Controller for OpenLoop {
    fn sample(&mut self, _t: f64, _state: &SimState, _sim: &Simulator) -> Result<ControlSample> {
        Ok(ControlSample {
            u_applied: 0.0,
            u_continuous: 0.0,
            triggered: false,
            lyapunov: f64::NAN,
            m: f64::NAN,
            d: 0.0,
        })
    }
}

/// Per-step control history entry.
#[derive(Debug, Clone, Copy)]
pub struct ControlRecord {
    pub t: f64,
    pub u_continuous: f64,
    pub u_applied: f64,
    pub triggered: bool,
    pub lyapunov: f64,
    pub m: f64,
    pub d: f64,
}

/// Recorded run: decimated state snapshots, the full control history, and
/// optionally the reconstructed physical fields at each snapshot.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: GridSpec,
    pub snapshots: Vec<SimState>,
    pub control: Vec<ControlRecord>,
    pub physical: Option<Vec<PhysSnapshot>>,
    pub final_state: SimState,
}

impl Trajectory {
    /// Time between recorded snapshots.
    pub fn snapshot_dt(&self, decimation: usize) -> f64 {
        self.grid.dt * decimation as f64
    }
}

/// Runs the step loop to t_end, consulting the controller each step.
///
/// Snapshots are recorded every `decimation` steps starting at the initial
/// state; with t_end = 0 the trajectory holds only the initial snapshot.
pub fn run(
    sim: &Simulator,
    initial: SimState,
    controller: &mut dyn Controller,
    decimation: usize,
    record_physical: bool,
) -> Result<Trajectory> {
    if decimation == 0 {
        return Err(Error::Validation("decimation must be at least 1".into()));
    }
    if initial.n_nodes() != sim.grid.nx + 1 {
        return Err(Error::Validation(format!(
            "initial state has {} nodes, grid expects {}",
            initial.n_nodes(),
            sim.grid.nx + 1
        )));
    }
    let n_steps = sim.grid.n_steps();
    let mut snapshots = Vec::with_capacity(n_steps / decimation + 1);
    let mut physical = record_physical.then(Vec::new);
    let mut control = Vec::with_capacity(n_steps);
    let mut state = initial;
    state.t = 0.0;
    snapshots.push(state.clone());
    if let Some(ph) = physical.as_mut() {
        ph.push(sim.to_physical(&state));
    }
    for k in 0..n_steps {
        let t = k as f64 * sim.grid.dt;
        let sample = controller.sample(t, &state, sim)?;
        let next = sim.step(&state, sample.u_applied)?;
        controller.post_step(next.t, &next, sim, sample.u_applied)?;
        control.push(ControlRecord {
            t,
            u_continuous: sample.u_continuous,
            u_applied: sample.u_applied,
            triggered: sample.triggered,
            lyapunov: sample.lyapunov,
            m: sample.m,
            d: sample.d,
        });
        state = next;
        if (k + 1) % decimation == 0 {
            snapshots.push(state.clone());
            if let Some(ph) = physical.as_mut() {
                ph.push(sim.to_physical(&state));
            }
        }
    }
    Ok(Trajectory {
        grid: sim.grid,
        snapshots,
        control,
        physical,
        final_state: state,
    })
}
