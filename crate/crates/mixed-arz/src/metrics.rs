//! Traffic performance indices over physical trajectories and trigger
//! statistics over event logs.
//!
//! All indices integrate over the full space-time window by the composite
//! trapezoidal rule and expect SI inputs: densities in veh/m, speeds in m/s.
//! Fuel and discomfort need the local acceleration a = v_t + v v_x, built
//! with centered differences inside the sample window and one-sided
//! differences at its ends; the jerk term uses forward differences.

use crate::error::{Error, Result};
use crate::etc::EventRecord;
use crate::model::ModelParams;
use crate::sim::PhysSnapshot;

/// Fuel-rate polynomial coefficients (1/s, 1/m, s²/m², s²/m³).
const B0: f64 = 25e-3;
const B1: f64 = 24.5e-6;
const B2: f64 = 125e-6;
const B3: f64 = 32.5e-9;

/// The six performance indices of one run, with optional trigger bookkeeping
/// and improvement percentages against an open-loop baseline.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub j_fuel: f64,
    pub j_discom: f64,
    pub j_ttt: f64,
    pub td_h: f64,
    pub td_a: f64,
    pub td_total: f64,
    pub trigger: Option<TriggerStats>,
    pub improvement_vs_baseline: Option<Improvements>,
}

/// Signed percentage change per index; negative means the run improved on
/// its baseline.
#[derive(Debug, Clone, Copy)]
pub struct Improvements {
    pub j_fuel: f64,
    pub j_discom: f64,
    pub j_ttt: f64,
    pub td_h: f64,
    pub td_a: f64,
    pub td_total: f64,
}

/// Event-log bookkeeping of one closed-loop run.
#[derive(Debug, Clone, Copy)]
pub struct TriggerStats {
    pub count: usize,
    /// Time the boundary input was held rather than refreshed:
    /// t_end − count·dt.
    pub total_release_time: f64,
    /// Shortest spacing between consecutive events; with a single event,
    /// the time that event's value stayed applied.
    pub min_dwell: f64,
}

/// Counts events and release time under the held-signal convention.
pub fn trigger_stats(events: &[EventRecord], t_end: f64, dt: f64) -> TriggerStats {
    let count = events.len();
    let min_dwell = if count > 1 {
        events
            .windows(2)
            .map(|pair| pair[1].t - pair[0].t)
            .fold(f64::INFINITY, f64::min)
    } else if count == 1 {
        t_end - events[0].t
    } else {
        0.0
    };
    TriggerStats {
        count,
        total_release_time: t_end - count as f64 * dt,
        min_dwell,
    }
}

/// Fuel consumption index J_fuel, summed over the two classes.
pub fn fuel(snaps: &[PhysSnapshot], dt: f64, dx: f64) -> Result<f64> {
    let (h, a) = both_classes(snaps, dt, dx)?;
    Ok(h.fuel + a.fuel)
}

/// Ride-discomfort index J_discom, summed over the two classes.
pub fn discomfort(snaps: &[PhysSnapshot], dt: f64, dx: f64) -> Result<f64> {
    let (h, a) = both_classes(snaps, dt, dx)?;
    Ok(h.discom + a.discom)
}

/// Total travel time J_TTT, summed over the two classes.
pub fn ttt(snaps: &[PhysSnapshot], dt: f64, dx: f64) -> Result<f64> {
    let (h, a) = both_classes(snaps, dt, dx)?;
    Ok(h.ttt + a.ttt)
}

/// Per-class and summed total delay against the free-flow speeds (m/s).
pub fn total_delay(
    snaps: &[PhysSnapshot],
    dt: f64,
    dx: f64,
    v_free_h: f64,
    v_free_a: f64,
) -> Result<(f64, f64, f64)> {
    let (h, a) = both_classes(snaps, dt, dx)?;
    let td_h = h.ttt - h.tmt / v_free_h;
    let td_a = a.ttt - a.tmt / v_free_a;
    Ok((td_h, td_a, td_h + td_a))
}

/// All six indices of one sampled trajectory in a single pass.
pub fn performance_indices(
    snaps: &[PhysSnapshot],
    dt: f64,
    dx: f64,
    params: &ModelParams,
) -> Result<MetricsReport> {
    let (h, a) = both_classes(snaps, dt, dx)?;
    let td_h = h.ttt - h.tmt / params.free_flow_speed_h;
    let td_a = a.ttt - a.tmt / params.free_flow_speed_a;
    Ok(MetricsReport {
        j_fuel: h.fuel + a.fuel,
        j_discom: h.discom + a.discom,
        j_ttt: h.ttt + a.ttt,
        td_h,
        td_a,
        td_total: td_h + td_a,
        trigger: None,
        improvement_vs_baseline: None,
    })
}

/// Signed percentage change of each index against a baseline report.
pub fn improvements(current: &MetricsReport, baseline: &MetricsReport) -> Improvements {
    let pct = |now: f64, base: f64| 100.0 * (now - base) / base;
    Improvements {
        j_fuel: pct(current.j_fuel, baseline.j_fuel),
        j_discom: pct(current.j_discom, baseline.j_discom),
        j_ttt: pct(current.j_ttt, baseline.j_ttt),
        td_h: pct(current.td_h, baseline.td_h),
        td_a: pct(current.td_a, baseline.td_a),
        td_total: pct(current.td_total, baseline.td_total),
    }
}

struct ClassTotals {
    fuel: f64,
    discom: f64,
    ttt: f64,
    tmt: f64,
}

fn both_classes(snaps: &[PhysSnapshot], dt: f64, dx: f64) -> Result<(ClassTotals, ClassTotals)> {
    if snaps.len() < 2 {
        return Err(Error::Validation(
            "performance indices need a recorded physical history with at least two samples"
                .into(),
        ));
    }
    if dt <= 0.0 || dx <= 0.0 {
        return Err(Error::Validation("sample spacings must be positive".into()));
    }
    let nx = snaps[0].rho_h.len();
    if nx < 2 || snaps.iter().any(|s| s.rho_h.len() != nx) {
        return Err(Error::Validation(
            "physical snapshots must share one grid of at least two nodes".into(),
        ));
    }
    let matrix = |take: fn(&PhysSnapshot) -> &Vec<f64>| -> Vec<Vec<f64>> {
        snaps.iter().map(|s| take(s).clone()).collect()
    };
    let h = class_totals(
        &matrix(|s| &s.rho_h),
        &matrix(|s| &s.v_h),
        dt,
        dx,
    );
    let a = class_totals(
        &matrix(|s| &s.rho_a),
        &matrix(|s| &s.v_a),
        dt,
        dx,
    );
    Ok((h, a))
}

fn class_totals(rho: &[Vec<f64>], v: &[Vec<f64>], dt: f64, dx: f64) -> ClassTotals {
    let nt = v.len();
    let nx = v[0].len();
    let v_t = gradient_rows(v, dt);
    let v_x = gradient_cols(v, dx);
    let mut accel = vec![vec![0.0; nx]; nt];
    for k in 0..nt {
        for j in 0..nx {
            accel[k][j] = v_t[k][j] + v[k][j] * v_x[k][j];
        }
    }
    let mut jerk = vec![vec![0.0; nx]; nt];
    for k in 0..nt - 1 {
        for j in 0..nx {
            jerk[k][j] = (accel[k + 1][j] - accel[k][j]) / dt;
        }
    }
    jerk[nt - 1] = jerk[nt - 2].clone();
    let mut fuel = 0.0;
    let mut discom = 0.0;
    let mut ttt = 0.0;
    let mut tmt = 0.0;
    for k in 0..nt {
        let wt = if k == 0 || k == nt - 1 { 0.5 } else { 1.0 };
        for j in 0..nx {
            let w = wt * if j == 0 || j == nx - 1 { 0.5 } else { 1.0 };
            let (r, vel, a) = (rho[k][j], v[k][j], accel[k][j]);
            let rate = B0 + B1 * vel + B2 * vel * a + B3 * vel * vel * vel;
            fuel += w * rate.max(0.0) * r;
            discom += w * (a * a + jerk[k][j] * jerk[k][j]) * r;
            ttt += w * r;
            tmt += w * r * vel;
        }
    }
    let cell = dt * dx;
    ClassTotals {
        fuel: fuel * cell,
        discom: discom * cell,
        ttt: ttt * cell,
        tmt: tmt * cell,
    }
}

fn gradient_rows(f: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let nt = f.len();
    let nx = f[0].len();
    let mut g = vec![vec![0.0; nx]; nt];
    for j in 0..nx {
        g[0][j] = (f[1][j] - f[0][j]) / h;
        for k in 1..nt - 1 {
            g[k][j] = (f[k + 1][j] - f[k - 1][j]) / (2.0 * h);
        }
        g[nt - 1][j] = (f[nt - 1][j] - f[nt - 2][j]) / h;
    }
    g
}

fn gradient_cols(f: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let nt = f.len();
    let nx = f[0].len();
    let mut g = vec![vec![0.0; nx]; nt];
    for k in 0..nt {
        g[k][0] = (f[k][1] - f[k][0]) / h;
        for j in 1..nx - 1 {
            g[k][j] = (f[k][j + 1] - f[k][j - 1]) / (2.0 * h);
        }
        g[k][nx - 1] = (f[k][nx - 1] - f[k][nx - 2]) / h;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etc::EtcParams;
    use crate::model::{
        calibrate_vehicle_width, compute_equilibrium, linearize, LinearizedSystem, KMH,
    };
    use crate::sim::{make_initial_condition, run, GridSpec, IcKind, OpenLoop, Simulator};

    fn uniform_history(
        nt: usize,
        nx: usize,
        rho: (f64, f64),
        v: (f64, f64),
    ) -> Vec<PhysSnapshot> {
        (0..nt)
            .map(|_| PhysSnapshot {
                rho_h: vec![rho.0; nx],
                v_h: vec![v.0; nx],
                rho_a: vec![rho.1; nx],
                v_a: vec![v.1; nx],
            })
            .collect()
    }

    fn wavy_history(nt: usize, nx: usize, rho_scale: f64) -> Vec<PhysSnapshot> {
        (0..nt)
            .map(|k| {
                let t = k as f64 * 0.3;
                let profile = |j: usize, base: f64, amp: f64, speed: f64| {
                    base + amp * (0.05 * j as f64 - speed * t).sin()
                };
                PhysSnapshot {
                    rho_h: (0..nx).map(|j| rho_scale * profile(j, 0.1, 0.02, 0.8)).collect(),
                    v_h: (0..nx).map(|j| profile(j, 9.0, 1.5, 1.1)).collect(),
                    rho_a: (0..nx).map(|j| rho_scale * profile(j, 0.09, 0.015, 0.6)).collect(),
                    v_a: (0..nx).map(|j| profile(j, 4.0, 0.8, 0.9)).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn empty_road_costs_nothing() {
        let snaps = uniform_history(8, 12, (0.0, 0.0), (9.0, 4.2));
        assert_eq!(fuel(&snaps, 0.5, 10.0).unwrap(), 0.0);
        assert_eq!(discomfort(&snaps, 0.5, 10.0).unwrap(), 0.0);
        assert_eq!(ttt(&snaps, 0.5, 10.0).unwrap(), 0.0);
        let (td_h, td_a, td_total) = total_delay(&snaps, 0.5, 10.0, 22.2, 16.7).unwrap();
        assert_eq!((td_h, td_a, td_total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn steady_flow_matches_the_closed_forms() {
        let (rho_h, rho_a) = (0.110, 0.095);
        let (v_h, v_a) = (32.0 * KMH, 15.0 * KMH);
        let (nt, nx, dt, dx) = (31, 21, 15.0, 50.0);
        let (time, length) = ((nt - 1) as f64 * dt, (nx - 1) as f64 * dx);
        let snaps = uniform_history(nt, nx, (rho_h, rho_a), (v_h, v_a));

        let rate = |v: f64| B0 + B1 * v + B3 * v * v * v;
        let fuel_expected = (rate(v_h) * rho_h + rate(v_a) * rho_a) * length * time;
        let got = fuel(&snaps, dt, dx).unwrap();
        assert!((got - fuel_expected).abs() <= 1e-12 * fuel_expected);

        assert_eq!(discomfort(&snaps, dt, dx).unwrap(), 0.0);

        let ttt_expected = (rho_h + rho_a) * length * time;
        let got = ttt(&snaps, dt, dx).unwrap();
        assert!((got - ttt_expected).abs() <= 1e-12 * ttt_expected);

        let (td_h, td_a, _) = total_delay(&snaps, dt, dx, 2.0 * v_h, 2.0 * v_a).unwrap();
        assert!((td_h - 0.5 * rho_h * length * time).abs() <= 1e-12 * td_h);
        assert!((td_a - 0.5 * rho_a * length * time).abs() <= 1e-12 * td_a);

        let (td_h, td_a, td_total) = total_delay(&snaps, dt, dx, v_h, v_a).unwrap();
        assert!(td_h.abs() <= 1e-12 * ttt_expected);
        assert!(td_a.abs() <= 1e-12 * ttt_expected);
        assert!(td_total.abs() <= 1e-12 * ttt_expected);
    }

    #[test]
    fn doubling_density_doubles_the_density_linear_indices() {
        let base = wavy_history(40, 30, 1.0);
        let doubled = wavy_history(40, 30, 2.0);
        let (dt, dx) = (0.3, 20.0);
        for f in [fuel, discomfort, ttt] {
            let one = f(&base, dt, dx).unwrap();
            let two = f(&doubled, dt, dx).unwrap();
            assert!((two - 2.0 * one).abs() <= 1e-12 * two.abs());
            assert!(one > 0.0);
        }
    }

    #[test]
    fn indices_add_over_adjoining_windows() {
        let snaps = wavy_history(41, 30, 1.0);
        let (dt, dx) = (0.3, 20.0);
        let whole = ttt(&snaps, dt, dx).unwrap();
        let first = ttt(&snaps[..21], dt, dx).unwrap();
        let second = ttt(&snaps[20..], dt, dx).unwrap();
        assert!((first + second - whole).abs() <= 1e-12 * whole);
    }

    #[test]
    fn rejects_a_degenerate_history() {
        let snaps = uniform_history(1, 12, (0.1, 0.1), (9.0, 4.2));
        assert!(fuel(&snaps, 0.5, 10.0).is_err());
        let snaps = uniform_history(8, 12, (0.1, 0.1), (9.0, 4.2));
        assert!(fuel(&snaps, 0.0, 10.0).is_err());
    }

    #[test]
    fn improvement_percentages_are_signed() {
        let report = |scale: f64| MetricsReport {
            j_fuel: 100.0 * scale,
            j_discom: 50.0 * scale,
            j_ttt: 1000.0,
            td_h: 10.0,
            td_a: 20.0,
            td_total: 30.0 * scale,
            trigger: None,
            improvement_vs_baseline: None,
        };
        let imp = improvements(&report(0.9), &report(1.0));
        assert!((imp.j_fuel + 10.0).abs() <= 1e-12);
        assert!((imp.j_discom + 10.0).abs() <= 1e-12);
        assert_eq!(imp.j_ttt, 0.0);
        assert!((imp.td_total + 10.0).abs() <= 1e-12);
    }

    #[test]
    fn single_initial_event_releases_all_but_one_step() {
        let events = vec![EventRecord {
            t: 0.0,
            dwell: 0.0,
            u: 0.3,
            v: 1.0,
            m: -10.0,
        }];
        let stats = trigger_stats(&events, 450.0, 0.4);
        assert_eq!(stats.count, 1);
        assert_eq!(stats.total_release_time, 450.0 - 0.4);
        assert_eq!(stats.min_dwell, 450.0);
    }

    #[test]
    fn firing_every_step_releases_nothing() {
        let n = 900usize;
        let dt = 450.0 / n as f64;
        let events: Vec<EventRecord> = (0..n)
            .map(|k| EventRecord {
                t: k as f64 * dt,
                dwell: if k == 0 { 0.0 } else { dt },
                u: 0.0,
                v: 1.0,
                m: -1.0,
            })
            .collect();
        let stats = trigger_stats(&events, 450.0, dt);
        assert_eq!(stats.count, n);
        assert!(stats.total_release_time.abs() <= 1e-9);
        assert_eq!(stats.count as f64 * dt + stats.total_release_time, 450.0);
        assert!((stats.min_dwell - dt).abs() <= 1e-12);
    }

    fn paper_system(grid_n: usize) -> LinearizedSystem {
        let mut p = crate::model::ModelParams::default();
        p.vehicle_width =
            calibrate_vehicle_width(32.0 * KMH, 0.110, 0.095, &p).expect("calibration");
        let eq = compute_equilibrium(0.110, 0.095, &p).expect("equilibrium");
        linearize(&eq, &p, grid_n).expect("linearize")
    }

    #[test]
    fn quadrature_is_stable_under_sample_refinement() {
        let sys = paper_system(100);
        let grid = GridSpec::new(&sys, 100, 0.9, 450.0).unwrap();
        let sim = Simulator::new(&sys, grid);
        let ic = make_initial_condition(IcKind::Sinusoidal, &sys.eq, &sys, &grid, 1.0);
        let traj = run(&sim, ic, &mut OpenLoop, 5, true).unwrap();
        let snaps = traj.physical.as_ref().unwrap();
        let fine = performance_indices(snaps, 5.0 * grid.dt, grid.dx, &sys.params).unwrap();
        let coarse_snaps: Vec<PhysSnapshot> = snaps.iter().step_by(2).cloned().collect();
        let coarse =
            performance_indices(&coarse_snaps, 10.0 * grid.dt, grid.dx, &sys.params).unwrap();

        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        assert!(rel(coarse.j_fuel, fine.j_fuel) < 0.05);
        assert!(rel(coarse.j_discom, fine.j_discom) < 0.05);
        assert!(rel(coarse.j_ttt, fine.j_ttt) < 0.05);
        assert!(rel(coarse.td_h, fine.td_h) < 0.05);
        assert!(rel(coarse.td_a, fine.td_a) < 0.05);
        assert!(rel(coarse.td_total, fine.td_total) < 0.05);

        assert!(rel(fine.j_fuel, 2.314809e3) < 1e-4);
        assert!(rel(fine.j_discom, 2.554930e3) < 1e-4);
        assert!(rel(fine.j_ttt, 9.200336e4) < 1e-4);
        assert!(rel(fine.td_h, 3.154993e4) < 1e-4);
        assert!(rel(fine.td_a, 3.074126e4) < 1e-4);
        assert!(rel(fine.td_total, 6.229119e4) < 1e-4);
        assert!(rel(coarse.j_discom, 2.512982e3) < 1e-4);

        assert!(fine.j_fuel > 0.0 && fine.j_discom > 0.0 && fine.j_ttt > 0.0);
        assert!(fine.td_h > 0.0 && fine.td_a > 0.0);
    }

    #[test]
    fn closed_loop_run_keeps_the_trigger_books_consistent() {
        let sys = paper_system(100);
        let set = crate::kernels::KernelSet::solve(
            &sys,
            100,
            &crate::kernels::SolverOptions::default(),
        )
        .unwrap();
        let grid = GridSpec::new(&sys, 100, 0.9, 120.0).unwrap();
        let sim = Simulator::new(&sys, grid);
        let ic = make_initial_condition(IcKind::Sinusoidal, &sys.eq, &sys, &grid, 1.0);
        let mut hook = crate::etc::EtcHook::new(&set, &sys, EtcParams::default()).unwrap();
        run(&sim, ic, &mut hook, 10, false).unwrap();
        let stats = trigger_stats(&hook.trigger.event_log, grid.t_end, grid.dt);
        assert!(stats.count >= 1);
        assert!(stats.total_release_time <= grid.t_end);
        assert!(stats.min_dwell >= grid.dt - 1e-12);
        assert_eq!(
            stats.count as f64 * grid.dt + stats.total_release_time,
            grid.t_end
        );
    }
}
