//! CSV writers for trajectories, control traces, event logs, and reports.
//!
//! Files are written with headers and one record per line. Density and
//! speed columns use the paper's units (veh/km, km/h); controller traces,
//! performance indices, and Riemann coordinates stay in SI. Floats are
//! rendered in exponential form so reruns of the same scenario and seed
//! produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::etc::EventRecord;
use crate::metrics::MetricsReport;
use crate::model::RegimeCell;
use crate::observer::ErrorSample;
use crate::sim::{ControlRecord, Simulator, Trajectory};

/// One sweep run in the aggregate report; `report` is `None` when the run
/// failed and `error` says why.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub report: Option<MetricsReport>,
    pub lyapunov_convergence_time: Option<f64>,
    pub error: Option<String>,
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn opt(value: Option<f64>) -> String {
    value.map(|v| format!("{v:e}")).unwrap_or_default()
}

/// Snapshot fields over the whole run, one row per snapshot and node.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, sim: &Simulator) -> Result<()> {
    let mut w = create(path)?;
    writeln!(
        w,
        "t_s,x_m,rho_h_veh_km,v_h_kmh,rho_a_veh_km,v_a_kmh,w1,w2,w3,w4"
    )?;
    for (s, state) in traj.snapshots.iter().enumerate() {
        let phys = match traj.physical.as_ref() {
            Some(ph) => ph[s].clone(),
            None => sim.to_physical(state),
        };
        for j in 0..state.n_nodes() {
            writeln!(
                w,
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                state.t,
                sim.x[j],
                phys.rho_h[j] * 1000.0,
                phys.v_h[j] * 3.6,
                phys.rho_a[j] * 1000.0,
                phys.v_a[j] * 3.6,
                state.w_plus[0][j],
                state.w_plus[1][j],
                state.w_plus[2][j],
                state.w_minus[j],
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-step control trace.
pub fn write_control_csv(path: &Path, control: &[ControlRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "t_s,u_continuous,u_applied,triggered")?;
    for r in control {
        writeln!(
            w,
            "{:e},{:e},{:e},{}",
            r.t,
            r.u_continuous,
            r.u_applied,
            u8::from(r.triggered)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Event log with dwell times and the trigger state at each event.
pub fn write_events_csv(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "event_index,t_event_s,dwell_s,u,v,m")?;
    for (i, e) in events.iter().enumerate() {
        writeln!(w, "{},{:e},{:e},{:e},{:e},{:e}", i, e.t, e.dwell, e.u, e.v, e.m)?;
    }
    w.flush()?;
    Ok(())
}

/// Lyapunov functional, dynamic variable, and discrepancy per step;
/// `v_d = v - m` is the dissipation trace.
pub fn write_lyapunov_csv(path: &Path, control: &[ControlRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "t_s,v,m,v_d,d")?;
    for r in control {
        writeln!(
            w,
            "{:e},{:e},{:e},{:e},{:e}",
            r.t,
            r.lyapunov,
            r.m,
            r.lyapunov - r.m,
            r.d
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Estimation-error norms along an output-feedback run.
pub fn write_estimation_error_csv(path: &Path, samples: &[ErrorSample]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "t_s,error_plus,error_minus")?;
    for s in samples {
        writeln!(w, "{:e},{:e},{:e}", s.t, s.e_plus, s.e_minus)?;
    }
    w.flush()?;
    Ok(())
}

/// Single-scenario metrics row; percentage columns stay empty without a
/// baseline, trigger columns without an event log.
pub fn write_metrics_csv(path: &Path, scenario: &str, report: &MetricsReport) -> Result<()> {
    let mut w = create(path)?;
    writeln!(
        w,
        "scenario,j_fuel,j_discom,j_ttt,td_h,td_a,td_total,\
         j_fuel_pct,j_discom_pct,j_ttt_pct,td_h_pct,td_a_pct,td_total_pct,\
         trigger_count,release_time_s,min_dwell_s"
    )?;
    let imp = report.improvement_vs_baseline.as_ref();
    let trig = report.trigger.as_ref();
    writeln!(
        w,
        "{},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{},{},{},{},{}",
        scenario,
        report.j_fuel,
        report.j_discom,
        report.j_ttt,
        report.td_h,
        report.td_a,
        report.td_total,
        opt(imp.map(|i| i.j_fuel)),
        opt(imp.map(|i| i.j_discom)),
        opt(imp.map(|i| i.j_ttt)),
        opt(imp.map(|i| i.td_h)),
        opt(imp.map(|i| i.td_a)),
        opt(imp.map(|i| i.td_total)),
        trig.map(|t| t.count.to_string()).unwrap_or_default(),
        opt(trig.map(|t| t.total_release_time)),
        opt(trig.map(|t| t.min_dwell)),
    )?;
    w.flush()?;
    Ok(())
}

/// Aggregate sweep report, one row per visited value.
pub fn write_sweep_csv(path: &Path, axis: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(
        w,
        "{axis},trigger_count,release_time_s,min_dwell_s,\
         lyapunov_convergence_time_s,j_fuel,j_discom,j_ttt,td_h,td_a,td_total,error"
    )?;
    for row in rows {
        let report = row.report.as_ref();
        let trig = report.and_then(|r| r.trigger.as_ref());
        writeln!(
            w,
            "{:e},{},{},{},{},{},{},{},{},{},{},{}",
            row.value,
            trig.map(|t| t.count.to_string()).unwrap_or_default(),
            opt(trig.map(|t| t.total_release_time)),
            opt(trig.map(|t| t.min_dwell)),
            opt(row.lyapunov_convergence_time),
            opt(report.map(|r| r.j_fuel)),
            opt(report.map(|r| r.j_discom)),
            opt(report.map(|r| r.j_ttt)),
            opt(report.map(|r| r.td_h)),
            opt(report.map(|r| r.td_a)),
            opt(report.map(|r| r.td_total)),
            row.error.as_deref().unwrap_or(""),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Regime classification over a density grid.
pub fn write_regime_map_csv(path: &Path, cells: &[RegimeCell]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "rho_h_veh_km,rho_a_veh_km,lambda4_ms,regime")?;
    for cell in cells {
        let (lambda4, tag) = match &cell.regime {
            Some(r) => (
                format!("{:e}", r.lambda4),
                match r.tag {
                    crate::model::RegimeTag::Congested => "congested",
                    crate::model::RegimeTag::Free => "free",
                },
            ),
            None => (String::new(), "infeasible"),
        };
        writeln!(
            w,
            "{:e},{:e},{},{}",
            cell.rho_h * 1000.0,
            cell.rho_a * 1000.0,
            lambda4,
            tag
        )?;
    }
    w.flush()?;
    Ok(())
}
