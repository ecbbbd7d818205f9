//! Scenario configuration: a flat key = value text format.
//!
//! Lines hold one `key = value` pair each; `#` starts a comment and blank
//! lines are skipped. Every key has a default, so an empty file is the
//! bundled baseline scenario. Keys carry their unit in the name where one
//! applies (speeds in km/h, densities in veh/km, demands in veh/h, lengths
//! in meters, times in seconds); values are converted to SI on load.
//! Unknown and duplicate keys are rejected with their line number.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::etc::EtcParams;
use crate::model::{ModelParams, KMH};
use crate::sim::IcKind;

/// Boundary controller selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    OpenLoop,
    Backstepping,
    Etc,
    ObserverEtc,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::OpenLoop => "open_loop",
            ControllerKind::Backstepping => "backstepping",
            ControllerKind::Etc => "etc",
            ControllerKind::ObserverEtc => "observer_etc",
        }
    }
}

/// Quantity varied across a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SpacingA,
    Demand,
    Penetration,
    Mu,
    Sigma,
    Zeta,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::SpacingA => "spacing_a",
            SweepAxis::Demand => "demand",
            SweepAxis::Penetration => "penetration",
            SweepAxis::Mu => "mu",
            SweepAxis::Sigma => "sigma",
            SweepAxis::Zeta => "zeta",
        }
    }
}

/// One sweep request: the axis and the values to visit.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Axis units: meters (spacing_a), veh/h (demand), fraction
    /// (penetration), or the raw trigger parameter (mu, sigma, zeta).
    pub values: Vec<f64>,
}

/// A fully resolved scenario: everything a run needs, in SI units.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario_name: String,
    pub params: ModelParams,
    /// Target HV equilibrium speed (m/s) the vehicle width is calibrated
    /// against before each run; `None` keeps `params.vehicle_width`.
    pub calibrate_width_to: Option<f64>,
    /// Equilibrium densities (veh/m).
    pub rho_h_star: f64,
    pub rho_a_star: f64,
    /// Per-class demands (veh/s); when both are set they replace the
    /// densities via the congested-branch demand solver.
    pub demand_h: Option<f64>,
    pub demand_a: Option<f64>,
    /// HV share of total demand used when sweeping the demand axis.
    pub demand_split_h: f64,
    pub controller: ControllerKind,
    pub etc: EtcParams,
    pub nx: usize,
    pub cfl: f64,
    pub t_end: f64,
    /// Fixed time step (s) overriding the CFL-derived one.
    pub dt_override: Option<f64>,
    pub ic_kind: IcKind,
    pub ic_scale: f64,
    /// Steps between recorded snapshots.
    pub snapshot_stride: usize,
    /// Output-feedback discrepancy uses the measured outlet trace instead
    /// of the estimated one.
    pub observer_plant_trace: bool,
    pub sweep: Option<SweepSpec>,
    pub out_dir: PathBuf,
    /// Directory for kernel caches; `None` disables caching.
    pub kernel_cache_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> ScenarioConfig {
        ScenarioConfig {
            scenario_name: "baseline".into(),
            params: ModelParams::default(),
            calibrate_width_to: Some(32.0 * KMH),
            rho_h_star: 0.110,
            rho_a_star: 0.095,
            demand_h: None,
            demand_a: None,
            demand_split_h: 0.7,
            controller: ControllerKind::Etc,
            etc: EtcParams::default(),
            nx: 100,
            cfl: 0.9,
            t_end: 450.0,
            dt_override: None,
            ic_kind: IcKind::Sinusoidal,
            ic_scale: 1.0,
            snapshot_stride: 5,
            observer_plant_trace: false,
            sweep: None,
            out_dir: PathBuf::from("out"),
            kernel_cache_dir: None,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Checks the cross-field invariants a parsed or hand-built config
    /// must satisfy before any run.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let positive = [
            ("free_flow_speed_h", p.free_flow_speed_h),
            ("free_flow_speed_a", p.free_flow_speed_a),
            ("gamma_h", p.gamma_h),
            ("gamma_a", p.gamma_a),
            ("tau_h", p.tau_h),
            ("tau_a", p.tau_a),
            ("spacing_h", p.spacing_h),
            ("spacing_a", p.spacing_a),
            ("vehicle_width", p.vehicle_width),
            ("road_width", p.road_width),
            ("road_length", p.road_length),
            ("rho_h_star", self.rho_h_star),
            ("rho_a_star", self.rho_a_star),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        for (name, value) in [("ao_max_h", p.ao_max_h), ("ao_max_a", p.ao_max_a)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(Error::Validation(format!("{name} must lie in (0, 1]")));
            }
        }
        if let Some(v) = self.calibrate_width_to {
            if !(v > 0.0) {
                return Err(Error::Validation(
                    "calibrate_width_to_kmh must be positive".into(),
                ));
            }
        }
        if self.demand_h.is_some() != self.demand_a.is_some() {
            return Err(Error::Validation(
                "demand_h_veh_h and demand_a_veh_h must be set together".into(),
            ));
        }
        for (name, value) in [
            ("demand_h_veh_h", self.demand_h),
            ("demand_a_veh_h", self.demand_a),
        ] {
            if let Some(v) = value {
                if !(v > 0.0) {
                    return Err(Error::Validation(format!("{name} must be positive")));
                }
            }
        }
        if !(self.demand_split_h > 0.0 && self.demand_split_h < 1.0) {
            return Err(Error::Validation(
                "demand_split_h must lie in (0, 1)".into(),
            ));
        }
        if self.nx < 2 {
            return Err(Error::Validation("nx must be at least 2".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Validation("cfl must lie in (0, 1]".into()));
        }
        if !(self.t_end >= 0.0) {
            return Err(Error::Validation("t_end_s must be nonnegative".into()));
        }
        if let Some(dt) = self.dt_override {
            if !(dt > 0.0) {
                return Err(Error::Validation("dt_s must be positive".into()));
            }
        }
        if self.snapshot_stride == 0 {
            return Err(Error::Validation(
                "snapshot_stride must be at least 1".into(),
            ));
        }
        if !self.ic_scale.is_finite() {
            return Err(Error::Validation("ic_scale must be finite".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::Validation(
                    "sweep_values must list at least one value".into(),
                ));
            }
            if sweep.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("sweep_values must be finite".into()));
            }
        }
        self.etc.check()?;
        Ok(())
    }
}

/// Reads and validates a scenario config file.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Parses and validates config text; an empty string yields the defaults.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    let mut sweep_axis: Option<SweepAxis> = None;
    let mut sweep_values: Option<Vec<f64>> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(Error::Config {
                line,
                msg: format!("key `{key}` has no value"),
            });
        }
        if let Some(canonical) = KEYS.iter().find(|k| **k == key) {
            if seen.contains(canonical) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            seen.push(canonical);
        } else {
            return Err(Error::Config {
                line,
                msg: format!("unknown key `{key}`"),
            });
        }

        let float = || parse_float(key, value, line);
        match key {
            "scenario" => cfg.scenario_name = value.to_string(),
            "free_flow_speed_h_kmh" => cfg.params.free_flow_speed_h = float()? * KMH,
            "free_flow_speed_a_kmh" => cfg.params.free_flow_speed_a = float()? * KMH,
            "gamma_h" => cfg.params.gamma_h = float()?,
            "gamma_a" => cfg.params.gamma_a = float()?,
            "tau_h_s" => cfg.params.tau_h = float()?,
            "tau_a_s" => cfg.params.tau_a = float()?,
            "spacing_h_m" => cfg.params.spacing_h = float()?,
            "spacing_a_m" => cfg.params.spacing_a = float()?,
            "vehicle_width_m" => cfg.params.vehicle_width = float()?,
            "road_width_m" => cfg.params.road_width = float()?,
            "road_length_m" => cfg.params.road_length = float()?,
            "ao_max_h" => cfg.params.ao_max_h = float()?,
            "ao_max_a" => cfg.params.ao_max_a = float()?,
            "calibrate_width_to_kmh" => {
                cfg.calibrate_width_to = parse_optional(key, value, line)?.map(|v| v * KMH)
            }
            "rho_h_star_veh_km" => cfg.rho_h_star = float()? / 1000.0,
            "rho_a_star_veh_km" => cfg.rho_a_star = float()? / 1000.0,
            "demand_h_veh_h" => {
                cfg.demand_h = parse_optional(key, value, line)?.map(|v| v / 3600.0)
            }
            "demand_a_veh_h" => {
                cfg.demand_a = parse_optional(key, value, line)?.map(|v| v / 3600.0)
            }
            "demand_split_h" => cfg.demand_split_h = float()?,
            "controller" => {
                cfg.controller = match value {
                    "open_loop" => ControllerKind::OpenLoop,
                    "backstepping" => ControllerKind::Backstepping,
                    "etc" => ControllerKind::Etc,
                    "observer_etc" => ControllerKind::ObserverEtc,
                    other => {
                        return Err(Error::Config {
                            line,
                            msg: format!(
                                "controller must be one of open_loop, backstepping, \
                                 etc, observer_etc; got `{other}`"
                            ),
                        })
                    }
                }
            }
            "nx" => {
                cfg.nx = value.parse().map_err(|_| Error::Config {
                    line,
                    msg: format!("nx must be a positive integer, got `{value}`"),
                })?
            }
            "cfl" => cfg.cfl = float()?,
            "t_end_s" => cfg.t_end = float()?,
            "dt_s" => cfg.dt_override = parse_optional(key, value, line)?,
            "ic_kind" => {
                cfg.ic_kind = match value {
                    "sinusoidal" => IcKind::Sinusoidal,
                    "non_recurrent" => IcKind::NonRecurrent,
                    "linear" => IcKind::Linear,
                    other => {
                        return Err(Error::Config {
                            line,
                            msg: format!(
                                "ic_kind must be one of sinusoidal, non_recurrent, \
                                 linear; got `{other}`"
                            ),
                        })
                    }
                }
            }
            "ic_scale" => cfg.ic_scale = float()?,
            "snapshot_stride" => {
                cfg.snapshot_stride = value.parse().map_err(|_| Error::Config {
                    line,
                    msg: format!("snapshot_stride must be a positive integer, got `{value}`"),
                })?
            }
            "observer_plant_trace" => cfg.observer_plant_trace = parse_bool(key, value, line)?,
            "zeta" => cfg.etc.zeta = float()?,
            "sigma" => cfg.etc.sigma = float()?,
            "eta" => cfg.etc.eta = float()?,
            "mu" => cfg.etc.mu = float()?,
            "a_1" => cfg.etc.a_coef[0] = float()?,
            "a_2" => cfg.etc.a_coef[1] = float()?,
            "a_3" => cfg.etc.a_coef[2] = float()?,
            "b" => cfg.etc.b_coef = float()?,
            "varsigma_1" => cfg.etc.varsigma[0] = float()?,
            "varsigma_2" => cfg.etc.varsigma[1] = float()?,
            "varsigma_3" => cfg.etc.varsigma[2] = float()?,
            "varsigma_4" => cfg.etc.varsigma[3] = float()?,
            "m0" => cfg.etc.m0 = float()?,
            "sweep_axis" => {
                sweep_axis = match value {
                    "none" => None,
                    "spacing_a" => Some(SweepAxis::SpacingA),
                    "demand" => Some(SweepAxis::Demand),
                    "penetration" => Some(SweepAxis::Penetration),
                    "mu" => Some(SweepAxis::Mu),
                    "sigma" => Some(SweepAxis::Sigma),
                    "zeta" => Some(SweepAxis::Zeta),
                    other => {
                        return Err(Error::Config {
                            line,
                            msg: format!(
                                "sweep_axis must be one of none, spacing_a, demand, \
                                 penetration, mu, sigma, zeta; got `{other}`"
                            ),
                        })
                    }
                }
            }
            "sweep_values" => {
                let mut values = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    values.push(part.parse().map_err(|_| Error::Config {
                        line,
                        msg: format!("sweep_values entry `{part}` is not a number"),
                    })?);
                }
                sweep_values = Some(values);
            }
            "out_dir" => cfg.out_dir = PathBuf::from(value),
            "kernel_cache_dir" => {
                cfg.kernel_cache_dir = if value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "seed" => {
                cfg.seed = value.parse().map_err(|_| Error::Config {
                    line,
                    msg: format!("seed must be a nonnegative integer, got `{value}`"),
                })?
            }
            _ => unreachable!("key `{key}` is listed but unhandled"),
        }
    }

    cfg.sweep = match (sweep_axis, sweep_values) {
        (Some(axis), Some(values)) => Some(SweepSpec { axis, values }),
        (None, None) => None,
        (Some(_), None) => {
            return Err(Error::Validation(
                "sweep_axis given without sweep_values".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Validation(
                "sweep_values given without sweep_axis".into(),
            ))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

const KEYS: &[&str] = &[
    "scenario",
    "free_flow_speed_h_kmh",
    "free_flow_speed_a_kmh",
    "gamma_h",
    "gamma_a",
    "tau_h_s",
    "tau_a_s",
    "spacing_h_m",
    "spacing_a_m",
    "vehicle_width_m",
    "road_width_m",
    "road_length_m",
    "ao_max_h",
    "ao_max_a",
    "calibrate_width_to_kmh",
    "rho_h_star_veh_km",
    "rho_a_star_veh_km",
    "demand_h_veh_h",
    "demand_a_veh_h",
    "demand_split_h",
    "controller",
    "nx",
    "cfl",
    "t_end_s",
    "dt_s",
    "ic_kind",
    "ic_scale",
    "snapshot_stride",
    "observer_plant_trace",
    "zeta",
    "sigma",
    "eta",
    "mu",
    "a_1",
    "a_2",
    "a_3",
    "b",
    "varsigma_1",
    "varsigma_2",
    "varsigma_3",
    "varsigma_4",
    "m0",
    "sweep_axis",
    "sweep_values",
    "out_dir",
    "kernel_cache_dir",
    "seed",
];

fn parse_float(key: &str, value: &str, line: usize) -> Result<f64> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("key `{key}` needs a number, got `{value}`"),
    })
}

fn parse_optional(key: &str, value: &str, line: usize) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_float(key, value, line).map(Some)
    }
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config {
            line,
            msg: format!("key `{key}` needs true or false, got `{other}`"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_baseline_scenario() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.scenario_name, "baseline");
        assert_eq!(cfg.controller, ControllerKind::Etc);
        assert_eq!(cfg.nx, 100);
        assert_eq!(cfg.t_end, 450.0);
        assert_eq!(cfg.rho_h_star, 0.110);
        assert_eq!(cfg.rho_a_star, 0.095);
        assert_eq!(cfg.calibrate_width_to, Some(32.0 * KMH));
        assert_eq!(cfg.params.free_flow_speed_h, 80.0 * KMH);
        assert_eq!(cfg.ic_kind, IcKind::Sinusoidal);
        assert!(cfg.sweep.is_none());
        assert!(cfg.demand_h.is_none());
    }

    #[test]
    fn units_convert_on_load() {
        let cfg = parse_config(
            "free_flow_speed_h_kmh = 72\n\
             rho_h_star_veh_km = 120\n\
             demand_h_veh_h = 3600\n\
             demand_a_veh_h = 1800\n\
             calibrate_width_to_kmh = none\n",
        )
        .unwrap();
        assert_eq!(cfg.params.free_flow_speed_h, 20.0);
        assert_eq!(cfg.rho_h_star, 0.120);
        assert_eq!(cfg.demand_h, Some(1.0));
        assert_eq!(cfg.demand_a, Some(0.5));
        assert_eq!(cfg.calibrate_width_to, None);
    }

    #[test]
    fn comments_and_spacing_are_ignored() {
        let cfg = parse_config(
            "# scenario file\n\
             \n\
             controller = backstepping   # hold the continuous law\n\
             \t nx = 50 \n",
        )
        .unwrap();
        assert_eq!(cfg.controller, ControllerKind::Backstepping);
        assert_eq!(cfg.nx, 50);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        let err = parse_config("nx = 100\nno_such_key = 5\n").unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("no_such_key"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_are_rejected_with_their_line() {
        let err = parse_config("\n\njust words\n").unwrap_err();
        match err {
            Error::Config { line, .. } => assert_eq!(line, 3),
            other => panic!("expected config error, got {other:?}"),
        }
        let err = parse_config("cfl = fast\n").unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("cfl"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_config("nx = 100\nnx = 200\n").unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn negative_time_constant_fails_validation() {
        let err = parse_config("tau_h_s = -30\n").unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("tau_h")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn sweep_needs_both_axis_and_values() {
        let cfg = parse_config("sweep_axis = penetration\nsweep_values = 0.44, 0.47, 0.50\n")
            .unwrap();
        let sweep = cfg.sweep.unwrap();
        assert_eq!(sweep.axis, SweepAxis::Penetration);
        assert_eq!(sweep.values, vec![0.44, 0.47, 0.50]);

        assert!(parse_config("sweep_axis = mu\n").is_err());
        assert!(parse_config("sweep_values = 1, 2\n").is_err());
        assert!(parse_config("sweep_axis = none\n").unwrap().sweep.is_none());
    }

    #[test]
    fn trigger_parameters_reach_the_etc_block() {
        let cfg = parse_config(
            "zeta = 2e-3\n\
             a_1 = 1e-3\n\
             varsigma_4 = 4e-3\n\
             m0 = -5\n",
        )
        .unwrap();
        assert_eq!(cfg.etc.zeta, 2e-3);
        assert_eq!(cfg.etc.a_coef[0], 1e-3);
        assert_eq!(cfg.etc.varsigma[3], 4e-3);
        assert_eq!(cfg.etc.m0, -5.0);
    }

    #[test]
    fn demand_keys_must_pair() {
        let err = parse_config("demand_h_veh_h = 4555\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn observer_and_output_knobs_parse() {
        let cfg = parse_config(
            "controller = observer_etc\n\
             observer_plant_trace = true\n\
             out_dir = results/run1\n\
             kernel_cache_dir = cache\n\
             seed = 7\n\
             dt_s = 0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.controller, ControllerKind::ObserverEtc);
        assert!(cfg.observer_plant_trace);
        assert_eq!(cfg.out_dir, PathBuf::from("results/run1"));
        assert_eq!(cfg.kernel_cache_dir, Some(PathBuf::from("cache")));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dt_override, Some(0.25));
    }
}
