//! Two-class traffic model: area occupancy, fundamental diagrams,
//! equilibria, linearization into Riemann coordinates, and regime
//! classification.
//!
//! State order for physical vectors is z = (rho_h, v_h, rho_a, v_a).
//! Riemann coordinates are ordered w = (w1, w2, w3, w4) where w1..w3 travel
//! with the positive characteristic speeds lambda_1 <= lambda_2 <= lambda_3
//! and w4 travels with lambda_4, the most negative speed.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

/// Conversion factor: multiply km/h by this to get m/s.
pub const KMH: f64 = 1000.0 / 3600.0;

/// Conversion factor: multiply veh/km by this to get veh/m.
pub const VEH_KM: f64 = 1e-3;

/// Vehicle class selector for per-class quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleClass {
    Hv,
    Av,
}

/// Physical constants of the two-class road system, all in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Free-flow speed of human-driven vehicles (m/s).
    pub free_flow_speed_h: f64,
    /// Free-flow speed of automated vehicles (m/s).
    pub free_flow_speed_a: f64,
    /// Pressure exponent of human-driven vehicles.
    pub gamma_h: f64,
    /// Pressure exponent of automated vehicles.
    pub gamma_a: f64,
    /// Relaxation time of human-driven vehicles (s).
    pub tau_h: f64,
    /// Relaxation time of automated vehicles (s).
    pub tau_a: f64,
    /// Spacing policy of human-driven vehicles (m).
    pub spacing_h: f64,
    /// Spacing policy of automated vehicles (m).
    pub spacing_a: f64,
    /// Common vehicle width (m).
    pub vehicle_width: f64,
    /// Road width (m).
    pub road_width: f64,
    /// Road length (m).
    pub road_length: f64,
    /// Maximum area occupancy tolerated by human-driven vehicles.
    pub ao_max_h: f64,
    /// Maximum area occupancy tolerated by automated vehicles.
    pub ao_max_a: f64,
}

impl Default for ModelParams {
    /// Baseline road and vehicle parameters. The vehicle width defaults to
    /// the rounded calibrated value; `calibrate_vehicle_width` recovers the
    /// exact one from a target equilibrium speed.
    fn default() -> Self {
        ModelParams {
            free_flow_speed_h: 80.0 * KMH,
            free_flow_speed_a: 60.0 * KMH,
            gamma_h: 2.5,
            gamma_a: 2.0,
            tau_h: 30.0,
            tau_a: 60.0,
            spacing_h: 8.0,
            spacing_a: 15.0,
            vehicle_width: 2.07,
            road_width: 6.5,
            road_length: 1000.0,
            ao_max_h: 0.9,
            ao_max_a: 0.85,
        }
    }
}

impl ModelParams {
    /// Checks positivity and range invariants on every field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("free_flow_speed_h", self.free_flow_speed_h),
            ("free_flow_speed_a", self.free_flow_speed_a),
            ("gamma_h", self.gamma_h),
            ("gamma_a", self.gamma_a),
            ("tau_h", self.tau_h),
            ("tau_a", self.tau_a),
            ("spacing_h", self.spacing_h),
            ("spacing_a", self.spacing_a),
            ("vehicle_width", self.vehicle_width),
            ("road_width", self.road_width),
            ("road_length", self.road_length),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Validation(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        for (name, value) in [("ao_max_h", self.ao_max_h), ("ao_max_a", self.ao_max_a)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(Error::Validation(format!(
                    "{name} must lie in (0, 1], got {value}"
                )));
            }
        }
        Ok(())
    }

    fn free_flow_speed(&self, class: VehicleClass) -> f64 {
        match class {
            VehicleClass::Hv => self.free_flow_speed_h,
            VehicleClass::Av => self.free_flow_speed_a,
        }
    }

    fn gamma(&self, class: VehicleClass) -> f64 {
        match class {
            VehicleClass::Hv => self.gamma_h,
            VehicleClass::Av => self.gamma_a,
        }
    }

    fn ao_max(&self, class: VehicleClass) -> f64 {
        match class {
            VehicleClass::Hv => self.ao_max_h,
            VehicleClass::Av => self.ao_max_a,
        }
    }

    /// Occupancy contribution per unit density of each class:
    /// d * s_i / W.
    pub(crate) fn occupancy_coefs(&self) -> (f64, f64) {
        let scale = self.vehicle_width / self.road_width;
        (scale * self.spacing_h, scale * self.spacing_a)
    }
}

/// Fraction of road area covered by vehicle impact areas.
pub fn area_occupancy(rho_h: f64, rho_a: f64, params: &ModelParams) -> Result<f64> {
    if rho_h < 0.0 || rho_a < 0.0 {
        return Err(Error::Validation(format!(
            "densities must be nonnegative, got ({rho_h}, {rho_a})"
        )));
    }
    let (coef_h, coef_a) = params.occupancy_coefs();
    Ok(coef_h * rho_h + coef_a * rho_a)
}

/// Equilibrium speed of one class at the given area occupancy.
pub fn equilibrium_speed(ao: f64, class: VehicleClass, params: &ModelParams) -> Result<f64> {
    let ao_max = params.ao_max(class);
    if !(0.0..=ao_max).contains(&ao) {
        return Err(Error::Validation(format!(
            "area occupancy {ao} outside [0, {ao_max}] for {class:?}"
        )));
    }
    Ok(equilibrium_speed_unchecked(ao, class, params))
}

/// Fundamental diagram without the domain check; negative above ao_max.
pub(crate) fn equilibrium_speed_unchecked(ao: f64, class: VehicleClass, params: &ModelParams) -> f64 {
    let v = params.free_flow_speed(class);
    v * (1.0 - (ao / params.ao_max(class)).powf(params.gamma(class)))
}

/// Derivative of the fundamental diagram with respect to area occupancy.
fn equilibrium_speed_slope(ao: f64, class: VehicleClass, params: &ModelParams) -> f64 {
    let v = params.free_flow_speed(class);
    let gamma = params.gamma(class);
    let ao_max = params.ao_max(class);
    -v * gamma * (ao / ao_max).powf(gamma - 1.0) / ao_max
}

/// Equilibrium densities, speeds, flows, and area occupancy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub rho_h_star: f64,
    pub rho_a_star: f64,
    pub v_h_star: f64,
    pub v_a_star: f64,
    pub q_h_star: f64,
    pub q_a_star: f64,
    pub ao_star: f64,
}

/// Builds the equilibrium at the given densities (veh/m).
///
/// Rejects nonpositive densities and occupancies at or above the tighter
/// class limit, where at least one equilibrium speed would be nonpositive.
pub fn compute_equilibrium(
    rho_h_star: f64,
    rho_a_star: f64,
    params: &ModelParams,
) -> Result<Equilibrium> {
    params.validate()?;
    if !(rho_h_star > 0.0) || !(rho_a_star > 0.0) {
        return Err(Error::Validation(format!(
            "equilibrium densities must be positive, got ({rho_h_star}, {rho_a_star})"
        )));
    }
    let ao_star = area_occupancy(rho_h_star, rho_a_star, params)?;
    let ao_limit = params.ao_max_h.min(params.ao_max_a);
    if ao_star >= ao_limit {
        return Err(Error::Validation(format!(
            "equilibrium area occupancy {ao_star:.4} at or above the class limit {ao_limit}"
        )));
    }
    let v_h_star = equilibrium_speed(ao_star, VehicleClass::Hv, params)?;
    let v_a_star = equilibrium_speed(ao_star, VehicleClass::Av, params)?;
    Ok(Equilibrium {
        rho_h_star,
        rho_a_star,
        v_h_star,
        v_a_star,
        q_h_star: rho_h_star * v_h_star,
        q_a_star: rho_a_star * v_a_star,
        ao_star,
    })
}

/// Recovers the vehicle width that makes the target equilibrium speed of
/// human-driven vehicles hold at the given densities.
///
/// Bisection on d in (0, 10]; the map d -> V_e,h(AO(d)) is strictly
/// decreasing, so the root is unique when it exists.
pub fn calibrate_vehicle_width(
    target_v_h_star: f64,
    rho_h_star: f64,
    rho_a_star: f64,
    params: &ModelParams,
) -> Result<f64> {
    if !(target_v_h_star > 0.0 && target_v_h_star < params.free_flow_speed_h) {
        return Err(Error::Validation(format!(
            "calibration target must lie in (0, {}), got {target_v_h_star}",
            params.free_flow_speed_h
        )));
    }
    if !(rho_h_star > 0.0) || !(rho_a_star > 0.0) {
        return Err(Error::Validation(
            "calibration requires positive densities".into(),
        ));
    }
    let speed_at = |d: f64| -> f64 {
        let mut trial = *params;
        trial.vehicle_width = d;
        let ao = area_occupancy(rho_h_star, rho_a_star, &trial).expect("nonnegative densities");
        equilibrium_speed_unchecked(ao, VehicleClass::Hv, &trial)
    };
    let (mut lo, mut hi) = (1e-12, 10.0);
    if speed_at(lo) < target_v_h_star || speed_at(hi) > target_v_h_star {
        return Err(Error::Validation(format!(
            "no vehicle width in (0, 10] reaches {target_v_h_star} m/s at these densities"
        )));
    }
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if speed_at(mid) > target_v_h_star {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Quasilinear flux Jacobian and source Jacobian at an equilibrium,
/// state order z = (rho_h, v_h, rho_a, v_a).
fn jacobians(eq: &Equilibrium, params: &ModelParams) -> (Matrix4<f64>, Matrix4<f64>) {
    let (coef_h, coef_a) = params.occupancy_coefs();
    let slope_h = equilibrium_speed_slope(eq.ao_star, VehicleClass::Hv, params);
    let slope_a = equilibrium_speed_slope(eq.ao_star, VehicleClass::Av, params);
    let (vhh, vha) = (slope_h * coef_h, slope_h * coef_a);
    let (vah, vaa) = (slope_a * coef_h, slope_a * coef_a);
    let (rh, vh, ra, va) = (eq.rho_h_star, eq.v_h_star, eq.rho_a_star, eq.v_a_star);
    let a = Matrix4::new(
        vh,
        rh,
        0.0,
        0.0,
        0.0,
        vh + rh * vhh,
        (va - vh) * vha,
        ra * vha,
        0.0,
        0.0,
        va,
        ra,
        (vh - va) * vah,
        rh * vah,
        0.0,
        va + ra * vaa,
    );
    let j = Matrix4::new(
        0.0,
        0.0,
        0.0,
        0.0,
        vhh / params.tau_h,
        -1.0 / params.tau_h,
        vha / params.tau_h,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        vah / params.tau_a,
        0.0,
        vaa / params.tau_a,
        -1.0 / params.tau_a,
    );
    (a, j)
}

/// Which characteristic polynomial factor an eigenvalue came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Root {
    ClassH,
    ClassA,
    Quad,
}

/// The four characteristic speeds with provenance, sorted ascending.
///
/// The class speeds v_h and v_a are always eigenvalues; the remaining two
/// solve the quadratic from the speed-coupling submatrix.
fn char_speeds(flux: &Matrix4<f64>, vh: f64, va: f64) -> Result<[(f64, Root); 4]> {
    let b = flux[(1, 1)] + flux[(3, 3)];
    let c = flux[(1, 1)] * flux[(3, 3)] - flux[(1, 3)] * flux[(3, 1)];
    let disc = b * b - 4.0 * c;
    if disc <= 0.0 {
        return Err(Error::Numerics(
            "complex characteristic speeds: system not strictly hyperbolic here".into(),
        ));
    }
    let sq = disc.sqrt();
    let mut roots = [
        (vh, Root::ClassH),
        (va, Root::ClassA),
        (0.5 * (b + sq), Root::Quad),
        (0.5 * (b - sq), Root::Quad),
    ];
    roots.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite speeds"));
    let scale = roots.iter().map(|r| r.0.abs()).fold(0.0, f64::max);
    for pair in roots.windows(2) {
        if pair[1].0 - pair[0].0 < 1e-9 * scale.max(1e-9) {
            return Err(Error::Numerics(
                "nearly repeated characteristic speeds: eigenbasis is ill-conditioned".into(),
            ));
        }
    }
    Ok(roots)
}

/// Right eigenvector of the flux Jacobian for a known eigenvalue.
///
/// Rows 1 and 3 of (A - lambda I) nu = 0 reduce, after eliminating nu2 and
/// nu4 through rows 0 and 2, to two scalar bracket equations in (nu1, nu3);
/// the factor structure selects which bracket binds for each root.
fn eigenvector(
    lam: f64,
    root: Root,
    eq: &Equilibrium,
    slopes: (f64, f64, f64, f64),
) -> Vector4<f64> {
    let (vhh, vha, vah, vaa) = slopes;
    let (rh, vh, ra, va) = (eq.rho_h_star, eq.v_h_star, eq.rho_a_star, eq.v_a_star);
    let row_p = (vhh - (lam - vh) / rh, vha);
    let row_s = (vah, vaa - (lam - va) / ra);
    let pick = |row: (f64, f64)| (row.1, -row.0);
    let (nu1, nu3) = match root {
        Root::ClassH => pick(row_s),
        Root::ClassA => pick(row_p),
        Root::Quad => {
            let mag_p = row_p.0.abs().max(row_p.1.abs());
            let mag_s = row_s.0.abs().max(row_s.1.abs());
            if mag_p >= mag_s {
                pick(row_p)
            } else {
                pick(row_s)
            }
        }
    };
    let mut nu = Vector4::new(nu1, (lam - vh) * nu1 / rh, nu3, (lam - va) * nu3 / ra);
    nu /= nu.norm();
    let lead = nu.iter().cloned().fold(0.0f64, |acc, v| {
        if v.abs() > acc.abs() {
            v
        } else {
            acc
        }
    });
    if lead < 0.0 {
        nu = -nu;
    }
    nu
}

/// Linearized boundary-control system in Riemann coordinates.
///
/// Carries the ordered characteristic speeds, the coupling fields Sigma
/// sampled on the shared spatial grid, the boundary reflection data Q and R,
/// the coordinate transforms, and the outlet actuation scaling.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    /// Characteristic speeds (lambda_1, lambda_2, lambda_3, lambda_4) with
    /// lambda_1 <= lambda_2 <= lambda_3 and lambda_4 the algebraic minimum.
    pub lambda: [f64; 4],
    /// The three rightward speeds.
    pub lambda_plus: [f64; 3],
    /// Magnitude of the leftward speed, -lambda_4.
    pub lambda_minus: f64,
    /// Coupling among the rightward states, sampled at the grid nodes.
    pub sigma_pp: Vec<Matrix3<f64>>,
    /// Coupling of the leftward state into the rightward equations.
    pub sigma_pm: Vec<Vector3<f64>>,
    /// Coupling of the rightward states into the leftward equation.
    pub sigma_mp: Vec<Vector3<f64>>,
    /// Inlet reflection: w_plus(0) = q_bc * w4(0).
    pub q_bc: Vector3<f64>,
    /// Outlet reflection: w4(L) = r_bc . w_plus(L) + control input.
    pub r_bc: Vector3<f64>,
    /// Change of coordinates from physical deviations to eigenbasis states.
    pub transform_t: Matrix4<f64>,
    /// Inverse of `transform_t`.
    pub transform_t_inv: Matrix4<f64>,
    /// Flux-weighting constants of the eigenvectors at the outlet.
    pub kappa: Vector4<f64>,
    /// Maps the physical outlet flow actuation to the w4 boundary value.
    pub control_scale: f64,
    /// Node count minus one of the shared spatial grid.
    pub grid_n: usize,
    /// Equilibrium the linearization was taken at.
    pub eq: Equilibrium,
    /// Physical parameters the linearization was taken at.
    pub params: ModelParams,
    /// Exponential scaling rates phi_i = J_hat_ii / lambda_i.
    phi: [f64; 4],
    /// Source Jacobian in the eigenbasis.
    j_hat: Matrix4<f64>,
}

/// Builds the linearized Riemann-coordinate system at an equilibrium,
/// sampling the coupling fields on `grid_n + 1` nodes over [0, L].
pub fn linearize(
    eq: &Equilibrium,
    params: &ModelParams,
    grid_n: usize,
) -> Result<LinearizedSystem> {
    if grid_n == 0 {
        return Err(Error::Validation("grid_n must be at least 1".into()));
    }
    let (flux, source) = jacobians(eq, params);
    let roots = char_speeds(&flux, eq.v_h_star, eq.v_a_star)?;
    // storage order: the three largest ascending, then the minimum
    let order = [roots[1], roots[2], roots[3], roots[0]];
    let lambda = [order[0].0, order[1].0, order[2].0, order[3].0];

    let (coef_h, coef_a) = params.occupancy_coefs();
    let slope_h = equilibrium_speed_slope(eq.ao_star, VehicleClass::Hv, params);
    let slope_a = equilibrium_speed_slope(eq.ao_star, VehicleClass::Av, params);
    let slopes = (
        slope_h * coef_h,
        slope_h * coef_a,
        slope_a * coef_h,
        slope_a * coef_a,
    );
    let mut basis = Matrix4::zeros();
    for (j, (lam, root)) in order.iter().enumerate() {
        basis.set_column(j, &eigenvector(*lam, *root, eq, slopes));
    }
    let basis_inv = basis.try_inverse().ok_or_else(|| {
        Error::Numerics("eigenbasis is singular: defective linearization".into())
    })?;
    let j_hat = basis_inv * source * basis;
    let mut phi = [0.0; 4];
    for i in 0..4 {
        phi[i] = j_hat[(i, i)] / lambda[i];
    }

    // inlet condition: zero density deviations and zero total flow deviation
    let (rh, vh, ra, va) = (
        eq.rho_h_star,
        eq.v_h_star,
        eq.rho_a_star,
        eq.v_a_star,
    );
    let constraints = nalgebra::Matrix3x4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        vh, rh, va, ra,
    );
    let g = constraints * basis;
    let gp = Matrix3::from_columns(&[
        g.column(0).into_owned(),
        g.column(1).into_owned(),
        g.column(2).into_owned(),
    ]);
    let g4 = g.column(3).into_owned();
    let q_bc = gp
        .lu()
        .solve(&(-g4))
        .ok_or_else(|| Error::Numerics("inlet boundary system is singular".into()))?;

    // outlet condition: total flow deviation carries the actuation
    let flow_row = Vector4::new(vh, rh, va, ra);
    let kappa = basis.transpose() * flow_row;
    if kappa[3].abs() < 1e-14 {
        return Err(Error::Numerics(
            "outlet actuation is degenerate: kappa_4 vanishes".into(),
        ));
    }
    let length = params.road_length;
    let mut r_bc = Vector3::zeros();
    for j in 0..3 {
        r_bc[j] = -(kappa[j] / kappa[3]) * ((phi[j] - phi[3]) * length).exp();
    }
    let control_scale = (-phi[3] * length).exp() / kappa[3];

    let mut sys = LinearizedSystem {
        lambda,
        lambda_plus: [lambda[0], lambda[1], lambda[2]],
        lambda_minus: -lambda[3],
        sigma_pp: Vec::new(),
        sigma_pm: Vec::new(),
        sigma_mp: Vec::new(),
        q_bc,
        r_bc,
        transform_t: basis_inv,
        transform_t_inv: basis,
        kappa,
        control_scale,
        grid_n,
        eq: *eq,
        params: *params,
        phi,
        j_hat,
    };
    for node in 0..=grid_n {
        let x = length * node as f64 / grid_n as f64;
        let full = sys.sigma_at(x);
        sys.sigma_pp
            .push(full.fixed_view::<3, 3>(0, 0).into_owned());
        sys.sigma_pm
            .push(full.fixed_view::<3, 1>(0, 3).into_owned());
        sys.sigma_mp
            .push(full.fixed_view::<1, 3>(3, 0).transpose());
    }
    Ok(sys)
}

impl LinearizedSystem {
    /// Coupling matrix Sigma(x) with zero diagonal, evaluated exactly.
    pub fn sigma_at(&self, x: f64) -> Matrix4<f64> {
        let mut sigma = Matrix4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    sigma[(i, j)] = self.j_hat[(i, j)] * ((self.phi[j] - self.phi[i]) * x).exp();
                }
            }
        }
        sigma
    }

    /// Maps a physical deviation vector to Riemann coordinates at position x.
    pub fn to_riemann(&self, x: f64, z: &Vector4<f64>) -> Vector4<f64> {
        let y = self.transform_t * z;
        Vector4::new(
            (-self.phi[0] * x).exp() * y[0],
            (-self.phi[1] * x).exp() * y[1],
            (-self.phi[2] * x).exp() * y[2],
            (-self.phi[3] * x).exp() * y[3],
        )
    }

    /// Maps Riemann coordinates back to physical deviations at position x.
    pub fn from_riemann(&self, x: f64, w: &Vector4<f64>) -> Vector4<f64> {
        let y = Vector4::new(
            (self.phi[0] * x).exp() * w[0],
            (self.phi[1] * x).exp() * w[1],
            (self.phi[2] * x).exp() * w[2],
            (self.phi[3] * x).exp() * w[3],
        );
        self.transform_t_inv * y
    }

    /// Clone with all coupling removed, keeping speeds and boundary data.
    #[cfg(test)]
    pub(crate) fn with_zero_coupling(&self) -> LinearizedSystem {
        self.with_coupling_matrix(Matrix4::zeros())
    }

    /// Clone with a substituted eigenbasis source matrix, for exercising
    /// coupling paths the calibrated model leaves structurally empty.
    #[cfg(test)]
    pub(crate) fn with_coupling_matrix(&self, j_hat: Matrix4<f64>) -> LinearizedSystem {
        let mut sys = self.clone();
        sys.j_hat = j_hat;
        for i in 0..4 {
            sys.phi[i] = j_hat[(i, i)] / sys.lambda[i];
        }
        let length = sys.params.road_length;
        sys.sigma_pp.clear();
        sys.sigma_pm.clear();
        sys.sigma_mp.clear();
        for node in 0..=sys.grid_n {
            let x = length * node as f64 / sys.grid_n as f64;
            let full = sys.sigma_at(x);
            sys.sigma_pp
                .push(full.fixed_view::<3, 3>(0, 0).into_owned());
            sys.sigma_pm
                .push(full.fixed_view::<3, 1>(0, 3).into_owned());
            sys.sigma_mp
                .push(full.fixed_view::<1, 3>(3, 0).transpose());
        }
        sys
    }
}

/// Traffic regime at an equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    pub tag: RegimeTag,
    pub lambda4: f64,
}

/// Free flow carries all information downstream; congestion sends one
/// characteristic upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeTag {
    Free,
    Congested,
}

/// Classifies the regime from the sign of the smallest characteristic speed.
pub fn classify_regime(sys: &LinearizedSystem) -> Regime {
    let lambda4 = sys.lambda[3];
    Regime {
        tag: if lambda4 < 0.0 {
            RegimeTag::Congested
        } else {
            RegimeTag::Free
        },
        lambda4,
    }
}

/// One cell of a regime map; `None` marks densities with no feasible
/// equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeCell {
    pub rho_h: f64,
    pub rho_a: f64,
    pub regime: Option<Regime>,
}

/// Classifies every (rho_h, rho_a) pair of the density grids, row-major in
/// rho_h. Infeasible cells are tagged, never errors.
pub fn regime_map(
    rho_h_grid: &[f64],
    rho_a_grid: &[f64],
    params: &ModelParams,
) -> Result<Vec<RegimeCell>> {
    params.validate()?;
    let mut cells = Vec::with_capacity(rho_h_grid.len() * rho_a_grid.len());
    for &rho_h in rho_h_grid {
        for &rho_a in rho_a_grid {
            let regime = cell_regime(rho_h, rho_a, params);
            cells.push(RegimeCell {
                rho_h,
                rho_a,
                regime,
            });
        }
    }
    Ok(cells)
}

fn cell_regime(rho_h: f64, rho_a: f64, params: &ModelParams) -> Option<Regime> {
    let eq = compute_equilibrium(rho_h, rho_a, params).ok()?;
    let (flux, _) = jacobians(&eq, params);
    let roots = char_speeds(&flux, eq.v_h_star, eq.v_a_star).ok()?;
    let lambda4 = roots[0].0;
    Some(Regime {
        tag: if lambda4 < 0.0 {
            RegimeTag::Congested
        } else {
            RegimeTag::Free
        },
        lambda4,
    })
}
