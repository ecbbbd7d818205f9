//! Backstepping kernel solver on the triangular domain 0 <= xi <= x <= L,
//! the Volterra transforms between plant and target coordinates, and the
//! boundary-feedback quadrature built from the inverse kernels.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::LinearizedSystem;

/// Scalar kernel field sampled on the full (grid_n + 1)^2 node square;
/// entries above the diagonal stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2d {
    n: usize,
    data: Vec<f64>,
}

impl Kernel2d {
    pub fn zeros(grid_n: usize) -> Kernel2d {
        Kernel2d {
            n: grid_n,
            data: vec![0.0; (grid_n + 1) * (grid_n + 1)],
        }
    }

    pub fn grid_n(&self) -> usize {
        self.n
    }

    /// Value at node (x index `p`, xi index `q`).
    #[inline]
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.data[p * (self.n + 1) + q]
    }

    #[inline]
    pub fn set(&mut self, p: usize, q: usize, value: f64) {
        self.data[p * (self.n + 1) + q] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn sup_diff(&self, other: &Kernel2d) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    fn from_values(grid_n: usize, data: Vec<f64>) -> Option<Kernel2d> {
        if data.len() == (grid_n + 1) * (grid_n + 1) {
            Some(Kernel2d { n: grid_n, data })
        } else {
            None
        }
    }
}

/// Successive-approximation controls for the kernel solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Sup-norm tolerance on successive iterates.
    pub tolerance: f64,
    /// Iteration cap before the solver reports failure.
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

/// Solved control kernels K = (k1, k2, k3), M and inverse kernels
/// L = (l1, l2, l3), N on a shared triangular grid.
#[derive(Debug, Clone)]
pub struct KernelSet {
    /// Cells per axis; fields carry grid_n + 1 nodes per axis.
    pub grid_n: usize,
    /// Node spacing in meters.
    pub h: f64,
    pub k1: Kernel2d,
    pub k2: Kernel2d,
    pub k3: Kernel2d,
    pub m_kernel: Kernel2d,
    pub l1: Kernel2d,
    pub l2: Kernel2d,
    pub l3: Kernel2d,
    pub n_kernel: Kernel2d,
    /// Sup-norm finite-difference residual of the kernel equations.
    pub residual_norm: f64,
    /// Iterations the fixed-point solver needed.
    pub picard_iterations: usize,
}

/// Max and root-mean-square finite-difference residual of one field.
#[derive(Debug, Clone, Copy)]
pub struct FieldResidual {
    pub max: f64,
    pub l2: f64,
}

/// Finite-difference residuals of the kernel equations, per field, plus the
/// worst boundary-condition defect.
#[derive(Debug, Clone, Copy)]
pub struct ResidualReport {
    pub k: [FieldResidual; 3],
    pub m: FieldResidual,
    pub boundary_max: f64,
}

impl ResidualReport {
    pub fn max_residual(&self) -> f64 {
        self.k
            .iter()
            .map(|f| f.max)
            .fold(self.m.max.max(self.boundary_max), f64::max)
    }
}

/// Linear interpolation along diagonal band `j` of a kernel field: band
/// nodes sit at (q + j, q), and `q_frac` is the fractional q coordinate.
fn band_interp(field: &Kernel2d, j: usize, q_frac: f64) -> f64 {
    let q_max = field.n - j;
    if q_max == 0 {
        return field.get(j, 0);
    }
    let qp = q_frac.clamp(0.0, q_max as f64);
    let mut q0 = qp.floor() as usize;
    if q0 > q_max - 1 {
        q0 = q_max - 1;
    }
    let frac = qp - q0 as f64;
    let v0 = field.get(q0 + j, q0);
    let v1 = field.get(q0 + 1 + j, q0 + 1);
    (1.0 - frac) * v0 + frac * v1
}

fn check_solver_inputs(
    sys: &LinearizedSystem,
    grid_n: usize,
    options: &SolverOptions,
) -> Result<f64> {
    if grid_n == 0 {
        return Err(Error::Validation(
            "kernel grid needs at least one cell".into(),
        ));
    }
    if sys.lambda[3] >= 0.0 {
        return Err(Error::Validation(
            "backstepping kernels require the congested regime (lambda_4 < 0)".into(),
        ));
    }
    if !(options.tolerance > 0.0) || options.max_iterations == 0 {
        return Err(Error::Validation(
            "solver tolerance and iteration cap must be positive".into(),
        ));
    }
    Ok(sys.params.road_length / grid_n as f64)
}

/// One fixed-point pass for the control kernels; `fresh` receives the
/// updated fields.
fn control_kernel_pass(
    sys: &LinearizedSystem,
    grid_n: usize,
    h: f64,
    k: &[Kernel2d; 3],
    m: &Kernel2d,
) -> ([Kernel2d; 3], Kernel2d) {
    let n = grid_n;
    let lam = sys.lambda_plus;
    let lm = sys.lambda_minus;
    let mut k_next = [Kernel2d::zeros(n), Kernel2d::zeros(n), Kernel2d::zeros(n)];
    let mut m_next = Kernel2d::zeros(n);

    for i in 0..3 {
        let ci = lm / (lm + lam[i]);
        for b in 0..=n {
            for q in 0..=(n - b) {
                let x_diag = h * (q as f64 + b as f64 * (1.0 - ci));
                let diag_val = -sys.sigma_at(x_diag)[(3, i)] / (lam[i] + lm);
                if b == 0 {
                    k_next[i].set(q, q, diag_val);
                    continue;
                }
                let mut acc = 0.0;
                for j in 0..=b {
                    let q_frac = q as f64 + (b - j) as f64 * (1.0 - ci);
                    let sigma = sys.sigma_at(h * q_frac);
                    let mut forcing = 0.0;
                    for (jp, field) in k.iter().enumerate() {
                        forcing += band_interp(field, j, q_frac) * sigma[(jp, i)];
                    }
                    forcing += band_interp(m, j, q_frac) * sigma[(3, i)];
                    let weight = if j == 0 || j == b { 0.5 } else { 1.0 };
                    acc += weight * forcing;
                }
                k_next[i].set(q + b, q, diag_val + acc * h / (lm + lam[i]));
            }
        }
    }

    // M rides 45-degree characteristics from its xi = 0 data, which couples
    // back through the freshly updated K row.
    let mut m_edge = vec![0.0; n + 1];
    for (p, edge) in m_edge.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..3 {
            s += k_next[i].get(p, 0) * lam[i] * sys.q_bc[i];
        }
        *edge = s / lm;
    }
    for b in 0..=n {
        for q in 0..=(n - b) {
            if q == 0 {
                m_next.set(b, 0, m_edge[b]);
                continue;
            }
            let mut acc = 0.0;
            for t in 0..=q {
                let sigma = sys.sigma_at(h * t as f64);
                let mut forcing = 0.0;
                for (jp, field) in k_next.iter().enumerate() {
                    forcing += field.get(b + t, t) * sigma[(jp, 3)];
                }
                let weight = if t == 0 || t == q { 0.5 } else { 1.0 };
                acc += weight * forcing;
            }
            m_next.set(q + b, q, m_edge[b] + acc * h / lm);
        }
    }
    (k_next, m_next)
}

fn solve_control_fields(
    sys: &LinearizedSystem,
    grid_n: usize,
    h: f64,
    options: &SolverOptions,
) -> Result<([Kernel2d; 3], Kernel2d, usize)> {
    let mut k = [
        Kernel2d::zeros(grid_n),
        Kernel2d::zeros(grid_n),
        Kernel2d::zeros(grid_n),
    ];
    let mut m = Kernel2d::zeros(grid_n);
    let mut last_diff = f64::INFINITY;
    for it in 0..options.max_iterations {
        let (k_next, m_next) = control_kernel_pass(sys, grid_n, h, &k, &m);
        let diff = if it == 0 {
            f64::INFINITY
        } else {
            let dk = (0..3).fold(0.0f64, |acc, i| acc.max(k_next[i].sup_diff(&k[i])));
            dk.max(m_next.sup_diff(&m))
        };
        k = k_next;
        m = m_next;
        last_diff = diff;
        if diff < options.tolerance {
            return Ok((k, m, it + 1));
        }
    }
    Err(Error::Numerics(format!(
        "control kernel iteration did not converge in {} passes (last update {:.3e})",
        options.max_iterations, last_diff
    )))
}

fn solve_inverse_fields(
    k: &[Kernel2d; 3],
    m: &Kernel2d,
    grid_n: usize,
    h: f64,
) -> ([Kernel2d; 3], Kernel2d) {
    let n = grid_n;
    let mut n_kernel = Kernel2d::zeros(n);
    for p in 0..=n {
        n_kernel.set(p, p, m.get(p, p));
        for q in (0..p).rev() {
            let mut acc = 0.0;
            for s in (q + 1)..=p {
                let weight = if s == p { 0.5 } else { 1.0 };
                acc += weight * n_kernel.get(p, s) * m.get(s, q);
            }
            let denom = 1.0 - 0.5 * h * m.get(q, q);
            n_kernel.set(p, q, (m.get(p, q) + acc * h) / denom);
        }
    }
    let mut l = [Kernel2d::zeros(n), Kernel2d::zeros(n), Kernel2d::zeros(n)];
    for i in 0..3 {
        for p in 0..=n {
            for q in 0..=p {
                let mut acc = 0.0;
                for s in q..=p {
                    let weight = if s == q || s == p { 0.5 } else { 1.0 };
                    acc += weight * n_kernel.get(p, s) * k[i].get(s, q);
                }
                l[i].set(p, q, k[i].get(p, q) + acc * h);
            }
        }
    }
    (l, n_kernel)
}

impl KernelSet {
    /// Solves the control and inverse kernels for `sys` on a `grid_n`-cell
    /// triangular grid by successive approximation along characteristics.
    pub fn solve(
        sys: &LinearizedSystem,
        grid_n: usize,
        options: &SolverOptions,
    ) -> Result<KernelSet> {
        let h = check_solver_inputs(sys, grid_n, options)?;
        let (k, m_kernel, picard_iterations) = solve_control_fields(sys, grid_n, h, options)?;
        let (l, n_kernel) = solve_inverse_fields(&k, &m_kernel, grid_n, h);
        let [k1, k2, k3] = k;
        let [l1, l2, l3] = l;
        let mut set = KernelSet {
            grid_n,
            h,
            k1,
            k2,
            k3,
            m_kernel,
            l1,
            l2,
            l3,
            n_kernel,
            residual_norm: 0.0,
            picard_iterations,
        };
        set.residual_norm = kernel_residual(&set, sys).max_residual();
        Ok(set)
    }

    /// Forward kernel component i (0-based).
    pub fn k(&self, i: usize) -> &Kernel2d {
        match i {
            0 => &self.k1,
            1 => &self.k2,
            2 => &self.k3,
            _ => panic!("kernel component index {i} out of range"),
        }
    }

    /// Inverse kernel component i (0-based).
    pub fn l(&self, i: usize) -> &Kernel2d {
        match i {
            0 => &self.l1,
            1 => &self.l2,
            2 => &self.l3,
            _ => panic!("kernel component index {i} out of range"),
        }
    }

    fn check_state(&self, w_plus: &[Vec<f64>; 3], w_minus: &[f64]) -> Result<()> {
        let nodes = self.grid_n + 1;
        for field in w_plus.iter() {
            if field.len() != nodes {
                return Err(Error::Validation(format!(
                    "state carries {} nodes but kernels expect {}",
                    field.len(),
                    nodes
                )));
            }
        }
        if w_minus.len() != nodes {
            return Err(Error::Validation(format!(
                "state carries {} nodes but kernels expect {}",
                w_minus.len(),
                nodes
            )));
        }
        Ok(())
    }

    /// Maps a plant state to target coordinates: alpha = w_plus unchanged,
    /// beta = w_minus minus the Volterra integral of (K w_plus + M w_minus).
    pub fn forward_transform(
        &self,
        w_plus: &[Vec<f64>; 3],
        w_minus: &[f64],
    ) -> Result<([Vec<f64>; 3], Vec<f64>)> {
        self.check_state(w_plus, w_minus)?;
        let nodes = self.grid_n + 1;
        let mut beta = vec![0.0; nodes];
        beta[0] = w_minus[0];
        for p in 1..nodes {
            let mut s = 0.0;
            for i in 0..3 {
                let field = self.k(i);
                let w = &w_plus[i];
                for q in 0..=p {
                    let weight = if q == 0 || q == p { 0.5 } else { 1.0 };
                    s += weight * field.get(p, q) * w[q];
                }
            }
            for q in 0..=p {
                let weight = if q == 0 || q == p { 0.5 } else { 1.0 };
                s += weight * self.m_kernel.get(p, q) * w_minus[q];
            }
            beta[p] = w_minus[p] - self.h * s;
        }
        Ok((w_plus.clone(), beta))
    }

    /// Maps a target state back to plant coordinates through the inverse
    /// kernels; exact mirror of `forward_transform`.
    pub fn inverse_transform(
        &self,
        alpha: &[Vec<f64>; 3],
        beta: &[f64],
    ) -> Result<([Vec<f64>; 3], Vec<f64>)> {
        self.check_state(alpha, beta)?;
        let nodes = self.grid_n + 1;
        let mut w_minus = vec![0.0; nodes];
        w_minus[0] = beta[0];
        for p in 1..nodes {
            let mut s = 0.0;
            for i in 0..3 {
                let field = self.l(i);
                let a = &alpha[i];
                for q in 0..=p {
                    let weight = if q == 0 || q == p { 0.5 } else { 1.0 };
                    s += weight * field.get(p, q) * a[q];
                }
            }
            for q in 0..=p {
                let weight = if q == 0 || q == p { 0.5 } else { 1.0 };
                s += weight * self.n_kernel.get(p, q) * beta[q];
            }
            w_minus[p] = beta[p] + self.h * s;
        }
        Ok((alpha.clone(), w_minus))
    }

    /// Boundary feedback evaluated from an already-transformed state; alpha
    /// doubles as w_plus in the reflection term.
    pub fn control_from_target(
        &self,
        sys: &LinearizedSystem,
        alpha: &[Vec<f64>; 3],
        beta: &[f64],
    ) -> Result<f64> {
        self.check_state(alpha, beta)?;
        let n = self.grid_n;
        let mut s = 0.0;
        for i in 0..3 {
            let field = self.l(i);
            let a = &alpha[i];
            for q in 0..=n {
                let weight = if q == 0 || q == n { 0.5 } else { 1.0 };
                s += weight * field.get(n, q) * a[q];
            }
        }
        for q in 0..=n {
            let weight = if q == 0 || q == n { 0.5 } else { 1.0 };
            s += weight * self.n_kernel.get(n, q) * beta[q];
        }
        let mut reflection = 0.0;
        for i in 0..3 {
            reflection += sys.r_bc[i] * alpha[i][n];
        }
        Ok(self.h * s - reflection)
    }

    /// Continuous boundary feedback for a plant state.
    pub fn control_value(
        &self,
        sys: &LinearizedSystem,
        w_plus: &[Vec<f64>; 3],
        w_minus: &[f64],
    ) -> Result<f64> {
        let (alpha, beta) = self.forward_transform(w_plus, w_minus)?;
        self.control_from_target(sys, &alpha, &beta)
    }
}

/// Centered-difference residual of the control kernel equations on interior
/// triangle nodes, plus the worst defect of the diagonal and edge data.
pub fn kernel_residual(set: &KernelSet, sys: &LinearizedSystem) -> ResidualReport {
    let n = set.grid_n;
    let h = set.h;
    let lam = sys.lambda_plus;
    let lm = sys.lambda_minus;
    let sigma: Vec<_> = (0..=n).map(|q| sys.sigma_at(h * q as f64)).collect();

    let zero = FieldResidual { max: 0.0, l2: 0.0 };
    let mut report = ResidualReport {
        k: [zero; 3],
        m: zero,
        boundary_max: 0.0,
    };

    if n >= 4 {
        for i in 0..3 {
            let field = set.k(i);
            let mut worst = 0.0f64;
            let mut sum_sq = 0.0;
            let mut count = 0usize;
            for p in 2..(n - 1) {
                for q in 1..(p.saturating_sub(1)) {
                    let kx = (field.get(p + 1, q) - field.get(p - 1, q)) / (2.0 * h);
                    let kq = (field.get(p, q + 1) - field.get(p, q - 1)) / (2.0 * h);
                    let mut rhs = 0.0;
                    for j in 0..3 {
                        rhs += set.k(j).get(p, q) * sigma[q][(j, i)];
                    }
                    rhs += set.m_kernel.get(p, q) * sigma[q][(3, i)];
                    let r = (lm * kx - lam[i] * kq - rhs).abs();
                    worst = worst.max(r);
                    sum_sq += r * r;
                    count += 1;
                }
            }
            report.k[i] = FieldResidual {
                max: worst,
                l2: if count > 0 {
                    (sum_sq / count as f64).sqrt()
                } else {
                    0.0
                },
            };
        }
        let mut worst = 0.0f64;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for p in 2..(n - 1) {
            for q in 1..(p.saturating_sub(1)) {
                let mx = (set.m_kernel.get(p + 1, q) - set.m_kernel.get(p - 1, q)) / (2.0 * h);
                let mq = (set.m_kernel.get(p, q + 1) - set.m_kernel.get(p, q - 1)) / (2.0 * h);
                let mut rhs = 0.0;
                for j in 0..3 {
                    rhs += set.k(j).get(p, q) * sigma[q][(j, 3)];
                }
                let r = (lm * (mx + mq) - rhs).abs();
                worst = worst.max(r);
                sum_sq += r * r;
                count += 1;
            }
        }
        report.m = FieldResidual {
            max: worst,
            l2: if count > 0 {
                (sum_sq / count as f64).sqrt()
            } else {
                0.0
            },
        };
    }

    let mut boundary = 0.0f64;
    for p in 0..=n {
        for i in 0..3 {
            let data = -sigma[p][(3, i)] / (lam[i] + lm);
            boundary = boundary.max((set.k(i).get(p, p) - data).abs());
        }
        let mut edge = 0.0;
        for i in 0..3 {
            edge += set.k(i).get(p, 0) * lam[i] * sys.q_bc[i];
        }
        boundary = boundary.max((set.m_kernel.get(p, 0) - edge / lm).abs());
    }
    report.boundary_max = boundary;
    report
}

/// Observer output-injection kernels Theta on the same triangular domain.
#[derive(Debug, Clone)]
pub struct ObserverKernels {
    pub grid_n: usize,
    pub h: f64,
    pub theta1: Kernel2d,
    pub theta2: Kernel2d,
    pub theta3: Kernel2d,
    pub theta_minus: Kernel2d,
    pub picard_iterations: usize,
}

impl ObserverKernels {
    /// Solves the observer kernel equations by the same successive
    /// approximation used for the control kernels.
    pub fn solve(
        sys: &LinearizedSystem,
        grid_n: usize,
        options: &SolverOptions,
    ) -> Result<ObserverKernels> {
        let h = check_solver_inputs(sys, grid_n, options)?;
        let n = grid_n;
        let lam = sys.lambda_plus;
        let lm = sys.lambda_minus;
        let mut tp = [Kernel2d::zeros(n), Kernel2d::zeros(n), Kernel2d::zeros(n)];
        let mut tm = Kernel2d::zeros(n);
        let mut last_diff = f64::INFINITY;
        for it in 0..options.max_iterations {
            let mut tp_next = [Kernel2d::zeros(n), Kernel2d::zeros(n), Kernel2d::zeros(n)];
            let mut tm_next = Kernel2d::zeros(n);
            for i in 0..3 {
                let ci = lam[i] / (lam[i] + lm);
                for b in 0..=n {
                    for q in 0..=(n - b) {
                        let x_diag =
                            h * ((lm * (q + b) as f64 + lam[i] * q as f64) / (lam[i] + lm));
                        let diag_val = sys.sigma_at(x_diag)[(i, 3)] / (lam[i] + lm);
                        if b == 0 {
                            tp_next[i].set(q, q, diag_val);
                            continue;
                        }
                        let mut acc = 0.0;
                        for j in 0..=b {
                            let q_frac = x_diag / h + j as f64 * ci - j as f64;
                            let sigma = sys.sigma_at(h * (q_frac + j as f64));
                            let mut forcing = 0.0;
                            for (jp, field) in tp.iter().enumerate() {
                                forcing += sigma[(i, jp)] * band_interp(field, j, q_frac);
                            }
                            forcing += sigma[(i, 3)] * band_interp(&tm, j, q_frac);
                            let weight = if j == 0 || j == b { 0.5 } else { 1.0 };
                            acc += weight * forcing;
                        }
                        tp_next[i].set(q + b, q, diag_val + acc * h / (lam[i] + lm));
                    }
                }
            }
            // Theta_minus carries its x = L data backward along 45-degree
            // lines, coupled through the freshly updated Theta rows.
            for b in 0..=n {
                for q in 0..=(n - b) {
                    let p = q + b;
                    let q_at_l = q + (n - p);
                    let mut end = 0.0;
                    for i in 0..3 {
                        end += sys.r_bc[i] * tp_next[i].get(n, q_at_l);
                    }
                    let steps = n - p;
                    let value = if steps == 0 {
                        end
                    } else {
                        let mut acc = 0.0;
                        for t in 0..=steps {
                            let sigma = sys.sigma_at(h * (p + t) as f64);
                            let mut g = 0.0;
                            for (i, field) in tp_next.iter().enumerate() {
                                g -= sigma[(3, i)] * field.get(p + t, q + t) / lm;
                            }
                            let weight = if t == 0 || t == steps { 0.5 } else { 1.0 };
                            acc += weight * g;
                        }
                        end - acc * h
                    };
                    tm_next.set(p, q, value);
                }
            }
            let diff = if it == 0 {
                f64::INFINITY
            } else {
                let dp = (0..3).fold(0.0f64, |acc, i| acc.max(tp_next[i].sup_diff(&tp[i])));
                dp.max(tm_next.sup_diff(&tm))
            };
            tp = tp_next;
            tm = tm_next;
            last_diff = diff;
            if diff < options.tolerance {
                let [theta1, theta2, theta3] = tp;
                return Ok(ObserverKernels {
                    grid_n,
                    h,
                    theta1,
                    theta2,
                    theta3,
                    theta_minus: tm,
                    picard_iterations: it + 1,
                });
            }
        }
        Err(Error::Numerics(format!(
            "observer kernel iteration did not converge in {} passes (last update {:.3e})",
            options.max_iterations, last_diff
        )))
    }

    /// Rightward kernel component i (0-based).
    pub fn theta(&self, i: usize) -> &Kernel2d {
        match i {
            0 => &self.theta1,
            1 => &self.theta2,
            2 => &self.theta3,
            _ => panic!("kernel component index {i} out of range"),
        }
    }
}

/// Sup-norm centered-difference residual of the observer kernel equations.
pub fn observer_residual(obs: &ObserverKernels, sys: &LinearizedSystem) -> f64 {
    let n = obs.grid_n;
    let h = obs.h;
    let lam = sys.lambda_plus;
    let lm = sys.lambda_minus;
    if n < 4 {
        return 0.0;
    }
    let sigma: Vec<_> = (0..=n).map(|p| sys.sigma_at(h * p as f64)).collect();
    let mut worst = 0.0f64;
    for i in 0..3 {
        let field = obs.theta(i);
        for p in 2..(n - 1) {
            for q in 1..(p.saturating_sub(1)) {
                let tx = (field.get(p + 1, q) - field.get(p - 1, q)) / (2.0 * h);
                let tq = (field.get(p, q + 1) - field.get(p, q - 1)) / (2.0 * h);
                let mut rhs = 0.0;
                for j in 0..3 {
                    rhs += sigma[p][(i, j)] * obs.theta(j).get(p, q);
                }
                rhs += sigma[p][(i, 3)] * obs.theta_minus.get(p, q);
                worst = worst.max((lam[i] * tx - lm * tq - rhs).abs());
            }
        }
    }
    for p in 2..(n - 1) {
        for q in 1..(p.saturating_sub(1)) {
            let tx = (obs.theta_minus.get(p + 1, q) - obs.theta_minus.get(p - 1, q)) / (2.0 * h);
            let tq = (obs.theta_minus.get(p, q + 1) - obs.theta_minus.get(p, q - 1)) / (2.0 * h);
            let mut rhs = 0.0;
            for j in 0..3 {
                rhs -= sigma[p][(3, j)] * obs.theta(j).get(p, q);
            }
            worst = worst.max((lm * (tx + tq) - rhs).abs());
        }
    }
    worst
}

const CONTROL_CACHE_MAGIC: &[u8; 8] = b"MXARZKC1";
const OBSERVER_CACHE_MAGIC: &[u8; 8] = b"MXARZKO1";

static CACHE_WRITE_SEQ: AtomicU64 = AtomicU64::new(0);

fn system_digest(tag: &[u8], sys: &LinearizedSystem, grid_n: usize, tolerance: f64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag);
    hasher.update((grid_n as u64).to_le_bytes());
    hasher.update(tolerance.to_le_bytes());
    hasher.update(sys.params.road_length.to_le_bytes());
    for v in sys.lambda {
        hasher.update(v.to_le_bytes());
    }
    for i in 0..3 {
        hasher.update(sys.q_bc[i].to_le_bytes());
        hasher.update(sys.r_bc[i].to_le_bytes());
    }
    let h = sys.params.road_length / grid_n as f64;
    for node in 0..=grid_n {
        let sigma = sys.sigma_at(h * node as f64);
        for i in 0..4 {
            for j in 0..4 {
                hasher.update(sigma[(i, j)].to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Content key for a cached control `KernelSet`.
pub fn kernel_cache_key(sys: &LinearizedSystem, grid_n: usize, tolerance: f64) -> String {
    system_digest(b"control-kernels", sys, grid_n, tolerance)
}

/// Content key for cached `ObserverKernels`.
pub fn observer_cache_key(sys: &LinearizedSystem, grid_n: usize, tolerance: f64) -> String {
    system_digest(b"observer-kernels", sys, grid_n, tolerance)
}

fn push_field(bytes: &mut Vec<u8>, field: &Kernel2d) {
    for v in field.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let seq = CACHE_WRITE_SEQ.fetch_add(1, Ordering::Relaxed);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}-{seq}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a solved kernel set to `path` (versioned header plus row-major
/// little-endian field dumps), atomically via a rename.
pub fn save_kernel_cache(path: &Path, set: &KernelSet) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CONTROL_CACHE_MAGIC);
    bytes.extend_from_slice(&(set.grid_n as u64).to_le_bytes());
    bytes.extend_from_slice(&set.h.to_le_bytes());
    bytes.extend_from_slice(&(set.picard_iterations as u64).to_le_bytes());
    bytes.extend_from_slice(&set.residual_norm.to_le_bytes());
    for field in [
        &set.k1,
        &set.k2,
        &set.k3,
        &set.m_kernel,
        &set.l1,
        &set.l2,
        &set.l3,
        &set.n_kernel,
    ] {
        push_field(&mut bytes, field);
    }
    write_atomic(path, &bytes)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(len)?;
        if end > self.bytes.len() {
            return None;
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Some(out)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn field(&mut self, grid_n: usize) -> Option<Kernel2d> {
        let count = (grid_n + 1) * (grid_n + 1);
        let raw = self.take(count * 8)?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Kernel2d::from_values(grid_n, data)
    }

    fn exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse_kernel_cache(bytes: &[u8]) -> Option<KernelSet> {
    let mut reader = ByteReader { bytes, pos: 0 };
    if reader.take(8)? != CONTROL_CACHE_MAGIC {
        return None;
    }
    let grid_n = usize::try_from(reader.u64()?).ok()?;
    let h = reader.f64()?;
    let picard_iterations = usize::try_from(reader.u64()?).ok()?;
    let residual_norm = reader.f64()?;
    let k1 = reader.field(grid_n)?;
    let k2 = reader.field(grid_n)?;
    let k3 = reader.field(grid_n)?;
    let m_kernel = reader.field(grid_n)?;
    let l1 = reader.field(grid_n)?;
    let l2 = reader.field(grid_n)?;
    let l3 = reader.field(grid_n)?;
    let n_kernel = reader.field(grid_n)?;
    if !reader.exhausted() {
        return None;
    }
    Some(KernelSet {
        grid_n,
        h,
        k1,
        k2,
        k3,
        m_kernel,
        l1,
        l2,
        l3,
        n_kernel,
        residual_norm,
        picard_iterations,
    })
}

/// Reads a kernel set cached by `save_kernel_cache`. A missing, truncated,
/// or foreign file reads as a cache miss, never an error.
pub fn load_kernel_cache(path: &Path) -> Result<Option<KernelSet>> {
    let bytes = match std::fs::read(path) {
        Ok(bytes) => bytes,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(err) => return Err(err.into()),
    };
    Ok(parse_kernel_cache(&bytes))
}

/// Observer-kernel counterpart of `save_kernel_cache`.
pub fn save_observer_cache(path: &Path, obs: &ObserverKernels) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(OBSERVER_CACHE_MAGIC);
    bytes.extend_from_slice(&(obs.grid_n as u64).to_le_bytes());
    bytes.extend_from_slice(&obs.h.to_le_bytes());
    bytes.extend_from_slice(&(obs.picard_iterations as u64).to_le_bytes());
    for field in [&obs.theta1, &obs.theta2, &obs.theta3, &obs.theta_minus] {
        push_field(&mut bytes, field);
    }
    write_atomic(path, &bytes)
}

/// Observer-kernel counterpart of `load_kernel_cache`.
pub fn load_observer_cache(path: &Path) -> Result<Option<ObserverKernels>> {
    let bytes = match std::fs::read(path) {
        Ok(bytes) => bytes,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(err) => return Err(err.into()),
    };
    let mut reader = ByteReader {
        bytes: &bytes,
        pos: 0,
    };
    let parsed = (|| {
        if reader.take(8)? != OBSERVER_CACHE_MAGIC {
            return None;
        }
        let grid_n = usize::try_from(reader.u64()?).ok()?;
        let h = reader.f64()?;
        let picard_iterations = usize::try_from(reader.u64()?).ok()?;
        let theta1 = reader.field(grid_n)?;
        let theta2 = reader.field(grid_n)?;
        let theta3 = reader.field(grid_n)?;
        let theta_minus = reader.field(grid_n)?;
        if !reader.exhausted() {
            return None;
        }
        Some(ObserverKernels {
            grid_n,
            h,
            theta1,
            theta2,
            theta3,
            theta_minus,
            picard_iterations,
        })
    })();
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{calibrate_vehicle_width, compute_equilibrium, linearize, ModelParams, KMH};
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn paper_system(grid_n: usize) -> LinearizedSystem {
        let mut p = ModelParams::default();
        p.vehicle_width =
            calibrate_vehicle_width(32.0 * KMH, 0.110, 0.095, &p).expect("calibration");
        let eq = compute_equilibrium(0.110, 0.095, &p).expect("equilibrium");
        linearize(&eq, &p, grid_n).expect("linearize")
    }

    fn solved(grid_n: usize, slot: &'static OnceLock<KernelSet>) -> &'static KernelSet {
        slot.get_or_init(|| {
            KernelSet::solve(&paper_system(grid_n), grid_n, &SolverOptions::default())
                .expect("kernel solve")
        })
    }

    static SET_50: OnceLock<KernelSet> = OnceLock::new();
    static SET_100: OnceLock<KernelSet> = OnceLock::new();
    static SET_200: OnceLock<KernelSet> = OnceLock::new();

    fn set_50() -> &'static KernelSet {
        solved(50, &SET_50)
    }

    fn set_100() -> &'static KernelSet {
        solved(100, &SET_100)
    }

    fn set_200() -> &'static KernelSet {
        solved(200, &SET_200)
    }

    fn random_state(rng: &mut ChaCha8Rng, nodes: usize) -> ([Vec<f64>; 3], Vec<f64>) {
        let mut draw = || (0..nodes).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let w_plus = [draw(), draw(), draw()];
        let w_minus = (0..nodes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (w_plus, w_minus)
    }

    fn state_l2(w_plus: &[Vec<f64>; 3], w_minus: &[f64]) -> f64 {
        let mut sum = 0.0;
        for field in w_plus.iter().map(Vec::as_slice).chain([w_minus]) {
            sum += field.iter().map(|v| v * v).sum::<f64>();
        }
        sum.sqrt()
    }

    fn assert_all_zero(field: &Kernel2d) {
        assert!(field.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn residual_anchor_at_fifty_cells() {
        let set = set_50();
        let report = kernel_residual(set, &paper_system(50));
        let max = report.max_residual();
        assert!(max <= 1e-8, "residual {max:e}");
        assert!(max >= 0.3 * 6.324e-9 && max <= 3.0 * 6.324e-9, "residual {max:e}");
        assert!(report.boundary_max <= 1e-12);
        assert!(set.picard_iterations >= 2 && set.picard_iterations <= 200);
        for i in 0..3 {
            assert!(set.k(i).is_finite() && set.l(i).is_finite());
            assert!(report.k[i].l2 <= report.k[i].max);
        }
        assert!(set.m_kernel.is_finite() && set.n_kernel.is_finite());
    }

    #[test]
    fn residual_anchor_at_hundred_cells() {
        let set = set_100();
        assert!(set.residual_norm <= 1e-8, "residual {:e}", set.residual_norm);
        let max = kernel_residual(set, &paper_system(100)).max_residual();
        assert!(max >= 0.3 * 1.680e-9 && max <= 3.0 * 1.680e-9, "residual {max:e}");
    }

    #[test]
    fn residual_refines_at_second_order() {
        let r50 = set_50().residual_norm;
        let r100 = set_100().residual_norm;
        let r200 = set_200().residual_norm;
        assert!(r200 >= 0.3 * 4.329e-10 && r200 <= 3.0 * 4.329e-10, "residual {r200:e}");
        let first = r50 / r100;
        let second = r100 / r200;
        assert!(first >= 2.5 && first <= 6.0, "refinement ratio {first}");
        assert!(second >= 2.5 && second <= 6.0, "refinement ratio {second}");
    }

    #[test]
    fn zero_coupling_solves_to_zero_kernels() {
        let sys = paper_system(40).with_zero_coupling();
        let set = KernelSet::solve(&sys, 40, &SolverOptions::default()).expect("solve");
        for field in [
            &set.k1, &set.k2, &set.k3, &set.m_kernel, &set.l1, &set.l2, &set.l3, &set.n_kernel,
        ] {
            assert_all_zero(field);
        }
        assert_eq!(set.residual_norm, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w_plus, w_minus) = random_state(&mut rng, 41);
        let (alpha, beta) = set.forward_transform(&w_plus, &w_minus).expect("forward");
        assert_eq!(beta, w_minus);
        assert_eq!(alpha[1], w_plus[1]);
    }

    #[test]
    fn zero_kernels_degenerate_to_identity_transform() {
        let set = KernelSet {
            grid_n: 16,
            h: 1000.0 / 16.0,
            k1: Kernel2d::zeros(16),
            k2: Kernel2d::zeros(16),
            k3: Kernel2d::zeros(16),
            m_kernel: Kernel2d::zeros(16),
            l1: Kernel2d::zeros(16),
            l2: Kernel2d::zeros(16),
            l3: Kernel2d::zeros(16),
            n_kernel: Kernel2d::zeros(16),
            residual_norm: 0.0,
            picard_iterations: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w_plus, w_minus) = random_state(&mut rng, 17);
        let (_, beta) = set.forward_transform(&w_plus, &w_minus).expect("forward");
        assert_eq!(beta, w_minus);
        let (_, back) = set.inverse_transform(&w_plus, &beta).expect("inverse");
        assert_eq!(back, w_minus);
    }

    #[test]
    fn round_trip_recovers_random_states() {
        let set = set_100();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let (w_plus, w_minus) = random_state(&mut rng, 101);
            let (alpha, beta) = set.forward_transform(&w_plus, &w_minus).expect("forward");
            let (_, recovered) = set.inverse_transform(&alpha, &beta).expect("inverse");
            let norm = state_l2(&w_plus, &w_minus);
            let diff: f64 = w_minus
                .iter()
                .zip(&recovered)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 1e-4 * norm, "round trip error {diff:e} vs norm {norm:e}");
        }
    }

    #[test]
    fn transform_is_lower_triangular_in_x() {
        let set = set_100();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w_plus, w_minus) = random_state(&mut rng, 101);
        let (_, beta) = set.forward_transform(&w_plus, &w_minus).expect("forward");
        let cutoff = 60;
        let mut truncated_plus = w_plus.clone();
        let mut truncated_minus = w_minus.clone();
        for j in (cutoff + 1)..=100 {
            for field in truncated_plus.iter_mut() {
                field[j] = 0.0;
            }
            truncated_minus[j] = 0.0;
        }
        let (_, beta_truncated) = set
            .forward_transform(&truncated_plus, &truncated_minus)
            .expect("forward");
        for p in 0..=cutoff {
            assert_eq!(beta[p], beta_truncated[p], "node {p}");
        }
    }

    #[test]
    fn target_and_plant_norms_stay_comparable() {
        let set = set_100();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for _ in 0..1000 {
            let (w_plus, w_minus) = random_state(&mut rng, 101);
            let (alpha, beta) = set.forward_transform(&w_plus, &w_minus).expect("forward");
            let ratio = state_l2(&alpha, &beta) / state_l2(&w_plus, &w_minus);
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        assert!(lo > 0.5 && hi < 2.0, "ratio range [{lo}, {hi}]");
    }

    #[test]
    fn forward_matches_fine_grid_quadrature() {
        let coarse = set_50();
        let fine = set_200();
        let sys_coarse = paper_system(50);
        let sys_fine = paper_system(200);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..3 {
            let coefs: Vec<[f64; 2]> = (0..12)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let build = |nodes: usize| {
                let mut w_plus = [vec![0.0; nodes], vec![0.0; nodes], vec![0.0; nodes]];
                let mut w_minus = vec![0.0; nodes];
                for j in 0..nodes {
                    let x = j as f64 / (nodes - 1) as f64;
                    for i in 0..4 {
                        let mut value = 0.0;
                        for (mode, c) in coefs[3 * i..3 * i + 3].iter().enumerate() {
                            let arg = (mode + 1) as f64 * std::f64::consts::PI * x;
                            value += c[0] * arg.sin() + c[1] * arg.cos();
                        }
                        if i < 3 {
                            w_plus[i][j] = value;
                        } else {
                            w_minus[j] = value;
                        }
                    }
                }
                (w_plus, w_minus)
            };
            let (wp_coarse, wm_coarse) = build(51);
            let (wp_fine, wm_fine) = build(201);
            let (_, beta_coarse) = coarse.forward_transform(&wp_coarse, &wm_coarse).unwrap();
            let (_, beta_fine) = fine.forward_transform(&wp_fine, &wm_fine).unwrap();
            let scale = beta_fine.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            for p in 0..=50 {
                let diff = (beta_coarse[p] - beta_fine[4 * p]).abs();
                assert!(diff <= 5e-4 * scale, "node {p}: {diff:e} vs scale {scale:e}");
            }
            let u_coarse = coarse
                .control_value(&sys_coarse, &wp_coarse, &wm_coarse)
                .unwrap();
            let u_fine = fine.control_value(&sys_fine, &wp_fine, &wm_fine).unwrap();
            assert!(
                (u_coarse - u_fine).abs() <= 5e-4 * u_fine.abs().max(1.0),
                "control {u_coarse} vs {u_fine}"
            );
        }
    }

    #[test]
    fn perturbed_kernel_is_detected_by_residual() {
        let mut set = set_50().clone();
        for value in set.k1.values_mut() {
            *value += 1e-2;
        }
        let report = kernel_residual(&set, &paper_system(50));
        assert!(report.max_residual() > 1e-6);
    }

    #[test]
    fn solver_reports_non_convergence() {
        let options = SolverOptions {
            tolerance: 1e-8,
            max_iterations: 1,
        };
        let err = KernelSet::solve(&paper_system(10), 10, &options).unwrap_err();
        assert!(matches!(err, Error::Numerics(_)));
    }

    #[test]
    fn free_regime_is_rejected() {
        let p = ModelParams::default();
        let eq = compute_equilibrium(0.005, 0.005, &p).expect("equilibrium");
        let sys = linearize(&eq, &p, 10).expect("linearize");
        assert!(sys.lambda[3] > 0.0);
        let err = KernelSet::solve(&sys, 10, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn state_grid_mismatch_is_rejected() {
        let set = set_50();
        let w_plus = [vec![0.0; 31], vec![0.0; 31], vec![0.0; 31]];
        let w_minus = vec![0.0; 31];
        assert!(set.forward_transform(&w_plus, &w_minus).is_err());
        assert!(set.inverse_transform(&w_plus, &w_minus).is_err());
    }

    #[test]
    fn control_of_zero_state_is_zero() {
        let set = set_50();
        let sys = paper_system(50);
        let w_plus = [vec![0.0; 51], vec![0.0; 51], vec![0.0; 51]];
        let w_minus = vec![0.0; 51];
        assert_eq!(set.control_value(&sys, &w_plus, &w_minus).unwrap(), 0.0);
    }

    #[test]
    fn cache_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().expect("tempdir");
        let sys = paper_system(50);
        let key = kernel_cache_key(&sys, 50, 1e-8);
        assert_eq!(key, kernel_cache_key(&sys, 50, 1e-8));
        assert_ne!(key, kernel_cache_key(&sys, 60, 1e-8));
        assert_ne!(key, observer_cache_key(&sys, 50, 1e-8));
        let path = dir.path().join(format!("{key}.kernels"));
        assert!(load_kernel_cache(&path).expect("load").is_none());
        let set = set_50();
        save_kernel_cache(&path, set).expect("save");
        let loaded = load_kernel_cache(&path).expect("load").expect("cached");
        assert_eq!(loaded.grid_n, set.grid_n);
        assert_eq!(loaded.h.to_bits(), set.h.to_bits());
        assert_eq!(loaded.residual_norm.to_bits(), set.residual_norm.to_bits());
        assert_eq!(loaded.picard_iterations, set.picard_iterations);
        for i in 0..3 {
            assert_eq!(loaded.k(i), set.k(i));
            assert_eq!(loaded.l(i), set.l(i));
        }
        assert_eq!(loaded.m_kernel, set.m_kernel);
        assert_eq!(loaded.n_kernel, set.n_kernel);
        std::fs::write(&path, b"not a kernel cache").expect("overwrite");
        assert!(load_kernel_cache(&path).expect("load").is_none());
    }

    #[test]
    fn observer_kernels_vanish_without_minus_coupling() {
        let sys = paper_system(60);
        let obs = ObserverKernels::solve(&sys, 60, &SolverOptions::default()).expect("solve");
        let sup = [&obs.theta1, &obs.theta2, &obs.theta3, &obs.theta_minus]
            .iter()
            .flat_map(|f| f.values())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(sup <= 1e-15, "observer kernels reach {sup:e}");
    }

    fn coupled_system(grid_n: usize) -> LinearizedSystem {
        let j_hat = Matrix4::new(
            -0.0020, 0.0011, -0.0007, 0.0009, //
            0.0013, -0.0030, 0.0008, -0.0006, //
            -0.0009, 0.0012, -0.0015, 0.0014, //
            0.0021, -0.0017, 0.0010, -0.0040,
        );
        paper_system(grid_n).with_coupling_matrix(j_hat)
    }

    #[test]
    fn observer_kernels_satisfy_their_equations() {
        let sys = coupled_system(60);
        let obs = ObserverKernels::solve(&sys, 60, &SolverOptions::default()).expect("solve");
        let sup = [&obs.theta1, &obs.theta2, &obs.theta3, &obs.theta_minus]
            .iter()
            .flat_map(|f| f.values())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(sup > 1e-5, "coupled system should produce nonzero kernels");
        let residual = observer_residual(&obs, &sys);
        assert!(residual <= 1e-6, "observer residual {residual:e}");
        assert!(obs.picard_iterations >= 2);
    }

    #[test]
    fn observer_cache_round_trip() {
        let dir = tempfile::tempdir().expect("tempdir");
        let sys = coupled_system(30);
        let obs = ObserverKernels::solve(&sys, 30, &SolverOptions::default()).expect("solve");
        let path = dir.path().join("observer.kernels");
        assert!(load_observer_cache(&path).expect("load").is_none());
        save_observer_cache(&path, &obs).expect("save");
        let loaded = load_observer_cache(&path).expect("load").expect("cached");
        assert_eq!(loaded.grid_n, obs.grid_n);
        assert_eq!(loaded.picard_iterations, obs.picard_iterations);
        assert_eq!(loaded.theta1, obs.theta1);
        assert_eq!(loaded.theta2, obs.theta2);
        assert_eq!(loaded.theta3, obs.theta3);
        assert_eq!(loaded.theta_minus, obs.theta_minus);
    }
}
