//! Config-driven studies behind the command-line front end.
//!
//! Each study returns a plain report; the `write_*` functions serialize reports
//! to CSV/JSON so the binary stays a thin dispatcher.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{
    validate_kernel, CollisionOperatorColloc, CollisionOperatorSg, KernelFamily, KernelSpec,
};
use crate::diffusion_limit::{
    assemble_exact_d, assemble_frequency_d, drift_diffusion_solve, explicit_dt_limit,
    relative_frobenius_gap, TimeMethod,
};
use crate::error::{Error, Result};
use crate::gpc_basis::{default_quad_order, GpcBasis, PolynomialFamily};
use crate::kinetic_solver::{
    run, run_observed, run_with, FinalState, InitialData, MicroMacroStepper,
    RunOptions, RunOutput, Scenario, Scheme, SpatialGrid, StateSg,
};
use crate::metrics::{self, CollocationEnsemble, DEFAULT_Q_REF};
use crate::velocity_quadrature::VelocityGrid;

pub const CONFIG_VERSION: u32 = 1;

pub const DEFAULT_K_LIST: [usize; 6] = [2, 4, 6, 8, 10, 12];
pub const SWEEP_EPS: [f64; 5] = [1.0, 1e-1, 1e-2, 1e-4, 1e-6];
pub const SCALING_EPS: [f64; 3] = [0.5, 0.25, 0.125];
pub const LIMIT_EPS: [f64; 4] = [1e-1, 1e-2, 1e-4, 1e-6];
pub const REGULARITY_EPS: [f64; 3] = [1.0, 1e-2, 1e-6];

/// Error level below which spectral decay is no longer checked.
pub const ERROR_FLOOR: f64 = 1e-10;
/// Target error for the uniformity-in-ε comparison.
pub const ERROR_TARGET: f64 = 1e-6;
pub const LIMIT_THRESHOLD: f64 = 5e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: String,
    pub params: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl KernelConfig {
    pub fn to_spec(&self) -> Result<KernelSpec> {
        let family = KernelFamily::from_params(&self.family, &self.params)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min <= sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(KernelSpec::new(family, self.sigma_min, self.sigma_max))
    }
}

/// Parameters of the multi-run studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default)]
    pub k_list: Option<Vec<usize>>,
    #[serde(default)]
    pub eps_list: Option<Vec<f64>>,
    #[serde(default)]
    pub q_ref: Option<usize>,
    #[serde(default)]
    pub k_max: Option<u32>,
}

fn default_cfl() -> f64 {
    0.45
}

fn default_diag_every() -> usize {
    1
}

fn default_z_family() -> PolynomialFamily {
    PolynomialFamily::LegendreUniform
}

fn default_scheme() -> Scheme {
    Scheme::MicroMacroSg
}

/// Versioned scenario file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub kernel: KernelConfig,
    #[serde(default = "default_z_family")]
    pub z_family: PolynomialFamily,
    pub epsilon: f64,
    pub nx: usize,
    pub nv: usize,
    pub k_gpc: usize,
    #[serde(default)]
    pub quad_order: Option<usize>,
    pub t_end: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    #[serde(default)]
    pub init: InitialData,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_diag_every")]
    pub diag_every: usize,
    #[serde(default)]
    pub study: Option<StudyConfig>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        if self.k_gpc == 0 {
            return Err(Error::Config("k_gpc must be at least 1".into()));
        }
        Ok(Scenario {
            kernel: self.kernel.to_spec()?,
            z_family: self.z_family,
            nx: self.nx,
            nv: self.nv,
            k: self.k_gpc,
            quad_order: self.quad_order.unwrap_or_else(|| default_quad_order(self.k_gpc)),
            epsilon: self.epsilon,
            t_end: self.t_end,
            cfl: self.cfl,
            length: 2.0 * std::f64::consts::PI,
            init: self.init,
            diag_every: self.diag_every,
        })
    }

    fn study(&self) -> StudyConfig {
        self.study.clone().unwrap_or(StudyConfig {
            k_list: None,
            eps_list: None,
            q_ref: None,
            k_max: None,
        })
    }

    pub fn eps_list_or(&self, default: &[f64]) -> Vec<f64> {
        self.study().eps_list.unwrap_or_else(|| default.to_vec())
    }

    pub fn k_list(&self) -> Vec<usize> {
        self.study().k_list.unwrap_or_else(|| DEFAULT_K_LIST.to_vec())
    }

    pub fn q_ref(&self) -> usize {
        self.study().q_ref.unwrap_or(DEFAULT_Q_REF)
    }

    pub fn k_max(&self) -> u32 {
        self.study().k_max.unwrap_or(2)
    }
}

fn check_eps_list(eps: &[f64]) -> Result<()> {
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config(format!("eps list must be non-empty and positive: {eps:?}")));
    }
    Ok(())
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn map_maybe_parallel<T, R, F>(items: &[T], parallel: bool, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if parallel {
        items.par_iter().map(&f).collect()
    } else {
        items.iter().map(&f).collect()
    }
}

// ---------------------------------------------------------------- run

/// A diagnostics row echoing the scenario parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub scenario_id: String,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub nx: usize,
    pub nv: usize,
    pub t: f64,
    pub mass_mode0: f64,
    pub gamma_norm: f64,
    pub defect_norm: f64,
    pub dk1_norm: f64,
    pub dk2_norm: f64,
}

/// Runs the configured scheme to `t_end`.
pub fn cmd_run(cfg: &Config) -> Result<RunOutput> {
    let scenario = cfg.scenario()?;
    run(&scenario, cfg.scheme, scenario.t_end)
}

pub fn diagnostics_records(scenario_id: &str, cfg: &Config, out: &RunOutput) -> Vec<DiagnosticsRecord> {
    let k = match &out.state {
        FinalState::MicroMacro(s) => s.k,
        FinalState::Resolved(_) => 1,
    };
    out.diagnostics
        .iter()
        .map(|row| DiagnosticsRecord {
            scenario_id: scenario_id.to_string(),
            eps: cfg.epsilon,
            k,
            nx: cfg.nx,
            nv: cfg.nv,
            t: row.t,
            mass_mode0: row.mass_mode0,
            gamma_norm: row.gamma_norm,
            defect_norm: row.defect_norm,
            dk1_norm: row.dk1_norm,
            dk2_norm: row.dk2_norm,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON dump of a final state with shape metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalStateDump {
    pub scenario_id: String,
    pub scheme: Scheme,
    pub t: f64,
    pub eps: f64,
    pub dt: f64,
    pub steps: usize,
    pub length: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<Array>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<Array>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<Array>,
    pub mass: Vec<f64>,
}

pub fn final_state_dump(scenario_id: &str, scheme: Scheme, out: &RunOutput) -> FinalStateDump {
    let d = &out.discretization;
    let mut dump = FinalStateDump {
        scenario_id: scenario_id.to_string(),
        scheme,
        t: d.t_end,
        eps: d.eps,
        dt: d.dt,
        steps: d.steps,
        length: d.length,
        rho: None,
        g: None,
        h: None,
        mass: out.final_mass.clone(),
    };
    match &out.state {
        FinalState::MicroMacro(s) => {
            dump.rho = Some(Array {
                shape: vec![s.nx, s.k],
                data: s.rho.clone(),
            });
            dump.g = Some(Array {
                shape: vec![s.nx, s.nv, s.k],
                data: s.g.clone(),
            });
        }
        FinalState::Resolved(s) => {
            dump.h = Some(Array {
                shape: vec![s.nx, s.nv],
                data: s.h.clone(),
            });
        }
    }
    dump
}

// ---------------------------------------------------------------- sweep

/// One row of the error report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub scenario_id: String,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub nx: usize,
    pub nv: usize,
    pub t_end: f64,
    pub err_total: f64,
    #[serde(rename = "err_RK")]
    pub err_rk: f64,
    #[serde(rename = "err_eK")]
    pub err_ek: f64,
    pub defect: f64,
    pub runtime_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<ErrorRow>,
    /// Smallest `K` reaching [`ERROR_TARGET`] for each ε, in list order.
    pub k_to_target: Vec<(f64, Option<usize>)>,
    /// `err(K_{n+1}) / err(K_n)` for each ε while `err(K_n) > ERROR_FLOOR`.
    pub ratios: Vec<(f64, usize, f64)>,
    pub decay_ok: bool,
    pub uniform_ok: bool,
    pub warnings: Vec<String>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.decay_ok && self.uniform_ok
    }
}

/// SG error against a matched collocation ensemble for every `(ε, K)`.
pub fn sweep(
    scenario_id: &str,
    base: &Scenario,
    k_list: &[usize],
    eps_list: &[f64],
    q_ref: usize,
    parallel: bool,
) -> Result<SweepReport> {
    check_eps_list(eps_list)?;
    let k_max = k_list.iter().copied().max().ok_or_else(|| Error::Config("empty K list".into()))?;
    if k_list.contains(&0) {
        return Err(Error::Config("K list entries must be at least 1".into()));
    }
    if q_ref < 2 * k_max + 4 {
        return Err(Error::Config(format!(
            "q_ref = {q_ref} must be at least 2·max(K) + 4 = {}",
            2 * k_max + 4
        )));
    }
    base.validate()?;
    let t_end = base.t_end;
    let per_eps = map_maybe_parallel(eps_list, parallel, |&eps| {
        let scenario = Scenario {
            epsilon: eps,
            ..base.clone()
        };
        let ensemble =
            CollocationEnsemble::run(&scenario, q_ref, t_end, &RunOptions::default(), parallel)?;
        let mut rows = Vec::with_capacity(k_list.len());
        for &k in k_list {
            let sc = scenario.clone().with_k(k);
            let start = Instant::now();
            let out = run(&sc, Scheme::MicroMacroSg, t_end)?;
            let runtime_ms = elapsed_ms(start);
            let state = out.micro_macro().expect("micro-macro output");
            let err = metrics::sg_error(state, &out.discretization, &ensemble)?;
            let vgrid = sc.velocity_grid()?;
            rows.push(ErrorRow {
                scenario_id: scenario_id.to_string(),
                eps,
                k,
                nx: sc.nx,
                nv: sc.nv,
                t_end,
                err_total: err.total,
                err_rk: err.projection,
                err_ek: err.galerkin,
                defect: metrics::defect_norm(state, &vgrid, out.discretization.length / sc.nx as f64),
                runtime_ms,
            });
        }
        Ok(rows)
    })?;

    let mut warnings = Vec::new();
    let mut ratios = Vec::new();
    let mut k_to_target = Vec::new();
    let mut decay_ok = true;
    for rows in &per_eps {
        let eps = rows[0].eps;
        for w in rows.windows(2) {
            if w[0].err_total <= ERROR_FLOOR {
                break;
            }
            let ratio = w[1].err_total / w[0].err_total;
            ratios.push((eps, w[0].k, ratio));
            if ratio > 0.5 {
                decay_ok = false;
                warnings.push(format!(
                    "eps={eps:e}: err(K={})/err(K={}) = {ratio:.3} exceeds 0.5",
                    w[1].k, w[0].k
                ));
            }
        }
        k_to_target.push((eps, rows.iter().find(|r| r.err_total <= ERROR_TARGET).map(|r| r.k)));
    }
    let reached: Vec<usize> = k_to_target.iter().filter_map(|(_, k)| *k).collect();
    let uniform_ok = reached.len() == k_to_target.len()
        && reached.iter().max().unwrap_or(&0) - reached.iter().min().unwrap_or(&0) <= 2;
    if !uniform_ok {
        warnings.push(format!("K needed to reach {ERROR_TARGET:e} is not uniform in eps: {k_to_target:?}"));
    }
    Ok(SweepReport {
        rows: per_eps.into_iter().flatten().collect(),
        k_to_target,
        ratios,
        decay_ok,
        uniform_ok,
        warnings,
    })
}

// ---------------------------------------------------------------- scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub scenario_id: String,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub nx: usize,
    pub nv: usize,
    pub t_end: f64,
    pub delta: f64,
    pub defect: f64,
    pub runtime_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
    /// `defect(ε_n) / defect(ε_{n+1})` for consecutive list entries.
    pub ratios: Vec<f64>,
    pub slope_ok: bool,
    pub ratios_ok: bool,
    pub warnings: Vec<String>,
}

impl ScalingReport {
    pub fn passed(&self) -> bool {
        self.slope_ok && self.ratios_ok
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Defect `‖Πf − f‖_Γ` at `t_end` for each ε, with its log-log slope.
pub fn scaling(
    scenario_id: &str,
    base: &Scenario,
    scheme: Scheme,
    eps_list: &[f64],
    parallel: bool,
) -> Result<ScalingReport> {
    check_eps_list(eps_list)?;
    if eps_list.len() < 2 {
        return Err(Error::Config("scaling needs at least two eps values".into()));
    }
    base.validate()?;
    let rows = map_maybe_parallel(eps_list, parallel, |&eps| {
        let sc = Scenario {
            epsilon: eps,
            ..base.clone()
        };
        let start = Instant::now();
        let out = run(&sc, scheme, sc.t_end)?;
        let k = match scheme {
            Scheme::MicroMacroSg => sc.k,
            _ => 1,
        };
        Ok(ScalingRow {
            scenario_id: scenario_id.to_string(),
            eps,
            k,
            nx: sc.nx,
            nv: sc.nv,
            t_end: sc.t_end,
            delta: sc.init.delta,
            defect: out.diagnostics.last().expect("diagnostics").defect_norm,
            runtime_ms: elapsed_ms(start),
        })
    })?;
    let positive = rows.iter().all(|r| r.defect > 0.0);
    let slope = if positive {
        let lx: Vec<f64> = rows.iter().map(|r| r.eps.ln()).collect();
        let ly: Vec<f64> = rows.iter().map(|r| r.defect.ln()).collect();
        fit_slope(&lx, &ly)
    } else {
        f64::NAN
    };
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[0].defect / w[1].defect).collect();
    let slope_ok = (0.8..=1.2).contains(&slope);
    let ratios_ok = ratios.iter().all(|r| (1.6..=2.4).contains(r));
    let mut warnings = Vec::new();
    if !slope_ok {
        warnings.push(format!("defect slope {slope:.4} outside [0.8, 1.2]"));
    }
    if !ratios_ok {
        warnings.push(format!("defect ratios {ratios:?} outside [1.6, 2.4]"));
    }
    Ok(ScalingReport {
        rows,
        slope,
        ratios,
        slope_ok,
        ratios_ok,
        warnings,
    })
}

// ---------------------------------------------------------------- limit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub scenario_id: String,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub nx: usize,
    pub nv: usize,
    pub t_end: f64,
    pub distance: f64,
    pub runtime_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitReport {
    pub rows: Vec<LimitRow>,
    pub d_exact: Vec<Vec<f64>>,
    pub d_frequency: Vec<Vec<f64>>,
    pub d_gap: f64,
    pub monotone_ok: bool,
    pub threshold_ok: bool,
    pub warnings: Vec<String>,
}

impl LimitReport {
    pub fn passed(&self) -> bool {
        self.monotone_ok && self.threshold_ok
    }
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Distance between kinetic `ρ̂` and the Galerkin diffusion solution (exact `D`).
///
/// The diffusion system is advanced with the kinetic run's own step (capped by
/// its explicit stability limit), so the distance isolates the `ε` dependence.
pub fn limit(
    scenario_id: &str,
    base: &Scenario,
    eps_list: &[f64],
    parallel: bool,
) -> Result<LimitReport> {
    check_eps_list(eps_list)?;
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!("limit eps list must be descending: {eps_list:?}")));
    }
    base.validate()?;
    let vgrid = base.velocity_grid()?;
    let basis = base.basis()?;
    let grid = base.spatial_grid()?;
    let op = CollisionOperatorSg::new(&base.kernel, &vgrid, &basis);
    let d_exact = assemble_exact_d(&op, &vgrid)?;
    let d_frequency = assemble_frequency_d(&base.kernel, &vgrid, &basis)?;
    let rho0 = StateSg::initial_sg(&base.init, &grid, &vgrid, &basis, 1.0).rho;
    let rows = map_maybe_parallel(eps_list, parallel, |&eps| {
        let sc = Scenario {
            epsilon: eps,
            ..base.clone()
        };
        let start = Instant::now();
        let out = run(&sc, Scheme::MicroMacroSg, sc.t_end)?;
        let dt = out.discretization.dt.min(explicit_dt_limit(&d_exact, &grid));
        let reference = drift_diffusion_solve(&d_exact, &grid, &rho0, sc.t_end, dt, TimeMethod::Explicit)?;
        let state = out.micro_macro().expect("micro-macro output");
        Ok(LimitRow {
            scenario_id: scenario_id.to_string(),
            eps,
            k: sc.k,
            nx: sc.nx,
            nv: sc.nv,
            t_end: sc.t_end,
            distance: relative_l2(&state.rho, &reference),
            runtime_ms: elapsed_ms(start),
        })
    })?;
    let monotone_ok = rows.windows(2).all(|w| w[1].distance <= w[0].distance);
    let threshold_ok = rows.last().map(|r| r.distance <= LIMIT_THRESHOLD).unwrap_or(false);
    let mut warnings = Vec::new();
    if !monotone_ok {
        warnings.push("kinetic-to-diffusion distance increases as eps decreases".to_string());
    }
    if !threshold_ok {
        warnings.push(format!("distance at the smallest eps exceeds {LIMIT_THRESHOLD:e}"));
    }
    Ok(LimitReport {
        rows,
        d_gap: relative_frobenius_gap(&d_exact, &d_frequency),
        d_exact: matrix_rows(&d_exact),
        d_frequency: matrix_rows(&d_frequency),
        monotone_ok,
        threshold_ok,
        warnings,
    })
}

// ---------------------------------------------------------------- regularity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityRow {
    pub scenario_id: String,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k_gpc: usize,
    pub nx: usize,
    pub nv: usize,
    pub t_end: f64,
    pub k: u32,
    pub sup_dk_norm: f64,
    pub sup_transport_dk_norm: f64,
    pub initial_dk_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityReport {
    pub rows: Vec<RegularityRow>,
    /// `sup ‖D^k f‖` at the last ε over the value at the first ε, per `k`.
    pub dk_ratios: Vec<f64>,
    /// max/min over ε of `sup ‖D^k(v ∂ₓ f)‖`, per `k`.
    pub transport_spreads: Vec<f64>,
    pub dk_ok: bool,
    pub transport_ok: bool,
    pub energy_sup_ok: bool,
    pub warnings: Vec<String>,
}

impl RegularityReport {
    pub fn passed(&self) -> bool {
        self.dk_ok && self.transport_ok && self.energy_sup_ok
    }
}

/// `sup_t ‖D^k f‖_Γ` and `sup_t ‖D^k(v ∂ₓ f)‖_Γ` for `k = 0..=k_max` and each ε.
pub fn regularity(
    scenario_id: &str,
    base: &Scenario,
    eps_list: &[f64],
    k_max: u32,
    parallel: bool,
) -> Result<RegularityReport> {
    check_eps_list(eps_list)?;
    if k_max as usize > 4.min(base.k.saturating_sub(1)) {
        return Err(Error::Config(format!(
            "k_max = {k_max} must not exceed min(4, K-1) = {}",
            4.min(base.k.saturating_sub(1))
        )));
    }
    base.validate()?;
    let vgrid = base.velocity_grid()?;
    let dmat = base.basis()?.z_derivative_matrix();
    let dx = base.spatial_grid()?.dx();
    let per_eps = map_maybe_parallel(eps_list, parallel, |&eps| {
        let sc = Scenario {
            epsilon: eps,
            ..base.clone()
        };
        let orders = (k_max + 1) as usize;
        let mut sup_dk = vec![0.0_f64; orders];
        let mut sup_tr = vec![0.0_f64; orders];
        let mut initial = vec![f64::NAN; orders];
        let mut observer = |s: &StateSg| {
            for k in 0..orders {
                let a = metrics::dk_norm_with(s, &vgrid, dx, &dmat, k as u32);
                let b = metrics::transport_dk_norm(s, &vgrid, dx, &dmat, k as u32);
                if initial[k].is_nan() {
                    initial[k] = a;
                }
                sup_dk[k] = sup_dk[k].max(a);
                sup_tr[k] = sup_tr[k].max(b);
            }
        };
        run_observed(&sc, Scheme::MicroMacroSg, sc.t_end, &RunOptions::default(), &mut observer)?;
        Ok((0..orders)
            .map(|k| RegularityRow {
                scenario_id: scenario_id.to_string(),
                eps,
                k_gpc: sc.k,
                nx: sc.nx,
                nv: sc.nv,
                t_end: sc.t_end,
                k: k as u32,
                sup_dk_norm: sup_dk[k],
                sup_transport_dk_norm: sup_tr[k],
                initial_dk_norm: initial[k],
            })
            .collect::<Vec<_>>())
    })?;

    let orders = (k_max + 1) as usize;
    let first = &per_eps[0];
    let last = per_eps.last().expect("non-empty");
    let mut dk_ratios = Vec::new();
    let mut transport_spreads = Vec::new();
    for k in 0..orders {
        let base_v = first[k].sup_dk_norm;
        dk_ratios.push(if base_v > 0.0 {
            last[k].sup_dk_norm / base_v
        } else if last[k].sup_dk_norm == 0.0 {
            0.0
        } else {
            f64::INFINITY
        });
        let vals: Vec<f64> = per_eps.iter().map(|r| r[k].sup_transport_dk_norm).collect();
        let hi = vals.iter().cloned().fold(0.0, f64::max);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        transport_spreads.push(if hi == 0.0 { 1.0 } else { hi / lo });
    }
    let dk_ok = dk_ratios.iter().all(|r| *r <= 2.0);
    let transport_ok = transport_spreads.iter().all(|r| r.is_finite() && *r <= 2.0);
    let energy_sup_ok = per_eps.iter().all(|r| {
        let (s, i) = (r[0].sup_dk_norm, r[0].initial_dk_norm);
        (s - i).abs() <= 1e-10 * i.max(1e-300)
    });
    let mut warnings = Vec::new();
    if !dk_ok {
        warnings.push(format!("sup ||D^k f|| ratios {dk_ratios:?} exceed 2"));
    }
    if !transport_ok {
        warnings.push(format!("sup ||D^k(v dx f)|| spreads {transport_spreads:?} exceed 2"));
    }
    if !energy_sup_ok {
        warnings.push("sup_t ||f|| differs from ||f0||".to_string());
    }
    Ok(RegularityReport {
        rows: per_eps.into_iter().flatten().collect(),
        dk_ratios,
        transport_spreads,
        dk_ok,
        transport_ok,
        energy_sup_ok,
        warnings,
    })
}

// ---------------------------------------------------------------- basis

#[derive(Debug, Clone, Serialize)]
pub struct BasisTable {
    pub gram: Vec<Vec<f64>>,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn basis_table(family: PolynomialFamily, k: usize) -> Result<BasisTable> {
    let basis = GpcBasis::with_default_quadrature(family, k)?;
    Ok(BasisTable {
        gram: matrix_rows(&basis.gram()),
        nodes: basis.quadrature().nodes.clone(),
        weights: basis.quadrature().weights.clone(),
    })
}

/// `section,row,col,value` lines for the Gram matrix, nodes and weights.
pub fn write_basis_csv<W: Write>(table: &BasisTable, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["section", "row", "col", "value"])?;
    for (r, row) in table.gram.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            out.write_record(["gram", &r.to_string(), &c.to_string(), &v.to_string()])?;
        }
    }
    for (i, v) in table.nodes.iter().enumerate() {
        out.write_record(["node", &i.to_string(), "0", &v.to_string()])?;
    }
    for (i, v) in table.weights.iter().enumerate() {
        out.write_record(["weight", &i.to_string(), "0", &v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- selftest

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Deterministic pseudo-random fields for the invariant checks.
fn sample_fields(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{rngs::StdRng, Rng, SeedableRng};
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// Reference kernels with their declared bounds.
pub fn reference_kernels() -> Vec<KernelSpec> {
    vec![
        KernelSpec::constant(1.0),
        KernelSpec::new(KernelFamily::AffineZ { sigma0: 1.0, a: 0.5 }, 0.5, 1.5),
        KernelSpec::new(
            KernelFamily::AnisotropicGaussian { sigma0: 1.0, a: 0.2, b: 0.3, c: 0.5 },
            0.8,
            1.65,
        ),
        KernelSpec::new(KernelFamily::NonlinearZ { sigma0: 2.0, s: 0.5 }, 1.5, 2.5),
    ]
}

/// Worst margin of `−σ_min ‖(I−Π)h‖² − ⟨Ah,h⟩` over random fields and `z` values,
/// and the worst mismatch of the pairwise quadratic-form identity.
pub fn collocation_coercivity(spec: &KernelSpec, vgrid: &VelocityGrid, fields: usize, zs: &[f64]) -> (f64, f64) {
    let n = vgrid.len();
    let mut margin = f64::INFINITY;
    let mut identity = 0.0_f64;
    for (zi, &z) in zs.iter().enumerate() {
        let op = CollisionOperatorColloc::new(spec, vgrid, z);
        for h in sample_fields(n, fields, 1000 + zi as u64) {
            let ah = op.apply(&h);
            let lhs = vgrid.inner(&ah, &h);
            let rho = vgrid.density(&h);
            let defect: Vec<f64> = h.iter().map(|x| x - rho).collect();
            let rhs = -spec.sigma_min * vgrid.inner(&defect, &defect);
            margin = margin.min(rhs - lhs);
            let mut pair = 0.0;
            for i in 0..n {
                for j in 0..n {
                    pair += vgrid.weights()[i]
                        * vgrid.weights()[j]
                        * spec.sigma(vgrid.nodes()[i], vgrid.nodes()[j], z)
                        * (h[i] - h[j]).powi(2);
                }
            }
            identity = identity.max((lhs + 0.5 * pair).abs() / lhs.abs().max(1.0));
        }
    }
    (margin, identity)
}

/// Same margin for the Galerkin operator over random `(v, mode)` fields.
pub fn sg_coercivity(spec: &KernelSpec, vgrid: &VelocityGrid, basis: &GpcBasis, fields: usize) -> f64 {
    let op = CollisionOperatorSg::new(spec, vgrid, basis);
    let k = basis.len();
    let mut margin = f64::INFINITY;
    for h in sample_fields(op.dim(), fields, 77) {
        let energy = op.energy(&h);
        let mut defect = h.clone();
        vgrid.remove_equilibrium(&mut defect, k);
        let mut sq = 0.0;
        for i in 0..vgrid.len() {
            for m in 0..k {
                sq += vgrid.weights()[i] * defect[i * k + m].powi(2);
            }
        }
        margin = margin.min(-spec.sigma_min * sq - energy);
    }
    margin
}

/// Counts eigenvalues of the flattened Galerkin operator near zero and returns
/// the largest of the remaining ones.
pub fn null_space_summary(op: &CollisionOperatorSg) -> (usize, f64) {
    let eig = op.eigenvalues();
    let zeros = eig.iter().filter(|e| e.abs() < 1e-9).count();
    let rest = eig
        .iter()
        .filter(|e| e.abs() >= 1e-9)
        .fold(f64::NEG_INFINITY, |m, e| m.max(*e));
    (zeros, rest)
}

/// Invariant suite. Kernels in `extra` join the coercivity checks with their
/// declared `σ_min`, which is how a misdeclared bound is detected.
pub fn selftest(extra: &[KernelSpec]) -> Vec<Check> {
    let mut checks = Vec::new();

    for nv in [8, 16, 32] {
        let vgrid = VelocityGrid::new(nv).expect("velocity grid");
        let mut worst = 0.0_f64;
        for p in (0..=(2 * nv as u32 - 2)).step_by(2) {
            let exact = crate::gpc_basis::double_factorial(p.saturating_sub(1));
            worst = worst.max(((vgrid.maxwellian_moment(p) - exact) / exact).abs());
        }
        checks.push(Check::new(
            format!("hermite moment exactness nv={nv}"),
            worst <= 1e-11,
            format!("max rel err {worst:.2e}"),
        ));
    }

    for family in [PolynomialFamily::LegendreUniform, PolynomialFamily::HermiteGaussian] {
        let basis = GpcBasis::with_default_quadrature(family, 20).expect("basis");
        let err = (basis.gram() - nalgebra::DMatrix::<f64>::identity(20, 20)).amax();
        checks.push(Check::new(
            format!("gram identity {} K=20", family.name()),
            err <= 1e-12,
            format!("max err {err:.2e}"),
        ));
    }

    let vgrid = VelocityGrid::new(8).expect("velocity grid");
    let basis = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 4).expect("basis");
    let zs: Vec<f64> = (0..10).map(|i| -0.95 + 0.19 * i as f64).collect();
    for (idx, spec) in reference_kernels().iter().chain(extra).enumerate() {
        let tag = if idx < 4 { "" } else { " (supplied)" };
        let (margin, identity) = collocation_coercivity(spec, &vgrid, 100, &zs);
        checks.push(Check::new(
            format!("coercivity colloc {}{tag}", spec.family.name()),
            margin >= -1e-10 && identity <= 1e-12,
            format!("margin {margin:.2e}, identity {identity:.2e}"),
        ));
        let margin = sg_coercivity(spec, &vgrid, &basis, 20);
        checks.push(Check::new(
            format!("coercivity sg {}{tag}", spec.family.name()),
            margin >= -1e-10,
            format!("margin {margin:.2e}"),
        ));
    }

    for spec in reference_kernels() {
        let op = CollisionOperatorSg::new(&spec, &vgrid, &basis);
        let (zeros, rest) = null_space_summary(&op);
        checks.push(Check::new(
            format!("null space {}", spec.family.name()),
            zeros == basis.len() && rest <= -spec.sigma_min + 1e-9,
            format!("{zeros} zero eigenvalues, next {rest:.4}"),
        ));
    }

    checks.push(pythagoras_check());
    checks.push(equilibrium_check());

    let quick = Scenario {
        nx: 16,
        nv: 8,
        t_end: 0.2,
        ..Scenario::default()
    }
    .with_k(4);
    match run(&quick, Scheme::MicroMacroSg, quick.t_end) {
        Ok(out) => {
            let drift = out.mass_drift();
            checks.push(Check::new("mass conservation", drift <= 1e-10, format!("drift {drift:.2e}")));
            let worst = out
                .diagnostics
                .windows(2)
                .map(|w| w[1].gamma_norm - w[0].gamma_norm)
                .fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check::new("energy dissipation", worst <= 1e-10, format!("max increase {worst:.2e}")));
        }
        Err(e) => checks.push(Check::new("mass conservation", false, e.to_string())),
    }

    match sweep("selftest", &quick, &[2, 4, 6], &[1.0], 20, false) {
        Ok(rep) => checks.push(Check::new(
            "spectral decay",
            rep.decay_ok,
            format!("ratios {:?}", rep.ratios.iter().map(|r| r.2).collect::<Vec<_>>()),
        )),
        Err(e) => checks.push(Check::new("spectral decay", false, e.to_string())),
    }

    for spec in extra {
        let report = validate_kernel(spec, &vgrid, &basis, 2);
        let (ok, detail) = match report {
            Ok(r) => (r.passed(), r.issues.join("; ")),
            Err(e) => (false, e.to_string()),
        };
        checks.push(Check::new(format!("validation {} (supplied)", spec.family.name()), ok, detail));
    }
    checks
}

fn pythagoras_check() -> Check {
    let sc = Scenario {
        nx: 8,
        nv: 6,
        t_end: 0.1,
        ..Scenario::default()
    };
    let result = (|| -> Result<f64> {
        let ens = CollocationEnsemble::run(&sc, 12, sc.t_end, &RunOptions::default(), false)?;
        let mut worst = 0.0_f64;
        for k in [1, 2, 3, 4] {
            let s = sc.clone().with_k(k);
            let out = run(&s, Scheme::MicroMacroSg, s.t_end)?;
            let e = metrics::sg_error(out.micro_macro().expect("state"), &out.discretization, &ens)?;
            let gap = (e.total.powi(2) - e.projection.powi(2) - e.galerkin.powi(2)).abs();
            worst = worst.max(gap);
        }
        Ok(worst)
    })();
    match result {
        Ok(w) => Check::new("pythagoras split", w <= 1e-10, format!("max gap {w:.2e}")),
        Err(e) => Check::new("pythagoras split", false, e.to_string()),
    }
}

fn equilibrium_check() -> Check {
    let vgrid = VelocityGrid::new(8).expect("velocity grid");
    let basis = GpcBasis::with_default_quadrature(PolynomialFamily::LegendreUniform, 3).expect("basis");
    let spec = &reference_kernels()[2];
    let op = CollisionOperatorSg::new(spec, &vgrid, &basis);
    let grid = SpatialGrid::new(8, 1.0).expect("grid");
    let mut worst = 0.0_f64;
    for eps in [1.0, 1e-6] {
        let stepper = match MicroMacroStepper::new(&op, &vgrid, grid, eps, 1e-2) {
            Ok(s) => s,
            Err(e) => return Check::new("equilibrium fixed point", false, e.to_string()),
        };
        let mut s = StateSg::zeros(8, 8, 3, eps);
        for (n, r) in s.rho.iter_mut().enumerate() {
            *r = 1.0 + 0.1 * (n % 3) as f64;
        }
        let before = s.clone();
        for n in 0..5 {
            if let Err(e) = stepper.step(&mut s, n) {
                return Check::new("equilibrium fixed point", false, e.to_string());
            }
        }
        for (a, b) in s.rho.iter().zip(&before.rho) {
            worst = worst.max((a - b).abs());
        }
        worst = s.g.iter().fold(worst, |m, g| m.max(g.abs()));
    }
    Check::new("equilibrium fixed point", worst <= 1e-14, format!("max change {worst:.2e}"))
}

pub fn format_checks(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{status}  {:<width$}  {}\n", c.name, c.detail));
    }
    s
}

// ---------------------------------------------------------------- output

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Runs a scenario once at every ε with a shared step size (AP property check).
pub fn fixed_dt_runs(base: &Scenario, eps_list: &[f64], dt: f64) -> Result<Vec<RunOutput>> {
    eps_list
        .iter()
        .map(|&eps| {
            let sc = Scenario {
                epsilon: eps,
                ..base.clone()
            };
            run_with(
                &sc,
                Scheme::MicroMacroSg,
                sc.t_end,
                &RunOptions {
                    dt: Some(dt),
                    ..RunOptions::default()
                },
            )
        })
        .collect()
}
