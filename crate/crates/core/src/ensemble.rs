//! Ensemble machinery: Monte Carlo estimates of the averaged solution,
//! effective-medium error norms, the linearized single-inclusion identity,
//! and the volume-fraction scaling study.
//!
//! Samples are processed in sample order with all parallelism inside the
//! linear algebra, and every reduction is chunk-deterministic, so a study is
//! bit-reproducible for any worker count. Mean fields are accumulated with
//! compensated summation in fixed sample groups; the groups double as
//! delete-group jackknife replicates for the error bars.

use crate::domain::{
    inclusion_count_for_fraction, sample_configuration, DiluteRegime, DomainSpec, Shape,
};
use crate::error::{CmError, Result};
use crate::field::{combine, gradient, norms, DomainMask, GridField};
use crate::fit::{log_log_fit, LogLogFit};
use crate::geom::{self};
use crate::rng;
use crate::solver::{
    apply_inverse_l_ws, solve_background_ws, solve_with_inclusions_ws, SolverOpts, SolverWorkspace,
};
use serde::Serialize;
use std::sync::Arc;

/// Pointwise mean and second moment of the sampled solutions.
pub struct EnsembleEstimate {
    pub mean_field: GridField,
    pub second_moment_field: GridField,
    pub sample_count: usize,
    pub seed_base: u64,
    /// Per-group means for delete-group jackknife.
    pub group_means: Vec<GridField>,
    pub group_sizes: Vec<usize>,
}

impl EnsembleEstimate {
    /// Min over interior nodes of `second_moment - mean^2` (round-off floor
    /// check).
    pub fn min_pointwise_variance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.mean_field.values.len() {
            if self.mean_field.mask.interior[i] {
                let v = self.second_moment_field.values[i]
                    - self.mean_field.values[i] * self.mean_field.values[i];
                min = min.min(v);
            }
        }
        min
    }
}

struct KahanField {
    sum: Vec<f64>,
    comp: Vec<f64>,
    count: usize,
}

impl KahanField {
    fn new(n: usize) -> KahanField {
        KahanField {
            sum: vec![0.0; n],
            comp: vec![0.0; n],
            count: 0,
        }
    }

    fn add(&mut self, values: &[f64]) {
        for i in 0..self.sum.len() {
            let y = values[i] - self.comp[i];
            let t = self.sum[i] + y;
            self.comp[i] = (t - self.sum[i]) - y;
            self.sum[i] = t;
        }
        self.count += 1;
    }

    fn add_squared(&mut self, values: &[f64]) {
        for i in 0..self.sum.len() {
            let v = values[i] * values[i];
            let y = v - self.comp[i];
            let t = self.sum[i] + y;
            self.comp[i] = (t - self.sum[i]) - y;
            self.sum[i] = t;
        }
        self.count += 1;
    }
}

/// Uniform-model local volume fraction sampled at every interior node.
///
/// Ball domains use the exact two-sphere lens; box domains use closed-form
/// values away from edges (full ball or a single spherical cap) and fall
/// back to midpoint sub-sampling near inset-box edges.
pub fn beta_field(
    domain: &DomainSpec,
    epsilon: f64,
    n: usize,
    mask: &Arc<DomainMask>,
) -> GridField {
    let clearance = domain.clearance_volume(epsilon);
    let full = crate::domain::SPHERE_VOLUME_FACTOR * epsilon.powi(3);
    let scale = n as f64 / clearance;
    match domain.shape {
        Shape::UnitBall { radius } => {
            let inset = radius - epsilon;
            GridField::from_fn(mask, move |p| {
                let d = geom::norm(p);
                scale * crate::domain::sphere_sphere_overlap(epsilon, inset, d)
            })
        }
        Shape::Box { extents } => {
            let dom = domain.clone();
            GridField::from_fn(mask, move |p| {
                let mut near = 0usize;
                let mut cap_d = f64::INFINITY;
                for axis in 0..3 {
                    for d in [p[axis] - epsilon, extents[axis] - epsilon - p[axis]] {
                        if d < epsilon {
                            near += 1;
                            cap_d = cap_d.min(d);
                        }
                    }
                }
                let overlap = match near {
                    0 => full,
                    1 => {
                        // One face cuts a spherical cap off the ball.
                        let hgt = epsilon - cap_d;
                        full - std::f64::consts::PI * hgt * hgt * (2.0 * epsilon + cap_d) / 3.0
                    }
                    _ => crate::domain::clearance_overlap_volume(&dom, epsilon, p),
                };
                scale * overlap.max(0.0)
            })
        }
    }
}

/// Monte Carlo estimate of the ensemble-averaged solution over `samples`
/// configurations of `n` inclusions; per-sample seeds derive from
/// `seed_base`. `groups` sets the jackknife granularity.
pub fn expectation_field(
    domain: &DomainSpec,
    epsilon: f64,
    n: usize,
    samples: usize,
    h: f64,
    seed_base: u64,
    groups: usize,
) -> Result<EnsembleEstimate> {
    if samples < 2 {
        return Err(CmError::Invalid("need at least 2 samples".into()));
    }
    let ws = SolverWorkspace::new(domain, h)?;
    let background = solve_background_ws(&ws)?;
    expectation_field_ws(
        &ws,
        &background.field,
        epsilon,
        n,
        samples,
        seed_base,
        groups,
    )
}

pub fn expectation_field_ws(
    ws: &SolverWorkspace,
    background: &GridField,
    epsilon: f64,
    n: usize,
    samples: usize,
    seed_base: u64,
    groups: usize,
) -> Result<EnsembleEstimate> {
    let len = ws.grid.len();
    let g = groups.clamp(2, samples);

    if n == 0 {
        // Every sample is the background solve; the mean is definitionally
        // that field.
        let mut m2 = GridField::zeros(&ws.mask);
        for i in 0..len {
            m2.values[i] = background.values[i] * background.values[i];
        }
        let mut sizes = vec![samples / g; g];
        for (extra, size) in sizes.iter_mut().enumerate() {
            if extra < samples % g {
                *size += 1;
            }
        }
        return Ok(EnsembleEstimate {
            mean_field: background.clone(),
            second_moment_field: m2,
            sample_count: samples,
            seed_base,
            group_means: vec![background.clone(); g],
            group_sizes: sizes,
        });
    }

    let mut group_sums: Vec<KahanField> = (0..g).map(|_| KahanField::new(len)).collect();
    let mut m2 = KahanField::new(len);
    let opts = SolverOpts::default();

    for s in 0..samples {
        let seed = rng::derive_seed(seed_base, s as u64);
        let cfg = sample_configuration(&ws.domain, epsilon, n, seed, 10_000_000)?;
        let out = solve_with_inclusions_ws(ws, &cfg, &opts, Some(background))
            .map_err(|e| CmError::Invalid(format!("sample {s} (seed {seed}) failed: {e}")))?;
        group_sums[s % g].add(&out.field.values);
        m2.add_squared(&out.field.values);
    }

    let mut mean = GridField::zeros(&ws.mask);
    {
        let mut total = KahanField::new(len);
        for gs in &group_sums {
            total.add(&gs.sum);
        }
        for i in 0..len {
            mean.values[i] = total.sum[i] / samples as f64;
        }
    }
    let mut m2_field = GridField::zeros(&ws.mask);
    for i in 0..len {
        m2_field.values[i] = m2.sum[i] / samples as f64;
    }
    let group_means: Vec<GridField> = group_sums
        .iter()
        .map(|gs| {
            let mut f = GridField::zeros(&ws.mask);
            for i in 0..len {
                f.values[i] = gs.sum[i] / gs.count.max(1) as f64;
            }
            f
        })
        .collect();
    let group_sizes = group_sums.iter().map(|gs| gs.count).collect();

    Ok(EnsembleEstimate {
        mean_field: mean,
        second_moment_field: m2_field,
        sample_count: samples,
        seed_base,
        group_means,
        group_sizes,
    })
}

/// Delete-group jackknife standard error of a scalar computed from the mean
/// field.
fn jackknife_stderr<F: Fn(&GridField) -> f64>(
    estimate: &EnsembleEstimate,
    theta: F,
) -> Result<f64> {
    let g = estimate.group_means.len();
    if g < 2 {
        return Ok(0.0);
    }
    let m_total = estimate.sample_count as f64;
    let mut thetas = Vec::with_capacity(g);
    for k in 0..g {
        let mk = estimate.group_sizes[k] as f64;
        if mk == 0.0 || mk >= m_total {
            continue;
        }
        // Leave-group-out mean: (M m - M_k m_k) / (M - M_k).
        let w_all = m_total / (m_total - mk);
        let w_k = -mk / (m_total - mk);
        let loo = combine(
            &[&estimate.mean_field, &estimate.group_means[k]],
            &[w_all, w_k],
        )?;
        thetas.push(theta(&loo));
    }
    if thetas.len() < 2 {
        return Ok(0.0);
    }
    let gf = thetas.len() as f64;
    let mean = thetas.iter().sum::<f64>() / gf;
    let var = thetas.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() * (gf - 1.0) / gf;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremErrorReport {
    pub err_effective: f64,
    pub err_background: f64,
    pub ratio: f64,
    pub stderr: f64,
    pub stderr_background: f64,
}

/// H1 errors of the ensemble mean against the effective-medium and
/// background solutions, with jackknife error bars.
pub fn theorem_error(
    estimate: &EnsembleEstimate,
    beta: &GridField,
    domain: &DomainSpec,
    h: f64,
) -> Result<TheoremErrorReport> {
    let ws = SolverWorkspace::with_beta(domain, h, Some(beta))?;
    if !ws.grid.same_geometry(&estimate.mean_field.grid) {
        return Err(CmError::GridMismatch("theorem_error grid".into()));
    }
    let phi_e = solve_background_ws(&ws)?.field;
    let ws_bg = SolverWorkspace::with_mask(domain, ws.grid.clone(), ws.mask.clone(), None)?;
    let phi_bar = solve_background_ws(&ws_bg)?.field;
    theorem_error_with(estimate, &phi_e, &phi_bar)
}

pub fn theorem_error_with(
    estimate: &EnsembleEstimate,
    phi_e: &GridField,
    phi_bar: &GridField,
) -> Result<TheoremErrorReport> {
    let err_eff = norms(&combine(&[&estimate.mean_field, phi_e], &[1.0, -1.0])?, None)?.h1;
    let err_bg = norms(
        &combine(&[&estimate.mean_field, phi_bar], &[1.0, -1.0])?,
        None,
    )?
    .h1;
    let stderr = jackknife_stderr(estimate, |m| {
        norms(&combine(&[m, phi_e], &[1.0, -1.0]).unwrap(), None)
            .map(|n| n.h1)
            .unwrap_or(f64::NAN)
    })?;
    let stderr_background = jackknife_stderr(estimate, |m| {
        norms(&combine(&[m, phi_bar], &[1.0, -1.0]).unwrap(), None)
            .map(|n| n.h1)
            .unwrap_or(f64::NAN)
    })?;
    Ok(TheoremErrorReport {
        err_effective: err_eff,
        err_background: err_bg,
        ratio: if err_bg > 0.0 { err_eff / err_bg } else { 0.0 },
        stderr,
        stderr_background,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearizedReport {
    pub beta_bar: f64,
    pub epsilon: f64,
    pub n_equivalent: usize,
    pub samples: usize,
    /// H1 norm of `N E(phi_1) + 3 Linv div(a beta grad phi_bar)`.
    pub deviation_h1: f64,
    /// H1 norm of the inverse-operator reference term.
    pub reference_h1: f64,
    pub ratio: f64,
    pub stderr: f64,
}

/// Checks the linearized identity: the scaled single-inclusion mean against
/// the inverse-operator image of the local volume fraction.
pub fn linearized_check(
    domain: &DomainSpec,
    epsilon: f64,
    beta_bar: f64,
    samples: usize,
    h: f64,
    seed: u64,
    groups: usize,
) -> Result<LinearizedReport> {
    let n_equiv = inclusion_count_for_fraction(domain, beta_bar, epsilon);
    let ws = SolverWorkspace::new(domain, h)?;
    let background = solve_background_ws(&ws)?.field;

    let len = ws.grid.len();
    let g = groups.clamp(2, samples.max(2));
    let mut group_sums: Vec<KahanField> = (0..g).map(|_| KahanField::new(len)).collect();
    let mut m2 = KahanField::new(len);
    let opts = SolverOpts::default();
    for s in 0..samples {
        let sample_seed = rng::derive_seed(seed, s as u64);
        let cfg = sample_configuration(&ws.domain, epsilon, 1, sample_seed, 10_000_000)?;
        let out = solve_with_inclusions_ws(&ws, &cfg, &opts, Some(&background))?;
        let phi1 = combine(&[&out.field, &background], &[1.0, -1.0])?;
        group_sums[s % g].add(&phi1.values);
        m2.add_squared(&phi1.values);
    }
    let mut mean = GridField::zeros(&ws.mask);
    {
        let mut total = KahanField::new(len);
        for gs in &group_sums {
            total.add(&gs.sum);
        }
        for i in 0..len {
            mean.values[i] = total.sum[i] / samples as f64;
        }
    }
    let mut m2_field = GridField::zeros(&ws.mask);
    for i in 0..len {
        m2_field.values[i] = m2.sum[i] / samples as f64;
    }
    let estimate = EnsembleEstimate {
        mean_field: mean,
        second_moment_field: m2_field,
        sample_count: samples,
        seed_base: seed,
        group_means: group_sums
            .iter()
            .map(|gs| {
                let mut f = GridField::zeros(&ws.mask);
                for i in 0..len {
                    f.values[i] = gs.sum[i] / gs.count.max(1) as f64;
                }
                f
            })
            .collect(),
        group_sizes: group_sums.iter().map(|gs| gs.count).collect(),
    };

    // Reference: w = Linv div(F), F = 3 beta a grad(phi_bar).
    let beta = beta_field(domain, epsilon, n_equiv, &ws.mask);
    let grads = gradient(&background)?;
    let a_field = ws.conductivity_field();
    let mut flux = [
        GridField::zeros(&ws.mask),
        GridField::zeros(&ws.mask),
        GridField::zeros(&ws.mask),
    ];
    for (axis, fx) in flux.iter_mut().enumerate() {
        for i in 0..len {
            fx.values[i] = 3.0 * beta.values[i] * a_field.values[i] * grads[axis].values[i];
        }
    }
    let w = apply_inverse_l_ws(&ws, &flux)?;
    let reference_h1 = norms(&w, None)?.h1;

    let scale = n_equiv as f64;
    let deviation = combine(&[&estimate.mean_field, &w], &[scale, 1.0])?;
    let deviation_h1 = norms(&deviation, None)?.h1;
    let stderr = jackknife_stderr(&estimate, |m| {
        let dev = combine(&[m, &w], &[scale, 1.0]).unwrap();
        norms(&dev, None).map(|n| n.h1).unwrap_or(f64::NAN)
    })?;

    Ok(LinearizedReport {
        beta_bar,
        epsilon,
        n_equivalent: n_equiv,
        samples,
        deviation_h1,
        reference_h1,
        ratio: deviation_h1 / reference_h1,
        stderr,
    })
}

/// epsilon(beta_bar) = coeff * beta_bar^exponent.
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonRule {
    pub coeff: f64,
    pub exponent: f64,
}

impl Default for EpsilonRule {
    fn default() -> Self {
        EpsilonRule {
            coeff: 0.3,
            exponent: 0.5,
        }
    }
}

impl EpsilonRule {
    pub fn epsilon(&self, beta_bar: f64) -> f64 {
        self.coeff * beta_bar.powf(self.exponent)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub beta_bar: f64,
    pub epsilon: f64,
    pub n: usize,
    pub samples: usize,
    pub err_effective: f64,
    pub err_background: f64,
    pub ratio: f64,
    pub stderr: f64,
    pub stderr_background: f64,
    pub dilute_window_warning: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    /// Fitted exponent of err_effective vs beta_bar.
    pub fitted_exponent: f64,
    pub fit_residual: f64,
    /// Fitted exponent of err_background vs beta_bar.
    pub background_exponent: f64,
    pub complete: bool,
}

impl StudyReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "beta_bar,epsilon,n,samples,err_effective,err_background,ratio,stderr,stderr_background\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:.17e},{:.17e},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.beta_bar,
                r.epsilon,
                r.n,
                r.samples,
                r.err_effective,
                r.err_background,
                r.ratio,
                r.stderr,
                r.stderr_background
            ));
        }
        out
    }

    pub fn fits(&self) -> (LogLogFit, LogLogFit) {
        let betas: Vec<f64> = self.rows.iter().map(|r| r.beta_bar).collect();
        let eff: Vec<f64> = self.rows.iter().map(|r| r.err_effective).collect();
        let bg: Vec<f64> = self.rows.iter().map(|r| r.err_background).collect();
        (log_log_fit(&betas, &eff), log_log_fit(&betas, &bg))
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Descending volume fractions.
    pub beta_bars: Vec<f64>,
    /// Samples per row (last entry repeats if shorter than beta_bars).
    pub samples: Vec<usize>,
    pub epsilon_rule: EpsilonRule,
    /// h = epsilon / h_divisor.
    pub h_divisor: f64,
    pub seed: u64,
    /// Jackknife group count.
    pub groups: usize,
    /// Dilute-window constant for the sanity warning.
    pub c_regime: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            beta_bars: vec![0.02, 0.01, 0.005, 0.0025],
            samples: vec![200],
            epsilon_rule: EpsilonRule::default(),
            h_divisor: 4.0,
            seed: 1,
            groups: 10,
            c_regime: 8.0,
        }
    }
}

/// Runs the scaling study: one Monte Carlo row per volume fraction, then
/// log-log fits of both error norms against the volume fraction.
pub fn run_study(domain: &DomainSpec, config: &StudyConfig) -> Result<StudyReport> {
    let mut rows = Vec::new();
    for (row_idx, beta_bar) in config.beta_bars.iter().enumerate() {
        let samples = *config
            .samples
            .get(row_idx)
            .or(config.samples.last())
            .unwrap_or(&200);
        let epsilon = config.epsilon_rule.epsilon(*beta_bar);
        let n = inclusion_count_for_fraction(domain, *beta_bar, epsilon);
        let h = epsilon / config.h_divisor;
        let regime = DiluteRegime::new(domain, epsilon, n, config.c_regime);
        let row_seed = rng::derive_seed(config.seed, row_idx as u64);

        let ws = SolverWorkspace::new(domain, h)?;
        let background = solve_background_ws(&ws)?.field;
        let estimate = expectation_field_ws(
            &ws,
            &background,
            epsilon,
            n,
            samples,
            row_seed,
            config.groups,
        )?;
        let beta = beta_field(domain, epsilon, n, &ws.mask);
        let ws_e =
            SolverWorkspace::with_mask(domain, ws.grid.clone(), ws.mask.clone(), Some(&beta))?;
        let phi_e = solve_background_ws(&ws_e)?.field;
        let report = theorem_error_with(&estimate, &phi_e, &background)?;

        rows.push(StudyRow {
            beta_bar: *beta_bar,
            epsilon,
            n,
            samples,
            err_effective: report.err_effective,
            err_background: report.err_background,
            ratio: report.ratio,
            stderr: report.stderr,
            stderr_background: report.stderr_background,
            dilute_window_warning: regime.window_warning(),
        });
    }

    let betas: Vec<f64> = rows.iter().map(|r| r.beta_bar).collect();
    let eff: Vec<f64> = rows.iter().map(|r| r.err_effective).collect();
    let bg: Vec<f64> = rows.iter().map(|r| r.err_background).collect();
    let fit_eff = log_log_fit(&betas, &eff);
    let fit_bg = log_log_fit(&betas, &bg);

    Ok(StudyReport {
        rows,
        fitted_exponent: fit_eff.slope,
        fit_residual: fit_eff.residual,
        background_exponent: fit_bg.slope,
        complete: true,
    })
}
