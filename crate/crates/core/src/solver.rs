//! Conservative finite-difference solver for the variable-coefficient
//! conduction problems.
//!
//! Discretization: 7-point finite volumes with harmonic-mean face
//! conductivities on a cell-centered grid; every row is scaled by the cell
//! volume so the matrix is the gradient of the discrete energy
//! `sum_faces c * (jump)^2` with `c = a * h` (and `c = a * h / theta` on cut
//! faces). Perfectly conducting inclusions are realized by merging all nodes
//! inside a sphere into one unknown; the merged row is the sum of the cut
//! fluxes into the sphere, which enforces the discrete zero-net-flux
//! condition by construction. Links crossing a sphere surface or the domain
//! boundary are shortened to the exact crossing point, which keeps the
//! staircase error well below the quantities the scaling studies measure.
//!
//! The linear solver is conjugate gradient with a diagonal preconditioner;
//! every reduction is chunk-deterministic, so results are bit-identical for
//! any worker count.

use crate::domain::{DomainSpec, InclusionConfiguration, Shape};
use crate::error::{CmError, Result};
use crate::expr::Expr;
use crate::field::{surface_flux, DomainMask, Grid, GridField};
use crate::geom::{self, Vec3};
use crate::quad;
use crate::reduce;
use rayon::prelude::*;
use std::sync::{Arc, OnceLock};

const THETA_MIN: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SolverOpts {
    /// CG stops when ||r|| / ||b|| falls below this.
    pub rel_tol: f64,
    /// Defaults to 50 * (grid nodes)^(1/3).
    pub max_iters: Option<usize>,
    /// Realize inclusions by a large finite conductivity instead of merging
    /// (cross-check mode).
    pub penalty: Option<f64>,
}

impl Default for SolverOpts {
    fn default() -> Self {
        SolverOpts {
            rel_tol: 1e-10,
            max_iters: None,
            penalty: None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LinearSystemStats {
    pub unknown_count: usize,
    pub nonzeros: usize,
    pub cg_iterations: usize,
    pub final_relative_residual: f64,
}

/// Solution of one boundary-value problem.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub field: GridField,
    pub inclusion_constants: Vec<f64>,
    /// Discrete energy of the minimized functional (face-based, includes
    /// boundary terms).
    pub dirichlet_energy: f64,
    /// A-posteriori quadrature flux through each inclusion surface.
    pub flux_residuals: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub stats: LinearSystemStats,
}

const KIND_DEAD: u8 = 0;
const KIND_REGULAR: u8 = 1;
const KIND_IRREGULAR: u8 = 2;
const KIND_REP: u8 = 3;
const KIND_MEMBER: u8 = 4;

#[derive(Debug, Clone)]
struct Row {
    node: u32,
    diag: f64,
    rhs: f64,
    links: Vec<(u32, f64)>,
}

enum Coeff {
    /// a == 1 everywhere: every full face has coefficient `h`.
    Uniform(f64),
    /// `faces[axis][i]` couples node `i` and its +axis neighbor.
    PerFace([Vec<f64>; 3]),
}

/// Reusable per-(domain, h) state: mask, base classification, and the
/// domain-boundary rows of the inclusion-free problem.
pub struct SolverWorkspace {
    pub domain: DomainSpec,
    pub grid: Grid,
    pub mask: Arc<DomainMask>,
    /// Optional per-node conductivity multiplier (effective medium, penalty).
    cond_scale: Vec<f64>,
    coeff: Coeff,
    base_kind: Vec<u8>,
    base_rows: Vec<Row>,
    base_diag: Vec<f64>,
    base_rhs: Vec<f64>,
    base_energy_const: f64,
    /// Non-dead index runs for span-limited vector kernels.
    spans: Vec<(usize, usize)>,
    a_field: OnceLock<GridField>,
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Crossing parameter t in (0, 1] where the axis-aligned segment of length h
/// from `from` crosses the domain boundary.
fn domain_crossing(domain: &DomainSpec, from: Vec3, axis: usize, step: f64) -> f64 {
    match domain.shape {
        Shape::UnitBall { radius } => {
            let b = from[axis] * step;
            let c = geom::dot(from, from) - radius * radius;
            let a = step * step;
            let disc = (b * b - a * c).max(0.0).sqrt();
            ((-b + disc) / a).clamp(0.0, 1.0)
        }
        Shape::Box { extents } => {
            let target = if step > 0.0 { extents[axis] } else { 0.0 };
            ((target - from[axis]) / step).clamp(0.0, 1.0)
        }
    }
}

/// Crossing parameter t in (0, 1] where the segment from an exterior point
/// enters `B(center, eps)`.
fn sphere_crossing(center: Vec3, eps: f64, from: Vec3, axis: usize, step: f64) -> f64 {
    let d = geom::sub(from, center);
    let b = d[axis] * step;
    let a = step * step;
    let c = geom::dot(d, d) - eps * eps;
    let disc = (b * b - a * c).max(0.0).sqrt();
    ((-b - disc) / a).clamp(0.0, 1.0)
}

impl SolverWorkspace {
    pub fn new(domain: &DomainSpec, h: f64) -> Result<SolverWorkspace> {
        Self::with_beta(domain, h, None)
    }

    /// Workspace for the effective-medium coefficient `a (1 + 3 beta)`.
    /// A constant beta is dropped algebraically: the multiplier cancels in
    /// the homogeneous equation, keeping the system bit-identical to the
    /// background one.
    pub fn with_beta(
        domain: &DomainSpec,
        h: f64,
        beta: Option<&GridField>,
    ) -> Result<SolverWorkspace> {
        let grid = Grid::for_domain(domain, h);
        for (axis, n) in grid.dims.iter().enumerate() {
            if *n < 3 {
                return Err(CmError::DegenerateGrid { axis, nodes: *n });
            }
        }
        let mask = Arc::new(DomainMask::build(domain, &grid));
        Self::with_mask(domain, grid, mask, beta)
    }

    pub fn with_mask(
        domain: &DomainSpec,
        grid: Grid,
        mask: Arc<DomainMask>,
        beta: Option<&GridField>,
    ) -> Result<SolverWorkspace> {
        let a_const = domain.conductivity.as_constant();
        let cond_scale: Vec<f64> = match beta {
            None => Vec::new(),
            Some(b) => {
                if !b.grid.same_geometry(&grid) {
                    return Err(CmError::GridMismatch("beta field grid".into()));
                }
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (v, m) in b.values.iter().zip(&mask.interior) {
                    if *m {
                        lo = lo.min(*v);
                        hi = hi.max(*v);
                    }
                }
                if lo < -1e-13 || hi > 1.0 / 3.0 {
                    return Err(CmError::Invalid(format!(
                        "beta field out of range [{lo}, {hi}]"
                    )));
                }
                if lo == hi {
                    Vec::new()
                } else {
                    b.values.iter().map(|v| 1.0 + 3.0 * v).collect()
                }
            }
        };
        Self::assemble(domain, grid, mask, cond_scale, a_const)
    }

    fn assemble(
        domain: &DomainSpec,
        grid: Grid,
        mask: Arc<DomainMask>,
        cond_scale: Vec<f64>,
        a_const: Option<f64>,
    ) -> Result<SolverWorkspace> {
        let n = grid.len();

        // Ellipticity check at grid resolution.
        if let Some(c) = a_const {
            if c < domain.lambda_min || c > domain.lambda_max {
                return Err(CmError::ConductivityBound {
                    x: [0.0; 3],
                    value: c,
                    lo: domain.lambda_min,
                    hi: domain.lambda_max,
                });
            }
        } else {
            for idx in 0..n {
                if mask.interior[idx] {
                    let (i, j, k) = grid.decompose(idx);
                    let p = grid.pos(i, j, k);
                    let a = domain.conductivity.eval(p);
                    if !a.is_finite() || a < domain.lambda_min || a > domain.lambda_max {
                        return Err(CmError::ConductivityBound {
                            x: p,
                            value: a,
                            lo: domain.lambda_min,
                            hi: domain.lambda_max,
                        });
                    }
                }
            }
        }

        let uniform = a_const == Some(1.0) && cond_scale.is_empty();
        let h = grid.h;
        let coeff = if uniform {
            Coeff::Uniform(h)
        } else {
            let strides = [1usize, grid.dims[0], grid.dims[0] * grid.dims[1]];
            let node_a = |idx: usize| -> f64 {
                let (i, j, k) = grid.decompose(idx);
                let base = match a_const {
                    Some(c) => c,
                    None => domain.conductivity.eval(grid.pos(i, j, k)),
                };
                if cond_scale.is_empty() {
                    base
                } else {
                    base * cond_scale[idx]
                }
            };
            let mut faces = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            for (axis, face) in faces.iter_mut().enumerate() {
                let stride = strides[axis];
                let dims = grid.dims;
                let mask_ref = &mask;
                face.par_iter_mut().enumerate().for_each(|(idx, f)| {
                    let (i, j, k) = grid.decompose(idx);
                    if [i, j, k][axis] + 1 >= dims[axis] {
                        return;
                    }
                    let jdx = idx + stride;
                    if mask_ref.interior[idx] && mask_ref.interior[jdx] {
                        *f = harmonic_mean(node_a(idx), node_a(jdx)) * h;
                    }
                });
            }
            Coeff::PerFace(faces)
        };

        let mut ws = SolverWorkspace {
            domain: domain.clone(),
            grid,
            mask,
            cond_scale,
            coeff,
            base_kind: Vec::new(),
            base_rows: Vec::new(),
            base_diag: Vec::new(),
            base_rhs: Vec::new(),
            base_energy_const: 0.0,
            spans: Vec::new(),
            a_field: OnceLock::new(),
        };
        ws.classify_base();
        Ok(ws)
    }

    #[inline]
    fn face_coeff(&self, idx: usize, axis: usize) -> f64 {
        match &self.coeff {
            Coeff::Uniform(c) => *c,
            Coeff::PerFace(f) => f[axis][idx],
        }
    }

    /// Conductivity at an arbitrary point, including the multiplier of the
    /// nearest node (used on cut faces).
    fn point_a(&self, near_idx: usize, p: Vec3) -> f64 {
        let base = self.domain.conductivity.eval(p);
        if self.cond_scale.is_empty() {
            base
        } else {
            base * self.cond_scale[near_idx]
        }
    }

    fn classify_base(&mut self) {
        let grid = self.grid.clone();
        let n = grid.len();
        let strides = [1usize, grid.dims[0], grid.dims[0] * grid.dims[1]];
        let mut kind = vec![KIND_DEAD; n];
        let interior = &self.mask.interior;

        kind.par_iter_mut().enumerate().for_each(|(idx, kd)| {
            if !interior[idx] {
                return;
            }
            let (i, j, kz) = grid.decompose(idx);
            let coords = [i, j, kz];
            let mut regular = true;
            for axis in 0..3 {
                for dir in [-1i64, 1] {
                    let c = coords[axis] as i64 + dir;
                    if c < 0 || c as usize >= grid.dims[axis] {
                        regular = false;
                        continue;
                    }
                    let jdx = (idx as i64 + dir * strides[axis] as i64) as usize;
                    if !interior[jdx] {
                        regular = false;
                    }
                }
            }
            *kd = if regular { KIND_REGULAR } else { KIND_IRREGULAR };
        });

        let mut diag = vec![1.0; n];
        let mut rhs = vec![0.0; n];
        let mut rows = Vec::new();
        let mut energy_const = 0.0;
        let f_expr = self.domain.boundary_data.clone();
        for idx in 0..n {
            if kind[idx] == KIND_DEAD {
                continue;
            }
            let (i, j, kz) = grid.decompose(idx);
            let p = grid.pos(i, j, kz);
            let coords = [i, j, kz];
            if kind[idx] == KIND_REGULAR {
                let mut d = 0.0;
                for axis in 0..3 {
                    d += self.face_coeff(idx, axis);
                    d += self.face_coeff(idx - strides[axis], axis);
                }
                diag[idx] = d;
                continue;
            }
            let mut row = Row {
                node: idx as u32,
                diag: 0.0,
                rhs: 0.0,
                links: Vec::new(),
            };
            for axis in 0..3 {
                for dir in [-1i64, 1] {
                    let c = coords[axis] as i64 + dir;
                    let step = dir as f64 * grid.h;
                    let in_grid = c >= 0 && (c as usize) < grid.dims[axis];
                    let jdx = if in_grid {
                        Some((idx as i64 + dir * strides[axis] as i64) as usize)
                    } else {
                        None
                    };
                    match jdx {
                        Some(j_idx) if interior[j_idx] => {
                            let face_idx = if dir > 0 { idx } else { j_idx };
                            let cf = self.face_coeff(face_idx, axis);
                            row.diag += cf;
                            row.links.push((j_idx as u32, cf));
                        }
                        _ => {
                            let theta =
                                domain_crossing(&self.domain, p, axis, step).max(THETA_MIN);
                            let mut cross = p;
                            cross[axis] += theta * step;
                            let mut mid = p;
                            mid[axis] += 0.5 * theta * step;
                            let a = self.point_a(idx, mid);
                            let cf = a * grid.h / theta;
                            let g = f_expr.eval(cross);
                            row.diag += cf;
                            row.rhs += cf * g;
                            energy_const += cf * g * g;
                        }
                    }
                }
            }
            diag[idx] = row.diag;
            rhs[idx] = row.rhs;
            rows.push(row);
        }

        let mut spans = Vec::new();
        let mut idx = 0usize;
        while idx < n {
            if kind[idx] == KIND_DEAD {
                idx += 1;
                continue;
            }
            let start = idx;
            let line_end = (idx / grid.dims[0] + 1) * grid.dims[0];
            while idx < line_end && kind[idx] != KIND_DEAD {
                idx += 1;
            }
            spans.push((start, idx - start));
        }

        self.base_kind = kind;
        self.base_rows = rows;
        self.base_diag = diag;
        self.base_rhs = rhs;
        self.base_energy_const = energy_const;
        self.spans = spans;
    }

    /// The conductivity sampled as a field (cached; no effective multiplier).
    pub fn conductivity_field(&self) -> &GridField {
        self.a_field.get_or_init(|| {
            let a = self.domain.conductivity.clone();
            GridField::from_fn(&self.mask, move |p| a.eval(p))
        })
    }
}

enum InclusionMode {
    /// Equipotential with unknown constants (the physical problem).
    Merged,
    /// Equipotential tied to a fixed value (capacity problems).
    Fixed(f64),
}

struct System<'a> {
    ws: &'a SolverWorkspace,
    kind: Vec<u8>,
    incl_of: Vec<i32>,
    rows: Vec<Row>,
    diag: Vec<f64>,
    rhs: Vec<f64>,
    energy_const: f64,
    /// Representative node per inclusion, canonical (sorted-center) order;
    /// u32::MAX when inclusions are fixed-valued.
    reps: Vec<u32>,
    /// Input index of each canonical slot.
    canon_to_input: Vec<usize>,
    unknown_count: usize,
    nonzeros: usize,
    /// Runs of consecutive regular nodes (stencil fast path).
    regular_spans: Vec<(u32, u32)>,
    /// Runs of consecutive unknown nodes (regular, irregular, rep).
    unknown_spans: Vec<(u32, u32)>,
}

fn build_system<'a>(
    ws: &'a SolverWorkspace,
    config: Option<&InclusionConfiguration>,
    mode: InclusionMode,
) -> Result<System<'a>> {
    let grid = &ws.grid;
    let n = grid.len();
    let strides = [1usize, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let h = grid.h;

    let mut kind = ws.base_kind.clone();
    let mut diag = ws.base_diag.clone();
    let mut rhs = ws.base_rhs.clone();
    let mut energy_const = ws.base_energy_const;

    let n_incl = config.map_or(0, |c| c.n());
    let eps = config.map_or(0.0, |c| c.epsilon);
    if n_incl > 0 && eps < 4.0 * h {
        return Err(CmError::UnderResolvedInclusion {
            epsilon: eps,
            min: 4.0 * h,
        });
    }

    // Canonical inclusion order: independent of input permutation.
    let mut canon_to_input: Vec<usize> = (0..n_incl).collect();
    let centers: Vec<Vec3> = match config {
        Some(cfg) => {
            canon_to_input.sort_by(|a, b| geom::lex_cmp(&cfg.centers[*a], &cfg.centers[*b]));
            canon_to_input.iter().map(|i| cfg.centers[*i]).collect()
        }
        None => Vec::new(),
    };

    let mut incl_of = vec![-1i32; if n_incl == 0 { 0 } else { n }];
    let mut reps = vec![u32::MAX; n_incl];
    for (ki, center) in centers.iter().enumerate() {
        let c = grid.to_node_coords(*center);
        let r = eps / h;
        let lo = |v: f64| (v - r - 1.0).floor().max(0.0) as usize;
        let hi = |v: f64, d: usize| ((v + r).ceil() as usize).min(d.saturating_sub(1));
        let mut best = (f64::INFINITY, u32::MAX);
        for k in lo(c[2])..=hi(c[2], grid.dims[2]) {
            for j in lo(c[1])..=hi(c[1], grid.dims[1]) {
                for i in lo(c[0])..=hi(c[0], grid.dims[0]) {
                    let idx = grid.idx(i, j, k);
                    let p = grid.pos(i, j, k);
                    let d = geom::dist(p, *center);
                    if d <= eps && ws.mask.interior[idx] {
                        incl_of[idx] = ki as i32;
                        kind[idx] = KIND_MEMBER;
                        if d < best.0 {
                            best = (d, idx as u32);
                        }
                    }
                }
            }
        }
        if best.1 == u32::MAX {
            return Err(CmError::UnderResolvedInclusion {
                epsilon: eps,
                min: 4.0 * h,
            });
        }
        reps[ki] = best.1;
    }

    // Member nodes stop being unknowns: zero their carried base row data.
    if n_incl > 0 {
        for idx in 0..n {
            if kind[idx] == KIND_MEMBER {
                diag[idx] = 1.0;
                rhs[idx] = 0.0;
            }
        }
    }

    // Fluid nodes adjacent to members get rebuilt rows.
    let mut affected: Vec<usize> = Vec::new();
    if n_incl > 0 {
        let mut seen = vec![false; n];
        for idx in 0..n {
            if kind[idx] != KIND_MEMBER {
                continue;
            }
            let (i, j, k) = grid.decompose(idx);
            let coords = [i, j, k];
            for axis in 0..3 {
                for dir in [-1i64, 1] {
                    let c = coords[axis] as i64 + dir;
                    if c < 0 || c as usize >= grid.dims[axis] {
                        continue;
                    }
                    let jdx = (idx as i64 + dir * strides[axis] as i64) as usize;
                    if (kind[jdx] == KIND_REGULAR || kind[jdx] == KIND_IRREGULAR) && !seen[jdx] {
                        seen[jdx] = true;
                        affected.push(jdx);
                    }
                }
            }
        }
        affected.sort_unstable();
    }

    let mut rows: Vec<Row> =
        Vec::with_capacity(ws.base_rows.len() + affected.len() + centers.len());
    {
        let rebuild: std::collections::HashSet<u32> = affected.iter().map(|i| *i as u32).collect();
        for r in &ws.base_rows {
            if kind[r.node as usize] == KIND_MEMBER {
                continue;
            }
            if !rebuild.contains(&r.node) {
                rows.push(r.clone());
            }
        }
    }

    let f_expr = ws.domain.boundary_data.clone();
    let mut rep_rows: Vec<Row> = reps
        .iter()
        .map(|r| Row {
            node: *r,
            diag: 0.0,
            rhs: 0.0,
            links: Vec::new(),
        })
        .collect();

    for &idx in &affected {
        kind[idx] = KIND_IRREGULAR;
        let (i, j, kz) = grid.decompose(idx);
        let p = grid.pos(i, j, kz);
        let coords = [i, j, kz];
        let mut row = Row {
            node: idx as u32,
            diag: 0.0,
            rhs: 0.0,
            links: Vec::new(),
        };
        for axis in 0..3 {
            for dir in [-1i64, 1] {
                let c = coords[axis] as i64 + dir;
                let step = dir as f64 * h;
                let in_grid = c >= 0 && (c as usize) < grid.dims[axis];
                let jdx = if in_grid {
                    Some((idx as i64 + dir * strides[axis] as i64) as usize)
                } else {
                    None
                };
                match jdx {
                    Some(j_idx)
                        if kind[j_idx] == KIND_MEMBER || kind[j_idx] == KIND_REP =>
                    {
                        let ki = incl_of[j_idx] as usize;
                        let theta =
                            sphere_crossing(centers[ki], eps, p, axis, step).max(THETA_MIN);
                        let mut mid = p;
                        mid[axis] += 0.5 * theta * step;
                        let a = ws.point_a(idx, mid);
                        let cf = a * h / theta;
                        row.diag += cf;
                        match mode {
                            InclusionMode::Merged => {
                                let rep = reps[ki];
                                row.links.push((rep, cf));
                                rep_rows[ki].diag += cf;
                                rep_rows[ki].links.push((idx as u32, cf));
                            }
                            InclusionMode::Fixed(g) => {
                                row.rhs += cf * g;
                                energy_const += cf * g * g;
                            }
                        }
                    }
                    Some(j_idx) if kind[j_idx] != KIND_DEAD => {
                        let face_idx = if dir > 0 { idx } else { j_idx };
                        let cf = ws.face_coeff(face_idx, axis);
                        row.diag += cf;
                        row.links.push((j_idx as u32, cf));
                    }
                    _ => {
                        let theta = domain_crossing(&ws.domain, p, axis, step).max(THETA_MIN);
                        let mut cross = p;
                        cross[axis] += theta * step;
                        let mut mid = p;
                        mid[axis] += 0.5 * theta * step;
                        let a = ws.point_a(idx, mid);
                        let cf = a * h / theta;
                        let g = f_expr.eval(cross);
                        row.diag += cf;
                        row.rhs += cf * g;
                        energy_const += cf * g * g;
                    }
                }
            }
        }
        diag[idx] = row.diag;
        rhs[idx] = row.rhs;
        rows.push(row);
    }

    // Conductor surface to domain wall: direct gap links where a member node
    // abuts the boundary (the sphere may touch the wall).
    if n_incl > 0 {
        for idx in 0..n {
            if kind[idx] != KIND_MEMBER {
                continue;
            }
            let (i, j, kz) = grid.decompose(idx);
            let coords = [i, j, kz];
            let p = grid.pos(i, j, kz);
            let ki = incl_of[idx] as usize;
            for axis in 0..3 {
                for dir in [-1i64, 1] {
                    let c = coords[axis] as i64 + dir;
                    let step = dir as f64 * h;
                    let in_grid = c >= 0 && (c as usize) < grid.dims[axis];
                    let outside = !in_grid || {
                        let jdx = (idx as i64 + dir * strides[axis] as i64) as usize;
                        !ws.mask.interior[jdx]
                    };
                    if !outside {
                        continue;
                    }
                    let t_wall = domain_crossing(&ws.domain, p, axis, step);
                    let d = geom::sub(p, centers[ki]);
                    let b = d[axis] * step;
                    let aq = step * step;
                    let cq = geom::dot(d, d) - eps * eps;
                    let disc = (b * b - aq * cq).max(0.0).sqrt();
                    let t_sphere = ((-b + disc) / aq).clamp(0.0, 1.0);
                    let gap = (t_wall - t_sphere).max(THETA_MIN);
                    let mut cross = p;
                    cross[axis] += t_wall * step;
                    let mut mid = p;
                    mid[axis] += 0.5 * (t_wall + t_sphere) * step;
                    let a = ws.point_a(idx, mid);
                    let cf = a * h / gap;
                    let g = f_expr.eval(cross);
                    match mode {
                        InclusionMode::Merged => {
                            rep_rows[ki].diag += cf;
                            rep_rows[ki].rhs += cf * g;
                            energy_const += cf * g * g;
                        }
                        InclusionMode::Fixed(gv) => {
                            energy_const += cf * (gv - g) * (gv - g);
                        }
                    }
                }
            }
        }
    }

    match mode {
        InclusionMode::Merged => {
            for (ki, mut row) in rep_rows.into_iter().enumerate() {
                let rep = reps[ki] as usize;
                kind[rep] = KIND_REP;
                diag[rep] = row.diag.max(f64::MIN_POSITIVE);
                rhs[rep] = row.rhs;
                row.diag = diag[rep];
                row.links.sort_by_key(|l| l.0);
                rows.push(row);
            }
        }
        InclusionMode::Fixed(_) => {
            for r in &mut reps {
                *r = u32::MAX;
            }
        }
    }

    rows.sort_by_key(|r| r.node);
    let nonzeros: usize = rows.iter().map(|r| r.links.len() + 1).sum();
    let unknown_count = kind
        .iter()
        .filter(|k| **k == KIND_REGULAR || **k == KIND_IRREGULAR || **k == KIND_REP)
        .count();

    // Span sets for branch-free kernels.
    let mut regular_spans = Vec::new();
    let mut unknown_spans = Vec::new();
    for &(start, len) in &ws.spans {
        let mut i = start;
        let end = start + len;
        while i < end {
            match kind[i] {
                KIND_REGULAR => {
                    let s0 = i;
                    while i < end && kind[i] == KIND_REGULAR {
                        i += 1;
                    }
                    regular_spans.push((s0 as u32, (i - s0) as u32));
                }
                _ => i += 1,
            }
        }
        let mut i = start;
        while i < end {
            let unknown = matches!(kind[i], KIND_REGULAR | KIND_IRREGULAR | KIND_REP);
            if unknown {
                let s0 = i;
                while i < end
                    && matches!(kind[i], KIND_REGULAR | KIND_IRREGULAR | KIND_REP)
                {
                    i += 1;
                }
                unknown_spans.push((s0 as u32, (i - s0) as u32));
            } else {
                i += 1;
            }
        }
    }

    Ok(System {
        ws,
        kind,
        incl_of,
        rows,
        diag,
        rhs,
        energy_const,
        reps,
        canon_to_input,
        unknown_count,
        nonzeros,
        regular_spans,
        unknown_spans,
    })
}

impl System<'_> {
    /// y = A x; returns the deterministic dot(x, y). Entries of `y` at
    /// member/dead nodes are never written and must be zero on entry.
    fn matvec(&self, x: &[f64], y: &mut [f64]) -> f64 {
        let grid = &self.ws.grid;
        let nx = grid.dims[0];
        let plane = nx * grid.dims[1];
        let diag = &self.diag;
        let coeff = &self.ws.coeff;

        let yv = UnsafeSlice::new(y);
        let partials: Vec<f64> = self
            .regular_spans
            .par_chunks(64)
            .map(|chunk| {
                let mut dot = 0.0;
                for &(start, len) in chunk {
                    let (start, len) = (start as usize, len as usize);
                    match coeff {
                        Coeff::Uniform(c) => {
                            for idx in start..start + len {
                                let s = x[idx - 1]
                                    + x[idx + 1]
                                    + x[idx - nx]
                                    + x[idx + nx]
                                    + x[idx - plane]
                                    + x[idx + plane];
                                let v = c * (6.0 * x[idx] - s);
                                unsafe { yv.write(idx, v) };
                                dot += x[idx] * v;
                            }
                        }
                        Coeff::PerFace(f) => {
                            for idx in start..start + len {
                                let v = diag[idx] * x[idx]
                                    - f[0][idx - 1] * x[idx - 1]
                                    - f[0][idx] * x[idx + 1]
                                    - f[1][idx - nx] * x[idx - nx]
                                    - f[1][idx] * x[idx + nx]
                                    - f[2][idx - plane] * x[idx - plane]
                                    - f[2][idx] * x[idx + plane];
                                unsafe { yv.write(idx, v) };
                                dot += x[idx] * v;
                            }
                        }
                    }
                }
                dot
            })
            .collect();
        let mut dot: f64 = partials.iter().sum();

        let vals: Vec<f64> = self
            .rows
            .par_iter()
            .map(|row| {
                let mut v = row.diag * x[row.node as usize];
                for (col, c) in &row.links {
                    v -= c * x[*col as usize];
                }
                v
            })
            .collect();
        for (row, v) in self.rows.iter().zip(&vals) {
            y[row.node as usize] = *v;
            dot += x[row.node as usize] * v;
        }
        dot
    }

    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        let partials: Vec<f64> = self
            .unknown_spans
            .par_chunks(64)
            .map(|chunk| {
                let mut s = 0.0;
                for &(start, len) in chunk {
                    let (start, len) = (start as usize, len as usize);
                    for i in start..start + len {
                        s += a[i] * b[i];
                    }
                }
                s
            })
            .collect();
        partials.iter().sum()
    }

    fn pcg(&self, x: &mut [f64], opts: &SolverOpts) -> Result<(usize, f64)> {
        let n = x.len();
        let b = &self.rhs;
        let bnorm = self.dot(b, b).sqrt();
        if bnorm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok((0, 0.0));
        }
        let max_iters = opts
            .max_iters
            .unwrap_or_else(|| (50.0 * (self.ws.grid.len() as f64).cbrt()) as usize);

        let mut r = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut p = vec![0.0; n];

        self.matvec(x, &mut q);
        {
            let rr = UnsafeSlice::new(&mut r);
            let pp = UnsafeSlice::new(&mut p);
            let diag = &self.diag;
            let q_ref = &q;
            self.unknown_spans.par_iter().for_each(|&(start, len)| {
                let (start, len) = (start as usize, len as usize);
                for i in start..start + len {
                    unsafe {
                        let v = b[i] - q_ref[i];
                        rr.write(i, v);
                        pp.write(i, v / diag[i]);
                    }
                }
            });
        }
        let mut rz = {
            let diag = &self.diag;
            let r_ref = &r;
            let partials: Vec<f64> = self
                .unknown_spans
                .par_chunks(64)
                .map(|chunk| {
                    let mut s = 0.0;
                    for &(start, len) in chunk {
                        let (start, len) = (start as usize, len as usize);
                        for i in start..start + len {
                            s += r_ref[i] * r_ref[i] / diag[i];
                        }
                    }
                    s
                })
                .collect();
            partials.iter().sum::<f64>()
        };
        let mut rnorm = self.dot(&r, &r).sqrt();
        let mut iterations = 0;

        while rnorm / bnorm > opts.rel_tol {
            if iterations >= max_iters {
                return Err(CmError::NonConvergence {
                    iterations,
                    residual: rnorm / bnorm,
                });
            }
            let pq = self.matvec(&p, &mut q);
            let alpha = rz / pq;
            let (new_rz, rr_sq) = {
                let xv = UnsafeSlice::new(x);
                let rv = UnsafeSlice::new(&mut r);
                let diag = &self.diag;
                let p_ref = &p;
                let q_ref = &q;
                let partials: Vec<(f64, f64)> = self
                    .unknown_spans
                    .par_chunks(64)
                    .map(|chunk| {
                        let mut s_rz = 0.0;
                        let mut s_rr = 0.0;
                        for &(start, len) in chunk {
                            let (start, len) = (start as usize, len as usize);
                            for i in start..start + len {
                                unsafe {
                                    xv.add(i, alpha * p_ref[i]);
                                    let rnew = rv.read(i) - alpha * q_ref[i];
                                    rv.write(i, rnew);
                                    s_rz += rnew * rnew / diag[i];
                                    s_rr += rnew * rnew;
                                }
                            }
                        }
                        (s_rz, s_rr)
                    })
                    .collect();
                let mut a = 0.0;
                let mut b2 = 0.0;
                for (u, v) in partials {
                    a += u;
                    b2 += v;
                }
                (a, b2)
            };
            let beta = new_rz / rz;
            rz = new_rz;
            rnorm = rr_sq.sqrt();
            {
                let pv = UnsafeSlice::new(&mut p);
                let diag = &self.diag;
                let r_ref = &r;
                self.unknown_spans.par_iter().for_each(|&(start, len)| {
                    let (start, len) = (start as usize, len as usize);
                    for i in start..start + len {
                        unsafe {
                            let v = r_ref[i] / diag[i] + beta * pv.read(i);
                            pv.write(i, v);
                        }
                    }
                });
            }
            iterations += 1;
        }
        Ok((iterations, rnorm / bnorm))
    }

    /// `x^T A x - 2 b^T x + const` for the assembled quadratic form.
    fn energy(&self, x: &[f64]) -> f64 {
        let mut q = vec![0.0; x.len()];
        let xax = self.matvec(x, &mut q);
        let bx = self.dot(&self.rhs, x);
        xax - 2.0 * bx + self.energy_const
    }
}

/// Shared-slice writer for disjoint parallel index ranges.
struct UnsafeSlice<'a> {
    ptr: *mut f64,
    _marker: std::marker::PhantomData<&'a mut [f64]>,
}
unsafe impl Sync for UnsafeSlice<'_> {}
impl<'a> UnsafeSlice<'a> {
    fn new(s: &'a mut [f64]) -> Self {
        UnsafeSlice {
            ptr: s.as_mut_ptr(),
            _marker: std::marker::PhantomData,
        }
    }
    #[inline]
    unsafe fn write(&self, i: usize, v: f64) {
        *self.ptr.add(i) = v;
    }
    #[inline]
    unsafe fn add(&self, i: usize, v: f64) {
        *self.ptr.add(i) += v;
    }
    #[inline]
    unsafe fn read(&self, i: usize) -> f64 {
        *self.ptr.add(i)
    }
}

fn finish_solve(
    ws: &SolverWorkspace,
    sys: &System,
    mut values: Vec<f64>,
    config: Option<&InclusionConfiguration>,
    member_value: Option<f64>,
    iterations: usize,
    residual: f64,
    compute_fluxes: bool,
) -> Result<SolveOutput> {
    let grid = &ws.grid;
    if config.map_or(0, |c| c.n()) > 0 {
        for idx in 0..grid.len() {
            if sys.kind[idx] == KIND_MEMBER {
                let ki = sys.incl_of[idx] as usize;
                values[idx] = match member_value {
                    Some(v) => v,
                    None => values[sys.reps[ki] as usize],
                };
            }
        }
    }
    let energy = sys.energy(&values);
    let field = GridField {
        grid: grid.clone(),
        values,
        mask: ws.mask.clone(),
    };

    let mut inclusion_constants = Vec::new();
    let mut flux_residuals = Vec::new();
    if let Some(cfg) = config {
        let mut constants = vec![0.0; cfg.n()];
        let mut fluxes = vec![0.0; cfg.n()];
        for (slot, input_idx) in sys.canon_to_input.iter().enumerate() {
            constants[*input_idx] = match member_value {
                Some(v) => v,
                None => field.values[sys.reps[slot] as usize],
            };
            if compute_fluxes {
                let pts = quad::flux_point_count(cfg.epsilon, grid.h);
                fluxes[*input_idx] = surface_flux(
                    &field,
                    ws.conductivity_field(),
                    cfg.centers[*input_idx],
                    cfg.epsilon,
                    pts,
                )
                .unwrap_or(f64::NAN);
            }
        }
        inclusion_constants = constants;
        flux_residuals = fluxes;
    }

    Ok(SolveOutput {
        field,
        inclusion_constants,
        dirichlet_energy: energy,
        flux_residuals,
        iterations,
        residual,
        stats: LinearSystemStats {
            unknown_count: sys.unknown_count,
            nonzeros: sys.nonzeros,
            cg_iterations: iterations,
            final_relative_residual: residual,
        },
    })
}

/// Background problem: no inclusions.
pub fn solve_background(domain: &DomainSpec, h: f64) -> Result<SolveOutput> {
    let ws = SolverWorkspace::new(domain, h)?;
    solve_background_ws(&ws)
}

pub fn solve_background_ws(ws: &SolverWorkspace) -> Result<SolveOutput> {
    let sys = build_system(ws, None, InclusionMode::Merged)?;
    let mut x = vec![0.0; ws.grid.len()];
    let opts = SolverOpts::default();
    let (iterations, residual) = sys.pcg(&mut x, &opts)?;
    finish_solve(ws, &sys, x, None, None, iterations, residual, false)
}

/// The constrained problem with perfectly conducting inclusions.
pub fn solve_with_inclusions(
    domain: &DomainSpec,
    config: &InclusionConfiguration,
    h: f64,
    opts: &SolverOpts,
) -> Result<SolveOutput> {
    let ws = SolverWorkspace::new(domain, h)?;
    solve_with_inclusions_ws(&ws, config, opts, None)
}

/// Same, with a reusable workspace and optional initial guess.
pub fn solve_with_inclusions_ws(
    ws: &SolverWorkspace,
    config: &InclusionConfiguration,
    opts: &SolverOpts,
    guess: Option<&GridField>,
) -> Result<SolveOutput> {
    config.validate(&ws.domain)?;
    if let Some(penalty) = opts.penalty {
        return solve_penalty(ws, config, penalty, opts);
    }
    let sys = build_system(ws, Some(config), InclusionMode::Merged)?;
    let mut x = vec![0.0; ws.grid.len()];
    if let Some(g) = guess {
        if g.grid.same_geometry(&ws.grid) {
            for (i, v) in x.iter_mut().enumerate() {
                if sys.kind[i] == KIND_REGULAR
                    || sys.kind[i] == KIND_IRREGULAR
                    || sys.kind[i] == KIND_REP
                {
                    *v = g.values[i];
                }
            }
        }
    }
    let (iterations, residual) = sys.pcg(&mut x, opts)?;
    finish_solve(ws, &sys, x, Some(config), None, iterations, residual, true)
}

/// Capacity-type solve: every inclusion surface held at `value` with the
/// workspace's boundary data on the outer wall. The output's
/// `dirichlet_energy` is the discrete value of the minimized functional.
pub fn solve_fixed_inclusions(
    ws: &SolverWorkspace,
    config: &InclusionConfiguration,
    value: f64,
) -> Result<SolveOutput> {
    config.validate(&ws.domain)?;
    let sys = build_system(ws, Some(config), InclusionMode::Fixed(value))?;
    let mut x = vec![0.0; ws.grid.len()];
    let opts = SolverOpts::default();
    let (iterations, residual) = sys.pcg(&mut x, &opts)?;
    finish_solve(
        ws,
        &sys,
        x,
        Some(config),
        Some(value),
        iterations,
        residual,
        true,
    )
}

/// Penalty-mode cross-check: inclusions as a large finite conductivity.
fn solve_penalty(
    ws: &SolverWorkspace,
    config: &InclusionConfiguration,
    penalty: f64,
    opts: &SolverOpts,
) -> Result<SolveOutput> {
    let grid = &ws.grid;
    let n = grid.len();
    let mut scale = vec![1.0f64; n];
    for idx in 0..n {
        let (i, j, k) = grid.decompose(idx);
        let p = grid.pos(i, j, k);
        if config
            .centers
            .iter()
            .any(|c| geom::dist(p, *c) <= config.epsilon)
        {
            scale[idx] = penalty;
        }
    }
    let a_const = ws.domain.conductivity.as_constant();
    let ws2 = SolverWorkspace::assemble(
        &ws.domain,
        grid.clone(),
        ws.mask.clone(),
        scale,
        a_const,
    )?;
    let sys = build_system(&ws2, None, InclusionMode::Merged)?;
    let mut x = vec![0.0; n];
    let (iterations, residual) = sys.pcg(&mut x, opts)?;
    let mut out = finish_solve(&ws2, &sys, x, None, None, iterations, residual, false)?;
    let constants = config.centers.iter().map(|c| out.field.interp(*c)).collect();
    out.inclusion_constants = constants;
    Ok(out)
}

/// Effective-medium problem with conductivity `a (1 + 3 beta)`.
pub fn solve_effective(domain: &DomainSpec, beta: &GridField, h: f64) -> Result<SolveOutput> {
    let ws = SolverWorkspace::with_beta(domain, h, Some(beta))?;
    solve_background_ws(&ws)
}

/// Solve `L w = div F` with `w = 0` on the boundary; `F` is a vector field
/// given per component on the workspace grid.
pub fn apply_inverse_l(domain: &DomainSpec, flux: &[GridField; 3], h: f64) -> Result<GridField> {
    let ws = SolverWorkspace::new(domain, h)?;
    apply_inverse_l_ws(&ws, flux)
}

pub fn apply_inverse_l_ws(ws: &SolverWorkspace, flux: &[GridField; 3]) -> Result<GridField> {
    for f in flux {
        if !f.grid.same_geometry(&ws.grid) {
            return Err(CmError::GridMismatch("flux field grid".into()));
        }
    }
    let grid = &ws.grid;
    let n = grid.len();
    let strides = [1usize, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let h = grid.h;
    let interior = &ws.mask.interior;
    // Cell flux balance: row_i(w) = oint_cell F . n ds, so
    // b_i = h^2 sum_faces (F . n_out); face values averaged, one-sided at
    // the boundary.
    let mut b = vec![0.0; n];
    b.par_iter_mut().enumerate().for_each(|(idx, bv)| {
        if !interior[idx] {
            return;
        }
        let (i, j, k) = grid.decompose(idx);
        let coords = [i, j, k];
        let mut div = 0.0;
        for axis in 0..3 {
            let fv = &flux[axis].values;
            for dir in [-1i64, 1] {
                let c = coords[axis] as i64 + dir;
                let in_grid = c >= 0 && (c as usize) < grid.dims[axis];
                let face_f = if in_grid {
                    let jdx = (idx as i64 + dir * strides[axis] as i64) as usize;
                    if interior[jdx] {
                        0.5 * (fv[idx] + fv[jdx])
                    } else {
                        fv[idx]
                    }
                } else {
                    fv[idx]
                };
                div += dir as f64 * face_f;
            }
        }
        *bv = h * h * div;
    });
    solve_zero_dirichlet(ws, b).map(|x| GridField {
        grid: grid.clone(),
        values: x,
        mask: ws.mask.clone(),
    })
}

fn solve_zero_dirichlet(ws: &SolverWorkspace, b: Vec<f64>) -> Result<Vec<f64>> {
    let zero_domain = DomainSpec {
        boundary_data: Expr::constant(0.0),
        ..ws.domain.clone()
    };
    let a_const = zero_domain.conductivity.as_constant();
    let ws0 = if ws.cond_scale.is_empty() && a_const == Some(1.0) {
        // Fast path: reuse classification by rebuilding with zero data.
        SolverWorkspace::assemble(&zero_domain, ws.grid.clone(), ws.mask.clone(), Vec::new(), a_const)?
    } else {
        SolverWorkspace::assemble(
            &zero_domain,
            ws.grid.clone(),
            ws.mask.clone(),
            ws.cond_scale.clone(),
            a_const,
        )?
    };
    let mut sys = build_system(&ws0, None, InclusionMode::Merged)?;
    sys.rhs = b;
    for row in &mut sys.rows {
        row.rhs = sys.rhs[row.node as usize];
    }
    let mut x = vec![0.0; ws.grid.len()];
    let opts = SolverOpts::default();
    sys.pcg(&mut x, &opts)?;
    Ok(x)
}

/// Solve `L G = delta_xi` with a unit load at the node nearest `xi`; the
/// right-hand side is the cell-volume scaling of a discrete delta. Returns
/// the column and the actual source node position.
pub fn solve_point_source(ws: &SolverWorkspace, xi: Vec3) -> Result<(GridField, Vec3)> {
    let grid = &ws.grid;
    let c = grid.to_node_coords(xi);
    let i = (c[0] - 0.5).round().clamp(0.0, (grid.dims[0] - 1) as f64) as usize;
    let j = (c[1] - 0.5).round().clamp(0.0, (grid.dims[1] - 1) as f64) as usize;
    let k = (c[2] - 0.5).round().clamp(0.0, (grid.dims[2] - 1) as f64) as usize;
    let idx = grid.idx(i, j, k);
    if !ws.mask.interior[idx] {
        return Err(CmError::Invalid(format!(
            "source point {xi:?} maps to an exterior node"
        )));
    }
    let mut b = vec![0.0; grid.len()];
    b[idx] = 1.0;
    let x = solve_zero_dirichlet(ws, b)?;
    Ok((
        GridField {
            grid: grid.clone(),
            values: x,
            mask: ws.mask.clone(),
        },
        grid.pos(i, j, k),
    ))
}

/// Midpoint-rule energy `int a |grad w|^2` over the masked region excluding
/// the listed spheres.
pub fn dirichlet_energy(
    field: &GridField,
    conductivity: &GridField,
    exclusions: &[(Vec3, f64)],
) -> Result<f64> {
    if !conductivity.grid.same_geometry(&field.grid) {
        return Err(CmError::GridMismatch("conductivity grid".into()));
    }
    let grads = crate::field::gradient(field)?;
    let grid = &field.grid;
    let mask = &field.mask;
    let cell = grid.h.powi(3);
    Ok(reduce::det_sum_indexed(grid.len(), |i| {
        if !mask.interior[i] {
            return 0.0;
        }
        let (ii, jj, kk) = grid.decompose(i);
        let p = grid.pos(ii, jj, kk);
        if exclusions.iter().any(|(c, r)| geom::dist(p, *c) <= *r) {
            return 0.0;
        }
        let g2 = grads[0].values[i] * grads[0].values[i]
            + grads[1].values[i] * grads[1].values[i]
            + grads[2].values[i] * grads[2].values[i];
        mask.weight[i] * conductivity.values[i] * g2 * cell
    }))
}
