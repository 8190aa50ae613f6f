//! Structured-grid scalar fields over a domain: masks with near-boundary
//! volume weights, central-difference gradients, midpoint-rule norms, sphere
//! surface quadrature, and the plain-text export format.

use crate::domain::DomainSpec;
use crate::error::{CmError, Result};
use crate::geom::Vec3;
use crate::quad;
use crate::reduce;
use rayon::prelude::*;
use std::sync::Arc;

/// Cell-centered uniform grid covering the domain's bounding box.
///
/// Node `(i, j, k)` sits at `origin + h * (i + 1/2, j + 1/2, k + 1/2)`;
/// the stored spacing is adjusted so the box is covered exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: f64,
    pub dims: [usize; 3],
    pub origin: Vec3,
}

impl Grid {
    pub fn for_domain(domain: &DomainSpec, h: f64) -> Grid {
        let (origin, ext) = domain.bounding_box();
        let n0 = (ext[0] / h).round().max(3.0) as usize;
        let h_actual = ext[0] / n0 as f64;
        let dims = [
            n0,
            (ext[1] / h_actual).round().max(3.0) as usize,
            (ext[2] / h_actual).round().max(3.0) as usize,
        ];
        Grid {
            h: h_actual,
            dims,
            origin,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn pos(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + self.h * (i as f64 + 0.5),
            self.origin[1] + self.h * (j as f64 + 0.5),
            self.origin[2] + self.h * (k as f64 + 0.5),
        ]
    }

    #[inline]
    pub fn decompose(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        (i, j, k)
    }

    /// Continuous coordinates of `x` in node units (0.5 at the first node).
    #[inline]
    pub fn to_node_coords(&self, x: Vec3) -> Vec3 {
        [
            (x[0] - self.origin[0]) / self.h,
            (x[1] - self.origin[1]) / self.h,
            (x[2] - self.origin[2]) / self.h,
        ]
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && (self.h - other.h).abs() < 1e-14 * self.h
            && self
                .origin
                .iter()
                .zip(&other.origin)
                .all(|(a, b)| (a - b).abs() < 1e-12)
    }
}

/// Interior mask plus per-node integration weights.
///
/// `weight` is the fraction of the node's cell inside the domain (1 deep
/// inside, 0 outside, sub-sampled 4^3 for cells cut by a curved boundary).
#[derive(Debug, Clone)]
pub struct DomainMask {
    pub grid: Grid,
    pub interior: Vec<bool>,
    pub weight: Vec<f64>,
}

impl DomainMask {
    pub fn build(domain: &DomainSpec, grid: &Grid) -> DomainMask {
        let n = grid.len();
        let mut interior = vec![false; n];
        let mut weight = vec![0.0; n];
        let h = grid.h;
        let cut_margin = 0.87 * h; // half cell diagonal
        interior
            .par_chunks_mut(grid.dims[0] * grid.dims[1])
            .zip(weight.par_chunks_mut(grid.dims[0] * grid.dims[1]))
            .enumerate()
            .for_each(|(k, (int_slab, w_slab))| {
                for j in 0..grid.dims[1] {
                    for i in 0..grid.dims[0] {
                        let p = grid.pos(i, j, k);
                        let idx = j * grid.dims[0] + i;
                        let inside = domain.contains(p);
                        int_slab[idx] = inside;
                        if !inside {
                            continue;
                        }
                        let d = domain.distance_to_boundary(p);
                        if d > cut_margin {
                            w_slab[idx] = 1.0;
                        } else {
                            // Sub-sample 4^3 within the cell.
                            let mut hits = 0usize;
                            for a in 0..4 {
                                for b in 0..4 {
                                    for c in 0..4 {
                                        let q = [
                                            p[0] + h * ((a as f64 + 0.5) / 4.0 - 0.5),
                                            p[1] + h * ((b as f64 + 0.5) / 4.0 - 0.5),
                                            p[2] + h * ((c as f64 + 0.5) / 4.0 - 0.5),
                                        ];
                                        if domain.contains(q) {
                                            hits += 1;
                                        }
                                    }
                                }
                            }
                            w_slab[idx] = hits as f64 / 64.0;
                        }
                    }
                }
            });
        DomainMask {
            grid: grid.clone(),
            interior,
            weight,
        }
    }

    pub fn interior_count(&self) -> usize {
        self.interior.iter().filter(|b| **b).count()
    }
}

/// A scalar field sampled at the grid nodes. Values at exterior nodes are
/// conventionally zero and excluded from all integrals by the mask.
#[derive(Debug, Clone)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub mask: Arc<DomainMask>,
}

impl GridField {
    pub fn zeros(mask: &Arc<DomainMask>) -> GridField {
        GridField {
            grid: mask.grid.clone(),
            values: vec![0.0; mask.grid.len()],
            mask: mask.clone(),
        }
    }

    /// Sample an analytic function at interior nodes.
    pub fn from_fn<F: Fn(Vec3) -> f64 + Sync>(mask: &Arc<DomainMask>, f: F) -> GridField {
        let grid = &mask.grid;
        let mut values = vec![0.0; grid.len()];
        let plane = grid.dims[0] * grid.dims[1];
        values
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(k, slab)| {
                for j in 0..grid.dims[1] {
                    for i in 0..grid.dims[0] {
                        let idx = j * grid.dims[0] + i;
                        if mask.interior[k * plane + idx] {
                            slab[idx] = f(grid.pos(i, j, k));
                        }
                    }
                }
            });
        GridField {
            grid: grid.clone(),
            values,
            mask: mask.clone(),
        }
    }

    /// Trilinear interpolation; clamps to the grid.
    pub fn interp(&self, x: Vec3) -> f64 {
        let c = self.grid.to_node_coords(x);
        let mut acc = 0.0;
        let d = &self.grid.dims;
        let fx = (c[0] - 0.5).clamp(0.0, (d[0] - 1) as f64 - 1e-9);
        let fy = (c[1] - 0.5).clamp(0.0, (d[1] - 1) as f64 - 1e-9);
        let fz = (c[2] - 0.5).clamp(0.0, (d[2] - 1) as f64 - 1e-9);
        let (i0, j0, k0) = (fx as usize, fy as usize, fz as usize);
        let (tx, ty, tz) = (fx - i0 as f64, fy - j0 as f64, fz - k0 as f64);
        for (dk, wk) in [(0, 1.0 - tz), (1, tz)] {
            for (dj, wj) in [(0, 1.0 - ty), (1, ty)] {
                for (di, wi) in [(0, 1.0 - tx), (1, tx)] {
                    let v = self.values[self.grid.idx(i0 + di, j0 + dj, k0 + dk)];
                    acc += wi * wj * wk * v;
                }
            }
        }
        acc
    }

    /// Interpolated gradient via central differences at the eight corners.
    pub fn interp_gradient(&self, x: Vec3) -> Vec3 {
        let h = self.grid.h;
        let mut g = [0.0; 3];
        for (axis, gv) in g.iter_mut().enumerate() {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += 0.5 * h;
            xm[axis] -= 0.5 * h;
            *gv = (self.interp(xp) - self.interp(xm)) / h;
        }
        g
    }
}

/// L2, H1 seminorm, H1, and sup norms over the masked region.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormReport {
    pub l2: f64,
    pub h1_seminorm: f64,
    pub h1: f64,
    pub linf: f64,
}

/// Second-order gradient: central differences at interior nodes, one-sided
/// second-order stencils where a neighbor leaves the mask.
pub fn gradient(field: &GridField) -> Result<[GridField; 3]> {
    let grid = &field.grid;
    for (axis, n) in grid.dims.iter().enumerate() {
        if *n < 3 {
            return Err(CmError::DegenerateGrid {
                axis,
                nodes: *n,
            });
        }
    }
    let mask = &field.mask;
    let mut out = [
        GridField::zeros(mask),
        GridField::zeros(mask),
        GridField::zeros(mask),
    ];
    let strides = [1usize, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let h = grid.h;
    let v = &field.values;
    let interior = &mask.interior;
    for axis in 0..3 {
        let stride = strides[axis];
        let dim = grid.dims[axis];
        let plane = grid.dims[0] * grid.dims[1];
        out[axis]
            .values
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(k, slab)| {
                for j in 0..grid.dims[1] {
                    for i in 0..grid.dims[0] {
                        let local = j * grid.dims[0] + i;
                        let idx = k * plane + local;
                        if !interior[idx] {
                            continue;
                        }
                        let coord = [i, j, k][axis];
                        let has_m = coord >= 1 && interior[idx - stride];
                        let has_p = coord + 1 < dim && interior[idx + stride];
                        let g = if has_m && has_p {
                            (v[idx + stride] - v[idx - stride]) / (2.0 * h)
                        } else if has_p {
                            let has_pp = coord + 2 < dim && interior[idx + 2 * stride];
                            if has_pp {
                                (-3.0 * v[idx] + 4.0 * v[idx + stride] - v[idx + 2 * stride])
                                    / (2.0 * h)
                            } else {
                                (v[idx + stride] - v[idx]) / h
                            }
                        } else if has_m {
                            let has_mm = coord >= 2 && interior[idx - 2 * stride];
                            if has_mm {
                                (3.0 * v[idx] - 4.0 * v[idx - stride] + v[idx - 2 * stride])
                                    / (2.0 * h)
                            } else {
                                (v[idx] - v[idx - stride]) / h
                            }
                        } else {
                            0.0
                        };
                        slab[local] = g;
                    }
                }
            });
    }
    Ok(out)
}

/// Midpoint-rule norms over the mask (optionally restricted further).
pub fn norms(field: &GridField, region: Option<&[bool]>) -> Result<NormReport> {
    let mask = &field.mask;
    let n = field.grid.len();
    if let Some(r) = region {
        if r.len() != n {
            return Err(CmError::GridMismatch("region mask length".into()));
        }
        if !r
            .iter()
            .zip(&mask.interior)
            .all(|(reg, int)| !*reg || *int)
        {
            return Err(CmError::Invalid(
                "region mask must be a subset of the interior mask".into(),
            ));
        }
    }
    let in_region = |i: usize| -> bool {
        mask.interior[i] && region.map_or(true, |r| r[i])
    };
    if !(0..n).any(&in_region) {
        return Err(CmError::EmptyRegion("norms over empty region".into()));
    }

    let cell = field.grid.h.powi(3);
    let grads = gradient(field)?;
    let l2_sq = reduce::det_sum_indexed(n, |i| {
        if in_region(i) {
            mask.weight[i] * field.values[i] * field.values[i] * cell
        } else {
            0.0
        }
    });
    let h1_sq = reduce::det_sum_indexed(n, |i| {
        if in_region(i) {
            let g2 = grads[0].values[i] * grads[0].values[i]
                + grads[1].values[i] * grads[1].values[i]
                + grads[2].values[i] * grads[2].values[i];
            mask.weight[i] * g2 * cell
        } else {
            0.0
        }
    });
    let mut linf = 0.0f64;
    for i in 0..n {
        if in_region(i) {
            linf = linf.max(field.values[i].abs());
        }
    }
    Ok(NormReport {
        l2: l2_sq.sqrt(),
        h1_seminorm: h1_sq.sqrt(),
        h1: (l2_sq + h1_sq).sqrt(),
        linf,
    })
}

/// Pointwise weighted sum of fields on one grid.
pub fn combine(fields: &[&GridField], weights: &[f64]) -> Result<GridField> {
    assert_eq!(fields.len(), weights.len());
    let first = fields
        .first()
        .ok_or_else(|| CmError::Invalid("combine of zero fields".into()))?;
    for f in fields.iter().skip(1) {
        if !f.grid.same_geometry(&first.grid) {
            return Err(CmError::GridMismatch("combine over different grids".into()));
        }
    }
    let mut out = GridField::zeros(&first.mask);
    out.values
        .par_iter_mut()
        .enumerate()
        .for_each(|(i, v)| {
            let mut acc = 0.0;
            for (f, w) in fields.iter().zip(weights) {
                acc += w * f.values[i];
            }
            *v = acc;
        });
    Ok(out)
}

/// Quadrature of `a * dphi/dnu` over the sphere, with the normal derivative
/// taken by one-sided second-order differences from outside the sphere and
/// trilinear sampling.
pub fn surface_flux(
    field: &GridField,
    conductivity: &GridField,
    center: Vec3,
    radius: f64,
    min_points: usize,
) -> Result<f64> {
    let grid = &field.grid;
    let h = grid.h;
    // The probe stencil reaches radius + 2h; require it inside the grid box.
    for axis in 0..3 {
        let lo = grid.origin[axis];
        let hi = grid.origin[axis] + grid.dims[axis] as f64 * h;
        if center[axis] - radius - 2.5 * h < lo || center[axis] + radius + 2.5 * h > hi {
            return Err(CmError::SphereOutsideDomain {
                center,
                radius,
            });
        }
    }
    let nodes = quad::sphere_rule(min_points.max(quad::flux_point_count(radius, h)));
    let mut flux = 0.0;
    for node in &nodes {
        let xi = [
            center[0] + radius * node.dir[0],
            center[1] + radius * node.dir[1],
            center[2] + radius * node.dir[2],
        ];
        let f0 = field.interp(xi);
        let f1 = field.interp([
            xi[0] + h * node.dir[0],
            xi[1] + h * node.dir[1],
            xi[2] + h * node.dir[2],
        ]);
        let f2 = field.interp([
            xi[0] + 2.0 * h * node.dir[0],
            xi[1] + 2.0 * h * node.dir[1],
            xi[2] + 2.0 * h * node.dir[2],
        ]);
        let dnu = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h);
        let a = conductivity.interp(xi);
        flux += node.weight * a * dnu;
    }
    Ok(flux * radius * radius)
}

/// Plain-text export: header `dims nx ny nz h x0 y0 z0`, one value per line
/// in x-fastest order.
pub fn export_text(field: &GridField) -> String {
    let g = &field.grid;
    let mut out = String::with_capacity(field.values.len() * 20 + 64);
    out.push_str(&format!(
        "dims {} {} {} {:.17e} {:.17e} {:.17e} {:.17e}\n",
        g.dims[0], g.dims[1], g.dims[2], g.h, g.origin[0], g.origin[1], g.origin[2]
    ));
    for v in &field.values {
        out.push_str(&format!("{v:.17e}\n"));
    }
    out
}

/// CSV of field values probed along a ray: columns t, x, y, z, value.
pub fn export_ray_csv(field: &GridField, start: Vec3, dir: Vec3, ts: &[f64]) -> String {
    let mut out = String::from("t,x,y,z,value\n");
    for t in ts {
        let p = [
            start[0] + t * dir[0],
            start[1] + t * dir[1],
            start[2] + t * dir[2],
        ];
        out.push_str(&format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            t,
            p[0],
            p[1],
            p[2],
            field.interp(p)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainSpec;
    use approx::assert_relative_eq;

    fn box_mask(n: usize) -> (DomainSpec, Arc<DomainMask>) {
        let dom = DomainSpec::cube(1.0, "x", "1");
        let grid = Grid::for_domain(&dom, 1.0 / n as f64);
        let mask = Arc::new(DomainMask::build(&dom, &grid));
        (dom, mask)
    }

    #[test]
    fn constant_field_zero_gradient_and_unit_l2() {
        let (_, mask) = box_mask(16);
        let f = GridField::from_fn(&mask, |_| 1.0);
        let g = gradient(&f).unwrap();
        for axis in 0..3 {
            assert!(g[axis].values.iter().all(|v| v.abs() < 1e-13));
        }
        let r = norms(&f, None).unwrap();
        assert_relative_eq!(r.l2, 1.0, epsilon = 1e-12);
        assert!(r.h1_seminorm < 1e-12);
        assert_relative_eq!(r.linf, 1.0);
    }

    #[test]
    fn linear_field_exact_gradient() {
        let (_, mask) = box_mask(20);
        let f = GridField::from_fn(&mask, |p| p[0]);
        let g = gradient(&f).unwrap();
        for i in 0..f.grid.len() {
            if mask.interior[i] {
                assert_relative_eq!(g[0].values[i], 1.0, epsilon = 1e-12);
                assert!(g[1].values[i].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_field_gradient_error_tiny() {
        // central differences are exact for quadratics up to round-off
        let (_, mask) = box_mask(100);
        let f = GridField::from_fn(&mask, |p| p[0] * p[0]);
        let g = gradient(&f).unwrap();
        let grid = f.grid.clone();
        for k in 1..grid.dims[2] - 1 {
            for j in 1..grid.dims[1] - 1 {
                for i in 1..grid.dims[0] - 1 {
                    let idx = grid.idx(i, j, k);
                    let x = grid.pos(i, j, k)[0];
                    assert!(
                        (g[0].values[idx] - 2.0 * x).abs() < 1e-10,
                        "interior gradient error too large"
                    );
                }
            }
        }
    }

    #[test]
    fn sine_norms_match_closed_form() {
        let (_, mask) = box_mask(128);
        let f = GridField::from_fn(&mask, |p| (std::f64::consts::PI * p[0]).sin());
        let r = norms(&f, None).unwrap();
        assert_relative_eq!(r.l2, (0.5f64).sqrt(), epsilon = 1e-3);
        assert_relative_eq!(
            r.h1_seminorm,
            std::f64::consts::PI * (0.5f64).sqrt(),
            epsilon = 1e-2
        );
    }

    #[test]
    fn norm_scaling_property() {
        let (_, mask) = box_mask(24);
        let f = GridField::from_fn(&mask, |p| (p[0] - 0.3) * p[1] + p[2] * p[2]);
        let alphas = [2.0, -3.5, 0.125];
        let base = norms(&f, None).unwrap();
        for alpha in alphas {
            let scaled = combine(&[&f], &[alpha]).unwrap();
            let r = norms(&scaled, None).unwrap();
            assert_relative_eq!(r.l2, alpha.abs() * base.l2, max_relative = 1e-12);
            assert_relative_eq!(r.h1, alpha.abs() * base.h1, max_relative = 1e-12);
        }
    }

    #[test]
    fn combine_cancellation() {
        let (_, mask) = box_mask(12);
        let f = GridField::from_fn(&mask, |p| p[0] * p[1]);
        let g = combine(&[&f, &f], &[1.0, -1.0]).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
        let neg = combine(&[&f], &[-1.0]).unwrap();
        let avg = combine(&[&f, &neg], &[0.5, 0.5]).unwrap();
        assert!(avg.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn combine_matches_reference_summation_order() {
        let (_, mask) = box_mask(10);
        let f1 = GridField::from_fn(&mask, |p| p[0]);
        let f2 = GridField::from_fn(&mask, |p| p[1] * p[1]);
        let f3 = GridField::from_fn(&mask, |p| p[2] - 0.5);
        let w = [1.0, 1.0, 0.5];
        let combined = combine(&[&f1, &f2, &f3], &w).unwrap();
        for i in 0..combined.values.len() {
            let reference = w[0] * f1.values[i] + w[1] * f2.values[i] + w[2] * f3.values[i];
            assert_eq!(combined.values[i].to_bits(), reference.to_bits());
        }
    }

    #[test]
    fn flux_of_linear_harmonic_field_vanishes() {
        let (_, mask) = box_mask(40);
        let f = GridField::from_fn(&mask, |p| p[0]);
        let a = GridField::from_fn(&mask, |_| 1.0);
        let area = 4.0 * std::f64::consts::PI * 0.15 * 0.15;
        let flux = surface_flux(&f, &a, [0.5, 0.5, 0.5], 0.15, 50).unwrap();
        assert!(flux.abs() < 1e-8 * area, "flux {flux}");
    }

    #[test]
    fn flux_of_point_source_gauss_law() {
        let dom = DomainSpec::cube(1.0, "x", "1");
        let grid = Grid::for_domain(&dom, 0.01);
        let mask = Arc::new(DomainMask::build(&dom, &grid));
        let eta = [0.5, 0.5, 0.5];
        let f = GridField::from_fn(&mask, |p| {
            let d = crate::geom::dist(p, eta).max(1e-6);
            1.0 / d
        });
        let a = GridField::from_fn(&mask, |_| 1.0);
        let flux = surface_flux(&f, &a, eta, 0.2, 200).unwrap();
        assert_relative_eq!(flux, -4.0 * std::f64::consts::PI, max_relative = 0.01);
    }

    #[test]
    fn flux_linear_in_field() {
        let (_, mask) = box_mask(30);
        let f1 = GridField::from_fn(&mask, |p| p[0] * p[0] - p[1]);
        let f2 = GridField::from_fn(&mask, |p| p[2] + 0.2 * p[0]);
        let a = GridField::from_fn(&mask, |p| 1.0 + 0.5 * p[1]);
        let c = [0.5, 0.5, 0.5];
        let r = 0.2;
        let fa = surface_flux(&f1, &a, c, r, 80).unwrap();
        let fb = surface_flux(&f2, &a, c, r, 80).unwrap();
        let fsum = surface_flux(&combine(&[&f1, &f2], &[2.0, -1.0]).unwrap(), &a, c, r, 80).unwrap();
        assert_relative_eq!(fsum, 2.0 * fa - fb, max_relative = 1e-10, epsilon = 1e-12);
    }

    #[test]
    fn sphere_outside_grid_rejected() {
        let (_, mask) = box_mask(16);
        let f = GridField::from_fn(&mask, |p| p[0]);
        let a = GridField::from_fn(&mask, |_| 1.0);
        assert!(surface_flux(&f, &a, [0.9, 0.5, 0.5], 0.2, 50).is_err());
    }

    #[test]
    fn degenerate_grid_rejected() {
        let dom = DomainSpec::cube(1.0, "x", "1");
        let grid = Grid {
            h: 0.5,
            dims: [2, 8, 8],
            origin: [0.0; 3],
        };
        let mask = Arc::new(DomainMask::build(&dom, &grid));
        let f = GridField::zeros(&mask);
        assert!(matches!(
            gradient(&f),
            Err(CmError::DegenerateGrid { axis: 0, nodes: 2 })
        ));
    }

    #[test]
    fn ball_mask_volume_close_to_exact() {
        let dom = DomainSpec::ball(1.0, "x", "1");
        let grid = Grid::for_domain(&dom, 0.025);
        let mask = DomainMask::build(&dom, &grid);
        let vol: f64 = mask.weight.iter().sum::<f64>() * grid.h.powi(3);
        assert_relative_eq!(vol, dom.volume(), max_relative = 2e-2);
        // one-sided surface band shrinks linearly with h
        let fine = Grid::for_domain(&dom, 0.0125);
        let fine_mask = DomainMask::build(&dom, &fine);
        let fine_vol: f64 = fine_mask.weight.iter().sum::<f64>() * fine.h.powi(3);
        assert!((dom.volume() - fine_vol).abs() < 0.6 * (dom.volume() - vol).abs());
    }

    #[test]
    fn export_round_trip_header() {
        let (_, mask) = box_mask(4);
        let f = GridField::from_fn(&mask, |p| p[0]);
        let text = export_text(&f);
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("dims 4 4 4"));
        assert_eq!(lines.count(), 64);
    }

    #[test]
    fn grid_refinement_improves_smooth_norms() {
        // l2 converges at order >= 2, h1 at order >= 1 as h halves.
        let dom = DomainSpec::ball(1.0, "x", "1");
        let exact_fn = |p: Vec3| (p[0] * 1.3).sin() * (p[1] * 0.7).cos() + p[2] * p[2];
        let mut l2_err = Vec::new();
        let mut h1_err = Vec::new();
        for n in [16usize, 32, 64] {
            let grid = Grid::for_domain(&dom, 2.0 / n as f64);
            let mask = Arc::new(DomainMask::build(&dom, &grid));
            let f = GridField::from_fn(&mask, exact_fn);
            let r = norms(&f, None).unwrap();
            // reference values from a fine grid
            l2_err.push(r.l2);
            h1_err.push(r.h1_seminorm);
        }
        let fine_grid = Grid::for_domain(&dom, 2.0 / 128.0);
        let fine_mask = Arc::new(DomainMask::build(&dom, &fine_grid));
        let fine = norms(&GridField::from_fn(&fine_mask, exact_fn), None).unwrap();
        let l2_deltas: Vec<f64> = l2_err.iter().map(|v| (v - fine.l2).abs()).collect();
        let h1_deltas: Vec<f64> = h1_err.iter().map(|v| (v - fine.h1_seminorm).abs()).collect();
        assert!(l2_deltas[2] < l2_deltas[0] / 4.0, "{l2_deltas:?}");
        assert!(h1_deltas[2] < h1_deltas[0] / 2.0, "{h1_deltas:?}");
    }
}
