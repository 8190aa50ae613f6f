//! Computational domains and admissible random inclusion configurations.
//!
//! Configurations obey the hard-core constraint (pairwise center distance at
//! least `2 eps`) and boundary clearance (distance to the boundary at least
//! `eps`). Sampling is random sequential addition, uniform over the
//! admissible region, driven by counter-based randomness so identical seeds
//! reproduce identical configurations regardless of scheduling.

use crate::error::{CmError, Result};
use crate::expr::Expr;
use crate::geom::{self, Vec3};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const SPHERE_VOLUME_FACTOR: f64 = 4.0 * std::f64::consts::PI / 3.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// Ball of given radius centered at the origin.
    UnitBall { radius: f64 },
    /// Axis-aligned box `[0, ex] x [0, ey] x [0, ez]`.
    Box { extents: [f64; 3] },
}

/// The region, boundary data, and host conductivity of one problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub shape: Shape,
    /// Dirichlet data f on the boundary.
    pub boundary_data: Expr,
    /// Host conductivity a(x); positive and bounded on the closed domain.
    pub conductivity: Expr,
    /// Lower ellipticity bound lambda.
    pub lambda_min: f64,
    /// Upper ellipticity bound Lambda.
    pub lambda_max: f64,
}

impl DomainSpec {
    pub fn ball(radius: f64, f: &str, a: &str) -> DomainSpec {
        DomainSpec {
            shape: Shape::UnitBall { radius },
            boundary_data: Expr::parse(f).expect("boundary expression"),
            conductivity: Expr::parse(a).expect("conductivity expression"),
            lambda_min: 1e-6,
            lambda_max: 1e6,
        }
    }

    pub fn cube(extent: f64, f: &str, a: &str) -> DomainSpec {
        DomainSpec {
            shape: Shape::Box {
                extents: [extent; 3],
            },
            boundary_data: Expr::parse(f).expect("boundary expression"),
            conductivity: Expr::parse(a).expect("conductivity expression"),
            lambda_min: 1e-6,
            lambda_max: 1e6,
        }
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> DomainSpec {
        self.lambda_min = lo;
        self.lambda_max = hi;
        self
    }

    pub fn volume(&self) -> f64 {
        match self.shape {
            Shape::UnitBall { radius } => SPHERE_VOLUME_FACTOR * radius.powi(3),
            Shape::Box { extents } => extents[0] * extents[1] * extents[2],
        }
    }

    /// Volume of the clearance region where centers may lie.
    pub fn clearance_volume(&self, eps: f64) -> f64 {
        match self.shape {
            Shape::UnitBall { radius } => SPHERE_VOLUME_FACTOR * (radius - eps).max(0.0).powi(3),
            Shape::Box { extents } => extents
                .iter()
                .map(|e| (e - 2.0 * eps).max(0.0))
                .product(),
        }
    }

    pub fn contains(&self, x: Vec3) -> bool {
        match self.shape {
            Shape::UnitBall { radius } => geom::norm(x) < radius,
            Shape::Box { extents } => (0..3).all(|k| x[k] > 0.0 && x[k] < extents[k]),
        }
    }

    /// Exact distance to the boundary (negative means outside).
    pub fn distance_to_boundary(&self, x: Vec3) -> f64 {
        match self.shape {
            Shape::UnitBall { radius } => radius - geom::norm(x),
            Shape::Box { extents } => (0..3)
                .map(|k| x[k].min(extents[k] - x[k]))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Axis-aligned bounding box as (origin, extents).
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        match self.shape {
            Shape::UnitBall { radius } => ([-radius; 3], [2.0 * radius; 3]),
            Shape::Box { extents } => ([0.0; 3], extents),
        }
    }

    /// Check the ellipticity bounds at every interior sample of a coarse
    /// lattice; the solver also checks at its own resolution.
    pub fn validate_conductivity(&self, samples_per_axis: usize) -> Result<()> {
        let (origin, ext) = self.bounding_box();
        let n = samples_per_axis.max(2);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = [
                        origin[0] + ext[0] * (i as f64 + 0.5) / n as f64,
                        origin[1] + ext[1] * (j as f64 + 0.5) / n as f64,
                        origin[2] + ext[2] * (k as f64 + 0.5) / n as f64,
                    ];
                    if !self.contains(x) {
                        continue;
                    }
                    let a = self.conductivity.eval(x);
                    if !a.is_finite() || a < self.lambda_min || a > self.lambda_max {
                        return Err(CmError::ConductivityBound {
                            x,
                            value: a,
                            lo: self.lambda_min,
                            hi: self.lambda_max,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Radius, centers, and the seed that produced them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InclusionConfiguration {
    pub epsilon: f64,
    pub seed: u64,
    pub centers: Vec<Vec3>,
}

impl InclusionConfiguration {
    pub fn n(&self) -> usize {
        self.centers.len()
    }

    /// Verify the hard-core and clearance constraints (equality accepted).
    pub fn validate(&self, domain: &DomainSpec) -> Result<()> {
        let eps = self.epsilon;
        let tol = 1e-12 * eps.max(1.0);
        for (i, c) in self.centers.iter().enumerate() {
            let d = domain.distance_to_boundary(*c);
            if d < eps - tol {
                return Err(CmError::InvalidConfiguration(format!(
                    "center {i} at distance {d} < epsilon {eps} from the boundary"
                )));
            }
            for (j, c2) in self.centers.iter().enumerate().skip(i + 1) {
                let sep = geom::dist(*c, *c2);
                if sep < 2.0 * eps - tol {
                    return Err(CmError::InvalidConfiguration(format!(
                        "centers {i} and {j} at distance {sep} < 2 epsilon"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialize configuration")
    }

    pub fn from_json(s: &str) -> Result<InclusionConfiguration> {
        serde_json::from_str(s).map_err(|e| CmError::Invalid(format!("configuration JSON: {e}")))
    }
}

/// Dilute-regime bookkeeping: the window `eps/C < beta_bar <= C / ln^4(1/eps)`
/// is a sanity check, not a hard constraint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiluteRegime {
    pub epsilon: f64,
    pub n_inclusions: usize,
    pub beta_bar: f64,
    pub c_regime: f64,
}

impl DiluteRegime {
    pub fn new(domain: &DomainSpec, epsilon: f64, n: usize, c_regime: f64) -> DiluteRegime {
        DiluteRegime {
            epsilon,
            n_inclusions: n,
            beta_bar: SPHERE_VOLUME_FACTOR * n as f64 * epsilon.powi(3) / domain.volume(),
            c_regime,
        }
    }

    /// None if inside the window, otherwise a human-readable warning.
    pub fn window_warning(&self) -> Option<String> {
        let lower = self.epsilon / self.c_regime;
        let upper = self.c_regime / (1.0 / self.epsilon).ln().powi(4);
        if self.beta_bar <= lower {
            Some(format!(
                "volume fraction {:.3e} at or below the dilute window lower bound {:.3e}",
                self.beta_bar, lower
            ))
        } else if self.beta_bar > upper {
            Some(format!(
                "volume fraction {:.3e} above the dilute window upper bound {:.3e}",
                self.beta_bar, upper
            ))
        } else {
            None
        }
    }
}

/// Number of inclusions that realizes a target volume fraction.
pub fn inclusion_count_for_fraction(domain: &DomainSpec, beta_bar: f64, epsilon: f64) -> usize {
    (beta_bar * domain.volume() / (SPHERE_VOLUME_FACTOR * epsilon.powi(3))).round() as usize
}

/// Random sequential addition, uniform over the admissible region.
///
/// Each attempt consumes a fixed number of counter-based draws, so the result
/// depends only on `(domain, epsilon, n, seed)`.
pub fn sample_configuration(
    domain: &DomainSpec,
    epsilon: f64,
    n: usize,
    seed: u64,
    max_attempts: u64,
) -> Result<InclusionConfiguration> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut centers: Vec<Vec3> = Vec::with_capacity(n);
    let mut counter: u64 = 0;
    let mut rejections: u64 = 0;

    // Proposal bounding box for centers.
    let (lo, ext) = match domain.shape {
        Shape::UnitBall { radius } => {
            let r = radius - epsilon;
            if r < 0.0 && n > 0 {
                return Err(CmError::InvalidConfiguration(
                    "inclusion radius exceeds domain radius".into(),
                ));
            }
            ([-r; 3], [2.0 * r; 3])
        }
        Shape::Box { extents } => {
            let ext = [
                extents[0] - 2.0 * epsilon,
                extents[1] - 2.0 * epsilon,
                extents[2] - 2.0 * epsilon,
            ];
            if ext.iter().any(|e| *e < 0.0) && n > 0 {
                return Err(CmError::InvalidConfiguration(
                    "inclusion diameter exceeds box extent".into(),
                ));
            }
            ([epsilon; 3], ext)
        }
    };

    while centers.len() < n {
        if rejections >= max_attempts {
            return Err(CmError::PlacementFailure {
                attempts: rejections,
                placed: centers.len(),
                requested: n,
            });
        }
        let c = [
            lo[0] + ext[0] * rng::uniform_at(seed, counter),
            lo[1] + ext[1] * rng::uniform_at(seed, counter + 1),
            lo[2] + ext[2] * rng::uniform_at(seed, counter + 2),
        ];
        counter += 3;

        let clearance_ok = domain.distance_to_boundary(c) >= epsilon;
        let core_ok =
            clearance_ok && centers.iter().all(|p| geom::dist(*p, c) >= 2.0 * epsilon);
        if core_ok {
            centers.push(c);
            rejections = 0;
        } else {
            rejections += 1;
        }
    }

    Ok(InclusionConfiguration {
        epsilon,
        seed,
        centers,
    })
}

/// Global volume fraction `(4 pi / 3) N eps^3 / |Omega|`.
pub fn global_volume_fraction(config: &InclusionConfiguration, domain: &DomainSpec) -> f64 {
    SPHERE_VOLUME_FACTOR * config.n() as f64 * config.epsilon.powi(3) / domain.volume()
}

/// Density model for the local volume fraction.
pub enum DensityModel<'a> {
    /// Centers uniform over the clearance region.
    Uniform,
    /// Empirical coverage frequency over sampled configurations.
    Empirical(&'a [InclusionConfiguration]),
}

/// Local volume fraction beta(x): the probability that `x` is covered by an
/// inclusion. Uniform model: `N |B(x,eps) ∩ Omega_eps| / |Omega_eps|`, with
/// the ball-domain overlap evaluated by the exact two-sphere lens formula and
/// the box-domain overlap by midpoint quadrature on a local subgrid.
pub fn local_volume_fraction(
    domain: &DomainSpec,
    epsilon: f64,
    n: usize,
    x: Vec3,
    model: DensityModel,
) -> Result<f64> {
    if !domain.contains(x) {
        return Err(CmError::Invalid(format!("point {x:?} outside the domain")));
    }
    match model {
        DensityModel::Uniform => {
            let overlap = clearance_overlap_volume(domain, epsilon, x);
            Ok(n as f64 * overlap / domain.clearance_volume(epsilon))
        }
        DensityModel::Empirical(configs) => {
            if configs.is_empty() {
                return Err(CmError::EmptyEnsemble);
            }
            let covered = configs
                .iter()
                .filter(|cfg| {
                    cfg.centers
                        .iter()
                        .any(|c| geom::dist(*c, x) <= cfg.epsilon)
                })
                .count();
            Ok(covered as f64 / configs.len() as f64)
        }
    }
}

/// |B(x, eps) ∩ Omega_eps| for the uniform model.
pub fn clearance_overlap_volume(domain: &DomainSpec, eps: f64, x: Vec3) -> f64 {
    match domain.shape {
        Shape::UnitBall { radius } => sphere_sphere_overlap(eps, radius - eps, geom::norm(x)),
        Shape::Box { extents } => {
            // Midpoint rule on a 32^3 subgrid of B(x, eps).
            let m = 32usize;
            let cell = 2.0 * eps / m as f64;
            let mut vol = 0.0;
            for i in 0..m {
                let px = x[0] - eps + (i as f64 + 0.5) * cell;
                if px < eps || px > extents[0] - eps {
                    continue;
                }
                for j in 0..m {
                    let py = x[1] - eps + (j as f64 + 0.5) * cell;
                    if py < eps || py > extents[1] - eps {
                        continue;
                    }
                    for k in 0..m {
                        let pz = x[2] - eps + (k as f64 + 0.5) * cell;
                        if pz < eps || pz > extents[2] - eps {
                            continue;
                        }
                        let d2 = (px - x[0]).powi(2) + (py - x[1]).powi(2) + (pz - x[2]).powi(2);
                        if d2 <= eps * eps {
                            vol += cell * cell * cell;
                        }
                    }
                }
            }
            vol
        }
    }
}

/// Volume of the intersection of spheres with radii `r1`, `r2` whose centers
/// are distance `d` apart (the classical lens formula).
pub fn sphere_sphere_overlap(r1: f64, r2: f64, d: f64) -> f64 {
    if r1 <= 0.0 || r2 <= 0.0 {
        return 0.0;
    }
    if d >= r1 + r2 {
        return 0.0;
    }
    let rmin = r1.min(r2);
    let rmax = r1.max(r2);
    if d <= rmax - rmin {
        return SPHERE_VOLUME_FACTOR * rmin.powi(3);
    }
    let num = (r1 + r2 - d).powi(2)
        * (d * d + 2.0 * d * r2 - 3.0 * r2 * r2 + 2.0 * d * r1 + 6.0 * r1 * r2 - 3.0 * r1 * r1);
    std::f64::consts::PI * num / (12.0 * d)
}

/// Partition into connected components of the `<= 4 eps` proximity graph.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClusterDecomposition {
    /// Each cluster lists member indices in increasing order; clusters are
    /// sorted by their smallest member.
    pub clusters: Vec<Vec<usize>>,
    /// Histogram keyed by cluster cardinality.
    pub size_histogram: BTreeMap<usize, usize>,
}

pub fn cluster_decomposition(config: &InclusionConfiguration) -> ClusterDecomposition {
    let n = config.n();
    let cutoff = 4.0 * config.epsilon;
    let mut parent: Vec<usize> = (0..n).collect();

    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        let mut root = i;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = i;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }

    for i in 0..n {
        for j in (i + 1)..n {
            if geom::dist(config.centers[i], config.centers[j]) <= cutoff {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let clusters: Vec<Vec<usize>> = groups.into_values().collect();
    let mut size_histogram = BTreeMap::new();
    for c in &clusters {
        *size_histogram.entry(c.len()).or_insert(0) += 1;
    }
    ClusterDecomposition {
        clusters,
        size_histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_ball() -> DomainSpec {
        DomainSpec::ball(1.0, "x", "1")
    }

    fn unit_box() -> DomainSpec {
        DomainSpec::cube(1.0, "x", "1")
    }

    #[test]
    fn empty_configuration_is_valid() {
        let cfg = sample_configuration(&unit_ball(), 0.05, 0, 1, 1000).unwrap();
        assert_eq!(cfg.n(), 0);
        cfg.validate(&unit_ball()).unwrap();
        assert_eq!(global_volume_fraction(&cfg, &unit_ball()), 0.0);
    }

    #[test]
    fn constraints_enforced_by_construction() {
        let dom = unit_ball();
        let cfg = sample_configuration(&dom, 0.05, 10, 1, 1_000_000).unwrap();
        assert_eq!(cfg.n(), 10);
        cfg.validate(&dom).unwrap();
        for (i, a) in cfg.centers.iter().enumerate() {
            assert!(dom.distance_to_boundary(*a) >= 0.05);
            for b in cfg.centers.iter().skip(i + 1) {
                assert!(geom::dist(*a, *b) >= 0.1);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let dom = unit_box();
        let a = sample_configuration(&dom, 0.02, 50, 9, 1_000_000).unwrap();
        let b = sample_configuration(&dom, 0.02, 50, 9, 1_000_000).unwrap();
        assert_eq!(a, b);
        let c = sample_configuration(&dom, 0.02, 50, 10, 1_000_000).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn count_for_target_fraction_matches_hand_computation() {
        // beta = 0.01, eps = 0.02 in the unit box: N = 0.01 / ((4 pi / 3) 8e-6)
        let n = inclusion_count_for_fraction(&unit_box(), 0.01, 0.02);
        assert_eq!(n, 298);
    }

    #[test]
    fn global_fraction_formula() {
        let dom = unit_box();
        let cfg = InclusionConfiguration {
            epsilon: 0.1,
            seed: 0,
            centers: vec![[0.5, 0.5, 0.5]],
        };
        assert_relative_eq!(
            global_volume_fraction(&cfg, &dom),
            SPHERE_VOLUME_FACTOR * 1e-3,
            epsilon = 1e-15
        );

        // In the ball the domain volume cancels to a pure radius ratio.
        let ball = unit_ball();
        let centers: Vec<Vec3> = (0..100).map(|i| [0.0, 0.0, i as f64]).collect();
        let cfg = InclusionConfiguration {
            epsilon: 0.02,
            seed: 0,
            centers,
        };
        assert_relative_eq!(
            global_volume_fraction(&cfg, &ball),
            100.0 * 0.02f64.powi(3),
            epsilon = 1e-15
        );
    }

    #[test]
    fn placement_failure_reported() {
        // Far more spheres than fit.
        let err = sample_configuration(&unit_box(), 0.2, 100, 3, 2_000).unwrap_err();
        match err {
            CmError::PlacementFailure { requested, .. } => assert_eq!(requested, 100),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn lens_formula_limits() {
        // Disjoint, contained, and half-overlap sanity values.
        assert_eq!(sphere_sphere_overlap(0.1, 0.5, 1.0), 0.0);
        assert_relative_eq!(
            sphere_sphere_overlap(0.1, 0.5, 0.2),
            SPHERE_VOLUME_FACTOR * 0.001,
            epsilon = 1e-15
        );
        // Equal spheres at distance r: V = (4 pi/3) r^3 * (1 - 3/4 * d/r + d^3/(16 r^3))
        let r: f64 = 0.3;
        let d = 0.3;
        let expect = SPHERE_VOLUME_FACTOR * r.powi(3) * (1.0 - 0.75 * (d / r) + (d / r).powi(3) / 16.0);
        assert_relative_eq!(sphere_sphere_overlap(r, r, d), expect, max_relative = 1e-12);
    }

    #[test]
    fn local_fraction_interior_and_boundary() {
        let dom = unit_ball();
        let eps = 0.05;
        let n = 100;
        // Deep interior: full-ball overlap, constant in x.
        let deep = local_volume_fraction(&dom, eps, n, [0.0, 0.0, 0.0], DensityModel::Uniform)
            .unwrap();
        let expect = n as f64 * SPHERE_VOLUME_FACTOR * eps.powi(3) / dom.clearance_volume(eps);
        assert_relative_eq!(deep, expect, max_relative = 1e-12);
        let deep2 = local_volume_fraction(&dom, eps, n, [0.3, -0.2, 0.1], DensityModel::Uniform)
            .unwrap();
        assert_relative_eq!(deep, deep2, max_relative = 1e-12);

        // Within 2 eps of the boundary the overlap is strictly smaller.
        let near = local_volume_fraction(
            &dom,
            eps,
            n,
            [0.0, 0.0, 1.0 - 0.5 * eps],
            DensityModel::Uniform,
        )
        .unwrap();
        assert!(near < deep);
        assert!(near > 0.0);
    }

    #[test]
    fn box_uniform_matches_ball_formula_in_interior() {
        let dom = unit_box();
        let eps = 0.05;
        let v = clearance_overlap_volume(&dom, eps, [0.5, 0.5, 0.5]);
        // Midpoint quadrature of the full sphere volume: second-order accurate.
        assert_relative_eq!(v, SPHERE_VOLUME_FACTOR * eps.powi(3), max_relative = 2e-2);
    }

    #[test]
    fn empirical_model_matches_uniform_within_error_bars() {
        let dom = unit_box();
        let eps = 0.1;
        let n = 4;
        let configs: Vec<InclusionConfiguration> = (0..10_000)
            .map(|s| sample_configuration(&dom, eps, n, 1000 + s, 1_000_000).unwrap())
            .collect();
        let x = [0.5, 0.5, 0.5];
        let emp = local_volume_fraction(&dom, eps, n, x, DensityModel::Empirical(&configs)).unwrap();
        // RSA with few spheres is close to independent placement; compare the
        // coverage probability rather than the first-order value.
        let uni = local_volume_fraction(&dom, eps, n, x, DensityModel::Uniform).unwrap();
        let p_indep = 1.0 - (1.0 - uni / n as f64).powi(n as i32);
        let stderr = (p_indep * (1.0 - p_indep) / configs.len() as f64).sqrt();
        assert!(
            (emp - p_indep).abs() < 3.0 * stderr + 0.01 * p_indep,
            "empirical {emp} vs independent-placement {p_indep} (se {stderr})"
        );
        assert!(err_stub(emp, uni) < 0.1, "uniform model {uni} vs empirical {emp}");
    }

    fn err_stub(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.max(1e-300)
    }

    #[test]
    fn empty_ensemble_rejected() {
        let dom = unit_box();
        let err =
            local_volume_fraction(&dom, 0.1, 1, [0.5; 3], DensityModel::Empirical(&[])).unwrap_err();
        assert!(matches!(err, CmError::EmptyEnsemble));
    }

    #[test]
    fn cluster_decomposition_cases() {
        let eps = 0.01;
        // All far apart: singletons.
        let cfg = InclusionConfiguration {
            epsilon: eps,
            seed: 0,
            centers: vec![[0.0; 3], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0]],
        };
        let dec = cluster_decomposition(&cfg);
        assert_eq!(dec.clusters.len(), 3);
        assert_eq!(dec.size_histogram.get(&1), Some(&3));

        // One pair at 3 eps, one far singleton.
        let cfg = InclusionConfiguration {
            epsilon: eps,
            seed: 0,
            centers: vec![[0.0; 3], [3.0 * eps, 0.0, 0.0], [0.5, 0.5, 0.0]],
        };
        let dec = cluster_decomposition(&cfg);
        assert_eq!(dec.clusters.len(), 2);
        assert_eq!(dec.size_histogram.get(&2), Some(&1));

        // Chain: 1-2 and 2-3 within 3.5 eps, 1-3 at 7 eps. Connectivity, not
        // pairwise closeness, decides the cluster.
        let cfg = InclusionConfiguration {
            epsilon: eps,
            seed: 0,
            centers: vec![
                [0.0; 3],
                [3.5 * eps, 0.0, 0.0],
                [7.0 * eps, 0.0, 0.0],
            ],
        };
        let dec = cluster_decomposition(&cfg);
        assert_eq!(dec.clusters.len(), 1);
        assert_eq!(dec.clusters[0], vec![0, 1, 2]);

        // Brute-force check on the 3-point graph.
        let within = |a: Vec3, b: Vec3| geom::dist(a, b) <= 4.0 * eps;
        assert!(within(cfg.centers[0], cfg.centers[1]));
        assert!(within(cfg.centers[1], cfg.centers[2]));
        assert!(!within(cfg.centers[0], cfg.centers[2]));
    }

    #[test]
    fn cluster_partition_permutation_invariant() {
        let dom = unit_ball();
        let cfg = sample_configuration(&dom, 0.04, 40, 5, 1_000_000).unwrap();
        let dec = cluster_decomposition(&cfg);

        let mut permuted = cfg.clone();
        permuted.centers.rotate_left(13);
        permuted.centers.swap(0, 7);
        let dec_p = cluster_decomposition(&permuted);

        // Compare as sets of center sets.
        let to_sets = |cfg: &InclusionConfiguration, dec: &ClusterDecomposition| {
            let mut sets: Vec<Vec<[i64; 3]>> = dec
                .clusters
                .iter()
                .map(|cl| {
                    let mut v: Vec<[i64; 3]> = cl
                        .iter()
                        .map(|i| {
                            let c = cfg.centers[*i];
                            [
                                (c[0] * 1e12) as i64,
                                (c[1] * 1e12) as i64,
                                (c[2] * 1e12) as i64,
                            ]
                        })
                        .collect();
                    v.sort();
                    v
                })
                .collect();
            sets.sort();
            sets
        };
        assert_eq!(to_sets(&cfg, &dec), to_sets(&permuted, &dec_p));
    }

    #[test]
    fn dilute_window_warning_levels() {
        let dom = unit_ball();
        let ok = DiluteRegime::new(&dom, 0.025, 640, 8.0);
        assert!(ok.window_warning().is_none(), "{:?}", ok.window_warning());
        let too_dense = DiluteRegime::new(&dom, 0.1, 500, 8.0);
        assert!(too_dense.window_warning().is_some());
    }

    #[test]
    fn rsa_single_center_uniformity_chi_square() {
        // >= 1e4 single-inclusion samples in the box; chi-square over an
        // 8x8x8 binning of the clearance region at significance 0.01.
        let dom = unit_box();
        let eps = 0.1;
        let m = 10_000usize;
        let bins = 8usize;
        let mut counts = vec![0u64; bins * bins * bins];
        for s in 0..m {
            let cfg = sample_configuration(&dom, eps, 1, 77_000 + s as u64, 10_000).unwrap();
            let c = cfg.centers[0];
            let span = 1.0 - 2.0 * eps;
            let bx = (((c[0] - eps) / span * bins as f64) as usize).min(bins - 1);
            let by = (((c[1] - eps) / span * bins as f64) as usize).min(bins - 1);
            let bz = (((c[2] - eps) / span * bins as f64) as usize).min(bins - 1);
            counts[(bx * bins + by) * bins + bz] += 1;
        }
        let k = (bins * bins * bins) as f64;
        let expected = m as f64 / k;
        let chi2: f64 = counts
            .iter()
            .map(|c| {
                let d = *c as f64 - expected;
                d * d / expected
            })
            .sum();
        // Wilson-Hilferty approximation of the 0.99 quantile for df = k - 1.
        let df = k - 1.0;
        let z = 2.3263478740408408; // Phi^{-1}(0.99)
        let q99 = df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3);
        assert!(
            chi2 < q99,
            "chi-square {chi2:.1} exceeds the 0.99 quantile {q99:.1} for df {df}"
        );
    }
}
