//! Quadrature rules: Gauss-Legendre on [-1, 1] and product rules on the
//! sphere (Gauss in cos(theta) x uniform azimuth), exact for high-degree
//! spherical harmonics with symmetric node placement.

use crate::geom::Vec3;

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, d) = legendre_and_derivative(n, 0.0);
        weights[n / 2] = 2.0 / (d * d);
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    if n == 1 {
        return (x, 1.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A quadrature node on the unit sphere with its weight; weights sum to 4 pi.
#[derive(Debug, Clone, Copy)]
pub struct SphereNode {
    pub dir: Vec3,
    pub weight: f64,
}

/// Product rule with at least `min_points` nodes.
pub fn sphere_rule(min_points: usize) -> Vec<SphereNode> {
    let mut n_theta = 5;
    while 2 * n_theta * n_theta < min_points {
        n_theta += 1;
    }
    let n_phi = 2 * n_theta;
    let (ct, wt) = gauss_legendre(n_theta);
    let mut nodes = Vec::with_capacity(n_theta * n_phi);
    for (c, w) in ct.iter().zip(&wt) {
        let s = (1.0 - c * c).max(0.0).sqrt();
        for k in 0..n_phi {
            let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n_phi as f64;
            nodes.push(SphereNode {
                dir: [s * phi.cos(), s * phi.sin(), *c],
                weight: w * 2.0 * std::f64::consts::PI / n_phi as f64,
            });
        }
    }
    nodes
}

/// Node count rule for flux quadrature on a sphere of radius `eps` resolved
/// by grid spacing `h`: enough points to keep the quadrature below the
/// discretization error.
pub fn flux_point_count(eps: f64, h: f64) -> usize {
    let ratio = eps / h;
    (6.0 * ratio * ratio).ceil().max(50.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
        // degree 15 is exact for n = 8
        let val: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert_relative_eq!(val, 2.0 / 15.0, epsilon = 1e-13);
    }

    #[test]
    fn sphere_rule_integrates_harmonics() {
        let nodes = sphere_rule(50);
        assert!(nodes.len() >= 50);
        let total: f64 = nodes.iter().map(|n| n.weight).sum();
        assert_relative_eq!(total, 4.0 * std::f64::consts::PI, epsilon = 1e-12);
        // odd harmonic integrates to zero, cos^2 to 4 pi / 3
        let m1: f64 = nodes.iter().map(|n| n.weight * n.dir[2]).sum();
        let m2: f64 = nodes.iter().map(|n| n.weight * n.dir[2] * n.dir[2]).sum();
        assert!(m1.abs() < 1e-13);
        assert_relative_eq!(m2, 4.0 * std::f64::consts::PI / 3.0, epsilon = 1e-12);
        let mx: f64 = nodes.iter().map(|n| n.weight * n.dir[0] * n.dir[1]).sum();
        assert!(mx.abs() < 1e-13);
    }
}
