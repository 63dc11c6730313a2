//! Gauss–Hermite rules for the standard Gaussian measure.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights for ∫ f(x) N(0,1)(dx). Weights sum to one.
#[derive(Debug, Clone)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl HermiteRule {
    /// Golub–Welsch on the Jacobi matrix of the probabilists' Hermite
    /// polynomials (zero diagonal, off-diagonal √k).
    pub fn new(m: usize) -> Self {
        assert!(m >= 1, "need at least one node");
        let mut j = DMatrix::zeros(m, m);
        for k in 1..m {
            let b = (k as f64).sqrt();
            j[(k - 1, k)] = b;
            j[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..m)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize to remove eigensolver round-off.
        for i in 0..m / 2 {
            let k = m - 1 - i;
            let x = 0.5 * (pairs[k].0 - pairs[i].0);
            let w = 0.5 * (pairs[k].1 + pairs[i].1);
            pairs[i] = (-x, w);
            pairs[k] = (x, w);
        }
        if m % 2 == 1 {
            pairs[m / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }
}

/// Tensor-product rule for N(0, Iₙ).
#[derive(Debug, Clone)]
pub struct TensorGrid {
    pub dim: usize,
    pub per_axis: usize,
    /// points[g] is an n-vector.
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// mirror[g] is the index of −points[g].
    pub mirror: Vec<usize>,
}

impl TensorGrid {
    pub fn new(dim: usize, per_axis: usize) -> Self {
        let rule = HermiteRule::new(per_axis);
        let total = per_axis.pow(dim as u32);
        let mut points = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let mut mirror = Vec::with_capacity(total);
        for g in 0..total {
            let mut rem = g;
            let mut p = vec![0.0; dim];
            let mut w = 1.0;
            let mut mg = 0;
            let mut stride = 1;
            for axis in 0..dim {
                let i = rem % per_axis;
                rem /= per_axis;
                p[axis] = rule.nodes[i];
                w *= rule.weights[i];
                mg += (per_axis - 1 - i) * stride;
                stride *= per_axis;
            }
            points.push(p);
            weights.push(w);
            mirror.push(mg);
        }
        Self { dim, per_axis, points, weights, mirror }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One representative of each {s, −s} pair, excluding the origin.
    pub fn half(&self) -> Vec<usize> {
        (0..self.len()).filter(|&g| self.mirror[g] > g).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_moments() {
        let r = HermiteRule::new(20);
        let m = |k: i32| r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert_abs_diff_eq!(m(0), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m(2), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m(4), 3.0, epsilon = 1e-11);
        assert_abs_diff_eq!(m(6), 15.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m(3), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cf_of_gaussian() {
        // E cos(aX) = exp(−a²/2).
        let r = HermiteRule::new(40);
        let a = 1.7;
        let v: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * (a * x).cos()).sum();
        assert_abs_diff_eq!(v, (-a * a / 2.0).exp(), epsilon = 1e-13);
    }

    #[test]
    fn mirror_map() {
        let g = TensorGrid::new(2, 5);
        for i in 0..g.len() {
            let m = g.mirror[i];
            for k in 0..2 {
                assert_abs_diff_eq!(g.points[m][k], -g.points[i][k], epsilon = 1e-14);
            }
        }
        // 25 points: origin plus 12 pairs.
        assert_eq!(g.half().len(), 12);
        assert_abs_diff_eq!(g.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }
}
