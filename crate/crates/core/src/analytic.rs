//! Closed-form model families with exactly known level sets.
//!
//! Linear functionals have hyperplane level sets and admit an exact
//! projection, which makes them ground-truth oracles for the traversal in
//! [`crate::lst`]. Full-rank linear maps expose the under-sensitive and
//! adversarial extremes through their singular spectrum.

use crate::models::ConfidenceModel;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyticError {
    #[error("degenerate functional: weight vector is zero")]
    DegenerateFunctional,
    #[error("matrix is rank deficient (sigma_min <= 1e-10 * sigma_max)")]
    RankDeficient,
    #[error("dimension error: {0}")]
    Dimension(String),
}

/// Affine functional f(x) = <w, x> + c.
///
/// Its level sets are parallel hyperplanes orthogonal to `w`, so the closest
/// point of a level set to any target is available in closed form.
#[derive(Debug, Clone)]
pub struct LinearFunctional {
    weights: Tensor,
    offset: f64,
}

impl LinearFunctional {
    pub fn new(weights: Tensor, offset: f64) -> Result<Self, AnalyticError> {
        if weights.data().iter().all(|&v| v == 0.0) {
            return Err(AnalyticError::DegenerateFunctional);
        }
        Ok(LinearFunctional { weights, offset })
    }

    pub fn dimension(&self) -> usize {
        self.weights.numel()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        dot(self.weights.data(), x) + self.offset
    }

    /// Projects `x_t` onto the level set through `x_s`, i.e. the affine
    /// hyperplane { x : <w,x> + c = <w,x_s> + c }.
    pub fn level_set_projection(
        &self,
        x_s: &Tensor,
        x_t: &Tensor,
    ) -> Result<Tensor, AnalyticError> {
        let d = self.dimension();
        if x_s.numel() != d || x_t.numel() != d {
            return Err(AnalyticError::Dimension(format!(
                "expected dimension {d}, got {} and {}",
                x_s.numel(),
                x_t.numel()
            )));
        }
        let w = self.weights.data();
        let w_sq: f64 = dot(w, w);
        let excess = (self.evaluate(x_t.data()) - self.evaluate(x_s.data())) / w_sq;
        let data: Vec<f64> = x_t
            .data()
            .iter()
            .zip(w)
            .map(|(&t, &wi)| t - excess * wi)
            .collect();
        Ok(Tensor::new(x_t.shape().to_vec(), data).expect("projection stays finite"))
    }
}

// Traversal sees the functional value as the confidence and -f as the loss,
// so stepping along the negative loss gradient raises f.
impl ConfidenceModel for LinearFunctional {
    fn input_len(&self) -> usize {
        self.dimension()
    }

    fn num_classes(&self) -> usize {
        1
    }

    fn confidence(&self, x: &[f64], _class: usize) -> f64 {
        self.evaluate(x)
    }

    fn confidence_and_loss_gradient(&self, x: &[f64], _class: usize) -> (f64, Vec<f64>) {
        let grad: Vec<f64> = self.weights.data().iter().map(|&w| -w).collect();
        (self.evaluate(x), grad)
    }
}

/// Singular value decomposition of a square full-rank matrix, with the
/// Rayleigh-quotient extremes that mark under-sensitive and adversarial
/// directions.
#[derive(Debug, Clone)]
pub struct SvdAnalysis {
    dim: usize,
    matrix: Vec<f64>,
    singular_values: Vec<f64>,
    /// Column-major left singular vectors.
    left: Vec<f64>,
    /// Column-major right singular vectors.
    right: Vec<f64>,
    condition: f64,
}

impl SvdAnalysis {
    /// Factors a d x d matrix by one-sided Jacobi iteration.
    ///
    /// Columns of the working matrix are rotated pairwise until their mutual
    /// inner products vanish; singular values are the remaining column norms.
    /// Errors if sigma_min <= 1e-10 * sigma_max.
    pub fn new(matrix: &Tensor) -> Result<Self, AnalyticError> {
        let shape = matrix.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(AnalyticError::Dimension(format!(
                "expected a square matrix, got {shape:?}"
            )));
        }
        let d = shape[0];
        // column-major working copy W = A; V accumulates the rotations
        let mut work = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                work[c * d + r] = matrix.data()[r * d + c];
            }
        }
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }

        let eps = f64::EPSILON;
        let mut rotated = true;
        let mut sweeps = 0;
        while rotated && sweeps < 100 {
            rotated = false;
            sweeps += 1;
            for i in 0..d.saturating_sub(1) {
                for j in (i + 1)..d {
                    let ci = &work[i * d..(i + 1) * d];
                    let cj = &work[j * d..(j + 1) * d];
                    let a: f64 = dot(ci, ci);
                    let b: f64 = dot(cj, cj);
                    let g: f64 = dot(ci, cj);
                    // converged pair: off-diagonal mass below rounding level
                    if g * g <= (16.0 * eps * eps) * a * b {
                        continue;
                    }
                    rotated = true;
                    let zeta = (b - a) / (2.0 * g);
                    let t = if zeta >= 0.0 {
                        1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                    } else {
                        -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate_columns(&mut work, d, i, j, c, s);
                    rotate_columns(&mut v, d, i, j, c, s);
                }
            }
        }

        let mut order: Vec<usize> = (0..d).collect();
        let norms: Vec<f64> = (0..d)
            .map(|i| dot(&work[i * d..(i + 1) * d], &work[i * d..(i + 1) * d]).sqrt())
            .collect();
        order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

        let sigma_max = norms[order[0]];
        let sigma_min = norms[order[d - 1]];
        if sigma_min <= 1e-10 * sigma_max {
            return Err(AnalyticError::RankDeficient);
        }

        let mut singular_values = Vec::with_capacity(d);
        let mut left = vec![0.0; d * d];
        let mut right = vec![0.0; d * d];
        for (col, &src) in order.iter().enumerate() {
            let sigma = norms[src];
            singular_values.push(sigma);
            for r in 0..d {
                left[col * d + r] = work[src * d + r] / sigma;
                right[col * d + r] = v[src * d + r];
            }
        }

        Ok(SvdAnalysis {
            dim: d,
            matrix: matrix.data().to_vec(),
            singular_values,
            left,
            right,
            condition: sigma_max / sigma_min,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn left_singular_vector(&self, i: usize) -> &[f64] {
        &self.left[i * self.dim..(i + 1) * self.dim]
    }

    pub fn right_singular_vector(&self, i: usize) -> &[f64] {
        &self.right[i * self.dim..(i + 1) * self.dim]
    }

    /// Minimum of |Av|^2 / |v|^2 and the unit direction attaining it: the
    /// direction along which the map is most under-sensitive.
    pub fn min_rayleigh(&self) -> (f64, Tensor) {
        let sigma = self.singular_values[self.dim - 1];
        let v = self.right_singular_vector(self.dim - 1).to_vec();
        (
            sigma * sigma,
            Tensor::new(vec![self.dim], v).expect("unit vector"),
        )
    }

    /// Maximum of |Av|^2 / |v|^2 and the unit direction attaining it: the
    /// adversarial direction.
    pub fn max_rayleigh(&self) -> (f64, Tensor) {
        let sigma = self.singular_values[0];
        let v = self.right_singular_vector(0).to_vec();
        (
            sigma * sigma,
            Tensor::new(vec![self.dim], v).expect("unit vector"),
        )
    }

    /// kappa = sigma_max / sigma_min >= 1.
    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for r in 0..d {
            out[r] = dot(&self.matrix[r * d..(r + 1) * d], v);
        }
        out
    }
}

fn rotate_columns(m: &mut [f64], d: usize, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..d {
        let vi = m[i * d + r];
        let vj = m[j * d + r];
        m[i * d + r] = c * vi - s * vj;
        m[j * d + r] = s * vi + c * vj;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![d, d], data).unwrap()
    }

    fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let v = random_vec(d, rng);
            let n = dot(&v, &v).sqrt();
            if n > 1e-3 {
                return v.iter().map(|&x| x / n).collect();
            }
        }
    }

    #[test]
    fn projection_hand_case() {
        let lf =
            LinearFunctional::new(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(), 0.0).unwrap();
        let x_s = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let x_t = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let p = lf.level_set_projection(&x_s, &x_t).unwrap();
        assert_eq!(p.data(), &[0.0, 4.0]);
    }

    #[test]
    fn projection_fixes_points_on_the_level_set() {
        let mut r = rng(2);
        let w = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let lf = LinearFunctional::new(w, 0.7).unwrap();
        let x_s = Tensor::new(vec![3], vec![0.2, 0.1, -0.4]).unwrap();
        let raw = Tensor::new(vec![3], random_vec(3, &mut r)).unwrap();
        // a point already on the level set through x_s stays put
        let x_t = lf.level_set_projection(&x_s, &raw).unwrap();
        let p = lf.level_set_projection(&x_s, &x_t).unwrap();
        for (a, b) in p.data().iter().zip(x_t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_preserves_value_at_dimension_50() {
        let mut r = rng(5);
        for _ in 0..20 {
            let w = Tensor::new(vec![50], random_vec(50, &mut r)).unwrap();
            let lf = LinearFunctional::new(w, r.random_range(-1.0..1.0)).unwrap();
            let x_s = Tensor::new(vec![50], random_vec(50, &mut r)).unwrap();
            let x_t = Tensor::new(vec![50], random_vec(50, &mut r)).unwrap();
            let p = lf.level_set_projection(&x_s, &x_t).unwrap();
            let fs = lf.evaluate(x_s.data());
            let fp = lf.evaluate(p.data());
            assert!((fp - fs).abs() < 1e-10 * fs.abs() + 1e-12);
        }
    }

    #[test]
    fn zero_weights_rejected() {
        assert!(matches!(
            LinearFunctional::new(Tensor::zeros(vec![4]), 1.0),
            Err(AnalyticError::DegenerateFunctional)
        ));
    }

    #[test]
    fn svd_diagonal_case() {
        let a = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let svd = SvdAnalysis::new(&a).unwrap();
        let (min_val, min_dir) = svd.min_rayleigh();
        let (max_val, max_dir) = svd.max_rayleigh();
        assert!((min_val - 1.0).abs() < 1e-12);
        assert!((max_val - 9.0).abs() < 1e-12);
        assert!((min_dir.data()[1].abs() - 1.0).abs() < 1e-9 && min_dir.data()[0].abs() < 1e-9);
        assert!((max_dir.data()[0].abs() - 1.0).abs() < 1e-9 && max_dir.data()[1].abs() < 1e-9);
        assert!((svd.condition_number() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn svd_orthogonal_matrix() {
        // rotation by 0.3 radians
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let a = Tensor::new(vec![2, 2], vec![c, -s, s, c]).unwrap();
        let svd = SvdAnalysis::new(&a).unwrap();
        assert!((svd.min_rayleigh().0 - 1.0).abs() < 1e-12);
        assert!((svd.max_rayleigh().0 - 1.0).abs() < 1e-12);
        assert!((svd.condition_number() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_scalar_matrix() {
        let a =
            Tensor::new(vec![3, 3], vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let svd = SvdAnalysis::new(&a).unwrap();
        assert!((svd.max_rayleigh().0 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn svd_condition_of_diag_10_and_01() {
        let a = Tensor::new(vec![2, 2], vec![10.0, 0.0, 0.0, 0.1]).unwrap();
        let svd = SvdAnalysis::new(&a).unwrap();
        assert!((svd.condition_number() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn svd_rank_deficient_rejected() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(
            SvdAnalysis::new(&a),
            Err(AnalyticError::RankDeficient)
        ));
    }

    #[test]
    fn svd_reconstructs_matrix_action() {
        let mut r = rng(31);
        for _ in 0..10 {
            let a = random_matrix(5, &mut r);
            let svd = match SvdAnalysis::new(&a) {
                Ok(s) => s,
                Err(AnalyticError::RankDeficient) => continue,
                Err(e) => panic!("{e}"),
            };
            // A v_i = sigma_i u_i for every singular triple
            for i in 0..5 {
                let av = svd.apply(svd.right_singular_vector(i));
                let sigma = svd.singular_values()[i];
                for (j, &u) in svd.left_singular_vector(i).iter().enumerate() {
                    assert!(
                        (av[j] - sigma * u).abs() < 1e-9,
                        "triple {i} mismatch at {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn rayleigh_sandwich_on_random_vectors() {
        let mut r = rng(37);
        let a = random_matrix(6, &mut r);
        let svd = SvdAnalysis::new(&a).unwrap();
        let (lo, _) = svd.min_rayleigh();
        let (hi, _) = svd.max_rayleigh();
        for _ in 0..10_000 {
            let v = random_unit(6, &mut r);
            let av = svd.apply(&v);
            let q = dot(&av, &av);
            assert!(
                q >= lo - 1e-9 && q <= hi + 1e-9,
                "rayleigh {q} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn extreme_directions_orthogonal_for_distinct_sigmas() {
        let mut r = rng(43);
        for _ in 0..10 {
            let a = random_matrix(6, &mut r);
            let svd = match SvdAnalysis::new(&a) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let sv = svd.singular_values();
            // simplicity tolerance: only assert when the extremes are isolated
            let gap_top = (sv[0] - sv[1]) / sv[0];
            let gap_bot = (sv[4] - sv[5]) / sv[0];
            if gap_top < 1e-8 || gap_bot < 1e-8 {
                continue;
            }
            let (_, vmin) = svd.min_rayleigh();
            let (_, vmax) = svd.max_rayleigh();
            assert!(dot(vmin.data(), vmax.data()).abs() < 1e-8);
        }
    }
}
