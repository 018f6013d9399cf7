//! Geometric probes and quantitative metrics over confidence landscapes:
//! interpolant paths, extremality probes, barycentric triangle hulls, and
//! image distances (RMSE, l-infinity, SSIM, and an in-toolkit feature
//! distance standing in for learned perceptual metrics, labeled as such in
//! every report).

use crate::models::{ConfidenceModel, Model, ModelError};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("lambda {0} outside [0,1]")]
    LambdaOutOfRange(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Linear interpolant path between two inputs; lambda = 1 is `first`,
/// lambda = 0 is `second`.
#[derive(Debug, Clone)]
pub struct PathSpec {
    pub first: Tensor,
    pub second: Tensor,
    pub samples: usize,
}

impl PathSpec {
    pub fn new(first: Tensor, second: Tensor) -> Result<Self, MetricError> {
        PathSpec::with_samples(first, second, 10)
    }

    pub fn with_samples(
        first: Tensor,
        second: Tensor,
        samples: usize,
    ) -> Result<Self, MetricError> {
        if first.shape() != second.shape() {
            return Err(MetricError::ShapeMismatch(
                first.shape().to_vec(),
                second.shape().to_vec(),
            ));
        }
        if samples < 2 {
            return Err(MetricError::Spec("need at least two path samples".into()));
        }
        Ok(PathSpec {
            first,
            second,
            samples,
        })
    }
}

/// lambda * first + (1 - lambda) * second.
pub fn interpolate(spec: &PathSpec, lambda: f64) -> Result<Tensor, MetricError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MetricError::LambdaOutOfRange(lambda));
    }
    let data: Vec<f64> = spec
        .first
        .data()
        .iter()
        .zip(spec.second.data())
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(Tensor::new(spec.first.shape().to_vec(), data).expect("finite interpolant"))
}

/// Class confidence sampled at equispaced lambdas (endpoints included).
#[derive(Debug, Clone)]
pub struct PathProfile {
    pub lambdas: Vec<f64>,
    pub confidences: Vec<f64>,
    pub min: f64,
    pub mean: f64,
}

impl PathProfile {
    /// Minimum over interior samples only (endpoints excluded).
    pub fn interior_min(&self) -> f64 {
        self.confidences[1..self.confidences.len() - 1]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn path_confidence_profile<M: ConfidenceModel>(
    model: &M,
    class: usize,
    spec: &PathSpec,
) -> Result<PathProfile, MetricError> {
    if spec.first.numel() != model.input_len() {
        return Err(MetricError::ShapeMismatch(
            spec.first.shape().to_vec(),
            vec![model.input_len()],
        ));
    }
    let n = spec.samples;
    let mut lambdas = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    for i in 0..n {
        let lambda = i as f64 / (n - 1) as f64;
        let point = interpolate(spec, lambda)?;
        lambdas.push(lambda);
        confidences.push(model.confidence(point.data(), class));
    }
    let min = confidences.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = confidences.iter().sum::<f64>() / n as f64;
    Ok(PathProfile {
        lambdas,
        confidences,
        min,
        mean,
    })
}

/// Confidences at x_s + (1 + eps) * (x_op - x_s) for each extrapolation
/// factor, pixel-clamped; drops are measured against the confidence at x_op.
#[derive(Debug, Clone)]
pub struct ExtremalityProbe {
    pub factors: Vec<f64>,
    pub confidences: Vec<f64>,
    /// Confidence at the unextrapolated output point.
    pub base_confidence: f64,
    /// Number of probe points where the pixel clamp was active.
    pub clamped_points: usize,
}

pub fn extremality_probe<M: ConfidenceModel>(
    model: &M,
    class: usize,
    source: &Tensor,
    output: &Tensor,
    factors: &[f64],
    pixel_clamp: Option<(f64, f64)>,
) -> Result<ExtremalityProbe, MetricError> {
    if source.shape() != output.shape() {
        return Err(MetricError::ShapeMismatch(
            source.shape().to_vec(),
            output.shape().to_vec(),
        ));
    }
    if factors.iter().any(|&e| e < 0.0) {
        return Err(MetricError::Spec(
            "extrapolation factors must be non-negative".into(),
        ));
    }
    let base_confidence = model.confidence(output.data(), class);
    let mut confidences = Vec::with_capacity(factors.len());
    let mut clamped_points = 0;
    for &eps in factors {
        let mut clamped = false;
        let point: Vec<f64> = source
            .data()
            .iter()
            .zip(output.data())
            .map(|(&s, &o)| {
                // o + eps * (o - s) == s + (1 + eps)(o - s), exact at eps = 0
                let raw = o + eps * (o - s);
                match pixel_clamp {
                    Some((lo, hi)) => {
                        let v = raw.clamp(lo, hi);
                        if v != raw {
                            clamped = true;
                        }
                        v
                    }
                    None => raw,
                }
            })
            .collect();
        if clamped {
            clamped_points += 1;
        }
        confidences.push(model.confidence(&point, class));
    }
    Ok(ExtremalityProbe {
        factors: factors.to_vec(),
        confidences,
        base_confidence,
        clamped_points,
    })
}

/// Triangular hull spanned by a source input and two traversal outputs
/// ("blindspots"), sampled on an equispaced barycentric grid.
#[derive(Debug, Clone)]
pub struct TriangleSpec {
    pub source: Tensor,
    pub blindspot1: Tensor,
    pub blindspot2: Tensor,
    pub subdivision: usize,
}

impl TriangleSpec {
    pub fn new(
        source: Tensor,
        blindspot1: Tensor,
        blindspot2: Tensor,
    ) -> Result<Self, MetricError> {
        TriangleSpec::with_subdivision(source, blindspot1, blindspot2, 10)
    }

    pub fn with_subdivision(
        source: Tensor,
        blindspot1: Tensor,
        blindspot2: Tensor,
        subdivision: usize,
    ) -> Result<Self, MetricError> {
        if source.shape() != blindspot1.shape() || source.shape() != blindspot2.shape() {
            return Err(MetricError::ShapeMismatch(
                source.shape().to_vec(),
                blindspot1.shape().to_vec(),
            ));
        }
        if subdivision == 0 {
            return Err(MetricError::Spec("subdivision must be at least 1".into()));
        }
        Ok(TriangleSpec {
            source,
            blindspot1,
            blindspot2,
            subdivision,
        })
    }

    /// (subdivision + 1)(subdivision + 2) / 2.
    pub fn sample_count(&self) -> usize {
        (self.subdivision + 1) * (self.subdivision + 2) / 2
    }
}

/// One barycentric sample: integer weights (i, j, k) with i + j + k = n over
/// (source, blindspot1, blindspot2), the float weights (summing to exactly
/// one), and the interpolated point.
#[derive(Debug, Clone)]
pub struct TriangleSample {
    pub grid: (usize, usize, usize),
    pub weights: [f64; 3],
    pub point: Tensor,
}

/// Equispaced barycentric samples of the triangle; vertices are returned
/// bit-exactly, and a degenerate triangle collapses onto its vertices.
pub fn triangle_samples(spec: &TriangleSpec) -> Vec<TriangleSample> {
    let n = spec.subdivision;
    let nf = n as f64;
    let mut samples = Vec::with_capacity(spec.sample_count());
    let d1: Vec<f64> = spec
        .blindspot1
        .data()
        .iter()
        .zip(spec.source.data())
        .map(|(&b, &s)| b - s)
        .collect();
    let d2: Vec<f64> = spec
        .blindspot2
        .data()
        .iter()
        .zip(spec.source.data())
        .map(|(&b, &s)| b - s)
        .collect();
    for i in (0..=n).rev() {
        for j in 0..=(n - i) {
            let k = n - i - j;
            let w0 = i as f64 / nf;
            let w1 = j as f64 / nf;
            // the last weight closes the sum to exactly 1.0
            let weights = [w0, w1, 1.0 - (w0 + w1)];
            let point = if i == n {
                spec.source.clone()
            } else if j == n {
                spec.blindspot1.clone()
            } else if k == n {
                spec.blindspot2.clone()
            } else {
                let data: Vec<f64> = spec
                    .source
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(c, &s)| s + (j as f64 * d1[c] + k as f64 * d2[c]) / nf)
                    .collect();
                Tensor::new(spec.source.shape().to_vec(), data).expect("finite sample")
            };
            samples.push(TriangleSample {
                grid: (i, j, k),
                weights,
                point,
            });
        }
    }
    samples
}

/// Confidence statistics over a sampled triangle.
#[derive(Debug, Clone)]
pub struct TriangleReport {
    pub source_confidence: f64,
    pub mean_confidence: f64,
    /// (delta, fraction of samples with confidence >= p_src - delta), in the
    /// order the deltas were given. The superlevel comparison is closed (>=).
    pub fractions: Vec<(f64, f64)>,
    pub sample_confidences: Vec<f64>,
}

pub fn triangle_report<M: ConfidenceModel>(
    model: &M,
    class: usize,
    spec: &TriangleSpec,
    deltas: &[f64],
) -> Result<TriangleReport, MetricError> {
    if spec.source.numel() != model.input_len() {
        return Err(MetricError::ShapeMismatch(
            spec.source.shape().to_vec(),
            vec![model.input_len()],
        ));
    }
    let source_confidence = model.confidence(spec.source.data(), class);
    let samples = triangle_samples(spec);
    let sample_confidences: Vec<f64> = samples
        .iter()
        .map(|s| model.confidence(s.point.data(), class))
        .collect();
    let mean_confidence =
        sample_confidences.iter().sum::<f64>() / sample_confidences.len() as f64;
    let fractions = deltas
        .iter()
        .map(|&delta| {
            let hits = sample_confidences
                .iter()
                .filter(|&&c| c >= source_confidence - delta)
                .count();
            (delta, hits as f64 / sample_confidences.len() as f64)
        })
        .collect();
    Ok(TriangleReport {
        source_confidence,
        mean_confidence,
        fractions,
        sample_confidences,
    })
}

/// Default threshold list for triangle fraction reports.
pub const DEFAULT_DELTAS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];

// ── image distances ─────────────────────────────────────────────────

pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok((sum / a.numel() as f64).sqrt())
}

pub fn l_inf(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(
            a.shape().to_vec(),
            b.shape().to_vec(),
        ));
    }
    Ok(())
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn to_gray(t: &Tensor) -> (Vec<f64>, usize, usize) {
    match t.shape() {
        [c, h, w] if *c > 1 => {
            let mut gray = vec![0.0; h * w];
            for ch in 0..*c {
                for (g, &v) in gray.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
                    *g += v;
                }
            }
            for g in gray.iter_mut() {
                *g /= *c as f64;
            }
            (gray, *h, *w)
        }
        [_, h, w] => (t.data().to_vec(), *h, *w),
        [h, w] => (t.data().to_vec(), *h, *w),
        _ => (t.data().to_vec(), 1, t.numel()),
    }
}

fn gaussian_window() -> Vec<f64> {
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1. RGB inputs are converted to gray
/// by the channel mean; inputs smaller than the window use one global
/// uniform window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let (ga, h, w) = to_gray(a);
    let (gb, _, _) = to_gray(b);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let local = |mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64| -> f64 {
        ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    };

    if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        let win = gaussian_window();
        let mut total = 0.0;
        let mut count = 0usize;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let weight = win[wy * SSIM_WINDOW + wx];
                        let va = ga[(oy + wy) * w + ox + wx];
                        let vb = gb[(oy + wy) * w + ox + wx];
                        mu_a += weight * va;
                        mu_b += weight * vb;
                        aa += weight * va * va;
                        bb += weight * vb * vb;
                        ab += weight * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                total += local(mu_a, mu_b, var_a, var_b, cov);
                count += 1;
            }
        }
        Ok(total / count as f64)
    } else {
        let n = ga.len() as f64;
        let mu_a = ga.iter().sum::<f64>() / n;
        let mu_b = gb.iter().sum::<f64>() / n;
        let aa = ga.iter().map(|&v| v * v).sum::<f64>() / n;
        let bb = gb.iter().map(|&v| v * v).sum::<f64>() / n;
        let ab = ga.iter().zip(&gb).map(|(&x, &y)| x * y).sum::<f64>() / n;
        Ok(local(mu_a, mu_b, aa - mu_a * mu_a, bb - mu_b * mu_b, ab - mu_a * mu_b))
    }
}

/// Euclidean distance between unit-normalized feature vectors at `layer`.
/// Stands in for learned perceptual distances; reports label it
/// `feature_distance` to keep the substitution explicit.
pub fn feature_distance(
    model: &Model,
    a: &Tensor,
    b: &Tensor,
    layer: &str,
) -> Result<f64, MetricError> {
    let fa = model.features(a, layer)?;
    let fb = model.features(b, layer)?;
    let normalize = |t: &Tensor| -> Vec<f64> {
        let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            t.data().iter().map(|v| v / norm).collect()
        } else {
            t.data().to_vec()
        }
    };
    let na = normalize(&fa);
    let nb = normalize(&fb);
    Ok(na
        .iter()
        .zip(&nb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Image distance metrics aggregated over a pair set.
#[derive(Debug, Clone)]
pub struct DistanceReport {
    pub rmse: MeanStd,
    pub l_inf: MeanStd,
    pub ssim: MeanStd,
    pub feature_distance: MeanStd,
}

pub fn distance_report(
    model: &Model,
    pairs: &[(Tensor, Tensor)],
    layer: &str,
) -> Result<DistanceReport, MetricError> {
    let mut rmses = Vec::with_capacity(pairs.len());
    let mut linfs = Vec::with_capacity(pairs.len());
    let mut ssims = Vec::with_capacity(pairs.len());
    let mut feats = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        rmses.push(rmse(a, b)?);
        linfs.push(l_inf(a, b)?);
        ssims.push(ssim(a, b)?);
        feats.push(feature_distance(model, a, b, layer)?);
    }
    Ok(DistanceReport {
        rmse: mean_std(&rmses),
        l_inf: mean_std(&linfs),
        ssim: mean_std(&ssims),
        feature_distance: mean_std(&feats),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ConfidenceModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct ConstantModel {
        confidence: f64,
        dim: usize,
    }

    impl ConfidenceModel for ConstantModel {
        fn input_len(&self) -> usize {
            self.dim
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn confidence(&self, _x: &[f64], _class: usize) -> f64 {
            self.confidence
        }
        fn confidence_and_loss_gradient(&self, _x: &[f64], _class: usize) -> (f64, Vec<f64>) {
            (self.confidence, vec![0.0; self.dim])
        }
    }

    /// High confidence only in a ball around an anchor point.
    struct BallModel {
        anchor: Vec<f64>,
        radius: f64,
    }

    impl ConfidenceModel for BallModel {
        fn input_len(&self) -> usize {
            self.anchor.len()
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn confidence(&self, x: &[f64], _class: usize) -> f64 {
            let d2: f64 = x
                .iter()
                .zip(&self.anchor)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2.sqrt() <= self.radius {
                0.9
            } else {
                0.5
            }
        }
        fn confidence_and_loss_gradient(&self, x: &[f64], class: usize) -> (f64, Vec<f64>) {
            (self.confidence(x, class), vec![0.0; self.anchor.len()])
        }
    }

    fn vec2(a: f64, b: f64) -> Tensor {
        Tensor::new(vec![2], vec![a, b]).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let spec = PathSpec::new(vec2(0.0, 0.0), vec2(2.0, 4.0)).unwrap();
        assert_eq!(interpolate(&spec, 1.0).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(interpolate(&spec, 0.0).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(interpolate(&spec, 0.5).unwrap().data(), &[1.0, 2.0]);
        assert!(matches!(
            interpolate(&spec, 1.5),
            Err(MetricError::LambdaOutOfRange(_))
        ));
    }

    #[test]
    fn path_profile_constant_model_is_flat() {
        let model = ConstantModel {
            confidence: 0.7,
            dim: 2,
        };
        let spec = PathSpec::new(vec2(0.0, 0.0), vec2(1.0, 1.0)).unwrap();
        let profile = path_confidence_profile(&model, 0, &spec).unwrap();
        assert_eq!(profile.confidences.len(), 10);
        assert!(profile.confidences.iter().all(|&c| c == 0.7));
        assert_eq!(profile.min, 0.7);
        assert!((profile.mean - 0.7).abs() < 1e-15);
    }

    #[test]
    fn path_profile_identical_endpoints_is_constant() {
        let (model, ds) = crate::test_fixtures::trained_blobs();
        let x = &ds.test[0].pixels;
        let spec = PathSpec::new(x.clone(), x.clone()).unwrap();
        let profile = path_confidence_profile(model, ds.test[0].label, &spec).unwrap();
        let first = profile.confidences[0];
        assert!(profile.confidences.iter().all(|&c| c == first));
    }

    #[test]
    fn extremality_zero_factor_matches_base() {
        let (model, ds) = crate::test_fixtures::trained_blobs();
        let s = &ds.test[0];
        let other = ds.test.iter().find(|t| t.label != s.label).unwrap();
        let probe = extremality_probe(
            model,
            s.label,
            &s.pixels,
            &other.pixels,
            &[0.0, 0.1],
            Some((0.0, 1.0)),
        )
        .unwrap();
        assert_eq!(probe.confidences[0], probe.base_confidence);
    }

    #[test]
    fn extremality_constant_model_no_drop() {
        let model = ConstantModel {
            confidence: 0.8,
            dim: 2,
        };
        let probe = extremality_probe(
            &model,
            0,
            &vec2(0.1, 0.1),
            &vec2(0.6, 0.6),
            &[0.05, 0.1, 0.2],
            Some((0.0, 1.0)),
        )
        .unwrap();
        for &c in &probe.confidences {
            assert_eq!(c, 0.8);
        }
    }

    #[test]
    fn extremality_counts_clamped_points() {
        let model = ConstantModel {
            confidence: 0.8,
            dim: 2,
        };
        // extrapolating past (0.9, 0.9) from (0.1, 0.1) leaves the box
        let probe = extremality_probe(
            &model,
            0,
            &vec2(0.1, 0.1),
            &vec2(0.9, 0.9),
            &[0.05, 0.5],
            Some((0.0, 1.0)),
        )
        .unwrap();
        assert_eq!(probe.clamped_points, 1);
    }

    #[test]
    fn triangle_sample_counts() {
        let spec = TriangleSpec::with_subdivision(
            vec2(0.0, 0.0),
            vec2(1.0, 0.0),
            vec2(0.0, 1.0),
            1,
        )
        .unwrap();
        let samples = triangle_samples(&spec);
        assert_eq!(samples.len(), 3);
        let points: Vec<&[f64]> = samples.iter().map(|s| s.point.data()).collect();
        assert!(points.contains(&[0.0, 0.0].as_slice()));
        assert!(points.contains(&[1.0, 0.0].as_slice()));
        assert!(points.contains(&[0.0, 1.0].as_slice()));

        let spec = TriangleSpec::new(vec2(0.0, 0.0), vec2(1.0, 0.0), vec2(0.0, 1.0)).unwrap();
        assert_eq!(spec.subdivision, 10);
        assert_eq!(triangle_samples(&spec).len(), 66);
        assert_eq!(spec.sample_count(), 66);
    }

    #[test]
    fn triangle_weights_sum_exactly_to_one() {
        let spec = TriangleSpec::new(vec2(0.1, 0.2), vec2(0.9, 0.1), vec2(0.4, 0.8)).unwrap();
        for sample in triangle_samples(&spec) {
            let sum = sample.weights[0] + sample.weights[1] + sample.weights[2];
            assert_eq!(sum, 1.0, "weights {:?}", sample.weights);
        }
    }

    #[test]
    fn triangle_centroid_present_when_divisible_by_three() {
        let spec = TriangleSpec::with_subdivision(
            vec2(0.0, 0.0),
            vec2(1.0, 0.0),
            vec2(0.0, 1.0),
            9,
        )
        .unwrap();
        let samples = triangle_samples(&spec);
        let centroid = samples.iter().find(|s| s.grid == (3, 3, 3)).unwrap();
        for (v, e) in centroid.point.data().iter().zip(&[1.0 / 3.0, 1.0 / 3.0]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn triangle_report_constant_model() {
        let model = ConstantModel {
            confidence: 0.6,
            dim: 2,
        };
        let spec = TriangleSpec::new(vec2(0.0, 0.0), vec2(1.0, 0.0), vec2(0.0, 1.0)).unwrap();
        let report = triangle_report(&model, 0, &spec, &DEFAULT_DELTAS).unwrap();
        assert!((report.mean_confidence - 0.6).abs() < 1e-12);
        for (_, frac) in &report.fractions {
            assert_eq!(*frac, 1.0);
        }
    }

    #[test]
    fn triangle_report_ball_model_thresholds() {
        // samples near the source keep 0.9, the rest sit at 0.5
        let model = BallModel {
            anchor: vec![0.0, 0.0],
            radius: 0.15,
        };
        let spec = TriangleSpec::new(vec2(0.0, 0.0), vec2(1.0, 0.0), vec2(0.0, 1.0)).unwrap();
        let report = triangle_report(&model, 0, &spec, &[0.0, 0.1, 0.5]).unwrap();
        assert_eq!(report.source_confidence, 0.9);
        // only the source corner (and its 0.1-grid neighbors within the
        // ball) reach 0.9; delta=0.5 admits everything
        let (_, f0) = report.fractions[0];
        let (_, f1) = report.fractions[1];
        let (_, f2) = report.fractions[2];
        assert!(f0 > 0.0 && f0 < 0.2);
        assert_eq!(f0, f1);
        assert_eq!(f2, 1.0);
        // fractions non-decreasing in delta
        assert!(f0 <= f1 && f1 <= f2);
    }

    #[test]
    fn degenerate_triangle_collapses_to_source() {
        let (model, ds) = crate::test_fixtures::trained_blobs();
        let s = &ds.test[1];
        let spec =
            TriangleSpec::new(s.pixels.clone(), s.pixels.clone(), s.pixels.clone()).unwrap();
        let report = triangle_report(model, s.label, &spec, &DEFAULT_DELTAS).unwrap();
        assert!((report.mean_confidence - report.source_confidence).abs() < 1e-12);
        for (_, frac) in &report.fractions {
            assert_eq!(*frac, 1.0);
        }
    }

    #[test]
    fn triangle_report_matches_direct_recomputation() {
        let (model, ds) = crate::test_fixtures::trained_blobs();
        let s = &ds.test[2];
        let b1 = &ds.test[3];
        let b2 = &ds.test[4];
        let spec =
            TriangleSpec::new(s.pixels.clone(), b1.pixels.clone(), b2.pixels.clone()).unwrap();
        let report = triangle_report(model, s.label, &spec, &DEFAULT_DELTAS).unwrap();
        // brute-force recomputation at the same 66 points
        let samples = triangle_samples(&spec);
        let confs: Vec<f64> = samples
            .iter()
            .map(|p| model.confidence(p.point.data(), s.label))
            .collect();
        let mean = confs.iter().sum::<f64>() / confs.len() as f64;
        assert!((report.mean_confidence - mean).abs() < 1e-12);
        for (delta, frac) in &report.fractions {
            let expect = confs
                .iter()
                .filter(|&&c| c >= report.source_confidence - delta)
                .count() as f64
                / confs.len() as f64;
            assert!((frac - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_and_linf_basics() {
        let a = vec2(0.2, 0.2);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(l_inf(&a, &a).unwrap(), 0.0);

        let b = vec2(0.3, 0.3);
        assert!((rmse(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!((l_inf(&a, &b).unwrap() - 0.1).abs() < 1e-12);

        // one differing coordinate out of d
        let d = 16;
        let x = Tensor::zeros(vec![d]);
        let mut y = Tensor::zeros(vec![d]);
        y.data_mut()[3] = 0.5;
        assert!((l_inf(&x, &y).unwrap() - 0.5).abs() < 1e-15);
        assert!((rmse(&x, &y).unwrap() - 0.5 / (d as f64).sqrt()).abs() < 1e-12);

        let c = Tensor::zeros(vec![3]);
        assert!(matches!(rmse(&a, &c), Err(MetricError::ShapeMismatch(..))));
    }

    #[test]
    fn ssim_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = Tensor::new(vec![3, 32, 32], data).unwrap();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Tensor::filled(vec![4, 4], 0.2);
        let b = Tensor::filled(vec![4, 4], 0.8);
        let c1 = 1e-4;
        let expected = (2.0 * 0.2 * 0.8 + c1) / (0.2 * 0.2 + 0.8 * 0.8 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn ssim_inverted_image_is_below_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = Tensor::new(vec![32, 32], data.clone()).unwrap();
        let inverted =
            Tensor::new(vec![32, 32], data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&img, &inverted).unwrap();
        assert!(s < 1.0);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..5 {
            let da: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
            let db: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = Tensor::new(vec![32, 32], da).unwrap();
            let b = Tensor::new(vec![32, 32], db).unwrap();
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() <= 1e-12);
        }
    }

    #[test]
    fn feature_distance_properties() {
        let (model, ds) = crate::test_fixtures::trained_blobs();
        let a = &ds.test[0];
        let layer = model.default_feature_layer();
        assert_eq!(
            feature_distance(model, &a.pixels, &a.pixels, layer).unwrap(),
            0.0
        );
        let b = &ds.test[1];
        let ab = feature_distance(model, &a.pixels, &b.pixels, layer).unwrap();
        let ba = feature_distance(model, &b.pixels, &a.pixels, layer).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn feature_distance_separates_classes_on_average() {
        let (model, ds) = crate::test_fixtures::trained_blobs();
        let layer = model.default_feature_layer();
        let mut same = Vec::new();
        let mut cross = Vec::new();
        // stride through the class-ordered test set so both kinds of pair occur
        let stride = ds.test.len() / 30;
        let picks: Vec<usize> = (0..30).map(|i| i * stride).collect();
        for (a_pos, &i) in picks.iter().enumerate() {
            for &j in &picks[(a_pos + 1)..] {
                let a = &ds.test[i];
                let b = &ds.test[j];
                let d = feature_distance(model, &a.pixels, &b.pixels, layer).unwrap();
                if a.label == b.label {
                    same.push(d);
                } else {
                    cross.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&cross) > mean(&same),
            "cross {} vs same {}",
            mean(&cross),
            mean(&same)
        );
    }

    #[test]
    fn extremality_drop_beyond_traversal_outputs() {
        use crate::lst::{traverse, LstConfig};
        let (model, ds) = crate::test_fixtures::trained_blobs();
        let mut r = ChaCha8Rng::seed_from_u64(51);
        let config = LstConfig::cifar_style();
        let mut at_zero = Vec::new();
        let mut at_ext = Vec::new();
        for _ in 0..50 {
            let source = &ds.test[r.random_range(0..ds.test.len())];
            let target = loop {
                let t = &ds.test[r.random_range(0..ds.test.len())];
                if t.label != source.label {
                    break t;
                }
            };
            let result =
                traverse(model, &source.pixels, source.label, &target.pixels, &config).unwrap();
            let probe = extremality_probe(
                model,
                source.label,
                &source.pixels,
                &result.output,
                &[0.0, 0.2],
                Some((0.0, 1.0)),
            )
            .unwrap();
            at_zero.push(probe.confidences[0]);
            at_ext.push(probe.confidences[1]);
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let m0 = median(&mut at_zero);
        let m2 = median(&mut at_ext);
        assert!(m2 < m0, "no extremality drop: median {m2} at 0.2 vs {m0} at 0");
    }

    proptest::proptest! {
        #[test]
        fn fraction_monotonicity_under_fuzz(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = BallModel {
                anchor: vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                radius: rng.random_range(0.05..0.8),
            };
            let spec = TriangleSpec::new(
                vec2(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                vec2(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                vec2(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            ).unwrap();
            let report = triangle_report(&model, 0, &spec, &DEFAULT_DELTAS).unwrap();
            for pair in report.fractions.windows(2) {
                proptest::prop_assert!(pair[0].1 <= pair[1].1);
            }
        }
    }
}
