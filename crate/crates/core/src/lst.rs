//! Level set traversal: walking the input space from a source toward an
//! arbitrary target while holding the model's confidence.
//!
//! Each iteration projects the remaining target direction onto the orthogonal
//! complement of the local loss gradient (a first-order move along the level
//! set), then adds a small accumulated step along the negative gradient that
//! repairs confidence lost to curvature. The accumulated parallel step is
//! box-bounded and smoothed by an exponential moving average. A confidence
//! guard aborts the walk if the source-class confidence ever drops more than
//! `delta` below its starting value.

use crate::data::{csv_float, write_csv, DataError};
use crate::models::ConfidenceModel;
use crate::tensor::Tensor;
use std::path::Path;
use thiserror::Error;

/// Gradient norms at or below this floor are treated as degenerate: the
/// projection is skipped for that iteration and a trace warning recorded.
pub const GRADIENT_DEGENERACY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LstError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: source {source_shape:?}, target {target_shape:?}, model expects length {expected}")]
    Shape {
        source_shape: Vec<usize>,
        target_shape: Vec<usize>,
        expected: usize,
    },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("non-finite confidence at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Csv(#[from] DataError),
}

/// Traversal hyperparameters.
///
/// `eta` scales the step perpendicular to the gradient, `epsilon` bounds the
/// accumulated parallel step (per coordinate), `delta` is the tolerated
/// confidence drop, and `beta` is the EMA coefficient smoothing the parallel
/// step. `pixel_clamp` keeps iterates inside the valid input box; `None`
/// disables clamping for unbounded domains.
#[derive(Debug, Clone, PartialEq)]
pub struct LstConfig {
    pub max_iterations: usize,
    pub eta: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    pub pixel_clamp: Option<(f64, f64)>,
    /// Stop once the iterate is within 1e-3 * sqrt(d) of the target. Turning
    /// this off forces fixed-iteration runs for reproduction sweeps.
    pub early_exit: bool,
    /// Keep every accepted iterate in [`LstResult::path`] (memory scales
    /// with m * d; off by default).
    pub record_path: bool,
}

impl LstConfig {
    /// ImageNet-scale defaults: m=400, eta=1e-2, epsilon=2e-3, delta=0.2.
    pub fn imagenet_style() -> Self {
        LstConfig {
            max_iterations: 400,
            eta: 1e-2,
            epsilon: 2e-3,
            delta: 0.2,
            beta: 0.9,
            pixel_clamp: Some((0.0, 1.0)),
            early_exit: true,
            record_path: false,
        }
    }

    /// CIFAR-scale defaults: m=300, delta=0.25, same step sizes.
    pub fn cifar_style() -> Self {
        LstConfig {
            max_iterations: 300,
            delta: 0.25,
            ..LstConfig::imagenet_style()
        }
    }

    pub fn validate(&self) -> Result<(), LstError> {
        if self.max_iterations == 0 {
            return Err(LstError::Config("max_iterations must be positive".into()));
        }
        if !(self.eta > 0.0) {
            return Err(LstError::Config("eta must be positive".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(LstError::Config("epsilon must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(LstError::Config("delta must lie in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(LstError::Config("beta must lie in [0,1)".into()));
        }
        if let Some((lo, hi)) = self.pixel_clamp {
            if !(lo < hi) {
                return Err(LstError::Config("pixel clamp bounds must be ordered".into()));
            }
        }
        Ok(())
    }
}

impl Default for LstConfig {
    fn default() -> Self {
        LstConfig::cifar_style()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    ConfidenceGuard,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max-iterations",
            Termination::ConfidenceGuard => "confidence-guard",
        }
    }
}

/// One traversal iteration as recorded in the trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iteration: usize,
    /// Source-class confidence at the iterate before stepping.
    pub confidence: f64,
    pub distance_to_target: f64,
    /// Inner product of the projected step with the gradient; zero up to
    /// rounding whenever the gradient is non-degenerate.
    pub orthogonality_residual: f64,
    /// Euclidean norm of the projected (perpendicular) step.
    pub perpendicular_step_norm: f64,
    pub gradient_norm: f64,
    /// Set when the gradient was at or below the degeneracy floor and the
    /// projection was skipped.
    pub degenerate_gradient: bool,
}

/// Outcome of a traversal.
#[derive(Debug, Clone)]
pub struct LstResult {
    pub output: Tensor,
    pub termination: Termination,
    pub trace: Vec<TraceRow>,
    pub source_confidence: f64,
    pub final_confidence: f64,
    /// Accepted iterates, present only when the config asked for them.
    pub path: Vec<Vec<f64>>,
}

impl LstResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// Trace export: iteration, confidence, distance-to-target,
    /// orthogonality residual, gradient norm.
    pub fn write_trace_csv(&self, path: &Path) -> Result<(), LstError> {
        let rows: Vec<Vec<String>> = self
            .trace
            .iter()
            .map(|r| {
                vec![
                    r.iteration.to_string(),
                    csv_float(r.confidence),
                    csv_float(r.distance_to_target),
                    csv_float(r.orthogonality_residual),
                    csv_float(r.gradient_norm),
                ]
            })
            .collect();
        write_csv(
            path,
            &[
                "iteration",
                "confidence",
                "distance_to_target",
                "orthogonality_residual",
                "gradient_norm",
            ],
            &rows,
        )?;
        Ok(())
    }
}

/// Projection of the remaining target direction onto the orthogonal
/// complement of `gradient`, scaled by `eta`.
///
/// Returns the step, the residual inner product with the gradient, and
/// whether the gradient was degenerate (in which case the step falls back to
/// `eta * (target - x)` unprojected).
pub fn orthogonal_step(
    x: &[f64],
    target: &[f64],
    gradient: &[f64],
    eta: f64,
) -> (Vec<f64>, f64, bool) {
    let mut step: Vec<f64> = target.iter().zip(x).map(|(t, xi)| t - xi).collect();
    let grad_sq: f64 = gradient.iter().map(|g| g * g).sum();
    if grad_sq.sqrt() <= GRADIENT_DEGENERACY_FLOOR {
        for v in step.iter_mut() {
            *v *= eta;
        }
        let residual = step.iter().zip(gradient).map(|(s, g)| s * g).sum();
        return (step, residual, true);
    }
    // two projection passes; the second removes the rounding residue of the
    // first so the orthogonality invariant holds at machine precision
    for _ in 0..2 {
        let coeff: f64 = step.iter().zip(gradient).map(|(s, g)| s * g).sum::<f64>() / grad_sq;
        for (s, g) in step.iter_mut().zip(gradient) {
            *s -= coeff * g;
        }
    }
    for v in step.iter_mut() {
        *v *= eta;
    }
    let residual = step.iter().zip(gradient).map(|(s, g)| s * g).sum();
    (step, residual, false)
}

/// Parallel-step update: accumulate along the negative gradient, clamp each
/// coordinate to [-epsilon, epsilon], then smooth with an EMA.
pub fn parallel_step(accumulated: &[f64], gradient: &[f64], epsilon: f64, beta: f64) -> Vec<f64> {
    accumulated
        .iter()
        .zip(gradient)
        .map(|(&acc, &g)| {
            let raw = (acc - epsilon * g).clamp(-epsilon, epsilon);
            beta * acc + (1.0 - beta) * raw
        })
        .collect()
}

/// Euclidean norm.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm of the loss gradient at `x`; near-zero values flag a regularity
/// failure of the level set (the traversal records it rather than crashing).
pub fn regularity_check<M: ConfidenceModel>(model: &M, x: &[f64], class: usize) -> f64 {
    let (_, gradient) = model.confidence_and_loss_gradient(x, class);
    l2_norm(&gradient)
}

/// Runs the traversal from `source` toward `target` holding confidence in
/// class `class`.
///
/// On a confidence-guard trip the previous iterate is returned, so the
/// output always satisfies f(output) >= f(source) - delta.
pub fn traverse<M: ConfidenceModel>(
    model: &M,
    source: &Tensor,
    class: usize,
    target: &Tensor,
    config: &LstConfig,
) -> Result<LstResult, LstError> {
    config.validate()?;
    let d = model.input_len();
    if source.numel() != d || target.numel() != d || source.shape() != target.shape() {
        return Err(LstError::Shape {
            source_shape: source.shape().to_vec(),
            target_shape: target.shape().to_vec(),
            expected: d,
        });
    }
    if class >= model.num_classes() {
        return Err(LstError::ClassOutOfRange {
            class,
            classes: model.num_classes(),
        });
    }

    let convergence_radius = 1e-3 * (d as f64).sqrt();
    let mut x = source.data().to_vec();
    let mut accumulated = vec![0.0; d];
    let source_confidence = model.confidence(&x, class);
    if !source_confidence.is_finite() {
        return Err(LstError::NonFinite { iteration: 0 });
    }

    let mut trace = Vec::new();
    let mut path = Vec::new();
    let mut termination = Termination::MaxIterations;
    if config.record_path {
        path.push(x.clone());
    }

    for iteration in 1..=config.max_iterations {
        let delta_x: Vec<f64> = target.data().iter().zip(&x).map(|(t, xi)| t - xi).collect();
        let distance = l2_norm(&delta_x);
        if config.early_exit && distance < convergence_radius {
            termination = Termination::Converged;
            break;
        }
        let (confidence, gradient) = model.confidence_and_loss_gradient(&x, class);
        if !confidence.is_finite() {
            return Err(LstError::NonFinite { iteration });
        }
        let gradient_norm = l2_norm(&gradient);
        let (perpendicular, residual, degenerate) =
            orthogonal_step(&x, target.data(), &gradient, config.eta);
        if !degenerate {
            accumulated = parallel_step(&accumulated, &gradient, config.epsilon, config.beta);
        }

        let mut candidate: Vec<f64> = x
            .iter()
            .zip(&perpendicular)
            .zip(&accumulated)
            .map(|((&xi, &p), &a)| xi + p + a)
            .collect();
        if let Some((lo, hi)) = config.pixel_clamp {
            for v in candidate.iter_mut() {
                *v = v.clamp(lo, hi);
            }
        }

        let new_confidence = model.confidence(&candidate, class);
        if !new_confidence.is_finite() {
            return Err(LstError::NonFinite { iteration });
        }

        trace.push(TraceRow {
            iteration,
            confidence,
            distance_to_target: distance,
            orthogonality_residual: residual,
            perpendicular_step_norm: l2_norm(&perpendicular),
            gradient_norm,
            degenerate_gradient: degenerate,
        });

        if source_confidence - new_confidence > config.delta {
            termination = Termination::ConfidenceGuard;
            break;
        }
        x = candidate;
        if config.record_path {
            path.push(x.clone());
        }
    }

    let final_confidence = model.confidence(&x, class);
    Ok(LstResult {
        output: Tensor::new(source.shape().to_vec(), x).expect("iterates stay finite"),
        termination,
        trace,
        source_confidence,
        final_confidence,
        path,
    })
}
