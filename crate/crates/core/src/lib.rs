//! Toolkit for exploring and quantifying the under-sensitivity ("blind
//! spots") of differentiable classifiers.
//!
//! The pieces fit together as follows: [`tensor`] provides dense f64 arrays
//! with reverse-mode differentiation; [`models`] trains small MLP/CNN
//! classifiers on top of it and serializes them as checkpoints; [`lst`]
//! implements the level set traversal algorithm that walks from a source
//! input toward an arbitrary target while holding model confidence;
//! [`attacks`] supplies the standard adversarial attacks used for contrast;
//! [`analytic`] gives closed-form model families (linear functionals,
//! full-rank maps) whose level sets are known exactly and serve as oracles;
//! [`metrics`] quantifies confidence geometry over paths and triangular
//! hulls plus image distances; [`data`] handles datasets and file formats;
//! [`cli`] ties everything into reproducible command-line experiments.

pub mod analytic;
pub mod attacks;
pub mod cli;
pub mod data;
pub mod lst;
pub mod metrics;
pub mod models;
pub mod tensor;

#[cfg(test)]
pub(crate) mod test_fixtures {
    use crate::data::{generate_blobs, BlobDatasetSpec, Dataset};
    use crate::models::{train, Arch, Model, TrainConfig};
    use std::sync::OnceLock;

    /// Four-corner blobs MLP shared by unit tests; trained once per process.
    pub fn trained_blobs() -> &'static (Model, Dataset) {
        static FIXTURE: OnceLock<(Model, Dataset)> = OnceLock::new();
        FIXTURE.get_or_init(|| {
            let ds = generate_blobs(&BlobDatasetSpec::four_corner_classes(0)).unwrap();
            let cfg = TrainConfig {
                epochs: 40,
                seed: 0,
                ..TrainConfig::default()
            };
            let (model, _) = train(
                Arch::Mlp {
                    input_dim: 2,
                    classes: 4,
                },
                &cfg,
                &ds.train,
                &ds.id,
            )
            .unwrap();
            (model, ds)
        })
    }
}
