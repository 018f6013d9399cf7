//! Trainable classifier families, a minibatch trainer, and checkpoints.
//!
//! Two fixed reference architectures: an MLP (input -> 64 -> 64 -> K) for
//! visualizable low-dimensional experiments where the whole input plane can
//! be mapped exhaustively, and a small CNN for 3x32x32 images. Models are
//! immutable after training; evaluation from multiple threads is safe.

use crate::data::LabeledImage;
use crate::tensor::{softmax, NodeId, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("input shape mismatch: model expects {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("training config error: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Differentiable confidence surface, the contract required by the traversal
/// and the geometry metrics.
///
/// For classifiers the confidence is the class-`class` softmax output and the
/// loss is the cross entropy against that class; closed-form families map
/// their own value/gradient onto the same interface.
pub trait ConfidenceModel {
    fn input_len(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Confidence of `class` at `x`.
    fn confidence(&self, x: &[f64], class: usize) -> f64;
    /// Confidence together with the gradient of the traversal loss at `x`.
    /// Stepping along the negative gradient raises the confidence.
    fn confidence_and_loss_gradient(&self, x: &[f64], class: usize) -> (f64, Vec<f64>);
}

pub const MLP_HIDDEN: usize = 64;
const CNN_CONV1: usize = 8;
const CNN_CONV2: usize = 16;
const CNN_FLAT: usize = CNN_CONV2 * 8 * 8;

/// Architecture descriptor; fixes parameter shapes and layer names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    /// input_dim -> 64 -> 64 -> classes, ReLU activations.
    Mlp { input_dim: usize, classes: usize },
    /// 3x32x32 -> conv(8,3x3) -> pool -> conv(16,3x3) -> pool -> fc.
    Cnn { classes: usize },
}

impl Arch {
    pub fn classes(&self) -> usize {
        match self {
            Arch::Mlp { classes, .. } | Arch::Cnn { classes } => *classes,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Mlp { input_dim, .. } => vec![*input_dim],
            Arch::Cnn { .. } => vec![3, 32, 32],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn layer_names(&self) -> &'static [&'static str] {
        match self {
            Arch::Mlp { .. } => &["hidden1", "hidden2", "logits"],
            Arch::Cnn { .. } => &["conv1", "pool1", "conv2", "pool2", "flatten", "logits"],
        }
    }

    /// Layer whose activations feed the final fully-connected layer; the
    /// default feature map for feature-level attacks and distances.
    pub fn default_feature_layer(&self) -> &'static str {
        match self {
            Arch::Mlp { .. } => "hidden2",
            Arch::Cnn { .. } => "flatten",
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Arch::Mlp { input_dim, classes } => vec![
                vec![MLP_HIDDEN, *input_dim],
                vec![MLP_HIDDEN],
                vec![MLP_HIDDEN, MLP_HIDDEN],
                vec![MLP_HIDDEN],
                vec![*classes, MLP_HIDDEN],
                vec![*classes],
            ],
            Arch::Cnn { classes } => vec![
                vec![CNN_CONV1, 3, 3, 3],
                vec![CNN_CONV1],
                vec![CNN_CONV2, CNN_CONV1, 3, 3],
                vec![CNN_CONV2],
                vec![*classes, CNN_FLAT],
                vec![*classes],
            ],
        }
    }

    fn descriptor_name(&self) -> &'static str {
        match self {
            Arch::Mlp { .. } => "mlp",
            Arch::Cnn { .. } => "cnn",
        }
    }
}

/// Training provenance carried into checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub dataset: String,
}

/// A classifier with softmax outputs. Parameters are immutable after
/// construction; every evaluation runs on its own tape.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Arch,
    params: Vec<Tensor>,
    meta: TrainMeta,
}

struct ForwardPass {
    logits: NodeId,
    layers: Vec<(&'static str, NodeId)>,
}

impl Model {
    /// Builds a model from explicit parameter tensors (shape-checked).
    pub fn with_params(
        arch: Arch,
        params: Vec<Tensor>,
        meta: TrainMeta,
    ) -> Result<Self, ModelError> {
        let expected = arch.param_shapes();
        if params.len() != expected.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, e) in params.iter().zip(&expected) {
            if p.shape() != e.as_slice() {
                return Err(ModelError::Format(format!(
                    "parameter shape {:?} does not match architecture shape {:?}",
                    p.shape(),
                    e
                )));
            }
        }
        Ok(Model { arch, params, meta })
    }

    /// Random initialization: He-uniform weights, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let numel: usize = shape.iter().product();
                    let data = (0..numel)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor::new(shape, data).expect("finite init")
                }
            })
            .collect();
        Model {
            arch,
            params,
            meta: TrainMeta::default(),
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.numel() != self.arch.input_len() {
            return Err(ModelError::InputShape {
                expected: self.arch.input_shape(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn build_forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<ForwardPass, TensorError> {
        let mut layers = Vec::new();
        let logits = match &self.arch {
            Arch::Mlp { input_dim, classes } => {
                let x = tape.reshape(x, vec![*input_dim, 1])?;
                let h1 = tape.matmul(params[0], x)?;
                let h1 = tape.add_bias(h1, params[1])?;
                let h1 = tape.relu(h1)?;
                layers.push(("hidden1", h1));
                let h2 = tape.matmul(params[2], h1)?;
                let h2 = tape.add_bias(h2, params[3])?;
                let h2 = tape.relu(h2)?;
                layers.push(("hidden2", h2));
                let logits = tape.matmul(params[4], h2)?;
                let logits = tape.add_bias(logits, params[5])?;
                tape.reshape(logits, vec![*classes])?
            }
            Arch::Cnn { classes } => {
                let x = tape.reshape(x, vec![3, 32, 32])?;
                let c1 = tape.conv2d(x, params[0], 1, 1)?;
                let c1 = tape.add_bias(c1, params[1])?;
                let c1 = tape.relu(c1)?;
                layers.push(("conv1", c1));
                let p1 = tape.avg_pool2(c1)?;
                layers.push(("pool1", p1));
                let c2 = tape.conv2d(p1, params[2], 1, 1)?;
                let c2 = tape.add_bias(c2, params[3])?;
                let c2 = tape.relu(c2)?;
                layers.push(("conv2", c2));
                let p2 = tape.avg_pool2(c2)?;
                layers.push(("pool2", p2));
                let flat = tape.reshape(p2, vec![CNN_FLAT, 1])?;
                layers.push(("flatten", flat));
                let logits = tape.matmul(params[4], flat)?;
                let logits = tape.add_bias(logits, params[5])?;
                tape.reshape(logits, vec![*classes])?
            }
        };
        layers.push(("logits", logits));
        Ok(ForwardPass { logits, layers })
    }

    fn forward_tape(
        &self,
        x: &Tensor,
        input_requires_grad: bool,
        params_require_grad: bool,
    ) -> Result<(Tape, NodeId, ForwardPass), ModelError> {
        let mut tape = Tape::new();
        let param_ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p, params_require_grad))
            .collect::<Result<_, _>>()?;
        let x_id = tape.leaf(x, input_requires_grad)?;
        let pass = self.build_forward(&mut tape, &param_ids, x_id)?;
        Ok((tape, x_id, pass))
    }

    /// Softmax probability vector at `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        let (tape, _, pass) = self.forward_tape(x, false, false)?;
        Ok(softmax(tape.value(pass.logits)))
    }

    /// Argmax class, ties broken by the lowest index.
    pub fn predicted_class(&self, x: &Tensor) -> Result<usize, ModelError> {
        let probs = self.predict(x)?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Activations of the named layer at `x`.
    pub fn features(&self, x: &Tensor, layer: &str) -> Result<Tensor, ModelError> {
        self.check_input(x)?;
        if !self.arch.layer_names().contains(&layer) {
            return Err(ModelError::UnknownLayer(layer.to_string()));
        }
        let (tape, _, pass) = self.forward_tape(x, false, false)?;
        let (_, id) = pass
            .layers
            .iter()
            .find(|(name, _)| *name == layer)
            .expect("validated layer name");
        let flat = tape.value(*id).to_vec();
        Ok(Tensor::new(vec![flat.len()], flat)?)
    }

    pub fn default_feature_layer(&self) -> &'static str {
        self.arch.default_feature_layer()
    }

    fn tensor_from_flat(&self, x: &[f64]) -> Tensor {
        Tensor::new(self.arch.input_shape(), x.to_vec()).expect("finite input")
    }

    /// Cross-entropy loss against `class` and its gradient w.r.t. the input.
    pub fn loss_and_input_gradient(
        &self,
        x: &Tensor,
        class: usize,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_input(x)?;
        if class >= self.classes() {
            return Err(ModelError::ClassOutOfRange {
                class,
                classes: self.classes(),
            });
        }
        let (mut tape, x_id, pass) = self.forward_tape(x, true, false)?;
        let loss = tape.softmax_cross_entropy(pass.logits, class)?;
        let loss_value = tape.scalar(loss)?;
        tape.backward(loss)?;
        Ok((loss_value, tape.grad(x_id).expect("backward ran").to_vec()))
    }

    /// Squared feature distance to `target` at layer `layer`, with its
    /// gradient w.r.t. the input. Objective of the feature-level attack.
    pub fn feature_gap_and_input_gradient(
        &self,
        x: &Tensor,
        layer: &str,
        target: &Tensor,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_input(x)?;
        if !self.arch.layer_names().contains(&layer) {
            return Err(ModelError::UnknownLayer(layer.to_string()));
        }
        let (mut tape, x_id, pass) = self.forward_tape(x, true, false)?;
        let (_, feat) = pass
            .layers
            .iter()
            .find(|(name, _)| *name == layer)
            .expect("validated layer name");
        let feat = tape.reshape(*feat, vec![tape.value(*feat).len()])?;
        if tape.value(feat).len() != target.numel() {
            return Err(ModelError::InputShape {
                expected: vec![tape.value(feat).len()],
                got: target.shape().to_vec(),
            });
        }
        let t = tape.leaf(target, false)?;
        let diff = tape.sub(feat, t)?;
        let gap = tape.dot(diff, diff)?;
        let gap_value = tape.scalar(gap)?;
        tape.backward(gap)?;
        Ok((gap_value, tape.grad(x_id).expect("backward ran").to_vec()))
    }
}

impl ConfidenceModel for Model {
    fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn confidence(&self, x: &[f64], class: usize) -> f64 {
        let probs = self
            .predict(&self.tensor_from_flat(x))
            .expect("input length checked by caller");
        probs[class]
    }

    fn confidence_and_loss_gradient(&self, x: &[f64], class: usize) -> (f64, Vec<f64>) {
        let t = self.tensor_from_flat(x);
        let (loss, grad) = self
            .loss_and_input_gradient(&t, class)
            .expect("input length checked by caller");
        // loss = -ln f^class(x)
        ((-loss).exp(), grad)
    }
}

// ── training ────────────────────────────────────────────────────────

/// Perturbation budget for adversarial (PGD inner-loop) training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialTraining {
    pub radius: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adversarial: Option<AdversarialTraining>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            adversarial: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(ModelError::Config("at least one epoch required".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Minibatch SGD with momentum; deterministic for a fixed seed.
///
/// In adversarial mode every sample is replaced by a PGD perturbation of
/// itself against the current parameters before the gradient step.
pub fn train(
    arch: Arch,
    config: &TrainConfig,
    data: &[LabeledImage],
    dataset_id: &str,
) -> Result<(Model, Vec<EpochStats>), ModelError> {
    config.validate()?;
    if data.is_empty() {
        return Err(ModelError::Config("training data is empty".into()));
    }
    let classes = arch.classes();
    if let Some(bad) = data.iter().find(|s| s.label >= classes) {
        return Err(ModelError::Config(format!(
            "label {} out of range for {} classes",
            bad.label, classes
        )));
    }
    let input_len = arch.input_len();
    if let Some(bad) = data.iter().find(|s| s.pixels.numel() != input_len) {
        return Err(ModelError::InputShape {
            expected: arch.input_shape(),
            got: bad.pixels.shape().to_vec(),
        });
    }

    let mut model = Model::init(arch, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut velocity: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|p| vec![0.0; p.numel()])
        .collect();
    let mut log = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        // Fisher-Yates reshuffle each epoch
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f64>> = model
                .params
                .iter()
                .map(|p| vec![0.0; p.numel()])
                .collect();
            for &idx in batch {
                let sample = &data[idx];
                let input = if let Some(adv) = config.adversarial {
                    let attack = crate::attacks::AttackConfig {
                        radius: adv.radius,
                        step_size: adv.radius / 4.0,
                        steps: adv.steps,
                        random_start: true,
                        seed: rng.random(),
                    };
                    crate::attacks::pgd(&model, &sample.pixels, sample.label, &attack)
                        .map_err(|e| ModelError::Config(format!("adversarial step: {e}")))?
                } else {
                    sample.pixels.clone()
                };

                let mut tape = Tape::new();
                let param_ids: Vec<NodeId> = model
                    .params
                    .iter()
                    .map(|p| tape.leaf(p, true))
                    .collect::<Result<_, _>>()?;
                let x_id = tape.leaf(&input, false)?;
                let pass = model.build_forward(&mut tape, &param_ids, x_id)?;
                let loss = tape.softmax_cross_entropy(pass.logits, sample.label)?;
                let loss_value = tape.scalar(loss)?;
                if !loss_value.is_finite() {
                    return Err(ModelError::Diverged { epoch });
                }
                loss_sum += loss_value;
                tape.backward(loss)?;
                for (g, id) in grads.iter_mut().zip(&param_ids) {
                    for (acc, &dg) in g.iter_mut().zip(tape.grad(*id).expect("backward ran")) {
                        *acc += dg;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((param, vel), grad) in model
                .params
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&grads)
            {
                let data = param.data_mut();
                for i in 0..data.len() {
                    vel[i] = config.momentum * vel[i] + grad[i] * scale;
                    data[i] -= config.learning_rate * vel[i];
                }
            }
        }

        let correct = data
            .iter()
            .filter(|s| matches!(model.predicted_class(&s.pixels), Ok(c) if c == s.label))
            .count();
        log.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }

    model.meta = TrainMeta {
        seed: config.seed,
        epochs: config.epochs,
        dataset: dataset_id.to_string(),
    };
    Ok((model, log))
}

/// Fraction of samples classified correctly.
pub fn accuracy(model: &Model, data: &[LabeledImage]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .iter()
        .filter(|s| matches!(model.predicted_class(&s.pixels), Ok(c) if c == s.label))
        .count();
    correct as f64 / data.len() as f64
}

// ── checkpoint format ───────────────────────────────────────────────
//
// Little-endian layout:
//   magic "LVST" | u32 version | u32 descriptor_len | descriptor (UTF-8
//   key=value lines) | u32 param_count | per tensor: u32 ndim, u32 dims[],
//   u64 count, f64 data[] | u64 FNV-1a of all preceding bytes.
// The f64 payload is bit-preserving, so a load reproduces predictions
// exactly.

const CHECKPOINT_MAGIC: &[u8; 4] = b"LVST";
const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let mut descriptor = String::new();
    descriptor.push_str(&format!("arch={}\n", model.arch.descriptor_name()));
    match &model.arch {
        Arch::Mlp { input_dim, classes } => {
            descriptor.push_str(&format!("input_dim={input_dim}\n"));
            descriptor.push_str(&format!("classes={classes}\n"));
        }
        Arch::Cnn { classes } => {
            descriptor.push_str(&format!("classes={classes}\n"));
        }
    }
    descriptor.push_str(&format!("seed={}\n", model.meta.seed));
    descriptor.push_str(&format!("epochs={}\n", model.meta.epochs));
    descriptor.push_str(&format!("dataset={}\n", model.meta.dataset));
    buf.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    buf.extend_from_slice(descriptor.as_bytes());

    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(p.numel() as u64).to_le_bytes());
        for &v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a(&buf);
    buf.extend_from_slice(&digest.to_le_bytes());

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Format("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(ModelError::Format("truncated checkpoint".into()));
    }
    let (body, digest_bytes) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(digest_bytes.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(ModelError::Format("checksum mismatch".into()));
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 0,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let desc_len = cur.u32()? as usize;
    let descriptor = std::str::from_utf8(cur.take(desc_len)?)
        .map_err(|_| ModelError::Format("descriptor is not UTF-8".into()))?;

    let mut arch_name = None;
    let mut input_dim = None;
    let mut classes = None;
    let mut meta = TrainMeta::default();
    for line in descriptor.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key {
            "arch" => arch_name = Some(value.to_string()),
            "input_dim" => {
                input_dim = Some(value.parse().map_err(|_| {
                    ModelError::Format(format!("bad input_dim {value:?}"))
                })?)
            }
            "classes" => {
                classes = Some(value.parse().map_err(|_| {
                    ModelError::Format(format!("bad classes {value:?}"))
                })?)
            }
            "seed" => meta.seed = value.parse().unwrap_or(0),
            "epochs" => meta.epochs = value.parse().unwrap_or(0),
            "dataset" => meta.dataset = value.to_string(),
            _ => {}
        }
    }
    let classes = classes.ok_or_else(|| ModelError::Format("descriptor lacks classes".into()))?;
    let arch = match arch_name.as_deref() {
        Some("mlp") => Arch::Mlp {
            input_dim: input_dim
                .ok_or_else(|| ModelError::Format("mlp descriptor lacks input_dim".into()))?,
            classes,
        },
        Some("cnn") => Arch::Cnn { classes },
        other => {
            return Err(ModelError::Format(format!(
                "unknown architecture {other:?}"
            )))
        }
    };

    let n_params = cur.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let count = cur.u64()? as usize;
        let raw = cur.take(count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(
            Tensor::new(shape, data)
                .map_err(|e| ModelError::Format(format!("bad parameter payload: {e}")))?,
        );
    }
    if cur.pos != body.len() {
        return Err(ModelError::Format("trailing bytes in checkpoint".into()));
    }
    Model::with_params(arch, params, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob_data() -> Vec<LabeledImage> {
        crate::data::generate_blobs(&crate::data::BlobDatasetSpec::two_separated_classes(0))
            .unwrap()
            .train
    }

    #[test]
    fn zero_final_layer_gives_uniform_prediction() {
        let arch = Arch::Mlp {
            input_dim: 2,
            classes: 4,
        };
        let mut model = Model::init(arch.clone(), 1);
        model.params[4] = Tensor::zeros(vec![4, MLP_HIDDEN]);
        model.params[5] = Tensor::zeros(vec![4]);
        let x = Tensor::new(vec![2], vec![0.3, 0.8]).unwrap();
        let probs = model.predict(&x).unwrap();
        for &p in &probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_bias_dominates() {
        // zero weights everywhere, final bias (+10, -10): prediction ~ (1, 0)
        let arch = Arch::Mlp {
            input_dim: 2,
            classes: 2,
        };
        let params = vec![
            Tensor::zeros(vec![MLP_HIDDEN, 2]),
            Tensor::zeros(vec![MLP_HIDDEN]),
            Tensor::zeros(vec![MLP_HIDDEN, MLP_HIDDEN]),
            Tensor::zeros(vec![MLP_HIDDEN]),
            Tensor::zeros(vec![2, MLP_HIDDEN]),
            Tensor::new(vec![2], vec![10.0, -10.0]).unwrap(),
        ];
        let model = Model::with_params(arch, params, TrainMeta::default()).unwrap();
        let probs = model
            .predict(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap())
            .unwrap();
        assert!(probs[0] > 0.999_999);
        assert!(probs[1] < 1e-6);
    }

    #[test]
    fn softmax_outputs_normalize_under_fuzz() {
        let model = Model::init(
            Arch::Mlp {
                input_dim: 2,
                classes: 5,
            },
            7,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let x = Tensor::new(
                vec![2],
                vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            )
            .unwrap();
            let p = model.predict(&x).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prediction_is_continuous_in_the_input() {
        let model = Model::init(
            Arch::Mlp {
                input_dim: 2,
                classes: 3,
            },
            3,
        );
        let x = Tensor::new(vec![2], vec![0.4, 0.6]).unwrap();
        let base = model.predict(&x).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6] {
            let xp = Tensor::new(vec![2], vec![0.4 + eps, 0.6 - eps]).unwrap();
            let probs = model.predict(&xp).unwrap();
            let change = probs
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(change <= last + 1e-15);
            last = change;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn logits_layer_matches_predict() {
        let model = Model::init(
            Arch::Mlp {
                input_dim: 2,
                classes: 4,
            },
            11,
        );
        let x = Tensor::new(vec![2], vec![0.2, 0.9]).unwrap();
        let logits = model.features(&x, "logits").unwrap();
        let via_features = softmax(logits.data());
        let direct = model.predict(&x).unwrap();
        assert_eq!(via_features, direct);
    }

    #[test]
    fn features_deterministic_and_distinct() {
        let model = Model::init(
            Arch::Mlp {
                input_dim: 2,
                classes: 2,
            },
            5,
        );
        let a = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let b = Tensor::new(vec![2], vec![0.9, 0.7]).unwrap();
        let fa1 = model.features(&a, "hidden2").unwrap();
        let fa2 = model.features(&a, "hidden2").unwrap();
        assert_eq!(fa1, fa2);
        let fb = model.features(&b, "hidden2").unwrap();
        let dist: f64 = fa1
            .data()
            .iter()
            .zip(fb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn unknown_layer_rejected() {
        let model = Model::init(
            Arch::Mlp {
                input_dim: 2,
                classes: 2,
            },
            5,
        );
        let x = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        assert!(matches!(
            model.features(&x, "conv9"),
            Err(ModelError::UnknownLayer(_))
        ));
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(
                Arch::Mlp {
                    input_dim: 2,
                    classes: 2
                },
                &cfg,
                &blob_data(),
                "blobs"
            ),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let cfg = TrainConfig {
            epochs: 50,
            seed: 0,
            ..TrainConfig::default()
        };
        let data = blob_data();
        let (model, log) = train(
            Arch::Mlp {
                input_dim: 2,
                classes: 2,
            },
            &cfg,
            &data,
            "blobs",
        )
        .unwrap();
        let final_acc = log.last().unwrap().accuracy;
        assert!(final_acc >= 0.99, "train accuracy {final_acc}");

        // trained model is confident at a cluster center
        let spec = crate::data::BlobDatasetSpec::two_separated_classes(0);
        let center = Tensor::new(vec![2], spec.centers[0].clone()).unwrap();
        let conf = model.predict(&center).unwrap()[0];
        assert!(conf > 0.9, "center confidence {conf}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = blob_data();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let arch = Arch::Mlp {
            input_dim: 2,
            classes: 2,
        };
        let (m1, _) = train(arch.clone(), &cfg, &data, "blobs").unwrap();
        let (m2, _) = train(arch, &cfg, &data, "blobs").unwrap();
        for (a, b) in m1.params().iter().zip(m2.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join("levelset-test-ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");

        let data = blob_data();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let (model, _) = train(
            Arch::Mlp {
                input_dim: 2,
                classes: 2,
            },
            &cfg,
            &data,
            "blobs",
        )
        .unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta(), model.meta());

        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..100 {
            let x = Tensor::new(
                vec![2],
                vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            )
            .unwrap();
            let a = model.predict(&x).unwrap();
            let b = loaded.predict(&x).unwrap();
            assert_eq!(a, b, "prediction changed after checkpoint roundtrip");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let dir = std::env::temp_dir().join("levelset-test-ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let model = Model::init(
            Arch::Mlp {
                input_dim: 2,
                classes: 2,
            },
            0,
        );

        // corrupted magic
        let path = dir.join("magic.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        // keep the digest consistent so the magic check itself fires
        let digest = fnv1a(&bytes[..bytes.len() - 8]);
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&digest.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Format(msg)) if msg.contains("magic")
        ));

        // old version byte
        let path = dir.join("version.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 0;
        let digest = fnv1a(&bytes[..bytes.len() - 8]);
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&digest.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::UnsupportedVersion(0))
        ));

        // flipped payload byte breaks the digest
        let path = dir.join("digest.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Format(msg)) if msg.contains("checksum")
        ));

        // truncation
        let path = dir.join("trunc.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
