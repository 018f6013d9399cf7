//! `levelset train`: fit a classifier, write checkpoint + training log.

use super::{ensure_out_dir, load_dataset, CliError, DatasetArgs, Params};
use crate::data::{csv_float, write_csv};
use crate::models::{save_checkpoint, train, AdversarialTraining, Arch, TrainConfig};
use clap::Args;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub(crate) struct TrainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Architecture: mlp | cnn (default picked from the dataset).
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train against a PGD adversary instead of clean samples.
    #[arg(long)]
    pub adversarial: bool,
    /// PGD radius for adversarial training.
    #[arg(long)]
    pub radius: Option<f64>,
    /// PGD steps for adversarial training.
    #[arg(long)]
    pub adv_steps: Option<usize>,
    /// Optional `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/train")]
    pub out: PathBuf,
}

pub(crate) fn run(args: &TrainArgs) -> Result<(), CliError> {
    let mut params = Params::default();
    params.set("seed", 0_u64);
    params.set("momentum", 0.9);
    params.set("adversarial", false);
    params.set("radius", 0.1);
    params.set("adv_steps", 10_usize);
    for key in ["arch", "epochs", "lr", "batch"] {
        params.allow(key);
    }
    DatasetArgs::declare(&mut params);
    if let Some(config) = &args.config {
        params.merge_config_file(config)?;
    }
    params.set_opt("seed", &args.seed);
    params.set_opt("arch", &args.arch);
    params.set_opt("epochs", &args.epochs);
    params.set_opt("lr", &args.lr);
    params.set_opt("momentum", &args.momentum);
    params.set_opt("batch", &args.batch);
    if args.adversarial {
        params.set("adversarial", true);
    }
    params.set_opt("radius", &args.radius);
    params.set_opt("adv_steps", &args.adv_steps);
    args.data.apply(&mut params);

    // dataset-aware defaults: images get the CNN, multimodal layouts get
    // gentler, longer schedules so every island is fit
    let dataset_name = DatasetArgs::name(&params);
    let is_image = matches!(dataset_name.as_str(), "cifar" | "synth-cifar");
    let (default_epochs, default_lr, default_batch) = match dataset_name.as_str() {
        _ if is_image => (12, 0.05, 32),
        "blobs-multi" => (800, 0.02, 16),
        "blobs-scatter" => (300, 0.02, 16),
        _ => (60, 0.1, 32),
    };
    if params.get("arch").is_none() {
        params.set("arch", if is_image { "cnn" } else { "mlp" });
    }
    if params.get("epochs").is_none() {
        params.set("epochs", default_epochs);
    }
    if params.get("lr").is_none() {
        params.set("lr", default_lr);
    }
    if params.get("batch").is_none() {
        params.set("batch", default_batch);
    }

    let seed: u64 = params.parsed("seed")?;
    let dataset = load_dataset(&mut params, seed)?;
    let arch_name = params.get("arch").unwrap_or("mlp").to_string();
    let arch = match arch_name.as_str() {
        "mlp" => Arch::Mlp {
            input_dim: dataset.input_shape.iter().product(),
            classes: dataset.classes,
        },
        "cnn" => Arch::Cnn {
            classes: dataset.classes,
        },
        other => {
            return Err(CliError::Usage(format!(
                "unknown arch {other:?} (expected mlp or cnn)"
            )))
        }
    };

    let config = TrainConfig {
        learning_rate: params.parsed("lr")?,
        momentum: params.parsed("momentum")?,
        epochs: params.parsed("epochs")?,
        batch_size: params.parsed("batch")?,
        seed,
        adversarial: if params.parsed::<bool>("adversarial")? {
            Some(AdversarialTraining {
                radius: params.parsed("radius")?,
                steps: params.parsed("adv_steps")?,
            })
        } else {
            None
        },
    };

    ensure_out_dir(&args.out)?;
    params.write_manifest(&args.out, "train")?;

    let (model, log) = train(arch, &config, &dataset.train, &dataset.id)?;
    save_checkpoint(&model, &args.out.join("checkpoint.ckpt"))?;

    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                csv_float(e.loss),
                csv_float(e.accuracy),
            ]
        })
        .collect();
    write_csv(
        &args.out.join("training_log.csv"),
        &["epoch", "loss", "accuracy"],
        &rows,
    )?;

    let last = log.last().expect("at least one epoch");
    println!(
        "trained {} on {}: final loss {:.4}, train accuracy {:.4}",
        arch_name, dataset.id, last.loss, last.accuracy
    );
    println!("checkpoint: {}", args.out.join("checkpoint.ckpt").display());
    Ok(())
}
