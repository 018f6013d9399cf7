//! `levelset attack-compare`: median source-class/target-class confidence
//! over linear paths for targeted PGD pairs, feature-targeted pairs, and
//! level set traversal pairs, in one CSV.

use super::reports::median;
use super::{ensure_out_dir, load_dataset, par_map, CliError, DatasetArgs, LstArgs, Params};
use crate::attacks::{feature_targeted_attack, targeted_attack, AttackConfig};
use crate::data::{csv_float, write_csv};
use crate::lst::traverse;
use crate::metrics::{path_confidence_profile, PathSpec};
use crate::models::load_checkpoint;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub(crate) struct AttackCompareArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub lst: LstArgs,
    /// Experiment scale: desk (100 pairs) | paper-shape (1000 pairs).
    #[arg(long)]
    pub scale: Option<String>,
    /// Pair count (overrides the scale default).
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Path sample count including endpoints [default: 10].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Attack budget (l-infinity radius) [default: 0.3].
    #[arg(long)]
    pub radius: Option<f64>,
    /// Attack step size [default: 0.02].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Attack iteration count [default: 40].
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Optional `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/attack-compare")]
    pub out: PathBuf,
}

struct PairOutcome {
    benign_index: usize,
    other_index: usize,
    target_class: usize,
    pgd_confidences: Vec<f64>,
    feature_confidences: Vec<f64>,
    lst_confidences: Vec<f64>,
    lst_source_confidence: f64,
    lst_termination: &'static str,
}

pub(crate) fn run(args: &AttackCompareArgs) -> Result<(), CliError> {
    let mut params = Params::default();
    params.set("checkpoint", args.checkpoint.display());
    params.set("scale", "desk");
    params.set("samples", 10_usize);
    params.set("radius", 0.3);
    params.set("alpha", 0.02);
    params.set("steps", 40_usize);
    params.set("seed", 0_u64);
    params.set("jobs", 1_usize);
    params.allow("pairs");
    DatasetArgs::declare(&mut params);
    LstArgs::declare(&mut params);
    if let Some(config) = &args.config {
        params.merge_config_file(config)?;
    }
    params.set_opt("scale", &args.scale);
    params.set_opt("pairs", &args.pairs);
    params.set_opt("samples", &args.samples);
    params.set_opt("radius", &args.radius);
    params.set_opt("alpha", &args.alpha);
    params.set_opt("steps", &args.steps);
    params.set_opt("seed", &args.seed);
    params.set_opt("jobs", &args.jobs);
    args.data.apply(&mut params);
    args.lst.apply(&mut params);

    let pair_count = match params.parsed_opt::<usize>("pairs")? {
        Some(n) => n,
        None => match params.get("scale").unwrap_or("desk") {
            "desk" => 100,
            "paper-shape" => 1000,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown scale {other:?} (expected desk or paper-shape)"
                )))
            }
        },
    };
    params.set("pairs", pair_count);
    let samples: usize = params.parsed("samples")?;
    let radius: f64 = params.parsed("radius")?;
    let alpha: f64 = params.parsed("alpha")?;
    let steps: usize = params.parsed("steps")?;
    let seed: u64 = params.parsed("seed")?;
    let jobs: usize = params.parsed("jobs")?;
    let lst_config = LstArgs::resolve(&mut params)?;

    let model = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&mut params, seed)?;
    let test = &dataset.test;
    if test.len() < 2 {
        return Err(CliError::Data("need at least two test samples".into()));
    }

    // pair selection: benign x2 (class y2) and x1 from a different class
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xa77ac));
    let mut pair_specs = Vec::with_capacity(pair_count);
    for _ in 0..pair_count {
        let benign = rng.random_range(0..test.len());
        let other = loop {
            let i = rng.random_range(0..test.len());
            if test[i].label != test[benign].label {
                break i;
            }
        };
        pair_specs.push((benign, other, rng.random::<u64>()));
    }

    ensure_out_dir(&args.out)?;
    params.write_manifest(&args.out, "attack-compare")?;

    let layer = model.default_feature_layer();
    let outcomes = par_map(jobs, pair_specs.len(), |i| -> Result<PairOutcome, CliError> {
        let (benign_index, other_index, attack_seed) = pair_specs[i];
        let benign = &test[benign_index];
        let other = &test[other_index];
        let target_class = benign.label;

        let attack = AttackConfig {
            radius,
            step_size: alpha,
            steps,
            random_start: true,
            seed: attack_seed,
        };

        // targeted PGD: push x1 toward class y2; path x2 <-> x1+eps
        let (pgd_point, _) = targeted_attack(&model, &other.pixels, target_class, &attack)?;
        let pgd_profile = path_confidence_profile(
            &model,
            target_class,
            &PathSpec::with_samples(benign.pixels.clone(), pgd_point, samples)?,
        )?;

        // feature-targeted: match features of x2
        let (feature_point, _) =
            feature_targeted_attack(&model, &other.pixels, &benign.pixels, layer, &attack)?;
        let feature_profile = path_confidence_profile(
            &model,
            target_class,
            &PathSpec::with_samples(benign.pixels.clone(), feature_point, samples)?,
        )?;

        // LST: walk from the benign sample toward x1 holding its class
        let lst = traverse(
            &model,
            &benign.pixels,
            target_class,
            &other.pixels,
            &lst_config,
        )?;
        let lst_profile = path_confidence_profile(
            &model,
            target_class,
            &PathSpec::with_samples(benign.pixels.clone(), lst.output.clone(), samples)?,
        )?;

        Ok(PairOutcome {
            benign_index,
            other_index,
            target_class,
            pgd_confidences: pgd_profile.confidences,
            feature_confidences: feature_profile.confidences,
            lst_confidences: lst_profile.confidences,
            lst_source_confidence: lst.source_confidence,
            lst_termination: lst.termination.as_str(),
        })
    });
    let outcomes: Vec<PairOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;

    // per-lambda medians across pairs
    let lambdas: Vec<f64> = (0..samples)
        .map(|i| i as f64 / (samples - 1) as f64)
        .collect();
    let mut profile_rows = Vec::with_capacity(samples);
    for (i, &lambda) in lambdas.iter().enumerate() {
        let pgd: Vec<f64> = outcomes.iter().map(|o| o.pgd_confidences[i]).collect();
        let feat: Vec<f64> = outcomes.iter().map(|o| o.feature_confidences[i]).collect();
        let lst: Vec<f64> = outcomes.iter().map(|o| o.lst_confidences[i]).collect();
        profile_rows.push(vec![
            csv_float(lambda),
            csv_float(median(&pgd)),
            csv_float(median(&feat)),
            csv_float(median(&lst)),
        ]);
    }
    write_csv(
        &args.out.join("attack_profile.csv"),
        &[
            "lambda",
            "targeted_pgd_median",
            "feature_targeted_median",
            "lst_median",
        ],
        &profile_rows,
    )?;

    let interior = |v: &[f64]| -> f64 {
        v[1..v.len() - 1].iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let endpoint_min = |v: &[f64]| -> f64 { v[0].min(*v.last().expect("nonempty")) };
    let pair_rows: Vec<Vec<String>> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            vec![
                i.to_string(),
                o.benign_index.to_string(),
                o.other_index.to_string(),
                o.target_class.to_string(),
                csv_float(endpoint_min(&o.pgd_confidences)),
                csv_float(interior(&o.pgd_confidences)),
                csv_float(endpoint_min(&o.feature_confidences)),
                csv_float(interior(&o.feature_confidences)),
                csv_float(endpoint_min(&o.lst_confidences)),
                csv_float(interior(&o.lst_confidences)),
                csv_float(o.lst_source_confidence),
                o.lst_termination.to_string(),
            ]
        })
        .collect();
    write_csv(
        &args.out.join("attack_pairs.csv"),
        &[
            "pair_id",
            "benign_index",
            "other_index",
            "target_class",
            "pgd_endpoint_min",
            "pgd_interior_min",
            "feature_endpoint_min",
            "feature_interior_min",
            "lst_endpoint_min",
            "lst_interior_min",
            "lst_source_confidence",
            "lst_termination",
        ],
        &pair_rows,
    )?;

    println!(
        "compared {} pairs over {} path samples; outputs in {}",
        outcomes.len(),
        samples,
        args.out.display()
    );
    Ok(())
}
