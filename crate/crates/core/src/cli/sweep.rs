//! `levelset sweep`: independent hyperparameter ablations. One row of
//! distance metrics and one row of confidence metrics per axis value.

use super::traverse::{random_pairs, run_pairs, PairRun};
use super::{ensure_out_dir, load_dataset, CliError, DatasetArgs, LstArgs, Params};
use crate::data::{csv_float, write_csv};
use crate::lst::LstConfig;
use crate::metrics::{
    distance_report, mean_std, path_confidence_profile, triangle_report, PathSpec, TriangleSpec,
    DEFAULT_DELTAS,
};
use crate::models::{load_checkpoint, Model};
use crate::tensor::Tensor;
use clap::Args;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub(crate) struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub lst: LstArgs,
    /// Axis: m | eta | eps | eta@m | eps@m (the @m variants pin m to 100).
    #[arg(long)]
    pub axis: String,
    /// Axis values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Experiment scale: desk (10 sources) | paper-shape (100 sources).
    #[arg(long)]
    pub scale: Option<String>,
    /// Source count (overrides the scale default).
    #[arg(long)]
    pub sources: Option<usize>,
    /// Targets per source (2+ enables triangle metrics) [default: 3].
    #[arg(long)]
    pub targets_per_source: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Optional `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/sweep")]
    pub out: PathBuf,
}

fn apply_axis(base: &LstConfig, axis: &str, value: f64) -> Result<LstConfig, CliError> {
    let mut config = base.clone();
    match axis {
        "m" => config.max_iterations = value as usize,
        "eta" => config.eta = value,
        "eps" => config.epsilon = value,
        "eta@m" => {
            config.max_iterations = 100;
            config.eta = value;
        }
        "eps@m" => {
            config.max_iterations = 100;
            config.epsilon = value;
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown axis {other:?} (expected m, eta, eps, eta@m, eps@m)"
            )))
        }
    }
    config.validate()?;
    Ok(config)
}

pub(crate) fn run(args: &SweepArgs) -> Result<(), CliError> {
    if !matches!(args.axis.as_str(), "m" | "eta" | "eps" | "eta@m" | "eps@m") {
        return Err(CliError::Usage(format!(
            "unknown axis {:?} (expected m, eta, eps, eta@m, eps@m)",
            args.axis
        )));
    }

    let mut params = Params::default();
    params.set("checkpoint", args.checkpoint.display());
    params.set("axis", &args.axis);
    params.set(
        "values",
        args.values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    params.set("scale", "desk");
    params.set("targets_per_source", 3_usize);
    params.set("seed", 0_u64);
    params.set("jobs", 1_usize);
    params.allow("sources");
    DatasetArgs::declare(&mut params);
    LstArgs::declare(&mut params);
    if let Some(config) = &args.config {
        params.merge_config_file(config)?;
    }
    params.set_opt("scale", &args.scale);
    params.set_opt("sources", &args.sources);
    params.set_opt("targets_per_source", &args.targets_per_source);
    params.set_opt("seed", &args.seed);
    params.set_opt("jobs", &args.jobs);
    args.data.apply(&mut params);
    args.lst.apply(&mut params);

    let sources = match params.parsed_opt::<usize>("sources")? {
        Some(n) => n,
        None => match params.get("scale").unwrap_or("desk") {
            "desk" => 10,
            "paper-shape" => 100,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown scale {other:?} (expected desk or paper-shape)"
                )))
            }
        },
    };
    params.set("sources", sources);
    let targets_per_source: usize = params.parsed("targets_per_source")?;
    let seed: u64 = params.parsed("seed")?;
    let jobs: usize = params.parsed("jobs")?;
    // a sweep varies m itself, so runs must not stop early
    let base = LstConfig {
        early_exit: false,
        ..LstArgs::resolve(&mut params)?
    };
    params.set("early_exit", false);

    let model = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&mut params, seed)?;

    // one shared pair set across every axis value
    let pairs = random_pairs(&dataset, &[], sources, targets_per_source, seed)?;

    ensure_out_dir(&args.out)?;
    params.write_manifest(&args.out, "sweep")?;

    let mut dist_rows = Vec::new();
    let mut conf_rows = Vec::new();
    for &value in &args.values {
        let config = apply_axis(&base, &args.axis, value)?;
        let runs = run_pairs(&model, &dataset.test, &pairs, &config, jobs)?;
        let (dist_row, conf_row) = summarize(&model, &dataset.test, &runs, &args.axis, value)?;
        dist_rows.push(dist_row);
        conf_rows.push(conf_row);
    }

    write_csv(
        &args.out.join("sweep_distances.csv"),
        &[
            "axis",
            "value",
            "rmse_mean",
            "rmse_std",
            "l_inf_mean",
            "l_inf_std",
            "ssim_mean",
            "ssim_std",
            "feature_distance_mean",
            "feature_distance_std",
        ],
        &dist_rows,
    )?;
    let mut conf_header = vec![
        "axis".to_string(),
        "value".to_string(),
        "p_src_mean".to_string(),
        "p_src_std".to_string(),
        "triangle_confidence_mean".to_string(),
        "triangle_confidence_std".to_string(),
    ];
    for d in DEFAULT_DELTAS {
        conf_header.push(format!("frac_{d}_mean"));
        conf_header.push(format!("frac_{d}_std"));
    }
    conf_header.push("path_confidence_mean".to_string());
    conf_header.push("path_confidence_std".to_string());
    let conf_header_refs: Vec<&str> = conf_header.iter().map(|s| s.as_str()).collect();
    write_csv(&args.out.join("sweep_confidence.csv"), &conf_header_refs, &conf_rows)?;

    println!(
        "swept {} over {:?}; outputs in {}",
        args.axis,
        args.values,
        args.out.display()
    );
    Ok(())
}

fn summarize(
    model: &Model,
    test: &[crate::data::LabeledImage],
    runs: &[PairRun],
    axis: &str,
    value: f64,
) -> Result<(Vec<String>, Vec<String>), CliError> {
    // distance metrics: traversal output vs its target
    let pairs: Vec<(Tensor, Tensor)> = runs
        .iter()
        .map(|r| {
            (
                r.result.output.clone(),
                test[r.target_index].pixels.clone(),
            )
        })
        .collect();
    let distances = distance_report(model, &pairs, model.default_feature_layer())?;
    let dist_row = vec![
        axis.to_string(),
        csv_float(value),
        csv_float(distances.rmse.mean),
        csv_float(distances.rmse.std),
        csv_float(distances.l_inf.mean),
        csv_float(distances.l_inf.std),
        csv_float(distances.ssim.mean),
        csv_float(distances.ssim.std),
        csv_float(distances.feature_distance.mean),
        csv_float(distances.feature_distance.std),
    ];

    // confidence metrics: triangles over blindspot pairs per source, path
    // profiles per blindspot
    let mut p_srcs = Vec::new();
    let mut tri_means = Vec::new();
    let mut fracs: Vec<Vec<f64>> = vec![Vec::new(); DEFAULT_DELTAS.len()];
    let mut path_means = Vec::new();

    let mut by_source: std::collections::BTreeMap<usize, Vec<&PairRun>> = Default::default();
    for run in runs {
        by_source.entry(run.source_index).or_default().push(run);
    }
    for (&source_index, group) in &by_source {
        let source = &test[source_index];
        p_srcs.push(group[0].result.source_confidence);
        for run in group {
            let spec = PathSpec::new(source.pixels.clone(), run.result.output.clone())?;
            let profile = path_confidence_profile(model, run.source_class, &spec)?;
            path_means.push(profile.mean);
        }
        for a in 0..group.len() {
            for b in (a + 1)..group.len() {
                let spec = TriangleSpec::new(
                    source.pixels.clone(),
                    group[a].result.output.clone(),
                    group[b].result.output.clone(),
                )?;
                let report =
                    triangle_report(model, group[a].source_class, &spec, &DEFAULT_DELTAS)?;
                tri_means.push(report.mean_confidence);
                for (i, (_, frac)) in report.fractions.iter().enumerate() {
                    fracs[i].push(*frac);
                }
            }
        }
    }

    let mut conf_row = vec![axis.to_string(), csv_float(value)];
    for stats in [mean_std(&p_srcs), mean_std(&tri_means)] {
        conf_row.push(csv_float(stats.mean));
        conf_row.push(csv_float(stats.std));
    }
    for values in &fracs {
        let stats = mean_std(values);
        conf_row.push(csv_float(stats.mean));
        conf_row.push(csv_float(stats.std));
    }
    let stats = mean_std(&path_means);
    conf_row.push(csv_float(stats.mean));
    conf_row.push(csv_float(stats.std));
    Ok((dist_row, conf_row))
}
