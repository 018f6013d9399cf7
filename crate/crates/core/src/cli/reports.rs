//! `levelset triangle | path | extremality`: confidence-geometry reports over
//! a stored traverse directory.

use super::traverse::{read_pairs_csv, read_vectors_csv, PairRecord};
use super::{ensure_out_dir, CliError, Params};
use crate::data::{csv_float, write_csv, write_heatmap, Heatmap};
use crate::metrics::{
    extremality_probe, mean_std, path_confidence_profile, triangle_report, triangle_samples,
    PathSpec, TriangleSpec,
};
use crate::models::{load_checkpoint, Model};
use crate::tensor::Tensor;
use clap::Args;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn load_traverse_dir(
    checkpoint: &Path,
    dir: &Path,
) -> Result<
    (
        Model,
        Vec<PairRecord>,
        BTreeMap<usize, Tensor>,
        BTreeMap<usize, Tensor>,
    ),
    CliError,
> {
    let model = load_checkpoint(checkpoint)?;
    let shape = model.arch().input_shape();
    let pairs = read_pairs_csv(dir)?;
    let sources = read_vectors_csv(dir, "sources.csv", &shape)?;
    let outputs = read_vectors_csv(dir, "outputs.csv", &shape)?;
    Ok((model, pairs, sources, outputs))
}

/// Pairs grouped by source index, in first-seen order.
fn group_by_source(pairs: &[PairRecord]) -> Vec<(usize, Vec<&PairRecord>)> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&PairRecord>> = BTreeMap::new();
    for p in pairs {
        if !groups.contains_key(&p.source_index) {
            order.push(p.source_index);
        }
        groups.entry(p.source_index).or_default().push(p);
    }
    order
        .into_iter()
        .map(|idx| (idx, groups.remove(&idx).unwrap()))
        .collect()
}

// ── triangle ────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub(crate) struct TriangleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory produced by `levelset traverse`.
    #[arg(long)]
    pub traverse_dir: PathBuf,
    /// Confidence-drop thresholds for the fraction columns
    /// [default: 0,0.1,0.2,0.3].
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    /// Barycentric subdivision (10 gives 66 samples).
    #[arg(long)]
    pub subdivision: Option<usize>,
    /// Skip heatmap rendering.
    #[arg(long)]
    pub no_heatmaps: bool,
    /// Heatmap cell size in pixels [default: 16].
    #[arg(long)]
    pub cell_px: Option<usize>,
    /// Optional `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/triangle")]
    pub out: PathBuf,
}

fn comma_floats(params: &Params, key: &str) -> Result<Vec<f64>, CliError> {
    let raw = params
        .get(key)
        .ok_or_else(|| CliError::Usage(format!("missing parameter {key}")))?;
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("parameter {key} has invalid value {raw:?}")))
        })
        .collect()
}

fn set_float_list(params: &mut Params, key: &str, values: &Option<Vec<f64>>) {
    if let Some(list) = values {
        params.set(
            key,
            list.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
    }
}

pub(crate) fn run_triangle(args: &TriangleArgs) -> Result<(), CliError> {
    let mut params = Params::default();
    params.set("checkpoint", args.checkpoint.display());
    params.set("traverse_dir", args.traverse_dir.display());
    params.set("deltas", "0,0.1,0.2,0.3");
    params.set("subdivision", 10_usize);
    params.set("heatmaps", true);
    params.set("cell_px", 16_usize);
    if let Some(config) = &args.config {
        params.merge_config_file(config)?;
    }
    set_float_list(&mut params, "deltas", &args.deltas);
    params.set_opt("subdivision", &args.subdivision);
    if args.no_heatmaps {
        params.set("heatmaps", false);
    }
    params.set_opt("cell_px", &args.cell_px);

    let deltas = comma_floats(&params, "deltas")?;
    let subdivision: usize = params.parsed("subdivision")?;
    let heatmaps: bool = params.parsed("heatmaps")?;
    let cell_px: usize = params.parsed("cell_px")?;

    let (model, pairs, sources, outputs) = load_traverse_dir(&args.checkpoint, &args.traverse_dir)?;
    let groups = group_by_source(&pairs);
    if groups.iter().all(|(_, g)| g.len() < 2) {
        return Err(CliError::Usage(
            "triangle reports need at least two blindspots for some source; \
             rerun traverse with --targets-per-source 2 or more"
                .into(),
        ));
    }

    ensure_out_dir(&args.out)?;
    params.write_manifest(&args.out, "triangle")?;

    let mut header = vec![
        "source_index".to_string(),
        "pair_a".to_string(),
        "pair_b".to_string(),
        "source_confidence".to_string(),
        "mean_confidence".to_string(),
    ];
    header.extend(deltas.iter().map(|d| format!("frac_{d}")));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();

    let mut rows = Vec::new();
    let mut p_srcs = Vec::new();
    let mut means = Vec::new();
    let mut fracs: Vec<Vec<f64>> = vec![Vec::new(); deltas.len()];
    let mut triangles = 0usize;

    for (source_index, group) in &groups {
        for a in 0..group.len() {
            for b in (a + 1)..group.len() {
                let (pa, pb) = (group[a], group[b]);
                let source = sources
                    .get(&pa.pair_id)
                    .ok_or_else(|| CliError::Data("missing source vector".into()))?;
                let out_a = outputs
                    .get(&pa.pair_id)
                    .ok_or_else(|| CliError::Data("missing output vector".into()))?;
                let out_b = outputs
                    .get(&pb.pair_id)
                    .ok_or_else(|| CliError::Data("missing output vector".into()))?;
                let spec = TriangleSpec::with_subdivision(
                    source.clone(),
                    out_a.clone(),
                    out_b.clone(),
                    subdivision,
                )?;
                let report = triangle_report(&model, pa.source_class, &spec, &deltas)?;

                let mut row = vec![
                    source_index.to_string(),
                    pa.pair_id.to_string(),
                    pb.pair_id.to_string(),
                    csv_float(report.source_confidence),
                    csv_float(report.mean_confidence),
                ];
                for (i, (_, frac)) in report.fractions.iter().enumerate() {
                    row.push(csv_float(*frac));
                    fracs[i].push(*frac);
                }
                rows.push(row);
                p_srcs.push(report.source_confidence);
                means.push(report.mean_confidence);
                triangles += 1;

                if heatmaps {
                    let map = triangle_heatmap(&report.sample_confidences, subdivision);
                    write_heatmap(
                        &args.out.join(format!(
                            "triangle_{source_index}_{}_{}.ppm",
                            pa.pair_id, pb.pair_id
                        )),
                        &map,
                        cell_px,
                    )?;
                }
            }
        }
    }
    write_csv(&args.out.join("triangles.csv"), &header_refs, &rows)?;

    // Table-2 style aggregate: mu +- sigma per metric
    let mut agg_rows = vec![
        stat_row("source_confidence", &p_srcs),
        stat_row("triangle_confidence", &means),
    ];
    for (i, d) in deltas.iter().enumerate() {
        agg_rows.push(stat_row(&format!("frac_{d}"), &fracs[i]));
    }
    write_csv(
        &args.out.join("aggregate.csv"),
        &["metric", "mean", "std"],
        &agg_rows,
    )?;

    println!(
        "reported {} triangles over {} sources; outputs in {}",
        triangles,
        groups.len(),
        args.out.display()
    );
    Ok(())
}

fn stat_row(name: &str, values: &[f64]) -> Vec<String> {
    let s = mean_std(values);
    vec![name.to_string(), csv_float(s.mean), csv_float(s.std)]
}

/// Upper-triangular raster: row = source weight index, column = first
/// blindspot weight index; cells outside the simplex stay unsampled.
fn triangle_heatmap(confidences: &[f64], subdivision: usize) -> Heatmap {
    let n = subdivision;
    let mut map = Heatmap::new(n + 1, n + 1);
    let samples = triangle_samples(
        &TriangleSpec::with_subdivision(
            Tensor::zeros(vec![2]),
            Tensor::zeros(vec![2]),
            Tensor::filled(vec![2], 1.0),
            n,
        )
        .expect("fixed dummy spec"),
    );
    for (sample, &conf) in samples.iter().zip(confidences) {
        let (i, j, _) = sample.grid;
        map.set(i, j, conf.clamp(0.0, 1.0));
    }
    map
}

// ── path ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub(crate) struct PathArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub traverse_dir: PathBuf,
    /// Sample count along each path, endpoints included [default: 10].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Optional `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/path")]
    pub out: PathBuf,
}

pub(crate) fn run_path(args: &PathArgs) -> Result<(), CliError> {
    let mut params = Params::default();
    params.set("checkpoint", args.checkpoint.display());
    params.set("traverse_dir", args.traverse_dir.display());
    params.set("samples", 10_usize);
    if let Some(config) = &args.config {
        params.merge_config_file(config)?;
    }
    params.set_opt("samples", &args.samples);
    let samples: usize = params.parsed("samples")?;

    let (model, pairs, sources, outputs) = load_traverse_dir(&args.checkpoint, &args.traverse_dir)?;
    ensure_out_dir(&args.out)?;
    params.write_manifest(&args.out, "path")?;

    let mut summary_rows = Vec::new();
    let mut mins = Vec::new();
    let mut means = Vec::new();
    for record in &pairs {
        let source = sources
            .get(&record.pair_id)
            .ok_or_else(|| CliError::Data("missing source vector".into()))?;
        let output = outputs
            .get(&record.pair_id)
            .ok_or_else(|| CliError::Data("missing output vector".into()))?;
        // lambda = 1 is the source, lambda = 0 the blindspot
        let spec = PathSpec::with_samples(source.clone(), output.clone(), samples)?;
        let profile = path_confidence_profile(&model, record.source_class, &spec)?;

        let rows: Vec<Vec<String>> = profile
            .lambdas
            .iter()
            .zip(&profile.confidences)
            .map(|(l, c)| vec![csv_float(*l), csv_float(*c)])
            .collect();
        write_csv(
            &args.out.join(format!("path_{:04}.csv", record.pair_id)),
            &["lambda", "confidence"],
            &rows,
        )?;

        summary_rows.push(vec![
            record.pair_id.to_string(),
            record.source_index.to_string(),
            record.target_class.to_string(),
            csv_float(record.source_confidence),
            csv_float(record.final_confidence),
            record.termination.clone(),
            csv_float(profile.confidences[0]),
            csv_float(*profile.confidences.last().expect("nonempty profile")),
            csv_float(profile.min),
            csv_float(profile.interior_min()),
            csv_float(profile.mean),
        ]);
        mins.push(profile.min);
        means.push(profile.mean);
    }
    write_csv(
        &args.out.join("path_summary.csv"),
        &[
            "pair_id",
            "source_index",
            "target_class",
            "source_confidence",
            "final_confidence",
            "termination",
            "confidence_lambda0",
            "confidence_lambda1",
            "min_confidence",
            "interior_min_confidence",
            "mean_confidence",
        ],
        &summary_rows,
    )?;
    write_csv(
        &args.out.join("aggregate.csv"),
        &["metric", "mean", "std"],
        &[
            stat_row("path_confidence", &means),
            stat_row("path_min_confidence", &mins),
        ],
    )?;
    println!(
        "profiled {} paths with {} samples each; outputs in {}",
        pairs.len(),
        samples,
        args.out.display()
    );
    Ok(())
}

// ── extremality ─────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub(crate) struct ExtremalityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub traverse_dir: PathBuf,
    /// Extrapolation factors past the traversal output
    /// [default: 0,0.05,0.1,0.2].
    #[arg(long, value_delimiter = ',')]
    pub factors: Option<Vec<f64>>,
    /// Optional `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/extremality")]
    pub out: PathBuf,
}

pub(crate) fn run_extremality(args: &ExtremalityArgs) -> Result<(), CliError> {
    let mut params = Params::default();
    params.set("checkpoint", args.checkpoint.display());
    params.set("traverse_dir", args.traverse_dir.display());
    params.set("factors", "0,0.05,0.1,0.2");
    if let Some(config) = &args.config {
        params.merge_config_file(config)?;
    }
    set_float_list(&mut params, "factors", &args.factors);
    let factors = comma_floats(&params, "factors")?;

    let (model, pairs, sources, outputs) = load_traverse_dir(&args.checkpoint, &args.traverse_dir)?;
    ensure_out_dir(&args.out)?;
    params.write_manifest(&args.out, "extremality")?;

    let mut rows = Vec::new();
    let mut per_factor: Vec<Vec<f64>> = vec![Vec::new(); factors.len()];
    let mut clamped_total = 0usize;
    for record in &pairs {
        let source = sources
            .get(&record.pair_id)
            .ok_or_else(|| CliError::Data("missing source vector".into()))?;
        let output = outputs
            .get(&record.pair_id)
            .ok_or_else(|| CliError::Data("missing output vector".into()))?;
        let probe = extremality_probe(
            &model,
            record.source_class,
            source,
            output,
            &factors,
            Some((0.0, 1.0)),
        )?;
        clamped_total += probe.clamped_points;
        for (i, (&factor, &conf)) in probe.factors.iter().zip(&probe.confidences).enumerate() {
            rows.push(vec![
                record.pair_id.to_string(),
                csv_float(factor),
                csv_float(conf),
                csv_float(probe.base_confidence),
                csv_float(probe.base_confidence - conf),
            ]);
            per_factor[i].push(conf);
        }
    }
    write_csv(
        &args.out.join("extremality.csv"),
        &[
            "pair_id",
            "factor",
            "confidence",
            "base_confidence",
            "drop",
        ],
        &rows,
    )?;

    let mut summary = Vec::new();
    for (i, &factor) in factors.iter().enumerate() {
        let s = mean_std(&per_factor[i]);
        summary.push(vec![
            csv_float(factor),
            csv_float(median(&per_factor[i])),
            csv_float(s.mean),
            csv_float(s.std),
        ]);
    }
    write_csv(
        &args.out.join("summary.csv"),
        &["factor", "median_confidence", "mean_confidence", "std_confidence"],
        &summary,
    )?;
    println!(
        "probed {} pairs at {} factors ({} clamped extrapolations); outputs in {}",
        pairs.len(),
        factors.len(),
        clamped_total,
        args.out.display()
    );
    Ok(())
}

/// Median of a non-empty slice (mean of the middle two for even lengths).
pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
