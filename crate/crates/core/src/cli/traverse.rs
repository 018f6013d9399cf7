//! `levelset traverse`: run level set traversals over source/target pairs
//! and persist everything downstream commands need: per-pair traces, output
//! vectors, images (when the input is an image), and an optional class grid.

use super::{ensure_out_dir, load_dataset, par_map, CliError, DatasetArgs, LstArgs, Params};
use crate::data::{csv_float, write_csv, write_image, Dataset, LabeledImage};
use crate::lst::{traverse, LstConfig, LstResult, Termination};
use crate::metrics::{l_inf, rmse};
use crate::models::{load_checkpoint, Model};
use crate::tensor::Tensor;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Args, Debug)]
pub(crate) struct TraverseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub lst: LstArgs,
    /// Number of random sources drawn from the test split [default: 5].
    #[arg(long)]
    pub sources: Option<usize>,
    /// Targets per source, drawn from other classes [default: 2].
    #[arg(long)]
    pub targets_per_source: Option<usize>,
    /// Explicit source indices into the test split (overrides --sources).
    #[arg(long, value_delimiter = ',')]
    pub source_indices: Vec<usize>,
    /// Class-grid mode: one image per class, all ordered pairs.
    #[arg(long)]
    pub grid: bool,
    /// Restrict grid mode to the first N classes.
    #[arg(long)]
    pub grid_classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Optional `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out/traverse")]
    pub out: PathBuf,
}

/// One traversal bookkeeping record.
pub(crate) struct PairRun {
    pub pair_id: usize,
    pub source_index: usize,
    pub target_index: usize,
    pub source_class: usize,
    pub target_class: usize,
    pub result: LstResult,
    pub rmse_to_target: f64,
    pub l_inf_to_target: f64,
}

pub(crate) fn run(args: &TraverseArgs) -> Result<(), CliError> {
    let mut params = Params::default();
    params.set("checkpoint", args.checkpoint.display());
    params.set("seed", 0_u64);
    params.set("sources", 5_usize);
    params.set("targets_per_source", 2_usize);
    params.set("grid", false);
    params.set("jobs", 1_usize);
    params.allow("grid_classes");
    DatasetArgs::declare(&mut params);
    LstArgs::declare(&mut params);
    if let Some(config) = &args.config {
        params.merge_config_file(config)?;
    }
    params.set_opt("seed", &args.seed);
    params.set_opt("sources", &args.sources);
    params.set_opt("targets_per_source", &args.targets_per_source);
    if args.grid {
        params.set("grid", true);
    }
    params.set_opt("grid_classes", &args.grid_classes);
    params.set_opt("jobs", &args.jobs);
    args.data.apply(&mut params);
    args.lst.apply(&mut params);

    let seed: u64 = params.parsed("seed")?;
    let jobs: usize = params.parsed("jobs")?;
    let grid: bool = params.parsed("grid")?;
    let config = LstArgs::resolve(&mut params)?;

    let model = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&mut params, seed)?;
    if dataset.input_shape.iter().product::<usize>() != model.arch().input_len() {
        return Err(CliError::Usage(format!(
            "dataset input shape {:?} does not match the checkpoint ({} values)",
            dataset.input_shape,
            model.arch().input_len()
        )));
    }

    let pairs = if grid {
        grid_pairs(&dataset, params.parsed_opt("grid_classes")?, seed)?
    } else {
        random_pairs(
            &dataset,
            &args.source_indices,
            params.parsed("sources")?,
            params.parsed("targets_per_source")?,
            seed,
        )?
    };

    ensure_out_dir(&args.out)?;
    ensure_out_dir(&args.out.join("traces"))?;
    params.write_manifest(&args.out, "traverse")?;

    let runs = run_pairs(&model, &dataset.test, &pairs, &config, jobs)?;
    write_pair_outputs(&args.out, &dataset.test, &runs, &model)?;

    if grid {
        write_grid_outputs(&args.out, &runs, &model)?;
    }

    let guarded = runs
        .iter()
        .filter(|r| r.result.termination == Termination::ConfidenceGuard)
        .count();
    println!(
        "traversed {} pairs ({} stopped by the confidence guard); outputs in {}",
        runs.len(),
        guarded,
        args.out.display()
    );
    Ok(())
}

/// Random sources (or explicit indices) each paired with targets of other
/// classes. Pairs are (source_index, target_index) into the test split.
pub(crate) fn random_pairs(
    dataset: &Dataset,
    explicit_sources: &[usize],
    sources: usize,
    targets_per_source: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>, CliError> {
    let test = &dataset.test;
    if test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9a12));
    let source_indices: Vec<usize> = if explicit_sources.is_empty() {
        (0..sources)
            .map(|_| rng.random_range(0..test.len()))
            .collect()
    } else {
        for &i in explicit_sources {
            if i >= test.len() {
                return Err(CliError::Usage(format!(
                    "source index {i} out of range for test split of {}",
                    test.len()
                )));
            }
        }
        explicit_sources.to_vec()
    };

    let mut pairs = Vec::new();
    for &src in &source_indices {
        let src_label = test[src].label;
        let candidates: Vec<usize> = (0..test.len())
            .filter(|&i| test[i].label != src_label)
            .collect();
        if candidates.is_empty() {
            return Err(CliError::Data(
                "no targets from other classes available".into(),
            ));
        }
        for _ in 0..targets_per_source {
            let tgt = candidates[rng.random_range(0..candidates.len())];
            pairs.push((src, tgt));
        }
    }
    Ok(pairs)
}

/// One representative per class; all ordered pairs including the diagonal.
pub(crate) fn grid_pairs(
    dataset: &Dataset,
    grid_classes: Option<usize>,
    seed: u64,
) -> Result<Vec<(usize, usize)>, CliError> {
    let test = &dataset.test;
    let classes = grid_classes
        .unwrap_or(dataset.classes)
        .min(dataset.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9a12));
    let mut representatives = Vec::new();
    for class in 0..classes {
        let members: Vec<usize> = (0..test.len()).filter(|&i| test[i].label == class).collect();
        if members.is_empty() {
            return Err(CliError::Data(format!("class {class} has no test samples")));
        }
        representatives.push(members[rng.random_range(0..members.len())]);
    }
    let mut pairs = Vec::new();
    for &src in &representatives {
        for &tgt in &representatives {
            pairs.push((src, tgt));
        }
    }
    Ok(pairs)
}

/// Runs every pair against the shared read-only model. Diagonal pairs
/// (source == target) are not traversed at all: the cell holds the source
/// unchanged.
pub(crate) fn run_pairs(
    model: &Model,
    test: &[LabeledImage],
    pairs: &[(usize, usize)],
    config: &LstConfig,
    jobs: usize,
) -> Result<Vec<PairRun>, CliError> {
    use crate::models::ConfidenceModel as _;
    let outcomes = par_map(jobs, pairs.len(), |pair_id| -> Result<PairRun, CliError> {
        let (src, tgt) = pairs[pair_id];
        let source = &test[src];
        let target = &test[tgt];
        let result = if src == tgt {
            let confidence = model.confidence(source.pixels.data(), source.label);
            LstResult {
                output: source.pixels.clone(),
                termination: Termination::Converged,
                trace: Vec::new(),
                source_confidence: confidence,
                final_confidence: confidence,
                path: Vec::new(),
            }
        } else {
            traverse(model, &source.pixels, source.label, &target.pixels, config)?
        };
        Ok(PairRun {
            pair_id,
            source_index: src,
            target_index: tgt,
            source_class: source.label,
            target_class: target.label,
            rmse_to_target: rmse(&result.output, &target.pixels)?,
            l_inf_to_target: l_inf(&result.output, &target.pixels)?,
            result,
        })
    });
    outcomes.into_iter().collect()
}

fn vector_row(pair_id: usize, data: &[f64]) -> Vec<String> {
    let mut row = Vec::with_capacity(data.len() + 1);
    row.push(pair_id.to_string());
    row.extend(data.iter().map(|&v| csv_float(v)));
    row
}

fn vector_header(d: usize) -> Vec<String> {
    let mut header = vec!["pair_id".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header
}

pub(crate) fn write_pair_outputs(
    out: &Path,
    test: &[LabeledImage],
    runs: &[PairRun],
    model: &Model,
) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                r.pair_id.to_string(),
                r.source_index.to_string(),
                r.target_index.to_string(),
                r.source_class.to_string(),
                r.target_class.to_string(),
                csv_float(r.result.source_confidence),
                csv_float(r.result.final_confidence),
                r.result.termination.as_str().to_string(),
                r.result.iterations().to_string(),
                csv_float(r.rmse_to_target),
                csv_float(r.l_inf_to_target),
            ]
        })
        .collect();
    write_csv(
        &out.join("pairs.csv"),
        &[
            "pair_id",
            "source_index",
            "target_index",
            "source_class",
            "target_class",
            "source_confidence",
            "final_confidence",
            "termination",
            "iterations",
            "rmse_to_target",
            "l_inf_to_target",
        ],
        &rows,
    )?;

    let d = model.arch().input_len();
    let header = vector_header(d);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let source_rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| vector_row(r.pair_id, test[r.source_index].pixels.data()))
        .collect();
    write_csv(&out.join("sources.csv"), &header_refs, &source_rows)?;
    let output_rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| vector_row(r.pair_id, r.result.output.data()))
        .collect();
    write_csv(&out.join("outputs.csv"), &header_refs, &output_rows)?;

    for run in runs {
        run.result
            .write_trace_csv(&out.join("traces").join(format!("pair_{:04}.csv", run.pair_id)))?;
    }

    // image datasets also get one pixmap per output
    if is_image_shape(&model.arch().input_shape()) {
        let dir = out.join("outputs");
        ensure_out_dir(&dir)?;
        for run in runs {
            write_image(
                &dir.join(format!("pair_{:04}.ppm", run.pair_id)),
                &run.result.output,
            )?;
        }
    }
    Ok(())
}

pub(crate) fn is_image_shape(shape: &[usize]) -> bool {
    matches!(shape, [1 | 3, h, w] if *h > 1 && *w > 1)
}

/// Class-grid artifacts: a tiled image (row = target class, column = source
/// class, so each column shows one source morphing toward every target) plus
/// a per-cell confidence CSV.
fn write_grid_outputs(out: &Path, runs: &[PairRun], model: &Model) -> Result<(), CliError> {
    let mut by_cell: BTreeMap<(usize, usize), &PairRun> = BTreeMap::new();
    for run in runs {
        by_cell.insert((run.target_class, run.source_class), run);
    }
    let classes = by_cell
        .keys()
        .map(|&(row, col)| row.max(col) + 1)
        .max()
        .unwrap_or(0);

    let rows: Vec<Vec<String>> = by_cell
        .values()
        .map(|run| {
            vec![
                run.target_class.to_string(),
                run.source_class.to_string(),
                run.source_index.to_string(),
                run.target_index.to_string(),
                csv_float(run.result.final_confidence),
            ]
        })
        .collect();
    write_csv(
        &out.join("grid_confidence.csv"),
        &["row", "col", "source_index", "target_index", "source_class_confidence"],
        &rows,
    )?;

    let shape = model.arch().input_shape();
    if !is_image_shape(&shape) || classes == 0 {
        return Ok(());
    }
    let (h, w) = (shape[1], shape[2]);
    let mut tiles = Tensor::zeros(vec![3, classes * h, classes * w]);
    for ((row, col), run) in &by_cell {
        let image = &run.result.output;
        let src = image.data();
        let dst = tiles.data_mut();
        let channels = image.shape()[0];
        for c in 0..3 {
            let sc = if channels == 3 { c } else { 0 };
            for y in 0..h {
                for x in 0..w {
                    dst[(c * classes * h + row * h + y) * classes * w + col * w + x] =
                        src[(sc * h + y) * w + x];
                }
            }
        }
    }
    write_image(&out.join("grid.ppm"), &tiles)?;
    Ok(())
}

// ── reading a traverse directory back ───────────────────────────────

/// Pair metadata parsed back from `pairs.csv`.
#[derive(Debug, Clone)]
pub(crate) struct PairRecord {
    pub pair_id: usize,
    pub source_index: usize,
    pub source_class: usize,
    pub target_class: usize,
    pub source_confidence: f64,
    pub final_confidence: f64,
    pub termination: String,
}

pub(crate) fn read_pairs_csv(dir: &Path) -> Result<Vec<PairRecord>, CliError> {
    let path = dir.join("pairs.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Data("pairs.csv is empty".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    let find = |name: &str| -> Result<usize, CliError> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| CliError::Data(format!("pairs.csv lacks column {name}")))
    };
    let (id_col, src_col, scls_col, tcls_col, sconf_col, fconf_col, term_col) = (
        find("pair_id")?,
        find("source_index")?,
        find("source_class")?,
        find("target_class")?,
        find("source_confidence")?,
        find("final_confidence")?,
        find("termination")?,
    );
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse_usize = |col: usize| -> Result<usize, CliError> {
            fields[col]
                .parse()
                .map_err(|_| CliError::Data(format!("bad integer in pairs.csv: {line}")))
        };
        let parse_f64 = |col: usize| -> Result<f64, CliError> {
            fields[col]
                .parse()
                .map_err(|_| CliError::Data(format!("bad float in pairs.csv: {line}")))
        };
        records.push(PairRecord {
            pair_id: parse_usize(id_col)?,
            source_index: parse_usize(src_col)?,
            source_class: parse_usize(scls_col)?,
            target_class: parse_usize(tcls_col)?,
            source_confidence: parse_f64(sconf_col)?,
            final_confidence: parse_f64(fconf_col)?,
            termination: fields[term_col].to_string(),
        });
    }
    Ok(records)
}

/// Reads pair_id -> vector from `sources.csv` / `outputs.csv`.
pub(crate) fn read_vectors_csv(
    dir: &Path,
    file: &str,
    shape: &[usize],
) -> Result<BTreeMap<usize, Tensor>, CliError> {
    let path = dir.join(file);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let expected: usize = shape.iter().product();
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let pair_id: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| CliError::Data(format!("bad pair_id in {file}")))?;
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse()
                    .map_err(|_| CliError::Data(format!("bad float in {file}")))
            })
            .collect::<Result<_, _>>()?;
        if values.len() != expected {
            return Err(CliError::Data(format!(
                "{file}: row {pair_id} has {} values, expected {expected}",
                values.len()
            )));
        }
        let tensor = Tensor::new(shape.to_vec(), values)
            .map_err(|e| CliError::Data(format!("{file}: {e}")))?;
        out.insert(pair_id, tensor);
    }
    Ok(out)
}
