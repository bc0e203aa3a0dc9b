//! The `tempattr` command line: `gen`, `train`, `attribute`, `cluster`,
//! `report`.
//!
//! Every subcommand validates its parameters, computes its results in
//! memory and only then writes files. If writing fails midway, the files
//! written so far are removed. Failures print one line,
//! `ERROR <code>: <message>`, to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attrib::{
    aggregate_curves, grid_to_csv, mask_sweep, read_grid, read_grid_csv, top_k_of, write_grid, Aggregation,
    AttributionGrid, MaskSpec, MaskValue, Metric, Reference, SweepOptions, SweepResult, DEFAULT_LAST_START,
    DEFAULT_MASK_LEN, DEFAULT_TOP_Q,
};
use crate::binio::sidecar_path;
use crate::cluster::{
    agglomerate, assignments_to_csv, cluster_cut, distance_matrix, distance_to_csv, read_dendrogram, DistanceOptions,
    Linkage, LocalCost, DEFAULT_K,
};
use crate::data::{
    align_concepts, average_repetitions, embeddings_to_csv, read_embeddings, read_epochs, write_embeddings,
    write_epochs, EmbeddingMatrix, EpochSet,
};
use crate::encoder::{Encoder, EncoderSpec, DEFAULT_OUT_DIM};
use crate::error::{Error, Result};
use crate::ridge::{read_model, ridge_fit, ridge_score, write_model, FitOptions, DEFAULT_LAMBDA};
use crate::svg;
use crate::synth::{generate, PlantSpec};

#[derive(Debug, Parser)]
#[command(
    name = "tempattr",
    version,
    about = "Temporal occlusion attribution of concept encodings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted concept windows.
    Gen(GenArgs),
    /// Encode epochs and fit the ridge map to concept embeddings.
    Train(TrainArgs),
    /// Run the masking sweep and write M1/M2/M3 grids and aggregated curves.
    Attribute(AttributeArgs),
    /// DTW distances, agglomerative clustering and a K-cut over grid rows.
    Cluster(ClusterArgs),
    /// Render SVG figures from attribute and cluster outputs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenArgs {
    /// Plant spec JSON; built-in defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON object whose keys override the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Flatten,
    WindowMean,
    Precomputed,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: PathBuf,
    #[arg(long)]
    pub concepts: PathBuf,
    /// Model file to write (RDG1).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "flatten")]
    pub encoder: EncoderKind,
    #[arg(long, default_value_t = DEFAULT_OUT_DIM)]
    pub out_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub window_len: usize,
    /// Directory of `emb_mask_*.bin` tables for the precomputed encoder.
    #[arg(long)]
    pub precomputed: Option<PathBuf>,
    /// Seed of the projection encoder.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub zscore_features: bool,
    #[arg(long)]
    pub subject: Option<String>,
    /// Fit on single trials instead of repetition averages.
    #[arg(long)]
    pub no_average: bool,
    /// Fraction of trials (taken from the end) held out and scored.
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricArg {
    M1,
    M2,
    M3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskValueArg {
    Zero,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceArg {
    True,
    Predicted,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub epochs: PathBuf,
    #[arg(long)]
    pub concepts: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MASK_LEN)]
    pub mask_len: usize,
    /// `a..b` (inclusive), `a..b:step`, or a comma list.
    #[arg(long, default_value_t = format!("0..{DEFAULT_LAST_START}"))]
    pub mask_starts: String,
    /// Metric aggregated into the `curves_*` files.
    #[arg(long, value_enum, default_value = "m2")]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value = "zero")]
    pub mask_value: MaskValueArg,
    #[arg(long, value_enum, default_value = "true")]
    pub reference: ReferenceArg,
    /// Fraction of trials, by true activation, averaged per concept.
    #[arg(long, default_value_t = DEFAULT_TOP_Q)]
    pub q: f64,
    /// Also write the k most activated concepts per trial.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub subject: Option<String>,
    #[arg(long)]
    pub no_average: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkageArg {
    Average,
    Single,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostArg {
    Abs,
    Squared,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ClusterArgs {
    /// Grid to cluster: ATG1 (`.bin`) or CSV.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "average")]
    pub linkage: LinkageArg,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Sakoe-Chiba radius.
    #[arg(long)]
    pub band: Option<usize>,
    #[arg(long, value_enum, default_value = "abs")]
    pub cost: CostArg,
    /// Metric of a CSV grid.
    #[arg(long, value_enum, default_value = "m2")]
    pub metric: MetricArg,
    /// Mask length of a CSV grid.
    #[arg(long, default_value_t = DEFAULT_MASK_LEN)]
    pub mask_len: usize,
    /// Drop rows with missing cells instead of failing.
    #[arg(long)]
    pub drop_missing: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Directory for the SVG files.
    #[arg(long)]
    pub out: PathBuf,
    /// Directories to read `curves_*.bin` and `dendrogram.json` from;
    /// defaults to `--out`.
    #[arg(long = "from")]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Files and directories created by one invocation, removed again on
/// failure.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn dir(&mut self, path: &Path) -> Result<()> {
        let mut missing = None;
        let mut p = Some(path);
        while let Some(cur) = p {
            if cur.as_os_str().is_empty() || cur.exists() {
                break;
            }
            missing = Some(cur.to_path_buf());
            p = cur.parent();
        }
        fs::create_dir_all(path)?;
        if let Some(top) = missing {
            self.dirs.push(top);
        }
        Ok(())
    }

    fn track(&mut self, path: &Path) {
        self.files.push(path.to_path_buf());
    }

    fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        self.files.push(path.to_path_buf());
        fs::write(path, contents)?;
        Ok(())
    }

    /// A binary format with a JSON sidecar, written by `f`.
    fn with_sidecar(&mut self, path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        self.files.push(path.to_path_buf());
        self.files.push(sidecar_path(path));
        f(path)
    }

    fn parent_of(&mut self, file: &Path) -> Result<()> {
        match file.parent() {
            Some(p) if !p.as_os_str().is_empty() => self.dir(p),
            _ => Ok(()),
        }
    }

    fn rollback(self) {
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

/// Apply `--config` on top of the parsed flags. Keys may be written with
/// dashes or underscores; unknown keys are rejected.
fn with_config<T: Serialize + DeserializeOwned>(args: T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else { return Ok(args) };
    let mut value = serde_json::to_value(&args)?;
    let over: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let (Value::Object(base), Value::Object(over)) = (&mut value, over) else {
        return Err(Error::InvalidParameter("config file must hold a JSON object".into()));
    };
    for (k, v) in over {
        let key = k.replace('-', "_");
        if !base.contains_key(&key) {
            return Err(Error::InvalidParameter(format!("unknown config key {k:?}")));
        }
        base.insert(key, v);
    }
    Ok(serde_json::from_value(value)?)
}

/// Provenance record: the effective configuration without the worker
/// count, which never affects results.
fn run_record<T: Serialize>(command: &str, args: &T) -> Result<String> {
    let mut value = serde_json::to_value(args)?;
    if let Value::Object(map) = &mut value {
        map.remove("workers");
    }
    let record = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": value,
    });
    let mut s = serde_json::to_string_pretty(&record)?;
    s.push('\n');
    Ok(s)
}

fn workers(requested: Option<usize>) -> Result<usize> {
    match requested {
        Some(0) => Err(Error::InvalidParameter("--workers must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// `a..b` is inclusive of `b`; `a..b:s` steps by `s`; otherwise a comma
/// separated list.
pub fn parse_starts(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Parse(format!("invalid mask starts {text:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let text = text.trim();
    if let Some((a, rest)) = text.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, s)) => (num(b)?, num(s)?),
            None => (num(rest)?, 1),
        };
        let a = num(a)?;
        if step == 0 || b < a {
            return Err(bad());
        }
        Ok((a..=b).step_by(step).collect())
    } else {
        text.split(',').map(num).collect()
    }
}

fn prepare_epochs(path: &Path, subject: Option<&str>, average: bool) -> Result<EpochSet> {
    let mut epochs = read_epochs(path)?;
    if let Some(s) = subject {
        epochs = epochs.filter_subject(s)?;
    }
    if average {
        epochs = average_repetitions(&epochs)?;
    }
    Ok(epochs)
}

/// Written next to the model so `attribute` can rebuild the same encoder.
#[derive(Debug, Serialize, Deserialize)]
struct ModelSidecar {
    encoder: EncoderSpec,
    n_channels: usize,
    n_timepoints: usize,
}

fn model_sidecar_path(model: &Path) -> PathBuf {
    model.with_extension("encoder.json")
}

fn run_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.run.json"))
}

pub fn cmd_gen(args: GenArgs) -> Result<()> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let mut spec = match &args.spec {
        Some(p) => serde_json::from_str::<PlantSpec>(&fs::read_to_string(p)?)?,
        None => PlantSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let data = generate(&spec)?;

    let mut out = Outputs::default();
    let res = (|| {
        out.dir(&args.out)?;
        out.with_sidecar(&args.out.join("epochs.bin"), |p| write_epochs(&data.epochs, p))?;
        out.with_sidecar(&args.out.join("concepts.bin"), |p| {
            write_embeddings(&data.true_concepts, p)
        })?;
        out.write(&args.out.join("concepts.csv"), embeddings_to_csv(&data.true_concepts))?;
        out.write(
            &args.out.join("plant_spec.json"),
            serde_json::to_string_pretty(&spec)? + "\n",
        )?;
        out.write(&run_path(&args.out, "gen"), run_record("gen", &args)?)
    })();
    finish(out, res)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    if !(args.lambda.is_finite() && args.lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "--lambda {} must be finite and non-negative",
            args.lambda
        )));
    }
    if let Some(h) = args.holdout {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::InvalidParameter(format!("--holdout {h} must be in (0, 1)")));
        }
    }
    let spec = match args.encoder {
        EncoderKind::Flatten => EncoderSpec::FlattenProjection {
            out_dim: args.out_dim,
            seed: args.seed,
        },
        EncoderKind::WindowMean => EncoderSpec::WindowMean {
            window_len: args.window_len,
        },
        EncoderKind::Precomputed => EncoderSpec::Precomputed {
            dir: args
                .precomputed
                .clone()
                .ok_or_else(|| Error::InvalidParameter("--encoder precomputed needs --precomputed <dir>".into()))?,
        },
    };

    let epochs = prepare_epochs(&args.epochs, args.subject.as_deref(), !args.no_average)?;
    let concepts = read_embeddings(&args.concepts)?;
    let n = epochs.n_trials();
    let n_test = args.holdout.map_or(0, |h| (h * n as f64).round() as usize);
    if n_test > 0 && (n_test < 3 || n - n_test < 2) {
        return Err(Error::InvalidParameter(format!(
            "--holdout leaves {} training and {n_test} test trials; need at least 2 and 3",
            n - n_test
        )));
    }
    let train = epochs.select_trials(&(0..n - n_test).collect::<Vec<_>>())?;
    let encoder = Encoder::new(&spec, epochs.n_channels(), epochs.n_timepoints())?;
    let x = encoder.encode_batch(&train)?;
    let y = align_concepts(&train, &concepts)?;
    let model = ridge_fit(
        &x,
        &y,
        args.lambda,
        FitOptions {
            zscore_features: args.zscore_features,
        },
    )?;

    if n_test > 0 {
        let test = epochs.select_trials(&(n - n_test..n).collect::<Vec<_>>())?;
        let score = ridge_score(
            &model,
            &encoder.encode_batch(&test)?,
            &align_concepts(&test, &concepts)?,
        )?;
        let names = concepts.names_or_numbered();
        for (j, r) in score.per_dim_pearson.iter().enumerate() {
            match r {
                Some(r) => println!("pearson {} {r:.6}", names.get(j)),
                None => println!("pearson {} missing", names.get(j)),
            }
        }
        match score.mean_pearson {
            Some(m) => println!("mean_pearson {m:.6}"),
            None => println!("mean_pearson missing"),
        }
    }

    let sidecar = ModelSidecar {
        encoder: spec,
        n_channels: epochs.n_channels(),
        n_timepoints: epochs.n_timepoints(),
    };
    let mut out = Outputs::default();
    let res = (|| {
        out.parent_of(&args.out)?;
        out.track(&args.out);
        write_model(&model, &args.out)?;
        out.write(
            &model_sidecar_path(&args.out),
            serde_json::to_string_pretty(&sidecar)? + "\n",
        )?;
        out.write(&args.out.with_extension("run.json"), run_record("train", &args)?)
    })();
    finish(out, res)
}

fn metric_of(m: MetricArg) -> Metric {
    match m {
        MetricArg::M1 => Metric::MaskedVsTruePearson,
        MetricArg::M2 => Metric::DeltaPredTruePearson,
        MetricArg::M3 => Metric::DeltaActivation,
    }
}

/// Aggregated curves of `metric`. For M3 the row of concept `j` comes from
/// the M3 grid of concept `j`.
fn aggregate_metric(
    sweep: &SweepResult,
    metric: Metric,
    group: Aggregation,
    concepts: &EmbeddingMatrix,
) -> Result<(AttributionGrid, Vec<String>)> {
    let grid = match metric {
        Metric::MaskedVsTruePearson => &sweep.m1,
        Metric::DeltaPredTruePearson => &sweep.m2,
        Metric::DeltaActivation => {
            let names = concepts.names_or_numbered().as_slice().to_vec();
            let mut values = Vec::new();
            let mut empty = Vec::new();
            for (j, g) in sweep.m3.iter().enumerate() {
                let a = aggregate_curves(g, group, concepts)?;
                let row = a.grid.row(if matches!(group, Aggregation::MeanOverTrials) {
                    0
                } else {
                    j
                });
                if row.iter().all(Option::is_none) {
                    empty.push(names[j].clone());
                }
                values.extend_from_slice(row);
            }
            let grid = AttributionGrid::new(
                metric,
                names,
                sweep.m2.starts().to_vec(),
                values,
                sweep.m2.mask_length(),
                None,
            )?;
            return Ok((grid, empty));
        }
    };
    let a = aggregate_curves(grid, group, concepts)?;
    Ok((a.grid, a.empty_groups))
}

pub fn cmd_attribute(args: AttributeArgs) -> Result<()> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let n_workers = workers(args.workers)?;
    if !(args.q > 0.0 && args.q <= 1.0) {
        return Err(Error::InvalidParameter(format!("--q {} must be in (0, 1]", args.q)));
    }
    let mask = MaskSpec::new(args.mask_len, parse_starts(&args.mask_starts)?)?;
    let epochs = prepare_epochs(&args.epochs, args.subject.as_deref(), !args.no_average)?;
    mask.validate(epochs.n_timepoints())?;
    let concepts = read_embeddings(&args.concepts)?;
    let model = read_model(&args.model)?;
    if let Some(k) = args.top_k {
        if k == 0 || k > model.n_targets() {
            return Err(Error::InvalidParameter(format!(
                "--top-k {k} must be in [1, {}]",
                model.n_targets()
            )));
        }
    }
    let side: ModelSidecar = serde_json::from_str(&fs::read_to_string(model_sidecar_path(&args.model))?)?;
    if (side.n_channels, side.n_timepoints) != (epochs.n_channels(), epochs.n_timepoints()) {
        return Err(Error::InvalidShape(format!(
            "model was trained on {}x{} epochs, got {}x{}",
            side.n_channels,
            side.n_timepoints,
            epochs.n_channels(),
            epochs.n_timepoints()
        )));
    }
    let encoder = Encoder::new(&side.encoder, epochs.n_channels(), epochs.n_timepoints())?;
    let opts = SweepOptions {
        mask_value: match args.mask_value {
            MaskValueArg::Zero => MaskValue::Zero,
            MaskValueArg::Mean => MaskValue::ChannelMean,
        },
        reference: match args.reference {
            ReferenceArg::True => Reference::True,
            ReferenceArg::Predicted => Reference::Predicted,
        },
        workers: n_workers,
    };
    let sweep = mask_sweep(&epochs, &encoder, &model, &mask, &concepts, &opts)?;
    let metric = metric_of(args.metric);
    let (mean, empty_mean) = aggregate_metric(&sweep, metric, Aggregation::MeanOverTrials, &concepts)?;
    let (per_concept, empty) = aggregate_metric(&sweep, metric, Aggregation::PerConceptTopQ { q: args.q }, &concepts)?;
    for name in empty_mean.iter().chain(&empty) {
        eprintln!("warning: EMPTY_GROUP: no data for {name:?}; row written as missing");
    }
    let top_k = match args.top_k {
        Some(k) => {
            let names = concepts.names_or_numbered();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["row_id", "rank", "concept", "activation"])
                .map_err(crate::attrib::csv_err)?;
            for (i, label) in epochs.trial_labels().iter().enumerate() {
                let pred = model.predict(&encoder.encode(epochs.trial(i), label, None)?)?;
                for (rank, (name, v)) in top_k_of(&pred, &names, k)?.into_iter().enumerate() {
                    w.write_record([label.as_str(), &(rank + 1).to_string(), &name, &v.to_string()])
                        .map_err(crate::attrib::csv_err)?;
                }
            }
            Some(w.into_inner().map_err(|e| Error::Parse(e.to_string()))?)
        }
        None => None,
    };

    let mut out = Outputs::default();
    let res = (|| {
        out.dir(&args.out)?;
        let mut grids: Vec<(String, &AttributionGrid)> = vec![("m1".into(), &sweep.m1), ("m2".into(), &sweep.m2)];
        grids.extend(sweep.m3.iter().enumerate().map(|(j, g)| (format!("m3_{j}"), g)));
        grids.push(("curves_mean".into(), &mean));
        grids.push(("curves_concepts".into(), &per_concept));
        for (stem, grid) in grids {
            out.write(&args.out.join(format!("{stem}.csv")), grid_to_csv(grid)?)?;
            out.with_sidecar(&args.out.join(format!("{stem}.bin")), |p| write_grid(grid, p))?;
        }
        if let Some(bytes) = &top_k {
            out.write(&args.out.join("topk.csv"), bytes)?;
        }
        out.write(&run_path(&args.out, "attribute"), run_record("attribute", &args)?)
    })();
    finish(out, res)
}

pub fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let n_workers = workers(args.workers)?;
    if args.k == 0 {
        return Err(Error::KOutOfRange { k: 0, n: 0 });
    }
    let grid = if args.grid.extension().is_some_and(|e| e == "bin") {
        read_grid(&args.grid)?
    } else {
        read_grid_csv(&args.grid, metric_of(args.metric), args.mask_len)?
    };
    let grid = if args.drop_missing {
        let keep: Vec<usize> = (0..grid.n_rows()).filter(|&i| grid.complete_row(i).is_some()).collect();
        for i in (0..grid.n_rows()).filter(|i| !keep.contains(i)) {
            eprintln!("warning: dropping row {:?} with missing cells", grid.row_ids()[i]);
        }
        let values = keep.iter().flat_map(|&i| grid.row(i).to_vec()).collect();
        let ids = keep.iter().map(|&i| grid.row_ids()[i].clone()).collect();
        AttributionGrid::new(
            grid.metric(),
            ids,
            grid.starts().to_vec(),
            values,
            grid.mask_length(),
            grid.concept_index(),
        )?
    } else {
        grid
    };
    if args.k > grid.n_rows() {
        return Err(Error::KOutOfRange {
            k: args.k,
            n: grid.n_rows(),
        });
    }
    let opts = DistanceOptions {
        band: args.band,
        cost: match args.cost {
            CostArg::Abs => LocalCost::Absolute,
            CostArg::Squared => LocalCost::Squared,
        },
        workers: n_workers,
    };
    let linkage = match args.linkage {
        LinkageArg::Average => Linkage::Average,
        LinkageArg::Single => Linkage::Single,
        LinkageArg::Complete => Linkage::Complete,
    };
    let d = distance_matrix(&grid, &opts)?;
    let dend = agglomerate(&d.matrix, linkage, d.labels.clone())?;
    let clusters = cluster_cut(&dend, args.k)?;

    let mut out = Outputs::default();
    let res = (|| {
        out.dir(&args.out)?;
        out.write(&args.out.join("distance.csv"), distance_to_csv(&d)?)?;
        out.write(&args.out.join("dendrogram.json"), dend.to_json()?)?;
        out.write(
            &args.out.join("clusters.csv"),
            assignments_to_csv(&d.labels, &clusters)?,
        )?;
        out.write(&run_path(&args.out, "cluster"), run_record("cluster", &args)?)
    })();
    finish(out, res)
}

fn read_assignments(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut r = csv::Reader::from_path(path).map_err(crate::attrib::csv_err)?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(crate::attrib::csv_err)?;
            let c = rec
                .get(1)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad row in {}", path.display())))?;
            Ok((rec.get(0).unwrap_or_default().to_string(), c))
        })
        .collect()
}

pub fn cmd_report(args: ReportArgs) -> Result<()> {
    let args = with_config(args.clone(), args.config.as_deref())?;
    let inputs = if args.inputs.is_empty() {
        vec![args.out.clone()]
    } else {
        args.inputs.clone()
    };
    let mut figures: Vec<(String, String)> = Vec::new();
    for dir in &inputs {
        let mut curves: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("curves_") && name.ends_with(".bin")
            })
            .collect();
        curves.sort();
        for p in curves {
            let grid = read_grid(&p)?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("curves").to_string();
            let title = format!("{stem} ({}, L = {})", grid.metric(), grid.mask_length());
            figures.push((format!("{stem}.svg"), svg::line_plot(&grid, &title)));
        }
        let dend_path = dir.join("dendrogram.json");
        if dend_path.exists() {
            let dend = read_dendrogram(&dend_path)?;
            let assign_path = dir.join("clusters.csv");
            let clusters = if assign_path.exists() {
                let rows = read_assignments(&assign_path)?;
                let ids: Option<Vec<usize>> = dend
                    .leaf_labels()
                    .iter()
                    .map(|l| rows.iter().find(|(r, _)| r == l).map(|(_, c)| *c))
                    .collect();
                Some(ids.ok_or_else(|| Error::RowMismatch("clusters.csv does not cover every leaf".into()))?)
            } else {
                None
            };
            let k = clusters.as_ref().map(|c| c.iter().max().map_or(0, |m| m + 1));
            let title = match k {
                Some(k) => format!("dendrogram ({} leaves, K = {k})", dend.n_leaves()),
                None => format!("dendrogram ({} leaves)", dend.n_leaves()),
            };
            figures.push((
                "dendrogram.svg".into(),
                svg::dendrogram(&dend, clusters.as_deref(), &title),
            ));
        }
    }
    if figures.is_empty() {
        return Err(Error::EmptyInput("no curves_*.bin or dendrogram.json found"));
    }

    let mut out = Outputs::default();
    let res = (|| {
        out.dir(&args.out)?;
        for (name, body) in &figures {
            out.write(&args.out.join(name), body)?;
        }
        out.write(&run_path(&args.out, "report"), run_record("report", &args)?)
    })();
    finish(out, res)
}

fn finish(out: Outputs, res: Result<()>) -> Result<()> {
    if res.is_err() {
        out.rollback();
    }
    res
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("ERROR USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
