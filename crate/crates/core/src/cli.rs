//! The `value-probe` command line. Exit codes: 0 success, 1 data error, 2 usage error. Logs go
//! to stderr; data goes to files or stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::fusion::{self, FusionConfig, NmiNormalization};
use crate::probers::{
    self, build_task, default_selection, mismatch_dataset, sentence_probe, CorefTaskConfig, FeatureKind,
    RelationTaskConfig, Task, TrainConfig,
};
use crate::report::{self, heatmap_csv, to_json, trace_fingerprint, write_output, ProbeReport, Timing, TOOL_VERSION};
use crate::stats::{self, Direction, HeadGrid, HeadLayout, HeadStatTable, PairStatsOptions};
use crate::synth::{self, SynthConfig};
use crate::trace::{self, load_dataset, load_manifest, read_annotations, read_sample, validate_trace, TraceDataset};

#[derive(Debug, Parser)]
#[command(name = "value-probe", version, about = "Probe attention and embedding traces of vision-and-language transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Trace directory (manifest.json, attn.bin, emb.bin, annotations.jsonl).
    #[arg(long, value_name = "DIR")]
    trace: PathBuf,
    /// Seed for every random choice of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path, or `-` for stdout.
    #[arg(long, value_name = "PATH|-", default_value = "-")]
    out: PathBuf,
    /// JSON configuration file for the command.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Add wall-clock timing to the report (makes reruns differ).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MiModality {
    Text,
    Visual,
    Special,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Features {
    Attn,
    Emb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Norm {
    Arithmetic,
    Geometric,
    Max,
    Min,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer fusion degree (k-means + NMI against the modality partition).
    Fusion {
        #[command(flatten)]
        common: Common,
        /// Embedding layers, e.g. `0,3-5` (default: every layer).
        #[arg(long, value_name = "SPEC")]
        layers: Option<String>,
        #[arg(long, value_enum)]
        normalization: Option<Norm>,
        /// Cluster L2-normalized embeddings.
        #[arg(long)]
        l2_normalize: bool,
        /// Leave [CLS]/[SEP] out of the clustering.
        #[arg(long)]
        exclude_special: bool,
    },
    /// Modality importance of the [CLS] row per head.
    Mi {
        #[command(flatten)]
        common: Common,
        /// Heatmap written as CSV (to stdout with `--out -`).
        #[arg(long, value_enum, default_value = "text")]
        modality: MiModality,
        /// Output format (default: csv for stdout, json for files).
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Image-to-text head probabilities.
    Heads {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Per-label coreference max-attention tables.
    CorefStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "vt")]
        direction: Direction,
        /// Add random-partner baselines.
        #[arg(long)]
        baseline: bool,
        /// Random partners per link for the baseline.
        #[arg(long, default_value_t = 1)]
        draws: usize,
        /// Two-stream sublayer to read.
        #[arg(long, default_value = trace::CROSS_XATT)]
        block: String,
    },
    /// Per-predicate relation max-attention tables.
    RelationStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 1)]
        draws: usize,
    },
    /// Train and evaluate a prober.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Task,
        #[arg(long, value_enum, default_value = "attn")]
        features: Features,
        /// Embedding layer for `--features emb`.
        #[arg(long, allow_hyphen_values = true)]
        layer: Option<i32>,
        /// Layer rows of the head table read by the attention prober (0-based), or embedding
        /// layers for `--task sent`.
        #[arg(long, value_name = "SPEC")]
        layers: Option<String>,
        /// Heads read by the attention prober (0-based).
        #[arg(long, value_name = "SPEC")]
        heads: Option<String>,
        /// Sentence labels (JSON object sample_id → label) for `--task sent`.
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        /// Where to write metrics (default: metrics.json next to `--out`).
        #[arg(long, value_name = "FILE")]
        metrics: Option<PathBuf>,
        /// Also train on within-split shuffled labels.
        #[arg(long)]
        shuffle_control: bool,
    },
    /// Layer-wise sentence probe on mean-pooled text embeddings.
    Sent {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        labels: PathBuf,
        #[arg(long, value_name = "SPEC")]
        layers: Option<String>,
    },
    /// Generate a synthetic trace directory with planted structure.
    Synth {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Check every sample against the trace invariants; violations go to stderr as JSON lines.
    Validate {
        #[arg(long, value_name = "DIR")]
        trace: PathBuf,
        #[arg(long, value_name = "PATH|-", default_value = "-")]
        out: PathBuf,
    },
    /// Export a matrix of a JSON report as a CSV heatmap.
    ExportHeatmap {
        /// Report JSON file.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// JSON pointer to the matrix, e.g. `/result/visual`.
        #[arg(long, default_value = "/result")]
        pointer: String,
        #[arg(long, value_name = "PATH|-", default_value = "-")]
        out: PathBuf,
    },
    /// Seeded derangement pairing images with other images' annotations (exporter work order).
    Mismatch {
        #[command(flatten)]
        common: Common,
    },
    /// Raw embeddings of one layer as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        layer: i32,
        /// Embedding stream (default: the fused stream).
        #[arg(long)]
        stream: Option<String>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `0,2,4-6` (negative single values allowed) into a sorted, deduplicated list.
pub fn parse_index_spec(spec: &str) -> Result<Vec<i64>, String> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Ok(v) = part.parse::<i64>() {
            out.push(v);
            continue;
        }
        let (a, b) = part.split_once('-').ok_or_else(|| format!("bad index spec item {part:?}"))?;
        let (a, b): (i64, i64) = (
            a.trim().parse().map_err(|_| format!("bad range start in {part:?}"))?,
            b.trim().parse().map_err(|_| format!("bad range end in {part:?}"))?,
        );
        if a > b {
            return Err(format!("empty range {part:?}"));
        }
        out.extend(a..=b);
    }
    if out.is_empty() {
        return Err(format!("empty index spec {spec:?}"));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn spec_i32(spec: &Option<String>) -> CliResult<Option<Vec<i32>>> {
    spec.as_deref()
        .map(|s| parse_index_spec(s).map(|v| v.into_iter().map(|x| x as i32).collect()))
        .transpose()
        .map_err(CliError::Usage)
}

fn spec_usize(spec: &Option<String>) -> CliResult<Option<Vec<usize>>> {
    spec.as_deref()
        .map(|s| {
            let v = parse_index_spec(s)?;
            if v.iter().any(|&x| x < 0) {
                return Err(format!("negative index in {s:?}"));
            }
            Ok(v.into_iter().map(|x| x as usize).collect())
        })
        .transpose()
        .map_err(CliError::Usage)
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

struct Context {
    command: &'static str,
    args: Vec<String>,
    started: Instant,
}

impl Context {
    fn load(&self, common: &Common) -> CliResult<(TraceDataset, String)> {
        let dataset = load_dataset(&common.trace).map_err(CliError::data)?;
        let fingerprint = trace_fingerprint(&common.trace).map_err(CliError::data)?;
        log::info!("loaded {} samples from {}", dataset.samples.len(), common.trace.display());
        Ok((dataset, fingerprint))
    }

    fn report<C: Serialize, R: Serialize>(
        &self,
        common: &Common,
        fingerprint: Option<String>,
        config: C,
        result: R,
    ) -> ProbeReport<C, R> {
        ProbeReport {
            tool_version: TOOL_VERSION,
            command: self.command.to_string(),
            args: self.args.clone(),
            seed: common.seed,
            trace_fingerprint: fingerprint,
            config,
            result,
            timing: common.timing.then(|| Timing { elapsed_ms: self.started.elapsed().as_millis() }),
        }
    }
}

fn emit(path: &Path, text: &str) -> CliResult<()> {
    write_output(path, text.as_bytes()).map_err(CliError::data)
}

fn emit_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    emit(path, &to_json(value).map_err(CliError::data)?)
}

/// `dir/stem.suffix.csv` next to a report file.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    path.with_file_name(format!("{stem}.{}.csv", sanitize(suffix)))
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn emit_heatmap(path: &Path, grid: &HeadGrid) -> CliResult<()> {
    emit(path, &heatmap_csv(grid).map_err(CliError::data)?)
}

fn resolve_format(format: Option<Format>, out: &Path) -> Format {
    format.unwrap_or(if out == Path::new("-") { Format::Csv } else { Format::Json })
}

fn emit_table(common: &Common, report: &ProbeReport<PairStatsOptions, HeadStatTable>) -> CliResult<()> {
    emit_json(&common.out, report)?;
    if common.out != Path::new("-") {
        for (key, entry) in &report.result.entries {
            emit_heatmap(&sibling(&common.out, key), &entry.mean)?;
            if let Some(b) = &entry.baseline {
                emit_heatmap(&sibling(&common.out, &format!("{key}.baseline")), &b.mean)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct ProbeConfig {
    train: TrainConfig,
    coref: CorefTaskConfig,
    relation: RelationTaskConfig,
}

#[derive(Serialize)]
struct ProbeRunConfig<'a> {
    task: Task,
    features: &'a str,
    layer: Option<i32>,
    #[serde(flatten)]
    probe: &'a ProbeConfig,
    shuffle_control: bool,
}

#[derive(Serialize)]
struct ProbeMetrics<'a> {
    task: Task,
    class_names: &'a [String],
    example_counts: BTreeMap<&'static str, usize>,
    train: &'a probers::Metrics,
    dev: &'a probers::Metrics,
    test: &'a probers::Metrics,
    shuffle_control: &'a Option<probers::Metrics>,
    log: &'a probers::TrainLog,
    task_warnings: &'a [String],
}

fn read_labels(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => Ok((k, s)),
            serde_json::Value::Number(n) => Ok((k, n.to_string())),
            serde_json::Value::Bool(b) => Ok((k, b.to_string())),
            other => Err(CliError::Data(format!("label of {k:?} must be a string or number, got {other}"))),
        })
        .collect()
}

fn sentence_layers(dataset: &TraceDataset, spec: &Option<String>) -> CliResult<Vec<i32>> {
    if let Some(layers) = spec_i32(spec)? {
        return Ok(layers);
    }
    let stream = dataset.model.text_stream();
    let count = dataset.model.stream(stream).map(|d| d.layer_count).unwrap_or(0);
    Ok((0..count as i32).collect())
}

fn run_command(command: Command, ctx: &Context) -> CliResult<()> {
    match command {
        Command::Fusion { common, layers, normalization, l2_normalize, exclude_special } => {
            let (dataset, fp) = ctx.load(&common)?;
            let mut cfg: FusionConfig = read_config(&common.config)?;
            if let Some(n) = normalization {
                cfg.normalization = match n {
                    Norm::Arithmetic => NmiNormalization::Arithmetic,
                    Norm::Geometric => NmiNormalization::Geometric,
                    Norm::Max => NmiNormalization::Max,
                    Norm::Min => NmiNormalization::Min,
                };
            }
            cfg.l2_normalize |= l2_normalize;
            cfg.include_special &= !exclude_special;
            let layers = spec_i32(&layers)?;
            let result = fusion::fusion_degree(&dataset, layers.as_deref(), common.seed, &cfg).map_err(CliError::data)?;
            emit_json(&common.out, &ctx.report(&common, Some(fp), cfg, result))
        }
        Command::Mi { common, modality, format } => {
            let (dataset, fp) = ctx.load(&common)?;
            let result = stats::mi_aggregate(&dataset).map_err(CliError::data)?;
            let grid = match modality {
                MiModality::Text => &result.text,
                MiModality::Visual => &result.visual,
                MiModality::Special => &result.special,
            };
            match resolve_format(format, &common.out) {
                Format::Csv => emit_heatmap(&common.out, grid),
                Format::Json => {
                    if common.out != Path::new("-") {
                        for (name, g) in [("text", &result.text), ("visual", &result.visual), ("special", &result.special)]
                        {
                            emit_heatmap(&sibling(&common.out, name), g)?;
                        }
                    }
                    emit_json(&common.out, &ctx.report(&common, Some(fp), serde_json::json!({}), result))
                }
            }
        }
        Command::Heads { common, format } => {
            let (dataset, fp) = ctx.load(&common)?;
            let result = stats::image_to_text_heads(&dataset).map_err(CliError::data)?;
            match resolve_format(format, &common.out) {
                Format::Csv => emit_heatmap(&common.out, &result.probability),
                Format::Json => {
                    if common.out != Path::new("-") {
                        emit_heatmap(&sibling(&common.out, "probability"), &result.probability)?;
                    }
                    emit_json(&common.out, &ctx.report(&common, Some(fp), serde_json::json!({}), result))
                }
            }
        }
        Command::CorefStats { common, direction, baseline, draws, block } => {
            let (dataset, fp) = ctx.load(&common)?;
            let opts = PairStatsOptions { baseline, seed: common.seed, draws, two_stream_coref_block: block };
            let result = stats::coref_head_stats(&dataset, direction, &opts).map_err(CliError::data)?;
            emit_table(&common, &ctx.report(&common, Some(fp), opts, result))
        }
        Command::RelationStats { common, baseline, draws } => {
            let (dataset, fp) = ctx.load(&common)?;
            let opts = PairStatsOptions { baseline, seed: common.seed, draws, ..Default::default() };
            let result = stats::relation_head_stats(&dataset, &opts).map_err(CliError::data)?;
            emit_table(&common, &ctx.report(&common, Some(fp), opts, result))
        }
        Command::Probe { common, task, features, layer, layers, heads, labels, metrics, shuffle_control } => {
            let cfg: ProbeConfig = read_config(&common.config)?;
            if task == Task::Sent {
                let labels = labels.ok_or_else(|| CliError::Usage("--task sent needs --labels FILE".into()))?;
                let (dataset, fp) = ctx.load(&common)?;
                let labels = read_labels(&labels)?;
                let layers = match layer {
                    Some(l) => vec![l],
                    None => sentence_layers(&dataset, &layers)?,
                };
                let result = sentence_probe(&dataset, &labels, &layers, &cfg.train, common.seed).map_err(CliError::data)?;
                return emit_json(&common.out, &ctx.report(&common, Some(fp), cfg, result));
            }
            let kind = match features {
                Features::Attn => FeatureKind::Attention,
                Features::Emb => FeatureKind::Embedding {
                    layer: layer.ok_or_else(|| CliError::Usage("--features emb needs --layer K".into()))?,
                },
            };
            let (dataset, fp) = ctx.load(&common)?;
            let task_data = build_task(&dataset, task, common.seed, &cfg.coref, &cfg.relation).map_err(CliError::data)?;
            for w in &task_data.warnings {
                log::warn!("{w}");
            }
            let selection = if kind == FeatureKind::Attention && (layers.is_some() || heads.is_some()) {
                let layout: HeadLayout = default_selection(&dataset, task).layout;
                let rows = spec_usize(&layers)?;
                let heads = spec_usize(&heads)?;
                Some(layout.restrict(rows.as_deref(), heads.as_deref()))
            } else {
                None
            };
            let outcome = probers::train_prober(&dataset, &task_data, kind, selection, &cfg.train, common.seed, shuffle_control)
                .map_err(CliError::data)?;
            for w in &outcome.log.warnings {
                log::warn!("{w}");
            }
            let run_cfg = ProbeRunConfig {
                task,
                features: match features {
                    Features::Attn => "attn",
                    Features::Emb => "emb",
                },
                layer,
                probe: &cfg,
                shuffle_control,
            };
            let counts = [("train", probers::Split::Train), ("dev", probers::Split::Dev), ("test", probers::Split::Test)]
                .into_iter()
                .map(|(name, split)| (name, task_data.count(split)))
                .collect();
            let metrics_payload = ProbeMetrics {
                task,
                class_names: &task_data.class_names,
                example_counts: counts,
                train: &outcome.train,
                dev: &outcome.dev,
                test: &outcome.test,
                shuffle_control: &outcome.shuffle_control,
                log: &outcome.log,
                task_warnings: &task_data.warnings,
            };
            if common.out == Path::new("-") && metrics.is_none() {
                let both = serde_json::json!({ "model": &outcome.model, "metrics": &metrics_payload });
                return emit_json(&common.out, &ctx.report(&common, Some(fp), run_cfg, both));
            }
            emit_json(&common.out, &ctx.report(&common, Some(fp.clone()), &run_cfg, &outcome.model))?;
            let metrics_path =
                metrics.unwrap_or_else(|| common.out.with_file_name("metrics.json"));
            emit_json(&metrics_path, &ctx.report(&common, Some(fp), &run_cfg, metrics_payload))
        }
        Command::Sent { common, labels, layers } => {
            let cfg: ProbeConfig = read_config(&common.config)?;
            let (dataset, fp) = ctx.load(&common)?;
            let labels = read_labels(&labels)?;
            let layers = sentence_layers(&dataset, &layers)?;
            let result = sentence_probe(&dataset, &labels, &layers, &cfg.train, common.seed).map_err(CliError::data)?;
            emit_json(&common.out, &ctx.report(&common, Some(fp), cfg.train, result))
        }
        Command::Synth { config, seed, out } => {
            let mut cfg: SynthConfig = read_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (dataset, truth) = synth::generate(&cfg).map_err(|e| match e {
                synth::SynthError::InvalidConfig(msg) => CliError::Usage(msg),
                other => CliError::data(other),
            })?;
            trace::write_dataset(&dataset, &out).map_err(CliError::data)?;
            emit_json(&out.join("ground_truth.json"), &truth)?;
            if !truth.sentence_labels.is_empty() {
                emit_json(&out.join("sentence_labels.json"), &truth.sentence_labels)?;
            }
            log::info!("wrote {} samples to {}", dataset.samples.len(), out.display());
            Ok(())
        }
        Command::Validate { trace, out } => validate_command(&trace, &out),
        Command::ExportHeatmap { input, pointer, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(CliError::data)?;
            let node = value
                .pointer(&pointer)
                .ok_or_else(|| CliError::Data(format!("no value at {pointer:?} in {}", input.display())))?;
            let grid: Vec<Vec<f64>> = serde_json::from_value(node.clone())
                .map_err(|_| CliError::Data(format!("value at {pointer:?} is not a numeric matrix")))?;
            emit(&out, &report::heatmap_csv(&grid).map_err(CliError::data)?)
        }
        Command::Mismatch { common } => {
            let (dataset, fp) = ctx.load(&common)?;
            let pairing = mismatch_dataset(&dataset, common.seed).map_err(CliError::data)?;
            if common.out == Path::new("-") {
                emit_json(&common.out, &ctx.report(&common, Some(fp), serde_json::json!({}), pairing))
            } else {
                // The exporter consumes the bare pairing.
                emit_json(&common.out, &pairing)
            }
        }
        Command::ExportEmbeddings { common, layer, stream } => {
            let (dataset, _) = ctx.load(&common)?;
            let stream = stream.unwrap_or_else(|| dataset.model.fused_stream().to_string());
            let csv = fusion::embeddings_csv(&dataset, &stream, layer).map_err(CliError::data)?;
            emit(&common.out, &csv)
        }
    }
}

#[derive(Serialize)]
struct ValidationSummary {
    samples: usize,
    violations: usize,
    valid: bool,
}

fn validate_command(dir: &Path, out: &Path) -> CliResult<()> {
    let store = match load_manifest(dir) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "check": "manifest", "detail": e.to_string() }));
            return Err(CliError::data(e));
        }
    };
    let annotations = match read_annotations(&store) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "check": "annotations", "detail": e.to_string() }));
            return Err(CliError::data(e));
        }
    };
    let mut violations = 0;
    let ids: Vec<String> = store.sample_ids().map(String::from).collect();
    for id in &ids {
        match read_sample(&store, id) {
            Ok(sample) => {
                let report = validate_trace(&sample, Some(&store.manifest().model), annotations.get(id));
                for v in &report.violations {
                    eprintln!(
                        "{}",
                        serde_json::json!({ "sample_id": v.sample_id, "check": v.check.name(), "detail": v.detail })
                    );
                }
                violations += report.violations.len();
            }
            Err(e) => {
                eprintln!("{}", serde_json::json!({ "sample_id": id, "check": "read", "detail": e.to_string() }));
                violations += 1;
            }
        }
    }
    emit_json(out, &ValidationSummary { samples: ids.len(), violations, valid: violations == 0 })?;
    if violations > 0 {
        return Err(CliError::Data(format!("{violations} violation(s)")));
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("VALUE_PROBE_THREADS") else { return Ok(()) };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("VALUE_PROBE_THREADS must be a positive integer, got {value:?}")))?;
    // Fails only when a pool already exists (e.g. a second run in one process); keep that pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Fusion { .. } => "fusion",
        Command::Mi { .. } => "mi",
        Command::Heads { .. } => "heads",
        Command::CorefStats { .. } => "coref-stats",
        Command::RelationStats { .. } => "relation-stats",
        Command::Probe { .. } => "probe",
        Command::Sent { .. } => "sent",
        Command::Synth { .. } => "synth",
        Command::Validate { .. } => "validate",
        Command::ExportHeatmap { .. } => "export-heatmap",
        Command::Mismatch { .. } => "mismatch",
        Command::ExportEmbeddings { .. } => "export-embeddings",
    }
}

/// Runs the command line `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let ctx = Context {
        command: command_name(&cli.command),
        args: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        started: Instant::now(),
    };
    let result = configure_threads().and_then(|_| run_command(cli.command, &ctx));
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
