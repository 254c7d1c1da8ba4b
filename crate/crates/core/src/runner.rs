//! Experiment execution behind the command line: runs, resumable sweeps,
//! CSV reports, numeric verification, gradient checks and backend training.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{
    build_scene_dataset, layout_boxes, preprocess_attention, train_toy_backend, AnalyticBackend,
    Backend, BackendError, Conditioning, LearnedBackend, PromptSpec, PrototypeLibrary, Scene,
    SceneConfig, TrainReport,
};
use crate::config::{
    self, apply_override, grid_cells, ConfigError, ExperimentConfig, GridAxis, PromptGenerator,
    PromptSource, ScheduleConfig, SCHEMA,
};
use crate::criterion::{Criterion, CriterionConfig};
use crate::image::{emit_image, ImageError};
use crate::metrics::{
    box_alignment, layout_diversity, saturation_stats, tiam_score, Detector, MetricsError,
};
use crate::rng::RngStream;
use crate::sampler::{GenerationRecord, Method, Pipeline, SamplerError};
use crate::schedule::{standard_normal, Schedule, ScheduleKind};
use crate::tensor::{grad_check_with, op_suite, OpReport, TensorError, SUITE_FLOOR};
use crate::verification::{
    approx_error, cumulant_scaling_check, expected_decay_order, fit_decay_slope,
    monte_carlo_cumulant_ratio, time_for_signal, CumulantRatio, DecayFit, MixtureSpec,
    VerifyError, TV_TOL,
};

/// Accepted distance of a fitted decay slope from its expected order.
pub const SLOPE_WINDOW: f64 = 0.3;
/// Accepted distance of a closed-form cumulant ratio from 1.
pub const ANALYTIC_RATIO_TOL: f64 = 1e-8;
/// Accepted relative distance of a Monte Carlo cumulant ratio from 1.
pub const MONTE_CARLO_RATIO_TOL: f64 = 0.05;

pub const THREADS_ENV: &str = "SAGA_LAB_THREADS";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const LIBRARY_FILE: &str = "library.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Check(String),
}

impl RunError {
    /// 1 for configuration problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Cap the worker pool from `SAGA_LAB_THREADS` when set. Only the first call
/// in a process takes effect.
pub fn configure_threads() -> std::result::Result<(), String> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// `count` prompts cycling over the entity tuples of the vocabulary in
/// lexicographic order.
pub fn generate_prompts(gen: &PromptGenerator, vocab: usize) -> Vec<PromptSpec> {
    let k = gen.entities;
    let mut tuples = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > 0 && k <= vocab {
        loop {
            tuples.push(cur.clone());
            let Some(i) = (0..k).rev().find(|&i| cur[i] < vocab - k + i) else {
                break;
            };
            cur[i] += 1;
            for j in i + 1..k {
                cur[j] = cur[j - 1] + 1;
            }
        }
    }
    if tuples.is_empty() {
        return Vec::new();
    }
    (0..gen.count)
        .map(|i| {
            let e = &tuples[i % tuples.len()];
            let tag: Vec<String> = e.iter().map(usize::to_string).collect();
            PromptSpec::new(format!("g{i:03}-{}", tag.join("-")), e.clone())
        })
        .collect()
}

/// Everything a run needs besides the backend.
pub struct World {
    pub config: ExperimentConfig,
    pub config_path: PathBuf,
    pub schedule: Schedule,
    pub library: PrototypeLibrary,
    pub scenes: Vec<Scene>,
    pub prompts: Vec<PromptSpec>,
}

impl World {
    pub fn build(config: &ExperimentConfig, path: &Path) -> Result<Self> {
        let bad = |k: &str, m: String| RunError::Config(ConfigError::invalid(path, k, m));
        let schedule = config.schedule.build().map_err(|e| bad("schedule", e.to_string()))?;
        let scene = &config.backend.scene;
        let mut prompts = match &config.prompts {
            PromptSource::Inline(p) => p.clone(),
            PromptSource::File(f) => {
                let v = config::read_json(f)?;
                config::from_value::<Vec<PromptSpec>>(f, v)?
            }
            PromptSource::Generate(g) => {
                let p = generate_prompts(g, scene.vocab);
                if p.is_empty() {
                    return Err(bad(
                        "prompts.generate.entities",
                        format!("no {}-entity tuples in a vocabulary of {}", g.entities, scene.vocab),
                    ));
                }
                p
            }
        };
        for p in &prompts {
            p.validate(scene.vocab, scene.height, scene.width)
                .map_err(|e| bad("prompts", e.to_string()))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.backend.dataset_seed);
        let (mut library, scenes) =
            build_scene_dataset(scene, &prompts, config.backend.use_boxes, &mut rng)
                .map_err(|e| bad("backend", e.to_string()))?;
        if let PromptSource::Generate(PromptGenerator {
            box_size: Some(size),
            seed,
            ..
        }) = &config.prompts
        {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for p in prompts.iter_mut() {
                let boxes = layout_boxes(&library, &p.id, *size, &mut rng)
                    .map_err(|e| bad("prompts.generate.box_size", e.to_string()))?;
                p.boxes = Some(boxes);
                let entry = library.prompts.get_mut(&p.id).expect("library has every prompt");
                entry.prompt = p.clone();
            }
        }
        Ok(Self {
            config: config.clone(),
            config_path: path.to_path_buf(),
            schedule,
            library,
            scenes,
            prompts,
        })
    }

    pub fn backend(&self) -> Result<Box<dyn Backend>> {
        let path = &self.config_path;
        match self.config.backend.kind {
            config::BackendKind::Analytic => Ok(Box::new(AnalyticBackend::new(self.library.clone()))),
            config::BackendKind::Learned => {
                let w = self.config.backend.weights.as_ref().ok_or_else(|| {
                    ConfigError::invalid(path, "backend.weights", "learned backend needs weights")
                })?;
                let model = LearnedBackend::load(w)?;
                if model.kind != self.schedule.kind() {
                    return Err(ConfigError::invalid(
                        path,
                        "backend.weights",
                        format!("weights trained for {:?}, schedule is {:?}", model.kind, self.schedule.kind()),
                    )
                    .into());
                }
                Ok(Box::new(model))
            }
        }
    }

    /// Mean std of the clean prototypes, the fixed scale for saturation and
    /// image rendering.
    pub fn reference_std(&self) -> f64 {
        reference_std(&self.library)
    }
}

pub fn reference_std(library: &PrototypeLibrary) -> f64 {
    let stds: Vec<f64> = library
        .prompts
        .values()
        .flat_map(|p| p.prototypes.iter().map(|m| m.latent.std()))
        .collect();
    stds.iter().sum::<f64>() / stds.len().max(1) as f64
}

/// Per-prompt evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt_id: String,
    pub method: Method,
    pub entities: usize,
    pub images: usize,
    pub tiam: f64,
    pub box_alignment: Option<f64>,
    pub diversity: Option<f64>,
    /// Fraction of image pairs in which every entity was matched.
    pub diversity_coverage: Option<f64>,
    pub mu_std: Option<f64>,
    pub saturation_std: f64,
    pub saturation_beyond: f64,
}

/// Aggregate over a set of prompts sharing method and entity count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    /// Entity count, absent when pooled over all counts.
    pub entities: Option<usize>,
    pub prompts: usize,
    pub images: usize,
    pub tiam: f64,
    pub box_alignment: Option<f64>,
    pub diversity: Option<f64>,
    pub mu_std: Option<f64>,
    pub saturation_beyond: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Score every prompt's records against the library's detector.
pub fn evaluate(
    library: &PrototypeLibrary,
    prompts: &[PromptSpec],
    records: &[GenerationRecord],
) -> Result<Vec<PromptRow>> {
    let det = Detector::from_library(library);
    let sigma = reference_std(library);
    let mut by_prompt: BTreeMap<(&str, Method), Vec<&GenerationRecord>> = BTreeMap::new();
    for r in records {
        by_prompt.entry((r.prompt_id.as_str(), r.method)).or_default().push(r);
    }
    let lookup: BTreeMap<&str, &PromptSpec> = prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut rows = Vec::new();
    for ((id, method), recs) in by_prompt {
        let p = lookup.get(id).copied().ok_or_else(|| {
            RunError::Check(format!("record for unknown prompt {id}"))
        })?;
        let ents = p.entities.as_slice();
        let tiam = tiam_score(&det, recs.iter().map(|r| (ents, &r.z0)))?;
        let box_alignment = match &p.boxes {
            Some(b) => Some(box_alignment(&det, recs.iter().map(|r| (ents, b.as_slice(), &r.z0)))?),
            None => None,
        };
        let (diversity, diversity_coverage) = if recs.len() >= 2 {
            let pairs = recs.len() * (recs.len() - 1) / 2;
            match layout_diversity(&det, [(ents, recs.iter().map(|r| &r.z0).collect())]) {
                Ok(d) => (Some(d.mean), Some(d.pairs_used as f64 / pairs as f64)),
                // no pair of images found every entity
                Err(MetricsError::Empty) => (None, Some(0.0)),
                Err(e) => return Err(e.into()),
            }
        } else {
            (None, None)
        };
        let sats: Vec<_> = recs.iter().map(|r| saturation_stats(&r.z0, sigma)).collect();
        rows.push(PromptRow {
            prompt_id: id.to_string(),
            method,
            entities: ents.len(),
            images: recs.len(),
            tiam,
            box_alignment,
            diversity,
            diversity_coverage,
            mu_std: mean(recs.iter().filter_map(|r| r.prior.as_ref().map(|s| s.mu_std))),
            saturation_std: mean(sats.iter().map(|s| s.std)).unwrap_or(0.0),
            saturation_beyond: mean(sats.iter().map(|s| s.beyond)).unwrap_or(0.0),
        });
    }
    Ok(rows)
}

/// Image-weighted aggregates keyed by method and entity count, followed by
/// one pooled row per method.
pub fn summarize(rows: &[PromptRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, Option<usize>), Vec<&PromptRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, Some(r.entities))).or_default().push(r);
        groups.entry((r.method, None)).or_default().push(r);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((method, entities), rs)| {
            let images: usize = rs.iter().map(|r| r.images).sum();
            let w = |f: &dyn Fn(&PromptRow) -> f64| {
                rs.iter().map(|r| f(r) * r.images as f64).sum::<f64>() / images.max(1) as f64
            };
            let boxed: Vec<&&PromptRow> = rs.iter().filter(|r| r.box_alignment.is_some()).collect();
            let box_images: usize = boxed.iter().map(|r| r.images).sum();
            SummaryRow {
                method,
                entities,
                prompts: rs.len(),
                images,
                tiam: w(&|r| r.tiam),
                box_alignment: (box_images > 0).then(|| {
                    boxed
                        .iter()
                        .map(|r| r.box_alignment.unwrap_or(0.0) * r.images as f64)
                        .sum::<f64>()
                        / box_images as f64
                }),
                diversity: mean(rs.iter().filter_map(|r| r.diversity)),
                mu_std: mean(rs.iter().filter_map(|r| r.mu_std)),
                saturation_beyond: w(&|r| r.saturation_beyond),
            }
        })
        .collect();
    // pooled rows last within each method
    out.sort_by_key(|r| (r.method, r.entities.is_none(), r.entities));
    out
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub method: Option<Method>,
    pub images: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub config_hash: String,
    pub method: Method,
    pub prompts: Vec<PromptRow>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, Serialize)]
struct RunMeta {
    config_hash: String,
    wall_time_s: f64,
    records: usize,
    threads: usize,
    version: &'static str,
}

/// Generate every (prompt, seed) record with the worker pool. Records come
/// back in prompt order, then seed order, whatever the scheduling.
pub fn generate_records(world: &World, backend: &dyn Backend) -> Result<Vec<GenerationRecord>> {
    let cfg = &world.config;
    let pipeline = Pipeline::new(
        backend,
        &world.schedule,
        cfg.method.clone(),
        cfg.optim(),
        cfg.criterion.clone(),
    )?;
    let seeds = cfg.seeds.to_vec();
    let root = RngStream::new(cfg.root_seed);
    let per_prompt: Vec<Vec<GenerationRecord>> = world
        .prompts
        .par_iter()
        .map(|p| pipeline.run(p, &seeds, &root))
        .collect::<std::result::Result<_, _>>()?;
    Ok(per_prompt.into_iter().flatten().collect())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// `run`: records, library, report, CSV and timing metadata under the
/// configured output directory.
pub fn run(config: &ExperimentConfig, path: &Path, opts: &RunOptions) -> Result<RunReport> {
    let mut config = config.clone();
    if let Some(m) = opts.method {
        config.method.method = m;
        config.validate(path)?;
    }
    let start = Instant::now();
    let world = World::build(&config, path)?;
    let backend = world.backend()?;
    let records = generate_records(&world, backend.as_ref())?;
    let out = &config.output;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let rec_path = out.join(RECORDS_FILE);
    let tmp = rec_path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        for r in &records {
            let mut line = serde_json::to_string(r).expect("record serializes");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(io_err(&tmp))?;
        }
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, &rec_path).map_err(io_err(&rec_path))?;

    world.library.save(&out.join(LIBRARY_FILE))?;
    write_atomic(&out.join("config.json"), to_json(&config).as_bytes())?;

    if opts.images {
        let dir = out.join("images");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let sigma = world.reference_std();
        for r in &records {
            emit_image(&r.z0, sigma, &dir.join(format!("{}_{}.ppm", r.prompt_id, r.seed)))?;
        }
    }

    let rows = evaluate(&world.library, &world.prompts, &records)?;
    let report = RunReport {
        schema: SCHEMA,
        config_hash: config.hash(),
        method: config.method.method,
        summary: summarize(&rows),
        prompts: rows,
    };
    write_atomic(&out.join(REPORT_FILE), to_json(&report).as_bytes())?;
    write_atomic(&out.join("summary.csv"), &prompt_csv(&report.prompts)?)?;
    let meta = RunMeta {
        config_hash: report.config_hash.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
        records: records.len(),
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION"),
    };
    write_atomic(&out.join("meta.json"), to_json(&meta).as_bytes())?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| RunError::Check(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| RunError::Check(format!("csv: {e}")))
}

fn prompt_csv(rows: &[PromptRow]) -> Result<Vec<u8>> {
    let header = [
        "prompt_id", "method", "entities", "images", "tiam", "box_alignment", "diversity",
        "diversity_coverage", "mu_std", "saturation_std", "saturation_beyond",
    ]
    .map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.prompt_id.clone(),
                r.method.to_string(),
                r.entities.to_string(),
                r.images.to_string(),
                format!("{:.6}", r.tiam),
                opt(r.box_alignment),
                opt(r.diversity),
                opt(r.diversity_coverage),
                opt(r.mu_std),
                format!("{:.6}", r.saturation_std),
                format!("{:.6}", r.saturation_beyond),
            ]
        })
        .collect();
    csv_bytes(&header, &body)
}

const SUMMARY_COLUMNS: [&str; 9] = [
    "method", "entities", "prompts", "images", "tiam", "box_alignment", "diversity", "mu_std",
    "saturation_beyond",
];

fn summary_fields(r: &SummaryRow) -> Vec<String> {
    vec![
        r.method.to_string(),
        r.entities.map(|e| e.to_string()).unwrap_or("all".into()),
        r.prompts.to_string(),
        r.images.to_string(),
        format!("{:.6}", r.tiam),
        opt(r.box_alignment),
        opt(r.diversity),
        opt(r.mu_std),
        format!("{:.6}", r.saturation_beyond),
    ]
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let header = SUMMARY_COLUMNS.map(String::from);
    csv_bytes(&header, &rows.iter().map(summary_fields).collect::<Vec<_>>())
}

/// One finished sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRow {
    pub cell: String,
    pub params: BTreeMap<String, Value>,
    pub summary: SummaryRow,
    /// Whether this invocation computed the cell or found it on disk.
    #[serde(skip)]
    pub computed: bool,
}

/// `sweep`: every cell of the grid as its own run under
/// `<output>/cells/<config hash>`. Cells whose report already exists are
/// read back instead of recomputed.
pub fn sweep(
    path: &Path,
    overrides: &[String],
    axes: &[GridAxis],
    opts: &RunOptions,
) -> Result<Vec<CellRow>> {
    let base = ExperimentConfig::load(path, overrides)?;
    let mut base_value = config::read_json(path)?;
    for o in overrides {
        apply_override(&mut base_value, o).map_err(|(k, m)| ConfigError::invalid(path, k, m))?;
    }
    // every cell is parsed and validated before any of them runs
    let mut cells = Vec::new();
    for cell in grid_cells(axes) {
        let mut v = base_value.clone();
        for (k, val) in &cell {
            apply_override(&mut v, &format!("{k}={val}"))
                .map_err(|(k, m)| ConfigError::invalid(path, k, m))?;
        }
        if let Some(m) = opts.method {
            config::set_path(&mut v, "method.method", Value::String(m.to_string()))
                .map_err(|m| ConfigError::invalid(path, "method.method", m))?;
        }
        let mut cfg = ExperimentConfig::load_value(path, v)?;
        let hash = cfg.hash();
        cfg.output = base.output.join("cells").join(&hash);
        cells.push((cell, hash, cfg));
    }
    let mut rows = Vec::new();
    for (cell, hash, cfg) in cells {
        let report_path = cfg.output.join(REPORT_FILE);
        let (report, computed) = if report_path.exists() {
            let text = fs::read_to_string(&report_path).map_err(io_err(&report_path))?;
            let r: RunReport = serde_json::from_str(&text).map_err(|e| RunError::Format {
                path: report_path.clone(),
                msg: e.to_string(),
            })?;
            (r, false)
        } else {
            let cell_opts = RunOptions {
                method: None,
                images: opts.images,
            };
            (run(&cfg, path, &cell_opts)?, true)
        };
        let summary = report
            .summary
            .iter()
            .find(|s| s.entities.is_none())
            .cloned()
            .ok_or_else(|| RunError::Check(format!("cell {hash} has no records")))?;
        rows.push(CellRow {
            cell: hash,
            params: cell,
            summary,
            computed,
        });
    }
    let keys: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    let mut header = vec!["cell".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(SUMMARY_COLUMNS.iter().map(|s| s.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut f = vec![r.cell.clone()];
            f.extend(keys.iter().map(|k| match &r.params[k] {
                Value::String(s) => s.clone(),
                v => v.to_string(),
            }));
            f.extend(summary_fields(&r.summary));
            f
        })
        .collect();
    fs::create_dir_all(&base.output).map_err(io_err(&base.output))?;
    write_atomic(&base.output.join("sweep.csv"), &csv_bytes(&header, &body)?)?;
    Ok(rows)
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::result::Result<_, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    if dir.join(RECORDS_FILE).is_file() && dir.join(LIBRARY_FILE).is_file() {
        out.push(dir.to_path_buf());
    }
    for e in entries {
        if e.is_dir() {
            find_runs(&e, out)?;
        }
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// `report`: re-score every run directory below `dir` and write
/// `<dir>/report.csv` keyed by method and entity count.
pub fn report(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut runs = Vec::new();
    find_runs(dir, &mut runs)?;
    if runs.is_empty() {
        return Err(RunError::Check(format!("no runs with {RECORDS_FILE} under {}", dir.display())));
    }
    let mut rows = Vec::new();
    for run_dir in &runs {
        let library = PrototypeLibrary::load(&run_dir.join(LIBRARY_FILE))?;
        let prompts: Vec<PromptSpec> = library.prompts.values().map(|p| p.prompt.clone()).collect();
        let records = read_records(&run_dir.join(RECORDS_FILE))?;
        rows.extend(evaluate(&library, &prompts, &records)?);
    }
    let summary = summarize(&rows);
    write_atomic(&dir.join("report.csv"), &summary_csv(&summary)?)?;
    Ok(summary)
}

/// Settings for `verify`; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub schema: u32,
    pub mixture: Option<MixtureSpec>,
    pub schedule: ScheduleConfig,
    /// Signal levels for the decay fit.
    pub a_values: Vec<f64>,
    /// Signal levels for the sampled cumulant cross-check. Near `a = 0` the
    /// noised cumulant shrinks like `a^k` and drowns in sampling error.
    pub monte_carlo_a: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA,
            mixture: None,
            schedule: ScheduleConfig::of_kind(ScheduleKind::LinearFlow),
            a_values: vec![0.2, 0.1, 0.05, 0.025],
            monte_carlo_a: vec![0.9, 0.7, 0.5],
            samples: 1_000_000,
            seed: 0,
        }
    }
}

impl VerifyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = config::from_value(path, config::read_json(path)?)?;
        let bad = |k: &str, m: String| RunError::Config(ConfigError::invalid(path, k, m));
        if cfg.schema != SCHEMA {
            return Err(bad("schema", format!("expected {SCHEMA}, got {}", cfg.schema)));
        }
        if let Some(m) = &cfg.mixture {
            MixtureSpec::new(m.id.clone(), m.dim, m.components.clone())
                .map_err(|e| bad("mixture", e.to_string()))?;
        }
        cfg.schedule.build().map_err(|e| bad("schedule", e.to_string()))?;
        for (key, levels) in [("a_values", &cfg.a_values), ("monte_carlo_a", &cfg.monte_carlo_a)] {
            if levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
                return Err(bad(key, "signal levels must lie in (0, 1)".into()));
            }
        }
        Ok(cfg)
    }

    fn mixture(&self) -> MixtureSpec {
        self.mixture.clone().unwrap_or_else(MixtureSpec::asymmetric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyKind {
    Prop1,
    Cumulants,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridError {
    pub t: f64,
    pub a: f64,
    pub tv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop1Report {
    pub mixture: String,
    /// Absent for a Gaussian, whose error must vanish instead.
    pub expected_order: Option<usize>,
    pub fit: DecayFit,
    pub grid: Vec<GridError>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CumulantRow {
    pub t: f64,
    pub a: f64,
    pub k3: CumulantRatio,
    pub k4: CumulantRatio,
    pub k3_monte_carlo: Option<CumulantRatio>,
    pub k4_monte_carlo: Option<CumulantRatio>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CumulantReport {
    pub mixture: String,
    pub samples: usize,
    pub rows: Vec<CumulantRow>,
    pub pass: bool,
}

fn ratio_ok(r: Option<CumulantRatio>, tol: f64) -> bool {
    match r {
        None | Some(CumulantRatio::Undefined) => true,
        Some(CumulantRatio::Ratio(x)) => (x - 1.0).abs() <= tol,
    }
}

pub fn verify_prop1(cfg: &VerifyConfig) -> Result<Prop1Report> {
    let schedule = cfg.schedule.build().map_err(VerifyError::from)?;
    let mix = cfg.mixture();
    let fit = fit_decay_slope(&mix, &schedule, &cfg.a_values)?;
    let grid: Vec<GridError> = schedule
        .grid()
        .iter()
        .map(|&t| {
            Ok(GridError {
                t,
                a: schedule.a(t).map_err(VerifyError::from)?,
                tv: approx_error(&mix, &schedule, t)?,
            })
        })
        .collect::<Result<_>>()?;
    let expected_order = expected_decay_order(&mix);
    let pass = match (&fit, expected_order) {
        (DecayFit::Exact, None) => grid.iter().all(|g: &GridError| g.tv < TV_TOL),
        (DecayFit::Fit { slope, .. }, Some(n)) => (slope - n as f64).abs() <= SLOPE_WINDOW,
        _ => false,
    };
    Ok(Prop1Report {
        mixture: mix.id,
        expected_order,
        fit,
        grid,
        pass,
    })
}

/// Closed-form ratios at every grid time and at the sampled levels; Monte
/// Carlo ratios at the times matching `monte_carlo_a`.
pub fn verify_cumulants(cfg: &VerifyConfig) -> Result<CumulantReport> {
    let schedule = cfg.schedule.build().map_err(VerifyError::from)?;
    let mix = cfg.mixture();
    let mut times: Vec<f64> = schedule.grid().to_vec();
    let mc_times: Vec<f64> = cfg
        .monte_carlo_a
        .iter()
        .map(|&a| time_for_signal(&schedule, a).map(|(t, _)| t))
        .collect::<std::result::Result<_, _>>()?;
    times.extend(mc_times.iter().copied());
    times.sort_by(|a, b| b.total_cmp(a));
    times.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for t in times {
        let mc = mc_times.contains(&t);
        let mut sample = |k| -> Result<Option<CumulantRatio>> {
            Ok(if mc {
                Some(monte_carlo_cumulant_ratio(&mix, &schedule, t, k, cfg.samples, &mut rng)?)
            } else {
                None
            })
        };
        let (k3_monte_carlo, k4_monte_carlo) = (sample(3)?, sample(4)?);
        let k3 = cumulant_scaling_check(&mix, &schedule, t, 3)?;
        let k4 = cumulant_scaling_check(&mix, &schedule, t, 4)?;
        let pass = ratio_ok(Some(k3), ANALYTIC_RATIO_TOL)
            && ratio_ok(Some(k4), ANALYTIC_RATIO_TOL)
            && ratio_ok(k3_monte_carlo, MONTE_CARLO_RATIO_TOL)
            && ratio_ok(k4_monte_carlo, MONTE_CARLO_RATIO_TOL);
        rows.push(CumulantRow {
            t,
            a: schedule.a(t).map_err(VerifyError::from)?,
            k3,
            k4,
            k3_monte_carlo,
            k4_monte_carlo,
            pass,
        });
    }
    Ok(CumulantReport {
        mixture: mix.id,
        samples: cfg.samples,
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub ops: Vec<OpReport>,
    pub composition: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.ops
            .iter()
            .chain(&self.composition)
            .map(|r| r.worst)
            .fold(0.0, f64::max)
    }
}

/// Finite-difference check of latent -> backend -> preprocessing ->
/// criterion on random `[4, 8, 8]` latents, prompts and times.
pub fn composition_check<R: rand::Rng + ?Sized>(
    kind: ScheduleKind,
    instances: usize,
    h: f64,
    rng: &mut R,
) -> Result<OpReport> {
    let scene = SceneConfig {
        height: 8,
        width: 8,
        ..SceneConfig::default()
    };
    let prompts: Vec<PromptSpec> = (0..4)
        .map(|i| PromptSpec::new(format!("p{i}"), vec![i, (i + 3) % 8, (i + 5) % 8][..2 + i % 2].to_vec()))
        .collect();
    let (library, _) = build_scene_dataset(&scene, &prompts, false, rng)?;
    let backend = AnalyticBackend::new(library);
    let schedule = match kind {
        ScheduleKind::VpDiffusion => Schedule::vp_default(),
        ScheduleKind::LinearFlow => Schedule::flow_default(),
    };
    let grid = schedule.grid().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let p = &prompts[i % prompts.len()];
        let t = grid[rng.random_range(0..grid.len() - 1)];
        let x = standard_normal(&[4, 8, 8], rng);
        let crit = Criterion::for_prompt(&CriterionConfig::default(), p)
            .map_err(|e| RunError::Check(e.to_string()))?;
        let err = grad_check_with(
            |g, z| {
                let wrap = |op: &'static str| move |e: String| TensorError::Invalid { op, msg: e };
                let out = backend
                    .predict(g, z, Conditioning::Prompt(p), &schedule, t)
                    .map_err(|e| wrap("predict")(e.to_string()))?;
                let att = preprocess_attention(out.attention.expect("prompted call has attention"))?;
                crit.evaluate(&att).map_err(|e| wrap("criterion")(e.to_string()))
            },
            &x,
            h,
            SUITE_FLOOR,
        )?;
        worst = worst.max(err);
    }
    Ok(OpReport {
        op: match kind {
            ScheduleKind::VpDiffusion => "composition/vp",
            ScheduleKind::LinearFlow => "composition/flow",
        },
        instances,
        worst,
    })
}

pub fn gradcheck(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = op_suite(instances, h, &mut rng)?;
    let composition = [ScheduleKind::VpDiffusion, ScheduleKind::LinearFlow]
        .into_iter()
        .map(|k| composition_check(k, instances, h, &mut rng))
        .collect::<Result<_>>()?;
    Ok(GradcheckReport {
        h,
        ops,
        composition,
    })
}

/// `train-backend`: fit the learned backend on the world's training scenes
/// and write its weights.
pub fn train_backend(config: &ExperimentConfig, path: &Path) -> Result<(PathBuf, TrainReport)> {
    let b = &config.backend;
    let (l, s) = (&b.learned, &b.scene);
    if (l.channels, l.height, l.width, l.vocab) != (s.channels, s.height, s.width, s.vocab) {
        return Err(ConfigError::invalid(
            path,
            "backend.learned",
            "channels, height, width and vocab must match backend.scene",
        )
        .into());
    }
    let world = World::build(config, path)?;
    let model = LearnedBackend::init(b.learned.clone(), world.schedule.kind(), b.train.seed)?;
    let prompts: BTreeMap<String, PromptSpec> =
        world.prompts.iter().map(|p| (p.id.clone(), p.clone())).collect();
    let (model, report) = train_toy_backend(model, &world.scenes, &prompts, &world.schedule, &b.train)?;
    fs::create_dir_all(&config.output).map_err(io_err(&config.output))?;
    let weights = b
        .weights
        .clone()
        .unwrap_or_else(|| config.output.join("weights.json"));
    model.save(&weights)?;
    write_atomic(&config.output.join("train_report.json"), to_json(&report).as_bytes())?;
    Ok((weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_prompts_cycle_over_tuples() {
        let g = PromptGenerator {
            count: 30,
            entities: 2,
            box_size: None,
            seed: 0,
        };
        let p = generate_prompts(&g, 8);
        assert_eq!(p.len(), 30);
        assert_eq!(p[0].entities, vec![0, 1]);
        assert_eq!(p[27].entities, vec![6, 7]);
        assert_eq!(p[28].entities, vec![0, 1]);
        assert_ne!(p[0].id, p[28].id);
        let three = PromptGenerator { entities: 3, count: 56, ..g };
        let p = generate_prompts(&three, 8);
        let mut uniq: Vec<_> = p.iter().map(|p| p.entities.clone()).collect();
        uniq.dedup();
        assert_eq!(uniq.len(), 56);
        assert!(generate_prompts(&PromptGenerator { entities: 9, count: 1, ..three }, 8).is_empty());
    }

    #[test]
    fn summary_pools_and_splits_by_entity_count() {
        let row = |id: &str, e: usize, tiam: f64, images: usize| PromptRow {
            prompt_id: id.into(),
            method: Method::Saga,
            entities: e,
            images,
            tiam,
            box_alignment: None,
            diversity: Some(1.0),
            diversity_coverage: Some(1.0),
            mu_std: None,
            saturation_std: 0.0,
            saturation_beyond: 0.0,
        };
        let s = summarize(&[row("a", 2, 1.0, 2), row("b", 2, 0.0, 2), row("c", 3, 0.5, 4)]);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].entities, s[0].tiam), (Some(2), 0.5));
        assert_eq!((s[1].entities, s[1].tiam), (Some(3), 0.5));
        assert_eq!((s[2].entities, s[2].images, s[2].tiam), (None, 8, 0.5));
    }

    #[test]
    fn exit_codes() {
        let c = RunError::Config(ConfigError::invalid(Path::new("x"), "k", "m"));
        assert_eq!(c.exit_code(), 1);
        assert_eq!(RunError::Check("boom".into()).exit_code(), 2);
        assert!(c.to_string().contains("`k`"));
    }
}
