use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use histaid_core::data::{
    missing_keys, read_images, read_manifest, read_reports, report_label_columns, synth_cohort, write_images,
    write_manifest, write_reports, BuildStats, CohortSplit, EmbeddingStore, FilterStats, InputOptions, MergeStats,
    Split, SyntheticSpec,
};
use histaid_core::experiment::{
    ablate, build_cohort, evaluate_split, run_seeds, AblationAxis, AblationGrid, AblationSpec, Cohort, CohortOptions,
    RunResult,
};
use histaid_core::metrics::{label_table, seed_aggregate, subgroup_table, MetricReport, SeedAggregate};
use histaid_core::train::{write_atomic, Checkpoint};
use histaid_core::{Error, HistAid, Result, SectionMode};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::output::{cell, prepare_dir, read_json, write_json, write_jsonl, write_text};

pub const COHORT_FILE: &str = "cohort.json";
pub const MANIFEST_FILE: &str = "samples.jsonl";
pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sources {
    pub images: PathBuf,
    pub reports: PathBuf,
    pub delimiter: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub merge: MergeStats,
    pub build: BuildStats,
    pub filter: FilterStats,
    pub subjects: SplitCounts,
    pub samples: SplitCounts,
}

/// Everything about a built cohort except the samples themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortFile {
    pub labels: Vec<String>,
    pub options: CohortOptions,
    /// Relative paths resolve against the directory holding this file.
    pub sources: Sources,
    pub split: CohortSplit,
    pub counts: StageCounts,
}

fn delimiter_byte(d: &str) -> Result<u8> {
    match d.as_bytes() {
        [b] => Ok(*b),
        _ if d == "\\t" => Ok(b'\t'),
        _ => Err(Error::Config(format!("delimiter must be a single byte, got `{d}`"))),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
}

/// Read both tables and build a cohort from them.
fn cohort_from_tables(sources: &Sources, base: &Path, opts: &CohortOptions) -> Result<Cohort> {
    let delim = delimiter_byte(&sources.delimiter)?;
    let images_path = resolve(base, &sources.images);
    let reports_path = resolve(base, &sources.reports);
    let labels = report_label_columns(open(&reports_path)?, delim)?;
    if labels.is_empty() {
        return Err(Error::Config(format!("{} has no label columns", reports_path.display())));
    }
    let images = read_images(open(&images_path)?, delim)?;
    let reports = read_reports(open(&reports_path)?, delim, &labels)?;
    build_cohort(&images, &reports, &labels, opts)
}

fn split_counts(f: impl Fn(Split) -> usize) -> SplitCounts {
    SplitCounts {
        train: f(Split::Train),
        val: f(Split::Val),
        test: f(Split::Test),
    }
}

/// Build a cohort from tables and write the manifest and cohort file.
fn build_into(
    sources: &Sources,
    base: &Path,
    store: Option<&EmbeddingStore>,
    opts: &CohortOptions,
    out: &Path,
) -> Result<CohortFile> {
    let cohort = cohort_from_tables(sources, base, opts)?;
    if let Some(store) = store {
        let missing = missing_keys(&cohort.samples, store);
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(5).map(String::as_str).collect();
            return Err(Error::Contract(format!(
                "{} embedding keys missing from the store, e.g. {}",
                missing.len(),
                shown.join(", ")
            )));
        }
    }
    let mut manifest = Vec::new();
    write_manifest(&mut manifest, &cohort.samples)?;
    write_atomic(&out.join(MANIFEST_FILE), &manifest)?;
    let file = CohortFile {
        labels: cohort.labels.clone(),
        options: opts.clone(),
        sources: sources.clone(),
        split: cohort.split.clone(),
        counts: StageCounts {
            merge: cohort.merge.clone(),
            build: cohort.build.clone(),
            filter: cohort.filter.clone(),
            subjects: SplitCounts {
                train: cohort.split.train.len(),
                val: cohort.split.val.len(),
                test: cohort.split.test.len(),
            },
            samples: split_counts(|s| cohort.count(s)),
        },
    };
    write_json(&out.join(COHORT_FILE), &file)?;
    Ok(file)
}

fn print_counts(c: &StageCounts) {
    println!(
        "merge: {} image rows, {} report rows -> {} study records ({} unmatched images, {} unmatched reports)",
        c.merge.image_rows, c.merge.report_rows, c.merge.records, c.merge.unmatched_images, c.merge.unmatched_reports
    );
    println!(
        "build: {} subjects, {} studies -> {} samples",
        c.build.subjects, c.build.studies, c.build.samples
    );
    println!(
        "filter: {} -> {} samples (no impression {}, duplicate anchors {}, duplicate history {}, history without impression {}, history missing section {})",
        c.filter.samples_in,
        c.filter.samples_out,
        c.filter.anchors_without_impression,
        c.filter.duplicate_anchors,
        c.filter.duplicate_history,
        c.filter.history_without_impression,
        c.filter.history_missing_section
    );
    println!(
        "split: subjects {}/{}/{}, samples {}/{}/{} (train/val/test)",
        c.subjects.train, c.subjects.val, c.subjects.test, c.samples.train, c.samples.val, c.samples.test
    );
}

/// Load a built cohort directory.
pub fn load_cohort(dir: &Path) -> Result<(Cohort, CohortFile)> {
    let file: CohortFile = read_json(&dir.join(COHORT_FILE))?;
    let samples = read_manifest(open(&dir.join(MANIFEST_FILE))?)?;
    let cohort = Cohort {
        labels: file.labels.clone(),
        samples,
        split: file.split.clone(),
        merge: file.counts.merge.clone(),
        build: file.counts.build.clone(),
        filter: file.counts.filter.clone(),
    };
    Ok((cohort, file))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator settings (TOML); defaults apply to anything left out.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Generator seed; the same seed gives byte-identical output.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec: SyntheticSpec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    prepare_dir(&args.out, args.force)?;
    let cohort = synth_cohort(&spec, args.seed)?;
    let mut buf = Vec::new();
    write_images(&mut buf, &cohort.images)?;
    write_atomic(&args.out.join("images.csv"), &buf)?;
    let mut buf = Vec::new();
    write_reports(&mut buf, &cohort.reports, &spec.labels)?;
    write_atomic(&args.out.join("reports.csv"), &buf)?;
    write_atomic(&args.out.join("store.tmeb"), &cohort.store.to_bytes())?;
    write_json(
        &args.out.join("synth.json"),
        &serde_json::json!({ "seed": args.seed, "spec": spec }),
    )?;
    let sources = Sources {
        images: "images.csv".into(),
        reports: "reports.csv".into(),
        delimiter: ",".into(),
    };
    let file = build_into(&sources, &args.out, Some(&cohort.store), &CohortOptions::default(), &args.out)?;
    println!(
        "wrote {} images, {} reports, {} embeddings to {}",
        cohort.images.len(),
        cohort.reports.len(),
        cohort.store.len(),
        args.out.display()
    );
    print_counts(&file.counts);
    Ok(())
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Image table: one row per scan with its study, subject, chart time and embedding key.
    #[arg(long)]
    pub images: PathBuf,
    /// Report table: one row per study with sections and label columns.
    #[arg(long)]
    pub reports: PathBuf,
    /// Check that every needed embedding is present.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, default_value = ",")]
    pub delimiter: String,
    /// impression, finding or both.
    #[arg(long, default_value = "impression")]
    pub section_mode: SectionMode,
    /// Drop samples with fewer earlier reports than this.
    #[arg(long, default_value_t = 0)]
    pub min_history: usize,
    /// Train, val and test fractions of subjects.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::Config(format!("cannot open {}: {e}", p.display())))
}

pub fn build(args: &BuildArgs) -> Result<()> {
    let sources = Sources {
        images: absolute(&args.images)?,
        reports: absolute(&args.reports)?,
        delimiter: args.delimiter.clone(),
    };
    delimiter_byte(&sources.delimiter)?;
    let [train, val, test] = args.split[..] else {
        return Err(Error::Config(format!("--split needs three fractions, got {}", args.split.len())));
    };
    let opts = CohortOptions {
        section_mode: args.section_mode,
        min_history: args.min_history,
        split_fractions: (train, val, test),
        split_seed: args.split_seed,
    };
    let store = args.store.as_deref().map(EmbeddingStore::load).transpose()?;
    // validate everything before touching the output directory
    cohort_from_tables(&sources, Path::new("."), &opts)?;
    prepare_dir(&args.out, args.force)?;
    let file = build_into(&sources, Path::new("."), store.as_ref(), &opts, &args.out)?;
    print_counts(&file.counts);
    Ok(())
}

/// Flags that override config file values.
#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct Overrides {
    /// Comma-separated seeds; replaces `seeds` from the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Seeds trained at once; replaces `jobs` from the config.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Replaces `train.epochs` from the config.
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(j) = self.jobs {
            c.jobs = j;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
}

/// Written next to the per-seed artifacts so evaluation can find the cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub build: PathBuf,
    pub store: PathBuf,
    pub seeds: Vec<SeedSummary>,
}

/// Catch shape mismatches before any output is written.
fn check_data(config: &ExperimentConfig, cohort: &Cohort, store: &EmbeddingStore) -> Result<()> {
    if config.model.store_dim != store.dim() {
        return Err(Error::Config(format!(
            "model.store_dim is {} but the store holds {}-wide embeddings",
            config.model.store_dim,
            store.dim()
        )));
    }
    if config.model.num_labels != cohort.labels.len() {
        return Err(Error::Config(format!(
            "model.num_labels is {} but the cohort has {} labels",
            config.model.num_labels,
            cohort.labels.len()
        )));
    }
    Ok(())
}

fn load_experiment(path: &Path, overrides: &Overrides) -> Result<(ExperimentConfig, String)> {
    let loaded = ExperimentConfig::load(path)?;
    let mut config = loaded.config;
    overrides.apply(&mut config);
    config.validate()?;
    Ok((config, loaded.text))
}

/// Log header: the verbatim config, the flag overrides and the seed.
fn log_lines(config_text: &str, overrides: &Overrides, run: &RunResult) -> Result<Vec<serde_json::Value>> {
    let mut lines = vec![serde_json::json!({
        "config": config_text,
        "overrides": overrides,
        "seed": run.seed,
    })];
    for e in &run.log {
        lines.push(serde_json::to_value(e)?);
    }
    Ok(lines)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (config, text) = load_experiment(&args.config, &args.overrides)?;
    let (cohort, _) = load_cohort(&config.data.build)?;
    let store = EmbeddingStore::load(&config.data.store)?;
    check_data(&config, &cohort, &store)?;
    prepare_dir(&args.out, args.force)?;
    write_text(&args.out.join("config.toml"), &text)?;
    let runs = run_seeds(&cohort, &store, &config.run_spec(), &config.seeds, config.jobs)?;
    let mut seeds = Vec::new();
    for run in &runs {
        let dir = args.out.join(format!("seed-{}", run.seed));
        write_jsonl(&dir.join("log.jsonl"), &log_lines(&text, &args.overrides, run)?)?;
        run.checkpoint.write(&dir.join("best.ckpt"))?;
        println!(
            "seed {}: best epoch {} val AUROC {}",
            run.seed,
            run.checkpoint.meta.epoch,
            cell(run.checkpoint.meta.val_auroc)
        );
        seeds.push(SeedSummary {
            seed: run.seed,
            best_epoch: run.checkpoint.meta.epoch,
            best_val_auroc: run.checkpoint.meta.val_auroc,
        });
    }
    write_json(
        &args.out.join(RUN_FILE),
        &RunFile {
            build: absolute(&config.data.build)?,
            store: absolute(&config.data.store)?,
            seeds,
        },
    )
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `histaid train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Another training run to test against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Defaults to `<run>/eval-<split>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Per-seed reports of a training run on one split.
pub fn evaluate_run(dir: &Path, split: Split) -> Result<(Vec<u64>, Vec<MetricReport>)> {
    let run: RunFile = read_json(&dir.join(RUN_FILE))?;
    let (cohort, _) = load_cohort(&run.build)?;
    let store = EmbeddingStore::load(&run.store)?;
    let mut seeds = Vec::new();
    let mut reports = Vec::new();
    for s in &run.seeds {
        let ck = Checkpoint::read(&dir.join(format!("seed-{}", s.seed)).join("best.ckpt"))?;
        if ck.meta.labels != cohort.labels {
            return Err(Error::Contract(format!(
                "checkpoint labels {:?} differ from cohort labels {:?}",
                ck.meta.labels, cohort.labels
            )));
        }
        let input: InputOptions = serde_json::from_value(ck.meta.extra["input"].clone())?;
        let mut model = HistAid::new(ck.meta.model.clone(), 0)?;
        ck.restore(&mut model.params)?;
        reports.push(evaluate_split(&model, &cohort, &store, split, &input)?);
        seeds.push(s.seed);
    }
    Ok((seeds, reports))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (seeds, reports) = evaluate_run(&args.run, args.split)?;
    let baseline = args
        .baseline
        .as_deref()
        .map(|b| evaluate_run(b, args.split).map(|(_, r)| r))
        .transpose()?;
    let agg = seed_aggregate(&reports, baseline.as_deref())?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join(format!("eval-{}", args.split.name())));
    prepare_dir(&out, true)?;
    for (seed, r) in seeds.iter().zip(&reports) {
        write_json(&out.join(format!("seed-{seed}.json")), r)?;
    }
    let name = run_name(&args.run);
    let mut models: Vec<(String, SeedAggregate)> = vec![(name.clone(), agg.clone())];
    if let (Some(b), Some(base)) = (&args.baseline, &baseline) {
        models.push((run_name(b), seed_aggregate(base, None)?));
    }
    write_json(
        &out.join("aggregate.json"),
        &serde_json::json!({ "run": name, "split": args.split, "baseline": args.baseline.as_deref().map(run_name), "aggregate": agg }),
    )?;
    let refs: Vec<(&str, &SeedAggregate)> = models.iter().map(|(n, a)| (n.as_str(), a)).collect();
    write_text(&out.join("labels.csv"), &label_table(&refs, b',')?)?;
    write_text(&out.join("subgroups.csv"), &subgroup_table(&refs, b',')?)?;
    let m = agg.macro_auroc;
    println!(
        "{name} {}: macro AUROC {} ± {}, macro AUPRC {} over {} seeds",
        args.split.name(),
        cell(m.map(|m| m.mean)),
        cell(m.map(|m| m.std)),
        cell(agg.macro_auprc.map(|m| m.mean)),
        agg.n_seeds
    );
    if let Some(c) = &agg.vs_baseline {
        println!(
            "vs baseline: p(AUROC greater) {}, p(AUPRC greater) {}",
            cell(c.macro_auroc),
            cell(c.macro_auprc)
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Experiment config (TOML) giving everything the axis does not change.
    #[arg(long)]
    pub config: PathBuf,
    /// num_reports, time_window_days, positional, pooling, fusion, sections or modality_combo.
    #[arg(long)]
    pub axis: AblationAxis,
    /// Comma-separated values; deltas and p-values are against the first. Numeric axes take `inf` for no limit.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn grid_csv(grid: &AblationGrid) -> String {
    let mut s = String::from("value,seed,auroc,auprc,best_epoch,degenerate\n");
    for r in &grid.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value,
            r.seed,
            cell(r.macro_auroc),
            cell(r.macro_auprc),
            r.best_epoch,
            r.degenerate
        ));
    }
    s
}

fn summary_csv(grid: &AblationGrid) -> String {
    let mut s = String::from("value,auroc_mean,auroc_std,auprc_mean,auprc_std,delta_auroc,p_greater,degenerate\n");
    for r in &grid.summary {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.value,
            cell(r.auroc.map(|m| m.mean)),
            cell(r.auroc.map(|m| m.std)),
            cell(r.auprc.map(|m| m.mean)),
            cell(r.auprc.map(|m| m.std)),
            cell(r.delta_auroc),
            cell(r.p_greater),
            r.degenerate
        ));
    }
    s
}

pub fn ablate_cmd(args: &AblateArgs) -> Result<()> {
    let (config, text) = load_experiment(&args.config, &args.overrides)?;
    let ablation = AblationSpec {
        axis: args.axis,
        values: args.values.clone(),
    };
    ablation.validate()?;
    let (cohort, file) = load_cohort(&config.data.build)?;
    let store = EmbeddingStore::load(&config.data.store)?;
    check_data(&config, &cohort, &store)?;
    prepare_dir(&args.out, args.force)?;
    write_text(&args.out.join("config.toml"), &text)?;
    let build_dir = config.data.build.clone();
    let source = |opts: &CohortOptions| -> Result<Cohort> {
        if *opts == file.options {
            Ok(cohort.clone())
        } else {
            cohort_from_tables(&file.sources, &build_dir, opts)
        }
    };
    let mut on_run = |value: &str, run: &RunResult| -> Result<()> {
        let dir = args.out.join("runs").join(value.replace(['/', '\\'], "_"));
        write_jsonl(
            &dir.join(format!("seed-{}.log.jsonl", run.seed)),
            &log_lines(&text, &args.overrides, run)?,
        )
    };
    let grid = ablate(
        &source,
        &store,
        &config.run_spec(),
        &file.options,
        &ablation,
        &config.seeds,
        config.jobs,
        &mut on_run,
    )?;
    write_json(&args.out.join("grid.json"), &grid)?;
    write_text(&args.out.join("grid.csv"), &grid_csv(&grid))?;
    write_text(&args.out.join("summary.csv"), &summary_csv(&grid))?;
    for r in &grid.summary {
        println!(
            "{}={}: AUROC {} ± {} (delta {}, p {}){}",
            args.axis.name(),
            r.value,
            cell(r.auroc.map(|m| m.mean)),
            cell(r.auroc.map(|m| m.std)),
            cell(r.delta_auroc),
            cell(r.p_greater),
            if r.degenerate { " [no history]" } else { "" }
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Training run directories, optionally named as NAME=DIR. The first
    /// one is the reference for the comparison table.
    #[arg(long = "run")]
    pub runs: Vec<String>,
    /// Ablation output directories.
    #[arg(long = "ablation")]
    pub ablations: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
struct SeriesPoint {
    value: String,
    x: Option<f64>,
    mean: Option<f64>,
    std: Option<f64>,
    degenerate: bool,
}

/// Numeric order where values parse (with `inf`/`all`/`none` last), then
/// the rest by text.
fn series_key(v: &str) -> (u8, f64, String) {
    match v {
        "inf" | "all" | "none" => (1, f64::INFINITY, v.to_string()),
        _ => match v.parse::<f64>() {
            Ok(x) => (0, x, String::new()),
            Err(_) => (2, 0.0, v.to_string()),
        },
    }
}

pub fn report(args: &ReportArgs) -> Result<()> {
    if args.runs.is_empty() && args.ablations.is_empty() {
        return Err(Error::Config("nothing to report: pass --run and/or --ablation".into()));
    }
    prepare_dir(&args.out, true)?;
    let mut missing = Vec::new();
    let mut models: Vec<(String, SeedAggregate)> = Vec::new();
    for spec in &args.runs {
        let (name, dir) = match spec.split_once('=') {
            Some((n, d)) => (n.to_string(), PathBuf::from(d)),
            None => (run_name(Path::new(spec)), PathBuf::from(spec)),
        };
        if !dir.join(RUN_FILE).exists() {
            missing.push(dir.display().to_string());
            continue;
        }
        let (_, reports) = evaluate_run(&dir, args.split)?;
        models.push((name, seed_aggregate(&reports, None)?));
    }
    if !models.is_empty() {
        let refs: Vec<(&str, &SeedAggregate)> = models.iter().map(|(n, a)| (n.as_str(), a)).collect();
        write_text(&args.out.join("pathologies.csv"), &label_table(&refs, b',')?)?;
        write_text(&args.out.join("subgroups.csv"), &subgroup_table(&refs, b',')?)?;
        let (ref_name, reference) = &models[0];
        let mut s = String::from("label,model,auroc,reference,reference_auroc,delta\n");
        for (name, agg) in &models {
            let rows = agg
                .per_label
                .iter()
                .zip(&reference.per_label)
                .map(|(a, b)| (a.label.as_str(), a.auroc, b.auroc))
                .chain(std::iter::once(("macro", agg.macro_auroc, reference.macro_auroc)));
            for (label, a, b) in rows {
                let (a, b) = (a.map(|m| m.mean), b.map(|m| m.mean));
                s.push_str(&format!(
                    "{label},{name},{},{ref_name},{},{}\n",
                    cell(a),
                    cell(b),
                    cell(a.zip(b).map(|(a, b)| a - b))
                ));
            }
        }
        write_text(&args.out.join("comparison.csv"), &s)?;
    }
    let mut series = BTreeMap::new();
    for dir in &args.ablations {
        let path = dir.join("grid.json");
        if !path.exists() {
            missing.push(dir.display().to_string());
            continue;
        }
        let grid: AblationGrid = read_json(&path)?;
        let mut points: Vec<SeriesPoint> = grid
            .summary
            .iter()
            .map(|r| SeriesPoint {
                value: r.value.clone(),
                x: r.value.parse().ok(),
                mean: r.auroc.map(|m| m.mean),
                std: r.auroc.map(|m| m.std),
                degenerate: r.degenerate,
            })
            .collect();
        points.sort_by(|a, b| {
            let (ka, kb) = (series_key(&a.value), series_key(&b.value));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2))
        });
        series.insert(run_name(dir), serde_json::json!({ "axis": grid.axis, "points": points }));
    }
    write_json(&args.out.join("ablations.json"), &series)?;
    let partial = !missing.is_empty();
    write_json(
        &args.out.join("report.json"),
        &serde_json::json!({
            "runs": models.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            "ablations": series.keys().collect::<Vec<_>>(),
            "missing": missing,
            "partial": partial,
        }),
    )?;
    for m in &missing {
        eprintln!("warning: missing run {m}; report is partial");
    }
    println!("report written to {}", args.out.display());
    Ok(())
}
