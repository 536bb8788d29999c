use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use broadsound::audio::{read_wav, standardize_audio, write_wav};
use broadsound::dataset::{class_distribution, make_split, DatasetManifest, Split};
use broadsound::evaluation::{
    collapsed_vs_dedicated, evaluate_with_ids, export_misclassifications, write_queue, EvaluationReport, ReviewSample,
};
use broadsound::knn::{grid_search, grid_search_cv, GridSpace, KnnModel, Metric, Weighting};
use broadsound::repr::{ReprKind, FSSIMREP_PCA_DIMS};
use broadsound::{Level, Taxonomy};
use broadsound_review::{Service, ServiceConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data;
use crate::failure::{Context as _, Failure};
use crate::Globals;

pub struct Context {
    command: &'static str,
    globals: Globals,
    taxonomy: Taxonomy,
}

impl Context {
    pub fn new(command: &'static str, globals: Globals) -> Result<Context, Failure> {
        let mut ctx = Context {
            command,
            globals,
            taxonomy: Taxonomy::broad_sound(),
        };
        if let Some(path) = ctx.globals.taxonomy.clone() {
            let path = ctx.input(&path)?;
            ctx.taxonomy = Taxonomy::load(&path).at(&path)?;
        }
        Ok(ctx)
    }

    /// Resolves an input path against the data root and checks it exists.
    fn input(&self, path: &Path) -> Result<PathBuf, Failure> {
        let resolved = match &self.globals.data_root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        };
        if !resolved.exists() {
            return Err(Failure::Data(format!("{} does not exist", resolved.display())));
        }
        Ok(resolved)
    }

    fn output_dir(&self, path: &Path) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(path).at(path)?;
        Ok(path.to_path_buf())
    }

    fn manifest(&self, path: &Path, split: Option<&Path>) -> Result<DatasetManifest, Failure> {
        let path = self.input(path)?;
        let mut manifest = DatasetManifest::read_jsonl(&path).at(&path)?;
        manifest.normalize_labels(&self.taxonomy).at(&path)?;
        manifest.validate(&self.taxonomy).at(&path)?;
        if let Some(split) = split {
            let split = self.input(split)?;
            apply_split_file(&mut manifest, &split)?;
        }
        Ok(manifest)
    }

    /// Writes `run.json`: the command, its effective options, the seed and
    /// the tool version. The output directory itself is not recorded so
    /// that runs into different directories compare equal.
    fn write_run<A: Serialize>(&self, out: &Path, args: &A, outputs: &[&str]) -> Result<(), Failure> {
        let mut options = serde_json::to_value(args)?;
        if let Value::Object(map) = &mut options {
            map.remove("out");
        }
        let mut meta = json!({
            "tool": "broadsound",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.globals.seed,
            "taxonomy_version": self.taxonomy.version(),
            "options": options,
            "outputs": outputs,
        });
        if !self.globals.no_timestamps {
            meta["created_at"] = json!(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        }
        write_json(&out.join("run.json"), &meta)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).at(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path).at(path)?).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Failure::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SplitLine {
    sound_id: String,
    split: Split,
}

fn apply_split_file(manifest: &mut DatasetManifest, path: &Path) -> Result<(), Failure> {
    let lines: Vec<SplitLine> = read_lines(path)?;
    let assigned: std::collections::HashMap<&str, Split> =
        lines.iter().map(|l| (l.sound_id.as_str(), l.split)).collect();
    for r in &mut manifest.records {
        r.split = *assigned.get(r.sound_id.as_str()).ok_or_else(|| {
            Failure::Data(format!("{}: no split for sound {}", path.display(), r.sound_id))
        })?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    sound_id: String,
    true_code: String,
    predicted_code: String,
}

fn write_evaluation(out: &Path, report: &EvaluationReport) -> Result<(), Failure> {
    write_json(&out.join("report.json"), report)?;
    let csv = out.join("confusion.csv");
    std::fs::write(&csv, report.confusion.to_csv()).at(&csv)
}

fn summary(report: &EvaluationReport) -> String {
    format!(
        "{} level: accuracy {:.4}, macro F1 {:.4}, weighted F1 {:.4} over {} sounds",
        report.level, report.accuracy, report.macro_f1, report.weighted_f1, report.total
    )
}

// ---- taxonomy ----

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonomyFormat {
    Toml,
    Json,
}

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct TaxonomyArgs {
    #[arg(long, value_enum, default_value = "toml")]
    format: TaxonomyFormat,
}

pub fn taxonomy(ctx: &Context, args: TaxonomyArgs) -> Result<(), Failure> {
    match args.format {
        TaxonomyFormat::Toml => print!("{}", ctx.taxonomy.to_toml_string()),
        TaxonomyFormat::Json => {
            let doc = json!({ "version": ctx.taxonomy.version(), "nodes": ctx.taxonomy.nodes() });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
    }
    Ok(())
}

// ---- standardize ----

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct StandardizeArgs {
    /// A WAV file or a directory of them.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn standardize(ctx: &Context, args: StandardizeArgs) -> Result<(), Failure> {
    let input = ctx.input(&args.input)?;
    let out = ctx.output_dir(&args.out)?;
    let mut files: Vec<PathBuf> = if input.is_dir() {
        std::fs::read_dir(&input)
            .at(&input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect()
    } else {
        vec![input.clone()]
    };
    files.sort();
    let mut rows = Vec::with_capacity(files.len());
    for path in &files {
        let pcm = read_wav(path).at(path)?;
        let std = standardize_audio(&pcm).at(path)?;
        let name = path.file_name().expect("file path").to_string_lossy().into_owned();
        write_wav(out.join(&name), &std).at(&out.join(&name))?;
        rows.push(json!({
            "file": name,
            "input_rate": pcm.sample_rate,
            "input_channels": pcm.channels,
            "input_duration_s": pcm.duration_s(),
            "duration_s": std.duration_s(),
        }));
    }
    write_json(&out.join("standardize.json"), &rows)?;
    ctx.write_run(&out, &args, &["standardize.json"])?;
    println!("standardized {} files into {}", files.len(), out.display());
    Ok(())
}

// ---- split ----

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluation sounds drawn from every second-level class.
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn split(ctx: &Context, args: SplitArgs) -> Result<(), Failure> {
    let manifest = ctx.manifest(&args.manifest, None)?;
    let out = ctx.output_dir(&args.out)?;
    let tax = &ctx.taxonomy;
    let split = make_split(&manifest, tax, args.per_class, ctx.globals.seed)?;

    write_lines(
        &out.join("split.jsonl"),
        split.records.iter().map(|r| SplitLine {
            sound_id: r.sound_id.clone(),
            split: r.split,
        }),
    )?;
    let eval_part = DatasetManifest::new(split.in_split(Split::Eval).cloned().collect(), tax.version());
    let train_part = DatasetManifest::new(split.in_split(Split::Train).cloned().collect(), tax.version());
    let doc = json!({
        "per_class": args.per_class,
        "seed": ctx.globals.seed,
        "total": split.len(),
        "train": train_part.len(),
        "eval": eval_part.len(),
        "counts": {
            "all": {
                "top": class_distribution(&split, tax, Level::Top)?,
                "second": class_distribution(&split, tax, Level::Second)?,
            },
            "train": { "second": class_distribution(&train_part, tax, Level::Second)? },
            "eval": { "second": class_distribution(&eval_part, tax, Level::Second)? },
        },
    });
    write_json(&out.join("split.json"), &doc)?;
    ctx.write_run(&out, &args, &["split.jsonl", "split.json"])?;
    println!(
        "{} sounds: {} train, {} eval",
        split.len(),
        train_part.len(),
        eval_part.len()
    );
    Ok(())
}

// ---- fit-repr ----

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct FitReprArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Split assignment written by `split`; the manifest's own split fields otherwise.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    repr: ReprKind,
    /// Manifest feature set to read; defaults to the representation name.
    #[arg(long)]
    feature_set: Option<String>,
    #[arg(long, default_value_t = FSSIMREP_PCA_DIMS)]
    pca_dims: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn fit_repr(ctx: &Context, mut args: FitReprArgs) -> Result<(), Failure> {
    let feature_set = args.feature_set.get_or_insert_with(|| args.repr.as_str().to_string()).clone();
    let manifest = ctx.manifest(&args.manifest, args.split.as_deref())?;
    let out = ctx.output_dir(&args.out)?;
    let (pipeline, train, eval) = data::represent(&manifest, args.repr, &feature_set, args.pca_dims)?;
    write_json(&out.join("pipeline.json"), &pipeline)?;
    data::write_set(&out, "train", &train)?;
    data::write_set(&out, "eval", &eval)?;
    ctx.write_run(
        &out,
        &args,
        &["pipeline.json", "train.fvec", "train.jsonl", "eval.fvec", "eval.jsonl"],
    )?;
    println!(
        "{}: {} train and {} eval vectors of {} dims",
        args.repr,
        train.len(),
        eval.len(),
        train.dims()
    );
    Ok(())
}

// ---- grid ----

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct GridArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Split assignment written by `split`; the manifest's own split fields otherwise.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    repr: ReprKind,
    /// Manifest feature set to read; defaults to the representation name.
    #[arg(long)]
    feature_set: Option<String>,
    #[arg(long, default_value_t = FSSIMREP_PCA_DIMS)]
    pca_dims: usize,
    /// Label level to train and evaluate at.
    #[arg(long, default_value = "second")]
    level: Level,
    /// Neighbour counts, comma separated [default: 1,3,...,49].
    #[arg(long = "k", value_delimiter = ',')]
    ks: Vec<usize>,
    /// Distance metrics [default: all].
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<Metric>,
    /// Vote weightings [default: all].
    #[arg(long, value_delimiter = ',')]
    weightings: Vec<Weighting>,
    /// Select on stratified cross-validation of the training split instead
    /// of the evaluation split.
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

pub fn grid(ctx: &Context, mut args: GridArgs) -> Result<(), Failure> {
    let defaults = GridSpace::default();
    if args.ks.is_empty() {
        args.ks = defaults.ks;
    }
    if args.metrics.is_empty() {
        args.metrics = defaults.metrics;
    }
    if args.weightings.is_empty() {
        args.weightings = defaults.weightings;
    }
    let feature_set = args.feature_set.get_or_insert_with(|| args.repr.as_str().to_string()).clone();
    let space = GridSpace {
        ks: args.ks.clone(),
        metrics: args.metrics.clone(),
        weightings: args.weightings.clone(),
    };
    let tax = &ctx.taxonomy;
    let manifest = ctx.manifest(&args.manifest, args.split.as_deref())?;
    let out = ctx.output_dir(&args.out)?;
    let (pipeline, train_second, eval_second) = data::represent(&manifest, args.repr, &feature_set, args.pca_dims)?;
    let (train, eval) = match args.level {
        Level::Second => (train_second, eval_second.clone()),
        Level::Top => (train_second.collapse(tax)?, eval_second.collapse(tax)?),
    };

    log::info!("searching {} configurations", space.len());
    let report = match args.cv_folds {
        Some(folds) => grid_search_cv(&train, &space, folds, ctx.globals.seed)?,
        None => grid_search(&train, &eval, &space)?,
    };
    let model = KnnModel::new(train, report.best, args.level)?;
    let preds = model.predict_set(&eval)?;
    let evaluation = evaluate_with_ids(eval.ids(), &preds, eval.labels(), tax, args.level)?;

    write_json(&out.join("grid.json"), &report)?;
    write_json(&out.join("pipeline.json"), &pipeline)?;
    let model_path = out.join("model.knn");
    model.save(&model_path).at(&model_path)?;
    write_lines(
        &out.join("predictions.jsonl"),
        eval.ids().iter().zip(eval.labels()).zip(&preds).map(|((id, t), p)| PredictionLine {
            sound_id: id.clone(),
            true_code: t.clone(),
            predicted_code: p.clone(),
        }),
    )?;
    write_evaluation(&out, &evaluation)?;
    data::write_set(&out, "eval_set", &eval_second)?;
    ctx.write_run(
        &out,
        &args,
        &[
            "grid.json",
            "pipeline.json",
            "model.knn",
            "predictions.jsonl",
            "report.json",
            "confusion.csv",
            "eval_set.fvec",
            "eval_set.jsonl",
        ],
    )?;
    let best = &report.rows[0];
    println!(
        "best k={} metric={} weighting={} ({}): accuracy {:.4}, macro F1 {:.4}; top-100 spread {:.4}",
        best.config.k, best.config.metric, best.config.weighting, report.mode, best.accuracy, best.macro_f1, report.top100_spread
    );
    println!("{}", summary(&evaluation));
    Ok(())
}

// ---- compare ----

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct CompareArgs {
    /// Output directory of a second-level `grid` run.
    #[arg(long)]
    second: PathBuf,
    /// Output directory of a top-level `grid` run on the same split.
    #[arg(long)]
    top: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn compare(ctx: &Context, args: CompareArgs) -> Result<(), Failure> {
    let second_dir = ctx.input(&args.second)?;
    let top_dir = ctx.input(&args.top)?;
    let load = |dir: &Path| {
        let path = dir.join("model.knn");
        KnnModel::load(&path).at(&path)
    };
    let second = load(&second_dir)?;
    let top = load(&top_dir)?;
    let eval = data::read_set(&second_dir, "eval_set")?;
    let out = ctx.output_dir(&args.out)?;
    let cmp = collapsed_vs_dedicated(&second, &top, &eval, &ctx.taxonomy).map_err(|e| match e {
        broadsound::Error::SplitMismatch => Failure::Data(format!(
            "{} and {} were trained on different splits",
            second_dir.display(),
            top_dir.display()
        )),
        other => other.into(),
    })?;
    write_json(&out.join("comparison.json"), &cmp)?;
    ctx.write_run(&out, &args, &["comparison.json"])?;
    println!(
        "second {:.4} | top (dedicated) {:.4} | top (collapsed) {:.4}",
        cmp.second_accuracy, cmp.dedicated_top_accuracy, cmp.collapsed_top_accuracy
    );
    match cmp.consistency.fraction {
        Some(f) => println!(
            "{} of {} second-level errors have the correct top-level prediction ({:.3})",
            cmp.consistency.recovered_by_top, cmp.consistency.second_errors, f
        ),
        None => println!("no second-level errors"),
    }
    Ok(())
}

// ---- eval ----

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// JSONL with `sound_id`, `true_code` and `predicted_code` per line.
    #[arg(long, conflicts_with_all = ["pred", "truth"], required_unless_present = "pred")]
    predictions: Option<PathBuf>,
    /// Predicted codes, one per line, aligned with `--truth`.
    #[arg(long, requires = "truth")]
    pred: Option<PathBuf>,
    /// True codes, one per line.
    #[arg(long, requires = "pred")]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "second")]
    level: Level,
    #[arg(long)]
    out: PathBuf,
}

fn read_codes(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).at(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<(), Failure> {
    let (ids, truths, preds) = match (&args.predictions, &args.pred, &args.truth) {
        (Some(p), _, _) => {
            let path = ctx.input(p)?;
            let lines: Vec<PredictionLine> = read_lines(&path)?;
            let ids = lines.iter().map(|l| l.sound_id.clone()).collect();
            let truths = lines.iter().map(|l| l.true_code.clone()).collect();
            let preds = lines.into_iter().map(|l| l.predicted_code).collect();
            (ids, truths, preds)
        }
        (None, Some(p), Some(t)) => {
            let preds = read_codes(&ctx.input(p)?)?;
            let truths = read_codes(&ctx.input(t)?)?;
            let ids = (1..=preds.len()).map(|i| i.to_string()).collect::<Vec<_>>();
            (ids, truths, preds)
        }
        _ => return Err(Failure::Usage("give --predictions, or both --pred and --truth".into())),
    };
    let report = evaluate_with_ids(&ids, &preds, &truths, &ctx.taxonomy, args.level)?;
    let out = ctx.output_dir(&args.out)?;
    write_evaluation(&out, &report)?;
    ctx.write_run(&out, &args, &["report.json", "confusion.csv"])?;
    println!("{}", summary(&report));
    Ok(())
}

// ---- export-errors ----

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct ExportArgs {
    /// `report.json` from `grid` or `eval`.
    #[arg(long)]
    report: PathBuf,
    /// Manifest supplying audio paths for the queue.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `all`, or `random:N` for a seeded sample of N errors.
    #[arg(long, default_value = "all")]
    sample: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_sample(s: &str, seed: u64) -> Result<ReviewSample, Failure> {
    if s == "all" {
        return Ok(ReviewSample::All);
    }
    s.strip_prefix("random:")
        .and_then(|n| n.parse().ok())
        .map(|n| ReviewSample::Random { n, seed })
        .ok_or_else(|| Failure::Usage(format!("--sample must be `all` or `random:N`, got `{s}`")))
}

pub fn export_errors(ctx: &Context, args: ExportArgs) -> Result<(), Failure> {
    let sample = parse_sample(&args.sample, ctx.globals.seed)?;
    let report_path = ctx.input(&args.report)?;
    let report: EvaluationReport = read_json(&report_path)?;
    let manifest = args.manifest.as_deref().map(|m| ctx.manifest(m, None)).transpose()?;
    let items = export_misclassifications(&report, sample, manifest.as_ref())?;
    let out = ctx.output_dir(&args.out)?;
    let queue = out.join("queue.jsonl");
    write_queue(&queue, &items).at(&queue)?;
    ctx.write_run(&out, &args, &["queue.jsonl"])?;
    println!(
        "{} of {} misclassifications written to {}",
        items.len(),
        report.misclassified.len(),
        queue.display()
    );
    Ok(())
}

// ---- serve ----

#[derive(Debug, clap::Args, Serialize, Deserialize)]
pub struct ServeArgs {
    /// Review queue (`queue.jsonl` from `export-errors`).
    #[arg(long)]
    queue: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Annotation journal; created if missing.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8765")]
    bind: String,
    /// Directory of static UI assets to serve.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = ctrl_c => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => ctrl_c.await,
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
    log::info!("shutting down");
}

pub fn serve(ctx: &Context, args: ServeArgs) -> Result<(), Failure> {
    let config = ServiceConfig {
        queue: ctx.input(&args.queue)?,
        manifest: ctx.input(&args.manifest)?,
        store: args.store.clone(),
        bind: args.bind.clone(),
        taxonomy: ctx.taxonomy.clone(),
        ui_dir: args.ui_dir.as_deref().map(|d| ctx.input(d)).transpose()?,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Internal(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let service = Service::bind(config).await?;
        println!("listening on http://{}", service.local_addr()?);
        std::io::stdout().flush().ok();
        service.run(shutdown_signal()).await?;
        Ok(())
    })
}
