//! The pipeline stages. Each reads immutable inputs from the workdir and
//! writes its artifacts plus a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use curvedit::container;
use curvedit::datagen::{self, ClassifierData, MemPair};
use curvedit::editing::{apply_plan, EditMethod, EditOutcome, EditPlan, MaskData};
use curvedit::evalmem::{self, MemEvalReport};
use curvedit::kfac::{collect_factors, CollectConfig, KfacFactors};
use curvedit::linalg::Matrix;
use curvedit::nn::{self, Dataset, ModelCheckpoint};
use curvedit::rng;
use curvedit::spectral::{activation_ratio_report, band_rows_csv, BandRow};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{RunConfig, Task};
use crate::error::CliError;
use crate::manifest::{Manifest, Recorder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    KfacCollect,
    AnalyzeBands,
    Edit,
    Eval,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] =
        [Stage::GenData, Stage::Train, Stage::KfacCollect, Stage::AnalyzeBands, Stage::Edit, Stage::Eval, Stage::Sweep, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::KfacCollect => "kfac-collect",
            Stage::AnalyzeBands => "analyze-bands",
            Stage::Edit => "edit",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

pub const BASELINE: &str = "baseline";

/// A resolved config plus where and how to run.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub workdir: PathBuf,
    /// Worker threads for the sweep.
    pub jobs: usize,
    /// Restricts `edit` and `eval` to these model names when non-empty.
    pub only: Vec<String>,
    pub verbose: bool,
}

impl Context {
    pub fn new(config: RunConfig, workdir: impl Into<PathBuf>) -> Self {
        Self { config, workdir: workdir.into(), jobs: 1, only: Vec::new(), verbose: false }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.corpus)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.resolve(&self.config.paths.checkpoint)
    }

    pub fn factor_file(&self, layer: &str) -> PathBuf {
        self.resolve(&self.config.paths.factors).join(format!("{layer}.kfac"))
    }

    pub fn edit_checkpoint(&self, name: &str) -> PathBuf {
        self.resolve(&self.config.paths.edits).join(format!("{name}.ckpt"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.reports)
    }

    pub fn eval_report(&self, label: &str) -> PathBuf {
        self.reports_dir().join("eval").join(format!("{label}.json"))
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.workdir.join("manifests").join(format!("{}.json", stage.name()))
    }

    fn model_checkpoint(&self, label: &str) -> PathBuf {
        if label == BASELINE {
            self.checkpoint()
        } else {
            self.edit_checkpoint(label)
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn selected_edits(&self) -> Result<Vec<&crate::config::NamedEdit>, CliError> {
        for name in &self.only {
            if name != BASELINE && !self.config.edits.iter().any(|e| &e.name == name) {
                return Err(CliError::Config(format!("no edit named {name:?} in the config")));
            }
        }
        Ok(self.config.edits.iter().filter(|e| self.only.is_empty() || self.only.contains(&e.name)).collect())
    }
}

/// Any JSON artifact paired with the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

pub fn run_stage(stage: Stage, ctx: &Context) -> Result<Manifest, CliError> {
    ctx.config.validate()?;
    let mut rec = Recorder::new(stage.name(), &ctx.workdir);
    match stage {
        Stage::GenData => gen_data(ctx, &mut rec)?,
        Stage::Train => train(ctx, &mut rec)?,
        Stage::KfacCollect => kfac_collect(ctx, &mut rec)?,
        Stage::AnalyzeBands => analyze_bands(ctx, &mut rec)?,
        Stage::Edit => edit(ctx, &mut rec)?,
        Stage::Eval => eval(ctx, &mut rec)?,
        Stage::Sweep => sweep(ctx, &mut rec)?,
        Stage::Report => report(ctx, &mut rec)?,
    }
    rec.finish(&ctx.manifest(stage), &ctx.config.hash())
}

/// Runs every stage in order.
pub fn run_pipeline(ctx: &Context) -> Result<Vec<Manifest>, CliError> {
    Stage::ALL.iter().map(|&s| run_stage(s, ctx)).collect()
}

// ---------------------------------------------------------------- corpus

enum Corpus {
    Lm { train: Vec<Vec<u32>>, clean_eval: Vec<Vec<u32>>, pairs: Vec<MemPair> },
    Classifier(ClassifierData),
}

impl Corpus {
    fn training_set(&self) -> Dataset {
        match self {
            Corpus::Lm { train, .. } => Dataset::Lm(train.clone()),
            Corpus::Classifier(d) => Dataset::Classifier { x: d.train_x.clone(), labels: d.train_labels.clone() },
        }
    }
}

fn lm_files(ctx: &Context) -> [PathBuf; 3] {
    let d = ctx.corpus_dir();
    [d.join("train.txt"), d.join("clean_eval.txt"), d.join("pairs.json")]
}

fn classifier_file(ctx: &Context) -> PathBuf {
    ctx.corpus_dir().join("classifier.bin")
}

const CLASSIFIER_VECTORS: [&str; 4] = ["train_labels", "true_labels", "val_labels", "noised"];

fn column(values: impl Iterator<Item = f64>) -> Matrix {
    let v: Vec<f64> = values.collect();
    Matrix::from_vec(v.len(), 1, v).expect("column length matches")
}

fn write_classifier(path: &Path, spec: &datagen::ClassifierSetSpec, d: &ClassifierData) -> Result<(), CliError> {
    let mut meta = Map::new();
    meta.insert("format".into(), Value::from("curvedit-classifier-set"));
    meta.insert("spec".into(), serde_json::to_value(spec).expect("spec serializes"));
    let labels = [
        column(d.train_labels.iter().map(|&l| l as f64)),
        column(d.true_labels.iter().map(|&l| l as f64)),
        column(d.val_labels.iter().map(|&l| l as f64)),
        column(d.noised.iter().map(|&b| f64::from(u8::from(b)))),
    ];
    let mut tensors: Vec<(&str, &Matrix)> = vec![("train_x", &d.train_x), ("val_x", &d.val_x), ("centers", &d.centers)];
    tensors.extend(CLASSIFIER_VECTORS.iter().copied().zip(labels.iter()));
    container::write_file(path, &meta, &tensors).map_err(|e| CliError::Other(e.to_string()))
}

fn read_classifier(path: &Path) -> Result<ClassifierData, CliError> {
    let c = container::read_file(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    let get = |n: &str| c.get(n).cloned().ok_or_else(|| CliError::Other(format!("{}: missing tensor {n}", path.display())));
    let ints = |n: &str| -> Result<Vec<usize>, CliError> { Ok(get(n)?.as_slice().iter().map(|&v| v as usize).collect()) };
    Ok(ClassifierData {
        train_x: get("train_x")?,
        val_x: get("val_x")?,
        centers: get("centers")?,
        train_labels: ints("train_labels")?,
        true_labels: ints("true_labels")?,
        val_labels: ints("val_labels")?,
        noised: get("noised")?.as_slice().iter().map(|&v| v != 0.0).collect(),
    })
}

fn load_corpus(ctx: &Context, rec: &mut Recorder) -> Result<Corpus, CliError> {
    match ctx.config.task {
        Task::Lm => {
            let [t, c, p] = lm_files(ctx);
            Ok(Corpus::Lm {
                train: datagen::read_sequences(&rec.input(&t)?)?,
                clean_eval: datagen::read_sequences(&rec.input(&c)?)?,
                pairs: datagen::read_pairs(&rec.input(&p)?)?,
            })
        }
        Task::Classifier => Ok(Corpus::Classifier(read_classifier(&rec.input(&classifier_file(ctx))?)?)),
    }
}

fn load_model(ctx: &Context, rec: &mut Recorder, label: &str) -> Result<ModelCheckpoint, CliError> {
    let path = rec.input(&ctx.model_checkpoint(label))?;
    let m = ModelCheckpoint::load(&path)?;
    if m.arch != ctx.config.arch() {
        return Err(CliError::Config(format!("{} was built for a different architecture than the config", path.display())));
    }
    Ok(m)
}

fn load_factors(ctx: &Context, rec: &mut Recorder, layers: &[String]) -> Result<BTreeMap<String, KfacFactors>, CliError> {
    let mut out = BTreeMap::new();
    for l in layers {
        let path = rec.input(&ctx.factor_file(l))?;
        out.insert(l.clone(), KfacFactors::load(&path)?);
    }
    Ok(out)
}

fn secrets(pairs: &[MemPair]) -> Vec<Vec<u32>> {
    pairs.iter().map(|p| p.prefix.iter().chain(&p.suffix).copied().collect()).collect()
}

fn contains_run(hay: &[u32], needle: &[u32]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Forget and retain sets for the mask edit.
fn mask_sets(ctx: &Context, corpus: &Corpus) -> (Dataset, Dataset) {
    let cap = ctx.config.eval.retain_size.max(1);
    match corpus {
        Corpus::Lm { train, pairs, .. } => {
            let s = secrets(pairs);
            let retain: Vec<Vec<u32>> =
                train.iter().filter(|seq| !s.iter().any(|x| contains_run(seq, x))).take(cap).cloned().collect();
            (Dataset::Lm(s), Dataset::Lm(retain))
        }
        Corpus::Classifier(d) => {
            let noised = d.noised_indices();
            let clean: Vec<usize> = (0..d.noised.len()).filter(|&i| !d.noised[i]).take(cap).collect();
            let subset = |idx: &[usize]| Dataset::Classifier {
                x: d.train_x.select_rows(idx),
                labels: idx.iter().map(|&i| d.train_labels[i]).collect(),
            };
            (subset(&noised), subset(&clean))
        }
    }
}

// ---------------------------------------------------------------- stages

fn gen_data(ctx: &Context, rec: &mut Recorder) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let summary = match cfg.task {
        Task::Lm => {
            let spec = datagen::LmCorpusSpec { seed: cfg.seed_for(cfg.lm_data.seed), ..cfg.lm_data.clone() };
            let corpus = datagen::gen_lm_corpus(&spec)?;
            let [t, c, p] = lm_files(ctx);
            datagen::write_sequences(&t, &corpus.train)?;
            datagen::write_sequences(&c, &corpus.clean_eval)?;
            datagen::write_pairs(&p, &corpus.pairs)?;
            for f in [&t, &c, &p] {
                rec.output(f)?;
            }
            serde_json::json!({
                "task": "lm",
                "train_sequences": corpus.train.len(),
                "clean_eval_sequences": corpus.clean_eval.len(),
                "pairs": corpus.pairs.len(),
                "mixing_ratio": spec.mixing_ratio(),
            })
        }
        Task::Classifier => {
            let spec = datagen::ClassifierSetSpec { seed: cfg.seed_for(cfg.classifier_data.seed), ..cfg.classifier_data.clone() };
            let data = datagen::gen_classifier_set(&spec)?;
            let path = classifier_file(ctx);
            write_classifier(&path, &spec, &data)?;
            rec.output(&path)?;
            serde_json::json!({
                "task": "classifier",
                "train_examples": data.train_x.rows(),
                "val_examples": data.val_x.rows(),
                "noised": data.noised_indices().len(),
            })
        }
    };
    rec.write_json(&ctx.corpus_dir().join("summary.json"), &Stamped { config_hash: cfg.hash(), body: summary })?;
    rec.write_bytes(&ctx.workdir.join("config.json"), cfg.to_json().as_bytes())
}

fn train(ctx: &Context, rec: &mut Recorder) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let corpus = load_corpus(ctx, rec)?;
    let data = corpus.training_set();
    let tcfg = nn::TrainConfig { seed: cfg.seed_for(cfg.train.seed), ..cfg.train.clone() };
    let init = ModelCheckpoint::init(cfg.arch(), rng::derive_seed(tcfg.seed, "init"))?;
    ctx.log(format!("training {} parameters for {} steps", init.num_params(), tcfg.steps));
    let every = (tcfg.steps / 20).max(1);
    let out = nn::train_with_progress(init, &data, &tcfg, |step, loss| {
        if (step + 1) % every == 0 {
            ctx.log(format!("  step {:>6}  loss {loss:.4}", step + 1));
        }
    })?;
    let ckpt = ctx.checkpoint();
    out.checkpoint.save(&ckpt)?;
    rec.output(&ckpt)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    rec.write_bytes(&ctx.reports_dir().join("train_loss.csv"), csv.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub positions_seen: u64,
    pub d_in: usize,
    pub d_out: usize,
    pub trace_a: f64,
    pub trace_g: f64,
    pub top_eig_a: f64,
    pub top_eig_g: f64,
}

fn kfac_targets(cfg: &RunConfig) -> Vec<String> {
    if cfg.kfac.targets.is_empty() {
        cfg.arch().projection_names()
    } else {
        cfg.kfac.targets.clone()
    }
}

fn kfac_collect(ctx: &Context, rec: &mut Recorder) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = load_model(ctx, rec, BASELINE)?;
    let corpus = load_corpus(ctx, rec)?;
    let targets = kfac_targets(cfg);
    let ccfg = CollectConfig { seed: cfg.seed_for(cfg.kfac.collect.seed), ..cfg.kfac.collect.clone() };
    ctx.log(format!("collecting factors for {} projections", targets.len()));
    let factors = collect_factors(&model, &corpus.training_set(), &targets, &ccfg)?;
    let mut summary = BTreeMap::new();
    for (name, f) in &factors {
        let path = ctx.factor_file(name);
        f.save(&path)?;
        rec.output(&path)?;
        summary.insert(
            name.clone(),
            FactorSummary {
                positions_seen: f.positions_seen,
                d_in: f.d_in(),
                d_out: f.d_out(),
                trace_a: f.a.trace(),
                trace_g: f.g.trace(),
                top_eig_a: f.eig_a.eigenvalues.first().copied().unwrap_or(0.0),
                top_eig_g: f.eig_g.eigenvalues.first().copied().unwrap_or(0.0),
            },
        );
    }
    rec.write_json(&ctx.reports_dir().join("kfac_summary.json"), &Stamped { config_hash: cfg.hash(), body: summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub rows: Vec<BandRow>,
}

/// Memorized and clean inputs for the activation-ratio analysis.
fn band_sets(corpus: &Corpus) -> (Dataset, Dataset) {
    match corpus {
        Corpus::Lm { clean_eval, pairs, .. } => {
            let s = secrets(pairs);
            let len = s.first().map_or(0, Vec::len);
            let clean = clean_eval.iter().map(|c| c[..len.min(c.len())].to_vec()).collect();
            (Dataset::Lm(s), Dataset::Lm(clean))
        }
        Corpus::Classifier(d) => {
            let noised = d.noised_indices();
            let clean: Vec<usize> = (0..d.noised.len()).filter(|&i| !d.noised[i]).collect();
            let subset = |idx: &[usize]| Dataset::Classifier {
                x: d.train_x.select_rows(idx),
                labels: idx.iter().map(|&i| d.train_labels[i]).collect(),
            };
            (subset(&noised), subset(&clean))
        }
    }
}

fn analyze_bands(ctx: &Context, rec: &mut Recorder) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = load_model(ctx, rec, BASELINE)?;
    let corpus = load_corpus(ctx, rec)?;
    let needs_factors = cfg.bands.spec.bases.contains(&curvedit::spectral::Basis::KfacA);
    let factors = if needs_factors { load_factors(ctx, rec, &cfg.bands.layers)? } else { BTreeMap::new() };
    let (mem, clean) = band_sets(&corpus);
    let rows = activation_ratio_report(&model, &factors, &cfg.bands.layers, &mem, &clean, &cfg.bands.spec)?;
    let dir = ctx.reports_dir();
    rec.write_bytes(&dir.join("bands.csv"), band_rows_csv(&rows).as_bytes())?;
    rec.write_json(&dir.join("bands.json"), &Stamped { config_hash: cfg.hash(), body: BandReport { rows } })
}

fn effective_plan(cfg: &RunConfig, plan: &EditPlan) -> EditPlan {
    let mut p = plan.clone();
    if let EditMethod::BsnMask(params) = &mut p.method {
        params.seed = cfg.seed_for(params.seed);
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub name: String,
    pub outcome: EditOutcome,
}

fn edit(ctx: &Context, rec: &mut Recorder) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = load_model(ctx, rec, BASELINE)?;
    let edits = ctx.selected_edits()?;
    let mut corpus = None;
    for e in edits {
        let plan = effective_plan(cfg, &e.plan);
        let factors = match plan.method {
            EditMethod::KfacPairs { .. } => Some(load_factors(ctx, rec, &plan.targets)?),
            _ => None,
        };
        let sets = match plan.method {
            EditMethod::BsnMask(_) => {
                if corpus.is_none() {
                    corpus = Some(load_corpus(ctx, rec)?);
                }
                Some(mask_sets(ctx, corpus.as_ref().expect("loaded above")))
            }
            _ => None,
        };
        ctx.log(format!("edit {} ({})", e.name, plan.method.name()));
        let mask = sets.as_ref().map(|(forget, retain)| MaskData { forget, retain });
        let (mut edited, outcome) = apply_plan(&model, &plan, factors.as_ref(), mask)?;
        edited.train_meta.note = Some(format!("edit {} ({})", e.name, plan.method.name()));
        let path = ctx.edit_checkpoint(&e.name);
        edited.save(&path)?;
        rec.output(&path)?;
        let record = Stamped { config_hash: cfg.hash(), body: EditRecord { name: e.name.clone(), outcome } };
        rec.write_json(&path.with_extension("json"), &record)?;
    }
    Ok(())
}

/// Scalar metrics of one report, in a fixed order.
pub fn report_metrics(r: &MemEvalReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    if let Some(m) = &r.memorization {
        out.push(("strict".into(), m.strict));
        out.push(("loose".into(), m.loose));
        out.push(("avg_norm_lev".into(), m.avg_norm_lev));
        out.push(("mean_exact_match_len".into(), m.mean_exact_match_len));
    }
    if let Some(p) = r.perplexity {
        out.push(("perplexity".into(), p));
    }
    if let Some(n) = r.ndcg10 {
        out.push(("ndcg".into(), n));
    }
    if let Some(s) = &r.stress {
        out.push(("stress_original".into(), s.original.mean));
        out.push(("stress_perturbed".into(), s.perturbed.mean));
    }
    if let Some(c) = &r.classifier {
        out.push(("memorized_train_acc".into(), c.memorized_train_acc));
        out.push(("gt_recovery".into(), c.gt_recovery));
        out.push(("val_acc".into(), c.val_acc));
    }
    out
}

fn metrics_csv(rows: &[(String, Vec<(String, f64)>)], key: &str) -> String {
    let mut s = format!("{key},metric,value\n");
    for (k, metrics) in rows {
        for (m, v) in metrics {
            s.push_str(&format!("{k},{m},{v}\n"));
        }
    }
    s
}

fn eval(ctx: &Context, rec: &mut Recorder) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let corpus = load_corpus(ctx, rec)?;
    let baseline = load_model(ctx, rec, BASELINE)?;
    let mut labels = Vec::new();
    if ctx.only.is_empty() || ctx.only.iter().any(|n| n == BASELINE) {
        labels.push(BASELINE.to_string());
    }
    labels.extend(ctx.selected_edits()?.iter().map(|e| e.name.clone()));
    let mut models = Vec::new();
    for l in &labels {
        let m = if l == BASELINE { baseline.clone() } else { load_model(ctx, rec, l)? };
        models.push((l.clone(), m));
    }
    let dir = ctx.reports_dir().join("eval");
    let mut summary = Vec::new();
    for (label, model) in &models {
        ctx.log(format!("eval {label}"));
        let mut report = MemEvalReport { label: label.clone(), ..MemEvalReport::default() };
        match &corpus {
            Corpus::Lm { clean_eval, pairs, .. } => {
                let (metrics, results) = evalmem::memorization_eval(model, pairs)?;
                report.memorization = Some(metrics);
                report.perplexity = Some(evalmem::perplexity(model, clean_eval, cfg.eval.batch_size)?);
                report.ndcg10 = Some(evalmem::ndcg_at_k(&baseline, model, clean_eval, cfg.eval.ndcg_k)?);
                let mut srng = rng::stream(cfg.seed, "stress");
                report.stress =
                    Some(evalmem::positional_stress_test(model, pairs, cfg.eval.stress_max_shift, cfg.eval.stress_draws, &mut srng)?);
                rec.write_bytes(&dir.join(format!("{label}_pairs.csv")), evalmem::pair_results_csv(&results).as_bytes())?;
            }
            Corpus::Classifier(d) => {
                let idx = d.noised_indices();
                let x = d.train_x.select_rows(&idx);
                let noisy: Vec<usize> = idx.iter().map(|&i| d.train_labels[i]).collect();
                let truth: Vec<usize> = idx.iter().map(|&i| d.true_labels[i]).collect();
                report.classifier = Some(evalmem::classifier_mem_eval(model, &x, &noisy, &truth, &d.val_x, &d.val_labels)?);
            }
        }
        summary.push((label.clone(), report_metrics(&report)));
        rec.write_json(&ctx.eval_report(label), &Stamped { config_hash: cfg.hash(), body: report })?;
    }
    rec.write_bytes(&dir.join("summary.csv"), metrics_csv(&summary, "model").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rho: f64,
    pub mean_retained_mass: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub targets: Vec<String>,
    pub baseline: BTreeMap<String, f64>,
    pub points: Vec<SweepPoint>,
    /// Whether the primary recall metric is non-decreasing in rho over all points.
    pub monotone: bool,
}

/// The metric the sweep is judged on: strict recall or memorized accuracy.
pub fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::Lm => "strict",
        Task::Classifier => "memorized_train_acc",
    }
}

fn sweep_metrics(model: &ModelCheckpoint, corpus: &Corpus, batch: usize) -> Result<BTreeMap<String, f64>, CliError> {
    let mut r = MemEvalReport::default();
    match corpus {
        Corpus::Lm { clean_eval, pairs, .. } => {
            r.memorization = Some(evalmem::memorization_eval(model, pairs)?.0);
            r.perplexity = Some(evalmem::perplexity(model, clean_eval, batch)?);
        }
        Corpus::Classifier(d) => {
            let idx = d.noised_indices();
            let x = d.train_x.select_rows(&idx);
            let noisy: Vec<usize> = idx.iter().map(|&i| d.train_labels[i]).collect();
            let truth: Vec<usize> = idx.iter().map(|&i| d.true_labels[i]).collect();
            r.classifier = Some(evalmem::classifier_mem_eval(model, &x, &noisy, &truth, &d.val_x, &d.val_labels)?);
        }
    }
    Ok(report_metrics(&r).into_iter().collect())
}

fn sweep(ctx: &Context, rec: &mut Recorder) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let model = load_model(ctx, rec, BASELINE)?;
    let corpus = load_corpus(ctx, rec)?;
    let targets = cfg.sweep.targets.clone();
    let factors = load_factors(ctx, rec, &targets)?;
    let baseline = sweep_metrics(&model, &corpus, cfg.eval.batch_size)?;
    let rhos = &cfg.sweep.rhos;

    let results: Vec<Mutex<Option<Result<SweepPoint, CliError>>>> = rhos.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let run_one = |rho: f64| -> Result<SweepPoint, CliError> {
        let plan = EditPlan { method: EditMethod::KfacPairs { rho }, targets: targets.clone() };
        let (edited, outcome) = apply_plan(&model, &plan, Some(&factors), None)?;
        let kept: Vec<f64> = outcome.layers.values().filter_map(|l| l.retained_mass_fraction).collect();
        Ok(SweepPoint {
            rho,
            mean_retained_mass: kept.iter().sum::<f64>() / kept.len().max(1) as f64,
            metrics: sweep_metrics(&edited, &corpus, cfg.eval.batch_size)?,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..ctx.jobs.clamp(1, rhos.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= rhos.len() {
                    break;
                }
                ctx.log(format!("sweep rho {}", rhos[i]));
                *results[i].lock().expect("sweep slot") = Some(run_one(rhos[i]));
            });
        }
    });
    let points: Vec<SweepPoint> = results
        .into_iter()
        .map(|m| m.into_inner().expect("sweep slot").expect("every slot filled"))
        .collect::<Result<_, _>>()?;

    let key = primary_metric(cfg.task);
    let mut order: Vec<&SweepPoint> = points.iter().collect();
    order.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    let monotone = order.windows(2).all(|w| w[0].metrics[key] <= w[1].metrics[key]);

    let rows: Vec<(String, Vec<(String, f64)>)> = points
        .iter()
        .map(|p| {
            let mut m: Vec<(String, f64)> = p.metrics.iter().map(|(k, v)| (k.clone(), *v)).collect();
            m.push(("mean_retained_mass".into(), p.mean_retained_mass));
            (p.rho.to_string(), m)
        })
        .collect();
    let dir = ctx.reports_dir();
    rec.write_bytes(&dir.join("sweep.csv"), metrics_csv(&rows, "rho").as_bytes())?;
    let report = SweepReport { targets, baseline, points, monotone };
    rec.write_json(&dir.join("sweep.json"), &Stamped { config_hash: cfg.hash(), body: report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub models: Vec<MemEvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bands: Option<Vec<BandRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepReport>,
    /// Inputs that were produced under a different config.
    pub stale_inputs: Vec<String>,
}

fn read_stamped<T: for<'de> Deserialize<'de>>(rec: &mut Recorder, path: &Path) -> Result<Stamped<T>, CliError> {
    let p = rec.input(path)?;
    let text = std::fs::read_to_string(&p)?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", p.display())))
}

fn report(ctx: &Context, rec: &mut Recorder) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let hash = cfg.hash();
    let mut stale = Vec::new();
    let mut note = |path: &Path, h: &str| {
        if h != hash {
            stale.push(path.display().to_string());
        }
    };
    let mut models = Vec::new();
    let base_path = ctx.eval_report(BASELINE);
    let base: Stamped<MemEvalReport> = read_stamped(rec, &base_path)?;
    note(&base_path, &base.config_hash);
    models.push(base.body);
    for e in &cfg.edits {
        let p = ctx.eval_report(&e.name);
        if p.is_file() {
            let r: Stamped<MemEvalReport> = read_stamped(rec, &p)?;
            note(&p, &r.config_hash);
            models.push(r.body);
        }
    }
    let bands_path = ctx.reports_dir().join("bands.json");
    let bands = if bands_path.is_file() {
        let b: Stamped<BandReport> = read_stamped(rec, &bands_path)?;
        note(&bands_path, &b.config_hash);
        Some(b.body.rows)
    } else {
        None
    };
    let sweep_path = ctx.reports_dir().join("sweep.json");
    let sweep = if sweep_path.is_file() {
        let s: Stamped<SweepReport> = read_stamped(rec, &sweep_path)?;
        note(&sweep_path, &s.config_hash);
        Some(s.body)
    } else {
        None
    };

    let table: Vec<(String, Vec<(String, f64)>)> = models.iter().map(|m| (m.label.clone(), report_metrics(m))).collect();
    let dir = ctx.reports_dir();
    rec.write_bytes(&dir.join("report.csv"), metrics_csv(&table, "model").as_bytes())?;
    rec.write_bytes(&dir.join("report.md"), markdown(&table, bands.as_deref(), sweep.as_ref(), &stale).as_bytes())?;
    let fin = FinalReport { models, bands, sweep, stale_inputs: stale };
    rec.write_json(&dir.join("report.json"), &Stamped { config_hash: hash.clone(), body: fin })
}

fn markdown(table: &[(String, Vec<(String, f64)>)], bands: Option<&[BandRow]>, sweep: Option<&SweepReport>, stale: &[String]) -> String {
    let mut s = String::from("# Results\n\n");
    if let Some((_, first)) = table.first() {
        s.push_str("| model |");
        for (m, _) in first {
            s.push_str(&format!(" {m} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(first.len()));
        s.push('\n');
        for (label, metrics) in table {
            s.push_str(&format!("| {label} |"));
            for (_, v) in metrics {
                s.push_str(&format!(" {v:.4} |"));
            }
            s.push('\n');
        }
    }
    if let Some(rows) = bands {
        s.push_str("\n## Memorized / clean activation ratio by band\n\n| layer | basis | band | ratio |\n|---|---|---|---|\n");
        for r in rows {
            s.push_str(&format!("| {} | {} | ({}, {}] | {:.3} |\n", r.layer, r.basis.as_str(), r.band_lo, r.band_hi, r.ratio));
        }
    }
    if let Some(sw) = sweep {
        s.push_str("\n## Retained-mass sweep\n\n| rho | retained mass |");
        let keys: Vec<&String> = sw.points.first().map(|p| p.metrics.keys().collect()).unwrap_or_default();
        for k in &keys {
            s.push_str(&format!(" {k} |"));
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(keys.len()));
        s.push('\n');
        for p in &sw.points {
            s.push_str(&format!("| {} | {:.3} |", p.rho, p.mean_retained_mass));
            for k in &keys {
                s.push_str(&format!(" {:.4} |", p.metrics[*k]));
            }
            s.push('\n');
        }
    }
    if !stale.is_empty() {
        s.push_str("\nProduced under a different config:\n\n");
        for p in stale {
            s.push_str(&format!("- {p}\n"));
        }
    }
    s
}
