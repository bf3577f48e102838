//! Multi-run experiment drivers. Each writes one JSON file per sub-run, a
//! combined `table.txt` and a `series.csv` into its output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{evaluate, format_table, MetricReport, System};
use crate::model::{model_to_bytes, save_checkpoint, Seq2SeqModel};
use crate::pipeline::{InferenceMode, SumTraPipeline};
use crate::tasks::{Dataset, Split, Vocab, XlsRecord};
use crate::train::{finetune, finetune_direct, sha256_hex, FreezeStrategy, RunReport, TrainConfig};

pub const ALPHA_GRID: [f64; 6] = [0.0, 0.5, 0.9, 0.95, 0.99, 1.0];
pub const SHOT_GRID: [usize; 4] = [0, 8, 32, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentOptions {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Shot count used by the α sweep, freeze ablation and cross-domain runs.
    pub fixed_shots: usize,
    pub alpha_grid: Vec<f64>,
    /// Validation records used for early stopping during fine-tuning.
    pub val_limit: usize,
    /// Test records scored per sub-run.
    pub test_limit: usize,
    pub summary_max_len: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            shots: SHOT_GRID.to_vec(),
            seeds: vec![0, 1, 2],
            fixed_shots: 32,
            alpha_grid: ALPHA_GRID.to_vec(),
            val_limit: 100,
            test_limit: 500,
            summary_max_len: 14,
            train: TrainConfig::finetuning(),
        }
    }
}

/// One row of an experiment: what was run and how it scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRun {
    pub name: String,
    pub system: String,
    pub shots: usize,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub freeze: Option<FreezeStrategy>,
    pub mode: Option<InferenceMode>,
    pub metrics: MetricReport,
    pub report: Option<RunReport>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl SubRun {
    fn new(name: impl Into<String>, system: &str, shots: usize, seed: u64, metrics: MetricReport) -> Self {
        Self {
            name: name.into(),
            system: system.into(),
            shots,
            seed,
            alpha: None,
            freeze: None,
            mode: None,
            metrics,
            report: None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub name: String,
    pub dir: PathBuf,
    pub runs: Vec<SubRun>,
    pub table: String,
}

impl ExperimentOutput {
    pub fn run(&self, name: &str) -> Option<&SubRun> {
        self.runs.iter().find(|r| r.name == name)
    }
}

/// Runs independent jobs on up to `jobs` threads, keeping input order.
pub fn run_parallel<T, J>(jobs: usize, work: Vec<J>) -> Result<Vec<T>>
where
    T: Send,
    J: FnOnce() -> Result<T> + Send,
{
    let n = work.len();
    if jobs <= 1 || n <= 1 {
        return work.into_iter().map(|j| j()).collect();
    }
    let queue = Mutex::new(work.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop();
                let Some((i, job)) = next else { break };
                let out = job();
                results.lock().expect("results lock")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn series_csv(runs: &[SubRun]) -> String {
    let mut out = String::from(
        "run,system,shots,seed,alpha,freeze,mode,rouge1,rouge2,rougeL,rouge_avg,exact_match,token_accuracy,language_purity\n",
    );
    for r in runs {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.system,
            r.shots,
            r.seed,
            r.alpha.map(|a| a.to_string()).unwrap_or_default(),
            r.freeze.map(|f| f.to_string()).unwrap_or_default(),
            r.mode.map(|f| f.to_string()).unwrap_or_default(),
            m.rouge1,
            m.rouge2,
            m.rouge_l,
            m.rouge_avg,
            m.exact_match,
            m.token_accuracy,
            m.language_purity
        );
    }
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn finish(name: &str, dir: &Path, options: &ExperimentOptions, runs: Vec<SubRun>) -> Result<ExperimentOutput> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = json!({ "experiment": name, "options": options, "version": env!("CARGO_PKG_VERSION") });
    for r in &runs {
        let body = json!({ "config": config, "run": r });
        write_file(&dir.join(format!("{}.json", r.name)), serde_json::to_vec_pretty(&body)?)?;
    }
    let rows: Vec<(String, MetricReport)> = runs.iter().map(|r| (r.name.clone(), r.metrics)).collect();
    let table = format_table(&rows);
    write_file(&dir.join("table.txt"), &table)?;
    write_file(&dir.join("series.csv"), series_csv(&runs))?;
    write_file(&dir.join("config.json"), serde_json::to_vec_pretty(&config)?)?;
    Ok(ExperimentOutput {
        name: name.into(),
        dir: dir.to_path_buf(),
        runs,
        table,
    })
}

fn limited(data: &Dataset, split: Split, limit: usize) -> Vec<XlsRecord> {
    let mut records = data.split_owned(split);
    records.truncate(limit);
    records
}

fn pipeline(sum: &Seq2SeqModel<f32>, tra: &Seq2SeqModel<f32>, vocab: Vocab, cap: usize) -> Result<SumTraPipeline<f32>> {
    SumTraPipeline::new(sum.clone(), tra.clone(), vocab, cap)
}

fn score_pipeline(p: &SumTraPipeline<f32>, test: &[XlsRecord], mode: InferenceMode) -> Result<MetricReport> {
    Ok(evaluate(System::Pipeline { pipeline: p, mode }, test, &p.vocab())?.report)
}

fn score_direct(m: &Seq2SeqModel<f32>, test: &[XlsRecord], vocab: &Vocab, max_len: usize) -> Result<MetricReport> {
    Ok(evaluate(System::Direct { model: m, max_len }, test, vocab)?.report)
}

/// Fine-tunes a copy of the pipeline on `k` shots and scores it.
fn pipeline_run(
    base: &SumTraPipeline<f32>,
    data: &Dataset,
    options: &ExperimentOptions,
    k: usize,
    seed: u64,
    cfg: TrainConfig,
) -> Result<(SumTraPipeline<f32>, Option<RunReport>, MetricReport)> {
    let test = limited(data, Split::Test, options.test_limit);
    let mut p = base.clone();
    let report = if k == 0 {
        None
    } else {
        let shots = data.shots(k, seed);
        let val = limited(data, Split::Val, options.val_limit);
        Some(finetune(&mut p, &shots, &val, &TrainConfig { seed, ..cfg })?)
    };
    let metrics = score_pipeline(&p, &test, InferenceMode::Hard)?;
    Ok((p, report, metrics))
}

fn direct_run(
    base: &Seq2SeqModel<f32>,
    data: &Dataset,
    vocab: &Vocab,
    options: &ExperimentOptions,
    k: usize,
    seed: u64,
) -> Result<(Option<RunReport>, MetricReport)> {
    let test = limited(data, Split::Test, options.test_limit);
    let mut m = base.clone();
    let report = if k == 0 {
        None
    } else {
        let shots = data.shots(k, seed);
        let val = limited(data, Split::Val, options.val_limit);
        Some(finetune_direct(&mut m, &shots, &val, &TrainConfig { seed, ..options.train.clone() })?)
    };
    Ok((report, score_direct(&m, &test, vocab, options.summary_max_len)?))
}

/// The pipeline (and optionally a direct baseline) at every shot count and
/// seed. Zero shots is plain evaluation and runs once.
pub fn shot_curve(
    sum: &Seq2SeqModel<f32>,
    tra: &Seq2SeqModel<f32>,
    direct: Option<&Seq2SeqModel<f32>>,
    data: &Dataset,
    vocab: Vocab,
    options: &ExperimentOptions,
    jobs: usize,
    out: &Path,
) -> Result<ExperimentOutput> {
    let base = pipeline(sum, tra, vocab, options.summary_max_len)?;
    let mut plan = Vec::new();
    for &k in &options.shots {
        let seeds: &[u64] = if k == 0 { &options.seeds[..1] } else { &options.seeds };
        for &seed in seeds {
            plan.push((k, seed, false));
            if direct.is_some() {
                plan.push((k, seed, true));
            }
        }
    }
    let work: Vec<_> = plan
        .iter()
        .map(|&(k, seed, is_direct)| {
            let base = &base;
            move || -> Result<SubRun> {
                if is_direct {
                    let (report, metrics) = direct_run(direct.expect("planned"), data, &vocab, options, k, seed)?;
                    let mut run = SubRun::new(format!("direct-k{k}-s{seed}"), "direct", k, seed, metrics);
                    run.report = report;
                    Ok(run)
                } else {
                    let (_, report, metrics) = pipeline_run(base, data, options, k, seed, options.train.clone())?;
                    let mut run = SubRun::new(format!("pipeline-k{k}-s{seed}"), "pipeline", k, seed, metrics);
                    run.alpha = Some(options.train.alpha);
                    run.report = report;
                    Ok(run)
                }
            }
        })
        .collect();
    let runs = run_parallel(jobs, work)?;
    finish("shot-curve", out, options, runs)
}

/// Mean ROUGE-avg per (system, shots) across seeds.
pub fn mean_by_shots(runs: &[SubRun], system: &str) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.system == system) {
        let e = acc.entry(r.shots).or_insert((0.0, 0));
        e.0 += r.metrics.rouge_avg;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Fine-tunes on the same shots once per α in the grid. Each sub-run saves
/// its translator checkpoint and records its hash next to the input's.
pub fn alpha_sweep(
    sum: &Seq2SeqModel<f32>,
    tra: &Seq2SeqModel<f32>,
    data: &Dataset,
    vocab: Vocab,
    options: &ExperimentOptions,
    jobs: usize,
    out: &Path,
) -> Result<ExperimentOutput> {
    let base = pipeline(sum, tra, vocab, options.summary_max_len)?;
    let input_hash = sha256_hex(&model_to_bytes(tra));
    let seed = options.seeds.first().copied().unwrap_or(0);
    let k = options.fixed_shots;
    let work: Vec<_> = options
        .alpha_grid
        .iter()
        .map(|&alpha| {
            let (base, input_hash) = (&base, &input_hash);
            move || -> Result<SubRun> {
                let cfg = TrainConfig {
                    alpha,
                    ..options.train.clone()
                };
                let (p, report, metrics) = pipeline_run(base, data, options, k, seed, cfg)?;
                let name = format!("alpha-{alpha:.2}");
                let ckpt_dir = out.join(&name);
                fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
                save_checkpoint(p.sum(), &ckpt_dir.join("sum.ckpt"))?;
                save_checkpoint(p.tra(), &ckpt_dir.join("tra.ckpt"))?;
                let mut run = SubRun::new(name, "pipeline", k, seed, metrics);
                run.alpha = Some(alpha);
                run.report = report;
                run.extra.insert("tra_input_sha256".into(), json!(input_hash));
                run.extra
                    .insert("tra_output_sha256".into(), json!(sha256_hex(&model_to_bytes(p.tra()))));
                run.extra
                    .insert("sum_output_sha256".into(), json!(sha256_hex(&model_to_bytes(p.sum()))));
                Ok(run)
            }
        })
        .collect();
    let runs = run_parallel(jobs, work)?;
    finish("alpha-sweep", out, options, runs)
}

/// Train-all, summarizer-only and translator-only fine-tuning on the same
/// shots, with parameter hashes before and after.
pub fn freeze_ablation(
    sum: &Seq2SeqModel<f32>,
    tra: &Seq2SeqModel<f32>,
    data: &Dataset,
    vocab: Vocab,
    options: &ExperimentOptions,
    jobs: usize,
    out: &Path,
) -> Result<ExperimentOutput> {
    let base = pipeline(sum, tra, vocab, options.summary_max_len)?;
    let sum_hash = sha256_hex(&model_to_bytes(sum));
    let tra_hash = sha256_hex(&model_to_bytes(tra));
    let seed = options.seeds.first().copied().unwrap_or(0);
    let k = options.fixed_shots;
    let work: Vec<_> = [FreezeStrategy::All, FreezeStrategy::SumOnly, FreezeStrategy::TraOnly]
        .into_iter()
        .map(|freeze| {
            let (base, sum_hash, tra_hash) = (&base, &sum_hash, &tra_hash);
            move || -> Result<SubRun> {
                let cfg = TrainConfig {
                    freeze_strategy: freeze,
                    ..options.train.clone()
                };
                let (p, report, metrics) = pipeline_run(base, data, options, k, seed, cfg)?;
                let mut run = SubRun::new(format!("freeze-{freeze}"), "pipeline", k, seed, metrics);
                run.freeze = Some(freeze);
                run.alpha = Some(options.train.alpha);
                run.report = report;
                run.extra.insert("sum_input_sha256".into(), json!(sum_hash));
                run.extra.insert("tra_input_sha256".into(), json!(tra_hash));
                run.extra
                    .insert("sum_output_sha256".into(), json!(sha256_hex(&model_to_bytes(p.sum()))));
                run.extra
                    .insert("tra_output_sha256".into(), json!(sha256_hex(&model_to_bytes(p.tra()))));
                Ok(run)
            }
        })
        .collect();
    let runs = run_parallel(jobs, work)?;
    finish("freeze-ablation", out, options, runs)
}

/// Hard and soft inference for the zero-shot pipeline and for a copy
/// fine-tuned on the fixed shot count.
pub fn soft_vs_hard(
    sum: &Seq2SeqModel<f32>,
    tra: &Seq2SeqModel<f32>,
    data: &Dataset,
    vocab: Vocab,
    options: &ExperimentOptions,
    out: &Path,
) -> Result<ExperimentOutput> {
    let base = pipeline(sum, tra, vocab, options.summary_max_len)?;
    let seed = options.seeds.first().copied().unwrap_or(0);
    let test = limited(data, Split::Test, options.test_limit);
    let mut runs = Vec::new();
    let (tuned, report, _) = pipeline_run(&base, data, options, options.fixed_shots, seed, options.train.clone())?;
    for (k, p) in [(0, &base), (options.fixed_shots, &tuned)] {
        for mode in [InferenceMode::Hard, InferenceMode::Soft] {
            let mut run = SubRun::new(format!("k{k}-{mode}"), "pipeline", k, seed, score_pipeline(p, &test, mode)?);
            run.mode = Some(mode);
            if k > 0 && mode == InferenceMode::Hard {
                run.report = report.clone();
            }
            runs.push(run);
        }
    }
    finish("soft-vs-hard", out, options, runs)
}

/// Summarizers pretrained on each style, tested zero-shot on both styles,
/// then fine-tuned on the fixed shot count of the other style.
pub fn cross_domain(
    sum_a: &Seq2SeqModel<f32>,
    sum_b: &Seq2SeqModel<f32>,
    tra: &Seq2SeqModel<f32>,
    data_a: &Dataset,
    data_b: &Dataset,
    vocab: Vocab,
    options: &ExperimentOptions,
    jobs: usize,
    out: &Path,
) -> Result<ExperimentOutput> {
    let seed = options.seeds.first().copied().unwrap_or(0);
    let mut plan = Vec::new();
    for (train_style, sum) in [("A", sum_a), ("B", sum_b)] {
        for (test_style, data) in [("A", data_a), ("B", data_b)] {
            plan.push((train_style, test_style, sum, data, 0));
            if train_style != test_style {
                plan.push((train_style, test_style, sum, data, options.fixed_shots));
            }
        }
    }
    let work: Vec<_> = plan
        .into_iter()
        .map(|(train_style, test_style, sum, data, k)| {
            move || -> Result<SubRun> {
                let base = pipeline(sum, tra, vocab, options.summary_max_len)?;
                let (_, report, metrics) = pipeline_run(&base, data, options, k, seed, options.train.clone())?;
                let mut run = SubRun::new(
                    format!("train{train_style}-test{test_style}-k{k}"),
                    "pipeline",
                    k,
                    seed,
                    metrics,
                );
                run.report = report;
                run.extra.insert("train_style".into(), json!(train_style));
                run.extra.insert("test_style".into(), json!(test_style));
                Ok(run)
            }
        })
        .collect();
    let runs = run_parallel(jobs, work)?;
    finish("cross-domain", out, options, runs)
}

/// The source-only direct model asked for target-language output, next to
/// the zero-shot pipeline, followed by both systems' shot curves.
pub fn forgetting_demo(
    mono_only: &Seq2SeqModel<f32>,
    sum: &Seq2SeqModel<f32>,
    tra: &Seq2SeqModel<f32>,
    data: &Dataset,
    vocab: Vocab,
    options: &ExperimentOptions,
    jobs: usize,
    out: &Path,
) -> Result<ExperimentOutput> {
    let curve = shot_curve(sum, tra, Some(mono_only), data, vocab, options, jobs, &out.join("shot-curve"))?;
    let mut runs = Vec::new();
    for r in &curve.runs {
        let mut r = r.clone();
        if r.system == "direct" {
            r.system = "direct-mono-only".into();
            r.name = r.name.replacen("direct", "direct-mono-only", 1);
        }
        runs.push(r);
    }
    finish("forgetting-demo", out, options, runs)
}
