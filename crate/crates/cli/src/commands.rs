use std::path::{Path, PathBuf};

use serde_json::json;

use softpipe::diagnostics::pipeline_gradcheck;
use softpipe::eval::{evaluate, format_table, samples_csv, time_inference, System};
use softpipe::experiment::{self, ExperimentOutput};
use softpipe::model::{load_checkpoint, save_checkpoint, Seq2SeqModel};
use softpipe::pipeline::{load_pipeline, save_pipeline, SumTraPipeline};
use softpipe::tasks::{gen_dataset, Dataset, Split, ToyTaskSpec, XlsRecord};
use softpipe::train::{
    finetune, generate_backtranslations, pretrain_sum, pretrain_tra, train_direct_baseline, Direction, RunReport,
    TrainConfig,
};
use softpipe::{Error, Result};

use crate::config::{ExperimentConfig, SEED_ENV};
use crate::workdir::Workdir;
use crate::{Cli, Command, ExperimentName};

// offsets keep the modules of one run from sharing an initialization
const ROLE_SUM: u64 = 0;
const ROLE_TRA_FORWARD: u64 = 1;
const ROLE_TRA_REVERSE: u64 = 2;
const ROLE_DIRECT: u64 = 3;

fn init_seed(cfg: &ExperimentConfig, role: u64) -> u64 {
    cfg.seed.wrapping_mul(1000).wrapping_add(role)
}

pub fn run(cli: Cli) -> Result<u8> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &cli.sets, std::env::var(SEED_ENV).ok())?;
    let wd = Workdir::new(cli.workdir, cfg);
    let command = resolve_paths(&wd, cli.command);
    match command {
        Command::GenData { style, spec, sizes, out } => gen_data(&wd, style.map(Into::into), spec, sizes, out),
        Command::TrainSum { dataset, out } => train_sum(&wd, &dataset, out),
        Command::TrainTra { direction, dataset, out } => train_tra(&wd, direction, &dataset, out),
        Command::TrainDirect { regime, dataset, out } => {
            let data = wd.load_dataset(&dataset)?;
            let mut model = Seq2SeqModel::new(wd.cfg().model.clone(), init_seed(wd.cfg(), ROLE_DIRECT))?;
            let report = train_direct_baseline(&mut model, &train_split(&data), &val_split(&data), &wd.cfg().pretrain, regime)?;
            finish_pretraining(&wd, &model, report, out.unwrap_or_else(|| wd.ckpt_path(&format!("direct-{regime}"))))
        }
        Command::Backtranslate { dataset, reverse_ckpt } => backtranslate(&wd, &dataset, reverse_ckpt),
        Command::Finetune {
            sum_ckpt,
            tra_ckpt,
            shots,
            alpha,
            freeze,
            dataset,
            out,
        } => {
            let cfg = TrainConfig {
                alpha: alpha.unwrap_or(wd.cfg().finetune.alpha),
                freeze_strategy: freeze.unwrap_or(wd.cfg().finetune.freeze_strategy),
                ..wd.cfg().finetune.clone()
            };
            run_finetune(&wd, sum_ckpt, tra_ckpt, shots, cfg, &dataset, out)
        }
        Command::Eval {
            ckpt,
            pipeline_ckpt,
            sum_ckpt,
            tra_ckpt,
            dataset,
            mode,
            timing,
            repetitions,
            limit,
        } => {
            let data = wd.load_dataset(&dataset)?;
            let mut test = data.split_owned(Split::Test);
            if let Some(n) = limit {
                test.truncate(n);
            }
            let vocab = wd.cfg().task.vocab();
            let cap = wd.cfg().summary_max_len();
            let (label, direct, pipeline) = if let Some(path) = ckpt {
                (stem(&path), Some(load_checkpoint(&path)?), None)
            } else if let Some(path) = pipeline_ckpt {
                (format!("{}-{mode}", stem(&path)), None, Some(load_pipeline(&path)?))
            } else {
                let sum = sum_path(&wd, sum_ckpt, &dataset)?;
                let tra = tra_path(&wd, tra_ckpt)?;
                let p = SumTraPipeline::new(load_checkpoint(&sum)?, load_checkpoint(&tra)?, vocab, cap)?;
                (format!("zero-shot-{}-{mode}", stem(&sum)), None, Some(p))
            };
            let system = || match (&direct, &pipeline) {
                (Some(model), _) => System::Direct { model, max_len: cap },
                (_, Some(p)) => System::Pipeline { pipeline: p, mode },
                _ => unreachable!("one system is always built"),
            };
            let evaluation = evaluate(system(), &test, &vocab)?;
            let timing = if timing { Some(time_inference(system(), &test, repetitions)?) } else { None };
            let body = json!({
                "system": label,
                "dataset": dataset,
                "mode": mode,
                "metrics": evaluation.report,
                "timing": timing,
            });
            let path = wd.write_report(&format!("eval-{label}.json"), "eval", &body)?;
            wd.write_text(&path.with_extension("samples.csv"), &samples_csv(&evaluation.samples))?;
            print!("{}", format_table(&[(label, evaluation.report)]));
            if let Some(t) = timing {
                println!("per-sample time {:.6}s (variance {:.3e})", t.per_sample_time_s, t.variance);
            }
            Ok(0)
        }
        Command::Gradcheck { seed, alpha } => {
            let report = pipeline_gradcheck(seed, alpha)?;
            wd.write_report(&format!("gradcheck-s{seed}.json"), "gradcheck", &report)?;
            println!(
                "max relative error {:.3e} over {} parameters in {:.2}s: {}",
                report.max_relative_error,
                report.parameters,
                report.seconds,
                if report.passed { "ok" } else { "FAILED" }
            );
            Ok(if report.passed { 0 } else { 3 })
        }
        Command::Experiment {
            name,
            dataset,
            other_dataset,
            sum_ckpt,
            tra_ckpt,
            direct_ckpt,
        } => {
            let out = run_experiment(&wd, cli.jobs, name, &dataset, &other_dataset, sum_ckpt, tra_ckpt, direct_ckpt)?;
            print!("{}", out.table);
            println!("wrote {} sub-runs to {}", out.runs.len(), out.dir.display());
            Ok(0)
        }
    }
}

fn resolve_paths(wd: &Workdir, command: Command) -> Command {
    match command {
        Command::GenData { style, spec, sizes, out } => Command::GenData {
            style,
            spec,
            sizes,
            out: wd.resolve(out),
        },
        Command::TrainSum { dataset, out } => Command::TrainSum { dataset, out: wd.resolve(out) },
        Command::TrainTra { direction, dataset, out } => Command::TrainTra {
            direction,
            dataset,
            out: wd.resolve(out),
        },
        Command::TrainDirect { regime, dataset, out } => Command::TrainDirect {
            regime,
            dataset,
            out: wd.resolve(out),
        },
        Command::Backtranslate { dataset, reverse_ckpt } => Command::Backtranslate {
            dataset,
            reverse_ckpt: wd.resolve(reverse_ckpt),
        },
        Command::Finetune {
            sum_ckpt,
            tra_ckpt,
            shots,
            alpha,
            freeze,
            dataset,
            out,
        } => Command::Finetune {
            sum_ckpt: wd.resolve(sum_ckpt),
            tra_ckpt: wd.resolve(tra_ckpt),
            shots,
            alpha,
            freeze,
            dataset,
            out: wd.resolve(out),
        },
        Command::Eval {
            ckpt,
            pipeline_ckpt,
            sum_ckpt,
            tra_ckpt,
            dataset,
            mode,
            timing,
            repetitions,
            limit,
        } => Command::Eval {
            ckpt: wd.resolve(ckpt),
            pipeline_ckpt: wd.resolve(pipeline_ckpt),
            sum_ckpt: wd.resolve(sum_ckpt),
            tra_ckpt: wd.resolve(tra_ckpt),
            dataset,
            mode,
            timing,
            repetitions,
            limit,
        },
        Command::Experiment {
            name,
            dataset,
            other_dataset,
            sum_ckpt,
            tra_ckpt,
            direct_ckpt,
        } => Command::Experiment {
            name,
            dataset,
            other_dataset,
            sum_ckpt: wd.resolve(sum_ckpt),
            tra_ckpt: wd.resolve(tra_ckpt),
            direct_ckpt: wd.resolve(direct_ckpt),
        },
        other => other,
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn train_split(data: &Dataset) -> Vec<XlsRecord> {
    data.split_owned(Split::Train)
}

fn val_split(data: &Dataset) -> Vec<XlsRecord> {
    data.split_owned(Split::Val)
}

fn sum_path(wd: &Workdir, given: Option<PathBuf>, dataset: &str) -> Result<PathBuf> {
    match given {
        Some(p) => wd.require(p, &format!("softpipe train-sum --dataset {dataset} --out <path>")),
        None => wd.require(
            wd.ckpt_path(&format!("sum-{dataset}")),
            &format!("softpipe train-sum --dataset {dataset}"),
        ),
    }
}

fn tra_path(wd: &Workdir, given: Option<PathBuf>) -> Result<PathBuf> {
    match given {
        Some(p) => wd.require(p, "softpipe train-tra --direction forward --out <path>"),
        None => wd.require(wd.ckpt_path("tra-forward"), "softpipe train-tra --direction forward"),
    }
}

fn gen_data(
    wd: &Workdir,
    style: Option<softpipe::tasks::Style>,
    spec: Option<PathBuf>,
    sizes: Option<String>,
    out: Option<PathBuf>,
) -> Result<u8> {
    let mut task = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
            serde_json::from_str::<ToyTaskSpec>(&text)?
        }
        None => wd.cfg().task.clone(),
    };
    if let Some(s) = style {
        task = task.with_style(s);
    }
    let mut n = wd.cfg().data.clone();
    if let Some(sizes) = sizes {
        let parts: Vec<usize> = sizes
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Contract(format!("--sizes expects train,val,test counts, got `{sizes}`")))?;
        let [a, b, c] = parts[..] else {
            return Err(Error::Contract(format!("--sizes expects three counts, got `{sizes}`")));
        };
        (n.n_train, n.n_val, n.n_test) = (a, b, c);
    }
    let name = task.style.to_string().to_lowercase();
    let path = out.unwrap_or_else(|| wd.dataset_path(&name));
    let data = gen_dataset(&task, n.n_train, n.n_val, n.n_test)?;
    wd.ensure_parent(&path)?;
    data.save_jsonl(&path)?;
    let body = json!({ "path": path, "task": task, "sizes": n, "records": data.records.len() });
    wd.write_report(&format!("gen-data-{}.json", stem(&path)), "gen-data", &body)?;
    println!("wrote {} records to {}", data.records.len(), path.display());
    Ok(0)
}

fn finish_pretraining(wd: &Workdir, model: &Seq2SeqModel<f32>, report: RunReport, out: PathBuf) -> Result<u8> {
    wd.ensure_parent(&out)?;
    save_checkpoint(model, &out)?;
    let kind = report.kind.clone();
    wd.write_report(&report.file_name(wd.cfg().pretrain.seed), &kind, &report)?;
    println!(
        "{kind}: best epoch {} (val loss {:.4}), val token accuracy {}, saved {}",
        report.best_epoch,
        report.best_val_loss.unwrap_or(f64::NAN),
        report.extra.get("val_token_accuracy").cloned().unwrap_or_default(),
        out.display()
    );
    if report.no_improvement {
        log::warn!("{kind}: validation loss never improved on the initial model");
    }
    Ok(0)
}

fn train_sum(wd: &Workdir, dataset: &str, out: Option<PathBuf>) -> Result<u8> {
    let data = wd.load_dataset(dataset)?;
    let mut model = Seq2SeqModel::new(wd.cfg().model.clone(), init_seed(wd.cfg(), ROLE_SUM))?;
    let report = pretrain_sum(&mut model, &train_split(&data), &val_split(&data), &wd.cfg().pretrain)?;
    finish_pretraining(wd, &model, report, out.unwrap_or_else(|| wd.ckpt_path(&format!("sum-{dataset}"))))
}

fn train_tra(wd: &Workdir, direction: Direction, dataset: &str, out: Option<PathBuf>) -> Result<u8> {
    let data = wd.load_dataset(dataset)?;
    let role = match direction {
        Direction::Forward => ROLE_TRA_FORWARD,
        Direction::Reverse => ROLE_TRA_REVERSE,
    };
    let mut model = Seq2SeqModel::new(wd.cfg().model.clone(), init_seed(wd.cfg(), role))?;
    let report = pretrain_tra(&mut model, &train_split(&data), &val_split(&data), &wd.cfg().pretrain, direction)?;
    let name = match direction {
        Direction::Forward => "tra-forward",
        Direction::Reverse => "tra-reverse",
    };
    finish_pretraining(wd, &model, report, out.unwrap_or_else(|| wd.ckpt_path(name)))
}

fn backtranslate(wd: &Workdir, dataset: &str, reverse_ckpt: Option<PathBuf>) -> Result<u8> {
    let mut data = wd.load_dataset(dataset)?;
    let path = match reverse_ckpt {
        Some(p) => wd.require(p, "softpipe train-tra --direction reverse --out <path>")?,
        None => wd.require(wd.ckpt_path("tra-reverse"), "softpipe train-tra --direction reverse")?,
    };
    let reverse = load_checkpoint(&path)?;
    let report = generate_backtranslations(&mut data.records, &reverse, &wd.cfg().task.vocab(), wd.cfg().summary_max_len())?;
    data.save_jsonl(&wd.dataset_path(dataset))?;
    wd.write_report(&format!("backtranslate-{dataset}.json"), "backtranslate", &report)?;
    println!(
        "filled {} records ({} skipped, {} unterminated), source-language purity {:.4}",
        report.filled, report.skipped_missing, report.unterminated, report.language_purity
    );
    if report.flagged {
        log::warn!("back-translations are not purely source-language");
    }
    Ok(0)
}

fn load_data_for(wd: &Workdir, dataset: &str, alpha: f64) -> Result<Dataset> {
    if alpha > 0.0 {
        wd.load_backtranslated(dataset)
    } else {
        wd.load_dataset(dataset)
    }
}

fn run_finetune(
    wd: &Workdir,
    sum_ckpt: Option<PathBuf>,
    tra_ckpt: Option<PathBuf>,
    shots: usize,
    cfg: TrainConfig,
    dataset: &str,
    out: Option<PathBuf>,
) -> Result<u8> {
    let data = load_data_for(wd, dataset, cfg.alpha)?;
    let sum = load_checkpoint(&sum_path(wd, sum_ckpt, dataset)?)?;
    let tra = load_checkpoint(&tra_path(wd, tra_ckpt)?)?;
    let vocab = wd.cfg().task.vocab();
    let mut pipeline = SumTraPipeline::new(sum, tra, vocab, wd.cfg().summary_max_len())?;
    let train = data.shots(shots, cfg.seed);
    let mut val = val_split(&data);
    val.truncate(wd.cfg().experiment.val_limit);
    let mut report = finetune(&mut pipeline, &train, &val, &cfg)?;
    let mut test = data.split_owned(Split::Test);
    test.truncate(wd.cfg().experiment.test_limit);
    report.metrics = Some(
        evaluate(
            System::Pipeline {
                pipeline: &pipeline,
                mode: Default::default(),
            },
            &test,
            &vocab,
        )?
        .report,
    );
    let name = format!(
        "finetune-{dataset}-k{shots}-a{:.2}-{}-s{}",
        cfg.alpha, cfg.freeze_strategy, cfg.seed
    );
    let out = out.unwrap_or_else(|| wd.ckpts().join(format!("{name}.pipeline")));
    wd.ensure_parent(&out)?;
    save_pipeline(&pipeline, &out)?;
    wd.write_report(&format!("{name}.json"), "finetune", &report)?;
    if let Some(m) = &report.metrics {
        print!("{}", format_table(&[(name, *m)]));
    }
    println!("saved {}", out.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn run_experiment(
    wd: &Workdir,
    jobs: usize,
    name: ExperimentName,
    dataset: &str,
    other_dataset: &str,
    sum_ckpt: Option<PathBuf>,
    tra_ckpt: Option<PathBuf>,
    direct_ckpt: Option<PathBuf>,
) -> Result<ExperimentOutput> {
    let cfg = wd.cfg();
    let options = cfg.experiment_options();
    let vocab = cfg.task.vocab();
    let out = wd.reports().join("experiments").join(name.as_str());
    // check every prerequisite before any training starts
    let data = load_data_for(wd, dataset, cfg.finetune.alpha)?;
    let sum = load_checkpoint(&sum_path(wd, sum_ckpt, dataset)?)?;
    let tra = load_checkpoint(&tra_path(wd, tra_ckpt)?)?;
    let direct = || -> Result<Seq2SeqModel<f32>> {
        let path = match &direct_ckpt {
            Some(p) => wd.require(p.clone(), "softpipe train-direct --regime mono-only --out <path>")?,
            None => wd.require(wd.ckpt_path("direct-mono-only"), "softpipe train-direct --regime mono-only")?,
        };
        load_checkpoint(&path)
    };
    match name {
        ExperimentName::ShotCurve => {
            let direct = direct()?;
            experiment::shot_curve(&sum, &tra, Some(&direct), &data, vocab, &options, jobs, &out)
        }
        ExperimentName::AlphaSweep => experiment::alpha_sweep(&sum, &tra, &data, vocab, &options, jobs, &out),
        ExperimentName::FreezeAblation => experiment::freeze_ablation(&sum, &tra, &data, vocab, &options, jobs, &out),
        ExperimentName::SoftVsHard => experiment::soft_vs_hard(&sum, &tra, &data, vocab, &options, &out),
        ExperimentName::CrossDomain => {
            let other = load_data_for(wd, other_dataset, cfg.finetune.alpha)?;
            let other_sum = load_checkpoint(&sum_path(wd, None, other_dataset)?)?;
            experiment::cross_domain(&sum, &other_sum, &tra, &data, &other, vocab, &options, jobs, &out)
        }
        ExperimentName::ForgettingDemo => {
            let direct = direct()?;
            experiment::forgetting_demo(&direct, &sum, &tra, &data, vocab, &options, jobs, &out)
        }
    }
}
