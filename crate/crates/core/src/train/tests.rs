use super::*;
use crate::diagnostics::{tiny_model_config, tiny_task_spec};
use crate::model::Param;
use crate::tasks::{gen_dataset, Dataset, Split, XlsRecord};
use crate::tensor::Tensor;

fn tiny_data() -> Dataset {
    gen_dataset(&tiny_task_spec(), 24, 8, 0).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 3,
        early_stopping_patience: 1,
        grad_accumulation: 4,
        ..TrainConfig::default()
    }
}

fn tiny_pipeline() -> SumTraPipeline<f32> {
    let sum = Seq2SeqModel::new(tiny_model_config(), 1).unwrap();
    let tra = Seq2SeqModel::new(tiny_model_config(), 2).unwrap();
    SumTraPipeline::new(sum, tra, tiny_task_spec().vocab(), 6).unwrap()
}

fn with_oracle_backtranslations(records: &[XlsRecord]) -> Vec<XlsRecord> {
    records
        .iter()
        .map(|r| XlsRecord {
            backtranslation: Some(r.summary_src.clone()),
            ..r.clone()
        })
        .collect()
}

fn param_bytes(model: &Seq2SeqModel<f32>) -> Vec<u32> {
    model
        .params()
        .iter()
        .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn config_validation_and_presets() {
    TrainConfig::default().validate().unwrap();
    assert_eq!(TrainConfig::pretraining().warmup_steps, 500);
    assert_eq!(TrainConfig::finetuning().warmup_steps, 0);
    assert_eq!(TrainConfig::default().with_full_scale_learning_rate().learning_rate, 3e-5);
    let bad = TrainConfig {
        early_stopping_patience: 10,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { alpha: 1.5, ..TrainConfig::default() }.validate().is_err());
    let json = serde_json::json!({"learning_rate": 1e-3, "bogus": 1});
    assert!(serde_json::from_value::<TrainConfig>(json).is_err());
}

#[test]
fn warmup_is_linear() {
    let cfg = TrainConfig {
        warmup_steps: 4,
        learning_rate: 1.0,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..6).map(|s| cfg.learning_rate_at(s)).collect();
    assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
}

#[test]
fn adamw_first_step_matches_hand_computation() {
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(&cfg);
    let mut params = vec![
        Param {
            name: "a".into(),
            tensor: Tensor::new([2], vec![1.0f32, -2.0]).unwrap(),
        },
        Param {
            name: "b".into(),
            tensor: Tensor::new([1], vec![5.0f32]).unwrap(),
        },
    ];
    opt.step(&mut params, &[Some(vec![0.5, -0.25]), None], 0.1);
    // first bias-corrected step is lr·g/(|g| + eps) = ±lr
    let expect = |p: f64, g: f64| p * (1.0 - 0.1 * 0.01) - 0.1 * g / (g.abs() + 1e-8);
    assert!((params[0].tensor.data()[0] as f64 - expect(1.0, 0.5)).abs() < 1e-6);
    assert!((params[0].tensor.data()[1] as f64 - expect(-2.0, -0.25)).abs() < 1e-6);
    assert_eq!(params[1].tensor.data(), &[5.0]);
}

#[test]
fn zero_learning_rate_stops_after_patience_plus_one() {
    let data = tiny_data();
    let mut model = Seq2SeqModel::<f32>::new(tiny_model_config(), 3).unwrap();
    let before = param_bytes(&model);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 10,
        early_stopping_patience: 2,
        ..TrainConfig::default()
    };
    let report = pretrain_sum(&mut model, &data.split_owned(Split::Train), &data.split_owned(Split::Val), &cfg).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert!(report.no_improvement);
    assert_eq!(report.best_epoch, 1);
    assert_eq!(param_bytes(&model), before);
}

#[test]
fn training_is_deterministic_and_selects_best_epoch() {
    let data = tiny_data();
    let run = || {
        let mut model = Seq2SeqModel::<f32>::new(tiny_model_config(), 4).unwrap();
        let r = pretrain_sum(&mut model, &data.split_owned(Split::Train), &data.split_owned(Split::Val), &quick()).unwrap();
        (r, param_bytes(&model))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    let curve = |r: &RunReport| r.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    assert_eq!(curve(&a), curve(&b));
    assert_eq!(pa, pb);
    let best = a
        .epochs
        .iter()
        .filter_map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_loss, Some(best));
    assert_eq!(a.epochs[a.best_epoch - 1].val_loss, Some(best));
    assert!(!a.no_improvement);
    assert!(a.file_name(0).starts_with("pretrain-sum-"));
}

#[test]
fn direction_flips_fields() {
    let r = &tiny_data().records[0];
    let f = Example::translation(r, Direction::Forward);
    let b = Example::translation(r, Direction::Reverse);
    assert_eq!((f.src.clone(), f.tgt.clone()), (r.summary_src.clone(), r.summary_tgt.clone()));
    assert_eq!((b.src, b.tgt), (f.tgt, f.src));
}

#[test]
fn regimes_share_the_architecture() {
    let data = tiny_data();
    let cfg = TrainConfig {
        max_epochs: 2,
        early_stopping_patience: 1,
        ..quick()
    };
    let mut echoes = Vec::new();
    for regime in [Regime::Xls, Regime::MonoThenXls, Regime::MonoOnly] {
        let mut model = Seq2SeqModel::<f32>::new(tiny_model_config(), 5).unwrap();
        let r = train_direct_baseline(&mut model, &data.split_owned(Split::Train), &data.split_owned(Split::Val), &cfg, regime)
            .unwrap();
        echoes.push(r.config["model"].clone());
        let phases: std::collections::BTreeSet<_> = r.epochs.iter().map(|e| e.phase.clone()).collect();
        assert_eq!(phases.len(), if regime == Regime::MonoThenXls { 2 } else { 1 });
    }
    assert!(echoes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn backtranslation_skips_missing_references_and_flags_impurity() {
    let data = tiny_data();
    let mut records = data.split_owned(Split::Train);
    records[0].summary_tgt.clear();
    let fresh = Seq2SeqModel::<f32>::new(tiny_model_config(), 6).unwrap();
    let vocab = tiny_task_spec().vocab();
    let report = generate_backtranslations(&mut records, &fresh, &vocab, 6).unwrap();
    assert_eq!(report.skipped_missing, 1);
    assert_eq!(report.filled, records.len() - 1);
    assert!(records[0].backtranslation.is_none());
    assert!(report.flagged && report.language_purity < 1.0);
    let mut again = records.clone();
    generate_backtranslations(&mut again, &fresh, &vocab, 6).unwrap();
    assert_eq!(again, records);
}

#[test]
fn finetune_requires_backtranslations_when_alpha_positive() {
    let data = tiny_data();
    let mut pipeline = tiny_pipeline();
    let err = finetune(&mut pipeline, &data.split_owned(Split::Train)[..4], &[], &quick()).unwrap_err();
    assert!(matches!(err, Error::Contract(ref m) if m.contains("backtranslate")));
    assert!(finetune(&mut pipeline, &[], &[], &quick()).is_err());
}

fn finetune_with(strategy: FreezeStrategy, alpha: f64) -> (SumTraPipeline<f32>, SumTraPipeline<f32>, RunReport) {
    let data = tiny_data();
    let shots = with_oracle_backtranslations(&data.split_owned(Split::Train)[..8]);
    let val = with_oracle_backtranslations(&data.split_owned(Split::Val));
    let before = tiny_pipeline();
    let mut after = before.clone();
    let cfg = TrainConfig {
        freeze_strategy: strategy,
        alpha,
        max_epochs: 2,
        early_stopping_patience: 1,
        ..quick()
    };
    let report = finetune(&mut after, &shots, &val, &cfg).unwrap();
    (before, after, report)
}

#[test]
fn freezing_leaves_modules_bitwise_unchanged() {
    let (before, after, _) = finetune_with(FreezeStrategy::SumOnly, 0.5);
    assert_eq!(param_bytes(before.tra()), param_bytes(after.tra()));
    assert_ne!(param_bytes(before.sum()), param_bytes(after.sum()));

    let (before, after, _) = finetune_with(FreezeStrategy::TraOnly, 0.5);
    assert_eq!(param_bytes(before.sum()), param_bytes(after.sum()));
    assert_ne!(param_bytes(before.tra()), param_bytes(after.tra()));

    let (before, after, report) = finetune_with(FreezeStrategy::All, 1.0);
    assert_eq!(param_bytes(before.tra()), param_bytes(after.tra()));
    assert_eq!(report.extra["alpha"], serde_json::json!(1.0));
}
