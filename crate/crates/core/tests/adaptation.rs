use adda::adaptation::{
    adapt_adversarial, adapt_adversarial_observed, evaluate_target, pretrain_source, run_method_matrix, AdaptMethod,
    EvalReport, MappingLoss, TrainSchedule, SOURCE_ONLY,
};
use adda::data::{synth_shift, ShiftData, ShiftSpec};
use adda::error::Error;
use adda::models::{
    apply_tying_plan, fingerprint, init_target_from_source, ClassifierHead, Discriminator, Encoder, LeNetSpec,
    Module, Role, TyingPlan,
};
use adda::tensor::OptimizerKind;
use proptest::prelude::*;

const SMALL: LeNetSpec = LeNetSpec {
    conv1: 4,
    conv2: 6,
    hidden: 24,
};

fn small_shift(seed: u64) -> ShiftData {
    synth_shift(&ShiftSpec {
        source_cap: Some(96),
        target_cap: Some(96),
        ..ShiftSpec::synth_rot(seed)
    })
    .unwrap()
}

fn small_schedule(adapt_iters: usize) -> TrainSchedule {
    TrainSchedule {
        pretrain_iters: 20,
        adapt_iters,
        batch_size: 16,
        log_every: 5,
        seed: 4,
        ..TrainSchedule::synthetic()
    }
}

struct Models {
    source: Encoder,
    head: ClassifierHead,
    target: Encoder,
    disc: Discriminator,
}

fn models(data: &ShiftData, sched: &TrainSchedule, plan: &TyingPlan) -> Models {
    let source = Encoder::lenet(SMALL, Role::Source, 1);
    let head = ClassifierHead::new(SMALL.hidden, data.source.num_classes(), 1).unwrap();
    pretrain_source(&source, &head, &data.source, sched).unwrap();
    let mut target = init_target_from_source(&source);
    apply_tying_plan(&source, &mut target, plan).unwrap();
    let disc = Discriminator::new(SMALL.hidden, 16, 1);
    Models {
        source,
        head,
        target,
        disc,
    }
}

#[test]
fn adda_leaves_source_encoder_and_classifier_bit_identical() {
    let data = small_shift(1);
    let sched = small_schedule(1000);
    let m = models(&data, &sched, &TyingPlan::AllUntied);
    let before = (fingerprint(&m.source), fingerprint(&m.head), fingerprint(&m.target));
    adapt_adversarial(
        &m.source,
        &m.head,
        &m.target,
        &m.disc,
        &AdaptMethod::adda(),
        &data.source,
        &data.target,
        &sched,
    )
    .unwrap();
    assert_eq!(fingerprint(&m.source), before.0);
    assert_eq!(fingerprint(&m.head), before.1);
    assert_ne!(fingerprint(&m.target), before.2, "the target mapping should move");
}

#[test]
fn shared_runs_keep_both_encoders_identical_every_iteration() {
    let data = small_shift(2);
    let sched = small_schedule(30);
    for method in [AdaptMethod::gradient_reversal(), AdaptMethod::domain_confusion()] {
        let m = models(&data, &sched, &method.tying);
        let start = fingerprint(&m.source);
        let mut seen = 0;
        adapt_adversarial_observed(
            &m.source,
            &m.head,
            &m.target,
            &m.disc,
            &method,
            &data.source,
            &data.target,
            &sched,
            &mut |_, s, t, _| {
                assert_eq!(fingerprint(s), fingerprint(t));
                seen += 1;
            },
        )
        .unwrap();
        assert_eq!(seen, 30);
        assert_ne!(fingerprint(&m.source), start, "{} never updated the shared mapping", method.label());
    }
}

fn frozen_lr() -> OptimizerKind {
    OptimizerKind::Adam {
        lr: 0.0,
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    }
}

#[test]
fn discriminator_steps_touch_no_encoder_and_mapping_steps_touch_no_discriminator() {
    let data = small_shift(3);
    for method in AdaptMethod::presets() {
        // with the mapping optimizer stalled only discriminator steps can change anything
        let sched = TrainSchedule {
            mapping_opt: frozen_lr(),
            symmetric_mapping_opt: None,
            ..small_schedule(10)
        };
        let m = models(&data, &sched, &method.tying);
        let enc = (fingerprint(&m.source), fingerprint(&m.target), fingerprint(&m.head));
        let d0 = fingerprint(&m.disc);
        adapt_adversarial(&m.source, &m.head, &m.target, &m.disc, &method, &data.source, &data.target, &sched).unwrap();
        assert_eq!((fingerprint(&m.source), fingerprint(&m.target), fingerprint(&m.head)), enc);
        assert_ne!(fingerprint(&m.disc), d0);

        let sched = TrainSchedule {
            disc_opt: frozen_lr(),
            ..small_schedule(10)
        };
        let m = models(&data, &sched, &method.tying);
        let (d0, t0) = (fingerprint(&m.disc), fingerprint(&m.target));
        adapt_adversarial(&m.source, &m.head, &m.target, &m.disc, &method, &data.source, &data.target, &sched).unwrap();
        assert_eq!(fingerprint(&m.disc), d0, "{}", method.label());
        assert_ne!(fingerprint(&m.target), t0);
    }
}

#[test]
fn inconsistent_methods_are_configuration_errors() {
    let data = small_shift(4);
    let sched = small_schedule(1);
    let bad = AdaptMethod {
        tying: TyingPlan::AllShared,
        ..AdaptMethod::adda()
    };
    let m = models(&data, &sched, &TyingPlan::AllShared);
    let err = adapt_adversarial(&m.source, &m.head, &m.target, &m.disc, &bad, &data.source, &data.target, &sched)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    // plan says shared but the encoders were never tied
    let m = models(&data, &sched, &TyingPlan::AllUntied);
    let err = adapt_adversarial(
        &m.source,
        &m.head,
        &m.target,
        &m.disc,
        &AdaptMethod::gradient_reversal(),
        &data.source,
        &data.target,
        &sched,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zero_pretrain_iterations_change_nothing() {
    let data = small_shift(5);
    let source = Encoder::lenet(SMALL, Role::Source, 1);
    let head = ClassifierHead::new(SMALL.hidden, 4, 1).unwrap();
    let before = (fingerprint(&source), fingerprint(&head));
    let sched = TrainSchedule {
        pretrain_iters: 0,
        ..small_schedule(0)
    };
    pretrain_source(&source, &head, &data.source, &sched).unwrap();
    assert_eq!((fingerprint(&source), fingerprint(&head)), before);
}

#[test]
fn method_matrix_has_a_baseline_plus_one_row_per_method_and_is_reproducible() {
    let data = small_shift(6);
    let sched = small_schedule(10);
    let run = || run_method_matrix(&data, &AdaptMethod::presets(), &sched, SMALL).unwrap();
    let a = run();
    let names: Vec<&str> = a.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, [SOURCE_ONLY, "minimax", "confusion", "gan"]);
    // the baseline only went through pretraining
    assert!(a.source_only().curves.iter().all(|c| c.stage == "pretrain"));
    let b = run();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.report, y.report);
        assert_eq!(x.curves, y.curves);
    }
}

#[test]
fn evaluation_counts_add_up() {
    let data = small_shift(7);
    let enc = Encoder::lenet(SMALL, Role::Target, 2);
    let head = ClassifierHead::new(SMALL.hidden, 4, 2).unwrap();
    let r = evaluate_target(&enc, &head, &data.target_eval).unwrap();
    let counts = data.target_eval.class_counts();
    for (row, &n) in r.confusion.iter().zip(&counts) {
        assert_eq!(row.iter().sum::<usize>(), n);
    }
    let trace: usize = (0..4).map(|k| r.confusion[k][k]).sum();
    assert_eq!(r.overall, trace as f64 / data.target_eval.len() as f64);
    assert_eq!(enc.params().len(), 6);
}

proptest! {
    #[test]
    fn overall_accuracy_is_trace_over_total(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = EvalReport::from_predictions(&labels, &preds, 5).unwrap();
        let trace: usize = (0..5).map(|k| r.confusion[k][k]).sum();
        let total: usize = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total, labels.len());
        prop_assert!((r.overall - trace as f64 / total as f64).abs() < 1e-12);
        for k in 0..5 {
            let n: usize = r.confusion[k].iter().sum();
            if n == 0 {
                prop_assert!(r.per_class[k].is_nan());
            } else {
                prop_assert!((r.per_class[k] - r.confusion[k][k] as f64 / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mapping_loss_names_round_trip(i in 0usize..3) {
        let loss = [MappingLoss::Minimax, MappingLoss::Gan, MappingLoss::Confusion][i];
        let back: MappingLoss = loss.to_string().parse().unwrap();
        prop_assert_eq!(back, loss);
        prop_assert!(AdaptMethod::preset_for(loss).validate().is_ok());
    }
}
