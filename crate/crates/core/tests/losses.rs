mod common;

use adda::losses::{
    discriminator_loss_from_logits, mapping_loss_confusion_from_logits, mapping_loss_gan_from_logits,
    mapping_loss_minimax_from_logits,
};
use adda::tensor::{Tape, Tensor};
use common::reference as r;
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-30.0f32..30.0, 1..40)
}

fn column(tape: &mut Tape, v: &[f32]) -> adda::tensor::Var {
    tape.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap())
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn minimax_is_the_negated_discriminator_loss(s in logits(), t in logits()) {
        let mut tape = Tape::new();
        let (ls, lt) = (column(&mut tape, &s), column(&mut tape, &t));
        let d = discriminator_loss_from_logits(&mut tape, ls, lt).unwrap().value(&tape);
        let m = mapping_loss_minimax_from_logits(&mut tape, ls, lt).unwrap().value(&tape);
        prop_assert!((d as f64 + m as f64).abs() <= 1e-7, "{d} + {m}");
    }
}

proptest! {
    #[test]
    fn losses_match_the_double_precision_oracle(s in logits(), t in logits()) {
        let mut tape = Tape::new();
        let (ls, lt) = (column(&mut tape, &s), column(&mut tape, &t));
        let (s64, t64) = (f64s(&s), f64s(&t));
        let cases = [
            (discriminator_loss_from_logits(&mut tape, ls, lt).unwrap(), r::disc_loss(&s64, &t64)),
            (mapping_loss_gan_from_logits(&mut tape, lt).unwrap(), r::gan_loss(&t64)),
            (mapping_loss_confusion_from_logits(&mut tape, &[ls, lt]).unwrap(), r::confusion_loss(&[&s64, &t64])),
        ];
        for (got, want) in cases {
            let v = got.value(&tape) as f64;
            prop_assert!(v.is_finite());
            prop_assert!((v - want).abs() <= 1e-5 * want.abs().max(1.0), "{:?}: {v} vs {want}", got.kind);
        }
    }

    #[test]
    fn confusion_ignores_domain_tags(s in logits(), t in logits()) {
        let mut tape = Tape::new();
        let (ls, lt) = (column(&mut tape, &s), column(&mut tape, &t));
        let a = mapping_loss_confusion_from_logits(&mut tape, &[ls, lt]).unwrap().value(&tape);
        let b = mapping_loss_confusion_from_logits(&mut tape, &[lt, ls]).unwrap().value(&tape);
        prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
    }

    #[test]
    fn duplicating_a_batch_keeps_every_loss(s in logits(), t in logits()) {
        let twice = |v: &[f32]| v.iter().chain(v).copied().collect::<Vec<_>>();
        let mut tape = Tape::new();
        let (ls, lt) = (column(&mut tape, &s), column(&mut tape, &t));
        let (ls2, lt2) = (column(&mut tape, &twice(&s)), column(&mut tape, &twice(&t)));
        let pairs = [
            (discriminator_loss_from_logits(&mut tape, ls, lt).unwrap(), discriminator_loss_from_logits(&mut tape, ls2, lt2).unwrap()),
            (mapping_loss_gan_from_logits(&mut tape, lt).unwrap(), mapping_loss_gan_from_logits(&mut tape, lt2).unwrap()),
            (mapping_loss_confusion_from_logits(&mut tape, &[ls, lt]).unwrap(), mapping_loss_confusion_from_logits(&mut tape, &[ls2, lt2]).unwrap()),
        ];
        for (a, b) in pairs {
            let (a, b) = (a.value(&tape), b.value(&tape));
            prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn gan_and_minimax_push_the_same_way_at_an_uninformed_discriminator() {
    // D ≡ 0.5 means zero logits; both mapping losses should raise the target logit
    let mut tape = Tape::new();
    let ls = tape.input(Tensor::zeros(&[4, 1]));
    let lt = tape.input(Tensor::zeros(&[4, 1]));
    let gan = mapping_loss_gan_from_logits(&mut tape, lt).unwrap();
    tape.backward(gan.var).unwrap();
    let g_gan = tape.grad(lt).unwrap().to_vec();

    let mut tape = Tape::new();
    let ls2 = tape.input(Tensor::zeros(&[4, 1]));
    let lt2 = tape.input(Tensor::zeros(&[4, 1]));
    let mm = mapping_loss_minimax_from_logits(&mut tape, ls2, lt2).unwrap();
    tape.backward(mm.var).unwrap();
    let g_mm = tape.grad(lt2).unwrap().to_vec();
    let _ = ls;

    let ratio = g_gan[0] / g_mm[0];
    assert!(ratio > 0.0);
    for (a, b) in g_gan.iter().zip(&g_mm) {
        assert!(*a < 0.0);
        assert!((a / b - ratio).abs() < 1e-6);
    }
}
