use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{build_blocks, AuthorRecord, ByteTokenizer, Document};
use crate::human_context::{process_author, PassMode};
use crate::transformer::{ModelConfig, Transformer};

fn scalar(tape: &mut Tape, x: f64) -> Var {
    tape.constant(vec![1], vec![x]).unwrap()
}

fn grit(rule: CombineRule, l_ce: f64, l_mse: f64, e_ce: f64, e_mse: f64) -> f64 {
    let mut tape = Tape::new();
    let (a, b, c, d) = (
        scalar(&mut tape, l_ce),
        scalar(&mut tape, l_mse),
        scalar(&mut tape, e_ce),
        scalar(&mut tape, e_mse),
    );
    let j = combine(&mut tape, rule, a, b, c, d).unwrap();
    tape.scalar(j)
}

fn hung(l: f64, eta: f64) -> f64 {
    let mut tape = Tape::new();
    let (a, b) = (scalar(&mut tape, l), scalar(&mut tape, eta));
    let j = combine_hung(&mut tape, a, b).unwrap();
    tape.scalar(j)
}

#[test]
fn combiner_arithmetic() {
    assert_eq!(hung(4.0, 0.0), 2.0);
    let ln4 = 4f64.ln();
    assert!((hung(4.0, ln4) - (0.5 + 2f64.ln())).abs() < 1e-15);
    for rule in [CombineRule::GritHalved, CombineRule::GritUnhalved] {
        assert_eq!(grit(rule, 2.0, 4.0, 0.0, 0.0), 4.0);
    }
    let ln2 = 2f64.ln();
    assert!((grit(CombineRule::GritHalved, 2.0, 0.0, ln2, 0.0) - (1.0 + 0.5 * ln2)).abs() < 1e-15);
    assert!((grit(CombineRule::GritUnhalved, 2.0, 0.0, ln2, 0.0) - (1.0 + ln2)).abs() < 1e-15);
    assert_eq!(grit(CombineRule::SumUnweighted, 2.0, 4.0, 9.0, 9.0), 6.0);
    assert_eq!(grit(CombineRule::HungMtl, 4.0, 4.0, 0.0, 0.0), 4.0);
}

#[test]
fn halved_equals_sigma_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let l_ce = rng.random_range(0.0..10.0);
        let l_mse = rng.random_range(0.0..10.0);
        let s_ce: f64 = rng.random_range(0.1..3.0);
        let s_mse: f64 = rng.random_range(0.1..3.0);
        let sigma_form = l_ce / (s_ce * s_ce) + l_mse / (2.0 * s_mse * s_mse) + s_ce.ln() + s_mse.ln();
        let eta_form = grit(CombineRule::GritHalved, l_ce, l_mse, (s_ce * s_ce).ln(), (s_mse * s_mse).ln());
        assert!((sigma_form - eta_form).abs() < 1e-12, "{sigma_form} {eta_form}");
    }
}

#[test]
fn eta_stationary_point_matches_one_d_minimizer() {
    // Golden-section search on J(η_mse) at fixed losses.
    for l_mse in [0.3, 1.0, 4.0, 17.0] {
        let j = |e: f64| grit(CombineRule::GritUnhalved, 2.0, l_mse, 0.1, e);
        let (mut a, mut b) = (-10.0f64, 10.0f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if j(c) < j(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let eta = 0.5 * (a + b);
        assert!((eta.exp() - l_mse).abs() < 1e-6 * l_mse.max(1.0), "{} vs {l_mse}", eta.exp());
    }
}

#[test]
fn eta_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for rule in [CombineRule::GritHalved, CombineRule::GritUnhalved, CombineRule::HungMtl] {
        for _ in 0..50 {
            let (lc, lm) = (rng.random_range(0.1..5.0), rng.random_range(0.1..5.0));
            let (ec, em) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut tape = Tape::new();
            let vars: Vec<Var> = [lc, lm, ec, em]
                .iter()
                .map(|&x| tape.leaf(&Tensor::scalar(x).with_grad()))
                .collect();
            let j = combine(&mut tape, rule, vars[0], vars[1], vars[2], vars[3]).unwrap();
            tape.backward(j).unwrap();
            let g_ec = tape.grad(vars[2]).unwrap()[0];
            let g_em = tape.grad(vars[3]).unwrap()[0];
            let h = 1e-6;
            let n_ec = (grit(rule, lc, lm, ec + h, em) - grit(rule, lc, lm, ec - h, em)) / (2.0 * h);
            let n_em = (grit(rule, lc, lm, ec, em + h) - grit(rule, lc, lm, ec, em - h)) / (2.0 * h);
            // Gradients that happen to sit near zero are compared on the
            // scale of the terms they are built from.
            let scale = lc.max(lm) * (-ec).exp().max((-em).exp()) + 1.0;
            for (a, n) in [(g_ec, n_ec), (g_em, n_em)] {
                assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale) < 1e-6, "{rule:?} {a} {n}");
            }
            // Closed forms.
            let c = if rule == CombineRule::GritUnhalved { 1.0 } else { 0.5 };
            let w = if rule == CombineRule::HungMtl { 0.5 } else { 1.0 };
            assert!((g_ec - (-w * (-ec).exp() * lc + c)).abs() < 1e-12);
            assert!((g_em - (-0.5 * (-em).exp() * lm + 0.5)).abs() < 1e-12);
        }
    }
}

#[test]
fn hung_eta_gradient_matches_finite_difference() {
    for (l, eta) in [(4.0, 0.0), (0.5, 1.3), (9.0, -0.7)] {
        let mut tape = Tape::new();
        let lv = tape.leaf(&Tensor::scalar(l));
        let ev = tape.leaf(&Tensor::scalar(eta).with_grad());
        let j = combine_hung(&mut tape, lv, ev).unwrap();
        tape.backward(j).unwrap();
        let h = 1e-6;
        let numeric = (hung(l, eta + h) - hung(l, eta - h)) / (2.0 * h);
        let analytic = tape.grad(ev).unwrap()[0];
        assert!((analytic - numeric).abs() < 1e-8);
    }
}

proptest! {
    #[test]
    fn combined_losses_increase_with_each_task_loss(
        lc in 0.0f64..10.0, lm in 0.0f64..10.0, dl in 0.01f64..5.0,
        ec in -3.0f64..3.0, em in -3.0f64..3.0,
    ) {
        for rule in [CombineRule::SumUnweighted, CombineRule::HungMtl, CombineRule::GritHalved, CombineRule::GritUnhalved] {
            let base = grit(rule, lc, lm, ec, em);
            prop_assert!(grit(rule, lc + dl, lm, ec, em) > base);
            prop_assert!(grit(rule, lc, lm + dl, ec, em) > base);
        }
    }
}

#[test]
fn mse_and_bce_values() {
    let mut tape = Tape::new();
    let p = tape.constant(vec![2, 1], vec![1.0, 3.0]).unwrap();
    let l = mse_loss(&mut tape, p, &[2.0, 2.0]).unwrap();
    assert_eq!(tape.scalar(l), 1.0);
    let l = mse_loss(&mut tape, p, &[1.0, 3.0]).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let golds: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let p = tape.constant(vec![5, 1], preds.clone()).unwrap();
    let l = mse_loss(&mut tape, p, &golds).unwrap();
    let oracle = preds.iter().zip(&golds).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 5.0;
    assert!((tape.scalar(l) - oracle).abs() < 1e-14);

    let z = tape.constant(vec![1, 1], vec![0.0]).unwrap();
    for y in [0.0, 1.0] {
        let l = bce_loss(&mut tape, z, &[y]).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }
    let big = tape.constant(vec![1, 1], vec![30.0]).unwrap();
    let l = bce_loss(&mut tape, big, &[1.0]).unwrap();
    assert!(tape.scalar(l) < 1e-12);
    assert!(matches!(bce_loss(&mut tape, big, &[0.5]), Err(Error::Contract(_))));

    let logits = [-1.5, 0.2, 2.5, 0.0];
    let labels = [0.0, 1.0, 1.0, 0.0];
    let lv = tape.constant(vec![4, 1], logits.to_vec()).unwrap();
    let l = bce_loss(&mut tape, lv, &labels).unwrap();
    let oracle = logits
        .iter()
        .zip(&labels)
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 4.0;
    assert!((tape.scalar(l) - oracle).abs() < 1e-14);
}

#[test]
fn attribute_regression_through_head() {
    let mut store = ParamStore::new();
    let head = Head::init(&mut store, "head.attr", 4, 1, 0);
    let mut tape = Tape::new();
    let ubar = tape.constant(vec![2, 4], vec![0.1, -0.2, 0.3, 0.5, -0.4, 0.2, 0.0, 0.1]).unwrap();
    let preds = head.forward(&mut tape, &store, ubar).unwrap();
    let p = tape.value(preds).to_vec();
    let l = attribute_regression_loss(&mut tape, &store, &head, ubar, &p).unwrap();
    assert!(tape.scalar(l).abs() < 1e-30);
    assert!(Head::bind(&store, "head.attr").is_ok());
    assert!(Head::bind(&store, "head.none").is_err());
}

fn author(texts: &[&str]) -> AuthorRecord {
    AuthorRecord {
        author_id: "u".into(),
        documents: texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                timestamp: i as i64,
                text: t.to_string(),
                labels: BTreeMap::new(),
            })
            .collect(),
        attributes: BTreeMap::new(),
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

#[test]
fn hulm_loss_matches_direct_nll_over_two_blocks() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        block_len: 6,
        insert_layer: 1,
        extract_layer: 2,
        dropout: 0.0,
        ..ModelConfig::desk()
    };
    let mut store = ParamStore::new();
    let model = Transformer::init(&cfg, 1, &mut store).unwrap();
    let seq = build_blocks(&author(&["hello", "wor"]), &ByteTokenizer, 6, 4, None).unwrap();
    assert_eq!(seq.blocks.len(), 2);
    let mut tape = Tape::new();
    let pass = process_author(&model, &mut tape, &store, &seq, PassMode::Hulm, None).unwrap();
    let loss = hulm_loss(&mut tape, &[(&pass, &seq)]).unwrap();

    let v = cfg.vocab_size;
    let mut total = 0.0;
    let mut n = 0;
    for (bi, block) in seq.blocks.iter().enumerate() {
        let logits = tape.value(pass.outputs[bi].as_ref().unwrap().logits);
        for i in 0..5 {
            if block.mask[i] && block.mask[i + 1] {
                let lp = log_softmax_row(&logits[i * v..(i + 1) * v]);
                total -= lp[block.tokens[i + 1]];
                n += 1;
            }
        }
    }
    // block 1: "hello" + sep -> 5 targets; block 2: "wor" + sep -> 3.
    assert_eq!(n, 8);
    assert!((tape.scalar(loss) - total / n as f64).abs() < 1e-12);
}

#[test]
fn hulm_loss_limits() {
    // Uniform logits: loss = ln V.
    let mut tape = Tape::new();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        block_len: 6,
        insert_layer: 1,
        extract_layer: 1,
        dropout: 0.0,
        ..ModelConfig::desk()
    };
    let mut store = ParamStore::new();
    let model = Transformer::init(&cfg, 1, &mut store).unwrap();
    store.get_mut(model.token_embedding()).values_mut().fill(0.0);
    let seq = build_blocks(&author(&["abcdefgh"]), &ByteTokenizer, 6, 4, None).unwrap();
    let pass = process_author(&model, &mut tape, &store, &seq, PassMode::Plain, None).unwrap();
    let loss = hulm_loss(&mut tape, &[(&pass, &seq)]).unwrap();
    assert!((tape.scalar(loss) - (cfg.vocab_size as f64).ln()).abs() < 1e-12);

    // A one-token block carries no target.
    let tiny = build_blocks(&author(&[""]), &ByteTokenizer, 6, 4, None).unwrap();
    let pass = process_author(&model, &mut tape, &store, &tiny, PassMode::Plain, None).unwrap();
    assert!(matches!(hulm_loss(&mut tape, &[(&pass, &tiny)]), Err(Error::Contract(_))));

    // Perfect prediction: loss 0 (cross-entropy against one-hot logits).
    let logits = tape.constant(vec![2, 3], vec![0.0, 800.0, 0.0, 0.0, 0.0, 800.0]).unwrap();
    let l = tape.cross_entropy_sum(logits, &[1, 2], &[1.0, 1.0]).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
}

#[test]
fn combine_rule_parses() {
    assert_eq!("grit_unhalved".parse::<CombineRule>().unwrap(), CombineRule::GritUnhalved);
    assert!("nope".parse::<CombineRule>().is_err());
}
