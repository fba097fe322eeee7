use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::frame_model::TokenGrid;

fn tiny() -> SelectorConfig {
    SelectorConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        tokens_per_frame: 4,
        max_frames: 3,
        vocab: 20,
        visual_dim: 5,
        mlp_hidden: 24,
        head_hidden: 12,
        max_text: 6,
    }
}

fn frames(rng: &mut ChaCha8Rng, cfg: &SelectorConfig, n: usize) -> Vec<TokenGrid> {
    let side = cfg.grid_side();
    (0..n)
        .map(|i| {
            let values = (0..side * side * cfg.visual_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            TokenGrid::new(i, side, cfg.visual_dim, values).unwrap()
        })
        .collect()
}

fn question(ids: &[usize]) -> QuestionTokens {
    QuestionTokens {
        text: String::new(),
        ids: ids.to_vec(),
    }
}

/// Adapters with nonzero `B` so the adapter path contributes.
fn live_adapters(cfg: &SelectorConfig, rng: &mut ChaCha8Rng) -> LoraAdapters {
    let mut a = LoraAdapters::init(cfg, 2, 4.0, rng).unwrap();
    for (_, mut t) in a.tensors_mut() {
        t.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    a
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences over every entry of every tensor named in `names`,
/// compared leaf by leaf against `analytic`.
fn check_leaves(
    params: &SelectorParams,
    adapters: Option<&LoraAdapters>,
    analytic: &Gradients,
    names: &[String],
    loss: &dyn Fn(&SelectorParams, Option<&LoraAdapters>) -> f64,
) {
    const H: f64 = 1e-5;
    let grads: std::collections::HashMap<String, Vec<f64>> = analytic
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    for name in names {
        let mut p = params.clone();
        let mut a = adapters.cloned();
        let len = {
            let all = p.tensors();
            match all.iter().find(|(n, _)| n == name) {
                Some((_, t)) => t.len(),
                None => a.as_ref().unwrap().tensors().into_iter().find(|(n, _)| n == name).unwrap().1.len(),
            }
        };
        let mut fd = vec![0.0; len];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut eval = |delta: f64| {
                poke(&mut p, a.as_mut(), name, i, delta);
                let l = loss(&p, a.as_ref());
                poke(&mut p, a.as_mut(), name, i, -delta);
                l
            };
            *slot = (eval(H) - eval(-H)) / (2.0 * H);
        }
        let an = &grads[name];
        let diff: Vec<f64> = an.iter().zip(&fd).map(|(x, y)| x - y).collect();
        // leaves with a vanishing true gradient (key bias) only see roundoff
        if norm(an).max(norm(&fd)) < 1e-8 {
            assert!(norm(&diff) < 1e-8, "{name}: {:e}", norm(&diff));
            continue;
        }
        let rel = norm(&diff) / norm(an).max(norm(&fd));
        assert!(rel <= 1e-4, "{name}: relative error {rel:e} (analytic {:e}, fd {:e})", norm(an), norm(&fd));
    }
}

fn poke(p: &mut SelectorParams, a: Option<&mut LoraAdapters>, name: &str, i: usize, delta: f64) {
    for (n, mut t) in p.tensors_mut() {
        if n == name {
            *t.iter_mut().nth(i).unwrap() += delta;
            return;
        }
    }
    for (n, mut t) in a.expect("adapter tensor").tensors_mut() {
        if n == name {
            *t.iter_mut().nth(i).unwrap() += delta;
            return;
        }
    }
    panic!("no tensor {name}");
}

fn all_names(p: &SelectorParams, a: Option<&LoraAdapters>) -> Vec<String> {
    let mut v: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(a) = a {
        v.extend(a.tensors().into_iter().map(|(n, _)| n));
    }
    v
}

#[test]
fn bce_gradients_match_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = SelectorParams::init(&cfg, &mut rng);
    let adapters = live_adapters(&cfg, &mut rng);
    let fr = frames(&mut rng, &cfg, 3);
    let q = question(&[3, 7, 1]);
    let target = [0.9, 0.1, 0.5];
    for adapters in [None, Some(&adapters)] {
        let trace = forward(&params, &fr, &q, adapters).unwrap();
        let (_, g) = backward(&trace, &params, adapters, &target, GradScope::ALL).unwrap();
        let loss = |p: &SelectorParams, a: Option<&LoraAdapters>| {
            let t = forward(p, &fr, &q, a).unwrap();
            t.logits.iter().zip(&target).map(|(&z, &y)| bce_from_logit(z, y)).sum::<f64>() / 3.0
        };
        check_leaves(&params, adapters, &g, &all_names(&params, adapters), &loss);
    }
}

#[test]
fn instruction_gradients_match_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = SelectorParams::init(&cfg, &mut rng);
    let adapters = live_adapters(&cfg, &mut rng);
    let fr = frames(&mut rng, &cfg, 2);
    let q = question(&[4, 9]);
    let response = [5, 2, 8];
    for adapters in [None, Some(&adapters)] {
        let mut g = Gradients::zeros(&params, adapters);
        instruction_loss(&params, &fr, &q, &response, adapters, GradScope::ALL, Some(&mut g)).unwrap();
        let loss = |p: &SelectorParams, a: Option<&LoraAdapters>| {
            instruction_loss(p, &fr, &q, &response, a, GradScope::ALL, None).unwrap()
        };
        let mut names = all_names(&params, adapters);
        // score head and query do not touch the instruction path
        names.retain(|n| !n.starts_with("score_"));
        check_leaves(&params, adapters, &g, &names, &loss);
    }
}

#[test]
fn heads_only_scope_leaves_backbone_grads_zero() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = SelectorParams::init(&cfg, &mut rng);
    let fr = frames(&mut rng, &cfg, 3);
    let q = question(&[1]);
    let trace = forward(&params, &fr, &q, None).unwrap();
    let (_, g) = backward(&trace, &params, None, &[1.0, 0.0, 0.0], GradScope::HEADS_ONLY).unwrap();
    for (name, t) in g.tensors() {
        let trainable = select_trainables(1).unwrap().contains(&name);
        if !trainable {
            assert!(t.iter().all(|&v| v == 0.0), "{name} got a gradient");
        }
    }
}

#[test]
fn zero_head_gives_half() {
    let cfg = SelectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = SelectorParams::init(&cfg, &mut rng);
    params.score_head.fc2.weight.fill(0.0);
    params.score_head.fc2.bias.fill(0.0);
    let fr = frames(&mut rng, &cfg, 4);
    let t = forward(&params, &fr, &question(&[5, 6]), None).unwrap();
    assert_eq!(t.scores, vec![0.5; 4]);
    assert_eq!(t.query_state.len(), cfg.d_model);
    assert_eq!(t.frame_states.len(), 4);
    assert_eq!(t.question_states.len(), 2);
}

#[test]
fn bce_stationary_point() {
    let loss = bce_from_logit(0.0, 0.5);
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce_from_logit(-40.0, 0.0) < 1e-17);
    // gradient (s - t) vanishes at s = t
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = SelectorParams::init(&cfg, &mut rng);
    params.score_head.fc2.weight.fill(0.0);
    params.score_head.fc2.bias.fill(0.0);
    let fr = frames(&mut rng, &cfg, 2);
    let trace = forward(&params, &fr, &question(&[2]), None).unwrap();
    let (l, g) = backward(&trace, &params, None, &[0.5, 0.5], GradScope::HEADS_ONLY).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(g.params.score_head.fc2.bias.iter().all(|&v| v == 0.0));
}

#[test]
fn lora_zero_b_is_bit_identical() {
    let cfg = SelectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = SelectorParams::init(&cfg, &mut rng);
    let adapters = LoraAdapters::init(&cfg, 4, 8.0, &mut rng).unwrap();
    assert!(adapters.is_identity());
    for n in [1, 5, 32] {
        let fr = frames(&mut rng, &cfg, n);
        let q = question(&[9, 3, 4]);
        let a = forward(&params, &fr, &q, None).unwrap();
        let b = forward(&params, &fr, &q, Some(&adapters)).unwrap();
        assert_eq!(a.scores, b.scores);
    }
}

#[test]
fn suffix_tokens_cannot_move_scores() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = SelectorParams::init(&cfg, &mut rng);
    let fr = frames(&mut rng, &cfg, 3);
    let q = question(&[1, 2]);
    let base = forward(&params, &fr, &q, None).unwrap();
    for suffix in [vec![7], vec![3, 19, 0], vec![11, 11]] {
        let t = forward_with_suffix(&params, &fr, &q, None, &suffix).unwrap();
        assert_eq!(t.scores, base.scores);
    }
    // but earlier tokens do matter
    let other = forward(&params, &fr, &question(&[1, 3]), None).unwrap();
    assert_ne!(other.scores, base.scores);
}

#[test]
fn score_only_matches_full() {
    let cfg = SelectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = SelectorParams::init(&cfg, &mut rng);
    let fr = frames(&mut rng, &cfg, 32);
    let q = question(&[8, 1, 44, 2]);
    let full = forward_with_mode(&params, &fr, &q, None, ForwardMode::Full).unwrap();
    let fast = forward_with_mode(&params, &fr, &q, None, ForwardMode::ScoreOnly).unwrap();
    for (a, b) in full.scores.iter().zip(&fast.scores) {
        assert!((a - b).abs() <= 1e-12);
    }
    let t = [0.3; 32];
    let (la, ga) = backward(&full, &params, None, &t, GradScope::HEADS_ONLY).unwrap();
    let (lb, gb) = backward(&fast, &params, None, &t, GradScope::HEADS_ONLY).unwrap();
    assert!((la - lb).abs() < 1e-12);
    for ((_, x), (_, y)) in ga.tensors().iter().zip(gb.tensors().iter()) {
        for (u, v) in x.iter().zip(y.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}

#[test]
fn forward_is_deterministic_and_validated() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = SelectorParams::init(&cfg, &mut rng);
    let fr = frames(&mut rng, &cfg, 3);
    let q = question(&[4]);
    let a = forward(&params, &fr, &q, None).unwrap();
    let b = forward(&params, &fr, &q, None).unwrap();
    assert_eq!(a.scores, b.scores);
    assert!(a.scores.iter().all(|&s| s > 0.0 && s < 1.0));

    let too_many = frames(&mut rng, &cfg, 4);
    assert!(forward(&params, &too_many, &q, None).is_err());
    let wrong_dim = vec![TokenGrid::constant(0, 2, &[0.0; 3])];
    assert!(forward(&params, &wrong_dim, &q, None).is_err());
    let trace = forward(&params, &fr, &q, None).unwrap();
    assert!(backward(&trace, &params, None, &[0.1, 0.2], GradScope::HEADS_ONLY).is_err());
}

#[test]
fn losses_match_straight_line_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let z: f64 = rng.random_range(-12.0..12.0);
        let t: f64 = rng.random_range(0.0..=1.0);
        let s = 1.0 / (1.0 + (-z).exp());
        let naive = -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
        assert!((bce_from_logit(z, t) - naive).abs() < 1e-10);

        let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-6.0..6.0)).collect();
        let k = rng.random_range(0..7);
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        let naive = -(logits[k].exp() / denom).ln();
        assert!((cross_entropy_from_logits(&logits, k) - naive).abs() < 1e-10);
    }
}
