//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! `cargo test --release --test acceptance`

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use framesel::config::PipelineConfig;
use framesel::dataset::{synthetic_dataset, DatasetRecord};
use framesel::eval::{
    evaluate_policy, gen_tasks, gen_timelines, sweep_pool_size, DownstreamClient, EvalOptions, EvalReport, OracleScorer,
    Scorer, SelectorScorer, SweepReport, SyntheticConfig, SyntheticTask,
};
use framesel::frame_model::fixture::{decode_features, encode_features, FeatureRecord};
use framesel::frame_model::{plan_uniform, TokenGrid, VideoMeta};
use framesel::pipeline::{
    build_train_data, fuse_records, label_spatial, label_tasks, label_temporal, train_two_stage, CaptionRecord,
    LabelOptions, PlanRecord, ScoreRecord, SpatialRecord, TemporalRecord,
};
use framesel::pseudo_label::prompts::{spatial_prompt, temporal_prompt, CAPTION_PROMPT};
use framesel::pseudo_label::{
    normalize_spatial, parse_temporal_reply, spatial_score, spatial_score_frame, ChatResponse, FrameInput, ImagePayload,
    MockBackend, PseudoLabelRecord, ScriptedBackend, TokenLogprob, TopLogprob,
};
use framesel::selection::{neighbor_gap, nms_greedy, select, ImportanceVector, Policy, Provenance, SelectionReport};
use framesel::selector::checkpoint::Checkpoint;
use framesel::selector::{
    backward, bce_from_logit, forward, forward_with_mode, instruction_loss, select_trainables, ForwardMode, GradScope,
    Gradients, LoraAdapters, QuestionTokens, SelectorConfig, SelectorParams, Stage,
};
use framesel::store::{decode_records, encode_records, Record, RunInfo};
use framesel::training::{LossReport, TaskKind, TrainConfig};
use framesel::Exec;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1 ------------------------------------------------------------------------

/// Greedy-NMS written as a literal trace: at every step the admissible set
/// is recomputed from scratch as all frames farther than `delta` from
/// everything chosen so far.
fn brute_force_nms(scores: &[f64], k: usize) -> (Vec<usize>, usize, bool) {
    let n = scores.len();
    let delta = n / (4 * k);
    let clamped: Vec<f64> = scores.iter().map(|&s| s.max(0.0).min(1.0)).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut fallback = false;
    while chosen.len() < k {
        let admissible: Vec<usize> = (0..n)
            .filter(|&i| chosen.iter().all(|&c| (i as i64 - c as i64).unsigned_abs() as usize > delta))
            .collect();
        let next = if admissible.is_empty() {
            fallback = true;
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        } else {
            let best = admissible.iter().map(|&i| clamped[i]).fold(f64::NEG_INFINITY, f64::max);
            *admissible.iter().find(|&&i| clamped[i] == best).unwrap()
        };
        chosen.push(next);
    }
    chosen.sort();
    (chosen, delta, fallback)
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    match rng.random_range(0..4) {
        0 => (0..n).map(|_| rng.random::<f64>()).collect(),
        // coarse levels force ties
        1 => (0..n).map(|_| rng.random_range(0..4) as f64 / 3.0).collect(),
        // values outside [0, 1] exercise clamping
        2 => (0..n).map(|_| rng.random_range(-0.5..1.5)).collect(),
        _ => (0..n).map(|_| if rng.random_bool(0.1) { rng.random() } else { 0.0 }).collect(),
    }
}

fn c1_nms_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut fallbacks = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=64);
        let k = rng.random_range(1..=n.min(16));
        let s = random_scores(&mut rng, n);
        let got = nms_greedy(&ImportanceVector::new(s.clone(), Provenance::Selector).map_err(fail)?, k).map_err(fail)?;
        let (want, delta, fb) = brute_force_nms(&s, k);
        ensure(got.selected == want && got.delta == delta && got.fallback == fb, || {
            format!("case {case} n={n} k={k}: got {:?}, oracle {want:?}", got.selected)
        })?;
        fallbacks += fb as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("1000/1000 exact, {fallbacks} fallbacks, {secs:.3}s"))
}

// 2 ------------------------------------------------------------------------

fn c2_delta_rule() -> Outcome {
    let (n, k) = (128, 8);
    ensure(neighbor_gap(n, k) == 4, || format!("delta = {}", neighbor_gap(n, k)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for case in 0..200 {
        let s = random_scores(&mut rng, n);
        let r = nms_greedy(&ImportanceVector::new(s, Provenance::Selector).map_err(fail)?, k).map_err(fail)?;
        ensure(r.delta == 4 && r.selected.len() == k, || format!("case {case}: {r:?}"))?;
        if r.fallback {
            continue;
        }
        checked += 1;
        for (a, &i) in r.selected.iter().enumerate() {
            for &j in &r.selected[a + 1..] {
                ensure(j - i > 4, || format!("case {case}: {i} and {j} are neighbours"))?;
            }
        }
    }
    Ok(format!("delta = 4; {checked}/200 vectors without fallback, all pairs > 4 apart"))
}

// 3 ------------------------------------------------------------------------

fn grad_config() -> SelectorConfig {
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

fn poke(p: &mut SelectorParams, a: &mut Option<LoraAdapters>, name: &str, i: usize, delta: f64) {
    let mut all = p.tensors_mut();
    if let Some(a) = a.as_mut() {
        all.extend(a.tensors_mut());
    }
    let (_, mut t) = all.into_iter().find(|(n, _)| n == name).expect("tensor exists");
    *t.iter_mut().nth(i).unwrap() += delta;
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error over `names`, central differences with step 1e-5.
fn fd_check(
    params: &SelectorParams,
    adapters: &Option<LoraAdapters>,
    analytic: &Gradients,
    names: &[String],
    loss: &dyn Fn(&SelectorParams, Option<&LoraAdapters>) -> f64,
) -> Result<f64, String> {
    const H: f64 = 1e-5;
    let grads: HashMap<String, Vec<f64>> =
        analytic.tensors().into_iter().map(|(n, t)| (n, t.iter().copied().collect())).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let an = grads.get(name).ok_or_else(|| format!("no analytic gradient for {name}"))?;
        let mut p = params.clone();
        let mut a = adapters.clone();
        let mut fd = vec![0.0; an.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            poke(&mut p, &mut a, name, i, H);
            let up = loss(&p, a.as_ref());
            poke(&mut p, &mut a, name, i, -2.0 * H);
            let down = loss(&p, a.as_ref());
            poke(&mut p, &mut a, name, i, H);
            *slot = (up - down) / (2.0 * H);
        }
        let diff = l2(an.iter().zip(&fd).map(|(x, y)| x - y));
        let scale = l2(an.iter().copied()).max(l2(fd.iter().copied()));
        if scale < 1e-8 {
            // a leaf whose true gradient vanishes (B = 0 makes A's gradient
            // zero): both sides must agree in absolute terms
            ensure(diff < 1e-8, || format!("{name}: absolute error {diff:e}"))?;
            continue;
        }
        let rel = diff / scale;
        ensure(rel <= 1e-4, || format!("{name}: relative error {rel:e}"))?;
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = grad_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = SelectorParams::init(&cfg, &mut rng);
    let frames: Vec<TokenGrid> = (0..3)
        .map(|i| {
            let v = (0..4 * cfg.visual_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            TokenGrid::new(i, 2, cfg.visual_dim, v).unwrap()
        })
        .collect();
    let q = QuestionTokens {
        text: String::new(),
        ids: vec![3, 7, 1],
    };
    let target = [0.9, 0.1, 0.5];
    let response = [5, 2];
    let identity = LoraAdapters::init(&cfg, 2, 4.0, &mut rng).map_err(fail)?;
    let mut live = identity.clone();
    for (_, mut t) in live.tensors_mut() {
        t.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }

    let bce = |p: &SelectorParams, a: Option<&LoraAdapters>| {
        let t = forward(p, &frames, &q, a).unwrap();
        t.logits.iter().zip(&target).map(|(&z, &y)| bce_from_logit(z, y)).sum::<f64>() / target.len() as f64
    };
    let ce = |p: &SelectorParams, a: Option<&LoraAdapters>| {
        instruction_loss(p, &frames, &q, &response, a, GradScope::HEADS_ONLY, None).unwrap()
    };

    let cases: [(u8, Option<&LoraAdapters>, &str); 5] = [
        (1, None, "stage 1"),
        (1, Some(&live), "stage 1 + frozen adapters"),
        (2, Some(&identity), "stage 2, fresh adapters"),
        (2, Some(&live), "stage 2, trained adapters"),
        (2, None, "stage 2 without adapters"),
    ];
    let mut worst: f64 = 0.0;
    let mut leaves = 0;
    for (stage, adapters, label) in cases {
        let tr = select_trainables(stage).map_err(fail)?;
        let scope = tr.grad_scope();
        let adapters = adapters.cloned();
        let names = tr.names(&params, adapters.as_ref());
        let trace = forward(&params, &frames, &q, adapters.as_ref()).map_err(fail)?;
        let (_, g) = backward(&trace, &params, adapters.as_ref(), &target, scope).map_err(fail)?;
        worst = worst.max(fd_check(&params, &adapters, &g, &names, &bce).map_err(|e| format!("{label}, BCE: {e}"))?);
        leaves += names.len();
        if stage == 1 {
            let mut g = Gradients::zeros(&params, if scope.adapters { adapters.as_ref() } else { None });
            instruction_loss(&params, &frames, &q, &response, adapters.as_ref(), scope, Some(&mut g)).map_err(fail)?;
            // the score query and head never reach the instruction loss
            let names: Vec<String> = names.into_iter().filter(|n| !n.starts_with("score_")).collect();
            worst = worst.max(fd_check(&params, &adapters, &g, &names, &ce).map_err(|e| format!("{label}, CE: {e}"))?);
            leaves += names.len();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{leaves} leaf checks, worst relative error {worst:.2e}, {secs:.2}s"))
}

// 4 ------------------------------------------------------------------------

fn c4_lora_identity() -> Outcome {
    let cfg = SelectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = SelectorParams::init(&cfg, &mut rng);
    let adapters = LoraAdapters::init(&cfg, 4, 8.0, &mut rng).map_err(fail)?;
    ensure(adapters.is_identity(), || "fresh adapters have nonzero B".into())?;
    for case in 0..50 {
        let n = rng.random_range(1..=cfg.max_frames);
        let frames: Vec<TokenGrid> = (0..n)
            .map(|i| {
                let v = (0..cfg.tokens_per_frame * cfg.visual_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                TokenGrid::new(i, cfg.grid_side(), cfg.visual_dim, v).unwrap()
            })
            .collect();
        let len = rng.random_range(1..=cfg.max_text);
        let q = QuestionTokens {
            text: String::new(),
            ids: (0..len).map(|_| rng.random_range(1..cfg.vocab)).collect(),
        };
        let base = forward_with_mode(&params, &frames, &q, None, ForwardMode::ScoreOnly).map_err(fail)?;
        let with = forward_with_mode(&params, &frames, &q, Some(&adapters), ForwardMode::ScoreOnly).map_err(fail)?;
        let same = base.scores.iter().zip(&with.scores).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("input {case}: scores differ"))?;
    }
    Ok("50/50 inputs bit-identical".into())
}

// 5 ------------------------------------------------------------------------

fn c5_eq6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (pt, pf) = (rng.random::<f64>(), rng.random::<f64>());
        let s = spatial_score(pt, pf);
        for c in [0.1, 1.0, 10.0] {
            worst = worst.max((spatial_score(c * pt, c * pf) - s).abs());
        }
        let x = rng.random::<f64>();
        ensure(spatial_score(x, x) == 0.5, || format!("s({x}, {x}) = {}", spatial_score(x, x)))?;
    }
    ensure(worst <= 1e-12, || format!("scaling changed s by {worst:e}"))?;
    ensure(spatial_score(0.0, 0.0) == 0.5, || "s(0, 0) != 0.5".into())?;
    for case in 0..1000 {
        let n = rng.random_range(1..=64);
        let mut v: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random() }).collect();
        if v.iter().all(|&x| x == 0.0) {
            v[rng.random_range(0..n)] = rng.random_range(1e-9..1.0);
        }
        let out = normalize_spatial(&v).map_err(fail)?;
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ensure(max == 1.0, || format!("vector {case}: max {max}"))?;
    }
    Ok(format!("scaling error {worst:.1e}; s(x,x) = 0.5; max after normalisation = 1 on 1000 vectors"))
}

// 6 ------------------------------------------------------------------------

fn golden(name: &str) -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn tok(text: &str, top: &[(&str, f64)]) -> TokenLogprob {
    TokenLogprob {
        token: text.into(),
        logprob: top.first().map_or(0.0, |t| t.1.ln()),
        top: top
            .iter()
            .map(|&(t, p)| TopLogprob {
                token: t.into(),
                logprob: p.ln(),
            })
            .collect(),
    }
}

fn c6_prompts() -> Outcome {
    let q = "Is there a dog in the yard?";
    ensure(spatial_prompt(q) == golden("spatial_prompt.txt")?, || "spatial prompt differs".into())?;
    let captions: Vec<String> = [
        "An empty yard with a wooden fence.",
        "A brown dog runs across the grass.",
        "The dog sits next to a red ball.",
        "A person closes the gate.",
    ]
    .map(String::from)
    .to_vec();
    ensure(temporal_prompt(q, &captions, 8) == golden("temporal_prompt.txt")?, || "temporal prompt differs".into())?;
    ensure(CAPTION_PROMPT == golden("caption_prompt.txt")?, || "caption prompt differs".into())?;

    let body = "The frame shows a fence and some grass.";
    let script = ScriptedBackend::new(vec![
        ChatResponse {
            text: body.into(),
            tokens: vec![tok(body, &[(body, 1.0)])],
        },
        ChatResponse {
            text: " True".into(),
            tokens: vec![tok(" True", &[(" True", 0.3), (" False", 0.6)])],
        },
    ]);
    let frame = FrameInput {
        video_id: "v".into(),
        frame_index: 0,
        image: ImagePayload::from_grid(&TokenGrid::constant(0, 1, &[1.0])),
    };
    let label = spatial_score_frame(&script, &frame, q).map_err(fail)?;
    let reqs = script.requests();
    ensure(reqs.len() == 2, || format!("{} requests", reqs.len()))?;
    ensure(reqs.iter().all(|r| r.prompt == golden("spatial_prompt.txt").unwrap()), || {
        "fallback request changed the prompt".into()
    })?;
    ensure(reqs[1].assistant_prefix.as_deref() == Some(golden("spatial_fallback_prefix.txt")?.as_str()), || {
        format!("fallback prefix {:?}", reqs[1].assistant_prefix)
    })?;
    ensure(label.fallback_used && label.response == golden("spatial_fallback_response.txt")?, || {
        format!("fallback response {:?}", label.response)
    })?;
    ensure((label.score() - 1.0 / 3.0).abs() < 1e-12, || format!("fallback score {}", label.score()))?;
    Ok("spatial, temporal, caption and fallback prompts byte-match".into())
}

// 7 ------------------------------------------------------------------------

fn c7_parser() -> Outcome {
    let a = parse_temporal_reply("[3, 17, 99]", 128, 8);
    ensure(a.helpful_set == [2, 16, 98] && a.parse_ok, || format!("bracketed: {a:?}"))?;
    let b = parse_temporal_reply("Frames: 3 and 17.", 128, 8);
    ensure(b.helpful_set == [2, 16] && !b.parse_ok, || format!("prose: {b:?}"))?;
    let c = parse_temporal_reply("[130]", 128, 8);
    ensure(c.helpful_set.is_empty(), || format!("out of range: {c:?}"))?;

    let alphabet: Vec<char> = "0123456789[],- abcFrame:\n-+.\u{00e9}\u{4e2d}".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let len = rng.random_range(0..80);
        let reply: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        let n = rng.random_range(1..=128);
        let want = rng.random_range(1..=16);
        let parsed = std::panic::catch_unwind(|| parse_temporal_reply(&reply, n, want))
            .map_err(|_| format!("case {case} panicked on {reply:?}"))?;
        ensure(parsed.helpful_set.iter().all(|&i| i < n) && parsed.helpful_set.len() <= want, || {
            format!("case {case}: {parsed:?} for n={n}")
        })?;
    }
    Ok("3 examples pass; 500 fuzz replies in range, no panic".into())
}

// 8, 9 --------------------------------------------------------------------

struct Trained {
    scorer: SelectorScorer,
    held_out: Vec<SyntheticTask>,
    secs: f64,
}

fn train_selector() -> Result<Trained, String> {
    let start = Instant::now();
    let exec = Exec::Sequential;
    let syn = SyntheticConfig::default();
    let tasks = gen_tasks(2000, &syn, 1, exec).map_err(fail)?;
    let mock = MockBackend::new(7, syn.pattern()).map_err(fail)?;
    let labels = label_tasks(&mock, &tasks, LabelOptions::default(), exec).map_err(fail)?;
    let params = SelectorParams::init(&SelectorConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
    let data = build_train_data(&tasks, &labels, &params).map_err(fail)?;
    let stage1 = TrainConfig { exec, ..TrainConfig::stage1() };
    let stage2 = TrainConfig { exec, ..TrainConfig::stage2() };
    let out = train_two_stage(params, &data, stage1, stage2).map_err(fail)?;
    let held_out = gen_tasks(2000, &syn, 2, exec).map_err(fail)?;
    Ok(Trained {
        scorer: SelectorScorer::new(out.params, Some(out.adapters)),
        held_out,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn eval(tasks: &[SyntheticTask], scorer: &dyn Scorer, policy: Policy, k: usize, d: Option<&DownstreamClient>) -> Result<EvalReport, String> {
    let opts = EvalOptions {
        exec: Exec::Sequential,
        ..EvalOptions::default()
    };
    evaluate_policy(tasks, scorer, policy, k, d, opts).map_err(fail)
}

fn c8_learning(trained: &Result<Trained, String>) -> Outcome {
    let t = trained.as_ref().map_err(|e| e.clone())?;
    let start = Instant::now();
    let sel = eval(&t.held_out, &t.scorer, Policy::NmsGreedy, 1, None)?;
    let uni = eval(&t.held_out, &OracleScorer, Policy::Uniform, 1, None)?;
    let total = t.secs + start.elapsed().as_secs_f64();
    ensure(sel.hit_rate >= 0.80, || format!("selector hit@1 {:.3}", sel.hit_rate))?;
    ensure((uni.hit_rate - 1.0 / 32.0).abs() <= 0.02, || format!("uniform hit@1 {:.3}", uni.hit_rate))?;
    ensure(total < 900.0, || format!("took {total:.0}s"))?;
    Ok(format!(
        "selector hit@1 {:.3} vs uniform {:.3} on 2000 held-out tasks, {total:.0}s single-threaded",
        sel.hit_rate, uni.hit_rate
    ))
}

fn c9_table5(trained: &Result<Trained, String>) -> Outcome {
    let t = trained.as_ref().map_err(|e| e.clone())?;
    let d = DownstreamClient::parametric(0.9, 0.2).map_err(fail)?;
    let sel = eval(&t.held_out, &t.scorer, Policy::NmsGreedy, 4, Some(&d))?;
    let uni = eval(&t.held_out, &OracleScorer, Policy::Uniform, 8, Some(&d))?;
    ensure(sel.hit_rate > uni.hit_rate, || {
        format!("antecedent fails: selector hit@4 {:.3} <= uniform hit@8 {:.3}", sel.hit_rate, uni.hit_rate)
    })?;
    let (a, b) = (sel.modeled_accuracy.unwrap(), uni.modeled_accuracy.unwrap());
    ensure(a - b >= 0.05, || format!("accuracy {a:.3} vs {b:.3}"))?;
    Ok(format!(
        "selector@4 accuracy {a:.3} (hit {:.3}) vs uniform@8 {b:.3} (hit {:.3}), margin {:.3}",
        sel.hit_rate,
        uni.hit_rate,
        a - b
    ))
}

// 10 -----------------------------------------------------------------------

fn c10_pool_sweep() -> Outcome {
    let cfg = PipelineConfig::default();
    ensure(cfg.timeline.total_frames == 1024, || "timeline is not 1024 frames".into())?;
    let timelines = gen_timelines(2000, &cfg.timeline, 10).map_err(fail)?;
    let r = sweep_pool_size(&timelines, &cfg.synthetic, &OracleScorer, &[16, 32, 128], 4, None, EvalOptions::default())
        .map_err(fail)?;
    let rates: Vec<f64> = r.reports.iter().map(|x| x.hit_rate).collect();
    ensure(rates.windows(2).all(|w| w[0] <= w[1]), || format!("hit rates {rates:?}"))?;
    ensure(r.violation_fraction <= 0.01, || format!("violations {:.4}", r.violation_fraction))?;
    Ok(format!(
        "hit@4 for n=16/32/128: {:.3}/{:.3}/{:.3}; per-task violations {:.4}",
        rates[0], rates[1], rates[2], r.violation_fraction
    ))
}

// 11 -----------------------------------------------------------------------

fn roundtrip<T: Record + PartialEq + std::fmt::Debug>(run: &RunInfo, records: &[T]) -> Result<(), String> {
    let bytes = encode_records(Some(run), records).map_err(fail)?;
    let (header, back) = decode_records::<T>(Path::new("mem"), &bytes).map_err(fail)?;
    ensure(header.run.as_ref() == Some(run), || format!("{}: header {header:?}", T::KIND))?;
    ensure(back == records, || format!("{} records changed in a roundtrip", T::KIND))?;
    let again = encode_records(Some(run), &back).map_err(fail)?;
    ensure(again == bytes, || format!("{} bytes changed in a roundtrip", T::KIND))
}

/// Bytes of every pure stage for one (config, seed) pair.
fn pure_stages(cfg: &PipelineConfig, exec: Exec) -> Result<Vec<Vec<u8>>, String> {
    let run = RunInfo::new(cfg.config_hash(), cfg.seed);
    let metas: Vec<VideoMeta> = (0..5).map(|i| VideoMeta::new(format!("v{i}"), 300 + 977 * i, 30.0).unwrap()).collect();
    let plans: Vec<PlanRecord> = metas
        .iter()
        .map(|m| Ok(PlanRecord { video_id: m.video_id.clone(), plan: plan_uniform(m, 128)? }))
        .collect::<framesel::Result<_>>()
        .map_err(fail)?;

    let tasks = gen_tasks(24, &cfg.synthetic, cfg.seed, exec).map_err(fail)?;
    let mock = cfg.mock_backend().map_err(fail)?;
    let opts = LabelOptions {
        exec,
        ..LabelOptions::default()
    };
    let spatial: Vec<SpatialRecord> = tasks.iter().map(|t| label_spatial(&mock, t, opts)).collect::<framesel::Result<_>>().map_err(fail)?;
    let temporal: Vec<TemporalRecord> = tasks
        .iter()
        .map(|t| label_temporal(&mock, t, opts).map(|x| x.1))
        .collect::<framesel::Result<_>>()
        .map_err(fail)?;
    let fused: Vec<PseudoLabelRecord> =
        spatial.iter().zip(&temporal).map(|(s, t)| fuse_records(s, t)).collect::<framesel::Result<_>>().map_err(fail)?;

    let scores: Vec<ScoreRecord> = fused
        .iter()
        .map(|l| ScoreRecord {
            video_id: l.video_id.clone(),
            question_id: l.question_id.clone(),
            scores: ImportanceVector::new(l.fused.clone(), Provenance::Fused).unwrap(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let selections: Vec<SelectionReport> = scores
        .iter()
        .map(|s| select(cfg.selection.policy, &s.scores, cfg.selection.k, &mut rng).map(|r| SelectionReport::new(&s.video_id, &s.question_id, &r)))
        .collect::<framesel::Result<_>>()
        .map_err(fail)?;

    struct Fused(HashMap<String, Vec<f64>>);
    impl Scorer for Fused {
        fn name(&self) -> String {
            "labels".into()
        }
        fn score(&self, t: &SyntheticTask) -> framesel::Result<ImportanceVector> {
            ImportanceVector::new(self.0[&t.question_id].clone(), Provenance::Fused)
        }
    }
    let scorer = Fused(fused.iter().map(|l| (l.question_id.clone(), l.fused.clone())).collect());
    let opts = EvalOptions {
        seed: cfg.seed,
        exec,
        timing: false,
    };
    let report = evaluate_policy(&tasks, &scorer, cfg.selection.policy, cfg.selection.k, Some(&cfg.downstream), opts).map_err(fail)?;

    Ok(vec![
        encode_records(Some(&run), &plans).map_err(fail)?,
        encode_records(Some(&run), &spatial).map_err(fail)?,
        encode_records(Some(&run), &temporal).map_err(fail)?,
        encode_records(Some(&run), &fused).map_err(fail)?,
        encode_records(Some(&run), &selections).map_err(fail)?,
        encode_records(Some(&run), &[report]).map_err(fail)?,
    ])
}

fn c11_determinism() -> Outcome {
    let cfg = PipelineConfig::default();
    let a = pure_stages(&cfg, Exec::Sequential)?;
    let b = pure_stages(&cfg, Exec::Sequential)?;
    let c = pure_stages(&cfg, Exec::Parallel)?;
    ensure(a == b, || "rerun changed a pure stage".into())?;
    ensure(a == c, || "parallel run differs from sequential".into())?;
    let other = pure_stages(&PipelineConfig { seed: 8, ..cfg.clone() }, Exec::Sequential)?;
    ensure(other[1..] != a[1..], || "seed has no effect".into())?;

    // every record kind
    let run = RunInfo::new(cfg.config_hash(), cfg.seed);
    let syn = cfg.synthetic.clone();
    let tasks = gen_tasks(6, &syn, 3, Exec::Sequential).map_err(fail)?;
    let mock = cfg.mock_backend().map_err(fail)?;
    let opts = LabelOptions::default();
    let spatial: Vec<SpatialRecord> = tasks.iter().map(|t| label_spatial(&mock, t, opts).unwrap()).collect();
    let pairs: Vec<(CaptionRecord, TemporalRecord)> = tasks.iter().map(|t| label_temporal(&mock, t, opts).unwrap()).collect();
    let fused: Vec<PseudoLabelRecord> = spatial.iter().zip(&pairs).map(|(s, p)| fuse_records(s, &p.1).unwrap()).collect();
    let dataset: Vec<DatasetRecord> = synthetic_dataset(6, &syn, 3, Exec::Sequential).map_err(fail)?;
    let meta = VideoMeta::new("v", 1000, 25.0).map_err(fail)?;
    let plan = PlanRecord { video_id: "v".into(), plan: plan_uniform(&meta, 128).map_err(fail)? };
    let features: Vec<FeatureRecord> = tasks[0].frames.iter().map(|g| FeatureRecord::from_grid("v", g)).collect();
    let scores: Vec<ScoreRecord> = fused
        .iter()
        .map(|l| ScoreRecord {
            video_id: l.video_id.clone(),
            question_id: l.question_id.clone(),
            scores: ImportanceVector::new(l.fused.clone(), Provenance::Fused).unwrap(),
        })
        .collect();
    let sel = SelectionReport::new("v", "q", &nms_greedy(&scores[0].scores, 4).map_err(fail)?);
    let report = eval(&tasks, &OracleScorer, Policy::NmsGreedy, 2, Some(&cfg.downstream))?;
    let sweep = SweepReport {
        reports: vec![report.clone()],
        violation_fraction: 0.0,
        skipped: vec![128],
    };
    let loss = LossReport {
        step: 3,
        epoch: 0,
        task: TaskKind::Score,
        loss: 0.693_147_180_559_945_3,
        lr: 1e-3 / 3.0,
        grad_norm: 0.1 + 0.2,
    };
    roundtrip(&run, &dataset)?;
    roundtrip(&run, &[meta])?;
    roundtrip(&run, &features)?;
    roundtrip(&run, &[plan])?;
    roundtrip(&run, &spatial)?;
    roundtrip(&run, &pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>())?;
    roundtrip(&run, &pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?;
    roundtrip(&run, &fused)?;
    roundtrip(&run, &scores)?;
    roundtrip(&run, &[sel])?;
    roundtrip(&run, &[report])?;
    roundtrip(&run, &[sweep])?;
    roundtrip(&run, &[loss])?;
    roundtrip::<LossReport>(&run, &[])?;

    let bin = encode_features(&features).map_err(fail)?;
    ensure(decode_features(Path::new("mem"), &bin).map_err(fail)? == features, || "feature file roundtrip".into())?;

    let cfg_back = PipelineConfig::from_toml(&cfg.to_toml().map_err(fail)?).map_err(fail)?;
    ensure(cfg_back == cfg && cfg_back.config_hash() == cfg.config_hash(), || "config roundtrip".into())?;

    let sc = SelectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ck = Checkpoint {
        seed: 11,
        stage: Some(Stage::Two),
        params: SelectorParams::init(&sc, &mut rng),
        adapters: Some(LoraAdapters::init(&sc, 4, 8.0, &mut rng).map_err(fail)?),
    };
    ck.quantize();
    let bytes = ck.to_bytes().map_err(fail)?;
    let back = Checkpoint::from_bytes(Path::new("mem"), &bytes).map_err(fail)?;
    ensure(back == ck && back.to_bytes().map_err(fail)? == bytes, || "checkpoint roundtrip".into())?;

    Ok("pure stages byte-identical across reruns and exec modes; 14 record files, features, config and checkpoint roundtrip".into())
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let line = match &out {
            Ok(d) => format!("PASS  {name}: {d}"),
            Err(e) => format!("FAIL  {name}: {e}"),
        };
        println!("{line}  [{secs:.1}s]");
        results.push((name, out, secs));
    };
    run("1 nms matches brute-force oracle", &c1_nms_oracle);
    run("2 neighbour gap rule", &c2_delta_rule);
    run("3 gradients match finite differences", &c3_gradients);
    run("4 zero-B adapters are the identity", &c4_lora_identity);
    run("5 spatial score properties", &c5_eq6);
    run("6 prompt golden files", &c6_prompts);
    run("7 temporal reply parser", &c7_parser);
    let trained = train_selector();
    run("8 end-to-end synthetic learning", &|| c8_learning(&trained));
    run("9 selector@k beats uniform@2k", &|| c9_table5(&trained));
    run("10 hit rate grows with candidate pool", &c10_pool_sweep);
    run("11 determinism and persistence", &c11_determinism);

    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
