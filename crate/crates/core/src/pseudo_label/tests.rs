use proptest::prelude::*;

use super::*;
use crate::frame_model::TokenGrid;

fn pattern() -> Vec<f64> {
    (0..4).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()
}

fn frame(idx: usize, v: [f64; 4]) -> FrameInput {
    FrameInput {
        video_id: "v".into(),
        frame_index: idx,
        image: ImagePayload::from_grid(&TokenGrid::constant(idx, 1, &v)),
    }
}

#[test]
fn eq6_examples() {
    assert!((spatial_score(0.6, 0.2) - 0.75).abs() < 1e-15);
    assert_eq!(spatial_score(0.3, 0.3), 0.5);
    assert_eq!(spatial_score(0.0, 0.0), 0.5);
}

#[test]
fn normalize_examples() {
    assert_eq!(normalize_spatial(&[0.3, 0.6]).unwrap(), vec![0.5, 1.0]);
    assert_eq!(normalize_spatial(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0; 3]);
    assert_eq!(normalize_spatial(&[1.0, 0.25]).unwrap(), vec![1.0, 0.25]);
    assert!(normalize_spatial(&[1.5]).is_err());
    assert!(normalize_spatial(&[]).is_err());
}

#[test]
fn binarize_and_fuse_examples() {
    let l = TemporalLabel {
        helpful_set: vec![1, 3],
        parse_ok: true,
    };
    assert_eq!(binarize_temporal(&l, 4), vec![0.0, 1.0, 0.0, 1.0]);
    let empty = TemporalLabel {
        helpful_set: vec![],
        parse_ok: false,
    };
    assert_eq!(binarize_temporal(&empty, 3), vec![0.0; 3]);
    let full = TemporalLabel {
        helpful_set: vec![0, 1, 2],
        parse_ok: true,
    };
    assert_eq!(binarize_temporal(&full, 3), vec![1.0; 3]);

    assert_eq!(fuse(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), vec![0.5, 0.0]);
    assert_eq!(fuse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), vec![0.2, 0.4]);
    let t = binarize_temporal(
        &TemporalLabel {
            helpful_set: vec![0],
            parse_ok: true,
        },
        2,
    );
    assert_eq!(fuse(&[1.0, 1.0], &t).unwrap(), vec![1.0, 0.5]);
    assert!(fuse(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn parser_examples() {
    let a = parse_temporal_reply("[3, 17, 99]", 128, 8);
    assert_eq!(a.helpful_set, vec![2, 16, 98]);
    assert!(a.parse_ok);
    let b = parse_temporal_reply("Frames: 3 and 17.", 128, 8);
    assert_eq!(b.helpful_set, vec![2, 16]);
    assert!(!b.parse_ok);
    let c = parse_temporal_reply("[130]", 128, 8);
    assert!(c.helpful_set.is_empty());
    let d = parse_temporal_reply("[1, 1, 2, 3, 4]", 10, 2);
    assert_eq!(d.helpful_set, vec![0, 1]);
    let e = parse_temporal_reply("[-1, 0, 99999999999999999999999, 5]", 10, 8);
    assert_eq!(e.helpful_set, vec![4]);
}

#[test]
fn spatial_reads_verdict_distribution() {
    let mock = MockBackend::new(1, pattern()).unwrap();
    let hit = spatial_score_frame(&mock, &frame(0, [3.0, 0.1, 0.0, 0.2]), "what?").unwrap();
    let miss = spatial_score_frame(&mock, &frame(1, [0.0, 1.0, 1.0, 0.0]), "what?").unwrap();
    assert!(!hit.fallback_used);
    assert!(hit.score() > 0.9, "{hit:?}");
    assert!(miss.score() < 0.1, "{miss:?}");
    assert!(hit.p_true + hit.p_false <= 1.0 + 1e-9);
}

#[test]
fn fallback_appends_evaluation() {
    let omitted = ChatResponse {
        text: "The frame shows a dog near a tree.".into(),
        tokens: mock::tokenize("The frame shows a dog near a tree."),
    };
    let forced = ChatResponse {
        text: " True".into(),
        tokens: vec![TokenLogprob {
            token: " True".into(),
            logprob: 0.6f64.ln(),
            top: vec![
                TopLogprob {
                    token: " True".into(),
                    logprob: 0.6f64.ln(),
                },
                TopLogprob {
                    token: " False".into(),
                    logprob: 0.2f64.ln(),
                },
            ],
        }],
    };
    let script = ScriptedBackend::new(vec![omitted, forced]);
    let label = spatial_score_frame(&script, &frame(0, [1.0; 4]), "Is there a dog?").unwrap();
    assert!(label.fallback_used);
    assert!((label.score() - 0.75).abs() < 1e-12);
    assert_eq!(label.response, "The frame shows a dog near a tree.\nEvaluation: True");
    let reqs = script.requests();
    assert_eq!(reqs.len(), 2);
    assert_eq!(
        reqs[1].assistant_prefix.as_deref(),
        Some("The frame shows a dog near a tree.\nEvaluation:")
    );
    assert_eq!(reqs[0].prompt, prompts::spatial_prompt("Is there a dog?"));
}

#[test]
fn capability_checks() {
    let script = ScriptedBackend::new(vec![]).with_capabilities(Capabilities {
        supports_images: true,
        supports_token_logprobs: false,
    });
    let err = spatial_score_frame(&script, &frame(0, [1.0; 4]), "q").unwrap_err();
    assert!(err.is_config());
    assert!(script.requests().is_empty());
}

#[test]
fn captions_cached_and_aligned() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let frames: Vec<FrameInput> = (0..6)
        .map(|i| frame(i, if i % 3 == 0 { [2.0, 0.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0, 0.0] }))
        .collect();
    let mock = MockBackend::new(9, pattern()).unwrap();
    let cached = CachedBackend::open(&mock, &path).unwrap();
    let caps = caption_frames(&cached, &frames, Exec::Parallel, 3).unwrap();
    assert_eq!(caps.len(), 6);
    assert_eq!(cached.calls(), 6);
    let again = caption_frames(&cached, &frames, Exec::Parallel, 3).unwrap();
    assert_eq!(caps, again);
    assert_eq!(cached.calls(), 6);
    drop(cached);

    let reopened = CachedBackend::open(&mock, &path).unwrap();
    let third = caption_frames(&reopened, &frames, Exec::Sequential, 1).unwrap();
    assert_eq!(third, caps);
    assert_eq!(reopened.calls(), 0);

    let out = temporal_rank(&reopened, "v", &caps, "where is it?", 8).unwrap();
    assert_eq!(out.label.helpful_set, vec![0, 3]);
    assert!(out.label.parse_ok);
}

#[test]
fn empty_caption_replaced() {
    let script = ScriptedBackend::new(vec![ChatResponse {
        text: "  ".into(),
        tokens: vec![],
    }]);
    let caps = caption_frames(&script, &[frame(0, [1.0; 4])], Exec::Sequential, 1).unwrap();
    assert_eq!(caps, vec![EMPTY_CAPTION.to_string()]);
}

proptest! {
    #[test]
    fn eq6_scale_invariance(pt in 0.0f64..1.0, pf in 0.0f64..1.0, c in prop::sample::select(vec![0.1, 1.0, 10.0])) {
        prop_assume!(pt + pf > 1e-6);
        prop_assert!((spatial_score(pt, pf) - spatial_score(c * pt, c * pf)).abs() <= 1e-12);
    }

    #[test]
    fn normalized_max_is_one(v in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let out = normalize_spatial(&v).unwrap();
        let max = out.iter().copied().fold(0.0, f64::max);
        if v.iter().any(|&x| x > 0.0) {
            prop_assert_eq!(max, 1.0);
        } else {
            prop_assert_eq!(max, 0.0);
        }
    }

    #[test]
    fn fuse_commutes_and_stays_in_unit(a in prop::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) & 1) as f64).collect();
        let ab = fuse(&a, &b).unwrap();
        prop_assert_eq!(&ab, &fuse(&b, &a).unwrap());
        prop_assert!(ab.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn parser_never_panics(reply in ".{0,200}", n in 1usize..200, want in 0usize..12) {
        let l = parse_temporal_reply(&reply, n, want);
        prop_assert!(l.helpful_set.len() <= want);
        prop_assert!(l.helpful_set.iter().all(|&i| i < n));
    }
}
