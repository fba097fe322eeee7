use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use framesel::config::PipelineConfig;
use framesel::dataset::{materialize, synthetic_dataset, DatasetRecord};
use framesel::eval::{
    evaluate_policy, gen_timelines, sweep_pool_size, ConstantScorer, EvalOptions, OracleScorer, RandomScorer, Scorer,
    SelectorScorer, SimilarityScorer, SyntheticTask,
};
use framesel::frame_model::{plan_uniform, VideoMeta};
use framesel::pipeline::{
    build_train_data, caption_task, fuse_records, label_spatial, rank_captions, CaptionRecord, LabelOptions, PlanRecord,
    ScoreRecord, SpatialRecord, TemporalRecord,
};
use framesel::pseudo_label::PseudoLabelRecord;
use framesel::selection::{select, ImportanceVector, Policy, Provenance, SelectionReport};
use framesel::selector::checkpoint::Checkpoint;
use framesel::selector::{SelectorParams, Stage};
use framesel::store::{read_records, write_records, Record, RunInfo};
use framesel::training::Trainer;
use framesel::{Error, Exec, Result};

use crate::{Cli, Command, ScorerArgs, ScorerKind, SelectionArgs};

struct Ctx {
    cfg: PipelineConfig,
    run: RunInfo,
}

impl Ctx {
    fn exec(&self) -> Exec {
        self.cfg.exec()
    }

    fn write<T: Record>(&self, path: &Path, records: &[T]) -> Result<()> {
        write_records(path, Some(&self.run), records)?;
        log::info!("wrote {} {} records to {}", records.len(), T::KIND, path.display());
        Ok(())
    }

    fn label_opts(&self) -> LabelOptions {
        LabelOptions {
            want: self.cfg.labeler.want,
            exec: Exec::Sequential,
            limit: self.cfg.labeler.limit,
        }
    }

    fn tasks(&self, dataset: &Path) -> Result<Vec<SyntheticTask>> {
        let records: Vec<DatasetRecord> = read(dataset)?;
        let base = dataset.parent().unwrap_or(Path::new("."));
        materialize(&records, &self.cfg.synthetic, self.cfg.pooled_side(), base, self.exec())
    }

    fn selection(&self, args: &SelectionArgs) -> Result<(usize, Policy)> {
        let k = args.k.unwrap_or(self.cfg.selection.k);
        let policy = match &args.policy {
            Some(p) => p.parse()?,
            None => self.cfg.selection.policy,
        };
        Ok((k, policy))
    }
}

fn read<T: Record>(path: &Path) -> Result<Vec<T>> {
    Ok(read_records(path)?.1)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.sequential {
        cfg.parallelism = Exec::Sequential;
    }
    let run = RunInfo::new(cfg.config_hash(), cfg.seed);
    let ctx = Ctx { cfg, run };
    match cli.command {
        Command::Plan { videos, n, out } => plan(&ctx, &videos, n, &out),
        Command::LabelSpatial { dataset, out } => label_spatial_cmd(&ctx, &dataset, &out),
        Command::Caption { dataset, out } => caption(&ctx, &dataset, &out),
        Command::LabelTemporal { dataset, captions, out } => label_temporal_cmd(&ctx, &dataset, &captions, &out),
        Command::Fuse { spatial, temporal, out } => fuse(&ctx, &spatial, &temporal, &out),
        Command::Train {
            stage,
            dataset,
            labels,
            from,
            out,
            log,
        } => train(&ctx, stage, &dataset, &labels, from.as_deref(), &out, log.as_deref()),
        Command::Select {
            scores,
            checkpoint,
            dataset,
            selection,
            scores_out,
            out,
        } => select_cmd(&ctx, scores, checkpoint.zip(dataset), &selection, scores_out.as_deref(), &out),
        Command::Eval {
            dataset,
            scorer,
            selection,
            timing,
            out,
        } => eval(&ctx, &dataset, &scorer, &selection, timing, &out),
        Command::Sweep {
            count,
            pools,
            k,
            scorer,
            out,
        } => sweep(&ctx, count, &pools, k, &scorer, &out),
        Command::GenSynthetic { count, out } => {
            let records = synthetic_dataset(count, &ctx.cfg.synthetic, ctx.cfg.seed, ctx.exec())?;
            ctx.write(&out, &records)
        }
        Command::Report {
            eval,
            sweep,
            selections,
            train_log,
            out_dir,
        } => crate::report::write_report(&eval, sweep.as_deref(), selections.as_deref(), train_log.as_deref(), &out_dir),
    }
}

fn plan(ctx: &Ctx, videos: &Path, n: usize, out: &Path) -> Result<()> {
    let metas: Vec<VideoMeta> = read(videos)?;
    let plans = metas
        .iter()
        .map(|m| {
            Ok(PlanRecord {
                video_id: m.video_id.clone(),
                plan: plan_uniform(m, n)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.write(out, &plans)
}

fn label_spatial_cmd(ctx: &Ctx, dataset: &Path, out: &Path) -> Result<()> {
    let tasks = ctx.tasks(dataset)?;
    let backend = ctx.cfg.backend()?;
    let opts = ctx.label_opts();
    let records = ctx
        .exec()
        .map(&tasks, |t| label_spatial(backend.as_ref(), t, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    ctx.write(out, &records)
}

fn caption(ctx: &Ctx, dataset: &Path, out: &Path) -> Result<()> {
    let tasks = ctx.tasks(dataset)?;
    let backend = ctx.cfg.backend()?;
    let opts = ctx.label_opts();
    let prompt = ctx.cfg.labeler.caption_prompt.as_str();
    // one caption set per video, even when several questions share it
    let mut seen = std::collections::HashSet::new();
    let unique: Vec<&SyntheticTask> = tasks.iter().filter(|t| seen.insert(t.video_id.clone())).collect();
    let records = ctx
        .exec()
        .map(&unique, |t| caption_task(backend.as_ref(), t, prompt, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    ctx.write(out, &records)
}

fn label_temporal_cmd(ctx: &Ctx, dataset: &Path, captions: &Path, out: &Path) -> Result<()> {
    let tasks = ctx.tasks(dataset)?;
    let caps: HashMap<String, CaptionRecord> =
        read::<CaptionRecord>(captions)?.into_iter().map(|c| (c.video_id.clone(), c)).collect();
    let backend = ctx.cfg.backend()?;
    let want = ctx.cfg.labeler.want;
    let records = ctx
        .exec()
        .map(&tasks, |t| {
            let c = caps
                .get(&t.video_id)
                .ok_or_else(|| Error::domain(format!("no captions for video {}", t.video_id)))?;
            rank_captions(backend.as_ref(), t, c, want)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    ctx.write(out, &records)
}

fn fuse(ctx: &Ctx, spatial: &Path, temporal: &Path, out: &Path) -> Result<()> {
    let s: Vec<SpatialRecord> = read(spatial)?;
    let t: Vec<TemporalRecord> = read(temporal)?;
    if s.len() != t.len() {
        return Err(Error::domain(format!(
            "{} spatial records but {} temporal records",
            s.len(),
            t.len()
        )));
    }
    let fused = s.iter().zip(&t).map(|(a, b)| fuse_records(a, b)).collect::<Result<Vec<_>>>()?;
    ctx.write(out, &fused)
}

/// Labels reordered to match the tasks.
fn aligned_labels(tasks: &[SyntheticTask], labels: Vec<PseudoLabelRecord>) -> Result<Vec<PseudoLabelRecord>> {
    let mut by_id: HashMap<String, PseudoLabelRecord> = labels.into_iter().map(|l| (l.question_id.clone(), l)).collect();
    tasks
        .iter()
        .map(|t| {
            by_id
                .remove(&t.question_id)
                .ok_or_else(|| Error::domain(format!("no pseudo-labels for {}", t.question_id)))
        })
        .collect()
}

fn train(
    ctx: &Ctx,
    stage: u8,
    dataset: &Path,
    labels: &Path,
    from: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<()> {
    let config = ctx.cfg.stage_config(stage)?;
    let start = match from {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::config(format!("checkpoint {} does not exist", p.display())));
            }
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let (params, adapters) = match (config.stage, start) {
        (Stage::Two, None) => return Err(Error::config("stage 2 needs --from with a stage-1 checkpoint")),
        (Stage::Two, Some(ck)) if ck.stage.is_none() => {
            return Err(Error::config("stage 2 needs a checkpoint that finished stage 1"))
        }
        (_, Some(ck)) => {
            if ck.params.config != ctx.cfg.selector {
                return Err(Error::config("checkpoint selector shape differs from the configured one"));
            }
            (ck.params, if config.stage == Stage::Two { ck.adapters } else { None })
        }
        (Stage::One, None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
            (SelectorParams::init(&ctx.cfg.selector, &mut rng), None)
        }
    };
    let tasks = ctx.tasks(dataset)?;
    let labels = aligned_labels(&tasks, read(labels)?)?;
    let data = build_train_data(&tasks, &labels, &params)?;
    let mut trainer = Trainer::new(config, params, adapters, &data)?;
    let mut losses = Vec::new();
    for epoch in 0..trainer.config.epochs {
        let r = trainer.run_epoch(&data)?;
        let mean = r.iter().map(|l| l.loss).sum::<f64>() / r.len().max(1) as f64;
        eprintln!("stage {stage} epoch {epoch}: mean loss {mean:.4}");
        losses.extend(r);
    }
    let ck = Checkpoint {
        seed: ctx.cfg.seed,
        stage: Some(trainer.config.stage),
        params: trainer.params,
        adapters: trainer.adapters,
    };
    ck.save(out)?;
    eprintln!("checkpoint {} sha256 {}", out.display(), ck.content_hash()?);
    if let Some(p) = log_path {
        ctx.write(p, &losses)?;
    }
    Ok(())
}

fn selector_scorer(path: &Path) -> Result<SelectorScorer> {
    let ck = Checkpoint::load(path)?;
    Ok(SelectorScorer::new(ck.params, ck.adapters))
}

fn select_cmd(
    ctx: &Ctx,
    scores: Option<PathBuf>,
    model: Option<(PathBuf, PathBuf)>,
    selection: &SelectionArgs,
    scores_out: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (k, policy) = ctx.selection(selection)?;
    let records: Vec<ScoreRecord> = match (scores, model) {
        (Some(p), None) => read(&p)?,
        (None, Some((ck, dataset))) => {
            let scorer = selector_scorer(&ck)?;
            let tasks = ctx.tasks(&dataset)?;
            ctx.exec()
                .map(&tasks, |t| {
                    Ok(ScoreRecord {
                        video_id: t.video_id.clone(),
                        question_id: t.question_id.clone(),
                        scores: scorer.score(t)?,
                    })
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?
        }
        _ => return Err(Error::config("select needs --scores, or --checkpoint with --dataset")),
    };
    if let Some(p) = scores_out {
        ctx.write(p, &records)?;
    }
    let reports = records
        .iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed ^ fnv(r.question_id.as_bytes()));
            let sel = select(policy, &r.scores, k, &mut rng)?;
            Ok(SelectionReport::new(&r.video_id, &r.question_id, &sel))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = reports.first() {
        eprintln!(
            "{} selections, k = {k}, policy {policy:?}, delta = {}",
            reports.len(),
            first.delta
        );
    }
    ctx.write(out, &reports)
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Fused pseudo-labels served as scores.
struct LabelScorer {
    by_question: HashMap<String, Vec<f64>>,
}

impl Scorer for LabelScorer {
    fn name(&self) -> String {
        "labels".into()
    }
    fn score(&self, task: &SyntheticTask) -> Result<ImportanceVector> {
        let s = self
            .by_question
            .get(&task.question_id)
            .ok_or_else(|| Error::domain(format!("no pseudo-labels for {}", task.question_id)))?;
        ImportanceVector::new(s.clone(), Provenance::Fused)
    }
}

fn build_scorer(ctx: &Ctx, args: &ScorerArgs) -> Result<(Box<dyn Scorer>, Option<usize>)> {
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| Error::config(format!("--scorer {:?} needs {flag}", args.scorer)))
    };
    Ok(match args.scorer {
        ScorerKind::Oracle => (Box::new(OracleScorer), None),
        ScorerKind::Random => (Box::new(RandomScorer { seed: ctx.cfg.seed }), None),
        ScorerKind::Constant => (Box::new(ConstantScorer { value: 0.5 }), None),
        ScorerKind::ClipSim => (
            Box::new(SimilarityScorer {
                reference: ctx.cfg.synthetic.pattern(),
            }),
            None,
        ),
        ScorerKind::Selector => {
            let s = selector_scorer(&need(&args.checkpoint, "--checkpoint")?)?;
            let max = s.params.config.max_frames;
            (Box::new(s), Some(max))
        }
        ScorerKind::Labels => {
            let labels: Vec<PseudoLabelRecord> = read(&need(&args.labels, "--labels")?)?;
            let by_question = labels.into_iter().map(|l| (l.question_id, l.fused)).collect();
            (Box::new(LabelScorer { by_question }), None)
        }
    })
}

fn eval(ctx: &Ctx, dataset: &Path, scorer: &ScorerArgs, selection: &SelectionArgs, timing: bool, out: &Path) -> Result<()> {
    let (k, policy) = ctx.selection(selection)?;
    let (scorer, _) = build_scorer(ctx, scorer)?;
    let tasks = ctx.tasks(dataset)?;
    if let Some(t) = tasks.iter().find(|t| t.key_set.is_empty()) {
        return Err(Error::domain(format!("{} has no ground-truth key frames", t.question_id)));
    }
    let opts = EvalOptions {
        seed: ctx.cfg.seed,
        exec: ctx.exec(),
        timing,
    };
    let report = evaluate_policy(&tasks, scorer.as_ref(), policy, k, Some(&ctx.cfg.downstream), opts)?;
    eprintln!(
        "{} {:?} k={} n={}: hit {:.3} recall {:.3}",
        report.scorer, report.policy, report.k, report.n, report.hit_rate, report.recall
    );
    ctx.write(out, &[report])
}

fn sweep(ctx: &Ctx, count: usize, pools: &[usize], k: usize, scorer: &ScorerArgs, out: &Path) -> Result<()> {
    let (scorer, max_pool) = build_scorer(ctx, scorer)?;
    let timelines = gen_timelines(count, &ctx.cfg.timeline, ctx.cfg.seed)?;
    let opts = EvalOptions {
        seed: ctx.cfg.seed,
        exec: ctx.exec(),
        timing: false,
    };
    let report = sweep_pool_size(&timelines, &ctx.cfg.synthetic, scorer.as_ref(), pools, k, max_pool, opts)?;
    for r in &report.reports {
        eprintln!("n={:>4} k={}: hit {:.3}", r.n, r.k, r.hit_rate);
    }
    if !report.skipped.is_empty() {
        eprintln!("skipped pools {:?}", report.skipped);
    }
    ctx.write(out, &[report])
}
