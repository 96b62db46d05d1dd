//! Batch tasks behind the command-line interface. Every task is
//! single-threaded and seeded, so reruns reproduce their artifacts byte for
//! byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_denoiser, load_rcdnet, save_denoiser, save_rcdnet};
use crate::config::{RunConfig, TaskKind};
use crate::data::{
    load_all, merge_vocabularies, read_mask_png, read_rgb_png, write_label_png, write_manifest, write_mask_png,
    write_rgb_png, LayoutKind, Sample, MANIFEST_FILE,
};
use crate::domain::{BinaryChangeMap, ClassVocabulary, LogitMap, RasterImage, RasterPair, SemanticLabelMap};
use crate::error::{io_err, validation, RcdError, Result};
use crate::metrics::{render_eval_map, ConfusionState};
use crate::nn::AdamW;
use crate::rcdgen::{
    denoiser_training_step, downsample_mask, make_schedule, sample_postchange, upsample_mask, DenoiserItem,
    LatentCodec, LatentPack, SyntheticRecord, TinyDenoiser, LATENT_FACTOR,
};
use crate::rcdnet::{sample_target_class, training_step, RcdNet, TrainItem};
use crate::scalar::{sigmoid, Scalar};
use crate::textcond::{build_prompt, StubEmbedder, TextEmbedder};

pub const RCDNET_CHECKPOINT: &str = "rcdnet.json";
pub const DENOISER_CHECKPOINT: &str = "rcdgen.json";
pub const RUN_LOG: &str = "run.log";
pub const METRICS_FILE: &str = "metrics.txt";
pub const SYNTHETIC_DIR: &str = "synthetic";
pub const SYNTHETIC_SPLIT: &str = "ids.txt";

/// One invocation of the command-line interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    TrainRcdNet { config: PathBuf },
    Eval { config: PathBuf, checkpoint: PathBuf },
    Infer { pre: PathBuf, post: PathBuf, prompt: String, checkpoint: PathBuf, out: PathBuf },
    TrainRcdGen { config: PathBuf },
    Generate { config: PathBuf, count: usize },
    Render { gt: PathBuf, pred: PathBuf, out: PathBuf },
    Aggregate { input: PathBuf, out: PathBuf },
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::TrainRcdNet { .. } => TaskKind::TrainRcdNet,
            Task::Eval { .. } => TaskKind::Eval,
            Task::Infer { .. } => TaskKind::Infer,
            Task::TrainRcdGen { .. } => TaskKind::TrainRcdGen,
            Task::Generate { .. } => TaskKind::Generate,
            Task::Render { .. } => TaskKind::Render,
            Task::Aggregate { .. } => TaskKind::Aggregate,
        }
    }
}

/// Files written by a task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub artifacts: Vec<PathBuf>,
}

fn load_config(path: &Path, kind: TaskKind) -> Result<RunConfig> {
    let cfg = RunConfig::from_file(path)?;
    if let Some(t) = cfg.task {
        if t != kind {
            return Err(RcdError::Config(format!("config declares task {t:?}, invoked as {kind:?}")));
        }
    }
    Ok(cfg)
}

pub fn run(task: &Task) -> Result<RunSummary> {
    match task {
        Task::TrainRcdNet { config } => train_rcdnet(&load_config(config, task.kind())?).map(|r| r.summary),
        Task::Eval { config, checkpoint } => evaluate(&load_config(config, task.kind())?, checkpoint).map(|r| r.summary),
        Task::Infer { pre, post, prompt, checkpoint, out } => infer(pre, post, prompt, checkpoint, out),
        Task::TrainRcdGen { config } => train_rcdgen(&load_config(config, task.kind())?).map(|r| r.summary),
        Task::Generate { config, count } => generate(&load_config(config, task.kind())?, *count),
        Task::Render { gt, pred, out } => render(gt, pred, out),
        Task::Aggregate { input, out } => aggregate_dir(input, out, 0.5),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Deterministic run log: seed, config hash, then one line per event.
#[derive(Debug, Clone)]
pub struct RunLog {
    text: String,
}

impl RunLog {
    pub fn new(task: &str, cfg: &RunConfig) -> Self {
        Self {
            text: format!("task={task}\nseed={}\nconfig_hash={}\n", cfg.seed, cfg.hash),
        }
    }

    pub fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(RUN_LOG);
        write_text(&p, &self.text)?;
        Ok(p)
    }
}

fn embedder(cfg: &RunConfig) -> Result<StubEmbedder> {
    StubEmbedder::new(cfg.text.tokens, cfg.model.text_width, cfg.text.salt)
}

/// Training samples from every configured dataset, relabeled into the merged
/// vocabulary.
pub fn mixed_training_set(cfg: &RunConfig) -> Result<(Arc<ClassVocabulary>, Vec<Sample>)> {
    if cfg.train.datasets.is_empty() {
        return Err(RcdError::Config("`train.datasets` lists no dataset".into()));
    }
    let specs = cfg
        .train
        .datasets
        .iter()
        .map(|n| cfg.dataset(n))
        .collect::<Result<Vec<_>>>()?;
    let vocabs: Vec<&ClassVocabulary> = specs.iter().map(|s| s.vocab.as_ref()).collect();
    let (merged, remaps) = merge_vocabularies(&vocabs)?;
    let merged = Arc::new(merged);
    let mut samples = Vec::new();
    for (spec, remap) in specs.iter().zip(&remaps) {
        for s in load_all(spec, &cfg.train.split, None)? {
            samples.push(s.remapped(remap, &merged)?);
        }
    }
    if samples.is_empty() {
        return Err(validation("training split is empty"));
    }
    Ok((merged, samples))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub vocab: Arc<ClassVocabulary>,
    pub summary: RunSummary,
}

pub fn train_rcdnet(cfg: &RunConfig) -> Result<TrainReport> {
    let (vocab, samples) = mixed_training_set(cfg)?;
    let embed = embedder(cfg)?;
    let mut model = RcdNet::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let batches = samples.len().div_ceil(cfg.train.batch);
    let mut opt = AdamW::new(cfg.optim, cfg.train.epochs * batches, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = RunLog::new("train-rcdnet", cfg);
    log.line(format!("classes={}", vocab.names().join(",")));
    log.line(format!("samples={}", samples.len()));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.train.batch) {
            let batch: Vec<TrainItem<'_>> = chunk
                .iter()
                .map(|&i| TrainItem { pair: &samples[i].pair, label: &samples[i].label })
                .collect();
            total += training_step(&mut model, &mut opt, &batch, &vocab, &embed, &mut rng)?;
        }
        let mean = total / batches as f64;
        log.line(format!("epoch={epoch} loss={mean}"));
        epoch_losses.push(mean);
    }
    create_dir(&cfg.output)?;
    let ck = cfg.output.join(RCDNET_CHECKPOINT);
    save_rcdnet(&ck, &model, &vocab)?;
    let log_path = log.write(&cfg.output)?;
    Ok(TrainReport {
        epoch_losses,
        vocab,
        summary: RunSummary { artifacts: vec![ck, log_path] },
    })
}

/// Per-pixel fusion of per-class logit maps: classes whose
/// `sigmoid(logit) ≥ tau` compete, the highest logit wins, ties go to the
/// lowest class index, and no candidate means no change.
pub fn aggregate_semantic<T: Scalar>(
    per_class: &[(usize, LogitMap<T>)],
    tau: f64,
    vocab: Arc<ClassVocabulary>,
) -> Result<SemanticLabelMap> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(validation("threshold must lie in (0, 1)"));
    }
    let Some((_, first)) = per_class.first() else {
        return Err(validation("no class maps to aggregate"));
    };
    let (h, w) = (first.height(), first.width());
    let mut seen = std::collections::BTreeSet::new();
    for (c, m) in per_class {
        if !seen.insert(*c) {
            return Err(validation(format!("class index {c} appears twice")));
        }
        if *c == 0 || *c > vocab.len() {
            return Err(RcdError::Vocabulary(format!("class index {c} outside 1..={}", vocab.len())));
        }
        if (m.height(), m.width()) != (h, w) {
            return Err(validation("class maps differ in shape"));
        }
    }
    let labels = (0..h * w)
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (c, m) in per_class {
                let l = m.logits()[p].to_f64_lossy();
                if sigmoid(l) < tau {
                    continue;
                }
                best = match best {
                    Some((bc, bl)) if bl > l || (bl == l && bc < *c) => Some((bc, bl)),
                    _ => Some((*c, l)),
                };
            }
            best.map_or(0, |(c, _)| c as u16)
        })
        .collect();
    SemanticLabelMap::new(h, w, labels, vocab)
}

/// "H W" header, then one line of `W` values per row.
pub fn write_logit_text<T: Scalar>(path: &Path, logits: &LogitMap<T>) -> Result<()> {
    let mut s = format!("{} {}\n", logits.height(), logits.width());
    for row in logits.logits().chunks(logits.width()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_logit_text<T: Scalar>(path: &Path) -> Result<LogitMap<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |m: &str| validation(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad("empty logit file"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("bad header")))
        .collect::<Result<_>>()?;
    let [h, w] = header[..] else { return Err(bad("header must be `H W`")) };
    let mut values = Vec::with_capacity(h * w);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        for tok in line.split_whitespace() {
            values.push(T::from_str_radix(tok, 10).map_err(|_| bad("bad value"))?);
        }
    }
    if values.len() != h * w {
        return Err(bad("value count does not match header"));
    }
    LogitMap::new(h, w, values)
}

fn class_logits(
    model: &RcdNet<f32>,
    embed: &StubEmbedder,
    pair: &RasterPair,
    vocab: &ClassVocabulary,
) -> Result<Vec<(usize, LogitMap<f32>)>> {
    vocab
        .iter()
        .map(|(i, name)| {
            let text = embed.embed(&build_prompt(name)?)?;
            Ok((i, model.forward(pair, &text)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Reported metrics in output order.
    pub fields: Vec<(String, f64)>,
    pub summary: RunSummary,
}

fn format_fields(fields: &[(String, f64)]) -> String {
    fields.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k}={v}");
        s
    })
}

/// Scores a checkpoint on `eval.dataset`. Semantic datasets get the six
/// semantic metrics; binary datasets get `binary_iou` and `oa`.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let name = cfg
        .eval
        .dataset
        .as_deref()
        .ok_or_else(|| RcdError::Config("`eval.dataset` is not set".into()))?;
    let spec = cfg.dataset(name)?;
    let (model, ck_vocab) = load_rcdnet::<f32>(checkpoint)?;
    for (_, n) in spec.vocab.iter() {
        if ck_vocab.index_of(n).is_none() {
            return Err(RcdError::Vocabulary(format!("class `{n}` is unknown to the checkpoint")));
        }
    }
    let embed = StubEmbedder::new(cfg.text.tokens, model.config.text_width, cfg.text.salt)?;
    let samples = load_all(spec, &cfg.eval.split, None)?;
    if samples.is_empty() {
        return Err(validation("evaluation split is empty"));
    }
    let tau = model.config.threshold;
    let mut log = RunLog::new("eval", cfg);
    log.line(format!("checkpoint_classes={}", ck_vocab.names().join(",")));
    log.line(format!("samples={}", samples.len()));
    let fields: Vec<(String, f64)> = if spec.layout == LayoutKind::BcdPairs {
        let (mut inter, mut union, mut correct, mut total) = (0u64, 0u64, 0u64, 0u64);
        for s in &samples {
            let logits = class_logits(&model, &embed, &s.pair, &spec.vocab)?;
            let pred = logits[0].1.threshold(tau)?;
            for (&g, &p) in s.binary().mask().iter().zip(pred.mask()) {
                inter += u64::from(g & p);
                union += u64::from(g | p);
                correct += u64::from(g == p);
                total += 1;
            }
        }
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        vec![("binary_iou".into(), iou), ("oa".into(), correct as f64 / total as f64)]
    } else {
        let mut state = ConfusionState::new(spec.vocab.len());
        for s in &samples {
            let logits = class_logits(&model, &embed, &s.pair, &spec.vocab)?;
            let pred = aggregate_semantic(&logits, tau, spec.vocab.clone())?;
            state.accumulate(&s.label, &pred)?;
        }
        let r = state.report()?;
        vec![
            ("oa".into(), r.oa),
            ("miou".into(), r.miou),
            ("sek".into(), r.sek),
            ("fscd".into(), r.fscd),
            ("binary_iou".into(), r.binary_iou),
            ("composite".into(), r.composite),
        ]
    };
    for (k, v) in &fields {
        log.line(format!("{k}={v}"));
    }
    create_dir(&cfg.output)?;
    let metrics = cfg.output.join(METRICS_FILE);
    write_text(&metrics, &format_fields(&fields))?;
    let log_path = log.write(&cfg.output)?;
    Ok(EvalReport {
        fields,
        summary: RunSummary { artifacts: vec![metrics, log_path] },
    })
}

/// Post image with changed pixels blended half-way to red.
pub fn overlay(post: &RasterImage, mask: &BinaryChangeMap) -> Result<RasterImage> {
    if (post.height(), post.width()) != (mask.height(), mask.width()) {
        return Err(validation("overlay mask and image differ in shape"));
    }
    let red = [1.0f32, 0.0, 0.0];
    let px = post
        .pixels()
        .chunks(3)
        .zip(mask.mask())
        .flat_map(|(rgb, &m)| {
            let out: [f32; 3] = std::array::from_fn(|c| if m == 1 { 0.5 * rgb[c] + 0.5 * red[c] } else { rgb[c] });
            out
        })
        .collect();
    RasterImage::new(post.height(), post.width(), px)
}

pub fn infer(pre: &Path, post: &Path, prompt: &str, checkpoint: &Path, out: &Path) -> Result<RunSummary> {
    let (model, _) = load_rcdnet::<f32>(checkpoint)?;
    let pair = RasterPair::new("infer", read_rgb_png(pre)?, read_rgb_png(post)?)?;
    let embed = StubEmbedder::new(4, model.config.text_width, 0)?;
    let text = embed.embed(&build_prompt(prompt)?)?;
    let logits = model.forward(&pair, &text)?;
    let mask = logits.threshold(model.config.threshold)?;
    create_dir(out)?;
    let (lp, mp, op) = (out.join("logits.txt"), out.join("mask.png"), out.join("overlay.png"));
    write_logit_text(&lp, &logits)?;
    write_mask_png(&mp, &mask)?;
    write_rgb_png(&op, &overlay(pair.post(), &mask)?)?;
    Ok(RunSummary { artifacts: vec![lp, mp, op] })
}

pub fn train_rcdgen(cfg: &RunConfig) -> Result<TrainReport> {
    let (vocab, samples) = mixed_training_set(cfg)?;
    let embed = embedder(cfg)?;
    let codec = LatentCodec::<f32>::default();
    let sched = make_schedule(cfg.gen.timesteps)?;
    let mut model = TinyDenoiser::<f32>::new(cfg.gen.denoiser.clone(), cfg.seed)?;
    let batches = samples.len().div_ceil(cfg.train.batch);
    let mut opt = AdamW::new(cfg.gen.optim, cfg.gen.epochs * batches, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latents = samples
        .iter()
        .map(|s| Ok((codec.encode(s.pair.pre())?, codec.encode(s.pair.post())?)))
        .collect::<Result<Vec<_>>>()?;
    let mut log = RunLog::new("train-rcdgen", cfg);
    log.line(format!("classes={}", vocab.names().join(",")));
    log.line(format!("samples={}", samples.len()));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::new();
    for epoch in 1..=cfg.gen.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.train.batch) {
            let mut packs = Vec::new();
            let mut texts = Vec::new();
            for &i in chunk {
                let s = &samples[i];
                let class = sample_target_class(&s.label, &vocab, &mut rng)?;
                let mask = s.label.binarize_for_class(class)?;
                let (pre, post) = &latents[i];
                let (h, w) = (pre.shape()[0], pre.shape()[1]);
                packs.push(LatentPack::new(pre.clone(), post.clone(), downsample_mask(&mask, h, w)?)?);
                texts.push(embed.embed(&build_prompt(vocab.name(class).expect("sampled class"))?)?);
            }
            let batch: Vec<DenoiserItem<'_, f32>> =
                packs.iter().zip(&texts).map(|(pack, text)| DenoiserItem { pack, text }).collect();
            total += denoiser_training_step(&mut model, &mut opt, &batch, &sched, cfg.gen.dropout, &mut rng)?;
        }
        let mean = total / batches as f64;
        log.line(format!("epoch={epoch} loss={mean}"));
        epoch_losses.push(mean);
    }
    create_dir(&cfg.output)?;
    let ck = cfg.output.join(DENOISER_CHECKPOINT);
    save_denoiser(&ck, &model, &vocab)?;
    let log_path = log.write(&cfg.output)?;
    Ok(TrainReport {
        epoch_losses,
        vocab,
        summary: RunSummary { artifacts: vec![ck, log_path] },
    })
}

/// Samples `count` synthetic pairs from the pre images of `gen.dataset` and
/// writes them with a manifest and an id list under `output/synthetic`.
/// Without `gen.checkpoint` a freshly initialized denoiser is used.
pub fn generate(cfg: &RunConfig, count: usize) -> Result<RunSummary> {
    if count == 0 {
        return Err(validation("`--count` must be positive"));
    }
    let name = cfg
        .gen
        .dataset
        .as_deref()
        .ok_or_else(|| RcdError::Config("`gen.dataset` is not set".into()))?;
    let spec = cfg.dataset(name)?;
    let sources = load_all(spec, &cfg.gen.split, None)?;
    if sources.is_empty() {
        return Err(validation("generation source split is empty"));
    }
    let model = match &cfg.gen.checkpoint {
        Some(p) => load_denoiser::<f32>(p)?.0,
        None => TinyDenoiser::<f32>::new(cfg.gen.denoiser.clone(), cfg.seed)?,
    };
    let prompts: Vec<String> = if cfg.gen.prompts.is_empty() {
        spec.vocab.names().to_vec()
    } else {
        cfg.gen.prompts.iter().map(|p| build_prompt(p)).collect::<Result<_>>()?
    };
    let embed = embedder(cfg)?;
    let codec = LatentCodec::<f32>::default();
    let sched = make_schedule(cfg.gen.timesteps)?;
    let dir = cfg.output.join(SYNTHETIC_DIR);
    for sub in ["pre", "post", "mask"] {
        create_dir(&dir.join(sub))?;
    }
    let mut log = RunLog::new("generate", cfg);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let src = &sources[i % sources.len()];
        let prompt = &prompts[i % prompts.len()];
        let seed = cfg.seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pre = src.pair.pre();
        let pre_latent = codec.encode(pre)?;
        let text = embed.embed(prompt)?;
        let out = sample_postchange(&model, &pre_latent, Some(&text), cfg.guidance, cfg.gen.steps, &sched, &mut rng)?;
        let post = codec.decode(&out.post_latent)?;
        let mask = upsample_mask(&out.mask_latent, pre.height(), pre.width())?;
        let id = format!("syn{i:05}");
        let rel = |sub: &str| format!("{sub}/{id}.png");
        write_rgb_png(&dir.join(rel("pre")), pre)?;
        write_rgb_png(&dir.join(rel("post")), &post)?;
        write_mask_png(&dir.join(rel("mask")), &mask)?;
        log.line(format!("{id} source={} prompt={prompt} changed={}", src.id(), mask.count_ones()));
        records.push(SyntheticRecord {
            id: id.clone(),
            pre_image: rel("pre"),
            post_image: rel("post"),
            change_map: rel("mask"),
            prompt: prompt.clone(),
            source: spec.name.clone(),
            s_i: cfg.guidance.s_i,
            s_t: cfg.guidance.s_t,
            steps: cfg.gen.steps,
            seed,
        });
        debug_assert_eq!(LATENT_FACTOR * out.post_latent.shape()[0], pre.height());
    }
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &records)?;
    let ids = dir.join(SYNTHETIC_SPLIT);
    write_text(&ids, &records.iter().map(|r| format!("{}\n", r.id)).collect::<String>())?;
    let log_path = log.write(&cfg.output)?;
    Ok(RunSummary { artifacts: vec![manifest, ids, log_path] })
}

pub fn render(gt: &Path, pred: &Path, out: &Path) -> Result<RunSummary> {
    let img = render_eval_map(&read_mask_png(gt)?, &read_mask_png(pred)?)?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    write_rgb_png(out, &img)?;
    Ok(RunSummary { artifacts: vec![out.to_path_buf()] })
}

/// Reads every `<class>.txt` or `<class>_<name>.txt` logit file in `input`
/// and writes the fused 8-bit semantic map to `out`.
pub fn aggregate_dir(input: &Path, out: &Path, tau: f64) -> Result<RunSummary> {
    let mut per_class = Vec::new();
    let entries = fs::read_dir(input).map_err(io_err(input))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(io_err(input)))
        .collect::<Result<_>>()?;
    paths.sort();
    for p in paths.iter().filter(|p| p.extension().is_some_and(|e| e == "txt")) {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let idx: usize = stem
            .split('_')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| validation(format!("{}: file name must start with a class index", p.display())))?;
        per_class.push((idx, read_logit_text::<f32>(p)?));
    }
    let max = per_class.iter().map(|(c, _)| *c).max().unwrap_or(0);
    let vocab = Arc::new(ClassVocabulary::new((1..=max).map(|i| format!("class{i}")))?);
    let map = aggregate_semantic(&per_class, tau, vocab)?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    write_label_png(out, &map)?;
    Ok(RunSummary { artifacts: vec![out.to_path_buf()] })
}
