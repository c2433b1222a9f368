//! End-to-end pipeline: fit tokenizers, pretrain the text backbone once,
//! specialize it per variant (alignment, codebook init, bias-norm
//! insertion, fine-tuning), evaluate, and report.
//!
//! The expensive text pretraining is shared: [`prepare_base`] produces a
//! frozen-backbone [`Bundle`] (serializable, so workers can rehydrate it
//! from bytes), and [`specialize`] stamps out trained variants from it —
//! the ablation grid and the audio-vocabulary sweep both reuse one base.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Bundle;
use crate::datagen::{
    all_shape_triples, render_shape, Record, IMAGE_SIDE, POSITIONS, SHAPES, SIZES,
};
use crate::error::{Error, Result};
use crate::generate::{generate, prompt_prefix};
use crate::metrics::{bleu4, corpus_wer};
use crate::model::{init_model, MmLlm, ModelConfig, ProjectionKind};
use crate::sampling::GenConfig;
use crate::templates::{all_literal_text, render_prompt, template_pool, LossExtent, Task};
use crate::tokenizers::kmeans::{kmeans_assign, kmeans_fit, Codebook, KmeansConfig};
use crate::tokenizers::text::{TextVocab, BOS, EOS};
use crate::tokenizers::vq::{extract_patches, vq_detokenize, vq_fit, vq_tokenize, VqConfig, VqModel};
use crate::training::{
    pretrain_text, stage1_align, stage2_finetune, PretrainReport, StageReport, TaskExample,
    TrainConfig,
};
use crate::vocab::{JointVocab, Modality, Segment};

/// Which training ingredient to knock out, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoStage1,
    NoCodebookInit,
    NoBiasNorm,
}

impl Ablation {
    pub const ALL: [Ablation; 4] =
        [Ablation::None, Ablation::NoStage1, Ablation::NoCodebookInit, Ablation::NoBiasNorm];

    pub fn slug(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoStage1 => "no_stage1",
            Ablation::NoCodebookInit => "no_codebook_init",
            Ablation::NoBiasNorm => "no_bias_norm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Everything one pipeline run needs, JSON-loadable with full defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    /// Image codebook size (the VQ `k`).
    pub k_image: usize,
    /// Audio codebook size.
    pub k_audio: usize,
    pub vq: VqConfig,
    pub kmeans: KmeansConfig,
    pub stage0: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub decode: GenConfig,
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.backbone.layers = 3;
        model.backbone.d_model = 128;
        model.backbone.heads = 8;
        model.backbone.d_ff = 384;
        model.backbone.max_seq = 96;
        // The gated projection lifts codebook vectors (8–16 dims) into the
        // 128-dim joint space without the rank ceiling an affine map has;
        // at this scale that rank ceiling is what caps alignment quality.
        model.projection = ProjectionKind::Mlp;
        PipelineConfig {
            model,
            k_image: 64,
            k_audio: 64,
            vq: VqConfig::default(),
            kmeans: KmeansConfig::default(),
            stage0: TrainConfig { epochs: 40, ..TrainConfig::stage0_default() },
            stage1: TrainConfig { epochs: 20, ..TrainConfig::stage1_default() },
            stage2: TrainConfig { epochs: 48, lr: 1e-3, ..TrainConfig::stage2_default() },
            decode: GenConfig::default(),
            ablation: Ablation::None,
        }
    }
}

pub fn load_pipeline_config(path: &Path) -> Result<PipelineConfig> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// FNV-1a 64-bit hash, used to fingerprint configurations in reports.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn config_fingerprint(cfg: &PipelineConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    format!("{:016x}", fnv1a64(json.as_bytes()))
}

/// One evaluation result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub sample_count: usize,
    pub config_fingerprint: String,
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut reports = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            reports.push(serde_json::from_str(&line)?);
        }
    }
    Ok(reports)
}

// --- tokenizer fitting ------------------------------------------------------

/// Deduplicated, sorted text lines from records.
pub fn unique_texts(records: &[Record]) -> Vec<String> {
    let set: BTreeSet<String> = records.iter().filter_map(|r| r.text.clone()).collect();
    set.into_iter().collect()
}

/// The text-pretraining corpus: every record text plus every prompt
/// template literal, deduplicated.
pub fn pretrain_corpus(records: &[Record]) -> Vec<String> {
    let mut set: BTreeSet<String> = records.iter().filter_map(|r| r.text.clone()).collect();
    set.extend(all_literal_text());
    set.into_iter().collect()
}

/// At most `cap` lines, evenly sampled to preserve variety. The text vocab
/// is always fit on the full corpus; only the pretraining pass is capped,
/// since backbone quality saturates long before line count does.
pub fn cap_lines(lines: &[String], cap: usize) -> Vec<String> {
    if lines.len() <= cap {
        return lines.to_vec();
    }
    (0..cap).map(|i| lines[i * lines.len() / cap].clone()).collect()
}

/// Lines whose second half restates their first half. A corpus of unique
/// sentences is learnable by memorization alone, which leaves the backbone's
/// attention with no reason to consult earlier context; these lines are only
/// predictable by reading the first occurrence, so pretraining on them forces
/// the recall circuits that the later adaptation stages depend on to move
/// prompt content into responses. Three layouts, matching the shapes prompts
/// take downstream: a verbatim copy across a few unrelated separator words,
/// a run-length compression (grouped repeats, then each word once), and its
/// expansion inverse.
pub fn recall_corpus(base: &[String], n_lines: usize, seed: u64) -> Vec<String> {
    let mut words: Vec<&str> = base.iter().flat_map(|l| l.split_whitespace()).collect();
    words.sort_unstable();
    words.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng| words[rng.gen_range(0..words.len())];
    let mut out = Vec::with_capacity(n_lines);
    for _ in 0..n_lines {
        let len = rng.gen_range(3..=6);
        let phrase: Vec<&str> = (0..len).map(|_| pick(&mut rng)).collect();
        let once = phrase.join(" ");
        let grouped =
            phrase.iter().flat_map(|w| std::iter::repeat(*w).take(3)).collect::<Vec<_>>().join(" ");
        let line = match rng.gen_range(0..10u32) {
            0..=1 => {
                let sep: Vec<&str> = (0..rng.gen_range(0..=3)).map(|_| pick(&mut rng)).collect();
                if sep.is_empty() {
                    format!("{once} {once}")
                } else {
                    format!("{once} {} {once}", sep.join(" "))
                }
            }
            2..=6 => format!("{grouped} {once}"),
            _ => format!("{once} {grouped}"),
        };
        out.push(line);
    }
    out
}

pub fn fit_text_vocab(records: &[Record]) -> TextVocab {
    TextVocab::fit(&pretrain_corpus(records))
}

/// Fit the patch autoencoder on every image in the records.
pub fn fit_image_tokenizer(records: &[Record], cfg: &VqConfig) -> Result<VqModel<f32>> {
    let mut patches = Vec::new();
    for r in records {
        if r.image.is_some() {
            patches.extend(extract_patches(&r.image_grid()?, cfg.patch_size)?);
        }
    }
    if patches.is_empty() {
        return Err(Error::Infeasible("no images to fit the patch tokenizer on".into()));
    }
    Ok(vq_fit(&patches, cfg)?.0)
}

/// Fit the audio frame codebook on every frame in the records.
pub fn fit_audio_codebook(
    records: &[Record],
    k: usize,
    cfg: &KmeansConfig,
) -> Result<Codebook<f32>> {
    let mut frames = Vec::new();
    let mut dim = 0usize;
    for r in records {
        if let Some(fs) = &r.audio {
            for f in fs {
                dim = f.len();
                frames.extend_from_slice(f);
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::Infeasible("no audio to fit the frame codebook on".into()));
    }
    Ok(kmeans_fit(&frames, dim, k, cfg)?.codebook)
}

// --- record tokenization ----------------------------------------------------

pub fn image_segment(r: &Record, vq: &VqModel<f32>) -> Result<Segment> {
    Ok(Segment::Image(vq_tokenize(vq, &r.image_grid()?)?))
}

pub fn audio_segment(r: &Record, cb: &Codebook<f32>) -> Result<Segment> {
    let frames = r.audio.as_ref().expect("validated audio record");
    let flat: Vec<f32> = frames.iter().flatten().copied().collect();
    Ok(Segment::Audio(kmeans_assign(cb, &flat)?))
}

/// Records turned into training material: alignment pairs (from the pair
/// tasks) and fine-tuning examples (from the rest).
pub struct TokenizedData {
    pub pairs: Vec<(Segment, String)>,
    pub examples: Vec<TaskExample>,
}

pub fn tokenize_records(
    records: &[Record],
    tv: &TextVocab,
    vq: &VqModel<f32>,
    cb: &Codebook<f32>,
) -> Result<TokenizedData> {
    let mut data = TokenizedData { pairs: Vec::new(), examples: Vec::new() };
    for r in records {
        r.validate()?;
        let text = r.text.clone().expect("validated text");
        match r.task {
            Task::PairImage => data.pairs.push((image_segment(r, vq)?, text)),
            Task::PairAudio => data.pairs.push((audio_segment(r, cb)?, text)),
            Task::Caption => data.examples.push(TaskExample {
                task: Task::Caption,
                content: image_segment(r, vq)?,
                response: Segment::Text(tv.encode_words(&text)),
            }),
            Task::ImageGen => data.examples.push(TaskExample {
                task: Task::ImageGen,
                content: Segment::Text(tv.encode_words(&text)),
                response: image_segment(r, vq)?,
            }),
            Task::Asr => data.examples.push(TaskExample {
                task: Task::Asr,
                content: audio_segment(r, cb)?,
                response: Segment::Text(tv.encode_words(&text)),
            }),
        }
    }
    Ok(data)
}

// --- pipeline stages --------------------------------------------------------

fn grid_len_for(vq: &VqConfig) -> Result<usize> {
    if vq.patch_size == 0 || IMAGE_SIDE % vq.patch_size != 0 {
        return Err(Error::Config(format!(
            "patch size {} does not tile a {IMAGE_SIDE}-pixel image",
            vq.patch_size
        )));
    }
    let per_side = IMAGE_SIDE / vq.patch_size;
    Ok(per_side * per_side)
}

fn joint_vocab_for(tv: &TextVocab, k_image: usize, k_audio: usize, vq: &VqConfig) -> Result<JointVocab> {
    JointVocab::new(tv.size(), k_image, k_audio)?.with_image_grid(grid_len_for(vq)?)
}

/// Fit all tokenizers and pretrain the text backbone. The returned bundle
/// holds the frozen base model plus the tokenizers; serialize it to share
/// the pretraining across variant workers.
pub fn prepare_base(cfg: &PipelineConfig, records: &[Record]) -> Result<(Bundle, PretrainReport)> {
    let tv = fit_text_vocab(records);
    let vq_cfg = VqConfig { k: cfg.k_image, ..cfg.vq };
    let vq = fit_image_tokenizer(records, &vq_cfg)?;
    let audio_cb = fit_audio_codebook(records, cfg.k_audio, &cfg.kmeans)?;

    let jv = joint_vocab_for(&tv, cfg.k_image, cfg.k_audio, &vq_cfg)?;
    let model = init_model(&cfg.model, &jv)?;
    let full = pretrain_corpus(records);
    let mut corpus = cap_lines(&full, 320);
    let recall = recall_corpus(&full, 2 * corpus.len(), cfg.stage0.seed ^ 0x9e3779b9);
    corpus.extend(recall);
    // Hold out every eighth line for the perplexity probe.
    let held_out: Vec<String> = corpus.iter().step_by(8).cloned().collect();
    let train: Vec<String> =
        corpus.iter().enumerate().filter(|(i, _)| i % 8 != 0).map(|(_, l)| l.clone()).collect();
    let report = pretrain_text(&model, &tv, &train, &held_out, &cfg.stage0)?;
    Ok((Bundle { model, text_vocab: tv, vq, audio_cb }, report))
}

/// A specialized (aligned + fine-tuned) variant.
pub struct VariantOutcome {
    pub bundle: Bundle,
    pub stage1: Option<StageReport>,
    pub stage2: StageReport,
}

/// Seed both non-textual embedding/output tables from their tokenizers'
/// codebooks.
pub fn codebook_init(
    model: &mut MmLlm<f32>,
    vq: &VqModel<f32>,
    audio_cb: &Codebook<f32>,
) -> Result<()> {
    model.init_nontextual_from_codebook(Modality::Image, &vq.codebook)?;
    model.init_nontextual_from_codebook(Modality::Audio, audio_cb)
}

/// Stamp a trained variant out of a frozen base model: fresh modality
/// tables sized for the given tokenizers, optional codebook init, optional
/// alignment stage, optional bias-norm insertion, then fine-tuning. Which
/// steps run is controlled by `cfg.ablation`.
pub fn specialize(
    base: &MmLlm<f32>,
    tv: &TextVocab,
    vq: VqModel<f32>,
    audio_cb: Codebook<f32>,
    cfg: &PipelineConfig,
    train: &[Record],
) -> Result<VariantOutcome> {
    let jv = joint_vocab_for(tv, vq.codebook.k(), audio_cb.k(), &vq.cfg)?;
    let mut model = base.clone_with_new_modalities(
        &jv,
        cfg.model.d_code_image,
        cfg.model.d_code_audio,
        cfg.model.seed,
    )?;
    if cfg.ablation != Ablation::NoCodebookInit {
        codebook_init(&mut model, &vq, &audio_cb)?;
    }
    let data = tokenize_records(train, tv, &vq, &audio_cb)?;
    let stage1 = if cfg.ablation != Ablation::NoStage1 && !data.pairs.is_empty() {
        Some(stage1_align(&model, tv, &data.pairs, &cfg.stage1)?)
    } else {
        None
    };
    if cfg.ablation != Ablation::NoBiasNorm {
        model.insert_bias_norm();
    }
    let stage2 = stage2_finetune(&model, tv, &data.examples, &cfg.stage2)?;
    Ok(VariantOutcome {
        bundle: Bundle { model, text_vocab: tv.clone(), vq, audio_cb },
        stage1,
        stage2,
    })
}

// --- evaluation -------------------------------------------------------------

/// Parse "a {size} {shape} at {position}" back into grammar indices.
pub fn caption_to_triple(caption: &str) -> Option<(usize, usize, usize)> {
    let w: Vec<&str> = caption.split_whitespace().collect();
    if w.len() != 5 || w[0] != "a" || w[3] != "at" {
        return None;
    }
    let size = SIZES.iter().position(|&s| s == w[1])?;
    let shape = SHAPES.iter().position(|&s| s == w[2])?;
    let position = POSITIONS.iter().position(|&s| s == w[4])?;
    Some((shape, position, size))
}

/// Render the evaluation prompt for a task: the first template in the
/// pool, cut just before the first loss-target token.
pub fn eval_prompt(
    task: Task,
    content: Segment,
    jv: &JointVocab,
    tv: &TextVocab,
) -> Result<Vec<u32>> {
    let t = &template_pool(task)[0];
    let dummy = match task {
        Task::ImageGen => {
            Segment::Image(vec![0; jv.image_grid_len().expect("image-grid vocabulary")])
        }
        _ => Segment::Text(vec![crate::tokenizers::text::UNK]),
    };
    let (tokens, mask) = render_prompt(t, &[content, dummy], jv, tv, LossExtent::ResponseOnly)?;
    Ok(prompt_prefix(&tokens, &mask).to_vec())
}

/// Decode the text portion of a generated continuation; malformed span
/// structure yields an empty hypothesis rather than an error.
fn text_hypothesis(jv: &JointVocab, tv: &TextVocab, generated: &[u32]) -> String {
    let mut wrapped = Vec::with_capacity(generated.len() + 2);
    wrapped.push(BOS);
    wrapped.extend_from_slice(generated);
    wrapped.push(EOS);
    match jv.split_segments(&wrapped) {
        Ok(segments) => segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(ids) => tv.decode(ids).ok(),
                _ => None,
            })
            .collect::<Vec<_>>()
            .join(" "),
        Err(_) => String::new(),
    }
}

fn per_sample_seed(base: &GenConfig, i: usize) -> GenConfig {
    GenConfig { seed: base.seed.wrapping_add(i as u64), ..*base }
}

#[derive(Debug, Clone, Copy)]
pub struct CaptionEval {
    pub exact_match: f64,
    /// Mean sentence BLEU-4 in percentage points (0..=100).
    pub bleu: f64,
    pub n: usize,
}

pub fn eval_caption(
    model: &MmLlm<f32>,
    tv: &TextVocab,
    vq: &VqModel<f32>,
    records: &[Record],
    decode: &GenConfig,
) -> Result<CaptionEval> {
    let jv = model.vocab;
    let mut exact = 0usize;
    let mut bleu_sum = 0.0f64;
    let mut n = 0usize;
    for (i, r) in records.iter().filter(|r| r.task == Task::Caption).enumerate() {
        let prompt = eval_prompt(Task::Caption, image_segment(r, vq)?, &jv, tv)?;
        let out = generate(model, &prompt, &per_sample_seed(decode, i))?;
        let hyp = text_hypothesis(&jv, tv, &out.tokens);
        let reference = r.text.as_deref().expect("validated text");
        exact += usize::from(hyp == reference);
        bleu_sum += bleu4(&hyp, &[reference])?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Infeasible("no caption records to evaluate".into()));
    }
    Ok(CaptionEval { exact_match: exact as f64 / n as f64, bleu: 100.0 * bleu_sum / n as f64, n })
}

#[derive(Debug, Clone, Copy)]
pub struct AsrEval {
    /// Corpus word error rate: total edits over total reference words.
    pub wer: f64,
    pub n: usize,
}

pub fn eval_asr(
    model: &MmLlm<f32>,
    tv: &TextVocab,
    cb: &Codebook<f32>,
    records: &[Record],
    decode: &GenConfig,
) -> Result<AsrEval> {
    let jv = model.vocab;
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, r) in records.iter().filter(|r| r.task == Task::Asr).enumerate() {
        let prompt = eval_prompt(Task::Asr, audio_segment(r, cb)?, &jv, tv)?;
        let out = generate(model, &prompt, &per_sample_seed(decode, i))?;
        let hyp = text_hypothesis(&jv, tv, &out.tokens);
        pairs.push((hyp, r.text.clone().expect("validated text")));
    }
    if pairs.is_empty() {
        return Err(Error::Infeasible("no transcription records to evaluate".into()));
    }
    Ok(AsrEval { wer: corpus_wer(&pairs)?, n: pairs.len() })
}

#[derive(Debug, Clone, Copy)]
pub struct ImgenEval {
    /// Fraction of generations whose image span is exactly one full grid,
    /// properly closed.
    pub well_formed: f64,
    /// Fraction whose decoded image is nearest (by MSE) to the rendering
    /// of the prompt's own (shape, position, size) triple.
    pub triple_match: f64,
    pub n: usize,
}

pub fn eval_imgen(
    model: &MmLlm<f32>,
    tv: &TextVocab,
    vq: &VqModel<f32>,
    records: &[Record],
    decode: &GenConfig,
) -> Result<ImgenEval> {
    let jv = model.vocab;
    let grid = jv.image_grid_len().expect("image-grid vocabulary");
    let renderings: Vec<_> =
        all_shape_triples().iter().map(|&(s, p, z)| render_shape(s, p, z)).collect();
    let mut well_formed = 0usize;
    let mut matched = 0usize;
    let mut n = 0usize;
    for (i, r) in records.iter().filter(|r| r.task == Task::ImageGen).enumerate() {
        let text = r.text.as_deref().expect("validated text");
        let triple = caption_to_triple(text).ok_or_else(|| Error::Record {
            id: r.id.clone(),
            msg: format!("caption {text:?} is outside the shape grammar"),
        })?;
        let want = all_shape_triples().iter().position(|&t| t == triple).expect("triple listed");
        let content = Segment::Text(tv.encode_words(text));
        let prompt = eval_prompt(Task::ImageGen, content, &jv, tv)?;
        let out = generate(model, &prompt, &per_sample_seed(decode, i))?;
        n += 1;

        let ok = out.tokens.len() > grid
            && out.tokens[..grid].iter().all(|&t| {
                (jv.image_base()..jv.image_base() + jv.k_image()).contains(&(t as usize))
            })
            && out.tokens[grid] == jv.img_close();
        if !ok {
            continue;
        }
        well_formed += 1;
        let local: Vec<u32> =
            out.tokens[..grid].iter().map(|&t| t - jv.image_base() as u32).collect();
        let img = vq_detokenize(&vq, &local)?;
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, canon) in renderings.iter().enumerate() {
            if let Ok(d) = img.mse(canon) {
                if d < best.1 {
                    best = (j, d);
                }
            }
        }
        matched += usize::from(best.0 == want);
    }
    if n == 0 {
        return Err(Error::Infeasible("no image-generation records to evaluate".into()));
    }
    Ok(ImgenEval {
        well_formed: well_formed as f64 / n as f64,
        triple_match: matched as f64 / n as f64,
        n,
    })
}

// --- composite runs ---------------------------------------------------------

pub struct PipelineOutcome {
    pub bundle: Bundle,
    pub reports: Vec<EvalReport>,
    pub pretrain: PretrainReport,
}

/// Full pipeline over a mixed train set, evaluated on held-out records.
pub fn run_full_pipeline(
    cfg: &PipelineConfig,
    train: &[Record],
    eval_shapes: &[Record],
    eval_audio: &[Record],
) -> Result<PipelineOutcome> {
    let (base, pretrain) = prepare_base(cfg, train)?;
    let variant =
        specialize(&base.model, &base.text_vocab, base.vq.clone(), base.audio_cb.clone(), cfg, train)?;
    let fp = config_fingerprint(cfg);
    let b = &variant.bundle;
    let cap = eval_caption(&b.model, &b.text_vocab, &b.vq, eval_shapes, &cfg.decode)?;
    let asr = eval_asr(&b.model, &b.text_vocab, &b.audio_cb, eval_audio, &cfg.decode)?;
    let img = eval_imgen(&b.model, &b.text_vocab, &b.vq, eval_shapes, &cfg.decode)?;
    let report = |task: &str, metric: &str, value: f64, n: usize| EvalReport {
        task: task.into(),
        metric: metric.into(),
        value,
        sample_count: n,
        config_fingerprint: fp.clone(),
    };
    let reports = vec![
        report("caption", "exact_match", cap.exact_match, cap.n),
        report("caption", "bleu4", cap.bleu, cap.n),
        report("asr", "wer", asr.wer, asr.n),
        report("imgen", "well_formed_rate", img.well_formed, img.n),
        report("imgen", "triple_match_rate", img.triple_match, img.n),
    ];
    Ok(PipelineOutcome { bundle: variant.bundle, reports, pretrain })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepPoint {
    pub k: usize,
    pub wer: f64,
}

/// Train and evaluate transcription at several audio codebook sizes,
/// reusing one pretrained base.
pub fn run_vocab_sweep(
    cfg: &PipelineConfig,
    base: &Bundle,
    train_audio: &[Record],
    eval_audio: &[Record],
    ks: &[usize],
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut cfg_k = cfg.clone();
        cfg_k.k_audio = k;
        let cb = fit_audio_codebook(train_audio, k, &cfg.kmeans)?;
        let variant =
            specialize(&base.model, &base.text_vocab, base.vq.clone(), cb, &cfg_k, train_audio)?;
        let b = &variant.bundle;
        let asr = eval_asr(&b.model, &b.text_vocab, &b.audio_cb, eval_audio, &cfg.decode)?;
        points.push(SweepPoint { k, wer: asr.wer });
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy)]
pub struct AblationOutcome {
    pub ablation: Ablation,
    pub caption_bleu: f64,
    pub caption_exact: f64,
    /// Present when the evaluation set contains transcription records.
    pub asr_wer: Option<f64>,
}

/// Train all four variants (full recipe plus three knockouts) on identical
/// data and seeds, and score caption quality (plus transcription quality
/// when audio evaluation records are supplied) for each.
pub fn run_ablation_suite(
    cfg: &PipelineConfig,
    base: &Bundle,
    train: &[Record],
    eval_shapes: &[Record],
    eval_audio: &[Record],
) -> Result<Vec<AblationOutcome>> {
    let mut outcomes = Vec::with_capacity(Ablation::ALL.len());
    for ablation in Ablation::ALL {
        let mut cfg_v = cfg.clone();
        cfg_v.ablation = ablation;
        let variant = specialize(
            &base.model,
            &base.text_vocab,
            base.vq.clone(),
            base.audio_cb.clone(),
            &cfg_v,
            train,
        )?;
        let b = &variant.bundle;
        let cap = eval_caption(&b.model, &b.text_vocab, &b.vq, eval_shapes, &cfg.decode)?;
        let asr_wer = if eval_audio.iter().any(|r| r.task == Task::Asr) {
            Some(eval_asr(&b.model, &b.text_vocab, &b.audio_cb, eval_audio, &cfg.decode)?.wer)
        } else {
            None
        };
        outcomes.push(AblationOutcome {
            ablation,
            caption_bleu: cap.bleu,
            caption_exact: cap.exact_match,
            asr_wer,
        });
    }
    Ok(outcomes)
}
