//! Command-line interface: dataset generation, tokenizer fitting, the three
//! training stages, generation, evaluation, and the two experiment suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_bundle, save_audio_codebook, save_bundle, save_vq_model, Bundle};
use crate::datagen::{gen_audio_dataset, gen_shapes_dataset, read_records, write_records, Record};
use crate::error::{Error, Result};
use crate::generate::{detokenize_response, generate, ResponsePart};
use crate::harness::{
    codebook_init, config_fingerprint, eval_asr, eval_caption, eval_imgen, fit_audio_codebook,
    fit_image_tokenizer, fnv1a64, load_pipeline_config, prepare_base, run_ablation_suite,
    run_vocab_sweep, write_reports, Ablation, EvalReport, PipelineConfig,
};
use crate::sampling::GenConfig;
use crate::templates::Task;
use crate::tokenizers::vq::VqConfig;
use crate::training::{stage1_align, stage2_finetune, TrainConfig};
use crate::vocab::Segment;

#[derive(Parser)]
#[command(
    name = "teal",
    version,
    about = "Token-in token-out multimodal language modeling toolkit",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset as JSON lines.
    GenData(GenDataArgs),
    /// Fit a modality tokenizer on a dataset and save it as a checkpoint.
    FitTokenizer(FitTokenizerArgs),
    /// Pretrain the text backbone and bundle it with freshly fit tokenizers.
    PretrainText(PretrainArgs),
    /// Align modality projections on pair records (stage 1).
    Stage1(StageArgs),
    /// Fine-tune modality tables, markers, and bias/norm terms (stage 2).
    Stage2(StageArgs),
    /// Generate continuations for prompt records and write any decoded media.
    Generate(GenerateArgs),
    /// Score a trained model on a dataset and write a report.
    Eval(EvalArgs),
    /// Train and score transcription across several audio vocabulary sizes.
    SweepVocab(SweepArgs),
    /// Train the full recipe and its three knockouts, scoring each.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Shapes,
    Audio,
}

#[derive(Args)]
struct GenDataArgs {
    /// Which generator to run.
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Number of base items (images or utterances); each yields several records.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Audio only: frame noise as a fraction of the minimum symbol separation.
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    /// Audio only: minimum utterance length in symbols.
    #[arg(long, default_value_t = 2)]
    len_min: usize,
    /// Audio only: maximum utterance length in symbols.
    #[arg(long, default_value_t = 5)]
    len_max: usize,
    /// Shapes only: cycle through all grammar triples instead of sampling.
    #[arg(long)]
    stratified: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerModality {
    Audio,
    Image,
}

#[derive(Args)]
struct FitTokenizerArgs {
    #[arg(long, value_enum)]
    modality: TokenizerModality,
    /// Codebook size.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training dataset (JSONL records).
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// Stage-0 training config (flat JSON of training fields); defaults apply
    /// to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pipeline config (JSON) controlling model shape and tokenizer sizes.
    #[arg(long)]
    pipeline_config: Option<PathBuf>,
    /// Training dataset (JSONL records).
    #[arg(long)]
    data: PathBuf,
    /// Bundle checkpoint path to write.
    #[arg(long)]
    model_out: PathBuf,
}

#[derive(Args)]
struct StageArgs {
    /// Stage training config (flat JSON of training fields); defaults apply
    /// to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (JSONL records).
    #[arg(long)]
    data: PathBuf,
    /// Bundle checkpoint to start from.
    #[arg(long)]
    model_in: PathBuf,
    /// Bundle checkpoint path to write.
    #[arg(long)]
    model_out: PathBuf,
    /// Recipe step to knock out.
    #[arg(long, default_value = "none")]
    ablate: String,
}

#[derive(Args)]
struct GenerateArgs {
    /// Bundle checkpoint of a trained model.
    #[arg(long)]
    model: PathBuf,
    /// JSONL of prompt records: each needs its task's prompt-side payload
    /// (caption: image, asr: audio, imgen: text).
    #[arg(long)]
    prompt_file: PathBuf,
    /// Directory for decoded media (images as PGM, audio as JSON frames).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Caption,
    Asr,
    Imgen,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: EvalTask,
    /// Bundle checkpoint of a trained model.
    #[arg(long)]
    model: PathBuf,
    /// Evaluation dataset (JSONL records).
    #[arg(long)]
    data: PathBuf,
    /// Report path (JSONL, one metric row per line).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated audio codebook sizes, ascending.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    /// Pipeline config (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (JSONL records).
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for scoring.
    #[arg(long)]
    eval_data: PathBuf,
    /// Report path (JSONL, one row per vocabulary size).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Pipeline config (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (JSONL records).
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for scoring.
    #[arg(long)]
    eval_data: PathBuf,
    /// Report path (JSONL, one row per variant and metric).
    #[arg(long)]
    report: PathBuf,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::FitTokenizer(a) => fit_tokenizer(a),
        Cmd::PretrainText(a) => pretrain(a),
        Cmd::Stage1(a) => stage(a, StageKind::Align),
        Cmd::Stage2(a) => stage(a, StageKind::Finetune),
        Cmd::Generate(a) => generate_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::SweepVocab(a) => sweep_cmd(a),
        Cmd::Ablate(a) => ablate_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let records = match a.kind {
        DataKind::Shapes => gen_shapes_dataset(a.n, a.seed, a.stratified),
        DataKind::Audio => gen_audio_dataset(a.n, a.seed, a.noise, (a.len_min, a.len_max))?,
    };
    write_records(&a.out, &records)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn fit_tokenizer(a: FitTokenizerArgs) -> Result<()> {
    let records = read_records(&a.input)?;
    match a.modality {
        TokenizerModality::Image => {
            let cfg = VqConfig { k: a.k, seed: a.seed, ..VqConfig::default() };
            let vq = fit_image_tokenizer(&records, &cfg)?;
            save_vq_model(&a.out, &vq)?;
            println!(
                "fit image tokenizer: k={} patch={} -> {}",
                a.k,
                cfg.patch_size,
                a.out.display()
            );
        }
        TokenizerModality::Audio => {
            let mut cfg = crate::tokenizers::kmeans::KmeansConfig::default();
            cfg.seed = a.seed;
            let cb = fit_audio_codebook(&records, a.k, &cfg)?;
            save_audio_codebook(&a.out, &cb)?;
            println!("fit audio codebook: k={} dim={} -> {}", cb.k(), cb.dim(), a.out.display());
        }
    }
    Ok(())
}

/// Load a flat training config, filling omitted fields from the stage's
/// own defaults rather than the generic field defaults.
fn load_stage_config(path: &Option<PathBuf>, default: TrainConfig) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let mut merged = serde_json::to_value(&default)?;
            let overlay: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            let Some(overlay) = overlay.as_object() else {
                return Err(Error::Config(format!(
                    "{}: training config must be a JSON object",
                    p.display()
                )));
            };
            let base = merged.as_object_mut().expect("config serializes to an object");
            for (k, v) in overlay {
                base.insert(k.clone(), v.clone());
            }
            serde_json::from_value(merged)?
        }
        None => default,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = match &a.pipeline_config {
        Some(p) => load_pipeline_config(p)?,
        None => PipelineConfig::default(),
    };
    cfg.stage0 = load_stage_config(&a.config, cfg.stage0)?;
    let records = read_records(&a.data)?;
    let (bundle, report) = prepare_base(&cfg, &records)?;
    save_bundle(&a.model_out, &bundle)?;
    println!(
        "pretrained backbone: held-out perplexity {:.2} -> {:.2}; wrote {}",
        report.heldout_ppl_before,
        report.heldout_ppl_after,
        a.model_out.display()
    );
    Ok(())
}

enum StageKind {
    Align,
    Finetune,
}

fn stage(a: StageArgs, kind: StageKind) -> Result<()> {
    let ablation = Ablation::parse(&a.ablate)?;
    let bundle = load_bundle(&a.model_in)?;
    let records = read_records(&a.data)?;
    let data = crate::harness::tokenize_records(
        &records,
        &bundle.text_vocab,
        &bundle.vq,
        &bundle.audio_cb,
    )?;
    let mut model = bundle.model;
    match kind {
        StageKind::Align => {
            let cfg = load_stage_config(&a.config, TrainConfig::stage1_default())?;
            if ablation != Ablation::NoCodebookInit {
                codebook_init(&mut model, &bundle.vq, &bundle.audio_cb)?;
            }
            if ablation != Ablation::NoStage1 && !data.pairs.is_empty() {
                let report = stage1_align(&model, &bundle.text_vocab, &data.pairs, &cfg)?;
                println!("aligned projections: epoch losses {:?}", report.epoch_loss);
            } else {
                println!("alignment skipped ({} pair records)", data.pairs.len());
            }
        }
        StageKind::Finetune => {
            let cfg = load_stage_config(&a.config, TrainConfig::stage2_default())?;
            if ablation != Ablation::NoBiasNorm {
                model.insert_bias_norm();
            }
            let report = stage2_finetune(&model, &bundle.text_vocab, &data.examples, &cfg)?;
            println!("fine-tuned: epoch losses {:?}", report.epoch_loss);
        }
    }
    let out = Bundle { model, ..bundle };
    save_bundle(&a.model_out, &out)?;
    println!("wrote {}", a.model_out.display());
    Ok(())
}

/// Read prompt records leniently: only the prompt-side payload is required,
/// so response fields may be absent (unlike full dataset records).
fn read_prompt_records(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| {
            Error::Config(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        let ok = match r.task {
            Task::Caption => r.image.is_some(),
            Task::Asr => r.audio.is_some(),
            Task::ImageGen => r.text.is_some(),
            Task::PairImage | Task::PairAudio => {
                return Err(Error::Record {
                    id: r.id.clone(),
                    msg: "pair records are alignment data, not generation prompts".into(),
                })
            }
        };
        if !ok {
            return Err(Error::Record {
                id: r.id.clone(),
                msg: "prompt record is missing its task's prompt-side payload".into(),
            });
        }
        records.push(r);
    }
    Ok(records)
}

/// The unterminated marker-span suffix of a prompt, if any. Prompts for
/// image generation end just after the opening marker, so the continuation
/// alone is not a well-formed token stream; prepending this suffix makes it
/// one.
fn open_span_suffix<'a>(jv: &crate::vocab::JointVocab, prompt: &'a [u32]) -> &'a [u32] {
    let mut start = None;
    for (i, &t) in prompt.iter().enumerate() {
        if t == jv.img_open() || t == jv.aud_open() {
            start = Some(i);
        } else if t == jv.img_close() || t == jv.aud_close() {
            start = None;
        }
    }
    start.map_or(&[], |i| &prompt[i..])
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    let prompts = read_prompt_records(&a.prompt_file)?;
    let mut decode = GenConfig::default();
    if let Some(t) = a.temperature {
        decode.temperature = t;
    }
    if let Some(p) = a.top_p {
        decode.top_p = p;
    }
    if let Some(s) = a.seed {
        decode.seed = s;
    }
    if let Some(m) = a.max_new_tokens {
        decode.max_new_tokens = m;
    }
    decode.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let jv = bundle.model.vocab;
    for (i, r) in prompts.iter().enumerate() {
        let content = match r.task {
            Task::Caption | Task::PairImage => crate::harness::image_segment(r, &bundle.vq)?,
            Task::Asr | Task::PairAudio => crate::harness::audio_segment(r, &bundle.audio_cb)?,
            Task::ImageGen => Segment::Text(
                bundle.text_vocab.encode_words(r.text.as_deref().expect("checked on read")),
            ),
        };
        let prompt = crate::harness::eval_prompt(r.task, content, &jv, &bundle.text_vocab)?;
        let seeded = GenConfig { seed: decode.seed.wrapping_add(i as u64), ..decode };
        let out = generate(&bundle.model, &prompt, &seeded)?;
        let mut full = open_span_suffix(&jv, &prompt).to_vec();
        full.extend_from_slice(&out.tokens);
        let parts =
            detokenize_response(&full, &jv, &bundle.text_vocab, &bundle.vq, &bundle.audio_cb);
        match parts {
            Ok(parts) => {
                let mut texts = Vec::new();
                let mut media = 0usize;
                for part in &parts {
                    match part {
                        ResponsePart::Text(t) => texts.push(t.clone()),
                        ResponsePart::Image(img) => {
                            let path = a.out.join(format!("{}-{media}.pgm", r.id));
                            img.write_pgm(&path)?;
                            media += 1;
                        }
                        ResponsePart::Audio(frames) => {
                            let path = a.out.join(format!("{}-{media}.json", r.id));
                            std::fs::write(&path, serde_json::to_string(frames)?)?;
                            media += 1;
                        }
                    }
                }
                println!("{}\t{}", r.id, texts.join(" "));
            }
            Err(e) => eprintln!("{}: skipped malformed continuation: {e}", r.id),
        }
    }
    Ok(())
}

fn decode_fingerprint(decode: &GenConfig) -> Result<String> {
    Ok(format!("{:016x}", fnv1a64(serde_json::to_string(decode)?.as_bytes())))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    let records = read_records(&a.data)?;
    let decode = GenConfig::default();
    let fp = decode_fingerprint(&decode)?;
    let row = |task: &str, metric: &str, value: f64, n: usize| EvalReport {
        task: task.into(),
        metric: metric.into(),
        value,
        sample_count: n,
        config_fingerprint: fp.clone(),
    };
    let rows = match a.task {
        EvalTask::Caption => {
            let c = eval_caption(&bundle.model, &bundle.text_vocab, &bundle.vq, &records, &decode)?;
            vec![
                row("caption", "exact_match", c.exact_match, c.n),
                row("caption", "bleu4", c.bleu, c.n),
            ]
        }
        EvalTask::Asr => {
            let r = eval_asr(&bundle.model, &bundle.text_vocab, &bundle.audio_cb, &records, &decode)?;
            vec![row("asr", "wer", r.wer, r.n)]
        }
        EvalTask::Imgen => {
            let g = eval_imgen(&bundle.model, &bundle.text_vocab, &bundle.vq, &records, &decode)?;
            vec![
                row("imgen", "well_formed_rate", g.well_formed, g.n),
                row("imgen", "triple_match_rate", g.triple_match, g.n),
            ]
        }
    };
    write_reports(&a.report, &rows)?;
    for r in &rows {
        println!("{} {} = {:.4} (n={})", r.task, r.metric, r.value, r.sample_count);
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    if a.ks.is_empty() {
        return Err(Error::Config("at least one vocabulary size is required".into()));
    }
    if a.ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("vocabulary sizes must be strictly ascending".into()));
    }
    let cfg = match &a.config {
        Some(p) => load_pipeline_config(p)?,
        None => PipelineConfig::default(),
    };
    let train = read_records(&a.data)?;
    let eval = read_records(&a.eval_data)?;
    let audio_train: Vec<Record> = train
        .iter()
        .filter(|r| matches!(r.task, Task::Asr | Task::PairAudio))
        .cloned()
        .collect();
    let (base, _) = prepare_base(&cfg, &train)?;
    let points = run_vocab_sweep(&cfg, &base, &audio_train, &eval, &a.ks)?;
    let n = eval.iter().filter(|r| r.task == Task::Asr).count();
    let rows: Vec<EvalReport> = points
        .iter()
        .map(|p| {
            let mut cfg_k = cfg.clone();
            cfg_k.k_audio = p.k;
            EvalReport {
                task: "asr".into(),
                metric: format!("wer_k{}", p.k),
                value: p.wer,
                sample_count: n,
                config_fingerprint: config_fingerprint(&cfg_k),
            }
        })
        .collect();
    write_reports(&a.report, &rows)?;
    for p in &points {
        println!("k={} wer={:.4}", p.k, p.wer);
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_pipeline_config(p)?,
        None => PipelineConfig::default(),
    };
    let train = read_records(&a.data)?;
    let eval = read_records(&a.eval_data)?;
    let (base, _) = prepare_base(&cfg, &train)?;
    let outcomes = run_ablation_suite(&cfg, &base, &train, &eval, &eval)?;
    let caption_n = eval.iter().filter(|r| r.task == Task::Caption).count();
    let asr_n = eval.iter().filter(|r| r.task == Task::Asr).count();
    let mut rows = Vec::new();
    for o in &outcomes {
        let mut cfg_v = cfg.clone();
        cfg_v.ablation = o.ablation;
        let fp = config_fingerprint(&cfg_v);
        let row = |metric: &str, value: f64, n: usize| EvalReport {
            task: o.ablation.slug().into(),
            metric: metric.into(),
            value,
            sample_count: n,
            config_fingerprint: fp.clone(),
        };
        rows.push(row("caption_bleu4", o.caption_bleu, caption_n));
        rows.push(row("caption_exact_match", o.caption_exact, caption_n));
        if let Some(w) = o.asr_wer {
            rows.push(row("asr_wer", w, asr_n));
        }
    }
    write_reports(&a.report, &rows)?;
    for o in &outcomes {
        println!(
            "{}: bleu4={:.2} exact={:.3} wer={}",
            o.ablation.slug(),
            o.caption_bleu,
            o.caption_exact,
            o.asr_wer.map_or("n/a".into(), |w| format!("{w:.4}")),
        );
    }
    Ok(())
}
