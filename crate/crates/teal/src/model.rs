//! The multimodal language model: a small decoder-only transformer backbone
//! with textual embedding/head, per-modality codebook embeddings and output
//! matrices, and the projection layers that bridge codebook space and the
//! backbone's hidden space.
//!
//! Input path per position: a text id looks up the textual embedding; a
//! marker id looks up the marker embedding; a non-text id looks up its
//! modality's codebook-space embedding and passes through that modality's
//! input projection into the hidden space. Output path: the final hidden
//! state is scored by the textual head, the marker head, and — per
//! non-text modality — projected back to codebook space and scored against
//! that modality's output matrix. Logit columns line up exactly with the
//! joint id layout, so one softmax covers every modality.
//!
//! Training stages toggle `requires_grad` per parameter set; the optimizer
//! only ever sees trainable tensors, so frozen parameters keep their exact
//! bytes. Bias-norm tuning inserts zero-initialized biases on every
//! backbone linear map and unfreezes the normalization gains — an exact
//! identity at insertion time.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::num::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{JointVocab, N_MARKERS};

pub const NORM_EPS: f64 = 1e-6;
const NEG_INF: f64 = -1e30;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rope_base: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { layers: 4, d_model: 128, heads: 4, d_ff: 512, max_seq: 256, rope_base: 10000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionKind {
    #[serde(rename = "affine")]
    Affine,
    #[serde(rename = "mlp")]
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d_code_image: usize,
    pub d_code_audio: usize,
    pub projection: ProjectionKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            d_code_image: 16,
            d_code_audio: 8,
            projection: ProjectionKind::Affine,
            seed: 0,
        }
    }
}

/// `y = x·w (+ bias)`. The bias slot exists only after bias-norm insertion.
pub struct Linear<S: Scalar = f32> {
    pub w: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    fn new(w: Tensor<S>) -> Self {
        Linear { w, bias: None }
    }

    fn apply(&self, g: &mut Graph<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = g.matmul(x, &self.w)?;
        match &self.bias {
            Some(b) => g.add_bias(&y, b),
            None => Ok(y),
        }
    }
}

/// Codebook-space to hidden-space bridge (or back). The affine form is the
/// default; a two-layer gated variant exists as a configuration switch.
pub enum Projection<S: Scalar = f32> {
    Affine { w: Tensor<S>, b: Tensor<S> },
    Mlp { w1: Tensor<S>, b1: Tensor<S>, w2: Tensor<S>, b2: Tensor<S> },
}

impl<S: Scalar> Projection<S> {
    fn init(kind: ProjectionKind, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            ProjectionKind::Affine => {
                // Near identity: the projection starts as the best-aligned
                // linear map there is, and training only refines it.
                let noise = Tensor::<S>::randn(&[din, dout], INIT_STD, rng);
                {
                    let mut d = noise.data_mut();
                    for i in 0..din.min(dout) {
                        d[i * dout + i] += S::one();
                    }
                }
                Projection::Affine { w: noise, b: Tensor::zeros(&[dout]) }
            }
            ProjectionKind::Mlp => {
                let hidden = din.max(dout);
                Projection::Mlp {
                    w1: Tensor::randn(&[din, hidden], INIT_STD, rng),
                    b1: Tensor::zeros(&[hidden]),
                    w2: Tensor::randn(&[hidden, dout], INIT_STD, rng),
                    b2: Tensor::zeros(&[dout]),
                }
            }
        }
    }

    fn apply(&self, g: &mut Graph<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Projection::Affine { w, b } => {
                let y = g.matmul(x, w)?;
                g.add_bias(&y, b)
            }
            Projection::Mlp { w1, b1, w2, b2 } => {
                let h = g.matmul(x, w1)?;
                let h = g.add_bias(&h, b1)?;
                let h = g.silu(&h)?;
                let y = g.matmul(&h, w2)?;
                g.add_bias(&y, b2)
            }
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            Projection::Affine { w, b } => vec![("w", w), ("b", b)],
            Projection::Mlp { w1, b1, w2, b2 } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
        }
    }
}

pub struct TransformerLayer<S: Scalar = f32> {
    pub attn_norm: Tensor<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ffn_norm: Tensor<S>,
    pub w_gate: Linear<S>,
    pub w_up: Linear<S>,
    pub w_down: Linear<S>,
}

impl<S: Scalar> TransformerLayer<S> {
    fn linears(&self) -> [(&'static str, &Linear<S>); 7] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

/// One non-text modality's parameter set: codebook-space embedding rows,
/// output score matrix, and the two projections.
pub struct ModalityParams<S: Scalar = f32> {
    pub embed: Tensor<S>,      // [K × d_code]
    pub out: Tensor<S>,        // [d_code × K]
    pub embed_proj: Projection<S>, // d_code → d_model
    pub out_proj: Projection<S>,   // d_model → d_code
}

impl<S: Scalar> ModalityParams<S> {
    fn init(k: usize, d_code: usize, d_model: usize, kind: ProjectionKind, rng: &mut ChaCha8Rng) -> Self {
        ModalityParams {
            embed: Tensor::randn(&[k, d_code], INIT_STD, rng),
            out: Tensor::randn(&[d_code, k], INIT_STD, rng),
            embed_proj: Projection::init(kind, d_code, d_model, rng),
            out_proj: Projection::init(kind, d_model, d_code, rng),
        }
    }
}

/// Parameter-set selector for the training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    /// Backbone plus textual embedding/head: the pretraining that creates
    /// the frozen textual model.
    Stage0,
    /// Alignment: only the per-modality input/output projections.
    Stage1,
    /// Task tuning: projections, non-text embed/out, markers, and — when
    /// inserted — biases and norm gains.
    Stage2,
    All,
    NoneFrozen,
}

pub struct MmLlm<S: Scalar = f32> {
    pub cfg: ModelConfig,
    pub vocab: JointVocab,
    pub word_embed: Tensor<S>,   // [text_size × d_model]
    pub word_head: Tensor<S>,    // [d_model × text_size]
    pub marker_embed: Tensor<S>, // [4 × d_model]
    pub marker_head: Tensor<S>,  // [d_model × 4]
    pub layers: Vec<TransformerLayer<S>>,
    pub final_norm: Tensor<S>,
    pub image: ModalityParams<S>,
    pub audio: ModalityParams<S>,
    bias_norm_inserted: bool,
}

pub fn init_model<S: Scalar>(cfg: &ModelConfig, vocab: &JointVocab) -> Result<MmLlm<S>> {
    let b = &cfg.backbone;
    if b.d_model == 0 || b.heads == 0 || b.d_model % b.heads != 0 {
        return Err(Error::Config(format!(
            "d_model {} must be a positive multiple of heads {}",
            b.d_model, b.heads
        )));
    }
    if (b.d_model / b.heads) % 2 != 0 {
        return Err(Error::Config(format!(
            "head dimension {} must be even for rotary encoding",
            b.d_model / b.heads
        )));
    }
    if cfg.d_code_image == 0 || cfg.d_code_audio == 0 || b.layers == 0 || b.d_ff == 0 || b.max_seq == 0 {
        return Err(Error::Config("all model dimensions must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = b.d_model;
    let w = vocab.text_size();

    let word_embed = Tensor::randn(&[w, d], INIT_STD, &mut rng);
    let word_head = Tensor::randn(&[d, w], INIT_STD, &mut rng);
    let marker_embed = Tensor::randn(&[N_MARKERS, d], INIT_STD, &mut rng);
    let marker_head = Tensor::randn(&[d, N_MARKERS], INIT_STD, &mut rng);

    let mut layers = Vec::with_capacity(b.layers);
    for _ in 0..b.layers {
        layers.push(TransformerLayer {
            attn_norm: Tensor::full(&[d], S::one()),
            wq: Linear::new(Tensor::randn(&[d, d], INIT_STD, &mut rng)),
            wk: Linear::new(Tensor::randn(&[d, d], INIT_STD, &mut rng)),
            wv: Linear::new(Tensor::randn(&[d, d], INIT_STD, &mut rng)),
            wo: Linear::new(Tensor::randn(&[d, d], INIT_STD, &mut rng)),
            ffn_norm: Tensor::full(&[d], S::one()),
            w_gate: Linear::new(Tensor::randn(&[d, b.d_ff], INIT_STD, &mut rng)),
            w_up: Linear::new(Tensor::randn(&[d, b.d_ff], INIT_STD, &mut rng)),
            w_down: Linear::new(Tensor::randn(&[b.d_ff, d], INIT_STD, &mut rng)),
        });
    }

    let image = ModalityParams::init(vocab.k_image(), cfg.d_code_image, d, cfg.projection, &mut rng);
    let audio = ModalityParams::init(vocab.k_audio(), cfg.d_code_audio, d, cfg.projection, &mut rng);

    Ok(MmLlm {
        cfg: *cfg,
        vocab: *vocab,
        word_embed,
        word_head,
        marker_embed,
        marker_head,
        layers,
        final_norm: Tensor::full(&[d], S::one()),
        image,
        audio,
        bias_norm_inserted: false,
    })
}

impl<S: Scalar> MmLlm<S> {
    /// Copy the codebook into the modality's embedding rows and output
    /// columns, bit-exactly.
    pub fn init_nontextual_from_codebook(
        &mut self,
        modality: crate::vocab::Modality,
        cb: &crate::tokenizers::kmeans::Codebook<S>,
    ) -> Result<()> {
        use crate::vocab::Modality;
        let (params, k, dc) = match modality {
            Modality::Image => (&self.image, self.vocab.k_image(), self.cfg.d_code_image),
            Modality::Audio => (&self.audio, self.vocab.k_audio(), self.cfg.d_code_audio),
            Modality::Text => {
                return Err(Error::Config("text embeddings are not codebook-initialized".into()))
            }
        };
        if cb.k() != k || cb.dim() != dc {
            return Err(Error::Dim {
                op: "init_nontextual_from_codebook",
                msg: format!("codebook {}x{}, modality expects {}x{}", cb.k(), cb.dim(), k, dc),
            });
        }
        params.embed.copy_from(cb.flat())?;
        {
            // out is [d_code × K]: column j := centroid j.
            let mut o = params.out.data_mut();
            for j in 0..k {
                let c = &cb.flat()[j * dc..(j + 1) * dc];
                for i in 0..dc {
                    o[i * k + j] = c[i];
                }
            }
        }
        Ok(())
    }

    /// Add zero biases to every backbone linear map. A no-op if already
    /// inserted; forward output is unchanged until the biases train away
    /// from zero.
    pub fn insert_bias_norm(&mut self) {
        if self.bias_norm_inserted {
            return;
        }
        for layer in &self.layers {
            for (_, lin) in layer.linears() {
                debug_assert!(lin.bias.is_none());
            }
        }
        for layer in &mut self.layers {
            let d = self.cfg.backbone.d_model;
            let ff = self.cfg.backbone.d_ff;
            layer.wq.bias = Some(Tensor::zeros(&[d]));
            layer.wk.bias = Some(Tensor::zeros(&[d]));
            layer.wv.bias = Some(Tensor::zeros(&[d]));
            layer.wo.bias = Some(Tensor::zeros(&[d]));
            layer.w_gate.bias = Some(Tensor::zeros(&[ff]));
            layer.w_up.bias = Some(Tensor::zeros(&[ff]));
            layer.w_down.bias = Some(Tensor::zeros(&[d]));
        }
        self.bias_norm_inserted = true;
    }

    pub fn bias_norm_inserted(&self) -> bool {
        self.bias_norm_inserted
    }

    /// Every parameter with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out: Vec<(String, Tensor<S>)> = vec![
            ("word_embed".into(), self.word_embed.clone()),
            ("word_head".into(), self.word_head.clone()),
            ("marker_embed".into(), self.marker_embed.clone()),
            ("marker_head".into(), self.marker_head.clone()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer.{i}.attn_norm"), layer.attn_norm.clone()));
            out.push((format!("layer.{i}.ffn_norm"), layer.ffn_norm.clone()));
            for (name, lin) in layer.linears() {
                out.push((format!("layer.{i}.{name}.w"), lin.w.clone()));
                if let Some(b) = &lin.bias {
                    out.push((format!("layer.{i}.{name}.b"), b.clone()));
                }
            }
        }
        out.push(("final_norm".into(), self.final_norm.clone()));
        for (prefix, m) in [("image", &self.image), ("audio", &self.audio)] {
            out.push((format!("{prefix}.embed"), m.embed.clone()));
            out.push((format!("{prefix}.out"), m.out.clone()));
            for (suffix, t) in m.embed_proj.tensors() {
                out.push((format!("{prefix}.embed_proj.{suffix}"), t.clone()));
            }
            for (suffix, t) in m.out_proj.tensors() {
                out.push((format!("{prefix}.out_proj.{suffix}"), t.clone()));
            }
        }
        out
    }

    /// Set `requires_grad` across all parameters for a training stage.
    pub fn set_trainable(&self, stage: TrainStage) {
        for (_, t) in self.named_params() {
            t.set_requires_grad(false);
            t.zero_grad();
        }
        let on = |ts: &[&Tensor<S>]| {
            for t in ts {
                t.set_requires_grad(true);
            }
        };
        match stage {
            TrainStage::NoneFrozen => {}
            TrainStage::All => {
                for (_, t) in self.named_params() {
                    t.set_requires_grad(true);
                }
            }
            TrainStage::Stage0 => {
                on(&[&self.word_embed, &self.word_head, &self.final_norm]);
                for layer in &self.layers {
                    on(&[&layer.attn_norm, &layer.ffn_norm]);
                    for (_, lin) in layer.linears() {
                        on(&[&lin.w]);
                        if let Some(b) = &lin.bias {
                            on(&[b]);
                        }
                    }
                }
            }
            TrainStage::Stage1 => {
                for m in [&self.image, &self.audio] {
                    for (_, t) in m.embed_proj.tensors() {
                        on(&[t]);
                    }
                    for (_, t) in m.out_proj.tensors() {
                        on(&[t]);
                    }
                }
            }
            TrainStage::Stage2 => {
                on(&[&self.marker_embed, &self.marker_head]);
                for m in [&self.image, &self.audio] {
                    on(&[&m.embed, &m.out]);
                    for (_, t) in m.embed_proj.tensors() {
                        on(&[t]);
                    }
                    for (_, t) in m.out_proj.tensors() {
                        on(&[t]);
                    }
                }
                if self.bias_norm_inserted {
                    on(&[&self.final_norm]);
                    for layer in &self.layers {
                        on(&[&layer.attn_norm, &layer.ffn_norm]);
                        for (_, lin) in layer.linears() {
                            if let Some(b) = &lin.bias {
                                on(&[b]);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn trainable_params(&self) -> Vec<Tensor<S>> {
        self.named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t)
            .collect()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Full forward pass: joint token ids in, `[T × joint_total]` logits out.
    pub fn forward(&self, g: &mut Graph<S>, tokens: &[u32]) -> Result<Tensor<S>> {
        let t_len = tokens.len();
        let b = &self.cfg.backbone;
        if t_len == 0 {
            return Err(Error::Dim { op: "forward", msg: "empty token sequence".into() });
        }
        if t_len > b.max_seq {
            return Err(Error::Dim {
                op: "forward",
                msg: format!("sequence of {} exceeds max_seq {}", t_len, b.max_seq),
            });
        }

        // Partition positions by embedding source, preserving position order
        // inside each bucket.
        let w = self.vocab.text_size();
        let (mut word_pos, mut word_ids) = (Vec::new(), Vec::new());
        let (mut marker_pos, mut marker_ids) = (Vec::new(), Vec::new());
        let (mut img_pos, mut img_ids) = (Vec::new(), Vec::new());
        let (mut aud_pos, mut aud_ids) = (Vec::new(), Vec::new());
        for (pos, &tok) in tokens.iter().enumerate() {
            let i = tok as usize;
            if i < w {
                word_pos.push(pos);
                word_ids.push(i);
            } else if i < self.vocab.textual_total() {
                marker_pos.push(pos);
                marker_ids.push(i - w);
            } else if i < self.vocab.audio_base() {
                img_pos.push(pos);
                img_ids.push(i - self.vocab.image_base());
            } else if i < self.vocab.total() {
                aud_pos.push(pos);
                aud_ids.push(i - self.vocab.audio_base());
            } else {
                return Err(Error::IdRange {
                    what: "joint token",
                    id: i,
                    lo: 0,
                    hi: self.vocab.total(),
                });
            }
        }

        let mut parts: Vec<(Tensor<S>, Vec<usize>)> = Vec::new();
        if !word_pos.is_empty() {
            parts.push((g.gather_rows(&self.word_embed, &word_ids)?, word_pos));
        }
        if !marker_pos.is_empty() {
            parts.push((g.gather_rows(&self.marker_embed, &marker_ids)?, marker_pos));
        }
        if !img_pos.is_empty() {
            let e = g.gather_rows(&self.image.embed, &img_ids)?;
            parts.push((self.image.embed_proj.apply(g, &e)?, img_pos));
        }
        if !aud_pos.is_empty() {
            let e = g.gather_rows(&self.audio.embed, &aud_ids)?;
            parts.push((self.audio.embed_proj.apply(g, &e)?, aud_pos));
        }
        let mut x = g.assemble_rows(&parts, t_len)?;

        // Causal additive mask, shared across heads.
        let mask = causal_mask::<S>(t_len);
        let heads = b.heads;
        let dh = b.d_model / heads;
        let scale = S::of_f64(1.0 / (dh as f64).sqrt());
        let eps = S::of_f64(NORM_EPS);

        for layer in &self.layers {
            let h = g.rmsnorm(&x, &layer.attn_norm, eps)?;
            let q = layer.wq.apply(g, &h)?;
            let k = layer.wk.apply(g, &h)?;
            let v = layer.wv.apply(g, &h)?;

            let mut head_outs = Vec::with_capacity(heads);
            for hi in 0..heads {
                let (lo, hi_col) = (hi * dh, (hi + 1) * dh);
                let qh = g.slice_cols(&q, lo, hi_col)?;
                let qh = g.rope(&qh, b.rope_base, 0)?;
                let kh = g.slice_cols(&k, lo, hi_col)?;
                let kh = g.rope(&kh, b.rope_base, 0)?;
                let vh = g.slice_cols(&v, lo, hi_col)?;

                let kt = g.transpose(&kh)?;
                let scores = g.matmul(&qh, &kt)?;
                let scores = g.scale(&scores, scale)?;
                let scores = g.add(&scores, &mask)?;
                let probs = g.softmax(&scores, 1)?;
                head_outs.push(g.matmul(&probs, &vh)?);
            }
            let concat = g.concat_cols(&head_outs)?;
            let attn = layer.wo.apply(g, &concat)?;
            x = g.add(&x, &attn)?;

            let h2 = g.rmsnorm(&x, &layer.ffn_norm, eps)?;
            let gate_lin = layer.w_gate.apply(g, &h2)?;
            let gate = g.silu(&gate_lin)?;
            let up = layer.w_up.apply(g, &h2)?;
            let gated = g.mul(&gate, &up)?;
            let ffn = layer.w_down.apply(g, &gated)?;
            x = g.add(&x, &ffn)?;
        }

        let h = g.rmsnorm(&x, &self.final_norm, eps)?;

        let text_logits = g.matmul(&h, &self.word_head)?;
        let marker_logits = g.matmul(&h, &self.marker_head)?;
        let img_code = self.image.out_proj.apply(g, &h)?;
        let img_logits = g.matmul(&img_code, &self.image.out)?;
        let aud_code = self.audio.out_proj.apply(g, &h)?;
        let aud_logits = g.matmul(&aud_code, &self.audio.out)?;
        g.concat_cols(&[text_logits, marker_logits, img_logits, aud_logits])
    }

    /// A new model sharing this one's backbone and textual parameters
    /// (deep-copied) but with freshly initialized modality parameters for a
    /// possibly different vocabulary layout. Both vocabularies must agree
    /// on the textual block.
    pub fn clone_with_new_modalities(
        &self,
        vocab: &JointVocab,
        d_code_image: usize,
        d_code_audio: usize,
        seed: u64,
    ) -> Result<MmLlm<S>> {
        if vocab.text_size() != self.vocab.text_size() {
            return Err(Error::Config(format!(
                "textual block mismatch: {} vs {}",
                vocab.text_size(),
                self.vocab.text_size()
            )));
        }
        let cfg = ModelConfig {
            d_code_image,
            d_code_audio,
            seed,
            ..self.cfg
        };
        let mut fresh = init_model::<S>(&cfg, vocab)?;
        fresh.word_embed = self.word_embed.deep_clone();
        fresh.word_head = self.word_head.deep_clone();
        fresh.marker_embed = self.marker_embed.deep_clone();
        fresh.marker_head = self.marker_head.deep_clone();
        fresh.final_norm = self.final_norm.deep_clone();
        for (dst, src) in fresh.layers.iter_mut().zip(&self.layers) {
            dst.attn_norm = src.attn_norm.deep_clone();
            dst.ffn_norm = src.ffn_norm.deep_clone();
            let pairs = [
                (&mut dst.wq, &src.wq),
                (&mut dst.wk, &src.wk),
                (&mut dst.wv, &src.wv),
                (&mut dst.wo, &src.wo),
                (&mut dst.w_gate, &src.w_gate),
                (&mut dst.w_up, &src.w_up),
                (&mut dst.w_down, &src.w_down),
            ];
            for (d, s) in pairs {
                d.w = s.w.deep_clone();
                d.bias = s.bias.as_ref().map(|b| b.deep_clone());
            }
        }
        fresh.bias_norm_inserted = self.bias_norm_inserted;
        Ok(fresh)
    }

    /// Rebuild a model from named tensors (checkpoint load). Every expected
    /// name must be present with the right shape; extras are an error.
    pub fn from_named(
        cfg: &ModelConfig,
        vocab: &JointVocab,
        mut tensors: HashMap<String, Tensor<S>>,
    ) -> Result<MmLlm<S>> {
        let has_bias = tensors.contains_key("layer.0.wq.b");
        let mut model = init_model::<S>(cfg, vocab)?;
        if has_bias {
            model.insert_bias_norm();
        }
        for (name, slot) in model.named_params() {
            let Some(t) = tensors.remove(&name) else {
                return Err(Error::Config(format!("checkpoint is missing tensor {name}")));
            };
            if t.shape() != slot.shape() {
                return Err(Error::Dim {
                    op: "from_named",
                    msg: format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            slot.copy_from(&t.to_vec())?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("checkpoint has unexpected tensor {extra}")));
        }
        model.set_trainable(TrainStage::NoneFrozen);
        Ok(model)
    }
}

fn causal_mask<S: Scalar>(t: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); t * t];
    let neg = S::of_f64(NEG_INF);
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = neg;
        }
    }
    Tensor::from_data(&[t, t], data).expect("sized by construction")
}
