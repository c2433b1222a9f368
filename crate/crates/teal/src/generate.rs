//! Constrained autoregressive generation and response routing.
//!
//! Decoding walks the same span grammar the vocabulary enforces: outside a
//! span only textual ids (words, end-of-sequence, open markers) may be
//! sampled; after an image-open marker exactly one grid of image ids is
//! produced and the close marker is forced; audio spans sample audio ids
//! until the model closes them or the span cap forces it. Finished
//! responses are split into segments and routed to the matching
//! de-tokenizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::ImageGrid;
use crate::model::MmLlm;
use crate::num::Scalar;
use crate::sampling::{top_p_sample, GenConfig};
use crate::tokenizers::kmeans::{audio_detokenize, Codebook};
use crate::tokenizers::text::{TextVocab, BOS, EOS, PAD};
use crate::tokenizers::vq::{vq_detokenize, VqModel};
use crate::vocab::{JointVocab, Segment};

/// The part of a rendered sequence the model must be given as input: all
/// tokens strictly before the first loss-target position.
pub fn prompt_prefix<'a>(tokens: &'a [u32], mask: &[bool]) -> &'a [u32] {
    let end = mask.iter().position(|&m| m).unwrap_or(tokens.len());
    &tokens[..end]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SpanState {
    Outside,
    InImage(usize),
    InAudio(usize),
}

/// Scan tokens (which may legally end mid-span, e.g. a prompt ending with
/// an image-open marker) and return the open-span state at the end.
fn span_state(joint: &JointVocab, tokens: &[u32]) -> Result<SpanState> {
    let mut state = SpanState::Outside;
    for (pos, &t) in tokens.iter().enumerate() {
        let bad = |msg: &str| Err(Error::Parse { pos, msg: msg.into() });
        state = match state {
            SpanState::Outside => {
                if t == joint.img_open() {
                    SpanState::InImage(0)
                } else if t == joint.aud_open() {
                    SpanState::InAudio(0)
                } else if t == joint.img_close() || t == joint.aud_close() {
                    return bad("close marker without an open span");
                } else if (t as usize) < joint.text_size() {
                    state
                } else {
                    return bad("non-text token outside any span");
                }
            }
            SpanState::InImage(n) => {
                if t == joint.img_close() {
                    SpanState::Outside
                } else if (t as usize) >= joint.image_base()
                    && (t as usize) < joint.image_base() + joint.k_image()
                {
                    SpanState::InImage(n + 1)
                } else {
                    return bad("non-image token inside an image span");
                }
            }
            SpanState::InAudio(n) => {
                if t == joint.aud_close() {
                    SpanState::Outside
                } else if (t as usize) >= joint.audio_base()
                    && (t as usize) < joint.audio_base() + joint.k_audio()
                {
                    SpanState::InAudio(n + 1)
                } else {
                    return bad("non-audio token inside an audio span");
                }
            }
        };
    }
    Ok(state)
}

/// What one generation step produced.
#[derive(Debug, Clone)]
pub struct GenOutput {
    /// Generated joint ids, excluding the prompt and any end-of-sequence.
    pub tokens: Vec<u32>,
    /// True when the model emitted end-of-sequence before any budget ran out.
    pub stopped_by_eos: bool,
}

/// Sample a continuation of `prompt` (joint ids, starting with the
/// sequence-start marker). Each step re-runs the full prefix and samples
/// from the ids the span grammar allows at that point.
pub fn generate<S: Scalar>(
    model: &MmLlm<S>,
    prompt: &[u32],
    cfg: &GenConfig,
) -> Result<GenOutput> {
    cfg.validate()?;
    if prompt.is_empty() || prompt[0] != BOS {
        return Err(Error::Batch("prompt must start with the sequence-start marker".into()));
    }
    let joint = model.vocab;
    let mut state = span_state(&joint, &prompt[1..])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq: Vec<u32> = prompt.to_vec();
    let mut out = GenOutput { tokens: Vec::new(), stopped_by_eos: false };

    let image_span_len = joint.image_grid_len();
    while out.tokens.len() < cfg.max_new_tokens && seq.len() < model.cfg.backbone.max_seq {
        // Which ids are legal here? A single-candidate list is a forced move.
        let allowed: Vec<usize> = match state {
            SpanState::Outside => {
                let mut ids: Vec<usize> =
                    (0..joint.text_size()).filter(|&t| t != PAD as usize && t != BOS as usize).collect();
                ids.push(joint.img_open() as usize);
                ids.push(joint.aud_open() as usize);
                ids
            }
            SpanState::InImage(n) => {
                let full = image_span_len.map_or(false, |g| n >= g);
                if full {
                    vec![joint.img_close() as usize]
                } else {
                    (joint.image_base()..joint.image_base() + joint.k_image()).collect()
                }
            }
            SpanState::InAudio(n) => {
                if n >= cfg.max_span {
                    vec![joint.aud_close() as usize]
                } else {
                    let mut ids: Vec<usize> =
                        (joint.audio_base()..joint.audio_base() + joint.k_audio()).collect();
                    if n > 0 {
                        ids.push(joint.aud_close() as usize);
                    }
                    ids
                }
            }
        };

        let next = if allowed.len() == 1 {
            allowed[0] as u32
        } else {
            let mut g = Graph::inference();
            let logits = model.forward(&mut g, &seq)?;
            let all = logits.to_vec();
            let row = &all[(seq.len() - 1) * joint.total()..seq.len() * joint.total()];
            let subset: Vec<S> = allowed.iter().map(|&i| row[i]).collect();
            let pick = top_p_sample(&subset, cfg.temperature, cfg.top_p, &mut rng)?;
            allowed[pick] as u32
        };

        if next == EOS {
            out.stopped_by_eos = true;
            break;
        }
        state = match (state, next) {
            (SpanState::Outside, t) if t == joint.img_open() => SpanState::InImage(0),
            (SpanState::Outside, t) if t == joint.aud_open() => SpanState::InAudio(0),
            (SpanState::InImage(_), t) if t == joint.img_close() => SpanState::Outside,
            (SpanState::InAudio(_), t) if t == joint.aud_close() => SpanState::Outside,
            (SpanState::InImage(n), _) => SpanState::InImage(n + 1),
            (SpanState::InAudio(n), _) => SpanState::InAudio(n + 1),
            (s, _) => s,
        };
        seq.push(next);
        out.tokens.push(next);
    }
    Ok(out)
}

/// One routed piece of a generated response.
#[derive(Debug, Clone)]
pub enum ResponsePart {
    Text(String),
    Image(ImageGrid),
    Audio(Vec<Vec<f32>>),
}

/// Split generated ids into spans and route each through its
/// de-tokenizer. Fails if the ids do not form a well-formed sequence body
/// (for example a span left open by an exhausted token budget).
pub fn detokenize_response<S: Scalar>(
    generated: &[u32],
    joint: &JointVocab,
    text: &TextVocab,
    vq: &VqModel<S>,
    audio_cb: &Codebook<S>,
) -> Result<Vec<ResponsePart>> {
    let mut wrapped = Vec::with_capacity(generated.len() + 2);
    wrapped.push(BOS);
    wrapped.extend_from_slice(generated);
    wrapped.push(EOS);
    let segments = joint.split_segments(&wrapped)?;
    segments
        .into_iter()
        .map(|seg| match seg {
            Segment::Text(ids) => Ok(ResponsePart::Text(text.decode(&ids)?)),
            Segment::Image(ids) => Ok(ResponsePart::Image(vq_detokenize(vq, &ids)?)),
            Segment::Audio(ids) => {
                let frames = audio_detokenize(audio_cb, &ids)?;
                Ok(ResponsePart::Audio(
                    frames.iter().map(|f| f.iter().map(|v| v.as_f32()).collect()).collect(),
                ))
            }
        })
        .collect()
}
