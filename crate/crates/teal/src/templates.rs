//! Prompt templates and their rendering into masked token sequences.
//!
//! A template is a line of literal text with `{img}`, `{aud}`, `{text}`,
//! and `{response}` slots. Rendering fills each slot with a segment and
//! produces the joint-id sequence plus a parallel loss mask that marks
//! which positions contribute to training loss:
//!
//! * `ResponseOnly` — true exactly on the `{response}` slot's tokens plus
//!   the sequence end token. Used for task fine-tuning.
//! * `PairBody` — true on every token from the first slot onward. Used for
//!   the alignment stage, whose templates render a caption pair in both
//!   orders and treat the whole body as the target.
//!
//! In both modes the opening marker of a non-text span is never a loss
//! target (at generation time it is part of the forced prompt), while the
//! closing marker is (the model must learn to terminate the span).

use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tokenizers::text::{TextVocab, BOS, EOS};
use crate::vocab::{JointVocab, Modality, Segment};

/// Task a record or template belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "caption")]
    Caption,
    #[serde(rename = "asr")]
    Asr,
    #[serde(rename = "imgen")]
    ImageGen,
    #[serde(rename = "pair_img")]
    PairImage,
    #[serde(rename = "pair_aud")]
    PairAudio,
}

impl Task {
    pub fn slug(self) -> &'static str {
        match self {
            Task::Caption => "caption",
            Task::Asr => "asr",
            Task::ImageGen => "imgen",
            Task::PairImage => "pair_img",
            Task::PairAudio => "pair_aud",
        }
    }

    pub const ALL: [Task; 5] =
        [Task::Caption, Task::Asr, Task::ImageGen, Task::PairImage, Task::PairAudio];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Image,
    Audio,
    Text,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Literal(String),
    Slot(SlotKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub task: Task,
    pub pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn slot_count(&self) -> usize {
        self.pieces.iter().filter(|p| matches!(p, Piece::Slot(_))).count()
    }

    pub fn has_response_slot(&self) -> bool {
        self.pieces.iter().any(|p| matches!(p, Piece::Slot(SlotKind::Response)))
    }

    /// All literal text in the template, space-joined.
    pub fn literal_text(&self) -> String {
        let parts: Vec<&str> = self
            .pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Literal(s) => Some(s.as_str()),
                Piece::Slot(_) => None,
            })
            .collect();
        parts.join(" ")
    }
}

/// Which tokens the training loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossExtent {
    /// Everything from the first filled slot through the end token.
    #[serde(rename = "pair_body")]
    PairBody,
    /// Only the `{response}` slot plus the end token.
    #[serde(rename = "response_only")]
    ResponseOnly,
}

/// Parse one template per non-empty line. Ids are `task-slug/index`.
pub fn parse_templates(text: &str, task: Task) -> Result<Vec<PromptTemplate>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id = format!("{}/{}", task.slug(), out.len());
        out.push(PromptTemplate { id, task, pieces: parse_line(line)? });
    }
    if out.is_empty() {
        return Err(Error::Template(format!("no templates for task {}", task.slug())));
    }
    Ok(out)
}

fn parse_line(line: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = line;
    let push_literal = |s: &str, pieces: &mut Vec<Piece>| {
        let t = s.trim();
        if !t.is_empty() {
            pieces.push(Piece::Literal(t.to_string()));
        }
    };
    while let Some(open) = rest.find('{') {
        let Some(close_rel) = rest[open..].find('}') else {
            return Err(Error::Template(format!("unterminated slot in {line:?}")));
        };
        let close = open + close_rel;
        push_literal(&rest[..open], &mut pieces);
        let name = &rest[open + 1..close];
        let kind = match name {
            "img" => SlotKind::Image,
            "aud" => SlotKind::Audio,
            "text" => SlotKind::Text,
            "response" => SlotKind::Response,
            other => {
                return Err(Error::Template(format!("unknown slot {{{other}}} in {line:?}")))
            }
        };
        pieces.push(Piece::Slot(kind));
        rest = &rest[close + 1..];
    }
    push_literal(rest, &mut pieces);
    Ok(pieces)
}

macro_rules! builtin_pool {
    ($fn_name:ident, $file:literal, $task:expr) => {
        fn $fn_name() -> &'static Vec<PromptTemplate> {
            static POOL: OnceLock<Vec<PromptTemplate>> = OnceLock::new();
            POOL.get_or_init(|| {
                parse_templates(include_str!(concat!("../templates/", $file)), $task)
                    .expect("embedded template file is well-formed")
            })
        }
    };
}

builtin_pool!(caption_pool, "caption.txt", Task::Caption);
builtin_pool!(asr_pool, "asr.txt", Task::Asr);
builtin_pool!(imgen_pool, "imgen.txt", Task::ImageGen);
builtin_pool!(pair_image_pool, "pair_image.txt", Task::PairImage);
builtin_pool!(pair_audio_pool, "pair_audio.txt", Task::PairAudio);

/// The built-in prompt pool for a task.
pub fn template_pool(task: Task) -> &'static [PromptTemplate] {
    match task {
        Task::Caption => caption_pool(),
        Task::Asr => asr_pool(),
        Task::ImageGen => imgen_pool(),
        Task::PairImage => pair_image_pool(),
        Task::PairAudio => pair_audio_pool(),
    }
}

/// Every literal string across all built-in templates, for vocabulary
/// fitting and backbone pretraining text.
pub fn all_literal_text() -> Vec<String> {
    Task::ALL
        .iter()
        .flat_map(|&t| template_pool(t).iter())
        .map(|tp| tp.literal_text())
        .collect()
}

/// Render a template with one segment per slot (in template order) into a
/// joint-id sequence and its loss mask.
pub fn render_prompt(
    t: &PromptTemplate,
    fillers: &[Segment],
    joint: &JointVocab,
    text: &TextVocab,
    extent: LossExtent,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if fillers.len() != t.slot_count() {
        return Err(Error::Template(format!(
            "template {} has {} slots, got {} fillers",
            t.id,
            t.slot_count(),
            fillers.len()
        )));
    }
    if extent == LossExtent::ResponseOnly && !t.has_response_slot() {
        return Err(Error::Template(format!(
            "template {} has no response slot for response-only loss",
            t.id
        )));
    }

    let mut tokens = vec![BOS];
    let mut mask = vec![false];
    let mut next_filler = 0usize;
    let mut body_started = false;

    for piece in &t.pieces {
        match piece {
            Piece::Literal(s) => {
                let in_extent = extent == LossExtent::PairBody && body_started;
                for id in text.encode_words(s) {
                    tokens.push(id);
                    mask.push(in_extent);
                }
            }
            Piece::Slot(kind) => {
                let seg = &fillers[next_filler];
                next_filler += 1;
                let expected = match kind {
                    SlotKind::Image => Some(Modality::Image),
                    SlotKind::Audio => Some(Modality::Audio),
                    SlotKind::Text => Some(Modality::Text),
                    SlotKind::Response => None,
                };
                let actual = match seg {
                    Segment::Text(_) => Modality::Text,
                    Segment::Image(_) => Modality::Image,
                    Segment::Audio(_) => Modality::Audio,
                };
                if let Some(want) = expected {
                    if want != actual {
                        return Err(Error::Template(format!(
                            "template {} slot {} expects {:?}, got {:?}",
                            t.id, next_filler - 1, want, actual
                        )));
                    }
                }
                joint.validate_segment(seg)?;
                body_started = true;
                let in_extent = match extent {
                    LossExtent::PairBody => true,
                    LossExtent::ResponseOnly => *kind == SlotKind::Response,
                };
                match seg {
                    Segment::Text(ids) => {
                        for &id in ids {
                            tokens.push(id);
                            mask.push(in_extent);
                        }
                    }
                    Segment::Image(ids) => {
                        tokens.push(joint.img_open());
                        mask.push(false);
                        for &id in ids {
                            tokens.push(joint.to_joint(Modality::Image, id)?);
                            mask.push(in_extent);
                        }
                        tokens.push(joint.img_close());
                        mask.push(in_extent);
                    }
                    Segment::Audio(ids) => {
                        tokens.push(joint.aud_open());
                        mask.push(false);
                        for &id in ids {
                            tokens.push(joint.to_joint(Modality::Audio, id)?);
                            mask.push(in_extent);
                        }
                        tokens.push(joint.aud_close());
                        mask.push(in_extent);
                    }
                }
            }
        }
    }

    tokens.push(EOS);
    mask.push(true);
    Ok((tokens, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixtures() -> (JointVocab, TextVocab) {
        let mut corpus = all_literal_text();
        corpus.push("a small square at top-left".into());
        corpus.push("ba da ga".into());
        let tv = TextVocab::fit(&corpus);
        let jv = JointVocab::new(tv.size(), 16, 8).unwrap();
        (jv, tv)
    }

    #[test]
    fn builtin_pools_have_expected_sizes_and_ids() {
        assert_eq!(template_pool(Task::Caption).len(), 10);
        assert_eq!(template_pool(Task::Asr).len(), 1);
        assert_eq!(template_pool(Task::ImageGen).len(), 10);
        assert_eq!(template_pool(Task::PairImage).len(), 2);
        assert_eq!(template_pool(Task::PairAudio).len(), 2);
        assert_eq!(template_pool(Task::Caption)[0].id, "caption/0");
        assert_eq!(template_pool(Task::ImageGen)[9].id, "imgen/9");
    }

    #[test]
    fn builtin_pools_start_with_the_canonical_prompts() {
        let first = |t: Task| match &template_pool(t)[0].pieces[0] {
            Piece::Literal(s) => s.clone(),
            _ => panic!("template should open with a literal"),
        };
        assert_eq!(
            first(Task::Caption),
            "Please provide a caption for the image that has been given."
        );
        assert_eq!(
            first(Task::Asr),
            "Write a response that appropriately completes the request based on the provided audio."
        );
        assert_eq!(
            first(Task::ImageGen),
            "Create an image that perfectly matches the input sentence."
        );
        assert_eq!(first(Task::PairImage), "The image and text pair:");
        assert_eq!(first(Task::PairAudio), "The audio and text pair:");
    }

    #[test]
    fn parse_recognizes_slots_and_rejects_unknown_ones() {
        let ps = parse_line("Hello there {img} mid {response}").unwrap();
        assert_eq!(
            ps,
            vec![
                Piece::Literal("Hello there".into()),
                Piece::Slot(SlotKind::Image),
                Piece::Literal("mid".into()),
                Piece::Slot(SlotKind::Response),
            ]
        );
        assert!(parse_line("bad {foo}").is_err());
        assert!(parse_line("bad {img").is_err());
    }

    #[test]
    fn caption_render_masks_only_response_and_eos() {
        let (jv, tv) = fixtures();
        let t = &template_pool(Task::Caption)[0];
        let img = Segment::Image(vec![0, 1, 2, 3]);
        let cap = Segment::Text(tv.encode_words("a small square at top-left"));
        let (tokens, mask) =
            render_prompt(t, &[img, cap.clone()], &jv, &tv, LossExtent::ResponseOnly).unwrap();

        assert_eq!(tokens.len(), mask.len());
        assert_eq!(tokens[0], BOS);
        assert_eq!(*tokens.last().unwrap(), EOS);
        // Mask is true on exactly the 5 caption words plus the end token.
        let true_count = mask.iter().filter(|&&m| m).count();
        assert_eq!(true_count, 6);
        assert!(*mask.last().unwrap());
        let cap_ids = match &cap {
            Segment::Text(ids) => ids.clone(),
            _ => unreachable!(),
        };
        let n = tokens.len();
        assert_eq!(&tokens[n - 1 - cap_ids.len()..n - 1], &cap_ids[..]);
        assert!(mask[n - 1 - cap_ids.len()..n - 1].iter().all(|&m| m));
        // Everything before the caption (literal + image span) is unmasked.
        assert!(mask[..n - 1 - cap_ids.len()].iter().all(|&m| !m));
    }

    #[test]
    fn pair_render_masks_whole_body_except_open_marker() {
        let (jv, tv) = fixtures();
        let t = &template_pool(Task::PairImage)[0]; // image first
        let img = Segment::Image(vec![0, 1, 2, 3]);
        let cap = Segment::Text(tv.encode_words("a small square at top-left"));
        let (tokens, mask) =
            render_prompt(t, &[img, cap], &jv, &tv, LossExtent::PairBody).unwrap();

        let open_at = tokens.iter().position(|&t| t == jv.img_open()).unwrap();
        // Leading literal and the opening marker are not loss targets.
        assert!(mask[..=open_at].iter().all(|&m| !m));
        // Everything after — image payload, close marker, caption, eos — is.
        assert!(mask[open_at + 1..].iter().all(|&m| m));
    }

    #[test]
    fn image_response_masks_payload_and_close_but_not_open() {
        let (jv, tv) = fixtures();
        let t = &template_pool(Task::ImageGen)[0];
        let cap = Segment::Text(tv.encode_words("a small square at top-left"));
        let img = Segment::Image(vec![4, 5, 6, 7]);
        let (tokens, mask) =
            render_prompt(t, &[cap, img], &jv, &tv, LossExtent::ResponseOnly).unwrap();

        let open_at = tokens.iter().position(|&t| t == jv.img_open()).unwrap();
        let close_at = tokens.iter().position(|&t| t == jv.img_close()).unwrap();
        assert!(!mask[open_at], "opening marker is prompt-side");
        assert!(mask[close_at], "closing marker must be generated");
        assert!(mask[open_at + 1..close_at].iter().all(|&m| m));
        assert!(mask[..=open_at].iter().all(|&m| !m));
        // First loss target is the first image payload token, so a
        // generation prefix (everything before it) ends with the open marker.
        let first_true = mask.iter().position(|&m| m).unwrap();
        assert_eq!(first_true, open_at + 1);
    }

    #[test]
    fn arity_and_modality_mismatches_error() {
        let (jv, tv) = fixtures();
        let t = &template_pool(Task::Caption)[0];
        let img = Segment::Image(vec![0, 1, 2, 3]);
        let cap = Segment::Text(vec![4]);
        assert!(matches!(
            render_prompt(t, &[img.clone()], &jv, &tv, LossExtent::ResponseOnly),
            Err(Error::Template(_))
        ));
        assert!(matches!(
            render_prompt(t, &[cap.clone(), img.clone()], &jv, &tv, LossExtent::ResponseOnly),
            Err(Error::Template(_))
        ));
        // Pair templates carry no response slot.
        let pair = &template_pool(Task::PairImage)[0];
        assert!(matches!(
            render_prompt(pair, &[img, cap], &jv, &tv, LossExtent::ResponseOnly),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn every_builtin_template_renders_with_sound_masks() {
        let (jv, tv) = fixtures();
        let img = Segment::Image(vec![0, 1, 2, 3]);
        let aud = Segment::Audio(vec![0, 1]);
        let txt = Segment::Text(tv.encode_words("a small square at top-left"));
        for task in Task::ALL {
            for t in template_pool(task) {
                let fillers: Vec<Segment> = t
                    .pieces
                    .iter()
                    .filter_map(|p| match p {
                        Piece::Slot(SlotKind::Image) => Some(img.clone()),
                        Piece::Slot(SlotKind::Audio) => Some(aud.clone()),
                        Piece::Slot(SlotKind::Text) => Some(txt.clone()),
                        Piece::Slot(SlotKind::Response) => Some(match task {
                            Task::ImageGen => img.clone(),
                            Task::Asr => txt.clone(),
                            _ => txt.clone(),
                        }),
                        Piece::Literal(_) => None,
                    })
                    .collect();
                let extent = if t.has_response_slot() {
                    LossExtent::ResponseOnly
                } else {
                    LossExtent::PairBody
                };
                let (tokens, mask) = render_prompt(t, &fillers, &jv, &tv, extent).unwrap();
                assert_eq!(tokens.len(), mask.len());
                assert!(!mask[0], "sequence start is never a target");
                assert!(*mask.last().unwrap(), "sequence end always is");
                assert!(mask.iter().any(|&m| m));
                for (i, &tok) in tokens.iter().enumerate() {
                    if tok == jv.img_open() || tok == jv.aud_open() {
                        assert!(!mask[i], "open markers are never loss targets ({})", t.id);
                    }
                }
                // No literal word is ever unknown: the fitting corpus
                // includes every template literal.
                assert!(!tokens.contains(&crate::tokenizers::text::UNK), "{}", t.id);
            }
        }
    }
}
