//! Joint token space over text, image, and audio.
//!
//! Ids are laid out in contiguous blocks so every modality lives in one
//! vocabulary and a single output distribution covers them all:
//!
//! ```text
//! [0, W)            text: specials (pad/bos/eos/unk) then words
//! [W, W+4)          span markers: img_open, img_close, aud_open, aud_close
//! [Vt, Vt+Ki)       image patch tokens           (Vt = W + 4)
//! [Vt+Ki, Vt+Ki+Ka) audio frame tokens
//! ```
//!
//! Text ids map to themselves, so a text-only sequence is valid in either
//! space unchanged. Non-textual content travels inside marker-delimited
//! spans; [`JointVocab::split_segments`] parses a sequence back into typed
//! segments and rejects malformed span structure with the offending token
//! position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizers::text::{BOS, EOS};

pub const N_MARKERS: usize = 4;

/// Which block of the joint space an id belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
    Audio,
}

/// A typed run of modality-local ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    /// Text-vocabulary ids (no sequence start/end tokens).
    Text(Vec<u32>),
    /// Image patch tokens, row-major; length must be a perfect square.
    Image(Vec<u32>),
    /// Audio frame tokens, one per frame.
    Audio(Vec<u32>),
}

/// Block layout of the joint space. `text_size` counts specials plus words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointVocab {
    text_size: usize,
    k_image: usize,
    k_audio: usize,
    /// When set, image spans must carry exactly this many tokens.
    image_grid_len: Option<usize>,
}

impl JointVocab {
    pub fn new(text_size: usize, k_image: usize, k_audio: usize) -> Result<Self> {
        if text_size < 4 {
            return Err(Error::Config(format!(
                "text vocabulary of {text_size} cannot hold the reserved specials"
            )));
        }
        Ok(JointVocab { text_size, k_image, k_audio, image_grid_len: None })
    }

    /// Pin the image span length (tokens per image).
    pub fn with_image_grid(mut self, grid_len: usize) -> Result<Self> {
        if !is_square(grid_len) {
            return Err(Error::Config(format!(
                "image grid length {grid_len} is not a perfect square"
            )));
        }
        self.image_grid_len = Some(grid_len);
        Ok(self)
    }

    pub fn text_size(&self) -> usize {
        self.text_size
    }

    pub fn k_image(&self) -> usize {
        self.k_image
    }

    pub fn k_audio(&self) -> usize {
        self.k_audio
    }

    pub fn image_grid_len(&self) -> Option<usize> {
        self.image_grid_len
    }

    /// Size of the textual block including markers.
    pub fn textual_total(&self) -> usize {
        self.text_size + N_MARKERS
    }

    pub fn img_open(&self) -> u32 {
        self.text_size as u32
    }

    pub fn img_close(&self) -> u32 {
        (self.text_size + 1) as u32
    }

    pub fn aud_open(&self) -> u32 {
        (self.text_size + 2) as u32
    }

    pub fn aud_close(&self) -> u32 {
        (self.text_size + 3) as u32
    }

    pub fn image_base(&self) -> usize {
        self.textual_total()
    }

    pub fn audio_base(&self) -> usize {
        self.textual_total() + self.k_image
    }

    pub fn total(&self) -> usize {
        self.textual_total() + self.k_image + self.k_audio
    }

    pub fn is_marker(&self, id: u32) -> bool {
        (self.text_size..self.textual_total()).contains(&(id as usize))
    }

    /// Map a modality-local id into the joint space. Text ids are the
    /// identity map.
    pub fn to_joint(&self, m: Modality, local: u32) -> Result<u32> {
        let (base, k, what) = match m {
            Modality::Text => (0, self.text_size, "text token"),
            Modality::Image => (self.image_base(), self.k_image, "image token"),
            Modality::Audio => (self.audio_base(), self.k_audio, "audio token"),
        };
        if (local as usize) >= k {
            return Err(Error::IdRange { what, id: local as usize, lo: 0, hi: k });
        }
        Ok((base + local as usize) as u32)
    }

    /// Map a joint id back to its block and local id. Markers are reported
    /// as an error: they delimit spans and are not content.
    pub fn from_joint(&self, id: u32) -> Result<(Modality, u32)> {
        let i = id as usize;
        if i < self.text_size {
            Ok((Modality::Text, id))
        } else if i < self.textual_total() {
            Err(Error::IdRange { what: "span marker is not content", id: i, lo: 0, hi: self.total() })
        } else if i < self.audio_base() {
            Ok((Modality::Image, (i - self.image_base()) as u32))
        } else if i < self.total() {
            Ok((Modality::Audio, (i - self.audio_base()) as u32))
        } else {
            Err(Error::IdRange { what: "joint token", id: i, lo: 0, hi: self.total() })
        }
    }

    /// Check a segment's payload against this layout.
    pub fn validate_segment(&self, seg: &Segment) -> Result<()> {
        match seg {
            Segment::Text(ids) => {
                for (i, &id) in ids.iter().enumerate() {
                    if (id as usize) >= self.text_size {
                        return Err(Error::IdRange {
                            what: "text token",
                            id: id as usize,
                            lo: 0,
                            hi: self.text_size,
                        });
                    }
                    if id == BOS || id == EOS {
                        return Err(Error::Parse {
                            pos: i,
                            msg: "sequence start/end token inside a text payload".into(),
                        });
                    }
                }
            }
            Segment::Image(ids) => {
                if ids.is_empty() {
                    return Err(Error::Parse { pos: 0, msg: "empty image payload".into() });
                }
                if !is_square(ids.len()) {
                    return Err(Error::Parse {
                        pos: ids.len(),
                        msg: format!("image payload of {} tokens is not a perfect square", ids.len()),
                    });
                }
                if let Some(g) = self.image_grid_len {
                    if ids.len() != g {
                        return Err(Error::Parse {
                            pos: ids.len(),
                            msg: format!("image payload of {} tokens, expected {}", ids.len(), g),
                        });
                    }
                }
                for &id in ids {
                    if (id as usize) >= self.k_image {
                        return Err(Error::IdRange {
                            what: "image token",
                            id: id as usize,
                            lo: 0,
                            hi: self.k_image,
                        });
                    }
                }
            }
            Segment::Audio(ids) => {
                if ids.is_empty() {
                    return Err(Error::Parse { pos: 0, msg: "empty audio payload".into() });
                }
                for &id in ids {
                    if (id as usize) >= self.k_audio {
                        return Err(Error::IdRange {
                            what: "audio token",
                            id: id as usize,
                            lo: 0,
                            hi: self.k_audio,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Flatten segments into one joint-id sequence wrapped in sequence
    /// start/end tokens, with non-text payloads inside marker spans.
    pub fn assemble_sequence(&self, segments: &[Segment]) -> Result<Vec<u32>> {
        let mut out = vec![BOS];
        for seg in segments {
            self.validate_segment(seg)?;
            match seg {
                Segment::Text(ids) => out.extend_from_slice(ids),
                Segment::Image(ids) => {
                    out.push(self.img_open());
                    for &id in ids {
                        out.push(self.to_joint(Modality::Image, id)?);
                    }
                    out.push(self.img_close());
                }
                Segment::Audio(ids) => {
                    out.push(self.aud_open());
                    for &id in ids {
                        out.push(self.to_joint(Modality::Audio, id)?);
                    }
                    out.push(self.aud_close());
                }
            }
        }
        out.push(EOS);
        Ok(out)
    }

    /// Parse a joint-id sequence (sequence start through end) back into
    /// segments. Inverse of [`assemble_sequence`] up to merging adjacent
    /// text runs.
    ///
    /// [`assemble_sequence`]: JointVocab::assemble_sequence
    pub fn split_segments(&self, tokens: &[u32]) -> Result<Vec<Segment>> {
        if tokens.first() != Some(&BOS) {
            return Err(Error::Parse { pos: 0, msg: "expected sequence start token".into() });
        }

        enum State {
            Outside,
            InImage { open_pos: usize, payload: Vec<u32> },
            InAudio { open_pos: usize, payload: Vec<u32> },
        }

        let mut segs = Vec::new();
        let mut text_run: Vec<u32> = Vec::new();
        let mut state = State::Outside;
        let mut ended = false;

        for (pos, &t) in tokens.iter().enumerate().skip(1) {
            if ended {
                return Err(Error::Parse { pos, msg: "content after sequence end token".into() });
            }
            match &mut state {
                State::Outside => {
                    if t == EOS {
                        if !text_run.is_empty() {
                            segs.push(Segment::Text(std::mem::take(&mut text_run)));
                        }
                        ended = true;
                    } else if t == BOS {
                        return Err(Error::Parse {
                            pos,
                            msg: "sequence start token inside a sequence".into(),
                        });
                    } else if t == self.img_open() {
                        if !text_run.is_empty() {
                            segs.push(Segment::Text(std::mem::take(&mut text_run)));
                        }
                        state = State::InImage { open_pos: pos, payload: Vec::new() };
                    } else if t == self.aud_open() {
                        if !text_run.is_empty() {
                            segs.push(Segment::Text(std::mem::take(&mut text_run)));
                        }
                        state = State::InAudio { open_pos: pos, payload: Vec::new() };
                    } else if t == self.img_close() || t == self.aud_close() {
                        return Err(Error::Parse { pos, msg: "close marker without an open span".into() });
                    } else if (t as usize) < self.text_size {
                        text_run.push(t);
                    } else if (t as usize) < self.total() {
                        return Err(Error::Parse {
                            pos,
                            msg: "non-textual token outside a marker span".into(),
                        });
                    } else {
                        return Err(Error::Parse {
                            pos,
                            msg: format!("token {t} beyond the joint vocabulary"),
                        });
                    }
                }
                State::InImage { payload, .. } => {
                    if t == self.img_close() {
                        let seg = Segment::Image(std::mem::take(payload));
                        // Re-anchor payload-relative validation errors to the
                        // span's position in the stream.
                        self.validate_segment(&seg).map_err(|e| reanchor(e, pos))?;
                        segs.push(seg);
                        state = State::Outside;
                    } else if t == self.img_open() {
                        return Err(Error::Parse { pos, msg: "nested image span".into() });
                    } else if (self.image_base()..self.audio_base()).contains(&(t as usize)) {
                        payload.push((t as usize - self.image_base()) as u32);
                    } else {
                        return Err(Error::Parse {
                            pos,
                            msg: "non-image token inside an image span".into(),
                        });
                    }
                }
                State::InAudio { payload, .. } => {
                    if t == self.aud_close() {
                        let seg = Segment::Audio(std::mem::take(payload));
                        self.validate_segment(&seg).map_err(|e| reanchor(e, pos))?;
                        segs.push(seg);
                        state = State::Outside;
                    } else if t == self.aud_open() {
                        return Err(Error::Parse { pos, msg: "nested audio span".into() });
                    } else if (self.audio_base()..self.total()).contains(&(t as usize)) {
                        payload.push((t as usize - self.audio_base()) as u32);
                    } else {
                        return Err(Error::Parse {
                            pos,
                            msg: "non-audio token inside an audio span".into(),
                        });
                    }
                }
            }
        }

        match state {
            State::InImage { open_pos, .. } => {
                return Err(Error::Parse { pos: open_pos, msg: "unclosed image span".into() })
            }
            State::InAudio { open_pos, .. } => {
                return Err(Error::Parse { pos: open_pos, msg: "unclosed audio span".into() })
            }
            State::Outside => {}
        }
        if !ended {
            return Err(Error::Parse {
                pos: tokens.len(),
                msg: "missing sequence end token".into(),
            });
        }
        Ok(segs)
    }
}

fn reanchor(e: Error, pos: usize) -> Error {
    match e {
        Error::Parse { msg, .. } => Error::Parse { pos, msg },
        other => other,
    }
}

fn is_square(n: usize) -> bool {
    let r = (n as f64).sqrt().round() as usize;
    r * r == n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> JointVocab {
        // 96 text ids + 4 markers puts image tokens at 100.
        JointVocab::new(96, 64, 32).unwrap()
    }

    #[test]
    fn block_layout_arithmetic() {
        let v = vocab();
        assert_eq!(v.textual_total(), 100);
        assert_eq!(v.img_open(), 96);
        assert_eq!(v.img_close(), 97);
        assert_eq!(v.aud_open(), 98);
        assert_eq!(v.aud_close(), 99);
        assert_eq!(v.image_base(), 100);
        assert_eq!(v.audio_base(), 164);
        assert_eq!(v.total(), 196);
    }

    #[test]
    fn text_ids_map_to_themselves() {
        let v = vocab();
        for id in [0u32, 1, 2, 3, 4, 95] {
            assert_eq!(v.to_joint(Modality::Text, id).unwrap(), id);
        }
        assert!(v.to_joint(Modality::Text, 96).is_err());
    }

    #[test]
    fn nontextual_ids_shift_into_their_blocks() {
        let v = vocab();
        assert_eq!(v.to_joint(Modality::Image, 0).unwrap(), 100);
        assert_eq!(v.to_joint(Modality::Image, 63).unwrap(), 163);
        assert!(v.to_joint(Modality::Image, 64).is_err());
        assert_eq!(v.to_joint(Modality::Audio, 0).unwrap(), 164);
        assert_eq!(v.to_joint(Modality::Audio, 31).unwrap(), 195);
        assert!(v.to_joint(Modality::Audio, 32).is_err());
    }

    #[test]
    fn from_joint_inverts_to_joint_and_rejects_markers() {
        let v = vocab();
        for (m, local) in [
            (Modality::Text, 5u32),
            (Modality::Image, 0),
            (Modality::Image, 63),
            (Modality::Audio, 31),
        ] {
            let j = v.to_joint(m, local).unwrap();
            assert_eq!(v.from_joint(j).unwrap(), (m, local));
        }
        assert!(v.from_joint(v.img_open()).is_err());
        assert!(v.from_joint(196).is_err());
    }

    #[test]
    fn assemble_wraps_and_brackets_spans() {
        let v = vocab();
        let toks = v
            .assemble_sequence(&[
                Segment::Text(vec![4, 5]),
                Segment::Image(vec![0, 1, 2, 3]),
                Segment::Audio(vec![7]),
            ])
            .unwrap();
        assert_eq!(
            toks,
            vec![BOS, 4, 5, 96, 100, 101, 102, 103, 97, 98, 171, 99, EOS]
        );
    }

    #[test]
    fn split_inverts_assemble() {
        let v = vocab();
        let segs = vec![
            Segment::Image(vec![9, 8, 7, 6]),
            Segment::Text(vec![10, 11, 12]),
            Segment::Audio(vec![0, 1]),
        ];
        let toks = v.assemble_sequence(&segs).unwrap();
        assert_eq!(v.split_segments(&toks).unwrap(), segs);
    }

    #[test]
    fn split_rejects_malformed_sequences() {
        let v = vocab();
        let open = v.img_open();
        let close = v.img_close();
        let cases: Vec<(Vec<u32>, usize)> = vec![
            (vec![4, EOS], 0),                              // no start token
            (vec![BOS, 4], 2),                              // no end token
            (vec![BOS, close, EOS], 1),                     // close without open
            (vec![BOS, open, 100, EOS], 3),                 // eos inside span
            (vec![BOS, open, 100], 1),                      // unclosed at stream end
            (vec![BOS, open, open, close, EOS], 2),         // nested open
            (vec![BOS, open, 4, close, EOS], 2),            // text inside image span
            (vec![BOS, open, 164, close, EOS], 2),          // audio token inside image span
            (vec![BOS, open, close, EOS], 2),               // empty payload
            (vec![BOS, open, 100, 101, close, EOS], 4),     // 2 tokens: not square
            (vec![BOS, 100, EOS], 1),                       // image token outside span
            (vec![BOS, EOS, 4], 2),                         // content after end
            (vec![BOS, BOS, EOS], 1),                       // start token repeated
            (vec![BOS, 500, EOS], 1),                       // beyond vocabulary
        ];
        for (toks, want_pos) in cases {
            match v.split_segments(&toks) {
                Err(Error::Parse { pos, .. }) => {
                    assert_eq!(pos, want_pos, "wrong position for {toks:?}")
                }
                other => panic!("{toks:?} should fail to parse, got {other:?}"),
            }
        }
    }

    #[test]
    fn pinned_grid_length_is_enforced() {
        let v = vocab().with_image_grid(9).unwrap();
        assert!(v.validate_segment(&Segment::Image(vec![0; 9])).is_ok());
        assert!(v.validate_segment(&Segment::Image(vec![0; 4])).is_err());
        assert!(JointVocab::new(96, 64, 32).unwrap().with_image_grid(8).is_err());
    }

    #[test]
    fn text_payload_rejects_sequence_delimiters() {
        let v = vocab();
        assert!(v.validate_segment(&Segment::Text(vec![4, BOS])).is_err());
        assert!(v.validate_segment(&Segment::Text(vec![EOS])).is_err());
        assert!(v.validate_segment(&Segment::Text(vec![0, 3, 95])).is_ok());
    }

    /// What assemble-then-split preserves: empty text runs vanish and
    /// adjacent text runs merge; everything else survives unchanged.
    fn normalize(segs: &[Segment]) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for s in segs {
            match s {
                Segment::Text(ids) if ids.is_empty() => {}
                Segment::Text(ids) => {
                    if let Some(Segment::Text(prev)) = out.last_mut() {
                        prev.extend_from_slice(ids);
                    } else {
                        out.push(Segment::Text(ids.clone()));
                    }
                }
                other => out.push(other.clone()),
            }
        }
        out
    }

    fn arb_segment() -> impl Strategy<Value = Segment> {
        let text_id = prop_oneof![Just(0u32), Just(3u32), 4u32..96];
        let text = prop::collection::vec(text_id, 0..6).prop_map(Segment::Text);
        let image = prop_oneof![Just(1usize), Just(4), Just(9)]
            .prop_flat_map(|n| prop::collection::vec(0u32..64, n))
            .prop_map(Segment::Image);
        let audio = prop::collection::vec(0u32..32, 1..6).prop_map(Segment::Audio);
        prop_oneof![text, image, audio]
    }

    proptest! {
        #[test]
        fn prop_split_inverts_assemble(segs in prop::collection::vec(arb_segment(), 0..8)) {
            let v = vocab();
            let toks = v.assemble_sequence(&segs).unwrap();
            let back = v.split_segments(&toks).unwrap();
            prop_assert_eq!(back, normalize(&segs));
        }

        #[test]
        fn prop_every_joint_id_round_trips(id in 0u32..196) {
            let v = vocab();
            if v.is_marker(id) {
                prop_assert!(v.from_joint(id).is_err());
            } else {
                let (m, local) = v.from_joint(id).unwrap();
                prop_assert_eq!(v.to_joint(m, local).unwrap(), id);
            }
        }
    }
}
