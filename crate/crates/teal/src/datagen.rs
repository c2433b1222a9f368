//! Synthetic paired datasets: captioned shape images and spoken-alphabet
//! audio with transcripts.
//!
//! Both generators are small enough to enumerate and check by hand, yet
//! rich enough to exercise every task: image grids pair with captions (and
//! the reverse, caption-conditioned generation), audio utterances pair
//! with transcripts. Records serialize as JSONL with strict per-task field
//! validation on both write and read.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::templates::Task;

/// One dataset example. Which optional fields must be present depends on
/// the task: image tasks carry `image` + `text`, audio tasks carry
/// `audio` + `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Row-major pixel rows in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<Vec<f32>>>,
    /// Fixed-dimension feature frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<Vec<Vec<f32>>>,
}

impl Record {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Record { id: self.id.clone(), msg: msg.into() }
    }

    /// Check task arity and payload well-formedness.
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(self.err("empty record id"));
        }
        let (needs_image, needs_audio) = match self.task {
            Task::Caption | Task::ImageGen | Task::PairImage => (true, false),
            Task::Asr | Task::PairAudio => (false, true),
        };
        if self.text.as_deref().map_or(true, |t| t.trim().is_empty()) {
            return Err(self.err("missing or empty text"));
        }
        if needs_image != self.image.is_some() {
            return Err(self.err(if needs_image {
                "task requires an image"
            } else {
                "task forbids an image"
            }));
        }
        if needs_audio != self.audio.is_some() {
            return Err(self.err(if needs_audio {
                "task requires audio"
            } else {
                "task forbids audio"
            }));
        }
        if let Some(rows) = &self.image {
            if rows.is_empty() || rows[0].is_empty() {
                return Err(self.err("empty image"));
            }
            let w = rows[0].len();
            for row in rows {
                if row.len() != w {
                    return Err(self.err("ragged image rows"));
                }
                for &v in row {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(self.err(format!("pixel {v} outside [0, 1]")));
                    }
                }
            }
        }
        if let Some(frames) = &self.audio {
            if frames.is_empty() || frames[0].is_empty() {
                return Err(self.err("empty audio"));
            }
            let dim = frames[0].len();
            for f in frames {
                if f.len() != dim {
                    return Err(self.err("inconsistent audio frame dimensions"));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(self.err("non-finite audio sample"));
                }
            }
        }
        Ok(())
    }

    pub fn image_grid(&self) -> Result<ImageGrid> {
        let rows = self.image.as_ref().ok_or_else(|| self.err("record has no image"))?;
        ImageGrid::from_rows(rows)
    }
}

/// Write records as one JSON object per line, validating each first.
pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        r.validate()?;
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read and validate a JSONL record file.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)?;
        r.validate()?;
        records.push(r);
    }
    Ok(records)
}

// --- shape images ---------------------------------------------------------

pub const IMAGE_SIDE: usize = 12;
pub const SHAPES: [&str; 3] = ["square", "cross", "stripes"];
pub const POSITIONS: [&str; 5] = ["top-left", "top-right", "bottom-left", "bottom-right", "center"];
pub const SIZES: [&str; 2] = ["small", "large"];

/// All 30 (shape, position, size) index triples in a fixed order.
pub fn all_shape_triples() -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(SHAPES.len() * POSITIONS.len() * SIZES.len());
    for s in 0..SHAPES.len() {
        for p in 0..POSITIONS.len() {
            for z in 0..SIZES.len() {
                out.push((s, p, z));
            }
        }
    }
    out
}

pub fn shape_caption(shape: usize, position: usize, size: usize) -> String {
    format!("a {} {} at {}", SIZES[size], SHAPES[shape], POSITIONS[position])
}

/// Render one binary 12x12 glyph. Positions anchor a 6x6 region (corners
/// and center); `large` fills the region, `small` uses its central 4x4.
pub fn render_shape(shape: usize, position: usize, size: usize) -> ImageGrid {
    assert!(shape < SHAPES.len() && position < POSITIONS.len() && size < SIZES.len());
    let (r0, c0) = match position {
        0 => (0, 0),
        1 => (0, 6),
        2 => (6, 0),
        3 => (6, 6),
        _ => (3, 3),
    };
    let (off, side) = if size == 1 { (0, 6) } else { (1, 4) };
    let (r0, c0) = (r0 + off, c0 + off);
    let mut img = ImageGrid::zeros(IMAGE_SIDE, IMAGE_SIDE);
    for r in 0..side {
        for c in 0..side {
            let on = match shape {
                0 => true,                                    // filled square
                1 => {                                        // centered cross
                    let mid = side / 2;
                    (r == mid - 1 || r == mid) || (c == mid - 1 || c == mid)
                }
                _ => r % 2 == 0,                              // horizontal stripes
            };
            if on {
                img.set(r0 + r, c0 + c, 1.0);
            }
        }
    }
    img
}

/// Generate `3n` records from `n` base images: a caption record, an
/// image-generation record, and an alignment-pair record per image.
/// Stratified draws cycle the 30 triples in order; otherwise triples are
/// sampled uniformly.
pub fn gen_shapes_dataset(n: usize, seed: u64, stratified: bool) -> Vec<Record> {
    let triples = all_shape_triples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (s, p, z) = if stratified {
            triples[i % triples.len()]
        } else {
            triples[rng.gen_range(0..triples.len())]
        };
        let rows = render_shape(s, p, z).to_rows();
        let caption = shape_caption(s, p, z);
        for (suffix, task) in
            [("caption", Task::Caption), ("imgen", Task::ImageGen), ("pair", Task::PairImage)]
        {
            records.push(Record {
                id: format!("shapes-{i:04}-{suffix}"),
                task,
                text: Some(caption.clone()),
                image: Some(rows.clone()),
                audio: None,
            });
        }
    }
    records
}

// --- spoken-alphabet audio -------------------------------------------------

pub const AUDIO_DIM: usize = 8;
pub const FRAMES_PER_SYMBOL: usize = 3;

/// A 12-symbol spoken alphabet over 8-dimensional feature frames. Symbol
/// means are fixed: the first eight sit on scaled coordinate axes, the
/// last four on two-axis diagonals, all at norm 2.
pub struct AudioAlphabet {
    means: Vec<Vec<f32>>,
}

pub const AUDIO_SYMBOLS: [&str; 12] =
    ["ba", "da", "ga", "ka", "ma", "na", "pa", "ra", "sa", "ta", "wa", "za"];

impl Default for AudioAlphabet {
    fn default() -> Self {
        Self::new()
    }
}

impl AudioAlphabet {
    pub fn new() -> Self {
        let mut means = Vec::with_capacity(AUDIO_SYMBOLS.len());
        for s in 0..8 {
            let mut m = vec![0.0f32; AUDIO_DIM];
            m[s] = 2.0;
            means.push(m);
        }
        let diag = std::f32::consts::SQRT_2;
        for i in 0..4 {
            let mut m = vec![0.0f32; AUDIO_DIM];
            m[2 * i] = diag;
            m[2 * i + 1] = diag;
            means.push(m);
        }
        AudioAlphabet { means }
    }

    pub fn mean(&self, symbol: usize) -> &[f32] {
        &self.means[symbol]
    }

    /// Smallest distance between two distinct symbol means.
    pub fn min_mean_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                let d: f64 = self.means[i]
                    .iter()
                    .zip(&self.means[j])
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    /// Synthesize an utterance: three frames per symbol, each the symbol
    /// mean plus isotropic Gaussian noise with sigma = `noise` times the
    /// minimum inter-mean distance.
    pub fn synth(&self, symbols: &[usize], noise: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let sigma = noise * self.min_mean_distance();
        let mut frames = Vec::with_capacity(symbols.len() * FRAMES_PER_SYMBOL);
        for &s in symbols {
            for _ in 0..FRAMES_PER_SYMBOL {
                let frame: Vec<f32> = self.means[s]
                    .iter()
                    .map(|&m| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + (sigma * e) as f32
                    })
                    .collect();
                frames.push(frame);
            }
        }
        frames
    }

    /// Closest symbol mean to a frame (ties to the lower index).
    pub fn nearest_symbol(&self, frame: &[f32]) -> usize {
        let mut best = (0usize, f64::INFINITY);
        for (s, m) in self.means.iter().enumerate() {
            let d: f64 = m.iter().zip(frame).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            if d < best.1 {
                best = (s, d);
            }
        }
        best.0
    }

    pub fn transcript(&self, symbols: &[usize]) -> String {
        symbols.iter().map(|&s| AUDIO_SYMBOLS[s]).collect::<Vec<_>>().join(" ")
    }
}

/// Generate `2n` records from `n` utterances: a transcription record and
/// an alignment-pair record per utterance. Utterance lengths are uniform
/// in `len_range` symbols.
pub fn gen_audio_dataset(
    n: usize,
    seed: u64,
    noise: f64,
    len_range: (usize, usize),
) -> Result<Vec<Record>> {
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(Error::Config(format!(
            "utterance length range {}..={} is invalid",
            len_range.0, len_range.1
        )));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::Config(format!("noise level {noise} outside [0, 1)")));
    }
    let alphabet = AudioAlphabet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(2 * n);
    for i in 0..n {
        let len = rng.gen_range(len_range.0..=len_range.1);
        let symbols: Vec<usize> =
            (0..len).map(|_| rng.gen_range(0..AUDIO_SYMBOLS.len())).collect();
        let frames = alphabet.synth(&symbols, noise, &mut rng);
        let text = alphabet.transcript(&symbols);
        for (suffix, task) in [("asr", Task::Asr), ("pair", Task::PairAudio)] {
            records.push(Record {
                id: format!("audio-{i:04}-{suffix}"),
                task,
                text: Some(text.clone()),
                image: None,
                audio: Some(frames.clone()),
            });
        }
    }
    Ok(records)
}
