//! Binary checkpoint persistence.
//!
//! One file holds a tagged object: a full model bundle (model + tokenizers),
//! a standalone audio codebook, or a standalone image tokenizer. Layout,
//! all integers little-endian:
//!
//! ```text
//! "TEAL"                      magic
//! u32 version (= 1)
//! u32 object kind             0 = model bundle, 1 = codebook, 2 = vq model
//! u32 tensor count
//! per tensor:
//!   u16 name length, name (UTF-8)
//!   u8 dtype (0 = f32), u8 rank, rank × u64 dims
//!   f32 payload, row-major
//! u32 metadata length, metadata (UTF-8 JSON)
//! ```
//!
//! Tensors are written in a fixed order and floats byte-for-byte, so
//! save → load → save reproduces the file exactly. Read errors carry the
//! byte offset where the data stopped making sense.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MmLlm, ModelConfig};
use crate::tensor::Tensor;
use crate::tokenizers::kmeans::Codebook;
use crate::tokenizers::text::TextVocab;
use crate::tokenizers::vq::{VqConfig, VqModel};
use crate::vocab::JointVocab;

pub const MAGIC: [u8; 4] = *b"TEAL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    ModelBundle,
    Codebook,
    VqModel,
}

impl ObjectKind {
    fn tag(self) -> u32 {
        match self {
            ObjectKind::ModelBundle => 0,
            ObjectKind::Codebook => 1,
            ObjectKind::VqModel => 2,
        }
    }

    fn from_tag(tag: u32, offset: u64) -> Result<Self> {
        match tag {
            0 => Ok(ObjectKind::ModelBundle),
            1 => Ok(ObjectKind::Codebook),
            2 => Ok(ObjectKind::VqModel),
            other => Err(Error::Format { offset, msg: format!("unknown object kind {other}") }),
        }
    }
}

const DTYPE_F32: u8 = 0;
const MAX_RANK: u8 = 8;

/// Serialize tensors + metadata to checkpoint bytes.
pub fn encode(
    kind: ObjectKind,
    tensors: &[(String, Tensor<f32>)],
    metadata: &serde_json::Value,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&kind.tag().to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Config(format!("tensor name too long: {name}")));
        }
        let shape = t.shape();
        if shape.len() > MAX_RANK as usize {
            return Err(Error::Config(format!("tensor {name} has rank {}", shape.len())));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(DTYPE_F32);
        out.push(shape.len() as u8);
        for &d in &shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(metadata)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("unexpected end of file reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8v(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16v(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32v(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64v(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes back into (kind, tensors, metadata).
pub fn decode(bytes: &[u8]) -> Result<(ObjectKind, Vec<(String, Tensor<f32>)>, serde_json::Value)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let ver_off = r.pos as u64;
    let version = r.u32v("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: ver_off,
            msg: format!("unsupported version {version} (this build reads {VERSION})"),
        });
    }
    let kind_off = r.pos as u64;
    let kind = ObjectKind::from_tag(r.u32v("object kind")?, kind_off)?;
    let count = r.u32v("tensor count")? as usize;

    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16v("tensor name length")? as usize;
        let name_off = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format { offset: name_off, msg: format!("tensor {i} name is not UTF-8") })?
            .to_string();
        let dtype_off = r.pos as u64;
        let dtype = r.u8v("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format { offset: dtype_off, msg: format!("unknown dtype {dtype}") });
        }
        let rank_off = r.pos as u64;
        let rank = r.u8v("rank")?;
        if rank > MAX_RANK {
            return Err(Error::Format { offset: rank_off, msg: format!("rank {rank} too large") });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let dim_off = r.pos as u64;
            let d = r.u64v("dimension")?;
            numel = numel.saturating_mul(d.max(1));
            if numel > (1 << 31) {
                return Err(Error::Format {
                    offset: dim_off,
                    msg: format!("tensor {name} would hold {numel} elements"),
                });
            }
            shape.push(d as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_data(&shape, data)?));
    }

    let meta_len = r.u32v("metadata length")? as usize;
    let meta_off = r.pos as u64;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let metadata: serde_json::Value = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Format { offset: meta_off, msg: format!("metadata is not JSON: {e}") })?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after metadata", bytes.len() - r.pos),
        });
    }
    Ok((kind, tensors, metadata))
}

pub fn write_checkpoint(
    path: &Path,
    kind: ObjectKind,
    tensors: &[(String, Tensor<f32>)],
    metadata: &serde_json::Value,
) -> Result<()> {
    Ok(std::fs::write(path, encode(kind, tensors, metadata)?)?)
}

pub fn read_checkpoint(
    path: &Path,
) -> Result<(ObjectKind, Vec<(String, Tensor<f32>)>, serde_json::Value)> {
    decode(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Typed objects on top of the raw format.

/// Everything inference needs in one file: the model and all tokenizers.
pub struct Bundle {
    pub model: MmLlm<f32>,
    pub text_vocab: TextVocab,
    pub vq: VqModel<f32>,
    pub audio_cb: Codebook<f32>,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    model: ModelConfig,
    vocab: JointVocab,
    vq: VqConfig,
    words: Vec<String>,
    audio_k: usize,
    audio_dim: usize,
}

pub fn bundle_bytes(b: &Bundle) -> Result<Vec<u8>> {
    let mut tensors = b.model.named_params();
    tensors.push(("vq.enc_w".into(), b.vq.enc_w.clone()));
    tensors.push(("vq.enc_b".into(), b.vq.enc_b.clone()));
    tensors.push(("vq.dec_w".into(), b.vq.dec_w.clone()));
    tensors.push(("vq.dec_b".into(), b.vq.dec_b.clone()));
    tensors.push((
        "vq.codebook".into(),
        Tensor::from_data(&[b.vq.codebook.k(), b.vq.codebook.dim()], b.vq.codebook.flat().to_vec())?,
    ));
    tensors.push((
        "audio_cb.centroids".into(),
        Tensor::from_data(&[b.audio_cb.k(), b.audio_cb.dim()], b.audio_cb.flat().to_vec())?,
    ));
    let meta = BundleMeta {
        model: b.model.cfg,
        vocab: b.model.vocab,
        vq: b.vq.cfg,
        words: b.text_vocab.words().to_vec(),
        audio_k: b.audio_cb.k(),
        audio_dim: b.audio_cb.dim(),
    };
    encode(ObjectKind::ModelBundle, &tensors, &serde_json::to_value(meta)?)
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<Bundle> {
    let (kind, tensors, metadata) = decode(bytes)?;
    if kind != ObjectKind::ModelBundle {
        return Err(Error::Config(format!("expected a model bundle, found {kind:?}")));
    }
    let meta: BundleMeta = serde_json::from_value(metadata)?;
    let mut vq_parts: HashMap<String, Tensor<f32>> = HashMap::new();
    let mut audio_cent: Option<Tensor<f32>> = None;
    let mut model_tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("vq.") {
            vq_parts.insert(rest.to_string(), t);
        } else if name == "audio_cb.centroids" {
            audio_cent = Some(t);
        } else {
            model_tensors.insert(name, t);
        }
    }

    let model = MmLlm::from_named(&meta.model, &meta.vocab, model_tensors)?;
    let text_vocab = TextVocab::from_words(meta.words);

    let mut need = |k: &str| -> Result<Tensor<f32>> {
        vq_parts
            .remove(k)
            .ok_or_else(|| Error::Config(format!("bundle is missing tensor vq.{k}")))
    };
    let cb_t = need("codebook")?;
    let vq = VqModel::from_parts(
        meta.vq,
        need("enc_w")?,
        need("enc_b")?,
        need("dec_w")?,
        need("dec_b")?,
        Codebook::new(meta.vq.k, meta.vq.latent_dim, cb_t.to_vec())?,
    )?;
    if let Some(extra) = vq_parts.keys().next() {
        return Err(Error::Config(format!("bundle has unexpected tensor vq.{extra}")));
    }
    let cent = audio_cent.ok_or_else(|| Error::Config("bundle is missing audio_cb.centroids".into()))?;
    let audio_cb = Codebook::new(meta.audio_k, meta.audio_dim, cent.to_vec())?;

    Ok(Bundle { model, text_vocab, vq, audio_cb })
}

pub fn save_bundle(path: &Path, b: &Bundle) -> Result<()> {
    Ok(std::fs::write(path, bundle_bytes(b)?)?)
}

pub fn load_bundle(path: &Path) -> Result<Bundle> {
    bundle_from_bytes(&std::fs::read(path)?)
}

pub fn save_audio_codebook(path: &Path, cb: &Codebook<f32>) -> Result<()> {
    let tensors = vec![(
        "centroids".to_string(),
        Tensor::from_data(&[cb.k(), cb.dim()], cb.flat().to_vec())?,
    )];
    let meta = serde_json::json!({ "k": cb.k(), "dim": cb.dim() });
    write_checkpoint(path, ObjectKind::Codebook, &tensors, &meta)
}

pub fn load_audio_codebook(path: &Path) -> Result<Codebook<f32>> {
    let (kind, tensors, meta) = read_checkpoint(path)?;
    if kind != ObjectKind::Codebook {
        return Err(Error::Config(format!("expected a codebook, found {kind:?}")));
    }
    let k = meta["k"].as_u64().ok_or_else(|| Error::Config("codebook metadata lacks k".into()))? as usize;
    let dim =
        meta["dim"].as_u64().ok_or_else(|| Error::Config("codebook metadata lacks dim".into()))? as usize;
    let cent = tensors
        .into_iter()
        .find(|(n, _)| n == "centroids")
        .ok_or_else(|| Error::Config("codebook file lacks centroids tensor".into()))?
        .1;
    Codebook::new(k, dim, cent.to_vec())
}

pub fn save_vq_model(path: &Path, vq: &VqModel<f32>) -> Result<()> {
    let tensors = vec![
        ("enc_w".to_string(), vq.enc_w.clone()),
        ("enc_b".to_string(), vq.enc_b.clone()),
        ("dec_w".to_string(), vq.dec_w.clone()),
        ("dec_b".to_string(), vq.dec_b.clone()),
        (
            "codebook".to_string(),
            Tensor::from_data(&[vq.codebook.k(), vq.codebook.dim()], vq.codebook.flat().to_vec())?,
        ),
    ];
    write_checkpoint(path, ObjectKind::VqModel, &tensors, &serde_json::to_value(vq.cfg)?)
}

pub fn load_vq_model(path: &Path) -> Result<VqModel<f32>> {
    let (kind, tensors, meta) = read_checkpoint(path)?;
    if kind != ObjectKind::VqModel {
        return Err(Error::Config(format!("expected an image tokenizer, found {kind:?}")));
    }
    let cfg: VqConfig = serde_json::from_value(meta)?;
    let mut map: HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    let mut need = |k: &str| -> Result<Tensor<f32>> {
        map.remove(k).ok_or_else(|| Error::Config(format!("tokenizer file is missing {k}")))
    };
    let cb_t = need("codebook")?;
    VqModel::from_parts(
        cfg,
        need("enc_w")?,
        need("enc_b")?,
        need("dec_w")?,
        need("dec_b")?,
        Codebook::new(cfg.k, cfg.latent_dim, cb_t.to_vec())?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, BackboneConfig, ProjectionKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_tensors() -> Vec<(String, Tensor<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        vec![
            ("alpha".to_string(), Tensor::randn(&[3, 4], 1.0, &mut rng)),
            ("beta.gamma".to_string(), Tensor::randn(&[5], 0.5, &mut rng)),
            ("scalarish".to_string(), Tensor::from_data(&[1], vec![-0.0f32]).unwrap()),
        ]
    }

    fn meta() -> serde_json::Value {
        serde_json::json!({"alpha": 1, "nested": {"b": [1, 2, 3]}})
    }

    #[test]
    fn encode_decode_round_trips_bit_exactly() {
        let tensors = sample_tensors();
        let bytes = encode(ObjectKind::Codebook, &tensors, &meta()).unwrap();
        let (kind, back, metadata) = decode(&bytes).unwrap();
        assert_eq!(kind, ObjectKind::Codebook);
        assert_eq!(metadata, meta());
        assert_eq!(back.len(), tensors.len());
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.to_vec().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn decode_then_encode_reproduces_the_bytes() {
        let bytes = encode(ObjectKind::VqModel, &sample_tensors(), &meta()).unwrap();
        let (kind, tensors, metadata) = decode(&bytes).unwrap();
        let again = encode(kind, &tensors, &metadata).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let mut bytes = encode(ObjectKind::Codebook, &[], &meta()).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at 0, got {other:?}"),
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = encode(ObjectKind::Codebook, &[], &meta()).unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        match decode(&bytes) {
            Err(Error::Format { offset: 4, msg }) => assert!(msg.contains("999"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_and_dtype_are_rejected() {
        let mut bytes = encode(ObjectKind::Codebook, &[], &meta()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 8, .. })));

        let bytes = encode(ObjectKind::Codebook, &sample_tensors(), &meta()).unwrap();
        // First tensor's dtype byte sits right after count + name header.
        let dtype_pos = 4 + 4 + 4 + 4 + 2 + "alpha".len();
        let mut bad = bytes.clone();
        bad[dtype_pos] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn every_truncation_errors_instead_of_panicking() {
        let bytes = encode(ObjectKind::VqModel, &sample_tensors(), &meta()).unwrap();
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("truncation at {cut} gave {other:?}"),
            }
        }
        // Trailing garbage is also rejected.
        let mut padded = bytes;
        padded.push(0);
        assert!(matches!(decode(&padded), Err(Error::Format { .. })));
    }

    #[test]
    fn non_utf8_name_is_rejected() {
        // One tensor named with two invalid bytes, rank 0, no payload.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&[0xff, 0xfe]);
        bytes.push(DTYPE_F32);
        bytes.push(0);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }

    fn tiny_bundle() -> Bundle {
        use crate::tokenizers::vq::{vq_fit, VqConfig};
        use rand::Rng as _;

        let text_vocab = TextVocab::fit(["a small square at center", "ba da"]);
        let vq_cfg = VqConfig { patch_size: 2, latent_dim: 4, k: 6, epochs: 2, seed: 1, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patches: Vec<f32> = (0..50 * 4).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let (vq, _) = vq_fit(&patches, &vq_cfg).unwrap();
        let audio_cb = Codebook::new(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let vocab = JointVocab::new(text_vocab.size(), vq_cfg.k, 3)
            .unwrap()
            .with_image_grid(4)
            .unwrap();
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                layers: 1,
                d_model: 8,
                heads: 2,
                d_ff: 16,
                max_seq: 16,
                rope_base: 10000.0,
            },
            d_code_image: 4,
            d_code_audio: 2,
            projection: ProjectionKind::Affine,
            seed: 11,
        };
        let mut model = init_model::<f32>(&cfg, &vocab).unwrap();
        model.insert_bias_norm();
        Bundle { model, text_vocab, vq, audio_cb }
    }

    #[test]
    fn bundle_round_trips_and_is_byte_stable() {
        let b = tiny_bundle();
        let bytes = bundle_bytes(&b).unwrap();
        let loaded = bundle_from_bytes(&bytes).unwrap();
        let again = bundle_bytes(&loaded).unwrap();
        assert_eq!(bytes, again, "save -> load -> save must be byte-identical");

        assert_eq!(loaded.text_vocab.words(), b.text_vocab.words());
        assert_eq!(loaded.model.vocab, b.model.vocab);
        assert_eq!(loaded.model.vocab.image_grid_len(), Some(4));
        assert!(loaded.model.bias_norm_inserted());
        let s1: Vec<Vec<u32>> = b
            .model
            .named_params()
            .iter()
            .map(|(_, t)| t.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        let s2: Vec<Vec<u32>> = loaded
            .model
            .named_params()
            .iter()
            .map(|(_, t)| t.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(s1, s2);
    }

    #[test]
    fn standalone_tokenizer_files_round_trip_via_disk() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();

        let cb_path = dir.path().join("audio.cb");
        save_audio_codebook(&cb_path, &b.audio_cb).unwrap();
        let cb = load_audio_codebook(&cb_path).unwrap();
        assert_eq!(cb.flat(), b.audio_cb.flat());

        let vq_path = dir.path().join("img.vq");
        save_vq_model(&vq_path, &b.vq).unwrap();
        let vq = load_vq_model(&vq_path).unwrap();
        assert_eq!(vq.codebook.flat(), b.vq.codebook.flat());
        assert_eq!(vq.enc_w.to_vec(), b.vq.enc_w.to_vec());

        // Kind mismatch is a clear error.
        assert!(load_audio_codebook(&vq_path).is_err());
        assert!(load_vq_model(&cb_path).is_err());
    }
}
