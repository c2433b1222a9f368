//! Per-modality tokenizers: whitespace text vocabulary, k-means audio
//! frame codebook, and vector-quantized image patches.

pub mod kmeans;
pub mod text;
pub mod vq;

pub use kmeans::{audio_detokenize, kmeans_assign, kmeans_fit, Codebook, KmeansConfig, KmeansFit};
pub use text::{TextVocab, BOS, EOS, N_SPECIALS, PAD, UNK};
pub use vq::{extract_patches, vq_detokenize, vq_fit, vq_tokenize, VqConfig, VqModel, VqTrainReport};
