//! Vector-quantized patch tokenizer for images.
//!
//! An image is cut into non-overlapping `patch_size × patch_size` patches
//! (row-major over the patch grid). Each flattened patch is passed through a
//! learned affine encoder, snapped to its nearest codebook row, and the
//! token is that row's index. De-tokenization decodes each centroid through
//! the affine decoder and reassembles the patch grid.
//!
//! Training minimizes reconstruction error plus the usual two quantization
//! terms — `‖sg(z) − e‖²` pulls codebook rows toward encoder outputs and
//! `commit_weight · ‖z − sg(e)‖²` pulls encoder outputs toward their rows —
//! with the straight-through estimator carrying reconstruction gradient
//! across the snap. Encoder and decoder start near identity and the
//! codebook is seeded from encoded training patches, so round-tripping is
//! accurate from the first step and training only tightens it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::ImageGrid;
use crate::kernels::nearest_row;
use crate::num::Scalar;
use crate::optim::{AdamConfig, AdamW};
use crate::tensor::Tensor;
use crate::tokenizers::kmeans::Codebook;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub patch_size: usize,
    pub latent_dim: usize,
    pub k: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub commit_weight: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            patch_size: 4,
            latent_dim: 16,
            k: 64,
            epochs: 20,
            batch: 64,
            lr: 1e-3,
            commit_weight: 0.25,
            seed: 0,
        }
    }
}

/// Trained patch tokenizer: affine encoder/decoder plus a codebook of
/// encoder-space centroids.
///
/// Cloning shares tensor storage (tensors are reference-counted); the
/// tokenizer is read-only after fitting, so shared clones are safe.
#[derive(Clone)]
pub struct VqModel<S: Scalar = f32> {
    pub cfg: VqConfig,
    pub enc_w: Tensor<S>, // [patch_size² × latent_dim]
    pub enc_b: Tensor<S>, // [latent_dim]
    pub dec_w: Tensor<S>, // [latent_dim × patch_size²]
    pub dec_b: Tensor<S>, // [patch_size²]
    pub codebook: Codebook<S>,
}

/// Per-epoch mean reconstruction MSE, in training order.
pub struct VqTrainReport {
    pub recon_mse: Vec<f64>,
}

impl<S: Scalar> VqModel<S> {
    pub fn from_parts(
        cfg: VqConfig,
        enc_w: Tensor<S>,
        enc_b: Tensor<S>,
        dec_w: Tensor<S>,
        dec_b: Tensor<S>,
        codebook: Codebook<S>,
    ) -> Result<Self> {
        let p2 = cfg.patch_size * cfg.patch_size;
        let d = cfg.latent_dim;
        let want = [
            (enc_w.shape(), vec![p2, d]),
            (enc_b.shape(), vec![d]),
            (dec_w.shape(), vec![d, p2]),
            (dec_b.shape(), vec![p2]),
        ];
        for (got, want) in want {
            if got != want {
                return Err(Error::Dim {
                    op: "vq_model",
                    msg: format!("parameter shape {:?}, expected {:?}", got, want),
                });
            }
        }
        if codebook.k() != cfg.k || codebook.dim() != d {
            return Err(Error::Dim {
                op: "vq_model",
                msg: format!(
                    "codebook {}×{}, expected {}×{}",
                    codebook.k(),
                    codebook.dim(),
                    cfg.k,
                    d
                ),
            });
        }
        Ok(VqModel { cfg, enc_w, enc_b, dec_w, dec_b, codebook })
    }

    /// Encode flat patches `[n × patch_size²]` to latents `[n × latent_dim]`.
    fn encode_flat(&self, patches: &[S]) -> Vec<S> {
        affine_rows(patches, &self.enc_w, &self.enc_b)
    }

    /// Decode latents `[n × latent_dim]` to flat patches `[n × patch_size²]`.
    fn decode_flat(&self, latents: &[S]) -> Vec<S> {
        affine_rows(latents, &self.dec_w, &self.dec_b)
    }
}

/// `y = x·W + b` over row-major `x` with per-row width `W.shape()[0]`.
fn affine_rows<S: Scalar>(x: &[S], w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let n = x.len() / din;
    let wd = w.data();
    let bd = b.data();
    let mut y = vec![S::zero(); n * dout];
    for r in 0..n {
        let xo = r * din;
        let yo = r * dout;
        y[yo..yo + dout].copy_from_slice(&bd);
        for i in 0..din {
            let xv = x[xo + i];
            let wrow = &wd[i * dout..(i + 1) * dout];
            for (yv, &wv) in y[yo..yo + dout].iter_mut().zip(wrow) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Cut a grid into flat row-major patches. Both grid dimensions must be
/// multiples of `patch_size`.
pub fn extract_patches(grid: &ImageGrid, patch_size: usize) -> Result<Vec<f32>> {
    if patch_size == 0 || grid.h % patch_size != 0 || grid.w % patch_size != 0 {
        return Err(Error::Dim {
            op: "extract_patches",
            msg: format!("{}x{} grid with patch size {}", grid.h, grid.w, patch_size),
        });
    }
    let (gh, gw) = (grid.h / patch_size, grid.w / patch_size);
    let mut out = Vec::with_capacity(grid.h * grid.w);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    out.push(grid.get(pr * patch_size + dy, pc * patch_size + dx));
                }
            }
        }
    }
    Ok(out)
}

/// Fit a tokenizer on training patches (flat, `patch_size²` values each).
pub fn vq_fit<S: Scalar>(patches: &[S], cfg: &VqConfig) -> Result<(VqModel<S>, VqTrainReport)> {
    let p2 = cfg.patch_size * cfg.patch_size;
    if p2 == 0 || cfg.latent_dim == 0 || cfg.k == 0 {
        return Err(Error::Config("patch_size, latent_dim, k must be positive".into()));
    }
    if patches.is_empty() || patches.len() % p2 != 0 {
        return Err(Error::Dim {
            op: "vq_fit",
            msg: format!("{} values is not a positive multiple of {}", patches.len(), p2),
        });
    }
    let n = patches.len() / p2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Near-identity encoder/decoder: partial identity plus small noise, so
    // decode(encode(x)) ≈ x before any training.
    let enc_w = near_identity::<S>(p2, cfg.latent_dim, &mut rng);
    let enc_b = Tensor::zeros(&[cfg.latent_dim]);
    let dec_w = near_identity::<S>(cfg.latent_dim, p2, &mut rng);
    let dec_b = Tensor::zeros(&[p2]);
    for t in [&enc_w, &enc_b, &dec_w, &dec_b] {
        t.set_requires_grad(true);
    }

    // Codebook seeded from the first occurrence of each distinct encoded
    // patch; shortfall filled with small random rows (kept distinct).
    let latents = affine_rows(patches, &enc_w, &enc_b);
    let d = cfg.latent_dim;
    let mut rows: Vec<S> = Vec::with_capacity(cfg.k * d);
    let mut chosen = 0usize;
    'scan: for i in 0..n {
        if chosen == cfg.k {
            break;
        }
        let cand = &latents[i * d..(i + 1) * d];
        for j in 0..chosen {
            if &rows[j * d..(j + 1) * d] == cand {
                continue 'scan;
            }
        }
        rows.extend_from_slice(cand);
        chosen += 1;
    }
    while chosen < cfg.k {
        let cand: Vec<S> =
            (0..d).map(|_| S::of_f64(rng.gen_range(-0.05..0.05))).collect();
        if (0..chosen).any(|j| rows[j * d..(j + 1) * d] == cand[..]) {
            continue;
        }
        rows.extend_from_slice(&cand);
        chosen += 1;
    }
    let code = Tensor::from_data(&[cfg.k, d], rows)?;
    code.set_requires_grad(true);

    // Optimize; weight decay stays off so unused codebook rows hold still.
    let params = vec![
        enc_w.clone(),
        enc_b.clone(),
        dec_w.clone(),
        dec_b.clone(),
        code.clone(),
    ];
    let mut opt = AdamW::new(
        AdamConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() },
        params,
    );

    let mut order: Vec<usize> = (0..n).collect();
    let mut report = VqTrainReport { recon_mse: Vec::with_capacity(cfg.epochs) };
    let batch = cfg.batch.max(1);
    for _ in 0..cfg.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut mse_sum = 0.0f64;
        let mut mse_n = 0usize;
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let mut x_data = Vec::with_capacity(b * p2);
            for &i in chunk {
                x_data.extend_from_slice(&patches[i * p2..(i + 1) * p2]);
            }
            let x = Tensor::from_data(&[b, p2], x_data)?;

            let mut g = Graph::recording();
            let zx = g.matmul(&x, &enc_w)?;
            let z = g.add_bias(&zx, &enc_b)?;
            let (ids, e_vals) = {
                let zd = z.data();
                let cd = code.data();
                let mut ids = Vec::with_capacity(b);
                let mut e_vals = Vec::with_capacity(b * d);
                for r in 0..b {
                    let j = nearest_row(&cd, d, &zd[r * d..(r + 1) * d]);
                    ids.push(j);
                    e_vals.extend_from_slice(&cd[j * d..(j + 1) * d]);
                }
                (ids, e_vals)
            };

            // Reconstruction through the straight-through snap.
            let q = g.straight_through(&z, &e_vals)?;
            let rq = g.matmul(&q, &dec_w)?;
            let recon = g.add_bias(&rq, &dec_b)?;
            let rdiff = g.sub(&recon, &x)?;
            let rsq = g.mul(&rdiff, &rdiff)?;
            let loss_recon = g.mean_all(&rsq)?;

            // ‖sg(z) − e‖²: gradient reaches only the codebook rows.
            let z_const = Tensor::from_data(&[b, d], z.to_vec())?;
            let e = g.gather_rows(&code, &ids)?;
            let cdiff = g.sub(&z_const, &e)?;
            let csq = g.mul(&cdiff, &cdiff)?;
            let loss_code = g.mean_all(&csq)?;

            // commit_weight · ‖z − sg(e)‖²: gradient reaches only the encoder.
            let e_const = Tensor::from_data(&[b, d], e_vals)?;
            let mdiff = g.sub(&z, &e_const)?;
            let msq = g.mul(&mdiff, &mdiff)?;
            let mmean = g.mean_all(&msq)?;
            let loss_commit = g.scale(&mmean, S::of_f64(cfg.commit_weight))?;

            let partial = g.add(&loss_recon, &loss_code)?;
            let loss = g.add(&partial, &loss_commit)?;
            opt.zero_grads();
            g.backward(&loss)?;
            opt.step();

            mse_sum += loss_recon.to_vec()[0].as_f64() * b as f64;
            mse_n += b;
        }
        report.recon_mse.push(mse_sum / mse_n as f64);
    }

    // Freeze and package. Coincident codebook rows (possible only in
    // degenerate data) get a deterministic nudge before validation.
    for t in [&enc_w, &enc_b, &dec_w, &dec_b, &code] {
        t.set_requires_grad(false);
    }
    let mut final_rows = code.to_vec();
    for pass in 0..cfg.k {
        let mut bumped = false;
        for i in 0..cfg.k {
            for j in (i + 1)..cfg.k {
                if final_rows[i * d..(i + 1) * d] == final_rows[j * d..(j + 1) * d] {
                    final_rows[j * d] += S::of_f64(1e-5 * (pass + 1) as f64);
                    bumped = true;
                }
            }
        }
        if !bumped {
            break;
        }
    }
    let codebook = Codebook::new(cfg.k, d, final_rows)?;
    let model = VqModel::from_parts(*cfg, enc_w, enc_b, dec_w, dec_b, codebook)?;
    Ok((model, report))
}

fn near_identity<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let mut data = vec![S::zero(); rows * cols];
    for (i, v) in data.iter_mut().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let base = if r == c { 1.0 } else { 0.0 };
        *v = S::of_f64(base + rng.gen_range(-0.02..0.02));
    }
    Tensor::from_data(&[rows, cols], data).expect("sized by construction")
}

/// Tokenize a grid: one token per patch, row-major over the patch grid.
pub fn vq_tokenize<S: Scalar>(model: &VqModel<S>, grid: &ImageGrid) -> Result<Vec<u32>> {
    let patches32 = extract_patches(grid, model.cfg.patch_size)?;
    let patches: Vec<S> = patches32.iter().map(|&v| S::of_f32(v)).collect();
    let latents = model.encode_flat(&patches);
    let d = model.cfg.latent_dim;
    Ok(latents
        .chunks_exact(d)
        .map(|z| nearest_row(model.codebook.flat(), d, z) as u32)
        .collect())
}

/// De-tokenize a square patch grid back to an image, pixels clamped to
/// `[0, 1]`. The token count must be a perfect square.
pub fn vq_detokenize<S: Scalar>(model: &VqModel<S>, tokens: &[u32]) -> Result<ImageGrid> {
    let g = (tokens.len() as f64).sqrt().round() as usize;
    if g == 0 || g * g != tokens.len() {
        return Err(Error::Dim {
            op: "vq_detokenize",
            msg: format!("{} tokens is not a positive perfect square", tokens.len()),
        });
    }
    let p = model.cfg.patch_size;
    let d = model.cfg.latent_dim;
    let mut latents = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        latents.extend_from_slice(model.codebook.centroid(t as usize)?);
    }
    let patches = model.decode_flat(&latents);
    let mut grid = ImageGrid::zeros(g * p, g * p);
    for (pi, patch) in patches.chunks_exact(p * p).enumerate() {
        let (pr, pc) = (pi / g, pi % g);
        for dy in 0..p {
            for dx in 0..p {
                let v = patch[dy * p + dx].as_f64().clamp(0.0, 1.0) as f32;
                grid.set(pr * p + dy, pc * p + dx, v);
            }
        }
    }
    Ok(grid)
}
