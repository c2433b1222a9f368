//! K-means audio frame tokenizer.
//!
//! Frames are fixed-dimension vectors; the fitted [`Codebook`] maps a frame
//! to the index of its nearest centroid (ties to the lowest index) and maps
//! a token back to the centroid itself. Fitting is k-means++ seeding plus
//! Lloyd iterations with deterministic empty-cluster repair: an empty
//! cluster's centroid is reassigned to the frame currently farthest from its
//! own centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{nearest_row, sq_dist};
use crate::num::Scalar;

/// A set of `k` pairwise-distinct centroids in `dim`-dimensional space.
#[derive(Debug, Clone)]
pub struct Codebook<S: Scalar = f32> {
    k: usize,
    dim: usize,
    centroids: Vec<S>, // flat, row-major [k × dim]
}

impl<S: Scalar> Codebook<S> {
    pub fn new(k: usize, dim: usize, centroids: Vec<S>) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::Dim {
                op: "codebook",
                msg: format!("k={} dim={} with {} values", k, dim, centroids.len()),
            });
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if centroids[i * dim..(i + 1) * dim] == centroids[j * dim..(j + 1) * dim] {
                    return Err(Error::Infeasible(format!(
                        "centroids {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(Codebook { k, dim, centroids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, j: usize) -> Result<&[S]> {
        if j >= self.k {
            return Err(Error::IdRange { what: "codebook token", id: j, lo: 0, hi: self.k });
        }
        Ok(&self.centroids[j * self.dim..(j + 1) * self.dim])
    }

    /// Flat row-major centroid matrix.
    pub fn flat(&self) -> &[S] {
        &self.centroids
    }

    pub fn cast<T: Scalar>(&self) -> Codebook<T> {
        Codebook {
            k: self.k,
            dim: self.dim,
            centroids: self.centroids.iter().map(|v| T::of_f64(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig { max_iters: 100, tol: 1e-6, seed: 0 }
    }
}

/// Fit result: the codebook plus the inertia trace (one value per Lloyd
/// iteration, measured after assignment).
#[derive(Debug)]
pub struct KmeansFit<S: Scalar> {
    pub codebook: Codebook<S>,
    pub inertia: Vec<f64>,
}

/// Fit `k` centroids on `frames` (flat, `dim` values per frame).
pub fn kmeans_fit<S: Scalar>(
    frames: &[S],
    dim: usize,
    k: usize,
    cfg: &KmeansConfig,
) -> Result<KmeansFit<S>> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(Error::Dim {
            op: "kmeans_fit",
            msg: format!("{} values is not a multiple of dim {}", frames.len(), dim),
        });
    }
    let n = frames.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Infeasible(format!("k={} with only {} frames", k, n)));
    }
    let distinct = count_distinct(frames, dim);
    if distinct < k {
        return Err(Error::Infeasible(format!(
            "k={} exceeds {} distinct frames",
            k, distinct
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_plus_plus(frames, dim, n, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut inertia_trace = Vec::new();

    for _ in 0..cfg.max_iters {
        // Assign, tracking inertia and each frame's distance to its centroid.
        let mut inertia = 0.0f64;
        let mut frame_dist = vec![0.0f64; n];
        for i in 0..n {
            let f = &frames[i * dim..(i + 1) * dim];
            let j = nearest_row(&centroids, dim, f);
            assignment[i] = j;
            let d = sq_dist(&centroids[j * dim..(j + 1) * dim], f).as_f64();
            frame_dist[i] = d;
            inertia += d;
        }
        inertia_trace.push(inertia);

        // Update to cluster means.
        let mut sums = vec![S::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignment[i];
            counts[j] += 1;
            for (s, &v) in sums[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(&frames[i * dim..(i + 1) * dim])
            {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                let cnt = S::of_f64(counts[j] as f64);
                for (o, &s) in next[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..]) {
                    *o = s / cnt;
                }
            }
        }

        // Empty-cluster repair: steal the globally worst-fit frame, lowest
        // index on ties; each repair consumes its frame.
        let mut stolen = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far_i = None;
            let mut far_d = -1.0f64;
            for i in 0..n {
                if !stolen[i] && frame_dist[i] > far_d {
                    far_d = frame_dist[i];
                    far_i = Some(i);
                }
            }
            let i = far_i.expect("n >= k guarantees a frame to steal");
            stolen[i] = true;
            next[j * dim..(j + 1) * dim].copy_from_slice(&frames[i * dim..(i + 1) * dim]);
        }

        // Converged when no centroid moved more than tol (L2).
        let mut max_move = 0.0f64;
        for j in 0..k {
            let mv = sq_dist(&centroids[j * dim..(j + 1) * dim], &next[j * dim..(j + 1) * dim])
                .as_f64()
                .sqrt();
            max_move = max_move.max(mv);
        }
        centroids = next;
        if max_move < cfg.tol {
            break;
        }
    }

    // Duplicate means can only arise in degenerate ties; nudge by re-seeding
    // the later duplicate onto the worst-fit frame and let validation settle.
    for _ in 0..k {
        match find_duplicate(&centroids, dim, k) {
            None => break,
            Some(dup) => {
                let mut far_i = 0usize;
                let mut far_d = -1.0f64;
                for i in 0..n {
                    let f = &frames[i * dim..(i + 1) * dim];
                    let j = nearest_row(&centroids, dim, f);
                    let d = sq_dist(&centroids[j * dim..(j + 1) * dim], f).as_f64();
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                centroids[dup * dim..(dup + 1) * dim]
                    .copy_from_slice(&frames[far_i * dim..(far_i + 1) * dim]);
            }
        }
    }

    Ok(KmeansFit { codebook: Codebook::new(k, dim, centroids)?, inertia: inertia_trace })
}

/// Nearest-centroid token for each frame (flat input, `dim` values each).
pub fn kmeans_assign<S: Scalar>(cb: &Codebook<S>, frames: &[S]) -> Result<Vec<u32>> {
    if frames.len() % cb.dim() != 0 {
        return Err(Error::Dim {
            op: "kmeans_assign",
            msg: format!("{} values is not a multiple of dim {}", frames.len(), cb.dim()),
        });
    }
    Ok(frames
        .chunks_exact(cb.dim())
        .map(|f| nearest_row(cb.flat(), cb.dim(), f) as u32)
        .collect())
}

/// Tokens back to frames: each token becomes its centroid.
pub fn audio_detokenize<S: Scalar>(cb: &Codebook<S>, tokens: &[u32]) -> Result<Vec<Vec<S>>> {
    tokens
        .iter()
        .map(|&t| cb.centroid(t as usize).map(|c| c.to_vec()))
        .collect()
}

fn count_distinct<S: Scalar>(frames: &[S], dim: usize) -> usize {
    let n = frames.len() / dim;
    let mut distinct = 0usize;
    'outer: for i in 0..n {
        for j in 0..i {
            if frames[i * dim..(i + 1) * dim] == frames[j * dim..(j + 1) * dim] {
                continue 'outer;
            }
        }
        distinct += 1;
    }
    distinct
}

fn find_duplicate<S: Scalar>(centroids: &[S], dim: usize, k: usize) -> Option<usize> {
    for i in 0..k {
        for j in (i + 1)..k {
            if centroids[i * dim..(i + 1) * dim] == centroids[j * dim..(j + 1) * dim] {
                return Some(j);
            }
        }
    }
    None
}

/// k-means++ seeding: first centroid uniform, then D²-weighted draws.
fn seed_plus_plus<S: Scalar>(
    frames: &[S],
    dim: usize,
    n: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<S> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&frames[first * dim..(first + 1) * dim]);
    let mut d2 = vec![0.0f64; n];
    for chosen in 1..k {
        let mut total = 0.0f64;
        for i in 0..n {
            let f = &frames[i * dim..(i + 1) * dim];
            let j = nearest_row(&centroids, dim, f);
            let d = sq_dist(&centroids[j * dim..(j + 1) * dim], f).as_f64();
            d2[i] = d;
            total += d;
        }
        let pick = if total > 0.0 {
            let r: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0f64;
            let mut pick = n - 1;
            for i in 0..n {
                acc += d2[i];
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All frames coincide with chosen centroids; distinct-count
            // precondition guarantees an unused distinct frame exists.
            (0..n)
                .find(|&i| {
                    let f = &frames[i * dim..(i + 1) * dim];
                    !centroids.chunks_exact(dim).any(|c| c == f)
                })
                .unwrap_or(chosen % n)
        };
        centroids.extend_from_slice(&frames[pick * dim..(pick + 1) * dim]);
    }
    centroids
}
