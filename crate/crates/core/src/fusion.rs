//! Instance-level semantic fusion. Each instance embedding is compared with
//! the global scene embedding (zeta) and with every other instance (eta);
//! a temperature softmax over zeta + eta weights how much global context is
//! blended into each instance before scoring against the text embedding.

use crate::embed::EmbeddingVector;
use crate::error::{EngineError, Result};
use crate::grid::Grid2D;
use crate::seg::SegmentationResult;

/// Default softmax temperature for fusion weights.
pub const DEFAULT_TAU: f64 = 0.07;

/// Confidence value painted on background pixels.
pub const BACKGROUND_CONFIDENCE: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub tau: f64,
    /// When true (the default), eta averages the pairwise similarities over
    /// the full instance count rather than the number of actual pairs.
    pub literal_pair_divisor: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { tau: DEFAULT_TAU, literal_pair_divisor: true }
    }
}

/// Cosine similarity; robust to non-unit inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Gradients of `grad * cosine(a, b)` with respect to a and b.
pub fn cosine_backward(a: &[f64], b: &[f64], grad: f64) -> (Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let c = dot / (na * nb);
    let da: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(ai, bi)| grad * (bi / (na * nb) - c * ai / (na * na)))
        .collect();
    let db: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(ai, bi)| grad * (ai / (na * nb) - c * bi / (nb * nb)))
        .collect();
    (da, db)
}

/// Per-instance global-agreement (zeta) and peer-agreement (eta) scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    pub zeta: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Computes zeta_i = cos(e_i, e_g) and eta_i = mean over peers of
/// cos(e_i, e_j). Pairwise sums run in fixed index order j = 0..n.
pub fn similarity_profile(
    instances: &[EmbeddingVector],
    global: &EmbeddingVector,
    config: &FusionConfig,
) -> Result<SimilarityProfile> {
    let n = instances.len();
    if n == 0 {
        return Err(EngineError::EmptyScene);
    }
    let zeta: Vec<f64> = instances.iter().map(|e| cosine(&e.values, &global.values)).collect();
    let divisor = if config.literal_pair_divisor { n as f64 } else { (n as f64 - 1.0).max(1.0) };
    let mut eta = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            if j != i {
                acc += cosine(&instances[i].values, &instances[j].values);
            }
        }
        eta[i] = acc / divisor;
    }
    Ok(SimilarityProfile { zeta, eta })
}

/// Temperature softmax over zeta + eta.
pub fn fusion_weights(profile: &SimilarityProfile, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(EngineError::Param(format!("fusion temperature must be positive, got {tau}")));
    }
    let scores: Vec<f64> = profile
        .zeta
        .iter()
        .zip(profile.eta.iter())
        .map(|(z, e)| (z + e) / tau)
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / total).collect())
}

/// Everything needed to backpropagate through one fusion pass.
#[derive(Debug, Clone)]
pub struct FusionCache {
    pub instances: Vec<Vec<f64>>,
    pub global: Vec<f64>,
    pub omega: Vec<f64>,
    pub prenorm: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
    pub fused: Vec<Vec<f64>>,
    pub config: FusionConfig,
}

/// Blends global context into each instance embedding:
/// F_i = omega_i * e_g + (1 - omega_i) * e_i, re-normalized to unit length.
pub fn fuse(
    instances: &[EmbeddingVector],
    global: &EmbeddingVector,
    config: &FusionConfig,
) -> Result<(Vec<EmbeddingVector>, FusionCache)> {
    let profile = similarity_profile(instances, global, config)?;
    let omega = fusion_weights(&profile, config.tau)?;
    let mut fused = Vec::with_capacity(instances.len());
    let mut prenorm = Vec::with_capacity(instances.len());
    let mut norms = Vec::with_capacity(instances.len());
    for (e, w) in instances.iter().zip(omega.iter()) {
        let f: Vec<f64> = e
            .values
            .iter()
            .zip(global.values.iter())
            .map(|(ei, gi)| w * gi + (1.0 - w) * ei)
            .collect();
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(EngineError::DegenerateEmbedding(
                "fused embedding collapsed to zero".into(),
            ));
        }
        let unit: Vec<f64> = f.iter().map(|x| x / norm).collect();
        fused.push(unit);
        prenorm.push(f);
        norms.push(norm);
    }
    let cache = FusionCache {
        instances: instances.iter().map(|e| e.values.clone()).collect(),
        global: global.values.clone(),
        omega,
        prenorm,
        norms,
        fused: fused.clone(),
        config: *config,
    };
    let out = fused.into_iter().map(EmbeddingVector::unit).collect();
    Ok((out, cache))
}

/// Backpropagates dL/dE_i (per fused embedding) into gradients for the
/// instance embeddings and the global embedding.
pub fn fusion_backward(cache: &FusionCache, grad_fused: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = cache.instances.len();
    let dim = cache.global.len();
    let mut grad_ins = vec![vec![0.0; dim]; n];
    let mut grad_global = vec![0.0; dim];
    let mut grad_omega = vec![0.0; n];
    // through the re-normalization and the convex blend
    for i in 0..n {
        let dot: f64 = cache.fused[i].iter().zip(grad_fused[i].iter()).map(|(a, b)| a * b).sum();
        let w = cache.omega[i];
        for a in 0..dim {
            let df = (grad_fused[i][a] - cache.fused[i][a] * dot) / cache.norms[i];
            grad_omega[i] += df * (cache.global[a] - cache.instances[i][a]);
            grad_global[a] += df * w;
            grad_ins[i][a] += df * (1.0 - w);
        }
    }
    // through the softmax: dL/dz_k = (omega_k / tau) * (dw_k - sum_j omega_j dw_j)
    let mix: f64 = cache.omega.iter().zip(grad_omega.iter()).map(|(w, g)| w * g).sum();
    let dz: Vec<f64> = cache
        .omega
        .iter()
        .zip(grad_omega.iter())
        .map(|(w, g)| w * (g - mix) / cache.config.tau)
        .collect();
    // z_i = zeta_i + eta_i
    let divisor = if cache.config.literal_pair_divisor {
        n as f64
    } else {
        (n as f64 - 1.0).max(1.0)
    };
    for i in 0..n {
        // zeta_i = cos(e_i, g)
        let (da, dg) = cosine_backward(&cache.instances[i], &cache.global, dz[i]);
        for a in 0..dim {
            grad_ins[i][a] += da[a];
            grad_global[a] += dg[a];
        }
        // eta_i = (1/divisor) * sum_{j != i} cos(e_i, e_j)
        for j in 0..n {
            if j == i {
                continue;
            }
            let (da, db) = cosine_backward(&cache.instances[i], &cache.instances[j], dz[i] / divisor);
            for a in 0..dim {
                grad_ins[i][a] += da[a];
                grad_ins[j][a] += db[a];
            }
        }
    }
    (grad_ins, grad_global)
}

/// Per-instance text-agreement scores and the painted confidence map.
#[derive(Debug, Clone)]
pub struct ConfidenceMap {
    pub map: Grid2D,
    pub scores: Vec<f64>,
}

/// Paints s_i = cos(E_i, e_text) over each instance mask; background pixels
/// get [`BACKGROUND_CONFIDENCE`]. Later instances overwrite earlier ones on
/// (impossible for disjoint masks) overlaps.
pub fn confidence_map(
    seg: &SegmentationResult,
    fused: &[EmbeddingVector],
    text: &EmbeddingVector,
) -> Result<ConfidenceMap> {
    if seg.instances.len() != fused.len() {
        return Err(EngineError::Shape(format!(
            "segmentation has {} instances but {} fused embeddings were given",
            seg.instances.len(),
            fused.len()
        )));
    }
    let mut map = Grid2D::zeros(seg.height, seg.width, 1);
    for v in map.data.iter_mut() {
        *v = BACKGROUND_CONFIDENCE;
    }
    let mut scores = Vec::with_capacity(fused.len());
    for (inst, e) in seg.instances.iter().zip(fused.iter()) {
        let s = cosine(&e.values, &text.values);
        scores.push(s);
        for (r, c) in inst.pixels() {
            map.set(r, c, 0, s);
        }
    }
    Ok(ConfidenceMap { map, scores })
}

/// Backpropagates a gradient image over the confidence map into gradients
/// for the fused embeddings and the text embedding.
pub fn confidence_backward(
    seg: &SegmentationResult,
    fused: &[EmbeddingVector],
    text: &EmbeddingVector,
    grad_map: &Grid2D,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dim = text.values.len();
    let mut grad_fused = vec![vec![0.0; dim]; fused.len()];
    let mut grad_text = vec![0.0; dim];
    for (i, inst) in seg.instances.iter().enumerate() {
        let mut ds = 0.0;
        for (r, c) in inst.pixels() {
            ds += grad_map.get(r, c, 0);
        }
        if ds == 0.0 {
            continue;
        }
        let (de, dt) = cosine_backward(&fused[i].values, &text.values, ds);
        for a in 0..dim {
            grad_fused[i][a] += de[a];
            grad_text[a] += dt[a];
        }
    }
    (grad_fused, grad_text)
}
