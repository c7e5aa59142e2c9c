//! Joint visual/text embedding providers. The visual path is a hand-designed
//! 19-dim feature extractor followed by a layernorm and a learned linear
//! projection; the text path is a one-hot attribute vector through a linear
//! projection with an extra FFN projection bias. The tunable subsets used by
//! few-shot fine-tuning are expressed as parameter partitions.

use crate::error::{EngineError, Result};
use crate::grid::Grid2D;
use crate::scene::{palette_index, ObjectKind, PALETTE};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Embedding dimensionality.
pub const EMB_DIM: usize = 32;
/// Visual feature length: 12 palette histogram bins + 7 shape descriptors.
pub const F_VIS: usize = 19;
/// Text feature length: 12 color slots + 5 kind slots + 2 qualifier slots.
pub const F_TXT: usize = 19;

pub const N_COLORS: usize = 12;
pub const N_KINDS: usize = 5;
pub const N_QUALIFIERS: usize = 2;

const LN_EPS: f64 = 1e-5;

/// A d-dimensional joint visual/text vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub dim: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn unit(values: Vec<f64>) -> Self {
        EmbeddingVector { dim: values.len(), values, normalized: true }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Parsed text query with the attributes recognized by the closed grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct TextQuery {
    pub raw: String,
    pub color: Option<usize>,
    pub noun: Option<ObjectKind>,
    pub plural: bool,
    pub pile: bool,
}

impl TextQuery {
    /// Extracts color/kind/qualifier attributes from a free-form query.
    pub fn parse(raw: &str) -> Result<TextQuery> {
        let mut color = None;
        let mut noun = None;
        let mut plural = false;
        let mut pile = false;
        for tok in raw.split_whitespace() {
            let tok = tok.trim_matches(|c: char| !c.is_alphanumeric());
            if let Some(i) = palette_index(tok) {
                color = Some(i);
                continue;
            }
            let (kind, is_plural) = match tok {
                "block" => (Some(ObjectKind::Block), false),
                "blocks" => (Some(ObjectKind::Block), true),
                "ball" => (Some(ObjectKind::Ball), false),
                "balls" => (Some(ObjectKind::Ball), true),
                "bowl" => (Some(ObjectKind::Bowl), false),
                "bowls" => (Some(ObjectKind::Bowl), true),
                "box" => (Some(ObjectKind::Box), false),
                "boxes" => (Some(ObjectKind::Box), true),
                "zone" => (Some(ObjectKind::Zone), false),
                "zones" => (Some(ObjectKind::Zone), true),
                "pile" => {
                    pile = true;
                    (None, false)
                }
                _ => (None, false),
            };
            if let Some(k) = kind {
                noun = Some(k);
                plural = is_plural;
            }
        }
        if color.is_none() && noun.is_none() {
            return Err(EngineError::Parse(format!(
                "no recognized color or object noun in '{raw}'"
            )));
        }
        Ok(TextQuery { raw: raw.to_string(), color, noun, plural, pile })
    }

    fn kind_slot(kind: ObjectKind) -> usize {
        match kind {
            ObjectKind::Block => 0,
            ObjectKind::Ball => 1,
            ObjectKind::Bowl => 2,
            ObjectKind::Box => 3,
            ObjectKind::Zone => 4,
        }
    }

    /// One-hot attribute vector of length [`F_TXT`].
    pub fn onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; F_TXT];
        if let Some(c) = self.color {
            v[c] = 1.0;
        }
        if let Some(k) = self.noun {
            v[N_COLORS + Self::kind_slot(k)] = 1.0;
        }
        if self.plural {
            v[N_COLORS + N_KINDS] = 1.0;
        }
        if self.pile {
            v[N_COLORS + N_KINDS + 1] = 1.0;
        }
        v
    }
}

/// Encoder parameter slots, as selectable units for partition-restricted
/// fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSlot {
    VisualProjWeight,
    VisualProjBias,
    VisualNormGain,
    VisualNormBias,
    TextProjWeight,
    TextProjBias,
    TextFfnBias,
}

impl ParamSlot {
    pub const ALL: [ParamSlot; 7] = [
        ParamSlot::VisualProjWeight,
        ParamSlot::VisualProjBias,
        ParamSlot::VisualNormGain,
        ParamSlot::VisualNormBias,
        ParamSlot::TextProjWeight,
        ParamSlot::TextProjBias,
        ParamSlot::TextFfnBias,
    ];
}

/// Fine-tuning policy names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionPolicy {
    None,
    TextFfnBiasOnly,
    VisualLayernormOnly,
    Both,
    All,
}

impl PartitionPolicy {
    pub fn parse(s: &str) -> Result<PartitionPolicy> {
        match s {
            "none" => Ok(PartitionPolicy::None),
            "text_ffn_bias_only" => Ok(PartitionPolicy::TextFfnBiasOnly),
            "visual_layernorm_only" => Ok(PartitionPolicy::VisualLayernormOnly),
            "both" => Ok(PartitionPolicy::Both),
            "all" => Ok(PartitionPolicy::All),
            other => Err(EngineError::Param(format!("unknown partition policy '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PartitionPolicy::None => "none",
            PartitionPolicy::TextFfnBiasOnly => "text_ffn_bias_only",
            PartitionPolicy::VisualLayernormOnly => "visual_layernorm_only",
            PartitionPolicy::Both => "both",
            PartitionPolicy::All => "all",
        }
    }
}

/// A policy name resolved to the concrete set of tunable slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPartition {
    pub policy: PartitionPolicy,
    pub slots: Vec<ParamSlot>,
}

pub fn resolve_partition(policy: PartitionPolicy) -> ParameterPartition {
    let slots = match policy {
        PartitionPolicy::None => vec![],
        PartitionPolicy::TextFfnBiasOnly => vec![ParamSlot::TextFfnBias],
        PartitionPolicy::VisualLayernormOnly => {
            vec![ParamSlot::VisualNormGain, ParamSlot::VisualNormBias]
        }
        PartitionPolicy::Both => vec![
            ParamSlot::TextFfnBias,
            ParamSlot::VisualNormGain,
            ParamSlot::VisualNormBias,
        ],
        PartitionPolicy::All => ParamSlot::ALL.to_vec(),
    };
    ParameterPartition { policy, slots }
}

impl ParameterPartition {
    pub fn allows(&self, slot: ParamSlot) -> bool {
        self.slots.contains(&slot)
    }
}

/// All encoder parameters. Projection weights are row-major (dim x features).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub visual_proj: Vec<f64>,
    pub visual_proj_bias: Vec<f64>,
    pub visual_norm_gain: Vec<f64>,
    pub visual_norm_bias: Vec<f64>,
    pub text_proj: Vec<f64>,
    pub text_proj_bias: Vec<f64>,
    pub ffn_proj_bias: Vec<f64>,
}

/// Gradient accumulator shaped like [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub visual_proj: Vec<f64>,
    pub visual_proj_bias: Vec<f64>,
    pub visual_norm_gain: Vec<f64>,
    pub visual_norm_bias: Vec<f64>,
    pub text_proj: Vec<f64>,
    pub text_proj_bias: Vec<f64>,
    pub ffn_proj_bias: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros() -> Self {
        EncoderGrads {
            visual_proj: vec![0.0; EMB_DIM * F_VIS],
            visual_proj_bias: vec![0.0; EMB_DIM],
            visual_norm_gain: vec![0.0; F_VIS],
            visual_norm_bias: vec![0.0; F_VIS],
            text_proj: vec![0.0; EMB_DIM * F_TXT],
            text_proj_bias: vec![0.0; EMB_DIM],
            ffn_proj_bias: vec![0.0; EMB_DIM],
        }
    }

    pub fn accumulate(&mut self, other: &EncoderGrads) {
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 7] = [
            (&mut self.visual_proj, &other.visual_proj),
            (&mut self.visual_proj_bias, &other.visual_proj_bias),
            (&mut self.visual_norm_gain, &other.visual_norm_gain),
            (&mut self.visual_norm_bias, &other.visual_norm_bias),
            (&mut self.text_proj, &other.text_proj),
            (&mut self.text_proj_bias, &other.text_proj_bias),
            (&mut self.ffn_proj_bias, &other.ffn_proj_bias),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for v in [
            &mut self.visual_proj,
            &mut self.visual_proj_bias,
            &mut self.visual_norm_gain,
            &mut self.visual_norm_bias,
            &mut self.text_proj,
            &mut self.text_proj_bias,
            &mut self.ffn_proj_bias,
        ] {
            for x in v.iter_mut() {
                *x *= f;
            }
        }
    }
}

impl EncoderParams {
    /// Oracle-aligned initialization: projection rows map color/kind slots of
    /// the text one-hot onto the matching histogram/shape feature directions,
    /// plus small seeded uniform noise.
    pub fn oracle_aligned(seed: u64) -> EncoderParams {
        let mut p = EncoderParams {
            visual_proj: vec![0.0; EMB_DIM * F_VIS],
            visual_proj_bias: vec![0.0; EMB_DIM],
            visual_norm_gain: vec![1.0; F_VIS],
            visual_norm_bias: vec![0.0; F_VIS],
            text_proj: vec![0.0; EMB_DIM * F_TXT],
            text_proj_bias: vec![0.0; EMB_DIM],
            ffn_proj_bias: vec![0.0; EMB_DIM],
        };
        // Text: color slot c -> axis c, kind slot k -> axis 12+k, qualifiers
        // onto the two axes after the kinds.
        for c in 0..N_COLORS {
            p.text_proj[c * F_TXT + c] = 1.0;
        }
        for k in 0..N_KINDS {
            p.text_proj[(N_COLORS + k) * F_TXT + N_COLORS + k] = 0.5;
        }
        for q in 0..N_QUALIFIERS {
            p.text_proj[(N_COLORS + N_KINDS + q) * F_TXT + N_COLORS + N_KINDS + q] = 0.1;
        }
        // Visual: histogram bin c -> axis c.
        for c in 0..N_COLORS {
            p.visual_proj[c * F_VIS + c] = 1.0;
        }
        // Kind axes match centered unit prototypes of each kind's shape stats.
        let protos = kind_shape_prototypes();
        for (k, proto) in protos.iter().enumerate() {
            for (f, w) in proto.iter().enumerate() {
                p.visual_proj[(N_COLORS + k) * F_VIS + N_COLORS + f] = 0.5 * w;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0E11_C0DE);
        for w in p.visual_proj.iter_mut().chain(p.text_proj.iter_mut()) {
            *w += rng.gen_range(-0.01..0.01);
        }
        p
    }

    /// Adds seeded uniform noise to the projection matrices and biases,
    /// used to build degraded starting points for few-shot training runs.
    pub fn perturbed(&self, amplitude: f64, seed: u64) -> EncoderParams {
        let mut p = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E27_B2BD);
        for w in p
            .visual_proj
            .iter_mut()
            .chain(p.text_proj.iter_mut())
            .chain(p.visual_proj_bias.iter_mut())
            .chain(p.text_proj_bias.iter_mut())
        {
            *w += rng.gen_range(-amplitude..amplitude);
        }
        p
    }

    pub fn slot_mut(&mut self, slot: ParamSlot) -> &mut Vec<f64> {
        match slot {
            ParamSlot::VisualProjWeight => &mut self.visual_proj,
            ParamSlot::VisualProjBias => &mut self.visual_proj_bias,
            ParamSlot::VisualNormGain => &mut self.visual_norm_gain,
            ParamSlot::VisualNormBias => &mut self.visual_norm_bias,
            ParamSlot::TextProjWeight => &mut self.text_proj,
            ParamSlot::TextProjBias => &mut self.text_proj_bias,
            ParamSlot::TextFfnBias => &mut self.ffn_proj_bias,
        }
    }

    pub fn slot(&self, slot: ParamSlot) -> &Vec<f64> {
        match slot {
            ParamSlot::VisualProjWeight => &self.visual_proj,
            ParamSlot::VisualProjBias => &self.visual_proj_bias,
            ParamSlot::VisualNormGain => &self.visual_norm_gain,
            ParamSlot::VisualNormBias => &self.visual_norm_bias,
            ParamSlot::TextProjWeight => &self.text_proj,
            ParamSlot::TextProjBias => &self.text_proj_bias,
            ParamSlot::TextFfnBias => &self.ffn_proj_bias,
        }
    }

    fn grad_slot(grads: &EncoderGrads, slot: ParamSlot) -> &Vec<f64> {
        match slot {
            ParamSlot::VisualProjWeight => &grads.visual_proj,
            ParamSlot::VisualProjBias => &grads.visual_proj_bias,
            ParamSlot::VisualNormGain => &grads.visual_norm_gain,
            ParamSlot::VisualNormBias => &grads.visual_norm_bias,
            ParamSlot::TextProjWeight => &grads.text_proj,
            ParamSlot::TextProjBias => &grads.text_proj_bias,
            ParamSlot::TextFfnBias => &grads.ffn_proj_bias,
        }
    }

    /// Gradient step restricted to the slots the partition permits.
    pub fn apply_update(&mut self, grads: &EncoderGrads, lr: f64, partition: &ParameterPartition) {
        for slot in ParamSlot::ALL {
            if !partition.allows(slot) {
                continue;
            }
            let g = Self::grad_slot(grads, slot).clone();
            let p = self.slot_mut(slot);
            for (pv, gv) in p.iter_mut().zip(g.iter()) {
                *pv -= lr * gv;
            }
        }
    }
}

/// Builds the centered, unit-normalized shape-stat prototype of each kind by
/// running the canonical stencil through the real render/segment/crop path.
fn kind_shape_prototypes() -> Vec<Vec<f64>> {
    use crate::scene::{render, Pose, Scene, SceneObject, BACKGROUND};
    use crate::seg::{crop, segment, DEFAULT_MIN_AREA};
    let kinds = [
        ObjectKind::Block,
        ObjectKind::Ball,
        ObjectKind::Bowl,
        ObjectKind::Box,
        ObjectKind::Zone,
    ];
    let mut raw: Vec<Vec<f64>> = Vec::new();
    for kind in kinds {
        let st = kind.stencil();
        let g = st.side + 10;
        let scene = Scene {
            grid_h: g,
            grid_w: g,
            background: BACKGROUND,
            objects: vec![SceneObject {
                id: 1,
                kind,
                color: "red",
                pose: Pose { u: 5, v: 5, theta: 0.0 },
                footprint: st,
            }],
            rng_seed: 0,
        };
        let obs = render(&scene);
        let seg = segment(&obs, [0.0, 0.0, 0.0], DEFAULT_MIN_AREA).expect("prototype seg");
        let cr = crop(&obs, &seg.instances[0], 1);
        let feat = featurize_visual(&cr);
        let ln = layernorm(&feat, &vec![1.0; F_VIS], &vec![0.0; F_VIS]).0;
        raw.push(ln[N_COLORS..].to_vec());
    }
    let n = raw.len() as f64;
    let mean: Vec<f64> = (0..F_VIS - N_COLORS)
        .map(|f| raw.iter().map(|p| p[f]).sum::<f64>() / n)
        .collect();
    raw.iter()
        .map(|p| {
            let centered: Vec<f64> = p.iter().zip(mean.iter()).map(|(a, m)| a - m).collect();
            let nrm = centered.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            centered.iter().map(|v| v / nrm).collect()
        })
        .collect()
}

/// Raw 19-dim visual feature vector: palette-bin color histogram over
/// non-zero pixels plus shape descriptors of the occupancy mask.
pub fn featurize_visual(crop: &Grid2D) -> Vec<f64> {
    let mut feat = vec![0.0; F_VIS];
    let (h, w) = (crop.height, crop.width);
    let mut px: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let rgb = [crop.get(r, c, 0), crop.get(r, c, 1), crop.get(r, c, 2)];
            if rgb == [0.0, 0.0, 0.0] {
                continue;
            }
            px.push((r, c));
            // nearest palette bin
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, p) in PALETTE.iter().enumerate() {
                let d: f64 = (0..3)
                    .map(|k| {
                        let diff = rgb[k] - p.rgb[k] as f64 / 255.0;
                        diff * diff
                    })
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            feat[best] += 1.0;
        }
    }
    let n = px.len();
    if n == 0 {
        return feat; // all-zero vector for an empty crop
    }
    for f in feat.iter_mut().take(N_COLORS) {
        *f /= n as f64;
    }
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut sr = 0.0;
    let mut sc = 0.0;
    for &(r, c) in &px {
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
        sr += r as f64;
        sc += c as f64;
    }
    let (bh, bw) = ((r1 - r0 + 1) as f64, (c1 - c0 + 1) as f64);
    let (mr, mc) = (sr / n as f64, sc / n as f64);
    let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
    for &(r, c) in &px {
        let dr = r as f64 - mr;
        let dc = c as f64 - mc;
        mu20 += dr * dr;
        mu02 += dc * dc;
        mu11 += dr * dc;
    }
    mu20 /= n as f64;
    mu02 /= n as f64;
    mu11 /= n as f64;
    feat[12] = n as f64 / (h * w) as f64; // area fraction
    feat[13] = bh / bw; // aspect ratio
    feat[14] = n as f64 / (bh * bw); // fill ratio
    feat[15] = mu20;
    feat[16] = mu02;
    // orientation folded to (sin 2theta, cos 2theta) of the principal axis
    let m = (2.0 * mu11).hypot(mu20 - mu02);
    if m > 1e-9 {
        feat[17] = 2.0 * mu11 / m;
        feat[18] = (mu20 - mu02) / m;
    }
    feat
}

fn layernorm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
    let y: Vec<f64> = xhat
        .iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(xh, (g, b))| xh * g + b)
        .collect();
    (y, xhat)
}

/// Intermediates of one visual encoding, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct VisCache {
    pub xhat: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub norm: f64,
    pub e: Vec<f64>,
}

/// Intermediates of one text encoding.
#[derive(Debug, Clone)]
pub struct TextCache {
    pub onehot: Vec<f64>,
    pub t: Vec<f64>,
    pub norm: f64,
    pub e: Vec<f64>,
}

/// Visual encoder: layernorm on the raw features, linear projection, L2
/// normalization. The same path encodes instance crops and the full
/// observation (the global embedding).
pub fn encode_visual_cached(crop: &Grid2D, params: &EncoderParams) -> Result<(EmbeddingVector, VisCache)> {
    if crop.channels != 3 {
        return Err(EngineError::Shape("encode_visual expects a 3-channel crop".into()));
    }
    let feat = featurize_visual(crop);
    let (y, xhat) = layernorm(&feat, &params.visual_norm_gain, &params.visual_norm_bias);
    let mut v = params.visual_proj_bias.clone();
    for a in 0..EMB_DIM {
        let row = &params.visual_proj[a * F_VIS..(a + 1) * F_VIS];
        let mut acc = 0.0;
        for (w, yf) in row.iter().zip(y.iter()) {
            acc += w * yf;
        }
        v[a] += acc;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(EngineError::DegenerateEmbedding(
            "visual embedding has zero norm before normalization".into(),
        ));
    }
    let e: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let emb = EmbeddingVector::unit(e.clone());
    Ok((emb, VisCache { xhat, y, v, norm, e }))
}

pub fn encode_visual(crop: &Grid2D, params: &EncoderParams) -> Result<EmbeddingVector> {
    Ok(encode_visual_cached(crop, params)?.0)
}

/// Text encoder: one-hot attributes through the text projection plus the FFN
/// projection bias, L2-normalized.
pub fn encode_text_cached(query: &TextQuery, params: &EncoderParams) -> Result<(EmbeddingVector, TextCache)> {
    let onehot = query.onehot();
    let mut t = vec![0.0; EMB_DIM];
    for a in 0..EMB_DIM {
        let row = &params.text_proj[a * F_TXT..(a + 1) * F_TXT];
        let mut acc = params.text_proj_bias[a] + params.ffn_proj_bias[a];
        for (w, u) in row.iter().zip(onehot.iter()) {
            acc += w * u;
        }
        t[a] = acc;
    }
    let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(EngineError::DegenerateEmbedding(
            "text embedding has zero norm before normalization".into(),
        ));
    }
    let e: Vec<f64> = t.iter().map(|x| x / norm).collect();
    let emb = EmbeddingVector::unit(e.clone());
    Ok((emb, TextCache { onehot, t, norm, e }))
}

pub fn encode_text(query: &TextQuery, params: &EncoderParams) -> Result<EmbeddingVector> {
    Ok(encode_text_cached(query, params)?.0)
}

/// Gradient of an L2 normalization: given dL/de, returns dL/dv.
pub fn normalize_backward(v: &[f64], norm: f64, e: &[f64], grad_e: &[f64]) -> Vec<f64> {
    let dot: f64 = e.iter().zip(grad_e.iter()).map(|(a, b)| a * b).sum();
    v.iter()
        .enumerate()
        .map(|(i, _)| (grad_e[i] - e[i] * dot) / norm)
        .collect()
}

/// Backpropagates dL/de through the visual encoder into the gradient
/// accumulator. The raw features are constants, so nothing flows upstream.
pub fn visual_backward(params: &EncoderParams, cache: &VisCache, grad_e: &[f64], grads: &mut EncoderGrads) {
    let dv = normalize_backward(&cache.v, cache.norm, &cache.e, grad_e);
    let mut dy = vec![0.0; F_VIS];
    for a in 0..EMB_DIM {
        let row = &params.visual_proj[a * F_VIS..(a + 1) * F_VIS];
        grads.visual_proj_bias[a] += dv[a];
        for f in 0..F_VIS {
            grads.visual_proj[a * F_VIS + f] += dv[a] * cache.y[f];
            dy[f] += row[f] * dv[a];
        }
    }
    for f in 0..F_VIS {
        grads.visual_norm_gain[f] += dy[f] * cache.xhat[f];
        grads.visual_norm_bias[f] += dy[f];
    }
}

/// Backpropagates dL/de through the text encoder.
pub fn text_backward(_params: &EncoderParams, cache: &TextCache, grad_e: &[f64], grads: &mut EncoderGrads) {
    let dt = normalize_backward(&cache.t, cache.norm, &cache.e, grad_e);
    for a in 0..EMB_DIM {
        grads.text_proj_bias[a] += dt[a];
        grads.ffn_proj_bias[a] += dt[a];
        for (s, u) in cache.onehot.iter().enumerate() {
            if *u != 0.0 {
                grads.text_proj[a * F_TXT + s] += dt[a] * u;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, render, Split, TaskSpec};
    use crate::seg::{crop, segment, DEFAULT_MIN_AREA};

    fn red_block_crop() -> Grid2D {
        let mut g = Grid2D::zeros(6, 6, 3);
        for r in 1..5 {
            for c in 1..5 {
                g.set(r, c, 0, 1.0);
            }
        }
        g
    }

    #[test]
    fn featurize_red_block() {
        let f = featurize_visual(&red_block_crop());
        assert_eq!(f[0], 1.0); // red bin one-hot
        for c in 1..N_COLORS {
            assert_eq!(f[c], 0.0);
        }
        assert_eq!(f[14], 1.0); // fill ratio
        assert_eq!(f[13], 1.0); // aspect
    }

    #[test]
    fn featurize_empty_crop_is_zero() {
        let f = featurize_visual(&Grid2D::zeros(5, 5, 3));
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn featurize_rectangle_vs_square_moments() {
        // hand-computed: 2x4 rectangle of a single color
        let mut rect = Grid2D::zeros(6, 6, 3);
        for r in 2..4 {
            for c in 1..5 {
                rect.set(r, c, 2, 1.0);
            }
        }
        let f = featurize_visual(&rect);
        assert_eq!(f[2], 1.0); // blue bin
        assert_eq!(f[13], 0.5); // aspect 2/4
        // mu20 over rows {2,3}: mean 2.5, var 0.25; mu02 over cols {1..4}: var 1.25
        assert!((f[15] - 0.25).abs() < 1e-12);
        assert!((f[16] - 1.25).abs() < 1e-12);
        let sq = featurize_visual(&red_block_crop());
        // identical histograms up to bin identity, different moment entries
        assert!((f[15] - sq[15]).abs() > 1e-9 || (f[16] - sq[16]).abs() > 1e-9);
    }

    #[test]
    fn encode_visual_is_deterministic_and_unit() {
        let params = EncoderParams::oracle_aligned(0);
        let a = encode_visual(&red_block_crop(), &params).unwrap();
        let b = encode_visual(&red_block_crop(), &params).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distinct_colors_are_distinguishable() {
        let params = EncoderParams::oracle_aligned(0);
        let red = encode_visual(&red_block_crop(), &params).unwrap();
        let mut blue_crop = Grid2D::zeros(6, 6, 3);
        for r in 1..5 {
            for c in 1..5 {
                blue_crop.set(r, c, 2, 1.0);
            }
        }
        let blue = encode_visual(&blue_crop, &params).unwrap();
        let cos: f64 = red.values.iter().zip(blue.values.iter()).map(|(a, b)| a * b).sum();
        assert!(cos < 0.999);
    }

    #[test]
    fn text_parse_and_article_abstraction() {
        let q = TextQuery::parse("a photo of the red block").unwrap();
        assert_eq!(q.color, Some(0));
        assert_eq!(q.noun, Some(ObjectKind::Block));
        assert!(!q.plural);
        let params = EncoderParams::oracle_aligned(0);
        let a = encode_text(&q, &params).unwrap();
        let b = encode_text(&TextQuery::parse("a photo of a red block").unwrap(), &params).unwrap();
        assert_eq!(a.values, b.values);
        assert!(TextQuery::parse("hello world").is_err());
    }

    #[test]
    fn partition_resolution() {
        assert_eq!(
            resolve_partition(PartitionPolicy::TextFfnBiasOnly).slots,
            vec![ParamSlot::TextFfnBias]
        );
        assert!(resolve_partition(PartitionPolicy::None).slots.is_empty());
        assert_eq!(
            resolve_partition(PartitionPolicy::Both).slots,
            vec![
                ParamSlot::TextFfnBias,
                ParamSlot::VisualNormGain,
                ParamSlot::VisualNormBias
            ]
        );
        assert!(PartitionPolicy::parse("bogus").is_err());
    }

    #[test]
    fn grounding_oracle_over_generated_scenes() {
        // With oracle-aligned init, text("<color> block") lands on the
        // matching block crop for every generated scene.
        let params = EncoderParams::oracle_aligned(0);
        let task = TaskSpec::by_name("put-block-in-bowl").unwrap();
        for split in [Split::Seen, Split::Unseen] {
            for seed in 0..30 {
                let scene = generate_scene(&task, split, seed).unwrap();
                let obs = render(&scene);
                let seg = segment(&obs, [0.0; 3], DEFAULT_MIN_AREA).unwrap();
                let embs: Vec<EmbeddingVector> = seg
                    .instances
                    .iter()
                    .map(|inst| encode_visual(&crop(&obs, inst, 1), &params).unwrap())
                    .collect();
                for obj in scene.objects.iter().filter(|o| o.kind.is_pickable()) {
                    let q = TextQuery::parse(&format!("a photo of the {} block", obj.color)).unwrap();
                    let t = encode_text(&q, &params).unwrap();
                    let best = embs
                        .iter()
                        .enumerate()
                        .max_by(|(_, a), (_, b)| {
                            let ca: f64 = a.values.iter().zip(t.values.iter()).map(|(x, y)| x * y).sum();
                            let cb: f64 = b.values.iter().zip(t.values.iter()).map(|(x, y)| x * y).sum();
                            ca.partial_cmp(&cb).unwrap()
                        })
                        .map(|(i, _)| i)
                        .unwrap();
                    // the winning instance's mask must sit inside the object bbox
                    let inst = &seg.instances[best];
                    let (cu, cv) = obj.centroid();
                    assert!(
                        inst.contains(cu, cv),
                        "color {} split {:?} seed {seed}",
                        obj.color,
                        split
                    );
                }
            }
        }
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(77);
        let params = EncoderParams::oracle_aligned(3);
        let crop = red_block_crop();
        let wts: Vec<f64> = (0..EMB_DIM).map(|_| rng.gen::<f64>() - 0.5).collect();
        let loss_vis = |p: &EncoderParams| -> f64 {
            let e = encode_visual(&crop, p).unwrap();
            e.values.iter().zip(wts.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = encode_visual_cached(&crop, &params).unwrap();
        let mut grads = EncoderGrads::zeros();
        visual_backward(&params, &cache, &wts, &mut grads);
        let eps = 1e-5;
        let check = |analytic: f64, f: &dyn Fn(&mut EncoderParams, f64)| {
            let mut pp = params.clone();
            f(&mut pp, eps);
            let lp = loss_vis(&pp);
            let mut pm = params.clone();
            f(&mut pm, -eps);
            let lm = loss_vis(&pm);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(((analytic - fd) / denom).abs() < 1e-4, "a {analytic} fd {fd}");
        };
        for i in [0usize, 5, 40, 200] {
            check(grads.visual_proj[i], &|p: &mut EncoderParams, d: f64| p.visual_proj[i] += d);
        }
        for i in [0usize, 7] {
            check(grads.visual_norm_gain[i], &|p: &mut EncoderParams, d: f64| {
                p.visual_norm_gain[i] += d
            });
            check(grads.visual_norm_bias[i], &|p: &mut EncoderParams, d: f64| {
                p.visual_norm_bias[i] += d
            });
        }
    }
}
