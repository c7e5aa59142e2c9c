//! The two-stage decision procedure: instruction splitting, Target
//! Localization (pick pixel by argmax over a scored map), and Region
//! Determination (placement pixel + rotation by rotated cross-correlation).

use crate::embed::{
    encode_text, encode_visual, EncoderParams, TextQuery,
};
use crate::error::{EngineError, Result};
use crate::fusion::{confidence_map, fuse, ConfidenceMap, FusionConfig};
use crate::grid::{
    argmax_pixel, cross_correlate, rotate_crop, softmax2d, ConvLayer, ConvStack, Distribution2D,
    Grid2D, RotationAngle, NUM_ROTATIONS,
};
use crate::seg::{crop as seg_crop, SegmentationResult};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default side of the square pick crop; covers the largest footprint with
/// margin at any rotation.
pub const DEFAULT_CROP_SIZE: usize = 15;
/// Feature channels produced by the psi/phi stacks.
pub const FEATURE_CHANNELS: usize = 2;
/// Padding used when cropping instances for embedding.
pub const INSTANCE_CROP_PAD: usize = 1;

/// The instruction split into a pick query and a placement query.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionPair {
    pub tl_query: TextQuery,
    pub rd_query: TextQuery,
}

const TEMPLATES: [&str; 3] = [
    "put the {color} {kind} in a {color} {kind}",
    "pack the {color} {kind} in the {color} {kind}",
    "push the {color} {kinds} into the {color} {kind}",
];

/// Deterministic text filter: splits a templated instruction into the
/// "a photo of ..." queries for the two stages.
pub fn filter_text(instruction: &str) -> Result<InstructionPair> {
    let toks: Vec<&str> = instruction.split_whitespace().collect();
    let fail = |nearest: &str| {
        Err(EngineError::Parse(format!(
            "instruction '{instruction}' matches no template; nearest template: \"{nearest}\""
        )))
    };
    if toks.len() != 8 {
        let nearest = match toks.first().copied() {
            Some("pack") => TEMPLATES[1],
            Some("push") => TEMPLATES[2],
            _ => TEMPLATES[0],
        };
        return fail(nearest);
    }
    let (tl_raw, rd_raw) = match (toks[0], toks[1], toks[4], toks[5]) {
        ("put", "the", "in", "a") => (
            format!("a photo of the {} {}", toks[2], toks[3]),
            format!("a photo of a {} {}", toks[6], toks[7]),
        ),
        ("pack", "the", "in", "the") => (
            format!("a photo of the {} {}", toks[2], toks[3]),
            format!("a photo of the {} {}", toks[6], toks[7]),
        ),
        ("push", "the", "into", "the") => (
            format!("a photo of the {} {}", toks[2], toks[3]),
            format!("a photo of a {} {}", toks[6], toks[7]),
        ),
        ("put", ..) => return fail(TEMPLATES[0]),
        ("pack", ..) => return fail(TEMPLATES[1]),
        ("push", ..) => return fail(TEMPLATES[2]),
        _ => return fail(TEMPLATES[0]),
    };
    Ok(InstructionPair {
        tl_query: TextQuery::parse(&tl_raw)?,
        rd_query: TextQuery::parse(&rd_raw)?,
    })
}

/// The trainable convolutional heads of the two stages.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNets {
    /// Scores pick pixels from (obs, TL confidence): 4 -> 1 channels.
    pub tl_head: ConvStack,
    /// Featurizes the raw pick crop: 3 -> F channels.
    pub psi: ConvStack,
    /// Featurizes (obs, RD confidence): 4 -> F channels.
    pub phi: ConvStack,
    pub crop_size: usize,
}

impl PolicyNets {
    /// Hand-aligned heads that make the oracle pipeline exact: the TL head
    /// averages the confidence channel over a footprint-sized window (so the
    /// argmax sits at the target's centroid), psi reads crop occupancy, and
    /// phi passes the confidence channel through.
    pub fn oracle_init() -> PolicyNets {
        let mut tl = ConvLayer::zeros(5, 5, 4, 1).unwrap();
        for kr in 0..5 {
            for kc in 0..5 {
                let i = tl.kidx(kr, kc, 3, 0);
                tl.kernel[i] = 1.0 / 25.0;
            }
        }
        let mut psi = ConvLayer::zeros(1, 1, 3, FEATURE_CHANNELS).unwrap();
        for ci in 0..3 {
            let i = psi.kidx(0, 0, ci, 0);
            psi.kernel[i] = 1.0;
        }
        let mut phi = ConvLayer::zeros(1, 1, 4, FEATURE_CHANNELS).unwrap();
        let i = phi.kidx(0, 0, 3, 0);
        phi.kernel[i] = 1.0;
        PolicyNets {
            tl_head: ConvStack { layers: vec![tl] },
            psi: ConvStack { layers: vec![psi] },
            phi: ConvStack { layers: vec![phi] },
            crop_size: DEFAULT_CROP_SIZE,
        }
    }

    /// TL head that copies the confidence channel verbatim; psi/phi as in
    /// the oracle. Useful where mask-anchored (rather than centroid) picks
    /// are wanted.
    pub fn passthrough() -> PolicyNets {
        let mut nets = Self::oracle_init();
        let mut tl = ConvLayer::zeros(1, 1, 4, 1).unwrap();
        let i = tl.kidx(0, 0, 3, 0);
        tl.kernel[i] = 1.0;
        nets.tl_head = ConvStack { layers: vec![tl] };
        nets
    }

    /// All-zero heads: both stages start from uniform score maps. The
    /// default starting point for few-shot training runs.
    pub fn zero_init() -> PolicyNets {
        PolicyNets {
            tl_head: ConvStack { layers: vec![ConvLayer::zeros(5, 5, 4, 1).unwrap()] },
            psi: ConvStack { layers: vec![ConvLayer::zeros(1, 1, 3, FEATURE_CHANNELS).unwrap()] },
            phi: ConvStack { layers: vec![ConvLayer::zeros(1, 1, 4, FEATURE_CHANNELS).unwrap()] },
            crop_size: DEFAULT_CROP_SIZE,
        }
    }

    /// Seeded uniform noise added to every kernel weight and bias of all
    /// three heads. Used to build degraded-but-recoverable training starts.
    pub fn perturbed(&self, amplitude: f64, seed: u64) -> PolicyNets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A17_ED9E);
        let mut out = self.clone();
        if amplitude == 0.0 {
            return out;
        }
        for stack in [&mut out.tl_head, &mut out.psi, &mut out.phi] {
            for layer in &mut stack.layers {
                for w in layer.kernel.iter_mut() {
                    *w += rng.gen_range(-amplitude..amplitude);
                }
                for b in layer.bias.iter_mut() {
                    *b += rng.gen_range(-amplitude..amplitude);
                }
            }
        }
        out
    }

    /// Small seeded uniform weights for training experiments.
    pub fn random_init(seed: u64) -> PolicyNets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E77_11E7);
        let mut fill = |l: &mut ConvLayer| {
            for w in l.kernel.iter_mut() {
                *w = rng.gen_range(-0.1..0.1);
            }
        };
        let mut tl = ConvLayer::zeros(5, 5, 4, 1).unwrap();
        let mut psi = ConvLayer::zeros(1, 1, 3, FEATURE_CHANNELS).unwrap();
        let mut phi = ConvLayer::zeros(1, 1, 4, FEATURE_CHANNELS).unwrap();
        fill(&mut tl);
        fill(&mut psi);
        fill(&mut phi);
        PolicyNets {
            tl_head: ConvStack { layers: vec![tl] },
            psi: ConvStack { layers: vec![psi] },
            phi: ConvStack { layers: vec![phi] },
            crop_size: DEFAULT_CROP_SIZE,
        }
    }
}

/// Output of the Target Localization stage.
#[derive(Debug, Clone)]
pub struct PickDecision {
    pub pose: (usize, usize),
    pub score_map: Grid2D,
    pub distribution: Distribution2D,
}

/// Output of the Region Determination stage.
#[derive(Debug, Clone)]
pub struct PlaceDecision {
    pub pose: (usize, usize),
    pub angle: RotationAngle,
    pub score_volume: Vec<Grid2D>,
}

/// Concatenates the observation with a single confidence channel.
pub fn stack_input(obs: &Grid2D, conf: &Grid2D) -> Result<Grid2D> {
    obs.concat_channels(conf)
}

/// Target Localization: scores every pixel and picks the argmax.
pub fn predict_pick(obs: &Grid2D, m_tl: &ConfidenceMap, nets: &PolicyNets) -> Result<PickDecision> {
    let input = stack_input(obs, &m_tl.map)?;
    let score_map = nets.tl_head.forward(&input)?;
    if score_map.channels != 1 {
        return Err(EngineError::Shape("tl_head must produce a single score channel".into()));
    }
    let distribution = softmax2d(&score_map, 1.0)?;
    let pose = argmax_pixel(&score_map)?;
    Ok(PickDecision { pose, score_map, distribution })
}

/// Extracts an odd-sized square crop centered at `pose`, zero-filled beyond
/// the image bounds.
pub fn extract_pick_crop(obs: &Grid2D, pose: (usize, usize), c: usize) -> Result<Grid2D> {
    if c % 2 == 0 {
        return Err(EngineError::Param(format!("crop size must be odd, got {c}")));
    }
    let half = c / 2;
    let mut out = Grid2D::zeros(c, c, obs.channels);
    for r in 0..c {
        let sr = pose.0 as isize + r as isize - half as isize;
        if sr < 0 || sr >= obs.height as isize {
            continue;
        }
        for cc in 0..c {
            let sc = pose.1 as isize + cc as isize - half as isize;
            if sc < 0 || sc >= obs.width as isize {
                continue;
            }
            for k in 0..obs.channels {
                out.set(r, cc, k, obs.get(sr as usize, sc as usize, k));
            }
        }
    }
    Ok(out)
}

/// Region Determination: correlates scene features against the crop's
/// features at all 36 rotations. Ties break to the smallest angle index,
/// then row-major pixel order.
pub fn predict_place(
    obs: &Grid2D,
    m_rd: &ConfidenceMap,
    pick_crop: &Grid2D,
    nets: &PolicyNets,
) -> Result<PlaceDecision> {
    let input = stack_input(obs, &m_rd.map)?;
    let feature = nets.phi.forward(&input)?;
    let mut best: Option<((usize, usize), usize, f64)> = None;
    let mut volume = Vec::with_capacity(NUM_ROTATIONS);
    for angle in RotationAngle::all() {
        let rotated = rotate_crop(pick_crop, angle)?;
        let kernel = nets.psi.forward(&rotated)?;
        if kernel.channels != feature.channels {
            return Err(EngineError::Shape(format!(
                "psi produced {} channels but phi produced {}",
                kernel.channels, feature.channels
            )));
        }
        let score = cross_correlate(&feature, &kernel)?;
        let (pix, val) = {
            let p = argmax_pixel(&score)?;
            (p, score.get(p.0, p.1, 0))
        };
        if best.as_ref().map_or(true, |&(_, _, b)| val > b) {
            best = Some((pix, angle.index(), val));
        }
        volume.push(score);
    }
    let (pose, j, _) = best.ok_or(EngineError::EmptyScene)?;
    Ok(PlaceDecision { pose, angle: RotationAngle::new(j)?, score_volume: volume })
}

/// Full pipeline on one observation: split the instruction, embed and fuse
/// instances, build both confidence maps, then run the two stages.
pub fn act(
    obs: &Grid2D,
    instruction: &str,
    encoders: &EncoderParams,
    nets: &PolicyNets,
    seg: &SegmentationResult,
    fusion_config: &FusionConfig,
) -> Result<(PickDecision, PlaceDecision)> {
    if seg.instances.is_empty() {
        return Err(EngineError::EmptyScene);
    }
    let mut instance_embs = Vec::with_capacity(seg.instances.len());
    for inst in &seg.instances {
        let c = seg_crop(obs, inst, INSTANCE_CROP_PAD);
        instance_embs.push(encode_visual(&c, encoders)?);
    }
    let global = encode_visual(obs, encoders)?;
    act_with_embeddings(obs, instruction, &instance_embs, &global, encoders, nets, seg, fusion_config)
}

/// Same as [`act`] but with externally supplied instance and global
/// embeddings (the encoder-bridge path); only the text encoder runs here.
#[allow(clippy::too_many_arguments)]
pub fn act_with_embeddings(
    obs: &Grid2D,
    instruction: &str,
    instance_embs: &[crate::embed::EmbeddingVector],
    global: &crate::embed::EmbeddingVector,
    encoders: &EncoderParams,
    nets: &PolicyNets,
    seg: &SegmentationResult,
    fusion_config: &FusionConfig,
) -> Result<(PickDecision, PlaceDecision)> {
    if seg.instances.len() != instance_embs.len() {
        return Err(EngineError::Shape(format!(
            "{} instances but {} embeddings",
            seg.instances.len(),
            instance_embs.len()
        )));
    }
    let pair = filter_text(instruction)?;
    let (fused, _) = fuse(instance_embs, global, fusion_config)?;
    let e_tl = encode_text(&pair.tl_query, encoders)?;
    let e_rd = encode_text(&pair.rd_query, encoders)?;
    let m_tl = confidence_map(seg, &fused, &e_tl)?;
    let m_rd = confidence_map(seg, &fused, &e_rd)?;
    let pick = predict_pick(obs, &m_tl, nets)?;
    let pick_crop = extract_pick_crop(obs, pick.pose, nets.crop_size)?;
    let place = predict_place(obs, &m_rd, &pick_crop, nets)?;
    Ok((pick, place))
}
