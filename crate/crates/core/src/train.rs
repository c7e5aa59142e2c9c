//! Few-shot supervised training: cross-entropy pixel losses over the two
//! stages, full analytic backpropagation into the policy heads and the
//! partition-permitted encoder slots, plain full-batch gradient descent.

use crate::embed::{
    encode_text_cached, encode_visual_cached, text_backward, visual_backward, EncoderGrads,
    EncoderParams, ParameterPartition, PartitionPolicy,
};
use crate::error::{EngineError, Result};
use crate::fusion::{
    confidence_backward, confidence_map, fuse, fusion_backward, FusionConfig,
};
use crate::grid::{
    cross_correlate_backward, cross_correlate_fast, rotate_crop, Grid2D, RotationAngle, NUM_ROTATIONS,
};
use crate::policy::{extract_pick_crop, filter_text, PolicyNets};
use crate::scene::{make_episode, Episode, Split, TaskSpec};
use crate::seg::{segment, SegmentationResult, DEFAULT_MIN_AREA};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// One supervised example: an episode plus its rendered observation and the
/// pixel/angle targets for both stages.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub episode: Episode,
    pub obs: Grid2D,
    pub tl_target: (usize, usize),
    pub rd_target: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_tl: f64,
    pub lambda_rd: f64,
    pub partition: ParameterPartition,
    pub seed: u64,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            learning_rate: 0.05,
            lambda_tl: 1.0,
            lambda_rd: 1.0,
            partition: crate::embed::resolve_partition(PartitionPolicy::Both),
            seed: 0,
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(EngineError::Param("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EngineError::Param("learning_rate must be > 0".into()));
        }
        if self.lambda_tl < 0.0 || self.lambda_rd < 0.0 {
            return Err(EngineError::Param("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Builds `count` deterministic demonstrations from consecutive episode
/// seeds. The angle target j* comes from the ground-truth theta via the
/// nearest 10-degree bin, ties to the smaller index.
pub fn make_demonstrations(
    task: &TaskSpec,
    split: Split,
    count: usize,
    seed: u64,
) -> Result<Vec<Demonstration>> {
    if count < 1 {
        return Err(EngineError::Param("demonstration count must be >= 1".into()));
    }
    let mut demos = Vec::with_capacity(count);
    for i in 0..count {
        let ep = make_episode(task, split, seed.wrapping_add(i as u64))?;
        let obs = crate::scene::render(&ep.scene);
        let j = RotationAngle::from_degrees(ep.gt_place.2).index();
        demos.push(Demonstration {
            tl_target: ep.gt_pick,
            rd_target: (ep.gt_place.0, ep.gt_place.1, j),
            obs,
            episode: ep,
        });
    }
    Ok(demos)
}

/// Per-layer (kernel, bias) gradients for the three policy heads.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub tl: Vec<(Vec<f64>, Vec<f64>)>,
    pub psi: Vec<(Vec<f64>, Vec<f64>)>,
    pub phi: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NetGrads {
    fn zeros_like(nets: &PolicyNets) -> NetGrads {
        let z = |s: &crate::grid::ConvStack| {
            s.layers
                .iter()
                .map(|l| (vec![0.0; l.kernel.len()], vec![0.0; l.bias.len()]))
                .collect()
        };
        NetGrads { tl: z(&nets.tl_head), psi: z(&nets.psi), phi: z(&nets.phi) }
    }

    fn accumulate(&mut self, other: &NetGrads) {
        let acc = |dst: &mut Vec<(Vec<f64>, Vec<f64>)>, src: &Vec<(Vec<f64>, Vec<f64>)>| {
            for ((dk, db), (sk, sb)) in dst.iter_mut().zip(src.iter()) {
                for (d, s) in dk.iter_mut().zip(sk.iter()) {
                    *d += s;
                }
                for (d, s) in db.iter_mut().zip(sb.iter()) {
                    *d += s;
                }
            }
        };
        acc(&mut self.tl, &other.tl);
        acc(&mut self.psi, &other.psi);
        acc(&mut self.phi, &other.phi);
    }

    fn scale(&mut self, f: f64) {
        for grads in [&mut self.tl, &mut self.psi, &mut self.phi] {
            for (k, b) in grads.iter_mut() {
                for v in k.iter_mut() {
                    *v *= f;
                }
                for v in b.iter_mut() {
                    *v *= f;
                }
            }
        }
    }

    fn apply(&self, nets: &mut PolicyNets, lr: f64) {
        let upd = |stack: &mut crate::grid::ConvStack, grads: &Vec<(Vec<f64>, Vec<f64>)>| {
            for (layer, (gk, gb)) in stack.layers.iter_mut().zip(grads.iter()) {
                for (w, g) in layer.kernel.iter_mut().zip(gk.iter()) {
                    *w -= lr * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(gb.iter()) {
                    *b -= lr * g;
                }
            }
        };
        upd(&mut nets.tl_head, &self.tl);
        upd(&mut nets.psi, &self.psi);
        upd(&mut nets.phi, &self.phi);
    }
}

/// Loss components of one demonstration.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub l_tl: f64,
    pub l_rd: f64,
}

fn channel_grad(grad_input: &Grid2D, channel: usize) -> Grid2D {
    let mut out = Grid2D::zeros(grad_input.height, grad_input.width, 1);
    for r in 0..grad_input.height {
        for c in 0..grad_input.width {
            out.set(r, c, 0, grad_input.get(r, c, channel));
        }
    }
    out
}

/// Forward + backward through the whole teacher-forced pipeline for one
/// demonstration. Returns the loss parts and gradients for nets and
/// encoders.
pub fn loss_and_grads(
    demo: &Demonstration,
    nets: &PolicyNets,
    encoders: &EncoderParams,
    config: &TrainConfig,
) -> Result<(LossParts, NetGrads, EncoderGrads)> {
    let obs = &demo.obs;
    let seg: SegmentationResult = segment(obs, [0.0; 3], DEFAULT_MIN_AREA)?;
    if seg.instances.is_empty() {
        return Err(EngineError::EmptyScene);
    }
    let pair = filter_text(&demo.episode.instruction)?;

    // encode
    let mut ins_embs = Vec::with_capacity(seg.instances.len());
    let mut ins_caches = Vec::with_capacity(seg.instances.len());
    for inst in &seg.instances {
        let c = crate::seg::crop(obs, inst, crate::policy::INSTANCE_CROP_PAD);
        let (e, cache) = encode_visual_cached(&c, encoders)?;
        ins_embs.push(e);
        ins_caches.push(cache);
    }
    let (global, global_cache) = encode_visual_cached(obs, encoders)?;
    let (e_tl, tl_text_cache) = encode_text_cached(&pair.tl_query, encoders)?;
    let (e_rd, rd_text_cache) = encode_text_cached(&pair.rd_query, encoders)?;

    // fuse + confidence maps
    let (fused, fusion_cache) = fuse(&ins_embs, &global, &config.fusion)?;
    let m_tl = confidence_map(&seg, &fused, &e_tl)?;
    let m_rd = confidence_map(&seg, &fused, &e_rd)?;

    // TL stage
    let input_tl = obs.concat_channels(&m_tl.map)?;
    let (q_tl, tl_stack_cache) = nets.tl_head.forward_cached(&input_tl)?;
    if q_tl.channels != 1 {
        return Err(EngineError::Shape("tl_head must produce one channel".into()));
    }
    let (h, w) = (q_tl.height, q_tl.width);
    let m = q_tl.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom_tl: f64 = q_tl.data.iter().map(|s| (s - m).exp()).sum();
    let tgt_tl = demo.tl_target.0 * w + demo.tl_target.1;
    if demo.tl_target.0 >= h || demo.tl_target.1 >= w {
        return Err(EngineError::Index("tl target out of bounds".into()));
    }
    let l_tl = denom_tl.ln() + m - q_tl.data[tgt_tl];

    // RD stage, teacher-forced on the ground-truth pick crop
    let gt_crop = extract_pick_crop(obs, demo.tl_target, nets.crop_size)?;
    let input_rd = obs.concat_channels(&m_rd.map)?;
    let (feat, phi_cache) = nets.phi.forward_cached(&input_rd)?;
    let mut scores = Vec::with_capacity(NUM_ROTATIONS);
    let mut psi_caches = Vec::with_capacity(NUM_ROTATIONS);
    for angle in RotationAngle::all() {
        let rot = rotate_crop(&gt_crop, angle)?;
        let (kern, cache) = nets.psi.forward_cached(&rot)?;
        scores.push((cross_correlate_fast(&feat, &kern)?, kern, rot));
        psi_caches.push(cache);
    }
    let (tu, tv, tj) = demo.rd_target;
    if tu >= h || tv >= w || tj < 1 || tj > NUM_ROTATIONS {
        return Err(EngineError::Index("rd target out of bounds".into()));
    }
    let m_rd_max = scores
        .iter()
        .flat_map(|(s, _, _)| s.data.iter().cloned())
        .fold(f64::NEG_INFINITY, f64::max);
    let denom_rd: f64 = scores
        .iter()
        .flat_map(|(s, _, _)| s.data.iter().map(|v| (v - m_rd_max).exp()))
        .sum();
    let l_rd = denom_rd.ln() + m_rd_max - scores[tj - 1].0.data[tu * w + tv];

    let total = config.lambda_tl * l_tl + config.lambda_rd * l_rd;

    // ---- backward ----
    let mut net_grads = NetGrads::zeros_like(nets);
    let mut enc_grads = EncoderGrads::zeros();

    // TL softmax cross-entropy
    let mut g_qtl = Grid2D::zeros(h, w, 1);
    for (i, s) in q_tl.data.iter().enumerate() {
        let p = (s - m).exp() / denom_tl;
        g_qtl.data[i] = config.lambda_tl * (p - if i == tgt_tl { 1.0 } else { 0.0 });
    }
    let (tl_layer_grads, g_input_tl) = nets.tl_head.backward(&tl_stack_cache, &g_qtl)?;
    net_grads.tl = tl_layer_grads;
    let g_map_tl = channel_grad(&g_input_tl, 3);

    // RD joint softmax cross-entropy
    let mut g_feat = Grid2D::zeros(feat.height, feat.width, feat.channels);
    for (ji, (score, kern, _rot)) in scores.iter().enumerate() {
        let mut g_score = Grid2D::zeros(h, w, 1);
        let mut any = false;
        for (i, s) in score.data.iter().enumerate() {
            let p = (s - m_rd_max).exp() / denom_rd;
            let g = config.lambda_rd * (p - if ji == tj - 1 && i == tu * w + tv { 1.0 } else { 0.0 });
            g_score.data[i] = g;
            any = any || g != 0.0;
        }
        if !any {
            continue;
        }
        let (gf, gk) = cross_correlate_backward(&feat, kern, &g_score)?;
        for (d, s) in g_feat.data.iter_mut().zip(gf.data.iter()) {
            *d += s;
        }
        let (psi_layer_grads, _) = nets.psi.backward(&psi_caches[ji], &gk)?;
        for ((dk, db), (sk, sb)) in net_grads.psi.iter_mut().zip(psi_layer_grads.iter()) {
            for (d, s) in dk.iter_mut().zip(sk.iter()) {
                *d += s;
            }
            for (d, s) in db.iter_mut().zip(sb.iter()) {
                *d += s;
            }
        }
    }
    let (phi_layer_grads, g_input_rd) = nets.phi.backward(&phi_cache, &g_feat)?;
    net_grads.phi = phi_layer_grads;
    let g_map_rd = channel_grad(&g_input_rd, 3);

    // confidence maps -> fused embeddings + text embeddings
    let (g_fused_tl, g_text_tl) = confidence_backward(&seg, &fused, &e_tl, &g_map_tl);
    let (g_fused_rd, g_text_rd) = confidence_backward(&seg, &fused, &e_rd, &g_map_rd);
    let g_fused: Vec<Vec<f64>> = g_fused_tl
        .iter()
        .zip(g_fused_rd.iter())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x + y).collect())
        .collect();

    // fusion -> instance + global embeddings
    let (g_ins, g_global) = fusion_backward(&fusion_cache, &g_fused);
    for (cache, g) in ins_caches.iter().zip(g_ins.iter()) {
        visual_backward(encoders, cache, g, &mut enc_grads);
    }
    visual_backward(encoders, &global_cache, &g_global, &mut enc_grads);
    text_backward(encoders, &tl_text_cache, &g_text_tl, &mut enc_grads);
    text_backward(encoders, &rd_text_cache, &g_text_rd, &mut enc_grads);

    Ok((LossParts { total, l_tl, l_rd }, net_grads, enc_grads))
}

/// Loss components only (no gradients).
pub fn loss(
    demo: &Demonstration,
    nets: &PolicyNets,
    encoders: &EncoderParams,
    config: &TrainConfig,
) -> Result<LossParts> {
    loss_and_grads(demo, nets, encoders, config).map(|(l, _, _)| l)
}

/// Plain full-batch gradient descent. Gradients always reach the policy
/// nets; encoder slots update only if the partition permits. Returns the
/// trained parameters and a per-step trace of the mean total loss.
pub fn train_few_shot(
    demos: &[Demonstration],
    nets: &PolicyNets,
    encoders: &EncoderParams,
    config: &TrainConfig,
) -> Result<(PolicyNets, EncoderParams, Vec<f64>)> {
    config.validate()?;
    if demos.is_empty() {
        return Err(EngineError::Param("training requires at least one demonstration".into()));
    }
    let mut nets = nets.clone();
    let mut encoders = encoders.clone();
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut total = 0.0;
        let mut net_acc = NetGrads::zeros_like(&nets);
        let mut enc_acc = EncoderGrads::zeros();
        for demo in demos {
            let (parts, ng, eg) = loss_and_grads(demo, &nets, &encoders, config)?;
            total += parts.total;
            net_acc.accumulate(&ng);
            enc_acc.accumulate(&eg);
        }
        let mean = total / demos.len() as f64;
        if !mean.is_finite() {
            return Err(EngineError::Divergence { step, loss: mean });
        }
        trace.push(mean);
        let inv = 1.0 / demos.len() as f64;
        net_acc.scale(inv);
        enc_acc.scale(inv);
        net_acc.apply(&mut nets, config.learning_rate);
        encoders.apply_update(&enc_acc, config.learning_rate, &config.partition);
    }
    Ok((nets, encoders, trace))
}

/// Compares analytic gradients of the total loss against central finite
/// differences (epsilon = 1e-4) on a random coordinate sample; returns the
/// maximum relative error observed.
pub fn gradient_check(
    nets: &PolicyNets,
    encoders: &EncoderParams,
    demo: &Demonstration,
    config: &TrainConfig,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    let (_, net_grads, enc_grads) = loss_and_grads(demo, nets, encoders, config)?;
    let eps = 1e-4;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;

    // enumerate every tunable coordinate as (slot id, index, analytic grad)
    enum Loc {
        NetKernel(usize, usize, usize),
        NetBias(usize, usize, usize),
        Enc(crate::embed::ParamSlot, usize),
    }
    let mut locs = Vec::new();
    let stacks = [&nets.tl_head, &nets.psi, &nets.phi];
    let stack_grads = [&net_grads.tl, &net_grads.psi, &net_grads.phi];
    for (si, stack) in stacks.iter().enumerate() {
        for (li, layer) in stack.layers.iter().enumerate() {
            for k in 0..layer.kernel.len() {
                locs.push((Loc::NetKernel(si, li, k), stack_grads[si][li].0[k]));
            }
            for b in 0..layer.bias.len() {
                locs.push((Loc::NetBias(si, li, b), stack_grads[si][li].1[b]));
            }
        }
    }
    for slot in crate::embed::ParamSlot::ALL {
        if !config.partition.allows(slot) {
            continue;
        }
        let g = match slot {
            crate::embed::ParamSlot::VisualProjWeight => &enc_grads.visual_proj,
            crate::embed::ParamSlot::VisualProjBias => &enc_grads.visual_proj_bias,
            crate::embed::ParamSlot::VisualNormGain => &enc_grads.visual_norm_gain,
            crate::embed::ParamSlot::VisualNormBias => &enc_grads.visual_norm_bias,
            crate::embed::ParamSlot::TextProjWeight => &enc_grads.text_proj,
            crate::embed::ParamSlot::TextProjBias => &enc_grads.text_proj_bias,
            crate::embed::ParamSlot::TextFfnBias => &enc_grads.ffn_proj_bias,
        };
        for i in 0..g.len() {
            locs.push((Loc::Enc(slot, i), g[i]));
        }
    }

    for _ in 0..coords {
        let (loc, analytic) = &locs[rng.gen_range(0..locs.len())];
        let eval = |delta: f64| -> Result<f64> {
            let mut n2 = nets.clone();
            let mut e2 = encoders.clone();
            match loc {
                Loc::NetKernel(si, li, k) => {
                    let stack = match si {
                        0 => &mut n2.tl_head,
                        1 => &mut n2.psi,
                        _ => &mut n2.phi,
                    };
                    stack.layers[*li].kernel[*k] += delta;
                }
                Loc::NetBias(si, li, b) => {
                    let stack = match si {
                        0 => &mut n2.tl_head,
                        1 => &mut n2.psi,
                        _ => &mut n2.phi,
                    };
                    stack.layers[*li].bias[*b] += delta;
                }
                Loc::Enc(slot, i) => {
                    e2.slot_mut(*slot)[*i] += delta;
                }
            }
            Ok(loss(demo, &n2, &e2, config)?.total)
        };
        let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        max_err = max_err.max(((analytic - fd) / denom).abs());
    }
    Ok(max_err)
}
