//! File formats: episode documents (`arrange-scene/1`), checkpoints
//! (`arrange-ckpt/1`), embedding exchange files (`arrange-emb/1`), and the
//! PPM/PGM image dumps. All text formats are UTF-8 and newline-delimited;
//! float payloads are 32-bit little-endian words in base-16 so that
//! write -> read -> write reproduces files byte-exactly.

use crate::embed::{EmbeddingVector, EncoderParams, PartitionPolicy, EMB_DIM, F_TXT, F_VIS};
use crate::error::{EngineError, Result};
use crate::grid::{ConvLayer, ConvStack, Grid2D};
use crate::policy::PolicyNets;
use crate::scene::{Episode, ObjectKind, Pose, Scene, SceneObject, Split, Stencil, BACKGROUND};

// ---------------------------------------------------------------- helpers

fn f32_hex(v: f64) -> String {
    let bits = (v as f32).to_le_bytes();
    format!("{:02x}{:02x}{:02x}{:02x}", bits[0], bits[1], bits[2], bits[3])
}

fn parse_f32_hex(s: &str) -> Result<f64> {
    if s.len() != 8 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(EngineError::Format(format!("bad float word '{s}'")));
    }
    let mut bytes = [0u8; 4];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|e| EngineError::Format(format!("bad float word '{s}': {e}")))?;
    }
    Ok(f32::from_le_bytes(bytes) as f64)
}

fn hex_line(values: &[f64]) -> String {
    values.iter().map(|v| f32_hex(*v)).collect::<Vec<_>>().join(" ")
}

fn parse_hex_line(line: &str, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(parse_f32_hex)
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expect {
        return Err(EngineError::Format(format!(
            "expected {expect} float words, found {}",
            vals.len()
        )));
    }
    Ok(vals)
}

// ------------------------------------------------------- arrange-scene/1

fn encode_rle(cells: &[bool]) -> String {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < cells.len() {
        let v = cells[i];
        let mut n = 1;
        while i + n < cells.len() && cells[i + n] == v {
            n += 1;
        }
        runs.push(format!("{}x{}", if v { 1 } else { 0 }, n));
        i += n;
    }
    runs.join(",")
}

fn decode_rle(s: &str, expect: usize) -> Result<Vec<bool>> {
    let mut cells = Vec::with_capacity(expect);
    for run in s.split(',') {
        let (v, n) = run
            .split_once('x')
            .ok_or_else(|| EngineError::Format(format!("bad RLE run '{run}'")))?;
        let v = match v {
            "0" => false,
            "1" => true,
            other => return Err(EngineError::Format(format!("bad RLE value '{other}'"))),
        };
        let n: usize = n
            .parse()
            .map_err(|e| EngineError::Format(format!("bad RLE count '{n}': {e}")))?;
        cells.extend(std::iter::repeat(v).take(n));
    }
    if cells.len() != expect {
        return Err(EngineError::Format(format!(
            "RLE decodes to {} cells, expected {expect}",
            cells.len()
        )));
    }
    Ok(cells)
}

/// Serializes an episode (scene + instruction + ground truth) as an
/// `arrange-scene/1` document.
pub fn write_episode(ep: &Episode) -> String {
    let mut out = String::new();
    out.push_str("arrange-scene/1\n");
    out.push_str(&format!("grid {} {}\n", ep.scene.grid_h, ep.scene.grid_w));
    out.push_str(&format!("seed {}\n", ep.scene.rng_seed));
    out.push_str(&format!("split {}\n", ep.split.as_str()));
    out.push_str(&format!("instruction {}\n", ep.instruction));
    out.push_str(&format!("target {}\n", ep.target_object_id));
    out.push_str(&format!("goal {}\n", ep.goal_container_id));
    out.push_str(&format!("gt_pick {} {}\n", ep.gt_pick.0, ep.gt_pick.1));
    out.push_str(&format!(
        "gt_place {} {} {}\n",
        ep.gt_place.0, ep.gt_place.1, ep.gt_place.2
    ));
    for o in &ep.scene.objects {
        out.push_str(&format!(
            "object {} {} {} {} {} {} {} {}\n",
            o.id,
            o.kind.as_str(),
            o.color,
            o.pose.u,
            o.pose.v,
            o.pose.theta,
            o.footprint.side,
            encode_rle(&o.footprint.cells)
        ));
    }
    out.push_str("end\n");
    out
}

/// Parses an `arrange-scene/1` document.
pub fn read_episode(text: &str) -> Result<Episode> {
    let mut lines = text.lines();
    if lines.next() != Some("arrange-scene/1") {
        return Err(EngineError::Format("missing arrange-scene/1 header".into()));
    }
    let mut grid = None;
    let mut seed = 0u64;
    let mut split = None;
    let mut instruction = None;
    let mut target = None;
    let mut goal = None;
    let mut gt_pick = None;
    let mut gt_place = None;
    let mut objects = Vec::new();
    for line in lines {
        if line == "end" {
            break;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| EngineError::Format(format!("bad line '{line}'")))?;
        match key {
            "grid" => {
                let mut it = rest.split_whitespace();
                let h = it.next().and_then(|s| s.parse().ok());
                let w = it.next().and_then(|s| s.parse().ok());
                grid = h.zip(w);
            }
            "seed" => {
                seed = rest
                    .parse()
                    .map_err(|e| EngineError::Format(format!("bad seed: {e}")))?
            }
            "split" => split = Some(Split::parse(rest)?),
            "instruction" => instruction = Some(rest.to_string()),
            "target" => target = rest.parse().ok(),
            "goal" => goal = rest.parse().ok(),
            "gt_pick" => {
                let mut it = rest.split_whitespace();
                gt_pick = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .zip(it.next().and_then(|s| s.parse().ok()));
            }
            "gt_place" => {
                let p: Vec<&str> = rest.split_whitespace().collect();
                if p.len() != 3 {
                    return Err(EngineError::Format("gt_place needs u v theta".into()));
                }
                gt_place = Some((
                    p[0].parse().map_err(|_| EngineError::Format("bad gt_place u".into()))?,
                    p[1].parse().map_err(|_| EngineError::Format("bad gt_place v".into()))?,
                    p[2].parse().map_err(|_| EngineError::Format("bad gt_place theta".into()))?,
                ));
            }
            "object" => {
                let p: Vec<&str> = rest.split_whitespace().collect();
                if p.len() != 8 {
                    return Err(EngineError::Format(format!("bad object line '{line}'")));
                }
                let id = p[0].parse().map_err(|_| EngineError::Format("bad object id".into()))?;
                let kind = ObjectKind::parse(p[1])?;
                let color = crate::scene::PALETTE
                    .iter()
                    .find(|c| c.name == p[2])
                    .map(|c| c.name)
                    .ok_or_else(|| EngineError::Format(format!("unknown color '{}'", p[2])))?;
                let side: usize =
                    p[6].parse().map_err(|_| EngineError::Format("bad stencil side".into()))?;
                let cells = decode_rle(p[7], side * side)?;
                objects.push(SceneObject {
                    id,
                    kind,
                    color,
                    pose: Pose {
                        u: p[3].parse().map_err(|_| EngineError::Format("bad pose u".into()))?,
                        v: p[4].parse().map_err(|_| EngineError::Format("bad pose v".into()))?,
                        theta: p[5]
                            .parse()
                            .map_err(|_| EngineError::Format("bad pose theta".into()))?,
                    },
                    footprint: Stencil { side, cells },
                });
            }
            other => return Err(EngineError::Format(format!("unknown key '{other}'"))),
        }
    }
    let (grid_h, grid_w) = grid.ok_or_else(|| EngineError::Format("missing grid line".into()))?;
    Ok(Episode {
        scene: Scene { grid_h, grid_w, background: BACKGROUND, objects, rng_seed: seed },
        instruction: instruction.ok_or_else(|| EngineError::Format("missing instruction".into()))?,
        target_object_id: target.ok_or_else(|| EngineError::Format("missing target".into()))?,
        goal_container_id: goal.ok_or_else(|| EngineError::Format("missing goal".into()))?,
        gt_pick: gt_pick.ok_or_else(|| EngineError::Format("missing gt_pick".into()))?,
        gt_place: gt_place.ok_or_else(|| EngineError::Format("missing gt_place".into()))?,
        split: split.ok_or_else(|| EngineError::Format("missing split".into()))?,
    })
}

// -------------------------------------------------------- arrange-ckpt/1

/// Serializes nets + encoders as an `arrange-ckpt/1` document.
pub fn write_checkpoint(
    nets: &PolicyNets,
    encoders: &EncoderParams,
    partition: PartitionPolicy,
    seed: u64,
) -> String {
    let mut out = String::new();
    out.push_str("arrange-ckpt/1\n");
    out.push_str(&format!("partition {}\n", partition.as_str()));
    out.push_str(&format!("seed {seed}\n"));
    out.push_str(&format!("crop_size {}\n", nets.crop_size));
    let enc_slots: [(&str, &Vec<f64>); 7] = [
        ("visual_proj", &encoders.visual_proj),
        ("visual_proj_bias", &encoders.visual_proj_bias),
        ("visual_norm_gain", &encoders.visual_norm_gain),
        ("visual_norm_bias", &encoders.visual_norm_bias),
        ("text_proj", &encoders.text_proj),
        ("text_proj_bias", &encoders.text_proj_bias),
        ("ffn_proj_bias", &encoders.ffn_proj_bias),
    ];
    for (name, vals) in enc_slots {
        out.push_str(&format!("encoder {name} {}\n", vals.len()));
        out.push_str(&hex_line(vals));
        out.push('\n');
    }
    let stacks: [(&str, &ConvStack); 3] =
        [("tl_head", &nets.tl_head), ("psi", &nets.psi), ("phi", &nets.phi)];
    for (name, stack) in stacks {
        for (i, layer) in stack.layers.iter().enumerate() {
            out.push_str(&format!(
                "net {name} {i} {} {} {} {} {}\n",
                layer.kh, layer.kw, layer.cin, layer.cout, layer.stride
            ));
            out.push_str(&hex_line(&layer.kernel));
            out.push('\n');
            out.push_str(&hex_line(&layer.bias));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

/// Parses an `arrange-ckpt/1` document.
pub fn read_checkpoint(text: &str) -> Result<(PolicyNets, EncoderParams, PartitionPolicy, u64)> {
    let mut lines = text.lines().peekable();
    if lines.next() != Some("arrange-ckpt/1") {
        return Err(EngineError::Format("missing arrange-ckpt/1 header".into()));
    }
    let mut partition = PartitionPolicy::Both;
    let mut seed = 0u64;
    let mut crop_size = crate::policy::DEFAULT_CROP_SIZE;
    let mut encoders = EncoderParams {
        visual_proj: vec![0.0; EMB_DIM * F_VIS],
        visual_proj_bias: vec![0.0; EMB_DIM],
        visual_norm_gain: vec![1.0; F_VIS],
        visual_norm_bias: vec![0.0; F_VIS],
        text_proj: vec![0.0; EMB_DIM * F_TXT],
        text_proj_bias: vec![0.0; EMB_DIM],
        ffn_proj_bias: vec![0.0; EMB_DIM],
    };
    let mut stacks: [(&str, Vec<ConvLayer>); 3] =
        [("tl_head", Vec::new()), ("psi", Vec::new()), ("phi", Vec::new())];
    while let Some(line) = lines.next() {
        if line == "end" {
            break;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| EngineError::Format(format!("bad line '{line}'")))?;
        match key {
            "partition" => partition = PartitionPolicy::parse(rest)?,
            "seed" => {
                seed = rest.parse().map_err(|e| EngineError::Format(format!("bad seed: {e}")))?
            }
            "crop_size" => {
                crop_size = rest
                    .parse()
                    .map_err(|e| EngineError::Format(format!("bad crop_size: {e}")))?
            }
            "encoder" => {
                let (name, len) = rest
                    .split_once(' ')
                    .ok_or_else(|| EngineError::Format("bad encoder line".into()))?;
                let len: usize =
                    len.parse().map_err(|_| EngineError::Format("bad encoder length".into()))?;
                let payload = lines
                    .next()
                    .ok_or_else(|| EngineError::Format("missing encoder payload".into()))?;
                let vals = parse_hex_line(payload, len)?;
                let slot = match name {
                    "visual_proj" => &mut encoders.visual_proj,
                    "visual_proj_bias" => &mut encoders.visual_proj_bias,
                    "visual_norm_gain" => &mut encoders.visual_norm_gain,
                    "visual_norm_bias" => &mut encoders.visual_norm_bias,
                    "text_proj" => &mut encoders.text_proj,
                    "text_proj_bias" => &mut encoders.text_proj_bias,
                    "ffn_proj_bias" => &mut encoders.ffn_proj_bias,
                    other => {
                        return Err(EngineError::Format(format!("unknown encoder slot '{other}'")))
                    }
                };
                if slot.len() != len {
                    return Err(EngineError::Format(format!(
                        "encoder slot {name} has length {}, file says {len}",
                        slot.len()
                    )));
                }
                *slot = vals;
            }
            "net" => {
                let p: Vec<&str> = rest.split_whitespace().collect();
                if p.len() != 7 {
                    return Err(EngineError::Format(format!("bad net line '{line}'")));
                }
                let name = p[0];
                let parse_u =
                    |s: &str| s.parse::<usize>().map_err(|_| EngineError::Format("bad net dim".into()));
                let (kh, kw, cin, cout, stride) =
                    (parse_u(p[2])?, parse_u(p[3])?, parse_u(p[4])?, parse_u(p[5])?, parse_u(p[6])?);
                let mut layer = ConvLayer::zeros(kh, kw, cin, cout)?;
                layer.stride = stride;
                let kline = lines
                    .next()
                    .ok_or_else(|| EngineError::Format("missing kernel payload".into()))?;
                layer.kernel = parse_hex_line(kline, kh * kw * cin * cout)?;
                let bline = lines
                    .next()
                    .ok_or_else(|| EngineError::Format("missing bias payload".into()))?;
                layer.bias = parse_hex_line(bline, cout)?;
                let stack = stacks
                    .iter_mut()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| EngineError::Format(format!("unknown net '{name}'")))?;
                stack.1.push(layer);
            }
            other => return Err(EngineError::Format(format!("unknown key '{other}'"))),
        }
    }
    let [tl, psi, phi] = stacks.map(|(_, layers)| ConvStack { layers });
    if tl.layers.is_empty() || psi.layers.is_empty() || phi.layers.is_empty() {
        return Err(EngineError::Format("checkpoint missing one or more net stacks".into()));
    }
    Ok((
        PolicyNets { tl_head: tl, psi, phi, crop_size },
        encoders,
        partition,
        seed,
    ))
}

// --------------------------------------------------------- arrange-emb/1

/// Serializes labeled embeddings as an `arrange-emb/1` exchange file.
pub fn write_embeddings(records: &[(u32, &EmbeddingVector)]) -> Result<String> {
    let dim = records
        .first()
        .map(|(_, e)| e.dim)
        .ok_or_else(|| EngineError::Param("no embedding records to write".into()))?;
    let mut out = format!("arrange-emb/1 dim={dim} count={}\n", records.len());
    for (id, e) in records {
        if e.dim != dim {
            return Err(EngineError::Shape("inconsistent embedding dims in export".into()));
        }
        out.push_str(&format!("{id} {}\n", hex_line(&e.values)));
    }
    Ok(out)
}

/// Parses an `arrange-emb/1` exchange file.
pub fn read_embeddings(text: &str) -> Result<Vec<(u32, EmbeddingVector)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EngineError::Format("empty embedding file".into()))?;
    let rest = header
        .strip_prefix("arrange-emb/1 ")
        .ok_or_else(|| EngineError::Format("missing arrange-emb/1 header".into()))?;
    let mut dim = None;
    let mut count = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("dim=") {
            dim = v.parse::<usize>().ok();
        } else if let Some(v) = part.strip_prefix("count=") {
            count = v.parse::<usize>().ok();
        }
    }
    let dim = dim.ok_or_else(|| EngineError::Format("header missing dim".into()))?;
    let count = count.ok_or_else(|| EngineError::Format("header missing count".into()))?;
    let mut records = Vec::with_capacity(count);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, payload) = line
            .split_once(' ')
            .ok_or_else(|| EngineError::Format(format!("bad embedding record '{line}'")))?;
        let id: u32 =
            id.parse().map_err(|_| EngineError::Format(format!("bad embedding id '{id}'")))?;
        let values = parse_hex_line(payload, dim)?;
        records.push((id, EmbeddingVector { dim, values, normalized: false }));
    }
    if records.len() != count {
        return Err(EngineError::Format(format!(
            "header count {count} != {} records",
            records.len()
        )));
    }
    Ok(records)
}

// -------------------------------------------------------------- PPM/PGM

/// Binary PPM (P6) of a 3-channel observation with values in [0,1].
pub fn write_ppm(obs: &Grid2D) -> Result<Vec<u8>> {
    if obs.channels != 3 {
        return Err(EngineError::Shape("PPM export expects 3 channels".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", obs.width, obs.height).into_bytes();
    for r in 0..obs.height {
        for c in 0..obs.width {
            for k in 0..3 {
                out.push((obs.get(r, c, k).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Binary PGM (P5, 8-bit) label map: 0 = background, k = instance k.
pub fn write_label_pgm(height: usize, width: usize, labels: &[u16]) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(EngineError::Shape("label buffer does not match dimensions".into()));
    }
    if let Some(l) = labels.iter().find(|l| **l > 255) {
        return Err(EngineError::Format(format!("label {l} exceeds 8-bit PGM range")));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(labels.iter().map(|l| *l as u8));
    Ok(out)
}

fn parse_pnm_header<'a>(data: &'a [u8], magic: &str) -> Result<(usize, usize, usize, &'a [u8])> {
    // header tokens: magic, width, height, maxval, then a single whitespace
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(
            std::str::from_utf8(&data[start..pos])
                .map_err(|_| EngineError::Format("non-UTF8 PNM header".into()))?,
        );
    }
    if tokens.len() != 4 || tokens[0] != magic {
        return Err(EngineError::Format(format!("not a {magic} file")));
    }
    pos += 1; // single whitespace after maxval
    let width: usize =
        tokens[1].parse().map_err(|_| EngineError::Format("bad PNM width".into()))?;
    let height: usize =
        tokens[2].parse().map_err(|_| EngineError::Format("bad PNM height".into()))?;
    let maxval: usize =
        tokens[3].parse().map_err(|_| EngineError::Format("bad PNM maxval".into()))?;
    Ok((width, height, maxval, &data[pos.min(data.len())..]))
}

/// Parses an 8-bit P5 PGM label map.
pub fn read_label_pgm(data: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (width, height, maxval, body) = parse_pnm_header(data, "P5")?;
    if maxval != 255 {
        return Err(EngineError::Format(format!(
            "label PGM must be 8-bit (maxval 255), got {maxval}"
        )));
    }
    if body.len() < width * height {
        return Err(EngineError::Format("PGM body truncated".into()));
    }
    Ok((height, width, body[..width * height].iter().map(|b| *b as u16).collect()))
}

/// 16-bit big-endian P5 PGM of a confidence map: value = round((s+1)/2 * 65535).
pub fn write_confidence_pgm(map: &Grid2D) -> Result<Vec<u8>> {
    if map.channels != 1 {
        return Err(EngineError::Shape("confidence export expects 1 channel".into()));
    }
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for v in &map.data {
        let q = (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// 16-bit PGM dump of an arbitrary score map, min-max normalized.
pub fn write_score_pgm(map: &Grid2D) -> Result<Vec<u8>> {
    if map.channels != 1 {
        return Err(EngineError::Shape("score export expects 1 channel".into()));
    }
    let lo = map.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for v in &map.data {
        let q = (((v - lo) / span) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}
