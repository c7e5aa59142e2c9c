//! Instance segmentation of the rendered observation: 4-connected components
//! of non-background pixels, split at exact color boundaries. The toy
//! renderer uses exact palette colors, so this is an exact instance oracle.

use crate::error::{EngineError, Result};
use crate::grid::Grid2D;

/// Binary mask plus tight bounding box for one segmented object.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub id: u32,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    /// (row0, col0, row1, col1), inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub area: usize,
}

impl InstanceMask {
    #[inline]
    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.width + c]
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i / w, i % w))
    }
}

/// Masks ordered by the row-major position of their bbox top-left corner,
/// with ids dense from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceMask>,
}

pub const DEFAULT_MIN_AREA: usize = 4;

fn finalize(height: usize, width: usize, mut masks: Vec<InstanceMask>) -> SegmentationResult {
    masks.sort_by_key(|m| (m.bbox.0, m.bbox.1, m.bbox.2, m.bbox.3));
    for (i, m) in masks.iter_mut().enumerate() {
        m.id = (i + 1) as u32;
    }
    SegmentationResult { height, width, instances: masks }
}

fn mask_from_pixels(height: usize, width: usize, px: &[usize]) -> InstanceMask {
    let mut mask = vec![false; height * width];
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for &i in px {
        mask[i] = true;
        let (r, c) = (i / width, i % width);
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
    }
    InstanceMask { id: 0, height, width, mask, bbox: (r0, c0, r1, c1), area: px.len() }
}

/// Segments a 3-channel observation into per-object instance masks.
pub fn segment(obs: &Grid2D, background: [f64; 3], min_area: usize) -> Result<SegmentationResult> {
    if obs.channels != 3 {
        return Err(EngineError::Shape(format!(
            "segment expects a 3-channel observation, got {}",
            obs.channels
        )));
    }
    let (h, w) = (obs.height, obs.width);
    let mut visited = vec![false; h * w];
    let mut masks = Vec::new();
    let color_at = |i: usize| [obs.data[i * 3], obs.data[i * 3 + 1], obs.data[i * 3 + 2]];
    for start in 0..h * w {
        if visited[start] {
            continue;
        }
        let col = color_at(start);
        if col == background {
            visited[start] = true;
            continue;
        }
        // flood fill over exactly-equal colors, 4-connectivity
        let mut stack = vec![start];
        let mut px = Vec::new();
        visited[start] = true;
        while let Some(i) = stack.pop() {
            px.push(i);
            let (r, c) = (i / w, i % w);
            let push = |j: usize, stack: &mut Vec<usize>, visited: &mut Vec<bool>| {
                if !visited[j] && color_at(j) == col {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - w, &mut stack, &mut visited);
            }
            if r + 1 < h {
                push(i + w, &mut stack, &mut visited);
            }
            if c > 0 {
                push(i - 1, &mut stack, &mut visited);
            }
            if c + 1 < w {
                push(i + 1, &mut stack, &mut visited);
            }
        }
        if px.len() >= min_area {
            masks.push(mask_from_pixels(h, w, &px));
        }
    }
    Ok(finalize(h, w, masks))
}

/// Square mask-zeroed crop of one instance, centered on the bbox center,
/// zero-filled where it exits the image.
pub fn crop(obs: &Grid2D, inst: &InstanceMask, pad: usize) -> Grid2D {
    let (r0, c0, r1, c1) = inst.bbox;
    let bh = r1 - r0 + 1;
    let bw = c1 - c0 + 1;
    let side = bh.max(bw) + 2 * pad;
    let ctr_r = (r0 + r1) as isize / 2;
    let ctr_c = (c0 + c1) as isize / 2;
    let half = (side as isize - 1) / 2;
    let mut out = Grid2D::zeros(side, side, obs.channels);
    for r in 0..side {
        for c in 0..side {
            let sr = ctr_r - half + r as isize;
            let sc = ctr_c - half + c as isize;
            if sr < 0 || sc < 0 || sr >= obs.height as isize || sc >= obs.width as isize {
                continue;
            }
            let (sr, sc) = (sr as usize, sc as usize);
            if !inst.contains(sr, sc) {
                continue;
            }
            for ch in 0..obs.channels {
                out.set(r, c, ch, obs.get(sr, sc, ch));
            }
        }
    }
    out
}

/// Rebuilds a SegmentationResult from a label map (0 = background, k = the
/// k-th instance). Non-contiguous labels are re-densified.
pub fn from_label_map(height: usize, width: usize, labels: &[u16]) -> Result<SegmentationResult> {
    if labels.len() != height * width {
        return Err(EngineError::Format(format!(
            "label map length {} != {}x{}",
            labels.len(),
            height,
            width
        )));
    }
    let mut by_label: std::collections::BTreeMap<u16, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            by_label.entry(l).or_default().push(i);
        }
    }
    let masks: Vec<InstanceMask> = by_label
        .values()
        .map(|px| mask_from_pixels(height, width, px))
        .collect();
    Ok(finalize(height, width, masks))
}

/// Flattens a segmentation result back into a label map.
pub fn to_label_map(seg: &SegmentationResult) -> Vec<u16> {
    let mut out = vec![0u16; seg.height * seg.width];
    for inst in &seg.instances {
        for (i, b) in inst.mask.iter().enumerate() {
            if *b {
                out[i] = inst.id as u16;
            }
        }
    }
    out
}
