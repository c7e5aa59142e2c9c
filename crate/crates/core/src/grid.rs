//! Deterministic raster math: rotation, cross-correlation, softmax and
//! cross-entropy with analytic gradients, argmax. All loops use a fixed
//! summation order so outputs are bit-identical across runs.

use crate::error::{EngineError, Result};

/// Number of discrete rotation angles in the placement sweep.
pub const NUM_ROTATIONS: usize = 36;

/// H x W x C float raster in row-major (row, col, channel) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid2D {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Grid2D { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(EngineError::Shape(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Grid2D { height, width, channels, data })
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.data[(r * self.width + c) * self.channels + ch] = v;
    }

    /// Extracts a single channel as a new 1-channel grid.
    pub fn channel(&self, ch: usize) -> Grid2D {
        let mut out = Grid2D::zeros(self.height, self.width, 1);
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[r * self.width + c] = self.get(r, c, ch);
            }
        }
        out
    }

    /// Concatenates `other` after `self` along the channel axis.
    pub fn concat_channels(&self, other: &Grid2D) -> Result<Grid2D> {
        if self.height != other.height || self.width != other.width {
            return Err(EngineError::Shape("concat_channels: spatial dims differ".into()));
        }
        let cc = self.channels + other.channels;
        let mut out = Grid2D::zeros(self.height, self.width, cc);
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..self.channels {
                    out.set(r, c, ch, self.get(r, c, ch));
                }
                for ch in 0..other.channels {
                    out.set(r, c, self.channels + ch, other.get(r, c, ch));
                }
            }
        }
        Ok(out)
    }
}

/// Per-pixel probability raster; sums to 1.
#[derive(Debug, Clone)]
pub struct Distribution2D {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

/// One of the 36 discrete rotation angles, 10*j degrees for j in [1, 36].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationAngle {
    index: usize,
}

impl RotationAngle {
    pub fn new(index: usize) -> Result<Self> {
        if index == 0 || index > NUM_ROTATIONS {
            return Err(EngineError::Param(format!("rotation index {index} outside [1, {NUM_ROTATIONS}]")));
        }
        Ok(RotationAngle { index })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn degrees(&self) -> f64 {
        10.0 * self.index as f64
    }

    /// All 36 angles in ascending index order.
    pub fn all() -> impl Iterator<Item = RotationAngle> {
        (1..=NUM_ROTATIONS).map(|j| RotationAngle { index: j })
    }

    /// Nearest 10-degree bin for an arbitrary angle, ties to the smaller index.
    /// 0 degrees maps to index 36 (a full turn).
    pub fn from_degrees(theta: f64) -> RotationAngle {
        let t = theta.rem_euclid(360.0);
        let lo = (t / 10.0).floor() as i64;
        let hi = lo + 1;
        let d_lo = t - 10.0 * lo as f64;
        let d_hi = 10.0 * hi as f64 - t;
        let bin = if d_lo <= d_hi { lo } else { hi };
        let mut j = bin.rem_euclid(36);
        if j == 0 {
            j = 36;
        }
        RotationAngle { index: j as usize }
    }
}

/// Rotates a square crop counter-clockwise about its exact center using
/// inverse-mapped nearest-neighbor sampling. Samples falling outside the
/// source are filled with 0. Exact index permutations at quarter turns.
pub fn rotate_crop(crop: &Grid2D, angle: RotationAngle) -> Result<Grid2D> {
    rotate_crop_degrees(crop, angle.degrees())
}

/// Same as [`rotate_crop`] for an arbitrary angle in degrees.
///
/// The angle is decomposed into an exact quarter-turn index permutation and
/// a residual rotation in [0, 90) resampled by nearest neighbor. Composing
/// quarter turns last makes `rotate(x, t + 90) == rotate90(rotate(x, t))`
/// hold exactly for every angle, which is what the placement stage's
/// quarter-turn equivariance relies on.
pub fn rotate_crop_degrees(crop: &Grid2D, degrees: f64) -> Result<Grid2D> {
    if crop.height != crop.width {
        return Err(EngineError::Shape(format!(
            "rotate_crop requires a square crop, got {}x{}",
            crop.height, crop.width
        )));
    }
    let n = crop.height;
    let ch = crop.channels;
    let t = degrees.rem_euclid(360.0);
    let quarters = (t / 90.0).floor() as u32 % 4;
    let residual = t - 90.0 * (t / 90.0).floor();

    let mut stage = if residual == 0.0 {
        crop.clone()
    } else {
        let mut out = Grid2D::zeros(n, n, ch);
        let ctr = (n as f64 - 1.0) / 2.0;
        let rad = residual.to_radians();
        let (sin, cos) = rad.sin_cos();
        for r in 0..n {
            for c in 0..n {
                // Screen-CCW rotation with rows growing downward: inverse map.
                let xp = c as f64 - ctr;
                let yp = r as f64 - ctr;
                let sx = xp * cos - yp * sin + ctr;
                let sy = xp * sin + yp * cos + ctr;
                let sc = sx.round();
                let sr = sy.round();
                if sr >= 0.0 && sc >= 0.0 && (sr as usize) < n && (sc as usize) < n {
                    let (sr, sc) = (sr as usize, sc as usize);
                    for k in 0..ch {
                        out.set(r, c, k, crop.get(sr, sc, k));
                    }
                }
            }
        }
        out
    };
    if quarters > 0 {
        let mut out = Grid2D::zeros(n, n, ch);
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = match quarters {
                    1 => (c, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - c),
                    _ => (n - 1 - c, r),
                };
                for k in 0..ch {
                    out.set(r, c, k, stage.get(sr, sc, k));
                }
            }
        }
        stage = out;
    }
    Ok(stage)
}

/// Exact counter-clockwise quarter-turn of any rectangular grid: output
/// position (r, c) takes the value at input position (c, H_out - 1 - r).
pub fn rot90(g: &Grid2D) -> Grid2D {
    let mut out = Grid2D::zeros(g.width, g.height, g.channels);
    for r in 0..out.height {
        for c in 0..out.width {
            for k in 0..g.channels {
                out.set(r, c, k, g.get(c, out.height - 1 - r, k));
            }
        }
    }
    out
}

/// Zero-padded cross-correlation of a multi-channel feature map with a
/// multi-channel kernel, producing a single-channel score map of the same
/// spatial size. Summation order is kernel row, then column, then channel.
pub fn cross_correlate(feature: &Grid2D, kernel: &Grid2D) -> Result<Grid2D> {
    if kernel.channels != feature.channels {
        return Err(EngineError::Shape(format!(
            "kernel channels {} != feature channels {}",
            kernel.channels, feature.channels
        )));
    }
    if kernel.height % 2 == 0 || kernel.width % 2 == 0 {
        return Err(EngineError::Shape("kernel spatial dims must be odd".into()));
    }
    if kernel.height > feature.height || kernel.width > feature.width {
        return Err(EngineError::Shape("kernel larger than feature".into()));
    }
    let (h, w, ch) = (feature.height, feature.width, feature.channels);
    let (kh, kw) = (kernel.height, kernel.width);
    let (ph, pw) = (kh / 2, kw / 2);
    let planes = to_planes(feature);
    let mut out = Grid2D::zeros(h, w, 1);
    // One shifted scaled-add per kernel tap, restricted to the in-bounds
    // window; skipping exact-zero taps only drops 0.0 terms. The tap-major
    // order keeps mathematically tied outputs bit-identical (each tied pixel
    // accumulates the same value sequence), which the argmax tie rules rely
    // on.
    for kr in 0..kh {
        let dr = kr as isize - ph as isize;
        for kc in 0..kw {
            let dc = kc as isize - pw as isize;
            let (umin, umax, vmin, vmax) = tap_window(h, w, dr, dc);
            for k in 0..ch {
                let val = kernel.data[(kr * kw + kc) * ch + k];
                if val == 0.0 {
                    continue;
                }
                let plane = &planes[k];
                for u in umin..umax {
                    let src = ((u as isize + dr) as usize) * w + (vmin as isize + dc) as usize;
                    let dst = u * w + vmin;
                    let n = vmax - vmin;
                    let (orow, frow) = (&mut out.data[dst..dst + n], &plane[src..src + n]);
                    for i in 0..n {
                        orow[i] += val * frow[i];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cross-correlation with the same contract as [`cross_correlate`] but a
/// SIMD row-dot inner loop whose summation order differs from the tap-major
/// reference, so mathematically tied outputs may differ in the last bits.
/// Intended for the training loss, which has no argmax downstream; decision
/// paths must use [`cross_correlate`] so exact ties stay bit-identical.
pub fn cross_correlate_fast(feature: &Grid2D, kernel: &Grid2D) -> Result<Grid2D> {
    if kernel.channels != feature.channels {
        return Err(EngineError::Shape(format!(
            "kernel channels {} != feature channels {}",
            kernel.channels, feature.channels
        )));
    }
    if kernel.height % 2 == 0 || kernel.width % 2 == 0 {
        return Err(EngineError::Shape("kernel spatial dims must be odd".into()));
    }
    if kernel.height > feature.height || kernel.width > feature.width {
        return Err(EngineError::Shape("kernel larger than feature".into()));
    }
    let (h, w, ch) = (feature.height, feature.width, feature.channels);
    let (kh, kw) = (kernel.height, kernel.width);
    let (ph, pw) = (kh / 2, kw / 2);
    let fd = &feature.data;
    let kd = &kernel.data;
    let mut out = Grid2D::zeros(h, w, 1);
    for u in 0..h {
        for v in 0..w {
            let mut acc = 0.0;
            for kr in 0..kh {
                let r = u as isize + kr as isize - ph as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                let kc0 = pw.saturating_sub(v);
                let kc1 = kw.min(w + pw - v);
                if kc0 >= kc1 {
                    continue;
                }
                let fbase = (r as usize * w + v + kc0 - pw) * ch;
                let kbase = (kr * kw + kc0) * ch;
                let len = (kc1 - kc0) * ch;
                acc += simd_dot(&fd[fbase..fbase + len], &kd[kbase..kbase + len]);
            }
            out.data[u * w + v] = acc;
        }
    }
    Ok(out)
}

/// Dot product with four independent SIMD accumulators.
#[inline]
fn simd_dot(a: &[f64], b: &[f64]) -> f64 {
    use wide::f64x4;
    let n16 = a.len() - a.len() % 16;
    let load = |s: &[f64], i: usize| -> f64x4 {
        let arr: [f64; 4] = s[i..i + 4].try_into().unwrap();
        f64x4::from(arr)
    };
    let mut acc0 = f64x4::ZERO;
    let mut acc1 = f64x4::ZERO;
    let mut acc2 = f64x4::ZERO;
    let mut acc3 = f64x4::ZERO;
    let mut i = 0;
    while i < n16 {
        acc0 = load(a, i).mul_add(load(b, i), acc0);
        acc1 = load(a, i + 4).mul_add(load(b, i + 4), acc1);
        acc2 = load(a, i + 8).mul_add(load(b, i + 8), acc2);
        acc3 = load(a, i + 12).mul_add(load(b, i + 12), acc3);
        i += 16;
    }
    let mut s = ((acc0 + acc1) + (acc2 + acc3)).reduce_add();
    for (x, y) in a[n16..].iter().zip(&b[n16..]) {
        s += x * y;
    }
    s
}

/// Splits interleaved channel data into one contiguous plane per channel.
fn to_planes(g: &Grid2D) -> Vec<Vec<f64>> {
    let (h, w, ch) = (g.height, g.width, g.channels);
    let mut planes = vec![vec![0.0; h * w]; ch];
    for i in 0..h * w {
        for k in 0..ch {
            planes[k][i] = g.data[i * ch + k];
        }
    }
    planes
}

/// In-bounds output window for a kernel tap shifted by (dr, dc).
#[inline]
fn tap_window(h: usize, w: usize, dr: isize, dc: isize) -> (usize, usize, usize, usize) {
    let umin = (-dr).max(0) as usize;
    let umax = ((h as isize - dr).min(h as isize)).max(0) as usize;
    let vmin = (-dc).max(0) as usize;
    let vmax = ((w as isize - dc).min(w as isize)).max(0) as usize;
    (umin, umax, vmin, vmax)
}

/// y += alpha * x over equal-length slices.
#[inline]
fn simd_axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    use wide::f64x4;
    let n4 = x.len() - x.len() % 4;
    let a = f64x4::splat(alpha);
    for (xs, ys) in x[..n4].chunks_exact(4).zip(y[..n4].chunks_exact_mut(4)) {
        let xa: [f64; 4] = xs.try_into().unwrap();
        let ya: [f64; 4] = ys.try_into().unwrap();
        let r: [f64; 4] = f64x4::from(xa).mul_add(a, f64x4::from(ya)).into();
        ys.copy_from_slice(&r);
    }
    for (xv, yv) in x[n4..].iter().zip(y[n4..].iter_mut()) {
        *yv += alpha * xv;
    }
}

/// Gradients of a scalar objective through [`cross_correlate`]: given
/// dL/d(out), returns (dL/d(feature), dL/d(kernel)).
pub fn cross_correlate_backward(
    feature: &Grid2D,
    kernel: &Grid2D,
    grad_out: &Grid2D,
) -> Result<(Grid2D, Grid2D)> {
    if grad_out.height != feature.height || grad_out.width != feature.width || grad_out.channels != 1
    {
        return Err(EngineError::Shape("grad_out shape mismatch in correlation backward".into()));
    }
    let (h, w, ch) = (feature.height, feature.width, feature.channels);
    let (kh, kw) = (kernel.height, kernel.width);
    let (ph, pw) = (kh / 2, kw / 2);
    let fd = &feature.data;
    let kd = &kernel.data;
    let go = &grad_out.data;
    let mut gf = Grid2D::zeros(h, w, ch);
    let mut gk = Grid2D::zeros(kh, kw, ch);
    // Mirror of the forward loop: each output pixel scatters its upstream
    // gradient along the same contiguous rows it read, into both the kernel
    // gradient (scaled feature row) and the feature gradient (scaled kernel
    // row).
    for u in 0..h {
        for v in 0..w {
            let g = go[u * w + v];
            if g == 0.0 {
                continue;
            }
            for kr in 0..kh {
                let r = u as isize + kr as isize - ph as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                let kc0 = pw.saturating_sub(v);
                let kc1 = kw.min(w + pw - v);
                if kc0 >= kc1 {
                    continue;
                }
                let fbase = (r as usize * w + v + kc0 - pw) * ch;
                let kbase = (kr * kw + kc0) * ch;
                let len = (kc1 - kc0) * ch;
                simd_axpy(g, &fd[fbase..fbase + len], &mut gk.data[kbase..kbase + len]);
                simd_axpy(g, &kd[kbase..kbase + len], &mut gf.data[fbase..fbase + len]);
            }
        }
    }
    Ok((gf, gk))
}

/// Numerically stabilized softmax over all pixels of a single-channel map.
pub fn softmax2d(score: &Grid2D, temperature: f64) -> Result<Distribution2D> {
    if temperature <= 0.0 {
        return Err(EngineError::Param(format!("temperature must be > 0, got {temperature}")));
    }
    if score.channels != 1 {
        return Err(EngineError::Shape("softmax2d expects a single-channel map".into()));
    }
    if score.data.is_empty() {
        return Err(EngineError::Shape("softmax2d on empty grid".into()));
    }
    let max = score.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = score.data.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Ok(Distribution2D { height: score.height, width: score.width, probs })
}

/// Coordinates of the maximum pixel; ties break to the smallest row-major index.
pub fn argmax_pixel(score: &Grid2D) -> Result<(usize, usize)> {
    if score.channels != 1 {
        return Err(EngineError::Shape("argmax_pixel expects a single-channel map".into()));
    }
    if score.data.is_empty() {
        return Err(EngineError::Shape("argmax_pixel on empty grid".into()));
    }
    let mut best = 0usize;
    for (i, v) in score.data.iter().enumerate() {
        if *v > score.data[best] {
            best = i;
        }
    }
    Ok((best / score.width, best % score.width))
}

/// Floor probability applied inside [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// -ln of the predicted probability at the one-hot target pixel.
pub fn cross_entropy(pred: &Distribution2D, target: (usize, usize)) -> Result<f64> {
    let (u, v) = target;
    if u >= pred.height || v >= pred.width {
        return Err(EngineError::Index(format!(
            "target ({u},{v}) outside {}x{}",
            pred.height, pred.width
        )));
    }
    let p = pred.probs[u * pred.width + v].max(PROB_FLOOR);
    Ok(-p.ln())
}

/// A single convolution layer. Kernel layout is (kh, kw, cin, cout) row-major,
/// same-padding with zero fill so score maps align with the observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
}

impl ConvLayer {
    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(EngineError::Shape("conv kernel dims must be odd".into()));
        }
        Ok(ConvLayer {
            kh,
            kw,
            cin,
            cout,
            kernel: vec![0.0; kh * kw * cin * cout],
            bias: vec![0.0; cout],
            stride: 1,
        })
    }

    #[inline]
    pub fn kidx(&self, kr: usize, kc: usize, ci: usize, co: usize) -> usize {
        ((kr * self.kw + kc) * self.cin + ci) * self.cout + co
    }
}

/// Same-padding forward convolution (cross-correlation form) plus bias.
pub fn conv_forward(layer: &ConvLayer, input: &Grid2D) -> Result<Grid2D> {
    if input.channels != layer.cin {
        return Err(EngineError::Shape(format!(
            "conv_forward: input channels {} != layer cin {}",
            input.channels, layer.cin
        )));
    }
    if layer.stride != 1 {
        return Err(EngineError::Param("only stride 1 is supported".into()));
    }
    let (h, w) = (input.height, input.width);
    let (ph, pw) = (layer.kh / 2, layer.kw / 2);
    let mut out = Grid2D::zeros(h, w, layer.cout);
    for u in 0..h {
        for v in 0..w {
            let obase = (u * w + v) * layer.cout;
            out.data[obase..obase + layer.cout].copy_from_slice(&layer.bias);
            for kr in 0..layer.kh {
                let r = u as isize + kr as isize - ph as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for kc in 0..layer.kw {
                    let c = v as isize + kc as isize - pw as isize;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let ibase = (r as usize * w + c as usize) * layer.cin;
                    for ci in 0..layer.cin {
                        let x = input.data[ibase + ci];
                        if x == 0.0 {
                            continue;
                        }
                        let kbase = ((kr * layer.kw + kc) * layer.cin + ci) * layer.cout;
                        for co in 0..layer.cout {
                            out.data[obase + co] += x * layer.kernel[kbase + co];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Analytic gradients of the same-padding correlation.
/// Returns (grad_kernel, grad_bias, grad_input).
pub fn conv_backward(
    layer: &ConvLayer,
    input: &Grid2D,
    grad_out: &Grid2D,
) -> Result<(Vec<f64>, Vec<f64>, Grid2D)> {
    if input.channels != layer.cin {
        return Err(EngineError::Shape("conv_backward: input channel mismatch".into()));
    }
    if grad_out.height != input.height
        || grad_out.width != input.width
        || grad_out.channels != layer.cout
    {
        return Err(EngineError::Shape("conv_backward: grad_out shape mismatch".into()));
    }
    let (h, w) = (input.height, input.width);
    let (ph, pw) = (layer.kh / 2, layer.kw / 2);
    let mut gk = vec![0.0; layer.kernel.len()];
    let mut gb = vec![0.0; layer.cout];
    let mut gi = Grid2D::zeros(h, w, layer.cin);
    for u in 0..h {
        for v in 0..w {
            let obase = (u * w + v) * layer.cout;
            for co in 0..layer.cout {
                gb[co] += grad_out.data[obase + co];
            }
            for kr in 0..layer.kh {
                let r = u as isize + kr as isize - ph as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for kc in 0..layer.kw {
                    let c = v as isize + kc as isize - pw as isize;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let ibase = (r as usize * w + c as usize) * layer.cin;
                    for ci in 0..layer.cin {
                        let kbase = ((kr * layer.kw + kc) * layer.cin + ci) * layer.cout;
                        let x = input.data[ibase + ci];
                        let mut acc = 0.0;
                        for co in 0..layer.cout {
                            let g = grad_out.data[obase + co];
                            gk[kbase + co] += g * x;
                            acc += g * layer.kernel[kbase + co];
                        }
                        gi.data[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((gk, gb, gi))
}

/// A small stack of conv layers with ReLU between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

/// Cached activations of one stack forward pass, used by the backward pass.
pub struct StackCache {
    /// Input followed by each layer's pre-activation output.
    pub pre: Vec<Grid2D>,
}

impl ConvStack {
    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.cout).unwrap_or(0)
    }

    pub fn forward(&self, input: &Grid2D) -> Result<Grid2D> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &Grid2D) -> Result<(Grid2D, StackCache)> {
        let mut pre = vec![input.clone()];
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = conv_forward(layer, &cur)?;
            pre.push(out.clone());
            cur = out;
            if i + 1 < self.layers.len() {
                for v in &mut cur.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok((cur, StackCache { pre }))
    }

    /// Backpropagates through the stack. Returns per-layer (grad_kernel,
    /// grad_bias) in layer order plus the gradient wrt the stack input.
    pub fn backward(
        &self,
        cache: &StackCache,
        grad_out: &Grid2D,
    ) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, Grid2D)> {
        let n = self.layers.len();
        let mut grads = vec![(Vec::new(), Vec::new()); n];
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            // Layer input is pre[i] after ReLU (except the stack input itself).
            let lin = if i == 0 {
                cache.pre[0].clone()
            } else {
                let mut a = cache.pre[i].clone();
                for v in &mut a.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                a
            };
            let (gk, gb, mut gi) = conv_backward(&self.layers[i], &lin, &g)?;
            grads[i] = (gk, gb);
            if i > 0 {
                // ReLU gate on the producing layer's pre-activation.
                for (gv, pv) in gi.data.iter_mut().zip(cache.pre[i].data.iter()) {
                    if *pv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = gi;
        }
        Ok((grads, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid1(h: usize, w: usize, vals: &[f64]) -> Grid2D {
        Grid2D::from_data(h, w, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn rotate_full_turn_identity() {
        let g = grid1(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let r = rotate_crop(&g, RotationAngle::new(36).unwrap()).unwrap();
        assert_eq!(r, g);
    }

    #[test]
    fn rotate_quarter_turn_permutation() {
        // 1 at (row 0, col 1), 90 CCW -> 1 at (row 1, col 0)
        let mut g = Grid2D::zeros(3, 3, 1);
        g.set(0, 1, 0, 1.0);
        let r = rotate_crop(&g, RotationAngle::new(9).unwrap()).unwrap();
        assert_eq!(r.get(1, 0, 0), 1.0);
        assert_eq!(r.data.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn rotate_four_quarter_turns_identity() {
        let mut rng = StdRng::seed_from_u64(7);
        let g = Grid2D::from_data(6, 6, 2, (0..72).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut r = g.clone();
        for _ in 0..4 {
            r = rotate_crop(&r, RotationAngle::new(9).unwrap()).unwrap();
        }
        assert_eq!(r, g);
    }

    #[test]
    fn rot90_matches_square_quarter_turn_and_composes() {
        let mut rng = StdRng::seed_from_u64(9);
        let g = Grid2D::from_data(5, 5, 2, (0..50).map(|_| rng.gen::<f64>()).collect()).unwrap();
        assert_eq!(rot90(&g), rotate_crop(&g, RotationAngle::new(9).unwrap()).unwrap());
        // Rectangular: four turns are the identity.
        let rect = Grid2D::from_data(3, 5, 1, (0..15).map(|i| i as f64).collect()).unwrap();
        let mut r = rect.clone();
        for _ in 0..4 {
            r = rot90(&r);
        }
        assert_eq!(r, rect);
    }

    /// Index-permutation oracle for exact 90-degree rotations.
    fn rot90_oracle(g: &Grid2D) -> Grid2D {
        let n = g.height;
        let mut out = Grid2D::zeros(n, n, g.channels);
        for r in 0..n {
            for c in 0..n {
                for k in 0..g.channels {
                    out.set(r, c, k, g.get(c, n - 1 - r, k));
                }
            }
        }
        out
    }

    #[test]
    fn rotate_matches_permutation_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let g = Grid2D::from_data(7, 7, 1, (0..49).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let r = rotate_crop(&g, RotationAngle::new(9).unwrap()).unwrap();
        assert_eq!(r, rot90_oracle(&g));
    }

    #[test]
    fn rotate_non_square_errors() {
        let g = Grid2D::zeros(2, 3, 1);
        assert!(rotate_crop(&g, RotationAngle::new(9).unwrap()).is_err());
    }

    #[test]
    fn rotation_angle_binning() {
        assert_eq!(RotationAngle::from_degrees(90.0).index(), 9);
        assert_eq!(RotationAngle::from_degrees(95.0).index(), 9); // tie to smaller
        assert_eq!(RotationAngle::from_degrees(96.0).index(), 10);
        assert_eq!(RotationAngle::from_degrees(0.0).index(), 36);
    }

    /// Naive shift-and-dot oracle for cross-correlation.
    fn corr_oracle(feature: &Grid2D, kernel: &Grid2D) -> Grid2D {
        let (h, w) = (feature.height, feature.width);
        let (ph, pw) = (kernel.height / 2, kernel.width / 2);
        let mut out = Grid2D::zeros(h, w, 1);
        for u in 0..h as isize {
            for v in 0..w as isize {
                let mut acc = 0.0;
                for kr in 0..kernel.height as isize {
                    for kc in 0..kernel.width as isize {
                        let (r, c) = (u + kr - ph as isize, v + kc - pw as isize);
                        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                            continue;
                        }
                        for k in 0..feature.channels {
                            acc += feature.get(r as usize, c as usize, k)
                                * kernel.get(kr as usize, kc as usize, k);
                        }
                    }
                }
                out.set(u as usize, v as usize, 0, acc);
            }
        }
        out
    }

    #[test]
    fn correlate_delta_kernel_identity() {
        let mut rng = StdRng::seed_from_u64(1);
        let f = Grid2D::from_data(5, 5, 1, (0..25).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut k = Grid2D::zeros(3, 3, 1);
        k.set(1, 1, 0, 1.0);
        let out = cross_correlate(&f, &k).unwrap();
        assert_eq!(out.data, f.data);
    }

    #[test]
    fn correlate_constant_counts() {
        let f = Grid2D::from_data(5, 5, 1, vec![1.0; 25]).unwrap();
        let k = Grid2D::from_data(3, 3, 1, vec![1.0; 9]).unwrap();
        let out = cross_correlate(&f, &k).unwrap();
        assert_eq!(out.get(2, 2, 0), 9.0);
        assert_eq!(out.get(0, 0, 0), 4.0);
    }

    #[test]
    fn correlate_off_center_shift() {
        let mut rng = StdRng::seed_from_u64(2);
        let f = Grid2D::from_data(6, 6, 1, (0..36).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut k = Grid2D::zeros(3, 3, 1);
        k.set(0, 1, 0, 1.0); // one cell above center
        let out = cross_correlate(&f, &k).unwrap();
        assert_eq!(out, corr_oracle(&f, &k));
        // shifted copy: out(u,v) = f(u-1, v)
        assert_eq!(out.get(3, 2, 0), f.get(2, 2, 0));
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn correlate_matches_oracle_multichannel() {
        let mut rng = StdRng::seed_from_u64(5);
        let f = Grid2D::from_data(8, 7, 3, (0..168).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let k = Grid2D::from_data(3, 5, 3, (0..45).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let out = cross_correlate(&f, &k).unwrap();
        let exp = corr_oracle(&f, &k);
        for (a, b) in out.data.iter().zip(exp.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn correlate_channel_mismatch_errors() {
        let f = Grid2D::zeros(5, 5, 2);
        let k = Grid2D::zeros(3, 3, 1);
        assert!(cross_correlate(&f, &k).is_err());
    }

    #[test]
    fn softmax_uniform_on_constant() {
        let g = Grid2D::from_data(4, 8, 1, vec![3.5; 32]).unwrap();
        let d = softmax2d(&g, 2.0).unwrap();
        for p in &d.probs {
            assert!((p - 1.0 / 32.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_direct_values() {
        let g = grid1(1, 2, &[0.0, 3f64.ln()]);
        let d = softmax2d(&g, 1.0).unwrap();
        assert!((d.probs[0] - 0.25).abs() < 1e-12);
        assert!((d.probs[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_scale_invariance() {
        let mut rng = StdRng::seed_from_u64(11);
        let vals: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let g = grid1(3, 4, &vals);
        let scaled = grid1(3, 4, &vals.iter().map(|v| v * 5.0).collect::<Vec<_>>());
        let a = softmax2d(&g, 0.7).unwrap();
        let b = softmax2d(&scaled, 3.5).unwrap();
        for (x, y) in a.probs.iter().zip(b.probs.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let g = Grid2D::zeros(2, 2, 1);
        assert!(softmax2d(&g, 0.0).is_err());
        assert!(softmax2d(&g, -1.0).is_err());
    }

    #[test]
    fn argmax_basics() {
        let mut g = Grid2D::zeros(5, 9, 1);
        g.set(3, 7, 0, 2.0);
        assert_eq!(argmax_pixel(&g).unwrap(), (3, 7));
        let flat = Grid2D::from_data(4, 4, 1, vec![1.0; 16]).unwrap();
        assert_eq!(argmax_pixel(&flat).unwrap(), (0, 0));
        let mut tie = Grid2D::zeros(4, 4, 1);
        tie.set(1, 2, 0, 5.0);
        tie.set(3, 0, 0, 5.0);
        assert_eq!(argmax_pixel(&tie).unwrap(), (1, 2));
    }

    #[test]
    fn argmax_empty_errors() {
        let g = Grid2D::zeros(0, 0, 1);
        assert!(argmax_pixel(&g).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let one_hot = Distribution2D { height: 1, width: 2, probs: vec![0.0, 1.0] };
        assert_eq!(cross_entropy(&one_hot, (0, 1)).unwrap(), 0.0);
        let uniform = Distribution2D { height: 2, width: 2, probs: vec![0.25; 4] };
        assert!((cross_entropy(&uniform, (1, 1)).unwrap() - 4f64.ln()).abs() < 1e-12);
        let d = Distribution2D { height: 1, width: 2, probs: vec![0.25, 0.75] };
        assert!((cross_entropy(&d, (0, 1)).unwrap() - (-0.75f64.ln())).abs() < 1e-12);
        assert!(cross_entropy(&d, (0, 2)).is_err());
    }

    #[test]
    fn conv_identity_and_bias() {
        let mut rng = StdRng::seed_from_u64(9);
        let x = Grid2D::from_data(4, 4, 1, (0..16).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut id = ConvLayer::zeros(3, 3, 1, 1).unwrap();
        let center = id.kidx(1, 1, 0, 0);
        id.kernel[center] = 1.0;
        assert_eq!(conv_forward(&id, &x).unwrap().data, x.data);

        let mut b = ConvLayer::zeros(3, 3, 1, 2).unwrap();
        b.bias = vec![0.3, -0.7];
        let out = conv_forward(&b, &x).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(out.get(r, c, 0), 0.3);
                assert_eq!(out.get(r, c, 1), -0.7);
            }
        }
    }

    /// Naive triple-loop conv oracle.
    fn conv_oracle(layer: &ConvLayer, input: &Grid2D) -> Grid2D {
        let (h, w) = (input.height, input.width);
        let (ph, pw) = (layer.kh as isize / 2, layer.kw as isize / 2);
        let mut out = Grid2D::zeros(h, w, layer.cout);
        for u in 0..h as isize {
            for v in 0..w as isize {
                for co in 0..layer.cout {
                    let mut acc = layer.bias[co];
                    for kr in 0..layer.kh as isize {
                        for kc in 0..layer.kw as isize {
                            let (r, c) = (u + kr - ph, v + kc - pw);
                            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                                continue;
                            }
                            for ci in 0..layer.cin {
                                acc += input.get(r as usize, c as usize, ci)
                                    * layer.kernel[layer.kidx(kr as usize, kc as usize, ci, co)];
                            }
                        }
                    }
                    out.set(u as usize, v as usize, co, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = StdRng::seed_from_u64(21);
        let x = Grid2D::from_data(4, 4, 2, (0..32).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let mut layer = ConvLayer::zeros(3, 3, 2, 3).unwrap();
        for k in &mut layer.kernel {
            *k = rng.gen::<f64>() - 0.5;
        }
        for b in &mut layer.bias {
            *b = rng.gen::<f64>() - 0.5;
        }
        let out = conv_forward(&layer, &x).unwrap();
        let exp = conv_oracle(&layer, &x);
        for (a, b) in out.data.iter().zip(exp.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_backward_trivial_cases() {
        let mut rng = StdRng::seed_from_u64(13);
        let x = Grid2D::from_data(5, 5, 1, (0..25).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut layer = ConvLayer::zeros(3, 3, 1, 2).unwrap();
        for k in &mut layer.kernel {
            *k = rng.gen::<f64>() - 0.5;
        }
        let zeros = Grid2D::zeros(5, 5, 2);
        let (gk, gb, gi) = conv_backward(&layer, &x, &zeros).unwrap();
        assert!(gk.iter().all(|v| *v == 0.0));
        assert!(gb.iter().all(|v| *v == 0.0));
        assert!(gi.data.iter().all(|v| *v == 0.0));

        let g = Grid2D::from_data(5, 5, 2, (0..50).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let (_, gb, _) = conv_backward(&layer, &x, &g).unwrap();
        for co in 0..2 {
            let sum: f64 = (0..25).map(|i| g.data[i * 2 + co]).sum();
            assert!((gb[co] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let x = Grid2D::from_data(5, 5, 2, (0..50).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
        let mut layer = ConvLayer::zeros(3, 3, 2, 2).unwrap();
        for k in &mut layer.kernel {
            *k = rng.gen::<f64>() - 0.5;
        }
        for b in &mut layer.bias {
            *b = rng.gen::<f64>() - 0.5;
        }
        // Scalar objective: weighted sum of outputs with fixed weights.
        let wts: Vec<f64> = (0..50).map(|_| rng.gen::<f64>() - 0.5).collect();
        let loss = |l: &ConvLayer, inp: &Grid2D| -> f64 {
            conv_forward(l, inp)
                .unwrap()
                .data
                .iter()
                .zip(wts.iter())
                .map(|(o, w)| o * w)
                .sum()
        };
        let gout = Grid2D::from_data(5, 5, 2, wts.clone()).unwrap();
        let (gk, gb, gi) = conv_backward(&layer, &x, &gout).unwrap();

        let eps = 1e-4;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * eps);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "analytic {analytic} vs fd {fd}"
            );
        };
        for i in 0..layer.kernel.len() {
            let mut lp = layer.clone();
            lp.kernel[i] += eps;
            let mut lm = layer.clone();
            lm.kernel[i] -= eps;
            check(gk[i], loss(&lp, &x), loss(&lm, &x));
        }
        for i in 0..layer.bias.len() {
            let mut lp = layer.clone();
            lp.bias[i] += eps;
            let mut lm = layer.clone();
            lm.bias[i] -= eps;
            check(gb[i], loss(&lp, &x), loss(&lm, &x));
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            check(gi.data[i], loss(&layer, &xp), loss(&layer, &xm));
        }
    }

    #[test]
    fn softmax_argmax_commutes_with_temperature() {
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..30).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
            let g = grid1(5, 6, &vals);
            let base = argmax_pixel(&g).unwrap();
            for tau in [1e-3, 0.07, 1.0, 42.0] {
                let d = softmax2d(&g, tau).unwrap();
                let pg = grid1(5, 6, &d.probs);
                assert_eq!(argmax_pixel(&pg).unwrap(), base);
                assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
