//! From-scratch differentiable layer stack: same-size k=3 convolutions,
//! stride-2 down-convolutions, their transposed counterparts with pinned
//! output sizes, and per-channel PReLU.
//!
//! All parameters of a model live in one flat f64 vector; layer descriptors
//! carry offsets into it. Gradients are written into an equally shaped flat
//! buffer, so per-patch backward passes can run in parallel and be reduced
//! in a fixed order.

use super::NetConfig;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Channel-major activation tensor: data[c * spatial_len + flat].
#[derive(Debug, Clone)]
pub struct Tensor {
    pub channels: usize,
    pub spatial: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, spatial: &[usize]) -> Self {
        let len: usize = spatial.iter().product();
        Self { channels, spatial: spatial.to_vec(), data: vec![0.0; channels * len] }
    }

    pub fn from_channels(channels: Vec<Vec<f64>>, spatial: &[usize]) -> Self {
        let len: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(channels.len() * len);
        for c in &channels {
            assert_eq!(c.len(), len);
            data.extend_from_slice(c);
        }
        Self { channels: channels.len(), spatial: spatial.to_vec(), data }
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let len = self.spatial_len();
        &self.data[c * len..(c + 1) * len]
    }
}

fn strides_of(spatial: &[usize]) -> [usize; 3] {
    let d = spatial.len();
    let mut s = [0usize; 3];
    s[d - 1] = 1;
    for a in (0..d - 1).rev() {
        s[a] = s[a + 1] * spatial[a + 1];
    }
    s
}

// ---------------------------------------------------------------------------
// Convolution engine
// ---------------------------------------------------------------------------

/// Geometry of a convolution: kernel width, stride and zero padding per
/// axis (identical along every axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub const GEOM_SAME3: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, pad: 1 };
pub const GEOM_DOWN2: ConvGeometry = ConvGeometry { kernel: 2, stride: 2, pad: 0 };

/// ceil-mode output size: 15 -> 8 -> 4 under GEOM_DOWN2; same-size for
/// GEOM_SAME3.
pub fn conv_out_size(geom: ConvGeometry, n: usize) -> usize {
    // x valid iff some tap hits the (zero padded) input: ceil((n + 2p - k)/s) + 1
    (n + 2 * geom.pad - geom.kernel).div_ceil(geom.stride) + 1
}

/// Valid output range along one axis for a given tap offset, plus the flat
/// base/step bookkeeping (in units of the input stride).
#[derive(Debug, Clone, Copy)]
struct TapRange {
    lo: usize,
    hi: usize, // exclusive
}

fn tap_range(geom: ConvGeometry, tap: usize, n_in: usize, n_out: usize) -> TapRange {
    // need 0 <= s*x + tap - pad <= n_in - 1, 0 <= x < n_out
    let t = tap as isize - geom.pad as isize;
    let s = geom.stride as isize;
    let lo = if t >= 0 { 0 } else { ((-t) + s - 1) / s };
    let hi_in = (n_in as isize - 1 - t).div_euclid(s);
    let hi = hi_in.min(n_out as isize - 1);
    if hi < lo {
        TapRange { lo: 0, hi: 0 }
    } else {
        TapRange { lo: lo as usize, hi: hi as usize + 1 }
    }
}

/// Per-tap iteration plan: for x in box, out[out_base + x . out_strides]
/// pairs with in[in_base + x . in_steps].
#[derive(Debug, Clone)]
struct TapPlan {
    ranges: [TapRange; 3],
    out_strides: [usize; 3],
    in_steps: [usize; 3],
    in_base: isize,
    d: usize,
}

fn tap_plan(geom: ConvGeometry, taps_idx: &[usize], in_sp: &[usize], out_sp: &[usize]) -> TapPlan {
    let d = in_sp.len();
    let in_strides = strides_of(in_sp);
    let out_strides = strides_of(out_sp);
    let mut ranges = [TapRange { lo: 0, hi: 0 }; 3];
    let mut in_steps = [0usize; 3];
    let mut in_base = 0isize;
    for a in 0..d {
        ranges[a] = tap_range(geom, taps_idx[a], in_sp[a], out_sp[a]);
        in_steps[a] = geom.stride * in_strides[a];
        in_base += (taps_idx[a] as isize - geom.pad as isize) * in_strides[a] as isize;
    }
    TapPlan { ranges, out_strides, in_steps, in_base, d }
}

impl TapPlan {
    fn is_empty(&self) -> bool {
        (0..self.d).any(|a| self.ranges[a].hi <= self.ranges[a].lo)
    }
}

/// out[x] += w * in[y(x)] over the tap box.
fn axpy_tap(plan: &TapPlan, w: f64, out: &mut [f64], input: &[f64]) {
    if plan.is_empty() || w == 0.0 {
        return;
    }
    let r = &plan.ranges;
    match plan.d {
        2 => {
            for x0 in r[0].lo..r[0].hi {
                let ob = x0 * plan.out_strides[0];
                let ib = plan.in_base + (x0 * plan.in_steps[0]) as isize;
                let (lo, hi) = (r[1].lo, r[1].hi);
                if plan.in_steps[1] == 1 {
                    let ib = (ib + lo as isize) as usize;
                    let ob = ob + lo;
                    for i in 0..hi - lo {
                        out[ob + i] += w * input[ib + i];
                    }
                } else {
                    for x1 in lo..hi {
                        out[ob + x1] += w * input[(ib + (x1 * plan.in_steps[1]) as isize) as usize];
                    }
                }
            }
        }
        3 => {
            for x0 in r[0].lo..r[0].hi {
                for x1 in r[1].lo..r[1].hi {
                    let ob = x0 * plan.out_strides[0] + x1 * plan.out_strides[1];
                    let ib = plan.in_base
                        + (x0 * plan.in_steps[0]) as isize
                        + (x1 * plan.in_steps[1]) as isize;
                    let (lo, hi) = (r[2].lo, r[2].hi);
                    if plan.in_steps[2] == 1 {
                        let ib = (ib + lo as isize) as usize;
                        let ob = ob + lo;
                        for i in 0..hi - lo {
                            out[ob + i] += w * input[ib + i];
                        }
                    } else {
                        for x2 in lo..hi {
                            out[ob + x2] +=
                                w * input[(ib + (x2 * plan.in_steps[2]) as isize) as usize];
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// in[y(x)] += w * out[x] over the tap box (scatter / transpose of axpy).
fn scatter_tap(plan: &TapPlan, w: f64, out: &[f64], input: &mut [f64]) {
    if plan.is_empty() || w == 0.0 {
        return;
    }
    let r = &plan.ranges;
    match plan.d {
        2 => {
            for x0 in r[0].lo..r[0].hi {
                let ob = x0 * plan.out_strides[0];
                let ib = plan.in_base + (x0 * plan.in_steps[0]) as isize;
                for x1 in r[1].lo..r[1].hi {
                    input[(ib + (x1 * plan.in_steps[1]) as isize) as usize] += w * out[ob + x1];
                }
            }
        }
        3 => {
            for x0 in r[0].lo..r[0].hi {
                for x1 in r[1].lo..r[1].hi {
                    let ob = x0 * plan.out_strides[0] + x1 * plan.out_strides[1];
                    let ib = plan.in_base
                        + (x0 * plan.in_steps[0]) as isize
                        + (x1 * plan.in_steps[1]) as isize;
                    for x2 in r[2].lo..r[2].hi {
                        input[(ib + (x2 * plan.in_steps[2]) as isize) as usize] +=
                            w * out[ob + x2];
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// sum over the tap box of out[x] * in[y(x)].
fn dot_tap(plan: &TapPlan, out: &[f64], input: &[f64]) -> f64 {
    if plan.is_empty() {
        return 0.0;
    }
    let r = &plan.ranges;
    let mut acc = 0.0;
    match plan.d {
        2 => {
            for x0 in r[0].lo..r[0].hi {
                let ob = x0 * plan.out_strides[0];
                let ib = plan.in_base + (x0 * plan.in_steps[0]) as isize;
                for x1 in r[1].lo..r[1].hi {
                    acc += out[ob + x1] * input[(ib + (x1 * plan.in_steps[1]) as isize) as usize];
                }
            }
        }
        3 => {
            for x0 in r[0].lo..r[0].hi {
                for x1 in r[1].lo..r[1].hi {
                    let ob = x0 * plan.out_strides[0] + x1 * plan.out_strides[1];
                    let ib = plan.in_base
                        + (x0 * plan.in_steps[0]) as isize
                        + (x1 * plan.in_steps[1]) as isize;
                    for x2 in r[2].lo..r[2].hi {
                        acc += out[ob + x2] * input[(ib + (x2 * plan.in_steps[2]) as isize) as usize];
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    acc
}

fn tap_indices(d: usize, kernel: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    match d {
        2 => {
            for a in 0..kernel {
                for b in 0..kernel {
                    out.push(vec![a, b]);
                }
            }
        }
        3 => {
            for a in 0..kernel {
                for b in 0..kernel {
                    for c in 0..kernel {
                        out.push(vec![a, b, c]);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// k=3 stride-1 same-size convolution.
    ConvSame,
    /// k=2 stride-2 down-convolution (ceil mode).
    ConvDown,
    /// Transposed k=2 stride-2 convolution with pinned output size.
    ConvUp,
    /// Per-channel PReLU.
    PRelu,
}

/// One parameterized layer: offsets into the flat parameter vector plus the
/// spatial sizes it operates on (fixed per model by the patch size).
#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_spatial: Vec<usize>,
    pub out_spatial: Vec<usize>,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

impl Layer {
    fn geometry(&self) -> ConvGeometry {
        match self.kind {
            LayerKind::ConvSame => GEOM_SAME3,
            LayerKind::ConvDown | LayerKind::ConvUp => GEOM_DOWN2,
            LayerKind::PRelu => unreachable!("prelu has no convolution geometry"),
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        match self.kind {
            LayerKind::PRelu => {
                let alphas = &params[self.weight_offset..self.weight_offset + self.weight_len];
                let len = x.spatial_len();
                let mut out = x.clone();
                for c in 0..x.channels {
                    let a = alphas[c];
                    for v in &mut out.data[c * len..(c + 1) * len] {
                        if *v < 0.0 {
                            *v *= a;
                        }
                    }
                }
                out
            }
            LayerKind::ConvSame | LayerKind::ConvDown => {
                let geom = self.geometry();
                let taps = tap_indices(x.spatial.len(), geom.kernel);
                let mut out = Tensor::zeros(self.out_channels, &self.out_spatial);
                let out_len = out.spatial_len();
                let in_len = x.spatial_len();
                let w = &params[self.weight_offset..self.weight_offset + self.weight_len];
                let b = &params[self.bias_offset..self.bias_offset + self.bias_len];
                for oc in 0..self.out_channels {
                    let o = &mut out.data[oc * out_len..(oc + 1) * out_len];
                    o.fill(b[oc]);
                    for ic in 0..self.in_channels {
                        let xin = &x.data[ic * in_len..(ic + 1) * in_len];
                        let wbase = (oc * self.in_channels + ic) * taps.len();
                        for (t, tap) in taps.iter().enumerate() {
                            let plan = tap_plan(geom, tap, &x.spatial, &self.out_spatial);
                            axpy_tap(&plan, w[wbase + t], o, xin);
                        }
                    }
                }
                out
            }
            LayerKind::ConvUp => {
                // Transpose of ConvDown: scatter input (small grid) into the
                // pinned larger output.
                let geom = self.geometry();
                let taps = tap_indices(x.spatial.len(), geom.kernel);
                let mut out = Tensor::zeros(self.out_channels, &self.out_spatial);
                let out_len = out.spatial_len();
                let in_len = x.spatial_len();
                let w = &params[self.weight_offset..self.weight_offset + self.weight_len];
                let b = &params[self.bias_offset..self.bias_offset + self.bias_len];
                for oc in 0..self.out_channels {
                    let o = &mut out.data[oc * out_len..(oc + 1) * out_len];
                    o.fill(b[oc]);
                    for ic in 0..self.in_channels {
                        let xin = &x.data[ic * in_len..(ic + 1) * in_len];
                        let wbase = (oc * self.in_channels + ic) * taps.len();
                        for (t, tap) in taps.iter().enumerate() {
                            // plan computed in the down direction: "out" is
                            // the small side (= our input here).
                            let plan = tap_plan(geom, tap, &self.out_spatial, &x.spatial);
                            scatter_tap(&plan, w[wbase + t], xin, o);
                        }
                    }
                }
                out
            }
        }
    }

    /// Backward: accumulates parameter gradients into `grads` and returns
    /// the input gradient. `x` is the layer input seen in the forward pass.
    pub fn backward(&self, params: &[f64], x: &Tensor, gout: &Tensor, grads: &mut [f64]) -> Tensor {
        match self.kind {
            LayerKind::PRelu => {
                let alphas = &params[self.weight_offset..self.weight_offset + self.weight_len];
                let len = x.spatial_len();
                let mut gin = gout.clone();
                for c in 0..x.channels {
                    let a = alphas[c];
                    let mut ga = 0.0;
                    for i in 0..len {
                        let xi = x.data[c * len + i];
                        let go = gout.data[c * len + i];
                        if xi < 0.0 {
                            ga += go * xi;
                            gin.data[c * len + i] = go * a;
                        }
                    }
                    grads[self.weight_offset + c] += ga;
                }
                gin
            }
            LayerKind::ConvSame | LayerKind::ConvDown => {
                let geom = self.geometry();
                let taps = tap_indices(x.spatial.len(), geom.kernel);
                let mut gin = Tensor::zeros(self.in_channels, &x.spatial);
                let out_len = gout.spatial_len();
                let in_len = x.spatial_len();
                let w = &params[self.weight_offset..self.weight_offset + self.weight_len];
                for oc in 0..self.out_channels {
                    let go = &gout.data[oc * out_len..(oc + 1) * out_len];
                    grads[self.bias_offset + oc] += go.iter().sum::<f64>();
                    for ic in 0..self.in_channels {
                        let xin = &x.data[ic * in_len..(ic + 1) * in_len];
                        let gi = &mut gin.data[ic * in_len..(ic + 1) * in_len];
                        let wbase = (oc * self.in_channels + ic) * taps.len();
                        for (t, tap) in taps.iter().enumerate() {
                            let plan = tap_plan(geom, tap, &x.spatial, &self.out_spatial);
                            grads[self.weight_offset + wbase + t] += dot_tap(&plan, go, xin);
                            scatter_tap(&plan, w[wbase + t], go, gi);
                        }
                    }
                }
                gin
            }
            LayerKind::ConvUp => {
                let geom = self.geometry();
                let taps = tap_indices(x.spatial.len(), geom.kernel);
                let mut gin = Tensor::zeros(self.in_channels, &x.spatial);
                let out_len = gout.spatial_len();
                let in_len = x.spatial_len();
                let w = &params[self.weight_offset..self.weight_offset + self.weight_len];
                for oc in 0..self.out_channels {
                    let go = &gout.data[oc * out_len..(oc + 1) * out_len];
                    grads[self.bias_offset + oc] += go.iter().sum::<f64>();
                    for ic in 0..self.in_channels {
                        let xin = &x.data[ic * in_len..(ic + 1) * in_len];
                        let gi = &mut gin.data[ic * in_len..(ic + 1) * in_len];
                        let wbase = (oc * self.in_channels + ic) * taps.len();
                        for (t, tap) in taps.iter().enumerate() {
                            let plan = tap_plan(geom, tap, &self.out_spatial, &x.spatial);
                            grads[self.weight_offset + wbase + t] += dot_tap(&plan, xin, go);
                            axpy_tap(&plan, w[wbase + t], gi, go);
                        }
                    }
                }
                gin
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Network assembly
// ---------------------------------------------------------------------------

/// Full encoder-decoder architecture: layers of both encoders and all
/// decoders in declaration order, sharing one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Architecture {
    /// Encoder layers for the source and target streams (same shapes,
    /// independent weights).
    pub enc_source: Vec<Layer>,
    pub enc_target: Vec<Layer>,
    /// One decoder per momentum component.
    pub decoders: Vec<Vec<Layer>>,
    pub param_len: usize,
    /// Patch spatial sizes at full / half / quarter resolution.
    pub sizes: [Vec<usize>; 3],
}

struct Builder {
    layers: Vec<Layer>,
    offset: usize,
}

impl Builder {
    fn conv(&mut self, kind: LayerKind, in_c: usize, out_c: usize, in_sp: &[usize], out_sp: &[usize], taps: usize) {
        let weight_len = out_c * in_c * taps;
        self.layers.push(Layer {
            kind,
            in_channels: in_c,
            out_channels: out_c,
            in_spatial: in_sp.to_vec(),
            out_spatial: out_sp.to_vec(),
            weight_offset: self.offset,
            weight_len,
            bias_offset: self.offset + weight_len,
            bias_len: out_c,
        });
        self.offset += weight_len + out_c;
    }

    fn prelu(&mut self, channels: usize, sp: &[usize]) {
        self.layers.push(Layer {
            kind: LayerKind::PRelu,
            in_channels: channels,
            out_channels: channels,
            in_spatial: sp.to_vec(),
            out_spatial: sp.to_vec(),
            weight_offset: self.offset,
            weight_len: channels,
            bias_offset: self.offset + channels,
            bias_len: 0,
        });
        self.offset += channels;
    }
}

fn build_encoder(b: &mut Builder, f: usize, sizes: &[Vec<usize>; 3], d: usize) -> Vec<Layer> {
    let start = b.layers.len();
    let k3 = 3usize.pow(d as u32);
    let k2 = 2usize.pow(d as u32);
    let (s0, s1, s2) = (&sizes[0], &sizes[1], &sizes[2]);
    // Block 1: three k=3 convolutions, then the stride-2 "pooling" conv.
    b.conv(LayerKind::ConvSame, 1, f, s0, s0, k3);
    b.prelu(f, s0);
    b.conv(LayerKind::ConvSame, f, f, s0, s0, k3);
    b.prelu(f, s0);
    b.conv(LayerKind::ConvSame, f, f, s0, s0, k3);
    b.prelu(f, s0);
    b.conv(LayerKind::ConvDown, f, f, s0, s1, k2);
    b.prelu(f, s1);
    // Block 2: features double.
    b.conv(LayerKind::ConvSame, f, 2 * f, s1, s1, k3);
    b.prelu(2 * f, s1);
    b.conv(LayerKind::ConvSame, 2 * f, 2 * f, s1, s1, k3);
    b.prelu(2 * f, s1);
    b.conv(LayerKind::ConvSame, 2 * f, 2 * f, s1, s1, k3);
    b.prelu(2 * f, s1);
    b.conv(LayerKind::ConvDown, 2 * f, 2 * f, s1, s2, k2);
    b.prelu(2 * f, s2);
    b.layers[start..].to_vec()
}

fn build_decoder(b: &mut Builder, f: usize, sizes: &[Vec<usize>; 3], d: usize) -> Vec<Layer> {
    let start = b.layers.len();
    let k3 = 3usize.pow(d as u32);
    let k2 = 2usize.pow(d as u32);
    let (s0, s1, s2) = (&sizes[0], &sizes[1], &sizes[2]);
    // Mirror of the encoder: unpool, then the three convolutions of each
    // block; the last convolution emits one momentum component with no
    // terminal nonlinearity. The input is the 4f concatenation of the two
    // encoder streams.
    b.conv(LayerKind::ConvUp, 4 * f, 2 * f, s2, s1, k2);
    b.prelu(2 * f, s1);
    b.conv(LayerKind::ConvSame, 2 * f, 2 * f, s1, s1, k3);
    b.prelu(2 * f, s1);
    b.conv(LayerKind::ConvSame, 2 * f, 2 * f, s1, s1, k3);
    b.prelu(2 * f, s1);
    b.conv(LayerKind::ConvSame, 2 * f, 2 * f, s1, s1, k3);
    b.prelu(2 * f, s1);
    b.conv(LayerKind::ConvUp, 2 * f, f, s1, s0, k2);
    b.prelu(f, s0);
    b.conv(LayerKind::ConvSame, f, f, s0, s0, k3);
    b.prelu(f, s0);
    b.conv(LayerKind::ConvSame, f, f, s0, s0, k3);
    b.prelu(f, s0);
    b.conv(LayerKind::ConvSame, f, 1, s0, s0, k3);
    b.layers[start..].to_vec()
}

impl Architecture {
    pub fn build(cfg: &NetConfig) -> Self {
        let d = cfg.dim;
        let s0 = vec![cfg.patch_size; d];
        let s1: Vec<usize> = s0.iter().map(|&n| conv_out_size(GEOM_DOWN2, n)).collect();
        let s2: Vec<usize> = s1.iter().map(|&n| conv_out_size(GEOM_DOWN2, n)).collect();
        let sizes = [s0, s1, s2];
        let mut b = Builder { layers: Vec::new(), offset: 0 };
        let enc_source = build_encoder(&mut b, cfg.base_features, &sizes, d);
        let enc_target = build_encoder(&mut b, cfg.base_features, &sizes, d);
        let decoders: Vec<Vec<Layer>> =
            (0..d).map(|_| build_decoder(&mut b, cfg.base_features, &sizes, d)).collect();
        Architecture { enc_source, enc_target, decoders, param_len: b.offset, sizes }
    }

    /// Kaiming-style seeded initialization; PReLU slopes start at 0.25.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.param_len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = self
            .enc_source
            .iter()
            .chain(&self.enc_target)
            .chain(self.decoders.iter().flatten());
        for layer in all {
            match layer.kind {
                LayerKind::PRelu => {
                    for a in 0..layer.weight_len {
                        params[layer.weight_offset + a] = 0.25;
                    }
                }
                _ => {
                    let taps = layer.weight_len / (layer.in_channels * layer.out_channels);
                    let fan_in = (layer.in_channels * taps) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    for i in 0..layer.weight_len {
                        params[layer.weight_offset + i] = rng.gen_range(-bound..bound);
                    }
                    // biases start at zero
                }
            }
        }
        params
    }

    fn run_stack<'c>(
        layers: &[Layer],
        params: &[f64],
        input: Tensor,
        cache: Option<&mut Vec<Tensor>>,
    ) -> Tensor {
        let mut x = input;
        match cache {
            Some(cache) => {
                for layer in layers {
                    cache.push(x.clone());
                    x = layer.forward(params, &x);
                }
            }
            None => {
                for layer in layers {
                    x = layer.forward(params, &x);
                }
            }
        }
        x
    }

    /// Forward pass: source/target patches to d momentum-component patches.
    pub fn forward(&self, params: &[f64], source: &Tensor, target: &Tensor) -> Vec<Tensor> {
        let es = Self::run_stack(&self.enc_source, params, source.clone(), None);
        let et = Self::run_stack(&self.enc_target, params, target.clone(), None);
        let fused = concat_channels(&es, &et);
        self.decoders
            .iter()
            .map(|dec| Self::run_stack(dec, params, fused.clone(), None))
            .collect()
    }

    /// Forward with caches, then backward from per-component output
    /// gradients; accumulates parameter gradients into `grads`.
    pub fn forward_backward(
        &self,
        params: &[f64],
        source: &Tensor,
        target: &Tensor,
        loss_grad: impl FnOnce(&[Tensor]) -> (f64, Vec<Tensor>),
        grads: &mut [f64],
    ) -> f64 {
        let mut cache_s = Vec::new();
        let mut cache_t = Vec::new();
        let es = Self::run_stack(&self.enc_source, params, source.clone(), Some(&mut cache_s));
        let et = Self::run_stack(&self.enc_target, params, target.clone(), Some(&mut cache_t));
        let fused = concat_channels(&es, &et);
        let mut dec_caches = Vec::with_capacity(self.decoders.len());
        let mut outputs = Vec::with_capacity(self.decoders.len());
        for dec in &self.decoders {
            let mut cache = Vec::new();
            outputs.push(Self::run_stack(dec, params, fused.clone(), Some(&mut cache)));
            dec_caches.push(cache);
        }
        let (loss, out_grads) = loss_grad(&outputs);

        let mut gfused = Tensor::zeros(fused.channels, &fused.spatial);
        for ((dec, cache), gout) in self.decoders.iter().zip(&dec_caches).zip(out_grads) {
            let mut g = gout;
            for (layer, x) in dec.iter().zip(cache).rev() {
                g = layer.backward(params, x, &g, grads);
            }
            for (a, b) in gfused.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        let (ges, get) = split_channels(&gfused, es.channels);
        let mut g = ges;
        for (layer, x) in self.enc_source.iter().zip(&cache_s).rev() {
            g = layer.backward(params, x, &g, grads);
        }
        let mut g = get;
        for (layer, x) in self.enc_target.iter().zip(&cache_t).rev() {
            g = layer.backward(params, x, &g, grads);
        }
        loss
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.spatial, b.spatial);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { channels: a.channels + b.channels, spatial: a.spatial.clone(), data }
}

fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let len = x.spatial_len();
    let a = Tensor {
        channels: first,
        spatial: x.spatial.clone(),
        data: x.data[..first * len].to_vec(),
    };
    let b = Tensor {
        channels: x.channels - first,
        spatial: x.spatial.clone(),
        data: x.data[first * len..].to_vec(),
    };
    (a, b)
}
