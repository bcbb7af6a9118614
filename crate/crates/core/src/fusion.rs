//! Single-depth fusion of a normalized SAR slice with an RGB image, plus
//! the convolutional feature extractor that feeds the depth encoder.
//!
//! The SAR slice acts as a multiplicative relevance mask on each RGB
//! channel; the slice itself rides along as a fourth channel scaled by a
//! trainable balance parameter, so the radar's own texture survives the
//! fusion and both modalities keep gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Grid2;
use crate::recon::SarSlice;

/// An RGB image, channel-major `[3, h, w]`, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn zeros(w: usize, h: usize) -> Self {
        RgbImage { w, h, data: vec![0.0; 3 * w * h] }
    }

    pub fn from_data(w: usize, h: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * w * h {
            return Err(Error::domain("rgb data length must be 3*w*h"));
        }
        let mut img = RgbImage { w, h, data };
        img.clamp01();
        Ok(img)
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.h + row) * self.w + col]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, row: usize, col: usize) -> &mut f64 {
        &mut self.data[(c * self.h + row) * self.w + col]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Multiply by a lighting factor and re-clamp. A factor of exactly 1.0
    /// is a bit-exact identity.
    pub fn scaled(&self, factor: f64) -> RgbImage {
        let mut out = self.clone();
        if factor != 1.0 {
            for v in &mut out.data {
                *v = (*v * factor).clamp(0.0, 1.0);
            }
        }
        out
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn write_ppm(&self, path: &std::path::Path) -> Result<()> {
        crate::io::pnm::write_ppm8(
            path,
            [self.plane(0), self.plane(1), self.plane(2)],
            self.w,
            self.h,
        )
    }

    pub fn read_ppm(path: &std::path::Path) -> Result<RgbImage> {
        let (planes, w, h) = crate::io::pnm::read_ppm8(path)?;
        let mut data = Vec::with_capacity(3 * w * h);
        for p in &planes {
            data.extend_from_slice(p);
        }
        RgbImage::from_data(w, h, data)
    }
}

/// A channel-major `[c, h, w]` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap { c, h, w, data: vec![0.0; c * h * w] }
    }

    #[inline]
    pub fn at(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data[(ch * self.h + row) * self.w + col]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, row: usize, col: usize) -> &mut f64 {
        &mut self.data[(ch * self.h + row) * self.w + col]
    }
}

/// Fused input: three masked RGB channels plus the balanced SAR channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage {
    pub map: FeatureMap,
}

/// Mask each RGB channel with the normalized SAR slice and append the SAR
/// channel scaled by `alpha`:
/// `out[c] = sar .* rgb[c]` for c in 0..3, `out[3] = alpha * sar`.
pub fn mask_fuse(sar_norm: &SarSlice, rgb: &RgbImage, alpha: f64) -> Result<FusedImage> {
    let (w, h) = (sar_norm.pixels.w, sar_norm.pixels.h);
    if rgb.w != w || rgb.h != h {
        return Err(Error::domain(format!(
            "rgb raster {}x{} does not match sar raster {}x{}",
            rgb.w, rgb.h, w, h
        )));
    }
    if sar_norm.pixels.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::domain("sar slice must be normalized to [0, 1] before fusion"));
    }
    let mut map = FeatureMap::zeros(4, h, w);
    for row in 0..h {
        for col in 0..w {
            let m = sar_norm.pixels.at(row, col);
            for c in 0..3 {
                *map.at_mut(c, row, col) = m * rgb.at(c, row, col);
            }
            *map.at_mut(3, row, col) = alpha * m;
        }
    }
    Ok(FusedImage { map })
}

/// With probability `p` (seeded), remove the camera modality entirely by
/// zeroing the RGB image; otherwise return it unchanged. Training with the
/// default `p = 0.2` de-emphasizes the camera so the extractor also learns
/// radar-only cues.
pub fn rgb_dropout(rgb: &RgbImage, p: f64, seed: u64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("dropout probability must be in [0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.gen::<f64>() < p {
        Ok(RgbImage::zeros(rgb.w, rgb.h))
    } else {
        Ok(rgb.clone())
    }
}

/// One 3x3 convolution layer, stride 2, zero padding 1.
/// Weights are `[c_out, c_in, 3, 3]` row-major; one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub const CONV_K: usize = 3;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;

impl ConvLayer {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        ConvLayer {
            c_in,
            c_out,
            weights: vec![0.0; c_out * c_in * CONV_K * CONV_K],
            bias: vec![0.0; c_out],
        }
    }

    #[inline]
    pub fn weight(&self, co: usize, ci: usize, kr: usize, kc: usize) -> f64 {
        self.weights[((co * self.c_in + ci) * CONV_K + kr) * CONV_K + kc]
    }

    pub fn out_size(h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * CONV_PAD - CONV_K) / CONV_STRIDE + 1,
            (w + 2 * CONV_PAD - CONV_K) / CONV_STRIDE + 1,
        )
    }

    /// Output-cell range touching valid input rows/cols for kernel tap `k`:
    /// the input index is `o*stride + k - pad`, so the tap contributes for
    /// `o` in `[ceil((pad-k)/stride), floor((n-1+pad-k)/stride)]`.
    #[inline]
    fn tap_range(k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let lo = if k < CONV_PAD { CONV_PAD - k } else { 0 }; // stride 2: ceil(1/2) = 1
        let top = n_in - 1 + CONV_PAD;
        if k > top {
            return (1, 0); // empty
        }
        let hi = ((top - k) / CONV_STRIDE).min(n_out - 1);
        (lo.min(n_out), hi)
    }

    /// Pre-activation forward pass. The hot loop runs per kernel tap over
    /// contiguous output rows, branch-free inside.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.c != self.c_in {
            return Err(Error::domain(format!(
                "conv expects {} input channels, got {}",
                self.c_in, input.c
            )));
        }
        let (oh, ow) = Self::out_size(input.h, input.w);
        let (ih, iw) = (input.h, input.w);
        let mut out = FeatureMap::zeros(self.c_out, oh, ow);
        for co in 0..self.c_out {
            let out_plane = &mut out.data[co * oh * ow..(co + 1) * oh * ow];
            out_plane.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.c_in {
                let in_plane = &input.data[ci * ih * iw..(ci + 1) * ih * iw];
                let taps = &self.weights[(co * self.c_in + ci) * 9..(co * self.c_in + ci) * 9 + 9];
                for kr in 0..CONV_K {
                    let (or_lo, or_hi) = Self::tap_range(kr, ih, oh);
                    for kc in 0..CONV_K {
                        let wv = taps[kr * 3 + kc];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oc_lo, oc_hi) = Self::tap_range(kc, iw, ow);
                        if or_lo > or_hi || oc_lo > oc_hi {
                            continue;
                        }
                        for orow in or_lo..=or_hi {
                            let irow = orow * CONV_STRIDE + kr - CONV_PAD;
                            let in_row = &in_plane[irow * iw..irow * iw + iw];
                            let out_row = &mut out_plane[orow * ow..orow * ow + ow];
                            for ocol in oc_lo..=oc_hi {
                                out_row[ocol] +=
                                    wv * in_row[ocol * CONV_STRIDE + kc - CONV_PAD];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar loss w.r.t. input, weights, and bias, given the
    /// loss gradient at the (pre-activation) output.
    pub fn backward(
        &self,
        input: &FeatureMap,
        grad_out: &FeatureMap,
    ) -> (FeatureMap, Vec<f64>, Vec<f64>) {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let (ih, iw) = (input.h, input.w);
        let mut grad_in = FeatureMap::zeros(input.c, ih, iw);
        let mut grad_w = vec![0.0; self.weights.len()];
        let mut grad_b = vec![0.0; self.bias.len()];
        for co in 0..self.c_out {
            let g_plane = &grad_out.data[co * oh * ow..(co + 1) * oh * ow];
            grad_b[co] += g_plane.iter().sum::<f64>();
            for ci in 0..self.c_in {
                let in_plane = &input.data[ci * ih * iw..(ci + 1) * ih * iw];
                let gi_plane = &mut grad_in.data[ci * ih * iw..(ci + 1) * ih * iw];
                let w_base = (co * self.c_in + ci) * 9;
                for kr in 0..CONV_K {
                    let (or_lo, or_hi) = Self::tap_range(kr, ih, oh);
                    for kc in 0..CONV_K {
                        let (oc_lo, oc_hi) = Self::tap_range(kc, iw, ow);
                        if or_lo > or_hi || oc_lo > oc_hi {
                            continue;
                        }
                        let wv = self.weights[w_base + kr * 3 + kc];
                        let mut gw = 0.0;
                        for orow in or_lo..=or_hi {
                            let irow = orow * CONV_STRIDE + kr - CONV_PAD;
                            let g_row = &g_plane[orow * ow..orow * ow + ow];
                            let in_row = &in_plane[irow * iw..irow * iw + iw];
                            let gi_row = &mut gi_plane[irow * iw..irow * iw + iw];
                            for ocol in oc_lo..=oc_hi {
                                let g = g_row[ocol];
                                let icol = ocol * CONV_STRIDE + kc - CONV_PAD;
                                gw += g * in_row[icol];
                                gi_row[icol] += g * wv;
                            }
                        }
                        grad_w[w_base + kr * 3 + kc] += gw;
                    }
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

pub fn relu(fm: &FeatureMap) -> FeatureMap {
    FeatureMap { c: fm.c, h: fm.h, w: fm.w, data: fm.data.iter().map(|&v| v.max(0.0)).collect() }
}

/// Forward pass through the conv stack (conv -> relu per layer), recording
/// per-layer inputs and pre-activations for the backward pass.
pub struct CnnTrace {
    /// Input to each layer (layer 0 sees the fused image).
    pub inputs: Vec<FeatureMap>,
    /// Pre-activation output of each layer.
    pub preacts: Vec<FeatureMap>,
    /// Final activated feature map.
    pub output: FeatureMap,
}

impl CnnTrace {
    /// Smallest |pre-activation|: the distance to the nearest relu kink.
    pub fn relu_margin(&self) -> f64 {
        self.preacts
            .iter()
            .flat_map(|p| p.data.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Fixed gain applied to the fused image before the first convolution.
///
/// Masked inputs are sparse products of two `[0, 1]` images and sit around
/// 0.03 RMS; the gain brings activations to unit scale so the He-initialized
/// stack trains with ordinary learning rates. Power of two, so the scaling
/// is exact.
pub const INPUT_GAIN: f64 = 16.0;

pub fn cnn_forward_traced(fused: &FusedImage, layers: &[ConvLayer]) -> Result<CnnTrace> {
    for (i, layer) in layers.iter().enumerate() {
        if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite parameters in conv layer {i}")));
        }
    }
    let mut inputs = Vec::with_capacity(layers.len());
    let mut preacts = Vec::with_capacity(layers.len());
    let mut current = fused.map.clone();
    for v in &mut current.data {
        *v *= INPUT_GAIN;
    }
    for layer in layers {
        let pre = layer.forward(&current)?;
        inputs.push(current);
        current = relu(&pre);
        preacts.push(pre);
    }
    Ok(CnnTrace { inputs, preacts, output: current })
}

/// Deterministic forward pass of the extractor; errors on non-finite
/// parameters or activations.
pub fn cnn_forward(fused: &FusedImage, layers: &[ConvLayer]) -> Result<FeatureMap> {
    let trace = cnn_forward_traced(fused, layers)?;
    if trace.output.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite activation in conv stack"));
    }
    Ok(trace.output)
}

/// Global average pooling: the spatial mean of every channel.
pub fn gap(fm: &FeatureMap) -> Vec<f64> {
    let n = (fm.h * fm.w) as f64;
    (0..fm.c)
        .map(|c| {
            let start = c * fm.h * fm.w;
            fm.data[start..start + fm.h * fm.w].iter().sum::<f64>() / n
        })
        .collect()
}

/// Class activation map: the class-weighted channel sum, min-max scaled to
/// `[0, 1]`.
pub fn cam(fm: &FeatureMap, class_weights: &[f64]) -> Result<Grid2> {
    Ok(cam_unnormalized(fm, class_weights)?.normalized01())
}

/// Weighted channel sum without normalization, for exactness checks.
pub fn cam_unnormalized(fm: &FeatureMap, class_weights: &[f64]) -> Result<Grid2> {
    if class_weights.len() != fm.c {
        return Err(Error::domain(format!(
            "cam expects {} channel weights, got {}",
            fm.c,
            class_weights.len()
        )));
    }
    let mut grid = Grid2::zeros(fm.w, fm.h);
    for row in 0..fm.h {
        for col in 0..fm.w {
            let mut acc = 0.0;
            for (c, &wgt) in class_weights.iter().enumerate() {
                acc += wgt * fm.at(c, row, col);
            }
            *grid.at_mut(row, col) = acc;
        }
    }
    Ok(grid)
}
