//! The assembled per-sample network: input assembly per modality variant,
//! conv extractor over every depth slice, depth encoder, and the exact
//! reverse-mode backward pass for all parameters including the modality
//! balance `alpha`.

use crate::encoder::{
    bce_loss, depth_ranks, encoder_backward, encoder_forward, EncoderTrace, LossBatch,
};
use crate::error::{Error, Result};
use crate::fusion::{cnn_forward_traced, gap, mask_fuse, CnnTrace, FeatureMap, FusedImage, RgbImage};
use crate::params::{ModelParams, ModelVariant, ProbeHead};
use crate::recon::SarSlice;

/// One sample's model input: per-depth normalized slices and the camera
/// image, all on the same raster.
pub struct ModelInput<'a> {
    pub norm_slices: &'a [SarSlice],
    pub depths: &'a [f64],
    pub rgb: &'a RgbImage,
}

/// Build the 4-channel extractor input for a slice under the given variant.
pub fn assemble_input(
    norm_slice: &SarSlice,
    rgb: &RgbImage,
    alpha: f64,
    variant: ModelVariant,
) -> Result<FusedImage> {
    let (w, h) = (norm_slice.pixels.w, norm_slice.pixels.h);
    if rgb.w != w || rgb.h != h {
        return Err(Error::domain("rgb raster does not match sar raster"));
    }
    match variant {
        ModelVariant::Fused => mask_fuse(norm_slice, rgb, alpha),
        ModelVariant::RgbOnly => {
            let mut map = FeatureMap::zeros(4, h, w);
            map.data[..3 * h * w].copy_from_slice(&rgb.data);
            Ok(FusedImage { map })
        }
        ModelVariant::SarOnly => {
            if norm_slice.pixels.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::domain("sar slice must be normalized to [0, 1]"));
            }
            let mut map = FeatureMap::zeros(4, h, w);
            for (o, &m) in map.data[3 * h * w..].iter_mut().zip(&norm_slice.pixels.data) {
                *o = alpha * m;
            }
            Ok(FusedImage { map })
        }
    }
}

/// Recorded intermediates for one slice.
pub struct SliceTrace {
    pub cnn: CnnTrace,
    pub feature: Vec<f64>,
    /// Normalized SAR pixels, kept for the alpha gradient.
    pub norm_pixels: Vec<f64>,
}

/// Recorded intermediates for a whole sample.
pub struct ModelTrace {
    pub slices: Vec<SliceTrace>,
    pub encoder: EncoderTrace,
}

impl ModelTrace {
    pub fn prob(&self) -> f64 {
        self.encoder.prob
    }
}

/// Full forward pass: per-slice fusion + conv + pooling, then the depth
/// encoder. Returns the wet probability and the trace for backward.
pub fn forward_sample(params: &ModelParams, input: &ModelInput) -> Result<ModelTrace> {
    if input.norm_slices.is_empty() || input.norm_slices.len() != input.depths.len() {
        return Err(Error::domain("need one depth per slice and at least one slice"));
    }
    let mut slices = Vec::with_capacity(input.norm_slices.len());
    let mut features = Vec::with_capacity(input.norm_slices.len());
    for slice in input.norm_slices {
        let fused = assemble_input(slice, input.rgb, params.alpha, params.cfg.variant)?;
        let cnn = cnn_forward_traced(&fused, &params.conv)?;
        let feature = gap(&cnn.output);
        features.push(feature.clone());
        slices.push(SliceTrace { cnn, feature, norm_pixels: slice.pixels.data.clone() });
    }
    let ranks = depth_ranks(input.depths);
    let attn_cfg = params.cfg.attention_config()?;
    let encoder = encoder_forward(&features, &ranks, &params.encoder, &attn_cfg)?;
    Ok(ModelTrace { slices, encoder })
}

/// Forward pass without keeping traces.
pub fn predict(params: &ModelParams, input: &ModelInput) -> Result<f64> {
    Ok(forward_sample(params, input)?.prob())
}

/// Spread a pooled-feature gradient uniformly back over the feature map.
fn gap_backward(d_feature: &[f64], like: &FeatureMap) -> FeatureMap {
    let mut out = FeatureMap::zeros(like.c, like.h, like.w);
    let inv = 1.0 / (like.h * like.w) as f64;
    for c in 0..like.c {
        let g = d_feature[c] * inv;
        let start = c * like.h * like.w;
        for v in &mut out.data[start..start + like.h * like.w] {
            *v = g;
        }
    }
    out
}

/// Backward through the conv stack; returns the gradient at the fused
/// input (before the input gain) and accumulates weight/bias gradients.
fn cnn_backward(
    params: &ModelParams,
    trace: &CnnTrace,
    d_output: FeatureMap,
    grads: &mut ModelParams,
) -> FeatureMap {
    let mut d_act = d_output;
    for l in (0..params.conv.len()).rev() {
        let pre = &trace.preacts[l];
        let mut d_pre = FeatureMap::zeros(pre.c, pre.h, pre.w);
        for (o, (g, p)) in d_pre.data.iter_mut().zip(d_act.data.iter().zip(&pre.data)) {
            *o = if *p > 0.0 { *g } else { 0.0 };
        }
        let (d_in, gw, gb) = params.conv[l].backward(&trace.inputs[l], &d_pre);
        for (a, b) in grads.conv[l].weights.iter_mut().zip(&gw) {
            *a += b;
        }
        for (a, b) in grads.conv[l].bias.iter_mut().zip(&gb) {
            *a += b;
        }
        d_act = d_in;
    }
    for v in &mut d_act.data {
        *v *= crate::fusion::INPUT_GAIN;
    }
    d_act
}

/// Accumulate the alpha gradient from the gradient at the fused input's
/// SAR channel. Only variants that feed the SAR channel contribute.
fn alpha_gradient(variant: ModelVariant, d_fused: &FeatureMap, norm_pixels: &[f64]) -> f64 {
    match variant {
        ModelVariant::RgbOnly => 0.0,
        ModelVariant::Fused | ModelVariant::SarOnly => {
            let hw = d_fused.h * d_fused.w;
            d_fused.data[3 * hw..].iter().zip(norm_pixels).map(|(g, m)| g * m).sum()
        }
    }
}

/// Single-sample loss and exact gradients for every parameter.
///
/// The prediction clamp is honored: a saturated prediction has zero
/// gradient, matching finite differences of the clamped forward pass.
pub fn backward_sample(
    params: &ModelParams,
    trace: &ModelTrace,
    label: f64,
) -> Result<(f64, ModelParams)> {
    let batch = LossBatch::new(vec![label], vec![trace.encoder.prob])?;
    let (loss, d_pred) = bce_loss(&batch)?;
    let mut grads = params.zeros_like();

    let d_logit = if trace.encoder.clamped {
        0.0
    } else {
        d_pred[0] * trace.encoder.prob * (1.0 - trace.encoder.prob)
    };

    let attn_cfg = params.cfg.attention_config()?;
    let (enc_grads, d_features) =
        encoder_backward(&trace.encoder, &params.encoder, &attn_cfg, d_logit);
    grads.encoder = enc_grads;

    for (st, d_feature) in trace.slices.iter().zip(&d_features) {
        let d_map = gap_backward(d_feature, &st.cnn.output);
        let d_fused = cnn_backward(params, &st.cnn, d_map, &mut grads);
        grads.alpha += alpha_gradient(params.cfg.variant, &d_fused, &st.norm_pixels);
    }
    Ok((loss, grads))
}

/// Smallest |pre-activation| across the conv stack: the distance of the
/// forward pass from the nearest relu kink. Finite-difference gradient
/// checks are only meaningful when every perturbed pass stays on one side
/// of each kink, so harnesses pick test points where this margin exceeds
/// the perturbation radius.
pub fn relu_margin(trace: &ModelTrace) -> f64 {
    trace.slices.iter().fold(f64::INFINITY, |m, st| m.min(st.cnn.relu_margin()))
}

/// Phase-1 trace: one slice through the extractor and the probe head.
pub struct ProbeTrace {
    pub cnn: CnnTrace,
    /// Standardized pooled feature seen by the probe.
    pub feat_xhat: Vec<f64>,
    pub feat_inv_std: f64,
    pub norm_pixels: Vec<f64>,
    pub prob: f64,
    pub clamped: bool,
}

/// Forward for the phase-1 pretraining objective: extractor + linear probe
/// on a single slice. The pooled feature is standardized exactly as the
/// depth encoder standardizes its inputs.
pub fn probe_forward(
    params: &ModelParams,
    probe: &ProbeHead,
    norm_slice: &SarSlice,
    rgb: &RgbImage,
) -> Result<ProbeTrace> {
    let fused = assemble_input(norm_slice, rgb, params.alpha, params.cfg.variant)?;
    let cnn = cnn_forward_traced(&fused, &params.conv)?;
    let feature = gap(&cnn.output);
    let (feat_xhat, feat_inv_std) = crate::encoder::layer_norm_normalize(&feature);
    let logit = probe.linear.apply(&feat_xhat)[0];
    if !logit.is_finite() {
        return Err(Error::numeric("non-finite probe logit"));
    }
    let raw = 1.0 / (1.0 + (-logit).exp());
    let prob = raw.clamp(crate::encoder::PRED_CLAMP, 1.0 - crate::encoder::PRED_CLAMP);
    Ok(ProbeTrace {
        cnn,
        feat_xhat,
        feat_inv_std,
        norm_pixels: norm_slice.pixels.data.clone(),
        prob,
        clamped: raw != prob,
    })
}

/// Phase-1 loss and gradients (extractor, alpha, probe head).
pub fn probe_backward(
    params: &ModelParams,
    probe: &ProbeHead,
    trace: &ProbeTrace,
    label: f64,
) -> Result<(f64, ModelParams, ProbeHead)> {
    let batch = LossBatch::new(vec![label], vec![trace.prob])?;
    let (loss, d_pred) = bce_loss(&batch)?;
    let d_logit =
        if trace.clamped { 0.0 } else { d_pred[0] * trace.prob * (1.0 - trace.prob) };

    let mut grads = params.zeros_like();
    let mut probe_grads =
        ProbeHead { linear: crate::encoder::LinearParams::zeros(probe.linear.n_in, 1) };
    let d_xhat = probe.linear.backward(
        &trace.feat_xhat,
        &[d_logit],
        &mut probe_grads.linear.w,
        &mut probe_grads.linear.b,
    );
    let d_feature =
        crate::encoder::standardize_backward(&trace.feat_xhat, trace.feat_inv_std, &d_xhat);
    let d_map = gap_backward(&d_feature, &trace.cnn.output);
    let d_fused = cnn_backward(params, &trace.cnn, d_map, &mut grads);
    grads.alpha += alpha_gradient(params.cfg.variant, &d_fused, &trace.norm_pixels);
    Ok((loss, grads, probe_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelConfig;
    use crate::raster::Grid2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            conv_channels: vec![6, 8],
            n_heads: 2,
            n_layers: 1,
            feedforward: false,
            variant,
        }
    }

    fn random_slices(n: usize, w: usize, h: usize, seed: u64) -> Vec<SarSlice> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let data: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>()).collect();
                SarSlice {
                    pixels: Grid2::from_data(w, h, data).unwrap().normalized01(),
                    z0: 200.0 + 40.0 * i as f64,
                    x_min: 0.0,
                    y_min: 0.0,
                    pitch_x: 1.0,
                    pitch_y: 1.0,
                }
            })
            .collect()
    }

    fn random_rgb(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_data(w, h, (0..3 * w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn sample_loss(params: &ModelParams, input: &ModelInput, label: f64) -> f64 {
        let trace = forward_sample(params, input).unwrap();
        let batch = LossBatch::new(vec![label], vec![trace.prob()]).unwrap();
        bce_loss(&batch).unwrap().0
    }

    #[test]
    fn variants_blank_the_right_channels() {
        let slices = random_slices(1, 8, 6, 1);
        let rgb = random_rgb(8, 6, 2);
        let hw = 48;
        let fused = assemble_input(&slices[0], &rgb, 0.5, ModelVariant::Fused).unwrap();
        assert!(fused.map.data[3 * hw..].iter().zip(&slices[0].pixels.data).all(|(a, m)| *a == 0.5 * m));
        let rgb_only = assemble_input(&slices[0], &rgb, 0.5, ModelVariant::RgbOnly).unwrap();
        assert!(rgb_only.map.data[3 * hw..].iter().all(|&v| v == 0.0));
        assert_eq!(&rgb_only.map.data[..3 * hw], &rgb.data[..]);
        let sar_only = assemble_input(&slices[0], &rgb, 0.5, ModelVariant::SarOnly).unwrap();
        assert!(sar_only.map.data[..3 * hw].iter().all(|&v| v == 0.0));
    }

    /// First parameter seed whose forward pass keeps every pre-activation
    /// at least `margin` away from the relu kink (and the prediction off
    /// the clamp), so central differences of radius < margin are exact.
    fn seed_with_margin(
        cfg: &ModelConfig,
        input: &ModelInput,
        margin: f64,
    ) -> (ModelParams, ModelTrace) {
        for seed in 0..500 {
            let params = ModelParams::init(cfg, seed).unwrap();
            let trace = forward_sample(&params, input).unwrap();
            if relu_margin(&trace) > margin && !trace.encoder.clamped {
                return (params, trace);
            }
        }
        panic!("no parameter seed with relu margin {margin}");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // d_model = 8, 4 depth slices, every parameter including alpha,
        // central differences with eps = 1e-4
        let cfg = tiny_config(ModelVariant::Fused);
        let slices = random_slices(4, 16, 12, 22);
        let depths = [200.0, 240.0, 280.0, 320.0];
        let rgb = random_rgb(16, 12, 23);
        let input = ModelInput { norm_slices: &slices, depths: &depths, rgb: &rgb };
        let label = 1.0;

        // a single-parameter bump of eps shifts downstream pre-activations
        // by at most a few eps; 10x headroom keeps every pass kink-free
        let (params, trace) = seed_with_margin(&cfg, &input, 1e-3);
        let (_, grads) = backward_sample(&params, &trace, label).unwrap();
        let flat = params.to_flat();
        let flat_g = grads.to_flat();

        let eps = 1e-4;
        let mut probe = params.clone();
        let mut max_rel: f64 = 0.0;
        let mut worst = 0usize;
        for i in 0..flat.len() {
            let mut bumped = flat.clone();
            bumped[i] = flat[i] + eps;
            probe.assign_from_flat(&bumped).unwrap();
            let lp = sample_loss(&probe, &input, label);
            bumped[i] = flat[i] - eps;
            probe.assign_from_flat(&bumped).unwrap();
            let lm = sample_loss(&probe, &input, label);
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (flat_g[i] - fd).abs() / flat_g[i].abs().max(fd.abs()).max(1e-4);
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel} at flat index {worst}");
    }

    #[test]
    fn probe_gradients_match_finite_differences() {
        let cfg = tiny_config(ModelVariant::Fused);
        let probe_head = ProbeHead::init(cfg.d_model(), 32);
        let slices = random_slices(1, 16, 12, 33);
        let rgb = random_rgb(16, 12, 34);
        let label = 0.0;

        let params = (0..500)
            .map(|seed| ModelParams::init(&cfg, seed).unwrap())
            .find(|p| {
                let t = probe_forward(p, &probe_head, &slices[0], &rgb).unwrap();
                t.cnn.relu_margin() > 1e-3 && !t.clamped
            })
            .expect("kink-free seed");
        let trace = probe_forward(&params, &probe_head, &slices[0], &rgb).unwrap();
        let (_, grads, probe_grads) = probe_backward(&params, &probe_head, &trace, label).unwrap();

        let loss_of = |p: &ModelParams, ph: &ProbeHead| -> f64 {
            let t = probe_forward(p, ph, &slices[0], &rgb).unwrap();
            bce_loss(&LossBatch::new(vec![label], vec![t.prob]).unwrap()).unwrap().0
        };

        let eps = 1e-4;
        // model side
        let flat = params.to_flat();
        let flat_g = grads.to_flat();
        let mut probe_params = params.clone();
        for i in (0..flat.len()).step_by(7) {
            let mut bumped = flat.clone();
            bumped[i] = flat[i] + eps;
            probe_params.assign_from_flat(&bumped).unwrap();
            let lp = loss_of(&probe_params, &probe_head);
            bumped[i] = flat[i] - eps;
            probe_params.assign_from_flat(&bumped).unwrap();
            let lm = loss_of(&probe_params, &probe_head);
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (flat_g[i] - fd).abs() / flat_g[i].abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-4, "model param {i}: {} vs {fd}", flat_g[i]);
        }
        // probe side
        for i in 0..probe_head.linear.w.len() {
            let mut ph = probe_head.clone();
            ph.linear.w[i] += eps;
            let lp = loss_of(&params, &ph);
            ph.linear.w[i] = probe_head.linear.w[i] - eps;
            let lm = loss_of(&params, &ph);
            let fd = (lp - lm) / (2.0 * eps);
            let rel =
                (probe_grads.linear.w[i] - fd).abs() / probe_grads.linear.w[i].abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-4, "probe weight {i}");
        }
    }

    #[test]
    fn alpha_gradient_is_nonzero_and_matches_finite_differences() {
        let cfg = tiny_config(ModelVariant::Fused);
        let slices = random_slices(3, 16, 12, 42);
        let depths = [200.0, 240.0, 280.0];
        let rgb = random_rgb(16, 12, 43);
        let input = ModelInput { norm_slices: &slices, depths: &depths, rgb: &rgb };
        let label = 1.0;

        let (params, trace) = seed_with_margin(&cfg, &input, 1e-3);
        let (_, grads) = backward_sample(&params, &trace, label).unwrap();

        let eps = 1e-5;
        let mut p = params.clone();
        p.alpha = params.alpha + eps;
        let lp = sample_loss(&p, &input, label);
        p.alpha = params.alpha - eps;
        let lm = sample_loss(&p, &input, label);
        let fd = (lp - lm) / (2.0 * eps);
        assert!(grads.alpha != 0.0, "alpha gradient vanished");
        let rel = (grads.alpha - fd).abs() / grads.alpha.abs().max(fd.abs());
        assert!(rel < 1e-4, "alpha grad {} vs fd {fd}", grads.alpha);
    }

    #[test]
    fn rgb_only_variant_has_zero_alpha_gradient() {
        let cfg = tiny_config(ModelVariant::RgbOnly);
        let params = ModelParams::init(&cfg, 51).unwrap();
        let slices = random_slices(2, 16, 12, 52);
        let depths = [200.0, 240.0];
        let rgb = random_rgb(16, 12, 53);
        let input = ModelInput { norm_slices: &slices, depths: &depths, rgb: &rgb };
        let trace = forward_sample(&params, &input).unwrap();
        let (_, grads) = backward_sample(&params, &trace, 1.0).unwrap();
        assert_eq!(grads.alpha, 0.0);
    }

    #[test]
    fn gradients_vanish_at_saturated_prediction() {
        // push the classifier bias far positive: the prediction clamps to
        // 1 - 1e-7 and the clamp blocks every gradient, exactly as a finite
        // difference of the clamped forward would measure
        let cfg = tiny_config(ModelVariant::Fused);
        let mut params = ModelParams::init(&cfg, 61).unwrap();
        params.encoder.classifier.b[0] = 1e4;
        let slices = random_slices(2, 16, 12, 62);
        let depths = [200.0, 240.0];
        let rgb = random_rgb(16, 12, 63);
        let input = ModelInput { norm_slices: &slices, depths: &depths, rgb: &rgb };
        let trace = forward_sample(&params, &input).unwrap();
        assert!(trace.encoder.clamped);
        let (_, grads) = backward_sample(&params, &trace, 1.0).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config(ModelVariant::Fused);
        let params = ModelParams::init(&cfg, 71).unwrap();
        let slices = random_slices(3, 16, 12, 72);
        let depths = [200.0, 240.0, 280.0];
        let rgb = random_rgb(16, 12, 73);
        let input = ModelInput { norm_slices: &slices, depths: &depths, rgb: &rgb };
        let a = predict(&params, &input).unwrap();
        let b = predict(&params, &input).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
