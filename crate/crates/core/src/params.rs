//! The full trainable parameter set: conv extractor, modality balance,
//! depth encoder, classifier head. Includes seeded initialization, flat
//! (de)serialization for the optimizer and gradient checks, and checkpoint
//! files (one binary tensor per parameter plus a named-tensor manifest).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;

use crate::encoder::{AttentionConfig, EncoderParams, LinearParams};
use crate::error::{Error, Result};
use crate::fusion::ConvLayer;
use crate::io::tensor::{read_tensor, write_tensor, Tensor};

/// Which modalities feed the extractor. The ablation variants exist for
/// resilience baselines: they reuse the identical architecture with one
/// modality blanked at input assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Masked RGB channels + balanced SAR channel.
    Fused,
    /// RGB channels only; SAR channel is zero.
    RgbOnly,
    /// SAR channel only; RGB channels are zero.
    SarOnly,
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelVariant::Fused => write!(f, "fused"),
            ModelVariant::RgbOnly => write!(f, "rgb-only"),
            ModelVariant::SarOnly => write!(f, "sar-only"),
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(ModelVariant::Fused),
            "rgb-only" => Ok(ModelVariant::RgbOnly),
            "sar-only" => Ok(ModelVariant::SarOnly),
            other => Err(Error::data(format!("unknown model variant '{other}'"))),
        }
    }
}

/// Architecture description. `d_model` equals the last conv channel count,
/// since the encoder consumes pooled conv features.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Output channels of each conv layer; input is always 4 channels.
    pub conv_channels: Vec<usize>,
    pub n_heads: usize,
    pub n_layers: usize,
    pub feedforward: bool,
    pub variant: ModelVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_channels: vec![8, 16, 32],
            n_heads: 2,
            n_layers: 1,
            feedforward: false,
            variant: ModelVariant::Fused,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        *self.conv_channels.last().expect("at least one conv layer")
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        let mut cfg = AttentionConfig::new(self.n_heads, self.d_model(), self.n_layers)?;
        cfg.feedforward = self.feedforward;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::config("need at least one conv layer"));
        }
        self.attention_config()?;
        Ok(())
    }
}

/// All trainable tensors. Gradient buffers use the same type via
/// [`ModelParams::zeros_like`], so shapes always match.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub conv: Vec<ConvLayer>,
    /// Balance between the camera and radar modalities (SAR channel gain).
    pub alpha: f64,
    pub encoder: EncoderParams,
}

impl ModelParams {
    /// Seeded initialization: conv and projection weights scaled by fan-in,
    /// biases zero, `alpha = 1` (unbiased start between modalities),
    /// layer norms at identity.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Vec::new();
        let mut c_in = 4usize;
        for &c_out in &cfg.conv_channels {
            let mut layer = ConvLayer::zeros(c_in, c_out);
            // He-uniform for the relu stack
            let scale = (6.0 / (c_in as f64 * 9.0)).sqrt();
            for w in &mut layer.weights {
                *w = (rng.gen::<f64>() * 2.0 - 1.0) * scale;
            }
            conv.push(layer);
            c_in = c_out;
        }
        let attn_cfg = cfg.attention_config()?;
        let mut encoder = EncoderParams::zeros(&attn_cfg);
        let d = cfg.d_model();
        let proj_scale = (1.0 / d as f64).sqrt();
        encoder.visit_mut(&mut |name, v| {
            if name.ends_with(".w") {
                for x in v.iter_mut() {
                    *x = (rng.gen::<f64>() * 2.0 - 1.0) * proj_scale;
                }
            }
        });
        Ok(ModelParams { cfg: cfg.clone(), conv, alpha: 1.0, encoder })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = 0.0));
        out.alpha = 0.0;
        out
    }

    /// Visit every tensor (alpha appears as a length-1 slice) in a fixed
    /// order shared with `visit_mut`.
    pub fn visit(&self, f: &mut impl FnMut(&str, &[f64])) {
        for (i, layer) in self.conv.iter().enumerate() {
            f(&format!("conv{i}.w"), &layer.weights);
            f(&format!("conv{i}.b"), &layer.bias);
        }
        f("alpha", std::slice::from_ref(&self.alpha));
        self.encoder.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Vec<f64>)) {
        for (i, layer) in self.conv.iter_mut().enumerate() {
            f(&format!("conv{i}.w"), &mut layer.weights);
            f(&format!("conv{i}.b"), &mut layer.bias);
        }
        let mut alpha = vec![self.alpha];
        f("alpha", &mut alpha);
        self.alpha = alpha[0];
        self.encoder.visit_mut(f);
    }

    /// Total scalar parameter count.
    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Concatenate every parameter into one vector (fixed order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.len());
        self.visit(&mut |_, v| flat.extend_from_slice(v));
        flat
    }

    /// Inverse of [`ModelParams::to_flat`].
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::domain(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.len()
            )));
        }
        let mut it = flat.iter();
        self.visit_mut(&mut |_, v| {
            for x in v.iter_mut() {
                *x = *it.next().unwrap();
            }
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Write a checkpoint directory: `manifest.txt` plus one `.hyt1` tensor
    /// per parameter. The write is atomic (temp directory + rename).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let stem = dir
            .file_name()
            .ok_or_else(|| Error::domain("checkpoint path needs a directory name"))?
            .to_string_lossy()
            .to_string();
        let tmp = parent.join(format!(".{stem}.{}.tmp", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;

        let result = (|| -> Result<()> {
            let mut manifest = String::new();
            manifest.push_str("[model]\n");
            manifest.push_str(&format!(
                "conv_channels = {}\n",
                self.cfg
                    .conv_channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ));
            manifest.push_str(&format!("n_heads = {}\n", self.cfg.n_heads));
            manifest.push_str(&format!("n_layers = {}\n", self.cfg.n_layers));
            manifest.push_str(&format!("feedforward = {}\n", self.cfg.feedforward));
            manifest.push_str(&format!("variant = {}\n", self.cfg.variant));
            manifest.push_str("\n[tensors]\n");

            let mut err = None;
            self.visit(&mut |name, v| {
                if err.is_some() {
                    return;
                }
                let fname = format!("{}.hyt1", name.replace('/', "_"));
                let t = Tensor::F64(vec![v.len() as u32], v.to_vec());
                if let Err(e) = write_tensor(&t, &tmp.join(&fname)) {
                    err = Some(e);
                    return;
                }
                manifest.push_str(&format!("{name} = {fname}\n"));
            });
            if let Some(e) = err {
                return Err(e);
            }
            crate::io::atomic_write(&tmp.join("manifest.txt"), manifest.as_bytes())?;
            Ok(())
        })();

        if result.is_err() {
            let _ = std::fs::remove_dir_all(&tmp);
            return result;
        }
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::rename(&tmp, dir)?;
        Ok(())
    }

    /// Read a checkpoint directory written by `save_checkpoint`.
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| Error::data(format!("cannot read checkpoint manifest: {e}")))?;
        let mut cfg = ModelConfig::default();
        let mut tensors: Vec<(String, String)> = Vec::new();
        let mut section = String::new();
        for line in manifest.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad manifest line '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            match section.as_str() {
                "model" => match key {
                    "conv_channels" => {
                        cfg.conv_channels = value
                            .split(',')
                            .map(|s| s.trim().parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::data("bad conv_channels in manifest"))?;
                    }
                    "n_heads" => {
                        cfg.n_heads =
                            value.parse().map_err(|_| Error::data("bad n_heads in manifest"))?
                    }
                    "n_layers" => {
                        cfg.n_layers =
                            value.parse().map_err(|_| Error::data("bad n_layers in manifest"))?
                    }
                    "feedforward" => {
                        cfg.feedforward = value
                            .parse()
                            .map_err(|_| Error::data("bad feedforward in manifest"))?
                    }
                    "variant" => cfg.variant = value.parse()?,
                    other => return Err(Error::data(format!("unknown manifest key '{other}'"))),
                },
                "tensors" => tensors.push((key.to_string(), value.to_string())),
                other => return Err(Error::data(format!("unknown manifest section '{other}'"))),
            }
        }

        let mut params = ModelParams::init(&cfg, 0)?;
        let mut loaded = std::collections::BTreeMap::new();
        for (name, fname) in tensors {
            let t = read_tensor(&dir.join(&fname))?;
            match t {
                Tensor::F64(_, v) => {
                    loaded.insert(name, v);
                }
                _ => return Err(Error::data(format!("tensor {fname} is not f64"))),
            }
        }
        let mut err = None;
        params.visit_mut(&mut |name, v| {
            if err.is_some() {
                return;
            }
            match loaded.remove(name) {
                Some(data) if data.len() == v.len() => *v = data,
                Some(data) => {
                    err = Some(Error::data(format!(
                        "tensor {name} has {} values, expected {}",
                        data.len(),
                        v.len()
                    )))
                }
                None => err = Some(Error::data(format!("checkpoint is missing tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some((name, _)) = loaded.into_iter().next() {
            return Err(Error::data(format!("checkpoint has unexpected tensor {name}")));
        }
        Ok(params)
    }
}

/// Phase-1 probe: a temporary linear head over pooled single-slice
/// features, trained with the extractor and discarded afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub linear: LinearParams,
}

impl ProbeHead {
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut linear = LinearParams::zeros(d_model, 1);
        let scale = (1.0 / d_model as f64).sqrt();
        for w in &mut linear.w {
            *w = (rng.gen::<f64>() * 2.0 - 1.0) * scale;
        }
        ProbeHead { linear }
    }
}
