//! Run configuration: a minimal `[section]` / `key = value` text format.
//!
//! Lines are trimmed; blank lines and `#` comments are ignored. Unknown
//! sections or keys are rejected, as are duplicate keys. Keys ending in
//! `_file` are resolved relative to the config file and must exist.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::dataset::GeneratorConfig;
use crate::error::{Error, Result};
use crate::params::ModelVariant;
use crate::radar::RadarConfig;
use crate::train::TrainHyper;

/// Everything a pipeline run needs, with defaults for every field.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub hyper: TrainHyper,
    pub dataset_n: usize,
    pub dataset_seed: u64,
    pub cv_k: usize,
    pub cv_repeats: usize,
    pub cv_seed: u64,
    /// Optional scene file for `simulate` (resolved, existence-checked).
    pub scene_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            hyper: TrainHyper::default(),
            dataset_n: 200,
            dataset_seed: 42,
            cv_k: 5,
            cv_repeats: 3,
            cv_seed: 7,
            scene_file: None,
        }
    }
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("bad value '{value}' for [{section}] {key}")))
}

fn parse_pair(section: &str, key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::config(format!("[{section}] {key} needs 'lo,hi'")));
    }
    Ok((parse(section, key, parts[0])?, parse(section, key, parts[1])?))
}

impl RunConfig {
    /// Parse config text. `base_dir` anchors relative `_file` paths.
    pub fn parse_text(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut radar = (
            cfg.generator.radar.f0,
            cfg.generator.radar.bandwidth,
            cfg.generator.radar.chirp_duration,
            cfg.generator.radar.n_freq,
        );
        let mut section = String::new();
        let mut seen = BTreeSet::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::config(format!("line {}: bad section header", lineno + 1)));
                }
                section = line[1..line.len() - 1].trim().to_string();
                match section.as_str() {
                    "radar" | "geometry" | "scene" | "stack" | "model" | "training"
                    | "augmentation" | "dataset" | "crossval" => {}
                    other => {
                        return Err(Error::config(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(Error::config(format!("line {}: key outside any section", lineno + 1)));
            }
            if !seen.insert(format!("{section}.{key}")) {
                return Err(Error::config(format!("line {}: duplicate key {key}", lineno + 1)));
            }

            let s = section.as_str();
            match (s, key) {
                ("radar", "f0") => radar.0 = parse(s, key, value)?,
                ("radar", "bandwidth") => radar.1 = parse(s, key, value)?,
                ("radar", "chirp_duration") => radar.2 = parse(s, key, value)?,
                ("radar", "n_freq") => radar.3 = parse(s, key, value)?,

                ("geometry", "aperture_width") => cfg.generator.aperture_width = parse(s, key, value)?,
                ("geometry", "aperture_height") => cfg.generator.aperture_height = parse(s, key, value)?,
                ("geometry", "n_x") => cfg.generator.n_x = parse(s, key, value)?,
                ("geometry", "n_y") => cfg.generator.n_y = parse(s, key, value)?,
                ("geometry", "delta_t") => cfg.generator.delta_t = parse(s, key, value)?,

                ("scene", "scene_file") => {
                    let path = base_dir.join(value);
                    if !path.exists() {
                        return Err(Error::config(format!(
                            "[scene] scene_file '{}' does not exist",
                            path.display()
                        )));
                    }
                    cfg.scene_file = Some(path);
                }
                ("scene", "leaves_min") => cfg.generator.leaves.0 = parse(s, key, value)?,
                ("scene", "leaves_max") => cfg.generator.leaves.1 = parse(s, key, value)?,
                ("scene", "scatterers_min") => cfg.generator.scatterers_per_leaf.0 = parse(s, key, value)?,
                ("scene", "scatterers_max") => cfg.generator.scatterers_per_leaf.1 = parse(s, key, value)?,
                ("scene", "dry_band") => cfg.generator.bands.dry = parse_pair(s, key, value)?,
                ("scene", "wet_band") => cfg.generator.bands.wet = parse_pair(s, key, value)?,
                ("scene", "post_sigma") => cfg.generator.post_sigma = parse(s, key, value)?,

                ("stack", "z_min") => cfg.generator.z_min = parse(s, key, value)?,
                ("stack", "z_max") => cfg.generator.z_max = parse(s, key, value)?,
                ("stack", "z_step") => cfg.generator.z_step = parse(s, key, value)?,

                ("model", "conv_channels") => {
                    cfg.hyper.model.conv_channels = value
                        .split(',')
                        .map(|c| parse::<usize>(s, key, c.trim()))
                        .collect::<Result<_>>()?;
                }
                ("model", "n_heads") => cfg.hyper.model.n_heads = parse(s, key, value)?,
                ("model", "n_layers") => cfg.hyper.model.n_layers = parse(s, key, value)?,
                ("model", "feedforward") => cfg.hyper.model.feedforward = parse(s, key, value)?,
                ("model", "variant") => cfg.hyper.model.variant = parse::<ModelVariant>(s, key, value)?,

                ("training", "lr_phase1") => cfg.hyper.lr_phase1 = parse(s, key, value)?,
                ("training", "lr_phase2") => cfg.hyper.lr_phase2 = parse(s, key, value)?,
                ("training", "momentum") => cfg.hyper.momentum = parse(s, key, value)?,
                ("training", "epochs_phase1") => cfg.hyper.epochs_phase1 = parse(s, key, value)?,
                ("training", "epochs_phase2") => cfg.hyper.epochs_phase2 = parse(s, key, value)?,
                ("training", "batch_size") => cfg.hyper.batch_size = parse(s, key, value)?,
                ("training", "seed") => cfg.hyper.seed = parse(s, key, value)?,

                ("augmentation", "rgb_dropout_p") => cfg.hyper.augment.rgb_dropout_p = parse(s, key, value)?,
                ("augmentation", "lighting_min") => {
                    let hi = cfg.hyper.augment.lighting.map(|(_, h)| h).unwrap_or(1.2);
                    cfg.hyper.augment.lighting = Some((parse(s, key, value)?, hi));
                }
                ("augmentation", "lighting_max") => {
                    let lo = cfg.hyper.augment.lighting.map(|(l, _)| l).unwrap_or(0.4);
                    cfg.hyper.augment.lighting = Some((lo, parse(s, key, value)?));
                }
                ("augmentation", "wind_mm") => cfg.hyper.augment.wind_mm = parse(s, key, value)?,

                ("dataset", "n") => cfg.dataset_n = parse(s, key, value)?,
                ("dataset", "seed") => cfg.dataset_seed = parse(s, key, value)?,

                ("crossval", "k") => cfg.cv_k = parse(s, key, value)?,
                ("crossval", "repeats") => cfg.cv_repeats = parse(s, key, value)?,
                ("crossval", "seed") => cfg.cv_seed = parse(s, key, value)?,

                (_, other) => {
                    return Err(Error::config(format!(
                        "line {}: unknown key '{other}' in section [{section}]",
                        lineno + 1
                    )))
                }
            }
        }

        cfg.generator.radar = RadarConfig::new(radar.0, radar.1, radar.2, radar.3)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse_text(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.hyper.validate()?;
        if self.dataset_n < 2 || self.dataset_n % 2 != 0 {
            return Err(Error::config("dataset n must be even and >= 2"));
        }
        if self.cv_k < 2 || self.cv_repeats < 1 {
            return Err(Error::config("crossval needs k >= 2 and repeats >= 1"));
        }
        Ok(())
    }

    /// Render the config back out (defaults included), for `--dump-config`.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let h = &self.hyper;
        let lighting = h.augment.lighting.unwrap_or((1.0, 1.0));
        format!(
            "[radar]\n\
             f0 = {:e}\n\
             bandwidth = {:e}\n\
             chirp_duration = {:e}\n\
             n_freq = {}\n\
             \n[geometry]\n\
             aperture_width = {}\n\
             aperture_height = {}\n\
             n_x = {}\n\
             n_y = {}\n\
             delta_t = {}\n\
             \n[scene]\n\
             leaves_min = {}\n\
             leaves_max = {}\n\
             scatterers_min = {}\n\
             scatterers_max = {}\n\
             dry_band = {},{}\n\
             wet_band = {},{}\n\
             post_sigma = {}\n\
             \n[stack]\n\
             z_min = {}\n\
             z_max = {}\n\
             z_step = {}\n\
             \n[model]\n\
             conv_channels = {}\n\
             n_heads = {}\n\
             n_layers = {}\n\
             feedforward = {}\n\
             variant = {}\n\
             \n[training]\n\
             lr_phase1 = {}\n\
             lr_phase2 = {}\n\
             momentum = {}\n\
             epochs_phase1 = {}\n\
             epochs_phase2 = {}\n\
             batch_size = {}\n\
             seed = {}\n\
             \n[augmentation]\n\
             rgb_dropout_p = {}\n\
             lighting_min = {}\n\
             lighting_max = {}\n\
             wind_mm = {}\n\
             \n[dataset]\n\
             n = {}\n\
             seed = {}\n\
             \n[crossval]\n\
             k = {}\n\
             repeats = {}\n\
             seed = {}\n",
            g.radar.f0,
            g.radar.bandwidth,
            g.radar.chirp_duration,
            g.radar.n_freq,
            g.aperture_width,
            g.aperture_height,
            g.n_x,
            g.n_y,
            g.delta_t,
            g.leaves.0,
            g.leaves.1,
            g.scatterers_per_leaf.0,
            g.scatterers_per_leaf.1,
            g.bands.dry.0,
            g.bands.dry.1,
            g.bands.wet.0,
            g.bands.wet.1,
            g.post_sigma,
            g.z_min,
            g.z_max,
            g.z_step,
            h.model
                .conv_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            h.model.n_heads,
            h.model.n_layers,
            h.model.feedforward,
            h.model.variant,
            h.lr_phase1,
            h.lr_phase2,
            h.momentum,
            h.epochs_phase1,
            h.epochs_phase2,
            h.batch_size,
            h.seed,
            h.augment.rgb_dropout_p,
            lighting.0,
            lighting.1,
            h.augment.wind_mm,
            self.dataset_n,
            self.dataset_seed,
            self.cv_k,
            self.cv_repeats,
            self.cv_seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse_text(&text, Path::new(".")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(RunConfig::parse_text("[radar]\nbogus = 1\n", Path::new(".")).is_err());
        assert!(RunConfig::parse_text("[warp]\nspeed = 9\n", Path::new(".")).is_err());
        assert!(RunConfig::parse_text("loose = 1\n", Path::new(".")).is_err());
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let text = "[radar]\nf0 = 77e9\nf0 = 78e9\n";
        assert!(RunConfig::parse_text(text, Path::new(".")).is_err());
    }

    #[test]
    fn comments_and_overrides_apply() {
        let text = "# top\n[dataset]\nn = 50  # small\nseed = 9\n[crossval]\nk = 4\n";
        let cfg = RunConfig::parse_text(text, Path::new(".")).unwrap();
        assert_eq!(cfg.dataset_n, 50);
        assert_eq!(cfg.dataset_seed, 9);
        assert_eq!(cfg.cv_k, 4);
        // untouched fields keep defaults
        assert_eq!(cfg.cv_repeats, 3);
    }

    #[test]
    fn missing_scene_file_is_rejected() {
        let text = "[scene]\nscene_file = nowhere.txt\n";
        assert!(RunConfig::parse_text(text, Path::new("/definitely/missing")).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse_text("[dataset]\nn = -3\n", Path::new(".")).is_err());
        assert!(RunConfig::parse_text("[dataset]\nn = 7\n", Path::new(".")).is_err());
        assert!(RunConfig::parse_text("[model]\nvariant = hologram\n", Path::new(".")).is_err());
    }
}
