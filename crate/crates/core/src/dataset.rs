//! Synthetic wet/dry scene generation and dataset files.
//!
//! Each sample is a full sensing pass over a randomized scene: leaves are
//! jittered planar patches of point scatterers whose reflectivity band
//! depends on the surface condition, plus a fixed calibration reflector
//! post at the raster edge. The post pins the per-slice normalization
//! scale, so wet leaves (weak echoes) stay distinguishable from dry leaves
//! (strong echoes) even after min-max scaling. The camera image renders
//! the same leaves as green silhouettes; wet leaves get specular droplet
//! speckle, the cue a camera actually sees.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::RgbImage;
use crate::radar::RadarConfig;
use crate::recon::{depth_stack, DepthStack, SarSlice};
use crate::scene::{
    phase_compensate, sample_reflectivity, simulate_scan, RawDataCube, ReflectivityBands,
    ScanGeometry, Scatterer, Scene, Wetness,
};

/// Everything the generator needs to synthesize one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub radar: RadarConfig,
    pub aperture_width: f64,
    pub aperture_height: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub delta_t: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub z_step: f64,
    pub bands: ReflectivityBands,
    pub leaves: (usize, usize),
    pub scatterers_per_leaf: (usize, usize),
    pub leaf_radius_mm: (f64, f64),
    /// Scene box for leaf centres: +/- x, +/- y (mm) and depth range.
    pub leaf_box_x: f64,
    pub leaf_box_y: f64,
    pub leaf_depth: (f64, f64),
    /// Calibration reflector column at a fixed (x, y), one scatterer per
    /// stack depth. Zero magnitude disables it.
    pub post_sigma: f64,
    pub post_x: f64,
    pub post_y: f64,
    pub droplets_per_leaf: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            radar: RadarConfig::default_band(),
            aperture_width: 150.0,
            aperture_height: 100.0,
            n_x: 32,
            n_y: 24,
            delta_t: 0.0,
            z_min: 200.0,
            z_max: 480.0,
            z_step: 40.0,
            bands: ReflectivityBands::default(),
            leaves: (2, 4),
            scatterers_per_leaf: (20, 60),
            leaf_radius_mm: (8.0, 20.0),
            leaf_box_x: 45.0,
            leaf_box_y: 30.0,
            leaf_depth: (210.0, 470.0),
            post_sigma: 1.5,
            post_x: -60.0,
            post_y: -40.0,
            droplets_per_leaf: (6, 15),
        }
    }
}

impl GeneratorConfig {
    /// Small geometry for unit tests: everything shrunk so a full sample
    /// synthesizes in milliseconds.
    pub fn tiny() -> Self {
        GeneratorConfig {
            radar: RadarConfig::new(77e9, 4e9, 1e-3, 8).unwrap(),
            aperture_width: 60.0,
            aperture_height: 45.0,
            n_x: 8,
            n_y: 6,
            z_min: 220.0,
            z_max: 340.0,
            z_step: 40.0,
            leaves: (1, 2),
            scatterers_per_leaf: (10, 20),
            leaf_box_x: 20.0,
            leaf_box_y: 14.0,
            leaf_depth: (225.0, 335.0),
            post_x: -24.0,
            post_y: -18.0,
            ..GeneratorConfig::default()
        }
    }

    pub fn geometry(&self) -> Result<ScanGeometry> {
        ScanGeometry::centered(
            self.aperture_width,
            self.aperture_height,
            self.n_x,
            self.n_y,
            self.delta_t,
            0.0,
        )
    }

    pub fn stack_depths(&self) -> Vec<f64> {
        let count = ((self.z_max - self.z_min) / self.z_step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.z_min + i as f64 * self.z_step).collect()
    }

    pub fn reference_depth(&self) -> f64 {
        0.5 * (self.z_min + self.z_max)
    }

    pub fn validate(&self) -> Result<()> {
        self.bands.validate()?;
        if self.leaves.0 < 1 || self.leaves.0 > self.leaves.1 {
            return Err(Error::config("bad leaf count range"));
        }
        if !(self.z_min > 0.0) || self.z_min > self.z_max || !(self.z_step > 0.0) {
            return Err(Error::config("bad depth stack range"));
        }
        self.geometry().map(|_| ())
    }
}

/// Projected outline of one generated leaf, for camera rendering.
#[derive(Debug, Clone)]
pub struct LeafShape {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub depth: f64,
    pub shade: f64,
    /// Droplet dots (x, y, radius) in mm; empty for dry leaves.
    pub droplets: Vec<(f64, f64, f64)>,
}

/// Provenance of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub id: usize,
    pub scene_seed: u64,
    pub wind_mm: f64,
    pub lighting: f64,
}

/// One training/evaluation sample: the compensated data cube (kept so the
/// augmentation can re-image under wind), the reconstructed raw-magnitude
/// stack, the camera image, and the label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cube: RawDataCube,
    pub stack: DepthStack,
    pub rgb: RgbImage,
    pub label: Wetness,
    pub meta: SampleMeta,
}

impl Sample {
    /// Per-slice min-max normalized stack, ready for fusion.
    pub fn normalized_slices(&self) -> Vec<SarSlice> {
        self.stack.slices.iter().map(|s| s.normalized01()).collect()
    }

    pub fn depths(&self) -> Vec<f64> {
        self.stack.depths()
    }

    /// Mean raw magnitude over the whole stack; the scalar a trivial
    /// reflectivity probe would use.
    pub fn mean_stack_magnitude(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for s in &self.stack.slices {
            sum += s.pixels.data.iter().sum::<f64>();
            n += s.pixels.data.len();
        }
        sum / n as f64
    }
}

/// Generate the scatterer cloud and leaf outlines for one scene.
pub fn generate_scene(
    cfg: &GeneratorConfig,
    wetness: Wetness,
    rng: &mut ChaCha8Rng,
) -> Result<(Scene, Vec<LeafShape>)> {
    let n_leaves = rng.gen_range(cfg.leaves.0..=cfg.leaves.1);
    let mut scatterers = Vec::new();
    let mut shapes = Vec::new();
    for _ in 0..n_leaves {
        let cx = rng.gen_range(-cfg.leaf_box_x..cfg.leaf_box_x);
        let cy = rng.gen_range(-cfg.leaf_box_y..cfg.leaf_box_y);
        let depth = rng.gen_range(cfg.leaf_depth.0..cfg.leaf_depth.1);
        let rx = rng.gen_range(cfg.leaf_radius_mm.0..cfg.leaf_radius_mm.1);
        let ry = rng.gen_range(cfg.leaf_radius_mm.0..cfg.leaf_radius_mm.1);
        let tilt_x = rng.gen_range(-0.3..0.3);
        let tilt_y = rng.gen_range(-0.3..0.3);
        let shade = rng.gen_range(0.0..1.0);
        let n_sc = rng.gen_range(cfg.scatterers_per_leaf.0..=cfg.scatterers_per_leaf.1);
        for _ in 0..n_sc {
            // uniform over the ellipse
            let r = rng.gen::<f64>().sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let ox = r * rx * theta.cos();
            let oy = r * ry * theta.sin();
            let z = depth + tilt_x * ox + tilt_y * oy + rng.gen_range(-1.0..1.0);
            let sigma = sample_reflectivity(wetness, &cfg.bands, rng);
            scatterers.push(Scatterer::new(cx + ox, cy + oy, z.max(1.0), sigma, wetness)?);
        }
        let droplets = if wetness == Wetness::Wet {
            let n_drops = rng.gen_range(cfg.droplets_per_leaf.0..=cfg.droplets_per_leaf.1);
            (0..n_drops)
                .map(|_| {
                    let r = rng.gen::<f64>().sqrt();
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    (
                        cx + 0.85 * r * rx * theta.cos(),
                        cy + 0.85 * r * ry * theta.sin(),
                        rng.gen_range(0.5..1.8),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        shapes.push(LeafShape { cx, cy, rx, ry, depth, shade, droplets });
    }
    // calibration reflector column: one scatterer per stack depth
    if cfg.post_sigma > 0.0 {
        for depth in cfg.stack_depths() {
            scatterers.push(Scatterer::new(
                cfg.post_x,
                cfg.post_y,
                depth,
                Complex64::new(cfg.post_sigma, 0.0),
                wetness,
            )?);
        }
    }
    Ok((Scene::new(scatterers, wetness)?, shapes))
}

/// Paint the camera view of the generated leaves onto the SAR raster.
pub fn render_rgb(
    cfg: &GeneratorConfig,
    raster: &SarSlice,
    shapes: &[LeafShape],
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let (w, h) = (raster.pixels.w, raster.pixels.h);
    let mut img = RgbImage::zeros(w, h);
    // soil background with a little texture
    for row in 0..h {
        for col in 0..w {
            let n = rng.gen_range(-0.02..0.02);
            *img.at_mut(0, row, col) = 0.10 + n;
            *img.at_mut(1, row, col) = 0.08 + n;
            *img.at_mut(2, row, col) = 0.06 + n;
        }
    }
    // far leaves first so near ones overdraw them
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by(|&a, &b| shapes[b].depth.partial_cmp(&shapes[a].depth).unwrap());
    for &si in &order {
        let leaf = &shapes[si];
        let (g_base, tex) = (0.40 + 0.18 * leaf.shade, 0.03);
        for row in 0..h {
            let y = raster.y_at(row);
            for col in 0..w {
                let x = raster.x_at(col);
                let u = (x - leaf.cx) / leaf.rx;
                let v = (y - leaf.cy) / leaf.ry;
                if u * u + v * v <= 1.0 {
                    let n = rng.gen_range(-tex..tex);
                    *img.at_mut(0, row, col) = 0.16 + 0.5 * n;
                    *img.at_mut(1, row, col) = g_base + n;
                    *img.at_mut(2, row, col) = 0.13 + 0.5 * n;
                }
            }
        }
        for &(dx, dy, dr) in &leaf.droplets {
            let (r0, c0) = raster.nearest_pixel(dx, dy);
            let px_r = (dr / raster.pitch_x).ceil() as isize + 1;
            for drow in -px_r..=px_r {
                for dcol in -px_r..=px_r {
                    let row = r0 as isize + drow;
                    let col = c0 as isize + dcol;
                    if row < 0 || row >= h as isize || col < 0 || col >= w as isize {
                        continue;
                    }
                    let x = raster.x_at(col as usize);
                    let y = raster.y_at(row as usize);
                    if (x - dx).powi(2) + (y - dy).powi(2) <= dr * dr {
                        *img.at_mut(0, row as usize, col as usize) = 0.92;
                        *img.at_mut(1, row as usize, col as usize) = 0.94;
                        *img.at_mut(2, row as usize, col as usize) = 0.97;
                    }
                }
            }
        }
    }
    // calibration post marker
    if cfg.post_sigma > 0.0 {
        let (r0, c0) = raster.nearest_pixel(cfg.post_x, cfg.post_y);
        for drow in -1i64..=1 {
            for dcol in -1i64..=1 {
                let row = (r0 as i64 + drow).clamp(0, h as i64 - 1) as usize;
                let col = (c0 as i64 + dcol).clamp(0, w as i64 - 1) as usize;
                for c in 0..3 {
                    *img.at_mut(c, row, col) = 0.55;
                }
            }
        }
    }
    img.clamp01();
    img
}

/// Synthesize one sample end to end: scene, scan, compensation, depth
/// stack, camera render. Deterministic per seed.
pub fn synth_sample(
    cfg: &GeneratorConfig,
    wetness: Wetness,
    id: usize,
    seed: u64,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scene, shapes) = generate_scene(cfg, wetness, &mut rng)?;
    let geom = cfg.geometry()?;
    let raw = simulate_scan(&scene, &geom, &cfg.radar)?;
    let cube = phase_compensate(&raw, cfg.reference_depth())?;
    let stack = depth_stack(&cube, cfg.z_min, cfg.z_max, cfg.z_step)?;
    let rgb = render_rgb(cfg, &stack.slices[0], &shapes, &mut rng);
    Ok(Sample {
        cube,
        stack,
        rgb,
        label: wetness,
        meta: SampleMeta { id, scene_seed: seed, wind_mm: 0.0, lighting: 1.0 },
    })
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step keyed by the index
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate `n` samples, half dry and half wet, interleaved. Samples are
/// independent and synthesized in parallel; the result depends only on the
/// seed.
pub fn synth_dataset(n: usize, cfg: &GeneratorConfig, seed: u64) -> Result<Vec<Sample>> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::domain(format!("dataset size must be even and >= 2, got {n}")));
    }
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let wetness = if i % 2 == 0 { Wetness::Dry } else { Wetness::Wet };
            synth_sample(cfg, wetness, i, derive_seed(seed, i as u64))
        })
        .collect()
}

// ---------------------------------------------------------------------
// dataset directory layout
// ---------------------------------------------------------------------

use crate::io::tensor::{read_tensor, write_tensor, Tensor};

/// Write a dataset directory: `dataset.csv` (one row per sample), a
/// `geometry.meta` sidecar with the shared radar/scan/stack parameters,
/// and per-sample tensors (`cube`, `stack`, `depths`) plus the camera PPM.
pub fn save_dataset(dir: &Path, samples: &[Sample], cfg: &GeneratorConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::domain("refusing to write an empty dataset"));
    }
    std::fs::create_dir_all(dir)?;

    let mut meta = String::new();
    meta.push_str("[radar]\n");
    meta.push_str(&format!("f0 = {:e}\n", cfg.radar.f0));
    meta.push_str(&format!("bandwidth = {:e}\n", cfg.radar.bandwidth));
    meta.push_str(&format!("chirp_duration = {:e}\n", cfg.radar.chirp_duration));
    meta.push_str(&format!("n_freq = {}\n", cfg.radar.n_freq));
    meta.push_str("\n[geometry]\n");
    meta.push_str(&format!("aperture_width = {}\n", cfg.aperture_width));
    meta.push_str(&format!("aperture_height = {}\n", cfg.aperture_height));
    meta.push_str(&format!("n_x = {}\n", cfg.n_x));
    meta.push_str(&format!("n_y = {}\n", cfg.n_y));
    meta.push_str(&format!("delta_t = {}\n", cfg.delta_t));
    meta.push_str("\n[stack]\n");
    meta.push_str(&format!("z_min = {}\n", cfg.z_min));
    meta.push_str(&format!("z_max = {}\n", cfg.z_max));
    meta.push_str(&format!("z_step = {}\n", cfg.z_step));
    crate::io::atomic_write(&dir.join("geometry.meta"), meta.as_bytes())?;

    let mut csv = Vec::new();
    writeln!(csv, "id,label,scene_seed,wind_mm,lighting").map_err(Error::from)?;
    for s in samples {
        writeln!(
            csv,
            "{},{},{},{},{}",
            s.meta.id, s.label, s.meta.scene_seed, s.meta.wind_mm, s.meta.lighting
        )
        .map_err(Error::from)?;

        let base = format!("sample_{:04}", s.meta.id);
        write_tensor(
            &Tensor::C128(
                vec![s.cube.n_x() as u32, s.cube.n_y() as u32, s.cube.n_freq() as u32],
                s.cube.data.clone(),
            ),
            &dir.join(format!("{base}.cube.hyt1")),
        )?;
        let (h, w) = (s.stack.slices[0].pixels.h, s.stack.slices[0].pixels.w);
        let mut stack_data = Vec::with_capacity(s.stack.slices.len() * h * w);
        for slice in &s.stack.slices {
            stack_data.extend_from_slice(&slice.pixels.data);
        }
        write_tensor(
            &Tensor::F64(vec![s.stack.slices.len() as u32, h as u32, w as u32], stack_data),
            &dir.join(format!("{base}.stack.hyt1")),
        )?;
        write_tensor(
            &Tensor::F64(vec![s.stack.slices.len() as u32], s.stack.depths()),
            &dir.join(format!("{base}.depths.hyt1")),
        )?;
        s.rgb.write_ppm(&dir.join(format!("{base}.rgb.ppm")))?;
    }
    crate::io::atomic_write(&dir.join("dataset.csv"), &csv)?;
    Ok(())
}

fn parse_meta_value<T: std::str::FromStr>(
    lines: &std::collections::BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    lines
        .get(key)
        .ok_or_else(|| Error::data(format!("geometry.meta is missing {key}")))?
        .parse::<T>()
        .map_err(|_| Error::data(format!("bad value for {key} in geometry.meta")))
}

/// Read a dataset directory written by [`save_dataset`]. The generator
/// config is reconstructed with defaults for fields the files do not pin
/// (scene randomization knobs, which are irrelevant after synthesis).
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, GeneratorConfig)> {
    let meta_text = std::fs::read_to_string(dir.join("geometry.meta"))
        .map_err(|e| Error::data(format!("cannot read geometry.meta: {e}")))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in meta_text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('[') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("bad geometry.meta line '{line}'")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut cfg = GeneratorConfig {
        radar: RadarConfig::new(
            parse_meta_value(&kv, "f0")?,
            parse_meta_value(&kv, "bandwidth")?,
            parse_meta_value(&kv, "chirp_duration")?,
            parse_meta_value(&kv, "n_freq")?,
        )?,
        ..GeneratorConfig::default()
    };
    cfg.aperture_width = parse_meta_value(&kv, "aperture_width")?;
    cfg.aperture_height = parse_meta_value(&kv, "aperture_height")?;
    cfg.n_x = parse_meta_value(&kv, "n_x")?;
    cfg.n_y = parse_meta_value(&kv, "n_y")?;
    cfg.delta_t = parse_meta_value(&kv, "delta_t")?;
    cfg.z_min = parse_meta_value(&kv, "z_min")?;
    cfg.z_max = parse_meta_value(&kv, "z_max")?;
    cfg.z_step = parse_meta_value(&kv, "z_step")?;

    let csv = std::fs::read_to_string(dir.join("dataset.csv"))
        .map_err(|e| Error::data(format!("cannot read dataset.csv: {e}")))?;
    let geom = cfg.geometry()?;
    let mut samples = Vec::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            if line.trim() != "id,label,scene_seed,wind_mm,lighting" {
                return Err(Error::data("unexpected dataset.csv header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::data(format!("dataset.csv line {}: bad field count", i + 1)));
        }
        let id: usize =
            fields[0].parse().map_err(|_| Error::data("bad id in dataset.csv"))?;
        let label: Wetness = fields[1].parse()?;
        let scene_seed: u64 =
            fields[2].parse().map_err(|_| Error::data("bad seed in dataset.csv"))?;
        let wind_mm: f64 =
            fields[3].parse().map_err(|_| Error::data("bad wind in dataset.csv"))?;
        let lighting: f64 =
            fields[4].parse().map_err(|_| Error::data("bad lighting in dataset.csv"))?;

        let base = format!("sample_{id:04}");
        let cube_t = read_tensor(&dir.join(format!("{base}.cube.hyt1")))?;
        let cube_data = match cube_t {
            Tensor::C128(dims, data)
                if dims == vec![cfg.n_x as u32, cfg.n_y as u32, cfg.radar.n_freq as u32] =>
            {
                data
            }
            _ => return Err(Error::data(format!("{base}: cube tensor has wrong shape/type"))),
        };
        let cube = RawDataCube {
            data: cube_data,
            geometry: geom.clone(),
            cfg: cfg.radar.clone(),
            compensated: true,
        };

        let stack_t = read_tensor(&dir.join(format!("{base}.stack.hyt1")))?;
        let depths_t = read_tensor(&dir.join(format!("{base}.depths.hyt1")))?;
        let depths = match depths_t {
            Tensor::F64(_, v) => v,
            _ => return Err(Error::data(format!("{base}: depths tensor must be f64"))),
        };
        let stack = match stack_t {
            Tensor::F64(dims, data) if dims.len() == 3 => {
                let (ns, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
                if ns != depths.len() || data.len() != ns * h * w {
                    return Err(Error::data(format!("{base}: stack/depths mismatch")));
                }
                let mut slices = Vec::with_capacity(ns);
                for (si, chunk) in data.chunks_exact(h * w).enumerate() {
                    slices.push(SarSlice {
                        pixels: crate::raster::Grid2::from_data(w, h, chunk.to_vec())?,
                        z0: depths[si],
                        x_min: geom.x_positions[0],
                        y_min: geom.y_positions[0],
                        pitch_x: geom.x_step() / 2.0,
                        pitch_y: geom.y_step() / 2.0,
                    });
                }
                DepthStack { slices, z_min: cfg.z_min, z_max: cfg.z_max, step: cfg.z_step }
            }
            _ => return Err(Error::data(format!("{base}: stack tensor must be f64 rank 3"))),
        };
        let rgb = RgbImage::read_ppm(&dir.join(format!("{base}.rgb.ppm")))?;
        samples.push(Sample {
            cube,
            stack,
            rgb,
            label,
            meta: SampleMeta { id, scene_seed, wind_mm, lighting },
        });
    }
    if samples.is_empty() {
        return Err(Error::data("dataset.csv lists no samples"));
    }
    Ok((samples, cfg))
}
