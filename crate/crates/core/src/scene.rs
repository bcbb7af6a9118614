//! Point-scatterer scenes and raw SAR data synthesis over a planar scan.
//!
//! A scene is a cloud of point scatterers with complex reflectivity; the
//! simulator integrates their echoes over every aperture position and
//! sampled wavenumber to produce a [`RawDataCube`]. Transmit and receive
//! antennas ride the same scan head, separated vertically by `delta_t`;
//! [`phase_compensate`] removes the bistatic path difference so the cube
//! matches the monostatic model the reconstructor assumes.
//!
//! All geometry is in millimetres; wavenumbers are rad/m.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::radar::{wavenumber_grid, RadarConfig};

const MM_TO_M: f64 = 1e-3;

/// Surface condition of a scatterer or scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Wetness {
    Dry,
    Wet,
}

impl Wetness {
    /// Class label used by the training pipeline: Dry=0, Wet=1.
    pub fn label(self) -> f64 {
        match self {
            Wetness::Dry => 0.0,
            Wetness::Wet => 1.0,
        }
    }
}

impl fmt::Display for Wetness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Wetness::Dry => write!(f, "dry"),
            Wetness::Wet => write!(f, "wet"),
        }
    }
}

impl std::str::FromStr for Wetness {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dry" => Ok(Wetness::Dry),
            "wet" => Ok(Wetness::Wet),
            other => Err(Error::data(format!("unknown wetness '{other}'"))),
        }
    }
}

/// One point scatterer. `z` is measured along the boresight axis in the
/// same frame as the aperture standoff `z0`; depth from the aperture plane
/// is `z - z0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub sigma: Complex64,
    pub wetness: Wetness,
}

impl Scatterer {
    pub fn new(x: f64, y: f64, z: f64, sigma: Complex64, wetness: Wetness) -> Result<Self> {
        if !(z > 0.0) {
            return Err(Error::domain(format!("scatterer z must be positive, got {z}")));
        }
        if ![x, y, sigma.re, sigma.im].iter().all(|v| v.is_finite()) {
            return Err(Error::domain("scatterer fields must be finite"));
        }
        Ok(Scatterer { x, y, z, sigma, wetness })
    }
}

/// A labelled cloud of scatterers. Empty scenes are allowed for null tests;
/// non-empty scenes must have a label consistent with the majority wetness.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scatterers: Vec<Scatterer>,
    pub label: Wetness,
}

impl Scene {
    pub fn new(scatterers: Vec<Scatterer>, label: Wetness) -> Result<Self> {
        if !scatterers.is_empty() {
            let wet = scatterers.iter().filter(|s| s.wetness == Wetness::Wet).count();
            let dry = scatterers.len() - wet;
            let majority_ok = match label {
                Wetness::Wet => wet >= dry,
                Wetness::Dry => dry >= wet,
            };
            if !majority_ok {
                return Err(Error::domain(format!(
                    "label {label} conflicts with majority wetness ({wet} wet vs {dry} dry)"
                )));
            }
        }
        Ok(Scene { scatterers, label })
    }

    pub fn empty() -> Self {
        Scene { scatterers: Vec::new(), label: Wetness::Dry }
    }

    /// Read the line-oriented scene format: one scatterer per line,
    /// `x y z sigma_re sigma_im wetness`, with `#` comments and blank lines
    /// ignored. The scene label is the majority wetness.
    pub fn read_from(reader: impl BufRead) -> Result<Scene> {
        let mut scatterers = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::data(format!(
                    "scene line {}: expected 6 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|_| Error::data(format!("scene line {}: bad number '{}'", lineno + 1, fields[i])))
            };
            let wetness: Wetness = fields[5].parse()?;
            scatterers.push(Scatterer::new(
                num(0)?,
                num(1)?,
                num(2)?,
                Complex64::new(num(3)?, num(4)?),
                wetness,
            )?);
        }
        let wet = scatterers.iter().filter(|s| s.wetness == Wetness::Wet).count();
        let label = if wet * 2 >= scatterers.len().max(1) { Wetness::Wet } else { Wetness::Dry };
        Scene::new(scatterers, label)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# x_mm y_mm z_mm sigma_re sigma_im wetness")?;
        for s in &self.scatterers {
            writeln!(
                w,
                "{:.6} {:.6} {:.6} {:.9} {:.9} {}",
                s.x, s.y, s.z, s.sigma.re, s.sigma.im, s.wetness
            )?;
        }
        Ok(())
    }
}

/// Two-axis scan geometry: horizontal samples `x_positions`, vertical
/// samples `y_positions`, vertical TX/RX offset `delta_t`, and the standoff
/// coordinate `z0` of the aperture plane. All in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    pub x_positions: Vec<f64>,
    pub y_positions: Vec<f64>,
    pub delta_t: f64,
    pub z0: f64,
}

fn check_uniform(name: &str, v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::config(format!("{name} needs at least 2 samples")));
    }
    let step = v[1] - v[0];
    if !(step > 0.0) {
        return Err(Error::config(format!("{name} must be strictly increasing")));
    }
    for w in v.windows(2) {
        let d = w[1] - w[0];
        if !(d > 0.0) || (d - step).abs() > 1e-9 * step {
            return Err(Error::config(format!("{name} must be uniformly spaced")));
        }
    }
    Ok(())
}

impl ScanGeometry {
    pub fn new(x_positions: Vec<f64>, y_positions: Vec<f64>, delta_t: f64, z0: f64) -> Result<Self> {
        check_uniform("x_positions", &x_positions)?;
        check_uniform("y_positions", &y_positions)?;
        if !delta_t.is_finite() || !z0.is_finite() {
            return Err(Error::config("delta_t and z0 must be finite"));
        }
        Ok(ScanGeometry { x_positions, y_positions, delta_t, z0 })
    }

    /// Aperture of the given extent centred on the boresight axis with a
    /// fixed number of samples per axis.
    pub fn centered(width: f64, height: f64, nx: usize, ny: usize, delta_t: f64, z0: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::config("aperture needs at least 2x2 samples"));
        }
        let xs = (0..nx).map(|i| -width / 2.0 + width * i as f64 / (nx - 1) as f64).collect();
        let ys = (0..ny).map(|i| -height / 2.0 + height * i as f64 / (ny - 1) as f64).collect();
        ScanGeometry::new(xs, ys, delta_t, z0)
    }

    /// Default 150 x 100 mm aperture sampled at a quarter carrier
    /// wavelength, the Nyquist-safe pitch for near-field imaging.
    pub fn default_aperture(cfg: &RadarConfig) -> Result<Self> {
        let step = cfg.carrier_wavelength() / 4.0 / MM_TO_M; // mm
        let nx = (150.0 / step).floor() as usize + 1;
        let ny = (100.0 / step).floor() as usize + 1;
        ScanGeometry::centered((nx - 1) as f64 * step, (ny - 1) as f64 * step, nx, ny, 0.0, 0.0)
    }

    pub fn nx(&self) -> usize {
        self.x_positions.len()
    }

    pub fn ny(&self) -> usize {
        self.y_positions.len()
    }

    pub fn x_step(&self) -> f64 {
        self.x_positions[1] - self.x_positions[0]
    }

    pub fn y_step(&self) -> f64 {
        self.y_positions[1] - self.y_positions[0]
    }

    /// Centre of the scanned aperture.
    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_positions[0] + *self.x_positions.last().unwrap()),
            0.5 * (self.y_positions[0] + *self.y_positions.last().unwrap()),
        )
    }

    /// Transmit/receive antenna positions for the scan sample at `(x, y)`:
    /// both on the aperture plane at the sample's x, offset vertically by
    /// `+/- delta_t/2` about the sample's y.
    pub fn antenna_pair(&self, x: f64, y: f64) -> ([f64; 3], [f64; 3]) {
        (
            [x, y + self.delta_t / 2.0, self.z0],
            [x, y - self.delta_t / 2.0, self.z0],
        )
    }
}

/// Complex beat samples over the scan, indexed `(aperture x, aperture y,
/// frequency)`, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataCube {
    pub data: Vec<Complex64>,
    pub geometry: ScanGeometry,
    pub cfg: RadarConfig,
    /// True once the bistatic phase has been removed.
    pub compensated: bool,
}

impl RawDataCube {
    pub fn n_x(&self) -> usize {
        self.geometry.nx()
    }

    pub fn n_y(&self) -> usize {
        self.geometry.ny()
    }

    pub fn n_freq(&self) -> usize {
        self.cfg.n_freq
    }

    #[inline]
    pub fn index(&self, a: usize, b: usize, j: usize) -> usize {
        (a * self.n_y() + b) * self.n_freq() + j
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize, j: usize) -> Complex64 {
        self.data[self.index(a, b, j)]
    }

    pub fn zeros(geometry: ScanGeometry, cfg: RadarConfig) -> Self {
        let n = geometry.nx() * geometry.ny() * cfg.n_freq;
        RawDataCube { data: vec![Complex64::new(0.0, 0.0); n], geometry, cfg, compensated: false }
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Bistatic transmit/receive distances for a scatterer and a mirrored
/// antenna pair: the transmitter sits at `x = -(x_ap + delta_t/2)`, the
/// receiver at `x = +(x_ap + delta_t/2)`, at heights `y_t` and `y_r` on the
/// standoff plane. Millimetres in, millimetres out.
pub fn two_way_ranges(
    sc: &Scatterer,
    x_ap: f64,
    y_t: f64,
    y_r: f64,
    geom: &ScanGeometry,
) -> (f64, f64) {
    let u = x_ap + geom.delta_t / 2.0;
    let dz = sc.z - geom.z0;
    let r_t = ((sc.x + u).powi(2) + (sc.y - y_t).powi(2) + dz * dz).sqrt();
    let r_r = ((sc.x - u).powi(2) + (sc.y - y_r).powi(2) + dz * dz).sqrt();
    (r_t, r_r)
}

/// Synthesize the raw data cube: for every aperture sample and wavenumber,
/// the coherent sum of `sigma * exp(-j*k*(R_T + R_R))` over the scene.
///
/// Work is parallel over aperture positions; each position accumulates its
/// scatterer sum in a fixed order, so the result does not depend on the
/// thread count.
pub fn simulate_scan(scene: &Scene, geom: &ScanGeometry, cfg: &RadarConfig) -> Result<RawDataCube> {
    let ks = wavenumber_grid(cfg);
    let nf = cfg.n_freq;
    if ks.len() != nf {
        return Err(Error::config("wavenumber grid does not match n_freq"));
    }
    let ny = geom.ny();
    let mut cube = RawDataCube::zeros(geom.clone(), cfg.clone());
    let k0 = ks[0];
    let dk = ks[1] - ks[0];

    cube.data
        .par_chunks_mut(nf)
        .enumerate()
        .for_each(|(pos, out)| {
            let a = pos / ny;
            let b = pos % ny;
            let x = geom.x_positions[a];
            let y = geom.y_positions[b];
            let (tx, rx) = geom.antenna_pair(x, y);
            for sc in &scene.scatterers {
                let p = [sc.x, sc.y, sc.z];
                let r_sum_m = (dist3(tx, p) + dist3(rx, p)) * MM_TO_M;
                // phase_j = -(k0 + j*dk) * r_sum: start at -k0*r and rotate
                // by -dk*r per frequency step.
                let mut e = sc.sigma * Complex64::from_polar(1.0, -k0 * r_sum_m);
                let w = Complex64::from_polar(1.0, -dk * r_sum_m);
                for o in out.iter_mut() {
                    *o += e;
                    e *= w;
                }
            }
        });

    Ok(cube)
}

/// Remove the bistatic path difference, converting the cube to its
/// monostatic equivalent.
///
/// For each aperture sample the reference ranges are taken to a scene-free
/// target on the aperture's central axis at depth `z_ref`; each beat sample
/// is multiplied by `exp(+j*k*(R_T_ref + R_R_ref - 2*R_mono_ref))`, where
/// the monostatic range is measured from the TX/RX geometric midpoint.
/// With `delta_t == 0` the factor is exactly one.
pub fn phase_compensate(raw: &RawDataCube, z_ref: f64) -> Result<RawDataCube> {
    if raw.compensated {
        return Err(Error::state("cube is already phase compensated"));
    }
    if !(z_ref > 0.0) {
        return Err(Error::domain(format!("reference depth must be positive, got {z_ref}")));
    }
    let geom = &raw.geometry;
    let ks = wavenumber_grid(&raw.cfg);
    let (xc, yc) = geom.center();
    let reference = [xc, yc, geom.z0 + z_ref];

    let mut out = raw.clone();
    out.compensated = true;
    let nf = raw.n_freq();
    let ny = geom.ny();
    out.data.par_chunks_mut(nf).enumerate().for_each(|(pos, chunk)| {
        let a = pos / ny;
        let b = pos % ny;
        let x = geom.x_positions[a];
        let y = geom.y_positions[b];
        let (tx, rx) = geom.antenna_pair(x, y);
        let mono = [x, y, geom.z0];
        let extra_m =
            (dist3(tx, reference) + dist3(rx, reference) - 2.0 * dist3(mono, reference)) * MM_TO_M;
        if extra_m != 0.0 {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v *= Complex64::from_polar(1.0, ks[j] * extra_m);
            }
        }
    });
    Ok(out)
}

/// Apply per-aperture-position range jitter `dr ~ Uniform(-amplitude,
/// amplitude)` as the pure phase factor `exp(-j*2*k*dr)`, simulating
/// breeze-induced motion between scan positions. Deterministic per seed;
/// zero amplitude returns a bit-identical copy.
pub fn wind_perturb(raw: &RawDataCube, amplitude_mm: f64, seed: u64) -> Result<RawDataCube> {
    if !(amplitude_mm >= 0.0) {
        return Err(Error::domain(format!("wind amplitude must be non-negative, got {amplitude_mm}")));
    }
    let mut out = raw.clone();
    if amplitude_mm == 0.0 {
        return Ok(out);
    }
    let ks = wavenumber_grid(&raw.cfg);
    let nf = raw.n_freq();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for chunk in out.data.chunks_mut(nf) {
        let dr_m = rng.gen_range(-amplitude_mm..=amplitude_mm) * MM_TO_M;
        for (j, v) in chunk.iter_mut().enumerate() {
            *v *= Complex64::from_polar(1.0, -2.0 * ks[j] * dr_m);
        }
    }
    Ok(out)
}

/// Reflectivity magnitude bands for the two surface conditions. Free water
/// absorbs at these wavelengths, so wet surfaces echo in a lower band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectivityBands {
    pub dry: (f64, f64),
    pub wet: (f64, f64),
}

impl Default for ReflectivityBands {
    fn default() -> Self {
        ReflectivityBands { dry: (0.8, 1.0), wet: (0.3, 0.5) }
    }
}

impl ReflectivityBands {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.dry, self.wet] {
            if !(0.0 <= lo && lo <= hi) {
                return Err(Error::config(format!("bad reflectivity band [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Draw a complex reflectivity for the given condition: magnitude uniform in
/// the band, phase uniform over the circle.
pub fn sample_reflectivity(
    wetness: Wetness,
    bands: &ReflectivityBands,
    rng: &mut impl Rng,
) -> Complex64 {
    let (lo, hi) = match wetness {
        Wetness::Dry => bands.dry,
        Wetness::Wet => bands.wet,
    };
    let mag = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let phase = rng.gen_range(0.0..2.0 * PI);
    Complex64::from_polar(mag, phase)
}

/// Seeded single draw with the default bands.
pub fn reflectivity_of(wetness: Wetness, rng_seed: u64) -> Complex64 {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_reflectivity(wetness, &ReflectivityBands::default(), &mut rng)
}
