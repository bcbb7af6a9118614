//! Depth-sliced image reconstruction from a compensated data cube.
//!
//! The fast path works in the aperture wavenumber domain: per sampled
//! wavenumber `k`, a 2D FFT over the scan positions gives the plane-wave
//! spectrum; components with `4k^2 >= kx^2 + ky^2` are focused to the target
//! depth by the propagation phase `exp(+j*kz*z0)` with
//! `kz = sqrt(4k^2 - kx^2 - ky^2)`, evanescent components are zeroed, the
//! spectra are summed coherently across the sweep, and an inverse FFT
//! (zero-padded 2x for sub-pitch peak localization) returns the complex
//! image whose magnitude is the slice.
//!
//! [`backproject_oracle`] computes the same image by brute-force matched
//! filtering in the spatial domain; it is O(pixels x samples) and exists to
//! verify the FFT path.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::raster::{Grid2, PixelRect};
use crate::scene::RawDataCube;

const MM_TO_M: f64 = 1e-3;

/// A reconstructed magnitude image at a fixed depth.
///
/// Pixel `(row, col)` sits at `(x_min + col*pitch_x, y_min + row*pitch_y)`
/// in aperture millimetres; the raster covers the scanned extent at half
/// the aperture pitch (2x zero-padded FFT grid).
#[derive(Debug, Clone, PartialEq)]
pub struct SarSlice {
    pub pixels: Grid2,
    /// Slice depth from the aperture plane (mm).
    pub z0: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub pitch_x: f64,
    pub pitch_y: f64,
}

impl SarSlice {
    pub fn x_at(&self, col: usize) -> f64 {
        self.x_min + col as f64 * self.pitch_x
    }

    pub fn y_at(&self, row: usize) -> f64 {
        self.y_min + row as f64 * self.pitch_y
    }

    /// Nearest pixel (row, col) to physical position (x, y) mm.
    pub fn nearest_pixel(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x - self.x_min) / self.pitch_x).round().max(0.0) as usize;
        let row = ((y - self.y_min) / self.pitch_y).round().max(0.0) as usize;
        (row.min(self.pixels.h - 1), col.min(self.pixels.w - 1))
    }

    /// Physical x/y bounds covered by the raster (mm).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.x_min,
            self.x_min + (self.pixels.w - 1) as f64 * self.pitch_x,
            self.y_min,
            self.y_min + (self.pixels.h - 1) as f64 * self.pitch_y,
        )
    }

    /// Min-max scale the pixels to `[0, 1]`; constant slices map to zeros.
    pub fn normalized01(&self) -> SarSlice {
        SarSlice { pixels: self.pixels.normalized01(), ..self.clone() }
    }

    /// Sub-image; the origin metadata follows the crop.
    pub fn crop(&self, rect: &PixelRect) -> Result<SarSlice> {
        let pixels = self.pixels.crop(rect)?;
        Ok(SarSlice {
            pixels,
            z0: self.z0,
            x_min: self.x_at(rect.x0),
            y_min: self.y_at(rect.y0),
            pitch_x: self.pitch_x,
            pitch_y: self.pitch_y,
        })
    }
}

/// Min-max normalization as a free function, mirroring the pipeline step.
pub fn normalize01(img: &SarSlice) -> SarSlice {
    img.normalized01()
}

/// Crop as a free function over any raster grid.
pub fn crop_fov(img: &Grid2, rect: &PixelRect) -> Result<Grid2> {
    img.crop(rect)
}

/// An ordered stack of slices at uniformly spaced depths.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthStack {
    pub slices: Vec<SarSlice>,
    pub z_min: f64,
    pub z_max: f64,
    pub step: f64,
}

impl DepthStack {
    pub fn depths(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.z0).collect()
    }
}

/// Plane-wave spectrum of a compensated cube: one `nx x ny` coefficient
/// grid per sampled wavenumber, plus the spatial-frequency axes.
///
/// The spectrum is depth independent, so a whole [`DepthStack`] reuses one.
pub struct SpectrumImage {
    /// Per-frequency spectra, row-major `ny` rows x `nx` cols each.
    pub coeffs: Vec<Vec<Complex64>>,
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    /// Wavenumbers of the sweep (rad/m).
    pub ks: Vec<f64>,
    nx: usize,
    ny: usize,
    x_min: f64,
    y_min: f64,
    x_step: f64,
    y_step: f64,
}

/// Signed DFT frequency for bin `p` of an `n`-point transform.
fn signed_bin(p: usize, n: usize) -> i64 {
    if (p as i64) <= ((n as i64 - 1) / 2) {
        p as i64
    } else {
        p as i64 - n as i64
    }
}

struct Fft2 {
    row: Arc<dyn rustfft::Fft<f64>>,
    col: Arc<dyn rustfft::Fft<f64>>,
    w: usize,
    h: usize,
}

impl Fft2 {
    fn new(planner: &mut FftPlanner<f64>, w: usize, h: usize, dir: rustfft::FftDirection) -> Self {
        Fft2 { row: planner.plan_fft(w, dir), col: planner.plan_fft(h, dir), w, h }
    }

    /// In-place 2D transform of a row-major `h x w` buffer.
    fn process(&self, data: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.w * self.h);
        for row in data.chunks_exact_mut(self.w) {
            self.row.process(row);
        }
        let mut col_buf = vec![Complex64::new(0.0, 0.0); self.h];
        for c in 0..self.w {
            for r in 0..self.h {
                col_buf[r] = data[r * self.w + c];
            }
            self.col.process(&mut col_buf);
            for r in 0..self.h {
                data[r * self.w + c] = col_buf[r];
            }
        }
    }
}

impl SpectrumImage {
    /// Forward-transform every frequency slab of a compensated cube.
    ///
    /// Slabs are zero-padded 2x per axis before the FFT: the finer spectral
    /// grid keeps the focusing filter accurate and gives the point response
    /// room to decay before the periodic wrap.
    pub fn from_cube(raw: &RawDataCube) -> Result<SpectrumImage> {
        if !raw.compensated {
            return Err(Error::state("cube must be phase compensated before reconstruction"));
        }
        let nx = raw.n_x();
        let ny = raw.n_y();
        let nf = raw.n_freq();
        let geom = &raw.geometry;
        let dx_m = geom.x_step() * MM_TO_M;
        let dy_m = geom.y_step() * MM_TO_M;
        let (fw, fh) = (2 * nx, 2 * ny);

        let kx: Vec<f64> =
            (0..fw).map(|p| 2.0 * PI * signed_bin(p, fw) as f64 / (fw as f64 * dx_m)).collect();
        let ky: Vec<f64> =
            (0..fh).map(|q| 2.0 * PI * signed_bin(q, fh) as f64 / (fh as f64 * dy_m)).collect();

        let mut planner = FftPlanner::new();
        let fwd = Fft2::new(&mut planner, fw, fh, rustfft::FftDirection::Forward);

        let coeffs: Vec<Vec<Complex64>> = (0..nf)
            .into_par_iter()
            .map(|j| {
                let mut slab = vec![Complex64::new(0.0, 0.0); fw * fh];
                for b in 0..ny {
                    for a in 0..nx {
                        slab[b * fw + a] = raw.at(a, b, j);
                    }
                }
                fwd.process(&mut slab);
                slab
            })
            .collect();

        Ok(SpectrumImage {
            coeffs,
            kx,
            ky,
            ks: crate::radar::wavenumber_grid(&raw.cfg),
            nx,
            ny,
            x_min: geom.x_positions[0],
            y_min: geom.y_positions[0],
            x_step: geom.x_step(),
            y_step: geom.y_step(),
        })
    }

    /// Focus to depth `z0` (mm) and inverse-transform to the complex image.
    /// Frequencies are summed coherently in sweep order. The spectrum is
    /// zero-padded once more before the inverse FFT, so the output raster
    /// covers the aperture extent at half the scan pitch.
    pub fn focus(&self, z0: f64) -> Result<(Vec<Complex64>, usize, usize)> {
        if !(z0 > 0.0) {
            return Err(Error::domain(format!("slice depth must be positive, got {z0}")));
        }
        let (nx, ny) = (self.nx, self.ny);
        let (fw, fh) = (2 * nx, 2 * ny);
        let z_m = z0 * MM_TO_M;

        // coherent frequency sum on the forward spectral grid
        let mut acc = vec![Complex64::new(0.0, 0.0); fw * fh];
        for (j, slab) in self.coeffs.iter().enumerate() {
            let k = self.ks[j];
            let four_k2 = 4.0 * k * k;
            for q in 0..fh {
                let ky2 = self.ky[q] * self.ky[q];
                for p in 0..fw {
                    let kz2 = four_k2 - self.kx[p] * self.kx[p] - ky2;
                    // evanescent components carry no propagating energy
                    if kz2 >= 0.0 {
                        let kz = kz2.sqrt();
                        acc[q * fw + p] += slab[q * fw + p] * Complex64::from_polar(1.0, kz * z_m);
                    }
                }
            }
        }

        // zero-pad the spectrum 2x per axis, preserving signed bins
        let (pw, ph) = (2 * fw, 2 * fh);
        let mut padded = vec![Complex64::new(0.0, 0.0); pw * ph];
        for q in 0..fh {
            let qq = signed_bin(q, fh).rem_euclid(ph as i64) as usize;
            for p in 0..fw {
                let pp = signed_bin(p, fw).rem_euclid(pw as i64) as usize;
                padded[qq * pw + pp] = acc[q * fw + p];
            }
        }

        let mut planner = FftPlanner::new();
        let inv = Fft2::new(&mut planner, pw, ph, rustfft::FftDirection::Inverse);
        inv.process(&mut padded);

        // keep the aperture window: 2*nx x 2*ny pixels at half pitch
        let (ow, oh) = (2 * nx, 2 * ny);
        let scale = 1.0 / (nx * ny) as f64;
        let mut out = vec![Complex64::new(0.0, 0.0); ow * oh];
        for r in 0..oh {
            for cidx in 0..ow {
                out[r * ow + cidx] = padded[r * pw + cidx] * scale;
            }
        }
        Ok((out, ow, oh))
    }

    fn slice_meta(&self, z0: f64, pixels: Grid2) -> SarSlice {
        SarSlice {
            pixels,
            z0,
            x_min: self.x_min,
            y_min: self.y_min,
            pitch_x: self.x_step / 2.0,
            pitch_y: self.y_step / 2.0,
        }
    }
}

/// Reconstruct the complex image at depth `z0`; exposed for linearity
/// checks and correlation against the oracle.
pub fn reconstruct_complex(raw: &RawDataCube, z0: f64) -> Result<(Vec<Complex64>, usize, usize)> {
    SpectrumImage::from_cube(raw)?.focus(z0)
}

/// Reconstruct the magnitude slice at depth `z0` (mm from the aperture
/// plane). Requires a compensated cube.
pub fn reconstruct_slice(raw: &RawDataCube, z0: f64) -> Result<SarSlice> {
    let spectrum = SpectrumImage::from_cube(raw)?;
    slice_at(&spectrum, z0)
}

fn slice_at(spectrum: &SpectrumImage, z0: f64) -> Result<SarSlice> {
    let (img, w, h) = spectrum.focus(z0)?;
    let pixels = Grid2::from_data(w, h, img.iter().map(|c| c.norm()).collect())?;
    debug_assert!(pixels.data.iter().all(|v| v.is_finite()));
    Ok(spectrum.slice_meta(z0, pixels))
}

/// Brute-force matched-filter image: for every output pixel, the coherent
/// sum of `data * exp(+j*2*k*R)` over all aperture samples and frequencies.
/// O(N^2); test oracle only. Same raster as [`reconstruct_slice`].
pub fn backproject_oracle(raw: &RawDataCube, z0: f64) -> Result<SarSlice> {
    let (img, w, h, meta) = backproject_complex(raw, z0)?;
    let pixels = Grid2::from_data(w, h, img.iter().map(|c| c.norm()).collect())?;
    Ok(SarSlice { pixels, ..meta })
}

/// Complex-valued backprojection, for correlation tests.
pub fn backproject_complex(
    raw: &RawDataCube,
    z0: f64,
) -> Result<(Vec<Complex64>, usize, usize, SarSlice)> {
    if !raw.compensated {
        return Err(Error::state("cube must be phase compensated before backprojection"));
    }
    if !(z0 > 0.0) {
        return Err(Error::domain(format!("slice depth must be positive, got {z0}")));
    }
    let geom = &raw.geometry;
    let (nx, ny, nf) = (raw.n_x(), raw.n_y(), raw.n_freq());
    let (w, h) = (2 * nx, 2 * ny);
    let ks = crate::radar::wavenumber_grid(&raw.cfg);
    let k0 = ks[0];
    let dk = ks[1] - ks[0];
    let pitch_x = geom.x_step() / 2.0;
    let pitch_y = geom.y_step() / 2.0;
    let x_min = geom.x_positions[0];
    let y_min = geom.y_positions[0];

    let img: Vec<Complex64> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let row = idx / w;
            let col = idx % w;
            let px = x_min + col as f64 * pitch_x;
            let py = y_min + row as f64 * pitch_y;
            let mut sum = Complex64::new(0.0, 0.0);
            for a in 0..nx {
                let dx = px - geom.x_positions[a];
                for b in 0..ny {
                    let dy = py - geom.y_positions[b];
                    let r_m = (dx * dx + dy * dy + z0 * z0).sqrt() * MM_TO_M;
                    // matched filter exp(+j*2*k_j*R), swept via rotation
                    let mut e = Complex64::from_polar(1.0, 2.0 * k0 * r_m);
                    let rot = Complex64::from_polar(1.0, 2.0 * dk * r_m);
                    for j in 0..nf {
                        sum += raw.at(a, b, j) * e;
                        e *= rot;
                    }
                }
            }
            sum
        })
        .collect();

    let meta = SarSlice { pixels: Grid2::zeros(1, 1), z0, x_min, y_min, pitch_x, pitch_y };
    Ok((img, w, h, meta))
}

/// Reconstruct slices at `z_min, z_min+step, ...`; the count is
/// `floor((z_max - z_min)/step) + 1`. The aperture spectrum is computed once
/// and shared across depths.
pub fn depth_stack(raw: &RawDataCube, z_min: f64, z_max: f64, step: f64) -> Result<DepthStack> {
    if !(z_min > 0.0) || z_min > z_max || !(step > 0.0) {
        return Err(Error::domain(format!("invalid depth range [{z_min}, {z_max}] step {step}")));
    }
    let count = ((z_max - z_min) / step + 1e-9).floor() as usize + 1;
    let spectrum = SpectrumImage::from_cube(raw)?;
    let slices = (0..count)
        .into_par_iter()
        .map(|i| slice_at(&spectrum, z_min + i as f64 * step))
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthStack { slices, z_min, z_max, step })
}

/// Magnitude of the normalized complex correlation between two images.
pub fn complex_correlation(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut dot = Complex64::new(0.0, 0.0);
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y.conj();
        na += x.norm_sqr();
        nb += y.norm_sqr();
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot.norm() / (na * nb).sqrt()
}

/// -3 dB main-lobe width of the peak response along one axis, in mm.
/// Crossings are located with linear interpolation between pixels.
pub fn mainlobe_width_mm(slice: &SarSlice, horizontal: bool) -> f64 {
    let (prow, pcol) = slice.pixels.argmax();
    let peak = slice.pixels.at(prow, pcol);
    let thr = peak / std::f64::consts::SQRT_2;
    let (n, pitch) = if horizontal {
        (slice.pixels.w, slice.pitch_x)
    } else {
        (slice.pixels.h, slice.pitch_y)
    };
    let value = |i: usize| {
        if horizontal {
            slice.pixels.at(prow, i)
        } else {
            slice.pixels.at(i, pcol)
        }
    };
    let center = if horizontal { pcol } else { prow };

    let mut left = center as f64;
    for i in (0..center).rev() {
        if value(i) < thr {
            let (lo, hi) = (value(i), value(i + 1));
            left = (center - i) as f64 - (thr - lo) / (hi - lo);
            break;
        }
    }
    let mut right = (n - 1 - center) as f64;
    for i in center + 1..n {
        if value(i) < thr {
            let (hi, lo) = (value(i - 1), value(i));
            right = (i - center) as f64 - (thr - lo) / (hi - lo);
            break;
        }
    }
    (left + right) * pitch
}
