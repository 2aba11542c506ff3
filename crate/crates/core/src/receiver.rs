//! Emage reconstruction from IQ captures.
//!
//! The envelope of the baseband signal is folded onto a `width x height`
//! grid at the refresh rate, complete frames are averaged and the result is
//! min-max normalised. A grid pixel `i` of frame `k` reads the envelope at
//! sample position `k * spf + i * spf / (width * height)` with
//! `spf = fs / f_r`, where I and Q are linearly interpolated before the
//! magnitude is taken.

use std::fs;
use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::emanator::{IqMeta, IqRecording, SNR_BAND_HZ, SNR_RESOLUTION_HZ};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pgm::GrayImage;
use crate::raster::sidecar_path;

/// Envelope `|I + jQ|`, optionally smoothed by a one-pole low-pass whose
/// cutoff is a fraction of Nyquist (`>= 1` disables it).
pub fn am_demod(rec: &IqRecording, lowpass_cutoff: f64) -> Result<Vec<f32>> {
    if rec.samples.is_empty() {
        return Err(Error::TooShort("empty recording".into()));
    }
    let mut out: Vec<f32> = rec
        .samples
        .iter()
        .map(|s| {
            let (i, q) = (f64::from(s.re), f64::from(s.im));
            (i * i + q * q).sqrt() as f32
        })
        .collect();
    if lowpass_cutoff < 1.0 {
        if lowpass_cutoff <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "low-pass cutoff {lowpass_cutoff}"
            )));
        }
        let a = 1.0 - (-std::f64::consts::PI * lowpass_cutoff).exp();
        let mut y = f64::from(out[0]);
        for v in out.iter_mut() {
            y += a * (f64::from(*v) - y);
            *v = y as f32;
        }
    }
    Ok(out)
}

/// Correlation peaks below `SYNC_SIGMAS / sqrt(overlap)` are treated as
/// noise.
pub const SYNC_SIGMAS: f64 = 8.0;

/// Moving-average width applied to the magnitude before correlation. It
/// widens the frame-lag peak to several samples so the sub-sample phase of a
/// candidate lag cannot favour a one-line alias over the frame lag.
pub const SYNC_SMOOTH_SAMPLES: usize = 8;

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(width / 2);
            let hi = (lo + width).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Refresh rate whose lag maximises the normalised autocorrelation of the
/// smoothed, mean-removed magnitude within `±search_ppm` of the hint, refined
/// by a parabola through the peak and its neighbours.
pub fn estimate_frame_rate(
    magnitude: &[f32],
    sample_rate_hz: f64,
    f_r_hint: f64,
    search_ppm: f64,
) -> Result<f64> {
    if !(f_r_hint > 0.0 && sample_rate_hz > 0.0 && search_ppm > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rate hint {f_r_hint}, sample rate {sample_rate_hz}, search {search_ppm} ppm"
        )));
    }
    let n = magnitude.len();
    let spf = sample_rate_hz / f_r_hint;
    let span = spf * search_ppm * 1e-6;
    let lag_lo = ((spf - span).floor() as usize).max(2);
    let lag_hi = (spf + span).ceil() as usize + 1;
    // two frames at the fastest rate searched
    if n < 2 * lag_lo || lag_hi + 2 >= n {
        return Err(Error::TooShort(format!(
            "{n} samples span fewer than two frames of {lag_lo} samples"
        )));
    }
    let mean = magnitude.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    let centered: Vec<f64> = magnitude.iter().map(|&v| f64::from(v) - mean).collect();
    let x = moving_average(&centered, SYNC_SMOOTH_SAMPLES);
    let r = dsp::autocorrelation(&x, lag_hi + 1);
    let mut energy = vec![0.0; n + 1];
    for (i, v) in x.iter().enumerate() {
        energy[i + 1] = energy[i] + v * v;
    }
    let norm = |lag: usize| {
        let head = energy[n - lag];
        let tail = energy[n] - energy[lag];
        let d = (head * tail).sqrt();
        if d > 0.0 {
            r[lag] / d
        } else {
            0.0
        }
    };
    let (best, peak) = (lag_lo..=lag_hi)
        .map(|l| (l, norm(l)))
        .fold((lag_lo, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
    let threshold = SYNC_SIGMAS / ((n - best) as f64).sqrt();
    if !(peak >= threshold) {
        return Err(Error::NoSync { peak, threshold });
    }
    let (a, b, c) = (norm(best - 1), peak, norm(best + 1));
    let denom = a - 2.0 * b + c;
    let delta = if denom < 0.0 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Ok(sample_rate_hz / (best as f64 + delta))
}

/// Where the visible area starts in the reconstruction grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Row and column phase chosen by edge energy: the `visible_h` row band
    /// with the most energy, and the column pair one visible width apart
    /// with the strongest line edges. Needs the capture timing.
    Auto,
    /// Fixed rotation of the flattened grid, in pixels.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconParams {
    pub width_px: usize,
    pub height_px: usize,
    pub f_r_hz: f64,
    pub gain: f64,
    pub lowpass_cutoff: f64,
    pub alignment: Alignment,
}

impl ReconParams {
    pub fn new(width_px: usize, height_px: usize, f_r_hz: f64) -> Self {
        Self {
            width_px,
            height_px,
            f_r_hz,
            gain: 1.0,
            lowpass_cutoff: 1.0,
            alignment: Alignment::Auto,
        }
    }

    pub fn validate(&self, meta: Option<&IqMeta>) -> Result<()> {
        let ok = self.width_px > 0
            && self.height_px > 0
            && self.f_r_hz > 0.0
            && self.f_r_hz.is_finite()
            && self.gain > 0.0
            && self.lowpass_cutoff > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("{self:?}")));
        }
        if let Some(m) = meta {
            if (self.f_r_hz / m.timing.f_r - 1.0).abs() > 0.05 {
                return Err(Error::InvalidParameter(format!(
                    "refresh rate {} Hz is more than 5% from the capture's {} Hz",
                    self.f_r_hz, m.timing.f_r
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmageMeta {
    pub width_px: usize,
    pub height_px: usize,
    pub frames_averaged: usize,
    pub alignment_offset: usize,
    pub params: ReconParams,
    pub source: Option<IqMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emage {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub frames_averaged: usize,
    pub alignment_offset: usize,
    pub params: ReconParams,
    pub source: Option<IqMeta>,
}

impl Emage {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Vec<f32>> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Dimension(format!(
                "crop {w}x{h} at ({x},{y}) exceeds {}x{} emage",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w * h);
        for row in y..y + h {
            out.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + w]);
        }
        Ok(out)
    }

    pub fn meta(&self) -> EmageMeta {
        EmageMeta {
            width_px: self.width,
            height_px: self.height,
            frames_averaged: self.frames_averaged,
            alignment_offset: self.alignment_offset,
            params: self.params,
            source: self.source.clone(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_unit(self.width, self.height, &self.pixels).expect("emage size invariant")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray().write(path)?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&self.meta())?).map_err(|e| Error::io(side, e))
    }

    /// Reads an emage PGM and its sidecar; pixels come back quantised.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = GrayImage::read(path)?;
        let side = sidecar_path(path);
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: EmageMeta = serde_json::from_slice(&bytes)?;
        if (meta.width_px, meta.height_px) != (img.width, img.height) {
            return Err(Error::format("emage sidecar", "size disagrees with the image"));
        }
        Ok(Self {
            width: img.width,
            height: img.height,
            pixels: img.to_unit(),
            frames_averaged: meta.frames_averaged,
            alignment_offset: meta.alignment_offset,
            params: meta.params,
            source: meta.source,
        })
    }
}

#[inline]
/// Envelope of the linearly interpolated complex sample at `pos`. The
/// baseband is band-limited, its envelope is not, so interpolation happens
/// before the magnitude.
fn envelope_at(x: &[Complex<f32>], pos: f64) -> f64 {
    let last = x.len() - 1;
    let i = pos.floor();
    let frac = pos - i;
    let i = (i.max(0.0) as usize).min(last);
    let j = (i + 1).min(last);
    let re = f64::from(x[i].re) + frac * (f64::from(x[j].re) - f64::from(x[i].re));
    let im = f64::from(x[i].im) + frac * (f64::from(x[j].im) - f64::from(x[i].im));
    (re * re + im * im).sqrt()
}

/// One-pole low-pass on I and Q; `cutoff` is a fraction of Nyquist.
fn smooth_iq(samples: &[Complex<f32>], cutoff: f64) -> Vec<Complex<f32>> {
    let a = 1.0 - (-std::f64::consts::PI * cutoff).exp();
    let mut y = Complex::new(f64::from(samples[0].re), f64::from(samples[0].im));
    samples
        .iter()
        .map(|s| {
            y += (Complex::new(f64::from(s.re), f64::from(s.im)) - y) * a;
            Complex::new(y.re as f32, y.im as f32)
        })
        .collect()
}

/// Element-wise mean envelope of all complete frames on the
/// `width x height` grid, before gain, alignment and normalisation. A frame
/// is complete when its nominal span ends within half a sample of the
/// recording.
pub fn average_frames(
    samples: &[Complex<f32>],
    sample_rate_hz: f64,
    width: usize,
    height: usize,
    f_r_hz: f64,
    exec: Exec,
) -> Result<(Vec<f64>, usize)> {
    let spf = sample_rate_hz / f_r_hz;
    let frames = ((samples.len() as f64 + 0.5) / spf).floor() as usize;
    if frames == 0 || samples.is_empty() {
        return Err(Error::TooShort(format!(
            "{} samples hold no complete frame of {spf:.1}",
            samples.len()
        )));
    }
    let dt = spf / (width * height) as f64;
    let mut out = vec![0.0f64; width * height];
    let inv = 1.0 / frames as f64;
    exec.for_each_chunk_mut(&mut out, width, |row, line| {
        for (col, v) in line.iter_mut().enumerate() {
            let base = (row * width + col) as f64 * dt;
            let mut acc = 0.0;
            for k in 0..frames {
                acc += envelope_at(samples, k as f64 * spf + base);
            }
            *v = acc * inv;
        }
    });
    Ok((out, frames))
}

/// Flat rotation that moves the visible area to the grid origin.
///
/// The column phase maximises the energy of two columns one visible width
/// apart (line start and end edges), summed over the quietest quarter of
/// rows so that screen content cannot skew the smeared edge peaks; the row
/// phase then maximises the energy of those edge columns over a `visible_h`
/// band of rows.
pub fn auto_alignment(grid: &[f64], width: usize, height: usize, meta: &IqMeta) -> usize {
    let t = &meta.timing;
    let vis_rows = (((t.visible_h * height) as f64 / t.y_t as f64).round() as usize).min(height);
    let vis_cols = ((t.visible_w * width) as f64 / t.x_t as f64).round() as usize;
    let row_energy: Vec<f64> = (0..height)
        .map(|r| grid[r * width..(r + 1) * width].iter().sum())
        .collect();
    let mut order: Vec<usize> = (0..height).collect();
    order.sort_by(|&a, &b| row_energy[a].total_cmp(&row_energy[b]).then(a.cmp(&b)));
    let mut cols = vec![0.0; width];
    for &r in &order[..height.div_ceil(4)] {
        for c in 0..width {
            cols[c] += grid[r * width + c];
        }
    }
    let pair: Vec<f64> = (0..width).map(|s| cols[s] + cols[(s + vis_cols) % width]).collect();
    let dx = edge_centre(&pair);
    let vc = vis_cols as isize;
    let edge_taps = [-1, 0, 1, vc - 1, vc, vc + 1];
    let rows: Vec<f64> = (0..height)
        .map(|r| {
            edge_taps
                .iter()
                .map(|&o| grid[r * width + (dx as isize + o).rem_euclid(width as isize) as usize])
                .sum()
        })
        .collect();
    let mut band: f64 = rows[..vis_rows].iter().sum();
    let mut best = (0, band);
    for s in 1..height {
        band += rows[(s + vis_rows - 1) % height] - rows[s - 1];
        if band > best.1 {
            best = (s, band);
        }
    }
    best.0 * width + dx
}

/// Column nearest the vertex of a least-squares parabola through the seven
/// circular samples around the maximum of `profile`. The smeared edge peak
/// is flat enough near its top that the bare maximum is a tie between
/// neighbours.
fn edge_centre(profile: &[f64]) -> usize {
    const HALF: isize = 3;
    let n = profile.len() as isize;
    let peak = argmax(profile.iter().copied()) as isize;
    if n < 2 * HALF + 1 {
        return peak as usize;
    }
    let (mut sxy, mut sqy) = (0.0, 0.0);
    for x in -HALF..=HALF {
        let y = profile[(peak + x).rem_euclid(n) as usize];
        sxy += x as f64 * y;
        sqy += (x * x - 4) as f64 * y;
    }
    // centred design over -3..=3: sum x^2 = 28, sum (x^2 - 4)^2 = 84
    let (b, a) = (sxy / 28.0, sqy / 84.0);
    let shift = if a < 0.0 {
        (-b / (2.0 * a)).clamp(-(HALF as f64), HALF as f64).round() as isize
    } else {
        0
    };
    (peak + shift).rem_euclid(n) as usize
}

/// Index of the first maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Min-max normalisation; a constant input maps to 0.5.
pub fn normalize(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    let span = hi - lo;
    values.iter().map(|v| (((v - lo) / span) as f32).clamp(0.0, 1.0)).collect()
}

pub fn reconstruct(rec: &IqRecording, params: &ReconParams, exec: Exec) -> Result<Emage> {
    let meta = rec.meta();
    params.validate(Some(&meta))?;
    if rec.samples.is_empty() {
        return Err(Error::TooShort("empty recording".into()));
    }
    let smoothed;
    let samples = if params.lowpass_cutoff < 1.0 {
        smoothed = smooth_iq(&rec.samples, params.lowpass_cutoff);
        &smoothed[..]
    } else {
        &rec.samples[..]
    };
    let (grid, frames) = average_frames(
        samples,
        rec.sample_rate_hz,
        params.width_px,
        params.height_px,
        params.f_r_hz,
        exec,
    )?;
    let n = grid.len();
    let offset = match params.alignment {
        Alignment::Auto => auto_alignment(&grid, params.width_px, params.height_px, &meta),
        Alignment::Fixed(o) => o % n,
    };
    let aligned: Vec<f64> = (0..n).map(|i| grid[(i + offset) % n] * params.gain).collect();
    Ok(Emage {
        width: params.width_px,
        height: params.height_px,
        pixels: normalize(&aligned),
        frames_averaged: frames,
        alignment_offset: offset,
        params: *params,
        source: Some(meta),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub snr_db: f64,
    pub peak_hz: f64,
    pub floor: f64,
    /// The requested band extended past Nyquist and was cut.
    pub clipped: bool,
}

/// Peak-bin over median-bin power of a Welch periodogram in a band
/// centred on `signal_center_hz`.
pub fn measure_snr(
    rec: &IqRecording,
    signal_center_hz: f64,
    band_hz: f64,
    resolution_hz: f64,
) -> Result<SnrReport> {
    if !(resolution_hz > 0.0 && resolution_hz < band_hz) {
        return Err(Error::InvalidParameter(format!(
            "resolution {resolution_hz} Hz must be positive and below band {band_hz} Hz"
        )));
    }
    let fs = rec.sample_rate_hz;
    let nfft = crate::emanator::snr_nfft(fs, resolution_hz);
    if rec.samples.len() < nfft {
        return Err(Error::TooShort(format!(
            "{} samples for a {nfft}-point periodogram",
            rec.samples.len()
        )));
    }
    let psd = dsp::welch(&rec.samples, nfft);
    let offset = signal_center_hz - rec.center_freq_hz;
    let (bins, clipped) = dsp::band_bins(nfft, fs, offset, band_hz.min(fs));
    if bins.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "band around {signal_center_hz} Hz lies outside the capture"
        )));
    }
    let band: Vec<f64> = bins.iter().map(|&k| psd[k]).collect();
    let (peak_i, peak) = band
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let floor = dsp::median(&band);
    Ok(SnrReport {
        snr_db: 10.0 * (peak / floor).log10(),
        peak_hz: rec.center_freq_hz + dsp::bin_freq(bins[peak_i], nfft, fs),
        floor,
        clipped,
    })
}

/// [`measure_snr`] with the default band and resolution.
pub fn measure_snr_default(rec: &IqRecording, signal_center_hz: f64) -> Result<SnrReport> {
    measure_snr(rec, signal_center_hz, SNR_BAND_HZ, SNR_RESOLUTION_HZ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emanator::{
        capture, capture_clean, emanate, finish, ChannelModel, DisplayTiming, Frontend,
        LeakageModel,
    };
    use crate::raster::ScreenRaster;
    use num_complex::Complex;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_timing() -> DisplayTiming {
        DisplayTiming {
            x_t: 110,
            y_t: 64,
            f_r: 60.0,
            visible_w: 100,
            visible_h: 60,
        }
    }

    fn toy_frontend(t: &DisplayTiming) -> Frontend {
        let fp = t.pixel_clock();
        Frontend {
            sample_rate_hz: fp / 1.5,
            center_freq_hz: 5.0 * fp,
            cutoff_hz: fp / 5.0,
            kernel_half_width_s: 40.0 / fp,
            kaiser_beta: 7.9,
        }
    }

    fn rec_from(samples: Vec<Complex<f32>>, fs: f64) -> IqRecording {
        IqRecording {
            sample_rate_hz: fs,
            center_freq_hz: 0.0,
            frames_contained: 1,
            timing: toy_timing(),
            seed: 0,
            samples,
        }
    }

    fn noise(n: usize, seed: u64, sigma: f32) -> Vec<Complex<f32>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f32 = StandardNormal.sample(&mut rng);
                let b: f32 = StandardNormal.sample(&mut rng);
                Complex::new(a * sigma, b * sigma)
            })
            .collect()
    }

    #[test]
    fn demod_basics() {
        let r = rec_from(vec![Complex::new(3.0, 4.0); 10], 1.0);
        assert!(am_demod(&r, 1.0).unwrap().iter().all(|&v| v == 5.0));
        let tone: Vec<Complex<f32>> = (0..5000)
            .map(|n| {
                let c = Complex::from_polar(2.5f64, 0.0123 * n as f64);
                Complex::new(c.re as f32, c.im as f32)
            })
            .collect();
        for v in am_demod(&rec_from(tone, 1.0), 1.0).unwrap() {
            assert!((f64::from(v) - 2.5).abs() / 2.5 < 1e-6);
        }
        let z = rec_from(vec![Complex::new(0.0, 0.0); 8], 1.0);
        assert!(am_demod(&z, 0.5).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(am_demod(&rec_from(vec![], 1.0), 1.0), Err(Error::TooShort(_))));
    }

    #[test]
    fn lowpass_smooths_steps() {
        let mut s = vec![Complex::new(0.0f32, 0.0); 50];
        s.extend(vec![Complex::new(1.0f32, 0.0); 50]);
        let out = am_demod(&rec_from(s, 1.0), 0.1).unwrap();
        assert!(out[50] > 0.0 && out[50] < 1.0);
        assert!(out.windows(2).all(|w| w[1] >= w[0]));
    }

    fn toy_capture(raster: &ScreenRaster, frames: usize, snr: Option<f64>, seed: u64) -> IqRecording {
        let t = toy_timing();
        let s = emanate(raster, &t, &LeakageModel::default(), frames).unwrap();
        let ch = ChannelModel {
            target_snr_db: snr,
            rng_seed: seed,
            ..ChannelModel::default()
        };
        capture(&s, &ch, &toy_frontend(&t), Exec::Sequential).unwrap()
    }

    fn blocks(seed: u64) -> ScreenRaster {
        let t = toy_timing();
        let mut r = ScreenRaster::filled(t.visible(), 1.0);
        let mut z = seed;
        for _ in 0..6 {
            z = crate::seed::mix(z);
            let x = (z % 80) as usize;
            let y = ((z >> 20) % 50) as usize;
            r.fill_rect(x, y, 12, 8, 0.0);
        }
        r
    }

    #[test]
    fn frame_rate_from_noiseless_and_noisy_captures() {
        // the toy frame is only ~4700 samples long, so parabolic refinement
        // resolves about a tenth of a lag here
        let rec = toy_capture(&blocks(1), 4, None, 0);
        let mag = am_demod(&rec, 1.0).unwrap();
        let est = estimate_frame_rate(&mag, rec.sample_rate_hz, 60.0, 1000.0).unwrap();
        assert!((est / 60.0 - 1.0).abs() < 3e-5, "{est}");
        let hint = 60.0 * (1.0 + 4e-4);
        let est2 = estimate_frame_rate(&mag, rec.sample_rate_hz, hint, 1000.0).unwrap();
        assert_eq!(est, est2);
        let noisy = toy_capture(&blocks(2), 4, Some(30.0), 5);
        let mag = am_demod(&noisy, 1.0).unwrap();
        let est = estimate_frame_rate(&mag, noisy.sample_rate_hz, 60.0, 1000.0).unwrap();
        assert!((est / 60.0 - 1.0).abs() < 1e-4, "{est}");
    }

    #[test]
    fn frame_rate_errors() {
        let fs = toy_frontend(&toy_timing()).sample_rate_hz;
        let spf = (fs / 60.0) as usize;
        let white = rec_from(noise(3 * spf, 4, 1.0), fs);
        let mag = am_demod(&white, 1.0).unwrap();
        assert!(matches!(
            estimate_frame_rate(&mag, fs, 60.0, 1000.0),
            Err(Error::NoSync { .. })
        ));
        assert!(matches!(
            estimate_frame_rate(&mag[..spf + 10], fs, 60.0, 1000.0),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn constant_grid_normalizes_to_half() {
        assert_eq!(normalize(&[2.0, 2.0, 2.0]), vec![0.5; 3]);
        let v = normalize(&[1.0, 3.0, 2.0]);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn single_column_edges_are_brightest() {
        let t = toy_timing();
        let mut r = ScreenRaster::filled(t.visible(), 0.0);
        r.fill_rect(40, 0, 6, t.visible_h, 1.0);
        let rec = toy_capture(&r, 1, None, 0);
        let mut p = ReconParams::new(t.x_t, t.y_t, t.f_r);
        p.alignment = Alignment::Fixed(0);
        let e = reconstruct(&rec, &p, Exec::Sequential).unwrap();
        assert_eq!(e.frames_averaged, 1);
        let row = 30;
        let mut cols: Vec<(usize, f32)> = (0..e.width).map(|c| (c, e.at(c, row))).collect();
        cols.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut top: Vec<usize> = cols.iter().take(2).map(|c| c.0).collect();
        top.sort();
        assert!(top[0].abs_diff(40) <= 1 && top[1].abs_diff(46) <= 1, "{top:?}");
        let lo = e.pixels.iter().cloned().fold(1.0f32, f32::min);
        let hi = e.pixels.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn auto_alignment_recovers_origin() {
        let t = toy_timing();
        let rec = toy_capture(&blocks(7), 2, Some(30.0), 3);
        let e = reconstruct(&rec, &ReconParams::new(t.x_t, t.y_t, t.f_r), Exec::Sequential)
            .unwrap();
        let (dy, dx) = (e.alignment_offset / t.x_t, e.alignment_offset % t.x_t);
        let near = |v: usize, m: usize| v <= 1 || v + 1 >= m;
        assert!(near(dy, t.y_t) && near(dx, t.x_t), "{dy} {dx}");
    }

    #[test]
    fn rate_error_shears_by_predicted_drift() {
        let t = toy_timing();
        let mut r = ScreenRaster::filled(t.visible(), 0.0);
        r.fill_rect(20, 0, 1, t.visible_h, 1.0);
        let rec = toy_capture(&r, 1, None, 0);
        let delta = 1e-3;
        let w = 4 * t.x_t;
        let mut p = ReconParams::new(w, t.y_t, t.f_r * (1.0 + delta));
        p.alignment = Alignment::Fixed(0);
        let e = reconstruct(&rec, &p, Exec::Sequential).unwrap();
        let peak_col = |row: usize| {
            (0..e.width)
                .max_by(|&a, &b| e.at(a, row).total_cmp(&e.at(b, row)))
                .unwrap() as f64
        };
        let rows = 40.0;
        let drift = (peak_col(40) - peak_col(0)) / rows;
        let predicted = delta * (w * t.y_t) as f64 / t.y_t as f64;
        assert!((drift - predicted).abs() < 0.1 * predicted, "{drift} vs {predicted}");
    }

    #[test]
    fn averaging_reduces_background_noise() {
        let t = toy_timing();
        let r = ScreenRaster::filled(t.visible(), 0.5);
        let s = emanate(&r, &t, &LeakageModel::default(), 8).unwrap();
        let fe = toy_frontend(&t);
        let clean = capture_clean(&s, &fe, Exec::Sequential).unwrap();
        let rec = finish(&clean, &ChannelModel::with_snr(10.0, 11), Exec::Sequential).unwrap();
        let spf = rec.sample_rate_hz / t.f_r;
        let std_for = |frames: usize| {
            let n = (frames as f64 * spf).round() as usize;
            let (g, k) =
                average_frames(&rec.samples[..n], rec.sample_rate_hz, t.x_t, t.y_t, t.f_r, Exec::Sequential)
                    .unwrap();
            assert_eq!(k, frames);
            // blanking rows only carry noise
            let bg: Vec<f64> = g[t.visible_h * t.x_t + t.x_t..(t.y_t - 1) * t.x_t].to_vec();
            let m = bg.iter().sum::<f64>() / bg.len() as f64;
            (bg.iter().map(|v| (v - m).powi(2)).sum::<f64>() / bg.len() as f64).sqrt()
        };
        let s1 = std_for(1);
        let s8 = std_for(8);
        assert!(((s8 / s1) / (1.0 / 8f64.sqrt()) - 1.0).abs() < 0.3, "{}", s8 / s1);
    }

    #[test]
    fn parallel_reconstruction_matches() {
        let t = toy_timing();
        let rec = toy_capture(&blocks(9), 2, Some(20.0), 1);
        let p = ReconParams::new(t.x_t, t.y_t, t.f_r);
        assert_eq!(
            reconstruct(&rec, &p, Exec::Sequential).unwrap(),
            reconstruct(&rec, &p, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn snr_of_tone_in_noise() {
        let fs = 1e6;
        let nfft = 1000;
        let n = 400_000;
        // floor per bin of unit complex noise is 2 sigma^2 = 2; tone power in
        // one bin after Hann normalisation is A^2 * (sum w)^2 / sum w^2
        let w = dsp::hann(nfft);
        let coherent = w.iter().sum::<f64>().powi(2) / w.iter().map(|v| v * v).sum::<f64>();
        let floor = 2.0;
        let target = 100.0;
        let amp = (target * floor / coherent).sqrt();
        let mut s = noise(n, 8, 1.0);
        let f0 = 0.1 * fs;
        for (i, v) in s.iter_mut().enumerate() {
            let c = Complex::from_polar(amp, 2.0 * std::f64::consts::PI * f0 * i as f64 / fs);
            *v += Complex::new(c.re as f32, c.im as f32);
        }
        let rec = rec_from(s, fs);
        let rep = measure_snr(&rec, 0.0, fs, fs / nfft as f64).unwrap();
        assert!((rep.snr_db - 20.0).abs() < 0.5, "{rep:?}");
        assert!((rep.peak_hz - f0).abs() < 1.0);
        assert!(!rep.clipped);
        let quiet = rec_from(noise(n, 9, 1.0), fs);
        let rep = measure_snr(&quiet, 0.0, fs, fs / nfft as f64).unwrap();
        assert!(rep.snr_db >= 0.0 && rep.snr_db < 3.0, "{rep:?}");
        let shifted = measure_snr(&quiet, 0.2 * fs, fs, fs / nfft as f64).unwrap();
        assert!(shifted.clipped);
    }

    #[test]
    fn calibrated_capture_measures_target() {
        let t = DisplayTiming::with_default_blanking(400, 300, 60.0);
        let mut r = ScreenRaster::filled(t.visible(), 1.0);
        r.fill_rect(50, 40, 120, 90, 0.0);
        r.fill_rect(250, 150, 30, 100, 0.3);
        let s = emanate(&r, &t, &LeakageModel::default(), 3).unwrap();
        let fe = Frontend::tuned(s.carrier_hz);
        let clean = capture_clean(&s, &fe, Exec::Sequential).unwrap();
        for target in [10.0, 25.0, 33.4, 36.6] {
            let rec = finish(&clean, &ChannelModel::with_snr(target, 2), Exec::Sequential).unwrap();
            let rep = measure_snr_default(&rec, clean.carrier_hz).unwrap();
            assert!((rep.snr_db - target).abs() < 0.5, "{target}: {rep:?}");
            assert!(!rep.clipped);
        }
    }

    #[test]
    fn emage_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let e = Emage {
            width: 3,
            height: 2,
            pixels: vec![0.0, 1.0, 0.5, 0.2, 0.4, 0.6],
            frames_averaged: 2,
            alignment_offset: 0,
            params: ReconParams::new(3, 2, 60.0),
            source: None,
        };
        let path = dir.path().join("e.pgm");
        e.write(&path).unwrap();
        let back = Emage::read(&path).unwrap();
        assert_eq!(back.meta(), e.meta());
        assert_eq!(back.to_gray(), e.to_gray());
    }
}
