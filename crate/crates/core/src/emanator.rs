//! Simulated display-cable emanation and SDR capture.
//!
//! A raster becomes a pixel-clock video stream (blanking carries zero), the
//! stream is high-pass filtered into a leak signal riding on a harmonic of
//! the pixel clock, and the capture front end mixes it to baseband,
//! band-limits and resamples it, applies the near-field distance law, adds
//! interferers and calibrated complex white noise.
//!
//! The display repeats the same frame continuously, so the leak signal is
//! treated as periodic when the resampling kernel reaches past either end.

use std::fs;
use std::path::Path;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, SincKernel, C64};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::raster::{sidecar_path, Dimensions, ScreenRaster};

/// Horizontal blanking overhead used by [`DisplayTiming::with_default_blanking`].
pub const DEFAULT_H_BLANK: f64 = 1.1;
/// Vertical blanking overhead used by [`DisplayTiming::with_default_blanking`].
pub const DEFAULT_V_BLANK: f64 = 1.06;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplayTiming {
    pub x_t: usize,
    pub y_t: usize,
    pub f_r: f64,
    pub visible_w: usize,
    pub visible_h: usize,
}

impl DisplayTiming {
    pub fn with_default_blanking(visible_w: usize, visible_h: usize, f_r: f64) -> Self {
        Self {
            x_t: (visible_w as f64 * DEFAULT_H_BLANK - 1e-9).ceil() as usize,
            y_t: (visible_h as f64 * DEFAULT_V_BLANK - 1e-9).ceil() as usize,
            f_r,
            visible_w,
            visible_h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.visible_w == 0 || self.visible_h == 0 {
            return Err(Error::InvalidParameter("empty visible area".into()));
        }
        if self.x_t < self.visible_w || self.y_t < self.visible_h {
            return Err(Error::InvalidParameter(format!(
                "total {}x{} smaller than visible {}x{}",
                self.x_t, self.y_t, self.visible_w, self.visible_h
            )));
        }
        if !(self.f_r.is_finite() && self.f_r > 0.0) {
            return Err(Error::InvalidParameter(format!("refresh rate {}", self.f_r)));
        }
        Ok(())
    }

    /// `f_p = x_t * y_t * f_r`.
    pub fn pixel_clock(&self) -> f64 {
        (self.x_t * self.y_t) as f64 * self.f_r
    }

    pub fn frame_len(&self) -> usize {
        self.x_t * self.y_t
    }

    pub fn visible(&self) -> Dimensions {
        Dimensions::new(self.visible_w, self.visible_h)
    }
}

/// One frame of the pixel stream: `y_t` lines of `x_t` samples, blanking 0.
pub fn video_waveform(raster: &ScreenRaster, timing: &DisplayTiming) -> Result<Vec<f32>> {
    timing.validate()?;
    if raster.dims() != timing.visible() {
        return Err(Error::Dimension(format!(
            "raster {} does not match visible area {}",
            raster.dims(),
            timing.visible()
        )));
    }
    let mut frame = vec![0.0f32; timing.frame_len()];
    for y in 0..timing.visible_h {
        frame[y * timing.x_t..y * timing.x_t + timing.visible_w]
            .copy_from_slice(&raster.luminance[y * raster.width..(y + 1) * raster.width]);
    }
    Ok(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageModel {
    pub harmonic: u32,
    pub coupling_gain: f64,
    pub highpass_alpha: f64,
}

impl Default for LeakageModel {
    fn default() -> Self {
        Self {
            harmonic: default_harmonic(),
            coupling_gain: 1.0,
            highpass_alpha: 0.0,
        }
    }
}

/// Smallest integer harmonic strictly above four times the pixel clock.
pub const fn default_harmonic() -> u32 {
    5
}

impl LeakageModel {
    pub fn validate(&self) -> Result<()> {
        if self.harmonic == 0 {
            return Err(Error::InvalidParameter("harmonic must be positive".into()));
        }
        if !(self.coupling_gain > 0.0 && self.coupling_gain.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "coupling gain {}",
                self.coupling_gain
            )));
        }
        if !(0.0..1.0).contains(&self.highpass_alpha) {
            return Err(Error::InvalidParameter(format!(
                "high-pass coefficient {} outside [0,1)",
                self.highpass_alpha
            )));
        }
        Ok(())
    }

    pub fn carrier_hz(&self, timing: &DisplayTiming) -> f64 {
        f64::from(self.harmonic) * timing.pixel_clock()
    }
}

/// Real leak waveform at the pixel clock, tagged with its carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakSignal {
    pub timing: DisplayTiming,
    pub carrier_hz: f64,
    pub frames: usize,
    pub samples: Vec<f32>,
}

impl LeakSignal {
    pub fn pixel_clock(&self) -> f64 {
        self.timing.pixel_clock()
    }
}

/// Filter outputs below this magnitude are zero, which keeps the leak
/// signal sparse and the filter tail finite.
const TAIL_FLUSH: f64 = 1e-9;

/// `y[n] = g (x[n] - x[n-1] + alpha y[n-1])` over `frames` repeats of the
/// frame. The filter state is warmed up over one frame so that every output
/// frame is the steady-state response of a continuously refreshed display.
pub fn emanate(
    raster: &ScreenRaster,
    timing: &DisplayTiming,
    leak: &LeakageModel,
    frames: usize,
) -> Result<LeakSignal> {
    leak.validate()?;
    if frames == 0 {
        return Err(Error::InvalidParameter("frames must be at least 1".into()));
    }
    let frame = video_waveform(raster, timing)?;
    let alpha = leak.highpass_alpha;
    let mut x_prev = 0.0f64;
    let mut y_prev = 0.0f64;
    let step = |x: f32, x_prev: &mut f64, y_prev: &mut f64| {
        let x = f64::from(x);
        let mut y = x - *x_prev + alpha * *y_prev;
        if y.abs() < TAIL_FLUSH {
            y = 0.0;
        }
        *x_prev = x;
        *y_prev = y;
        y
    };
    for &x in &frame {
        step(x, &mut x_prev, &mut y_prev);
    }
    let mut samples = Vec::with_capacity(frame.len() * frames);
    for _ in 0..frames {
        for &x in &frame {
            let y = step(x, &mut x_prev, &mut y_prev);
            samples.push((leak.coupling_gain * y) as f32);
        }
    }
    Ok(LeakSignal {
        timing: *timing,
        carrier_hz: leak.carrier_hz(timing),
        frames,
        samples,
    })
}

/// Receiver front end: tuning, sample rate and the band-limiting kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frontend {
    pub sample_rate_hz: f64,
    pub center_freq_hz: f64,
    /// Passband edge of the anti-alias filter (one-sided).
    pub cutoff_hz: f64,
    pub kernel_half_width_s: f64,
    pub kaiser_beta: f64,
}

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 25e6;
pub const DEFAULT_BANDWIDTH_HZ: f64 = 12.5e6;

impl Frontend {
    /// Default front end tuned to `center_freq_hz`; the passband keeps 80% of
    /// the half capture bandwidth.
    pub fn tuned(center_freq_hz: f64) -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            center_freq_hz,
            cutoff_hz: 0.8 * DEFAULT_BANDWIDTH_HZ / 2.0,
            kernel_half_width_s: 2e-6,
            kaiser_beta: 7.9,
        }
    }

    pub fn kernel(&self) -> SincKernel {
        SincKernel::new(self.cutoff_hz, self.kernel_half_width_s, self.kaiser_beta)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sample_rate_hz > 0.0
            && self.cutoff_hz > 0.0
            && self.cutoff_hz <= self.sample_rate_hz / 2.0
            && self.kernel_half_width_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("front end {self:?}")))
        }
    }

    /// Baseband offset of `carrier_hz`, or a tuning error when it falls
    /// outside the Nyquist band.
    pub fn offset_of(&self, carrier_hz: f64) -> Result<f64> {
        let off = carrier_hz - self.center_freq_hz;
        if off.abs() >= self.sample_rate_hz / 2.0 {
            return Err(Error::Tuning {
                carrier_hz,
                center_hz: self.center_freq_hz,
                half_band_hz: self.sample_rate_hz / 2.0,
            });
        }
        Ok(off)
    }

    /// `round(frames * fs / f_r)`.
    pub fn samples_for(&self, frames: usize, timing: &DisplayTiming) -> usize {
        (frames as f64 * self.sample_rate_hz / timing.f_r).round() as usize
    }
}

const BLOCK: usize = 4096;

/// Mixes a real pixel-clock signal by `offset_hz` and evaluates the
/// band-limited result at `n_out` instants `m / fs`:
/// `out[m] = sum_n x[n] e^{j 2 pi off t_n} h(t_m - t_n) / f_in`.
/// `x` is extended periodically. Contributions to each output are summed in
/// ascending input order, so the result does not depend on `exec`.
pub fn resample_mixed(
    x: &[f32],
    f_in: f64,
    offset_hz: f64,
    fs: f64,
    n_out: usize,
    kernel: &SincKernel,
    exec: Exec,
) -> Vec<C64> {
    let total = x.len() as i64;
    if total == 0 {
        return vec![C64::new(0.0, 0.0); n_out];
    }
    let nz: Vec<u32> = x
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i as u32)
        .collect();
    let half = kernel.half_width_s;
    let n_blocks = n_out.div_ceil(BLOCK);
    let blocks = exec.map_range(n_blocks, |b| {
        let m0 = b * BLOCK;
        let m1 = (m0 + BLOCK).min(n_out);
        let mut out = vec![C64::new(0.0, 0.0); m1 - m0];
        let n_lo = ((m0 as f64 / fs - half) * f_in).ceil() as i64;
        let n_hi = (((m1 - 1) as f64 / fs + half) * f_in).floor() as i64;
        let p_lo = n_lo.div_euclid(total);
        let p_hi = n_hi.div_euclid(total);
        for p in p_lo..=p_hi {
            let base = p * total;
            let lo = (n_lo - base).max(0);
            let hi = (n_hi - base).min(total - 1);
            if lo > hi {
                continue;
            }
            let start = nz.partition_point(|&i| i64::from(i) < lo);
            let end = nz.partition_point(|&i| i64::from(i) <= hi);
            for &idx in &nz[start..end] {
                let n = base + i64::from(idx);
                let t_n = n as f64 / f_in;
                let amp = f64::from(x[idx as usize]) / f_in;
                let cycles = offset_hz * t_n;
                let phasor = if offset_hz == 0.0 {
                    C64::new(1.0, 0.0)
                } else {
                    C64::from_polar(1.0, 2.0 * std::f64::consts::PI * (cycles - cycles.floor()))
                };
                let v = phasor * amp;
                let ms = (((t_n - half) * fs).ceil().max(m0 as f64)) as usize;
                let me = ((t_n + half) * fs).floor().min((m1 - 1) as f64);
                if me < ms as f64 {
                    continue;
                }
                for m in ms..=me as usize {
                    let h = kernel.eval(m as f64 / fs - t_n);
                    out[m - m0] += v * h;
                }
            }
        }
        out
    });
    blocks.concat()
}

/// Noise-free complex baseband of the primary leak at `r0 = 1`.
#[derive(Debug, Clone)]
pub struct CleanCapture {
    pub frontend: Frontend,
    pub carrier_hz: f64,
    pub timing: DisplayTiming,
    pub frames: usize,
    pub samples: Vec<C64>,
}

pub fn capture_clean(leak: &LeakSignal, frontend: &Frontend, exec: Exec) -> Result<CleanCapture> {
    frontend.validate()?;
    let offset = frontend.offset_of(leak.carrier_hz)?;
    let n_out = frontend.samples_for(leak.frames, &leak.timing);
    let samples = resample_mixed(
        &leak.samples,
        leak.pixel_clock(),
        offset,
        frontend.sample_rate_hz,
        n_out,
        &frontend.kernel(),
        exec,
    );
    Ok(CleanCapture {
        frontend: *frontend,
        carrier_hz: leak.carrier_hz,
        timing: leak.timing,
        frames: leak.frames,
        samples,
    })
}

/// A second display leaking into the same capture band. Not subject to the
/// distance law.
#[derive(Debug, Clone)]
pub struct Interferer {
    pub signal: LeakSignal,
    pub relative_gain: f64,
    /// Carrier phase in radians; drawn from the channel seed when absent.
    pub phase: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub distance_r: f64,
    /// `None` disables noise.
    pub target_snr_db: Option<f64>,
    /// Extra amplitude factor on the primary signal; 0 yields a noise-only
    /// capture at the noise level calibrated for gain 1.
    pub signal_gain: f64,
    pub interferers: Vec<Interferer>,
    pub rng_seed: u64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            distance_r: 1.0,
            target_snr_db: None,
            signal_gain: 1.0,
            interferers: Vec::new(),
            rng_seed: 0,
        }
    }
}

impl ChannelModel {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn with_snr(target_snr_db: f64, rng_seed: u64) -> Self {
        Self {
            target_snr_db: Some(target_snr_db),
            rng_seed,
            ..Self::default()
        }
    }

    /// `r^-2.5`, so received power density falls as `r^-5`.
    pub fn attenuation(&self) -> f64 {
        self.distance_r.powf(-2.5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_r > 0.0 && self.distance_r.is_finite()) {
            return Err(Error::InvalidParameter(format!("distance {}", self.distance_r)));
        }
        if !(self.signal_gain >= 0.0 && self.signal_gain.is_finite()) {
            return Err(Error::InvalidParameter(format!("signal gain {}", self.signal_gain)));
        }
        if let Some(s) = self.target_snr_db {
            if !s.is_finite() {
                return Err(Error::InvalidParameter(format!("target SNR {s}")));
            }
        }
        Ok(())
    }
}

/// Welch resolution used for SNR calibration and measurement.
pub const SNR_RESOLUTION_HZ: f64 = 25e3;
/// Nominal SNR measurement span, capped at the sample rate.
pub const SNR_BAND_HZ: f64 = 50e6;

pub fn snr_nfft(sample_rate_hz: f64, resolution_hz: f64) -> usize {
    (sample_rate_hz / resolution_hz).round().max(2.0) as usize
}

fn peak_over_median(psd: &[f64], bins: &[usize]) -> f64 {
    let band: Vec<f64> = bins.iter().map(|&k| psd[k]).collect();
    let peak = band.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let med = dsp::median(&band);
    if med > 0.0 {
        peak / med
    } else {
        f64::INFINITY
    }
}

/// Scale `a` for the unit noise realization `noise` such that the Welch
/// peak-over-median ratio of `signal + a noise` in `bins` equals
/// `target_ratio`. When the target lies below what noise alone produces,
/// falls back to the scale that puts the signal's peak bin at
/// `target_ratio` times the noise floor.
pub fn calibrate_noise_scale(terms: &dsp::WelchTerms, bins: &[usize], target_ratio: f64) -> f64 {
    let s_peak = bins.iter().map(|&k| terms.s_psd[k]).fold(0.0, f64::max);
    let n_floor = dsp::median(&bins.iter().map(|&k| terms.n_psd[k]).collect::<Vec<_>>());
    if s_peak <= 0.0 || n_floor <= 0.0 {
        return 1.0;
    }
    let guess = (s_peak / (target_ratio * n_floor)).sqrt();
    let ratio = |a: f64| peak_over_median(&terms.combine(a), bins);
    let (mut lo, mut hi) = (guess * 1e-3, guess * 1e3);
    if ratio(hi) > target_ratio {
        return guess;
    }
    if ratio(lo) < target_ratio {
        return lo;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if ratio(mid) > target_ratio {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    (lo * hi).sqrt()
}

/// Applies the channel to a clean capture: distance law and signal gain on
/// the primary, interferers, then calibrated noise.
pub fn finish(clean: &CleanCapture, channel: &ChannelModel, exec: Exec) -> Result<IqRecording> {
    channel.validate()?;
    let fe = &clean.frontend;
    let n = clean.samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(channel.rng_seed);
    let kernel = fe.kernel();
    let mut total: Vec<C64> = {
        let g = channel.signal_gain * channel.attenuation();
        clean.samples.iter().map(|s| s * g).collect()
    };
    for intf in &channel.interferers {
        let phase = match intf.phase {
            Some(p) => p,
            None => rng.random::<f64>() * 2.0 * std::f64::consts::PI,
        };
        let offset = fe.offset_of(intf.signal.carrier_hz)?;
        let bb = resample_mixed(
            &intf.signal.samples,
            intf.signal.pixel_clock(),
            offset,
            fe.sample_rate_hz,
            n,
            &kernel,
            exec,
        );
        let rot = C64::from_polar(intf.relative_gain, phase);
        for (t, b) in total.iter_mut().zip(&bb) {
            *t += b * rot;
        }
    }
    if let Some(snr_db) = channel.target_snr_db {
        let noise: Vec<C64> = (0..n)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
            })
            .collect();
        let nfft = snr_nfft(fe.sample_rate_hz, SNR_RESOLUTION_HZ);
        let offset = clean.carrier_hz - fe.center_freq_hz;
        let band = SNR_BAND_HZ.min(fe.sample_rate_hz);
        let (bins, _) = dsp::band_bins(nfft, fe.sample_rate_hz, offset, band);
        let terms = dsp::welch_terms(&clean.samples, &noise, nfft);
        let a = calibrate_noise_scale(&terms, &bins, 10f64.powf(snr_db / 10.0));
        for (t, z) in total.iter_mut().zip(&noise) {
            *t += z * a;
        }
    }
    Ok(IqRecording {
        sample_rate_hz: fe.sample_rate_hz,
        center_freq_hz: fe.center_freq_hz,
        frames_contained: clean.frames,
        timing: clean.timing,
        seed: channel.rng_seed,
        samples: total
            .iter()
            .map(|c| Complex::new(c.re as f32, c.im as f32))
            .collect(),
    })
}

/// `capture_clean` followed by `finish`.
pub fn capture(
    leak: &LeakSignal,
    channel: &ChannelModel,
    frontend: &Frontend,
    exec: Exec,
) -> Result<IqRecording> {
    finish(&capture_clean(leak, frontend, exec)?, channel, exec)
}

/// Capture sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqMeta {
    pub sample_rate_hz: f64,
    pub center_freq_hz: f64,
    pub frames_contained: usize,
    pub timing: DisplayTiming,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqRecording {
    pub sample_rate_hz: f64,
    pub center_freq_hz: f64,
    pub frames_contained: usize,
    pub timing: DisplayTiming,
    pub seed: u64,
    pub samples: Vec<Complex<f32>>,
}

impl IqRecording {
    pub fn meta(&self) -> IqMeta {
        IqMeta {
            sample_rate_hz: self.sample_rate_hz,
            center_freq_hz: self.center_freq_hz,
            frames_contained: self.frames_contained,
            timing: self.timing,
            seed: self.seed,
        }
    }

    /// Interleaved little-endian `f32` I/Q.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 8);
        for s in &self.samples {
            out.extend_from_slice(&s.re.to_le_bytes());
            out.extend_from_slice(&s.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(meta: IqMeta, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::format(
                "IQ file",
                format!("{} bytes is not a whole number of I/Q pairs", bytes.len()),
            ));
        }
        let samples = bytes
            .chunks_exact(8)
            .map(|c| {
                Complex::new(
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                    f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                )
            })
            .collect();
        Ok(Self {
            sample_rate_hz: meta.sample_rate_hz,
            center_freq_hz: meta.center_freq_hz,
            frames_contained: meta.frames_contained,
            timing: meta.timing,
            seed: meta.seed,
            samples,
        })
    }

    /// Writes the raw samples to `path` and the metadata to `<path>.json`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_vec_pretty(&self.meta())?;
        fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let meta_bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: IqMeta = serde_json::from_slice(&meta_bytes)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(meta, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Renderer;

    fn small_timing() -> DisplayTiming {
        DisplayTiming {
            x_t: 100,
            y_t: 50,
            f_r: 60.0,
            visible_w: 90,
            visible_h: 45,
        }
    }

    fn column_raster(dims: Dimensions, col: usize) -> ScreenRaster {
        let mut r = ScreenRaster::filled(dims, 0.0);
        r.fill_rect(col, 0, 1, dims.height, 1.0);
        r
    }

    #[test]
    fn timing_arithmetic() {
        let t = small_timing();
        assert_eq!(t.frame_len(), 5000);
        assert_eq!(t.pixel_clock(), 300_000.0);
        let d = DisplayTiming::with_default_blanking(750, 1334, 60.0);
        assert_eq!((d.x_t, d.y_t), (825, 1415));
    }

    #[test]
    fn waveform_blanking_is_zero() {
        let t = DisplayTiming::with_default_blanking(750, 1334, 60.0);
        let r = ScreenRaster::filled(t.visible(), 1.0);
        let w = video_waveform(&r, &t).unwrap();
        assert_eq!(w.len(), t.frame_len());
        for y in 0..t.y_t {
            let line = &w[y * t.x_t..(y + 1) * t.x_t];
            assert!(line[t.visible_w..].iter().all(|&v| v == 0.0));
            let lit = if y < t.visible_h { 1.0 } else { 0.0 };
            assert!(line[..t.visible_w].iter().all(|&v| v == lit));
        }
        let black = ScreenRaster::filled(t.visible(), 0.0);
        assert!(video_waveform(&black, &t).unwrap().iter().all(|&v| v == 0.0));
        let wrong = ScreenRaster::filled(Dimensions::new(10, 10), 0.0);
        assert!(matches!(video_waveform(&wrong, &t), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_raster_leaks_only_at_boundaries() {
        let t = small_timing();
        let r = ScreenRaster::filled(t.visible(), 0.6);
        let s = emanate(&r, &t, &LeakageModel::default(), 2).unwrap();
        for (i, &v) in s.samples.iter().enumerate() {
            let (x, y) = (i % t.x_t, (i / t.x_t) % t.y_t);
            let boundary = y < t.visible_h && (x == 0 || x == t.visible_w);
            assert_eq!(v != 0.0, boundary, "sample {i}");
        }
    }

    #[test]
    fn single_column_gives_two_taps_per_line() {
        let t = small_timing();
        let s = emanate(&column_raster(t.visible(), 40), &t, &LeakageModel::default(), 1).unwrap();
        for y in 0..t.visible_h {
            let line = &s.samples[y * t.x_t..(y + 1) * t.x_t];
            let taps: Vec<(usize, f32)> = line
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect();
            assert_eq!(taps, vec![(40, 1.0), (41, -1.0)]);
        }
    }

    #[test]
    fn coupling_gain_is_linear() {
        let t = small_timing();
        let r = Renderer::default()
            .digit_grid(1, 3, &['1', '2', '3'], t.visible())
            .unwrap();
        let leak = LeakageModel {
            highpass_alpha: 0.03,
            ..LeakageModel::default()
        };
        let a = emanate(&r, &t, &leak, 2).unwrap();
        let b = emanate(
            &r,
            &t,
            &LeakageModel {
                coupling_gain: 2.0,
                ..leak
            },
            2,
        )
        .unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(2.0 * x, *y);
        }
        // steady state: both frames identical
        assert_eq!(a.samples[..5000], a.samples[5000..]);
    }

    fn toy_frontend(t: &DisplayTiming) -> Frontend {
        let fp = t.pixel_clock();
        Frontend {
            sample_rate_hz: fp / 2.5,
            center_freq_hz: 5.0 * fp,
            cutoff_hz: fp / 8.0,
            kernel_half_width_s: 60.0 / fp,
            kaiser_beta: 7.9,
        }
    }

    #[test]
    fn tuning_outside_band_is_rejected() {
        let t = small_timing();
        let s = emanate(&column_raster(t.visible(), 3), &t, &LeakageModel::default(), 1).unwrap();
        let mut fe = toy_frontend(&t);
        fe.center_freq_hz += fe.sample_rate_hz;
        assert!(matches!(
            capture(&s, &ChannelModel::noiseless(), &fe, Exec::Sequential),
            Err(Error::Tuning { .. })
        ));
    }

    #[test]
    fn distance_law_and_length() {
        let t = small_timing();
        let s = emanate(&column_raster(t.visible(), 30), &t, &LeakageModel::default(), 3).unwrap();
        let fe = toy_frontend(&t);
        let near = capture(&s, &ChannelModel::noiseless(), &fe, Exec::Sequential).unwrap();
        let far = capture(
            &s,
            &ChannelModel {
                distance_r: 2.0,
                ..ChannelModel::noiseless()
            },
            &fe,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(near.samples.len(), fe.samples_for(3, &t));
        assert_eq!(near.samples.len(), 6000);
        let expected = 2f64.powf(-2.5);
        for (a, b) in near.samples.iter().zip(&far.samples) {
            if a.norm() > 1e-3 {
                assert!(((b.norm() / a.norm()) as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn interferer_superposes() {
        let t = small_timing();
        let fe = toy_frontend(&t);
        let leak = LeakageModel::default();
        let a = emanate(&column_raster(t.visible(), 10), &t, &leak, 2).unwrap();
        let b = emanate(&column_raster(t.visible(), 70), &t, &leak, 2).unwrap();
        let ca = capture(&a, &ChannelModel::noiseless(), &fe, Exec::Sequential).unwrap();
        let cb = capture(&b, &ChannelModel::noiseless(), &fe, Exec::Sequential).unwrap();
        let mixed = ChannelModel {
            interferers: vec![Interferer {
                signal: b,
                relative_gain: 1.0,
                phase: Some(0.0),
            }],
            ..ChannelModel::noiseless()
        };
        let cm = capture(&a, &mixed, &fe, Exec::Sequential).unwrap();
        for ((x, y), z) in ca.samples.iter().zip(&cb.samples).zip(&cm.samples) {
            assert!((x + y - z).norm() < 1e-5);
        }
    }

    #[test]
    fn resampling_matches_direct_evaluation_and_exec_modes() {
        let t = small_timing();
        let r = Renderer::default()
            .digit_grid(1, 4, &['9', '0', '4', '7'], t.visible())
            .unwrap();
        let s = emanate(&r, &t, &LeakageModel::default(), 2).unwrap();
        let mut fe = toy_frontend(&t);
        fe.center_freq_hz -= 0.07 * fe.sample_rate_hz;
        let off = fe.offset_of(s.carrier_hz).unwrap();
        let k = fe.kernel();
        let n_out = fe.samples_for(2, &t);
        let fp = t.pixel_clock();
        let seq = resample_mixed(&s.samples, fp, off, fe.sample_rate_hz, n_out, &k, Exec::Sequential);
        let par = resample_mixed(&s.samples, fp, off, fe.sample_rate_hz, n_out, &k, Exec::Parallel);
        assert_eq!(seq, par);
        let total = s.samples.len() as i64;
        for m in [0usize, 17, 1999, n_out - 1] {
            let tm = m as f64 / fe.sample_rate_hz;
            let mut acc = C64::new(0.0, 0.0);
            let lo = ((tm - k.half_width_s) * fp).floor() as i64 - 1;
            let hi = ((tm + k.half_width_s) * fp).ceil() as i64 + 1;
            for n in lo..=hi {
                let tn = n as f64 / fp;
                let v = f64::from(s.samples[n.rem_euclid(total) as usize]);
                acc += C64::from_polar(1.0, 2.0 * std::f64::consts::PI * off * tn)
                    * (v * k.exact(tm - tn) / fp);
            }
            assert!((acc - seq[m]).norm() < 1e-3 * (1.0 + acc.norm()), "m={m}");
        }
    }

    #[test]
    fn noise_is_deterministic_and_calibrated() {
        let t = small_timing();
        let r = Renderer::default()
            .digit_grid(2, 4, &['1', '2', '3', '4', '5', '6', '7', '8'], t.visible())
            .unwrap();
        let s = emanate(&r, &t, &LeakageModel::default(), 40).unwrap();
        let fe = toy_frontend(&t);
        let clean = capture_clean(&s, &fe, Exec::Sequential).unwrap();
        let ch = ChannelModel::with_snr(20.0, 9);
        let a = finish(&clean, &ch, Exec::Sequential).unwrap();
        let b = finish(&clean, &ch, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        let c = finish(&clean, &ChannelModel::with_snr(20.0, 10), Exec::Sequential).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn iq_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.iq");
        let rec = IqRecording {
            sample_rate_hz: 25e6,
            center_freq_hz: 1e8,
            frames_contained: 1,
            timing: small_timing(),
            seed: 42,
            samples: vec![Complex::new(1.5, -2.0), Complex::new(0.0, 3.25)],
        };
        rec.write(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16);
        assert_eq!(IqRecording::read(&path).unwrap(), rec);
        let side: serde_json::Value =
            serde_json::from_slice(&std::fs::read(sidecar_path(&path)).unwrap()).unwrap();
        let mut keys: Vec<&str> = side.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort();
        assert_eq!(
            keys,
            ["center_freq_hz", "frames_contained", "sample_rate_hz", "seed", "timing"]
        );
    }
}
