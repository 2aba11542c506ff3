//! Shared signal-processing primitives: the band-limiting interpolation
//! kernel, Welch periodograms and FFT autocorrelation.

use num_complex::Complex;
use rustfft::FftPlanner;

pub type C64 = Complex<f64>;

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass impulse response with unit DC gain,
/// `h(t) = 2 fc sinc(2 fc t) w(t / T)` for `|t| < T`.
#[derive(Debug, Clone)]
pub struct SincKernel {
    pub cutoff_hz: f64,
    pub half_width_s: f64,
    pub beta: f64,
    step_s: f64,
    table: Vec<f64>,
}

/// Linear interpolation over this many entries stays within 1e-4 of the
/// peak for cutoffs up to 10 MHz at a 2 µs half-width.
const TABLE_LEN: usize = 8192;

impl SincKernel {
    pub fn new(cutoff_hz: f64, half_width_s: f64, beta: f64) -> Self {
        let step_s = 2.0 * half_width_s / (TABLE_LEN - 1) as f64;
        let mut k = Self {
            cutoff_hz,
            half_width_s,
            beta,
            step_s,
            table: Vec::new(),
        };
        k.table = (0..TABLE_LEN)
            .map(|i| k.exact(-half_width_s + i as f64 * step_s))
            .collect();
        k
    }

    /// Closed-form evaluation.
    pub fn exact(&self, t: f64) -> f64 {
        let u = t / self.half_width_s;
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let x = 2.0 * self.cutoff_hz * t;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        let w = bessel_i0(self.beta * (1.0 - u * u).sqrt()) / bessel_i0(self.beta);
        2.0 * self.cutoff_hz * sinc * w
    }

    /// Table lookup with linear interpolation.
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let pos = (t + self.half_width_s) / self.step_s;
        if pos <= 0.0 || pos >= (TABLE_LEN - 1) as f64 {
            return 0.0;
        }
        let i = pos as usize;
        let frac = pos - i as f64;
        self.table[i] + frac * (self.table[i + 1] - self.table[i])
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Welch cross terms of a signal `s` and a noise realization `n`:
/// the power spectrum of `s + a n` is `s_psd + a^2 n_psd + 2 a cross`.
#[derive(Debug, Clone)]
pub struct WelchTerms {
    pub s_psd: Vec<f64>,
    pub n_psd: Vec<f64>,
    pub cross: Vec<f64>,
}

impl WelchTerms {
    pub fn combine(&self, a: f64) -> Vec<f64> {
        self.s_psd
            .iter()
            .zip(&self.n_psd)
            .zip(&self.cross)
            .map(|((s, n), c)| s + a * a * n + 2.0 * a * c)
            .collect()
    }
}

fn segment_starts(len: usize, nfft: usize) -> impl Iterator<Item = usize> {
    let step = (nfft / 2).max(1);
    let count = if len >= nfft { (len - nfft) / step + 1 } else { 0 };
    (0..count).map(move |i| i * step)
}

/// Two-sided Welch periodogram, Hann window, 50% overlap, in FFT bin order,
/// normalised as `|X|^2 / sum(w^2)` averaged over segments.
pub fn welch(x: &[Complex<f32>], nfft: usize) -> Vec<f64> {
    let win = hann(nfft);
    let norm: f64 = win.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut acc = vec![0.0; nfft];
    let mut buf = vec![C64::new(0.0, 0.0); nfft];
    let mut segments = 0usize;
    for start in segment_starts(x.len(), nfft) {
        for (i, b) in buf.iter_mut().enumerate() {
            let v = x[start + i];
            *b = C64::new(f64::from(v.re), f64::from(v.im)) * win[i];
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
    }
    let scale = 1.0 / (norm * segments.max(1) as f64);
    acc.iter_mut().for_each(|a| *a *= scale);
    acc
}

/// Welch terms for a signal/noise pair with the same segmentation as
/// [`welch`].
pub fn welch_terms(s: &[C64], n: &[C64], nfft: usize) -> WelchTerms {
    assert_eq!(s.len(), n.len());
    let win = hann(nfft);
    let norm: f64 = win.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut terms = WelchTerms {
        s_psd: vec![0.0; nfft],
        n_psd: vec![0.0; nfft],
        cross: vec![0.0; nfft],
    };
    let mut bs = vec![C64::new(0.0, 0.0); nfft];
    let mut bn = bs.clone();
    let mut segments = 0usize;
    for start in segment_starts(s.len(), nfft) {
        for i in 0..nfft {
            bs[i] = s[start + i] * win[i];
            bn[i] = n[start + i] * win[i];
        }
        fft.process(&mut bs);
        fft.process(&mut bn);
        for k in 0..nfft {
            terms.s_psd[k] += bs[k].norm_sqr();
            terms.n_psd[k] += bn[k].norm_sqr();
            terms.cross[k] += (bs[k] * bn[k].conj()).re;
        }
        segments += 1;
    }
    let scale = 1.0 / (norm * segments.max(1) as f64);
    for v in terms
        .s_psd
        .iter_mut()
        .chain(terms.n_psd.iter_mut())
        .chain(terms.cross.iter_mut())
    {
        *v *= scale;
    }
    terms
}

/// Baseband frequency of FFT bin `k`, in `[-fs/2, fs/2)`.
pub fn bin_freq(k: usize, nfft: usize, fs: f64) -> f64 {
    let k = if k >= nfft.div_ceil(2) {
        k as f64 - nfft as f64
    } else {
        k as f64
    };
    k * fs / nfft as f64
}

/// FFT bins whose frequency lies in `[center - band/2, center + band/2)`,
/// clipped to Nyquist. The flag is set when clipping removed any of the
/// requested band.
pub fn band_bins(nfft: usize, fs: f64, center_hz: f64, band_hz: f64) -> (Vec<usize>, bool) {
    let lo = center_hz - band_hz / 2.0;
    let hi = center_hz + band_hz / 2.0;
    let eps = fs * 1e-9;
    let clipped = lo < -fs / 2.0 - eps || hi > fs / 2.0 + eps;
    let bins = (0..nfft)
        .filter(|&k| {
            let f = bin_freq(k, nfft, fs);
            f >= lo - eps && f < hi - eps
        })
        .collect();
    (bins, clipped)
}

/// Lower median (element `(n-1)/2` of the sorted values).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let mid = (v.len() - 1) / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Raw autocorrelation sums `r[L] = sum_n x[n] x[n+L]` for `L = 0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let len = (x.len() + max_lag + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    buf.resize(len, C64::new(0.0, 0.0));
    fwd.process(&mut buf);
    for b in buf.iter_mut() {
        *b = C64::new(b.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    let scale = 1.0 / len as f64;
    buf[..=max_lag.min(x.len().saturating_sub(1))]
        .iter()
        .map(|c| c.re * scale)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn i0_known_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-13);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_44).abs() < 1e-10);
    }

    #[test]
    fn kernel_has_unit_dc_gain_and_small_table_error() {
        let k = SincKernel::new(5e6, 2e-6, 7.9);
        let fp = 70e6;
        for phase in [0.0, 0.3, 0.77] {
            let sum: f64 = (-200..=200)
                .map(|n| k.eval((n as f64 + phase) / fp))
                .sum::<f64>()
                / fp;
            assert!((sum - 1.0).abs() < 1e-4, "{sum}");
        }
        let peak = k.exact(0.0);
        for i in 0..1000 {
            let t = -2e-6 + 4e-6 * i as f64 / 999.0 * 0.9993;
            assert!((k.eval(t) - k.exact(t)).abs() < 1e-4 * peak);
        }
    }

    #[test]
    fn welch_of_white_noise_is_flat_at_variance() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Complex<f32>> = (0..200_000)
            .map(|_| {
                let re: f32 = StandardNormal.sample(&mut rng);
                let im: f32 = StandardNormal.sample(&mut rng);
                Complex::new(re, im)
            })
            .collect();
        let p = welch(&x, 256);
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((mean - 2.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn welch_terms_combine_matches_direct() {
        let s: Vec<C64> = (0..4000)
            .map(|i| C64::from_polar(1.0, i as f64 * 0.3))
            .collect();
        let n: Vec<C64> = (0..4000)
            .map(|i| C64::new(((i * 7919) % 13) as f64 - 6.0, ((i * 104_729) % 7) as f64 - 3.0))
            .collect();
        let t = welch_terms(&s, &n, 100);
        let a = 0.37;
        let direct: Vec<Complex<f32>> = s
            .iter()
            .zip(&n)
            .map(|(s, n)| {
                let v = s + n * a;
                Complex::new(v.re as f32, v.im as f32)
            })
            .collect();
        let p = welch(&direct, 100);
        for (x, y) in p.iter().zip(t.combine(a)) {
            assert!((x - y).abs() < 1e-4 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn autocorrelation_matches_direct_sum() {
        let x: Vec<f64> = (0..300).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let r = autocorrelation(&x, 50);
        for lag in [0, 1, 17, 50] {
            let direct: f64 = (0..x.len() - lag).map(|n| x[n] * x[n + lag]).sum();
            assert!((r[lag] - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn bin_frequencies() {
        assert_eq!(bin_freq(0, 1000, 25e6), 0.0);
        assert_eq!(bin_freq(1, 1000, 25e6), 25e3);
        assert_eq!(bin_freq(999, 1000, 25e6), -25e3);
        assert_eq!(bin_freq(500, 1000, 25e6), -12.5e6);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.0);
        let (all, clipped) = band_bins(1000, 25e6, 0.0, 25e6);
        assert_eq!((all.len(), clipped), (1000, false));
        let (part, clipped) = band_bins(1000, 25e6, 1e6, 25e6);
        assert_eq!((part.len(), clipped), (960, true));
    }
}
