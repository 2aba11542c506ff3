//! Eye-chart acuity testbed.
//!
//! An [`AttackerModelSpec`] fixes five dimensions of the attack: the message
//! alphabet, its appearance on screen, the capture hardware, the profiling
//! effort and the training budget. [`run_testbed`] renders every
//! (letter, scale) stimulus, captures it once per repetition in each session,
//! cuts the letter box out of the emage, trains the widened CNN on a growing
//! number of profiling sessions and evaluates on held-out sessions.
//!
//! The attacker-model file is INI-style text:
//!
//! ```text
//! [message]
//! letters = C,D,E,F,L,N,O,P,T,Z
//! priors = uniform
//!
//! [message_appearance]
//! scales = 1,1.2,1.5,2,2.5,3,4,5,7,10,20
//! font = sloan
//! background = 1
//! contrast = 1
//!
//! [attack_hardware]
//! profile = iphone6s
//! sample_rate_hz = 25000000
//! snr_db = 33.4
//! distance = 1
//! signal_gain = 1
//! frames = 2
//!
//! [device_profiling]
//! train_sessions = 5
//! test_sessions = 1
//! items_per_class = 50
//! vary_sessions = true
//!
//! [computational_resources]
//! epochs = 100
//! batch_size = 256
//! learning_rate = 0.001
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ini::Ini;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::classifier::{argmax, train, CnnModel, ModelSpec, Samples, TrainConfig};
use crate::dataset::{fraction_split, CaptureChain, SessionConditions, DEFAULT_FRACTIONS};
use crate::emanator::DEFAULT_SAMPLE_RATE_HZ;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pgm::GrayImage;
use crate::profile::{profile, PhoneProfile};
use crate::raster::{letter_width, Renderer, Scale, LETTERS};
use crate::receiver::Emage;
use crate::seed;

/// Side of the square classifier input.
pub const STIMULUS_SIZE: usize = 32;

pub const SECTIONS: [&str; 5] = [
    "message",
    "message_appearance",
    "attack_hardware",
    "device_profiling",
    "computational_resources",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSpec {
    pub letters: Vec<char>,
    /// Relative frequency of each letter in every session; repetitions per
    /// letter scale with it.
    pub priors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceSpec {
    pub scales: Vec<Scale>,
    pub font: String,
    /// Luminance of the page; ink is `background * (1 - contrast)`.
    pub background: f32,
    pub contrast: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub profile: String,
    pub sample_rate_hz: f64,
    /// `None` captures without noise.
    pub snr_db: Option<f64>,
    pub distance: f64,
    pub signal_gain: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingSpec {
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub items_per_class: usize,
    pub vary_sessions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerModelSpec {
    pub message: MessageSpec,
    pub message_appearance: AppearanceSpec,
    pub attack_hardware: HardwareSpec,
    pub device_profiling: ProfilingSpec,
    pub computational_resources: ComputeSpec,
}

impl Default for AttackerModelSpec {
    /// Ten letters at eleven scales on the iPhone 6s profile, five growing
    /// profiling sessions, 50 items per class and scale.
    fn default() -> Self {
        Self {
            message: MessageSpec {
                letters: LETTERS.to_vec(),
                priors: vec![0.1; LETTERS.len()],
            },
            message_appearance: AppearanceSpec {
                scales: Scale::ALL.to_vec(),
                font: "sloan".into(),
                background: 1.0,
                contrast: 1.0,
            },
            attack_hardware: HardwareSpec {
                profile: "iphone6s".into(),
                sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
                snr_db: Some(33.4),
                distance: 1.0,
                signal_gain: 1.0,
                frames: 2,
            },
            device_profiling: ProfilingSpec {
                train_sessions: 5,
                test_sessions: 1,
                items_per_class: 50,
                vary_sessions: true,
            },
            computational_resources: ComputeSpec {
                epochs: 100,
                batch_size: 256,
                learning_rate: 0.001,
            },
        }
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn number<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("{key} = {v:?} is not a number")))
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl AttackerModelSpec {
    /// Parses the INI text. Every section must be present and hold at least
    /// one key; absent keys take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::format("attacker model", e.to_string()))?;
        let mut missing = Vec::new();
        for name in SECTIONS {
            match ini.section(Some(name)) {
                Some(p) if !p.is_empty() => {}
                _ => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::IncompleteSpec(format!("missing or empty sections: {}", missing.join(", "))));
        }
        for (sec, _) in ini.iter() {
            if let Some(name) = sec {
                if !SECTIONS.contains(&name) {
                    return Err(Error::format("attacker model", format!("unknown section [{name}]")));
                }
            }
        }
        let mut spec = Self::default();
        let get = |sec: &str, key: &str| ini.section(Some(sec)).and_then(|p| p.get(key));
        for (sec, props) in ini.iter().filter_map(|(s, p)| s.map(|s| (s, p))) {
            for (key, _) in props.iter() {
                let known: &[&str] = match sec {
                    "message" => &["letters", "priors"],
                    "message_appearance" => &["scales", "font", "background", "contrast"],
                    "attack_hardware" => &["profile", "sample_rate_hz", "snr_db", "distance", "signal_gain", "frames"],
                    "device_profiling" => &["train_sessions", "test_sessions", "items_per_class", "vary_sessions"],
                    _ => &["epochs", "batch_size", "learning_rate"],
                };
                if !known.contains(&key) {
                    return Err(Error::format("attacker model", format!("unknown key {key} in [{sec}]")));
                }
            }
        }

        if let Some(v) = get("message", "letters") {
            spec.message.letters = list(v, |s| {
                let mut c = s.chars();
                match (c.next(), c.next()) {
                    (Some(l), None) => Ok(l),
                    _ => Err(Error::UnknownSymbol(s.to_string())),
                }
            })?;
        }
        let n = spec.message.letters.len();
        spec.message.priors = match get("message", "priors") {
            None | Some("uniform") => vec![1.0 / n.max(1) as f64; n],
            Some(v) => list(v, |s| number("priors", s))?,
        };

        let a = &mut spec.message_appearance;
        if let Some(v) = get("message_appearance", "scales") {
            a.scales = list(v, |s| Scale::from_f64(number("scales", s)?))?;
        }
        if let Some(v) = get("message_appearance", "font") {
            a.font = v.trim().to_string();
        }
        if let Some(v) = get("message_appearance", "background") {
            a.background = number("background", v)?;
        }
        if let Some(v) = get("message_appearance", "contrast") {
            a.contrast = number("contrast", v)?;
        }

        let h = &mut spec.attack_hardware;
        if let Some(v) = get("attack_hardware", "profile") {
            h.profile = v.trim().to_string();
        }
        if let Some(v) = get("attack_hardware", "sample_rate_hz") {
            h.sample_rate_hz = number("sample_rate_hz", v)?;
        }
        match get("attack_hardware", "snr_db") {
            Some("none") => h.snr_db = None,
            Some(v) => h.snr_db = Some(number("snr_db", v)?),
            None => h.snr_db = Some(profile(&h.profile)?.snr_db),
        }
        if let Some(v) = get("attack_hardware", "distance") {
            h.distance = number("distance", v)?;
        }
        if let Some(v) = get("attack_hardware", "signal_gain") {
            h.signal_gain = number("signal_gain", v)?;
        }
        if let Some(v) = get("attack_hardware", "frames") {
            h.frames = number("frames", v)?;
        }

        let d = &mut spec.device_profiling;
        if let Some(v) = get("device_profiling", "train_sessions") {
            d.train_sessions = number("train_sessions", v)?;
        }
        if let Some(v) = get("device_profiling", "test_sessions") {
            d.test_sessions = number("test_sessions", v)?;
        }
        if let Some(v) = get("device_profiling", "items_per_class") {
            d.items_per_class = number("items_per_class", v)?;
        }
        if let Some(v) = get("device_profiling", "vary_sessions") {
            d.vary_sessions = number("vary_sessions", v)?;
        }

        let c = &mut spec.computational_resources;
        if let Some(v) = get("computational_resources", "epochs") {
            c.epochs = number("epochs", v)?;
        }
        if let Some(v) = get("computational_resources", "batch_size") {
            c.batch_size = number("batch_size", v)?;
        }
        if let Some(v) = get("computational_resources", "learning_rate") {
            c.learning_rate = number("learning_rate", v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// INI text that parses back to `self`.
    pub fn to_ini(&self) -> String {
        let (m, a, h, d, c) = (
            &self.message,
            &self.message_appearance,
            &self.attack_hardware,
            &self.device_profiling,
            &self.computational_resources,
        );
        let letters: Vec<String> = m.letters.iter().map(|l| l.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "[message]\nletters = {}\npriors = {}\n", letters.join(","), fmt_list(&m.priors));
        let _ = writeln!(
            out,
            "[message_appearance]\nscales = {}\nfont = {}\nbackground = {}\ncontrast = {}\n",
            fmt_list(&a.scales),
            a.font,
            a.background,
            a.contrast
        );
        let snr = h.snr_db.map_or("none".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "[attack_hardware]\nprofile = {}\nsample_rate_hz = {}\nsnr_db = {snr}\ndistance = {}\nsignal_gain = {}\nframes = {}\n",
            h.profile, h.sample_rate_hz, h.distance, h.signal_gain, h.frames
        );
        let _ = writeln!(
            out,
            "[device_profiling]\ntrain_sessions = {}\ntest_sessions = {}\nitems_per_class = {}\nvary_sessions = {}\n",
            d.train_sessions, d.test_sessions, d.items_per_class, d.vary_sessions
        );
        let _ = write!(
            out,
            "[computational_resources]\nepochs = {}\nbatch_size = {}\nlearning_rate = {}\n",
            c.epochs, c.batch_size, c.learning_rate
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.message;
        if m.letters.is_empty() {
            return Err(Error::IncompleteSpec("no letters".into()));
        }
        if let Some(bad) = m.letters.iter().find(|l| !LETTERS.contains(l)) {
            return Err(Error::UnknownSymbol(bad.to_string()));
        }
        let mut seen = m.letters.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != m.letters.len() {
            return Err(Error::InvalidParameter("repeated letter".into()));
        }
        let psum: f64 = m.priors.iter().sum();
        if m.priors.len() != m.letters.len() || m.priors.iter().any(|&p| !(p > 0.0)) || (psum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!("priors {:?}", m.priors)));
        }
        let a = &self.message_appearance;
        if a.scales.is_empty() {
            return Err(Error::IncompleteSpec("no scales".into()));
        }
        if a.font != "sloan" {
            return Err(Error::InvalidParameter(format!("font {:?}; only sloan is built in", a.font)));
        }
        if !(a.background > 0.0 && a.background <= 1.0 && a.contrast > 0.0 && a.contrast <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "background {} / contrast {}",
                a.background, a.contrast
            )));
        }
        let h = &self.attack_hardware;
        profile(&h.profile)?;
        if !(h.sample_rate_hz > 0.0 && h.distance > 0.0 && h.signal_gain >= 0.0 && h.frames >= 1) {
            return Err(Error::InvalidParameter(format!("{h:?}")));
        }
        let d = &self.device_profiling;
        if d.train_sessions == 0 || d.test_sessions == 0 || d.items_per_class == 0 {
            return Err(Error::InvalidParameter(format!("{d:?}")));
        }
        let c = &self.computational_resources;
        TrainConfig {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            ..TrainConfig::default()
        }
        .validate()?;
        if !(c.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Repetitions of each letter per scale and session.
    pub fn repetitions(&self) -> Vec<usize> {
        let n = self.message.letters.len() as f64;
        let per = self.device_profiling.items_per_class as f64;
        self.message
            .priors
            .iter()
            .map(|p| ((per * n * p).round() as usize).max(1))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub letter: char,
    pub scale: Scale,
    pub repetition: usize,
}

/// Scales outermost, then letters, then repetitions.
pub fn generate_stimuli(spec: &AttackerModelSpec) -> Result<Vec<Stimulus>> {
    spec.validate()?;
    let reps = spec.repetitions();
    let mut out = Vec::new();
    for &scale in &spec.message_appearance.scales {
        for (&letter, &r) in spec.message.letters.iter().zip(&reps) {
            out.extend((0..r).map(|repetition| Stimulus {
                letter,
                scale,
                repetition,
            }));
        }
    }
    Ok(out)
}

/// Screen box around the letter at `scale`, a quarter letter width of margin
/// on each side, clipped to the screen.
pub fn letter_box(profile: &PhoneProfile, scale: Scale) -> (usize, usize, usize, usize) {
    let screen = profile.timing.visible();
    let w = letter_width(screen.width, scale);
    let m = (w / 4).max(2);
    let x0 = ((screen.width - w) / 2).saturating_sub(m);
    let y0 = ((screen.height - w) / 2).saturating_sub(m);
    let x1 = ((screen.width + w) / 2 + m).min(screen.width);
    let y1 = ((screen.height + w) / 2 + m).min(screen.height);
    (x0, y0, x1 - x0, y1 - y0)
}

/// Overlap weights of `n_out` equal output bins over `n_in` inputs.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / step));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-averaging resize of a row-major image.
pub fn area_resample(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let wx = area_weights(sw, dw);
    let wy = area_weights(sh, dh);
    let mut rows = vec![0.0f64; sh * dw];
    for y in 0..sh {
        for (x, ws) in wx.iter().enumerate() {
            rows[y * dw + x] = ws.iter().map(|&(i, w)| w * f64::from(src[y * sw + i])).sum();
        }
    }
    let mut out = vec![0.0f32; dw * dh];
    for (y, ws) in wy.iter().enumerate() {
        for x in 0..dw {
            out[y * dw + x] = ws.iter().map(|&(i, w)| w * rows[i * dw + x]).sum::<f64>() as f32;
        }
    }
    out
}

/// Classifier input for a stimulus: the letter box of the emage, resized to
/// `STIMULUS_SIZE` square.
pub fn stimulus_input(emage: &Emage, profile: &PhoneProfile, scale: Scale) -> Result<Vec<f32>> {
    let (x, y, w, h) = letter_box(profile, scale);
    let (ex, ey, ew, eh) = profile.screen_to_emage(x, y, w, h);
    let crop = emage.crop(ex, ey, ew, eh)?;
    Ok(area_resample(&crop, ew, eh, STIMULUS_SIZE, STIMULUS_SIZE))
}

/// Test-set samples tagged with their scale index.
#[derive(Debug, Clone)]
struct SessionData {
    samples: Samples,
    scale_idx: Vec<usize>,
    meta: SessionMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub index: usize,
    pub role: String,
    pub conditions: SessionConditions,
    pub f_r_hz: f64,
}

fn capture_session(
    spec: &AttackerModelSpec,
    p: &PhoneProfile,
    seed: u64,
    index: usize,
    role: &str,
    exec: Exec,
) -> Result<SessionData> {
    let h = &spec.attack_hardware;
    let a = &spec.message_appearance;
    let session_seed = seed::derive_indexed(seed, "testbed-session", index as u64);
    let base = if spec.device_profiling.vary_sessions {
        SessionConditions::varied(p, seed::derive(session_seed, "conditions"))
    } else {
        SessionConditions::nominal(p)
    };
    let conditions = SessionConditions {
        snr_db: h.snr_db,
        distance_r: base.distance_r * h.distance,
        signal_gain: h.signal_gain,
        frames: h.frames,
        sample_rate_hz: h.sample_rate_hz,
        ..base
    };
    let mut chain = CaptureChain::new(p.clone(), conditions, exec);
    let renderer = Renderer::with_contrast(a.contrast);
    let reps = spec.repetitions();
    let mut samples = Samples::new(STIMULUS_SIZE, STIMULUS_SIZE);
    let mut scale_idx = Vec::new();
    let mut counter = 0u64;
    for (si, &scale) in a.scales.iter().enumerate() {
        for (li, (&letter, &r)) in spec.message.letters.iter().zip(&reps).enumerate() {
            let mut raster = renderer
                .eyechart(letter, scale, p.timing.visible())
                .map_err(|e| e.in_stage("stimuli"))?;
            raster.luminance.iter_mut().for_each(|v| *v *= a.background);
            let clean = chain.capture_clean(&raster)?;
            for _ in 0..r {
                let emage = chain.reconstruct(&clean, seed::derive_indexed(session_seed, "channel", counter))?;
                counter += 1;
                samples.push(&stimulus_input(&emage, p, scale)?, li)?;
                scale_idx.push(si);
            }
        }
    }
    Ok(SessionData {
        samples,
        scale_idx,
        meta: SessionMeta {
            index,
            role: role.to_string(),
            conditions,
            f_r_hz: chain.f_r_hz.unwrap_or(p.timing.f_r),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAccuracy {
    pub scale: Scale,
    pub accuracy: f64,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthStage {
    pub train_sessions: usize,
    pub best_val_accuracy: f64,
    pub accuracy: f64,
    pub per_scale: Vec<ScaleAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedReport {
    pub seed: u64,
    pub spec: AttackerModelSpec,
    pub letters: Vec<char>,
    /// Final stage, all training sessions.
    pub accuracy: f64,
    pub per_scale: Vec<ScaleAccuracy>,
    pub per_letter: Vec<f64>,
    /// `confusion[true][predicted]` counts over the test sessions.
    pub confusion: Vec<Vec<usize>>,
    pub test_items: usize,
    /// Two-sided binomial p-value of the final accuracy against uniform
    /// guessing.
    pub chance_p_value: f64,
    pub growth: Vec<GrowthStage>,
    pub sessions: Vec<SessionMeta>,
}

/// Two-sided binomial test of `k` successes in `n` trials against `p0`.
pub fn binomial_p_value(k: usize, n: usize, p0: f64) -> f64 {
    let Ok(b) = Binomial::new(p0, n as u64) else {
        return f64::NAN;
    };
    let k = k as u64;
    let lower = b.cdf(k);
    let upper = if k == 0 { 1.0 } else { b.sf(k - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

/// generate -> emanate -> reconstruct -> dataset -> train -> evaluate.
/// Training stage `k` uses the first `k` profiling sessions; all stages are
/// evaluated on the same held-out sessions.
pub fn run_testbed(spec: &AttackerModelSpec, seed: u64, exec: Exec) -> Result<TestbedReport> {
    spec.validate()?;
    let p = profile(&spec.attack_hardware.profile)?;
    let d = &spec.device_profiling;
    let n_sessions = d.train_sessions + d.test_sessions;
    let sessions = (0..n_sessions)
        .map(|i| {
            let role = if i < d.train_sessions { "train" } else { "test" };
            capture_session(spec, &p, seed, i, role, exec)
        })
        .collect::<Result<Vec<_>>>()?;
    let (train_sessions, test_sessions) = sessions.split_at(d.train_sessions);
    let mut test = Samples::new(STIMULUS_SIZE, STIMULUS_SIZE);
    let mut test_scale = Vec::new();
    for s in test_sessions {
        test.extend(&s.samples)?;
        test_scale.extend_from_slice(&s.scale_idx);
    }
    let n_letters = spec.message.letters.len();
    let n_scales = spec.message_appearance.scales.len();
    let c = &spec.computational_resources;
    let model_spec = ModelSpec::widened(STIMULUS_SIZE, STIMULUS_SIZE, n_letters);
    let init = CnnModel::<f32>::init(model_spec, seed::derive(seed, "testbed-init")).map_err(|e| e.in_stage("train"))?;
    let mut growth = Vec::new();
    let mut last_confusion = Vec::new();
    for k in 1..=d.train_sessions {
        let mut pool = Samples::new(STIMULUS_SIZE, STIMULUS_SIZE);
        for s in &train_sessions[..k] {
            pool.extend(&s.samples)?;
        }
        let idx: Vec<usize> = (0..pool.len()).collect();
        let (tr, va, te) = fraction_split(&idx, DEFAULT_FRACTIONS, seed::derive_indexed(seed, "testbed-split", k as u64));
        let (train_set, mut val_set) = (pool.subset(&tr), pool.subset(&va));
        val_set.extend(&pool.subset(&te))?;
        let cfg = TrainConfig {
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            batch_size: c.batch_size,
            seed: seed::derive_indexed(seed, "testbed-train", k as u64),
            ..TrainConfig::default()
        };
        let (model, history) = train(&init, &train_set, &val_set, &cfg, exec).map_err(|e| e.in_stage("train"))?;
        let logits = model.forward(&test.inputs, exec).map_err(|e| e.in_stage("evaluate"))?;
        let mut confusion = vec![vec![0usize; n_letters]; n_letters];
        let mut hits = vec![0usize; n_scales];
        let mut totals = vec![0usize; n_scales];
        for ((z, &y), &si) in logits.iter().zip(&test.labels).zip(&test_scale) {
            let pred = argmax(z);
            confusion[y][pred] += 1;
            totals[si] += 1;
            hits[si] += usize::from(pred == y);
        }
        let correct: usize = hits.iter().sum();
        growth.push(GrowthStage {
            train_sessions: k,
            best_val_accuracy: history.best_val_accuracy,
            accuracy: correct as f64 / test.len() as f64,
            per_scale: spec
                .message_appearance
                .scales
                .iter()
                .enumerate()
                .map(|(i, &scale)| ScaleAccuracy {
                    scale,
                    accuracy: if totals[i] > 0 { hits[i] as f64 / totals[i] as f64 } else { 0.0 },
                    items: totals[i],
                })
                .collect(),
        });
        last_confusion = confusion;
    }
    let last = growth.last().expect("at least one training session").clone();
    let per_letter = last_confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            if n > 0 {
                row[i] as f64 / n as f64
            } else {
                0.0
            }
        })
        .collect();
    let correct: usize = (0..n_letters).map(|i| last_confusion[i][i]).sum();
    Ok(TestbedReport {
        seed,
        spec: spec.clone(),
        letters: spec.message.letters.clone(),
        accuracy: last.accuracy,
        per_scale: last.per_scale,
        per_letter,
        chance_p_value: binomial_p_value(correct, test.len(), 1.0 / n_letters as f64),
        confusion: last_confusion,
        test_items: test.len(),
        growth,
        sessions: sessions.into_iter().map(|s| s.meta).collect(),
    })
}

impl TestbedReport {
    /// `scale,accuracy,items` rows of the final stage.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,accuracy,items\n");
        for s in &self.per_scale {
            let _ = writeln!(out, "{},{},{}", s.scale, s.accuracy, s.items);
        }
        out
    }

    /// Confusion matrix as a heat image, one pixel per cell, rows normalised.
    pub fn confusion_image(&self) -> GrayImage {
        let n = self.confusion.len();
        let mut unit = Vec::with_capacity(n * n);
        for row in &self.confusion {
            let total: usize = row.iter().sum();
            unit.extend(row.iter().map(|&v| if total > 0 { v as f32 / total as f32 } else { 0.0 }));
        }
        GrayImage::from_unit(n, n, &unit).expect("square matrix")
    }

    /// `path` as JSON, plus `.csv` and `.confusion.pgm` siblings.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        self.confusion_image().write(path.with_extension("confusion.pgm"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> AttackerModelSpec {
        let mut s = AttackerModelSpec::default();
        s.message.letters = vec!['C', 'L', 'T'];
        s.message.priors = vec![1.0 / 3.0; 3];
        s.message_appearance.scales = vec![Scale::from_f64(10.0).unwrap()];
        s.attack_hardware.profile = "galaxy_a3".into();
        s.attack_hardware.snr_db = None;
        s.attack_hardware.frames = 1;
        s.device_profiling = ProfilingSpec {
            train_sessions: 1,
            test_sessions: 1,
            items_per_class: 4,
            vary_sessions: false,
        };
        s.computational_resources = ComputeSpec {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.002,
        };
        s
    }

    #[test]
    fn default_protocol_has_110_classes() {
        let spec = AttackerModelSpec::default();
        let stimuli = generate_stimuli(&spec).unwrap();
        assert_eq!(stimuli.len(), 10 * 11 * 50);
        let mut classes: Vec<(char, u16)> = stimuli.iter().map(|s| (s.letter, s.scale.tenths())).collect();
        classes.dedup();
        assert_eq!(classes.len(), 110);
        let mut one = tiny_spec();
        one.message.letters = vec!['Z'];
        one.message.priors = vec![1.0];
        one.device_profiling.items_per_class = 1;
        assert_eq!(generate_stimuli(&one).unwrap().len(), 1);
    }

    #[test]
    fn ini_roundtrip_and_rejections() {
        let spec = tiny_spec();
        assert_eq!(AttackerModelSpec::parse(&spec.to_ini()).unwrap(), spec);
        let d = AttackerModelSpec::default();
        assert_eq!(AttackerModelSpec::parse(&d.to_ini()).unwrap(), d);
        let text = spec.to_ini();
        let cut = text.split("[computational_resources]").next().unwrap();
        assert!(matches!(AttackerModelSpec::parse(cut), Err(Error::IncompleteSpec(_))));
        let bad_letter = text.replace("letters = C,L,T", "letters = C,L,Q");
        assert!(matches!(AttackerModelSpec::parse(&bad_letter), Err(Error::UnknownSymbol(_))));
        let bad_scale = text.replace("scales = 10", "scales = 11");
        assert!(matches!(AttackerModelSpec::parse(&bad_scale), Err(Error::UnknownScale(_))));
        let bad_key = text.replace("font = sloan", "typeface = sloan");
        assert!(AttackerModelSpec::parse(&bad_key).is_err());
    }

    #[test]
    fn area_resample_preserves_mean() {
        let src: Vec<f32> = (0..70 * 45).map(|i| ((i * 13) % 29) as f32 / 29.0).collect();
        let out = area_resample(&src, 70, 45, 32, 32);
        let m_in = src.iter().map(|&v| f64::from(v)).sum::<f64>() / src.len() as f64;
        let m_out = out.iter().map(|&v| f64::from(v)).sum::<f64>() / out.len() as f64;
        assert!((m_in - m_out).abs() < 1e-5);
        assert_eq!(area_resample(&src, 70, 45, 70, 45), src);
        let up = area_resample(&[0.25], 1, 1, 3, 2);
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn letter_boxes_fit() {
        for name in ["iphone6s", "galaxy_a3", "honor6x"] {
            let p = profile(name).unwrap();
            for s in Scale::ALL {
                let (x, y, w, h) = letter_box(&p, s);
                assert!(x + w <= p.timing.visible_w && y + h <= p.timing.visible_h);
                assert!(w >= letter_width(p.timing.visible_w, s));
            }
        }
    }

    #[test]
    fn binomial_test_values() {
        assert!(binomial_p_value(10, 100, 0.1) > 0.5);
        assert!(binomial_p_value(40, 100, 0.1) < 1e-6);
        assert!(binomial_p_value(0, 100, 0.1) < 1e-3);
    }

    #[test]
    fn tiny_run_is_deterministic_and_complete() {
        let spec = tiny_spec();
        let a = run_testbed(&spec, 5, Exec::Sequential).unwrap();
        let b = run_testbed(&spec, 5, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_scale.len(), 1);
        assert_eq!(a.test_items, 12);
        for (i, row) in a.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 4, "row {i}");
        }
        assert!((0.0..=1.0).contains(&a.accuracy));
        assert_eq!(a.growth.len(), 1);
    }
}
