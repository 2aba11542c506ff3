//! Labeled emage datasets built from simulated capture sessions.
//!
//! A session renders a number of screens, captures and reconstructs each one
//! and stores the labeled crops below the dataset root:
//!
//! ```text
//! sessions/<id>/manifest.json
//! sessions/<id>/items/s000_r00_c00.pgm      grid sessions
//! sessions/<id>/items/c000.pgm              code sessions
//! sessions/<id>/emages/s000.pgm             optional full emages
//! splits/<name>/plan.json, train.txt, val.txt, test_internal.txt, test.txt
//! ```
//!
//! All stored paths are relative to the dataset root. Every session draws its
//! capture conditions, digit plan and channel noise from its own seed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Samples;
use crate::emanator::{
    capture_clean, emanate, finish, ChannelModel, CleanCapture, Frontend, LeakageModel,
    DEFAULT_SAMPLE_RATE_HZ,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pgm::GrayImage;
use crate::profile::{profile, PhoneProfile};
use crate::raster::{MessageLayout, Renderer, ScreenRaster, CODE_LEN, DIGITS};
use crate::receiver::{am_demod, estimate_frame_rate, reconstruct, Emage, ReconParams};
use crate::seed;

/// Sessions whose mean crop dynamic range falls below this are flagged.
pub const QUALITY_MIN_RANGE: f64 = 0.2;
/// Frames captured and averaged per screen.
pub const DEFAULT_FRAMES: usize = 2;
pub const DEFAULT_SCREENS: usize = 20;
pub const DEFAULT_CODES: usize = 200;
pub const DEFAULT_SCHEDULE: [usize; 4] = [1, 3, 5, 7];
pub const DEFAULT_TEST_SESSIONS: usize = 2;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];
/// Search window around the nominal refresh rate for sync estimation.
pub const SYNC_SEARCH_PPM: f64 = 1000.0;

/// Per-session capture conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConditions {
    /// Channel SNR calibrated at unit distance.
    pub snr_db: Option<f64>,
    pub distance_r: f64,
    pub highpass_alpha: f64,
    /// Receiver tuning error relative to the carrier.
    pub tuning_offset_hz: f64,
    pub signal_gain: f64,
    pub frames: usize,
    pub sample_rate_hz: f64,
}

impl SessionConditions {
    /// Profile SNR at unit distance, exact tuning.
    pub fn nominal(profile: &PhoneProfile) -> Self {
        Self {
            snr_db: Some(profile.snr_db),
            distance_r: 1.0,
            highpass_alpha: profile.leak.highpass_alpha,
            tuning_offset_hz: 0.0,
            signal_gain: 1.0,
            frames: DEFAULT_FRAMES,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        }
    }

    /// Probe placement and tuning jitter between sessions: distance
    /// `U(1, 1.1)`, high-pass pole `U(0, 0.05)`, tuning `U(-0.25, 0.25)` MHz.
    pub fn varied(profile: &PhoneProfile, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            distance_r: rng.random_range(1.0..1.1),
            highpass_alpha: rng.random_range(0.0..0.05),
            tuning_offset_hz: rng.random_range(-0.25e6..0.25e6),
            ..Self::nominal(profile)
        }
    }

    pub fn with_snr(self, snr_db: Option<f64>) -> Self {
        Self { snr_db, ..self }
    }

    pub fn leak(&self, profile: &PhoneProfile) -> LeakageModel {
        LeakageModel {
            highpass_alpha: self.highpass_alpha,
            ..profile.leak
        }
    }

    /// Default front end at the session sample rate; the passband shrinks
    /// to 40% of the sample rate when that is narrower.
    pub fn frontend(&self, profile: &PhoneProfile) -> Frontend {
        let tuned = Frontend::tuned(self.leak(profile).carrier_hz(&profile.timing) + self.tuning_offset_hz);
        Frontend {
            sample_rate_hz: self.sample_rate_hz,
            cutoff_hz: tuned.cutoff_hz.min(0.4 * self.sample_rate_hz),
            ..tuned
        }
    }

    pub fn channel(&self, rng_seed: u64) -> ChannelModel {
        ChannelModel {
            distance_r: self.distance_r,
            target_snr_db: self.snr_db,
            signal_gain: self.signal_gain,
            rng_seed,
            ..ChannelModel::default()
        }
    }
}

/// Display -> capture -> reconstruction loop for one profile and one set of
/// conditions. The refresh rate is estimated from the first capture and
/// reused for the rest of the session.
#[derive(Debug, Clone)]
pub struct CaptureChain {
    pub profile: PhoneProfile,
    pub conditions: SessionConditions,
    pub f_r_hz: Option<f64>,
    pub exec: Exec,
}

impl CaptureChain {
    pub fn new(profile: PhoneProfile, conditions: SessionConditions, exec: Exec) -> Self {
        Self {
            profile,
            conditions,
            f_r_hz: None,
            exec,
        }
    }

    /// Pads `raster` to the visible screen and returns its emage.
    pub fn capture(&mut self, raster: &ScreenRaster, channel_seed: u64) -> Result<Emage> {
        let clean = self.capture_clean(raster)?;
        self.reconstruct(&clean, channel_seed)
    }

    /// Noise-free capture of `raster`, padded to the visible screen.
    pub fn capture_clean(&self, raster: &ScreenRaster) -> Result<CleanCapture> {
        let p = &self.profile;
        let screen = raster.pad_to(p.timing.visible(), 1.0).map_err(|e| e.in_stage("render"))?;
        let leak = emanate(&screen, &p.timing, &self.conditions.leak(p), self.conditions.frames)
            .map_err(|e| e.in_stage("emanate"))?;
        capture_clean(&leak, &self.conditions.frontend(p), self.exec).map_err(|e| e.in_stage("capture"))
    }

    /// Adds channel noise drawn from `channel_seed` and reconstructs.
    pub fn reconstruct(&mut self, clean: &CleanCapture, channel_seed: u64) -> Result<Emage> {
        let p = &self.profile;
        let rec = finish(clean, &self.conditions.channel(channel_seed), self.exec)
            .map_err(|e| e.in_stage("capture"))?;
        let f_r = match self.f_r_hz {
            Some(f) => f,
            None => {
                let hint = p.timing.f_r;
                let f = am_demod(&rec, 1.0)
                    .and_then(|m| estimate_frame_rate(&m, rec.sample_rate_hz, hint, SYNC_SEARCH_PPM))
                    .unwrap_or(hint);
                self.f_r_hz = Some(f);
                f
            }
        };
        reconstruct(&rec, &ReconParams::new(p.emage.width, p.emage.height, f_r), self.exec)
            .map_err(|e| e.in_stage("reconstruct"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    Grid,
    Code,
}

/// One labeled crop. Geometry is in emage pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    pub path: String,
    pub label: String,
    pub screen: usize,
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionQuality {
    pub mean_crop_range: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub kind: SessionKind,
    pub phone_profile: String,
    pub seed: u64,
    pub conditions: SessionConditions,
    pub f_r_hz: f64,
    pub rows: usize,
    pub cols: usize,
    pub screens: usize,
    pub quality: SessionQuality,
    /// Full emages, one per screen, when kept.
    pub emages: Vec<String>,
    pub items: Vec<SessionItem>,
}

pub fn session_dir(root: &Path, id: &str) -> PathBuf {
    root.join("sessions").join(id)
}

pub fn manifest_path(root: &Path, id: &str) -> PathBuf {
    session_dir(root, id).join("manifest.json")
}

impl Session {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes the manifest through a temporary file and a rename.
    pub fn write_manifest(&self, root: &Path) -> Result<()> {
        let path = manifest_path(root, &self.id);
        write_atomic(&path, self.to_json()?.as_bytes())
    }

    pub fn load(root: &Path, id: &str) -> Result<Self> {
        let path = manifest_path(root, id);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    /// Ids unique, every item file present with its recorded size.
    pub fn verify(&self, root: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(&item.path) {
                return Err(Error::format("manifest", format!("duplicate item {}", item.path)));
            }
            let img = GrayImage::read(root.join(&item.path))?;
            if (img.width, img.height) != (item.w, item.h) {
                return Err(Error::format(
                    "manifest",
                    format!(
                        "{} is {}x{}, manifest says {}x{}",
                        item.path, img.width, img.height, item.w, item.h
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("session id {id:?}")))
    }
}

/// `rows x cols` crops of `cell_w x cell_h` starting at `(x0, y0)`,
/// row-major.
pub fn grid_crop_at(
    emage: &Emage,
    x0: usize,
    y0: usize,
    rows: usize,
    cols: usize,
    cell_w: usize,
    cell_h: usize,
) -> Result<Vec<Vec<f32>>> {
    if x0 + cols * cell_w > emage.width || y0 + rows * cell_h > emage.height {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} cells of {cell_w}x{cell_h} at ({x0},{y0}) overflow a {}x{} emage",
            emage.width, emage.height
        )));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(emage.crop(x0 + c * cell_w, y0 + r * cell_h, cell_w, cell_h)?);
        }
    }
    Ok(out)
}

/// [`grid_crop_at`] from the emage origin.
pub fn grid_crop(
    emage: &Emage,
    rows: usize,
    cols: usize,
    cell_w: usize,
    cell_h: usize,
) -> Result<Vec<Vec<f32>>> {
    grid_crop_at(emage, 0, 0, rows, cols, cell_w, cell_h)
}

/// `n` digits with class counts equal within one, in seeded order.
pub fn balanced_digit_plan(n: usize, seed: u64) -> Vec<char> {
    let mut plan: Vec<char> = (0..n).map(|i| DIGITS[i % DIGITS.len()]).collect();
    plan.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    plan
}

/// Uniform random six-digit codes.
pub fn random_codes(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..CODE_LEN)
                .map(|_| DIGITS[rng.random_range(0..DIGITS.len())])
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub profile: String,
    pub rows: usize,
    pub cols: usize,
    pub screens: usize,
    pub seed: u64,
    /// Overrides the profile SNR; `Some(None)` captures without noise.
    pub snr_db: Option<Option<f64>>,
    /// Draw per-session distance, filter pole and tuning jitter.
    pub vary: bool,
    pub frames: usize,
    pub keep_emages: bool,
}

impl SessionConfig {
    pub fn new(profile: &str, seed: u64) -> Self {
        Self {
            profile: profile.to_string(),
            rows: crate::profile::GRID_ROWS,
            cols: crate::profile::GRID_COLS,
            screens: DEFAULT_SCREENS,
            seed,
            snr_db: None,
            vary: true,
            frames: DEFAULT_FRAMES,
            keep_emages: false,
        }
    }

    fn conditions(&self, p: &PhoneProfile) -> SessionConditions {
        let base = if self.vary {
            SessionConditions::varied(p, seed::derive(self.seed, "conditions"))
        } else {
            SessionConditions::nominal(p)
        };
        let base = match self.snr_db {
            Some(s) => base.with_snr(s),
            None => base,
        };
        SessionConditions {
            frames: self.frames,
            ..base
        }
    }
}

fn save_crop(root: &Path, rel: &str, w: usize, h: usize, values: &[f32]) -> Result<f64> {
    let img = GrayImage::from_unit(w, h, values)?;
    let lo = img.data.iter().min().copied().unwrap_or(0);
    let hi = img.data.iter().max().copied().unwrap_or(0);
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.write(&path)?;
    Ok(f64::from(hi - lo) / 255.0)
}

fn quality(ranges: &[f64]) -> SessionQuality {
    let mean = if ranges.is_empty() {
        0.0
    } else {
        ranges.iter().sum::<f64>() / ranges.len() as f64
    };
    SessionQuality {
        mean_crop_range: mean,
        flagged: mean < QUALITY_MIN_RANGE,
    }
}

/// Renders `screens` digit grids, captures and reconstructs each one and
/// stores every cell as a labeled crop. `plan` overrides the balanced digit
/// plan and must hold `rows * cols * screens` digits.
pub fn run_session(
    root: &Path,
    id: &str,
    cfg: &SessionConfig,
    plan: Option<&[char]>,
    exec: Exec,
) -> Result<Session> {
    check_id(id)?;
    let p = profile(&cfg.profile)?;
    if cfg.rows == 0 || cfg.cols == 0 || cfg.screens == 0 || cfg.frames == 0 {
        return Err(Error::InvalidParameter(format!(
            "session needs at least one screen, cell and frame: {cfg:?}"
        )));
    }
    let per_screen = cfg.rows * cfg.cols;
    let plan = match plan {
        Some(d) if d.len() != per_screen * cfg.screens => {
            return Err(Error::CountMismatch {
                expected: per_screen * cfg.screens,
                actual: d.len(),
            })
        }
        Some(d) => d.to_vec(),
        None => balanced_digit_plan(per_screen * cfg.screens, seed::derive(cfg.seed, "plan")),
    };
    let area = p.grid_area(cfg.rows, cfg.cols);
    let crop = p.crop_or_cell();
    let (ex, ey, _, _) = p.screen_to_emage(0, 0, 0, 0);
    let renderer = Renderer::default();
    let mut chain = CaptureChain::new(p.clone(), cfg.conditions(&p), exec);
    let dir = format!("sessions/{id}");
    let mut items = Vec::with_capacity(plan.len());
    let mut ranges = Vec::with_capacity(plan.len());
    let mut emages = Vec::new();
    for s in 0..cfg.screens {
        let digits = &plan[s * per_screen..(s + 1) * per_screen];
        let raster = renderer
            .digit_grid(cfg.rows, cfg.cols, digits, area)
            .map_err(|e| e.in_stage("render"))?;
        let emage = chain.capture(&raster, seed::derive_indexed(cfg.seed, "channel", s as u64))?;
        if cfg.keep_emages {
            let rel = format!("{dir}/emages/s{s:03}.pgm");
            write_emage(root, &rel, &emage)?;
            emages.push(rel);
        }
        let crops = grid_crop_at(&emage, ex, ey, cfg.rows, cfg.cols, crop.width, crop.height)
            .map_err(|e| e.in_stage("crop"))?;
        for (k, values) in crops.iter().enumerate() {
            let (row, col) = (k / cfg.cols, k % cfg.cols);
            let rel = format!("{dir}/items/s{s:03}_r{row:02}_c{col:02}.pgm");
            ranges.push(save_crop(root, &rel, crop.width, crop.height, values)?);
            items.push(SessionItem {
                path: rel,
                label: digits[k].to_string(),
                screen: s,
                row,
                col,
                x: ex + col * crop.width,
                y: ey + row * crop.height,
                w: crop.width,
                h: crop.height,
            });
        }
    }
    let session = Session {
        id: id.to_string(),
        kind: SessionKind::Grid,
        phone_profile: cfg.profile.clone(),
        seed: cfg.seed,
        conditions: chain.conditions,
        f_r_hz: chain.f_r_hz.unwrap_or(p.timing.f_r),
        rows: cfg.rows,
        cols: cfg.cols,
        screens: cfg.screens,
        quality: quality(&ranges),
        emages,
        items,
    };
    session.write_manifest(root)?;
    Ok(session)
}

fn write_emage(root: &Path, rel: &str, emage: &Emage) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    emage.write(path)
}

/// Security-message session: one random code per screen, the code row cut
/// out of each emage. `cfg.screens` is the number of codes.
pub fn run_code_session(root: &Path, id: &str, cfg: &SessionConfig, exec: Exec) -> Result<Session> {
    check_id(id)?;
    let p = profile(&cfg.profile)?;
    if cfg.screens == 0 || cfg.frames == 0 {
        return Err(Error::InvalidParameter(format!(
            "code session needs at least one code and frame: {cfg:?}"
        )));
    }
    let codes = random_codes(cfg.screens, seed::derive(cfg.seed, "codes"));
    let screen = p.timing.visible();
    let layout = MessageLayout::for_screen(screen, p.cell)?;
    let (sx, sy, sw, sh) = layout.code_region();
    let (x, y, w, h) = p.screen_to_emage(sx, sy, sw, sh);
    let renderer = Renderer::default();
    let mut chain = CaptureChain::new(p.clone(), cfg.conditions(&p), exec);
    let dir = format!("sessions/{id}");
    let mut items = Vec::with_capacity(codes.len());
    let mut ranges = Vec::with_capacity(codes.len());
    let mut emages = Vec::new();
    for (s, code) in codes.iter().enumerate() {
        let raster = renderer
            .security_message(code, screen, p.cell)
            .map_err(|e| e.in_stage("render"))?;
        let emage = chain.capture(&raster, seed::derive_indexed(cfg.seed, "channel", s as u64))?;
        if cfg.keep_emages {
            let rel = format!("{dir}/emages/s{s:03}.pgm");
            write_emage(root, &rel, &emage)?;
            emages.push(rel);
        }
        let values = emage.crop(x, y, w, h).map_err(|e| e.in_stage("crop"))?;
        let rel = format!("{dir}/items/c{s:03}.pgm");
        ranges.push(save_crop(root, &rel, w, h, &values)?);
        items.push(SessionItem {
            path: rel,
            label: code.clone(),
            screen: s,
            row: 0,
            col: 0,
            x,
            y,
            w,
            h,
        });
    }
    let session = Session {
        id: id.to_string(),
        kind: SessionKind::Code,
        phone_profile: cfg.profile.clone(),
        seed: cfg.seed,
        conditions: chain.conditions,
        f_r_hz: chain.f_r_hz.unwrap_or(p.timing.f_r),
        rows: 1,
        cols: 1,
        screens: cfg.screens,
        quality: quality(&ranges),
        emages,
        items,
    };
    session.write_manifest(root)?;
    Ok(session)
}

/// Session ids under `root/sessions`, sorted.
pub fn list_sessions(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("sessions");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().join("manifest.json").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// A stored crop and its label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemRef {
    pub path: String,
    pub label: String,
}

impl From<&SessionItem> for ItemRef {
    fn from(i: &SessionItem) -> Self {
        Self {
            path: i.path.clone(),
            label: i.label.clone(),
        }
    }
}

/// Reads single-symbol items into classifier samples; the label index is
/// the symbol's position in `classes`.
pub fn load_samples(root: &Path, items: &[ItemRef], classes: &[char]) -> Result<Samples> {
    let mut out: Option<Samples> = None;
    for item in items {
        let img = GrayImage::read(root.join(&item.path))?;
        let mut chars = item.label.chars();
        let (Some(sym), None) = (chars.next(), chars.next()) else {
            return Err(Error::UnknownSymbol(item.label.clone()));
        };
        let label = classes
            .iter()
            .position(|&c| c == sym)
            .ok_or_else(|| Error::UnknownSymbol(item.label.clone()))?;
        let s = out.get_or_insert_with(|| Samples::new(img.height, img.width));
        if (s.h, s.w) != (img.height, img.width) {
            return Err(Error::Dimension(format!(
                "{} is {}x{}, expected {}x{}",
                item.path, img.width, img.height, s.w, s.h
            )));
        }
        s.push(&img.to_unit(), label)?;
    }
    out.ok_or_else(|| Error::InvalidParameter("no items to load".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Items of one pool split by fraction.
    Fraction,
    /// Held-out sessions as the test set, fraction split inside the training
    /// sessions.
    Session,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub name: String,
    pub mode: SplitMode,
    pub train_sessions: Vec<String>,
    pub test_sessions: Vec<String>,
    /// Train / validation / internal-test fractions.
    pub fractions: [f64; 3],
    pub seed: u64,
    pub train: Vec<ItemRef>,
    pub val: Vec<ItemRef>,
    pub test_internal: Vec<ItemRef>,
    /// Held-out session items; equals `test_internal` in fraction mode.
    pub test: Vec<ItemRef>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::InvalidParameter(format!("split fractions {:?}", self.fractions)));
        }
        if self.train_sessions.iter().any(|s| self.test_sessions.contains(s)) {
            return Err(Error::InvalidParameter("train and test sessions overlap".into()));
        }
        let mut seen = BTreeSet::new();
        let parts = [&self.train, &self.val, &self.test_internal];
        let held_out = match self.mode {
            SplitMode::Fraction => None,
            SplitMode::Session => Some(&self.test),
        };
        for item in parts.into_iter().chain(held_out).flatten() {
            if !seen.insert(&item.path) {
                return Err(Error::InvalidParameter(format!("{} appears in two splits", item.path)));
            }
        }
        Ok(())
    }

    pub fn dir(root: &Path, name: &str) -> PathBuf {
        root.join("splits").join(name)
    }

    /// `plan.json` plus one path-per-line list for each part.
    pub fn write(&self, root: &Path) -> Result<()> {
        let dir = Self::dir(root, &self.name);
        let lists = [
            ("train.txt", &self.train),
            ("val.txt", &self.val),
            ("test_internal.txt", &self.test_internal),
            ("test.txt", &self.test),
        ];
        for (file, items) in lists {
            let body: String = items.iter().map(|i| format!("{}\n", i.path)).collect();
            write_atomic(&dir.join(file), body.as_bytes())?;
        }
        write_atomic(&dir.join("plan.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(root: &Path, name: &str) -> Result<Self> {
        let path = Self::dir(root, name).join("plan.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let plan: Self = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Seeded shuffle of `items` cut at the cumulative fractions.
pub fn fraction_split<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = v.len();
    let n_train = (fractions[0] * n as f64).floor() as usize;
    let n_val = ((fractions[1] * n as f64).floor() as usize).min(n - n_train);
    let rest = v.split_off(n_train + n_val);
    let val = v.split_off(n_train);
    (v, val, rest)
}

/// Single fraction-mode plan over all items of `sessions`.
pub fn fraction_plan(name: &str, sessions: &[Session], fractions: [f64; 3], seed: u64) -> Result<SplitPlan> {
    let items: Vec<ItemRef> = sessions.iter().flat_map(|s| s.items.iter().map(ItemRef::from)).collect();
    let (train, val, test_internal) = fraction_split(&items, fractions, seed);
    let plan = SplitPlan {
        name: name.to_string(),
        mode: SplitMode::Fraction,
        train_sessions: sessions.iter().map(|s| s.id.clone()).collect(),
        test_sessions: Vec::new(),
        fractions,
        seed,
        train,
        val,
        test: test_internal.clone(),
        test_internal,
    };
    plan.validate()?;
    Ok(plan)
}

/// Nested training sets: the last `test_sessions` unflagged sessions are
/// the fixed test set, training set `k` uses the first `schedule[k]` of the
/// others, split 80/10/10 inside.
pub fn build_training_sets(
    sessions: &[Session],
    schedule: &[usize],
    test_sessions: usize,
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    let valid: Vec<&Session> = sessions.iter().filter(|s| !s.quality.flagged).collect();
    let widest = schedule.iter().copied().max().unwrap_or(0);
    if schedule.is_empty() || schedule.contains(&0) || test_sessions == 0 {
        return Err(Error::InvalidParameter(format!(
            "schedule {schedule:?} with {test_sessions} test sessions"
        )));
    }
    let needed = widest + test_sessions;
    if valid.len() < needed {
        return Err(Error::InsufficientSessions {
            needed,
            have: valid.len(),
        });
    }
    let mut ids = BTreeSet::new();
    for s in &valid {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::InvalidParameter(format!("duplicate session id {}", s.id)));
        }
    }
    let (pool, test) = valid.split_at(valid.len() - test_sessions);
    let test_items: Vec<ItemRef> = test.iter().flat_map(|s| s.items.iter().map(ItemRef::from)).collect();
    let test_ids: Vec<String> = test.iter().map(|s| s.id.clone()).collect();
    schedule
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let used = &pool[..n];
            let items: Vec<ItemRef> = used.iter().flat_map(|s| s.items.iter().map(ItemRef::from)).collect();
            let split_seed = seed::derive_indexed(seed, "split", k as u64);
            let (train, val, test_internal) = fraction_split(&items, DEFAULT_FRACTIONS, split_seed);
            let plan = SplitPlan {
                name: format!("training_{}", k + 1),
                mode: SplitMode::Session,
                train_sessions: used.iter().map(|s| s.id.clone()).collect(),
                test_sessions: test_ids.clone(),
                fractions: DEFAULT_FRACTIONS,
                seed: split_seed,
                train,
                val,
                test_internal,
                test: test_items.clone(),
            };
            plan.validate()?;
            Ok(plan)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::receiver::Alignment;
    use proptest::prelude::*;

    fn small_cfg(seed: u64) -> SessionConfig {
        SessionConfig {
            rows: 2,
            cols: 3,
            screens: 2,
            ..SessionConfig::new("galaxy_a3", seed)
        }
    }

    #[test]
    fn balanced_plan_counts() {
        for n in [10, 1600, 32000, 7, 13] {
            let plan = balanced_digit_plan(n, 3);
            let counts: Vec<usize> = DIGITS
                .iter()
                .map(|d| plan.iter().filter(|c| *c == d).count())
                .collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
        assert_ne!(balanced_digit_plan(100, 1), balanced_digit_plan(100, 2));
    }

    #[test]
    fn codes_are_six_digits() {
        let c = random_codes(50, 9);
        assert!(c.iter().all(|s| s.len() == 6 && s.chars().all(|d| d.is_ascii_digit())));
        assert_eq!(c, random_codes(50, 9));
    }

    #[test]
    fn varied_conditions_stay_in_range() {
        let p = profile("iphone6s").unwrap();
        for s in 0..50 {
            let c = SessionConditions::varied(&p, s);
            assert!((1.0..1.1).contains(&c.distance_r));
            assert!((0.0..0.05).contains(&c.highpass_alpha));
            assert!(c.tuning_offset_hz.abs() <= 0.25e6);
            assert_eq!(c.snr_db, Some(33.4));
        }
    }

    fn emage_from(width: usize, height: usize, pixels: Vec<f32>) -> Emage {
        Emage {
            width,
            height,
            pixels,
            frames_averaged: 1,
            alignment_offset: 0,
            params: ReconParams {
                alignment: Alignment::Fixed(0),
                ..ReconParams::new(width, height, 60.0)
            },
            source: None,
        }
    }

    #[test]
    fn grid_crop_reassembles() {
        let (w, h) = (50, 70);
        let px: Vec<f32> = (0..w * h).map(|i| (i % 97) as f32 / 97.0).collect();
        let e = emage_from(w, h, px.clone());
        let crops = grid_crop(&e, 2, 4, 12, 31).unwrap();
        assert_eq!(crops.len(), 8);
        for y in 0..62 {
            for x in 0..48 {
                let (r, c) = (y / 31, x / 12);
                assert_eq!(crops[r * 4 + c][(y % 31) * 12 + x % 12], px[y * w + x]);
            }
        }
        assert!(grid_crop(&e, 3, 4, 12, 31).is_err());
        let one = emage_from(21, 31, px[..651].to_vec());
        assert_eq!(grid_crop(&one, 1, 1, 21, 31).unwrap()[0], one.pixels);
    }

    #[test]
    fn full_grid_gives_1600_crops() {
        let p = profile("iphone6s").unwrap();
        let e = emage_from(p.emage.width, p.emage.height, vec![0.5; p.emage.area()]);
        let crops = grid_crop(&e, 40, 40, 21, 31).unwrap();
        assert_eq!(crops.len(), 1600);
        assert!(crops.iter().all(|c| c.len() == 21 * 31));
    }

    #[test]
    fn session_is_deterministic_and_verifiable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s1 = run_session(a.path(), "s1", &small_cfg(5), None, Exec::Sequential).unwrap();
        let s2 = run_session(b.path(), "s1", &small_cfg(5), None, Exec::Parallel).unwrap();
        assert_eq!(s1.items.len(), 12);
        assert_eq!(s1, s2);
        s1.verify(a.path()).unwrap();
        let m1 = fs::read(manifest_path(a.path(), "s1")).unwrap();
        assert_eq!(m1, fs::read(manifest_path(b.path(), "s1")).unwrap());
        for item in &s1.items {
            assert_eq!(
                fs::read(a.path().join(&item.path)).unwrap(),
                fs::read(b.path().join(&item.path)).unwrap()
            );
        }
        let text = String::from_utf8(m1).unwrap();
        assert_eq!(Session::from_json(&text).unwrap().to_json().unwrap(), text);
        assert_eq!(Session::load(a.path(), "s1").unwrap(), s1);
        assert_eq!(list_sessions(a.path()).unwrap(), ["s1"]);
    }

    #[test]
    fn single_cell_session() {
        let d = tempfile::tempdir().unwrap();
        let cfg = SessionConfig {
            rows: 1,
            cols: 1,
            screens: 1,
            ..small_cfg(1)
        };
        let s = run_session(d.path(), "one", &cfg, Some(&['7']), Exec::Sequential).unwrap();
        assert_eq!(s.items.len(), 1);
        assert_eq!(s.items[0].label, "7");
        assert!(run_session(d.path(), "bad", &cfg, Some(&['7', '8']), Exec::Sequential).is_err());
        let unknown = SessionConfig::new("pixel", 1);
        assert!(matches!(
            run_session(d.path(), "x", &unknown, None, Exec::Sequential),
            Err(Error::UnknownProfile { .. })
        ));
        assert!(run_session(d.path(), "../x", &cfg, None, Exec::Sequential).is_err());
    }

    #[test]
    fn code_session_crops_the_message_row() {
        let d = tempfile::tempdir().unwrap();
        let cfg = SessionConfig {
            screens: 2,
            snr_db: Some(None),
            vary: false,
            keep_emages: true,
            ..SessionConfig::new("iphone6s", 4)
        };
        let s = run_code_session(d.path(), "codes", &cfg, Exec::Sequential).unwrap();
        assert_eq!(s.kind, SessionKind::Code);
        assert_eq!(s.items.len(), 2);
        assert_eq!((s.items[0].w, s.items[0].h), (126, 31));
        assert_eq!(s.emages.len(), 2);
        s.verify(d.path()).unwrap();
    }

    fn fake_session(id: &str, n: usize, flagged: bool) -> Session {
        Session {
            id: id.into(),
            kind: SessionKind::Grid,
            phone_profile: "iphone6s".into(),
            seed: 0,
            conditions: SessionConditions::nominal(&profile("iphone6s").unwrap()),
            f_r_hz: 60.0,
            rows: 1,
            cols: n,
            screens: 1,
            quality: SessionQuality {
                mean_crop_range: if flagged { 0.1 } else { 0.9 },
                flagged,
            },
            emages: Vec::new(),
            items: (0..n)
                .map(|i| SessionItem {
                    path: format!("sessions/{id}/items/s000_r00_c{i:02}.pgm"),
                    label: DIGITS[i % 10].to_string(),
                    screen: 0,
                    row: 0,
                    col: i,
                    x: 0,
                    y: 0,
                    w: 21,
                    h: 31,
                })
                .collect(),
        }
    }

    #[test]
    fn nested_training_sets_share_the_test_pair() {
        let mut sessions: Vec<Session> = (0..10).map(|i| fake_session(&format!("s{i}"), 40, false)).collect();
        sessions[3].quality.flagged = true;
        let plans = build_training_sets(&sessions, &DEFAULT_SCHEDULE, 2, 7).unwrap();
        assert_eq!(plans.len(), 4);
        for w in plans.windows(2) {
            let a: BTreeSet<_> = w[0].train_sessions.iter().collect();
            let b: BTreeSet<_> = w[1].train_sessions.iter().collect();
            assert!(a.is_subset(&b) && a.len() < b.len());
            assert_eq!(w[0].test, w[1].test);
        }
        assert_eq!(plans[0].test_sessions, ["s8", "s9"]);
        assert!(plans.iter().all(|p| !p.train_sessions.contains(&"s3".to_string())));
        assert_eq!(
            plans.iter().map(|p| p.train_sessions.len()).collect::<Vec<_>>(),
            [1, 3, 5, 7]
        );
        let p = &plans[3];
        assert_eq!(p.train.len() + p.val.len() + p.test_internal.len(), 7 * 40);
        assert_eq!(p.train.len(), 224);
        let r = build_training_sets(&sessions[..8], &DEFAULT_SCHEDULE, 2, 7);
        assert!(matches!(r, Err(Error::InsufficientSessions { needed: 9, have: 7 })));
        let single = build_training_sets(&sessions[..3], &[1], 2, 7).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn split_files_roundtrip() {
        let d = tempfile::tempdir().unwrap();
        let sessions: Vec<Session> = (0..3).map(|i| fake_session(&format!("s{i}"), 20, false)).collect();
        let plan = fraction_plan("all", &sessions, DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((plan.train.len(), plan.val.len(), plan.test_internal.len()), (48, 6, 6));
        plan.write(d.path()).unwrap();
        assert_eq!(SplitPlan::read(d.path(), "all").unwrap(), plan);
        let listed = fs::read_to_string(SplitPlan::dir(d.path(), "all").join("val.txt")).unwrap();
        assert_eq!(listed.lines().count(), 6);
        let mut bad = plan.clone();
        bad.fractions = [0.5, 0.1, 0.1];
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn splits_never_leak(n in 1usize..300, seed in any::<u64>(), sessions in 3usize..6) {
            let all: Vec<Session> = (0..sessions).map(|i| fake_session(&format!("p{i}"), n, false)).collect();
            let plans = build_training_sets(&all, &[1, sessions - 2], 2, seed).unwrap();
            for p in &plans {
                let mut seen = BTreeSet::new();
                for i in p.train.iter().chain(&p.val).chain(&p.test_internal).chain(&p.test) {
                    prop_assert!(seen.insert(i.path.clone()));
                }
            }
            let (a, b, c) = fraction_split(&all[0].items.iter().map(ItemRef::from).collect::<Vec<_>>(), DEFAULT_FRACTIONS, seed);
            prop_assert_eq!(a.len() + b.len() + c.len(), n);
        }

        #[test]
        fn manifest_rows_roundtrip(label in "[0-9]{1,6}", x in 0usize..2000, w in 1usize..200) {
            let item = SessionItem { path: format!("sessions/a/items/{x}.pgm"), label, screen: 1, row: 2, col: 3, x, y: x / 2, w, h: 31 };
            let text = serde_json::to_string(&item).unwrap();
            let back: SessionItem = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
        }
    }
}
