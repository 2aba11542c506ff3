//! Security-code attack: six-digit reading, partial-code scoring and
//! sliding-window localisation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, softmax, CnnModel};
use crate::dataset::{Session, SessionKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pgm::GrayImage;
use crate::raster::{CODE_LEN, DIGITS};
use crate::receiver::Emage;

/// Column ranges of the six digit crops of a `width`-wide code region. The
/// last crop absorbs the remainder.
pub fn digit_columns(width: usize) -> [(usize, usize); CODE_LEN] {
    let w = width / CODE_LEN;
    std::array::from_fn(|i| {
        let extra = if i + 1 == CODE_LEN { width % CODE_LEN } else { 0 };
        (i * w, w + extra)
    })
}

/// Pixels of the `w x h` sub-rectangle at `(x, y)` of a row-major image.
fn sub_image(values: &[f32], stride: usize, x: usize, y: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(w * h);
    for r in y..y + h {
        out.extend_from_slice(&values[r * stride + x..r * stride + x + w]);
    }
    out
}

fn classify_digit(model: &CnnModel<f32>, crop: &[f32]) -> Result<char> {
    let (label, _) = model.predict(crop)?;
    DIGITS
        .get(label)
        .copied()
        .ok_or_else(|| Error::InvalidParameter(format!("model class {label} is not a digit")))
}

/// Reads a `w x h` code crop (row-major). Each digit crop must be at least as
/// wide as the model input; the classifier sees its leftmost `input_w`
/// columns and rows.
pub fn read_code_crop(values: &[f32], w: usize, h: usize, model: &CnnModel<f32>) -> Result<String> {
    if values.len() != w * h {
        return Err(Error::Dimension(format!("{} values for a {w}x{h} crop", values.len())));
    }
    let (mh, mw) = (model.spec.input_h, model.spec.input_w);
    let cols = digit_columns(w);
    if h < mh || cols[0].1 < mw {
        return Err(Error::Dimension(format!(
            "{w}x{h} code region gives digit crops smaller than the {mw}x{mh} model input"
        )));
    }
    cols.iter()
        .map(|&(x, _)| classify_digit(model, &sub_image(values, w, x, 0, mw, mh)))
        .collect()
}

/// Six predicted digits for the code region `(x, y, w, h)` of an emage.
pub fn read_code(emage: &Emage, rect: (usize, usize, usize, usize), model: &CnnModel<f32>) -> Result<String> {
    let (x, y, w, h) = rect;
    let crop = emage.crop(x, y, w, h)?;
    read_code_crop(&crop, w, h, model)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackItem {
    pub true_code: String,
    pub predicted_code: String,
    pub correct: Vec<bool>,
}

impl AttackItem {
    pub fn new(true_code: &str, predicted_code: &str) -> Result<Self> {
        let t: Vec<char> = true_code.chars().collect();
        let p: Vec<char> = predicted_code.chars().collect();
        if t.len() != CODE_LEN || p.len() != CODE_LEN {
            return Err(Error::CountMismatch {
                expected: CODE_LEN,
                actual: if t.len() != CODE_LEN { t.len() } else { p.len() },
            });
        }
        if let Some(bad) = t.iter().find(|c| !c.is_ascii_digit()) {
            return Err(Error::UnknownSymbol(bad.to_string()));
        }
        Ok(Self {
            true_code: true_code.to_string(),
            predicted_code: predicted_code.to_string(),
            correct: t.iter().zip(&p).map(|(a, b)| a == b).collect(),
        })
    }

    pub fn correct_digits(&self) -> usize {
        self.correct.iter().filter(|&&c| c).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub items: Vec<AttackItem>,
    pub digits: usize,
    pub per_digit_accuracy: f64,
    /// Accuracy by true digit class; `None` for classes that never occur.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub exact: f64,
    pub at_least_5: f64,
    pub at_least_4: f64,
}

/// Aggregates per-item results.
pub fn score(items: Vec<AttackItem>) -> Result<AttackReport> {
    if items.is_empty() {
        return Err(Error::InvalidParameter("no attack items to score".into()));
    }
    let n = items.len() as f64;
    let digits = items.len() * CODE_LEN;
    let correct: usize = items.iter().map(AttackItem::correct_digits).sum();
    let mut class_hits = [0usize; 10];
    let mut class_total = [0usize; 10];
    for item in &items {
        for (c, &ok) in item.true_code.chars().zip(&item.correct) {
            let k = c as usize - '0' as usize;
            class_total[k] += 1;
            class_hits[k] += usize::from(ok);
        }
    }
    let frac = |min: usize| items.iter().filter(|i| i.correct_digits() >= min).count() as f64 / n;
    Ok(AttackReport {
        digits,
        per_digit_accuracy: correct as f64 / digits as f64,
        per_class_accuracy: (0..10)
            .map(|k| (class_total[k] > 0).then(|| class_hits[k] as f64 / class_total[k] as f64))
            .collect(),
        exact: frac(CODE_LEN),
        at_least_5: frac(CODE_LEN - 1),
        at_least_4: frac(CODE_LEN - 2),
        items,
    })
}

impl AttackReport {
    /// One row per item: `true_code,predicted_code,correct_digits`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true_code,predicted_code,correct_digits\n");
        for i in &self.items {
            let _ = writeln!(out, "{},{},{}", i.true_code, i.predicted_code, i.correct_digits());
        }
        out
    }

    /// Writes `path` as JSON and the CSV next to it with a `.csv` extension.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Reads every code crop of a code session.
pub fn attack_session(root: &Path, session: &Session, model: &CnnModel<f32>, exec: Exec) -> Result<AttackReport> {
    if session.kind != SessionKind::Code {
        return Err(Error::InvalidParameter(format!("session {} holds no codes", session.id)));
    }
    let items = exec.map(&session.items, |item| {
        let img = GrayImage::read(root.join(&item.path))?;
        let predicted = read_code_crop(&img.to_unit(), img.width, img.height, model)?;
        AttackItem::new(&item.label, &predicted)
    });
    score(items.into_iter().collect::<Result<_>>()?)
}

/// Synthetic items whose digits are independently correct with
/// probability `p`.
pub fn synthetic_items(p: f64, n: usize, seed: u64) -> Vec<AttackItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let truth: String = (0..CODE_LEN).map(|_| DIGITS[rng.random_range(0..10)]).collect();
            let predicted: String = truth
                .chars()
                .map(|c| {
                    if rng.random_bool(p) {
                        c
                    } else {
                        let k = c as usize - '0' as usize;
                        DIGITS[(k + rng.random_range(1..10)) % 10]
                    }
                })
                .collect();
            AttackItem::new(&truth, &predicted).expect("six digits")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub rows: usize,
    pub cols: usize,
    pub window_w: usize,
    pub window_h: usize,
    pub stride_x: usize,
    pub stride_y: usize,
    /// Row-major, `rows * cols`.
    pub scores: Vec<f64>,
}

impl ActivationMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols + col]
    }

    /// `(row, col)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let i = argmax(&self.scores);
        (i / self.cols, i % self.cols)
    }

    /// Top-left emage pixel of a window.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (col * self.stride_x, row * self.stride_y)
    }

    pub fn to_gray(&self) -> GrayImage {
        let lo = self.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let unit: Vec<f32> = self.scores.iter().map(|s| ((s - lo) / span) as f32).collect();
        GrayImage::from_unit(self.cols, self.rows, &unit).expect("map size invariant")
    }

    /// Heat image at `path` and the JSON grid at `<path>.json`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray().write(path)?;
        let side = crate::raster::sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(side, e))
    }
}

/// Normalised softmax entropy in `[0, 1]`.
fn normalized_entropy(logits: &[f32]) -> f64 {
    let p = softmax(logits);
    let h: f64 = p
        .iter()
        .map(|&v| f64::from(v))
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.ln())
        .sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Code-likeness of every window of six digit cells. The window is
/// `6 * digit_w x digit_h`; the horizontal stride is the digit width and the
/// vertical stride the digit height. A window scores `1 - mean normalised
/// entropy` of its six digit predictions; each digit cell is classified once.
pub fn sliding_map(
    emage: &Emage,
    model: &CnnModel<f32>,
    digit_w: usize,
    digit_h: usize,
    exec: Exec,
) -> Result<ActivationMap> {
    let (window_w, window_h) = (CODE_LEN * digit_w, digit_h);
    if digit_w == 0 || digit_h == 0 || window_w > emage.width || window_h > emage.height {
        return Err(Error::Dimension(format!(
            "{window_w}x{window_h} window does not fit a {}x{} emage",
            emage.width, emage.height
        )));
    }
    let (mh, mw) = (model.spec.input_h, model.spec.input_w);
    if digit_h < mh || digit_w < mw {
        return Err(Error::Dimension(format!(
            "{digit_w}x{digit_h} digit cells are smaller than the {mw}x{mh} model input"
        )));
    }
    let cell_cols = emage.width / digit_w;
    let rows = (emage.height - window_h) / digit_h + 1;
    let cols = (emage.width - window_w) / digit_w + 1;
    let entropies = exec.map_range(rows * cell_cols, |i| -> Result<f64> {
        let (r, c) = (i / cell_cols, i % cell_cols);
        let crop = sub_image(&emage.pixels, emage.width, c * digit_w, r * digit_h, mw, mh);
        Ok(normalized_entropy(&model.logits(&crop)?))
    });
    let entropies: Vec<f64> = entropies.into_iter().collect::<Result<_>>()?;
    let scores = (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let row = &entropies[r * cell_cols + c..r * cell_cols + c + CODE_LEN];
            1.0 - row.iter().sum::<f64>() / CODE_LEN as f64
        })
        .collect();
    Ok(ActivationMap {
        rows,
        cols,
        window_w,
        window_h,
        stride_x: digit_w,
        stride_y: digit_h,
        scores,
    })
}
