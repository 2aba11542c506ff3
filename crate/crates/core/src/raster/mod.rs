//! Ground-truth screen content: digit grids, push-message security codes and
//! eye-chart letters rendered as luminance rasters with labeled regions.
//!
//! All geometry uses integer arithmetic rounding toward zero, so identical
//! inputs always give bit-identical rasters.

mod glyphs;

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use glyphs::{Glyph, GlyphSet};

use crate::error::{Error, Result};
use crate::pgm::GrayImage;

/// Eye-chart letter set.
pub const LETTERS: [char; 10] = ['C', 'D', 'E', 'F', 'L', 'N', 'O', 'P', 'T', 'Z'];

/// Digits used by grids and security codes.
pub const DIGITS: [char; 10] = ['0', '1', '2', '3', '4', '5', '6', '7', '8', '9'];

pub const CODE_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dimensions {
    pub width: usize,
    pub height: usize,
}

impl Dimensions {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

impl fmt::Display for Dimensions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Pixel rectangle carrying a ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRegion {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub label: String,
}

impl LabeledRegion {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn overlaps(&self, other: &LabeledRegion) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenRaster {
    pub width: usize,
    pub height: usize,
    /// Row-major, values in `[0, 1]`.
    pub luminance: Vec<f32>,
    pub annotations: Vec<LabeledRegion>,
}

impl ScreenRaster {
    pub fn filled(dims: Dimensions, value: f32) -> Self {
        Self {
            width: dims.width,
            height: dims.height,
            luminance: vec![value; dims.area()],
            annotations: Vec::new(),
        }
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions::new(self.width, self.height)
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.luminance[y * self.width + x]
    }

    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, value: f32) {
        for row in y..(y + h).min(self.height) {
            let start = row * self.width + x.min(self.width);
            let end = row * self.width + (x + w).min(self.width);
            self.luminance[start..end].fill(value);
        }
    }

    /// Copies the pixels of a rectangle, row-major.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(w * h);
        for row in y..y + h {
            out.extend_from_slice(&self.luminance[row * self.width + x..row * self.width + x + w]);
        }
        out
    }

    /// Places this raster at the top-left of a larger canvas.
    pub fn pad_to(&self, dims: Dimensions, fill: f32) -> Result<ScreenRaster> {
        if dims.width < self.width || dims.height < self.height {
            return Err(Error::Dimension(format!(
                "cannot pad {} into {}",
                self.dims(),
                dims
            )));
        }
        let mut out = ScreenRaster::filled(dims, fill);
        for y in 0..self.height {
            out.luminance[y * dims.width..y * dims.width + self.width]
                .copy_from_slice(&self.luminance[y * self.width..(y + 1) * self.width]);
        }
        out.annotations = self.annotations.clone();
        Ok(out)
    }

    /// Checks the size, value-range and annotation invariants.
    pub fn validate(&self) -> Result<()> {
        if self.luminance.len() != self.width * self.height {
            return Err(Error::Dimension(format!(
                "luminance has {} values for a {}x{} raster",
                self.luminance.len(),
                self.width,
                self.height
            )));
        }
        if let Some(v) = self.luminance.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("luminance {v} outside [0,1]")));
        }
        for r in &self.annotations {
            if r.w == 0 || r.h == 0 || r.x + r.w > self.width || r.y + r.h > self.height {
                return Err(Error::Dimension(format!(
                    "region {:?} outside {}x{} raster",
                    r, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_unit(self.width, self.height, &self.luminance)
            .expect("raster size invariant")
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            luminance: img.to_unit(),
            annotations: Vec::new(),
        }
    }

    /// Writes `path` as PGM and the annotations as `<path>.json`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray().write(path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_vec_pretty(&self.annotations)?;
        fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    /// Reads a PGM and, when present, its annotation sidecar.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut raster = Self::from_gray(&GrayImage::read(path)?);
        let side = sidecar_path(path);
        if side.exists() {
            let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
            raster.annotations = serde_json::from_slice(&bytes)?;
        }
        raster.validate()?;
        Ok(raster)
    }
}

/// `foo.pgm` -> `foo.pgm.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Eye-chart scale, stored in tenths so that equality is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scale(u16);

impl Scale {
    pub const ALL: [Scale; 11] = [
        Scale(10),
        Scale(12),
        Scale(15),
        Scale(20),
        Scale(25),
        Scale(30),
        Scale(40),
        Scale(50),
        Scale(70),
        Scale(100),
        Scale(200),
    ];

    pub fn from_f64(v: f64) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|s| (s.value() - v).abs() < 1e-9)
            .ok_or(Error::UnknownScale(v))
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 10.0
    }

    pub fn tenths(self) -> u16 {
        self.0
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl Serialize for Scale {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Scale {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Scale::from_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Side of the square letter box at `scale`: the scale-20 letter leaves a
/// margin of 10% of its width on each side, smaller scales are
/// proportional.
pub fn letter_width(screen_width: usize, scale: Scale) -> usize {
    let widest = screen_width * 5 / 6;
    widest * usize::from(scale.tenths()) / 200
}

/// Geometry of the push-message mock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageLayout {
    pub cell: Dimensions,
    pub code_x: usize,
    pub code_y: usize,
    pub banner: (usize, usize, usize, usize),
}

impl MessageLayout {
    /// Code row at one third of the screen height, snapped down to the cell
    /// grid; horizontally centred and snapped to the cell grid.
    pub fn for_screen(screen: Dimensions, cell: Dimensions) -> Result<Self> {
        let code_w = CODE_LEN * cell.width;
        if cell.width == 0 || cell.height == 0 || code_w + 2 * cell.width > screen.width {
            return Err(Error::Dimension(format!(
                "cell {cell} does not fit a {CODE_LEN}-digit code on {screen}"
            )));
        }
        let code_x = (screen.width - code_w) / 2 / cell.width * cell.width;
        let code_y = screen.height / 3 / cell.height * cell.height;
        if code_y < cell.height || code_y + 2 * cell.height > screen.height {
            return Err(Error::Dimension(format!("screen {screen} too short for a message")));
        }
        let banner = (
            cell.width,
            code_y - cell.height,
            screen.width - 2 * cell.width,
            3 * cell.height,
        );
        Ok(Self {
            cell,
            code_x,
            code_y,
            banner,
        })
    }

    pub fn code_region(&self) -> (usize, usize, usize, usize) {
        (
            self.code_x,
            self.code_y,
            CODE_LEN * self.cell.width,
            self.cell.height,
        )
    }
}

/// Renders glyph content with a configurable contrast.
#[derive(Debug, Clone)]
pub struct Renderer {
    pub digits: GlyphSet,
    pub letters: GlyphSet,
    /// Background luminance minus ink luminance; 1 is black on white.
    pub contrast: f32,
    /// Luminance of the push-message banner; the plain background by default.
    pub banner_luminance: f32,
}

impl Default for Renderer {
    fn default() -> Self {
        Self {
            digits: GlyphSet::digits(),
            letters: GlyphSet::sloan(),
            contrast: 1.0,
            banner_luminance: BACKGROUND,
        }
    }
}

const BACKGROUND: f32 = 1.0;

impl Renderer {
    pub fn with_contrast(contrast: f32) -> Self {
        Self {
            contrast,
            ..Self::default()
        }
    }

    fn ink(&self, background: f32) -> f32 {
        (background - self.contrast).clamp(0.0, 1.0)
    }

    fn digit_glyph(&self, symbol: char) -> Result<&Glyph> {
        self.digits
            .get(symbol)
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    /// Paints one digit cell: background fill plus the glyph scaled into the
    /// cell with a one-sixth margin on every side.
    pub fn paint_digit_cell(
        &self,
        raster: &mut ScreenRaster,
        symbol: char,
        x: usize,
        y: usize,
        cell: Dimensions,
        background: f32,
    ) -> Result<()> {
        let glyph = self.digit_glyph(symbol)?;
        raster.fill_rect(x, y, cell.width, cell.height, background);
        let mx = cell.width / 6;
        let my = cell.height / 6;
        let gw = cell.width - 2 * mx;
        let gh = cell.height - 2 * my;
        let ink = self.ink(background);
        paint_glyph(raster, glyph, x + mx, y + my, gw, gh, ink);
        Ok(())
    }

    /// Tiles a `rows x cols` grid of equal cells over `screen`, one digit per
    /// cell, row-major. Leftover pixels stay at the right and bottom.
    pub fn digit_grid(
        &self,
        rows: usize,
        cols: usize,
        digits: &[char],
        screen: Dimensions,
    ) -> Result<ScreenRaster> {
        if rows * cols != digits.len() {
            return Err(Error::CountMismatch {
                expected: rows * cols,
                actual: digits.len(),
            });
        }
        if let Some(bad) = digits.iter().find(|d| !d.is_ascii_digit()) {
            return Err(Error::UnknownSymbol(bad.to_string()));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter("grid needs at least one cell".into()));
        }
        let cell = Dimensions::new(screen.width / cols, screen.height / rows);
        if cell.width == 0 || cell.height == 0 {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} grid does not fit on {screen}"
            )));
        }
        let mut raster = ScreenRaster::filled(screen, BACKGROUND);
        for r in 0..rows {
            for c in 0..cols {
                let d = digits[r * cols + c];
                let (x, y) = (c * cell.width, r * cell.height);
                self.paint_digit_cell(&mut raster, d, x, y, cell, BACKGROUND)?;
                raster.annotations.push(LabeledRegion {
                    x,
                    y,
                    w: cell.width,
                    h: cell.height,
                    label: d.to_string(),
                });
            }
        }
        Ok(raster)
    }

    /// Six-digit code on a plain background with its top-left cell at
    /// `(x, y)`.
    pub fn code_at(
        &self,
        code: &str,
        screen: Dimensions,
        cell: Dimensions,
        x: usize,
        y: usize,
    ) -> Result<ScreenRaster> {
        let mut raster = ScreenRaster::filled(screen, BACKGROUND);
        self.paint_code(&mut raster, code, cell, x, y, BACKGROUND)?;
        Ok(raster)
    }

    fn paint_code(
        &self,
        raster: &mut ScreenRaster,
        code: &str,
        cell: Dimensions,
        x: usize,
        y: usize,
        background: f32,
    ) -> Result<()> {
        let symbols: Vec<char> = code.chars().collect();
        if symbols.len() != CODE_LEN {
            return Err(Error::CountMismatch {
                expected: CODE_LEN,
                actual: symbols.len(),
            });
        }
        if x + CODE_LEN * cell.width > raster.width || y + cell.height > raster.height {
            return Err(Error::Dimension(format!(
                "code at ({x},{y}) with cell {cell} leaves the {}x{} screen",
                raster.width, raster.height
            )));
        }
        for (i, &s) in symbols.iter().enumerate() {
            self.paint_digit_cell(raster, s, x + i * cell.width, y, cell, background)?;
        }
        raster.annotations.push(LabeledRegion {
            x,
            y,
            w: CODE_LEN * cell.width,
            h: cell.height,
            label: code.to_string(),
        });
        Ok(())
    }

    /// Push-message mock: one message row on the banner, the code drawn with
    /// the digit-grid cell size.
    pub fn security_message(
        &self,
        code: &str,
        screen: Dimensions,
        cell: Dimensions,
    ) -> Result<ScreenRaster> {
        let layout = MessageLayout::for_screen(screen, cell)?;
        let mut raster = ScreenRaster::filled(screen, BACKGROUND);
        let (bx, by, bw, bh) = layout.banner;
        raster.fill_rect(bx, by, bw, bh, self.banner_luminance);
        self.paint_code(
            &mut raster,
            code,
            cell,
            layout.code_x,
            layout.code_y,
            self.banner_luminance,
        )?;
        Ok(raster)
    }

    /// One Sloan letter, centred, at an eye-chart scale.
    pub fn eyechart(&self, letter: char, scale: Scale, screen: Dimensions) -> Result<ScreenRaster> {
        let glyph = self
            .letters
            .get(letter)
            .ok_or_else(|| Error::UnknownSymbol(letter.to_string()))?;
        let w = letter_width(screen.width, scale);
        if w == 0 || w > screen.height {
            return Err(Error::Dimension(format!(
                "scale {scale} letter does not fit on {screen}"
            )));
        }
        let x0 = (screen.width - w) / 2;
        let y0 = (screen.height - w) / 2;
        let mut raster = ScreenRaster::filled(screen, BACKGROUND);
        paint_glyph(&mut raster, glyph, x0, y0, w, w, self.ink(BACKGROUND));
        raster.annotations.push(LabeledRegion {
            x: x0,
            y: y0,
            w,
            h: w,
            label: letter.to_string(),
        });
        Ok(raster)
    }
}

fn paint_glyph(
    raster: &mut ScreenRaster,
    glyph: &Glyph,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    ink: f32,
) {
    for y in 0..h {
        let row = (y0 + y) * raster.width + x0;
        for x in 0..w {
            if glyph.sample(x, y, w, h) {
                raster.luminance[row + x] = ink;
            }
        }
    }
}

pub fn render_digit_grid(
    rows: usize,
    cols: usize,
    digits: &[char],
    screen: Dimensions,
) -> Result<ScreenRaster> {
    Renderer::default().digit_grid(rows, cols, digits, screen)
}

pub fn render_security_message(
    code: &str,
    screen: Dimensions,
    cell: Dimensions,
) -> Result<ScreenRaster> {
    Renderer::default().security_message(code, screen, cell)
}

pub fn render_eyechart(letter: char, scale: Scale, screen: Dimensions) -> Result<ScreenRaster> {
    Renderer::default().eyechart(letter, scale, screen)
}
