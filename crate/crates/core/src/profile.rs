//! Built-in phone profiles.
//!
//! Each profile fixes the display timing, the emage grid used for
//! reconstruction, the default channel SNR and the digit-cell geometry.
//! Horizontal blanking is chosen so that the emage width is an integer
//! multiple of whole digit crops: a screen cell of `cell.width` pixels maps
//! to exactly `crop.width` emage columns. Emage rows are scan lines, so the
//! emage height equals `y_t`.

use serde::Serialize;

use crate::emanator::{DisplayTiming, Frontend, LeakageModel};
use crate::error::{Error, Result};
use crate::raster::Dimensions;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhoneProfile {
    pub name: &'static str,
    pub timing: DisplayTiming,
    /// Reconstruction grid, blanking included.
    pub emage: Dimensions,
    pub snr_db: f64,
    /// Digit crop in the emage; `None` where no crop size is published.
    pub crop: Option<Dimensions>,
    /// Digit cell on the screen for grid and message rendering.
    pub cell: Dimensions,
    pub leak: LeakageModel,
    /// Centre frequency of the observed leak on the physical device.
    pub reported_leak_hz: f64,
}

pub const GRID_ROWS: usize = 40;
pub const GRID_COLS: usize = 40;

impl PhoneProfile {
    pub fn carrier_hz(&self) -> f64 {
        self.leak.carrier_hz(&self.timing)
    }

    /// Front end tuned to the simulated carrier.
    pub fn frontend(&self) -> Frontend {
        Frontend::tuned(self.carrier_hz())
    }

    /// Emage columns per screen pixel.
    pub fn h_scale(&self) -> f64 {
        self.emage.width as f64 / self.timing.x_t as f64
    }

    /// Digit crop size, falling back to the scaled screen cell.
    pub fn crop_or_cell(&self) -> Dimensions {
        self.crop.unwrap_or_else(|| {
            Dimensions::new(
                self.cell.width * self.emage.width / self.timing.x_t,
                self.cell.height,
            )
        })
    }

    /// Screen area covered by a `rows x cols` digit grid.
    pub fn grid_area(&self, rows: usize, cols: usize) -> Dimensions {
        Dimensions::new(cols * self.cell.width, rows * self.cell.height)
    }

    /// Maps a screen rectangle to the emage grid.
    pub fn screen_to_emage(
        &self,
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    ) -> (usize, usize, usize, usize) {
        let s = |v: usize| v * self.emage.width / self.timing.x_t;
        (s(x), y, s(x + w) - s(x), h)
    }
}

fn timing(visible_w: usize, visible_h: usize, x_t: usize) -> DisplayTiming {
    DisplayTiming {
        x_t,
        ..DisplayTiming::with_default_blanking(visible_w, visible_h, 60.0)
    }
}

pub fn profile_registry() -> Vec<PhoneProfile> {
    let iphone6 = |name, snr_db, emage_w, crop_w, leak_hz| PhoneProfile {
        name,
        timing: timing(750, 1334, 828),
        emage: Dimensions::new(emage_w, 1415),
        snr_db,
        crop: Some(Dimensions::new(crop_w, 31)),
        cell: Dimensions::new(18, 31),
        leak: LeakageModel::default(),
        reported_leak_hz: leak_hz,
    };
    vec![
        iphone6("iphone6s", 33.4, 966, 21, 295e6),
        iphone6("iphone6a", 25.0, 920, 20, 105e6),
        iphone6("iphone6b", 26.8, 920, 20, 105e6),
        PhoneProfile {
            name: "honor6x",
            timing: timing(1080, 1920, 1188),
            emage: Dimensions::new(924, 2036),
            snr_db: 36.6,
            crop: Some(Dimensions::new(21, 45)),
            cell: Dimensions::new(27, 45),
            leak: LeakageModel::default(),
            reported_leak_hz: 465e6,
        },
        PhoneProfile {
            name: "galaxy_a3",
            timing: timing(540, 960, 594),
            emage: Dimensions::new(594, 1018),
            snr_db: 25.9,
            crop: None,
            cell: Dimensions::new(13, 24),
            leak: LeakageModel::default(),
            reported_leak_hz: 295e6,
        },
    ]
}

pub fn profile(name: &str) -> Result<PhoneProfile> {
    let all = profile_registry();
    let names = all.iter().map(|p| p.name.to_string()).collect();
    all.into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownProfile {
            name: name.to_string(),
            available: names,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_values() {
        let h = profile("honor6x").unwrap();
        assert_eq!(h.snr_db, 36.6);
        assert_eq!(h.crop, Some(Dimensions::new(21, 45)));
        let i = profile("iphone6s").unwrap();
        assert_eq!((i.timing.visible_h, i.timing.visible_w), (1334, 750));
        assert_eq!(i.crop, Some(Dimensions::new(21, 31)));
        let snrs: Vec<f64> = profile_registry().iter().map(|p| p.snr_db).collect();
        assert_eq!(snrs, [33.4, 25.0, 26.8, 36.6, 25.9]);
        assert_eq!(profile("iphone6a").unwrap().crop, Some(Dimensions::new(20, 31)));
        assert_eq!(profile("galaxy_a3").unwrap().crop, None);
    }

    #[test]
    fn unknown_profile_lists_all_five() {
        match profile("pixel") {
            Err(Error::UnknownProfile { available, .. }) => {
                assert_eq!(
                    available,
                    ["iphone6s", "iphone6a", "iphone6b", "honor6x", "galaxy_a3"]
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cells_map_to_whole_crops() {
        for p in profile_registry() {
            p.timing.validate().unwrap();
            assert!(p.timing.x_t >= (p.timing.visible_w as f64 * 1.1).ceil() as usize);
            assert_eq!(p.emage.height, p.timing.y_t);
            let crop = p.crop_or_cell();
            assert_eq!(p.cell.width * p.emage.width % p.timing.x_t, 0, "{}", p.name);
            assert_eq!(p.cell.width * p.emage.width / p.timing.x_t, crop.width);
            assert_eq!(p.cell.height, crop.height);
            let g = p.grid_area(GRID_ROWS, GRID_COLS);
            assert!(g.width <= p.timing.visible_w && g.height <= p.timing.visible_h);
            assert!(p.carrier_hz() > 4.0 * p.timing.pixel_clock());
        }
    }

    #[test]
    fn message_code_is_126_by_31_on_iphone6s() {
        let p = profile("iphone6s").unwrap();
        let (_, _, w, h) = p.screen_to_emage(306, 434, 6 * 18, 31);
        assert_eq!((w, h), (126, 31));
    }
}
