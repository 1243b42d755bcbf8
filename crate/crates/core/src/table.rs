//! Localization tables: the common currency between localizer, post-processing,
//! metrics and rendering.

/// One localization: position in nm, photon count, detection probability and
/// per-axis uncertainties in nm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocRecord {
    pub frame: u32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub photons: f64,
    pub prob: f64,
    pub sig_x: f64,
    pub sig_y: f64,
    pub sig_z: f64,
}

impl LocRecord {
    /// Combined uncertainty `sqrt(sx^2 + sy^2 + sz^2)` used for binning and
    /// filtering.
    pub fn var_tot(&self) -> f64 {
        (self.sig_x * self.sig_x + self.sig_y * self.sig_y + self.sig_z * self.sig_z).sqrt()
    }
}

/// A list of localizations, kept sorted by frame by the producing operations.
pub type LocalizationTable = Vec<LocRecord>;

/// One ground-truth emission: emitter id plus position and photons for one
/// active frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    pub frame: u32,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub photons: f64,
}

impl TruthRecord {
    /// View a truth record as a localization row (probability 1, zero sigma).
    pub fn to_loc(&self) -> LocRecord {
        LocRecord {
            frame: self.frame,
            x: self.x,
            y: self.y,
            z: self.z,
            photons: self.photons,
            prob: 1.0,
            sig_x: 0.0,
            sig_y: 0.0,
            sig_z: 0.0,
        }
    }
}

/// Convert a truth table into a localization table.
pub fn truth_to_locs(truth: &[TruthRecord]) -> LocalizationTable {
    truth.iter().map(TruthRecord::to_loc).collect()
}
