//! Transfer evaluation: per-image records, targeted success and transfer
//! rates, parameter sweeps, the translation demo, and result export.

mod bench;
mod demo;
mod export;

pub use bench::{
    c_grid, c_sweep, eligible_indices, layer_sweep, rank_sweep, run_point, sweep, Axis, Bench, ConstraintAudit,
    PointOutcome, SummaryRow, SweepResult, SweepRow, WhiteRow,
};
pub use demo::{hflip, translation_demo, LossDistances, TranslationReport};
pub use export::{read_json, write_csv, write_json, ExportFormat, CSV_COLUMNS};

use serde::{Deserialize, Serialize};

use crate::attack::LossKind;
use crate::error::{Error, Result};

/// Outcome of one adversarial example evaluated on one black-box model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub image_id: u64,
    pub y: usize,
    pub y_tgt: usize,
    pub white_box: String,
    pub black_box: String,
    pub white_success: bool,
    pub black_success: bool,
    pub loss: LossKind,
    pub tap: usize,
    pub config_hash: String,
}

/// Percentage of records whose black-box prediction is the target label.
pub fn eval_tsuc(records: &[TransferRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptySet);
    }
    let hits = records.iter().filter(|r| r.black_success).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Percentage of white-box successes that also fool the black box, or `None`
/// when nothing fooled the white box.
pub fn eval_ttr(records: &[TransferRecord]) -> Option<f64> {
    let white = records.iter().filter(|r| r.white_success).count();
    if white == 0 {
        return None;
    }
    let both = records.iter().filter(|r| r.white_success && r.black_success).count();
    Some(100.0 * both as f64 / white as f64)
}

/// Stable 16-hex-digit FNV-1a digest of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}
