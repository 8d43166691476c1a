use serde::{Deserialize, Serialize};

use super::probe::LinearProbe;
use crate::data::{apply_corruption, AugmentationFamily, CorruptionSpec, Dataset, RngStream};
use crate::error::{Error, Result};
use crate::model::Model;

const GRID_DOMAIN: u64 = 0x4752_4944; // "GRID"

/// Probe accuracy (percent) per corruption family and severity, plus the
/// clean accuracy. Rows follow [`AugmentationFamily::CORRUPTIONS`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessGrid {
    pub clean: f64,
    pub cells: Vec<[f64; 5]>,
}

impl RobustnessGrid {
    pub fn cell(&self, family: AugmentationFamily, severity: u8) -> Option<f64> {
        let row = AugmentationFamily::CORRUPTIONS.iter().position(|&f| f == family)?;
        self.cells.get(row)?.get(severity.checked_sub(1)? as usize).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,clean,s1,s2,s3,s4,s5\n");
        for (f, row) in AugmentationFamily::CORRUPTIONS.iter().zip(&self.cells) {
            out.push_str(&format!("{},{:.6}", f.name(), self.clean));
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty grid CSV".into()))?;
        if header.trim() != "family,clean,s1,s2,s3,s4,s5" {
            return Err(Error::InvalidArgument(format!("unexpected grid header {header:?}")));
        }
        let mut clean = None;
        let mut cells = Vec::new();
        for (expected, line) in AugmentationFamily::CORRUPTIONS.iter().zip(lines.by_ref()) {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 7 || fields[0] != expected.name() {
                return Err(Error::InvalidArgument(format!("bad grid row {line:?}")));
            }
            let nums = fields[1..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            clean.get_or_insert(nums[0]);
            cells.push([nums[1], nums[2], nums[3], nums[4], nums[5]]);
        }
        if cells.len() != AugmentationFamily::CORRUPTIONS.len() || lines.next().is_some() {
            return Err(Error::InvalidArgument("grid CSV must have exactly 9 family rows".into()));
        }
        Ok(RobustnessGrid {
            clean: clean.unwrap_or(0.0),
            cells,
        })
    }

    /// Signed per-cell `other − self`.
    pub fn diff(&self, other: &RobustnessGrid) -> RobustnessGrid {
        RobustnessGrid {
            clean: other.clean - self.clean,
            cells: self
                .cells
                .iter()
                .zip(&other.cells)
                .map(|(a, b)| std::array::from_fn(|i| b[i] - a[i]))
                .collect(),
        }
    }
}

/// Accuracy of a clean-trained probe on every (family, severity) cell of the
/// test set. Each image's corruption stream is keyed by
/// `(seed, family, severity, index)`.
pub fn corruption_grid(model: &Model, probe: &LinearProbe, test: &Dataset, seed: u64, batch: usize) -> Result<RobustnessGrid> {
    let labels = test.labels();
    let clean = probe.accuracy(&model.features(&test.images, batch)?, labels)?;
    let mut cells = Vec::with_capacity(AugmentationFamily::CORRUPTIONS.len());
    for family in AugmentationFamily::CORRUPTIONS {
        let mut row = [0.0; 5];
        for s in 1..=5u8 {
            let spec = CorruptionSpec::new(family, s)?;
            let corrupted: Vec<_> = test
                .images
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let key = [GRID_DOMAIN, seed, family.id() as u64, s as u64, i as u64];
                    apply_corruption(img, spec, &mut RngStream::from_key(&key))
                })
                .collect();
            row[s as usize - 1] = probe.accuracy(&model.features(&corrupted, batch)?, labels)?;
        }
        cells.push(row);
    }
    Ok(RobustnessGrid { clean, cells })
}
