use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{LabelMap, RawLabels, Volume, TUMOR};

/// Min-max rescale to `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (lo, hi) = v
        .grid
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let grid = if range > 0.0 {
        v.grid.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
    } else {
        v.grid.map(|_| 0.0)
    };
    Volume { grid, ..v.clone() }
}

/// Maps raw integer labels onto {0, 1, 2}. Every value present must have an
/// entry in `mapping`.
pub fn map_labels(raw: &RawLabels, mapping: &BTreeMap<i64, u8>) -> Result<LabelMap> {
    if let Some((k, v)) = mapping.iter().find(|(_, v)| **v > TUMOR) {
        return Err(Error::Invalid(format!("mapping sends {k} to {v}, outside {{0, 1, 2}}")));
    }
    let data = raw
        .data
        .iter()
        .map(|v| mapping.get(v).copied().ok_or(Error::UnmappedLabel(*v)))
        .collect::<Result<Vec<u8>>>()?;
    let mut l = LabelMap::new(raw.dims, data)?;
    l.spacing = raw.spacing;
    l.origin = raw.origin;
    l.orientation = raw.orientation;
    Ok(l)
}
