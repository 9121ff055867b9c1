//! Tumor-localized cropping into dual-channel patch pairs.
//!
//! The crop is centred on the floor midpoint of the tumor bounding box.
//! Windows are clamped at zero and then shifted down so they fit inside the
//! volume; volumes smaller than the crop are zero-padded at the high end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{LabelMap, Volume, TUMOR};
use crate::volgrid::Grid;

/// Fixed crop extent in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub size: [usize; 3],
}

impl CropSpec {
    pub const PAPER: CropSpec = CropSpec { size: [96, 96, 48] };
    pub const DESK: CropSpec = CropSpec { size: [24, 24, 12] };

    pub fn new(size: [usize; 3]) -> Result<Self> {
        if size.iter().any(|&c| c == 0 || c % 2 != 0) {
            return Err(Error::Invalid(format!("crop size {size:?} must be positive and even")));
        }
        Ok(CropSpec { size })
    }
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec::PAPER
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// Dual-channel image patch and its binary label channels.
///
/// Channel 0 holds the peritumoral (liver or tumor) region, channel 1 the
/// tumor only.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    /// `[2, cx, cy, cz]` intensities.
    pub image: Grid,
    /// `[2, cx, cy, cz]` binary masks.
    pub labels: Grid,
    pub provenance: Provenance,
    pub pni: u8,
}

impl PatchPair {
    pub fn zeros(crop: CropSpec, pni: u8, provenance: Provenance) -> Self {
        let [x, y, z] = crop.size;
        PatchPair {
            image: Grid::zeros(&[2, x, y, z]),
            labels: Grid::zeros(&[2, x, y, z]),
            provenance,
            pni,
        }
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    /// Zeroes image voxels outside their label channel.
    pub fn remask(&mut self) {
        let labels = self.labels.data();
        for (v, m) in self.image.data_mut().iter_mut().zip(labels) {
            if *m == 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Checks shape, binary labels, tumor containment and zero image
    /// outside the masks.
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 4 || s[0] != 2 || self.labels.shape() != s {
            return Err(Error::shape(
                "patch_pair",
                format!("image {:?}, labels {:?}", s, self.labels.shape()),
            ));
        }
        if self.pni > 1 {
            return Err(Error::Invalid(format!("pni {} not in {{0, 1}}", self.pni)));
        }
        let n = self.image.len() / 2;
        let (l, img) = (self.labels.data(), self.image.data());
        for i in 0..n {
            let (a, b) = (l[i], l[n + i]);
            if !(a == 0.0 || a == 1.0) || !(b == 0.0 || b == 1.0) {
                return Err(Error::Invalid(format!("non-binary label at voxel {i}")));
            }
            if b > a {
                return Err(Error::Invalid(format!("tumor outside peritumoral mask at voxel {i}")));
            }
            if (a == 0.0 && img[i] != 0.0) || (b == 0.0 && img[n + i] != 0.0) {
                return Err(Error::Invalid(format!("image nonzero outside mask at voxel {i}")));
            }
        }
        Ok(())
    }
}

/// Half-open bounding box `[min, max)` of tumor voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    /// Floor midpoint per axis.
    pub fn center(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.min[a] + self.max[a]) / 2)
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }
}

pub fn tumor_extent(labels: &LabelMap) -> Option<BoundingBox> {
    let [nx, ny, nz] = labels.dims();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    let data = labels.data();
    for x in 0..nx {
        for y in 0..ny {
            let row = &data[(x * ny + y) * nz..(x * ny + y + 1) * nz];
            for (z, &v) in row.iter().enumerate() {
                if v == TUMOR {
                    any = true;
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        min[a] = min[a].min(c);
                        max[a] = max[a].max(c + 1);
                    }
                }
            }
        }
    }
    any.then_some(BoundingBox { min, max })
}

/// Start and (exclusive) end of the crop window per axis.
///
/// `end - start` is always the crop size; when a volume is smaller than the
/// crop the window starts at 0 and overhangs the volume.
pub fn crop_window(center: [usize; 3], crop: CropSpec, dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut start = [0; 3];
    let mut end = [0; 3];
    for a in 0..3 {
        let half = crop.size[a] / 2;
        let s = center[a].saturating_sub(half);
        let s = s.min(dims[a].saturating_sub(crop.size[a]));
        start[a] = s;
        end[a] = s + crop.size[a];
    }
    (start, end)
}

/// Crops `volume` around the tumor in `labels` into a real-provenance
/// patch, returning the window start when a tumor was found.
pub fn tlcr_crop_located(
    volume: &Volume,
    labels: &LabelMap,
    crop: CropSpec,
    pni: u8,
) -> Result<(PatchPair, Option<[usize; 3]>)> {
    let dims = volume.dims();
    if dims != labels.dims() {
        return Err(Error::shape(
            "tlcr_crop",
            format!("volume {:?} vs labels {:?}", dims, labels.dims()),
        ));
    }
    let mut patch = PatchPair::zeros(crop, pni, Provenance::Real);
    let Some(bbox) = tumor_extent(labels) else {
        return Ok((patch, None));
    };
    let (start, _) = crop_window(bbox.center(), crop, dims);
    let [cx, cy, cz] = crop.size;
    let n = cx * cy * cz;
    let src = volume.grid.data();
    let mut image = vec![0.0; 2 * n];
    let mut mask = vec![0.0; 2 * n];
    let [_, ny, nz] = dims;
    for i in 0..cx.min(dims[0] - start[0]) {
        for j in 0..cy.min(dims[1] - start[1]) {
            for k in 0..cz.min(dims[2] - start[2]) {
                let s = ((start[0] + i) * ny + start[1] + j) * nz + start[2] + k;
                let d = (i * cy + j) * cz + k;
                let l = labels.data()[s];
                if l != 0 {
                    image[d] = src[s];
                    mask[d] = 1.0;
                }
                if l == TUMOR {
                    image[n + d] = src[s];
                    mask[n + d] = 1.0;
                }
            }
        }
    }
    patch.image = Grid::new(vec![2, cx, cy, cz], image)?;
    patch.labels = Grid::new(vec![2, cx, cy, cz], mask)?;
    Ok((patch, Some(start)))
}

pub fn tlcr_crop(volume: &Volume, labels: &LabelMap, crop: CropSpec, pni: u8) -> Result<PatchPair> {
    Ok(tlcr_crop_located(volume, labels, crop, pni)?.0)
}
