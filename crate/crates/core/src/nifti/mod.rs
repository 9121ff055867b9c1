//! NIfTI-1 volumes: reading, writing and intensity/label preprocessing.
//!
//! Volumes are held as `[X, Y, Z]` grids in row-major order (z fastest);
//! the on-disk order (x fastest) is transposed on the way in and out. Only
//! voxel spacing is interpreted. The qform/sform block is kept verbatim so
//! a read-modify-write cycle does not lose it.
//!
//! Supported: `uint8`, `int16` and `float32` data; little- and big-endian
//! headers; single-file `.nii`, gzip-wrapped `.nii.gz`, and `.hdr`/`.img`
//! pairs.

mod header;
mod preprocess;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volgrid::Grid;

pub use header::{Datatype, Endian, Header, Magic, Orientation, HEADER_SIZE, SINGLE_FILE_OFFSET};
pub use preprocess::{map_labels, normalize_intensity};

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const TUMOR: u8 = 2;

/// Scalar intensity volume with spacing metadata (millimetres).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// `[X, Y, Z]` intensities.
    pub grid: Grid,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub orientation: Orientation,
}

impl Volume {
    pub fn new(grid: Grid, spacing: [f64; 3]) -> Result<Self> {
        if grid.shape().len() != 3 {
            return Err(Error::shape("volume", format!("expected [X, Y, Z], got {:?}", grid.shape())));
        }
        if spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Volume {
            grid,
            spacing,
            origin: [0.0; 3],
            orientation: Orientation::default(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.grid.shape();
        [s[0], s[1], s[2]]
    }
}

/// Integer label volume over {background, liver, tumor}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: [usize; 3],
    data: Vec<u8>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub orientation: Orientation,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) || dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape("label_map", format!("dims {dims:?} vs {} labels", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > TUMOR) {
            return Err(Error::Invalid(format!("label value {v} outside {{0, 1, 2}}")));
        }
        Ok(LabelMap {
            dims,
            data,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            orientation: Orientation::default(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

/// Integer-valued volume as stored, before label mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLabels {
    pub dims: [usize; 3],
    pub data: Vec<i64>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub orientation: Orientation,
}

/// A decoded file: header plus scaled voxel values in `[X, Y, Z]` order.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub header: Header,
    pub values: Vec<f64>,
}

impl NiftiImage {
    fn spacing(&self) -> [f64; 3] {
        self.header.spacing.map(|s| s as f64)
    }

    fn origin(&self) -> [f64; 3] {
        self.header.qoffset.map(|s| s as f64)
    }

    pub fn into_volume(self) -> Result<Volume> {
        let spacing = self.spacing();
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Format(format!("pixdim {spacing:?} must be positive")));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite intensities".into()));
        }
        let origin = self.origin();
        let grid = Grid::new(self.header.dims.to_vec(), self.values)?;
        Ok(Volume {
            grid,
            spacing,
            origin,
            orientation: self.header.orientation,
        })
    }

    pub fn into_raw_labels(self) -> Result<RawLabels> {
        let spacing = self.spacing();
        let origin = self.origin();
        let data = self
            .values
            .iter()
            .map(|&v| {
                if v.is_finite() && v.fract() == 0.0 {
                    Ok(v as i64)
                } else {
                    Err(Error::Format(format!("label value {v} is not an integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RawLabels {
            dims: self.header.dims,
            data,
            spacing,
            origin,
            orientation: self.header.orientation,
        })
    }
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
/// Refuse to inflate beyond this many bytes.
const MAX_INFLATED: u64 = 1 << 31;

fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() < 2 || bytes[..2] != GZIP_MAGIC {
        return Ok(bytes);
    }
    #[cfg(feature = "gzip")]
    {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes.as_slice())
            .take(MAX_INFLATED)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip stream: {e}")))?;
        Ok(out)
    }
    #[cfg(not(feature = "gzip"))]
    {
        let _ = MAX_INFLATED;
        Err(Error::Unsupported("gzip container (built without the `gzip` feature)".into()))
    }
}

/// Decodes a complete in-memory image. For `.hdr`/`.img` pairs the voxel
/// bytes come from `data`; single-file images read them from `bytes`.
pub fn decode(bytes: &[u8], data: Option<&[u8]>) -> Result<NiftiImage> {
    let header = Header::parse(bytes)?;
    let (buf, start) = match (header.magic, data) {
        (Magic::Single, _) => (bytes, header.vox_offset),
        (Magic::Pair, Some(img)) => (img, header.vox_offset),
        (Magic::Pair, None) => {
            return Err(Error::Format("ni1 header requires a paired .img data file".into()));
        }
    };
    let need = header.data_bytes();
    let end = start
        .checked_add(need)
        .ok_or_else(|| Error::Format("data extent overflows".into()))?;
    if buf.len() < end {
        return Err(Error::Truncated {
            offset: buf.len().max(start.min(buf.len())),
        });
    }
    let raw = &buf[start..end];
    let e = header.endian;
    let n = header.voxel_count();
    let decoded: Vec<f64> = match header.datatype {
        Datatype::U8 => raw.iter().map(|&b| b as f64).collect(),
        Datatype::I16 => (0..n).map(|i| e.u16_at(raw, 2 * i) as i16 as f64).collect(),
        Datatype::F32 => (0..n).map(|i| e.f32(raw, 4 * i) as f64).collect(),
    };
    let slope = header.scl_slope as f64;
    let inter = header.scl_inter as f64;
    let scaled = slope != 0.0 && slope.is_finite() && inter.is_finite();
    let [nx, ny, nz] = header.dims;
    let mut values = vec![0.0; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = decoded[x + nx * (y + ny * z)];
                values[(x * ny + y) * nz + z] = if scaled { slope * v + inter } else { v };
            }
        }
    }
    Ok(NiftiImage { header, values })
}

fn img_sibling(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else {
        path.with_extension("img")
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = maybe_gunzip(fs::read(path)?)?;
    let header = Header::parse(&bytes)?;
    match header.magic {
        Magic::Single => decode(&bytes, None),
        Magic::Pair => {
            let img = maybe_gunzip(fs::read(img_sibling(path))?)?;
            decode(&bytes, Some(&img))
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti(path)?.into_volume()
}

pub fn read_raw_labels(path: impl AsRef<Path>) -> Result<RawLabels> {
    read_nifti(path)?.into_raw_labels()
}

/// Reads a label file whose values are already in {0, 1, 2}.
pub fn read_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let raw = read_raw_labels(path)?;
    let mapping = [(0, BACKGROUND), (1, LIVER), (2, TUMOR)].into_iter().collect();
    map_labels(&raw, &mapping)
}

/// Encodes `[X, Y, Z]`-ordered values as a single-file image.
pub fn encode(
    dims: [usize; 3],
    values: &[f64],
    datatype: Datatype,
    spacing: [f64; 3],
    origin: [f64; 3],
    orientation: Orientation,
) -> Result<Vec<u8>> {
    if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::Invalid(format!("dims {dims:?} not representable in a NIfTI-1 header")));
    }
    let header = Header {
        endian: Endian::Little,
        magic: Magic::Single,
        dims,
        datatype,
        spacing: spacing.map(|s| s as f32),
        vox_offset: SINGLE_FILE_OFFSET,
        scl_slope: 0.0,
        scl_inter: 0.0,
        qoffset: origin.map(|s| s as f32),
        orientation,
    };
    let mut out = header.to_bytes();
    out.extend_from_slice(&[0u8; SINGLE_FILE_OFFSET - HEADER_SIZE]);
    let [nx, ny, nz] = dims;
    out.reserve(header.data_bytes());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = values[(x * ny + y) * nz + z];
                if !v.is_finite() {
                    return Err(Error::Invalid(format!("non-finite value at ({x}, {y}, {z})")));
                }
                match datatype {
                    Datatype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Datatype::I16 => {
                        if v.fract() != 0.0 || v < i16::MIN as f64 || v > i16::MAX as f64 {
                            return Err(Error::Invalid(format!("value {v} not representable as int16")));
                        }
                        out.extend_from_slice(&(v as i16).to_le_bytes());
                    }
                    Datatype::U8 => {
                        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                            return Err(Error::Invalid(format!("value {v} not representable as uint8")));
                        }
                        out.push(v as u8);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    let gz = path.to_string_lossy().ends_with(".gz");
    if gz {
        #[cfg(feature = "gzip")]
        {
            use std::io::Write;
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            enc.write_all(&bytes)?;
            fs::write(path, enc.finish()?)?;
            return Ok(());
        }
        #[cfg(not(feature = "gzip"))]
        return Err(Error::Unsupported("gzip container (built without the `gzip` feature)".into()));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a volume; `float32` output is stored unscaled, so values that are
/// exactly representable in single precision round-trip bit for bit.
pub fn write_volume(path: impl AsRef<Path>, v: &Volume, datatype: Datatype) -> Result<()> {
    let bytes = encode(v.dims(), v.grid.data(), datatype, v.spacing, v.origin, v.orientation)?;
    write_bytes(path.as_ref(), bytes)
}

pub fn write_label_map(path: impl AsRef<Path>, l: &LabelMap) -> Result<()> {
    let values: Vec<f64> = l.data.iter().map(|&v| v as f64).collect();
    let bytes = encode(l.dims, &values, Datatype::U8, l.spacing, l.origin, l.orientation)?;
    write_bytes(path.as_ref(), bytes)
}
