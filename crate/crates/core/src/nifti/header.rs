//! The 348-byte NIfTI-1 header: the subset of fields this crate honours,
//! plus the orientation block carried through verbatim.

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag of a single-file `.nii`.
pub const SINGLE_FILE_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

impl Endian {
    fn i16(self, b: &[u8], at: usize) -> i16 {
        let a = [b[at], b[at + 1]];
        match self {
            Endian::Little => i16::from_le_bytes(a),
            Endian::Big => i16::from_be_bytes(a),
        }
    }

    fn i32(self, b: &[u8], at: usize) -> i32 {
        let a = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        match self {
            Endian::Little => i32::from_le_bytes(a),
            Endian::Big => i32::from_be_bytes(a),
        }
    }

    pub(crate) fn f32(self, b: &[u8], at: usize) -> f32 {
        let a = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        match self {
            Endian::Little => f32::from_le_bytes(a),
            Endian::Big => f32::from_be_bytes(a),
        }
    }

    pub(crate) fn u16_at(self, b: &[u8], at: usize) -> u16 {
        self.i16(b, at) as u16
    }
}

/// Supported voxel encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            other => Err(Error::Unsupported(format!("datatype code {other} ({})", datatype_name(other)))),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
        }
    }
}

fn datatype_name(code: i16) -> &'static str {
    match code {
        0 => "unknown",
        1 => "binary",
        8 => "int32",
        32 => "complex64",
        64 => "float64",
        128 => "rgb24",
        256 => "int8",
        512 => "uint16",
        768 => "uint32",
        1024 => "int64",
        1280 => "uint64",
        1536 => "float128",
        1792 => "complex128",
        2048 => "complex256",
        2304 => "rgba32",
        _ => "unrecognised",
    }
}

/// Orientation fields copied verbatim between read and write.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub qfac: f32,
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            srow: [[0.0; 4]; 3],
            qfac: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Magic {
    /// Header and data in one `.nii` file.
    Single,
    /// Header in `.hdr`, data in a paired `.img`.
    Pair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub endian: Endian,
    pub magic: Magic,
    pub dims: [usize; 3],
    pub datatype: Datatype,
    pub spacing: [f32; 3],
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qoffset: [f32; 3],
    pub orientation: Orientation,
}

impl Header {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data_bytes(&self) -> usize {
        self.voxel_count() * self.datatype.bytes()
    }

    /// Parses and validates the first 348 bytes of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Truncated { offset: bytes.len() });
        }
        let endian = detect_endian(bytes)?;
        let sizeof_hdr = endian.i32(bytes, offsets::SIZEOF_HDR);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::Format(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
        }
        let magic = match &bytes[offsets::MAGIC..offsets::MAGIC + 4] {
            b"n+1\0" => Magic::Single,
            b"ni1\0" => Magic::Pair,
            other => return Err(Error::Format(format!("bad magic {other:?}"))),
        };
        let ndim = endian.i16(bytes, offsets::DIM);
        if ndim != 3 {
            return Err(Error::Unsupported(format!("dim[0] = {ndim}; only 3-D volumes are supported")));
        }
        let mut dims = [0usize; 3];
        for (a, d) in dims.iter_mut().enumerate() {
            let v = endian.i16(bytes, offsets::DIM + 2 * (a + 1));
            if v < 1 {
                return Err(Error::Format(format!("dim[{}] = {v} must be >= 1", a + 1)));
            }
            *d = v as usize;
        }
        let datatype = Datatype::from_code(endian.i16(bytes, offsets::DATATYPE))?;
        let bitpix = endian.i16(bytes, offsets::BITPIX);
        if bitpix as usize != datatype.bytes() * 8 {
            return Err(Error::Format(format!("bitpix {bitpix} inconsistent with datatype {datatype:?}")));
        }
        let qfac = endian.f32(bytes, offsets::PIXDIM);
        let mut spacing = [0f32; 3];
        for (a, s) in spacing.iter_mut().enumerate() {
            *s = endian.f32(bytes, offsets::PIXDIM + 4 * (a + 1));
        }
        let raw_offset = endian.f32(bytes, offsets::VOX_OFFSET);
        let vox_offset = match magic {
            Magic::Pair => {
                if !(raw_offset.is_finite() && raw_offset >= 0.0 && raw_offset.fract() == 0.0) {
                    return Err(Error::Format(format!("vox_offset {raw_offset} is not a valid byte offset")));
                }
                raw_offset as usize
            }
            Magic::Single => {
                if !(raw_offset.is_finite() && raw_offset >= HEADER_SIZE as f32 && raw_offset.fract() == 0.0) {
                    return Err(Error::Format(format!("vox_offset {raw_offset} is not a valid byte offset")));
                }
                if raw_offset > u32::MAX as f32 {
                    return Err(Error::Format(format!("vox_offset {raw_offset} too large")));
                }
                raw_offset as usize
            }
        };
        let mut quatern = [0f32; 3];
        let mut qoffset = [0f32; 3];
        for a in 0..3 {
            quatern[a] = endian.f32(bytes, offsets::QUATERN_B + 4 * a);
            qoffset[a] = endian.f32(bytes, offsets::QOFFSET_X + 4 * a);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = endian.f32(bytes, offsets::SROW_X + 16 * r + 4 * c);
            }
        }
        // voxel count fits in memory only if the product does not overflow
        dims.iter()
            .try_fold(datatype.bytes(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        Ok(Header {
            endian,
            magic,
            dims,
            datatype,
            spacing,
            vox_offset,
            scl_slope: endian.f32(bytes, offsets::SCL_SLOPE),
            scl_inter: endian.f32(bytes, offsets::SCL_INTER),
            qoffset,
            orientation: Orientation {
                qform_code: endian.i16(bytes, offsets::QFORM_CODE),
                sform_code: endian.i16(bytes, offsets::SFORM_CODE),
                quatern,
                srow,
                qfac,
            },
        })
    }

    /// Serialises a little-endian single-file header (348 bytes).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; HEADER_SIZE];
        let put_i16 = |b: &mut Vec<u8>, at: usize, v: i16| b[at..at + 2].copy_from_slice(&v.to_le_bytes());
        let put_i32 = |b: &mut Vec<u8>, at: usize, v: i32| b[at..at + 4].copy_from_slice(&v.to_le_bytes());
        let put_f32 = |b: &mut Vec<u8>, at: usize, v: f32| b[at..at + 4].copy_from_slice(&v.to_le_bytes());
        put_i32(&mut b, offsets::SIZEOF_HDR, HEADER_SIZE as i32);
        put_i16(&mut b, offsets::DIM, 3);
        for a in 0..3 {
            put_i16(&mut b, offsets::DIM + 2 * (a + 1), self.dims[a] as i16);
        }
        for a in 4..8 {
            put_i16(&mut b, offsets::DIM + 2 * a, 1);
        }
        put_i16(&mut b, offsets::DATATYPE, self.datatype.code());
        put_i16(&mut b, offsets::BITPIX, (self.datatype.bytes() * 8) as i16);
        let qfac = if self.orientation.qfac == 0.0 { 1.0 } else { self.orientation.qfac };
        put_f32(&mut b, offsets::PIXDIM, qfac);
        for a in 0..3 {
            put_f32(&mut b, offsets::PIXDIM + 4 * (a + 1), self.spacing[a]);
        }
        put_f32(&mut b, offsets::VOX_OFFSET, self.vox_offset as f32);
        put_f32(&mut b, offsets::SCL_SLOPE, self.scl_slope);
        put_f32(&mut b, offsets::SCL_INTER, self.scl_inter);
        // millimetres, seconds
        b[offsets::XYZT_UNITS] = 2 | 8;
        put_i16(&mut b, offsets::QFORM_CODE, self.orientation.qform_code);
        put_i16(&mut b, offsets::SFORM_CODE, self.orientation.sform_code);
        for a in 0..3 {
            put_f32(&mut b, offsets::QUATERN_B + 4 * a, self.orientation.quatern[a]);
            put_f32(&mut b, offsets::QOFFSET_X + 4 * a, self.qoffset[a]);
        }
        for r in 0..3 {
            for c in 0..4 {
                put_f32(&mut b, offsets::SROW_X + 16 * r + 4 * c, self.orientation.srow[r][c]);
            }
        }
        let magic: &[u8; 4] = match self.magic {
            Magic::Single => b"n+1\0",
            Magic::Pair => b"ni1\0",
        };
        b[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(magic);
        b
    }
}

/// Chooses byte order from `dim[0]`, which must lie in `1..=7`.
fn detect_endian(bytes: &[u8]) -> Result<Endian> {
    for e in [Endian::Little, Endian::Big] {
        let d0 = e.i16(bytes, offsets::DIM);
        if (1..=7).contains(&d0) {
            return Ok(e);
        }
    }
    Err(Error::Format("dim[0] outside 1..=7 in either byte order".into()))
}
