//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only what a 4D functional series needs: float32 or int16 voxels, spatial
//! and temporal spacing from `pixdim`, and the sform affine.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array4;

use super::volume::{Affine, VolumeSeries, IDENTITY_AFFINE};
use crate::error::{Error, IoContext, Result};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const UNITS_MM: u8 = 2;
const UNITS_SEC: u8 = 8;
const UNITS_MSEC: u8 = 16;
const UNITS_USEC: u8 = 24;

/// The header fields this crate reads.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    /// `dim[0..8]` as stored.
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub sform_code: i16,
    pub srow: [[f32; 4]; 3],
    pub little_endian: bool,
}

impl NiftiHeader {
    /// `(t, z, y, x)` for a 4D header.
    pub fn shape(&self) -> Result<[usize; 4]> {
        if self.dim[0] != 4 {
            return Err(Error::Shape(format!(
                "expected a 4D series, header has {} dimensions",
                self.dim[0]
            )));
        }
        let d = |i: usize| -> Result<usize> {
            usize::try_from(self.dim[i])
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Shape(format!("dim[{i}] = {} is not positive", self.dim[i])))
        };
        Ok([d(4)?, d(3)?, d(2)?, d(1)?])
    }

    fn parse(buf: &[u8; HEADER_SIZE]) -> Result<Self> {
        if &buf[344..348] != MAGIC {
            return Err(Error::Format(
                "missing \"n+1\" magic: not a single-file NIfTI-1".into(),
            ));
        }
        let le = i32::from_le_bytes(buf[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
        if !le && i32::from_be_bytes(buf[0..4].try_into().unwrap()) != HEADER_SIZE as i32 {
            return Err(Error::Format("sizeof_hdr is not 348".into()));
        }
        let i16_at = |o: usize| {
            let b = [buf[o], buf[o + 1]];
            if le {
                i16::from_le_bytes(b)
            } else {
                i16::from_be_bytes(b)
            }
        };
        let f32_at = |o: usize| {
            let b: [u8; 4] = buf[o..o + 4].try_into().unwrap();
            if le {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let mut dim = [0i16; 8];
        let mut pixdim = [0f32; 8];
        for i in 0..8 {
            dim[i] = i16_at(40 + 2 * i);
            pixdim[i] = f32_at(76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c);
            }
        }
        Ok(Self {
            dim,
            datatype: i16_at(70),
            bitpix: i16_at(72),
            pixdim,
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            xyzt_units: buf[123],
            sform_code: i16_at(254),
            srow,
            little_endian: le,
        })
    }

    fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut buf = [0u8; HEADER_SIZE];
        buf[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        buf[38] = b'r';
        for i in 0..8 {
            buf[40 + 2 * i..42 + 2 * i].copy_from_slice(&self.dim[i].to_le_bytes());
            buf[76 + 4 * i..80 + 4 * i].copy_from_slice(&self.pixdim[i].to_le_bytes());
        }
        buf[70..72].copy_from_slice(&self.datatype.to_le_bytes());
        buf[72..74].copy_from_slice(&self.bitpix.to_le_bytes());
        buf[108..112].copy_from_slice(&self.vox_offset.to_le_bytes());
        buf[112..116].copy_from_slice(&self.scl_slope.to_le_bytes());
        buf[116..120].copy_from_slice(&self.scl_inter.to_le_bytes());
        buf[123] = self.xyzt_units;
        buf[254..256].copy_from_slice(&self.sform_code.to_le_bytes());
        for r in 0..3 {
            for c in 0..4 {
                let o = 280 + 16 * r + 4 * c;
                buf[o..o + 4].copy_from_slice(&self.srow[r][c].to_le_bytes());
            }
        }
        buf[344..348].copy_from_slice(MAGIC);
        buf
    }

    fn tr_seconds(&self) -> f64 {
        let tr = self.pixdim[4] as f64;
        match self.xyzt_units & 0x38 {
            UNITS_MSEC => tr / 1e3,
            UNITS_USEC => tr / 1e6,
            _ => tr,
        }
    }

    fn affine(&self) -> Affine {
        if self.sform_code <= 0 {
            return IDENTITY_AFFINE;
        }
        let mut a = IDENTITY_AFFINE;
        for r in 0..3 {
            for c in 0..4 {
                a[r][c] = self.srow[r][c] as f64;
            }
        }
        a
    }
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = BufReader::new(File::open(path).at(path)?);
    let mut magic = [0u8; 2];
    let gz = {
        use std::io::BufRead;
        let head = file.fill_buf().at(path)?;
        if head.len() >= 2 {
            magic.copy_from_slice(&head[..2]);
        }
        magic == [0x1f, 0x8b]
    };
    Ok(if gz {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    })
}

fn read_header_from(reader: &mut dyn Read, path: &Path) -> Result<NiftiHeader> {
    let mut buf = [0u8; HEADER_SIZE];
    reader.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated header", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    NiftiHeader::parse(&buf)
}

/// Read only the header (decompressing just enough of a gzip stream).
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let path = path.as_ref();
    read_header_from(&mut *open(path)?, path)
}

/// Load a 4D NIfTI-1 series as float32 in `(t, z, y, x)` order.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<VolumeSeries> {
    let path = path.as_ref();
    let mut reader = open(path)?;
    let hdr = read_header_from(&mut *reader, path)?;
    let shape = hdr.shape()?;
    let bytes_per = match (hdr.datatype, hdr.bitpix) {
        (DT_FLOAT32, 32) => 4,
        (DT_INT16, 16) => 2,
        (dt, bp) => {
            return Err(Error::Format(format!(
                "unsupported datatype {dt} (bitpix {bp}); only float32 and int16 are read"
            )))
        }
    };
    let offset = hdr.vox_offset as usize;
    if offset < HEADER_SIZE {
        return Err(Error::Format(format!("vox_offset {offset} inside header")));
    }
    let mut skip = vec![0u8; offset - HEADER_SIZE];
    reader.read_exact(&mut skip).at(path)?;

    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * bytes_per];
    reader.read_exact(&mut raw).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: voxel data truncated", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;

    let le = hdr.little_endian;
    let mut values: Vec<f32> = if bytes_per == 4 {
        raw.chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if le {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect()
    } else {
        raw.chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f32
            })
            .collect()
    };
    let slope = hdr.scl_slope;
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || hdr.scl_inter != 0.0) {
        for v in &mut values {
            *v = *v * slope + hdr.scl_inter;
        }
    }
    let nan = values.iter().filter(|v| v.is_nan()).count();
    if nan > 0 {
        return Err(Error::Validation(format!(
            "{}: {nan} NaN voxels",
            path.display()
        )));
    }
    let data = Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values)
        .expect("length matches header dims");
    let p = hdr.pixdim;
    let voxel_dims = [p[3].abs() as f64, p[2].abs() as f64, p[1].abs() as f64];
    let voxel_dims = voxel_dims.map(|d| if d > 0.0 { d } else { 1.0 });
    let tr = hdr.tr_seconds();
    let tr = if tr > 0.0 { tr } else { 1.0 };
    VolumeSeries::with_affine(data, voxel_dims, tr, hdr.affine())
}

/// Write a float32 NIfTI-1 file; a `.gz` suffix selects gzip compression.
pub fn save_nifti(vs: &VolumeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [t, z, y, x] = vs.shape();
    let dim_i16 = |v: usize| -> Result<i16> {
        i16::try_from(v).map_err(|_| Error::Shape(format!("dimension {v} exceeds NIfTI-1 range")))
    };
    let [dz, dy, dx] = vs.voxel_dims_mm();
    let a = vs.affine();
    let mut srow = [[0f32; 4]; 3];
    for r in 0..3 {
        for c in 0..4 {
            srow[r][c] = a[r][c] as f32;
        }
    }
    let hdr = NiftiHeader {
        dim: [4, dim_i16(x)?, dim_i16(y)?, dim_i16(z)?, dim_i16(t)?, 1, 1, 1],
        datatype: DT_FLOAT32,
        bitpix: 32,
        pixdim: [1.0, dx as f32, dy as f32, dz as f32, vs.tr_seconds() as f32, 0.0, 0.0, 0.0],
        vox_offset: VOX_OFFSET as f32,
        scl_slope: 1.0,
        scl_inter: 0.0,
        xyzt_units: UNITS_MM | UNITS_SEC,
        sform_code: 1,
        srow,
        little_endian: true,
    };

    let file = File::create(path).at(path)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let mut w: Box<dyn Write> = if gz {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::fast()))
    } else {
        Box::new(BufWriter::new(file))
    };
    let mut bytes = Vec::with_capacity(VOX_OFFSET + 4 * t * z * y * x);
    bytes.extend_from_slice(&hdr.to_bytes());
    bytes.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    for v in vs.data().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).at(path)?;
    w.flush().at(path)?;
    Ok(())
}
