//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only 3D volumes are accepted (a 4th dimension of length 1 is tolerated).
//! Orientation fields are read for the origin but never applied to the
//! voxel order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3D};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIRED: &[u8; 4] = b"ni1\0";

/// Voxel datatypes understood by the reader.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    I16,
    I32,
    F32,
    F64,
    U16,
}

impl NiftiDtype {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => NiftiDtype::U8,
            4 => NiftiDtype::I16,
            8 => NiftiDtype::I32,
            16 => NiftiDtype::F32,
            64 => NiftiDtype::F64,
            512 => NiftiDtype::U16,
            other => return Err(Error::UnsupportedDtype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            NiftiDtype::U8 => 2,
            NiftiDtype::I16 => 4,
            NiftiDtype::I32 => 8,
            NiftiDtype::F32 => 16,
            NiftiDtype::F64 => 64,
            NiftiDtype::U16 => 512,
        }
    }

    pub fn size(self) -> usize {
        match self {
            NiftiDtype::U8 => 1,
            NiftiDtype::I16 | NiftiDtype::U16 => 2,
            NiftiDtype::I32 | NiftiDtype::F32 => 4,
            NiftiDtype::F64 => 8,
        }
    }
}

/// The subset of header fields the engine uses.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub pixdim: [f32; 8],
    pub datatype: i16,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub big_endian: bool,
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_f32s<B: ByteOrder>(buf: &[u8], out: &mut [f32]) {
    for (i, v) in out.iter_mut().enumerate() {
        *v = B::read_f32(&buf[4 * i..]);
    }
}

fn parse_header_with<B: ByteOrder>(h: &[u8], big_endian: bool) -> Result<NiftiHeader> {
    let sizeof_hdr = B::read_i32(&h[0..4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!(
            "sizeof_hdr is {sizeof_hdr}, expected 348 (NIfTI-2 is not supported)"
        )));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&h[40 + 2 * i..]);
    }
    let mut pixdim = [0f32; 8];
    read_f32s::<B>(&h[76..108], &mut pixdim);
    let mut quatern = [0f32; 3];
    read_f32s::<B>(&h[256..268], &mut quatern);
    let mut qoffset = [0f32; 3];
    read_f32s::<B>(&h[268..280], &mut qoffset);
    let mut srow_x = [0f32; 4];
    let mut srow_y = [0f32; 4];
    let mut srow_z = [0f32; 4];
    read_f32s::<B>(&h[280..296], &mut srow_x);
    read_f32s::<B>(&h[296..312], &mut srow_y);
    read_f32s::<B>(&h[312..328], &mut srow_z);
    Ok(NiftiHeader {
        dim,
        pixdim,
        datatype: B::read_i16(&h[70..72]),
        vox_offset: B::read_f32(&h[108..112]),
        scl_slope: B::read_f32(&h[112..116]),
        scl_inter: B::read_f32(&h[116..120]),
        qform_code: B::read_i16(&h[252..254]),
        sform_code: B::read_i16(&h[254..256]),
        quatern,
        qoffset,
        srow_x,
        srow_y,
        srow_z,
        big_endian,
    })
}

/// Parses the 348-byte header; byte order is detected from `dim[0]`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("file has {} bytes, header needs 348", bytes.len()),
        )));
    }
    let h = &bytes[..HEADER_SIZE];
    let magic = &h[344..348];
    if magic == MAGIC_PAIRED {
        return Err(Error::Format("paired .hdr/.img NIfTI is not supported".into()));
    }
    if magic != MAGIC_SINGLE {
        return Err(Error::Format(format!("bad magic {:?}, expected \"n+1\\0\"", magic)));
    }
    let dim0_le = LittleEndian::read_i16(&h[40..42]);
    let dim0_be = BigEndian::read_i16(&h[40..42]);
    if (1..=7).contains(&dim0_le) {
        parse_header_with::<LittleEndian>(h, false)
    } else if (1..=7).contains(&dim0_be) {
        parse_header_with::<BigEndian>(h, true)
    } else {
        Err(Error::Format(format!("dim[0] = {dim0_le} is outside 1..=7 in either byte order")))
    }
}

impl NiftiHeader {
    fn dims3(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0] as usize;
        let mut dims = [1usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            if i < ndim {
                let v = self.dim[i + 1];
                if v <= 0 {
                    return Err(Error::Format(format!("dim[{}] = {v} must be positive", i + 1)));
                }
                *d = v as usize;
            }
        }
        for i in 4..=ndim {
            if self.dim[i] > 1 {
                return Err(Error::Format(format!(
                    "only 3D volumes are supported, dim[{i}] = {}",
                    self.dim[i]
                )));
            }
        }
        Ok(dims)
    }

    fn spacing(&self) -> [f64; 3] {
        let mut s = [1.0; 3];
        for (i, v) in s.iter_mut().enumerate() {
            let p = self.pixdim[i + 1].abs() as f64;
            if p > 0.0 && p.is_finite() {
                *v = p;
            }
        }
        s
    }

    fn origin(&self) -> [f64; 3] {
        if self.qform_code > 0 {
            self.qoffset.map(f64::from)
        } else if self.sform_code > 0 {
            [self.srow_x[3], self.srow_y[3], self.srow_z[3]].map(f64::from)
        } else {
            [0.0; 3]
        }
    }
}

fn decode_payload<B: ByteOrder>(dtype: NiftiDtype, raw: &[u8], slope: f64, inter: f64) -> Vec<f32> {
    let n = raw.len() / dtype.size();
    let mut out = Vec::with_capacity(n);
    let scale = |v: f64| (v * slope + inter) as f32;
    match dtype {
        NiftiDtype::U8 => out.extend(raw.iter().map(|&b| scale(b as f64))),
        NiftiDtype::I16 => out.extend(raw.chunks_exact(2).map(|c| scale(B::read_i16(c) as f64))),
        NiftiDtype::U16 => out.extend(raw.chunks_exact(2).map(|c| scale(B::read_u16(c) as f64))),
        NiftiDtype::I32 => out.extend(raw.chunks_exact(4).map(|c| scale(B::read_i32(c) as f64))),
        NiftiDtype::F32 => out.extend(raw.chunks_exact(4).map(|c| scale(B::read_f32(c) as f64))),
        NiftiDtype::F64 => out.extend(raw.chunks_exact(8).map(|c| scale(B::read_f64(c)))),
    }
    out
}

/// Decodes an in-memory NIfTI-1 file (optionally gzip-compressed).
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume3D> {
    let owned;
    let bytes = if is_gzip(bytes) {
        let mut buf = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut buf)?;
        owned = buf;
        &owned[..]
    } else {
        bytes
    };
    let header = parse_header(bytes)?;
    let dtype = NiftiDtype::from_code(header.datatype)?;
    let dims = header.dims3()?;
    let offset = header.vox_offset as usize;
    if header.vox_offset < HEADER_SIZE as f32 {
        return Err(Error::Format(format!("vox_offset {} is inside the header", header.vox_offset)));
    }
    let expected = dims[0] * dims[1] * dims[2] * dtype.size();
    let available = bytes.len().saturating_sub(offset);
    if available < expected {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("payload truncated: {available} bytes present, {expected} required by dims {dims:?}"),
        )));
    }
    if available > expected {
        return Err(Error::Format(format!(
            "payload has {available} bytes but dims {dims:?} imply {expected}"
        )));
    }
    let (slope, inter) = if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        (header.scl_slope as f64, header.scl_inter as f64)
    } else {
        (1.0, 0.0)
    };
    let raw = &bytes[offset..];
    let data = if header.big_endian {
        decode_payload::<BigEndian>(dtype, raw, slope, inter)
    } else {
        decode_payload::<LittleEndian>(dtype, raw, slope, inter)
    };
    let geometry = Geometry::new(dims, header.spacing(), header.origin())
        .map_err(|e| Error::Format(e.to_string()))?;
    Volume3D::new(geometry, data)
}

/// Reads a `.nii` or `.nii.gz` file; compression is detected from content.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_nifti(&bytes)
}

/// Encodes a volume as an uncompressed little-endian float32 NIfTI-1 file.
pub fn encode_nifti(vol: &Volume3D) -> Vec<u8> {
    let g = vol.geometry();
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r'; // regular
    let dim: [i16; 8] = [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[70..72], NiftiDtype::F32.code());
    LittleEndian::write_i16(&mut h[72..74], 32);
    let pixdim: [f32; 8] = [
        1.0,
        g.spacing[0] as f32,
        g.spacing[1] as f32,
        g.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    LittleEndian::write_f32(&mut h[116..120], 0.0);
    h[123] = 10; // xyzt_units: mm + s
    LittleEndian::write_i16(&mut h[252..254], 1);
    LittleEndian::write_i16(&mut h[254..256], 1);
    for i in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * i..], g.origin[i] as f32);
    }
    for row in 0..3 {
        let base = 280 + 16 * row;
        LittleEndian::write_f32(&mut h[base + 4 * row..], g.spacing[row] as f32);
        LittleEndian::write_f32(&mut h[base + 12..], g.origin[row] as f32);
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    let mut out = h;
    out.reserve(vol.len() * 4);
    for &v in vol.data() {
        out.write_f32::<LittleEndian>(v).expect("write to Vec");
    }
    out
}

/// Writes `vol` as float32 NIfTI-1; a `.gz` extension selects gzip.
pub fn write_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(vol);
    let gz = path.extension().is_some_and(|e| e == "gz");
    let mut file = fs::File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        file.write_all(&bytes)?;
    }
    Ok(())
}
