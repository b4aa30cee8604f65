//! Single-file NIfTI-1 reader and writer (`.nii`, `.nii.gz`).
//!
//! Only little-endian files with datatype uint8, int16, float32 or float64 are
//! accepted. The sform is preferred over the qform when both are set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Affine, Grid, Mask, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl NiftiDatatype {
    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            64 => Ok(NiftiDatatype::Float64),
            other => Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        }
    }

    fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
            NiftiDatatype::Float64 => 64,
        }
    }

    fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
            NiftiDatatype::Float64 => 8,
        }
    }
}

struct Header {
    grid: Grid,
    datatype: NiftiDatatype,
    vox_offset: usize,
    scl_slope: f64,
    scl_inter: f64,
}

fn is_gz(path: &Path) -> bool {
    path.to_string_lossy().ends_with(".gz")
}

fn open_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if is_gz(path) {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f64 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]]) as f64
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            b.len()
        )));
    }
    if &b[344..348] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected single-file NIfTI-1 \"n+1\"",
            String::from_utf8_lossy(&b[344..348])
        )));
    }
    let sizeof_hdr = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes([b[0], b[1], b[2], b[3]]) == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI files".into()));
        }
        return Err(Error::Format(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }

    let ndim = i16_at(b, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for k in 1..=ndim as usize {
        let d = i16_at(b, 40 + 2 * k);
        if d < 1 {
            return Err(Error::Format(format!("dim[{k}] = {d} is not positive")));
        }
        if k <= 3 {
            dims[k - 1] = d as usize;
        } else if d != 1 {
            return Err(Error::Unsupported(format!(
                "only 3D volumes are supported (dim[{k}] = {d})"
            )));
        }
    }

    let datatype = NiftiDatatype::from_code(i16_at(b, 70))?;
    let pixdim: Vec<f64> = (0..8).map(|k| f32_at(b, 76 + 4 * k)).collect();
    let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    let vox_offset = f32_at(b, 108);
    if vox_offset < HEADER_SIZE as f64 || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset {vox_offset} is invalid")));
    }
    let scl_slope = f32_at(b, 112);
    let scl_inter = f32_at(b, 116);

    let qform_code = i16_at(b, 252);
    let sform_code = i16_at(b, 254);
    let affine = if sform_code > 0 {
        let row = |off: usize| [f32_at(b, off), f32_at(b, off + 4), f32_at(b, off + 8), f32_at(b, off + 12)];
        Some([row(280), row(296), row(312), [0.0, 0.0, 0.0, 1.0]])
    } else if qform_code > 0 {
        Some(qform_to_affine(b, &pixdim))
    } else {
        None
    };

    let grid = Grid::new(dims, spacing)
        .map_err(|e| Error::Format(format!("invalid geometry: {e}")))?
        .with_affine(affine);
    Ok(Header {
        grid,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope,
        scl_inter,
    })
}

fn qform_to_affine(b: &[u8], pixdim: &[f64]) -> Affine {
    let (qb, qc, qd) = (f32_at(b, 256), f32_at(b, 260), f32_at(b, 264));
    let (ox, oy, oz) = (f32_at(b, 268), f32_at(b, 272), f32_at(b, 276));
    let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let r = [
        [
            qa * qa + qb * qb - qc * qc - qd * qd,
            2.0 * (qb * qc - qa * qd),
            2.0 * (qb * qd + qa * qc),
        ],
        [
            2.0 * (qb * qc + qa * qd),
            qa * qa + qc * qc - qb * qb - qd * qd,
            2.0 * (qc * qd - qa * qb),
        ],
        [
            2.0 * (qb * qd - qa * qc),
            2.0 * (qc * qd + qa * qb),
            qa * qa + qd * qd - qc * qc - qb * qb,
        ],
    ];
    let scale = [pixdim[1], pixdim[2], pixdim[3] * qfac];
    let offset = [ox, oy, oz];
    let mut a = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = r[i][j] * scale[j];
        }
        a[i][3] = offset[i];
    }
    a[3][3] = 1.0;
    a
}

/// Reads only the header and returns the lattice geometry.
pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let mut head = vec![0u8; HEADER_SIZE];
    reader
        .read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated NIfTI header", path.display())))?;
    Ok(parse_header(&head)?.grid)
}

pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    open_reader(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes)?;
    let n = header.grid.len();
    let width = header.datatype.bytes();
    let start = header.vox_offset;
    let end = start + n * width;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "{}: data section truncated ({} of {} bytes)",
            path.display(),
            bytes.len().saturating_sub(start),
            n * width
        )));
    }
    let raw = &bytes[start..end];
    let mut data: Vec<f64> = match header.datatype {
        NiftiDatatype::Uint8 => raw.iter().map(|&v| v as f64).collect(),
        NiftiDatatype::Int16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        NiftiDatatype::Float32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        NiftiDatatype::Float64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    let identity_scaling = header.scl_slope == 0.0
        || (header.scl_slope == 1.0 && header.scl_inter == 0.0)
        || !header.scl_slope.is_finite();
    if !identity_scaling {
        for v in &mut data {
            *v = *v * header.scl_slope + header.scl_inter;
        }
    }
    Volume::new(header.grid, data).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a NIfTI file whose voxels must all be exactly 0 or 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let v = load_nifti(path)?;
    Mask::from_volume(&v).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn encode_header(grid: &Grid, datatype: NiftiDatatype) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f64| h[off..off + 4].copy_from_slice(&(v as f32).to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r'; // regular
    let dim = [3, grid.dims[0], grid.dims[1], grid.dims[2], 1, 1, 1, 1];
    for (k, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * k, *d as i16);
    }
    put_i16(&mut h, 70, datatype.code());
    put_i16(&mut h, 72, (datatype.bytes() * 8) as i16);
    let pixdim = [1.0, grid.spacing[0], grid.spacing[1], grid.spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (k, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * k, *p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f64);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // NIFTI_UNITS_MM
    if let Some(a) = &grid.affine {
        put_i16(&mut h, 254, 1);
        for (r, off) in [280usize, 296, 312].into_iter().enumerate() {
            for c in 0..4 {
                put_f32(&mut h, off + 4 * c, a[r][c]);
            }
        }
    }
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn write_file(path: &Path, header: &[u8], payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::fast()))
    } else {
        Box::new(BufWriter::new(file))
    };
    writer
        .write_all(header)
        .and_then(|_| writer.write_all(payload))
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes a volume as little-endian float32.
///
/// Values are rounded to the nearest `f32`; volumes whose values are already
/// representable in single precision round-trip bit-exactly.
pub fn save_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = encode_header(v.grid(), NiftiDatatype::Float32);
    let payload: Vec<u8> = v
        .data()
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect();
    write_file(path, &header, &payload)
}

/// Writes a mask as uint8.
pub fn save_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = encode_header(m.grid(), NiftiDatatype::Uint8);
    write_file(path, &header, m.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn header_echo_96_cube() {
        let dir = tmp();
        let g = Grid::isotropic([96, 96, 96], 1.0).unwrap();
        let path = dir.path().join("big.nii");
        save_nifti(&Volume::filled(g, 0.25), &path).unwrap();
        let v = load_nifti(&path).unwrap();
        assert_eq!(v.dims(), [96, 96, 96]);
        assert_eq!(v.spacing(), [1.0, 1.0, 1.0]);
        assert_eq!(read_grid(&path).unwrap().dims, [96, 96, 96]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tmp();
        let path = dir.path().join("bad.nii");
        let g = Grid::isotropic([2, 2, 2], 1.0).unwrap();
        save_nifti(&Volume::zeros(g), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[344..348].copy_from_slice(b"ni1\0");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_nifti(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_datatype_rejected() {
        let dir = tmp();
        let path = dir.path().join("i32.nii");
        let g = Grid::isotropic([2, 2, 2], 1.0).unwrap();
        save_nifti(&Volume::zeros(g), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[70..72].copy_from_slice(&8i16.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_nifti(&path), Err(Error::Unsupported(_))));
    }

    #[test]
    fn nan_voxel_names_index() {
        let dir = tmp();
        let path = dir.path().join("nan.nii");
        let g = Grid::isotropic([3, 2, 2], 1.0).unwrap();
        save_nifti(&Volume::zeros(g), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // voxel index 4 -> (1, 1, 0)
        let off = VOX_OFFSET + 4 * 4;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_nifti(&path).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("[1, 1, 0]"), "{err}");
    }

    #[test]
    fn empty_mask_writes_zero_bytes() {
        let dir = tmp();
        let path = dir.path().join("m.nii");
        let g = Grid::isotropic([4, 3, 2], 1.0).unwrap();
        save_mask(&Mask::empty(g), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), VOX_OFFSET + 24);
        assert!(bytes[VOX_OFFSET..].iter().all(|&b| b == 0));
        assert_eq!(i16_at(&bytes, 70), 2);
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let g = Grid::isotropic([2, 2, 2], 1.0).unwrap();
        let err = save_nifti(&Volume::zeros(g), "/nonexistent-dir/x.nii").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent-dir/x.nii"));
    }

    #[test]
    fn int16_and_float64_and_scaling_are_read() {
        let dir = tmp();
        let g = Grid::new([2, 1, 1], [1.0, 2.0, 3.0]).unwrap();
        let mut h = encode_header(&g, NiftiDatatype::Int16);
        h[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        h[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        let mut bytes = h.clone();
        bytes.extend_from_slice(&(-3i16).to_le_bytes());
        bytes.extend_from_slice(&7i16.to_le_bytes());
        let path = dir.path().join("i16.nii");
        std::fs::write(&path, bytes).unwrap();
        let v = load_nifti(&path).unwrap();
        assert_eq!(v.data(), &[-5.0, 15.0]);
        assert_eq!(v.spacing(), [1.0, 2.0, 3.0]);

        let mut bytes = encode_header(&g, NiftiDatatype::Float64);
        bytes.extend_from_slice(&0.1f64.to_le_bytes());
        bytes.extend_from_slice(&(-2.5f64).to_le_bytes());
        let path = dir.path().join("f64.nii");
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(load_nifti(&path).unwrap().data(), &[0.1, -2.5]);
    }

    #[test]
    fn sform_preferred_and_qform_fallback() {
        let dir = tmp();
        let affine = [
            [2.0, 0.0, 0.0, -10.0],
            [0.0, 2.0, 0.0, 5.0],
            [0.0, 0.0, 2.0, 1.5],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let g = Grid::isotropic([2, 2, 2], 2.0).unwrap().with_affine(Some(affine));
        let mut h = encode_header(&g, NiftiDatatype::Uint8);
        // a qform that disagrees: identity rotation, different offset
        h[252..254].copy_from_slice(&1i16.to_le_bytes());
        h[268..272].copy_from_slice(&99.0f32.to_le_bytes());
        let mut bytes = h.clone();
        bytes.extend_from_slice(&[0u8; 8]);
        let path = dir.path().join("s.nii");
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(load_nifti(&path).unwrap().grid().affine, Some(affine));

        // drop the sform: qform with identity quaternion and offset (99, 0, 0)
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let a = load_nifti(&path).unwrap().grid().affine.unwrap();
        assert_eq!(a[0], [2.0, 0.0, 0.0, 99.0]);
        assert_eq!(a[1], [0.0, 2.0, 0.0, 0.0]);
        assert_eq!(a[2], [0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn gz_roundtrip_on_random_volumes() {
        let dir = tmp();
        let mut rng = crate::rng::seeded(11);
        for k in 0..20 {
            let dims = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9)];
            let spacing = [
                rng.random_range(0.5f32..3.0) as f64,
                rng.random_range(0.5f32..3.0) as f64,
                rng.random_range(0.5f32..3.0) as f64,
            ];
            let g = Grid::new(dims, spacing).unwrap();
            let data: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1e3f32..1e3) as f64).collect();
            let v = Volume::new(g.clone(), data).unwrap();
            let ext = if k % 2 == 0 { "nii.gz" } else { "nii" };
            let path = dir.path().join(format!("v{k}.{ext}"));
            save_nifti(&v, &path).unwrap();
            let back = load_nifti(&path).unwrap();
            assert_eq!(back.grid(), v.grid());
            assert!(back
                .data()
                .iter()
                .zip(v.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));

            let m = v.threshold(0.0);
            let mpath = dir.path().join(format!("m{k}.{ext}"));
            save_mask(&m, &mpath).unwrap();
            assert_eq!(load_mask(&mpath).unwrap(), m);
        }
    }
}
