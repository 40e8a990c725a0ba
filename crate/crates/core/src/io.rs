//! Volume and mask files.
//!
//! Two on-disk formats are understood:
//! * NIfTI-1 single-file images (`.nii`, optionally gzip-compressed as
//!   `.nii.gz`). Only the subset needed here is handled: 3D data, common
//!   scalar datatypes, either byte order, and `scl_slope`/`scl_inter`.
//! * A raw format: little-endian `f32` voxels in row-major (H, W, S) order
//!   next to a JSON sidecar `{shape, spacing, id}`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask3D, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DESCRIP_PREFIX: &str = "vcaptcha id=";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// `a/b/x_pseudo.nii.gz` → `a/b/x_pseudo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = strip_known_ext(&name);
    path.with_file_name(format!("{stem}.json"))
}

fn strip_known_ext(name: &str) -> &str {
    for ext in [".nii.gz", ".nii", ".raw", ".f32"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s;
        }
    }
    name
}

fn default_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = strip_known_ext(&name);
    stem.strip_suffix("_image").unwrap_or(stem).to_string()
}

fn is_raw(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("raw") | Some("f32")
    )
}

fn is_gz(path: &Path) -> bool {
    path.to_string_lossy().ends_with(".gz")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub id: String,
}

/// Loads a volume from NIfTI-1 or the raw format, chosen by extension.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (data, spacing, id) = if is_raw(path) {
        read_raw(path)?
    } else {
        let bytes = read_bytes(path)?;
        let img = decode_nifti(&bytes).map_err(|m| Error::ingestion(path, m))?;
        let id = img.id.unwrap_or_else(|| default_id(path));
        (img.data, img.spacing, id)
    };
    Volume::new(id, data, spacing).map_err(|e| match e {
        Error::InvalidVolume(m) => Error::ingestion(path, m),
        other => other,
    })
}

/// Writes `v`; `.raw`/`.f32` paths use the raw format, everything else NIfTI-1.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_raw(path) {
        return write_raw(v, path);
    }
    let bytes = encode_nifti(
        v.data().shape(),
        v.spacing(),
        Some(v.id()),
        DT_FLOAT32,
        |buf| {
            for &x in fortran_iter(v.data()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        },
    );
    write_bytes(path, &bytes)
}

/// Loads a binary mask; any nonzero voxel counts as foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    let path = path.as_ref();
    let data = if is_raw(path) {
        read_raw(path)?.0
    } else {
        let bytes = read_bytes(path)?;
        decode_nifti(&bytes)
            .map_err(|m| Error::ingestion(path, m))?
            .data
    };
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::ingestion(path, "non-finite intensity"));
    }
    Ok(Mask3D::from_array(data.mapv(|x| u8::from(x != 0.0)))?)
}

/// Writes a mask as uint8 NIfTI-1.
pub fn save_mask(m: &Mask3D, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_nifti(m.data().shape(), spacing, None, DT_UINT8, |buf| {
        buf.extend(fortran_iter(m.data()).copied());
    });
    write_bytes(path.as_ref(), &bytes)
}

/// Writes a float map (probabilities, disagreement) as float32 NIfTI-1.
pub fn save_map(data: &Array3<f32>, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_nifti(data.shape(), spacing, None, DT_FLOAT32, |buf| {
        for &x in fortran_iter(data) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    });
    write_bytes(path.as_ref(), &bytes)
}

/// NIfTI stores the first axis fastest.
fn fortran_iter<T>(a: &Array3<T>) -> impl Iterator<Item = &T> {
    a.t().into_iter()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::ingestion(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if is_gz(path) {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = GzEncoder::new(file, flate2::Compression::fast());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
        Ok(())
    } else {
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

struct NiftiImage {
    data: Array3<f32>,
    spacing: [f64; 3],
    id: Option<String>,
}

fn encode_nifti(
    shape: &[usize],
    spacing: [f64; 3],
    id: Option<&str>,
    datatype: i16,
    fill: impl FnOnce(&mut Vec<u8>),
) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r'; // regular
    let dims = [3i16, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    let bitpix: i16 = if datatype == DT_UINT8 { 8 } else { 32 };
    LittleEndian::write_i16(&mut h[70..72], datatype);
    LittleEndian::write_i16(&mut h[72..74], bitpix);
    let pixdim = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 2 | 8; // xyzt_units: mm, s
    if let Some(id) = id {
        let text = format!("{DESCRIP_PREFIX}{id}");
        let n = text.len().min(79);
        h[148..148 + n].copy_from_slice(&text.as_bytes()[..n]);
    }
    // sform: diagonal scaling
    LittleEndian::write_i16(&mut h[254..256], 1);
    for (row, s) in spacing.iter().enumerate() {
        let base = 280 + 16 * row;
        LittleEndian::write_f32(&mut h[base + 4 * row..base + 4 * row + 4], *s as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    fill(&mut h);
    h
}

fn decode_nifti(bytes: &[u8]) -> std::result::Result<NiftiImage, String> {
    if bytes.len() < HEADER_SIZE {
        return Err("truncated header".into());
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(bytes)
    } else {
        Err("not a NIfTI-1 file (bad sizeof_hdr)".into())
    }
}

fn decode_with<B: ByteOrder>(bytes: &[u8]) -> std::result::Result<NiftiImage, String> {
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err("unsupported NIfTI magic (expected single-file n+1)".into());
    }
    let dim: Vec<i16> = (0..8).map(|i| B::read_i16(&bytes[40 + 2 * i..42 + 2 * i])).collect();
    let ndim = dim[0];
    let trailing_ok = (4..=7).all(|k| k as i16 > ndim || dim[k] <= 1);
    if !(3..=7).contains(&ndim) || !trailing_ok {
        return Err(format!("non-3D data (dim = {:?})", &dim[..(ndim.clamp(0, 7) as usize + 1)]));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(format!("invalid extents {:?}", &dim[1..4]));
    }
    let (h, w, s) = (dim[1] as usize, dim[2] as usize, dim[3] as usize);
    let datatype = B::read_i16(&bytes[70..72]);
    let pix: Vec<f32> = (0..4).map(|i| B::read_f32(&bytes[76 + 4 * i..80 + 4 * i])).collect();
    let spacing = [pix[1].abs() as f64, pix[2].abs() as f64, pix[3].abs() as f64];
    let spacing = spacing.map(|x| if x > 0.0 && x.is_finite() { x } else { 1.0 });
    let offset = B::read_f32(&bytes[108..112]) as usize;
    let slope = B::read_f32(&bytes[112..116]);
    let inter = B::read_f32(&bytes[116..120]);

    let n = h * w * s;
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype {other}")),
    };
    let start = offset.max(HEADER_SIZE);
    let end = start + n * width;
    if bytes.len() < end {
        return Err(format!(
            "truncated voxel data: need {} bytes, file has {}",
            end,
            bytes.len()
        ));
    }
    let body = &bytes[start..end];
    let values: Vec<f32> = match datatype {
        DT_UINT8 => body.iter().map(|&b| b as f32).collect(),
        DT_INT8 => body.iter().map(|&b| b as i8 as f32).collect(),
        DT_INT16 => body.chunks_exact(2).map(|c| B::read_i16(c) as f32).collect(),
        DT_UINT16 => body.chunks_exact(2).map(|c| B::read_u16(c) as f32).collect(),
        DT_INT32 => body.chunks_exact(4).map(|c| B::read_i32(c) as f32).collect(),
        DT_UINT32 => body.chunks_exact(4).map(|c| B::read_u32(c) as f32).collect(),
        DT_FLOAT32 => body.chunks_exact(4).map(B::read_f32).collect(),
        _ => body.chunks_exact(8).map(|c| B::read_f64(c) as f32).collect(),
    };
    let scaled: Vec<f32> = if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        values.into_iter().map(|v| v * slope + inter).collect()
    } else {
        values
    };
    // first axis fastest on disk
    let data = Array3::from_shape_vec((s, w, h), scaled)
        .map_err(|e| e.to_string())?
        .reversed_axes()
        .as_standard_layout()
        .into_owned();

    let descrip = &bytes[148..228];
    let text_end = descrip.iter().position(|&b| b == 0).unwrap_or(descrip.len());
    let id = std::str::from_utf8(&descrip[..text_end])
        .ok()
        .and_then(|t| t.strip_prefix(DESCRIP_PREFIX))
        .map(str::to_string);
    Ok(NiftiImage { data, spacing, id })
}

fn read_raw(path: &Path) -> Result<(Array3<f32>, [f64; 3], String)> {
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: RawSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::ingestion(&side_path, format!("sidecar: {e}")))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [h, w, s] = side.shape;
    if bytes.len() != h * w * s * 4 {
        return Err(Error::ingestion(
            path,
            format!(
                "raw size {} does not match shape {:?} (expected {} bytes)",
                bytes.len(),
                side.shape,
                h * w * s * 4
            ),
        ));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(LittleEndian::read_f32).collect();
    let data = Array3::from_shape_vec((h, w, s), values)
        .map_err(|e| Error::ingestion(path, e.to_string()))?;
    Ok((data, side.spacing, side.id))
}

fn write_raw(v: &Volume, path: &Path) -> Result<()> {
    let (h, w, s) = v.shape();
    let mut bytes = Vec::with_capacity(h * w * s * 4);
    for &x in v.data().iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &bytes)?;
    let side = RawSidecar {
        shape: [h, w, s],
        spacing: v.spacing(),
        id: v.id().to_string(),
    };
    let side_path = sidecar_path(path);
    fs::write(&side_path, serde_json::to_string_pretty(&side)?)
        .map_err(|e| Error::io(&side_path, e))
}
