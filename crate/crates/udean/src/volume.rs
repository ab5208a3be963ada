//! 3D volume type, intensity normalization, and persistence.
//!
//! Two on-disk formats are supported: single-frame float32 NIfTI-1 and a
//! raw little-endian f32 payload with a small text sidecar header. Both
//! round-trip data and metadata exactly. In memory intensities are held
//! at f64 so downstream frequency-domain checks keep full precision.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::{Error, Result};

/// Anatomical axis label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisLabel {
    /// Left-right.
    LeftRight,
    /// Anterior-posterior.
    AnteriorPosterior,
    /// Head-feet.
    HeadFeet,
}

impl AxisLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            AxisLabel::LeftRight => "L-R",
            AxisLabel::AnteriorPosterior => "A-P",
            AxisLabel::HeadFeet => "H-F",
        }
    }

    pub fn parse(s: &str) -> Option<AxisLabel> {
        match s {
            "L-R" => Some(AxisLabel::LeftRight),
            "A-P" => Some(AxisLabel::AnteriorPosterior),
            "H-F" => Some(AxisLabel::HeadFeet),
            _ => None,
        }
    }
}

impl fmt::Display for AxisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_AXES: [AxisLabel; 3] =
    [AxisLabel::LeftRight, AxisLabel::AnteriorPosterior, AxisLabel::HeadFeet];

/// A 3D scalar intensity grid with voxel spacing and axis labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeImage {
    pub data: Array3<f64>,
    /// mm per voxel along each axis.
    pub spacing: [f64; 3],
    pub axis_labels: [AxisLabel; 3],
    /// (min, max) observed before normalization.
    pub intensity_range: (f64, f64),
}

/// Supported on-disk volume encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti1,
    RawF32,
}

impl VolumeFormat {
    /// Pick a format from a file extension (`.nii` vs `.f32`).
    pub fn from_path(path: &Path) -> Result<VolumeFormat> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => Ok(VolumeFormat::Nifti1),
            Some("f32") => Ok(VolumeFormat::RawF32),
            other => Err(Error::format(
                path,
                format!("unrecognized volume extension {other:?} (expected .nii or .f32)"),
            )),
        }
    }
}

impl VolumeImage {
    pub fn new(data: Array3<f64>) -> VolumeImage {
        let range = intensity_bounds(&data);
        VolumeImage {
            data,
            spacing: [1.0, 1.0, 1.0],
            axis_labels: DEFAULT_AXES,
            intensity_range: range,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Index of the axis carrying the given anatomical label.
    pub fn axis_index(&self, label: AxisLabel) -> Result<usize> {
        self.axis_labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::Numeric(format!("volume has no {label} axis")))
    }

    /// Error out on the first non-finite voxel, if any.
    pub fn check_finite(&self) -> Result<()> {
        for ((x, y, z), v) in self.data.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteVoxel(x, y, z));
            }
        }
        Ok(())
    }
}

fn intensity_bounds(data: &Array3<f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if data.is_empty() {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

/// Affinely rescale intensities to [0, 1], recording the original range.
/// Constant volumes map to all-zeros.
pub fn normalize_unit_range(v: &VolumeImage) -> Result<VolumeImage> {
    v.check_finite()?;
    let (lo, hi) = intensity_bounds(&v.data);
    let data = if hi > lo {
        v.data.mapv(|x| (x - lo) / (hi - lo))
    } else {
        Array3::zeros(v.data.dim())
    };
    Ok(VolumeImage {
        data,
        spacing: v.spacing,
        axis_labels: v.axis_labels,
        intensity_range: (lo, hi),
    })
}

/// Load a volume in the given format.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<VolumeImage> {
    let v = match format {
        VolumeFormat::Nifti1 => load_nifti(path)?,
        VolumeFormat::RawF32 => load_raw(path)?,
    };
    v.check_finite()?;
    Ok(v)
}

/// Save a volume in the given format (intensities stored as f32).
pub fn save_volume(v: &VolumeImage, path: &Path, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Nifti1 => save_nifti(v, path),
        VolumeFormat::RawF32 => save_raw(v, path),
    }
}

// ---------------------------------------------------------------------------
// NIfTI-1 (single frame, float32, little endian)
// ---------------------------------------------------------------------------

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_DT_FLOAT32: i16 = 16;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn save_nifti(v: &VolumeImage, path: &Path) -> Result<()> {
    let (nx, ny, nz) = v.shape();
    let mut hdr = vec![0u8; NIFTI_HEADER_LEN + 4];
    put_i32(&mut hdr, 0, NIFTI_HEADER_LEN as i32);
    hdr[38] = b'r'; // regular
    put_i16(&mut hdr, 40, 3);
    put_i16(&mut hdr, 42, nx as i16);
    put_i16(&mut hdr, 44, ny as i16);
    put_i16(&mut hdr, 46, nz as i16);
    for k in 0..4 {
        put_i16(&mut hdr, 48 + 2 * k, 1);
    }
    put_i16(&mut hdr, 70, NIFTI_DT_FLOAT32);
    put_i16(&mut hdr, 72, 32);
    put_f32(&mut hdr, 76, 1.0); // qfac
    put_f32(&mut hdr, 80, v.spacing[0] as f32);
    put_f32(&mut hdr, 84, v.spacing[1] as f32);
    put_f32(&mut hdr, 88, v.spacing[2] as f32);
    put_f32(&mut hdr, 108, (NIFTI_HEADER_LEN + 4) as f32); // vox_offset
    put_f32(&mut hdr, 112, 1.0); // scl_slope
    put_f32(&mut hdr, 116, 0.0); // scl_inter
    hdr[123] = 2; // xyzt_units: mm
    put_f32(&mut hdr, 124, v.intensity_range.1 as f32); // cal_max
    put_f32(&mut hdr, 128, v.intensity_range.0 as f32); // cal_min
    let descrip = format!(
        "axes={},{},{}",
        v.axis_labels[0], v.axis_labels[1], v.axis_labels[2]
    );
    let db = descrip.as_bytes();
    hdr[148..148 + db.len().min(80)].copy_from_slice(&db[..db.len().min(80)]);
    put_i16(&mut hdr, 254, 1); // sform_code
    put_f32(&mut hdr, 280, v.spacing[0] as f32); // srow_x
    put_f32(&mut hdr, 300, v.spacing[1] as f32); // srow_y[1]
    put_f32(&mut hdr, 320, v.spacing[2] as f32); // srow_z[2]
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut payload = Vec::with_capacity(nx * ny * nz * 4);
    // NIfTI stores x fastest.
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                payload.extend_from_slice(&(v.data[[x, y, z]] as f32).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&hdr).map_err(|e| Error::io(path, e))?;
    f.write_all(&payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_nifti(path: &Path) -> Result<VolumeImage> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let sizeof_hdr = get_i32(&buf, 0);
    if sizeof_hdr != NIFTI_HEADER_LEN as i32 {
        if sizeof_hdr.swap_bytes() == NIFTI_HEADER_LEN as i32 {
            return Err(Error::format(path, "big-endian NIfTI files are not supported"));
        }
        return Err(Error::format(path, format!("bad sizeof_hdr {sizeof_hdr}")));
    }
    let magic = &buf[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::format(path, "missing NIfTI magic"));
    }
    let ndim = get_i16(&buf, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("bad dim[0] = {ndim}")));
    }
    let nx = get_i16(&buf, 42).max(1) as usize;
    let ny = get_i16(&buf, 44).max(1) as usize;
    let nz = get_i16(&buf, 46).max(1) as usize;
    for k in 3..ndim as usize {
        let extra = get_i16(&buf, 40 + 2 * (k + 1));
        if extra > 1 {
            return Err(Error::format(path, "multi-frame NIfTI volumes are not supported"));
        }
    }
    let datatype = get_i16(&buf, 70);
    if datatype != NIFTI_DT_FLOAT32 {
        return Err(Error::format(path, format!("unsupported datatype {datatype} (float32 only)")));
    }
    let vox_offset = get_f32(&buf, 108) as usize;
    let expected = nx * ny * nz;
    let available = buf.len().saturating_sub(vox_offset) / 4;
    if available != expected {
        return Err(Error::format(
            path,
            format!("shape/header mismatch: header implies {expected} voxels, payload has {available}"),
        ));
    }
    let slope = get_f32(&buf, 112);
    let inter = get_f32(&buf, 116);
    let apply_scaling = slope != 0.0 && !(slope == 1.0 && inter == 0.0);

    let spacing = [get_f32(&buf, 80) as f64, get_f32(&buf, 84) as f64, get_f32(&buf, 88) as f64];
    let cal_max = get_f32(&buf, 124) as f64;
    let cal_min = get_f32(&buf, 128) as f64;

    let descrip = String::from_utf8_lossy(&buf[148..228]);
    let axis_labels = parse_axes(descrip.trim_end_matches('\0')).unwrap_or(DEFAULT_AXES);

    let mut data = Array3::zeros((nx, ny, nz));
    let mut off = vox_offset;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let raw = get_f32(&buf, off) as f64;
                data[[x, y, z]] = if apply_scaling {
                    slope as f64 * raw + inter as f64
                } else {
                    raw
                };
                off += 4;
            }
        }
    }
    let intensity_range = if cal_min == 0.0 && cal_max == 0.0 {
        intensity_bounds(&data)
    } else {
        (cal_min, cal_max)
    };
    Ok(VolumeImage {
        data,
        spacing: [
            if spacing[0] > 0.0 { spacing[0] } else { 1.0 },
            if spacing[1] > 0.0 { spacing[1] } else { 1.0 },
            if spacing[2] > 0.0 { spacing[2] } else { 1.0 },
        ],
        axis_labels,
        intensity_range,
    })
}

fn parse_axes(descrip: &str) -> Option<[AxisLabel; 3]> {
    let rest = descrip.strip_prefix("axes=")?;
    let mut parts = rest.split(',');
    let a = AxisLabel::parse(parts.next()?.trim())?;
    let b = AxisLabel::parse(parts.next()?.trim())?;
    let c = AxisLabel::parse(parts.next()?.trim())?;
    Some([a, b, c])
}

// ---------------------------------------------------------------------------
// raw-f32 + text sidecar
// ---------------------------------------------------------------------------

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    std::path::PathBuf::from(s)
}

fn save_raw(v: &VolumeImage, path: &Path) -> Result<()> {
    let (nx, ny, nz) = v.shape();
    let sidecar = format!(
        "udean-raw 1\nshape {} {} {}\nspacing {} {} {}\naxes {} {} {}\nrange {} {}\norder c\n",
        nx,
        ny,
        nz,
        v.spacing[0],
        v.spacing[1],
        v.spacing[2],
        v.axis_labels[0],
        v.axis_labels[1],
        v.axis_labels[2],
        v.intensity_range.0,
        v.intensity_range.1,
    );
    fs::write(sidecar_path(path), sidecar).map_err(|e| Error::io(path, e))?;
    let mut payload = Vec::with_capacity(nx * ny * nz * 4);
    for &val in v.data.iter() {
        payload.extend_from_slice(&(val as f32).to_le_bytes());
    }
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

fn load_raw(path: &Path) -> Result<VolumeImage> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut spacing = [1.0f64; 3];
    let mut axes = DEFAULT_AXES;
    let mut range: Option<(f64, f64)> = None;
    for (ln, line) in text.lines().enumerate() {
        let mut toks = line.split_whitespace();
        let Some(key) = toks.next() else { continue };
        let rest: Vec<&str> = toks.collect();
        let bad = |what: &str| Error::format(&sidecar, format!("line {}: bad {what}", ln + 1));
        match key {
            "udean-raw" => {
                if rest.first() != Some(&"1") {
                    return Err(Error::format(&sidecar, "unsupported sidecar version"));
                }
            }
            "shape" => {
                if rest.len() != 3 {
                    return Err(bad("shape"));
                }
                let p = |s: &str| s.parse::<usize>().map_err(|_| bad("shape"));
                shape = Some((p(rest[0])?, p(rest[1])?, p(rest[2])?));
            }
            "spacing" => {
                if rest.len() != 3 {
                    return Err(bad("spacing"));
                }
                for (i, s) in rest.iter().enumerate() {
                    spacing[i] = s.parse().map_err(|_| bad("spacing"))?;
                }
            }
            "axes" => {
                if rest.len() != 3 {
                    return Err(bad("axes"));
                }
                for (i, s) in rest.iter().enumerate() {
                    axes[i] = AxisLabel::parse(s).ok_or_else(|| bad("axes"))?;
                }
            }
            "range" => {
                if rest.len() != 2 {
                    return Err(bad("range"));
                }
                range = Some((
                    rest[0].parse().map_err(|_| bad("range"))?,
                    rest[1].parse().map_err(|_| bad("range"))?,
                ));
            }
            "order" => {
                if rest.first() != Some(&"c") {
                    return Err(Error::format(&sidecar, "only C element order is supported"));
                }
            }
            _ => return Err(Error::format(&sidecar, format!("unknown sidecar key {key}"))),
        }
    }
    let (nx, ny, nz) = shape.ok_or_else(|| Error::format(&sidecar, "missing shape"))?;
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    if payload.len() != nx * ny * nz * 4 {
        return Err(Error::format(
            path,
            format!(
                "shape/header mismatch: header says {}x{}x{} ({} floats) but payload has {}",
                nx,
                ny,
                nz,
                nx * ny * nz,
                payload.len() / 4
            ),
        ));
    }
    let mut data = Array3::zeros((nx, ny, nz));
    for (i, v) in data.iter_mut().enumerate() {
        let off = i * 4;
        *v = f32::from_le_bytes([payload[off], payload[off + 1], payload[off + 2], payload[off + 3]])
            as f64;
    }
    let intensity_range = range.unwrap_or_else(|| intensity_bounds(&data));
    Ok(VolumeImage { data, spacing, axis_labels: axes, intensity_range })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn sample_volume() -> VolumeImage {
        let data = Array3::from_shape_fn((8, 8, 4), |(x, y, z)| {
            ((x as f64 * 0.37 + y as f64 * 0.11 - z as f64 * 0.05) * 100.0).round() / 128.0
        });
        VolumeImage {
            data,
            spacing: [0.7, 0.7, 1.4],
            axis_labels: [AxisLabel::AnteriorPosterior, AxisLabel::LeftRight, AxisLabel::HeadFeet],
            intensity_range: (0.0, 3.0),
        }
    }

    #[test]
    fn normalize_affine_map() {
        let mut v = VolumeImage::new(Array3::zeros((3, 1, 1)));
        v.data[[0, 0, 0]] = 2.0;
        v.data[[1, 0, 0]] = 4.0;
        v.data[[2, 0, 0]] = 6.0;
        let n = normalize_unit_range(&v).unwrap();
        assert_eq!(n.data[[0, 0, 0]], 0.0);
        assert_eq!(n.data[[1, 0, 0]], 0.5);
        assert_eq!(n.data[[2, 0, 0]], 1.0);
        assert_eq!(n.intensity_range, (2.0, 6.0));
    }

    #[test]
    fn normalize_identity_on_unit_range() {
        let mut data = Array3::zeros((4, 4, 2));
        data[[0, 0, 0]] = 1.0;
        data[[1, 2, 1]] = 0.25;
        let v = VolumeImage::new(data.clone());
        let n = normalize_unit_range(&v).unwrap();
        assert_eq!(n.data, data);
    }

    #[test]
    fn normalize_constant_to_zeros() {
        let v = VolumeImage::new(Array3::from_elem((3, 3, 3), 5.0));
        let n = normalize_unit_range(&v).unwrap();
        assert!(n.data.iter().all(|&x| x == 0.0));
        assert_eq!(n.intensity_range, (5.0, 5.0));
    }

    #[test]
    fn normalize_idempotent_on_nonconstant() {
        let v = sample_volume();
        let n1 = normalize_unit_range(&v).unwrap();
        let n2 = normalize_unit_range(&n1).unwrap();
        assert_eq!(n1.data, n2.data);
    }

    #[test]
    fn nifti_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        let v = sample_volume();
        save_volume(&v, &path, VolumeFormat::Nifti1).unwrap();
        let r = load_volume(&path, VolumeFormat::Nifti1).unwrap();
        // Stored as f32, so compare against the f32-quantized original.
        let quant = v.data.mapv(|x| x as f32 as f64);
        assert_eq!(r.data, quant);
        assert_eq!(r.axis_labels, v.axis_labels);
        assert!((r.spacing[0] - 0.7).abs() < 1e-6);
        assert!((r.spacing[2] - 1.4).abs() < 1e-6);
        // Saving the loaded volume again is bit-identical.
        let path2 = dir.path().join("vol2.nii");
        save_volume(&r, &path2, VolumeFormat::Nifti1).unwrap();
        let r2 = load_volume(&path2, VolumeFormat::Nifti1).unwrap();
        assert_eq!(r.data, r2.data);
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.f32");
        let v = sample_volume();
        save_volume(&v, &path, VolumeFormat::RawF32).unwrap();
        let r = load_volume(&path, VolumeFormat::RawF32).unwrap();
        assert_eq!(r.data, v.data.mapv(|x| x as f32 as f64));
        assert_eq!(r.spacing, v.spacing);
        assert_eq!(r.axis_labels, v.axis_labels);
        assert_eq!(r.intensity_range, v.intensity_range);
    }

    #[test]
    fn raw_zeros_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("z.f32");
        let v = VolumeImage::new(Array3::zeros((8, 8, 4)));
        save_volume(&v, &path, VolumeFormat::RawF32).unwrap();
        let r = load_volume(&path, VolumeFormat::RawF32).unwrap();
        assert_eq!(r.shape(), (8, 8, 4));
        assert!(r.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn raw_payload_shape_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.f32");
        fs::write(sidecar_path(&path), "udean-raw 1\nshape 8 8 4\n").unwrap();
        fs::write(&path, vec![0u8; 200 * 4]).unwrap();
        let err = load_volume(&path, VolumeFormat::RawF32).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got {err}");
        assert!(err.to_string().contains("mismatch"));
    }

    #[test]
    fn non_finite_rejected_with_index() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.f32");
        let mut v = VolumeImage::new(Array3::zeros((4, 4, 2)));
        v.data[[2, 1, 1]] = f64::NAN;
        save_volume(&v, &path, VolumeFormat::RawF32).unwrap();
        let err = load_volume(&path, VolumeFormat::RawF32).unwrap_err();
        match err {
            Error::NonFiniteVoxel(x, y, z) => assert_eq!((x, y, z), (2, 1, 1)),
            other => panic!("unexpected error {other}"),
        }
    }
}
