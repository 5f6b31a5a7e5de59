//! MetaImage (.mhd + .raw) reading and writing.
//!
//! Text header with a fixed key order, LF line endings, little-endian raw
//! payload in a sibling `.raw` file. Supported element types are
//! `MET_FLOAT` (scalar volumes) and `MET_UCHAR` (labels and masks).
//! Direction/orientation keys are not supported; grids are canonical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

use super::{Dims, LabelVolume, MaskVolume, Spacing, Volume};

/// A grid read back from disk, before committing to an interpretation of
/// the byte payload.
#[derive(Debug, Clone)]
pub enum MetaImage {
    Float(Volume),
    Byte { dims: Dims, spacing: Spacing, bytes: Vec<u8> },
}

impl MetaImage {
    pub fn dims(&self) -> Dims {
        match self {
            MetaImage::Float(v) => v.dims(),
            MetaImage::Byte { dims, .. } => *dims,
        }
    }

    pub fn spacing(&self) -> Spacing {
        match self {
            MetaImage::Float(v) => v.spacing(),
            MetaImage::Byte { spacing, .. } => *spacing,
        }
    }

    pub fn into_volume(self) -> Result<Volume> {
        match self {
            MetaImage::Float(v) => Ok(v),
            MetaImage::Byte { .. } => {
                Err(Error::InvalidVolume("expected MET_FLOAT payload, found MET_UCHAR".into()))
            }
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            MetaImage::Byte { dims, spacing, bytes } => LabelVolume::new(dims, spacing, bytes),
            MetaImage::Float(_) => {
                Err(Error::InvalidVolume("expected MET_UCHAR payload, found MET_FLOAT".into()))
            }
        }
    }

    /// Strict conversion: every byte must be 0 or 1.
    pub fn into_mask(self) -> Result<MaskVolume> {
        match self {
            MetaImage::Byte { dims, spacing, bytes } => {
                if let Some(&b) = bytes.iter().find(|&&b| b > 1) {
                    return Err(Error::InvalidVolume(format!("mask byte {b} is not 0/1")));
                }
                MaskVolume::new(dims, spacing, bytes.into_iter().map(|b| b != 0).collect())
            }
            MetaImage::Float(_) => {
                Err(Error::InvalidVolume("expected MET_UCHAR payload, found MET_FLOAT".into()))
            }
        }
    }
}

const KEY_ORDER: [&str; 6] =
    ["ObjectType", "NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile"];

fn raw_path(mhd_path: &Path) -> PathBuf {
    mhd_path.with_extension("raw")
}

fn raw_file_name(mhd_path: &Path) -> Result<String> {
    let raw = raw_path(mhd_path);
    raw.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::header(mhd_path, "cannot derive raw file name"))
}

fn write_header(path: &Path, dims: Dims, spacing: Spacing, element_type: &str) -> Result<()> {
    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str("NDims = 3\n");
    header.push_str(&format!("DimSize = {} {} {}\n", dims.nx, dims.ny, dims.nz));
    header.push_str(&format!("ElementSpacing = {} {} {}\n", spacing.sx, spacing.sy, spacing.sz));
    header.push_str(&format!("ElementType = {element_type}\n"));
    header.push_str(&format!("ElementDataFile = {}\n", raw_file_name(path)?));
    fs::write(path, header.as_bytes()).map_err(|e| Error::io(path, e))
}

fn write_raw(path: &Path, payload: &[u8]) -> Result<()> {
    let raw = raw_path(path);
    let mut f = fs::File::create(&raw).map_err(|e| Error::io(&raw, e))?;
    f.write_all(payload).map_err(|e| Error::io(&raw, e))
}

impl Volume {
    /// Write as MET_FLOAT, little-endian 32-bit.
    pub fn write_metaimage(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_header(path, self.dims(), self.spacing(), "MET_FLOAT")?;
        let mut payload = Vec::with_capacity(self.values().len() * 4);
        for v in self.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_raw(path, &payload)
    }
}

impl LabelVolume {
    /// Write as MET_UCHAR, one byte per voxel.
    pub fn write_metaimage(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_header(path, self.dims(), self.spacing(), "MET_UCHAR")?;
        write_raw(path, self.labels())
    }
}

impl MaskVolume {
    /// Write as MET_UCHAR with 1 for true, 0 for false.
    pub fn write_metaimage(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_header(path, self.dims(), self.spacing(), "MET_UCHAR")?;
        let payload: Vec<u8> = self.bits().iter().map(|&b| b as u8).collect();
        write_raw(path, &payload)
    }
}

/// Read a MetaImage header plus raw payload.
pub fn read_metaimage(path: impl AsRef<Path>) -> Result<MetaImage> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut object_type = None;
    let mut ndims = None;
    let mut dim_size = None;
    let mut spacing = None;
    let mut element_type = None;
    let mut data_file = None;

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::header(path, format!("line {}: missing '='", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "ObjectType" => object_type = Some(value.to_owned()),
            "NDims" => ndims = Some(value.to_owned()),
            "DimSize" => dim_size = Some(value.to_owned()),
            "ElementSpacing" => spacing = Some(value.to_owned()),
            "ElementType" => element_type = Some(value.to_owned()),
            "ElementDataFile" => data_file = Some(value.to_owned()),
            other => return Err(Error::header(path, format!("unknown key '{other}'"))),
        }
    }

    for (key, present) in KEY_ORDER.iter().zip([
        object_type.is_some(),
        ndims.is_some(),
        dim_size.is_some(),
        spacing.is_some(),
        element_type.is_some(),
        data_file.is_some(),
    ]) {
        if !present {
            return Err(Error::header(path, format!("missing key '{key}'")));
        }
    }

    let object_type = object_type.unwrap();
    if object_type != "Image" {
        return Err(Error::header(path, format!("ObjectType '{object_type}' is not Image")));
    }
    let ndims = ndims.unwrap();
    if ndims != "3" {
        return Err(Error::header(path, format!("NDims {ndims} is not 3")));
    }

    let dims = parse_triple::<usize>(&dim_size.unwrap())
        .map_err(|r| Error::header(path, format!("DimSize: {r}")))?;
    let dims = Dims::new(dims[0], dims[1], dims[2]);
    let sp = parse_triple::<f64>(&spacing.unwrap())
        .map_err(|r| Error::header(path, format!("ElementSpacing: {r}")))?;
    let spacing = Spacing::new(sp[0], sp[1], sp[2]);

    let data_file = data_file.unwrap();
    let raw = match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(&data_file),
        _ => PathBuf::from(&data_file),
    };
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;

    match element_type.unwrap().as_str() {
        "MET_FLOAT" => {
            if payload.len() != dims.count() * 4 {
                return Err(Error::DataSize { expected: dims.count(), actual: payload.len() / 4 });
            }
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(MetaImage::Float(Volume::new(dims, spacing, values)?))
        }
        "MET_UCHAR" => {
            if payload.len() != dims.count() {
                return Err(Error::DataSize { expected: dims.count(), actual: payload.len() });
            }
            Ok(MetaImage::Byte { dims, spacing, bytes: payload })
        }
        other => Err(Error::header(path, format!("unsupported ElementType '{other}'"))),
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(format!("expected 3 fields, got {}", parts.len()));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("cannot parse '{p}'"))?);
    }
    Ok(out.try_into().map_err(|_| "triple").unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_volume_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zero.mhd");
        let v = Volume::filled(Dims::new(2, 2, 2), Spacing::isotropic(1.0), 0.0).unwrap();
        v.write_metaimage(&p).unwrap();
        let back = read_metaimage(&p).unwrap().into_volume().unwrap();
        assert_eq!(back.dims(), Dims::new(2, 2, 2));
        assert!(back.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn raw_payload_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let vp = dir.path().join("v.mhd");
        Volume::filled(Dims::new(2, 2, 2), Spacing::isotropic(1.0), 1.5)
            .unwrap()
            .write_metaimage(&vp)
            .unwrap();
        assert_eq!(fs::metadata(dir.path().join("v.raw")).unwrap().len(), 32);

        let lp = dir.path().join("l.mhd");
        LabelVolume::new(Dims::new(3, 3, 3), Spacing::isotropic(1.0), vec![0; 27])
            .unwrap()
            .write_metaimage(&lp)
            .unwrap();
        assert_eq!(fs::metadata(dir.path().join("l.raw")).unwrap().len(), 27);
    }

    #[test]
    fn hand_written_single_voxel_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.mhd");
        let header = "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\n\
                      ElementSpacing = 0.7 0.7 0.6\nElementType = MET_FLOAT\n\
                      ElementDataFile = one.raw\n";
        fs::write(&p, header).unwrap();
        fs::write(dir.path().join("one.raw"), 100.0f32.to_le_bytes()).unwrap();

        let v = read_metaimage(&p).unwrap().into_volume().unwrap();
        assert_eq!(v.dims(), Dims::new(1, 1, 1));
        assert_eq!(v.spacing(), Spacing::new(0.7, 0.7, 0.6));
        assert_eq!(v.values(), &[100.0]);
    }

    #[test]
    fn header_key_order_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.mhd");
        Volume::filled(Dims::new(1, 1, 1), Spacing::isotropic(1.0), 0.0)
            .unwrap()
            .write_metaimage(&p)
            .unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let keys: Vec<&str> =
            text.lines().map(|l| l.split_once('=').unwrap().0.trim()).collect();
        assert_eq!(keys, KEY_ORDER);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.mhd");
        fs::write(
            &p,
            "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 1 1\n\
             ElementType = MET_FLOAT\nElementDataFile = u.raw\nCompressedData = False\n",
        )
        .unwrap();
        fs::write(dir.path().join("u.raw"), 0.0f32.to_le_bytes()).unwrap();
        assert!(matches!(read_metaimage(&p), Err(Error::Header { .. })));
    }

    #[test]
    fn missing_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mhd");
        fs::write(&p, "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\n").unwrap();
        assert!(matches!(read_metaimage(&p), Err(Error::Header { .. })));
    }

    #[test]
    fn unsupported_element_type_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.mhd");
        fs::write(
            &p,
            "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 1 1\n\
             ElementType = MET_SHORT\nElementDataFile = s.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("s.raw"), [0u8, 0]).unwrap();
        assert!(matches!(read_metaimage(&p), Err(Error::Header { .. })));
    }

    #[test]
    fn payload_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mhd");
        fs::write(
            &p,
            "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\n\
             ElementType = MET_UCHAR\nElementDataFile = c.raw\n",
        )
        .unwrap();
        fs::write(dir.path().join("c.raw"), [0u8; 7]).unwrap();
        assert!(matches!(read_metaimage(&p), Err(Error::DataSize { expected: 8, actual: 7 })));
    }

    #[test]
    fn mask_bytes_must_be_binary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.mhd");
        LabelVolume::new(Dims::new(1, 1, 2), Spacing::isotropic(1.0), vec![0, 2])
            .unwrap()
            .write_metaimage(&p)
            .unwrap();
        assert!(read_metaimage(&p).unwrap().into_mask().is_err());
    }
}
