//! Volume files and the line-delimited metric log.
//!
//! `VOL1`: magic, `u32` C, H, W, D, then `f32` voxels, all little-endian.
//! `LBL1`: magic, `u32` H, W, D, then one `u8` per voxel.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::data::SegmentationSample;
use super::metrics::MetricsRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const VOL_MAGIC: &[u8; 4] = b"VOL1";
const LBL_MAGIC: &[u8; 4] = b"LBL1";

fn header(magic: &[u8; 4], dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = magic.to_vec();
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Data(format!("dimension {d} does not fit in u32")))?;
        out.extend(d.to_le_bytes());
    }
    Ok(out)
}

fn parse_header(
    bytes: &[u8],
    magic: &[u8; 4],
    ndims: usize,
    path: &Path,
) -> Result<(Vec<usize>, usize)> {
    let head = 4 + 4 * ndims;
    if bytes.len() < head || &bytes[..4] != magic {
        return Err(Error::Data(format!(
            "{} is not a {} file",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let dims = (0..ndims)
        .map(|i| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        })
        .collect();
    Ok((dims, head))
}

pub fn write_volume(path: &Path, image: &Tensor<f64>) -> Result<()> {
    if image.rank() != 4 {
        return Err(Error::Data(format!(
            "volume must be C×H×W×D, got {:?}",
            image.shape()
        )));
    }
    let mut bytes = header(VOL_MAGIC, image.shape())?;
    for &v in image.data() {
        bytes.extend((v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, head) = parse_header(&bytes, VOL_MAGIC, 4, path)?;
    let n: usize = dims.iter().product();
    let body = &bytes[head..];
    if body.len() != 4 * n {
        return Err(Error::Data(format!(
            "{}: expected {} voxels, found {} bytes",
            path.display(),
            n,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn write_labels(path: &Path, label: &[u8], dims: [usize; 3]) -> Result<()> {
    if label.len() != dims.iter().product::<usize>() {
        return Err(Error::Data(format!(
            "{} labels do not fill {dims:?}",
            label.len()
        )));
    }
    let mut bytes = header(LBL_MAGIC, &dims)?;
    bytes.extend_from_slice(label);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, head) = parse_header(&bytes, LBL_MAGIC, 3, path)?;
    let dims = [dims[0], dims[1], dims[2]];
    let body = &bytes[head..];
    if body.len() != dims.iter().product::<usize>() {
        return Err(Error::Data(format!(
            "{}: label payload has {} bytes for {dims:?}",
            path.display(),
            body.len()
        )));
    }
    Ok((dims, body.to_vec()))
}

fn sample_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("sample_{i:04}.vol")),
        dir.join(format!("sample_{i:04}.lbl")),
    )
}

/// Writes `sample_NNNN.vol` / `sample_NNNN.lbl` pairs.
pub fn save_dataset(dir: &Path, samples: &[SegmentationSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let (vol, lbl) = sample_paths(dir, i);
        write_volume(&vol, &s.image)?;
        write_labels(&lbl, &s.label, s.dims())?;
    }
    Ok(())
}

/// Reads consecutive `sample_NNNN` pairs starting at zero.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegmentationSample>> {
    let mut out = Vec::new();
    loop {
        let (vol, lbl) = sample_paths(dir, out.len());
        if !vol.exists() {
            break;
        }
        let image = read_volume(&vol)?;
        let (dims, label) = read_labels(&lbl)?;
        if image.shape()[1..] != dims {
            return Err(Error::Data(format!(
                "{} and {} disagree on dimensions",
                vol.display(),
                lbl.display()
            )));
        }
        out.push(SegmentationSample::new(image, label)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no sample_0000.vol in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Appends one JSON object per line.
pub struct MetricLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricLog {
    /// Truncates any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
