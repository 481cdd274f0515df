//! IDX files as used by MNIST: a big-endian magic (`0x00000803` for
//! `N×H×W` unsigned bytes, `0x00000801` for `N` labels), the dimension sizes
//! as big-endian `u32`, then the payload.
//!
//! Multi-channel images are stored as `N×(C·H)×W` with a sidecar
//! `<images>.json` recording channels, class count, groups and secondary
//! labels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct Sidecar {
    channels: usize,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    secondary_labels: Option<Vec<usize>>,
}

fn sidecar_path(images: &Path) -> PathBuf {
    let mut name = images.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an image/label IDX pair. Pixels are scaled by 1/255. A sidecar
/// next to the image file, when present, restores channels and metadata.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ipath, lpath) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read_file(ipath)?;
    let lb = read_file(lpath)?;

    let magic = read_u32(&ib, 0, ipath)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(ipath, format!("image magic {magic:#010x}, expected 0x00000803")));
    }
    let n = read_u32(&ib, 4, ipath)? as usize;
    let rows = read_u32(&ib, 8, ipath)? as usize;
    let cols = read_u32(&ib, 12, ipath)? as usize;
    let pixels = ib
        .get(16..)
        .filter(|p| p.len() == n * rows * cols)
        .ok_or_else(|| Error::format(ipath, format!("expected {} pixel bytes", n * rows * cols)))?;

    let magic = read_u32(&lb, 0, lpath)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(lpath, format!("label magic {magic:#010x}, expected 0x00000801")));
    }
    let nl = read_u32(&lb, 4, lpath)? as usize;
    if nl != n {
        return Err(Error::format(lpath, format!("{nl} labels for {n} images")));
    }
    let labels: Vec<usize> = lb
        .get(8..)
        .filter(|l| l.len() == n)
        .ok_or_else(|| Error::format(lpath, format!("expected {n} label bytes")))?
        .iter()
        .map(|&b| b as usize)
        .collect();

    let side = sidecar_path(ipath);
    let sidecar: Option<Sidecar> = if side.exists() {
        let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        Some(serde_json::from_slice(&text).map_err(|e| Error::format(&side, e.to_string()))?)
    } else {
        None
    };
    let channels = sidecar.as_ref().map_or(1, |s| s.channels);
    if channels == 0 || !rows.is_multiple_of(channels) {
        return Err(Error::format(&side, format!("{rows} rows do not split into {channels} channels")));
    }
    let num_classes = sidecar
        .as_ref()
        .map(|s| s.num_classes)
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new([n, channels, rows / channels, cols], data)?;
    let mut ds = LabeledDataset::new(images, labels, num_classes)?;
    if let Some(s) = sidecar {
        if let Some(g) = s.groups {
            ds = ds.with_groups(g)?;
        }
        if let Some(sec) = s.secondary_labels {
            ds = ds.with_secondary_labels(sec)?;
        }
    }
    Ok(ds)
}

/// Writes an image/label IDX pair; pixels are rounded to the nearest of 256
/// levels. A sidecar is written when the dataset has more than one channel
/// or carries groups or secondary labels.
pub fn write_idx(
    ds: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (ipath, lpath) = (images_path.as_ref(), labels_path.as_ref());
    if ds.num_classes() > 256 {
        return Err(Error::Input(format!("{} classes do not fit in label bytes", ds.num_classes())));
    }
    let [c, h, w] = ds.item_shape();
    let mut ib = Vec::with_capacity(16 + ds.images().len());
    ib.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [ds.len(), c * h, w] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    ib.extend(ds.images().data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + ds.len());
    lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lb.extend(ds.labels().iter().map(|&l| l as u8));
    fs::write(ipath, ib).map_err(|e| Error::io(ipath, e))?;
    fs::write(lpath, lb).map_err(|e| Error::io(lpath, e))?;

    let side = sidecar_path(ipath);
    if c > 1 || ds.groups().is_some() || ds.secondary_labels().is_some() {
        let sidecar = Sidecar {
            channels: c,
            num_classes: ds.num_classes(),
            groups: ds.groups().map(<[usize]>::to_vec),
            secondary_labels: ds.secondary_labels().map(<[usize]>::to_vec),
        };
        fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    } else if side.exists() {
        fs::remove_file(&side).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Saves `<dir>/<name>-images.idx` and `<dir>/<name>-labels.idx`.
pub fn save_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>, name: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_idx(
        ds,
        dir.join(format!("{name}-images.idx")),
        dir.join(format!("{name}-labels.idx")),
    )
}

pub fn load_dataset(dir: impl AsRef<Path>, name: &str) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    load_idx(
        dir.join(format!("{name}-images.idx")),
        dir.join(format!("{name}-labels.idx")),
    )
}
