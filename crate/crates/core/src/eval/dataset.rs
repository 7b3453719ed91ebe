//! Triplet datasets on disk.
//!
//! Two per-sample directory layouts are understood:
//!
//! * `root/<id>/im1.png im2.png im3.png`: a triplet with the middle frame at α = 0.5;
//! * `root/<id>/frame_NNN.png` plus `root/<id>/manifest.csv` whose rows
//!   `first,gt,last` name frame numbers; α = (gt − first) / (last − first).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_image, write_image};
use crate::tensor::{Frame, TimeStep};

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub id: String,
    pub first: Frame,
    pub gt: Frame,
    pub last: Frame,
    pub alpha: TimeStep,
}

impl TripletSample {
    pub fn new(id: impl Into<String>, first: Frame, gt: Frame, last: Frame, alpha: TimeStep) -> Result<Self> {
        let shape = first.tensor().shape();
        if gt.tensor().shape() != shape || last.tensor().shape() != shape {
            return Err(Error::invalid("triplet frames differ in shape"));
        }
        Ok(TripletSample {
            id: id.into(),
            first,
            gt,
            last,
            alpha,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetLayout {
    /// Decide per sample directory.
    #[default]
    Auto,
    Triplet,
    Sequence,
}

pub const MANIFEST: &str = "manifest.csv";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:03}.png")
}

/// Samples that loaded plus a message for every sample that did not.
#[derive(Clone, Debug, Default)]
pub struct LoadedDataset {
    pub samples: Vec<TripletSample>,
    pub failures: Vec<String>,
}

pub fn load_dataset(root: impl AsRef<Path>, layout: DatasetLayout) -> Result<LoadedDataset> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let mut out = LoadedDataset::default();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let is_triplet = match layout {
            DatasetLayout::Triplet => true,
            DatasetLayout::Sequence => false,
            DatasetLayout::Auto => !dir.join(MANIFEST).exists(),
        };
        if is_triplet {
            match load_triplet(&dir, &name) {
                Ok(s) => out.samples.push(s),
                Err(e) => out.failures.push(format!("{name}: {e}")),
            }
        } else {
            match read_manifest(&dir) {
                Ok(rows) => {
                    for (first, gt, last) in rows {
                        let id = format!("{name}:{first}-{gt}-{last}");
                        match load_from_sequence(&dir, &id, first, gt, last) {
                            Ok(s) => out.samples.push(s),
                            Err(e) => out.failures.push(format!("{id}: {e}")),
                        }
                    }
                }
                Err(e) => out.failures.push(format!("{name}: {e}")),
            }
        }
    }
    out.samples.sort_by(|a, b| a.id.cmp(&b.id));
    if !out.failures.is_empty() {
        log::warn!("{} dataset samples skipped", out.failures.len());
    }
    Ok(out)
}

fn load_triplet(dir: &Path, id: &str) -> Result<TripletSample> {
    let first = read_image(dir.join("im1.png"))?;
    let gt = read_image(dir.join("im2.png"))?;
    let last = read_image(dir.join("im3.png"))?;
    TripletSample::new(id, first, gt, last, TimeStep::HALF)
}

fn read_manifest(dir: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("first") {
            continue;
        }
        let nums: Vec<usize> = line
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&path, format!("line {}: expected first,gt,last", lineno + 1)))?;
        match nums[..] {
            [a, b, c] => rows.push((a, b, c)),
            _ => {
                return Err(Error::format(
                    &path,
                    format!("line {}: expected 3 frame numbers", lineno + 1),
                ))
            }
        }
    }
    Ok(rows)
}

/// α of a middle frame between two outer frame numbers.
pub fn alpha_from_indices(first: usize, gt: usize, last: usize) -> Result<TimeStep> {
    if !(first < gt && gt < last) {
        return Err(Error::invalid(format!(
            "frame numbers {first},{gt},{last} must be strictly increasing"
        )));
    }
    TimeStep::new((gt - first) as f64 / (last - first) as f64)
}

fn load_from_sequence(dir: &Path, id: &str, first: usize, gt: usize, last: usize) -> Result<TripletSample> {
    let alpha = alpha_from_indices(first, gt, last)?;
    TripletSample::new(
        id,
        read_image(dir.join(frame_file_name(first)))?,
        read_image(dir.join(frame_file_name(gt)))?,
        read_image(dir.join(frame_file_name(last)))?,
        alpha,
    )
}

/// Writes a triplet directory (`im1.png`, `im2.png`, `im3.png`).
pub fn write_triplet(dir: impl AsRef<Path>, frames: &[Frame; 3]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, f) in frames.iter().enumerate() {
        write_image(f, dir.join(format!("im{}.png", k + 1)))?;
    }
    Ok(())
}

/// Writes a sequence directory with `frame_NNN.png` (numbered from 1) and a manifest.
pub fn write_sequence(dir: impl AsRef<Path>, frames: &[Frame], rows: &[(usize, usize, usize)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, f) in frames.iter().enumerate() {
        write_image(f, dir.join(frame_file_name(k + 1)))?;
    }
    let mut manifest = String::from("first,gt,last\n");
    for (a, b, c) in rows {
        manifest.push_str(&format!("{a},{b},{c}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize) -> Vec<Frame> {
        (0..n).map(|k| Frame::filled(8, 8, 3, (k * 20) as f64 / 255.0).unwrap()).collect()
    }

    #[test]
    fn empty_root() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(dir.path(), DatasetLayout::Auto).unwrap();
        assert!(ds.samples.is_empty() && ds.failures.is_empty());
        assert!(load_dataset(dir.path().join("nope"), DatasetLayout::Auto).is_err());
    }

    #[test]
    fn triplets_are_half_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let f = frames(3);
        for id in ["b", "a", "c"] {
            write_triplet(dir.path().join(id), &[f[0].clone(), f[1].clone(), f[2].clone()]).unwrap();
        }
        let ds = load_dataset(dir.path(), DatasetLayout::Auto).unwrap();
        let ids: Vec<_> = ds.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(ds.samples.iter().all(|s| s.alpha == TimeStep::HALF));
    }

    #[test]
    fn manifest_alphas() {
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path().join("seq"), &frames(7), &[(1, 3, 5), (1, 2, 5)]).unwrap();
        let ds = load_dataset(dir.path(), DatasetLayout::Auto).unwrap();
        let alphas: Vec<(String, f64)> = ds.samples.iter().map(|s| (s.id.clone(), s.alpha.value())).collect();
        assert_eq!(
            alphas,
            [("seq:1-2-5".to_string(), 0.25), ("seq:1-3-5".to_string(), 0.5)]
        );
        assert_eq!(ds.samples[0].gt, frames(7)[1]);
    }

    #[test]
    fn missing_files_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let f = frames(3);
        write_triplet(dir.path().join("ok"), &[f[0].clone(), f[1].clone(), f[2].clone()]).unwrap();
        fs::create_dir_all(dir.path().join("broken")).unwrap();
        write_sequence(dir.path().join("seq"), &frames(3), &[(1, 2, 3), (1, 2, 9), (3, 2, 1)]).unwrap();
        let ds = load_dataset(dir.path(), DatasetLayout::Auto).unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.failures.len(), 3, "{:?}", ds.failures);
        assert!(ds.failures.iter().any(|f| f.contains("im1.png")));
    }
}
