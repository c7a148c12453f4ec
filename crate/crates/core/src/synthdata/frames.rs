//! Loader for real datasets stored as frame directories.
//!
//! Layout: `root/<person>/<camera>/<sequence>/<frame files>`, frames ordered
//! by file name. A split file assigns persons to `train` or `test`, one
//! `person<TAB>train|test` per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub person: String,
    pub camera: String,
    pub sequence: String,
    /// `[T, 3, h, w]`, values in `[0, 1]`.
    pub frames: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameDataset {
    pub sequences: Vec<FrameSequence>,
    pub split: BTreeMap<String, Split>,
}

impl FrameDataset {
    /// Sorted person ids assigned to `split`.
    pub fn persons(&self, split: Split) -> Vec<String> {
        self.split.iter().filter(|(_, &s)| s == split).map(|(p, _)| p.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub height: usize,
    pub width: usize,
    /// Sequences with fewer frames are dropped (0 keeps everything).
    pub min_length: usize,
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::file(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::file(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Decodes one image file into `[3, h, w]` in `[0, 1]`, resizing if needed.
pub fn load_frame(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?.to_rgb8();
    let img = if img.dimensions() == (width as u32, height as u32) {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    };
    let mut data = vec![0.0; 3 * height * width];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * height + y as usize) * width + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new([3, height, width], data)
}

/// Parses a split file.
pub fn parse_split(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut split = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::file(path, format!("line {}: expected `person<TAB>train|test`", n + 1));
        let (person, which) = line.split_once('\t').ok_or_else(bad)?;
        let which = match which.trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad()),
        };
        split.insert(person.trim().to_string(), which);
    }
    Ok(split)
}

/// Loads every sequence under `root`. Without a split file all persons are
/// treated as test persons.
pub fn load_frame_dirs(root: &Path, split: Option<&Path>, opts: LoadOptions) -> Result<FrameDataset> {
    if !root.is_dir() {
        return Err(Error::file(root, "dataset root is not a directory"));
    }
    let mut sequences = Vec::new();
    let mut persons = Vec::new();
    for person_dir in sorted_entries(root, true)? {
        let person = name(&person_dir);
        persons.push(person.clone());
        for camera_dir in sorted_entries(&person_dir, true)? {
            for seq_dir in sorted_entries(&camera_dir, true)? {
                let files = sorted_entries(&seq_dir, false)?;
                if files.is_empty() || files.len() < opts.min_length {
                    continue;
                }
                let mut data = Vec::with_capacity(files.len() * 3 * opts.height * opts.width);
                for f in &files {
                    data.extend_from_slice(load_frame(f, opts.height, opts.width)?.data());
                }
                sequences.push(FrameSequence {
                    person: person.clone(),
                    camera: name(&camera_dir),
                    sequence: name(&seq_dir),
                    frames: Tensor::new([files.len(), 3, opts.height, opts.width], data)?,
                });
            }
        }
    }
    let split = match split {
        Some(p) => parse_split(p)?,
        None => persons.into_iter().map(|p| (p, Split::Test)).collect(),
    };
    Ok(FrameDataset { sequences, split })
}
