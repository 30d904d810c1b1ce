//! On-disk sequences: one directory per sequence holding `00000001.png`,
//! `00000002.png`, ... and `groundtruth.txt` with one `x,y,w,h` line per
//! frame.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::sampling::crop::Frame;
use crate::sampling::SequenceRecord;
use crate::types::BBox;

pub const GROUNDTRUTH: &str = "groundtruth.txt";

pub fn frame_file_name(index: usize) -> String {
    format!("{:08}.png", index + 1)
}

/// Formats boxes as `x,y,w,h` lines using shortest round-trip floats.
pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, w, h] = b.to_xywh();
        s.push_str(&format!("{x},{y},{w},{h}\n"));
    }
    s
}

/// Parses `x,y,w,h` lines (commas, tabs or spaces); blank lines and `#`
/// comments are skipped, as are columns after the fourth.
pub fn parse_boxes(text: &str, origin: &Path) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .take(4)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        if vals.len() != 4 {
            return Err(Error::Data(format!("{}:{}: expected x,y,w,h", origin.display(), n + 1)));
        }
        out.push(BBox::from_xywh(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text, path)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let rgb = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Frame::new(rgb)
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w, _) = frame.rgb.dim();
    let raw = frame.rgb.as_standard_layout().iter().copied().collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::shape("frame buffer size"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_sequence(root: &Path, record: &SequenceRecord) -> Result<PathBuf> {
    let dir = root.join(&record.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (t, f) in record.frames.iter().enumerate() {
        write_frame(&dir.join(frame_file_name(t)), f)?;
    }
    write_boxes(&dir.join(GROUNDTRUTH), &record.boxes)?;
    Ok(dir)
}

pub fn write_dataset(root: &Path, records: &[SequenceRecord]) -> Result<()> {
    for r in records {
        write_sequence(root, r)?;
    }
    Ok(())
}

/// Frame image files of a sequence directory, sorted by name.
fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    v.sort();
    Ok(v)
}

pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let gt = dir.join(GROUNDTRUTH);
    if !gt.is_file() {
        return Err(Error::Data(format!("{} is missing", gt.display())));
    }
    let boxes = read_boxes(&gt)?;
    let paths = frame_paths(dir)?;
    if paths.len() != boxes.len() {
        return Err(Error::Data(format!(
            "{}: {} frames but {} ground-truth lines",
            dir.display(),
            paths.len(),
            boxes.len()
        )));
    }
    let frames = paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    SequenceRecord::new(name, frames, boxes)
}

/// Sequence directories under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} not found", root.display())));
    }
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Loads every sequence under `root`; sequences that fail to load are
/// skipped with a warning.
pub fn load_dataset(root: &Path) -> Result<Vec<SequenceRecord>> {
    let mut out = Vec::new();
    for dir in list_sequences(root)? {
        match load_sequence(&dir) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("skipping {}: {e}", dir.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no usable sequences in {}", root.display())));
    }
    Ok(out)
}
