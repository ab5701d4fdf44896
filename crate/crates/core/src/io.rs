//! Numbered PNG frame directories.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::sequence::FrameSequence;
use crate::tensor::Tensor;
use crate::training::PairedSequence;

/// Sort key of a frame file: the digits of its stem, then the name itself.
fn frame_key(path: &Path) -> Option<(u64, String)> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
    Some((digits.parse().ok()?, stem.to_string()))
}

/// PNG files of `dir` with a number in their name, in frame order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(key) = frame_key(&path) {
                found.push((key, path));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Contract(format!("no numbered PNG frames in {}", dir.display())));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Decodes an RGB(A) PNG into a `[3×H×W]` tensor in `[0, 1]`. 16-bit files
/// keep their precision.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (data, max): (Vec<f64>, f64) = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => (img.to_rgb16().into_raw().into_iter().map(f64::from).collect(), 65535.0),
        _ => (img.to_rgb8().into_raw().into_iter().map(f64::from).collect(), 255.0),
    };
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        data[p * 3 + c] / max
    })
}

/// Writes `[3×H×W]` as an 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn write_png(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w) = match *frame.shape() {
        [3, h, w] => (h, w),
        ref s => {
            return Err(Error::Shape {
                shape: s.to_vec(),
                reason: "PNG frames must be [3×H×W]".into(),
            })
        }
    };
    let d = frame.data();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| {
            (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_sequence(dir: &Path) -> Result<FrameSequence> {
    let frames = list_frames(dir)?
        .iter()
        .map(|p| read_png(p))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames)
}

/// File name of frame `i`.
pub fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

/// Writes `00000.png, 00001.png, …` into `dir`, creating it if needed.
pub fn write_sequence(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        write_png(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

pub const DEGRADED_DIR: &str = "degraded";
pub const CLEAN_DIR: &str = "clean";

/// Loads training pairs from `root/degraded` + `root/clean`, or from every
/// subdirectory of `root` laid out that way.
pub fn read_pairs(root: &Path) -> Result<Vec<PairedSequence>> {
    let load = |d: &Path| {
        PairedSequence::new(
            read_sequence(&d.join(DEGRADED_DIR))?,
            read_sequence(&d.join(CLEAN_DIR))?,
        )
    };
    if root.join(DEGRADED_DIR).is_dir() {
        return Ok(vec![load(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(DEGRADED_DIR).is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Contract(format!(
            "{} has no `{DEGRADED_DIR}`/`{CLEAN_DIR}` sequence pairs",
            root.display()
        )));
    }
    dirs.iter().map(|d| load(d)).collect()
}

pub fn write_pair(root: &Path, pair: &PairedSequence) -> Result<()> {
    write_sequence(&root.join(DEGRADED_DIR), &pair.degraded)?;
    write_sequence(&root.join(CLEAN_DIR), &pair.clean)
}
