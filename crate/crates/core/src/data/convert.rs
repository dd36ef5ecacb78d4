use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;

use super::coco::load_gray;
use crate::error::{Error, Result};

pub const JPEG_QUALITY: u8 = 95;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConversionReport {
    pub converted: Vec<PathBuf>,
    pub errors: Vec<(PathBuf, String)>,
}

impl ConversionReport {
    pub fn count(&self) -> usize {
        self.converted.len()
    }
}

fn is_tiff(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"))
}

/// Re-encodes every TIFF in `src_dir` as an 8-bit grayscale JPEG in `dst_dir`.
///
/// Files are processed in name order; unreadable files are recorded in the
/// report and do not stop the conversion.
pub fn convert_images(src_dir: &Path, dst_dir: &Path) -> Result<ConversionReport> {
    let mut files: Vec<PathBuf> = fs::read_dir(src_dir)
        .map_err(|e| Error::io(src_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_tiff(p))
        .collect();
    files.sort();
    fs::create_dir_all(dst_dir).map_err(|e| Error::io(dst_dir, e))?;

    let mut report = ConversionReport::default();
    if files.is_empty() {
        log::warn!("no TIFF files found in {}", src_dir.display());
        return Ok(report);
    }
    for src in files {
        let dst = dst_dir.join(src.with_extension("jpg").file_name().expect("file has a name"));
        match convert_one(&src, &dst) {
            Ok(()) => report.converted.push(dst),
            Err(e) => {
                log::warn!("skipping {}: {e}", src.display());
                report.errors.push((src, e.to_string()));
            }
        }
    }
    Ok(report)
}

fn convert_one(src: &Path, dst: &Path) -> Result<()> {
    let pixels = load_gray(src)?;
    let (h, w) = pixels.dim();
    let raw: Vec<u8> = pixels.iter().copied().collect();
    let file = fs::File::create(dst).map_err(|e| Error::io(dst, e))?;
    let mut enc = JpegEncoder::new_with_quality(std::io::BufWriter::new(file), JPEG_QUALITY);
    enc.encode(&raw, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Load {
            path: dst.to_path_buf(),
            reason: e.to_string(),
        })
}
