//! Deterministic rasterization of interaction graphs to grayscale images,
//! stored as binary PGM (P5).
//!
//! The raster is a pure scatter: no axes, gridlines, or anti-aliasing, so
//! identical graphs always produce bit-identical images. Pixel value 0 is
//! white background, 1 is full point mass; y points up in graph space while
//! image rows grow downward.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClassLabel;
use crate::screen::InteractionGraph;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed pgm: {0}")]
    MalformedPgm(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Intensity accumulation when stamping points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityMode {
    /// Covered pixels are set to 1.
    Binary,
    /// Each stamp adds 0.25, clamped to 1, so point multiplicity shows as
    /// darker mass.
    AdditiveSaturating,
}

/// Increment per stamp in [`IntensityMode::AdditiveSaturating`].
pub const ADDITIVE_STEP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    /// Square image edge in pixels.
    pub size: usize,
    /// Disc radius stamped per point, in pixels; 0 stamps one pixel.
    pub marker_radius: usize,
    pub intensity_mode: IntensityMode,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            size: 64,
            marker_radius: 1,
            intensity_mode: IntensityMode::AdditiveSaturating,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<(), RasterError> {
        if self.size < 16 {
            return Err(RasterError::Manifest(format!(
                "raster size {} below minimum 16",
                self.size
            )));
        }
        Ok(())
    }
}

/// Row-major grayscale raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    /// Carried into the PGM comment line: reference firm, period, label.
    pub meta: ImageMeta,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageMeta {
    pub reference_firm: String,
    pub period_tag: String,
    pub class_label: Option<ClassLabel>,
}

impl GrayscaleImage {
    pub fn blank(width: usize, height: usize) -> Self {
        GrayscaleImage {
            width,
            height,
            pixels: vec![0.0; width * height],
            meta: ImageMeta::default(),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// Rasterize a graph onto a `size x size` grid.
///
/// Point (x, y) lands on column `round(x*(size-1))` and row
/// `round((1-y)*(size-1))`, then stamps a filled disc of `marker_radius`.
pub fn rasterize(g: &InteractionGraph, cfg: &RasterConfig) -> GrayscaleImage {
    assert!(!g.points.is_empty(), "rasterize needs a nonempty graph");
    let size = cfg.size;
    let mut img = GrayscaleImage::blank(size, size);
    img.meta = ImageMeta {
        reference_firm: g.reference_firm.clone(),
        period_tag: g.period_tag.clone(),
        class_label: Some(g.class_label),
    };

    let scale = (size - 1) as f64;
    let r = cfg.marker_radius as i64;
    for p in &g.points {
        let col = (p.x.clamp(0.0, 1.0) * scale).round() as i64;
        let row = ((1.0 - p.y.clamp(0.0, 1.0)) * scale).round() as i64;
        for dr in -r..=r {
            for dc in -r..=r {
                if dr * dr + dc * dc > r * r {
                    continue;
                }
                let (rr, cc) = (row + dr, col + dc);
                if rr < 0 || cc < 0 || rr >= size as i64 || cc >= size as i64 {
                    continue;
                }
                let px = &mut img.pixels[rr as usize * size + cc as usize];
                match cfg.intensity_mode {
                    IntensityMode::Binary => *px = 1.0,
                    IntensityMode::AdditiveSaturating => *px = (*px + ADDITIVE_STEP).min(1.0),
                }
            }
        }
    }
    img
}

/// Rasterize a batch of graphs, with `jobs` worker threads when > 1.
/// Output order always matches input order, so results are identical for
/// any worker count.
pub fn rasterize_all(
    graphs: &[InteractionGraph],
    cfg: &RasterConfig,
    jobs: usize,
) -> Vec<GrayscaleImage> {
    use rayon::prelude::*;
    if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| graphs.par_iter().map(|g| rasterize(g, cfg)).collect())
    } else {
        graphs.iter().map(|g| rasterize(g, cfg)).collect()
    }
}

/// Write a binary PGM (P5, maxval 255) with one metadata comment line.
/// Pixel p is stored as round(p * 255).
pub fn write_pgm(img: &GrayscaleImage, path: &Path) -> Result<(), RasterError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let label = img
        .meta
        .class_label
        .map(|l| l.to_string())
        .unwrap_or_else(|| "-".to_string());
    write!(
        out,
        "P5\n# ref={} period={} label={}\n{} {}\n255\n",
        sanitize(&img.meta.reference_firm),
        sanitize(&img.meta.period_tag),
        label,
        img.width,
        img.height
    )?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

fn sanitize(s: &str) -> String {
    if s.is_empty() {
        "-".to_string()
    } else {
        s.replace([' ', '\n', '\r'], "_")
    }
}

/// Read a binary PGM written by [`write_pgm`] (or any P5 with maxval 255).
pub fn read_pgm(path: &Path) -> Result<GrayscaleImage, RasterError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    parse_pgm(&raw)
}

fn parse_pgm(raw: &[u8]) -> Result<GrayscaleImage, RasterError> {
    let mut pos = 0usize;
    let mut meta = ImageMeta::default();

    let magic = take_token(raw, &mut pos, &mut meta)?;
    if magic != "P5" {
        return Err(RasterError::MalformedPgm(format!(
            "expected magic P5, got '{magic}'"
        )));
    }
    let width: usize = parse_token(raw, &mut pos, &mut meta, "width")?;
    let height: usize = parse_token(raw, &mut pos, &mut meta, "height")?;
    let maxval: usize = parse_token(raw, &mut pos, &mut meta, "maxval")?;
    if maxval != 255 {
        return Err(RasterError::MalformedPgm(format!(
            "unsupported maxval {maxval}, expected 255"
        )));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(RasterError::MalformedPgm("missing header terminator".into()));
    }
    pos += 1;

    let expected = width * height;
    let data = &raw[pos..];
    if data.len() != expected {
        return Err(RasterError::MalformedPgm(format!(
            "expected {expected} pixel bytes, found {}",
            data.len()
        )));
    }
    Ok(GrayscaleImage {
        width,
        height,
        pixels: data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        meta,
    })
}

fn parse_token<T: std::str::FromStr>(
    raw: &[u8],
    pos: &mut usize,
    meta: &mut ImageMeta,
    what: &str,
) -> Result<T, RasterError> {
    take_token(raw, pos, meta)?
        .parse()
        .map_err(|_| RasterError::MalformedPgm(format!("invalid {what}")))
}

/// Next whitespace-delimited header token, consuming `#` comment lines and
/// recovering the metadata we wrote into them.
fn take_token(raw: &[u8], pos: &mut usize, meta: &mut ImageMeta) -> Result<String, RasterError> {
    loop {
        while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos >= raw.len() {
            return Err(RasterError::MalformedPgm("truncated header".into()));
        }
        if raw[*pos] == b'#' {
            let start = *pos;
            while *pos < raw.len() && raw[*pos] != b'\n' {
                *pos += 1;
            }
            let comment = String::from_utf8_lossy(&raw[start..*pos]);
            for part in comment.trim_start_matches('#').split_whitespace() {
                if let Some(v) = part.strip_prefix("ref=") {
                    meta.reference_firm = v.to_string();
                } else if let Some(v) = part.strip_prefix("period=") {
                    meta.period_tag = v.to_string();
                } else if let Some(v) = part.strip_prefix("label=") {
                    meta.class_label = v.parse::<u8>().ok().and_then(ClassLabel::from_binary);
                }
            }
            continue;
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        return Ok(String::from_utf8_lossy(&raw[start..*pos]).into_owned());
    }
}

/// One corpus entry: an image file, its label, and a source tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: ClassLabel,
    pub source: String,
}

/// Write the corpus manifest (columns: path,label,source). Paths are
/// interpreted relative to the manifest's directory.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), RasterError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "path,label,source")?;
    for e in entries {
        writeln!(out, "{},{},{}", e.path, e.label, e.source)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, RasterError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| RasterError::Manifest(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| RasterError::Manifest(e.to_string()))?;
        let get = |j: usize, name: &str| {
            record
                .get(j)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .ok_or_else(|| RasterError::Manifest(format!("row {}: missing {name}", i + 2)))
        };
        let path = get(0, "path")?;
        let label_raw = get(1, "label")?;
        let label = label_raw
            .parse::<u8>()
            .ok()
            .and_then(ClassLabel::from_binary)
            .ok_or_else(|| {
                RasterError::Manifest(format!("row {}: label '{label_raw}' must be 1 or 0", i + 2))
            })?;
        let source = get(2, "source").unwrap_or_else(|_| "unknown".into());
        entries.push(ManifestEntry {
            path,
            label,
            source,
        });
    }
    if entries.is_empty() {
        return Err(RasterError::Manifest(format!(
            "{}: manifest has no entries",
            path.display()
        )));
    }
    Ok(entries)
}

/// Load every image referenced by a manifest, resolving paths relative to
/// the manifest location. Returns (image, label) pairs in manifest order.
pub fn load_manifest_images(
    manifest_path: &Path,
) -> Result<Vec<(GrayscaleImage, ClassLabel)>, RasterError> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    entries
        .iter()
        .map(|e| {
            let p = base.join(&e.path);
            Ok((read_pgm(&p)?, e.label))
        })
        .collect()
}
