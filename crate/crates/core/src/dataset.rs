//! Mask and annotation types, the binary PGM mask format, and JSON-lines
//! dataset manifests.
//!
//! Pixel centers sit at integer coordinates: pixel `(col, row)` has center
//! `(col as f64, row as f64)`.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::synth::InstrumentPose;

pub const BACKGROUND: u8 = 0;
pub const SHAFT: u8 = 1;
pub const WRIST: u8 = 2;
pub const GRIPPER: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Masks must be divisible by this in both dimensions.
pub const DIM_MULTIPLE: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("invalid label {label} at pixel ({x}, {y})")]
    InvalidLabel { label: u8, x: usize, y: usize },
    #[error("mask dimensions {width}x{height} are not divisible by {DIM_MULTIPLE}")]
    DimensionNotDivisible { width: usize, height: usize },
    #[error("label buffer has {got} bytes, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("duplicate frame id {0:?}")]
    DuplicateId(String),
    #[error("mask file {0} referenced by the manifest does not exist")]
    DanglingMaskPath(PathBuf),
    #[error("manifest line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Part-level segmentation mask, row-major, one label byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl PartMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || width % DIM_MULTIPLE != 0 || height % DIM_MULTIPLE != 0 {
            return Err(DatasetError::DimensionNotDivisible { width, height });
        }
        if labels.len() != width * height {
            return Err(DatasetError::LengthMismatch {
                expected: width * height,
                got: labels.len(),
            });
        }
        check_labels(width, &labels)?;
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn background(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![BACKGROUND; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Writes a label. Panics on an out-of-range label so the label invariant
    /// can never be broken through this type.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        assert!((label as usize) < NUM_CLASSES, "label {label} out of range");
        self.labels[y * self.width + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Pixel coordinates `(x, y)` carrying `label`, in row-major order.
    pub fn pixels_with(&self, label: u8) -> Vec<(usize, usize)> {
        let w = self.width;
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| (i % w, i / w))
            .collect()
    }

    /// Binary indicator grid for one class.
    pub fn indicator(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }
}

fn check_labels(width: usize, labels: &[u8]) -> Result<()> {
    if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(DatasetError::InvalidLabel {
            label: labels[i],
            x: i % width,
            y: i / width,
        });
    }
    Ok(())
}

/// A 2D point in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Left and right gripper tips.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TipPair {
    pub left: Point,
    pub right: Point,
}

impl TipPair {
    pub const fn new(left: Point, right: Point) -> Self {
        Self { left, right }
    }

    pub fn swapped(self) -> Self {
        Self {
            left: self.right,
            right: self.left,
        }
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        let inside = |p: Point| p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64;
        inside(self.left) && inside(self.right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest line. `mask` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub mask: PathBuf,
    pub tips: TipPair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<InstrumentPose>,
    pub split: Split,
}

/// Serializes a mask as binary PGM (`P5`, maxval 255) with raw label bytes.
pub fn encode_mask(mask: &PartMask) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", mask.width, mask.height);
    let mut out = Vec::with_capacity(header.len() + mask.labels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&mask.labels);
    out
}

pub fn write_mask(mask: &PartMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // PartMask can only hold valid labels, but a re-check keeps the file
    // contract independent of how the value was built.
    check_labels(mask.width, &mask.labels)?;
    fs::write(path, encode_mask(mask)).map_err(io_err(path))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<PartMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_mask(&bytes)
}

/// Parses a binary PGM produced by [`encode_mask`] or any conforming writer
/// (comments and arbitrary whitespace between header fields are accepted).
pub fn decode_mask(bytes: &[u8]) -> Result<PartMask> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(DatasetError::MalformedHeader(format!(
            "expected magic P5, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_header_number(bytes, &mut pos, "width")?;
    let height = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(DatasetError::MalformedHeader(format!(
            "unsupported maxval {maxval}, only 255 is accepted"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(DatasetError::MalformedHeader("missing raster separator".into())),
    }
    if width == 0 || height == 0 {
        return Err(DatasetError::MalformedHeader("zero dimension".into()));
    }
    let raster = &bytes[pos..];
    if raster.len() != width * height {
        return Err(DatasetError::MalformedHeader(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            width * height
        )));
    }
    if width % DIM_MULTIPLE != 0 || height % DIM_MULTIPLE != 0 {
        return Err(DatasetError::DimensionNotDivisible { width, height });
    }
    check_labels(width, raster)?;
    Ok(PartMask {
        width,
        height,
        labels: raster.to_vec(),
    })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(DatasetError::MalformedHeader("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DatasetError::MalformedHeader(format!("bad {what} field")))
}

fn check_unique(records: &[FrameRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(DatasetError::DuplicateId(r.id.clone()));
        }
    }
    Ok(())
}

fn check_masks_exist(records: &[FrameRecord], base: &Path) -> Result<()> {
    for r in records {
        let p = base.join(&r.mask);
        if !p.is_file() {
            return Err(DatasetError::DanglingMaskPath(p));
        }
    }
    Ok(())
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

/// Writes one JSON object per line. Mask paths are resolved against the
/// manifest's directory and must already exist.
pub fn write_manifest(records: &[FrameRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_unique(records)?;
    check_masks_exist(records, manifest_dir(path))?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (i, r) in records.iter().enumerate() {
        serde_json::to_writer(&mut w, r).map_err(|source| DatasetError::Json { line: i + 1, source })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: i + 1, source })?;
        records.push(rec);
    }
    check_unique(&records)?;
    check_masks_exist(&records, manifest_dir(path))?;
    Ok(records)
}

/// A manifest together with the directory its mask paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<FrameRecord>,
}

impl Dataset {
    /// Opens either a manifest file or a directory containing `manifest.jsonl`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        let records = read_manifest(&manifest)?;
        Ok(Self {
            root: manifest_dir(&manifest).to_path_buf(),
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&FrameRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn mask_path(&self, rec: &FrameRecord) -> PathBuf {
        self.root.join(&rec.mask)
    }

    pub fn load_mask(&self, rec: &FrameRecord) -> Result<PartMask> {
        read_mask(self.mask_path(rec))
    }
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_mask_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let m = PartMask::background(160, 128).unwrap();
        write_mask(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n160 128\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 20480);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn invalid_label_rejected_before_write() {
        let mut labels = vec![0u8; 16 * 16];
        labels[17] = 7;
        assert!(matches!(
            PartMask::new(16, 16, labels.clone()),
            Err(DatasetError::InvalidLabel { label: 7, x: 1, y: 1 })
        ));
        // a raw file carrying the bad byte is rejected on read as well
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        let mut bytes = b"P5\n16 16\n255\n".to_vec();
        bytes.extend_from_slice(&labels);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_mask(&p), Err(DatasetError::InvalidLabel { label: 7, .. })));
    }

    #[test]
    fn sixteen_bit_maxval_is_malformed() {
        let mut bytes = b"P5\n16 16\n65535\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(16 * 16 * 2));
        assert!(matches!(decode_mask(&bytes), Err(DatasetError::MalformedHeader(_))));
    }

    #[test]
    fn non_divisible_dimensions() {
        let mut bytes = b"P5\n160 130\n255\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(160 * 130));
        assert!(matches!(
            decode_mask(&bytes),
            Err(DatasetError::DimensionNotDivisible { width: 160, height: 130 })
        ));
    }

    #[test]
    fn header_comments_and_bad_magic() {
        let mut bytes = b"P5\n# made by hand\n16 16\n255\n".to_vec();
        bytes.extend(std::iter::repeat(2u8).take(256));
        assert_eq!(decode_mask(&bytes).unwrap().count(WRIST), 256);
        let mut p2 = b"P2\n16 16\n255\n".to_vec();
        p2.extend(std::iter::repeat(0u8).take(256));
        assert!(matches!(decode_mask(&p2), Err(DatasetError::MalformedHeader(_))));
        assert!(matches!(decode_mask(b"P5\n16"), Err(DatasetError::MalformedHeader(_))));
    }

    fn record(dir: &Path, id: &str, split: Split) -> FrameRecord {
        let rel = PathBuf::from(format!("{id}.pgm"));
        write_mask(&PartMask::background(16, 16).unwrap(), dir.join(&rel)).unwrap();
        FrameRecord {
            id: id.into(),
            mask: rel,
            tips: TipPair::new(Point::new(1.0 / 3.0, std::f64::consts::E), Point::new(9.123456789012, 0.1)),
            pose: None,
            split,
        }
    }

    #[test]
    fn manifest_roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_manifest(&path).unwrap().is_empty());

        let recs = vec![
            record(dir.path(), "a", Split::Train),
            record(dir.path(), "b", Split::Val),
            record(dir.path(), "c", Split::Test),
        ];
        write_manifest(&recs, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"tips\":{\"left\":["));
        assert_eq!(read_manifest(&path).unwrap(), recs);
    }

    #[test]
    fn duplicate_ids_and_dangling_masks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let a = record(dir.path(), "a", Split::Train);
        let line = serde_json::to_string(&a).unwrap();
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(read_manifest(&path), Err(DatasetError::DuplicateId(id)) if id == "a"));
        assert!(matches!(
            write_manifest(&[a.clone(), a.clone()], &path),
            Err(DatasetError::DuplicateId(_))
        ));

        let mut dangling = a;
        dangling.mask = "missing.pgm".into();
        assert!(matches!(
            write_manifest(&[dangling], &path),
            Err(DatasetError::DanglingMaskPath(_))
        ));
    }
}
