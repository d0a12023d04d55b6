//! Image files and dataset directories.
//!
//! Binary PGM (`P5`) and PPM (`P6`) with maxval 255 are parsed by hand so
//! that malformed files are reported with the byte offset of the problem.
//! 8-bit non-interlaced grayscale or RGB PNG files are decoded with `png`.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Interleaved RGB bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "gray image {width}x{height} needs {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "rgb image {width}x{height} needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One channel as a plane.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Image {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Image {
    pub fn size(&self) -> (usize, usize) {
        match self {
            Image::Gray(g) => (g.width, g.height),
            Image::Rgb(c) => (c.width, c.height),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads a PGM, PPM or PNG file.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    if is_png(path) {
        decode_png(&bytes, path)
    } else {
        decode_pnm(&bytes, path)
    }
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    match load_image(path)? {
        Image::Gray(g) => Ok(g),
        Image::Rgb(_) => Err(Error::Data(format!("{}: expected a single-channel image", path.display()))),
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    match load_image(path)? {
        Image::Rgb(c) => Ok(c),
        Image::Gray(_) => Err(Error::Data(format!("{}: expected an RGB image", path.display()))),
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderReader<'_> {
    fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments running to the end of the line.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.bytes.get(start) {
                None => self.error(start, format!("file ends before {what}")),
                Some(b) => self.error(start, format!("expected {what}, found byte 0x{b:02x}")),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse()
            .map_err(|_| self.error(start, format!("{what} {text} is out of range")))
    }
}

/// Decodes binary PGM (`P5`) or PPM (`P6`) data with maxval 255.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut r = HeaderReader { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(r.error(0, "expected magic number P5 or P6")),
    };
    r.pos = 2;
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(r.error(2, "expected whitespace after magic number"));
    }
    let width_at = r.pos;
    let width = r.number("width")?;
    let height = r.number("height")?;
    if width == 0 || height == 0 {
        return Err(r.error(width_at, format!("image size {width}x{height} is empty")));
    }
    let maxval_at = {
        r.skip_separators();
        r.pos
    };
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(r.error(maxval_at, format!("maxval {maxval} is not supported, only 255")));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        Some(_) => return Err(r.error(r.pos, "expected a single whitespace byte after maxval")),
        None => return Err(r.error(r.pos, "file ends before pixel data")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| r.error(width_at, "image size overflows"))?;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(r.error(
            bytes.len(),
            format!("truncated pixel data: expected {need} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(r.error(r.pos + need, format!("{} unexpected bytes after pixel data", payload.len() - need)));
    }
    let data = payload.to_vec();
    Ok(if channels == 1 {
        Image::Gray(GrayImage { width, height, data })
    } else {
        Image::Rgb(RgbImage { width, height, data })
    })
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| err(format!("png: {e}")))?;
    let info = reader.info();
    if info.interlaced {
        return Err(err("interlaced PNG is not supported".into()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(err(format!("PNG bit depth {:?} is not supported, only 8", info.bit_depth)));
    }
    let color = info.color_type;
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader.output_buffer_size().ok_or_else(|| err("PNG image is too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| err(format!("png: {e}")))?;
    buf.truncate(frame.buffer_size());
    match color {
        png::ColorType::Grayscale => Ok(Image::Gray(GrayImage::new(width, height, buf)?)),
        png::ColorType::Rgb => Ok(Image::Rgb(RgbImage::new(width, height, buf)?)),
        other => Err(err(format!("PNG color type {other:?} is not supported, only gray or RGB"))),
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn save_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_file(path, &encode_pgm(img))
}

pub fn save_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &encode_ppm(img))
}

/// Quantizes a map in [0, 1] to bytes, rounding to nearest.
pub fn quantize(map: &[f64]) -> Vec<u8> {
    map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes a `[0, 1]` map as an 8-bit PGM.
pub fn save_gray(path: &Path, map: &[f64], width: usize, height: usize) -> Result<()> {
    if map.len() != width * height {
        return Err(Error::Data(format!("map has {} values for a {width}x{height} image", map.len())));
    }
    save_pgm(path, &GrayImage::new(width, height, quantize(map))?)
}

/// A dataset directory with `rgb/`, `depth/` and (optionally) `gt/`
/// subdirectories whose files are paired by stem.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub stem: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub gt: Option<PathBuf>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["pgm", "ppm", "pnm", "png"];

/// Image files of a directory keyed by stem, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if !ext_ok || !path.is_file() {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.push((stem, path));
    }
    out.sort();
    for pair in out.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Data(format!(
                "{}: several files share the stem {:?}",
                dir.display(),
                pair[0].0
            )));
        }
    }
    Ok(out)
}

impl DatasetLayout {
    pub fn open(root: &Path, require_gt: bool) -> Result<Self> {
        let sub = |name: &str| root.join(name);
        for name in ["rgb", "depth"] {
            if !sub(name).is_dir() {
                return Err(Error::Data(format!("{}: missing {name}/ directory", root.display())));
            }
        }
        let has_gt = sub("gt").is_dir();
        if require_gt && !has_gt {
            return Err(Error::Data(format!("{}: missing gt/ directory", root.display())));
        }
        let rgb = list_images(&sub("rgb"))?;
        let depth: std::collections::BTreeMap<_, _> = list_images(&sub("depth"))?.into_iter().collect();
        let gt: std::collections::BTreeMap<_, _> = if has_gt {
            list_images(&sub("gt"))?.into_iter().collect()
        } else {
            Default::default()
        };
        let mut entries = Vec::with_capacity(rgb.len());
        for (stem, path) in rgb {
            let depth = depth
                .get(&stem)
                .ok_or_else(|| Error::Data(format!("{}: no depth map for {stem:?}", root.display())))?;
            let gt_path = gt.get(&stem).cloned();
            if require_gt && gt_path.is_none() {
                return Err(Error::Data(format!("{}: no ground truth for {stem:?}", root.display())));
            }
            entries.push(DatasetEntry {
                stem,
                rgb: path,
                depth: depth.clone(),
                gt: gt_path,
            });
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("{}: dataset is empty", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
