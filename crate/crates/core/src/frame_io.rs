//! Frame sequences: loading image-sequence directories, writing them back,
//! resolution reduction, and the synthetic fixture generators used by the
//! flow, dynamics and curation tests.
//!
//! A video on disk is a directory of `frame_%05d.png` or `frame_%05d.ppm`
//! files plus an optional `meta.json` (`width`, `height`, `fps`, `count`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame rate assumed when a directory carries no `meta.json`.
pub const DEFAULT_FPS: f64 = 8.0;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("video directory not found: {0}")]
    MissingDirectory(PathBuf),
    #[error("no decodable frames in {0}")]
    NoFrames(PathBuf),
    #[error("{file}: frame is {found_w}x{found_h}, expected {expected_w}x{expected_h}")]
    DimensionMismatch {
        file: PathBuf,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("{file}: {reason}")]
    Decode { file: PathBuf, reason: String },
    #[error("invalid meta.json in {file}: {reason}")]
    Meta { file: PathBuf, reason: String },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("moving shape leaves the {width}x{height} frame within {frames} frames")]
    ShapeOutOfBounds { width: usize, height: usize, frames: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FrameError + '_ {
    move |source| FrameError::Io { path: path.to_path_buf(), source }
}

/// Luma of one RGB triplet with 0.299/0.587/0.114 weights, rounded and clamped.
#[inline]
pub fn luma_of(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
    y.round().clamp(0.0, 255.0) as u8
}

/// One decoded frame. `luma` is always derived from `rgb`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
    luma: Vec<u8>,
}

impl Frame {
    pub fn from_rgb(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::InvalidFrame(format!("empty frame {width}x{height}")));
        }
        if rgb.len() != 3 * width * height {
            return Err(FrameError::InvalidFrame(format!(
                "rgb buffer has {} bytes, expected {}",
                rgb.len(),
                3 * width * height
            )));
        }
        let luma = rgb.chunks_exact(3).map(|p| luma_of(p[0], p[1], p[2])).collect();
        Ok(Self { width, height, rgb, luma })
    }

    /// Gray frame: each value is replicated into R, G and B.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self, FrameError> {
        if gray.len() != width * height {
            return Err(FrameError::InvalidFrame(format!(
                "gray buffer has {} bytes, expected {}",
                gray.len(),
                width * height
            )));
        }
        let rgb = gray.iter().flat_map(|&g| [g, g, g]).collect();
        Self::from_rgb(width, height, rgb)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, FrameError> {
        Self::from_gray(width, height, &vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn luma(&self) -> &[u8] {
        &self.luma
    }

    #[inline]
    pub fn luma_at(&self, x: usize, y: usize) -> u8 {
        self.luma[y * self.width + x]
    }

    /// Luma sample with coordinates clamped to the frame (replicated edges).
    #[inline]
    pub fn luma_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.luma[y * self.width + x]
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}

/// An ordered run of equally-sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    fps: f64,
    source: PathBuf,
    item_id: String,
}

impl FrameSequence {
    pub fn new(
        frames: Vec<Frame>,
        fps: f64,
        source: impl Into<PathBuf>,
        item_id: impl Into<String>,
    ) -> Result<Self, FrameError> {
        let Some(first) = frames.first() else {
            return Err(FrameError::InvalidSequence("sequence has no frames".into()));
        };
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(FrameError::InvalidSequence(format!("fps must be positive, got {fps}")));
        }
        let (w, h) = (first.width, first.height);
        if let Some(i) = frames.iter().position(|f| f.width != w || f.height != h) {
            return Err(FrameError::InvalidSequence(format!(
                "frame {i} is {}x{}, expected {w}x{h}",
                frames[i].width, frames[i].height
            )));
        }
        Ok(Self { frames, fps, source: source.into(), item_id: item_id.into() })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    pub fn item_id(&self) -> &str {
        &self.item_id
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn with_item_id(mut self, item_id: impl Into<String>) -> Self {
        self.item_id = item_id.into();
        self
    }

    /// Same frames in reverse temporal order.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.frames.reverse();
        out
    }

    /// This sequence followed by the frames of `other`.
    pub fn concat(&self, other: &FrameSequence) -> Result<Self, FrameError> {
        let frames = self.frames.iter().chain(other.frames.iter()).cloned().collect();
        Self::new(frames, self.fps, self.source.clone(), self.item_id.clone())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct SequenceMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

fn frame_index(name: &str) -> Option<usize> {
    let stem = name.strip_prefix("frame_")?;
    let (digits, ext) = stem.split_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "ppm") {
        return None;
    }
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn decode_frame(path: &Path) -> Result<Frame, FrameError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        return decode_ppm(&bytes).map_err(|reason| FrameError::Decode { file: path.to_path_buf(), reason });
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| FrameError::Decode { file: path.to_path_buf(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Frame::from_rgb(w, h, img.into_raw())
        .map_err(|e| FrameError::Decode { file: path.to_path_buf(), reason: e.to_string() })
}

/// Binary P6 with maxval 255. Comments in the header are skipped.
fn decode_ppm(bytes: &[u8]) -> Result<Frame, String> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported PPM magic {:?}", fields[0]));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad PPM {what}: {s:?}"));
    let w = parse(&fields[1], "width")?;
    let h = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported PPM maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(format!("PPM raster truncated: {} of {need} bytes", bytes.len().saturating_sub(pos)));
    }
    Frame::from_rgb(w, h, bytes[pos..pos + need].to_vec()).map_err(|e| e.to_string())
}

fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.rgb);
    out
}

/// Loads `frame_*.png` / `frame_*.ppm` from `dir`, sorted by frame index.
pub fn load_sequence(dir: &Path) -> Result<FrameSequence, FrameError> {
    if !dir.is_dir() {
        return Err(FrameError::MissingDirectory(dir.to_path_buf()));
    }
    let mut indexed = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        if let Some(idx) = name.to_str().and_then(frame_index) {
            indexed.push((idx, entry.path()));
        }
    }
    indexed.sort();
    if indexed.is_empty() {
        return Err(FrameError::NoFrames(dir.to_path_buf()));
    }

    let meta_path = dir.join("meta.json");
    let meta: SequenceMeta = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        serde_json::from_str(&text)
            .map_err(|e| FrameError::Meta { file: meta_path.clone(), reason: e.to_string() })?
    } else {
        SequenceMeta::default()
    };

    let mut frames: Vec<Frame> = Vec::with_capacity(indexed.len());
    for (_, path) in &indexed {
        let frame = decode_frame(path)?;
        if let Some(first) = frames.first() {
            if first.width != frame.width || first.height != frame.height {
                return Err(FrameError::DimensionMismatch {
                    file: path.clone(),
                    expected_w: first.width,
                    expected_h: first.height,
                    found_w: frame.width,
                    found_h: frame.height,
                });
            }
        }
        frames.push(frame);
    }

    let fps = meta.fps.unwrap_or(DEFAULT_FPS);
    let item_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    FrameSequence::new(frames, fps, dir, item_id)
        .map_err(|e| FrameError::Meta { file: meta_path, reason: e.to_string() })
}

/// Writes every frame plus `meta.json` into `dir` (created if needed).
pub fn write_sequence(seq: &FrameSequence, dir: &Path, format: ImageFormat) -> Result<(), FrameError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:05}.{}", format.extension()));
        match format {
            ImageFormat::Ppm => fs::write(&path, encode_ppm(frame)).map_err(io_err(&path))?,
            ImageFormat::Png => {
                let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, frame.rgb.clone())
                    .ok_or_else(|| FrameError::InvalidFrame("rgb buffer size".into()))?;
                img.save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| FrameError::Decode { file: path.clone(), reason: e.to_string() })?;
            }
        }
    }
    let meta = SequenceMeta {
        width: Some(seq.width()),
        height: Some(seq.height()),
        fps: Some(seq.fps),
        count: Some(seq.len()),
    };
    let meta_path = dir.join("meta.json");
    let mut f = fs::File::create(&meta_path).map_err(io_err(&meta_path))?;
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    f.write_all(text.as_bytes()).map_err(io_err(&meta_path))?;
    Ok(())
}

/// Loads a single still image (PNG or PPM) as a frame.
pub fn load_image(path: &Path) -> Result<Frame, FrameError> {
    if !path.is_file() {
        return Err(FrameError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
        });
    }
    decode_frame(path)
}

/// Integer-factor box downscale so that the longer side is at most `max_dim`.
/// Sequences already within bounds are returned unchanged.
pub fn downscale_for_flow(seq: &FrameSequence, max_dim: usize) -> FrameSequence {
    let max_dim = max_dim.max(32);
    let side = seq.width().max(seq.height());
    if side <= max_dim {
        return seq.clone();
    }
    let factor = side.div_ceil(max_dim);
    let frames = seq.frames.iter().map(|f| box_downscale(f, factor)).collect();
    FrameSequence { frames, fps: seq.fps, source: seq.source.clone(), item_id: seq.item_id.clone() }
}

fn box_downscale(frame: &Frame, factor: usize) -> Frame {
    let w = (frame.width / factor).max(1);
    let h = (frame.height / factor).max(1);
    let n = factor * factor;
    let mut rgb = vec![0u8; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0usize; 3];
            for dy in 0..factor {
                let sy = (y * factor + dy).min(frame.height - 1);
                for dx in 0..factor {
                    let sx = (x * factor + dx).min(frame.width - 1);
                    let i = 3 * (sy * frame.width + sx);
                    acc[0] += frame.rgb[i] as usize;
                    acc[1] += frame.rgb[i + 1] as usize;
                    acc[2] += frame.rgb[i + 2] as usize;
                }
            }
            let o = 3 * (y * w + x);
            for c in 0..3 {
                rgb[o + c] = ((acc[c] + n / 2) / n) as u8;
            }
        }
    }
    Frame::from_rgb(w, h, rgb).expect("downscaled buffer is consistent")
}

/// `n` byte-identical copies of `frame`.
pub fn synthesize_static(frame: &Frame, n: usize) -> Result<FrameSequence, FrameError> {
    if n == 0 {
        return Err(FrameError::InvalidSequence("static sequence needs at least one frame".into()));
    }
    FrameSequence::new(vec![frame.clone(); n], DEFAULT_FPS, PathBuf::new(), "static")
}

/// Motion patterns for [`synthesize_moving`]. Displacements are per frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// The whole textured scene, including a high-contrast square riding on
    /// it, shifts by `(dx, dy)` pixels per frame.
    Translate { dx: i32, dy: i32 },
    /// A textured square of edge `size` moves by `(dx, dy)` over a static
    /// textured background.
    Sprite { dx: i32, dy: i32, size: usize },
    /// Per-frame isotropic scale about the frame center.
    Zoom { k: f64 },
    /// Per-frame rotation (radians) about the frame center.
    Rotate { theta: f64 },
    /// Per-frame similarity warp: translation, scale and rotation combined.
    Similarity { tx: f64, ty: f64, k: f64, theta: f64 },
    /// Frames `0..at` repeat `first`, frames `at..n` repeat `second`.
    CutAt { at: usize, first: Frame, second: Frame },
    /// Static background; the centered `size`-square is refilled every frame
    /// with uniform noise whose brightness band is redrawn per frame.
    NoisySubject { size: usize },
    /// Every frame is independent uniform noise.
    Noise,
}

/// Deterministic procedural texture defined over the whole integer plane:
/// bilinear value noise on 8-px cells mixed with per-pixel hash noise.
#[derive(Debug, Clone, Copy)]
pub struct Texture {
    seed: u64,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn hash(&self, x: i64, y: i64, salt: u64) -> u64 {
        let mut h = self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= (x as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(31) ^ (y as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
        // splitmix64 finalizer
        h ^= h >> 30;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^ (h >> 31)
    }

    fn unit(&self, x: i64, y: i64, salt: u64) -> f64 {
        (self.hash(x, y, salt) >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn sample(&self, x: i64, y: i64) -> u8 {
        const CELL: i64 = 8;
        let cx = x.div_euclid(CELL);
        let cy = y.div_euclid(CELL);
        let fx = x.rem_euclid(CELL) as f64 / CELL as f64;
        let fy = y.rem_euclid(CELL) as f64 / CELL as f64;
        let v00 = self.unit(cx, cy, 1);
        let v10 = self.unit(cx + 1, cy, 1);
        let v01 = self.unit(cx, cy + 1, 1);
        let v11 = self.unit(cx + 1, cy + 1, 1);
        let smooth = v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy;
        let fine = self.unit(x, y, 2);
        (255.0 * (0.6 * smooth + 0.4 * fine)).round().clamp(0.0, 255.0) as u8
    }
}

fn render(width: usize, height: usize, mut px: impl FnMut(usize, usize) -> u8) -> Frame {
    let mut gray = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            gray.push(px(x, y));
        }
    }
    Frame::from_gray(width, height, &gray).expect("rendered buffer is consistent")
}

/// High-contrast square texture: the procedural texture stretched to the
/// full 0..255 range, with a one-pixel white border.
fn square_texel(tex: &Texture, x: i64, y: i64, size: i64) -> u8 {
    if x == 0 || y == 0 || x == size - 1 || y == size - 1 {
        return 255;
    }
    if tex.sample(x, y) >= 128 { 230 } else { 25 }
}

/// Start offset so a shape of extent `size` moving `d` per step for `steps`
/// stays inside `[0, extent)`, centering the whole trajectory.
fn trajectory_start(extent: usize, size: usize, d: i32, steps: usize) -> Option<i64> {
    let travel = (d.unsigned_abs() as usize) * steps;
    if size + travel > extent {
        return None;
    }
    let lo = (extent - size - travel) / 2;
    Some(if d >= 0 { lo as i64 } else { (lo + travel) as i64 })
}

fn similarity_sequence(
    width: usize,
    height: usize,
    n: usize,
    tex: &Texture,
    (tx, ty, k, theta): (f64, f64, f64, f64),
) -> Vec<Frame> {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    (0..n)
        .map(|j| {
            let j = j as f64;
            let s = k.powf(j);
            let a = theta * j;
            let (sin, cos) = a.sin_cos();
            let (ox, oy) = (tx * j, ty * j);
            render(width, height, |x, y| {
                // invert p = c + s R(a) (q - c) + o
                let px = x as f64 - cx - ox;
                let py = y as f64 - cy - oy;
                let qx = (cos * px + sin * py) / s + cx;
                let qy = (-sin * px + cos * py) / s + cy;
                tex.sample(qx.round() as i64, qy.round() as i64)
            })
        })
        .collect()
}

/// Deterministic synthetic clip for tests and demos.
pub fn synthesize_moving(
    width: usize,
    height: usize,
    n: usize,
    motion: &Motion,
    seed: u64,
) -> Result<FrameSequence, FrameError> {
    if n == 0 || width == 0 || height == 0 {
        return Err(FrameError::InvalidSequence(format!("cannot synthesize {n} frames of {width}x{height}")));
    }
    let tex = Texture::new(seed);
    let frames = match motion {
        Motion::Translate { dx, dy } => {
            let size = (width.min(height) / 4).max(4);
            let steps = n - 1;
            let oob = || FrameError::ShapeOutOfBounds { width, height, frames: n };
            let sx = trajectory_start(width, size, *dx, steps).ok_or_else(oob)?;
            let sy = trajectory_start(height, size, *dy, steps).ok_or_else(oob)?;
            let square = Texture::new(seed ^ 0x5151);
            (0..n as i64)
                .map(|j| {
                    let (ox, oy) = (j * *dx as i64, j * *dy as i64);
                    render(width, height, |x, y| {
                        let (x, y) = (x as i64, y as i64);
                        let (qx, qy) = (x - sx - ox, y - sy - oy);
                        if (0..size as i64).contains(&qx) && (0..size as i64).contains(&qy) {
                            square_texel(&square, qx, qy, size as i64)
                        } else {
                            tex.sample(x - ox, y - oy)
                        }
                    })
                })
                .collect()
        }
        Motion::Sprite { dx, dy, size } => {
            let steps = n - 1;
            let oob = || FrameError::ShapeOutOfBounds { width, height, frames: n };
            let sx = trajectory_start(width, *size, *dx, steps).ok_or_else(oob)?;
            let sy = trajectory_start(height, *size, *dy, steps).ok_or_else(oob)?;
            let square = Texture::new(seed ^ 0xA5A5);
            (0..n as i64)
                .map(|j| {
                    let (px, py) = (sx + j * *dx as i64, sy + j * *dy as i64);
                    render(width, height, |x, y| {
                        let (qx, qy) = (x as i64 - px, y as i64 - py);
                        if (0..*size as i64).contains(&qx) && (0..*size as i64).contains(&qy) {
                            square.sample(qx, qy)
                        } else {
                            tex.sample(x as i64, y as i64)
                        }
                    })
                })
                .collect()
        }
        Motion::Zoom { k } => similarity_sequence(width, height, n, &tex, (0.0, 0.0, *k, 0.0)),
        Motion::Rotate { theta } => similarity_sequence(width, height, n, &tex, (0.0, 0.0, 1.0, *theta)),
        Motion::Similarity { tx, ty, k, theta } => similarity_sequence(width, height, n, &tex, (*tx, *ty, *k, *theta)),
        Motion::CutAt { at, first, second } => {
            for f in [first, second] {
                if f.width != width || f.height != height {
                    return Err(FrameError::InvalidFrame(format!(
                        "cut source is {}x{}, expected {width}x{height}",
                        f.width, f.height
                    )));
                }
            }
            (0..n).map(|j| if j < *at { first.clone() } else { second.clone() }).collect()
        }
        Motion::NoisySubject { size } => {
            if *size > width || *size > height {
                return Err(FrameError::ShapeOutOfBounds { width, height, frames: n });
            }
            let mut rng = StdRng::seed_from_u64(seed);
            let x0 = (width - size) / 2;
            let y0 = (height - size) / 2;
            (0..n)
                .map(|_| {
                    let base: u8 = rng.random_range(0..=192);
                    render(width, height, |x, y| {
                        if (x0..x0 + size).contains(&x) && (y0..y0 + size).contains(&y) {
                            base + rng.random_range(0..64u8)
                        } else {
                            tex.sample(x as i64, y as i64)
                        }
                    })
                })
                .collect()
        }
        Motion::Noise => {
            let mut rng = StdRng::seed_from_u64(seed);
            (0..n).map(|_| render(width, height, |_, _| rng.random())).collect()
        }
    };
    FrameSequence::new(frames, DEFAULT_FPS, PathBuf::new(), "synthetic")
}

/// A still textured frame, handy as the source for static clips.
pub fn textured_frame(width: usize, height: usize, seed: u64) -> Frame {
    let tex = Texture::new(seed);
    render(width, height, |x, y| tex.sample(x as i64, y as i64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_weights() {
        assert_eq!(luma_of(255, 255, 255), 255);
        assert_eq!(luma_of(0, 0, 0), 0);
        // 0.299*255 = 76.245
        assert_eq!(luma_of(255, 0, 0), 76);
        assert_eq!(luma_of(0, 255, 0), 150);
        assert_eq!(luma_of(0, 0, 255), 29);
        for g in 0..=255u8 {
            assert_eq!(luma_of(g, g, g), g);
        }
    }

    #[test]
    fn frame_rejects_bad_buffers() {
        assert!(Frame::from_rgb(2, 2, vec![0; 11]).is_err());
        assert!(Frame::from_rgb(0, 2, vec![]).is_err());
        let f = Frame::from_rgb(2, 1, vec![255, 0, 0, 0, 0, 255]).unwrap();
        assert_eq!(f.luma(), &[76, 29]);
    }

    #[test]
    fn sequence_invariants() {
        let a = Frame::filled(4, 4, 1).unwrap();
        let b = Frame::filled(4, 5, 1).unwrap();
        assert!(FrameSequence::new(vec![], 8.0, "", "x").is_err());
        assert!(FrameSequence::new(vec![a.clone()], 0.0, "", "x").is_err());
        assert!(FrameSequence::new(vec![a, b], 8.0, "", "x").is_err());
    }

    #[test]
    fn downscale_factors() {
        let seq = |w, h| synthesize_static(&Frame::filled(w, h, 7).unwrap(), 1).unwrap();
        let s = downscale_for_flow(&seq(64, 64), 512);
        assert_eq!((s.width(), s.height()), (64, 64));
        let s = downscale_for_flow(&seq(720, 480), 512);
        assert_eq!((s.width(), s.height()), (360, 240));
        let s = downscale_for_flow(&seq(2048, 2048), 512);
        assert_eq!((s.width(), s.height()), (512, 512));
        assert!(s.frames()[0].luma().iter().all(|&v| v == 7));
    }

    #[test]
    fn box_filter_averages() {
        let f = Frame::from_gray(2, 2, &[0, 10, 20, 30]).unwrap();
        let d = box_downscale(&f, 2);
        // (60 + 2) / 4 = 15
        assert_eq!(d.luma(), &[15]);
    }

    #[test]
    fn static_synthesis() {
        let f = textured_frame(16, 16, 3);
        assert!(synthesize_static(&f, 0).is_err());
        let s = synthesize_static(&f, 49).unwrap();
        assert_eq!(s.len(), 49);
        assert!(s.frames().iter().all(|g| g == &f));
        assert_eq!(synthesize_static(&f, 1).unwrap().len(), 1);
    }

    #[test]
    fn translate_moves_content_exactly() {
        let s = synthesize_moving(64, 64, 10, &Motion::Translate { dx: 3, dy: 0 }, 1).unwrap();
        for k in 0..9 {
            let (a, b) = (&s.frames()[k], &s.frames()[k + 1]);
            for y in 0..64 {
                for x in 0..61 {
                    assert_eq!(a.luma_at(x, y), b.luma_at(x + 3, y));
                }
            }
        }
    }

    #[test]
    fn translate_out_of_bounds() {
        let err = synthesize_moving(64, 64, 30, &Motion::Translate { dx: 3, dy: 0 }, 1).unwrap_err();
        assert!(matches!(err, FrameError::ShapeOutOfBounds { .. }));
    }

    #[test]
    fn cut_fixture_layout() {
        let black = Frame::filled(8, 8, 0).unwrap();
        let white = Frame::filled(8, 8, 255).unwrap();
        let s = synthesize_moving(8, 8, 10, &Motion::CutAt { at: 5, first: black.clone(), second: white.clone() }, 0)
            .unwrap();
        assert!(s.frames()[..5].iter().all(|f| f == &black));
        assert!(s.frames()[5..].iter().all(|f| f == &white));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let m = Motion::Zoom { k: 1.02 };
        let a = synthesize_moving(48, 48, 3, &m, 9).unwrap();
        let b = synthesize_moving(48, 48, 3, &m, 9).unwrap();
        assert_eq!(a, b);
        let c = synthesize_moving(48, 48, 3, &Motion::Noise, 9).unwrap();
        let d = synthesize_moving(48, 48, 3, &Motion::Noise, 9).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let f = decode_ppm(&bytes).unwrap();
        assert_eq!(f.rgb(), &[1, 2, 3, 4, 5, 6]);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn frame_name_parsing() {
        assert_eq!(frame_index("frame_00012.png"), Some(12));
        assert_eq!(frame_index("frame_3.PPM"), Some(3));
        assert_eq!(frame_index("frame_.png"), None);
        assert_eq!(frame_index("frame_00001.jpg"), None);
        assert_eq!(frame_index("meta.json"), None);
    }
}
