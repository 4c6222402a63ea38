//! Raster input, binarization and outline extraction.
//!
//! Images are reduced to 8-bit luminance, smoothed with a 3x3 box mean and
//! thresholded into a foreground mask. Outlines are traced with Moore-neighbor
//! following (8-connectivity) and resampled to a fixed number of points spaced
//! evenly by arc length.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

use crate::error::{format_err, Error, Result};

/// Default luminance threshold: blurred values strictly below are foreground.
pub const DEFAULT_THRESHOLD: u8 = 250;
/// Default number of points per resampled outline.
pub const DEFAULT_RESAMPLE_POINTS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension);
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            ImageFormat::Png,
        )
        .map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension);
        }
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "mask has {} flags, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Renders the mask as an 8-bit image, foreground white on black.
    pub fn to_image(&self) -> GrayImage {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Closed outline with strictly positive signed (shoelace) area.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    points: Vec<[f64; 2]>,
}

impl Contour {
    /// Validates the polyline and reverses it when its signed area is negative.
    pub fn new(mut points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidContour(format!(
                "{} points, need at least 3",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::NonFinite(format!("contour point {p:?}")));
        }
        let n = points.len();
        for i in 0..n {
            if points[i] == points[(i + 1) % n] {
                return Err(Error::InvalidContour(format!(
                    "consecutive points {} and {} coincide",
                    i,
                    (i + 1) % n
                )));
            }
        }
        let area = signed_area(&points);
        if area == 0.0 {
            return Err(Error::InvalidContour("zero enclosed area".into()));
        }
        if area < 0.0 {
            // keep the first point in place
            points[1..].reverse();
        }
        Ok(Contour { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.points)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| dist(self.points[i], self.points[(i + 1) % n]))
            .sum()
    }

    /// Axis-aligned bounding box as `(min, max)` corners.
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        dist(lo, hi)
    }

    /// Text form: a `# contour v1 n=<count>` header then one `x,y` per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("# contour v1 n={}\n", self.points.len());
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p[0], p[1]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| format_err("contour", 1, "empty file"))?;
        let count: usize = header
            .trim()
            .strip_prefix("# contour v1 n=")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| format_err("contour", 1, format!("bad header {header:?}")))?;
        let mut points = Vec::with_capacity(count);
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (x, y) = line
                .split_once(',')
                .ok_or_else(|| format_err("contour", i + 1, "expected x,y"))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| format_err("contour", i + 1, e.to_string()))
            };
            points.push([parse(x)?, parse(y)?]);
        }
        if points.len() != count {
            return Err(format_err(
                "contour",
                1,
                format!("header declares {count} points, found {}", points.len()),
            ));
        }
        Contour::new(points)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Contour::from_text(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

pub(crate) fn signed_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let a = points[i];
            let b = points[(i + 1) % n];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    0.5 * twice
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn luminance(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Decodes a PNG or PGM file to luminance. Colour pixels use Rec. 601
/// weights; transparent pixels are composited over white.
pub fn load_grayscale(path: &Path) -> Result<GrayImage> {
    let unreadable = |reason: String| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| unreadable(e.to_string()))?;
    if bytes.is_empty() {
        return Err(unreadable("empty file".into()));
    }
    decode_grayscale(&bytes).map_err(|e| match e {
        Error::UnreadableFile { reason, .. } => unreadable(reason),
        other => other,
    })
}

pub fn decode_grayscale(bytes: &[u8]) -> Result<GrayImage> {
    let format = image::guess_format(bytes)
        .map_err(|_| Error::UnsupportedFormat("not a PNG or PGM image".into()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::UnsupportedFormat(format!("{format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| {
        Error::UnreadableFile {
            path: PathBuf::new(),
            reason: e.to_string(),
        }
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::ZeroDimension);
    }
    let data = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        other => other
            .to_rgba8()
            .pixels()
            .map(|p| {
                let [r, g, b, a] = p.0;
                let y = luminance(r, g, b) as f64;
                let alpha = a as f64 / 255.0;
                (alpha * y + (1.0 - alpha) * 255.0).round() as u8
            })
            .collect(),
    };
    GrayImage::new(w, h, data)
}

/// 3x3 box mean with replicated borders, then `blurred < threshold` marks
/// foreground. The comparison is done on the integer 3x3 sum.
pub fn binarize_mask(img: &GrayImage, threshold: u8) -> Result<BinaryMask> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
        });
    }
    let limit = 9 * threshold as u32;
    let mut bits = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0u32;
            for dy in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    sum += img.get(xx, yy) as u32;
                }
            }
            bits[y * w + x] = sum < limit;
        }
    }
    BinaryMask::new(w, h, bits)
}

// Clockwise on screen (y down), starting west.
const MOORE: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn moore_index(dx: i64, dy: i64) -> usize {
    MOORE
        .iter()
        .position(|&d| d == (dx, dy))
        .expect("offset is a Moore neighbor")
}

/// Outer boundary of every 8-connected foreground component, in raster order
/// of each component's first pixel. Components whose boundary has fewer than
/// three distinct points or no enclosed area are skipped.
pub fn extract_contours(mask: &BinaryMask) -> Result<Vec<Contour>> {
    if mask.foreground_count() == 0 {
        return Err(Error::NoForeground);
    }
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut contours = Vec::new();
    let mut degenerate = 0usize;
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        flood_component(mask, start, &mut seen);
        let (sx, sy) = ((start % w) as i64, (start / w) as i64);
        let trace = trace_boundary(mask, sx, sy);
        let points = trace
            .into_iter()
            .map(|(x, y)| [x as f64, y as f64])
            .collect();
        match Contour::new(points) {
            Ok(c) => contours.push(c),
            Err(_) => degenerate += 1,
        }
    }
    if contours.is_empty() {
        return Err(Error::InvalidContour(format!(
            "all {degenerate} foreground components are degenerate"
        )));
    }
    Ok(contours)
}

fn flood_component(mask: &BinaryMask, start: usize, seen: &mut [bool]) {
    let w = mask.width as i64;
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        let (x, y) = ((i as i64) % w, (i as i64) / w);
        for &(dx, dy) in &MOORE {
            let (nx, ny) = (x + dx, y + dy);
            if mask.get_signed(nx, ny) {
                let j = (ny * w + nx) as usize;
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
}

/// Moore-neighbor tracing from the component's first raster pixel. Stops when
/// the first move out of the start pixel would be repeated.
fn trace_boundary(mask: &BinaryMask, sx: i64, sy: i64) -> Vec<(i64, i64)> {
    let next_from = |x: i64, y: i64, back: usize| -> Option<(i64, i64, usize)> {
        for step in 0..8 {
            let dir = (back + step) % 8;
            let (dx, dy) = MOORE[dir];
            if mask.get_signed(x + dx, y + dy) {
                let prev = MOORE[(dir + 7) % 8];
                // new backtrack expressed relative to the new pixel
                let bx = x + prev.0 - (x + dx);
                let by = y + prev.1 - (y + dy);
                return Some((x + dx, y + dy, moore_index(bx, by)));
            }
        }
        None
    };
    let mut out = vec![(sx, sy)];
    // The west neighbor of the first raster pixel is always background.
    let Some(first) = next_from(sx, sy, 0) else {
        return out;
    };
    let (mut x, mut y, mut back) = first;
    let limit = 4 * mask.width * mask.height + 8;
    while out.len() < limit {
        if (x, y) == (sx, sy) {
            let next = next_from(x, y, back).expect("start pixel has a neighbor");
            if next == first {
                break;
            }
            out.push((x, y));
            (x, y, back) = next;
            continue;
        }
        out.push((x, y));
        (x, y, back) = next_from(x, y, back).expect("boundary pixel has a neighbor");
    }
    out
}

/// Contour of largest absolute area; the first one wins ties.
pub fn largest_contour(contours: &[Contour]) -> Result<Contour> {
    let mut best: Option<(&Contour, f64)> = None;
    for c in contours {
        let a = c.area();
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((c, a));
        }
    }
    best.map(|(c, _)| c.clone())
        .ok_or(Error::Empty("contour list"))
}

/// `count` points evenly spaced by arc length around the closed polyline,
/// beginning at its first vertex.
pub fn resample_contour(c: &Contour, count: usize) -> Result<Contour> {
    if count < 3 {
        return Err(Error::Precondition(format!(
            "resample count {count} must be at least 3"
        )));
    }
    let pts = &c.points;
    let n = pts.len();
    let mut cumulative = Vec::with_capacity(n + 1);
    cumulative.push(0.0);
    for i in 0..n {
        let last = *cumulative.last().expect("nonempty");
        cumulative.push(last + dist(pts[i], pts[(i + 1) % n]));
    }
    let perimeter = cumulative[n];
    if !(perimeter > 0.0) {
        return Err(Error::ZeroPerimeter);
    }
    let step = perimeter / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for i in 0..count {
        let target = i as f64 * step;
        while seg + 1 < n && cumulative[seg + 1] <= target {
            seg += 1;
        }
        let (a, b) = (pts[seg], pts[(seg + 1) % n]);
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 {
            (target - cumulative[seg]) / len
        } else {
            0.0
        };
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Contour::new(out)
}

/// One image found under `<root>/<split>/<species>/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub split: String,
    pub species: String,
    pub specimen: String,
    pub path: PathBuf,
}

/// Lists files three levels below `root`, sorted by path. Files whose
/// extension is not in `extensions` are skipped.
pub fn scan_dataset(root: &Path, extensions: &[&str]) -> Result<Vec<DatasetEntry>> {
    let mut entries = Vec::new();
    for split in sorted_dirs(root)? {
        for species in sorted_dirs(&split)? {
            let mut files: Vec<PathBuf> = fs::read_dir(&species)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for path in files {
                let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
                let Some(ext) = extensions.iter().find(|ext| name.ends_with(*ext)) else {
                    continue;
                };
                entries.push(DatasetEntry {
                    split: file_name(&split),
                    species: file_name(&species),
                    specimen: name[..name.len() - ext.len()]
                        .trim_end_matches('.')
                        .to_string(),
                    path,
                });
            }
        }
    }
    Ok(entries)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::UnreadableFile {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
