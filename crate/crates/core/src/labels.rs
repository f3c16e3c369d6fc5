//! Label masks and synthesis of imperfect supervision.
//!
//! A mask holds one class index per pixel; [`IGNORE_INDEX`] marks pixels that
//! carry no supervision. Sparse regimes (points, scribbles) are subsets of the
//! dense ground truth with identical classes, the noisy regime is dense but
//! corrupted to a requested quality.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricReport;

pub const IGNORE_INDEX: u8 = 255;

/// Where a sample's labels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    #[default]
    Gt,
    Scribble,
    Point,
    Noisy,
    ExternalPseudo,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Gt => "gt",
            Provenance::Scribble => "scribble",
            Provenance::Point => "point",
            Provenance::Noisy => "noisy",
            Provenance::ExternalPseudo => "external-pseudo",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gt" => Provenance::Gt,
            "scribble" => Provenance::Scribble,
            "point" => Provenance::Point,
            "noisy" => Provenance::Noisy,
            "external-pseudo" => Provenance::ExternalPseudo,
            other => return Err(Error::invalid(format!("unknown provenance {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    values: Vec<u8>,
    num_classes: usize,
    ignore_index: u8,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, values: Vec<u8>, num_classes: usize) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::invalid(format!(
                "mask of {h}x{w} needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        if num_classes == 0 || num_classes > IGNORE_INDEX as usize {
            return Err(Error::invalid(format!(
                "num_classes must be in [1, {IGNORE_INDEX}], got {num_classes}"
            )));
        }
        if let Some(i) = values
            .iter()
            .position(|&v| v != IGNORE_INDEX && v as usize >= num_classes)
        {
            return Err(Error::InvalidLabel {
                row: i / w,
                col: i % w,
                value: values[i],
                num_classes,
                ignore_index: IGNORE_INDEX,
            });
        }
        Ok(Self {
            h,
            w,
            values,
            num_classes,
            ignore_index: IGNORE_INDEX,
        })
    }

    pub fn ignored(h: usize, w: usize, num_classes: usize) -> Result<Self> {
        Self::new(h, w, vec![IGNORE_INDEX; h * w], num_classes)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.w + col]
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.values[i] != self.ignore_index
    }

    pub fn labeled_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != self.ignore_index).count()
    }

    /// Number of labeled pixels per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &v in &self.values {
            if v != self.ignore_index {
                hist[v as usize] += 1;
            }
        }
        hist
    }

    /// Rectangular sub-mask `[row0, row0+h) x [col0, col0+w)`.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if row0 + h > self.h || col0 + w > self.w {
            return Err(Error::invalid("crop window exceeds mask"));
        }
        let mut values = Vec::with_capacity(h * w);
        for r in row0..row0 + h {
            values.extend_from_slice(&self.values[r * self.w + col0..r * self.w + col0 + w]);
        }
        Ok(Self {
            h,
            w,
            values,
            ..*self
        })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.w.max(1)) {
            row.reverse();
        }
        Self {
            values,
            ..*self
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_pgm = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if is_pgm {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut out = BufWriter::new(file);
            write!(out, "P5\n{} {}\n255\n", self.w, self.h)
                .and_then(|_| out.write_all(&self.values))
                .and_then(|_| out.flush())
                .map_err(|e| Error::io(path, e))
        } else {
            write_png(path, self.h, self.w, &self.values, None)
        }
    }
}

/// Reads an 8-bit single-channel PNG (grayscale or palette indices) or a binary PGM.
pub fn load_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMask> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (h, w, values) = if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)?
    } else if bytes.starts_with(b"P5") {
        decode_pgm(path, &bytes)?
    } else {
        return Err(Error::MaskFormat {
            path: path.into(),
            message: "neither PNG nor binary PGM".into(),
        });
    };
    LabelMask::new(h, w, values, num_classes)
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let format_err = |message: String| Error::MaskFormat {
        path: path.into(),
        message,
    };
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(format_err(format!("unsupported bit depth {depth:?}")));
    }
    if !matches!(color, png::ColorType::Grayscale | png::ColorType::Indexed) {
        return Err(format_err(format!(
            "expected single-channel grayscale or indexed PNG, got {color:?}"
        )));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let stride = frame.line_size;
    let mut values = Vec::with_capacity(h * w);
    for row in buf.chunks(stride).take(h) {
        values.extend_from_slice(&row[..w]);
    }
    Ok((h, w, values))
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let format_err = |message: &str| Error::MaskFormat {
        path: path.into(),
        message: message.into(),
    };
    let mut fields = Vec::with_capacity(3);
    let mut pos = 2;
    while fields.len() < 3 {
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
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format_err("malformed PGM header"))?;
        fields.push(field);
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval > 255 {
        return Err(format_err("16-bit PGM is not supported"));
    }
    pos += 1;
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| format_err("truncated PGM raster"))?;
    Ok((h, w, data.to_vec()))
}

/// Writes an 8-bit grayscale PNG, or an indexed one when a palette is supplied.
pub fn write_png(
    path: &Path,
    h: usize,
    w: usize,
    values: &[u8],
    palette: Option<&[[u8; 3]]>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_depth(png::BitDepth::Eight);
    match palette {
        Some(p) => {
            encoder.set_color(png::ColorType::Indexed);
            encoder.set_palette(p.iter().flatten().copied().collect::<Vec<u8>>());
        }
        None => encoder.set_color(png::ColorType::Grayscale),
    }
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::invalid(other.to_string()),
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(values).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// A 4-connected region of equal class.
#[derive(Debug, Clone)]
pub struct Component {
    pub class: u8,
    pub pixels: Vec<usize>,
}

/// 4-connected components of labeled pixels, in raster order of their first pixel.
/// Also returns the per-pixel component id (`usize::MAX` for ignored pixels).
pub fn components(mask: &LabelMask) -> (Vec<Component>, Vec<usize>) {
    let (h, w) = mask.dims();
    let mut id = vec![usize::MAX; h * w];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if id[start] != usize::MAX || !mask.is_labeled(start) {
            continue;
        }
        let class = mask.values[start];
        let cid = comps.len();
        let mut pixels = Vec::new();
        id[start] = cid;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            for q in neighbors4(p, h, w) {
                if id[q] == usize::MAX && mask.values[q] == class {
                    id[q] = cid;
                    queue.push_back(q);
                }
            }
        }
        comps.push(Component { class, pixels });
    }
    (comps, id)
}

fn neighbors4(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (p / w, p % w);
    [
        (r > 0).then(|| p - w),
        (r + 1 < h).then(|| p + w),
        (c > 0).then(|| p - 1),
        (c + 1 < w).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

fn require_labels(gt: &LabelMask) -> Result<()> {
    if gt.labeled_count() == 0 {
        return Err(Error::invalid("ground truth has no labeled pixels"));
    }
    Ok(())
}

/// Keeps `min(k_per_class, n_c)` uniformly chosen pixels of every class present.
pub fn synth_points(gt: &LabelMask, k_per_class: usize, seed: u64) -> Result<LabelMask> {
    if k_per_class < 1 {
        return Err(Error::invalid("k_per_class must be at least 1"));
    }
    require_labels(gt)?;
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &v) in gt.values.iter().enumerate() {
        if v != gt.ignore_index {
            by_class.entry(v).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![gt.ignore_index; gt.values.len()];
    for (class, pixels) in by_class {
        let take = k_per_class.min(pixels.len());
        for j in index::sample(&mut rng, pixels.len(), take) {
            values[pixels[j]] = class;
        }
    }
    Ok(LabelMask { values, ..*gt })
}

/// Draws one stroke per connected component: a self-avoiding random walk that
/// never leaves the component, thickened to `thickness` pixels.
///
/// Walk length is `length_frac` times the component's bounding-box diagonal,
/// rounded, at least one pixel. A walk that runs out of unvisited neighbours
/// stops early.
pub fn synth_scribble(
    gt: &LabelMask,
    thickness: usize,
    length_frac: f64,
    seed: u64,
) -> Result<LabelMask> {
    if thickness < 1 {
        return Err(Error::invalid("thickness must be at least 1"));
    }
    if !(length_frac > 0.0 && length_frac <= 1.0) {
        return Err(Error::invalid(format!(
            "length_frac must be in (0, 1], got {length_frac}"
        )));
    }
    require_labels(gt)?;
    let (h, w) = gt.dims();
    let (comps, comp_id) = components(gt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![gt.ignore_index; h * w];
    let mut visited = vec![false; h * w];
    let lo = (thickness as isize - 1) / 2;
    let hi = thickness as isize / 2;

    for (cid, comp) in comps.iter().enumerate() {
        let (mut rmin, mut rmax, mut cmin, mut cmax) = (h, 0, w, 0);
        for &p in &comp.pixels {
            rmin = rmin.min(p / w);
            rmax = rmax.max(p / w);
            cmin = cmin.min(p % w);
            cmax = cmax.max(p % w);
        }
        let bh = (rmax - rmin + 1) as f64;
        let bw = (cmax - cmin + 1) as f64;
        let target_len = ((length_frac * bh.hypot(bw)).round() as usize)
            .clamp(1, comp.pixels.len());

        let mut cur = comp.pixels[rng.gen_range(0..comp.pixels.len())];
        let mut walk = vec![cur];
        visited[cur] = true;
        let mut heading: Option<isize> = None;
        while walk.len() < target_len {
            let options: Vec<usize> = neighbors4(cur, h, w)
                .filter(|&q| comp_id[q] == cid && !visited[q])
                .collect();
            if options.is_empty() {
                break;
            }
            // strokes tend to keep their direction
            let straight = heading
                .map(|d| cur as isize + d)
                .filter(|&q| q >= 0 && options.contains(&(q as usize)));
            let next = match straight {
                Some(q) if rng.gen_bool(0.7) => q as usize,
                _ => options[rng.gen_range(0..options.len())],
            };
            heading = Some(next as isize - cur as isize);
            visited[next] = true;
            walk.push(next);
            cur = next;
        }

        for &p in &walk {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -lo..=hi {
                for dc in -lo..=hi {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let q = rr as usize * w + cc as usize;
                    if comp_id[q] == cid {
                        values[q] = comp.class;
                    }
                }
            }
        }
    }
    Ok(LabelMask { values, ..*gt })
}

/// Tolerance, in mIoU percentage points, of the noisy-mask calibration.
pub const NOISE_TOLERANCE_PCT: f64 = 2.0;

const NOISE_MAX_ATTEMPTS: usize = 40_000;
const NOISE_MAX_CONSECUTIVE_REJECTS: usize = 4_000;

/// Corrupts `gt` until its mIoU against `gt` is within
/// [`NOISE_TOLERANCE_PCT`] of `target_miou_pct`.
///
/// Two corruption moves are mixed: painting a disc of a neighbouring class
/// across a class boundary (boundary dilation/erosion) and relabelling a whole
/// connected region (object confusion). A move that would push the quality
/// below the band is undone. Pixels ignored in `gt` stay ignored; every
/// labeled pixel keeps a committed class.
pub fn synth_noisy(gt: &LabelMask, target_miou_pct: f64, seed: u64) -> Result<LabelMask> {
    if !(target_miou_pct > 0.0 && target_miou_pct <= 100.0) {
        return Err(Error::invalid(format!(
            "target quality must be in (0, 100], got {target_miou_pct}"
        )));
    }
    require_labels(gt)?;
    if target_miou_pct >= 100.0 {
        return Ok(gt.clone());
    }
    let (h, w) = gt.dims();
    let c = gt.num_classes;
    let labeled: Vec<usize> = (0..h * w).filter(|&i| gt.is_labeled(i)).collect();
    let present: Vec<u8> = gt
        .class_histogram()
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(k, _)| k as u8)
        .collect();
    let palette: Vec<u8> = if present.len() >= 2 {
        present
    } else {
        (0..c as u8).collect()
    };
    if palette.len() < 2 {
        return Err(Error::CalibrationFailure {
            target: target_miou_pct,
            achieved: 100.0,
        });
    }

    let mut out = gt.values.clone();
    let mut report = MetricReport::new(c);
    for &i in &labeled {
        let g = gt.values[i] as usize;
        report.record(g, g);
    }
    let quality = |r: &MetricReport| r.miou().map(|s| 100.0 * s.miou).unwrap_or(0.0);
    let lower = target_miou_pct - NOISE_TOLERANCE_PCT;
    let upper = target_miou_pct + NOISE_TOLERANCE_PCT;
    let max_radius = (h.min(w) / 16).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = quality(&report);
    let mut changed: Vec<(usize, u8)> = Vec::new();
    let mut rejects = 0;
    for _ in 0..NOISE_MAX_ATTEMPTS {
        if (lower..=upper).contains(&current) {
            return LabelMask::new(h, w, out, c);
        }
        if rejects >= NOISE_MAX_CONSECUTIVE_REJECTS {
            break;
        }
        changed.clear();
        let seedpix = labeled[rng.gen_range(0..labeled.len())];
        if rng.gen_bool(0.2) {
            flip_region(&mut out, gt, seedpix, &palette, &mut rng, &mut changed);
        } else {
            let boundary = (0..64)
                .map(|_| labeled[rng.gen_range(0..labeled.len())])
                .find_map(|p| {
                    neighbors4(p, h, w)
                        .find(|&q| gt.is_labeled(q) && out[q] != out[p])
                        .map(|q| (p, out[q]))
                });
            let (center, class) = match boundary {
                Some(b) => b,
                None => {
                    let alt: Vec<u8> =
                        palette.iter().copied().filter(|&k| k != out[seedpix]).collect();
                    (seedpix, alt[rng.gen_range(0..alt.len())])
                }
            };
            let radius = rng.gen_range(1..=max_radius) as isize;
            paint_disc(&mut out, gt, center, radius, class, &mut changed);
        }
        for &(i, old) in &changed {
            report.reassign(gt.values[i] as usize, old as usize, out[i] as usize);
        }
        let next = quality(&report);
        if next >= lower {
            current = next;
            rejects = 0;
        } else {
            for &(i, old) in changed.iter().rev() {
                report.reassign(gt.values[i] as usize, out[i] as usize, old as usize);
                out[i] = old;
            }
            rejects += 1;
        }
    }
    if (lower..=upper).contains(&current) {
        return LabelMask::new(h, w, out, c);
    }
    Err(Error::CalibrationFailure {
        target: target_miou_pct,
        achieved: current,
    })
}

fn paint_disc(
    out: &mut [u8],
    gt: &LabelMask,
    center: usize,
    radius: isize,
    class: u8,
    changed: &mut Vec<(usize, u8)>,
) {
    let (h, w) = gt.dims();
    let (r0, c0) = ((center / w) as isize, (center % w) as isize);
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            if dr * dr + dc * dc > radius * radius {
                continue;
            }
            let (r, c) = (r0 + dr, c0 + dc);
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                continue;
            }
            let q = r as usize * w + c as usize;
            if gt.is_labeled(q) && out[q] != class {
                changed.push((q, out[q]));
                out[q] = class;
            }
        }
    }
}

fn flip_region(
    out: &mut [u8],
    gt: &LabelMask,
    start: usize,
    palette: &[u8],
    rng: &mut ChaCha8Rng,
    changed: &mut Vec<(usize, u8)>,
) {
    let (h, w) = gt.dims();
    let from = out[start];
    let alt: Vec<u8> = palette.iter().copied().filter(|&k| k != from).collect();
    let to = alt[rng.gen_range(0..alt.len())];
    let mut queue = VecDeque::from([start]);
    out[start] = to;
    changed.push((start, from));
    while let Some(p) = queue.pop_front() {
        for q in neighbors4(p, h, w) {
            if gt.is_labeled(q) && out[q] == from {
                out[q] = to;
                changed.push((q, from));
                queue.push_back(q);
            }
        }
    }
}
