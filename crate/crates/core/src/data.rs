//! Label maps, synthetic segmentation datasets and PGM/PPM exchange.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel class ids, row-major `H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::invalid(
                "label_map",
                format!("{} values for a {height}×{width} map", values.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> usize) -> Self {
        let values = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> usize {
        self.values[row * self.width + col]
    }

    /// Fails when some entry is not below `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.values.iter().find(|&&v| v >= num_classes) {
            Some(bad) => Err(Error::invalid(
                "label_map",
                format!("class id {bad} out of range for {num_classes} classes"),
            )),
            None => Ok(()),
        }
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &v in &self.values {
            h[v] += 1;
        }
        h
    }
}

/// One image `[3×H×W]` with values in `[0, 1]` and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Horizontal bands cycling through the classes.
    Stripes,
    /// Class-0 background with a few overlapping discs.
    Blobs,
    /// Square cells, class `(row cell + col cell) mod n`.
    Checker,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Self::Stripes),
            "blobs" => Ok(Self::Blobs),
            "checker" => Ok(Self::Checker),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (stripes, blobs, checker)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stripes => "stripes",
            Self::Blobs => "blobs",
            Self::Checker => "checker",
        })
    }
}

/// Amplitude of the uniform pixel noise added on top of the class colour.
pub const NOISE: f64 = 0.2;

const PALETTE: [[f64; 3]; 8] = [
    [0.15, 0.15, 0.15],
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.80],
    [0.20, 0.80, 0.85],
    [0.95, 0.95, 0.95],
];

/// Base colour of a class; classes beyond the palette get a fixed
/// pseudo-random colour.
pub fn class_color(class: usize) -> [f64; 3] {
    if let Some(c) = PALETTE.get(class) {
        return *c;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
    [rng.random(), rng.random(), rng.random()]
}

/// Generator stream for sample `index`; layouts are drawn first, then noise.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Band height used by the stripes generator.
pub fn stripe_band(height: usize) -> usize {
    (height / 4).max(1)
}

/// Stripes label map: row `r` belongs to class `((r + phase) / band) mod n`.
pub fn stripes_labels(
    height: usize,
    width: usize,
    num_classes: usize,
    band: usize,
    phase: usize,
) -> LabelMap {
    LabelMap::from_fn(height, width, |r, _| ((r + phase) / band) % num_classes)
}

/// Cell size used by the checker generator.
pub fn checker_cell(height: usize, width: usize) -> usize {
    (height.min(width) / 4).max(1)
}

pub fn checker_labels(
    height: usize,
    width: usize,
    num_classes: usize,
    cell: usize,
    offset: (usize, usize),
) -> LabelMap {
    LabelMap::from_fn(height, width, |r, c| {
        ((r + offset.0) / cell + (c + offset.1) / cell) % num_classes
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub center: (f64, f64),
    pub radius: f64,
    pub class: usize,
}

impl Disc {
    /// Pixel centres at distance ≤ radius are inside.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.center.0;
        let dx = col as f64 + 0.5 - self.center.1;
        dy * dy + dx * dx <= self.radius * self.radius
    }
}

/// Discs of the blobs sample `index`, painted in order over class 0.
pub fn blob_layout(
    seed: u64,
    index: usize,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Vec<Disc> {
    let mut rng = sample_rng(seed, index);
    draw_blobs(&mut rng, height, width, num_classes)
}

fn draw_blobs<R: Rng>(rng: &mut R, height: usize, width: usize, num_classes: usize) -> Vec<Disc> {
    if num_classes < 2 {
        return Vec::new();
    }
    let side = height.min(width) as f64;
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| Disc {
            center: (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
            ),
            radius: rng.random_range(side / 8.0..side / 3.0).max(1.0),
            class: rng.random_range(1..num_classes),
        })
        .collect()
}

fn paint(discs: &[Disc], height: usize, width: usize) -> LabelMap {
    LabelMap::from_fn(height, width, |r, c| {
        discs
            .iter()
            .rev()
            .find(|d| d.contains(r, c))
            .map_or(0, |d| d.class)
    })
}

/// Noisy colour image for a label map.
fn render<R: Rng>(labels: &LabelMap, rng: &mut R) -> Tensor {
    let (h, w) = (labels.height(), labels.width());
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        let color = class_color(labels.values()[p]);
        for (ch, base) in color.iter().enumerate() {
            let v = (base + rng.random_range(-NOISE..=NOISE)).clamp(0.0, 1.0);
            // 8-bit levels so images survive a PPM round trip exactly
            data[ch * h * w + p] = (v * 255.0).round() / 255.0;
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Deterministic synthetic dataset; sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(
    kind: DatasetKind,
    n: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if height == 0 || width == 0 || num_classes == 0 {
        return Err(Error::invalid(
            "synth_dataset",
            format!("{height}×{width} images with {num_classes} classes"),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let labels = match kind {
                DatasetKind::Stripes => {
                    let band = stripe_band(height);
                    let phase = rng.random_range(0..band * num_classes);
                    stripes_labels(height, width, num_classes, band, phase)
                }
                DatasetKind::Blobs => paint(
                    &draw_blobs(&mut rng, height, width, num_classes),
                    height,
                    width,
                ),
                DatasetKind::Checker => {
                    let cell = checker_cell(height, width);
                    let span = cell * num_classes;
                    let offset = (rng.random_range(0..span), rng.random_range(0..span));
                    checker_labels(height, width, num_classes, cell, offset)
                }
            };
            let image = render(&labels, &mut rng);
            Sample { image, labels }
        })
        .collect())
}

fn image_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// (magic, width, height, maxval, data)
type PnmParts<'a> = (&'a [u8], usize, usize, usize, &'a [u8]);

/// Parses a binary PNM header.
fn parse_pnm<'a>(path: &Path, bytes: &'a [u8]) -> Result<PnmParts<'a>> {
    let mut pos = 0;
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
            return Err(image_error(path, "truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let number = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                image_error(
                    path,
                    format!("bad header field {:?}", String::from_utf8_lossy(f)),
                )
            })
    };
    let (w, h, maxval) = (number(fields[1])?, number(fields[2])?, number(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(image_error(
            path,
            format!("unsupported geometry {w}×{h}, maxval {maxval}"),
        ));
    }
    Ok((fields[0], w, h, maxval, bytes.get(pos..).unwrap_or(&[])))
}

/// Writes `[3×H×W]` values in `[0, 1]` as a binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(image_error(
            path,
            format!("expected [3×H×W], got {:?}", image.shape()),
        ));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (magic, w, h, maxval, raster) = parse_pnm(path, &bytes)?;
    if magic != b"P6" {
        return Err(image_error(path, "not a binary PPM (P6)"));
    }
    if raster.len() < 3 * w * h {
        return Err(image_error(path, "truncated raster"));
    }
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + p] = f64::from(raster[3 * p + ch]) / maxval as f64;
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Writes class ids as gray levels of a binary PGM (P5).
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    for &v in labels.values() {
        let level =
            u8::try_from(v).map_err(|_| image_error(path, format!("class id {v} exceeds 255")))?;
        out.push(level);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let (magic, w, h, _, raster) = parse_pnm(path, &bytes)?;
    if magic != b"P5" {
        return Err(image_error(path, "not a binary PGM (P5)"));
    }
    if raster.len() < w * h {
        return Err(image_error(path, "truncated raster"));
    }
    LabelMap::new(
        h,
        w,
        raster[..w * h].iter().map(|&b| usize::from(b)).collect(),
    )
}

/// Writes `NNNN.ppm` / `NNNN.pgm` pairs into `dir`.
pub fn export_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&dir.join(format!("{i:04}.ppm")), &s.image)?;
        write_pgm(&dir.join(format!("{i:04}.pgm")), &s.labels)?;
    }
    Ok(())
}

/// Reads every `*.ppm` in `dir` (sorted by name) with its `*.pgm` labels.
pub fn import_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    images.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    images.sort();
    images
        .into_iter()
        .map(|img| {
            let image = read_ppm(&img)?;
            let labels = read_pgm(&img.with_extension("pgm"))?;
            if image.shape()[1..] != [labels.height(), labels.width()] {
                return Err(image_error(&img, "image and label sizes differ"));
            }
            Ok(Sample { image, labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stripes_alternate_for_two_classes() {
        let l = stripes_labels(8, 3, 2, 2, 0);
        let rows: Vec<usize> = (0..8).map(|r| l.at(r, 0)).collect();
        assert_eq!(rows, vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn datasets_are_deterministic_and_valid() {
        for kind in [
            DatasetKind::Stripes,
            DatasetKind::Blobs,
            DatasetKind::Checker,
        ] {
            let a = synth_dataset(kind, 4, 8, 8, 3, 9).unwrap();
            assert_eq!(a, synth_dataset(kind, 4, 8, 8, 3, 9).unwrap());
            assert_ne!(a, synth_dataset(kind, 4, 8, 8, 3, 10).unwrap());
            for s in &a {
                s.labels.check_classes(3).unwrap();
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn sample_does_not_depend_on_dataset_size() {
        let small = synth_dataset(DatasetKind::Blobs, 2, 8, 8, 3, 1).unwrap();
        let big = synth_dataset(DatasetKind::Blobs, 5, 8, 8, 3, 1).unwrap();
        assert_eq!(small[..], big[..2]);
    }

    #[test]
    fn kind_names_round_trip() {
        for s in ["stripes", "blobs", "checker"] {
            assert_eq!(s.parse::<DatasetKind>().unwrap().to_string(), s);
        }
        assert!("cityscapes".parse::<DatasetKind>().is_err());
    }
}
