//! Procedural image dataset, augmentation, and PPM/PGM image files.
//!
//! Each image holds one anti-aliased geometric shape filled with a
//! multi-octave value-noise texture over a flat background colour. The shape
//! and the background colour are the two class labels. Generation only uses
//! IEEE-exact arithmetic (`+ - * / sqrt`), so a [`DatasetSpec`] yields the
//! same bytes on every platform and for any thread count.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// `N x 3 x H x W` pixels in `[-1, 1]`.
pub type ImageBatch = Tensor<f32>;

/// Largest spatial downsampling factor any network applies.
pub const MAX_DOWNSAMPLE: usize = 32;

/// Minimum per-image pixel standard deviation the generator guarantees.
pub const MIN_PIXEL_STD: f64 = 0.05;

pub const SHAPE_NAMES: [&str; 6] = ["circle", "square", "triangle", "ring", "cross", "star"];

/// Background colours in `[-1, 1]` RGB, indexed by colour label.
pub const PALETTE: [[f64; 3]; 8] = [
    [-0.8, -0.8, -0.8],
    [0.8, 0.8, 0.8],
    [0.7, -0.6, -0.6],
    [-0.6, 0.6, -0.6],
    [-0.6, -0.5, 0.7],
    [0.7, 0.6, -0.7],
    [-0.6, 0.6, 0.7],
    [0.6, -0.6, 0.6],
];

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub num_shape_classes: usize,
    pub num_color_classes: usize,
    pub texture_octaves: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_images: 2048,
            image_size: 32,
            num_shape_classes: SHAPE_NAMES.len(),
            num_color_classes: PALETTE.len(),
            texture_octaves: 3,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::config("num_images", "must be greater than 0"));
        }
        if ![32, 64, 128].contains(&self.image_size) {
            return Err(Error::config(
                "image_size",
                format!("{} is not one of 32, 64, 128", self.image_size),
            ));
        }
        if self.num_shape_classes == 0 || self.num_shape_classes > SHAPE_NAMES.len() {
            return Err(Error::config(
                "num_shape_classes",
                format!("must be in 1..={}", SHAPE_NAMES.len()),
            ));
        }
        if self.num_color_classes == 0 || self.num_color_classes > PALETTE.len() {
            return Err(Error::config(
                "num_color_classes",
                format!("must be in 1..={}", PALETTE.len()),
            ));
        }
        if self.texture_octaves == 0 || self.texture_octaves > 8 {
            return Err(Error::config("texture_octaves", "must be in 1..=8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: ImageBatch,
    pub shape_labels: Vec<usize>,
    pub color_labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.shape_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape_labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (ImageBatch, Vec<usize>, Vec<usize>) {
        (
            self.images.select_outer(indices),
            indices.iter().map(|&i| self.shape_labels[i]).collect(),
            indices.iter().map(|&i| self.color_labels[i]).collect(),
        )
    }

    /// Bytes of every image quantized to 8 bits, for fingerprinting.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for (s, c) in self.shape_labels.iter().zip(&self.color_labels) {
            h.update((*s as u32).to_le_bytes());
            h.update((*c as u32).to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

// ----- procedural generation ----------------------------------------------

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Signed distance to a closed polygon (negative inside).
fn polygon_sdf(p: [f64; 2], verts: &[[f64; 2]]) -> f64 {
    let mut d = f64::INFINITY;
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + n - 1) % n];
        let e = [b[0] - a[0], b[1] - a[1]];
        let w = [p[0] - a[0], p[1] - a[1]];
        let t = clamp01(dot(w, e) / dot(e, e));
        let q = [w[0] - e[0] * t, w[1] - e[1] * t];
        d = d.min(dot(q, q));
        let c1 = p[1] >= a[1];
        let c2 = p[1] < b[1];
        let c3 = e[0] * w[1] > e[1] * w[0];
        if (c1 && c2 && c3) || (!c1 && !c2 && !c3) {
            inside = !inside;
        }
    }
    let d = d.sqrt();
    if inside {
        -d
    } else {
        d
    }
}

fn star_vertices() -> Vec<[f64; 2]> {
    let s5 = 5f64.sqrt();
    let c18 = (10.0 + 2.0 * s5).sqrt() / 4.0;
    let s18 = (s5 - 1.0) / 4.0;
    let c54 = (10.0 - 2.0 * s5).sqrt() / 4.0;
    let s54 = (s5 + 1.0) / 4.0;
    let inner = 0.45;
    // Points at 90, 126, 162, ... degrees, alternating outer and inner radius.
    let dirs = [
        [0.0, 1.0],
        [-c54, s54],
        [-c18, s18],
        [-c18, -s18],
        [-c54, -s54],
        [0.0, -1.0],
        [c54, -s54],
        [c18, -s18],
        [c18, s18],
        [c54, s54],
    ];
    dirs.iter()
        .enumerate()
        .map(|(i, d)| {
            let r = if i % 2 == 0 { 1.0 } else { inner };
            [d[0] * r, d[1] * r]
        })
        .collect()
}

/// Signed distance to a unit-scale shape centred at the origin.
fn shape_sdf(shape: usize, p: [f64; 2]) -> f64 {
    match shape {
        0 => dot(p, p).sqrt() - 1.0,
        1 => {
            let q = [p[0].abs() - 0.8, p[1].abs() - 0.8];
            let outside = [q[0].max(0.0), q[1].max(0.0)];
            dot(outside, outside).sqrt() + q[0].max(q[1]).min(0.0)
        }
        2 => {
            let h = 3f64.sqrt() / 2.0;
            polygon_sdf(p, &[[0.0, 1.0], [-h, -0.5], [h, -0.5]])
        }
        3 => (dot(p, p).sqrt() - 0.75).abs() - 0.28,
        4 => {
            let (a, b) = (0.3, 1.0);
            polygon_sdf(
                p,
                &[
                    [-a, b],
                    [a, b],
                    [a, a],
                    [b, a],
                    [b, -a],
                    [a, -a],
                    [a, -b],
                    [-a, -b],
                    [-a, -a],
                    [-b, -a],
                    [-b, a],
                    [-a, a],
                ],
            )
        }
        _ => polygon_sdf(p, &star_vertices()),
    }
}

fn lattice_value(key: u64, octave: usize, ix: i64, iy: i64) -> f64 {
    let mixed = rng::derive_seed(
        key ^ (octave as u64).wrapping_mul(0x9E37_79B9),
        "lattice",
        ((ix as u64) << 32) ^ (iy as u64 & 0xffff_ffff),
    );
    (mixed >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]` at normalized coordinates `u, v`.
fn value_noise(key: u64, octaves: usize, u: f64, v: f64) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut freq = 4.0;
    for o in 0..octaves {
        let (x, y) = (u * freq, v * freq);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (smooth(x - x0), smooth(y - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let v00 = lattice_value(key, o, ix, iy);
        let v10 = lattice_value(key, o, ix + 1, iy);
        let v01 = lattice_value(key, o, ix, iy + 1);
        let v11 = lattice_value(key, o, ix + 1, iy + 1);
        let top = v00 + (v10 - v00) * fx;
        let bottom = v01 + (v11 - v01) * fx;
        total += amp * (top + (bottom - top) * fy);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    total / norm
}

fn render_image(spec: &DatasetSpec, index: usize, shape: usize, color: usize) -> Vec<f32> {
    let s = spec.image_size;
    let mut attempt = 0u64;
    loop {
        let key = rng::derive_seed(spec.seed, "image", index as u64);
        let mut r = rng::stream(key, "attempt", attempt);
        let center = [
            r.random_range(-0.25..0.25),
            r.random_range(-0.25..0.25),
        ];
        let radius: f64 = r.random_range(0.45..0.7);
        let rot = loop {
            let (a, b): (f64, f64) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            let n2 = a * a + b * b;
            if n2 > 1e-4 && n2 <= 1.0 {
                let n = n2.sqrt();
                break [a / n, b / n];
            }
        };
        let col_a: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.9..0.9));
        let col_b: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.9..0.9));
        let texture_key: u64 = r.random();
        let bg = PALETTE[color];
        let half = s as f64 / 2.0;
        let mut px = vec![0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 + 0.5) / half - 1.0;
                let v = (y as f64 + 0.5) / half - 1.0;
                let d = [u - center[0], v - center[1]];
                // inverse rotation, then unit scale
                let q = [
                    (d[0] * rot[0] + d[1] * rot[1]) / radius,
                    (-d[0] * rot[1] + d[1] * rot[0]) / radius,
                ];
                let dist_px = shape_sdf(shape, q) * radius * half;
                let cover = clamp01(0.5 - dist_px);
                let n = value_noise(texture_key, spec.texture_octaves, (u + 1.0) / 2.0, (v + 1.0) / 2.0);
                for c in 0..3 {
                    let fill = col_a[c] + (col_b[c] - col_a[c]) * n;
                    let val = (cover * fill + (1.0 - cover) * bg[c]).clamp(-1.0, 1.0);
                    px[(c * s + y) * s + x] = val as f32;
                }
            }
        }
        if pixel_std(&px) >= MIN_PIXEL_STD {
            return px;
        }
        attempt += 1;
    }
}

/// Population standard deviation over all channels of one image.
pub fn pixel_std(px: &[f32]) -> f64 {
    let n = px.len() as f64;
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
    (px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Deterministic procedural dataset for `spec`.
pub fn generate_procedural_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let items: Vec<(Vec<f32>, usize, usize)> = (0..spec.num_images)
        .into_par_iter()
        .map(|i| {
            let mut lr = rng::stream(spec.seed, "labels", i as u64);
            let shape = lr.random_range(0..spec.num_shape_classes);
            let color = lr.random_range(0..spec.num_color_classes);
            (render_image(spec, i, shape, color), shape, color)
        })
        .collect();
    let mut data = Vec::with_capacity(spec.num_images * 3 * s * s);
    let mut shape_labels = Vec::with_capacity(spec.num_images);
    let mut color_labels = Vec::with_capacity(spec.num_images);
    for (px, sh, co) in items {
        data.extend_from_slice(&px);
        shape_labels.push(sh);
        color_labels.push(co);
    }
    Ok(Dataset {
        spec: spec.clone(),
        images: Tensor::from_vec(&[spec.num_images, 3, s, s], data)?,
        shape_labels,
        color_labels,
    })
}

/// Check the `[-1, 1]`, finiteness, and size invariants of an image batch.
pub fn validate_image_batch(batch: &ImageBatch) -> Result<()> {
    let sh = batch.shape();
    if sh.len() != 4 || sh[1] != 3 {
        return Err(Error::Shape(format!("image batch must be N x 3 x H x W, got {sh:?}")));
    }
    if sh[2] % MAX_DOWNSAMPLE != 0 || sh[3] % MAX_DOWNSAMPLE != 0 {
        return Err(Error::Shape(format!(
            "image size {}x{} is not a multiple of {MAX_DOWNSAMPLE}",
            sh[2], sh[3]
        )));
    }
    for &v in batch.data() {
        if !v.is_finite() || !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&(v as f64)) {
            return Err(Error::numeric(format!("pixel value {v} outside [-1, 1]")));
        }
    }
    Ok(())
}

// ----- augmentation -------------------------------------------------------

/// Random crop offset and flip decision for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropFlip {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

fn check_crop(batch: &ImageBatch, crop: usize) -> Result<(usize, usize, usize, usize)> {
    if batch.rank() != 4 {
        return Err(Error::Shape(format!("expected N x C x H x W, got {:?}", batch.shape())));
    }
    let (n, c, h, w) = (batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3));
    if crop == 0 || crop > h || crop > w {
        return Err(Error::config(
            "crop_size",
            format!("{crop} does not fit images of size {h}x{w}"),
        ));
    }
    Ok((n, c, h, w))
}

/// Apply one explicit crop/flip to every image of `batch`, one draw per image.
pub fn crop_flip(batch: &ImageBatch, crop: usize, draws: &[CropFlip]) -> Result<ImageBatch> {
    let (n, c, h, w) = check_crop(batch, crop)?;
    if draws.len() != n {
        return Err(Error::Shape(format!("{} crop draws for {n} images", draws.len())));
    }
    let mut out = Tensor::zeros(&[n, c, crop, crop]);
    for (i, d) in draws.iter().enumerate() {
        if d.top + crop > h || d.left + crop > w {
            return Err(Error::config("crop_size", "crop offset out of bounds"));
        }
        let src = batch.outer(i);
        let dst = out.outer_mut(i);
        for ch in 0..c {
            for y in 0..crop {
                let srow = &src[(ch * h + d.top + y) * w + d.left..][..crop];
                let drow = &mut dst[(ch * crop + y) * crop..][..crop];
                if d.flip {
                    for (x, v) in drow.iter_mut().enumerate() {
                        *v = srow[crop - 1 - x];
                    }
                } else {
                    drow.copy_from_slice(srow);
                }
            }
        }
    }
    Ok(out)
}

/// Random crop to `crop` pixels plus horizontal flip with probability 0.5.
pub fn augment_train<R: Rng + ?Sized>(
    batch: &ImageBatch,
    crop: usize,
    rng: &mut R,
) -> Result<ImageBatch> {
    let (n, _, h, w) = check_crop(batch, crop)?;
    let draws: Vec<CropFlip> = (0..n)
        .map(|_| CropFlip {
            top: rng.random_range(0..=h - crop),
            left: rng.random_range(0..=w - crop),
            flip: rng.random_bool(0.5),
        })
        .collect();
    crop_flip(batch, crop, &draws)
}

/// Deterministic centre crop.
pub fn preprocess_eval(batch: &ImageBatch, crop: usize) -> Result<ImageBatch> {
    let (n, _, h, w) = check_crop(batch, crop)?;
    let d = CropFlip {
        top: (h - crop) / 2,
        left: (w - crop) / 2,
        flip: false,
    };
    crop_flip(batch, crop, &vec![d; n])
}

// ----- PPM / PGM ----------------------------------------------------------

pub fn quantize(v: f32) -> u8 {
    ((v as f64 + 1.0) * 255.0 / 2.0).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(p: u8) -> f32 {
    (2.0 * p as f64 / 255.0 - 1.0) as f32
}

/// Encode a `C x H x W` (or `1 x C x H x W`) image with `C` in {1, 3} as P5/P6.
pub fn encode_pnm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let sh = image.shape();
    let (c, h, w) = match sh {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::Shape(format!("cannot encode image of shape {sh:?}"))),
    };
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::Shape(format!("{c} channels; expected 1 or 3"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(d[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl HeaderCursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

/// Decode P5/P6 bytes into a `1 x C x H x W` tensor in `[-1, 1]`.
pub fn decode_pnm(bytes: &[u8], path: &str) -> Result<Tensor<f32>> {
    let mut cur = HeaderCursor { bytes, pos: 0, path };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(cur.err("missing P5/P6 magic")),
    };
    cur.pos = 2;
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace after maxval")),
    }
    if w == 0 || h == 0 {
        return Err(cur.err("zero image dimension"));
    }
    let need = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Format {
            path: path.to_string(),
            offset: bytes.len() as u64,
            message: format!("truncated payload: {} of {need} bytes", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Format {
            path: path.to_string(),
            offset: (cur.pos + need) as u64,
            message: "trailing data after payload".into(),
        });
    }
    let mut data = vec![0f32; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = dequantize(payload[(y * w + x) * channels + c]);
            }
        }
    }
    Tensor::from_vec(&[1, channels, h, w], data)
}

pub fn write_image_file(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = encode_pnm(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, &path.display().to_string())
}

// ----- dataset on disk ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub shape_label: usize,
    pub color_label: usize,
    pub relative_path: PathBuf,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            e.index,
            e.shape_label,
            e.color_label,
            e.relative_path.display()
        );
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.is_empty() {
            let fields: Vec<&str> = trimmed.split('\t').collect();
            let bad = |m: &str| Error::Format {
                path: "manifest".into(),
                offset,
                message: m.to_string(),
            };
            if fields.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad("expected an integer"));
            out.push(ManifestEntry {
                index: num(fields[0])?,
                shape_label: num(fields[1])?,
                color_label: num(fields[2])?,
                relative_path: PathBuf::from(fields[3]),
            });
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

/// Write every image as PPM under `dir/images/` plus `dir/manifest.tsv`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let rel = PathBuf::from("images").join(format!("{i:06}.ppm"));
        let img = dataset.images.select_outer(&[i]);
        write_image_file(&dir.join(&rel), &img)?;
        entries.push(ManifestEntry {
            index: i,
            shape_label: dataset.shape_labels[i],
            color_label: dataset.color_labels[i],
            relative_path: rel,
        });
    }
    let manifest = dir.join("manifest.tsv");
    let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(format_manifest(&entries).as_bytes())
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(shape: &[usize], vals: &[f32]) -> ImageBatch {
        Tensor::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn invalid_spec_names_field() {
        let spec = DatasetSpec {
            num_images: 0,
            ..Default::default()
        };
        match generate_procedural_dataset(&spec) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "num_images"),
            other => panic!("expected config error, got {other:?}"),
        }
        let spec = DatasetSpec {
            image_size: 48,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config { field, .. }) if field == "image_size"));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec {
            num_images: 16,
            seed: 7,
            ..Default::default()
        };
        let a = generate_procedural_dataset(&spec).unwrap();
        let b = generate_procedural_dataset(&spec).unwrap();
        assert_eq!(a, b);
        validate_image_batch(&a.images).unwrap();
        let c = generate_procedural_dataset(&DatasetSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn horizontal_flip_of_2x2() {
        let b = img(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let d = CropFlip { top: 0, left: 0, flip: true };
        let out = crop_flip(&b, 2, &[d]).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0, 4.0, 3.0]);
        let id = crop_flip(&b, 2, &[CropFlip { flip: false, ..d }]).unwrap();
        assert_eq!(id, b);
    }

    #[test]
    fn forced_crop_offset_and_center_crop() {
        let b = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32);
        let d = CropFlip { top: 1, left: 1, flip: false };
        let out = crop_flip(&b, 2, &[d]).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert_eq!(preprocess_eval(&b, 2).unwrap(), out);
        assert_eq!(preprocess_eval(&b, 4).unwrap(), b);
        assert!(matches!(preprocess_eval(&b, 5), Err(Error::Config { .. })));
    }

    #[test]
    fn full_size_augment_only_flips() {
        let b = Tensor::from_fn(&[3, 1, 4, 4], |i| i as f32);
        let mut r = rng::stream(1, "aug", 0);
        let out = augment_train(&b, 4, &mut r).unwrap();
        for i in 0..3 {
            let (o, s) = (out.outer(i), b.outer(i));
            let flipped: Vec<f32> = s.chunks(4).flat_map(|r| r.iter().rev().copied()).collect();
            assert!(o == s || o == flipped.as_slice());
        }
    }

    #[test]
    fn quantization_endpoints() {
        assert_eq!(dequantize(0), -1.0);
        assert_eq!(dequantize(255), 1.0);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        for p in 0..=255u8 {
            assert_eq!(quantize(dequantize(p)), p);
        }
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(7u8, 40));
        match decode_pnm(&bytes, "t.ppm") {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        assert!(decode_pnm(b"P3\n1 1\n255\n", "x").is_err());
        let e = decode_pnm(b"P6\n1 1\n65535\n\0\0\0\0\0\0", "x").unwrap_err();
        assert!(e.to_string().contains("maxval"));
        let e = decode_pnm(b"P6\n1 x\n255\n", "x").unwrap_err();
        assert!(matches!(e, Error::Format { offset: 5, .. }), "{e}");
    }

    #[test]
    fn pgm_with_comment_round_trips() {
        let bytes = b"P5\n# comment\n2 1\n255\n\x00\xff".to_vec();
        let t = decode_pnm(&bytes, "g.pgm").unwrap();
        assert_eq!(t.shape(), &[1, 1, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0]);
        assert_eq!(encode_pnm(&t).unwrap(), b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![ManifestEntry {
            index: 3,
            shape_label: 1,
            color_label: 5,
            relative_path: "images/000003.ppm".into(),
        }];
        let text = format_manifest(&entries);
        assert_eq!(text, "3\t1\t5\timages/000003.ppm\n");
        assert_eq!(parse_manifest(&text).unwrap(), entries);
        assert!(parse_manifest("1\t2\n").is_err());
    }
}
