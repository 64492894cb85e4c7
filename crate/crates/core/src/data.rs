//! Datasets and corruption processes.
//!
//! Dataset ingestion uses the IDX container (big-endian magic and dimension
//! header, unsigned-byte payload); a procedural shape generator provides a
//! corpus-free fallback. Corruptions cover independent pixel deletion, block
//! deletion, and SNR-calibrated Gaussian noise.

use crate::error::{Error, Result};
use crate::rng::{gaussian_sample, RngState};
use crate::tensor::Tensor;

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// A stack of grayscale images with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    height: usize,
    width: usize,
    pixels: Tensor, // [N, H, W]
}

impl ImageSet {
    pub fn new(height: usize, width: usize, pixels: Tensor) -> Result<ImageSet> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[1] != height || shape[2] != width {
            return Err(Error::shape(
                format!("[N, {height}, {width}]"),
                format!("{shape:?}"),
            ));
        }
        if shape[0] == 0 {
            return Err(Error::InvalidArgument("ImageSet needs at least one image".into()));
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "ImageSet pixels must lie in [0, 1]".into(),
            ));
        }
        Ok(ImageSet {
            height,
            width,
            pixels,
        })
    }

    pub fn count(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn pixel(&self, img: usize, r: usize, c: usize) -> f64 {
        self.pixels.data()[(img * self.height + r) * self.width + c]
    }

    /// Flattens to an `[N, H*W]` matrix (one row per image).
    pub fn flat_matrix(&self) -> Tensor {
        self.pixels
            .reshape(&[self.count(), self.height * self.width])
            .expect("flatten preserves element count")
    }

    /// Keeps images `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<ImageSet> {
        if start >= end || end > self.count() {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {end}) out of range for {} images",
                self.count()
            )));
        }
        let hw = self.height * self.width;
        let data = self.pixels.data()[start * hw..end * hw].to_vec();
        ImageSet::new(
            self.height,
            self.width,
            Tensor::from_vec(&[end - start, self.height, self.width], data)?,
        )
    }
}

/// Contents of one IDX file.
#[derive(Debug, Clone)]
pub enum IdxData {
    Images(ImageSet),
    Labels(Vec<u8>),
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated header: need 4 bytes at offset {offset}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX byte stream (images or labels).
///
/// Images: magic `0x00000803`, dimensions `(N, H, W)` as big-endian u32, then
/// `N*H*W` unsigned bytes scaled to `[0, 1]` by division by 255. Labels:
/// magic `0x00000801`, dimension `N`, then `N` raw bytes. Errors name the
/// byte offset at which parsing failed.
pub fn read_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_be_u32(bytes, 0)?;
    match magic {
        IDX_MAGIC_IMAGES => {
            let n = read_be_u32(bytes, 4)? as usize;
            let h = read_be_u32(bytes, 8)? as usize;
            let w = read_be_u32(bytes, 12)? as usize;
            let count = n
                .checked_mul(h)
                .and_then(|v| v.checked_mul(w))
                .ok_or(Error::Parse {
                    offset: 4,
                    message: format!("dimension overflow: {n} x {h} x {w}"),
                })?;
            let have = bytes.len() - 16;
            if have != count {
                return Err(Error::Parse {
                    offset: 16 + have.min(count),
                    message: format!("payload length {have} does not match {n} x {h} x {w} = {count}"),
                });
            }
            if n == 0 || h == 0 || w == 0 {
                return Err(Error::Parse {
                    offset: 4,
                    message: format!("empty image dimensions: {n} x {h} x {w}"),
                });
            }
            let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxData::Images(ImageSet::new(
                h,
                w,
                Tensor::from_vec(&[n, h, w], data)?,
            )?))
        }
        IDX_MAGIC_LABELS => {
            let n = read_be_u32(bytes, 4)? as usize;
            let have = bytes.len() - 8;
            if have != n {
                return Err(Error::Parse {
                    offset: 8 + have.min(n),
                    message: format!("payload length {have} does not match label count {n}"),
                });
            }
            Ok(IdxData::Labels(bytes[8..].to_vec()))
        }
        other => Err(Error::Parse {
            offset: 0,
            message: format!("unsupported magic 0x{other:08x}"),
        }),
    }
}

/// Serializes images back to IDX bytes, quantizing to unsigned bytes by
/// rounding `clamp(v, 0, 1) * 255`. Values are clamped, so lossy for data
/// outside `[0, 1]`; exact for byte-aligned pixel values.
pub fn write_idx_images(height: usize, width: usize, rows: &Tensor) -> Vec<u8> {
    assert_eq!(rows.shape().len(), 2);
    assert_eq!(rows.cols(), height * width);
    let n = rows.rows();
    let mut out = Vec::with_capacity(16 + n * height * width);
    out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(height as u32).to_be_bytes());
    out.extend_from_slice(&(width as u32).to_be_bytes());
    for &v in rows.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

/// Serializes labels to IDX bytes.
pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Corruption processes applied to observations.
#[derive(Debug, Clone, PartialEq)]
pub enum CorruptionKind {
    /// Each pixel independently zeroed with probability `p`.
    PixelBernoulli { p: f64 },
    /// `count` axis-aligned `size x size` blocks zeroed; overlap allowed.
    Blocks { count: usize, size: usize },
    /// Additive zero-mean Gaussian noise rescaled to an exact SNR in dB.
    GaussianSnr { target_db: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            CorruptionKind::PixelBernoulli { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "pixel-bernoulli probability {p} outside [0, 1]"
                    )));
                }
            }
            CorruptionKind::Blocks { size, .. } => {
                if size == 0 {
                    return Err(Error::InvalidArgument("block size must be >= 1".into()));
                }
            }
            CorruptionKind::GaussianSnr { target_db } => {
                if !target_db.is_finite() {
                    return Err(Error::InvalidArgument("target SNR must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Applies the corruption, returning flattened `[N, H*W]` observations.
    /// Gaussian noise may leave `[0, 1]`, so the result is a plain matrix.
    /// The SNR is calibrated over the whole set (one noise draw across all
    /// images), which stays well defined even when single images are blank.
    pub fn apply(&self, images: &ImageSet) -> Result<Tensor> {
        self.validate()?;
        let mut rng = RngState::new(self.seed);
        match self.kind {
            CorruptionKind::PixelBernoulli { p } => {
                Ok(corrupt_pixels(images, p, &mut rng)?.flat_matrix())
            }
            CorruptionKind::Blocks { count, size } => {
                Ok(corrupt_blocks(images, count, size, &mut rng)?.flat_matrix())
            }
            CorruptionKind::GaussianSnr { target_db } => {
                add_noise_snr(&images.flat_matrix(), target_db, &mut rng)
            }
        }
    }
}

/// Procedural images: random rectangles, ellipses, and strokes on a black
/// background. Deterministic under the rng stream; the mean foreground
/// fraction sits well inside `[0.05, 0.6]`. The first shape per image is
/// always an area shape so no image is near-empty.
pub fn gen_shapes(rng: &mut RngState, n: usize, h: usize, w: usize) -> Result<ImageSet> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(
            "gen_shapes requires n, h, w >= 1".into(),
        ));
    }
    let mut data = vec![0.0_f64; n * h * w];
    for img in 0..n {
        let buf = &mut data[img * h * w..(img + 1) * h * w];
        let extra = rng.next_below(3);
        for shape in 0..=extra {
            let intensity = rng.uniform_in(0.5, 1.0);
            let pick = if shape == 0 {
                rng.next_below(2)
            } else {
                rng.next_below(3)
            };
            match pick {
                0 => draw_rect(buf, h, w, rng, intensity),
                1 => draw_ellipse(buf, h, w, rng, intensity),
                _ => draw_stroke(buf, h, w, rng, intensity),
            }
        }
    }
    ImageSet::new(h, w, Tensor::from_vec(&[n, h, w], data)?)
}

fn draw_rect(buf: &mut [f64], h: usize, w: usize, rng: &mut RngState, val: f64) {
    let min_h = (h / 4).clamp(1, 3);
    let min_w = (w / 4).clamp(1, 3);
    let rh = min_h + rng.next_below((h / 2).max(min_h) - min_h + 1);
    let rw = min_w + rng.next_below((w / 2).max(min_w) - min_w + 1);
    let r0 = rng.next_below(h - rh + 1);
    let c0 = rng.next_below(w - rw + 1);
    for r in r0..r0 + rh {
        for c in c0..c0 + rw {
            buf[r * w + c] = val;
        }
    }
}

fn draw_ellipse(buf: &mut [f64], h: usize, w: usize, rng: &mut RngState, val: f64) {
    let cy = rng.uniform_in(0.2, 0.8) * h as f64;
    let cx = rng.uniform_in(0.2, 0.8) * w as f64;
    let ry = rng.uniform_in(0.08, 0.3) * h as f64 + 0.5;
    let rx = rng.uniform_in(0.08, 0.3) * w as f64 + 0.5;
    for r in 0..h {
        for c in 0..w {
            let dy = (r as f64 + 0.5 - cy) / ry;
            let dx = (c as f64 + 0.5 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                buf[r * w + c] = val;
            }
        }
    }
}

fn draw_stroke(buf: &mut [f64], h: usize, w: usize, rng: &mut RngState, val: f64) {
    let r0 = rng.next_below(h) as f64;
    let c0 = rng.next_below(w) as f64;
    let r1 = rng.next_below(h) as f64;
    let c1 = rng.next_below(w) as f64;
    let steps = (((r1 - r0).abs().max((c1 - c0).abs())) as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let r = (r0 + t * (r1 - r0)).round() as usize;
        let c = (c0 + t * (c1 - c0)).round() as usize;
        if r < h && c < w {
            buf[r * w + c] = val;
        }
    }
}

/// Zeroes each pixel independently with probability `p`; untouched pixels
/// are bit-identical to the input.
pub fn corrupt_pixels(img: &ImageSet, p: f64, rng: &mut RngState) -> Result<ImageSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "corrupt_pixels: probability {p} outside [0, 1]"
        )));
    }
    let mut pixels = img.pixels().clone();
    for v in pixels.data_mut() {
        if rng.uniform() < p {
            *v = 0.0;
        }
    }
    ImageSet::new(img.height(), img.width(), pixels)
}

/// Zeroes `count` random `size x size` blocks per image (uniform top-left
/// corners, overlap allowed).
pub fn corrupt_blocks(
    img: &ImageSet,
    count: usize,
    size: usize,
    rng: &mut RngState,
) -> Result<ImageSet> {
    let (h, w) = (img.height(), img.width());
    if size > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "corrupt_blocks: block size {size} exceeds image {h}x{w}"
        )));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("corrupt_blocks: size must be >= 1".into()));
    }
    let mut pixels = img.pixels().clone();
    for i in 0..img.count() {
        for _ in 0..count {
            let r0 = rng.next_below(h - size + 1);
            let c0 = rng.next_below(w - size + 1);
            for r in r0..r0 + size {
                for c in c0..c0 + size {
                    pixels.data_mut()[(i * h + r) * w + c] = 0.0;
                }
            }
        }
    }
    ImageSet::new(h, w, pixels)
}

/// Adds zero-mean Gaussian noise rescaled after sampling so the measured
/// SNR `10 log10(||signal||^2 / ||noise||^2)` equals `target_db` exactly.
pub fn add_noise_snr(signal: &Tensor, target_db: f64, rng: &mut RngState) -> Result<Tensor> {
    let signal_norm = signal.norm();
    if signal_norm == 0.0 {
        return Err(Error::InvalidArgument(
            "add_noise_snr: signal has zero norm".into(),
        ));
    }
    let raw = gaussian_sample(rng, signal.shape(), 0.0, 1.0)?;
    let raw_norm = raw.norm();
    if raw_norm == 0.0 {
        return Err(Error::InvalidArgument(
            "add_noise_snr: degenerate zero noise draw".into(),
        ));
    }
    let scale = signal_norm / (raw_norm * 10f64.powf(target_db / 20.0));
    let mut out = signal.clone();
    out.axpy(scale, &raw);
    Ok(out)
}
