//! Page ingestion: PGM decoding, Otsu binarization, contour location, and
//! extraction of 32×32 patches centered on handwriting contour pixels.

use crate::numerics::SeededRng;
use thiserror::Error;

/// Side length of extracted patches, in pixels.
pub const PATCH_SIDE: usize = 32;
/// Pixels to the left/top of a patch center (center sits at patch index 16,16).
const HALF_BEFORE: usize = 16;
/// Pixels to the right/bottom of a patch center.
const HALF_AFTER: usize = 15;

#[derive(Debug, Error)]
pub enum PageError {
    #[error("bad magic: expected P2 or P5")]
    BadMagic,
    #[error("truncated input: {0}")]
    Truncated(&'static str),
    #[error("unsupported maxval {0}: only maxval <= 255 is handled")]
    MaxvalUnsupported(u32),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("no contour pixels found")]
    NoContour,
    #[error("image {width}x{height} is smaller than {PATCH_SIDE}x{PATCH_SIDE}")]
    ImageTooSmall { width: usize, height: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, PageError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(PageError::Malformed(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Flips luminance; used for documents with light ink on dark ground.
    pub fn inverted(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| 255 - p).collect(),
        }
    }
}

/// Patches cut from one page, with the contour pixel each one is centered on.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub doc_id: String,
    pub writer_id: String,
    /// Row-major 32×32 values in [0, 1].
    pub patches: Vec<Vec<f32>>,
    pub centers: Vec<(usize, usize)>,
}

struct HeaderLexer<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderLexer<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && !self.bytes[self.pos].is_ascii_whitespace()
            && self.bytes[self.pos] != b'#'
        {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &'static str) -> Result<u32, PageError> {
        let tok = self.token().ok_or(PageError::Truncated(what))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| PageError::Malformed(format!("{what}: not a number")))
    }
}

/// Decodes a PGM image from bytes. Supports binary `P5` and ASCII `P2`
/// with maxval up to 255; header comments are skipped.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage, PageError> {
    let mut lex = HeaderLexer::new(bytes);
    let magic = lex.token().ok_or(PageError::Truncated("magic"))?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(PageError::BadMagic),
    };
    let width = lex.number("width")? as usize;
    let height = lex.number("height")? as usize;
    let maxval = lex.number("maxval")?;
    if maxval > 255 {
        return Err(PageError::MaxvalUnsupported(maxval));
    }
    if width == 0 || height == 0 {
        return Err(PageError::Malformed("zero image dimension".into()));
    }
    let count = width * height;

    let pixels = if binary {
        // Exactly one whitespace byte separates the header from the payload.
        let start = lex.pos + 1;
        if lex.pos >= bytes.len() || !bytes[lex.pos].is_ascii_whitespace() {
            return Err(PageError::Malformed("missing separator after maxval".into()));
        }
        if bytes.len() < start + count {
            return Err(PageError::Truncated("pixel payload"));
        }
        bytes[start..start + count].to_vec()
    } else {
        let mut pixels = Vec::with_capacity(count);
        for _ in 0..count {
            let v = lex.number("pixel value")?;
            if v > maxval {
                return Err(PageError::Malformed(format!(
                    "pixel value {v} exceeds maxval {maxval}"
                )));
            }
            pixels.push(v as u8);
        }
        pixels
    };
    GrayImage::new(width, height, pixels)
}

/// Encodes an image as binary PGM (`P5`, maxval 255).
pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Otsu's global threshold: the argmax of between-class variance over all
/// 256 candidate thresholds, ties broken toward the lower threshold.
///
/// A pixel is "ink" when its luminance is strictly below the returned value,
/// so a threshold of 0 marks nothing as ink.
pub fn otsu_threshold(img: &GrayImage) -> u8 {
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let total: u64 = img.pixels.len() as u64;
    let total_sum: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();

    let mut best_t = 0u8;
    let mut best_var = 0.0f64;
    let mut w0: u64 = 0;
    let mut sum0: u64 = 0;
    for t in 0..=255u16 {
        // Class 0 holds pixels strictly below t.
        if t > 0 {
            let v = (t - 1) as usize;
            w0 += hist[v];
            sum0 += v as u64 * hist[v];
        }
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 as f64 / w0 as f64;
        let mu1 = (total_sum - sum0) as f64 / w1 as f64;
        let var = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}

/// Returns the ink pixels (luminance < threshold) that touch the background:
/// at least one of their 8 neighbors is background, or they lie on the image
/// border. Sorted row-major (by y, then x).
pub fn contour_pixels(img: &GrayImage, threshold: u8) -> Vec<(usize, usize)> {
    let (w, h) = (img.width, img.height);
    let ink = |x: usize, y: usize| img.get(x, y) < threshold;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !ink(x, y) {
                continue;
            }
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                out.push((x, y));
                continue;
            }
            let mut boundary = false;
            'nbr: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = (x as i64 + dx) as usize;
                    let ny = (y as i64 + dy) as usize;
                    if !ink(nx, ny) {
                        boundary = true;
                        break 'nbr;
                    }
                }
            }
            if boundary {
                out.push((x, y));
            }
        }
    }
    out
}

/// True when a 32×32 window centered at (x, y) lies fully inside the image.
pub fn window_in_bounds(img: &GrayImage, x: usize, y: usize) -> bool {
    x >= HALF_BEFORE && y >= HALF_BEFORE && x + HALF_AFTER < img.width && y + HALF_AFTER < img.height
}

/// Extracts 32×32 patches centered on contour pixels.
///
/// Contour pixels are visited in row-major order taking every `stride`-th one;
/// centers whose window leaves the image are dropped; if more than
/// `max_patches` remain they are subsampled uniformly without replacement
/// (seeded), preserving row-major order. Pixel values are scaled to [0, 1].
pub fn extract_patches(
    img: &GrayImage,
    stride: usize,
    max_patches: usize,
    rng: &mut SeededRng,
) -> Result<PatchSet, PageError> {
    assert!(stride >= 1, "stride must be at least 1");
    if img.width < PATCH_SIDE || img.height < PATCH_SIDE {
        return Err(PageError::ImageTooSmall { width: img.width, height: img.height });
    }
    let threshold = otsu_threshold(img);
    let contour = contour_pixels(img, threshold);
    if contour.is_empty() {
        return Err(PageError::NoContour);
    }

    let mut centers: Vec<(usize, usize)> = contour
        .iter()
        .step_by(stride)
        .copied()
        .filter(|&(x, y)| window_in_bounds(img, x, y))
        .collect();
    if centers.len() > max_patches {
        let keep = rng.sample_indices(centers.len(), max_patches);
        centers = keep.into_iter().map(|i| centers[i]).collect();
    }

    let patches = centers
        .iter()
        .map(|&(cx, cy)| {
            let mut patch = Vec::with_capacity(PATCH_SIDE * PATCH_SIDE);
            for y in (cy - HALF_BEFORE)..=(cy + HALF_AFTER) {
                for x in (cx - HALF_BEFORE)..=(cx + HALF_AFTER) {
                    patch.push(f32::from(img.get(x, y)) / 255.0);
                }
            }
            patch
        })
        .collect();

    Ok(PatchSet {
        doc_id: String::new(),
        writer_id: String::new(),
        patches,
        centers,
    })
}

/// Serializes patches in `PTCH` format: magic `PTCH1\n`, ASCII header
/// `count width height\n`, then count·width·height little-endian f32 values.
pub fn write_ptch(patches: &[Vec<f32>]) -> Vec<u8> {
    let mut out = format!("PTCH1\n{} {} {}\n", patches.len(), PATCH_SIDE, PATCH_SIDE).into_bytes();
    for patch in patches {
        debug_assert_eq!(patch.len(), PATCH_SIDE * PATCH_SIDE);
        for v in patch {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a `PTCH` dump back into per-patch value vectors.
pub fn read_ptch(bytes: &[u8]) -> Result<Vec<Vec<f32>>, PageError> {
    let magic = b"PTCH1\n";
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(PageError::BadMagic);
    }
    let rest = &bytes[magic.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(PageError::Truncated("header line"))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| PageError::Malformed("header not utf-8".into()))?;
    let mut fields = header.split_ascii_whitespace();
    let mut next_num = |what: &'static str| -> Result<usize, PageError> {
        fields
            .next()
            .ok_or(PageError::Truncated(what))?
            .parse::<usize>()
            .map_err(|_| PageError::Malformed(format!("{what}: not a number")))
    };
    let count = next_num("count")?;
    let width = next_num("width")?;
    let height = next_num("height")?;
    if width != PATCH_SIDE || height != PATCH_SIDE {
        return Err(PageError::Malformed(format!(
            "unsupported patch size {width}x{height}"
        )));
    }
    let payload = &rest[nl + 1..];
    let per_patch = width * height;
    if payload.len() < count * per_patch * 4 {
        return Err(PageError::Truncated("patch payload"));
    }
    let mut patches = Vec::with_capacity(count);
    for p in 0..count {
        let mut patch = Vec::with_capacity(per_patch);
        for i in 0..per_patch {
            let off = (p * per_patch + i) * 4;
            patch.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()));
        }
        patches.push(patch);
    }
    Ok(patches)
}
