//! Linear HDR and display-referred images, PFM interchange, sRGB tone mapping
//! and illuminant colors (blackbody and HSV).

use std::fmt;
use std::io::Cursor;

use thiserror::Error;

pub type Rgb = [f32; 3];

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("pixel buffer has {got} entries, expected {width}x{height}")]
    SizeMismatch { width: usize, height: usize, got: usize },
    #[error("{}pixel {pixel} component {channel} is {value}, expected a finite value >= 0", frame_prefix(*.frame))]
    InvalidRadiance {
        frame: Option<usize>,
        pixel: usize,
        channel: usize,
        value: f32,
    },
    #[error("pixel {pixel} component {channel} is {value}, expected a value in [0, 1]")]
    OutOfDisplayRange { pixel: usize, channel: usize, value: f32 },
    #[error("png: {0}")]
    Png(String),
}

fn frame_prefix(frame: Option<usize>) -> String {
    frame.map(|f| format!("frame {f}: ")).unwrap_or_default()
}

#[derive(Debug, Error, PartialEq)]
pub enum ColorError {
    #[error("temperature {0} K outside [1000, 20000]")]
    TemperatureOutOfRange(f64),
    #[error("hsv component {name} = {value} out of range")]
    HsvOutOfRange { name: &'static str, value: f64 },
}

/// Linear radiance raster, row-major, top row first.
#[derive(Clone, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl fmt::Debug for HdrImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HdrImage({}x{})", self.width, self.height)
    }
}

impl HdrImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    /// Builds an image, checking that every component is finite and non-negative.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self, ImageError> {
        let img = Self::from_pixels_unchecked(width, height, pixels)?;
        img.validate(None)?;
        Ok(img)
    }

    /// Builds an image, checking only the pixel count.
    pub fn from_pixels_unchecked(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn validate(&self, frame: Option<usize>) -> Result<(), ImageError> {
        for (pixel, p) in self.pixels.iter().enumerate() {
            for (channel, &value) in p.iter().enumerate() {
                if !value.is_finite() || value < 0.0 {
                    return Err(ImageError::InvalidRadiance {
                        frame,
                        pixel,
                        channel,
                        value,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Rgb) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn scaled(&self, k: f32) -> HdrImage {
        HdrImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| [p[0] * k, p[1] * k, p[2] * k]).collect(),
        }
    }

    pub fn to_pfm(&self) -> Vec<u8> {
        write_pfm_raw(self.width, self.height, &self.pixels)
    }

    pub fn from_pfm(bytes: &[u8]) -> Result<Self, PfmError> {
        let (width, height, pixels) = read_pfm_raw(bytes)?;
        let img = HdrImage { width, height, pixels };
        img.validate(None).map_err(PfmError::Image)?;
        Ok(img)
    }
}

/// Display-referred raster with components in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct LdrImage {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl fmt::Debug for LdrImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LdrImage({}x{})", self.width, self.height)
    }
}

impl LdrImage {
    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                got: pixels.len(),
            });
        }
        for (pixel, p) in pixels.iter().enumerate() {
            for (channel, &value) in p.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(ImageError::OutOfDisplayRange { pixel, channel, value });
                }
            }
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    /// 8-bit sRGB PNG, values rounded to nearest code.
    pub fn to_png(&self) -> Vec<u8> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, p) in self.pixels.iter().enumerate() {
            let q = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel((i % self.width) as u32, (i / self.width) as u32, image::Rgb(q));
        }
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| ImageError::Png(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.pixels().map(|p| p.0.map(|c| c as f32 / 255.0)).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            pixels,
        })
    }

    /// Stores display values in a PFM container (lossless float archive).
    pub fn to_pfm(&self) -> Vec<u8> {
        write_pfm_raw(self.width, self.height, &self.pixels)
    }

    pub fn from_pfm(bytes: &[u8]) -> Result<Self, PfmError> {
        let (w, h, pixels) = read_pfm_raw(bytes)?;
        Self::from_pixels(w, h, pixels).map_err(PfmError::Image)
    }
}

/// IEC 61966-2-1 encoding of one linear component, clamped to `[0, 1]`.
#[inline]
pub fn srgb_encode(x: f64) -> f64 {
    let y = if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    };
    y.clamp(0.0, 1.0)
}

pub fn tone_map_srgb(img: &HdrImage) -> Result<LdrImage, ImageError> {
    tone_map_frame(img, None)
}

/// Tone maps a frame, tagging any rejection with its frame index.
pub fn tone_map_frame(img: &HdrImage, frame: Option<usize>) -> Result<LdrImage, ImageError> {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for (pixel, p) in img.pixels.iter().enumerate() {
        let mut out = [0.0f32; 3];
        for channel in 0..3 {
            let value = p[channel];
            if !value.is_finite() {
                return Err(ImageError::InvalidRadiance {
                    frame,
                    pixel,
                    channel,
                    value,
                });
            }
            out[channel] = srgb_encode(value as f64) as f32;
        }
        pixels.push(out);
    }
    Ok(LdrImage {
        width: img.width,
        height: img.height,
        pixels,
    })
}

// ---------------------------------------------------------------------------
// Illuminant colors
// ---------------------------------------------------------------------------

fn lobe(lambda: f64, mu: f64, sigma_lo: f64, sigma_hi: f64) -> f64 {
    let s = if lambda < mu { sigma_lo } else { sigma_hi };
    let t = (lambda - mu) / s;
    (-0.5 * t * t).exp()
}

/// CIE 1931 2° color-matching functions, multi-lobe Gaussian fit
/// (Wyman, Sloan and Shirley 2013). Wavelength in nanometres.
pub fn cie_xyz_bar(lambda: f64) -> [f64; 3] {
    let x = 1.056 * lobe(lambda, 599.8, 37.9, 31.0) + 0.362 * lobe(lambda, 442.0, 16.0, 26.7)
        - 0.065 * lobe(lambda, 501.1, 20.4, 26.2);
    let y = 0.821 * lobe(lambda, 568.8, 46.9, 40.5) + 0.286 * lobe(lambda, 530.9, 16.3, 31.1);
    let z = 1.217 * lobe(lambda, 437.0, 11.8, 36.0) + 0.681 * lobe(lambda, 459.0, 26.0, 13.8);
    [x, y, z]
}

/// Planck spectral radiance (arbitrary but fixed scale).
pub fn planck(lambda_nm: f64, temperature: f64) -> f64 {
    const H: f64 = 6.626_070_15e-34;
    const C: f64 = 2.997_924_58e8;
    const K: f64 = 1.380_649e-23;
    let l = lambda_nm * 1e-9;
    2.0 * H * C * C / l.powi(5) / ((H * C / (l * K * temperature)).exp_m1())
}

/// Linear sRGB (D65) from CIE XYZ.
pub fn xyz_to_linear_srgb(xyz: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = xyz;
    [
        3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z,
        -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z,
        0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z,
    ]
}

/// Normalized linear-sRGB color of a blackbody at `temperature` kelvin.
///
/// Integrates Planck x CMF at 1 nm over 380..=780 nm, converts to linear
/// sRGB, clamps negatives and scales the largest component to exactly 1.
pub fn blackbody_rgb(temperature: f64) -> Result<Rgb, ColorError> {
    if !(1000.0..=20000.0).contains(&temperature) {
        return Err(ColorError::TemperatureOutOfRange(temperature));
    }
    let mut xyz = [0.0f64; 3];
    for nm in 380..=780 {
        let lambda = nm as f64;
        let p = planck(lambda, temperature);
        let bar = cie_xyz_bar(lambda);
        for k in 0..3 {
            xyz[k] += p * bar[k];
        }
    }
    let rgb = xyz_to_linear_srgb(xyz).map(|c| c.max(0.0));
    let peak = rgb[0].max(rgb[1]).max(rgb[2]);
    let mut out = rgb.map(|c| (c / peak) as f32);
    // pin the peak to exactly 1 regardless of rounding
    for (c, v) in out.iter_mut().enumerate() {
        if rgb[c] == peak {
            *v = 1.0;
        }
    }
    Ok(out)
}

/// Hexcone HSV to RGB. Hue is in turns.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Result<Rgb, ColorError> {
    if !(0.0..1.0).contains(&h) {
        return Err(ColorError::HsvOutOfRange { name: "h", value: h });
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(ColorError::HsvOutOfRange { name: "s", value: s });
    }
    if !(0.0..=1.0).contains(&v) {
        return Err(ColorError::HsvOutOfRange { name: "v", value: v });
    }
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let rgb = match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    Ok(rgb.map(|c| c.clamp(0.0, 1.0) as f32))
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum PfmError {
    #[error("byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("byte {offset}: payload truncated, expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Image(ImageError),
}

fn parse_err(offset: usize, message: impl Into<String>) -> PfmError {
    PfmError::Parse {
        offset,
        message: message.into(),
    }
}

/// Writes little-endian color PFM (`PF`, scale `-1.0`), bottom row first.
pub fn write_pfm_raw(width: usize, height: usize, pixels: &[Rgb]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count mismatch");
    let header = format!("PF\n{width} {height}\n-1.0\n");
    let mut out = Vec::with_capacity(header.len() + pixels.len() * 12);
    out.extend_from_slice(header.as_bytes());
    for row in (0..height).rev() {
        for p in &pixels[row * width..(row + 1) * width] {
            for c in p {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_whitespace(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn token(&mut self, what: &str) -> Result<(usize, &'a str), PfmError> {
        self.skip_whitespace();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| parse_err(start, format!("{what} is not ASCII")))?;
        Ok((start, s))
    }
}

/// Reads a color PFM of either byte order; returns top-row-first pixels.
pub fn read_pfm_raw(bytes: &[u8]) -> Result<(usize, usize, Vec<Rgb>), PfmError> {
    if bytes.is_empty() {
        return Err(parse_err(0, "empty input"));
    }
    if bytes.len() < 2 || &bytes[..2] != b"PF" {
        return Err(parse_err(0, "bad magic, expected \"PF\""));
    }
    if bytes.len() > 2 && !bytes[2].is_ascii_whitespace() {
        return Err(parse_err(2, "bad magic, expected \"PF\""));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let (off, w) = cur.token("width")?;
    let width: usize = w
        .parse()
        .ok()
        .filter(|&w| w > 0)
        .ok_or_else(|| parse_err(off, format!("bad width {w:?}")))?;
    let (off, h) = cur.token("height")?;
    let height: usize = h
        .parse()
        .ok()
        .filter(|&h| h > 0)
        .ok_or_else(|| parse_err(off, format!("bad height {h:?}")))?;
    let (off, s) = cur.token("scale")?;
    let scale: f64 = s
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite() && *v != 0.0)
        .ok_or_else(|| parse_err(off, format!("bad scale {s:?}")))?;
    // exactly one whitespace byte separates the header from the payload
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(parse_err(cur.pos, "missing newline after scale"));
    }
    let data_start = cur.pos + 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| parse_err(off, "dimensions overflow"))?;
    let found = bytes.len() - data_start;
    if found < expected {
        return Err(PfmError::Truncated {
            offset: data_start,
            expected,
            found,
        });
    }
    let little = scale < 0.0;
    let payload = &bytes[data_start..data_start + expected];
    let mut pixels = vec![[0.0f32; 3]; width * height];
    for (i, chunk) in payload.chunks_exact(12).enumerate() {
        let file_row = i / width;
        let x = i % width;
        let y = height - 1 - file_row;
        let mut p = [0.0f32; 3];
        for (c, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            p[c] = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
        }
        pixels[y * width + x] = p;
    }
    Ok((width, height, pixels))
}
