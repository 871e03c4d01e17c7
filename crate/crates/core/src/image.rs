//! 8-bit RGB / grayscale rasters and binary Netpbm (P6 / P5) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::contract(format!(
                "RGB image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `size`×`size` window with its top-left corner at (`x`, `y`).
    pub fn crop(&self, x: usize, y: usize, size: usize) -> Result<Self> {
        if x + size > self.width || y + size > self.height || size == 0 {
            return Err(Error::contract(format!(
                "crop {size}x{size} at ({x},{y}) exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(size * size * 3);
        for row in y..y + size {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + size * 3]);
        }
        Ok(Self {
            width: size,
            height: size,
            data,
        })
    }

    /// Nearest-neighbour resampling; keeps pixel values exactly.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                data.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        Self { width, height, data }
    }

    /// Grows the image to `width`×`height` by mirroring it about its edges
    /// (edge pixels are not repeated), centred with any odd pixel of padding
    /// on the right/bottom.
    pub fn pad_reflect(&self, width: usize, height: usize) -> Result<Self> {
        if width < self.width || height < self.height {
            return Err(Error::contract(format!(
                "cannot pad {}x{} down to {width}x{height}",
                self.width, self.height
            )));
        }
        if (self.width == 1 && width > 1) || (self.height == 1 && height > 1) {
            return Err(Error::contract("reflection needs at least 2 pixels per side"));
        }
        let (left, top) = ((width - self.width) / 2, (height - self.height) / 2);
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let sy = mirror(y as isize - top as isize, self.height);
            for x in 0..width {
                let sx = mirror(x as isize - left as isize, self.width);
                data.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm_bytes(&bytes, path)
    }

    pub fn from_ppm_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (width, height, offset) = parse_header(bytes, b"P6", origin)?;
        let need = width * height * 3;
        let body = &bytes[offset..];
        if body.len() != need {
            return Err(Error::format(
                origin,
                offset as u64,
                format!("expected {need} pixel bytes, found {}", body.len()),
            ));
        }
        Self::new(width, height, body.to_vec())
    }
}

/// Index into `0..n` of position `i` on the mirrored (period `2n − 2`)
/// extension of the axis.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// 8-bit single-channel image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::contract(format!(
                "gray image {width}x{height} needs {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
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

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (width, height, offset) = parse_header(&bytes, b"P5", path)?;
        let body = &bytes[offset..];
        if body.len() != width * height {
            return Err(Error::format(
                path,
                offset as u64,
                format!("expected {} pixel bytes, found {}", width * height, body.len()),
            ));
        }
        Self::new(width, height, body.to_vec())
    }
}

/// Parses `magic`, width, height and maxval (which must be 255), allowing
/// `#` comments between fields. Returns the offset of the first pixel byte.
fn parse_header(bytes: &[u8], magic: &[u8; 2], origin: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            origin,
            0,
            format!("missing {} magic", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(origin, pos as u64, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(origin, start as u64, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(origin, pos as u64, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            origin,
            pos as u64,
            format!("unsupported maxval {maxval}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(origin, pos as u64, "zero image dimension"));
    }
    Ok((width, height, pos + 1))
}
