//! Netpbm image input (P2, P3, P5, P6) and the match overlay written as P6.

use std::path::Path;

use crate::coarse::Correspondence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Level};

/// Row-major image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (rgb), interleaved.
    pub channels: usize,
    pub data: Vec<f64>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "netpbm image", detail: detail.into() }
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(format_err(format!("{} values for {width}x{height}", data.len())));
        }
        Ok(Self { width, height, channels: 1, data })
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luma (Rec. 601 weights) of a color image; gray images are copied.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self.data.chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect();
        Image { width: self.width, height: self.height, channels: 1, data }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image { width: self.width, height: self.height, channels: 3, data }
    }

    /// The top-left `width x height` region.
    pub fn crop(&self, width: usize, height: usize) -> Result<Image> {
        if width > self.width || height > self.height {
            return Err(format_err(format!("cannot crop {}x{} to {width}x{height}", self.width, self.height)));
        }
        let c = self.channels;
        let data = (0..height).flat_map(|y| self.data[y * self.width * c..(y * self.width + width) * c].iter().copied()).collect();
        Ok(Image { width, height, channels: c, data })
    }

    pub fn to_feature_map<T: Scalar>(&self) -> FeatureMap<T> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            level: Level::FULL,
            data: self.data.iter().map(|&v| T::lit(v)).collect(),
        }
    }

    /// Binary PGM (gray) or PPM (color) with 8-bit samples.
    pub fn to_netpbm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_netpbm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        parse_netpbm(&std::fs::read(path)?)
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
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

    fn token(&mut self) -> Result<&str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| format_err("non-ascii header"))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse().map_err(|_| format_err(format!("bad number {t:?}")))
    }
}

/// Parses P2/P3 (ascii) and P5/P6 (binary, 8 or 16 bit) images.
pub fn parse_netpbm(bytes: &[u8]) -> Result<Image> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token()?.to_string();
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P5" => (1, true),
        "P3" => (3, false),
        "P6" => (3, true),
        other => return Err(format_err(format!("unsupported magic {other:?}"))),
    };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if width == 0 || height == 0 {
        return Err(format_err("zero extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(format!("maxval {maxval} out of range")));
    }
    let n = width * height * channels;
    let maxv = maxval as f64;
    let data: Vec<f64> = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = h.pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes.get(start..start + need).ok_or_else(|| format_err("truncated raster"))?;
        if wide {
            raster.chunks(2).map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / maxv).collect()
        } else {
            raster.iter().map(|&b| b as f64 / maxv).collect()
        }
    } else {
        (0..n).map(|_| h.number().map(|v| v as f64 / maxv)).collect::<Result<_>>()?
    };
    if data.iter().any(|&v| v > 1.0) {
        return Err(format_err("sample exceeds maxval"));
    }
    Ok(Image { width, height, channels, data })
}

/// Pixels of the digital line from `a` to `b` (Bresenham), endpoints
/// included.
pub fn line_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x, y));
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Red (low) to green (high) confidence color.
fn confidence_color(c: f64) -> [f64; 3] {
    let c = c.clamp(0.0, 1.0);
    [1.0 - c, c, 0.2]
}

/// Side-by-side composite of the two images (reference left) with one line
/// per match.
pub fn render_overlay(ref_img: &Image, src_img: &Image, matches: &[Correspondence]) -> Image {
    let (a, b) = (ref_img.to_rgb(), src_img.to_rgb());
    let width = a.width + b.width;
    let height = a.height.max(b.height);
    let mut data = vec![0.0; width * height * 3];
    for (img, x0) in [(&a, 0), (&b, a.width)] {
        for y in 0..img.height {
            for x in 0..img.width {
                let o = (y * width + x0 + x) * 3;
                data[o..o + 3].copy_from_slice(&img.data[(y * img.width + x) * 3..(y * img.width + x) * 3 + 3]);
            }
        }
    }
    for m in matches {
        let p = (m.x_ref.round() as i64, m.y_ref.round() as i64);
        let q = ((m.x_src.round() as i64) + a.width as i64, m.y_src.round() as i64);
        let color = confidence_color(m.confidence);
        for (x, y) in line_pixels(p, q) {
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                let o = (y as usize * width + x as usize) * 3;
                data[o..o + 3].copy_from_slice(&color);
            }
        }
    }
    Image { width, height, channels: 3, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::gray(w, h, (0..w * h).map(|i| (i % 256) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let img = ramp(7, 5);
        let back = parse_netpbm(&img.to_netpbm()).unwrap();
        assert_eq!(back, img);
        let rgb = img.to_rgb();
        assert_eq!(parse_netpbm(&rgb.to_netpbm()).unwrap(), rgb);
    }

    #[test]
    fn crop_keeps_top_left() {
        let img = ramp(7, 5).to_rgb();
        let c = img.crop(3, 2).unwrap();
        assert_eq!((c.width, c.height, c.channels), (3, 2, 3));
        assert_eq!(c.at(2, 1, 0), img.at(2, 1, 0));
        assert!(img.crop(8, 2).is_err());
    }

    #[test]
    fn ascii_with_comments() {
        let img = parse_netpbm(b"P2\n# a comment\n3 2\n# more\n4\n0 1 2\n3 4 0\n").unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 1));
        assert_eq!(img.data, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.0]);
        let c = parse_netpbm(b"P3 1 1 255 255 0 0").unwrap();
        assert_eq!(c.to_gray().data, vec![0.299]);
    }

    #[test]
    fn sixteen_bit() {
        let mut bytes = b"P5 2 1 65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00]);
        assert_eq!(parse_netpbm(&bytes).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse_netpbm(b"P7 1 1 255 0").is_err());
        assert!(parse_netpbm(b"P5 2 2 255\n\x00").is_err());
        assert!(parse_netpbm(b"P2 1 1 3 9").is_err());
        assert!(parse_netpbm(b"P2 0 1 3").is_err());
    }

    #[test]
    fn empty_overlay_is_plain_composite() {
        let (a, b) = (ramp(8, 6), ramp(5, 9));
        let o = render_overlay(&a, &b, &[]);
        assert_eq!((o.width, o.height), (13, 9));
        assert_eq!(o.at(2, 3, 1), a.at(2, 3, 0));
        assert_eq!(o.at(8 + 4, 8, 0), b.at(4, 8, 0));
        assert_eq!(o.at(3, 7, 2), 0.0);
    }

    #[test]
    fn one_match_draws_one_line() {
        let (a, b) = (ramp(10, 10), ramp(10, 10));
        let plain = render_overlay(&a, &b, &[]);
        let m = Correspondence { x_ref: 1.0, y_ref: 2.0, x_src: 7.0, y_src: 8.0, confidence: 0.9 };
        let o = render_overlay(&a, &b, &[m]);
        let expected = line_pixels((1, 2), (17, 8));
        let mut changed = Vec::new();
        for y in 0..10 {
            for x in 0..20 {
                if (0..3).any(|c| o.at(x, y, c) != plain.at(x, y, c)) {
                    changed.push((x as i64, y as i64));
                }
            }
        }
        // every changed pixel lies on the line; line pixels that happen to
        // share the line color already are the only possible exceptions
        assert!(changed.iter().all(|p| expected.contains(p)));
        assert!(changed.len() >= expected.len() - 1);
        assert_eq!(expected.first(), Some(&(1, 2)));
        assert_eq!(expected.last(), Some(&(17, 8)));
        let back = parse_netpbm(&o.to_netpbm()).unwrap();
        assert_eq!((back.width, back.height, back.channels), (20, 10, 3));
    }
}
