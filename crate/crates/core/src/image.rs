//! RGB images in `[0, 1]`, PPM/PNG codecs and center-crop preprocessing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel value used to blank out masked grid cells (mid-gray).
pub const MASK_FILL: f64 = 0.5;

/// Planar (channel-major) RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Values are clipped to `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape("ImageTensor::new", format!("{} values for 3x{height}x{width}", data.len())));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "ImageTensor::new" });
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = vec![0.0; 3 * height * width];
        for c in 0..3 {
            data[c * height * width..(c + 1) * height * width].fill(rgb[c].clamp(0.0, 1.0));
        }
        ImageTensor { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// `[1, 3, H, W]` tensor view for the conv stacks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("image layout is consistent")
    }

    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape("ImageTensor::mse", "image sizes differ"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.data.len() as f64)
    }

    /// Interleaved 8-bit RGB bytes, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                out.push((self.data[c * hw + i] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::Data(format!("{} bytes for a {width}x{height} RGB image", bytes.len())));
        }
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = bytes[3 * i + c] as f64 / 255.0;
            }
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Data("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Data(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PPM header field {s:?}")));
        let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max != 255 {
            return Err(Error::Data(format!("only 8-bit PPM is supported, maxval {max}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let body = bytes.get(pos + 1..).ok_or_else(|| Error::Data("missing PPM raster".into()))?;
        if body.len() < 3 * w * h {
            return Err(Error::Data("truncated PPM raster".into()));
        }
        ImageTensor::from_rgb8(h, w, &body[..3 * w * h])
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Data(e.to_string()))?;
            writer.write_image_data(&self.to_rgb8()).map_err(|e| Error::Data(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Data(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Data("PNG too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Data(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => return Err(Error::Data("unexpanded indexed PNG".into())),
        };
        ImageTensor::from_rgb8(h, w, &rgb)
    }

    /// Reads PPM (P6) or PNG, chosen by content.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        if bytes.starts_with(b"\x89PNG") {
            ImageTensor::decode_png(&bytes)
        } else {
            ImageTensor::decode_ppm(&bytes)
        }
    }

    /// Writes PNG for `.png` paths, PPM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            self.encode_png()?
        } else {
            self.encode_ppm()
        };
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    /// Largest centered square.
    pub fn center_crop(&self) -> ImageTensor {
        let side = self.height.min(self.width);
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        let mut data = vec![0.0; 3 * side * side];
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    data[(c * side + y) * side + x] = self.get(c, y0 + y, x0 + x);
                }
            }
        }
        ImageTensor { height: side, width: side, data }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = vec![0.0; 3 * height * width];
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                for c in 0..3 {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bottom = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    data[(c * height + y) * width + x] = (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor { height, width, data }
    }
}

/// Center-crop to a square, then resize to `size x size`.
pub fn preprocess_image(raw: &ImageTensor, size: usize) -> Result<ImageTensor> {
    if size == 0 || raw.height() == 0 || raw.width() == 0 {
        return Err(Error::invalid("preprocess needs a non-empty image and target size"));
    }
    Ok(raw.center_crop().resize(size, size))
}

pub fn load_and_preprocess(path: &Path, size: usize) -> Result<ImageTensor> {
    preprocess_image(&ImageTensor::load(path)?, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageTensor {
        let mut img = ImageTensor::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                img.set_rgb(y, x, [x as f64 / w as f64, y as f64 / h as f64, ((x + y) % 3) as f64 / 2.0]);
            }
        }
        img
    }

    #[test]
    fn square_target_size_is_unchanged() {
        let img = gradient(32, 32);
        assert_eq!(preprocess_image(&img, 32).unwrap(), img);
    }

    #[test]
    fn wide_input_takes_center_crop() {
        let img = gradient(32, 64);
        let out = preprocess_image(&img, 32).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    assert_eq!(out.get(c, y, x), img.get(c, y, x + 16));
                }
            }
        }
    }

    #[test]
    fn output_values_in_unit_interval() {
        let img = gradient(40, 24);
        let out = preprocess_image(&img, 17).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(ImageTensor::new(1, 1, vec![2.0, -1.0, 0.5]).unwrap().data() == [1.0, 0.0, 0.5]);
    }

    #[test]
    fn ppm_and_png_codecs() {
        let img = ImageTensor::from_rgb8(2, 3, &(0..18).map(|i| (i * 13) as u8).collect::<Vec<_>>()).unwrap();
        assert_eq!(ImageTensor::decode_ppm(&img.encode_ppm()).unwrap(), img);
        assert_eq!(ImageTensor::decode_png(&img.encode_png().unwrap()).unwrap(), img);
        assert!(ImageTensor::decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(ImageTensor::decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn unreadable_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ImageTensor::load(&dir.path().join("x.ppm")), Err(Error::MissingFile(_))));
        let p = dir.path().join("junk.ppm");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(ImageTensor::load(&p).is_err());
    }
}
