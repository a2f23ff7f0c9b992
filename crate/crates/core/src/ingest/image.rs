use image::{ImageFormat, Rgb, RgbImage};

use super::{IngestError, CROP_SIZE};
use crate::geo::Envelope;
use crate::nn::Tensor;

/// Full-chip RGB image, channel-first, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ChipImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, IngestError> {
        if data.len() != 3 * width * height {
            return Err(IngestError::Decode(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; 3 * width * height] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Decodes a PNG, scaling by the format's maximum sample value.
    pub fn decode_png(bytes: &[u8]) -> Result<Self, IngestError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| IngestError::Decode(e.to_string()))?;
        let rgb = img.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c].clamp(0.0, 1.0);
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    /// Encodes as 8-bit RGB PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>, IngestError> {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = std::array::from_fn(|c| (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).map_err(|e| IngestError::Decode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Interpolation that is exact for equal endpoints and never leaves
/// `[min(a, b), max(a, b)]`.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}

/// Bilinear resize of one `h × w` plane with align-corners sampling.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bot, fy));
        }
    }
    out
}

/// Crops the pixel window covering `envelope` and resamples it to
/// `3 × CROP_SIZE × CROP_SIZE`.
///
/// The window spans `floor(min)..ceil(max)` on each axis. Parts outside the
/// image are filled by replicating the nearest edge pixel, so the crop keeps
/// the envelope's aspect ratio.
pub fn crop_resize(image: &ChipImage, envelope: &Envelope) -> Result<Tensor<f32>, IngestError> {
    let x0 = envelope.min_x.floor() as i64;
    let y0 = envelope.min_y.floor() as i64;
    let x1 = (envelope.max_x.ceil() as i64).max(x0 + 1);
    let y1 = (envelope.max_y.ceil() as i64).max(y0 + 1);
    let (w, h) = (image.width as i64, image.height as i64);
    if x1 <= 0 || y1 <= 0 || x0 >= w || y0 >= h || !envelope.has_area() {
        return Err(IngestError::EmptyIntersection);
    }
    let (cw, ch) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let mut out = Vec::with_capacity(3 * CROP_SIZE * CROP_SIZE);
    let mut plane = vec![0.0f32; cw * ch];
    for c in 0..3 {
        for yy in 0..ch {
            let sy = (y0 + yy as i64).clamp(0, h - 1) as usize;
            for xx in 0..cw {
                let sx = (x0 + xx as i64).clamp(0, w - 1) as usize;
                plane[yy * cw + xx] = image.get(c, sy, sx);
            }
        }
        out.extend(resize_bilinear(&plane, ch, cw, CROP_SIZE, CROP_SIZE));
    }
    Ok(Tensor::new(vec![3, CROP_SIZE, CROP_SIZE], out).expect("crop shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_two_by_two_to_four_by_four() {
        let out = resize_bilinear(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        // The source is the plane v = 2y + x; align-corners samples it at
        // y = iy/3, x = ix/3.
        for iy in 0..4 {
            for ix in 0..4 {
                let expected = (2.0 * iy as f32 + ix as f32) / 3.0;
                assert!((out[iy * 4 + ix] - expected).abs() < 1e-6, "({iy},{ix})");
            }
        }
        assert_eq!([out[0], out[3], out[12], out[15]], [0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_image_gives_constant_crop() {
        let img = ChipImage::filled(50, 40, 0.37);
        let env = Envelope::new(3.2, 5.5, 17.9, 30.1).unwrap();
        let crop = crop_resize(&img, &env).unwrap();
        assert_eq!(crop.shape(), &[3, 128, 128]);
        assert!(crop.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn exact_size_crop_is_passthrough() {
        let data: Vec<f32> = (0..3 * 200 * 150).map(|i| ((i * 7919) % 1000) as f32 / 999.0).collect();
        let img = ChipImage::new(200, 150, data).unwrap();
        let env = Envelope::new(10.0, 4.0, 138.0, 132.0).unwrap();
        let crop = crop_resize(&img, &env).unwrap();
        for c in 0..3 {
            for y in 0..128 {
                for x in 0..128 {
                    assert_eq!(crop.data()[(c * 128 + y) * 128 + x].to_bits(), img.get(c, y + 4, x + 10).to_bits());
                }
            }
        }
    }

    #[test]
    fn envelope_outside_image_is_rejected() {
        let img = ChipImage::filled(10, 10, 0.5);
        let env = Envelope::new(12.0, 0.0, 20.0, 5.0).unwrap();
        assert!(matches!(crop_resize(&img, &env), Err(IngestError::EmptyIntersection)));
    }

    #[test]
    fn border_envelope_replicates_edges() {
        let mut img = ChipImage::filled(4, 4, 0.0);
        for y in 0..4 {
            for c in 0..3 {
                img.set(c, y, 3, 1.0);
            }
        }
        // Right half lies beyond the image and replicates the bright column.
        let env = Envelope::new(3.0, 0.0, 5.0, 4.0).unwrap();
        let crop = crop_resize(&img, &env).unwrap();
        assert!(crop.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn png_round_trip() {
        let mut img = ChipImage::filled(3, 2, 0.0);
        img.set(0, 1, 2, 1.0);
        img.set(1, 0, 0, 128.0 / 255.0);
        let bytes = img.encode_png().unwrap();
        assert_eq!(ChipImage::decode_png(&bytes).unwrap(), img);
        assert!(matches!(ChipImage::decode_png(&bytes[..20]), Err(IngestError::Decode(_))));
    }
}
