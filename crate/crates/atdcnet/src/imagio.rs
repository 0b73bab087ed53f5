//! Image decoding/encoding and basic raster statistics.
//!
//! Files are PNG (8-bit RGB/RGBA, non-interlaced) or binary PPM (P6,
//! maxval 255). In memory an [`Image`] is row-major H×W×3 floating point
//! in [0,1]; quantization on save is round-half-away-from-zero, so any
//! image whose values already sit on the 1/255 grid survives a save/load
//! round trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

/// RGB raster, row-major H×W×3, every value in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Scalar field matching an image's extent, every value in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Per-channel means (R, G, B).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorStats {
    pub mu: [f32; 3],
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::InvalidImage("empty extent".into()));
        }
        if data.len() != height * width * 3 {
            return Err(ImageError::InvalidImage(format!(
                "{} values for {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::InvalidImage(format!("value {v} outside [0,1]")));
        }
        Ok(Image { height, width, data })
    }

    /// Builds an image from arbitrary values by clamping into [0,1];
    /// non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        let data = data
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let at = (y * self.width + x) * 3;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    /// Axis-aligned `h`×`w` crop with its top-left corner at (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image, ImageError> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(ImageError::InvalidImage(format!(
                "crop {h}x{w}+{y0}+{x0} escapes a {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(Image { height: h, width: w, data })
    }

    /// Mirror image around the vertical axis.
    pub fn flipped_h(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let at = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[at..at + 3]);
            }
        }
        Image { height: self.height, width: self.width, data }
    }

    /// Interleaved H×W×3 to planar 3×H×W (the tensor layout).
    pub fn to_planar(&self) -> Vec<f32> {
        let px = self.height * self.width;
        let mut out = vec![0f32; 3 * px];
        for i in 0..px {
            out[i] = self.data[i * 3];
            out[px + i] = self.data[i * 3 + 1];
            out[2 * px + i] = self.data[i * 3 + 2];
        }
        out
    }

    /// Planar 3×H×W back to an image, clamping into [0,1].
    pub fn from_planar_clamped(
        height: usize,
        width: usize,
        planar: &[f32],
    ) -> Result<Self, ImageError> {
        let px = height * width;
        if planar.len() != 3 * px {
            return Err(ImageError::InvalidImage(format!(
                "{} planar values for {height}x{width}x3",
                planar.len()
            )));
        }
        let mut data = vec![0f32; 3 * px];
        for i in 0..px {
            data[i * 3] = planar[i];
            data[i * 3 + 1] = planar[px + i];
            data[i * 3 + 2] = planar[2 * px + i];
        }
        Self::from_clamped(height, width, data)
    }

    /// Snaps every value onto the 1/255 grid exactly as saving would.
    pub fn quantized(&self) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| quantize_byte(v) as f32 / 255.0)
            .collect();
        Image { height: self.height, width: self.width, data }
    }
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::InvalidImage("empty extent".into()));
        }
        if data.len() != height * width {
            return Err(ImageError::InvalidImage(format!(
                "{} values for {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::InvalidImage(format!("value {v} outside [0,1]")));
        }
        Ok(GrayMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Replicates the field into all three channels for saving.
    pub fn to_image(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        Image { height: self.height, width: self.width, data }
    }
}

fn quantize_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Loads a PNG or binary PPM, detected by magic bytes, into [0,1] floats.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ImageError::NotFound(path.display().to_string())
        } else {
            ImageError::Io(e)
        }
    })?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        Err(ImageError::UnsupportedFormat(format!(
            "{}: not a PNG or P6 PPM",
            path.display()
        )))
    }
}

/// Saves as PNG or PPM depending on the extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_byte(v)).collect();
    match ext.as_str() {
        "png" => {
            let file = BufWriter::new(File::create(path)?);
            let mut enc = png::Encoder::new(file, img.width() as u32, img.height() as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| ImageError::CorruptData(e.to_string()))?;
            writer
                .write_image_data(&bytes)
                .map_err(|e| ImageError::CorruptData(e.to_string()))?;
            Ok(())
        }
        "ppm" => {
            let mut file = BufWriter::new(File::create(path)?);
            write!(file, "P6\n{} {}\n255\n", img.width(), img.height())?;
            file.write_all(&bytes)?;
            Ok(())
        }
        other => Err(ImageError::UnsupportedFormat(format!(
            "extension {other:?}, expected .png or .ppm"
        ))),
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::CorruptData(e.to_string()))?;
    let info = reader.info();
    if info.interlaced {
        return Err(ImageError::UnsupportedFormat("interlaced PNG".into()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedFormat(format!(
            "PNG bit depth {:?}, expected 8",
            info.bit_depth
        )));
    }
    let color = info.color_type;
    if !matches!(color, png::ColorType::Rgb | png::ColorType::Rgba) {
        return Err(ImageError::UnsupportedFormat(format!(
            "PNG color type {color:?}, expected RGB or RGBA"
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::CorruptData(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let stride = if color == png::ColorType::Rgba { 4 } else { 3 };
    let mut data = Vec::with_capacity(h * w * 3);
    for px in buf[..h * w * stride].chunks_exact(stride) {
        data.extend(px[..3].iter().map(|&b| b as f32 / 255.0));
    }
    Image::new(h, w, data)
}

fn decode_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        *f = ppm_field(bytes, &mut pos)?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(ImageError::UnsupportedFormat(format!(
            "PPM maxval {maxval}, expected 255"
        )));
    }
    pos += 1;
    let need = w.checked_mul(h).and_then(|p| p.checked_mul(3)).ok_or_else(|| {
        ImageError::CorruptData("PPM extent overflows".into())
    })?;
    let body = bytes
        .get(pos..pos + need)
        .ok_or_else(|| ImageError::CorruptData("truncated PPM pixel data".into()))?;
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(h, w, data)
}

/// Reads one whitespace-delimited decimal field, skipping `#` comments.
fn ppm_field(bytes: &[u8], pos: &mut usize) -> Result<usize, ImageError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while !matches!(bytes.get(*pos), None | Some(b'\n')) {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(b) => {
                return Err(ImageError::CorruptData(format!(
                    "unexpected byte {b:#04x} in PPM header"
                )))
            }
            None => return Err(ImageError::CorruptData("truncated PPM header".into())),
        }
    }
    let mut v = 0usize;
    while let Some(b) = bytes.get(*pos).filter(|b| b.is_ascii_digit()) {
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| ImageError::CorruptData("PPM header field overflows".into()))?;
        *pos += 1;
    }
    Ok(v)
}

/// Per-channel means via compensated summation.
pub fn channel_means(img: &Image) -> ColorStats {
    let mut sum = [0f64; 3];
    let mut comp = [0f64; 3];
    for px in img.data().chunks_exact(3) {
        for c in 0..3 {
            let y = px[c] as f64 - comp[c];
            let t = sum[c] + y;
            comp[c] = (t - sum[c]) - y;
            sum[c] = t;
        }
    }
    let n = (img.height() * img.width()) as f64;
    ColorStats {
        mu: [
            (sum[0] / n) as f32,
            (sum[1] / n) as f32,
            (sum[2] / n) as f32,
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn ppm_bytes_map_to_unit_interval() {
        let path = tmp("a.ppm");
        std::fs::write(&path, [b"P6\n2 2\n255\n".as_slice(), &[255u8; 12]].concat()).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert!(img.data().iter().all(|&v| v == 1.0));

        let path = tmp("b.ppm");
        std::fs::write(&path, [b"P6\n1 1\n255\n".as_slice(), &[0u8; 3]].concat()).unwrap();
        assert!(load_image(&path).unwrap().data().iter().all(|&v| v == 0.0));

        let path = tmp("c.ppm");
        std::fs::write(&path, [b"P6\n1 1\n255\n".as_slice(), &[128, 64, 32]].concat()).unwrap();
        let img = load_image(&path).unwrap();
        let want = [128.0 / 255.0, 64.0 / 255.0, 32.0 / 255.0];
        for (v, w) in img.data().iter().zip(want) {
            assert!((v - w).abs() < 1e-6);
        }
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let path = tmp("c.ppm");
        std::fs::write(
            &path,
            [b"P6\n# made by hand\n1 1 # trailing\n255\n".as_slice(), &[1, 2, 3]].concat(),
        )
        .unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.height(), img.width()), (1, 1));
    }

    #[test]
    fn crop_and_flip_move_pixels_where_expected() {
        let mut rng = crate::rng::SeedStream::new(77);
        let img = Image::new(6, 9, (0..6 * 9 * 3).map(|_| rng.uniform_f32()).collect()).unwrap();
        let c = img.crop(2, 3, 3, 4).unwrap();
        assert_eq!((c.height(), c.width()), (3, 4));
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(c.pixel(y, x), img.pixel(y + 2, x + 3));
            }
        }
        assert!(img.crop(4, 0, 3, 4).is_err(), "crop must stay inside");
        assert!(img.crop(0, 0, 0, 4).is_err());

        let f = img.flipped_h();
        assert_eq!(f.pixel(1, 0), img.pixel(1, 8));
        assert_eq!(f.flipped_h(), img, "mirroring twice is the identity");

        let full = img.crop(0, 0, 6, 9).unwrap();
        assert_eq!(full, img);
    }

    #[test]
    fn half_gray_round_trips_to_128() {
        for name in ["g.ppm", "g.png"] {
            let path = tmp(name);
            let img = Image::constant(3, 2, [0.5, 0.5, 0.5]).unwrap();
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            for v in back.data() {
                assert!((v - 128.0 / 255.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn extremes_round_trip_exactly() {
        for rgb in [[0.0; 3], [1.0; 3]] {
            let path = tmp("e.png");
            let img = Image::constant(2, 2, rgb).unwrap();
            save_image(&img, &path).unwrap();
            assert_eq!(load_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn errors_carry_their_cause() {
        assert!(matches!(
            load_image("/nonexistent/definitely/missing.png"),
            Err(ImageError::NotFound(_))
        ));
        let path = tmp("bad.dat");
        std::fs::write(&path, b"GIF89a rest").unwrap();
        assert!(matches!(
            load_image(&path),
            Err(ImageError::UnsupportedFormat(_))
        ));
        let path = tmp("short.ppm");
        std::fs::write(&path, [b"P6\n2 2\n255\n".as_slice(), &[7u8; 5]].concat()).unwrap();
        assert!(matches!(load_image(&path), Err(ImageError::CorruptData(_))));
        let img = Image::constant(1, 1, [0.5; 3]).unwrap();
        assert!(matches!(
            save_image(&img, tmp("x.bmp")),
            Err(ImageError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn rgba_png_drops_alpha() {
        let path = tmp("a.png");
        let file = std::io::BufWriter::new(File::create(&path).unwrap());
        let mut enc = png::Encoder::new(file, 2, 1);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[255, 0, 0, 10, 0, 255, 0, 200]).unwrap();
        drop(w);
        let img = load_image(&path).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(0, 1), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn channel_means_match_hand_values() {
        let img = Image::constant(4, 5, [0.2, 0.4, 0.6]).unwrap();
        let m = channel_means(&img).mu;
        assert!((m[0] - 0.2).abs() < 1e-7);
        assert!((m[1] - 0.4).abs() < 1e-7);
        assert!((m[2] - 0.6).abs() < 1e-7);

        let img = Image::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(channel_means(&img).mu, [0.5, 0.5, 0.5]);

        let img = Image::new(
            2,
            2,
            vec![0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.3, 0.0, 0.0, 0.4, 0.0, 0.0],
        )
        .unwrap();
        assert!((channel_means(&img).mu[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(Image::new(0, 3, vec![]).is_err());
        assert!(Image::new(1, 1, vec![0.1, 0.2]).is_err());
        assert!(Image::new(1, 1, vec![0.1, 0.2, 1.5]).is_err());
        assert!(GrayMap::new(1, 2, vec![0.3, -0.1]).is_err());
        let img = Image::from_clamped(1, 1, vec![-0.5, 2.0, f32::NAN]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn planar_round_trip_is_exact() {
        let img = Image::new(
            2,
            1,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        )
        .unwrap();
        let planar = img.to_planar();
        assert_eq!(planar, vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        let back = Image::from_planar_clamped(2, 1, &planar).unwrap();
        assert_eq!(back, img);
    }

    proptest! {
        #[test]
        fn quantized_images_round_trip_bit_exact(
            bytes in proptest::collection::vec(0u8..=255, 12..=48),
            w in 1usize..=4,
            png in proptest::bool::ANY,
        ) {
            let px = bytes.len() / 3;
            prop_assume!(px % w == 0 && px / w >= 1);
            let h = px / w;
            let data: Vec<f32> = bytes[..h * w * 3].iter().map(|&b| b as f32 / 255.0).collect();
            let img = Image::new(h, w, data).unwrap();
            let path = tmp(if png { "r.png" } else { "r.ppm" });
            save_image(&img, &path).unwrap();
            prop_assert_eq!(load_image(&path).unwrap(), img);
        }

        #[test]
        fn means_ignore_pixel_order(seed in 0u64..1000) {
            let mut rng = crate::rng::SeedStream::new(seed);
            let px = 64usize;
            let mut pixels: Vec<[f32; 3]> = (0..px)
                .map(|_| [rng.uniform_f32(), rng.uniform_f32(), rng.uniform_f32()])
                .collect();
            let flat = |ps: &[[f32; 3]]| {
                Image::new(8, 8, ps.iter().flatten().copied().collect()).unwrap()
            };
            let before = channel_means(&flat(&pixels)).mu;
            rng.shuffle(&mut pixels);
            let after = channel_means(&flat(&pixels)).mu;
            for c in 0..3 {
                prop_assert!((before[c] - after[c]).abs() < 1e-6);
            }
        }
    }
}
