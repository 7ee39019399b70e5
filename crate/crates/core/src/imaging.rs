//! Image domain types and lossless PNG I/O.
//!
//! Images live in memory as `H×W×C` arrays of `f64` in the unit range. The
//! networks consume `N×C×H×W` candle tensors; [`images_to_tensor`] and
//! [`ImageTensor::from_tensor`] are the only conversion points.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Luma, Rgb, Rgb32FImage, Rgba};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Network feature activations, laid out `N×C×H×W`.
pub type FeatureMap = Tensor;

/// An `H×W×3` RGB image with every element in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::contract(format!(
                "image must have 3 channels, got {}",
                data.dim().2
            )));
        }
        if data.dim().0 == 0 || data.dim().1 == 0 {
            return Err(Error::contract("image must be non-empty"));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    /// Clamps every element into `[0, 1]`; non-finite values become 0.
    pub fn from_clamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self::new(data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((height, width, 3), value.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[[row, col, channel]]
    }

    /// Rounds every value onto the 8-bit grid `k / 255`.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.mapv(|v| (v * 255.0).round() / 255.0),
        }
    }

    /// Reads image `index` of an `N×3×H×W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::contract(format!("expected 3 channels, got {c}")));
        }
        let chw = t.get(index)?.to_dtype(DType::F64)?.permute((1, 2, 0))?;
        let flat: Vec<f64> = chw.flatten_all()?.to_vec1()?;
        let arr = Array3::from_shape_vec((h, w, 3), flat)
            .map_err(|e| Error::contract(e.to_string()))?;
        Self::from_clamped(arr)
    }
}

/// `H×W` opacity map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    data: Array2<f64>,
}

impl AlphaMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("alpha value {v} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array2::from_elem((height, width), value.clamp(0.0, 1.0)),
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[[row, col]]
    }

    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.mapv(|a| u8::from(a > 0.0)),
        }
    }

    /// Rounds onto the 16-bit grid `k / 65535` used by the on-disk format.
    pub fn quantized16(&self) -> Self {
        Self {
            data: self.data.mapv(|v| (v * 65535.0).round() / 65535.0),
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Watermark region mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::contract("binary mask values must be 0 or 1"));
        }
        Ok(Self { data })
    }

    /// Thresholds a soft mask: `value >= threshold` becomes 1.
    pub fn from_soft(soft: &Array2<f64>, threshold: f64) -> Self {
        Self {
            data: soft.mapv(|v| u8::from(v >= threshold)),
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]] == 1
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

/// Stacks images into an `N×3×H×W` tensor.
pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("cannot stack an empty image list"))?;
    let (h, w) = first.dims();
    let mut flat = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::contract("images in a batch must share a size"));
        }
        for c in 0..3 {
            flat.extend(img.data.index_axis(Axis(2), c).iter().copied());
        }
    }
    Ok(Tensor::from_vec(flat, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks single-channel maps into an `N×1×H×W` tensor.
pub fn maps_to_tensor(maps: &[&Array2<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::contract("cannot stack an empty map list"))?;
    let (h, w) = first.dim();
    let mut flat = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dim() != (h, w) {
            return Err(Error::contract("maps in a batch must share a size"));
        }
        flat.extend(m.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (maps.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Reads map `index` of an `N×1×H×W` tensor.
pub fn map_from_tensor(t: &Tensor, index: usize) -> Result<Array2<f64>> {
    let (_, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::contract(format!("expected 1 channel, got {c}")));
    }
    let flat: Vec<f64> = t.get(index)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Array2::from_shape_vec((h, w), flat).map_err(|e| Error::contract(e.to_string()))
}

/// A decoded image file; `alpha` is present for RGBA sources.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub rgb: ImageTensor,
    pub alpha: Option<AlphaMap>,
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an 8-bit RGB, RGBA or grayscale image scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<LoadedImage> {
    let path = path.as_ref();
    let img = decode(path)?;
    let has_alpha = match &img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageLuma8(_) => false,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLumaA8(_) => true,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel format {:?}", other.color()),
            })
        }
    };
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut rgb = Array3::zeros((h, w, 3));
    let mut alpha = Array2::zeros((h, w));
    for (x, y, px) in rgba.enumerate_pixels() {
        let (r, c) = (y as usize, x as usize);
        for ch in 0..3 {
            rgb[[r, c, ch]] = f64::from(px[ch]) / 255.0;
        }
        alpha[[r, c]] = f64::from(px[3]) / 255.0;
    }
    Ok(LoadedImage {
        rgb: ImageTensor::new(rgb)?,
        alpha: has_alpha.then(|| AlphaMap { data: alpha }),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.dims();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([
            to_u8(img.data[[r, c, 0]]),
            to_u8(img.data[[r, c, 1]]),
            to_u8(img.data[[r, c, 2]]),
        ])
    });
    write_png(DynamicImage::ImageRgb8(buf), path)
}

/// Writes an opacity map as a 16-bit grayscale PNG.
pub fn save_alpha16(alpha: &AlphaMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = alpha.dims();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = alpha.data[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    write_png(DynamicImage::ImageLuma16(buf), path)
}

/// Reads a 16-bit (or 8-bit) grayscale PNG as an opacity map.
pub fn load_alpha16(path: impl AsRef<Path>) -> Result<AlphaMap> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (scale, gray) = match img {
        DynamicImage::ImageLuma16(g) => (65535.0, g),
        DynamicImage::ImageLuma8(_) => (65535.0, img.to_luma16()),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("alpha must be grayscale, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = Array2::from_shape_fn((h, w), |(r, c)| {
        f64::from(gray.get_pixel(c as u32, r as u32)[0]) / scale
    });
    AlphaMap::new(data)
}

/// Writes colours plus coverage as an 8-bit RGBA PNG.
pub fn save_rgba(rgb: &ImageTensor, alpha: &AlphaMap, path: impl AsRef<Path>) -> Result<()> {
    if rgb.dims() != alpha.dims() {
        return Err(Error::contract("colour and alpha sizes differ"));
    }
    let (h, w) = rgb.dims();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgba([
            to_u8(rgb.data[[r, c, 0]]),
            to_u8(rgb.data[[r, c, 1]]),
            to_u8(rgb.data[[r, c, 2]]),
            to_u8(alpha.data[[r, c]]),
        ])
    });
    write_png(DynamicImage::ImageRgba8(buf), path.as_ref())
}

/// Bilinear (triangle-filter) resize to `height×width`.
pub fn resize(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if img.dims() == (height, width) {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let buf: Rgb32FImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([0, 1, 2].map(|k| img.data[[r, c, k]] as f32))
    });
    let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    let data = Array3::from_shape_fn((height, width, 3), |(r, c, k)| {
        f64::from(out.get_pixel(c as u32, r as u32)[k])
    });
    ImageTensor::from_clamped(data)
}

/// Writes a single-channel map in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray(map: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = map.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(map[[y as usize, x as usize]])])
    });
    write_png(DynamicImage::ImageLuma8(buf), path.as_ref())
}

fn write_png(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_and_white_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for value in [0.0, 1.0] {
            let path = dir.path().join(format!("{value}.png"));
            save_image(&ImageTensor::filled(5, 7, value), &path).unwrap();
            let back = load_image(&path).unwrap();
            assert!(back.alpha.is_none());
            assert!(back.rgb.data().iter().all(|&v| v == value));
        }
    }

    #[test]
    fn mid_gray_scales_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let buf = ImageBuffer::from_pixel(2, 2, Rgb([128u8, 128, 128]));
        DynamicImage::ImageRgb8(buf).save(&path).unwrap();
        let back = load_image(&path).unwrap();
        assert!((back.rgb.get(0, 0, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn rgba_returns_alpha_separately() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let buf = ImageBuffer::from_pixel(3, 2, image::Rgba([10u8, 20, 30, 51]));
        DynamicImage::ImageRgba8(buf).save(&path).unwrap();
        let back = load_image(&path).unwrap();
        let alpha = back.alpha.expect("alpha");
        assert_eq!(alpha.dims(), (2, 3));
        assert!((alpha.get(1, 2) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn sixteen_bit_rgb_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_pixel(2, 2, Rgb([1, 2, 3]));
        DynamicImage::ImageRgb16(buf).save(&path).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/nonexistent/x.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn random_round_trip_within_one_level() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data = Array3::from_shape_fn((9, 11, 3), |_| rng.random::<f64>());
        let img = ImageTensor::new(data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap().rgb;
        let worst = img
            .data()
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "worst {worst}");
        let requant = load_image(&path).unwrap().rgb;
        save_image(&requant, &path).unwrap();
        assert_eq!(load_image(&path).unwrap().rgb, requant);
    }

    #[test]
    fn alpha16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a16.png");
        let alpha = AlphaMap::new(Array2::from_shape_fn((4, 5), |(r, c)| {
            (r * 5 + c) as f64 / 19.0
        }))
        .unwrap();
        save_alpha16(&alpha, &path).unwrap();
        let back = load_alpha16(&path).unwrap();
        assert_eq!(back, alpha.quantized16());
    }

    #[test]
    fn tensor_conversion_round_trip() {
        let img = ImageTensor::new(Array3::from_shape_fn((3, 4, 3), |(r, c, ch)| {
            (r * 12 + c * 3 + ch) as f64 / 40.0
        }))
        .unwrap();
        let t = images_to_tensor(&[&img, &img], DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 3, 4]);
        assert_eq!(ImageTensor::from_tensor(&t, 1).unwrap(), img);
    }

    #[test]
    fn mask_from_alpha() {
        let alpha = AlphaMap::new(ndarray::arr2(&[[0.0, 0.2], [1.0, 0.0]])).unwrap();
        let m = alpha.to_mask();
        assert_eq!(m.data(), &ndarray::arr2(&[[0u8, 1], [1, 0]]));
        assert_eq!(m.count(), 2);
    }
}
