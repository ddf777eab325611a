//! RGB image files as `H x W x 3` tensors in `[0, 1]`.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vgg::image_dims;

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let data = img.as_raw().iter().map(|&v| T::from_f64_lossy(v as f64) * scale).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("buffer matches dimensions")
}

/// Rounds to 8 bits after clamping to `[0, 1]`.
pub fn tensor_to_rgb<T: Scalar>(image: &Tensor<T>) -> Result<RgbImage> {
    let (h, w) = image_dims(image)?;
    let bytes = image
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    RgbImage::from_raw(w as u32, h as u32, bytes).ok_or(Error::EmptyTensor)
}

pub fn load_rgb<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn save_rgb<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    tensor_to_rgb(image)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let t = Tensor::<f32>::from_fn(&[3, 5, 3], |i| (i * 17 % 256) as f32 / 255.0);
        save_rgb(&path, &t).unwrap();
        let back: Tensor<f32> = load_rgb(&path).unwrap();
        assert_eq!(back.shape(), &[3, 5, 3]);
        assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let t = Tensor::new(vec![1, 2, 3], vec![-0.5f64, 1.5, 0.5, 0.0, 1.0, 2.0 / 255.0]).unwrap();
        assert_eq!(tensor_to_rgb(&t).unwrap().as_raw(), &[0, 255, 128, 0, 255, 2]);
    }
}
