//! Named preprocessing pipelines: training augmentations and the
//! deterministic evaluation transform shared with exported-model checks.

use std::fmt;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("unknown transform pipeline '{0}'")]
    UnknownPipeline(String),
    #[error("invalid transform parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    #[serde(rename = "norm_256")]
    Norm256,
    #[serde(rename = "norm_256_flip")]
    Norm256Flip,
    ResizeColorjitFlipBlur,
    EvalDeterministic,
}

impl Pipeline {
    /// Pipelines suitable for training faces (no geometric distortion).
    pub const TRAINING: [Pipeline; 3] = [
        Pipeline::Norm256,
        Pipeline::Norm256Flip,
        Pipeline::ResizeColorjitFlipBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Norm256 => "norm_256",
            Pipeline::Norm256Flip => "norm_256_flip",
            Pipeline::ResizeColorjitFlipBlur => "resize_colorjit_flip_blur",
            Pipeline::EvalDeterministic => "eval_deterministic",
        }
    }

    pub fn is_stochastic(self) -> bool {
        !matches!(self, Pipeline::Norm256 | Pipeline::EvalDeterministic)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = TransformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "norm_256" => Ok(Pipeline::Norm256),
            "norm_256_flip" => Ok(Pipeline::Norm256Flip),
            "resize_colorjit_flip_blur" => Ok(Pipeline::ResizeColorjitFlipBlur),
            "eval_deterministic" | "eval" => Ok(Pipeline::EvalDeterministic),
            _ => Err(TransformError::UnknownPipeline(s.to_string())),
        }
    }
}

/// Augmentation strengths. Unused fields are ignored by pipelines that do
/// not include the corresponding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Resize target for the shorter side, relative to the output size
    /// (256/224 for the `norm_256*` pipelines).
    pub resize_ratio: f64,
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            resize_ratio: 1.0,
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.1, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub name: Pipeline,
    pub params: AugmentParams,
    /// `(height, width)` of the produced tensor.
    pub output_size: (usize, usize),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl TransformSpec {
    pub fn new(name: Pipeline, side: usize) -> Self {
        let params = match name {
            Pipeline::Norm256 => AugmentParams {
                resize_ratio: 256.0 / 224.0,
                ..Default::default()
            },
            Pipeline::Norm256Flip => AugmentParams {
                resize_ratio: 256.0 / 224.0,
                flip_p: 0.5,
                ..Default::default()
            },
            Pipeline::ResizeColorjitFlipBlur => AugmentParams {
                flip_p: 0.5,
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
                blur_p: 0.2,
                ..Default::default()
            },
            Pipeline::EvalDeterministic => AugmentParams::default(),
        };
        TransformSpec {
            name,
            params,
            output_size: (side, side),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    pub fn eval(side: usize) -> Self {
        Self::new(Pipeline::EvalDeterministic, side)
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        let p = &self.params;
        let probs = [p.flip_p, p.blur_p];
        if probs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TransformError::InvalidParams("probabilities must lie in [0, 1]".into()));
        }
        if [p.brightness, p.contrast, p.saturation].iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(TransformError::InvalidParams("jitter strengths must lie in [0, 1)".into()));
        }
        if p.resize_ratio < 1.0 || self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(TransformError::InvalidParams("bad output geometry".into()));
        }
        if self.mean != IMAGENET_MEAN || self.std != IMAGENET_STD {
            return Err(TransformError::InvalidParams(
                "normalization constants must be the ImageNet ones".into(),
            ));
        }
        Ok(())
    }

    /// `image → [3, H, W]` normalized tensor. Randomness, if any, is drawn
    /// from `rng` only.
    pub fn apply(&self, image: &RgbImage, rng: &mut dyn RngCore) -> Result<Tensor, TransformError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(TransformError::EmptyImage);
        }
        let (h, w) = self.output_size;
        let p = &self.params;
        let mut planes = match self.name {
            Pipeline::Norm256 | Pipeline::Norm256Flip => {
                let resized = resize_shorter_side(image, (h.min(w) as f64 * p.resize_ratio).round() as u32);
                to_planes(&center_crop(&resized, w as u32, h as u32))
            }
            Pipeline::ResizeColorjitFlipBlur | Pipeline::EvalDeterministic => {
                to_planes(&imageops::resize(image, w as u32, h as u32, FilterType::Triangle))
            }
        };
        if self.name == Pipeline::ResizeColorjitFlipBlur {
            color_jitter(&mut planes, p, rng);
        }
        if p.flip_p > 0.0 && self.name.is_stochastic() && rng.random::<f64>() < p.flip_p {
            flip_planes(&mut planes);
        }
        if self.name == Pipeline::ResizeColorjitFlipBlur && p.blur_p > 0.0 && rng.random::<f64>() < p.blur_p {
            let sigma = rng.random_range(p.blur_sigma.0..=p.blur_sigma.1);
            gaussian_blur3(&mut planes, sigma);
        }
        let mut data = planes.data;
        normalize_in_place(&mut data, h * w, &self.mean, &self.std);
        Ok(Tensor::from_vec(&[3, h, w], data).expect("transform shape"))
    }
}

/// Planar RGB in `[0, 1]`.
struct Planes {
    data: Vec<f32>,
    h: usize,
    w: usize,
}

fn to_planes(img: &RgbImage) -> Planes {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Planes { data, h, w }
}

fn resize_shorter_side(img: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (nw, nh) = if w <= h {
        (side, ((h as f64 * side as f64 / w as f64).round() as u32).max(1))
    } else {
        (((w as f64 * side as f64 / h as f64).round() as u32).max(1), side)
    };
    imageops::resize(img, nw, nh, FilterType::Triangle)
}

fn center_crop(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    let (iw, ih) = img.dimensions();
    if iw < w || ih < h {
        return imageops::resize(img, w, h, FilterType::Triangle);
    }
    let x = (iw - w) / 2;
    let y = (ih - h) / 2;
    imageops::crop_imm(img, x, y, w, h).to_image()
}

fn color_jitter(p: &mut Planes, params: &AugmentParams, rng: &mut dyn RngCore) {
    let mut factor = |s: f64| -> f32 {
        if s > 0.0 {
            rng.random_range((1.0 - s)..=(1.0 + s)) as f32
        } else {
            1.0
        }
    };
    let b = factor(params.brightness);
    let c = factor(params.contrast);
    let s = factor(params.saturation);
    let plane = p.h * p.w;
    p.data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    let gray = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
    let mean_gray = (0..plane).map(|i| gray(&p.data, i) as f64).sum::<f64>() as f32 / plane as f32;
    p.data
        .iter_mut()
        .for_each(|v| *v = ((*v - mean_gray) * c + mean_gray).clamp(0.0, 1.0));
    for i in 0..plane {
        let g = gray(&p.data, i);
        for ch in 0..3 {
            let v = &mut p.data[ch * plane + i];
            *v = ((*v - g) * s + g).clamp(0.0, 1.0);
        }
    }
}

fn flip_planes(p: &mut Planes) {
    for row in p.data.chunks_mut(p.w) {
        row.reverse();
    }
}

/// 3×3 Gaussian blur with reflect padding, applied separably.
fn gaussian_blur3(p: &mut Planes, sigma: f64) {
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)].map(|v| v as f32);
    let (h, w) = (p.h, p.w);
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            0
        } else if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut tmp = vec![0.0f32; w];
    for plane in p.data.chunks_mut(h * w) {
        for row in plane.chunks_mut(w) {
            for x in 0..w {
                tmp[x] = (0..3)
                    .map(|j| k[j] * row[reflect(x as isize + j as isize - 1, w)])
                    .sum();
            }
            row.copy_from_slice(&tmp);
        }
        let mut col = vec![0.0f32; h];
        for x in 0..w {
            for y in 0..h {
                col[y] = (0..3)
                    .map(|j| k[j] * plane[reflect(y as isize + j as isize - 1, h) * w + x])
                    .sum();
            }
            for y in 0..h {
                plane[y * w + x] = col[y];
            }
        }
    }
}

fn normalize_in_place(data: &mut [f32], plane: usize, mean: &[f32; 3], std: &[f32; 3]) {
    for (c, chunk) in data.chunks_mut(plane).enumerate() {
        let (m, s) = (mean[c % 3], std[c % 3]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Inverse of the channel normalization for a `[3, H, W]` or
/// `[N, 3, H, W]` tensor.
pub fn denormalize(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let plane = shape[shape.len() - 1] * shape[shape.len() - 2];
    let mut out = t.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (IMAGENET_MEAN[c % 3], IMAGENET_STD[c % 3]);
        chunk.iter_mut().for_each(|v| *v = *v * s + m);
    }
    out
}

/// Normalizes a `[3, H, W]` tensor of `[0, 1]` values.
pub fn normalize(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let plane = shape[shape.len() - 1] * shape[shape.len() - 2];
    let mut out = t.clone();
    normalize_in_place(out.data_mut(), plane, &IMAGENET_MEAN, &IMAGENET_STD);
    out
}

/// Mirrors the width (last) axis.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("non-scalar tensor");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(value: u8, w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([value, value, value]))
    }

    fn noisy(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn mid_gray_eval_value() {
        let t = TransformSpec::eval(32)
            .apply(&uniform(128, 50, 40), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(t.shape(), &[3, 32, 32]);
        let expected = (128.0f64 / 255.0 - 0.485) / 0.229;
        assert!((expected - 0.07406).abs() < 1e-5);
        assert!(t.data()[..32 * 32].iter().all(|&v| (v as f64 - expected).abs() < 1e-6));
    }

    #[test]
    fn black_image_gives_negative_mean_over_std() {
        let t = TransformSpec::eval(16)
            .apply(&uniform(0, 20, 20), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let expected = [-2.1179f64, -2.0357, -1.8044];
        for (c, e) in expected.iter().enumerate() {
            let v = t.data()[c * 256] as f64;
            let oracle = -(IMAGENET_MEAN[c] as f64) / IMAGENET_STD[c] as f64;
            assert!((v - oracle).abs() < 1e-6);
            assert!((oracle - e).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_is_deterministic_and_ignores_rng() {
        let img = noisy(3, 60, 45);
        let spec = TransformSpec::eval(24);
        let a = spec.apply(&img, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = spec.apply(&img, &mut ChaCha8Rng::seed_from_u64(999)).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn stochastic_pipelines_are_seed_reproducible() {
        let img = noisy(4, 40, 40);
        for name in Pipeline::TRAINING {
            let spec = TransformSpec::new(name, 32);
            let runs: Vec<Tensor> = (0..2)
                .map(|_| {
                    let mut rng = ChaCha8Rng::seed_from_u64(17);
                    (0..5).map(|_| spec.apply(&img, &mut rng).unwrap()).last().unwrap()
                })
                .collect();
            assert_eq!(runs[0], runs[1], "{name}");
        }
    }

    #[test]
    fn norm_256_crops_center() {
        // left half black, right half white, 256 wide -> crop keeps both halves
        let img = RgbImage::from_fn(256, 256, |x, _| {
            let v = if x < 128 { 0 } else { 255 };
            image::Rgb([v, v, v])
        });
        let spec = TransformSpec::new(Pipeline::Norm256, 224);
        let t = spec.apply(&img, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let d = denormalize(&t);
        assert!(d.data()[0] < 0.01);
        assert!(d.data()[223] > 0.99);
    }

    #[test]
    fn flip_pipeline_flips_about_half_the_time() {
        let img = RgbImage::from_fn(32, 32, |x, _| image::Rgb([(x * 8) as u8, 0, 0]));
        let spec = TransformSpec::new(Pipeline::Norm256Flip, 28);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flipped = (0..200)
            .filter(|_| {
                let t = spec.apply(&img, &mut rng).unwrap();
                t.data()[0] > t.data()[27]
            })
            .count();
        assert!((70..130).contains(&flipped), "{flipped}");
    }

    #[test]
    fn flip_swaps_columns_of_small_tensor() {
        let t = Tensor::from_vec(&[3, 2, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let f = flip_horizontal(&t);
        assert_eq!(&f.data()[..4], &[1.0, 0.0, 3.0, 2.0]);
    }

    #[test]
    fn pipeline_names_parse() {
        assert_eq!("Resize_ColorJit_Flip_Blur".parse::<Pipeline>().unwrap(), Pipeline::ResizeColorjitFlipBlur);
        assert!("rotate_shear".parse::<Pipeline>().is_err());
        let json = serde_json::to_string(&Pipeline::Norm256Flip).unwrap();
        assert_eq!(json, "\"norm_256_flip\"");
    }

    #[test]
    fn all_pipelines_share_normalization() {
        for name in [Pipeline::Norm256, Pipeline::Norm256Flip, Pipeline::ResizeColorjitFlipBlur, Pipeline::EvalDeterministic] {
            let spec = TransformSpec::new(name, 224);
            assert_eq!(spec.mean, IMAGENET_MEAN);
            assert_eq!(spec.std, IMAGENET_STD);
            spec.validate().unwrap();
        }
    }

    #[test]
    fn empty_image_is_rejected() {
        let img = RgbImage::new(0, 5);
        assert!(matches!(
            TransformSpec::eval(8).apply(&img, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(TransformError::EmptyImage)
        ));
    }

    proptest! {
        #[test]
        fn flip_is_an_involution_preserving_the_mean(values in proptest::collection::vec(-5.0f32..5.0, 12)) {
            let t = Tensor::from_vec(&[3, 2, 2], values).unwrap();
            let f = flip_horizontal(&t);
            prop_assert_eq!(flip_horizontal(&f), t.clone());
            let mean = |x: &Tensor| x.data().iter().map(|&v| v as f64).sum::<f64>();
            prop_assert!((mean(&f) - mean(&t)).abs() < 1e-9);
        }

        #[test]
        fn normalization_is_invertible(values in proptest::collection::vec(0.0f32..=1.0, 27)) {
            let t = Tensor::from_vec(&[3, 3, 3], values).unwrap();
            let back = denormalize(&normalize(&t));
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
