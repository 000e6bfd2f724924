//! Small convolutional pyramid producing three feature levels.

use candle_core::{DType, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Scope};

/// Pixel statistics used to normalize input images.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Strides of the emitted levels, coarse to fine.
pub const LEVEL_STRIDES: [usize; 3] = [32, 16, 8];

#[derive(Clone, Debug)]
struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv {
    fn new(scope: &Scope, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let fan_in = (cin * 9) as f64;
        Ok(Self {
            weight: scope.get(&[cout, cin, 3, 3], "weight", Init::Uniform((6.0 / fan_in).sqrt()))?,
            bias: scope.get(&[cout], "bias", Init::Zeros)?,
            stride,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, 1, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?.relu()?)
    }
}

/// One feature level flattened to tokens.
#[derive(Clone, Debug)]
pub struct FeatureLevel {
    pub level: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// `(height * width, E)`, row-major over the grid.
    pub tokens: Tensor,
}

/// Levels ordered coarse to fine.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub levels: Vec<FeatureLevel>,
    pub image_height: usize,
    pub image_width: usize,
}

impl MultiScaleFeatures {
    pub fn num_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }

    /// Concatenates all levels into `(N, E)`.
    pub fn flatten(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.levels.iter().map(|l| &l.tokens).collect();
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Splits a flattened `(N, E)` sequence back into this layout.
    pub fn unflatten(&self, flat: &Tensor) -> Result<MultiScaleFeatures> {
        let mut offset = 0;
        let mut levels = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            let n = l.height * l.width;
            levels.push(FeatureLevel {
                tokens: flat.narrow(0, offset, n)?,
                ..l.clone()
            });
            offset += n;
        }
        Ok(MultiScaleFeatures {
            levels,
            image_height: self.image_height,
            image_width: self.image_width,
        })
    }

    /// Normalized token centers in flattening order.
    pub fn token_centers(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.num_tokens());
        for l in &self.levels {
            for y in 0..l.height {
                for x in 0..l.width {
                    out.push([
                        (x as f64 + 0.5) * l.stride as f64 / self.image_width as f64,
                        (y as f64 + 0.5) * l.stride as f64 / self.image_height as f64,
                    ]);
                }
            }
        }
        out
    }

    /// Level index of every token in flattening order.
    pub fn token_levels(&self) -> Vec<usize> {
        self.levels
            .iter()
            .flat_map(|l| std::iter::repeat_n(l.level, l.height * l.width))
            .collect()
    }

    pub fn token_strides(&self) -> Vec<usize> {
        self.levels
            .iter()
            .flat_map(|l| std::iter::repeat_n(l.stride, l.height * l.width))
            .collect()
    }
}

/// Four stride-2 stages (strides 4, 8, 16, 32); the last three are projected
/// to the model width.
#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Vec<Conv>>,
    projections: Vec<(Linear, LayerNorm)>,
}

impl Backbone {
    pub fn new(scope: &Scope, channels: &[usize; 4], dim: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (s, &c) in channels.iter().enumerate() {
            let st = scope.pp(format!("stage{s}"));
            let mut convs = vec![Conv::new(&st.pp("conv0"), cin, c, 2)?];
            // The first stage reaches stride 4 with a second strided conv.
            let second_stride = if s == 0 { 2 } else { 1 };
            convs.push(Conv::new(&st.pp("conv1"), c, c, second_stride)?);
            stages.push(convs);
            cin = c;
        }
        let projections = (0..3)
            .map(|i| {
                let c = channels[3 - i];
                let p = scope.pp(format!("proj{i}"));
                Ok((Linear::new(&p.pp("linear"), c, dim)?, LayerNorm::new(&p.pp("norm"), dim)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stages,
            projections,
        })
    }

    /// `image` is `(1, 3, H, W)`, already normalized.
    pub fn forward(&self, image: &Tensor) -> Result<MultiScaleFeatures> {
        let (_, _, h, w) = image.dims4()?;
        check_image_size(h, w)?;
        let mut x = image.clone();
        let mut maps = Vec::with_capacity(4);
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(&x)?;
            }
            maps.push(x.clone());
        }
        let levels = (0..3)
            .map(|i| {
                let map = &maps[3 - i];
                let (_, c, fh, fw) = map.dims4()?;
                let tokens = map.reshape((c, fh * fw))?.t()?.contiguous()?;
                let (lin, norm) = &self.projections[i];
                Ok(FeatureLevel {
                    level: i,
                    stride: LEVEL_STRIDES[i],
                    height: fh,
                    width: fw,
                    tokens: norm.forward(&lin.forward(&tokens)?)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MultiScaleFeatures {
            levels,
            image_height: h,
            image_width: w,
        })
    }
}

pub fn check_image_size(h: usize, w: usize) -> Result<()> {
    let s = LEVEL_STRIDES[0];
    if h < s || w < s || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::Data(format!(
            "image {w}x{h} must be a positive multiple of {s} on both sides"
        )));
    }
    Ok(())
}

/// Converts an RGB image to a normalized `(1, 3, H, W)` tensor.
pub fn image_to_tensor(img: &RgbImage, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] =
                ((p.0[c] as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD) as f32;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), device)?.to_dtype(dtype)?)
}
