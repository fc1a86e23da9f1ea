//! The vanilla CNN that turns one (warped) image into a dense feature map.
//!
//! ```text
//! conv 3->16 k3 -> IN -> ReLU -> conv 16->16 k3 -> IN -> ReLU -> avgpool 2
//!   -> conv 16->32 k3 -> IN -> ReLU -> conv 32->32 k3 -> IN -> ReLU
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::group::ContentRegion;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{LayerKind, LayerParams, Tape, Tensor, Var};

pub const MIN_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub convs: [ConvSpec; 4],
    /// Average pooling is applied after this many conv blocks.
    pub pool_after: usize,
    pub pool_window: usize,
    pub norm_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let spec = |i, o| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        BackboneConfig {
            convs: [spec(3, 16), spec(16, 16), spec(16, 32), spec(32, 32)],
            pool_after: 2,
            pool_window: 2,
            norm_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.convs[3].out_channels
    }

    /// Total spatial downsampling `D`.
    pub fn downsample(&self) -> usize {
        self.pool_window * self.convs.iter().map(|c| c.stride).product::<usize>()
    }

    /// Feature-map coordinate of image coordinate `x`.
    ///
    /// Feature cell `k` covers image pixels `kD .. kD + D - 1`, so its centre
    /// sits at `kD + (D - 1)/2`.
    pub fn to_feature_coord(&self, x: f64) -> f64 {
        let d = self.downsample() as f64;
        (x + 0.5) / d - 0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub convs: Vec<LayerParams>,
    pub norms: Vec<LayerParams>,
}

impl BackboneParams {
    /// Kaiming-uniform convolutions with zero bias; unit-scale, zero-shift
    /// normalization.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Self {
        let convs = config
            .convs
            .iter()
            .map(|c| LayerParams::kaiming(LayerKind::Conv2d, c.out_channels, c.in_channels, c.kernel, rng))
            .collect();
        let norms = config
            .convs
            .iter()
            .map(|c| LayerParams::instance_norm(c.out_channels))
            .collect();
        BackboneParams { config, convs, norms }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push((format!("backbone.conv{i}.weight"), &c.weights));
            out.push((format!("backbone.conv{i}.bias"), &c.bias));
            out.push((format!("backbone.norm{i}.scale"), &n.weights));
            out.push((format!("backbone.norm{i}.shift"), &n.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
            out.push(&mut n.weights);
            out.push(&mut n.bias);
        }
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = BackboneConfig::default();
        let fetch = |name: String| {
            ckpt.get(&name)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks {name}")))
        };
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, spec) in config.convs.iter().enumerate() {
            let conv = LayerParams::conv2d(fetch(format!("backbone.conv{i}.weight"))?, fetch(format!("backbone.conv{i}.bias"))?)?;
            if conv.weights.shape() != [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel] {
                return Err(Error::shape(
                    "backbone",
                    format!("conv{i} weights {:?} do not match the architecture", conv.weights.shape()),
                ));
            }
            convs.push(conv);
            let mut norm = LayerParams::instance_norm(spec.out_channels);
            norm.weights = fetch(format!("backbone.norm{i}.scale"))?;
            norm.bias = fetch(format!("backbone.norm{i}.shift"))?;
            if norm.weights.shape() != [spec.out_channels] || norm.bias.shape() != [spec.out_channels] {
                return Err(Error::shape("backbone", format!("norm{i} affine shape mismatch")));
            }
            norms.push(norm);
        }
        Ok(BackboneParams { config, convs, norms })
    }
}

/// Tape handles of the backbone parameters, in [`BackboneParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub vars: Vec<Var>,
}

impl BackboneVars {
    pub fn register(tape: &mut Tape, params: &BackboneParams, requires_grad: bool) -> Self {
        let vars = params
            .tensors()
            .into_iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.set_requires_grad(requires_grad);
                tape.leaf(t)
            })
            .collect();
        BackboneVars { vars }
    }
}

fn check_image(image: &Tensor, channels: usize) -> Result<(usize, usize)> {
    match *image.shape() {
        [c, h, w] if c == channels => {
            if h < MIN_SIDE || w < MIN_SIDE {
                return Err(Error::ImageTooSmall {
                    w,
                    h,
                    min_w: MIN_SIDE,
                    min_h: MIN_SIDE,
                });
            }
            Ok((h, w))
        }
        ref s => Err(Error::shape("backbone", format!("expected [{channels}, H, W] image, got {s:?}"))),
    }
}

/// Records the backbone on `tape`; returns the `[1, n0, H/D, W/D]` map.
pub fn backbone_on_tape(tape: &mut Tape, image: Var, config: &BackboneConfig, vars: &BackboneVars) -> Result<Var> {
    backbone_on_tape_region(tape, image, None, config, vars)
}

/// Per-layer normalization masks for an image whose content is `region`.
///
/// The mask of conv layer `i` (at that layer's resolution) keeps the cells
/// whose receptive field lies inside the region for every orientation of
/// its boundary, so zero padding and empty canvas never reach the
/// statistics.
pub fn region_masks(config: &BackboneConfig, region: &ContentRegion, h: usize, w: usize) -> Result<Vec<Vec<bool>>> {
    let (mut lh, mut lw, mut step) = (h, w, 1usize);
    let mut radius = 0.0;
    let mut out = Vec::with_capacity(config.convs.len());
    for (i, spec) in config.convs.iter().enumerate() {
        if i == config.pool_after {
            radius += (config.pool_window as f64 - 1.0) / 2.0 * step as f64;
            step *= config.pool_window;
            (lh, lw) = (lh / config.pool_window, lw / config.pool_window);
        }
        radius += (spec.kernel / 2) as f64 * step as f64;
        let offset = (step as f64 - 1.0) / 2.0;
        out.push(region.mask(lw, lh, step as f64, offset, radius * std::f64::consts::SQRT_2)?);
        step *= spec.stride;
        (lh, lw) = (lh.div_ceil(spec.stride), lw.div_ceil(spec.stride));
    }
    Ok(out)
}

/// As [`backbone_on_tape`], with normalization statistics restricted to the
/// content `region` (see [`region_masks`]) and applied to whole maps.
pub fn backbone_on_tape_region(
    tape: &mut Tape,
    image: Var,
    region: Option<&ContentRegion>,
    config: &BackboneConfig,
    vars: &BackboneVars,
) -> Result<Var> {
    let (h, w) = check_image(tape.value(image), config.convs[0].in_channels)?;
    let masks = region.map(|r| region_masks(config, r, h, w)).transpose()?;
    let mut x = tape.reshape(image, &[1, config.convs[0].in_channels, h, w])?;
    for (i, spec) in config.convs.iter().enumerate() {
        if i == config.pool_after {
            x = tape.avg_pool(x, config.pool_window)?;
        }
        let v = &vars.vars[4 * i..4 * i + 4];
        x = tape.conv2d(x, v[0], v[1], spec.stride, spec.padding)?;
        let mask = masks.as_ref().map(|m| m[i].as_slice());
        x = tape.masked_instance_norm(x, v[2], v[3], config.norm_eps, mask)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// `η(image)`: a `[n0, H/D, W/D]` feature map.
pub fn backbone_forward(image: &Tensor, params: &BackboneParams) -> Result<Tensor> {
    backbone_forward_region(image, None, params)
}

pub fn backbone_forward_region(image: &Tensor, region: Option<&ContentRegion>, params: &BackboneParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, params, false);
    let mut input = image.clone();
    input.set_requires_grad(false);
    let x = tape.leaf(input);
    let out = backbone_on_tape_region(&mut tape, x, region, &params.config, &vars)?;
    let t = tape.value(out).clone();
    let s = t.shape().to_vec();
    t.reshape([s[1], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> BackboneParams {
        BackboneParams::init(BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn output_shape_and_determinism() {
        let p = params(1);
        let img = Tensor::uniform([3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = backbone_forward(&img, &p).unwrap();
        assert_eq!(a.shape(), &[32, 32, 32]);
        assert_eq!(p.config.downsample(), 2);
        let b = backbone_forward(&img, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_network_gives_zero_map() {
        let mut p = params(3);
        for c in &mut p.convs {
            c.weights.data_mut().fill(0.0);
        }
        let img = Tensor::uniform([3, 20, 24], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let out = backbone_forward(&img, &p).unwrap();
        assert_eq!(out.shape(), &[32, 10, 12]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn undersized_and_wrong_channels_rejected() {
        let p = params(5);
        assert!(matches!(
            backbone_forward(&Tensor::zeros([3, 15, 40]), &p),
            Err(Error::ImageTooSmall { .. })
        ));
        assert!(backbone_forward(&Tensor::zeros([1, 32, 32]), &p).is_err());
    }

    #[test]
    fn feature_coordinates() {
        let c = BackboneConfig::default();
        assert_eq!(c.to_feature_coord(0.5), 0.0);
        assert_eq!(c.to_feature_coord(2.5), 1.0);
    }

    #[test]
    fn translation_by_d_shifts_one_cell() {
        // Content surrounded by a wide zero border so the shift never reaches
        // the image edge and plane statistics are unchanged.
        let mut p = params(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for c in &mut p.convs {
            c.bias = Tensor::uniform([c.out_channels()], -0.2, 0.2, &mut rng);
        }
        let (h, w, d) = (48, 48, 2);
        let blob = Tensor::uniform([3, 12, 12], 0.0, 1.0, &mut rng);
        let place = |dx: usize| {
            let mut img = Tensor::zeros([3, h, w]);
            for c in 0..3 {
                for y in 0..12 {
                    for x in 0..12 {
                        img.set(&[c, 18 + y, 16 + dx + x], blob.at(&[c, y, x]));
                    }
                }
            }
            img
        };
        let a = backbone_forward(&place(0), &p).unwrap();
        let b = backbone_forward(&place(d), &p).unwrap();
        let (fh, fw) = (a.shape()[1], a.shape()[2]);
        let mut worst: f64 = 0.0;
        for c in 0..32 {
            for y in 4..fh - 4 {
                for x in 4..fw - 5 {
                    worst = worst.max((a.at(&[c, y, x]) - b.at(&[c, y, x + 1])).abs());
                }
            }
        }
        assert!(worst <= 1e-8, "worst {worst}");
    }
}
