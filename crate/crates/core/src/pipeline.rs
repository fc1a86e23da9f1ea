//! Group feature extraction, group convolutions, and pooling into
//! descriptors.
//!
//! A [`GroupFeature`] stores one feature vector per sampled group element
//! of a [`GroupGrid`]. Group convolution over the 3x3 neighbourhood `H` is a
//! zero-padded 3x3 cross-correlation over the (scale, rotation) exponent
//! lattice: for `h = s^a r^b` the stencil weight `W(h)` sits at kernel cell
//! `(a + 1, b + 1)`, and `f(h∘g)` is the cell offset by `(a, b)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward_region, backbone_on_tape_region, BackboneConfig, BackboneParams, BackboneVars};
use crate::error::{Error, Result};
use crate::group::{warp_image, ContentRegion, Affine2, GroupElement, GroupGrid};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::ops::{self, GridPool};
use crate::tensor::{LayerKind, LayerParams, Tape, Tensor, Var};

pub const DESCRIPTOR_DIM: usize = 128;
pub const ALPHA_CHANNELS: usize = 8;
pub const BETA_CHANNELS: usize = 16;

/// Feature vectors indexed by group element, attached to one point.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFeature {
    /// `[n_s, n_r, C]`.
    pub values: Tensor,
    pub point: (f64, f64),
    /// Row-major `n_s x n_r`; `false` where the sample fell off the map.
    pub validity: Vec<bool>,
}

impl GroupFeature {
    pub fn new(values: Tensor, point: (f64, f64), validity: Vec<bool>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || validity.len() != s[0] * s[1] {
            return Err(Error::shape(
                "GroupFeature",
                format!("values {s:?} with {} validity flags", validity.len()),
            ));
        }
        Ok(GroupFeature {
            values,
            point,
            validity,
        })
    }

    /// All cells valid.
    pub fn dense(values: Tensor) -> Result<Self> {
        let n = values.shape().iter().take(2).product();
        Self::new(values, (0.0, 0.0), vec![true; n])
    }

    pub fn n_s(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_r(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn cell(&self, si: usize, ri: usize) -> &[f64] {
        let c = self.channels();
        let o = (si * self.n_r() + ri) * c;
        &self.values.data()[o..o + c]
    }

    /// `[C, n_s, n_r]` copy.
    pub fn channel_major(&self) -> Tensor {
        let (ns, nr, c) = (self.n_s(), self.n_r(), self.channels());
        let src = self.values.data();
        Tensor::from_fn([c, ns, nr], |i| {
            let (ch, g) = (i / (ns * nr), i % (ns * nr));
            src[g * c + ch]
        })
    }

    pub fn from_channel_major(t: &Tensor, point: (f64, f64), validity: Vec<bool>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("GroupFeature", format!("expected [C, n_s, n_r], got {s:?}")));
        }
        let (c, ns, nr) = (s[0], s[1], s[2]);
        let src = t.data();
        let values = Tensor::from_fn([ns, nr, c], |i| {
            let (g, ch) = (i / c, i % c);
            src[ch * ns * nr + g]
        });
        Self::new(values, point, validity)
    }

    /// The permuted feature `f'(g) = f(g∘h)` on the same grid. Cells whose
    /// `g∘h` is not sampled become zero (and invalid).
    pub fn shifted(&self, h: GroupElement, grid: &GroupGrid) -> Result<GroupFeature> {
        self.check_grid(grid)?;
        let c = self.channels();
        let mut values = Tensor::zeros(self.values.shape().to_vec());
        let mut validity = vec![false; grid.len()];
        for (idx, g) in grid.elements().into_iter().enumerate() {
            if let Some(src) = grid.index_of(g.compose(h)) {
                values.data_mut()[idx * c..(idx + 1) * c].copy_from_slice(&self.values.data()[src * c..(src + 1) * c]);
                validity[idx] = self.validity[src];
            }
        }
        GroupFeature::new(values, self.point, validity)
    }

    /// Width of the all-zero border around the grid.
    pub fn zero_margin(&self) -> usize {
        let (ns, nr) = (self.n_s(), self.n_r());
        let nonzero = |si: usize, ri: usize| self.cell(si, ri).iter().any(|&v| v != 0.0);
        let mut margin = usize::MAX;
        for si in 0..ns {
            for ri in 0..nr {
                if nonzero(si, ri) {
                    let d = si.min(ri).min(ns - 1 - si).min(nr - 1 - ri);
                    margin = margin.min(d);
                }
            }
        }
        margin
    }

    fn check_grid(&self, grid: &GroupGrid) -> Result<()> {
        if self.n_s() != grid.n_s() || self.n_r() != grid.n_r() {
            return Err(Error::shape(
                "GroupFeature",
                format!("{}x{} feature on a {}x{} grid", self.n_s(), self.n_r(), grid.n_s(), grid.n_r()),
            ));
        }
        Ok(())
    }
}

/// Weights `(out, in, 3, 3)` over the stencil `H` plus a bias.
pub type GroupConvLayer = LayerParams;

/// Boundary rule of a group convolution. Only `Zero` preserves the exact
/// shift relations; `Reflect` exists for mutation testing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GridPadding {
    #[default]
    Zero,
    Reflect,
}

/// `[f_l(g)]_i = ReLU(sum_{h in H} f_{l-1}(h∘g)^T W_i(h) + b_i)`.
pub fn group_conv_forward(f_prev: &GroupFeature, layer: &GroupConvLayer) -> Result<GroupFeature> {
    group_conv_forward_padded(f_prev, layer, GridPadding::Zero)
}

pub fn group_conv_forward_padded(
    f_prev: &GroupFeature,
    layer: &GroupConvLayer,
    padding: GridPadding,
) -> Result<GroupFeature> {
    if layer.kind != LayerKind::GroupConv {
        return Err(Error::shape("group_conv", format!("expected a group conv layer, got {:?}", layer.kind)));
    }
    if layer.in_channels() != f_prev.channels() {
        return Err(Error::shape(
            "group_conv",
            format!("layer expects {} channels, feature has {}", layer.in_channels(), f_prev.channels()),
        ));
    }
    let (ns, nr, c) = (f_prev.n_s(), f_prev.n_r(), f_prev.channels());
    let cm = f_prev.channel_major();
    let pre = match padding {
        GridPadding::Zero => ops::conv2d_raw(&cm.reshape([1, c, ns, nr])?, &layer.weights, &layer.bias, 1, 1)?,
        GridPadding::Reflect => {
            let reflect = |i: isize, n: usize| -> usize {
                let n = n as isize;
                let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
                r.clamp(0, n - 1) as usize
            };
            let padded = Tensor::from_fn([1, c, ns + 2, nr + 2], |i| {
                let (ch, rest) = (i / ((ns + 2) * (nr + 2)), i % ((ns + 2) * (nr + 2)));
                let (y, x) = (rest / (nr + 2), rest % (nr + 2));
                let (sy, sx) = (reflect(y as isize - 1, ns), reflect(x as isize - 1, nr));
                cm.data()[(ch * ns + sy) * nr + sx]
            });
            ops::conv2d_raw(&padded, &layer.weights, &layer.bias, 1, 0)?
        }
    };
    let out = ops::relu(&pre);
    let co = layer.out_channels();
    GroupFeature::from_channel_major(&out.reshape([co, ns, nr])?, f_prev.point, f_prev.validity.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Alpha,
    Beta,
}

impl Branch {
    pub fn out_channels(self) -> usize {
        match self {
            Branch::Alpha => ALPHA_CHANNELS,
            Branch::Beta => BETA_CHANNELS,
        }
    }
}

/// A stack of group convolution layers.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCnn {
    pub layers: Vec<GroupConvLayer>,
}

impl GroupCnn {
    /// `depth` layers mapping `in_channels` to `out_channels`; hidden layers
    /// keep `hidden` channels.
    pub fn init<R: Rng + ?Sized>(depth: usize, in_channels: usize, hidden: usize, out_channels: usize, rng: &mut R) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("group CNN depth must be at least 1".into()));
        }
        let layers = (0..depth)
            .map(|l| {
                let i = if l == 0 { in_channels } else { hidden };
                let o = if l + 1 == depth { out_channels } else { hidden };
                LayerParams::kaiming(LayerKind::GroupConv, o, i, 3, rng)
            })
            .collect();
        Ok(GroupCnn { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }
}

/// `l` chained group convolutions.
pub fn group_cnn(f0: &GroupFeature, cnn: &GroupCnn) -> Result<GroupFeature> {
    if cnn.layers.is_empty() {
        return Err(Error::InvalidArgument("group CNN depth must be at least 1".into()));
    }
    let mut f = f0.clone();
    for layer in &cnn.layers {
        f = group_conv_forward(&f, layer)?;
    }
    Ok(f)
}

/// `d = f_alpha^T f_beta` over the flattened grid: entry `i * n_beta + j` is
/// `sum_g [f_alpha(g)]_i [f_beta(g)]_j`. Not normalized.
pub fn bilinear_pool(f_alpha: &GroupFeature, f_beta: &GroupFeature) -> Result<Vec<f64>> {
    if (f_alpha.n_s(), f_alpha.n_r()) != (f_beta.n_s(), f_beta.n_r()) {
        return Err(Error::shape(
            "bilinear_pool",
            format!(
                "grids differ: {}x{} vs {}x{}",
                f_alpha.n_s(),
                f_alpha.n_r(),
                f_beta.n_s(),
                f_beta.n_r()
            ),
        ));
    }
    let ng = f_alpha.n_s() * f_alpha.n_r();
    let a = f_alpha.channel_major().reshape([1, f_alpha.channels(), ng])?;
    let b = f_beta.channel_major().reshape([1, f_beta.channels(), ng])?;
    Ok(ops::bilinear_pool_raw(&a, &b)?.into_data())
}

/// Element-wise mean or max over all grid cells.
pub fn pool_variant(f: &GroupFeature, mode: GridPool) -> Result<Vec<f64>> {
    let ng = f.n_s() * f.n_r();
    let t = f.channel_major().reshape([1, f.channels(), ng])?;
    Ok(ops::grid_pool_raw(&t, mode)?.0.into_data())
}

/// A unit-norm descriptor, or the zero vector flagged as degenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub point: (f64, f64),
    pub degenerate: bool,
}

pub fn normalize(d: &[f64]) -> Descriptor {
    let mut values = d.to_vec();
    let n = ops::l2_normalize(&mut values);
    Descriptor {
        values,
        point: (0.0, 0.0),
        degenerate: n == 0.0,
    }
}

/// How the two branch outputs are reduced to a descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingMode {
    /// Two branches (8 and 16 channels) and bilinear pooling.
    #[default]
    Bilinear,
    /// One 128-channel branch averaged over the grid.
    Average,
    /// One 128-channel branch, max over the grid.
    Max,
}

impl PoolingMode {
    fn code(self) -> f64 {
        match self {
            PoolingMode::Bilinear => 0.0,
            PoolingMode::Average => 1.0,
            PoolingMode::Max => 2.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v as i64 {
            0 => Ok(PoolingMode::Bilinear),
            1 => Ok(PoolingMode::Average),
            2 => Ok(PoolingMode::Max),
            _ => Err(Error::InvalidArgument(format!("unknown pooling mode code {v}"))),
        }
    }
}

/// All weights of the descriptor network plus the grid they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct GiftModel {
    pub grid: GroupGrid,
    pub pooling: PoolingMode,
    pub backbone: BackboneParams,
    pub alpha: GroupCnn,
    /// Empty for the single-branch pooling modes.
    pub beta: GroupCnn,
}

/// Tape handles of all model weights, in [`GiftModel::tensors`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.backbone.vars.clone();
        v.extend(&self.alpha);
        v.extend(&self.beta);
        v
    }
}

impl GiftModel {
    pub fn new(seed: u64, depth: usize, grid: GroupGrid) -> Result<Self> {
        Self::with_pooling(seed, depth, grid, PoolingMode::Bilinear)
    }

    pub fn with_pooling(seed: u64, depth: usize, grid: GroupGrid, pooling: PoolingMode) -> Result<Self> {
        check_grid(&grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneParams::init(BackboneConfig::default(), &mut rng);
        let n0 = backbone.config.out_channels();
        let (alpha, beta) = match pooling {
            PoolingMode::Bilinear => (
                GroupCnn::init(depth, n0, n0, ALPHA_CHANNELS, &mut rng)?,
                GroupCnn::init(depth, n0, n0, BETA_CHANNELS, &mut rng)?,
            ),
            PoolingMode::Average | PoolingMode::Max => (
                GroupCnn::init(depth, n0, n0, DESCRIPTOR_DIM, &mut rng)?,
                GroupCnn { layers: vec![] },
            ),
        };
        Ok(GiftModel {
            grid,
            pooling,
            backbone,
            alpha,
            beta,
        })
    }

    pub fn depth(&self) -> usize {
        self.alpha.depth()
    }

    pub fn descriptor_dim(&self) -> usize {
        match self.pooling {
            PoolingMode::Bilinear => self.alpha.out_channels() * self.beta.out_channels(),
            _ => self.alpha.out_channels(),
        }
    }

    /// Named weights in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.tensors();
        for (name, cnn) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            for (l, layer) in cnn.layers.iter().enumerate() {
                out.push((format!("{name}.{l}.weight"), &layer.weights));
                out.push((format!("{name}.{l}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.tensors_mut();
        for cnn in [&mut self.alpha, &mut self.beta] {
            for layer in &mut cnn.layers {
                out.push(&mut layer.weights);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ModelVars {
        let backbone = BackboneVars::register(tape, &self.backbone, requires_grad);
        let mut reg = |cnn: &GroupCnn| {
            cnn.layers
                .iter()
                .flat_map(|l| [&l.weights, &l.bias])
                .map(|t| {
                    let mut t = t.clone();
                    t.set_requires_grad(requires_grad);
                    tape.leaf(t)
                })
                .collect::<Vec<_>>()
        };
        let alpha = reg(&self.alpha);
        let beta = reg(&self.beta);
        ModelVars { backbone, alpha, beta }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let g = &self.grid;
        let meta = vec![
            g.n_s() as f64,
            g.n_r() as f64,
            g.scale_exps.first().copied().unwrap_or(0) as f64,
            g.rot_exps.first().copied().unwrap_or(0) as f64,
            g.unit_scale_factor,
            g.unit_rot_radians,
            self.pooling.code(),
        ];
        ckpt.push("meta.config", Tensor::new([meta.len()], meta).expect("meta"));
        for (name, t) in self.tensors() {
            let mut t = t.clone();
            t.set_requires_grad(false);
            ckpt.push(name, t);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt
            .get("meta.config")
            .ok_or_else(|| Error::InvalidArgument("checkpoint lacks meta.config".into()))?
            .data();
        if meta.len() != 7 {
            return Err(Error::InvalidArgument("meta.config must hold 7 values".into()));
        }
        let (ns, nr, s0, r0) = (meta[0] as i32, meta[1] as i32, meta[2] as i32, meta[3] as i32);
        let grid = GroupGrid {
            scale_exps: (s0..s0 + ns).collect(),
            rot_exps: (r0..r0 + nr).collect(),
            unit_scale_factor: meta[4],
            unit_rot_radians: meta[5],
        };
        check_grid(&grid)?;
        let pooling = PoolingMode::from_code(meta[6])?;
        let backbone = BackboneParams::from_checkpoint(ckpt)?;
        let load = |name: &str| -> Result<GroupCnn> {
            let mut layers = Vec::new();
            while let (Some(w), Some(b)) = (
                ckpt.get(&format!("{name}.{}.weight", layers.len())),
                ckpt.get(&format!("{name}.{}.bias", layers.len())),
            ) {
                layers.push(LayerParams::group_conv(w.clone(), b.clone())?);
            }
            Ok(GroupCnn { layers })
        };
        let model = GiftModel {
            grid,
            pooling,
            backbone,
            alpha: load("alpha")?,
            beta: load("beta")?,
        };
        let expect_beta = pooling == PoolingMode::Bilinear;
        if model.alpha.layers.is_empty() || (model.beta.layers.is_empty() == expect_beta) {
            return Err(Error::InvalidArgument("checkpoint group CNN layers are inconsistent".into()));
        }
        Ok(model)
    }

    /// Descriptors for `points` of `image` (`[3, H, W]`).
    pub fn describe(&self, image: &Tensor, points: &[(f64, f64)]) -> Result<Vec<Descriptor>> {
        let features = extract_group_features(image, points, &self.grid, &self.backbone)?;
        self.embed(&features)
    }

    /// Group CNNs, pooling and normalization for already extracted features.
    pub fn embed(&self, features: &[GroupFeature]) -> Result<Vec<Descriptor>> {
        if features.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let (ns, nr) = (self.grid.n_s(), self.grid.n_r());
        let c = features[0].channels();
        let mut stacked = Vec::with_capacity(features.len() * c * ns * nr);
        for f in features {
            if (f.n_s(), f.n_r(), f.channels()) != (ns, nr, c) {
                return Err(Error::shape("embed", "group features disagree with the model grid"));
            }
            stacked.extend_from_slice(f.channel_major().data());
        }
        let f0 = tape.leaf(Tensor::new([features.len(), c, ns, nr], stacked)?);
        let (d, degenerate) = self.embed_on_tape(&mut tape, f0, &vars)?;
        let d = tape.value(d);
        let dim = d.shape()[1];
        Ok(features
            .iter()
            .enumerate()
            .map(|(p, f)| Descriptor {
                values: d.data()[p * dim..(p + 1) * dim].to_vec(),
                point: f.point,
                degenerate: degenerate[p],
            })
            .collect())
    }

    /// Records the group CNNs, pooling and normalization. `f0` is
    /// `[P, C, n_s, n_r]`; returns `[P, dim]` unit rows and degenerate flags.
    pub fn embed_on_tape(&self, tape: &mut Tape, f0: Var, vars: &ModelVars) -> Result<(Var, Vec<bool>)> {
        let s = tape.value(f0).shape().to_vec();
        let (np, ng) = (s[0], s[2] * s[3]);
        let run = |tape: &mut Tape, cnn: &GroupCnn, v: &[Var]| -> Result<Var> {
            let mut x = f0;
            for (l, _) in cnn.layers.iter().enumerate() {
                x = tape.conv2d(x, v[2 * l], v[2 * l + 1], 1, 1)?;
                x = tape.relu(x);
            }
            Ok(x)
        };
        let alpha = run(tape, &self.alpha, &vars.alpha)?;
        let pooled = match self.pooling {
            PoolingMode::Bilinear => {
                let beta = run(tape, &self.beta, &vars.beta)?;
                let a = tape.reshape(alpha, &[np, self.alpha.out_channels(), ng])?;
                let b = tape.reshape(beta, &[np, self.beta.out_channels(), ng])?;
                tape.bilinear_pool(a, b)?
            }
            PoolingMode::Average | PoolingMode::Max => {
                let a = tape.reshape(alpha, &[np, self.alpha.out_channels(), ng])?;
                let mode = if self.pooling == PoolingMode::Average { GridPool::Average } else { GridPool::Max };
                tape.grid_pool(a, mode)?
            }
        };
        tape.normalize_rows(pooled)
    }

    /// Records extraction of `[P, n0, n_s, n_r]` group features on the tape.
    pub fn extract_on_tape(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        points: &[(f64, f64)],
        vars: &ModelVars,
    ) -> Result<(Var, Vec<bool>)> {
        check_points(image, points)?;
        let mut parts = Vec::with_capacity(self.grid.len());
        let mut validity = vec![false; points.len() * self.grid.len()];
        for (gi, g) in self.grid.elements().into_iter().enumerate() {
            let (warped, map, region) = warp_covered(image, None, g, &self.grid)?;
            let x = tape.leaf(warped);
            let fmap = backbone_on_tape_region(tape, x, Some(&region), &self.backbone.config, &vars.backbone)?;
            let coords = feature_coords(points, &map, &self.backbone.config);
            let (v, valid) = tape.sample(fmap, &coords)?;
            for (p, ok) in valid.into_iter().enumerate() {
                validity[p * self.grid.len() + gi] = ok;
            }
            parts.push(v);
        }
        let f0 = tape.group_stack(&parts, self.grid.n_s(), self.grid.n_r())?;
        Ok((f0, validity))
    }
}

fn check_grid(grid: &GroupGrid) -> Result<()> {
    let contiguous = |v: &[i32]| !v.is_empty() && v.windows(2).all(|w| w[1] == w[0] + 1);
    if !contiguous(&grid.scale_exps) || !contiguous(&grid.rot_exps) {
        return Err(Error::InvalidArgument(
            "grid exponents must be non-empty runs of consecutive integers".into(),
        ));
    }
    Ok(())
}

fn check_points(image: &Tensor, points: &[(f64, f64)]) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    for &(x, y) in points {
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return Err(Error::PointOutOfBounds { x, y, w, h });
        }
    }
    Ok(())
}

/// Warp plus where the content of `image` (all of it unless `region` says
/// otherwise) lands on the warped canvas.
fn warp_covered(
    image: &Tensor,
    region: Option<&ContentRegion>,
    g: GroupElement,
    grid: &GroupGrid,
) -> Result<(Tensor, Affine2, ContentRegion)> {
    let (warped, map) = warp_image(image, g, grid)?;
    let full = ContentRegion::full(image.shape()[2], image.shape()[1]);
    Ok((warped, map, region.unwrap_or(&full).warped(&map)))
}

fn feature_coords(points: &[(f64, f64)], map: &Affine2, config: &BackboneConfig) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|&p| {
            let (x, y) = map.apply(p);
            (config.to_feature_coord(x), config.to_feature_coord(y))
        })
        .collect()
}

/// `f_0(g) = φ(η(T_g ∘ I), T_g(p))` for every point and sampled `g`.
///
/// Normalization statistics inside the backbone only count cells whose
/// receptive field lies inside the warped image content, so neither the
/// empty corners of a rotated canvas nor zero padding shift them.
///
/// Each warp goes through the backbone once and is shared by all points;
/// warps run in parallel on the current rayon pool.
pub fn extract_group_features(
    image: &Tensor,
    points: &[(f64, f64)],
    grid: &GroupGrid,
    backbone: &BackboneParams,
) -> Result<Vec<GroupFeature>> {
    extract_group_features_in(image, None, points, grid, backbone)
}

/// [`extract_group_features`] for an image whose content only fills
/// `region`, such as a warped image with empty corners.
pub fn extract_group_features_in(
    image: &Tensor,
    region: Option<&ContentRegion>,
    points: &[(f64, f64)],
    grid: &GroupGrid,
    backbone: &BackboneParams,
) -> Result<Vec<GroupFeature>> {
    if points.is_empty() {
        return Ok(vec![]);
    }
    if image.ndim() != 3 {
        return Err(Error::shape("extract", format!("image must be [C,H,W], got {:?}", image.shape())));
    }
    check_grid(grid)?;
    check_points(image, points)?;
    let per_warp: Vec<Vec<(Vec<f64>, bool)>> = grid
        .elements()
        .into_par_iter()
        .map(|g| -> Result<_> {
            let (warped, map, content) = warp_covered(image, region, g, grid)?;
            let fmap = backbone_forward_region(&warped, Some(&content), backbone)?;
            Ok(feature_coords(points, &map, &backbone.config)
                .into_iter()
                .map(|(x, y)| ops::bilinear_sample(&fmap, x, y))
                .collect())
        })
        .collect::<Result<_>>()?;
    let c = backbone.config.out_channels();
    let ng = grid.len();
    Ok(points
        .iter()
        .enumerate()
        .map(|(p, &point)| {
            let mut values = Vec::with_capacity(ng * c);
            let mut validity = Vec::with_capacity(ng);
            for warp in &per_warp {
                values.extend_from_slice(&warp[p].0);
                validity.push(warp[p].1);
            }
            GroupFeature {
                values: Tensor::new([grid.n_s(), grid.n_r(), c], values).expect("group feature shape"),
                point,
                validity,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupElement;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_feature(ns: usize, nr: usize, c: usize, seed: u64) -> GroupFeature {
        GroupFeature::dense(Tensor::uniform([ns, nr, c], -1.0, 1.0, &mut rng(seed))).unwrap()
    }

    fn layer(out: usize, inp: usize, seed: u64) -> GroupConvLayer {
        let mut r = rng(seed);
        LayerParams::group_conv(
            Tensor::uniform([out, inp, 3, 3], -0.5, 0.5, &mut r),
            Tensor::uniform([out], -0.3, 0.3, &mut r),
        )
        .unwrap()
    }

    #[test]
    fn identity_stencil_is_relu() {
        let f = random_feature(5, 5, 4, 1);
        let mut w = Tensor::zeros([4, 4, 3, 3]);
        for c in 0..4 {
            w.set(&[c, c, 1, 1], 1.0);
        }
        let l = LayerParams::group_conv(w, Tensor::zeros([4])).unwrap();
        let out = group_conv_forward(&f, &l).unwrap();
        for (a, b) in out.values.data().iter().zip(f.values.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let f = GroupFeature::dense(Tensor::full([5, 5, 3], 0.7)).unwrap();
        let out = group_conv_forward(&f, &layer(4, 3, 2)).unwrap();
        for si in 1..4 {
            for ri in 1..4 {
                for (a, b) in out.cell(si, ri).iter().zip(out.cell(2, 2)) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn group_conv_rejects_channel_mismatch() {
        let f = random_feature(5, 5, 4, 3);
        assert!(group_conv_forward(&f, &layer(2, 5, 4)).is_err());
    }

    #[test]
    fn group_cnn_shapes_and_zero_input() {
        let mut r = rng(5);
        let alpha = GroupCnn::init(6, 32, 32, 8, &mut r).unwrap();
        let beta = GroupCnn::init(6, 32, 32, 16, &mut r).unwrap();
        let f0 = random_feature(5, 5, 32, 6);
        assert_eq!(group_cnn(&f0, &alpha).unwrap().values.shape(), &[5, 5, 8]);
        assert_eq!(group_cnn(&f0, &beta).unwrap().values.shape(), &[5, 5, 16]);

        let one = GroupCnn::init(1, 32, 32, 8, &mut r).unwrap();
        assert_eq!(group_cnn(&f0, &one).unwrap(), group_conv_forward(&f0, &one.layers[0]).unwrap());

        let zero = GroupFeature::dense(Tensor::zeros([5, 5, 32])).unwrap();
        assert!(group_cnn(&zero, &alpha).unwrap().values.data().iter().all(|&v| v == 0.0));
        assert!(GroupCnn::init(0, 32, 32, 8, &mut r).is_err());
    }

    #[test]
    fn bilinear_pool_dimension_and_mismatch() {
        let a = random_feature(5, 5, 8, 7);
        let b = random_feature(5, 5, 16, 8);
        assert_eq!(bilinear_pool(&a, &b).unwrap().len(), 128);
        assert!(bilinear_pool(&a, &random_feature(4, 5, 16, 9)).is_err());
    }

    #[test]
    fn pool_variant_examples() {
        let f = GroupFeature::dense(Tensor::full([5, 5, 3], -0.4)).unwrap();
        assert_eq!(pool_variant(&f, GridPool::Average).unwrap(), vec![-0.4; 3]);
        assert_eq!(pool_variant(&f, GridPool::Max).unwrap(), vec![-0.4; 3]);

        let mut one_hot = Tensor::zeros([5, 5, 2]);
        one_hot.set(&[3, 1, 0], 5.0);
        one_hot.set(&[3, 1, 1], -5.0);
        let f = GroupFeature::dense(one_hot).unwrap();
        assert_eq!(pool_variant(&f, GridPool::Average).unwrap(), vec![0.2, -0.2]);
        assert_eq!(pool_variant(&f, GridPool::Max).unwrap(), vec![5.0, 0.0]);
    }

    #[test]
    fn normalize_examples() {
        let mut v = vec![0.0; 128];
        v[0] = 3.0;
        v[1] = 4.0;
        let d = normalize(&v);
        assert!(!d.degenerate);
        assert_eq!(&d.values[..3], &[0.6, 0.8, 0.0]);

        let unit = normalize(&d.values);
        for (a, b) in unit.values.iter().zip(&d.values) {
            assert!((a - b).abs() <= 1e-12);
        }

        let z = normalize(&[0.0; 128]);
        assert!(z.degenerate);
        assert!(z.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shift_matches_direct_indexing() {
        let grid = GroupGrid::default();
        let f = random_feature(5, 5, 2, 10);
        let h = GroupElement::new(1, -1);
        let s = f.shifted(h, &grid).unwrap();
        for si in 0..5 {
            for ri in 0..5 {
                let g = grid.element(si, ri);
                match grid.cell_of(g.compose(h)) {
                    Some((a, b)) => assert_eq!(s.cell(si, ri), f.cell(a, b)),
                    None => assert!(s.cell(si, ri).iter().all(|&v| v == 0.0)),
                }
            }
        }
    }

    #[test]
    fn identity_grid_extraction_is_plain_interpolation() {
        let mut r = rng(11);
        let bb = BackboneParams::init(BackboneConfig::default(), &mut r);
        let img = Tensor::uniform([3, 32, 40], 0.0, 1.0, &mut r);
        let pts = [(10.0, 12.0), (21.3, 7.9)];
        let feats = extract_group_features(&img, &pts, &GroupGrid::identity_only(), &bb).unwrap();
        let fmap = backbone_forward_region(&img, Some(&ContentRegion::full(40, 32)), &bb).unwrap();
        for (f, &(x, y)) in feats.iter().zip(&pts) {
            assert_eq!(f.values.shape(), &[1, 1, 32]);
            let c = &bb.config;
            let (want, ok) = ops::bilinear_sample(&fmap, c.to_feature_coord(x), c.to_feature_coord(y));
            assert!(ok && f.validity == vec![true]);
            assert_eq!(f.values.data(), want.as_slice());
        }
        assert!(extract_group_features(&img, &[], &GroupGrid::default(), &bb).unwrap().is_empty());
        assert!(matches!(
            extract_group_features(&img, &[(40.0, 3.0)], &GroupGrid::default(), &bb),
            Err(Error::PointOutOfBounds { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        for pooling in [PoolingMode::Bilinear, PoolingMode::Max] {
            let m = GiftModel::with_pooling(3, 2, GroupGrid::new(3, 3, 1.5), pooling).unwrap();
            let back = GiftModel::from_checkpoint(&m.to_checkpoint()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn group_conv_matches_loop_oracle() {
        for seed in 0..5 {
            let f = random_feature(5, 5, 4, 100 + seed);
            let l = layer(6, 4, 200 + seed);
            let out = group_conv_forward(&f, &l).unwrap();
            for si in 0..5i32 {
                for ri in 0..5i32 {
                    for o in 0..6 {
                        let mut acc = l.bias.data()[o];
                        for a in -1..=1i32 {
                            for b in -1..=1i32 {
                                let (ts, tr) = (si + a, ri + b);
                                if !(0..5).contains(&ts) || !(0..5).contains(&tr) {
                                    continue;
                                }
                                for i in 0..4 {
                                    let w = l.weights.at(&[o, i, (a + 1) as usize, (b + 1) as usize]);
                                    acc += f.cell(ts as usize, tr as usize)[i] * w;
                                }
                            }
                        }
                        let got = out.cell(si as usize, ri as usize)[o];
                        assert!((got - acc.max(0.0)).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_beta_gives_average_pooling() {
        let a = random_feature(5, 5, 8, 12);
        let beta = GroupFeature::dense(Tensor::full([5, 5, 1], 1.0 / 25.0)).unwrap();
        let d = bilinear_pool(&a, &beta).unwrap();
        let avg = pool_variant(&a, GridPool::Average).unwrap();
        for (x, y) in d.iter().zip(&avg) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn joint_cell_permutation_is_bit_exact() {
        let a = random_feature(5, 5, 8, 13);
        let b = random_feature(5, 5, 16, 14);
        let d = bilinear_pool(&a, &b).unwrap();
        let mut order: Vec<usize> = (0..25).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng(15));
        let permute = |f: &GroupFeature| {
            let c = f.channels();
            let src = f.values.data();
            let v = Tensor::from_fn([5, 5, c], |i| src[order[i / c] * c + i % c]);
            GroupFeature::dense(v).unwrap()
        };
        assert_eq!(bilinear_pool(&permute(&a), &permute(&b)).unwrap(), d);
    }

    #[test]
    fn concentric_rings_agree_along_rotation_axis() {
        let mut r = rng(16);
        let bb = BackboneParams::init(BackboneConfig::default(), &mut r);
        let n = 128;
        let c = (n as f64 - 1.0) / 2.0;
        let img = Tensor::from_fn([3, n, n], |i| {
            let (y, x) = ((i % (n * n)) / n, i % n);
            let rad = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            let win = (1.0 - (rad / (c - 2.0)).powi(2)).max(0.0);
            win * (0.5 + 0.5 * (rad / (c / 3.0)).cos())
        });
        let grid = GroupGrid::default();
        let f = &extract_group_features(&img, &[(c, c)], &grid, &bb).unwrap()[0];
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        for si in 0..grid.n_s() {
            let base = f.cell(si, grid.n_r() / 2);
            for ri in 0..grid.n_r() {
                let dev = norm(&mut f.cell(si, ri).iter().zip(base).map(|(a, b)| a - b));
                let rel = dev / norm(&mut base.iter().copied());
                assert!(rel <= 5e-2, "scale {si} rot {ri}: {rel}");
            }
        }
    }
}
