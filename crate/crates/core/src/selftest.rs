//! Synthetic property suites: shift relations of group features and group
//! convolutions, invariance of pooled descriptors, pooling identities,
//! finite-difference gradients and descriptor norms.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::group::{warp_image, ContentRegion, GroupElement, GroupGrid};
use crate::pipeline::{
    bilinear_pool, extract_group_features, extract_group_features_in, group_conv_forward_padded, pool_variant, GiftModel, GridPadding,
    GroupConvLayer, GroupFeature,
};
use crate::tensor::ops::GridPool;
use crate::tensor::{LayerParams, Tape, Tensor, Var};
use crate::textures;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub trials: usize,
    pub elapsed: Duration,
}

/// Deliberate defects for checking that the suites can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Group convolutions pad the grid by reflection instead of zeros.
    ReflectPadding,
}

#[derive(Clone, Copy, Debug)]
pub struct SelftestOptions {
    pub seed: u64,
    pub trials: usize,
    pub fault: Fault,
    /// Images for the end-to-end feature shift check; 0 skips it.
    pub images: usize,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            seed: 0,
            trials: 100,
            fault: Fault::None,
            images: 2,
        }
    }
}

fn timed(name: &'static str, tolerance: f64, trials: usize, f: impl FnOnce() -> Result<f64>) -> Result<SuiteReport> {
    let t = Instant::now();
    let max_error = f()?;
    Ok(SuiteReport {
        name,
        passed: max_error <= tolerance,
        max_error,
        tolerance,
        trials,
        elapsed: t.elapsed(),
    })
}

pub fn run_all(opts: &SelftestOptions) -> Result<Vec<SuiteReport>> {
    let mut out = vec![
        lemma1_suite(opts.seed, opts.trials)?,
        lemma2_suite(opts.seed, opts.trials, opts.fault)?,
        prop1_suite(opts.seed, opts.trials, &[1, 3, 6])?,
        pooling_suite(opts.seed, opts.trials)?,
        gradient_suite(opts.seed)?,
        descriptor_norm_suite(opts.seed)?,
    ];
    if opts.images > 0 {
        out.push(image_shift_suite(opts.seed, opts.images)?);
    }
    Ok(out)
}

/// Random `[n_s, n_r, c]` feature, zero within `margin` cells of the border.
pub fn margin_feature<R: Rng>(n_s: usize, n_r: usize, c: usize, margin: usize, rng: &mut R) -> GroupFeature {
    let values = Tensor::from_fn([n_s, n_r, c], |i| {
        let (si, ri) = (i / (c * n_r), (i / c) % n_r);
        let inside = si >= margin && ri >= margin && si + margin < n_s && ri + margin < n_r;
        if inside { rng.gen_range(-1.0..1.0) } else { 0.0 }
    });
    GroupFeature::dense(values).expect("feature shape")
}

/// Array translation: `out[i][j] = f[i + a][j + b]`, zero where that falls
/// off the array.
pub fn array_shift(f: &GroupFeature, a: i32, b: i32) -> GroupFeature {
    let (ns, nr, c) = (f.n_s() as i32, f.n_r() as i32, f.channels());
    let values = Tensor::from_fn(f.values.shape().to_vec(), |i| {
        let (si, ri, ch) = ((i / c) as i32 / nr, (i / c) as i32 % nr, i % c);
        let (ts, tr) = (si + a, ri + b);
        if (0..ns).contains(&ts) && (0..nr).contains(&tr) {
            f.cell(ts as usize, tr as usize)[ch]
        } else {
            0.0
        }
    });
    GroupFeature::dense(values).expect("feature shape")
}

fn sorted_nonzero(f: &GroupFeature) -> Vec<u64> {
    let mut v: Vec<u64> = f.values.data().iter().filter(|&&x| x != 0.0).map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

fn shifts(max: i32) -> Vec<GroupElement> {
    let mut out = Vec::new();
    for a in -max..=max {
        for b in -max..=max {
            out.push(GroupElement::new(a, b));
        }
    }
    out
}

/// `f'(g) = f(g∘h)` is an array translation of `f` that loses no content
/// when `f` has a zero margin of at least `|h|`. Returns a 0/1 mismatch flag.
pub fn lemma1_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    timed("lemma1", 0.0, trials, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GroupGrid::default();
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let m = rng.gen_range(0..=2usize);
            let f = margin_feature(5, 5, 3, m, &mut rng);
            for h in shifts(m as i32) {
                let shifted = f.shifted(h, &grid)?;
                let (a, b) = (h.scale_exp, h.rot_exp);
                let same = shifted.values == array_shift(&f, a, b).values && sorted_nonzero(&shifted) == sorted_nonzero(&f);
                worst = worst.max(if same { 0.0 } else { 1.0 });
            }
        }
        Ok(worst)
    })
}

fn random_layer<R: Rng>(out: usize, inp: usize, rng: &mut R) -> GroupConvLayer {
    LayerParams::group_conv(
        Tensor::uniform([out, inp, 3, 3], -0.5, 0.5, rng),
        Tensor::uniform([out], -0.5, 0.5, rng),
    )
    .expect("group conv shape")
}

/// Group convolution commutes with shifts: for `f` with margin `>= |h|`,
/// `conv(f')(g) == conv(f)(g∘h)` wherever `g∘h` is sampled. Returns the
/// largest absolute difference.
pub fn lemma2_suite(seed: u64, trials: usize, fault: Fault) -> Result<SuiteReport> {
    let padding = match fault {
        Fault::None => GridPadding::Zero,
        Fault::ReflectPadding => GridPadding::Reflect,
    };
    timed("lemma2", 0.0, trials, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let grid = GroupGrid::default();
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let m = rng.gen_range(1..=2usize);
            let (cin, cout) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let f = margin_feature(5, 5, cin, m, &mut rng);
            let layer = random_layer(cout, cin, &mut rng);
            let out = group_conv_forward_padded(&f, &layer, padding)?;
            for h in shifts(m as i32) {
                let out_shifted = group_conv_forward_padded(&f.shifted(h, &grid)?, &layer, padding)?;
                for g in grid.elements() {
                    let (Some((si, ri)), Some((ti, tj))) = (grid.cell_of(g), grid.cell_of(g.compose(h))) else {
                        continue;
                    };
                    for (x, y) in out_shifted.cell(si, ri).iter().zip(out.cell(ti, tj)) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        Ok(worst)
    })
}

/// A model on a synthetic `n x n` grid whose group-conv biases are `<= 0`.
fn prop1_model(depth: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<GiftModel> {
    let mut model = GiftModel::new(rng.gen(), depth, GroupGrid::new(n, n, 2f64.powf(0.25)))?;
    for cnn in [&mut model.alpha, &mut model.beta] {
        for layer in &mut cnn.layers {
            layer.bias.data_mut().iter_mut().for_each(|b| *b = -rng.gen_range(0.0..0.2));
        }
    }
    Ok(model)
}

/// Descriptors of `f` and of its shift `f'(g) = f(g∘h)` agree when `f'` keeps
/// a zero margin of at least the branch depth. Returns the largest
/// `|d' - d|_inf`.
pub fn prop1_suite(seed: u64, trials: usize, depths: &[usize]) -> Result<SuiteReport> {
    timed("prop1", 1e-9, trials * depths.len(), || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let mut worst: f64 = 0.0;
        for &depth in depths {
            for _ in 0..trials {
                let hmax = rng.gen_range(1..=2usize);
                let margin = depth + hmax;
                let n = 2 * margin + rng.gen_range(1..=3);
                let model = prop1_model(depth, n, &mut rng)?;
                let grid = model.grid.clone();
                let f = margin_feature(n, n, 32, margin, &mut rng);
                let h = GroupElement::new(rng.gen_range(-(hmax as i32)..=hmax as i32), rng.gen_range(-(hmax as i32)..=hmax as i32));
                let d = model.embed(&[f.clone(), f.shifted(h, &grid)?])?;
                for (x, y) in d[0].values.iter().zip(&d[1].values) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        Ok(worst)
    })
}

/// Bilinear pooling against a constant one-channel `1/n_g` branch equals
/// average pooling. Returns the largest absolute difference.
pub fn pooling_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    timed("pooling", 1e-12, trials, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let c = rng.gen_range(1..=16);
            let alpha = GroupFeature::dense(Tensor::uniform([5, 5, c], -3.0, 3.0, &mut rng))?;
            let beta = GroupFeature::dense(Tensor::full([5, 5, 1], 1.0 / 25.0))?;
            let d = bilinear_pool(&alpha, &beta)?;
            let avg = pool_variant(&alpha, GridPool::Average)?;
            for (x, y) in d.iter().zip(&avg) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    })
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub probes: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            probes: self.probes + other.probes,
        }
    }
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences with step `1e-6`. Up to `per_input` coordinates of each input
/// are probed (all when `None`). Relative error is
/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn gradient_check(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    let eval = |vals: &[Tensor], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(grad);
                tape.leaf(t)
            })
            .collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !grad {
            return Ok((value, vec![]));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-6;
    let mut check = GradCheck::default();
    for (k, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match per_input {
            Some(n) if n < t.len() => (0..n).map(|_| rng.gen_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        for i in coords {
            let mut probe = inputs.to_vec();
            probe[k].data_mut()[i] += step;
            let up = eval(&probe, false)?.0;
            probe[k].data_mut()[i] -= 2.0 * step;
            let down = eval(&probe, false)?.0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.probes += 1;
        }
    }
    Ok(check)
}

/// Weighted sum `sum(x * w)` with fixed random `w`, a generic scalar head.
fn weighted_sum(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.leaf(Tensor::uniform(shape, -1.0, 1.0, rng));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// Finite-difference checks of every tape primitive. Returns
/// `(primitive name, result)` pairs.
pub fn primitive_gradient_checks(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    use crate::tensor::ops::GridPool as Gp;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::uniform(shape.to_vec(), lo, hi, &mut rng);
    let head = seed ^ 0xabc;
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| -> Result<()> {
        let build = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let x = f(tape, v)?;
            if tape.value(x).len() == 1 {
                return Ok(x);
            }
            weighted_sum(tape, x, &mut ChaCha8Rng::seed_from_u64(head))
        };
        out.push((name, gradient_check(&inputs, &build, None, seed)?));
        Ok(())
    };
    run("conv2d", vec![u(&[2, 2, 5, 4], -1.0, 1.0), u(&[3, 2, 3, 3], -1.0, 1.0), u(&[3], -1.0, 1.0)], &|t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1)
    })?;
    run("conv2d_strided", vec![u(&[1, 2, 6, 5], -1.0, 1.0), u(&[2, 2, 3, 3], -1.0, 1.0), u(&[2], -1.0, 1.0)], &|t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 0)
    })?;
    run("instance_norm", vec![u(&[2, 3, 4, 3], -1.0, 1.0), u(&[3], 0.5, 1.5), u(&[3], -1.0, 1.0)], &|t, v| {
        t.instance_norm(v[0], v[1], v[2], 1e-5)
    })?;
    let mask: Vec<bool> = (0..24).map(|i| i % 3 != 1).collect();
    run("masked_instance_norm", vec![u(&[2, 2, 3, 4], -1.0, 1.0), u(&[2], 0.5, 1.5), u(&[2], -1.0, 1.0)], &|t, v| {
        t.masked_instance_norm(v[0], v[1], v[2], 1e-5, Some(&mask))
    })?;
    run("relu", vec![u(&[3, 7], -1.0, 1.0)], &|t, v| Ok(t.relu(v[0])))?;
    run("avg_pool", vec![u(&[1, 2, 5, 4], -1.0, 1.0)], &|t, v| t.avg_pool(v[0], 2))?;
    run("batched_matmul_nt", vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 5, 4], -1.0, 1.0)], &|t, v| {
        t.batched_matmul_nt(v[0], v[1])
    })?;
    run("bilinear_pool", vec![u(&[2, 3, 6], -1.0, 1.0), u(&[2, 4, 6], -1.0, 1.0)], &|t, v| t.bilinear_pool(v[0], v[1]))?;
    run("grid_pool_average", vec![u(&[2, 3, 5], -1.0, 1.0)], &|t, v| t.grid_pool(v[0], Gp::Average))?;
    run("grid_pool_max", vec![u(&[2, 3, 5], -1.0, 1.0)], &|t, v| t.grid_pool(v[0], Gp::Max))?;
    run("reshape", vec![u(&[2, 6], -1.0, 1.0)], &|t, v| t.reshape(v[0], &[3, 4]))?;
    let points = [(0.3, 1.7), (2.0, 0.5), (3.9, 2.2), (-1.0, 0.0)];
    run("sample", vec![u(&[1, 2, 4, 5], -1.0, 1.0)], &|t, v| t.sample(v[0], &points).map(|r| r.0))?;
    run("group_stack", vec![u(&[2, 3], -1.0, 1.0), u(&[2, 3], -1.0, 1.0)], &|t, v| t.group_stack(v, 1, 2))?;
    run("normalize_rows", vec![u(&[3, 5], -1.0, 1.0)], &|t, v| t.normalize_rows(v[0]).map(|r| r.0))?;
    run("gather_rows", vec![u(&[4, 3], -1.0, 1.0)], &|t, v| t.gather_rows(v[0], &[2, 0, 2]))?;
    run("triplet_loss", vec![u(&[6, 4], -1.0, 1.0), u(&[6, 4], -1.0, 1.0), u(&[6, 4], -1.0, 1.0)], &|t, v| {
        t.triplet_loss(v[0], v[1], v[2], 0.5)
    })?;
    run("mul_sum", vec![u(&[3, 2], -1.0, 1.0), u(&[3, 2], -1.0, 1.0)], &|t, v| {
        let p = t.mul(v[0], v[1])?;
        Ok(t.sum(p))
    })?;
    Ok(out)
}

/// Image -> descriptor -> triplet loss on a small grid, checked against
/// finite differences for `probes` coordinates of every weight tensor.
pub fn chain_gradient_check(seed: u64, depth: usize, probes: usize) -> Result<GradCheck> {
    let grid = GroupGrid::new(2, 3, 2f64.powf(0.25));
    let mut model = GiftModel::new(seed, depth, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    for t in model.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    }
    let image_a = textures::texture(24, 24, seed);
    let image_b = textures::texture(24, 24, seed + 1);
    let pa = [(6.3, 7.1), (12.0, 15.5), (17.2, 9.8), (10.4, 4.6)];
    let pb = [(7.0, 6.2), (13.1, 14.9), (16.5, 10.3), (9.1, 5.2)];
    let params: Vec<Tensor> = model.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let build = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let vars = model_vars_from(&model, v);
        let (fa, _) = model.extract_on_tape(tape, &image_a, &pa, &vars)?;
        let (da, _) = model.embed_on_tape(tape, fa, &vars)?;
        let (fb, _) = model.extract_on_tape(tape, &image_b, &pb, &vars)?;
        let (db, _) = model.embed_on_tape(tape, fb, &vars)?;
        // Large margin keeps every hinge active; negatives are rolled rows.
        let n = tape.gather_rows(db, &[1, 2, 3, 0])?;
        tape.triplet_loss(da, db, n, 4.0)
    };
    gradient_check(&params, &build, Some(probes), seed)
}

fn model_vars_from(model: &GiftModel, v: &[Var]) -> crate::pipeline::ModelVars {
    let nb = model.backbone.tensors().len();
    let na = 2 * model.alpha.layers.len();
    crate::pipeline::ModelVars {
        backbone: crate::backbone::BackboneVars { vars: v[..nb].to_vec() },
        alpha: v[nb..nb + na].to_vec(),
        beta: v[nb + na..].to_vec(),
    }
}

pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    let checks = primitive_gradient_checks(seed)?;
    timed("gradient", 1e-4, checks.len() + 1, || {
        let chain = chain_gradient_check(seed, 2, 4)?;
        Ok(checks.iter().map(|c| c.1).fold(chain, GradCheck::merge).max_rel_error)
    })
}

/// Every descriptor of a freshly initialized model on a texture is 128-d
/// with unit norm. Returns the largest `| |d| - 1 |` (1.0 for a wrong
/// dimension or a degenerate descriptor).
pub fn descriptor_norm_suite(seed: u64) -> Result<SuiteReport> {
    timed("descriptor_norm", 1e-9, 1, || {
        let model = GiftModel::new(seed, 6, GroupGrid::default())?;
        let img = textures::texture(64, 64, seed);
        let pts = crate::eval::grid_keypoints(64, 64, 6);
        let mut worst: f64 = 0.0;
        for d in model.describe(&img, &pts)? {
            let n = d.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            let bad = d.values.len() != 128 || d.degenerate;
            worst = worst.max(if bad { 1.0 } else { (n - 1.0).abs() });
        }
        Ok(worst)
    })
}

/// Side of the images in the end-to-end shift check.
pub const SHIFT_IMAGE_SIDE: usize = 128;

/// Interior grid elements used as warps in the end-to-end shift check.
pub const IMAGE_SHIFTS: [GroupElement; 5] = [
    GroupElement::new(1, -1),
    GroupElement::new(1, 0),
    GroupElement::new(1, 1),
    GroupElement::new(2, 0),
    GroupElement::new(2, 1),
];

/// End-to-end feature shift: for a smooth image `I` and `I' = T_h I`, the
/// group feature of `T_h(p)` in `I'` at `g` matches that of `p` in `I` at
/// `g∘h`. `I'` is extracted with its content region, so its empty corners
/// do not count as content. Image `k` is warped by `shifts[k % len]`.
/// Compares cells where `g` and `g∘h` are both interior grid cells and both
/// samples are valid; returns the largest relative L2 error.
pub fn image_shift_errors(seed: u64, images: usize, shifts: &[GroupElement]) -> Result<f64> {
    let grid = GroupGrid::default();
    let model = GiftModel::new(seed, 1, grid.clone())?;
    let n = SHIFT_IMAGE_SIDE;
    let interior = |g: GroupElement| {
        grid.cell_of(g).filter(|&(si, ri)| (1..grid.n_s() - 1).contains(&si) && (1..grid.n_r() - 1).contains(&ri))
    };
    let mut worst: f64 = 0.0;
    for (k, &h) in (0..images).zip(shifts.iter().cycle()) {
        let img = textures::smooth(n, n, seed.wrapping_add(k as u64));
        let p = ((n as f64 - 1.0) / 2.0, (n as f64 - 1.0) / 2.0);
        let base = &extract_group_features(&img, &[p], &grid, &model.backbone)?[0];
        let (warped, map) = warp_image(&img, h, &grid)?;
        let content = ContentRegion::full(n, n).warped(&map);
        let moved = &extract_group_features_in(&warped, Some(&content), &[map.apply(p)], &grid, &model.backbone)?[0];
        for g in grid.elements() {
            let (Some((si, ri)), Some((ti, tj))) = (interior(g), interior(g.compose(h))) else {
                continue;
            };
            if !(moved.validity[si * grid.n_r() + ri] && base.validity[ti * grid.n_r() + tj]) {
                continue;
            }
            let (x, y) = (moved.cell(si, ri), base.cell(ti, tj));
            let diff = x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(diff / norm.max(1e-12));
        }
    }
    Ok(worst)
}

pub fn image_shift_suite(seed: u64, images: usize) -> Result<SuiteReport> {
    timed("lemma1_image", 0.1, images, || image_shift_errors(seed, images, &IMAGE_SHIFTS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_suites_pass() {
        for r in [lemma1_suite(1, 20).unwrap(), lemma2_suite(1, 20, Fault::None).unwrap(), pooling_suite(1, 20).unwrap()] {
            assert!(r.passed, "{r:?}");
        }
        let p = prop1_suite(1, 3, &[1, 3]).unwrap();
        assert!(p.passed, "{p:?}");
    }

    #[test]
    fn reflect_padding_breaks_lemma2() {
        let r = lemma2_suite(1, 20, Fault::ReflectPadding).unwrap();
        assert!(!r.passed && r.max_error > 1e-3, "{r:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (name, c) in primitive_gradient_checks(3).unwrap() {
            assert!(c.max_rel_error <= 1e-4, "{name}: {c:?}");
        }
        let chain = chain_gradient_check(3, 2, 4).unwrap();
        assert!(chain.max_rel_error <= 1e-4, "{chain:?}");
    }

    #[test]
    fn norm_and_image_shift_suites_pass() {
        let n = descriptor_norm_suite(0).unwrap();
        assert!(n.passed, "{n:?}");
        let s = image_shift_suite(0, 5).unwrap();
        assert!(s.passed, "{s:?}");
    }

    #[test]
    fn array_shift_example() {
        let f = GroupFeature::dense(Tensor::from_fn([3, 3, 1], |i| i as f64)).unwrap();
        let s = array_shift(&f, 1, -1);
        assert_eq!(s.values.data(), &[0.0, 3.0, 4.0, 0.0, 6.0, 7.0, 0.0, 0.0, 0.0]);
    }
}
