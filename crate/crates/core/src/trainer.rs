//! Triplet-loss training on synthetic homography pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::{random_homography_in, GroupGrid, Homography, DEFAULT_MAX_ROTATION};
use crate::pipeline::{GiftModel, ModelVars, PoolingMode};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_POINTS: usize = 128;
pub const POINT_MARGIN: f64 = 8.0;
pub const EXCLUSION_RADIUS: f64 = 5.0;
pub const TRIPLET_MARGIN: f64 = 0.5;
pub const MIN_SOURCE_SIDE: usize = 64;
const PAIR_ATTEMPTS: usize = 10;

pub type Correspondence = ((f64, f64), (f64, f64));

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub image_a: Tensor,
    pub image_b: Tensor,
    /// Maps image A pixel coordinates to image B.
    pub homography: Homography,
    pub correspondences: Vec<Correspondence>,
}

impl TrainingPair {
    pub fn points_a(&self) -> Vec<(f64, f64)> {
        self.correspondences.iter().map(|c| c.0).collect()
    }

    pub fn points_b(&self) -> Vec<(f64, f64)> {
        self.correspondences.iter().map(|c| c.1).collect()
    }
}

fn inside(p: (f64, f64), w: usize, h: usize, margin: f64) -> bool {
    p.0 >= margin && p.1 >= margin && p.0 <= w as f64 - 1.0 - margin && p.1 <= h as f64 - 1.0 - margin
}

pub fn make_training_pair(source: &Tensor, seed: u64, difficulty: f64) -> Result<TrainingPair> {
    make_training_pair_with(source, seed, difficulty, DEFAULT_MAX_ROTATION, DEFAULT_POINTS)
}

/// Warps `source` by a random homography and samples `k` correspondences
/// that sit at least [`POINT_MARGIN`] pixels inside both images. When the
/// overlap is too small the homography is redrawn at half the difficulty.
pub fn make_training_pair_with(source: &Tensor, seed: u64, difficulty: f64, max_rotation: f64, k: usize) -> Result<TrainingPair> {
    let (h, w) = match *source.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape("make_training_pair", format!("expected [3, H, W], got {s:?}"))),
    };
    if w < MIN_SOURCE_SIDE || h < MIN_SOURCE_SIDE {
        return Err(Error::ImageTooSmall {
            w,
            h,
            min_w: MIN_SOURCE_SIDE,
            min_h: MIN_SOURCE_SIDE,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = difficulty;
    for _ in 0..PAIR_ATTEMPTS {
        let hom = random_homography_in(rng.gen(), (w, h), d, max_rotation)?;
        let mut correspondences = Vec::with_capacity(k);
        for _ in 0..k * 40 {
            if correspondences.len() == k {
                break;
            }
            let pa = (
                rng.gen_range(POINT_MARGIN..=w as f64 - 1.0 - POINT_MARGIN),
                rng.gen_range(POINT_MARGIN..=h as f64 - 1.0 - POINT_MARGIN),
            );
            let pb = hom.apply(pa);
            if inside(pb, w, h, POINT_MARGIN) {
                correspondences.push((pa, pb));
            }
        }
        if correspondences.len() == k {
            let image_b = if hom == Homography::IDENTITY {
                source.clone()
            } else {
                hom.warp(source, w, h)?
            };
            return Ok(TrainingPair {
                image_a: source.clone(),
                image_b,
                homography: hom,
                correspondences,
            });
        }
        d /= 2.0;
    }
    Err(Error::InsufficientOverlap {
        needed: k,
        attempts: PAIR_ATTEMPTS,
    })
}

/// Index of the candidate nearest to `anchor` in descriptor space among those
/// at least `radius` pixels from `true_match`; `None` drops the row.
pub fn mine_hard_negative(
    anchor: &[f64],
    candidates: &[(&[f64], (f64, f64))],
    true_match: (f64, f64),
    radius: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, (d, p)) in candidates.iter().enumerate() {
        if ((p.0 - true_match.0).powi(2) + (p.1 - true_match.1).powi(2)).sqrt() < radius {
            continue;
        }
        let dist: f64 = anchor.iter().zip(*d).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(_, bd)| dist < bd) {
            best = Some((j, dist));
        }
    }
    best.map(|(j, _)| j)
}

/// Anchor, positive and negative descriptor rows of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub anchor: Vec<Vec<f64>>,
    pub positive: Vec<Vec<f64>>,
    pub negative: Vec<Vec<f64>>,
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("triplet_loss", "descriptor rows differ in length"));
    }
    Tensor::new([rows.len(), dim], rows.concat())
}

/// Mean over rows of `max(|a - p| - |a - n| + margin, 0)`.
pub fn triplet_loss(batch: &TripletBatch, margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(rows_tensor(&batch.anchor)?);
    let p = tape.leaf(rows_tensor(&batch.positive)?);
    let n = tape.leaf(rows_tensor(&batch.negative)?);
    let l = tape.triplet_loss(a, p, n, margin)?;
    Ok(tape.value(l).item())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![],
            v: vec![],
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Correspondences per step (one training pair per step).
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub depth: usize,
    pub n_s: usize,
    pub n_r: usize,
    pub unit_scale_factor: f64,
    pub difficulty: f64,
    /// Largest rotation of a difficulty-1 training homography, radians.
    pub max_rotation: f64,
    pub pooling: PoolingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            depth: 6,
            n_s: 5,
            n_r: 5,
            unit_scale_factor: 2f64.powf(0.25),
            difficulty: 1.0,
            max_rotation: DEFAULT_MAX_ROTATION,
            pooling: PoolingMode::Bilinear,
        }
    }
}

impl TrainConfig {
    /// Parses `key=value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value", n + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::InvalidArgument(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?}"))
        }
        match key {
            "steps" => self.steps = num(value)?,
            "batch" => self.batch = num(value)?,
            "lr" => self.lr = num(value)?,
            "seed" => self.seed = num(value)?,
            "depth" => self.depth = num(value)?,
            "n_s" => self.n_s = num(value)?,
            "n_r" => self.n_r = num(value)?,
            "unit_scale_factor" => self.unit_scale_factor = num(value)?,
            "difficulty" => self.difficulty = num(value)?,
            "max_rotation_deg" => self.max_rotation = num::<f64>(value)?.to_radians(),
            "pooling" => {
                self.pooling = match value {
                    "bilinear" => PoolingMode::Bilinear,
                    "average" => PoolingMode::Average,
                    "max" => PoolingMode::Max,
                    _ => return Err(format!("unknown pooling {value:?}")),
                }
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn grid(&self) -> GroupGrid {
        GroupGrid::new(self.n_s, self.n_r, self.unit_scale_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 || self.depth == 0 || self.n_s == 0 || self.n_r == 0 {
            return Err(Error::InvalidArgument("batch >= 2, depth >= 1 and non-empty grid required".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.difficulty) || !(self.unit_scale_factor > 0.0) {
            return Err(Error::InvalidArgument("lr and unit_scale_factor must be positive, difficulty in [0, 1]".into()));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.max_rotation) {
            return Err(Error::InvalidArgument("max_rotation_deg must lie in [0, 180]".into()));
        }
        Ok(())
    }
}

/// Loss of one step, recorded on `tape`. Returns the loss node and the number
/// of triplet rows kept after mining.
pub fn pair_loss(model: &GiftModel, tape: &mut Tape, vars: &ModelVars, pair: &TrainingPair) -> Result<(Var, usize)> {
    let (pa, pb) = (pair.points_a(), pair.points_b());
    let (fa, _) = model.extract_on_tape(tape, &pair.image_a, &pa, vars)?;
    let (da, _) = model.embed_on_tape(tape, fa, vars)?;
    let (fb, _) = model.extract_on_tape(tape, &pair.image_b, &pb, vars)?;
    let (db, _) = model.embed_on_tape(tape, fb, vars)?;
    let dim = tape.value(da).shape()[1];
    let (va, vb) = (tape.value(da).data(), tape.value(db).data());
    let candidates: Vec<(&[f64], (f64, f64))> = pb.iter().enumerate().map(|(j, &p)| (&vb[j * dim..(j + 1) * dim], p)).collect();
    let mut keep = Vec::new();
    let mut negatives = Vec::new();
    for (i, &truth) in pb.iter().enumerate() {
        if let Some(j) = mine_hard_negative(&va[i * dim..(i + 1) * dim], &candidates, truth, EXCLUSION_RADIUS) {
            keep.push(i);
            negatives.push(j);
        }
    }
    let a = tape.gather_rows(da, &keep)?;
    let p = tape.gather_rows(db, &keep)?;
    let n = tape.gather_rows(db, &negatives)?;
    Ok((tape.triplet_loss(a, p, n, TRIPLET_MARGIN)?, keep.len()))
}

/// Result of [`train`]: the trained model and the per-step loss curve.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GiftModel,
    pub losses: Vec<f64>,
}

/// Trains from a fresh initialization. Step `t` draws one corpus image and
/// one pair from a seed derived from `config.seed` and `t`, so runs are
/// reproducible bit-for-bit.
pub fn train(corpus: &[Tensor], config: &TrainConfig) -> Result<TrainOutcome> {
    let model = GiftModel::with_pooling(config.seed, config.depth, config.grid(), config.pooling)?;
    train_from(model, corpus, config, |_, _| {})
}

/// Continues training `model`; `progress(step, loss)` is called after every
/// step.
pub fn train_from(
    mut model: GiftModel,
    corpus: &[Tensor],
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    config.validate()?;
    let mut adam = Adam::new(config.lr);
    let mut schedule = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let which = schedule.gen_range(0..corpus.len());
        let pair_seed: u64 = schedule.gen();
        let pair = make_training_pair_with(&corpus[which], pair_seed, config.difficulty, config.max_rotation, config.batch)?;
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        let (loss, rows) = pair_loss(&model, &mut tape, &vars, &pair)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                dump: dump_batch(which, pair_seed, rows, &pair),
            });
        }
        tape.backward(loss)?;
        let all = vars.all();
        let zeros: Vec<Vec<f64>> = all.iter().map(|&v| vec![0.0; tape.value(v).len()]).collect();
        let grads: Vec<&[f64]> = all.iter().zip(&zeros).map(|(&v, z)| tape.grad(v).unwrap_or(z)).collect();
        adam.step(&mut model.tensors_mut(), &grads);
        losses.push(value);
        progress(step, value);
    }
    Ok(TrainOutcome { model, losses })
}

fn dump_batch(image: usize, seed: u64, rows: usize, pair: &TrainingPair) -> String {
    let mut s = format!("corpus image {image}, pair seed {seed}, {rows} triplet rows\nhomography {:?}\n", pair.homography.to_row_major());
    for (a, b) in &pair.correspondences {
        let _ = writeln!(s, "{:.9} {:.9} -> {:.9} {:.9}", a.0, a.1, b.0, b.1);
    }
    s
}

/// Writes the `step,loss` curve.
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", fmt_sig(*l));
    }
    let path: PathBuf = path.as_ref().into();
    std::fs::write(&path, s).map_err(|e| Error::io(path, e))
}

/// Nine significant digits in scientific notation.
pub fn fmt_sig(v: f64) -> String {
    format!("{v:.8e}")
}
