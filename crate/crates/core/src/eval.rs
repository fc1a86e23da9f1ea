//! Nearest-neighbour matching, PCK, extreme scale/rotation pairs and
//! robustness sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{snapped_sin_cos, warp_linear, Homography};
use crate::pipeline::{Descriptor, GiftModel};
use crate::tensor::Tensor;
use crate::trainer::fmt_sig;

pub const PCK_THRESHOLD: f64 = 5.0;
/// Smallest side of an extreme-pair output image.
pub const MIN_EXTREME_SIDE: usize = 32;
pub const ES_UP: (f64, f64) = (2.83, 4.0);
pub const ES_DOWN: (f64, f64) = (0.25, 0.354);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub query: usize,
    pub reference: usize,
    pub reference_point: (f64, f64),
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    /// One entry per query, in query order.
    pub matches: Vec<Match>,
    pub query_points: Vec<(f64, f64)>,
    /// True location of each query in the reference image.
    pub ground_truth: Option<Vec<(f64, f64)>>,
    pub threshold: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// For each query the reference with the smallest L2 distance, lowest index
/// on ties.
pub fn match_nn(query: &[Descriptor], reference: &[Descriptor]) -> Result<MatchSet> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("match_nn needs non-empty query and reference sets".into()));
    }
    let dim = query[0].values.len();
    if let Some(d) = query.iter().chain(reference).find(|d| d.values.len() != dim) {
        return Err(Error::shape("match_nn", format!("descriptor dimensions {dim} and {}", d.values.len())));
    }
    let matches = query
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut best = (0, f64::INFINITY);
            for (ri, r) in reference.iter().enumerate() {
                let d = dist(&q.values, &r.values);
                if d < best.1 {
                    best = (ri, d);
                }
            }
            Match {
                query: qi,
                reference: best.0,
                reference_point: reference[best.0].point,
                distance: best.1,
            }
        })
        .collect();
    Ok(MatchSet {
        matches,
        query_points: query.iter().map(|d| d.point).collect(),
        ground_truth: None,
        threshold: PCK_THRESHOLD,
    })
}

impl MatchSet {
    pub fn with_ground_truth(mut self, truth: Vec<(f64, f64)>) -> Result<Self> {
        if truth.len() != self.matches.len() {
            return Err(Error::shape("MatchSet", format!("{} ground truth points for {} queries", truth.len(), self.matches.len())));
        }
        self.ground_truth = Some(truth);
        Ok(self)
    }

    pub fn correct(&self) -> Option<Vec<bool>> {
        let gt = self.ground_truth.as_ref()?;
        Some(
            self.matches
                .iter()
                .zip(gt)
                .map(|(m, t)| {
                    let (x, y) = m.reference_point;
                    ((x - t.0).powi(2) + (y - t.1).powi(2)).sqrt() <= self.threshold
                })
                .collect(),
        )
    }

    /// `qx,qy,rx,ry,distance,correct` rows; `correct` is empty without
    /// ground truth.
    pub fn to_csv(&self) -> String {
        let correct = self.correct();
        let mut s = String::from("qx,qy,rx,ry,distance,correct\n");
        for (i, m) in self.matches.iter().enumerate() {
            let (q, r) = (self.query_points[m.query], m.reference_point);
            let c = correct.as_ref().map_or(String::new(), |c| u8::from(c[i]).to_string());
            let _ = writeln!(s, "{},{},{},{},{},{c}", fmt_sig(q.0), fmt_sig(q.1), fmt_sig(r.0), fmt_sig(r.1), fmt_sig(m.distance));
        }
        s
    }
}

/// Fraction of matches within the threshold of the ground truth.
pub fn pck(matches: &MatchSet) -> Result<f64> {
    if matches.matches.is_empty() {
        return Err(Error::InvalidArgument("pck of an empty query set".into()));
    }
    let correct = matches
        .correct()
        .ok_or_else(|| Error::InvalidArgument("pck needs ground truth for every query".into()))?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// `n x n` points at the centres of a uniform grid of cells, row-major.
pub fn grid_keypoints(w: usize, h: usize, n: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            pts.push(((i as f64 + 0.5) * w as f64 / n as f64 - 0.5, (j as f64 + 0.5) * h as f64 / n as f64 - 0.5));
        }
    }
    pts
}

pub fn parse_keypoints_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.eq_ignore_ascii_case("x,y")) {
            continue;
        }
        let bad = || Error::InvalidArgument(format!("keypoints line {}: expected x,y floats, got {line:?}", n + 1));
        let (x, y) = line.split_once(',').ok_or_else(bad)?;
        let x: f64 = x.trim().parse().map_err(|_| bad())?;
        let y: f64 = y.trim().parse().map_err(|_| bad())?;
        if !x.is_finite() || !y.is_finite() {
            return Err(bad());
        }
        pts.push((x, y));
    }
    Ok(pts)
}

pub fn keypoints_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("x,y\n");
    for p in points {
        let _ = writeln!(s, "{},{}", fmt_sig(p.0), fmt_sig(p.1));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtremeMode {
    Scale,
    Rotation,
}

/// An image, its transformed copy and the exact map between them.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub image_a: Tensor,
    pub image_b: Tensor,
    /// Maps image A pixel coordinates to image B.
    pub homography: Homography,
}

/// Rotates (radians, clockwise in image coordinates) and scales `image`
/// about its centre onto the bounding-box canvas.
pub fn similarity_pair(image: &Tensor, angle: f64, scale: f64) -> Result<EvalPair> {
    let (s, c) = snapped_sin_cos(angle);
    let linear = [[scale * c, -scale * s], [scale * s, scale * c]];
    let (image_b, map) = warp_linear(image, linear, MIN_EXTREME_SIDE)?;
    Ok(EvalPair {
        image_a: image.clone(),
        image_b,
        homography: map.to_homography(),
    })
}

/// Draws an ER angle uniform in `[-pi, pi]`, or an ES factor from
/// `[2.83, 4] u [0.25, 0.354]`: the interval is picked in proportion to its
/// log-length, the factor log-uniformly inside it.
pub fn extreme_magnitude(mode: ExtremeMode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        ExtremeMode::Rotation => rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI),
        ExtremeMode::Scale => {
            let len = |(a, b): (f64, f64)| (b / a).ln();
            let p_up = len(ES_UP) / (len(ES_UP) + len(ES_DOWN));
            let (a, b) = if rng.gen::<f64>() < p_up { ES_UP } else { ES_DOWN };
            (a.ln() + rng.gen::<f64>() * (b / a).ln()).exp().clamp(a, b)
        }
    }
}

pub fn make_extreme_pair(image: &Tensor, mode: ExtremeMode, seed: u64) -> Result<EvalPair> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if w < 64 || h < 64 {
        return Err(Error::ImageTooSmall {
            w,
            h,
            min_w: 64,
            min_h: 64,
        });
    }
    let m = extreme_magnitude(mode, seed);
    match mode {
        ExtremeMode::Rotation => similarity_pair(image, m, 1.0),
        ExtremeMode::Scale => similarity_pair(image, 0.0, m),
    }
}

/// Query points of `points` whose true location lies inside image B, and
/// those locations.
pub fn projected(pair: &EvalPair, points: &[(f64, f64)]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let (h, w) = (pair.image_b.shape()[1] as f64, pair.image_b.shape()[2] as f64);
    points
        .iter()
        .map(|&p| (p, pair.homography.apply(p)))
        .filter(|(_, q)| q.0 >= 0.0 && q.1 >= 0.0 && q.0 <= w - 1.0 && q.1 <= h - 1.0)
        .unzip()
}

/// Describes the grid points of A and their true locations in B, matches
/// them by nearest neighbour and scores the result.
pub fn evaluate_pair(model: &GiftModel, pair: &EvalPair, grid_n: usize) -> Result<(MatchSet, f64)> {
    let (h, w) = (pair.image_a.shape()[1], pair.image_a.shape()[2]);
    let (qa, qb) = projected(pair, &grid_keypoints(w, h, grid_n));
    if qa.is_empty() {
        return Err(Error::InvalidArgument("no query point projects into image B".into()));
    }
    let da = model.describe(&pair.image_a, &qa)?;
    let db = model.describe(&pair.image_b, &qb)?;
    let set = match_nn(&da, &db)?.with_ground_truth(qb)?;
    let score = pck(&set)?;
    Ok((set, score))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    Rotation,
    Scale,
}

/// Magnitudes of a sweep: degrees in `[0, 180]` for rotation, factors in
/// `[1, 4]` (log-spaced) for scale. One step gives the zero magnitude.
pub fn sweep_magnitudes(axis: SweepAxis, steps: usize) -> Vec<f64> {
    let t = |k: usize| if steps <= 1 { 0.0 } else { k as f64 / (steps - 1) as f64 };
    (0..steps)
        .map(|k| match axis {
            SweepAxis::Rotation => 180.0 * t(k),
            SweepAxis::Scale => 4f64.powf(t(k)),
        })
        .collect()
}

/// Mean PCK over `images` at each magnitude.
pub fn sweep(model: &GiftModel, images: &[Tensor], axis: SweepAxis, steps: usize, grid_n: usize) -> Result<Vec<(f64, f64)>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one image".into()));
    }
    sweep_magnitudes(axis, steps)
        .into_iter()
        .map(|m| {
            let mut total = 0.0;
            for img in images {
                let pair = match axis {
                    SweepAxis::Rotation => similarity_pair(img, m.to_radians(), 1.0)?,
                    SweepAxis::Scale => similarity_pair(img, 0.0, m)?,
                };
                total += evaluate_pair(model, &pair, grid_n)?.1;
            }
            Ok((m, total / images.len() as f64))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("magnitude,pck\n");
    for (m, p) in rows {
        let _ = writeln!(s, "{},{}", fmt_sig(*m), fmt_sig(*p));
    }
    s
}

/// Line plot of PCK (y in [0, 1]) against magnitude on a white canvas.
pub fn render_sweep_plot(rows: &[(f64, f64)], w: usize, h: usize) -> Tensor {
    let mut img = Tensor::full([3, h, w], 1.0);
    let (x0, x1) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.0), b.max(r.0)));
    let pad = 8.0;
    let to_px = |m: f64, p: f64| {
        let tx = if x1 > x0 { (m - x0) / (x1 - x0) } else { 0.5 };
        (pad + tx * (w as f64 - 1.0 - 2.0 * pad), h as f64 - 1.0 - pad - p.clamp(0.0, 1.0) * (h as f64 - 1.0 - 2.0 * pad))
    };
    let mut put = |x: f64, y: f64, rgb: [f64; 3]| {
        let (xi, yi) = (x.round() as isize, y.round() as isize);
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            for (c, v) in rgb.iter().enumerate() {
                img.set(&[c, yi as usize, xi as usize], *v);
            }
        }
    };
    let grey = [0.6; 3];
    for (a, b) in [((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0))] {
        let to = |t: (f64, f64)| (pad + t.0 * (w as f64 - 1.0 - 2.0 * pad), h as f64 - 1.0 - pad - t.1 * (h as f64 - 1.0 - 2.0 * pad));
        let (pa, pb) = (to(a), to(b));
        for k in 0..=w.max(h) {
            let t = k as f64 / w.max(h) as f64;
            put(pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1), grey);
        }
    }
    for pair in rows.windows(2) {
        let (a, b) = (to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1));
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for k in 0..=n {
            let t = k as f64 / n as f64;
            put(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), [0.1, 0.2, 0.8]);
        }
    }
    for r in rows {
        let (x, y) = to_px(r.0, r.1);
        for dx in -1..=1 {
            for dy in -1..=1 {
                put(x + dx as f64, y + dy as f64, [0.8, 0.1, 0.1]);
            }
        }
    }
    img
}

/// Inputs of one evaluation pair, as stored in JSON manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub image_a: String,
    pub image_b: String,
    /// Row-major, maps A to B.
    pub homography: [f64; 9],
    pub keypoints: Vec<(f64, f64)>,
    pub source: String,
}

impl EvalManifest {
    pub fn validate(&self, width_a: usize, height_a: usize) -> Result<Homography> {
        let h = Homography::from_row_major(&self.homography)?;
        h.inverse()?;
        if let Some(p) = self
            .keypoints
            .iter()
            .find(|p| !(p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= width_a as f64 - 1.0 && p.1 <= height_a as f64 - 1.0))
        {
            return Err(Error::PointOutOfBounds {
                x: p.0,
                y: p.1,
                w: width_a,
                h: height_a,
            });
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub name: String,
    pub pck: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub pairs: usize,
    pub mean_pck: f64,
    pub per_pair: Vec<PairScore>,
}

impl PckReport {
    pub fn new(per_pair: Vec<PairScore>) -> Self {
        let mean = if per_pair.is_empty() {
            0.0
        } else {
            per_pair.iter().map(|p| p.pck).sum::<f64>() / per_pair.len() as f64
        };
        PckReport {
            pairs: per_pair.len(),
            mean_pck: mean,
            per_pair,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(values: Vec<f64>, point: (f64, f64)) -> Descriptor {
        Descriptor {
            values,
            point,
            degenerate: false,
        }
    }

    fn random_set(n: usize, dim: usize, seed: u64) -> Vec<Descriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| desc((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), (i as f64, 2.0 * i as f64)))
            .collect()
    }

    #[test]
    fn self_match_and_single_reference() {
        let q = random_set(10, 8, 1);
        let m = match_nn(&q, &q).unwrap();
        assert!(m.matches.iter().all(|x| x.reference == x.query && x.distance == 0.0));
        let one = random_set(1, 8, 2);
        assert!(match_nn(&q, &one).unwrap().matches.iter().all(|x| x.reference == 0));
        assert!(match_nn(&q, &random_set(3, 7, 3)).is_err());
        assert!(match_nn(&[], &q).is_err());
    }

    #[test]
    fn nn_matches_exhaustive_oracle() {
        let (q, r) = (random_set(50, 128, 4), random_set(80, 128, 5));
        let m = match_nn(&q, &r).unwrap();
        for (qi, a) in q.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (ri, b) in r.iter().enumerate() {
                let mut s = 0.0;
                for k in 0..128 {
                    s += (a.values[k] - b.values[k]).powi(2);
                }
                if s.sqrt() < bd {
                    bd = s.sqrt();
                    best = ri;
                }
            }
            assert_eq!(m.matches[qi].reference, best);
            assert!((m.matches[qi].distance - bd).abs() <= 1e-12);
        }
    }

    #[test]
    fn ties_pick_lowest_index() {
        let r = vec![desc(vec![1.0, 0.0], (0.0, 0.0)), desc(vec![-1.0, 0.0], (1.0, 0.0)), desc(vec![1.0, 0.0], (2.0, 0.0))];
        let m = match_nn(&[desc(vec![0.0, 1.0], (0.0, 0.0))], &r).unwrap();
        assert_eq!(m.matches[0].reference, 0);
    }

    #[test]
    fn pck_examples() {
        let refs: Vec<Descriptor> = (0..4).map(|i| desc(vec![i as f64], (10.0 * i as f64, 0.0))).collect();
        let m = match_nn(&refs, &refs).unwrap();
        let exact = m.clone().with_ground_truth(refs.iter().map(|d| d.point).collect()).unwrap();
        assert_eq!(pck(&exact).unwrap(), 1.0);
        let far = m.clone().with_ground_truth(refs.iter().map(|d| (d.point.0, 100.0)).collect()).unwrap();
        assert_eq!(pck(&far).unwrap(), 0.0);
        let gt = vec![(0.0, 4.9), (10.0, 4.9), (20.0, 5.1), (30.0, 5.1)];
        assert_eq!(pck(&m.clone().with_ground_truth(gt).unwrap()).unwrap(), 0.5);
        assert!(pck(&m).is_err());
    }

    #[test]
    fn keypoint_grid_and_csv() {
        let g = grid_keypoints(480, 360, 8);
        assert_eq!(g.len(), 64);
        assert_eq!(g[0], (29.5, 22.0));
        assert_eq!(g[63], (449.5, 337.0));
        let back = parse_keypoints_csv(&keypoints_csv(&g)).unwrap();
        for (a, b) in back.iter().zip(&g) {
            assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
        }
        assert!(parse_keypoints_csv("x,y\n1,2\n3;4\n").is_err());
        assert!(parse_keypoints_csv("1,nan\n").is_err());
    }

    #[test]
    fn extreme_scale_draws_stay_in_range() {
        let mut up = 0;
        for s in 0..10_000 {
            let f = extreme_magnitude(ExtremeMode::Scale, s);
            assert!((ES_UP.0..=ES_UP.1).contains(&f) || (ES_DOWN.0..=ES_DOWN.1).contains(&f), "{f}");
            up += usize::from(f > 1.0);
        }
        // Log-lengths 0.346 and 0.347 make the branches nearly equally likely.
        assert!((4700..5300).contains(&up), "{up}");
        for s in 0..1000 {
            let a = extreme_magnitude(ExtremeMode::Rotation, s);
            assert!(a.abs() <= std::f64::consts::PI);
        }
    }

    #[test]
    fn zero_angle_is_identity_and_pi_reverses_indices() {
        let img = crate::textures::texture(64, 64, 3);
        let id = similarity_pair(&img, 0.0, 1.0).unwrap();
        assert_eq!(id.image_b, img);
        assert_eq!(id.homography, Homography::IDENTITY);
        let flip = similarity_pair(&img, std::f64::consts::PI, 1.0).unwrap();
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    assert_eq!(flip.image_b.at(&[c, 63 - y, 63 - x]), img.at(&[c, y, x]));
                }
            }
        }
        assert_eq!(flip.homography.apply((10.0, 3.0)), (53.0, 60.0));
    }

    #[test]
    fn extreme_pairs_round_trip_and_reject_small() {
        let small = crate::textures::texture(64, 64, 4);
        let big = crate::textures::texture(128, 128, 4);
        for seed in 0..12 {
            for mode in [ExtremeMode::Rotation, ExtremeMode::Scale] {
                let shrinks = mode == ExtremeMode::Scale && extreme_magnitude(mode, seed) < 1.0;
                match make_extreme_pair(&small, mode, seed) {
                    Err(Error::DegenerateScale { .. }) => assert!(shrinks),
                    other => assert!(!shrinks && other.is_ok()),
                }
                let pair = make_extreme_pair(&big, mode, seed).unwrap();
                let inv = pair.homography.inverse().unwrap();
                for p in grid_keypoints(128, 128, 5) {
                    let q = inv.apply(pair.homography.apply(p));
                    assert!((q.0 - p.0).abs() <= 1e-9 && (q.1 - p.1).abs() <= 1e-9);
                }
            }
        }
        assert!(make_extreme_pair(&Tensor::zeros([3, 40, 80]), ExtremeMode::Rotation, 0).is_err());
    }

    #[test]
    fn sweep_rows_are_ordered() {
        assert_eq!(sweep_magnitudes(SweepAxis::Rotation, 1), vec![0.0]);
        assert_eq!(sweep_magnitudes(SweepAxis::Rotation, 5), vec![0.0, 45.0, 90.0, 135.0, 180.0]);
        let s = sweep_magnitudes(SweepAxis::Scale, 3);
        assert_eq!(s, vec![1.0, 2.0, 4.0]);
        let csv = sweep_csv(&[(0.0, 1.0), (45.0, 0.5)]);
        assert_eq!(csv.lines().count(), 3);
        let plot = render_sweep_plot(&[(0.0, 1.0), (45.0, 0.5)], 64, 48);
        assert_eq!(plot.shape(), &[3, 48, 64]);
        assert!(plot.data().iter().any(|&v| v < 1.0));
    }

    #[test]
    fn manifest_validation() {
        let m = EvalManifest {
            image_a: "a.png".into(),
            image_b: "b.png".into(),
            homography: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            keypoints: vec![(1.0, 1.0)],
            source: "gift".into(),
        };
        assert!(m.validate(10, 10).is_ok());
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<EvalManifest>(&json).unwrap(), m);
        let out = EvalManifest { keypoints: vec![(11.0, 1.0)], ..m.clone() };
        assert!(out.validate(10, 10).is_err());
        let singular = EvalManifest { homography: [0.0; 9], ..m };
        assert!(singular.validate(10, 10).is_err());
    }
}
