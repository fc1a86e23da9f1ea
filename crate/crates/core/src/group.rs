//! The sampled scale/rotation group, its action on images and points, and
//! planar homographies.
//!
//! Coordinates are pixel centres: `x` grows to the right, `y` grows downward,
//! pixel `(col, row)` sits at `(col, row)`. With `y` pointing down a positive
//! angle in the usual rotation matrix turns the image clockwise on screen.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::SampleTaps;
use crate::tensor::Tensor;

/// Smallest side a group warp may produce.
pub const MIN_WARP_SIDE: usize = 4;

/// `s^scale_exp * r^rot_exp`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupElement {
    pub scale_exp: i32,
    pub rot_exp: i32,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement {
        scale_exp: 0,
        rot_exp: 0,
    };

    pub const fn new(scale_exp: i32, rot_exp: i32) -> Self {
        GroupElement { scale_exp, rot_exp }
    }

    /// The group is abelian, so composition is exponent addition.
    pub fn compose(self, other: GroupElement) -> GroupElement {
        GroupElement::new(self.scale_exp + other.scale_exp, self.rot_exp + other.rot_exp)
    }

    pub fn inverse(self) -> GroupElement {
        GroupElement::new(-self.scale_exp, -self.rot_exp)
    }

    /// Chebyshev size of the exponent pair.
    pub fn radius(self) -> i32 {
        self.scale_exp.abs().max(self.rot_exp.abs())
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s^{} r^{}", self.scale_exp, self.rot_exp)
    }
}

/// The stencil `H` of the group convolution: every element with both
/// exponents in `{-1, 0, 1}`, scale-major. Index `k` corresponds to stencil
/// cell `(k / 3, k % 3)`.
pub fn neighborhood_h() -> Vec<GroupElement> {
    (-1..=1)
        .flat_map(|i| (-1..=1).map(move |j| GroupElement::new(i, j)))
        .collect()
}

/// Finite grid of sampled group elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupGrid {
    pub scale_exps: Vec<i32>,
    pub rot_exps: Vec<i32>,
    /// Downsampling factor of the unit scale step `s`.
    pub unit_scale_factor: f64,
    /// Clockwise angle of the unit rotation `r`.
    pub unit_rot_radians: f64,
}

impl Default for GroupGrid {
    fn default() -> Self {
        GroupGrid::new(5, 5, 2f64.powf(0.25))
    }
}

impl GroupGrid {
    /// Scales `s^0 .. s^(n_s-1)` and rotations centred on the identity
    /// (`r^-2 .. r^2` for `n_r = 5`).
    pub fn new(n_s: usize, n_r: usize, unit_scale_factor: f64) -> Self {
        let lo = -((n_r as i32 - 1) / 2);
        GroupGrid {
            scale_exps: (0..n_s as i32).collect(),
            rot_exps: (lo..lo + n_r as i32).collect(),
            unit_scale_factor,
            unit_rot_radians: PI / 4.0,
        }
    }

    pub fn from_exponents(scale_exps: Vec<i32>, rot_exps: Vec<i32>) -> Self {
        GroupGrid {
            scale_exps,
            rot_exps,
            ..GroupGrid::default()
        }
    }

    pub fn identity_only() -> Self {
        Self::from_exponents(vec![0], vec![0])
    }

    pub fn n_s(&self) -> usize {
        self.scale_exps.len()
    }

    pub fn n_r(&self) -> usize {
        self.rot_exps.len()
    }

    pub fn len(&self) -> usize {
        self.n_s() * self.n_r()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element of cell `(si, ri)`.
    pub fn element(&self, si: usize, ri: usize) -> GroupElement {
        GroupElement::new(self.scale_exps[si], self.rot_exps[ri])
    }

    /// Elements in row-major (scale-major) order.
    pub fn elements(&self) -> Vec<GroupElement> {
        (0..self.n_s())
            .flat_map(|si| (0..self.n_r()).map(move |ri| (si, ri)))
            .map(|(si, ri)| self.element(si, ri))
            .collect()
    }

    /// Cell of `g`, if it is sampled.
    pub fn cell_of(&self, g: GroupElement) -> Option<(usize, usize)> {
        let si = self.scale_exps.iter().position(|&e| e == g.scale_exp)?;
        let ri = self.rot_exps.iter().position(|&e| e == g.rot_exp)?;
        Some((si, ri))
    }

    pub fn index_of(&self, g: GroupElement) -> Option<usize> {
        self.cell_of(g).map(|(si, ri)| si * self.n_r() + ri)
    }

    /// Largest downsampling factor over the sampled scales.
    pub fn max_downsample(&self) -> f64 {
        self.scale_exps
            .iter()
            .map(|&i| self.unit_scale_factor.powi(i))
            .fold(1.0, f64::max)
    }

    /// The 2x2 linear part of `T_g`: isotropic scale `factor^-i` times a
    /// clockwise rotation by `j * unit_rot`.
    pub fn linear(&self, g: GroupElement) -> [[f64; 2]; 2] {
        let scale = self.unit_scale_factor.powi(-g.scale_exp);
        let (sin, cos) = snapped_sin_cos(g.rot_exp as f64 * self.unit_rot_radians);
        [[scale * cos, -scale * sin], [scale * sin, scale * cos]]
    }
}

/// `sin`/`cos` with values within 1e-12 of -1, 0 or 1 snapped, so quarter
/// turns permute the pixel lattice exactly.
pub fn snapped_sin_cos(angle: f64) -> (f64, f64) {
    let snap = |v: f64| {
        for t in [-1.0, 0.0, 1.0] {
            if (v - t).abs() < 1e-12 {
                return t;
            }
        }
        v
    };
    let (s, c) = angle.sin_cos();
    (snap(s), snap(c))
}

/// Affine map `p -> M[:, :2] p + M[:, 2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn from_linear(l: [[f64; 2]; 2], offset: (f64, f64)) -> Self {
        Affine2 {
            m: [[l[0][0], l[0][1], offset.0], [l[1][0], l[1][1], offset.1]],
        }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * p.0 + m[0][1] * p.1 + m[0][2],
            m[1][0] * p.0 + m[1][1] * p.1 + m[1][2],
        )
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn after(&self, inner: &Affine2) -> Affine2 {
        let (a, b) = (&self.m, &inner.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        Affine2 { m }
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::SingularHomography(det));
        }
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let t = (
            -(inv[0][0] * m[0][2] + inv[0][1] * m[1][2]),
            -(inv[1][0] * m[0][2] + inv[1][1] * m[1][2]),
        );
        Ok(Affine2::from_linear(inv, t))
    }

    pub fn to_homography(&self) -> Homography {
        let m = &self.m;
        Homography {
            m: [m[0], m[1], [0.0, 0.0, 1.0]],
        }
    }
}

/// Applies the exact affine `point_map` to `p`.
pub fn map_point(point_map: &Affine2, p: (f64, f64)) -> (f64, f64) {
    point_map.apply(p)
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        s => Err(Error::shape("warp", format!("image must be a non-empty [C,H,W], got {s:?}"))),
    }
}

/// Resamples `image` through the inverse of `forward` (destination pixel
/// `q` takes the source value at `forward^-1(q)`), zero outside the source.
fn resample(image: &Tensor, out_w: usize, out_h: usize, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inverse(x as f64, y as f64);
            if let Some(t) = SampleTaps::locate(sx, sy, w, h) {
                for ch in 0..c {
                    out[(ch * out_h + y) * out_w + x] = t.sample(&src[ch * h * w..(ch + 1) * h * w], w);
                }
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("resample shape")
}

/// Warped canvas sides are congruent to the source sides modulo this, so
/// the image centre keeps its phase on a lattice of that period (twice the
/// backbone downsampling).
pub const CANVAS_ALIGN: usize = 4;

/// Warps about the image centre by a linear map. The canvas holds the
/// transformed pixel-centre bounding box, grown by up to
/// `CANVAS_ALIGN - 1` pixels so its sides match the source's modulo
/// `CANVAS_ALIGN`. Returns the warped image and the exact map from source to
/// warped pixel coordinates.
pub fn warp_linear(image: &Tensor, linear: [[f64; 2]; 2], min_side: usize) -> Result<(Tensor, Affine2)> {
    let (_, h, w) = image_dims(image)?;
    let (wf, hf) = (w as f64, h as f64);
    let span = |row: [f64; 2]| (row[0].abs() * (wf - 1.0) + row[1].abs() * (hf - 1.0) - 1e-9).ceil().max(0.0) as usize + 1;
    let (span_w, span_h) = (span(linear[0]), span(linear[1]));
    if span_w < min_side || span_h < min_side {
        return Err(Error::DegenerateScale {
            element: format!("{linear:?}"),
            src_w: w,
            src_h: h,
            dst_w: span_w,
            dst_h: span_h,
            min: min_side,
        });
    }
    let align = |n: usize, src: usize| n + (src + CANVAS_ALIGN - n % CANVAS_ALIGN) % CANVAS_ALIGN;
    let (out_w, out_h) = (align(span_w, w), align(span_h, h));
    let src_c = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
    let dst_c = ((out_w as f64 - 1.0) / 2.0, (out_h as f64 - 1.0) / 2.0);
    let centred = Affine2::from_linear(linear, (0.0, 0.0));
    let moved = centred.apply(src_c);
    let point_map = Affine2::from_linear(linear, (dst_c.0 - moved.0, dst_c.1 - moved.1));
    let inverse = point_map.inverse()?;
    let warped = if point_map == Affine2::IDENTITY && (out_w, out_h) == (w, h) {
        image.clone()
    } else {
        resample(image, out_w, out_h, |x, y| inverse.apply((x, y)))
    };
    Ok((warped, point_map))
}

/// The part of an image that carries content: the pixel rectangle
/// `[0, src_w - 1] x [0, src_h - 1]` of an original image, placed by
/// `to_image` (original -> image pixel coordinates).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContentRegion {
    pub to_image: Affine2,
    pub src_w: usize,
    pub src_h: usize,
}

impl ContentRegion {
    /// A `w x h` image that is all content.
    pub fn full(w: usize, h: usize) -> Self {
        ContentRegion {
            to_image: Affine2::IDENTITY,
            src_w: w,
            src_h: h,
        }
    }

    /// The region after its image is warped by `point_map`.
    pub fn warped(&self, point_map: &Affine2) -> Self {
        ContentRegion {
            to_image: point_map.after(&self.to_image),
            ..*self
        }
    }

    /// Row-major `out_h * out_w` flags for a lattice whose cell `(u, v)`
    /// sits at image coordinates `(u * step + offset, v * step + offset)`,
    /// marking cells at least `depth` image pixels inside the region.
    /// Distances are measured in the original image and scaled by the
    /// map's linear scale.
    pub fn mask(&self, out_w: usize, out_h: usize, step: f64, offset: f64, depth: f64) -> Result<Vec<bool>> {
        let inverse = self.to_image.inverse()?;
        let m = &self.to_image.m;
        let scale = (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs().sqrt();
        let (mx, my) = (self.src_w as f64 - 1.0, self.src_h as f64 - 1.0);
        let tol = 1e-9;
        Ok((0..out_h * out_w)
            .map(|i| {
                let q = ((i % out_w) as f64 * step + offset, (i / out_w) as f64 * step + offset);
                let (x, y) = inverse.apply(q);
                let inside = x.min(mx - x).min(y).min(my - y);
                inside * scale >= depth - tol
            })
            .collect())
    }
}

/// `T_g ∘ I`: warp by a sampled group element.
pub fn warp_image(image: &Tensor, g: GroupElement, grid: &GroupGrid) -> Result<(Tensor, Affine2)> {
    warp_linear(image, grid.linear(g), MIN_WARP_SIDE).map_err(|e| match e {
        Error::DegenerateScale {
            src_w,
            src_h,
            dst_w,
            dst_h,
            min,
            ..
        } => Error::DegenerateScale {
            element: g.to_string(),
            src_w,
            src_h,
            dst_w,
            dst_h,
            min,
        },
        other => other,
    })
}

/// 3x3 projective map normalized so `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if s == 0.0 || !s.is_finite() {
            return Err(Error::SingularHomography(0.0));
        }
        let mut n = m;
        n.iter_mut().flatten().for_each(|v| *v /= s);
        let h = Homography { m: n };
        let det = h.det();
        if !(det.abs() > 1e-10) {
            return Err(Error::SingularHomography(det));
        }
        Ok(h)
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::InvalidArgument(format!("homography needs 9 values, got {}", v.len())));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let m = &self.m;
        let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
        (
            (m[0][0] * p.0 + m[0][1] * p.1 + m[0][2]) / w,
            (m[1][0] * p.0 + m[1][1] * p.1 + m[1][2]) / w,
        )
    }

    pub fn mul(&self, other: &Homography) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        out
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= 1e-10 {
            return Err(Error::SingularHomography(det));
        }
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = adj;
        inv.iter_mut().flatten().for_each(|v| *v /= det);
        Homography::new(inv)
    }

    /// Warps `image` onto an `out_w x out_h` canvas so that source pixel `p`
    /// lands on `self.apply(p)`.
    pub fn warp(&self, image: &Tensor, out_w: usize, out_h: usize) -> Result<Tensor> {
        image_dims(image)?;
        let inv = self.inverse()?;
        Ok(resample(image, out_w, out_h, |x, y| inv.apply((x, y))))
    }
}

fn translation(tx: f64, ty: f64) -> Homography {
    Homography {
        m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
    }
}

/// Corner box a random homography must keep the canvas corners inside: the
/// canvas scaled 2x about its centre.
pub fn corner_bounds(w: usize, h: usize) -> ([f64; 2], [f64; 2]) {
    let (w, h) = (w as f64, h as f64);
    ([-0.5 * w, 1.5 * w], [-0.5 * h, 1.5 * h])
}

/// Largest rotation of a difficulty-1 homography.
pub const DEFAULT_MAX_ROTATION: f64 = PI / 6.0;

/// Random "reasonable" homography on a `w x h` canvas, deterministic in
/// `seed`.
///
/// Built about the canvas centre from a perspective term, a rotation of at
/// most `difficulty * pi/6`, a scale in `[1/(1+difficulty), 1+difficulty]`
/// and a translation of at most `difficulty * 0.2` of the canvas. Draws that
/// push a canvas corner outside [`corner_bounds`] are redrawn.
pub fn random_homography(seed: u64, canvas: (usize, usize), difficulty: f64) -> Result<Homography> {
    random_homography_in(seed, canvas, difficulty, DEFAULT_MAX_ROTATION)
}

/// [`random_homography`] with rotations of at most `difficulty * max_rotation`.
pub fn random_homography_in(seed: u64, canvas: (usize, usize), difficulty: f64, max_rotation: f64) -> Result<Homography> {
    let (w, h) = canvas;
    if w < 32 || h < 32 {
        return Err(Error::ImageTooSmall {
            w,
            h,
            min_w: 32,
            min_h: 32,
        });
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::InvalidArgument(format!("difficulty {difficulty} outside [0, 1]")));
    }
    if !(0.0..=PI).contains(&max_rotation) {
        return Err(Error::InvalidArgument(format!("max rotation {max_rotation} outside [0, pi]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (w as f64, h as f64);
    let (cx, cy) = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
    let corners = [(0.0, 0.0), (wf, 0.0), (0.0, hf), (wf, hf)];
    let (bx, by) = corner_bounds(w, h);
    let mut d = difficulty;
    loop {
        for _ in 0..64 {
            let mut sym = || rng.gen::<f64>() * 2.0 - 1.0;
            let angle = sym() * d * max_rotation;
            let scale = (sym() * (1.0 + d).ln()).exp();
            let (tx, ty) = (sym() * d * 0.2 * wf, sym() * d * 0.2 * hf);
            let (p1, p2) = (sym() * d * 0.1 / (wf / 2.0), sym() * d * 0.1 / (hf / 2.0));
            let (sin, cos) = angle.sin_cos();
            let core = Homography {
                m: [
                    [scale * cos, -scale * sin, 0.0],
                    [scale * sin, scale * cos, 0.0],
                    [p1, p2, 1.0],
                ],
            };
            let m = translation(cx + tx, cy + ty).mul(&Homography {
                m: core.mul(&translation(-cx, -cy)),
            });
            let Ok(hom) = Homography::new(m) else { continue };
            let inside = corners.iter().all(|&c| {
                let (x, y) = hom.apply(c);
                x.is_finite() && y.is_finite() && x >= bx[0] && x <= bx[1] && y >= by[0] && y <= by[1]
            });
            if inside {
                return Ok(hom);
            }
        }
        d *= 0.5;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn([c, h, w], |i| ((i * 37) % 101) as f64 / 100.0)
    }

    #[test]
    fn compose_examples() {
        let g = GroupElement::new;
        assert_eq!(g(1, 2).compose(GroupElement::IDENTITY), g(1, 2));
        assert_eq!(g(1, 1).compose(g(-1, -1)), g(0, 0));
        assert_eq!(g(2, -1).compose(g(1, 3)), g(3, 2));
    }

    #[test]
    fn group_axioms_exhaustive() {
        let range: Vec<GroupElement> = (-4..=4)
            .flat_map(|i| (-4..=4).map(move |j| GroupElement::new(i, j)))
            .collect();
        for &a in &range {
            assert_eq!(a.compose(GroupElement::IDENTITY), a);
            assert_eq!(GroupElement::IDENTITY.compose(a), a);
            assert_eq!(a.compose(a.inverse()), GroupElement::IDENTITY);
            for &b in &range {
                assert_eq!(a.compose(b), b.compose(a));
                for &c in &range {
                    assert_eq!(a.compose(b).compose(c), a.compose(b.compose(c)));
                }
            }
        }
    }

    #[test]
    fn neighborhood_examples() {
        let h = neighborhood_h();
        assert_eq!(h.len(), 9);
        assert!(h.contains(&GroupElement::IDENTITY));
        for e in &h {
            assert!(h.contains(&e.inverse()));
        }
        assert_eq!(h[4], GroupElement::IDENTITY);
    }

    #[test]
    fn default_grid_layout() {
        let grid = GroupGrid::default();
        assert_eq!(grid.scale_exps, vec![0, 1, 2, 3, 4]);
        assert_eq!(grid.rot_exps, vec![-2, -1, 0, 1, 2]);
        for (idx, g) in grid.elements().into_iter().enumerate() {
            assert_eq!(grid.index_of(g), Some(idx));
        }
        assert_eq!(grid.index_of(GroupElement::new(5, 0)), None);
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let img = ramp(3, 17, 23);
        let (out, map) = warp_image(&img, GroupElement::IDENTITY, &GroupGrid::default()).unwrap();
        assert_eq!(out, img);
        assert_eq!(map, Affine2::IDENTITY);
    }

    #[test]
    fn quarter_turn_is_an_index_permutation() {
        let n = 12;
        let img = ramp(2, n, n);
        let (out, map) = warp_image(&img, GroupElement::new(0, 2), &GroupGrid::default()).unwrap();
        assert_eq!(out.shape(), &[2, n, n]);
        for c in 0..2 {
            for y in 0..n {
                for x in 0..n {
                    // Clockwise quarter turn: source (x, y) -> (n-1-y, x).
                    let want = img.at(&[c, y, x]);
                    let got = out.at(&[c, x, n - 1 - y]);
                    assert!((want - got).abs() <= 1e-12);
                    let (mx, my) = map.apply((x as f64, y as f64));
                    assert!((mx - (n - 1 - y) as f64).abs() < 1e-12 && (my - x as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_scale_canvas() {
        let img = Tensor::zeros([1, 100, 100]);
        let (out, map) = warp_image(&img, GroupElement::new(1, 0), &GroupGrid::default()).unwrap();
        // Pixel-centre span 99 * 2^-0.25 = 83.25 -> 85 pixels, padded to 88.
        assert_eq!(out.shape(), &[1, 88, 88]);
        let f = 2f64.powf(-0.25);
        assert!((map.m[0][0] - f).abs() < 1e-15 && map.m[0][1] == 0.0);
        let (a, b) = (map.apply((10.0, 20.0)), map.apply((30.0, 20.0)));
        assert!(((b.0 - a.0) - 20.0 * f).abs() < 1e-12);
    }

    #[test]
    fn degenerate_scale_rejected() {
        let img = Tensor::zeros([1, 8, 8]);
        let err = warp_image(&img, GroupElement::new(8, 0), &GroupGrid::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateScale { dst_w: 3, .. }));
    }

    #[test]
    fn map_point_examples() {
        assert_eq!(map_point(&Affine2::IDENTITY, (10.0, 20.0)), (10.0, 20.0));
        let img = Tensor::zeros([1, 100, 100]);
        let (_, rot) = warp_image(&img, GroupElement::new(0, 2), &GroupGrid::default()).unwrap();
        assert_eq!(map_point(&rot, (49.5, 49.5)), (49.5, 49.5));
        let half = Affine2::from_linear([[0.5, 0.0], [0.0, 0.5]], (0.0, 0.0));
        assert_eq!(map_point(&half, (10.0, 20.0)), (5.0, 10.0));
    }

    #[test]
    fn point_maps_compose_up_to_canvas_translation() {
        let grid = GroupGrid::default();
        let img = Tensor::zeros([1, 40, 50]);
        let centre = (24.5, 19.5);
        for g in grid.elements() {
            for h in [GroupElement::new(1, -1), GroupElement::new(0, 1), GroupElement::new(2, 2)] {
                let (warped_h, map_h) = warp_image(&img, h, &grid).unwrap();
                let (_, map_g) = warp_image(&warped_h, g, &grid).unwrap();
                let (_, map_gh) = warp_image(&img, g.compose(h), &grid).unwrap();
                let chained = map_g.after(&map_h);
                let (c1, c2) = (chained.apply(centre), map_gh.apply(centre));
                for p in [(0.0, 0.0), (49.0, 3.0), (7.5, 39.0)] {
                    let (a, b) = (chained.apply(p), map_gh.apply(p));
                    assert!(((a.0 - c1.0) - (b.0 - c2.0)).abs() < 1e-9);
                    assert!(((a.1 - c1.1) - (b.1 - c2.1)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_on_smooth_image() {
        let (h, w) = (40, 48);
        let img = Tensor::from_fn([1, h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.5 + 0.25 * (x * 0.11).sin() * (y * 0.07).cos()
        });
        let grid = GroupGrid::default();
        for g in [GroupElement::new(1, 1), GroupElement::new(-1, -1), GroupElement::new(2, 0)] {
            let (fwd, map) = warp_image(&img, g, &grid).unwrap();
            let (back, map_back) = warp_image(&fwd, g.inverse(), &grid).unwrap();
            let total = map_back.after(&map);
            for y in 3..h - 3 {
                for x in 3..w - 3 {
                    let (bx, by) = total.apply((x as f64, y as f64));
                    let (v, ok) = crate::tensor::bilinear_sample(&back, bx, by);
                    assert!(ok);
                    assert!((v[0] - img.at(&[0, y, x])).abs() <= 2e-2, "g={g} at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn homography_zero_difficulty_is_identity() {
        let h = random_homography(7, (64, 48), 0.0).unwrap();
        for (a, b) in h.to_row_major().iter().zip(Homography::IDENTITY.to_row_major()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(random_homography(9, (64, 64), 0.7).unwrap(), random_homography(9, (64, 64), 0.7).unwrap());
    }

    #[test]
    fn homography_audit() {
        let (w, h) = (64, 48);
        let (bx, by) = corner_bounds(w, h);
        for seed in 0..1000 {
            let hom = random_homography(seed, (w, h), 1.0).unwrap();
            assert!(hom.det().abs() > 1e-10);
            for c in [(0.0, 0.0), (64.0, 0.0), (0.0, 48.0), (64.0, 48.0)] {
                let (x, y) = hom.apply(c);
                assert!(x >= bx[0] && x <= bx[1] && y >= by[0] && y <= by[1]);
            }
            let inv = hom.inverse().unwrap();
            let p = inv.apply(hom.apply((13.0, 29.0)));
            assert!((p.0 - 13.0).abs() < 1e-9 && (p.1 - 29.0).abs() < 1e-9);
        }
    }

    #[test]
    fn homography_rotation_range() {
        let angle = |h: &Homography| {
            let (a, b) = (h.apply((31.5, 31.5)), h.apply((31.6, 31.5)));
            (b.1 - a.1).atan2(b.0 - a.0).abs()
        };
        let default_max = (0..300).map(|s| angle(&random_homography(s, (64, 64), 1.0).unwrap())).fold(0.0, f64::max);
        assert!(default_max < DEFAULT_MAX_ROTATION + 0.1);
        let wide_max = (0..300).map(|s| angle(&random_homography_in(s, (64, 64), 1.0, PI).unwrap())).fold(0.0, f64::max);
        assert!(wide_max > 2.5);
        assert!(random_homography_in(0, (64, 64), 1.0, 4.0).is_err());
    }

    #[test]
    fn homography_rejects_small_canvas_and_singular() {
        assert!(random_homography(0, (16, 64), 0.5).is_err());
        assert!(Homography::from_row_major(&[1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }
}
