//! Spatial transformer: homographies between quadrilaterals, bilinear
//! warping, the inverse-warp composite and local-region selection.
//!
//! Positions use normalized coordinates on `[-1, 1]^2` with `y` pointing up.
//! Pixel `(r, c)` of an `H x W` image has its center at
//! `x = 2(c + 0.5)/W - 1`, `y = 1 - 2(r + 0.5)/H`. Quadrilateral vertices are
//! listed top-left, top-right, bottom-right, bottom-left.

use std::sync::Arc;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::SamplingPlan;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Regions below this normalized area are rejected.
pub const MIN_REGION_AREA: f64 = 1e-4;
/// Homographies at or above this condition number are treated as singular.
pub const MAX_CONDITION: f64 = 1e8;

const COLLINEAR_TOL: f64 = 1e-12;

/// Four vertices forming a strictly convex quadrilateral, in TL, TR, BR, BL
/// order. Unlike [`Region`], vertices may lie on the image border.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad([[f64; 2]; 4]);

impl Quad {
    pub fn new(vertices: [[f64; 2]; 4]) -> Result<Self> {
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateQuad("non-finite vertex".into()));
        }
        let mut sign = 0.0;
        for i in 0..4 {
            let [ax, ay] = vertices[i];
            let [bx, by] = vertices[(i + 1) % 4];
            let [cx, cy] = vertices[(i + 2) % 4];
            let cross = (bx - ax) * (cy - by) - (by - ay) * (cx - bx);
            let scale =
                ((bx - ax).hypot(by - ay) * (cx - bx).hypot(cy - by)).max(f64::MIN_POSITIVE);
            if cross.abs() <= COLLINEAR_TOL * scale {
                return Err(Error::DegenerateQuad(format!(
                    "vertices {}, {}, {} are collinear",
                    i,
                    (i + 1) % 4,
                    (i + 2) % 4
                )));
            }
            if sign * cross < 0.0 {
                return Err(Error::DegenerateQuad("quadrilateral is not convex".into()));
            }
            sign = cross;
        }
        // TL -> TR -> BR -> BL runs clockwise when y points up.
        if sign > 0.0 {
            return Err(Error::DegenerateQuad(
                "vertices must be ordered top-left, top-right, bottom-right, bottom-left".into(),
            ));
        }
        Ok(Self(vertices))
    }

    /// The whole image, `[-1, 1]^2`.
    pub fn full_square() -> Self {
        Self([[-1.0, 1.0], [1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
    }

    pub fn vertices(&self) -> &[[f64; 2]; 4] {
        &self.0
    }

    pub fn area(&self) -> f64 {
        let v = &self.0;
        let twice: f64 = (0..4)
            .map(|i| {
                let j = (i + 1) % 4;
                v[i][0] * v[j][1] - v[j][0] * v[i][1]
            })
            .sum();
        twice.abs() / 2.0
    }
}

/// A quadrilateral strictly inside the image with non-negligible area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionRepr", into = "RegionRepr")]
pub struct Region(Quad);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRepr {
    vertices: Vec<f64>,
}

impl TryFrom<RegionRepr> for Region {
    type Error = Error;

    fn try_from(r: RegionRepr) -> Result<Self> {
        Region::from_flat(&r.vertices)
    }
}

impl From<Region> for RegionRepr {
    fn from(r: Region) -> Self {
        RegionRepr {
            vertices: r.to_flat().to_vec(),
        }
    }
}

impl Region {
    pub fn new(vertices: [[f64; 2]; 4]) -> Result<Self> {
        let quad = Quad::new(vertices)?;
        if let Some(v) = vertices.iter().flatten().find(|v| v.abs() >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "region coordinate {v} is outside the open interval (-1, 1)"
            )));
        }
        if quad.area() <= MIN_REGION_AREA {
            return Err(Error::DegenerateQuad(format!(
                "region area {:e} is too small",
                quad.area()
            )));
        }
        Ok(Self(quad))
    }

    /// Eight reals in vertex order: `x1, y1, ..., x4, y4`.
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 8 {
            return Err(Error::InvalidArgument(format!(
                "region needs 8 reals, got {}",
                v.len()
            )));
        }
        Self::new([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]])
    }

    pub fn to_flat(&self) -> [f64; 8] {
        let v = self.0 .0;
        [
            v[0][0], v[0][1], v[1][0], v[1][1], v[2][0], v[2][1], v[3][0], v[3][1],
        ]
    }

    pub fn from_rect(r: &Rect) -> Result<Self> {
        Self::new([[r.x0, r.y1], [r.x1, r.y1], [r.x1, r.y0], [r.x0, r.y0]])
    }

    pub fn quad(&self) -> &Quad {
        &self.0
    }

    pub fn vertices(&self) -> &[[f64; 2]; 4] {
        self.0.vertices()
    }

    /// Axis-aligned bounding rectangle.
    pub fn bounds(&self) -> Rect {
        let v = self.vertices();
        let fold = |i: usize, f: fn(f64, f64) -> f64| v.iter().map(|p| p[i]).reduce(f).unwrap();
        Rect {
            x0: fold(0, f64::min),
            y0: fold(1, f64::min),
            x1: fold(0, f64::max),
            y1: fold(1, f64::max),
        }
    }
}

/// Projective map of the plane, stored with the bottom-right entry equal to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let h33 = m[(2, 2)];
        if !m.iter().all(|v| v.is_finite()) || h33.abs() < 1e-300 {
            return Err(Error::NonInvertible {
                det: m.determinant(),
                cond: f64::INFINITY,
            });
        }
        let h = Self(m / h33);
        h.check_invertible()?;
        Ok(h)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn condition_number(&self) -> f64 {
        let s = self.0.svd(false, false).singular_values;
        let (hi, lo) = (s.max(), s.min());
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    fn check_invertible(&self) -> Result<()> {
        let det = self.determinant();
        let cond = self.condition_number();
        if det == 0.0 || !det.is_finite() || !(cond < MAX_CONDITION) {
            return Err(Error::NonInvertible { det, cond });
        }
        Ok(())
    }

    pub fn inverse(&self) -> Result<Self> {
        self.check_invertible()?;
        let inv = self.0.try_inverse().ok_or(Error::NonInvertible {
            det: self.determinant(),
            cond: self.condition_number(),
        })?;
        Self::from_matrix(inv)
    }

    /// The map `p -> next(self(p))`.
    pub fn then(&self, next: &Homography) -> Result<Self> {
        Self::from_matrix(next.0 * self.0)
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.0 * Vector3::new(x, y, 1.0);
        if p.z.abs() < 1e-300 {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }
}

/// Solves for the homography taking each `src` vertex to the matching `dst`
/// vertex, by the direct linear system with `h33 = 1`.
pub fn estimate_homography(src: &Quad, dst: &Quad) -> Result<Homography> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&[x, y], &[u, v])) in src.vertices().iter().zip(dst.vertices()).enumerate() {
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::DegenerateQuad("vertex correspondence system is singular".into()))?;
    Homography::from_matrix(Matrix3::new(
        h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0,
    ))
}

pub fn pixel_to_norm(row: f64, col: f64, h: usize, w: usize) -> (f64, f64) {
    (
        2.0 * (col + 0.5) / w as f64 - 1.0,
        1.0 - 2.0 * (row + 0.5) / h as f64,
    )
}

/// Inverse of [`pixel_to_norm`]; returns `(row, col)`.
pub fn norm_to_pixel(x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
    (
        (1.0 - y) * h as f64 / 2.0 - 0.5,
        (x + 1.0) * w as f64 / 2.0 - 0.5,
    )
}

/// Sampling plan realizing `out(q) = img(H^-1 q)` between the given sizes.
pub fn warp_plan(
    h: &Homography,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<SamplingPlan> {
    let inv = h.inverse()?;
    Ok(SamplingPlan::from_coords(
        in_h,
        in_w,
        out_h,
        out_w,
        |oy, ox| {
            let (qx, qy) = pixel_to_norm(oy as f64, ox as f64, out_h, out_w);
            let (px, py) = inv.apply(qx, qy)?;
            Some(norm_to_pixel(px, py, in_h, in_w))
        },
    ))
}

/// Warps a `[C,H,W]` image by `h` with bilinear sampling; out-of-range reads are zero.
pub fn warp(img: &Tensor, h: &Homography, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, ih, iw) = img.chw()?;
    warp_plan(h, ih, iw, out_h, out_w)?.apply(img)
}

/// Differentiable [`warp`].
pub fn warp_on(
    tape: &mut Tape,
    img: Var,
    h: &Homography,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let (_, ih, iw) = tape.value(img).chw()?;
    let plan = warp_plan(h, ih, iw, out_h, out_w)?;
    tape.sample(img, Arc::new(plan))
}

/// Resamples the region of `background` to an `n x n` patch.
pub fn extract_local(background: &Tensor, region: &Region, n: usize) -> Result<Tensor> {
    let h = estimate_homography(region.quad(), &Quad::full_square())?;
    warp(background, &h, n, n)
}

/// Antialiased polygon mask `[1,H,W]`: 1 inside, 0 outside, and the clamped
/// coverage `0.5 + signed distance` (in pixels) on edge pixels.
pub fn region_mask(region: &Region, h: usize, w: usize) -> Tensor {
    let px: Vec<(f64, f64)> = region
        .vertices()
        .iter()
        .map(|&[x, y]| {
            let (r, c) = norm_to_pixel(x, y, h, w);
            (c, r)
        })
        .collect();
    // Inward unit normals of each edge. In pixel space (row down) the
    // vertex order is counter-clockwise, so the interior lies to the left.
    let edges: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|i| {
            let (ax, ay) = px[i];
            let (bx, by) = px[(i + 1) % 4];
            let len = (bx - ax).hypot(by - ay);
            (ax, ay, (ay - by) / len, (bx - ax) / len)
        })
        .collect();
    Tensor::from_fn(&[1, h, w], |i| {
        let (r, c) = ((i / w) as f64, (i % w) as f64);
        let d = edges
            .iter()
            .map(|&(ax, ay, nx, ny)| (c - ax) * nx + (r - ay) * ny)
            .fold(f64::INFINITY, f64::min);
        (0.5 + d).clamp(0.0, 1.0)
    })
}

/// Warps `local` back into `region` of `background` and composites it under
/// the region mask. Returns `(global, mask)`.
pub fn inverse_warp_compose(
    background: &Tensor,
    local: &Tensor,
    region: &Region,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bg = tape.constant(background.clone());
    let lc = tape.constant(local.clone());
    let (out, mask) = inverse_warp_compose_on(&mut tape, bg, lc, region)?;
    Ok((tape.value(out).clone(), Arc::unwrap_or_clone(mask)))
}

/// Differentiable [`inverse_warp_compose`]; `global` copies `background`
/// exactly wherever the mask is 0.
pub fn inverse_warp_compose_on(
    tape: &mut Tape,
    background: Var,
    local: Var,
    region: &Region,
) -> Result<(Var, Arc<Tensor>)> {
    let (bc, gh, gw) = tape.value(background).chw()?;
    let (lc, lh, lw) = tape.value(local).chw()?;
    if bc != lc {
        return Err(shape_err(
            "inverse_warp_compose",
            format!("background has {bc} channels, local has {lc}"),
        ));
    }
    let emb = Embedding::new(region, lh, lw, gh, gw)?;
    let out = emb.apply_on(tape, background, local)?;
    Ok((out, emb.mask))
}

/// Precomputed placement of an `n x m` local patch into a `gh x gw` image:
/// the inverse-warp sampling plan and the region mask.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub plan: Arc<SamplingPlan>,
    pub mask: Arc<Tensor>,
}

impl Embedding {
    pub fn new(
        region: &Region,
        local_h: usize,
        local_w: usize,
        gh: usize,
        gw: usize,
    ) -> Result<Self> {
        let h = estimate_homography(&Quad::full_square(), region.quad())?;
        Ok(Self {
            plan: Arc::new(warp_plan(&h, local_h, local_w, gh, gw)?),
            mask: Arc::new(region_mask(region, gh, gw)),
        })
    }

    pub fn apply_on(&self, tape: &mut Tape, background: Var, local: Var) -> Result<Var> {
        let warped = tape.sample(local, self.plan.clone())?;
        tape.blend(warped, background, self.mask.clone())
    }

    pub fn compose(&self, background: &Tensor, local: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bg = tape.constant(background.clone());
        let lc = tape.constant(local.clone());
        let out = self.apply_on(&mut tape, bg, lc)?;
        Ok(tape.value(out).clone())
    }

    /// Counts pixels of `composite` that break the mask partition: not
    /// bit-equal to `background` where the mask is 0, or to the warped
    /// `local` where it is 1.
    pub fn partition_violations(
        &self,
        background: &Tensor,
        local: &Tensor,
        composite: &Tensor,
    ) -> Result<usize> {
        background.expect_same_shape(composite, "partition_violations")?;
        let warped = self.plan.apply(local)?;
        let plane = self.mask.len();
        Ok((0..composite.len())
            .filter(|&i| match self.mask.data()[i % plane] {
                0.0 => composite.data()[i] != background.data()[i],
                1.0 => composite.data()[i] != warped.data()[i],
                _ => false,
            })
            .count())
    }
}

/// Axis-aligned rectangle in normalized coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let r = Self { x0, y0, x1, y1 };
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::InvalidArgument(format!("empty rectangle {r:?}")));
        }
        Ok(r)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// True when the interiors intersect.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// Sampling policy for [`select_region_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionSampling {
    /// Region height as a multiple of the anchor box height.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Fraction of the region height below the anchor's base; an object
    /// centered in the region then stands on the anchor's ground line.
    pub base_offset: f64,
    /// Largest horizontal gap between anchor and region.
    pub max_gap: f64,
    /// Keeps regions this far inside the image border.
    pub margin: f64,
    pub max_attempts: usize,
}

impl Default for RegionSampling {
    fn default() -> Self {
        Self {
            scale_min: 1.6,
            scale_max: 2.4,
            base_offset: 0.25,
            max_gap: 0.1,
            margin: 0.02,
            max_attempts: 64,
        }
    }
}

/// [`select_region_with`] under the default policy.
pub fn select_region(bboxes: &[Rect], fg_aspect: f64, seed: u64) -> Result<Region> {
    select_region_with(bboxes, fg_aspect, seed, &RegionSampling::default())
}

/// Picks an axis-aligned region of width/height ratio `fg_aspect` beside a
/// randomly chosen anchor box, sharing its ground line and overlapping none
/// of `bboxes`. With no boxes, any in-bounds region is returned.
pub fn select_region_with(
    bboxes: &[Rect],
    fg_aspect: f64,
    seed: u64,
    policy: &RegionSampling,
) -> Result<Region> {
    if !(fg_aspect > 0.0 && fg_aspect.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "aspect must be positive, got {fg_aspect}"
        )));
    }
    if !(policy.scale_min > 0.0 && policy.scale_min <= policy.scale_max) {
        return Err(Error::InvalidArgument("region scale range is empty".into()));
    }
    let lim = 1.0 - policy.margin;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..policy.max_attempts {
        let rect = if bboxes.is_empty() {
            let h = rng.gen_range(0.3..0.9) * lim;
            let w = h * fg_aspect;
            if w >= 2.0 * lim {
                continue;
            }
            let x0 = rng.gen_range(-lim..lim - w);
            let y0 = rng.gen_range(-lim..lim - h);
            Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        } else {
            let anchor = bboxes[rng.gen_range(0..bboxes.len())];
            let h = anchor.height() * rng.gen_range(policy.scale_min..=policy.scale_max);
            let w = h * fg_aspect;
            let gap = rng.gen_range(0.0..=policy.max_gap);
            let x0 = if rng.gen_bool(0.5) {
                anchor.x1 + gap
            } else {
                anchor.x0 - gap - w
            };
            let y0 = anchor.y0 - policy.base_offset * h;
            Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        };
        let inside = rect.x0 >= -lim && rect.x1 <= lim && rect.y0 >= -lim && rect.y1 <= lim;
        if inside && !bboxes.iter().any(|b| b.overlaps(&rect)) {
            if let Ok(region) = Region::from_rect(&rect) {
                return Ok(region);
            }
        }
    }
    Err(Error::NoRegionFound {
        attempts: policy.max_attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::ops::psnr_where;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn random_quad(rng: &mut ChaCha8Rng, half: f64, jitter: f64) -> Quad {
        let base = [[-half, half], [half, half], [half, -half], [-half, -half]];
        let v = base.map(|[x, y]| {
            [
                x + rng.gen_range(-jitter..jitter),
                y + rng.gen_range(-jitter..jitter),
            ]
        });
        Quad::new(v).unwrap()
    }

    fn max_residual(h: &Homography, src: &Quad, dst: &Quad) -> f64 {
        src.vertices()
            .iter()
            .zip(dst.vertices())
            .map(|(&[x, y], &[u, v])| {
                let (px, py) = h.apply(x, y).unwrap();
                (px - u).abs().max((py - v).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Smooth test image with several orientations and frequencies.
    fn natural(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = (i / (h * w)) as f64;
            let (r, col) = (((i / w) % h) as f64 / h as f64, (i % w) as f64 / w as f64);
            0.4 * (3.0 * r + 2.0 * col + ch).sin()
                + 0.3 * (5.0 * col - 2.0 * r).cos() * (2.0 * r + ch).sin()
                + 0.2 * (r - col)
        })
    }

    #[test]
    fn identity_and_pure_scale() {
        let full = Quad::full_square();
        let h = estimate_homography(&full, &full).unwrap();
        assert!((h.matrix() - Matrix3::identity()).abs().max() < 1e-15);

        let half = Quad::new([[-0.5, 0.5], [0.5, 0.5], [0.5, -0.5], [-0.5, -0.5]]).unwrap();
        let h = estimate_homography(&half, &full).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(2.0, 2.0, 1.0));
        assert!((h.matrix() - expected).abs().max() < 1e-14);
    }

    #[test]
    fn random_quads_map_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let src = random_quad(&mut rng, 0.6, 0.25);
            let dst = random_quad(&mut rng, 0.6, 0.25);
            let h = estimate_homography(&src, &dst).unwrap();
            worst = worst.max(max_residual(&h, &src, &dst));
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn collinear_and_misordered_vertices_rejected() {
        let line = Quad::new([[-0.5, 0.5], [0.0, 0.5], [0.5, 0.5], [-0.5, -0.5]]);
        assert!(matches!(line, Err(Error::DegenerateQuad(_))));
        let ccw = Quad::new([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]);
        assert!(matches!(ccw, Err(Error::DegenerateQuad(_))));
        let bowtie = Quad::new([[-0.5, 0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, -0.5]]);
        assert!(matches!(bowtie, Err(Error::DegenerateQuad(_))));
    }

    #[test]
    fn region_invariants() {
        assert!(Region::new([[-1.0, 1.0], [1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]]).is_err());
        let tiny = Region::new([[0.0, 0.005], [0.005, 0.005], [0.005, 0.0], [0.0, 0.0]]);
        assert!(matches!(tiny, Err(Error::DegenerateQuad(_))));
        let r = Region::from_flat(&[-0.5, 0.4, 0.3, 0.5, 0.4, -0.3, -0.4, -0.5]).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<Region>(&json).unwrap(), r);
        assert!(serde_json::from_str::<Region>(r#"{"vertices":[0,0,1]}"#).is_err());
    }

    #[test]
    fn singular_matrix_is_not_invertible() {
        let m = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            Homography::from_matrix(m),
            Err(Error::NonInvertible { .. })
        ));
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = natural(3, 17, 23);
        let out = warp(&img, &Homography::identity(), 17, 23).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_translation_shifts_content() {
        let (h, w) = (12, 16);
        let img = natural(2, h, w);
        // Three pixels right, two pixels down.
        let (dx, dy) = (3usize, 2usize);
        let t = Matrix3::new(
            1.0,
            0.0,
            2.0 * dx as f64 / w as f64,
            0.0,
            1.0,
            -2.0 * dy as f64 / h as f64,
            0.0,
            0.0,
            1.0,
        );
        let out = warp(&img, &Homography::from_matrix(t).unwrap(), h, w).unwrap();
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let expected = if y >= dy && x >= dx {
                        img.at3(c, y - dy, x - dx)
                    } else {
                        0.0
                    };
                    assert_eq!(out.at3(c, y, x), expected, "({c},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_psnr() {
        let img = natural(3, 64, 64);
        let region = Region::new([[-0.6, 0.5], [0.55, 0.6], [0.5, -0.55], [-0.5, -0.6]]).unwrap();
        let h = estimate_homography(region.quad(), &Quad::full_square()).unwrap();
        let there = warp(&img, &h, 64, 64).unwrap();
        let back = warp(&there, &h.inverse().unwrap(), 64, 64).unwrap();
        let mask = region_mask(&region, 64, 64);
        let interior = |i: usize| {
            let p = i % (64 * 64);
            let (y, x) = (p / 64, p % 64);
            (y.saturating_sub(1)..=(y + 1).min(63)).all(|yy| {
                (x.saturating_sub(1)..=(x + 1).min(63)).all(|xx| mask.data()[yy * 64 + xx] == 1.0)
            })
        };
        let p = psnr_where(&back, &img, 2.0, interior).unwrap();
        assert!(p > 35.0, "{p}");
    }

    #[test]
    fn compose_round_trip_and_mask_algebra() {
        let bg = natural(3, 64, 64);
        let region = Region::new([[-0.5, 0.45], [0.3, 0.5], [0.35, -0.4], [-0.45, -0.5]]).unwrap();
        let local = extract_local(&bg, &region, 32).unwrap();
        let (global, mask) = inverse_warp_compose(&bg, &local, &region).unwrap();

        let interior = |i: usize| {
            let p = i % (64 * 64);
            let (y, x) = (p / 64, p % 64);
            (y.saturating_sub(1)..=(y + 1).min(63)).all(|yy| {
                (x.saturating_sub(1)..=(x + 1).min(63)).all(|xx| mask.data()[yy * 64 + xx] == 1.0)
            })
        };
        let p = psnr_where(&global, &bg, 2.0, interior).unwrap();
        assert!(p > 35.0, "{p}");

        let (blank, m2) = inverse_warp_compose(&bg, &Tensor::zeros(&[3, 32, 32]), &region).unwrap();
        assert_eq!(m2, mask);
        for c in 0..3 {
            for i in 0..64 * 64 {
                let k = c * 64 * 64 + i;
                match mask.data()[i] {
                    0.0 => {
                        assert_eq!(blank.data()[k].to_bits(), bg.data()[k].to_bits());
                        assert_eq!(global.data()[k].to_bits(), bg.data()[k].to_bits());
                    }
                    1.0 => assert_eq!(blank.data()[k], 0.0),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn mask_is_binary_away_from_edges() {
        let region = Region::new([[-0.7, 0.6], [0.5, 0.7], [0.6, -0.5], [-0.6, -0.7]]).unwrap();
        let mask = region_mask(&region, 48, 48);
        let v = region.vertices();
        let mut fractional = 0;
        for (i, &m) in mask.data().iter().enumerate() {
            assert!((0.0..=1.0).contains(&m));
            if m > 0.0 && m < 1.0 {
                fractional += 1;
                // Fractional pixels lie within one pixel of some edge.
                let (r, c) = ((i / 48) as f64, (i % 48) as f64);
                let near = (0..4).any(|k| {
                    let (ar, ac) = norm_to_pixel(v[k][0], v[k][1], 48, 48);
                    let (br, bc) = norm_to_pixel(v[(k + 1) % 4][0], v[(k + 1) % 4][1], 48, 48);
                    let (dr, dc) = (br - ar, bc - ac);
                    let t = (((r - ar) * dr + (c - ac) * dc) / (dr * dr + dc * dc)).clamp(0.0, 1.0);
                    (r - ar - t * dr).hypot(c - ac - t * dc) <= 1.0
                });
                assert!(near, "pixel {i} = {m}");
            }
        }
        assert!(fractional > 0);
        let ones = mask.data().iter().filter(|&&m| m == 1.0).count() as f64;
        let expected = region.quad().area() / 4.0 * 48.0 * 48.0;
        assert!((ones - expected).abs() / expected < 0.1);
    }

    #[test]
    fn warp_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::from_fn(&[2, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[2, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let region = Region::new([[-0.7, 0.6], [0.5, 0.7], [0.6, -0.5], [-0.6, -0.7]]).unwrap();
        let h = estimate_homography(region.quad(), &Quad::full_square()).unwrap();
        let report = grad_check(
            |t, v| {
                let out = warp_on(t, v, &h, 8, 8)?;
                let wv = t.constant(w.clone());
                let p = t.mul(out, wv)?;
                Ok(t.sum(p))
            },
            &img,
            1e-5,
            1e-4,
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn compose_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bg = Tensor::from_fn(&[1, 10, 10], |_| rng.gen_range(-1.0..1.0));
        let local = Tensor::from_fn(&[1, 6, 6], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[1, 10, 10], |_| rng.gen_range(-1.0..1.0));
        let region = Region::new([[-0.6, 0.5], [0.4, 0.6], [0.5, -0.4], [-0.5, -0.6]]).unwrap();
        let report = grad_check(
            |t, v| {
                let b = t.constant(bg.clone());
                let (out, _) = inverse_warp_compose_on(t, b, v, &region)?;
                let wv = t.constant(w.clone());
                let p = t.mul(out, wv)?;
                Ok(t.sum(p))
            },
            &local,
            1e-5,
            1e-4,
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn region_beside_centered_box() {
        let bbox = Rect::new(-0.1, -0.2, 0.1, 0.2).unwrap();
        for seed in 0..20 {
            let r = select_region(&[bbox], 0.5, seed).unwrap();
            let b = r.bounds();
            assert!(!b.overlaps(&bbox));
            assert!((b.width() / b.height() - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn tiled_image_has_no_region() {
        let mut tiles = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                let (x0, y0) = (-1.0 + 0.5 * i as f64, -1.0 + 0.5 * j as f64);
                tiles.push(Rect::new(x0, y0, x0 + 0.5, y0 + 0.5).unwrap());
            }
        }
        assert!(matches!(
            select_region(&tiles, 1.0, 3),
            Err(Error::NoRegionFound { attempts: 64 })
        ));
    }

    #[test]
    fn empty_scene_is_deterministic() {
        let a = select_region(&[], 0.75, 42).unwrap();
        assert_eq!(a, select_region(&[], 0.75, 42).unwrap());
        let b = a.bounds();
        assert!((b.width() / b.height() - 0.75).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn homographies_compose(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_quad(&mut rng, 0.6, 0.25);
            let b = random_quad(&mut rng, 0.6, 0.25);
            let c = random_quad(&mut rng, 0.6, 0.25);
            let ab = estimate_homography(&a, &b).unwrap();
            let bc = estimate_homography(&b, &c).unwrap();
            let ac = estimate_homography(&a, &c).unwrap();
            let composed = ab.then(&bc).unwrap();
            prop_assert!((composed.matrix() - ac.matrix()).abs().max() < 1e-6);
        }

        #[test]
        fn selected_regions_avoid_all_boxes(seed in any::<u64>(), n in 1usize..4, aspect in 0.4f64..1.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<Rect> = (0..n)
                .map(|_| {
                    let (x, y) = (rng.gen_range(-0.8..0.6), rng.gen_range(-0.7..0.5));
                    Rect::new(x, y, x + rng.gen_range(0.05..0.2), y + rng.gen_range(0.1..0.3)).unwrap()
                })
                .collect();
            if let Ok(r) = select_region(&boxes, aspect, seed) {
                let b = r.bounds();
                prop_assert!(boxes.iter().all(|bb| !bb.overlaps(&b)));
                prop_assert!((b.width() / b.height() / aspect - 1.0).abs() < 0.1);
                prop_assert!(r.to_flat().iter().all(|v| v.abs() < 1.0));
            }
        }
    }
}
