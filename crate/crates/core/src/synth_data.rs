//! Synthetic composition scenes with analytic shadows.
//!
//! A scene is a flat ground plane under a sky, lit by one directional light
//! plus ambient. Figures stand on the ground and cast hard shadows whose
//! geometry follows from the light direction, so every sample carries exact
//! ground truth: the shadowed "real" patch `y`, its global counterpart `Y`,
//! and SH coefficients projected from the same light.
//!
//! Image-plane conventions: rows grow downward, the camera looks along the
//! world `+y` axis, world `+x` is screen-right and `+z` is up. A light with
//! azimuth `phi` and elevation `e` has direction
//! `(cos e cos phi, cos e sin phi, sin e)` (pointing toward the light). A
//! point at height `h` pixels casts its shadow
//! `h * cot(e) * (-cos phi, f sin phi)` pixels away in `(col, row)`, where
//! `f` is the ground foreshortening.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::illumination::{pixel_direction, project_to_sh, IllumMap, ShCoefficients};
use crate::stm::{extract_local, inverse_warp_compose, select_region, Rect, Region};
use crate::tensor::Tensor;

/// Lights at or below this elevation are rejected: their shadows are unbounded.
pub const MIN_ELEVATION_DEG: f64 = 5.0;
pub const CORPUS_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_FILES: [&str; 9] = [
    "bg.png",
    "fg.png",
    "m_f.png",
    "x.png",
    "y.png",
    "Y.png",
    "m_Y.png",
    "region.json",
    "sh.json",
];

const HEIGHT_STEP: f64 = 0.25;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Side of the global image `N`.
    pub global_size: usize,
    /// Side of the local patch `n`.
    pub local_size: usize,
    /// Side of the foreground sprite `s`, centered in the local patch.
    pub sprite_size: usize,
    /// Light elevation range in degrees.
    pub elevation_deg: [f64; 2],
    pub attenuation: f64,
    /// Vertical compression of ground-plane offsets in the image.
    pub foreshortening: f64,
    /// Half-thickness in pixels of the ground band under each figure.
    pub footprint: f64,
    /// Inclusive range of distractor figures in the background.
    pub distractors: [usize; 2],
    /// Distractor height range as a fraction of `N`.
    pub distractor_height: [f64; 2],
    pub ambient: f64,
    pub sun: f64,
    /// Exponent of the sun lobe `max(0, cos)^k` in the environment panorama.
    pub lobe_exponent: f64,
    pub sh_degree: usize,
    pub panorama_height: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            global_size: 64,
            local_size: 32,
            sprite_size: 16,
            elevation_deg: [25.0, 65.0],
            attenuation: 0.5,
            foreshortening: 0.5,
            footprint: 1.5,
            distractors: [1, 3],
            distractor_height: [0.14, 0.25],
            ambient: 0.4,
            sun: 3.0,
            lobe_exponent: 32.0,
            sh_degree: 2,
            panorama_height: 64,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.global_size % 8 != 0 || self.local_size % 8 != 0 || self.local_size == 0 {
            return bad("global_size and local_size must be positive multiples of 8".into());
        }
        if self.local_size > self.global_size {
            return bad("local_size cannot exceed global_size".into());
        }
        if self.sprite_size == 0 || self.sprite_size > self.local_size {
            return bad("sprite_size must be in 1..=local_size".into());
        }
        let [lo, hi] = self.elevation_deg;
        if !(lo > MIN_ELEVATION_DEG && lo <= hi && hi <= 90.0) {
            return bad(format!(
                "elevation range must lie in ({MIN_ELEVATION_DEG}, 90], got [{lo}, {hi}]"
            ));
        }
        if !(0.0..=1.0).contains(&self.attenuation) {
            return bad("attenuation must be in [0, 1]".into());
        }
        if !(self.foreshortening > 0.0 && self.foreshortening <= 1.0) || !(self.footprint >= 0.0) {
            return bad("foreshortening must be in (0, 1] and footprint >= 0".into());
        }
        if self.distractors[0] > self.distractors[1] || self.distractors[1] > 8 {
            return bad("distractors must be an increasing range within 0..=8".into());
        }
        let [dl, dh] = self.distractor_height;
        if !(dl > 0.0 && dl <= dh && dh < 0.5) {
            return bad("distractor_height must be an increasing range within (0, 0.5)".into());
        }
        if self.sh_degree < 1 || self.panorama_height < 8 {
            return bad("sh_degree must be >= 1 and panorama_height >= 8".into());
        }
        if !(self.ambient >= 0.0 && self.sun > 0.0 && self.lobe_exponent >= 1.0) {
            return bad("ambient >= 0, sun > 0 and lobe_exponent >= 1 are required".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn geometry(&self) -> ShadowGeometry {
        ShadowGeometry {
            foreshortening: self.foreshortening,
            footprint: self.footprint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    pub elevation: f64,
    pub azimuth: f64,
    pub dir: [f64; 3],
}

impl Light {
    pub fn from_angles(elevation: f64, azimuth: f64) -> Self {
        let (ce, se) = (elevation.cos(), elevation.sin());
        Self {
            elevation,
            azimuth,
            dir: [ce * azimuth.cos(), ce * azimuth.sin(), se],
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The light of scene `seed`: elevation uniform in the configured range,
/// azimuth uniform in `[0, 2*pi)`.
pub fn sample_light(seed: u64, cfg: &DataConfig) -> Light {
    let mut rng = stream(seed, 0);
    let [lo, hi] = cfg.elevation_deg;
    let e = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    Light::from_angles(e.to_radians(), rng.gen_range(0.0..2.0 * PI))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowGeometry {
    pub foreshortening: f64,
    pub footprint: f64,
}

impl Default for ShadowGeometry {
    fn default() -> Self {
        Self {
            foreshortening: 0.5,
            footprint: 1.5,
        }
    }
}

/// Image-plane shadow offset `(d_col, d_row)` per pixel of height.
pub fn shadow_step(light_dir: [f64; 3], foreshortening: f64) -> Result<(f64, f64)> {
    let n = light_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument(
            "light direction must be a nonzero vector".into(),
        ));
    }
    let [x, y, z] = light_dir.map(|v| v / n);
    let elevation = z.clamp(-1.0, 1.0).asin().to_degrees();
    if elevation <= MIN_ELEVATION_DEG {
        return Err(Error::InvalidArgument(format!(
            "light elevation {elevation:.2} deg is too low for a finite shadow"
        )));
    }
    Ok((-x / z, foreshortening * y / z))
}

/// Fraction of each pixel (4x4 supersampled) covered by the shadow of the
/// object standing on row `ground_y`.
///
/// The object is the silhouette `mask >= 0.5` extruded over a ground band of
/// half-thickness `footprint` around `ground_y`; silhouette row `ground_y - h`
/// is at height `h`.
pub fn shadow_coverage(
    mask: &Tensor,
    light_dir: [f64; 3],
    ground_y: f64,
    geom: &ShadowGeometry,
) -> Result<Tensor> {
    let (c, h, w) = mask.chw()?;
    if c != 1 {
        return Err(shape_err(
            "shadow_coverage",
            format!("mask must be [1,H,W], got {:?}", mask.shape()),
        ));
    }
    let (dcol, drow) = shadow_step(light_dir, geom.foreshortening)?;
    let solid: Vec<bool> = mask.data().iter().map(|&m| m >= 0.5).collect();
    let mut out = Tensor::zeros(&[1, h, w]);
    let Some(top) = (0..h).find(|&r| solid[r * w..(r + 1) * w].iter().any(|&b| b)) else {
        return Ok(out);
    };
    let cols: Vec<usize> = (0..w)
        .filter(|&col| (0..h).any(|r| solid[r * w + col]))
        .collect();
    let (c0, c1) = (cols[0] as f64, *cols.last().unwrap() as f64);
    let hmax = (ground_y - top as f64 + 0.5).max(0.0);
    let t = geom.footprint;

    let solid_at = |row: f64, col: f64| {
        let (r, cc) = (row.round(), col.round());
        r >= 0.0
            && cc >= 0.0
            && (r as usize) < h
            && (cc as usize) < w
            && solid[r as usize * w + cc as usize]
    };

    let span = |a: f64, b: f64| (a.min(b), a.max(b));
    let (rlo, rhi) = span(ground_y - t, ground_y - t + hmax * drow);
    let (rlo2, rhi2) = span(ground_y + t, ground_y + t + hmax * drow);
    let (clo, chi) = span(c0, c0 + hmax * dcol);
    let (clo2, chi2) = span(c1, c1 + hmax * dcol);
    let row_range = ((rlo.min(rlo2) - 1.0).floor().max(0.0) as usize)
        ..((rhi.max(rhi2) + 2.0).min(h as f64) as usize);
    let col_range = ((clo.min(clo2) - 1.0).floor().max(0.0) as usize)
        ..((chi.max(chi2) + 2.0).min(w as f64) as usize);

    let inv = 1.0 / SUPERSAMPLE as f64;
    for r in row_range {
        for col in col_range.clone() {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                let pr = r as f64 + (sy as f64 + 0.5) * inv - 0.5;
                // Heights whose shadow lands on this row.
                let (mut lo, mut hi) = if drow.abs() > 1e-12 {
                    span((pr - ground_y - t) / drow, (pr - ground_y + t) / drow)
                } else if (pr - ground_y).abs() <= t {
                    (0.0, hmax)
                } else {
                    continue;
                };
                lo = lo.max(0.0);
                hi = hi.min(hmax);
                if lo > hi {
                    continue;
                }
                let step = HEIGHT_STEP.min(((hi - lo) / 4.0).max(1e-3));
                for sx in 0..SUPERSAMPLE {
                    let pc = col as f64 + (sx as f64 + 0.5) * inv - 0.5;
                    let mut hh = lo;
                    while hh <= hi + 1e-12 {
                        if solid_at(ground_y - hh, pc - hh * dcol) {
                            hits += 1;
                            break;
                        }
                        hh += step;
                    }
                }
            }
            out.data_mut()[r * w + col] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    Ok(out)
}

/// Multiplicative shadow layer `1 - attenuation * coverage` with the default
/// geometry.
pub fn render_shadow(
    mask: &Tensor,
    light_dir: [f64; 3],
    ground_y: f64,
    attenuation: f64,
) -> Result<Tensor> {
    render_shadow_with(
        mask,
        light_dir,
        ground_y,
        attenuation,
        &ShadowGeometry::default(),
    )
}

pub fn render_shadow_with(
    mask: &Tensor,
    light_dir: [f64; 3],
    ground_y: f64,
    attenuation: f64,
    geom: &ShadowGeometry,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&attenuation) {
        return Err(Error::InvalidArgument(format!(
            "attenuation {attenuation} outside [0, 1]"
        )));
    }
    Ok(shadow_coverage(mask, light_dir, ground_y, geom)?.map(|c| 1.0 - attenuation * c))
}

/// Darkens `img` (values in [-1, 1]) by the per-pixel factor `[1,H,W]` in
/// linear intensity. Factor 1 leaves a pixel bit-identical.
pub fn shade(img: &Tensor, factor: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    if factor.shape() != [1, h, w] {
        return Err(shape_err(
            "shade",
            format!("factor {:?} for image {:?}", factor.shape(), img.shape()),
        ));
    }
    let plane = h * w;
    let f = factor.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (v, k) = (img.data()[i], f[i % plane]);
        if k == 1.0 {
            v
        } else {
            (v + 1.0) * k - 1.0
        }
    }))
}

/// `fg * alpha + bg * (1 - alpha)` with an exact copy where alpha is 0 or 1.
fn alpha_blend(bg: &Tensor, fg: &Tensor, alpha: &Tensor) -> Tensor {
    let plane = alpha.len();
    Tensor::from_fn(bg.shape(), |i| match alpha.data()[i % plane] {
        0.0 => bg.data()[i],
        1.0 => fg.data()[i],
        a => fg.data()[i] * a + bg.data()[i] * (1.0 - a),
    })
}

/// Stylized standing figure in unit coordinates (`v` down, feet at `v = 1`).
#[derive(Debug, Clone, Copy)]
struct Figure {
    width: f64,
    head: f64,
    body: [f64; 3],
    skin: [f64; 3],
    legs: [f64; 3],
}

impl Figure {
    fn random(rng: &mut impl Rng) -> Self {
        let mut color = || {
            [
                rng.gen_range(-0.7..0.8),
                rng.gen_range(-0.7..0.8),
                rng.gen_range(-0.7..0.8),
            ]
        };
        let body = color();
        let legs = color();
        let skin = [0.55, 0.2, 0.0].map(|v| v + rng.gen_range(-0.25..0.25));
        Self {
            width: rng.gen_range(0.85..1.15),
            head: rng.gen_range(0.11..0.14),
            body,
            skin,
            legs,
        }
    }

    /// Color at `(u, v)`, or `None` outside the silhouette.
    fn color(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let du = (u - 0.5) / self.width;
        if du * du + (v - 0.14) * (v - 0.14) <= self.head * self.head {
            return Some(self.skin);
        }
        let (bx, by) = (du / 0.3, (v - 0.5) / 0.26);
        if bx * bx + by * by <= 1.0 {
            return Some(self.body.map(|c| c * (0.9 + 0.1 * (1.0 - v))));
        }
        let leg = du.abs();
        if (0.7..=1.0).contains(&v) && (0.04..=0.17).contains(&leg) {
            return Some(self.legs);
        }
        None
    }

    /// Renders into `[3,H,W]` color and `[1,H,W]` alpha; the figure's box has
    /// top-left `(top, left)` and size `height x width` in pixels.
    fn render(
        &self,
        h: usize,
        w: usize,
        top: f64,
        left: f64,
        height: f64,
        width: f64,
    ) -> (Tensor, Tensor) {
        let mut rgb = Tensor::zeros(&[3, h, w]);
        let mut alpha = Tensor::zeros(&[1, h, w]);
        let inv = 1.0 / SUPERSAMPLE as f64;
        let r0 = top.floor().max(0.0) as usize;
        let r1 = ((top + height).ceil() as usize + 1).min(h);
        let c0 = left.floor().max(0.0) as usize;
        let c1 = ((left + width).ceil() as usize + 1).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                let (mut acc, mut hits) = ([0.0; 3], 0);
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let v = (r as f64 + (sy as f64 + 0.5) * inv - top) / height;
                        let u = (c as f64 + (sx as f64 + 0.5) * inv - left) / width;
                        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                            continue;
                        }
                        if let Some(col) = self.color(u, v) {
                            hits += 1;
                            for k in 0..3 {
                                acc[k] += col[k];
                            }
                        }
                    }
                }
                if hits > 0 {
                    let n = hits as f64;
                    for k in 0..3 {
                        rgb.set3(k, r, c, acc[k] / n);
                    }
                    alpha.set3(0, r, c, n / (SUPERSAMPLE * SUPERSAMPLE) as f64);
                }
            }
        }
        (rgb, alpha)
    }
}

/// A distractor figure placed in the background.
#[derive(Debug, Clone)]
pub struct Placement {
    /// Bounding box in normalized coordinates.
    pub bbox: Rect,
    /// Row of the figure's feet.
    pub ground_y: f64,
    pub alpha: Tensor,
}

/// Background image with its figures and the shadow layer they cast.
#[derive(Debug, Clone)]
pub struct Background {
    pub image: Tensor,
    /// 1 on ground pixels, 0 on sky.
    pub ground: Tensor,
    pub horizon: f64,
    pub figures: Vec<Placement>,
    pub shadow: Tensor,
}

fn value_noise(rng: &mut impl Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let fy = r as f64 / h as f64 * cells as f64;
            let fx = c as f64 / w as f64 * cells as f64;
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
            let at = |y: usize, x: usize| g[y * (cells + 1) + x];
            let top = at(iy, ix) * (1.0 - sx) + at(iy, ix + 1) * sx;
            let bot = at(iy + 1, ix) * (1.0 - sx) + at(iy + 1, ix + 1) * sx;
            out[r * w + c] = top * (1.0 - sy) + bot * sy;
        }
    }
    out
}

/// Sky, textured ground and shadow-casting distractor figures.
pub fn render_background(
    rng: &mut impl Rng,
    cfg: &DataConfig,
    light: &Light,
) -> Result<Background> {
    let n = cfg.global_size;
    let nf = n as f64;
    let horizon = rng.gen_range(0.3..0.45) * nf;
    let sky_top = [-0.2, 0.1, 0.7].map(|v: f64| v + rng.gen_range(-0.15..0.15));
    let sky_low = [0.35, 0.5, 0.75].map(|v: f64| v + rng.gen_range(-0.1..0.1));
    let ground_base = [0.1, -0.05, -0.3].map(|v: f64| v + rng.gen_range(-0.25..0.25));
    let brightness = 0.75 + 0.25 * light.elevation.sin();
    let coarse = value_noise(rng, n, n, 4);
    let fine = value_noise(rng, n, n, 12);

    let mut image = Tensor::zeros(&[3, n, n]);
    let mut ground = Tensor::zeros(&[1, n, n]);
    for r in 0..n {
        for c in 0..n {
            let rf = r as f64 + 0.5;
            if rf < horizon {
                let t = rf / horizon;
                for k in 0..3 {
                    image.set3(k, r, c, sky_top[k] * (1.0 - t) + sky_low[k] * t);
                }
            } else {
                ground.set3(0, r, c, 1.0);
                let tex = 0.16 * coarse[r * n + c] + 0.07 * fine[r * n + c];
                for k in 0..3 {
                    let v = ((ground_base[k] + tex + 1.0) * brightness - 1.0).clamp(-0.95, 0.95);
                    image.set3(k, r, c, v);
                }
            }
        }
    }

    let count = if cfg.distractors[0] == cfg.distractors[1] {
        cfg.distractors[0]
    } else {
        rng.gen_range(cfg.distractors[0]..=cfg.distractors[1])
    };
    let mut figures: Vec<Placement> = Vec::new();
    let mut bodies: Vec<(Tensor, Tensor)> = Vec::new();
    let mut shadow = Tensor::ones(&[1, n, n]);
    for _ in 0..count {
        for _attempt in 0..20 {
            let height = rng.gen_range(cfg.distractor_height[0]..=cfg.distractor_height[1]) * nf;
            let width = height * 0.5;
            let feet = rng
                .gen_range((horizon + 3.0).min(nf - 3.0)..nf - 2.0)
                .floor();
            let left = rng.gen_range(1.0..nf - width - 1.0);
            let top = feet + 1.0 - height;
            let bbox = Rect {
                x0: 2.0 * left / nf - 1.0,
                x1: 2.0 * (left + width) / nf - 1.0,
                y0: 1.0 - 2.0 * (feet + 1.0) / nf,
                y1: 1.0 - 2.0 * top.max(0.0) / nf,
            };
            let padded = Rect {
                x0: bbox.x0 - 0.05,
                x1: bbox.x1 + 0.05,
                ..bbox
            };
            if figures.iter().any(|f| f.bbox.overlaps(&padded)) {
                continue;
            }
            let fig = Figure::random(rng);
            let (rgb, alpha) = fig.render(n, n, top, left, height, width);
            let cov = shadow_coverage(&alpha, light.dir, feet, &cfg.geometry())?;
            for i in 0..n * n {
                let d = cfg.attenuation * cov.data()[i] * ground.data()[i];
                shadow.data_mut()[i] *= 1.0 - d;
            }
            figures.push(Placement {
                bbox,
                ground_y: feet,
                alpha: alpha.clone(),
            });
            bodies.push((rgb, alpha));
            break;
        }
    }
    let mut image = shade(&image, &shadow)?;
    for (rgb, alpha) in &bodies {
        image = alpha_blend(&image, rgb, alpha);
    }
    Ok(Background {
        image,
        ground,
        horizon,
        figures,
        shadow,
    })
}

/// Environment panorama of ambient sky light plus a sun lobe around `light`.
pub fn environment(light: &Light, cfg: &DataConfig) -> Result<IllumMap> {
    let (h, w) = (cfg.panorama_height, 2 * cfg.panorama_height);
    let ambient = [0.8, 0.9, 1.0].map(|v| v * cfg.ambient);
    let sun = [1.0, 0.95, 0.85].map(|v| v * cfg.sun);
    let mut t = Tensor::zeros(&[3, h, w]);
    for r in 0..h {
        for c in 0..w {
            let d = pixel_direction(r, c, h, w);
            let cos: f64 = d.iter().zip(&light.dir).map(|(a, b)| a * b).sum();
            let lobe = cos.max(0.0).powf(cfg.lobe_exponent);
            for k in 0..3 {
                t.set3(k, r, c, ambient[k] + sun[k] * lobe);
            }
        }
    }
    IllumMap::new(t)
}

/// One training / composition instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub seed: u64,
    /// Background `[3,N,N]`.
    pub bg: Tensor,
    /// Foreground sprite `[4,s,s]`: color in [-1, 1], then alpha in [0, 1].
    pub fg: Tensor,
    /// Foreground mask in the local patch `[1,n,n]`.
    pub m_f: Tensor,
    pub region: Region,
    /// Direct composite `[3,n,n]`.
    pub x: Tensor,
    /// Real local patch with the object's shadow `[3,n,n]`.
    pub y: Tensor,
    /// Real global image `[3,N,N]`.
    pub y_global: Tensor,
    /// Embedding mask of the region `[1,N,N]`.
    pub m_y: Tensor,
    pub gt_sh: ShCoefficients,
    pub gt_light_dir: [f64; 3],
}

impl CompositeSample {
    pub fn local_size(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn global_size(&self) -> usize {
        self.bg.shape()[1]
    }
}

/// Places the RGBA sprite at the center of an `n x n` canvas and returns
/// `(color [3,n,n], alpha [1,n,n])`.
pub fn place_sprite(fg: &Tensor, n: usize) -> Result<(Tensor, Tensor)> {
    let (c, s, sw) = fg.chw()?;
    if c != 4 || s != sw || s > n {
        return Err(shape_err(
            "place_sprite",
            format!("sprite {:?} for a {n}x{n} patch", fg.shape()),
        ));
    }
    let off = (n - s) / 2;
    let mut rgb = Tensor::zeros(&[3, n, n]);
    let mut alpha = Tensor::zeros(&[1, n, n]);
    for r in 0..s {
        for col in 0..s {
            for k in 0..3 {
                rgb.set3(k, r + off, col + off, fg.at3(k, r, col));
            }
            alpha.set3(0, r + off, col + off, fg.at3(3, r, col));
        }
    }
    Ok((rgb, alpha))
}

/// Direct composite: the sprite alpha-blended over the background patch.
pub fn direct_composite(bg_local: &Tensor, fg_rgb: &Tensor, m_f: &Tensor) -> Tensor {
    alpha_blend(bg_local, fg_rgb, m_f)
}

/// Lowest row where the mask is at least one half.
pub fn feet_row(mask: &Tensor) -> Option<usize> {
    let (_, h, w) = mask.chw().ok()?;
    (0..h)
        .rev()
        .find(|&r| mask.data()[r * w..(r + 1) * w].iter().any(|&m| m >= 0.5))
}

/// Generates scene `seed`; deterministic.
pub fn gen_scene(seed: u64, cfg: &DataConfig) -> Result<CompositeSample> {
    cfg.validate()?;
    let light = sample_light(seed, cfg);
    gen_scene_lit(seed, cfg, light)
}

/// [`gen_scene`] under a given light.
pub fn gen_scene_lit(seed: u64, cfg: &DataConfig, light: Light) -> Result<CompositeSample> {
    cfg.validate()?;
    shadow_step(light.dir, cfg.foreshortening)?;
    let gt_sh = project_to_sh(&environment(&light, cfg)?, cfg.sh_degree)?;
    let (n, s) = (cfg.local_size, cfg.sprite_size);

    let mut layout = stream(seed, 1);
    let mut picks = stream(seed, 3);
    let mut found = None;
    for _ in 0..16 {
        let bg = render_background(&mut layout, cfg, &light)?;
        let boxes: Vec<Rect> = bg.figures.iter().map(|f| f.bbox).collect();
        match select_region(&boxes, 1.0, picks.gen()) {
            Ok(region) => {
                found = Some((bg, region));
                break;
            }
            Err(Error::NoRegionFound { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let (bg, region) = found.ok_or(Error::NoRegionFound { attempts: 16 })?;

    let mut sprite_rng = stream(seed, 2);
    let figure = Figure::random(&mut sprite_rng);
    let width = s as f64 * sprite_rng.gen_range(0.5..0.7);
    let (rgb, alpha) = figure.render(s, s, 0.0, (s as f64 - width) / 2.0, s as f64, width);
    let fg = Tensor::concat_channels(&[&rgb, &alpha])?;

    let bg_local = extract_local(&bg.image, &region, n)?;
    let ground_local =
        extract_local(&bg.ground, &region, n)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let (fg_rgb, m_f) = place_sprite(&fg, n)?;
    let x = direct_composite(&bg_local, &fg_rgb, &m_f);

    let feet = feet_row(&m_f).ok_or_else(|| Error::InvalidArgument("empty sprite".into()))? as f64;
    let cov = shadow_coverage(&m_f, light.dir, feet, &cfg.geometry())?;
    let factor = Tensor::from_fn(&[1, n, n], |i| {
        1.0 - cfg.attenuation * cov.data()[i] * ground_local.data()[i]
    });
    let y = direct_composite(&shade(&bg_local, &factor)?, &fg_rgb, &m_f);
    let (y_global, m_y) = inverse_warp_compose(&bg.image, &y, &region)?;

    Ok(CompositeSample {
        seed,
        bg: bg.image,
        fg,
        m_f,
        region,
        x,
        y,
        y_global,
        m_y,
        gt_sh,
        gt_light_dir: light.dir,
    })
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn mask_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// Writes `[3,H,W]` as RGB, `[4,H,W]` as RGBA (alpha in [0, 1]) or `[1,H,W]`
/// as an 8-bit mask (values in [0, 1]). Colors map linearly from [-1, 1].
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.chw()?;
    let (hu, wu) = (h as u32, w as u32);
    match c {
        1 => GrayImage::from_fn(wu, hu, |x, y| {
            image::Luma([mask_byte(t.at3(0, y as usize, x as usize))])
        })
        .save(path)?,
        3 => RgbImage::from_fn(wu, hu, |x, y| {
            image::Rgb([0, 1, 2].map(|k| to_byte(t.at3(k, y as usize, x as usize))))
        })
        .save(path)?,
        4 => RgbaImage::from_fn(wu, hu, |x, y| {
            let (r, c) = (y as usize, x as usize);
            image::Rgba([
                to_byte(t.at3(0, r, c)),
                to_byte(t.at3(1, r, c)),
                to_byte(t.at3(2, r, c)),
                mask_byte(t.at3(3, r, c)),
            ])
        })
        .save(path)?,
        _ => return Err(shape_err("save_png", format!("cannot store {c} channels"))),
    }
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (k, p) = (i / (h * w), i % (h * w));
        from_byte(img.get_pixel((p % w) as u32, (p / w) as u32)[k])
    }))
}

pub fn load_rgba(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[4, h, w], |i| {
        let (k, p) = (i / (h * w), i % (h * w));
        let b = img.get_pixel((p % w) as u32, (p / w) as u32)[k];
        if k == 3 {
            b as f64 / 255.0
        } else {
            from_byte(b)
        }
    }))
}

pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[1, h, w], |i| {
        img.get_pixel((i % w) as u32, (i / w) as u32)[0] as f64 / 255.0
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub seed: u64,
    pub dir: String,
    pub light_dir: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DataConfig,
    pub config_hash: String,
    pub png_mapping: serde_json::Value,
    pub scenes: Vec<SceneEntry>,
}

fn png_mapping() -> serde_json::Value {
    serde_json::json!({
        "color": "8-bit, byte = round((v + 1) / 2 * 255) for v in [-1, 1]",
        "mask": "8-bit, byte = round(v * 255) for v in [0, 1]; also the fg.png alpha channel",
    })
}

pub fn scene_dir_name(seed: u64) -> String {
    format!("scene_{seed}")
}

pub fn write_scene(dir: &Path, s: &CompositeSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_png(&dir.join("bg.png"), &s.bg)?;
    save_png(&dir.join("fg.png"), &s.fg)?;
    save_png(&dir.join("m_f.png"), &s.m_f)?;
    save_png(&dir.join("x.png"), &s.x)?;
    save_png(&dir.join("y.png"), &s.y)?;
    save_png(&dir.join("Y.png"), &s.y_global)?;
    save_png(&dir.join("m_Y.png"), &s.m_y)?;
    fs::write(
        dir.join("region.json"),
        serde_json::to_string_pretty(&s.region)?,
    )?;
    s.gt_sh.save(&dir.join("sh.json"))?;
    Ok(())
}

pub fn read_region(path: &Path) -> Result<Region> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))
}

/// Reads one scene directory; values carry the PNG quantization.
pub fn read_scene(dir: &Path, seed: u64, light_dir: [f64; 3]) -> Result<CompositeSample> {
    let s = CompositeSample {
        seed,
        bg: load_rgb(&dir.join("bg.png"))?,
        fg: load_rgba(&dir.join("fg.png"))?,
        m_f: load_mask(&dir.join("m_f.png"))?,
        region: read_region(&dir.join("region.json"))?,
        x: load_rgb(&dir.join("x.png"))?,
        y: load_rgb(&dir.join("y.png"))?,
        y_global: load_rgb(&dir.join("Y.png"))?,
        m_y: load_mask(&dir.join("m_Y.png"))?,
        gt_sh: ShCoefficients::load(&dir.join("sh.json"))?,
        gt_light_dir: light_dir,
    };
    let (n, big) = (s.local_size(), s.global_size());
    let shapes_ok = s.bg.shape() == [3, big, big]
        && s.y_global.shape() == [3, big, big]
        && s.m_y.shape() == [1, big, big]
        && s.x.shape() == [3, n, n]
        && s.y.shape() == [3, n, n]
        && s.m_f.shape() == [1, n, n]
        && s.fg.shape()[1] <= n;
    if !shapes_ok {
        return Err(Error::Corpus(format!(
            "{}: inconsistent image sizes",
            dir.display()
        )));
    }
    Ok(s)
}

/// Generates scenes `first_seed .. first_seed + count` into `out`, with a
/// manifest. Scenes are generated in parallel and written in seed order.
pub fn write_corpus(
    out: &Path,
    first_seed: u64,
    count: usize,
    cfg: &DataConfig,
) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut scenes = Vec::with_capacity(count);
    let seeds: Vec<u64> = (0..count as u64).map(|i| first_seed + i).collect();
    for chunk in seeds.chunks(64) {
        let samples: Vec<CompositeSample> = chunk
            .par_iter()
            .map(|&s| gen_scene(s, cfg))
            .collect::<Result<_>>()?;
        for s in &samples {
            let dir = scene_dir_name(s.seed);
            write_scene(&out.join(&dir), s)?;
            scenes.push(SceneEntry {
                seed: s.seed,
                dir,
                light_dir: s.gt_light_dir,
            });
        }
    }
    let manifest = Manifest {
        format_version: CORPUS_VERSION,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        png_mapping: png_mapping(),
        scenes,
    };
    fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub scenes: Vec<CompositeSample>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        if manifest.format_version != CORPUS_VERSION {
            return Err(Error::Corpus(format!(
                "unsupported corpus version {}",
                manifest.format_version
            )));
        }
        if manifest.config_hash != manifest.config.hash() {
            return Err(Error::Corpus(
                "config hash does not match the manifest config".into(),
            ));
        }
        if manifest.scenes.is_empty() {
            return Err(Error::Corpus(format!("{} lists no scenes", path.display())));
        }
        let scenes = manifest
            .scenes
            .par_iter()
            .map(|e| read_scene(&root.join(&e.dir), e.seed, e.light_dir))
            .collect::<Result<Vec<_>>>()?;
        let (n, big) = (scenes[0].local_size(), scenes[0].global_size());
        if scenes
            .iter()
            .any(|s| s.local_size() != n || s.global_size() != big)
            || n != manifest.config.local_size
            || big != manifest.config.global_size
        {
            return Err(Error::Corpus(
                "scene sizes disagree with the manifest".into(),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            scenes,
        })
    }
}
