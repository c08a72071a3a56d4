//! Real spherical-harmonics lighting.
//!
//! Coefficients are stored per colour channel in `(l, m)` order
//! `(0,0), (1,-1), (1,0), (1,1), (2,-2), ...`, flat index `l*l + l + m`.
//! The basis is the orthonormal real basis without the Condon-Shortley
//! phase, so the band-1 functions are proportional to `y`, `z` and `x`.
//!
//! Panoramas are equirectangular `[3,H,W]` tensors; pixel `(r, c)` looks
//! along polar angle `theta = pi*(r+0.5)/H` measured from `+z` (up) and
//! azimuth `phi = 2*pi*(c+0.5)/W` measured from `+x` towards `+y`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rec.601 luma weights used to collapse RGB coefficients to luminance.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Minimum squared band-1 luminance magnitude for a well-defined light direction.
pub const MIN_BAND1_ENERGY: f64 = 1e-9;

/// Per-channel SH coefficients of degree `L` (`(L+1)^2` values per channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShCoefficients {
    pub degree: usize,
    pub channels: [Vec<f64>; 3],
}

pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub const fn sh_index(l: usize, m: isize) -> usize {
    (l * l + l).wrapping_add_signed(m)
}

impl ShCoefficients {
    pub fn new(degree: usize, channels: [Vec<f64>; 3]) -> Result<Self> {
        let c = Self { degree, channels };
        c.validate()?;
        Ok(c)
    }

    pub fn zeros(degree: usize) -> Self {
        let n = coeff_count(degree);
        Self {
            degree,
            channels: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = coeff_count(self.degree);
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "channel {i} has {} coefficients, degree {} needs {n}",
                    ch.len(),
                    self.degree
                )));
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("SH channel {i}")));
            }
        }
        Ok(())
    }

    /// Total number of values across the three channels.
    pub fn total_len(&self) -> usize {
        3 * coeff_count(self.degree)
    }

    /// Channel-major flat vector `[R..., G..., B...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.channels.iter().flatten().copied().collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            degree: self.degree,
            channels: self
                .channels
                .clone()
                .map(|ch| ch.into_iter().map(|v| v * s).collect()),
        }
    }

    /// Luminance coefficients (Rec.601 mix of the three channels).
    pub fn luminance(&self) -> Vec<f64> {
        (0..coeff_count(self.degree))
            .map(|i| (0..3).map(|c| LUMA[c] * self.channels[c][i]).sum())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Associated Legendre functions `P_l^m(x)` for `0 <= m <= l <= degree`,
/// without the Condon-Shortley phase, indexed `[l][m]`.
fn legendre_table(degree: usize, x: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; degree + 1]; degree + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=degree {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        p[m][m] = pmm;
        if m < degree {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=degree {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    p
}

fn factorial_ratio(l: usize, m: usize) -> f64 {
    // (l-m)! / (l+m)!
    ((l - m + 1)..=(l + m)).fold(1.0, |acc, k| acc / k as f64)
}

/// Evaluates the real SH basis at a unit direction. Basis values are written
/// in `(l, m)` order.
pub fn sh_basis(direction: [f64; 3], degree: usize) -> Result<Vec<f64>> {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "SH direction must be unit length, |s| = {norm}"
        )));
    }
    Ok(sh_basis_unchecked(direction, degree))
}

pub(crate) fn sh_basis_unchecked(d: [f64; 3], degree: usize) -> Vec<f64> {
    let [x, y, z] = d;
    let phi = y.atan2(x);
    let p = legendre_table(degree, z.clamp(-1.0, 1.0));
    let mut out = vec![0.0; coeff_count(degree)];
    for l in 0..=degree {
        let base = (2 * l + 1) as f64 / (4.0 * PI);
        out[sh_index(l, 0)] = (base).sqrt() * p[l][0];
        for m in 1..=l {
            let k = (base * factorial_ratio(l, m)).sqrt() * 2f64.sqrt() * p[l][m];
            let mf = m as f64;
            out[sh_index(l, m as isize)] = k * (mf * phi).cos();
            out[sh_index(l, -(m as isize))] = k * (mf * phi).sin();
        }
    }
    out
}

/// Equirectangular radiance panorama `[3,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IllumMap(pub Tensor);

/// Polar and azimuth angle of pixel `(r, c)` in an `h x w` panorama.
pub fn pixel_angles(r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
    (
        PI * (r as f64 + 0.5) / h as f64,
        2.0 * PI * (c as f64 + 0.5) / w as f64,
    )
}

pub fn pixel_direction(r: usize, c: usize, h: usize, w: usize) -> [f64; 3] {
    let (theta, phi) = pixel_angles(r, c, h, w);
    [
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    ]
}

impl IllumMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "illumination map must be [3,H,W] with H,W >= 1, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Separable basis evaluation over an equirectangular grid: the polar part
/// depends only on the row and the azimuthal part only on the column.
struct GridBasis {
    degree: usize,
    /// Per row: normalized `K_l^m P_l^m(cos theta)` for `m >= 0`, indexed `l*l + l + m`.
    polar: Vec<Vec<f64>>,
    /// Per column: `(cos(m phi), sin(m phi))` for `m = 0..=degree`.
    azimuth: Vec<Vec<(f64, f64)>>,
}

impl GridBasis {
    fn new(degree: usize, h: usize, w: usize) -> Self {
        let polar = (0..h)
            .map(|r| {
                let (theta, _) = pixel_angles(r, 0, h, w);
                let p = legendre_table(degree, theta.cos());
                let mut row = vec![0.0; coeff_count(degree)];
                for l in 0..=degree {
                    let base = (2 * l + 1) as f64 / (4.0 * PI);
                    row[sh_index(l, 0)] = base.sqrt() * p[l][0];
                    for m in 1..=l {
                        row[sh_index(l, m as isize)] =
                            (base * factorial_ratio(l, m)).sqrt() * 2f64.sqrt() * p[l][m];
                    }
                }
                row
            })
            .collect();
        let azimuth = (0..w)
            .map(|c| {
                let (_, phi) = pixel_angles(0, c, h, w);
                (0..=degree)
                    .map(|m| ((m as f64 * phi).cos(), (m as f64 * phi).sin()))
                    .collect()
            })
            .collect();
        Self {
            degree,
            polar,
            azimuth,
        }
    }

    fn fill(&self, r: usize, c: usize, out: &mut [f64]) {
        let pol = &self.polar[r];
        let az = &self.azimuth[c];
        for l in 0..=self.degree {
            out[sh_index(l, 0)] = pol[sh_index(l, 0)];
            for (m, &(cm, sm)) in az.iter().enumerate().take(l + 1).skip(1) {
                let k = pol[sh_index(l, m as isize)];
                out[sh_index(l, m as isize)] = k * cm;
                out[sh_index(l, -(m as isize))] = k * sm;
            }
        }
    }
}

/// Evaluates `M(s) = sum_i SH_i y_i(s)` per channel at every panorama pixel.
pub fn reconstruct_illum_map(c: &ShCoefficients, h: usize, w: usize) -> Result<IllumMap> {
    c.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(
            "panorama size must be at least 1x1".into(),
        ));
    }
    let grid = GridBasis::new(c.degree, h, w);
    let mut basis = vec![0.0; coeff_count(c.degree)];
    let mut t = Tensor::zeros(&[3, h, w]);
    for r in 0..h {
        for col in 0..w {
            grid.fill(r, col, &mut basis);
            for ch in 0..3 {
                let v: f64 = c.channels[ch].iter().zip(&basis).map(|(a, b)| a * b).sum();
                t.set3(ch, r, col, v);
            }
        }
    }
    IllumMap::new(t)
}

/// Projects a panorama onto the SH basis with per-pixel solid-angle weight
/// `sin(theta) * (pi/H) * (2*pi/W)`.
pub fn project_to_sh(env: &IllumMap, degree: usize) -> Result<ShCoefficients> {
    let (h, w) = (env.height(), env.width());
    let grid = GridBasis::new(degree, h, w);
    let mut basis = vec![0.0; coeff_count(degree)];
    let mut out = ShCoefficients::zeros(degree);
    let dtheta = PI / h as f64;
    let dphi = 2.0 * PI / w as f64;
    for r in 0..h {
        let (theta, _) = pixel_angles(r, 0, h, w);
        let weight = theta.sin() * dtheta * dphi;
        for col in 0..w {
            grid.fill(r, col, &mut basis);
            for ch in 0..3 {
                let v = env.0.at3(ch, r, col) * weight;
                for (acc, b) in out.channels[ch].iter_mut().zip(&basis) {
                    *acc += v * b;
                }
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Direction of maximal band-1 luminance radiance.
pub fn dominant_light_direction(c: &ShCoefficients) -> Result<[f64; 3]> {
    if c.degree < 1 {
        return Err(Error::DegenerateIllumination { energy: 0.0 });
    }
    let lum = c.luminance();
    let v = [
        lum[sh_index(1, 1)],
        lum[sh_index(1, -1)],
        lum[sh_index(1, 0)],
    ];
    let energy = v.iter().map(|a| a * a).sum::<f64>();
    if energy.is_nan() || energy <= MIN_BAND1_ENERGY {
        return Err(Error::DegenerateIllumination { energy });
    }
    let n = energy.sqrt();
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Tiles the channel-major coefficient vector over an `h x w` grid, giving the
/// `[M,h,w]` conditioning input for the shadow decoder.
pub fn illum_features(c: &ShCoefficients, h: usize, w: usize) -> Tensor {
    let flat = c.flat();
    let plane = h * w;
    Tensor::from_fn(&[flat.len(), h, w], |i| flat[i / plane])
}

/// Angle between two directions, in degrees.
pub fn angle_between_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}
