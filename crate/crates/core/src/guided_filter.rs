//! Guided feature filter.
//!
//! Inside every `(2r+1)^2` window `w_k` a linear model `a_k * S + b_k` is fit
//! to the content `C` by ridge regression,
//!
//! ```text
//! a_k = (mean_k(S*C) - mu_k * Cbar_k) / (sigma_k^2 + eps)
//! b_k = Cbar_k - a_k * mu_k
//! ```
//!
//! and the output applies the window-averaged coefficients to the content,
//! `T_i = abar_i * C_i + bbar_i`. Windows are clipped at the image border.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub radius: usize,
    pub epsilon: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            radius: 4,
            epsilon: 0.01,
        }
    }
}

impl FilterConfig {
    pub fn new(radius: usize, epsilon: f64) -> Result<Self> {
        let cfg = Self { radius, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "guided filter epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Records the filter on a tape; differentiable in both `content` and `style`.
pub fn guided_filter_on(
    tape: &mut Tape,
    content: Var,
    style: Var,
    cfg: FilterConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.value(content).shape().to_vec();
    if shape != tape.value(style).shape() {
        return Err(shape_err(
            "guided_filter",
            format!(
                "content {:?} vs style {:?}",
                shape,
                tape.value(style).shape()
            ),
        ));
    }
    let r = cfg.radius;
    let mu = tape.box_filter(style, r)?;
    let c_bar = tape.box_filter(content, r)?;
    let sc = tape.mul(style, content)?;
    let sc_bar = tape.box_filter(sc, r)?;
    let ss = tape.mul(style, style)?;
    let ss_bar = tape.box_filter(ss, r)?;

    let mu_c = tape.mul(mu, c_bar)?;
    let cov = tape.sub(sc_bar, mu_c)?;
    let mu_mu = tape.mul(mu, mu)?;
    let var = tape.sub(ss_bar, mu_mu)?;
    let eps = tape.constant(Tensor::full(&shape, cfg.epsilon));
    let denom = tape.add(var, eps)?;
    let a = tape.div(cov, denom)?;
    let a_mu = tape.mul(a, mu)?;
    let b = tape.sub(c_bar, a_mu)?;

    let a_bar = tape.box_filter(a, r)?;
    let b_bar = tape.box_filter(b, r)?;
    let ac = tape.mul(a_bar, content)?;
    tape.add(ac, b_bar)
}

/// Filters `content` with `style` as the regression guide.
///
/// Accepts `[H,W]` or `[C,H,W]`; channels are independent.
pub fn guided_filter(content: &Tensor, style: &Tensor, cfg: FilterConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.constant(content.clone());
    let s = tape.constant(style.clone());
    let out = guided_filter_on(&mut tape, c, s, cfg)?;
    Ok(tape.value(out).clone())
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(
            "guided_filter",
            format!("unsupported shape {:?}", t.shape()),
        )),
    }
}

/// Reference implementation: solves every window's regularized 2x2 normal
/// equations directly, then averages coefficients per pixel by explicit
/// enumeration of the windows that contain it. Quadratic in the radius;
/// intended for test-sized inputs.
pub fn guided_filter_bruteforce(
    content: &Tensor,
    style: &Tensor,
    cfg: FilterConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    content.expect_same_shape(style, "guided_filter_bruteforce")?;
    let (nc, h, w) = planes(content)?;
    let r = cfg.radius as isize;
    let window = |y: usize, x: usize| {
        let ys = (y as isize - r).max(0) as usize..((y as isize + r + 1).min(h as isize)) as usize;
        let xs = (x as isize - r).max(0) as usize..((x as isize + r + 1).min(w as isize)) as usize;
        (ys, xs)
    };
    let mut out = vec![0.0; content.len()];
    for ch in 0..nc {
        let cp = &content.data()[ch * h * w..(ch + 1) * h * w];
        let sp = &style.data()[ch * h * w..(ch + 1) * h * w];
        let mut coef = vec![(0.0, 0.0); h * w];
        for y in 0..h {
            for x in 0..w {
                let (ys, xs) = window(y, x);
                let n = (ys.len() * xs.len()) as f64;
                let (mut ms, mut mc) = (0.0, 0.0);
                for yy in ys.clone() {
                    for xx in xs.clone() {
                        ms += sp[yy * w + xx];
                        mc += cp[yy * w + xx];
                    }
                }
                ms /= n;
                mc /= n;
                // Normal equations of sum((a*S + b - C)^2 + eps*a^2), divided by n:
                //   [ E[S^2] + eps   E[S] ] [a]   [ E[SC] ]
                //   [ E[S]           1    ] [b] = [ E[C]  ]
                // Eliminating b with the second row leaves a centered scalar equation.
                let (mut css, mut csc) = (0.0, 0.0);
                for yy in ys.clone() {
                    for xx in xs.clone() {
                        let ds = sp[yy * w + xx] - ms;
                        css += ds * ds;
                        csc += ds * (cp[yy * w + xx] - mc);
                    }
                }
                let pivot = css / n + cfg.epsilon;
                let a = if pivot == 0.0 { 0.0 } else { csc / n / pivot };
                coef[y * w + x] = (a, mc - a * ms);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (ys, xs) = window(y, x);
                let (mut sa, mut sb, mut n) = (0.0, 0.0, 0.0);
                for yy in ys {
                    for xx in xs.clone() {
                        let (a, b) = coef[yy * w + xx];
                        sa += a;
                        sb += b;
                        n += 1.0;
                    }
                }
                out[ch * h * w + y * w + x] = sa / n * cp[y * w + x] + sb / n;
            }
        }
    }
    Tensor::new(content.shape(), out)
}
