//! Wasserstein losses, the Adadelta optimizer and the alternating
//! critic/generator loop over local and global harmonization.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::illumination::{illum_features, reconstruct_illum_map, ShCoefficients, LUMA};
use crate::networks::{
    discriminate_global, discriminate_local, generate_on, ArchConfig, Bound, Checkpoint, Critic,
    Generator, LocalInput, LocalVars, ParamSet,
};
use crate::ops::area_resample;
use crate::stm::{extract_local, Embedding, Region};
use crate::synth_data::{direct_composite, place_sprite, CompositeSample};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Darkening (in luminance, on the [-1, 1] scale) that counts as shadow.
pub const SHADOW_THRESHOLD: f64 = 0.05;

fn batch_mean(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `(L_D_L, L_G_L) = (mean(fake) - mean(real), -mean(fake))`.
pub fn local_adv_losses(fake: &[f64], real: &[f64]) -> Result<(f64, f64)> {
    let (f, r) = (batch_mean(fake)?, batch_mean(real)?);
    Ok((f - r, -f))
}

/// Same algebra as [`local_adv_losses`] for the global critic.
pub fn global_adv_losses(fake: &[f64], real: &[f64]) -> Result<(f64, f64)> {
    local_adv_losses(fake, real)
}

/// Mean absolute deviation between the generator's output on a real patch
/// and the patch itself.
pub fn identity_loss(output: &Tensor, y: &Tensor) -> Result<f64> {
    output.expect_same_shape(y, "identity_loss")?;
    if y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(output
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    #[serde(rename = "lambda_G")]
    pub lambda_g: f64,
    #[serde(rename = "lambda_G_idt")]
    pub lambda_g_idt: f64,
    #[serde(rename = "lambda_D_G")]
    pub lambda_d_g: f64,
    pub clip_c: f64,
    pub d_steps_per_g: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 1.0,
            lambda_g_idt: 5.0,
            lambda_d_g: 1.0,
            clip_c: 0.01,
            d_steps_per_g: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_g, self.lambda_g_idt, self.lambda_d_g];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.clip_c.is_finite() && self.clip_c > 0.0) {
            return Err(Error::Config("clip_c must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss values, one CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_d_l: f64,
    pub l_g_l: f64,
    pub l_d_g: f64,
    pub l_g_g: f64,
    pub l_s_idt: f64,
}

/// `(L_G, L_D)` from the individual terms.
pub fn total_losses(p: &LossParts, w: &LossWeights) -> Result<(f64, f64)> {
    let all = [p.l_d_l, p.l_g_l, p.l_d_g, p.l_g_g, p.l_s_idt];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss terms {all:?}")));
    }
    let l_g = p.l_g_l + w.lambda_g * p.l_g_g + w.lambda_g_idt * p.l_s_idt;
    let l_d = p.l_d_l + w.lambda_d_g * p.l_d_g;
    Ok((l_g, l_d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Corpus directory, used when no path is given on the command line.
    pub corpus: Option<String>,
    pub local_size: usize,
    pub global_size: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: None,
            local_size: 32,
            global_size: 64,
            steps: 1000,
            batch_size: 4,
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Rejects scenes whose sizes differ from the configured ones.
    pub fn check_sizes(&self, local: usize, global: usize) -> Result<()> {
        if (local, global) != (self.local_size, self.global_size) {
            return Err(Error::Config(format!(
                "corpus has {local}/{global} px patches/images, the configuration expects {}/{}",
                self.local_size, self.global_size
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.local_size == 0
            || self.local_size % 8 != 0
            || self.global_size % 8 != 0
            || self.local_size > self.global_size
        {
            return Err(Error::Config(format!(
                "image sizes {}/{} must be multiples of 8 with local <= global",
                self.local_size, self.global_size
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) || !(self.eps > 0.0) {
            return Err(Error::Config("rho must be in [0, 1) and eps > 0".into()));
        }
        self.weights.validate()?;
        self.arch.validate()
    }
}

/// Adadelta with a global rate multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: ParamSet,
    pub sq_delta: ParamSet,
}

impl Adadelta {
    pub fn new(params: &ParamSet, lr: f64, rho: f64, eps: f64) -> Self {
        Self {
            lr,
            rho,
            eps,
            sq_grad: params.zeros_like(),
            sq_delta: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(shape_err(
                "adadelta",
                format!("{} gradients for {} tensors", grads.len(), params.len()),
            ));
        }
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        let accs = self
            .sq_grad
            .values_mut()
            .iter_mut()
            .zip(self.sq_delta.values_mut());
        for ((p, g), (eg, ed)) in params.values_mut().iter_mut().zip(grads).zip(accs) {
            p.expect_same_shape(g, "adadelta")?;
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(eg.data_mut().iter_mut().zip(ed.data_mut()));
            for ((p, &g), (eg, ed)) in it {
                *eg = rho * *eg + (1.0 - rho) * g * g;
                let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
                *ed = rho * *ed + (1.0 - rho) * delta * delta;
                *p += lr * delta;
            }
        }
        Ok(())
    }
}

/// A scene with everything the loop needs precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: CompositeSample,
    /// Generator input for the composite.
    pub input: LocalInput,
    /// Generator input for the identity term: the real patch over the
    /// region of the real global image.
    pub identity_input: LocalInput,
    /// Illumination panorama resized to the local patch, `[3,n,n]`.
    pub illum_map: Tensor,
    pub embedding: Embedding,
}

impl Prepared {
    pub fn new(sample: CompositeSample, arch: &ArchConfig) -> Result<Self> {
        let n = sample.local_size();
        let big = sample.global_size();
        if sample.gt_sh.degree != arch.sh_degree {
            return Err(Error::Config(format!(
                "scene {} has SH degree {}, the architecture expects {}",
                sample.seed, sample.gt_sh.degree, arch.sh_degree
            )));
        }
        if n % 8 != 0 {
            return Err(Error::Config(format!(
                "local size {n} is not a multiple of 8"
            )));
        }
        let illum = illum_features(&sample.gt_sh, n / 8, n / 8);
        let pano = reconstruct_illum_map(&sample.gt_sh, n, 2 * n)?;
        let illum_map = area_resample(pano.tensor(), n, n)?;
        let m_f = Arc::new(sample.m_f.clone());
        let input = LocalInput {
            bg: extract_local(&sample.bg, &sample.region, n)?,
            x: sample.x.clone(),
            m_f: m_f.clone(),
            illum: illum.clone(),
        };
        let identity_input = LocalInput {
            bg: extract_local(&sample.y_global, &sample.region, n)?,
            x: sample.y.clone(),
            m_f,
            illum,
        };
        let embedding = Embedding::new(&sample.region, n, n, big, big)?;
        Ok(Self {
            sample,
            input,
            identity_input,
            illum_map,
            embedding,
        })
    }
}

pub fn prepare_all(samples: Vec<CompositeSample>, arch: &ArchConfig) -> Result<Vec<Prepared>> {
    if samples.is_empty() {
        return Err(Error::Corpus("no scenes to train on".into()));
    }
    samples
        .into_par_iter()
        .map(|s| Prepared::new(s, arch))
        .collect()
}

/// Critic scores of one generated patch against the real data.
struct Scores {
    fake_l: Var,
    real_l: Var,
    fake_g: Var,
    real_g: Var,
}

fn score_pair(tape: &mut Tape, dl: &Bound, dg: &Bound, p: &Prepared, x_h: Var) -> Result<Scores> {
    let illum = tape.constant(p.illum_map.clone());
    let y = tape.constant(p.sample.y.clone());
    let bg = tape.constant(p.sample.bg.clone());
    let yg = tape.constant(p.sample.y_global.clone());
    let mask = tape.constant((*p.embedding.mask).clone());
    let m_y = tape.constant(p.sample.m_y.clone());
    let fake_l = discriminate_local(tape, dl, x_h, illum)?;
    let real_l = discriminate_local(tape, dl, y, illum)?;
    let x_global = p.embedding.apply_on(tape, bg, x_h)?;
    let fake_g = discriminate_global(tape, dg, x_global, mask)?;
    let real_g = discriminate_global(tape, dg, yg, m_y)?;
    Ok(Scores {
        fake_l,
        real_l,
        fake_g,
        real_g,
    })
}

/// Per-sample generator objective recorded on `tape`; returns
/// `(loss, fake_local, fake_global, identity)`.
pub fn generator_objective_on(
    tape: &mut Tape,
    g: &Bound,
    dl: &Bound,
    dg: &Bound,
    arch: &ArchConfig,
    w: &LossWeights,
    p: &Prepared,
    input: &LocalVars,
) -> Result<(Var, Var, Var, Var)> {
    let out = generate_on(tape, g, arch, input)?;
    let s = score_pair(tape, dl, dg, p, out.x_h)?;
    let idt_in = p.identity_input.bind(tape);
    let idt = generate_on(tape, g, arch, &idt_in)?;
    let y = tape.constant(p.sample.y.clone());
    let diff = tape.sub(idt.x_h, y)?;
    let abs = tape.abs(diff);
    let l_idt = tape.mean(abs);
    let adv_l = tape.scale(s.fake_l, -1.0);
    let adv_g = tape.scale(s.fake_g, -w.lambda_g);
    let idt_term = tape.scale(l_idt, w.lambda_g_idt);
    let sum = tape.add(adv_l, adv_g)?;
    let loss = tape.add(sum, idt_term)?;
    Ok((loss, s.fake_l, s.fake_g, l_idt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub generator: Generator,
    pub local_critic: Critic,
    pub global_critic: Critic,
    pub opt_g: Adadelta,
    pub opt_dl: Adadelta,
    pub opt_dg: Adadelta,
    pub history: Vec<(u64, LossParts)>,
}

/// Outcome of one alternating step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossParts,
    /// Largest critic weight magnitude seen after each critic update.
    pub max_critic_weight: f64,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sum_grads(parts: Vec<Vec<Tensor>>, scale: f64) -> Vec<Tensor> {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.axpy(1.0, b).expect("matching gradient shapes");
        }
    }
    for a in &mut acc {
        *a = a.scale(scale);
    }
    acc
}

fn grads_of(tape: &Tape, out: Var, vars: &[Var], like: &ParamSet) -> Result<Vec<Tensor>> {
    let g = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(like.values())
        .map(|(&v, t)| g.get_or_zeros(v, t))
        .collect())
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, u64::MAX);
        let generator = Generator::new(config.arch.clone(), &mut rng)?;
        let (ch, init, clip) = (
            config.arch.critic_channels,
            config.arch.init,
            config.weights.clip_c,
        );
        let local_critic = Critic::new(6, ch, init, clip, &mut rng);
        let global_critic = Critic::new(4, ch, init, clip, &mut rng);
        let opt = |p: &ParamSet| Adadelta::new(p, config.lr, config.rho, config.eps);
        Ok(Self {
            opt_g: opt(&generator.params),
            opt_dl: opt(&local_critic.params),
            opt_dg: opt(&global_critic.params),
            generator,
            local_critic,
            global_critic,
            step: 0,
            history: Vec::new(),
            config,
        })
    }

    fn critic_update(&mut self, data: &[Prepared], batch: &[usize]) -> Result<(f64, f64)> {
        let (gen, dl, dg) = (&self.generator, &self.local_critic, &self.global_critic);
        let w = self.config.weights;
        let per: Vec<_> = batch
            .par_iter()
            .map(|&i| -> Result<_> {
                let p = &data[i];
                let fake = gen.forward(&p.input)?.x_h;
                let mut tape = Tape::new();
                let bl = dl.params.bind(&mut tape, true);
                let bg = dg.params.bind(&mut tape, true);
                let x_h = tape.constant(fake);
                let s = score_pair(&mut tape, &bl, &bg, p, x_h)?;
                let dl_loss = tape.sub(s.fake_l, s.real_l)?;
                let dg_loss = tape.sub(s.fake_g, s.real_g)?;
                let weighted = tape.scale(dg_loss, w.lambda_d_g);
                let loss = tape.add(dl_loss, weighted)?;
                let gl = grads_of(&tape, loss, bl.vars(), &dl.params)?;
                let gg = grads_of(&tape, loss, bg.vars(), &dg.params)?;
                let v = |x: Var| tape.value(x).data()[0];
                Ok(([v(s.fake_l), v(s.real_l), v(s.fake_g), v(s.real_g)], gl, gg))
            })
            .collect::<Result<_>>()?;
        let mut scores = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        let (mut gls, mut ggs) = (Vec::new(), Vec::new());
        for (s, gl, gg) in per {
            for k in 0..4 {
                scores[k].push(s[k]);
            }
            gls.push(gl);
            ggs.push(gg);
        }
        let (l_d_l, _) = local_adv_losses(&scores[0], &scores[1])?;
        let (l_d_g, _) = global_adv_losses(&scores[2], &scores[3])?;
        let inv = 1.0 / batch.len() as f64;
        self.opt_dl
            .step(&mut self.local_critic.params, &sum_grads(gls, inv))?;
        self.opt_dg
            .step(&mut self.global_critic.params, &sum_grads(ggs, inv))?;
        self.local_critic.params.clamp(w.clip_c);
        self.global_critic.params.clamp(w.clip_c);
        Ok((l_d_l, l_d_g))
    }

    fn generator_update(&mut self, data: &[Prepared], batch: &[usize]) -> Result<(f64, f64, f64)> {
        let (gen, dl, dg) = (&self.generator, &self.local_critic, &self.global_critic);
        let (arch, w) = (&self.config.arch, self.config.weights);
        let per: Vec<_> = batch
            .par_iter()
            .map(|&i| -> Result<_> {
                let p = &data[i];
                let mut tape = Tape::new();
                let bgen = gen.params.bind(&mut tape, true);
                let bl = dl.params.bind(&mut tape, false);
                let bg = dg.params.bind(&mut tape, false);
                let input = p.input.bind(&mut tape);
                let (loss, fl, fg, idt) =
                    generator_objective_on(&mut tape, &bgen, &bl, &bg, arch, &w, p, &input)?;
                let grads = grads_of(&tape, loss, bgen.vars(), &gen.params)?;
                let v = |x: Var| tape.value(x).data()[0];
                Ok(([v(fl), v(fg), v(idt)], grads))
            })
            .collect::<Result<_>>()?;
        let mut vals = [Vec::new(), Vec::new(), Vec::new()];
        let mut grads = Vec::new();
        for (s, g) in per {
            for k in 0..3 {
                vals[k].push(s[k]);
            }
            grads.push(g);
        }
        let (_, l_g_l) = local_adv_losses(&vals[0], &vals[0])?;
        let (_, l_g_g) = global_adv_losses(&vals[1], &vals[1])?;
        let l_idt = batch_mean(&vals[2])?;
        self.opt_g.step(
            &mut self.generator.params,
            &sum_grads(grads, 1.0 / batch.len() as f64),
        )?;
        Ok((l_g_l, l_g_g, l_idt))
    }

    /// `d_steps_per_g` critic updates, each followed by clipping, then one
    /// generator update. Batches are drawn from a stream keyed by the step.
    pub fn train_step(&mut self, data: &[Prepared]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rng = rng_for(self.config.seed, self.step);
        let size = self.config.batch_size;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            (0..size).map(|_| rng.gen_range(0..data.len())).collect()
        };
        let mut parts = LossParts::default();
        let mut max_w: f64 = 0.0;
        for _ in 0..self.config.weights.d_steps_per_g {
            let batch = draw(&mut rng);
            (parts.l_d_l, parts.l_d_g) = self.critic_update(data, &batch)?;
            max_w = max_w
                .max(self.local_critic.params.max_abs())
                .max(self.global_critic.params.max_abs());
        }
        let batch = draw(&mut rng);
        (parts.l_g_l, parts.l_g_g, parts.l_s_idt) = self.generator_update(data, &batch)?;
        total_losses(&parts, &self.config.weights)
            .map_err(|e| Error::NonFinite(format!("step {}: {e}", self.step + 1)))?;
        if !self.generator.params.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: generator weights",
                self.step + 1
            )));
        }
        self.step += 1;
        self.history.push((self.step, parts));
        Ok(StepReport {
            step: self.step,
            losses: parts,
            max_critic_weight: max_w,
        })
    }

    /// Runs until `config.steps`, calling `on_step` after every step.
    pub fn train(
        &mut self,
        data: &[Prepared],
        mut on_step: impl FnMut(&StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.steps {
            let r = self.train_step(data)?;
            on_step(&r)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            step: self.step,
            config: serde_json::to_value(&self.config).expect("config serializes"),
            tensors: Vec::new(),
        };
        ck.push_set("gen", &self.generator.params);
        ck.push_set("dl", &self.local_critic.params);
        ck.push_set("dg", &self.global_critic.params);
        for (name, opt) in [
            ("opt_gen", &self.opt_g),
            ("opt_dl", &self.opt_dl),
            ("opt_dg", &self.opt_dg),
        ] {
            ck.push_set(&format!("{name}/sq_grad"), &opt.sq_grad);
            ck.push_set(&format!("{name}/sq_delta"), &opt.sq_delta);
        }
        ck
    }

    /// Restores a state; the loss history starts empty.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad training config: {e}")))?;
        config.validate()?;
        let generator = Generator::from_params(config.arch.clone(), ck.take_set("gen")?)?;
        let ch = config.arch.critic_channels;
        let local_critic = Critic::from_params(6, ch, ck.take_set("dl")?)?;
        let global_critic = Critic::from_params(4, ch, ck.take_set("dg")?)?;
        let opt = |name: &str, like: &ParamSet| -> Result<Adadelta> {
            let sq_grad = ck.take_set(&format!("{name}/sq_grad"))?;
            let sq_delta = ck.take_set(&format!("{name}/sq_delta"))?;
            let same = |s: &ParamSet| {
                s.names() == like.names()
                    && s.values()
                        .iter()
                        .zip(like.values())
                        .all(|(a, b)| a.shape() == b.shape())
            };
            if !same(&sq_grad) || !same(&sq_delta) {
                return Err(Error::Checkpoint(format!(
                    "{name} accumulators do not match the parameters"
                )));
            }
            Ok(Adadelta {
                lr: config.lr,
                rho: config.rho,
                eps: config.eps,
                sq_grad,
                sq_delta,
            })
        };
        Ok(Self {
            opt_g: opt("opt_gen", &generator.params)?,
            opt_dl: opt("opt_dl", &local_critic.params)?,
            opt_dg: opt("opt_dg", &global_critic.params)?,
            generator,
            local_critic,
            global_critic,
            step: ck.step,
            history: Vec::new(),
            config,
        })
    }
}

pub const CSV_HEADER: &str = "step,L_D_L,L_G_L,L_D_G,L_G_G,L_S_idt";

pub fn csv_row(step: u64, p: &LossParts) -> String {
    format!(
        "{step},{},{},{},{},{}",
        p.l_d_l, p.l_g_l, p.l_d_g, p.l_g_g, p.l_s_idt
    )
}

/// Appends rows to a loss CSV, writing the header if the file is new.
pub fn append_csv(path: &Path, rows: &[(u64, LossParts)]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(f, "{CSV_HEADER}")?;
    }
    for (s, p) in rows {
        writeln!(f, "{}", csv_row(*s, p))?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[(u64, LossParts)]) -> Result<()> {
    File::create(path)?;
    std::fs::remove_file(path)?;
    append_csv(path, rows)
}

fn luminance_at(t: &Tensor, p: usize) -> f64 {
    let plane = t.shape()[1] * t.shape()[2];
    (0..3).map(|k| LUMA[k] * t.data()[k * plane + p]).sum()
}

/// Vector `(d_col, d_row)` from the foreground centroid to the centroid of
/// pixels outside the foreground darkened by more than [`SHADOW_THRESHOLD`];
/// `None` when nothing is darkened.
pub fn shadow_axis(x: &Tensor, out: &Tensor, m_f: &Tensor) -> Result<Option<[f64; 2]>> {
    x.expect_same_shape(out, "shadow_axis")?;
    let (_, h, w) = x.chw()?;
    if m_f.shape() != [1, h, w] {
        return Err(shape_err(
            "shadow_axis",
            format!("mask {:?} for image {:?}", m_f.shape(), x.shape()),
        ));
    }
    let centroid = |pick: &dyn Fn(usize) -> bool| {
        let (mut n, mut r, mut c) = (0.0, 0.0, 0.0);
        for p in (0..h * w).filter(|&p| pick(p)) {
            n += 1.0;
            r += (p / w) as f64;
            c += (p % w) as f64;
        }
        (n > 0.0).then(|| [c / n, r / n])
    };
    let Some(fg) = centroid(&|p| m_f.data()[p] >= 0.5) else {
        return Ok(None);
    };
    let dark = centroid(&|p| {
        m_f.data()[p] < 0.5 && luminance_at(x, p) - luminance_at(out, p) > SHADOW_THRESHOLD
    });
    Ok(dark.map(|d| [d[0] - fg[0], d[1] - fg[1]]))
}

fn angle_2d_deg(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1];
    let n = (a[0].hypot(a[1]) * b[0].hypot(b[1])).max(f64::MIN_POSITIVE);
    (dot / n).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowStats {
    pub scenes: usize,
    /// Scenes whose output darkens nothing outside the foreground.
    pub no_shadow: usize,
    /// Scenes whose ground truth casts no visible shadow; excluded.
    pub no_reference: usize,
    pub median_deg: Option<f64>,
    pub mean_deg: Option<f64>,
    pub detected_fraction: f64,
    pub errors_deg: Vec<f64>,
}

/// Angular error of each output's shadow axis against the axis of the
/// analytic shadowed patch `y`. Items are `(sample, output patch)`.
pub fn shadow_direction_stats<'a>(
    items: impl IntoIterator<Item = (&'a CompositeSample, &'a Tensor)>,
) -> Result<ShadowStats> {
    let (mut scenes, mut no_shadow, mut no_reference) = (0, 0, 0);
    let mut errors = Vec::new();
    for (s, out) in items {
        scenes += 1;
        let Some(truth) = shadow_axis(&s.x, &s.y, &s.m_f)? else {
            no_reference += 1;
            continue;
        };
        match shadow_axis(&s.x, out, &s.m_f)? {
            Some(a) => errors.push(angle_2d_deg(a, truth)),
            None => no_shadow += 1,
        }
    }
    let mean = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
    let median = (!errors.is_empty()).then(|| {
        let mut v = errors.clone();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 0 {
            (v[m - 1] + v[m]) / 2.0
        } else {
            v[m]
        }
    });
    let judged = scenes - no_reference;
    Ok(ShadowStats {
        scenes,
        no_shadow,
        no_reference,
        median_deg: median,
        mean_deg: mean,
        detected_fraction: if judged == 0 {
            0.0
        } else {
            errors.len() as f64 / judged as f64
        },
        errors_deg: errors,
    })
}

/// Runs the generator on held-out scenes and scores the shadow directions.
pub fn evaluate_shadow_direction(gen: &Generator, scenes: &[Prepared]) -> Result<ShadowStats> {
    let outs = scenes
        .par_iter()
        .map(|p| Ok(gen.forward(&p.input)?.x_h))
        .collect::<Result<Vec<_>>>()?;
    shadow_direction_stats(scenes.iter().map(|p| &p.sample).zip(&outs))
}

/// Mean identity loss of the generator over scenes.
pub fn evaluate_identity(gen: &Generator, scenes: &[Prepared]) -> Result<f64> {
    let losses = scenes
        .par_iter()
        .map(|p| identity_loss(&gen.forward(&p.identity_input)?.x_h, &p.sample.y))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(&losses)
}

/// Outputs of composing one foreground into a background.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    /// Direct composite pasted into the background, `[3,H,W]`.
    pub direct: Tensor,
    /// Harmonized local patch, `[3,n,n]`.
    pub local: Tensor,
    /// Harmonized patch composited into the background, `[3,H,W]`.
    pub global: Tensor,
    /// Region mask, `[1,H,W]`.
    pub mask: Tensor,
}

/// Places the `[3,s,s]` foreground and `[1,s,s]` mask at the center of an
/// `n x n` patch over `region`, runs the generator and composites back.
pub fn harmonize(
    gen: &Generator,
    background: &Tensor,
    fg: &Tensor,
    fg_mask: &Tensor,
    region: &Region,
    sh: &ShCoefficients,
    n: usize,
) -> Result<Composition> {
    let (c, big_h, big_w) = background.chw()?;
    let (fc, s, sw) = fg.chw()?;
    if c != 3 || fc != 3 {
        return Err(shape_err(
            "harmonize",
            "background and foreground must be RGB".to_string(),
        ));
    }
    if fg_mask.shape() != [1, s, sw] {
        return Err(shape_err(
            "harmonize",
            format!(
                "mask {:?} does not match foreground {:?}",
                fg_mask.shape(),
                fg.shape()
            ),
        ));
    }
    if sh.degree != gen.arch.sh_degree {
        return Err(Error::Config(format!(
            "illumination has degree {}, the generator expects {}",
            sh.degree, gen.arch.sh_degree
        )));
    }
    if n == 0 || n % 8 != 0 {
        return Err(Error::Config(format!(
            "local size {n} is not a multiple of 8"
        )));
    }
    let rgba = Tensor::concat_channels(&[fg, fg_mask])?;
    let (fg_rgb, m_f) = place_sprite(&rgba, n)?;
    let bg_local = extract_local(background, region, n)?;
    let x = direct_composite(&bg_local, &fg_rgb, &m_f);
    let input = LocalInput {
        bg: bg_local,
        x: x.clone(),
        m_f: Arc::new(m_f),
        illum: illum_features(sh, n / 8, n / 8),
    };
    let local = gen.forward(&input)?.x_h;
    let emb = Embedding::new(region, n, n, big_h, big_w)?;
    Ok(Composition {
        direct: emb.compose(background, &x)?,
        global: emb.compose(background, &local)?,
        local,
        mask: (*emb.mask).clone(),
    })
}
