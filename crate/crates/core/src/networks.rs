//! Generator and critics.
//!
//! The generator shares one encoder between two decoders. The shadow decoder
//! sees the encoder features concatenated with the illumination coefficients;
//! the texture decoder produces a style feature that restyles the projected
//! foreground through the guided filter. Both decoders use nearest-neighbour
//! upsampling followed by a 3x3 convolution, with U-Net skips from the
//! encoder. Critics are four stride-2 convolutions and a mean-pooled score.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::guided_filter::{guided_filter_on, FilterConfig};
use crate::illumination::coeff_count;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Random,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Encoder widths; the decoders mirror them.
    pub enc_channels: [usize; 3],
    /// Degree of the illumination coefficients fed to the shadow decoder.
    pub sh_degree: usize,
    pub filter: FilterConfig,
    pub critic_channels: [usize; 3],
    pub init: Init,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            enc_channels: [8, 16, 32],
            sh_degree: 2,
            filter: FilterConfig::default(),
            critic_channels: [8, 16, 32],
            init: Init::Random,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self
            .enc_channels
            .iter()
            .chain(&self.critic_channels)
            .any(|&c| c == 0)
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        self.filter.validate()
    }

    /// Number of illumination feature channels: coefficients times 3 colors.
    pub fn illum_channels(&self) -> usize {
        3 * coeff_count(self.sh_degree)
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::new();
        let (mut names, mut values) = (Vec::new(), Vec::new());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter {name}"
                )));
            }
            names.push(name);
            values.push(t);
        }
        Ok(Self {
            names,
            values,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn clamp(&mut self, bound: f64) {
        for t in &mut self.values {
            for v in t.data_mut() {
                *v = v.clamp(-bound, bound);
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `tape`, as leaves when `trainable`.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }

    /// Binds every tensor as a constant except `name`, which is `var`.
    pub fn bind_replacing<'a>(
        &'a self,
        tape: &mut Tape,
        name: &str,
        var: Var,
    ) -> Result<Bound<'a>> {
        let at = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if tape.value(var).shape() != self.values[at].shape() {
            return Err(shape_err(
                "bind_replacing",
                format!("{name} has shape {:?}", self.values[at].shape()),
            ));
        }
        let mut bound = self.bind(tape, false);
        bound.vars[at] = var;
        Ok(bound)
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, tape: &mut Tape, layer: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{layer}.w"))?;
        let b = self.var(&format!("{layer}.b"))?;
        let y = tape.conv2d(x, w, stride, pad)?;
        tape.add_bias(y, b)
    }
}

fn conv_entries(layers: &[(&str, usize, usize, usize)]) -> Vec<(String, Vec<usize>)> {
    layers
        .iter()
        .flat_map(|&(name, c_out, c_in, k)| {
            [
                (format!("{name}.w"), vec![c_out, c_in, k, k]),
                (format!("{name}.b"), vec![c_out]),
            ]
        })
        .collect()
}

fn init_params(layout: Vec<(String, Vec<usize>)>, init: Init, rng: &mut impl Rng) -> ParamSet {
    let entries = layout
        .into_iter()
        .map(|(name, shape)| {
            let t = match (init, shape.len()) {
                (Init::Random, 4) => {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                }
                _ => Tensor::zeros(&shape),
            };
            (name, t)
        })
        .collect();
    ParamSet::new(entries).expect("layer names are unique")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub arch: ArchConfig,
    pub params: ParamSet,
}

impl Generator {
    pub fn layout(arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3] = arch.enc_channels;
        let m = arch.illum_channels();
        conv_entries(&[
            ("enc1", c1, 6, 3),
            ("enc2", c2, c1, 3),
            ("enc3", c3, c2, 3),
            ("shadow1", c2, c3 + m, 3),
            ("shadow2", c1, 2 * c2, 3),
            ("shadow3", c1, 2 * c1 + 6, 3),
            ("shadow_out", 3, c1, 3),
            ("texture1", c2, c3, 3),
            ("texture2", c1, 2 * c2, 3),
            ("texture3", c1, 2 * c1, 3),
            ("content_proj", c1, 3, 1),
            ("texture_out", 3, c1, 3),
        ])
    }

    pub fn new(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let params = init_params(Self::layout(&arch), arch.init, rng);
        Ok(Self { arch, params })
    }

    /// Rebuilds a generator from stored tensors, checking every shape.
    pub fn from_params(arch: ArchConfig, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        check_layout(&Self::layout(&arch), &params, "generator")?;
        Ok(Self { arch, params })
    }

    /// Runs both branches on tensors and returns `(x_s, x_t, x_h)`.
    pub fn forward(&self, input: &LocalInput) -> Result<LocalOutput> {
        let mut tape = Tape::new();
        let g = self.params.bind(&mut tape, false);
        let vars = input.bind(&mut tape);
        let out = generate_on(&mut tape, &g, &self.arch, &vars)?;
        Ok(LocalOutput {
            x_s: tape.value(out.x_s).clone(),
            x_t: tape.value(out.x_t).clone(),
            x_h: tape.value(out.x_h).clone(),
        })
    }
}

fn check_layout(layout: &[(String, Vec<usize>)], params: &ParamSet, what: &str) -> Result<()> {
    if layout.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{what} expects {} tensors, found {}",
            layout.len(),
            params.len()
        )));
    }
    for (name, shape) in layout {
        let t = params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("{what} is missing {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{what} tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Wasserstein critic over an image concatenated with a conditioning map.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub params: ParamSet,
}

impl Critic {
    pub fn layout(in_channels: usize, channels: [usize; 3]) -> Vec<(String, Vec<usize>)> {
        let [k1, k2, k3] = channels;
        conv_entries(&[
            ("conv1", k1, in_channels, 3),
            ("conv2", k2, k1, 3),
            ("conv3", k3, k2, 3),
            ("conv4", 1, k3, 3),
        ])
    }

    /// Random or zero weights, clipped to `[-clip, clip]`.
    pub fn new(
        in_channels: usize,
        channels: [usize; 3],
        init: Init,
        clip: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = init_params(Self::layout(in_channels, channels), init, rng);
        params.clamp(clip);
        Self {
            in_channels,
            channels,
            params,
        }
    }

    pub fn from_params(in_channels: usize, channels: [usize; 3], params: ParamSet) -> Result<Self> {
        check_layout(&Self::layout(in_channels, channels), &params, "critic")?;
        Ok(Self {
            in_channels,
            channels,
            params,
        })
    }

    pub fn score(&self, img: &Tensor, cond: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let c = self.params.bind(&mut tape, false);
        let i = tape.constant(img.clone());
        let m = tape.constant(cond.clone());
        let s = critic_on(&mut tape, &c, self.in_channels, i, m)?;
        Ok(tape.value(s).data()[0])
    }
}

/// Generator inputs for one local patch.
#[derive(Debug, Clone)]
pub struct LocalInput {
    /// Background patch without the object, `[3,n,n]`.
    pub bg: Tensor,
    /// Direct composite, `[3,n,n]`.
    pub x: Tensor,
    /// Foreground mask, `[1,n,n]`.
    pub m_f: Arc<Tensor>,
    /// Illumination coefficients broadcast to `[M,n/8,n/8]`.
    pub illum: Tensor,
}

impl LocalInput {
    pub fn bind(&self, tape: &mut Tape) -> LocalVars {
        LocalVars {
            bg: tape.constant(self.bg.clone()),
            x: tape.constant(self.x.clone()),
            m_f: self.m_f.clone(),
            illum: tape.constant(self.illum.clone()),
        }
    }
}

pub struct LocalVars {
    pub bg: Var,
    pub x: Var,
    pub m_f: Arc<Tensor>,
    pub illum: Var,
}

#[derive(Debug, Clone)]
pub struct LocalOutput {
    pub x_s: Tensor,
    pub x_t: Tensor,
    pub x_h: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalOutputVars {
    pub x_s: Var,
    pub x_t: Var,
    pub x_h: Var,
}

/// Encoder activations kept for the decoders' skip connections.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub input: Var,
    pub e1: Var,
    pub e2: Var,
    pub e3: Var,
}

pub fn encode(tape: &mut Tape, g: &Bound, bg: Var, x: Var) -> Result<Features> {
    let (c, h, w) = tape.value(x).chw()?;
    if tape.value(bg).shape() != [c, h, w] || c != 3 {
        return Err(shape_err(
            "encode",
            format!(
                "background {:?} vs composite {:?}",
                tape.value(bg).shape(),
                tape.value(x).shape()
            ),
        ));
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(shape_err(
            "encode",
            format!("{h}x{w} is not divisible by 8"),
        ));
    }
    let input = tape.concat(&[bg, x])?;
    let stage = |tape: &mut Tape, layer: &str, v: Var| -> Result<Var> {
        let y = g.conv(tape, layer, v, 2, 1)?;
        Ok(tape.relu(y))
    };
    let e1 = stage(tape, "enc1", input)?;
    let e2 = stage(tape, "enc2", e1)?;
    let e3 = stage(tape, "enc3", e2)?;
    Ok(Features { input, e1, e2, e3 })
}

fn up_conv(tape: &mut Tape, g: &Bound, layer: &str, parts: &[Var]) -> Result<Var> {
    let cat = tape.concat(parts)?;
    let up = tape.upsample2x(cat)?;
    let y = g.conv(tape, layer, up, 1, 1)?;
    Ok(tape.relu(y))
}

/// Decodes encoder features plus illumination into the shadowed image.
pub fn shadow_branch(tape: &mut Tape, g: &Bound, f: &Features, illum: Var) -> Result<Var> {
    let (_, fh, fw) = tape.value(f.e3).chw()?;
    let (_, ih, iw) = tape.value(illum).chw()?;
    if (ih, iw) != (fh, fw) {
        return Err(shape_err(
            "shadow_branch",
            format!("illumination {ih}x{iw} vs features {fh}x{fw}"),
        ));
    }
    let d1 = up_conv(tape, g, "shadow1", &[f.e3, illum])?;
    let d2 = up_conv(tape, g, "shadow2", &[d1, f.e2])?;
    let cat = tape.concat(&[d2, f.e1])?;
    let up = tape.upsample2x(cat)?;
    let with_input = tape.concat(&[up, f.input])?;
    let d3 = g.conv(tape, "shadow3", with_input, 1, 1)?;
    let d3 = tape.relu(d3);
    let out = g.conv(tape, "shadow_out", d3, 1, 1)?;
    Ok(tape.tanh(out))
}

/// Decodes a style feature and transfers it onto the projected foreground
/// content through the guided filter.
pub fn texture_branch(
    tape: &mut Tape,
    g: &Bound,
    f: &Features,
    fg_content: Var,
    cfg: FilterConfig,
) -> Result<Var> {
    let t1 = up_conv(tape, g, "texture1", &[f.e3])?;
    let t2 = up_conv(tape, g, "texture2", &[t1, f.e2])?;
    let style = up_conv(tape, g, "texture3", &[t2, f.e1])?;
    let content = g.conv(tape, "content_proj", fg_content, 1, 0)?;
    if tape.value(content).shape() != tape.value(style).shape() {
        return Err(shape_err(
            "texture_branch",
            format!(
                "content {:?} vs style {:?}",
                tape.value(content).shape(),
                tape.value(style).shape()
            ),
        ));
    }
    let filtered = guided_filter_on(tape, content, style, cfg)?;
    let out = g.conv(tape, "texture_out", filtered, 1, 1)?;
    Ok(tape.tanh(out))
}

/// `x_t * m_f + x_s * (1 - m_f)`.
pub fn compose_local(tape: &mut Tape, x_s: Var, x_t: Var, m_f: Arc<Tensor>) -> Result<Var> {
    tape.blend(x_t, x_s, m_f)
}

/// Full local generator: encoder, both branches and the masked blend.
pub fn generate_on(
    tape: &mut Tape,
    g: &Bound,
    arch: &ArchConfig,
    input: &LocalVars,
) -> Result<LocalOutputVars> {
    let f = encode(tape, g, input.bg, input.x)?;
    let x_s = shadow_branch(tape, g, &f, input.illum)?;
    let m = tape.constant((*input.m_f).clone());
    let m3 = tape.concat(&[m, m, m])?;
    let fg = tape.mul(input.x, m3)?;
    let x_t = texture_branch(tape, g, &f, fg, arch.filter)?;
    let x_h = compose_local(tape, x_s, x_t, input.m_f.clone())?;
    Ok(LocalOutputVars { x_s, x_t, x_h })
}

/// Critic score of `img` concatenated with `cond`.
pub fn critic_on(
    tape: &mut Tape,
    c: &Bound,
    in_channels: usize,
    img: Var,
    cond: Var,
) -> Result<Var> {
    let x = tape.concat(&[img, cond])?;
    let (ch, _, _) = tape.value(x).chw()?;
    if ch != in_channels {
        return Err(shape_err(
            "critic",
            format!("{ch} input channels, critic expects {in_channels}"),
        ));
    }
    let mut h = x;
    for layer in ["conv1", "conv2", "conv3"] {
        let y = c.conv(tape, layer, h, 2, 1)?;
        h = tape.leaky_relu(y, LEAKY_SLOPE);
    }
    let y = c.conv(tape, "conv4", h, 2, 1)?;
    Ok(tape.mean(y))
}

/// Local critic: harmonized patch with the illumination map resized to it.
pub fn discriminate_local(tape: &mut Tape, c: &Bound, img: Var, illum_map: Var) -> Result<Var> {
    if tape.value(illum_map).shape() != tape.value(img).shape() {
        return Err(shape_err(
            "discriminate_local",
            format!(
                "illumination map {:?} vs image {:?}",
                tape.value(illum_map).shape(),
                tape.value(img).shape()
            ),
        ));
    }
    critic_on(tape, c, 6, img, illum_map)
}

/// Global critic: full image with the embedding mask.
pub fn discriminate_global(tape: &mut Tape, c: &Bound, img: Var, mask: Var) -> Result<Var> {
    let (_, h, w) = tape.value(img).chw()?;
    if tape.value(mask).shape() != [1, h, w] {
        return Err(shape_err(
            "discriminate_global",
            format!(
                "mask {:?} vs image {:?}",
                tape.value(mask).shape(),
                tape.value(img).shape()
            ),
        ));
    }
    critic_on(tape, c, 4, img, mask)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Named tensors with a JSON header: an 8-byte little-endian header length,
/// the UTF-8 JSON header, then every tensor's values as little-endian `f64`
/// in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::Checkpoint(format!(
                "implausible header length {len}"
            )));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut buf = [0u8; 8];
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((entry.name, Tensor::new(&entry.shape, data)?));
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            step: header.step,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Appends every tensor of `set` under `prefix/`.
    pub fn push_set(&mut self, prefix: &str, set: &ParamSet) {
        for (name, t) in set.names().iter().zip(set.values()) {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    /// Collects the tensors stored under `prefix/`, in file order.
    pub fn take_set(&self, prefix: &str) -> Result<ParamSet> {
        let p = format!("{prefix}/");
        ParamSet::new(
            self.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
                .collect(),
        )
    }
}
