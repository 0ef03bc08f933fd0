//! The three network families: gated 1-D CNN generators, 2-D CNN critics and
//! the VGG-like speaker classifier, plus parameter containers and the ETGC
//! checkpoint file format.

use crate::autodiff::{fl, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::features::MCEP_DIMS;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    GeneratorXy,
    GeneratorYx,
    CriticX,
    CriticY,
    Classifier,
}

impl NetworkKind {
    pub fn tag(&self) -> &'static str {
        match self {
            NetworkKind::GeneratorXy => "gen_xy",
            NetworkKind::GeneratorYx => "gen_yx",
            NetworkKind::CriticX => "critic_x",
            NetworkKind::CriticY => "critic_y",
            NetworkKind::Classifier => "classifier",
        }
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Param { shape, value, grad: None }
    }
}

/// Ordered parameter collection for one network. Iteration order is
/// insertion order and is part of the checkpoint contract.
#[derive(Debug, Clone)]
pub struct ModelParameters<T> {
    pub kind: NetworkKind,
    pub params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn new(kind: NetworkKind) -> Self {
        ModelParameters { kind, params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Vec<T>) {
        let prev = self.params.insert(name.to_string(), Param::new(shape, value));
        debug_assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::validation(format!("missing parameter `{name}`")))
    }
}

/// Tape handles for one network's parameters within a single forward pass.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::validation(format!("unbound parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }
}

/// Load a parameter set onto a tape. `trainable` controls whether gradients
/// flow into these leaves (frozen networks bind with `false`).
pub fn bind<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParameters<T>,
    trainable: bool,
) -> Result<BoundParams> {
    let mut vars = IndexMap::new();
    for (name, param) in &model.params {
        let v = tape.leaf(param.value.clone(), param.shape.clone(), trainable)?;
        vars.insert(name.clone(), v);
    }
    Ok(BoundParams { vars })
}

// ---- configs ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_residual: usize,
    pub kernel_initial: usize,
    pub kernel_down: usize,
    pub kernel_res: usize,
    pub upsample_factor: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 64,
            n_residual: 6,
            kernel_initial: 15,
            kernel_down: 5,
            kernel_res: 3,
            upsample_factor: 2,
        }
    }
}

impl GeneratorConfig {
    /// Small preset that trains on a single CPU in minutes.
    pub fn desk() -> Self {
        GeneratorConfig { base_channels: 16, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.n_residual < 1 || self.base_channels == 0 {
            return Err(Error::contract(format!(
                "generator config needs n_residual >= 1 and positive channels, got {self:?}"
            )));
        }
        if self.upsample_factor != 2 {
            return Err(Error::contract("generator upsample factor must be 2".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub base_channels: usize,
    pub n_layers: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig { base_channels: 32, n_layers: 4 }
    }
}

impl CriticConfig {
    pub fn desk() -> Self {
        CriticConfig { base_channels: 8, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.base_channels == 0 {
            return Err(Error::contract(format!(
                "critic config needs n_layers >= 2 and positive channels, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub n_speakers: usize,
    pub embedding_dim: usize,
    pub conv_depth: usize,
    pub base_channels: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { n_speakers: 4, embedding_dim: 64, conv_depth: 4, base_channels: 8 }
    }
}

impl ClassifierConfig {
    fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::contract(format!(
                "classifier needs at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.conv_depth < 1 || self.embedding_dim == 0 || self.base_channels == 0 {
            return Err(Error::contract(format!("degenerate classifier config {self:?}")));
        }
        Ok(())
    }
}

// ---- initialization ----

struct Builder<'r, T, R: Rng> {
    model: ModelParameters<T>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng> Builder<'r, T, R> {
    fn new(kind: NetworkKind, rng: &'r mut R) -> Self {
        Builder { model: ModelParameters::new(kind), rng }
    }

    /// Zero-mean Gaussian with std sqrt(2 / fan_in), zero bias.
    fn conv(&mut self, name: &str, shape: Vec<usize>) {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
        let n: usize = shape.iter().product();
        let value: Vec<T> = (0..n).map(|_| fl(normal.sample(self.rng))).collect();
        self.model.insert(&format!("{name}.weight"), shape.clone(), value);
        self.model
            .insert(&format!("{name}.bias"), vec![shape[0]], vec![T::zero(); shape[0]]);
    }

    fn norm(&mut self, name: &str, channels: usize) {
        self.model
            .insert(&format!("{name}.gamma"), vec![channels], vec![T::one(); channels]);
        self.model
            .insert(&format!("{name}.beta"), vec![channels], vec![T::zero(); channels]);
    }
}

// ---- generator ----

/// 1-D gated CNN: initial conv+GLU, 2 downsample blocks, `n_residual`
/// residual blocks, 2 pixel-shuffle upsample blocks, output conv.
pub fn build_generator<T: Scalar>(
    config: &GeneratorConfig,
    kind: NetworkKind,
    rng: &mut impl Rng,
) -> Result<ModelParameters<T>> {
    config.validate()?;
    let c = config.base_channels;
    let mut b = Builder::new(kind, rng);
    b.conv("initial.conv", vec![2 * c, MCEP_DIMS, config.kernel_initial]);
    // downsample: channels double, time halves
    b.conv("down1.conv", vec![4 * c, c, config.kernel_down]);
    b.norm("down1.norm", 4 * c);
    b.conv("down2.conv", vec![8 * c, 2 * c, config.kernel_down]);
    b.norm("down2.norm", 8 * c);
    for i in 0..config.n_residual {
        b.conv(&format!("res{i}.conv1"), vec![8 * c, 4 * c, config.kernel_res]);
        b.norm(&format!("res{i}.norm1"), 8 * c);
        b.conv(&format!("res{i}.conv2"), vec![4 * c, 4 * c, config.kernel_res]);
        b.norm(&format!("res{i}.norm2"), 4 * c);
    }
    // upsample: conv to 2*r*C_target, shuffle, norm, GLU
    b.conv("up1.conv", vec![8 * c, 4 * c, config.kernel_down]);
    b.norm("up1.norm", 4 * c);
    b.conv("up2.conv", vec![4 * c, 2 * c, config.kernel_down]);
    b.norm("up2.norm", 2 * c);
    b.conv("output.conv", vec![MCEP_DIMS, c, config.kernel_initial]);
    Ok(b.model)
}

fn conv1d_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    name: &str,
    input: Var,
    stride: usize,
) -> Result<Var> {
    let w = params.get(&format!("{name}.weight"))?;
    let bias = params.get(&format!("{name}.bias"))?;
    let k = tape.shape(w)[2];
    let y = tape.conv1d(input, w, stride, k / 2)?;
    let spatial = tape.shape(y)[1..].to_vec();
    let b = tape.broadcast_channel(bias, &spatial)?;
    tape.add(y, b)
}

fn norm1d<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    name: &str,
    input: Var,
) -> Result<Var> {
    let gamma = params.get(&format!("{name}.gamma"))?;
    let beta = params.get(&format!("{name}.beta"))?;
    tape.instance_norm(input, gamma, beta, fl(NORM_EPSILON))
}

/// Run the generator on a `[24, T]` segment; `T` must be a multiple of 4 so
/// the two stride-2 blocks divide evenly.
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &GeneratorConfig,
    input: Var,
) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 2 || shape[0] != MCEP_DIMS {
        return Err(Error::dim(format!(
            "generator input must be [{MCEP_DIMS}, T], got {shape:?}"
        )));
    }
    if shape[1] % 4 != 0 {
        return Err(Error::dim(format!(
            "generator time length {} must be divisible by 4",
            shape[1]
        )));
    }
    let mut h = conv1d_block(tape, params, "initial.conv", input, 1)?;
    h = tape.glu(h)?;
    for name in ["down1", "down2"] {
        h = conv1d_block(tape, params, &format!("{name}.conv"), h, 2)?;
        h = norm1d(tape, params, &format!("{name}.norm"), h)?;
        h = tape.glu(h)?;
    }
    for i in 0..config.n_residual {
        let skip = h;
        let mut r = conv1d_block(tape, params, &format!("res{i}.conv1"), h, 1)?;
        r = norm1d(tape, params, &format!("res{i}.norm1"), r)?;
        r = tape.glu(r)?;
        r = conv1d_block(tape, params, &format!("res{i}.conv2"), r, 1)?;
        r = norm1d(tape, params, &format!("res{i}.norm2"), r)?;
        h = tape.add(skip, r)?;
    }
    for name in ["up1", "up2"] {
        h = conv1d_block(tape, params, &format!("{name}.conv"), h, 1)?;
        h = tape.pixel_shuffle_1d(h, config.upsample_factor)?;
        h = norm1d(tape, params, &format!("{name}.norm"), h)?;
        h = tape.glu(h)?;
    }
    conv1d_block(tape, params, "output.conv", h, 1)
}

// ---- critic ----

/// Strided 2-D gated conv stack over the spectral texture, global mean pool,
/// linear head. Channels double per layer.
pub fn build_critic<T: Scalar>(
    config: &CriticConfig,
    kind: NetworkKind,
    rng: &mut impl Rng,
) -> Result<ModelParameters<T>> {
    config.validate()?;
    let mut b = Builder::new(kind, rng);
    let mut c_in = 1;
    for i in 0..config.n_layers {
        let c_out = config.base_channels << i;
        b.conv(&format!("layer{i}.conv"), vec![2 * c_out, c_in, 3, 3]);
        if i > 0 {
            b.norm(&format!("layer{i}.norm"), 2 * c_out);
        }
        c_in = c_out;
    }
    // linear head on the pooled features
    let normal = Normal::new(0.0, (2.0 / c_in as f64).sqrt()).expect("std > 0");
    let w: Vec<T> = (0..c_in).map(|_| fl(normal.sample(b.rng))).collect();
    b.model.insert("head.weight", vec![1, c_in], w);
    b.model.insert("head.bias", vec![1], vec![T::zero()]);
    Ok(b.model)
}

fn conv2d_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    name: &str,
    input: Var,
    stride: (usize, usize),
) -> Result<Var> {
    let w = params.get(&format!("{name}.weight"))?;
    let bias = params.get(&format!("{name}.bias"))?;
    let (kh, kw) = (tape.shape(w)[2], tape.shape(w)[3]);
    let y = tape.conv2d(input, w, stride, (kh / 2, kw / 2))?;
    let spatial = tape.shape(y)[1..].to_vec();
    let b = tape.broadcast_channel(bias, &spatial)?;
    tape.add(y, b)
}

/// Unbounded critic score for one `[1, 24, T]` spectral texture. With
/// `sigmoid_head` the score is squashed into (0,1) for the classic GAN mode.
pub fn critic_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &CriticConfig,
    input: Var,
    sigmoid_head: bool,
) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != MCEP_DIMS {
        return Err(Error::dim(format!(
            "critic input must be [1, {MCEP_DIMS}, T], got {shape:?}"
        )));
    }
    let mut h = input;
    for i in 0..config.n_layers {
        h = conv2d_block(tape, params, &format!("layer{i}.conv"), h, (2, 2))?;
        if i > 0 {
            h = norm1d(tape, params, &format!("layer{i}.norm"), h)?;
        }
        h = tape.glu(h)?;
    }
    // global mean pool over the remaining grid
    let pooled_sum = tape.channel_sum(h)?;
    let spatial: usize = tape.shape(h)[1..].iter().product();
    let pooled = tape.scale(pooled_sum, fl(1.0 / spatial as f64));
    let w = params.get("head.weight")?;
    let b = params.get("head.bias")?;
    let score = tape.linear(pooled, w, b)?;
    if sigmoid_head {
        Ok(tape.sigmoid(score))
    } else {
        Ok(score)
    }
}

// ---- speaker classifier ----

/// VGG-like conv stack, mean pool, bottleneck embedding, softmax head. The
/// head (`head.*`) is the one layer transfer learning re-initializes.
pub fn build_classifier<T: Scalar>(
    config: &ClassifierConfig,
    rng: &mut impl Rng,
) -> Result<ModelParameters<T>> {
    config.validate()?;
    let mut b = Builder::new(NetworkKind::Classifier, rng);
    let mut c_in = 1;
    for i in 0..config.conv_depth {
        let c_out = config.base_channels << i;
        b.conv(&format!("layer{i}.conv"), vec![c_out, c_in, 3, 3]);
        c_in = c_out;
    }
    let normal = Normal::new(0.0, (2.0 / c_in as f64).sqrt()).expect("std > 0");
    let w: Vec<T> =
        (0..config.embedding_dim * c_in).map(|_| fl(normal.sample(b.rng))).collect();
    b.model.insert("embed.weight", vec![config.embedding_dim, c_in], w);
    b.model
        .insert("embed.bias", vec![config.embedding_dim], vec![T::zero(); config.embedding_dim]);
    let normal = Normal::new(0.0, (2.0 / config.embedding_dim as f64).sqrt()).expect("std > 0");
    let w: Vec<T> = (0..config.n_speakers * config.embedding_dim)
        .map(|_| fl(normal.sample(b.rng)))
        .collect();
    b.model.insert("head.weight", vec![config.n_speakers, config.embedding_dim], w);
    b.model
        .insert("head.bias", vec![config.n_speakers], vec![T::zero(); config.n_speakers]);
    Ok(b.model)
}

/// Returns `(probs, embedding)`: a distribution over speakers and the
/// pre-softmax bottleneck activation.
pub fn classifier_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ClassifierConfig,
    input: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 3 || shape[0] != 1 || shape[1] != MCEP_DIMS {
        return Err(Error::dim(format!(
            "classifier input must be [1, {MCEP_DIMS}, T], got {shape:?}"
        )));
    }
    let mut h = input;
    for i in 0..config.conv_depth {
        h = conv2d_block(tape, params, &format!("layer{i}.conv"), h, (2, 2))?;
        h = tape.leaky_relu(h, fl(LEAKY_SLOPE));
    }
    let pooled_sum = tape.channel_sum(h)?;
    let spatial: usize = tape.shape(h)[1..].iter().product();
    let pooled = tape.scale(pooled_sum, fl(1.0 / spatial as f64));
    let ew = params.get("embed.weight")?;
    let eb = params.get("embed.bias")?;
    let embedding = tape.linear(pooled, ew, eb)?;
    let act = tape.leaky_relu(embedding, fl(LEAKY_SLOPE));
    let hw = params.get("head.weight")?;
    let hb = params.get("head.bias")?;
    let logits = tape.linear(act, hw, hb)?;
    let probs = tape.softmax(logits)?;
    Ok((probs, embedding))
}

// ---- checkpoint container ----

const CKPT_MAGIC: &[u8; 4] = b"ETGC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: serde_json::Value,
    iteration: u64,
    tensors: Vec<TensorMeta>,
}

/// Write a named-tensor checkpoint: magic, version, length-prefixed JSON
/// header, then float32 payloads in header order.
pub fn write_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    iteration: u64,
    tensors: &IndexMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<()> {
    let header = CheckpointHeader {
        config: config.clone(),
        iteration,
        tensors: tensors
            .iter()
            .map(|(name, (shape, _))| TensorMeta { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    w.write_u32::<LittleEndian>(header_bytes.len() as u32)?;
    w.write_all(&header_bytes)?;
    for (name, (shape, data)) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "tensor `{name}` data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        for &v in data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_checkpoint`].
#[allow(clippy::type_complexity)]
pub fn read_checkpoint(
    path: &Path,
) -> Result<(serde_json::Value, u64, IndexMap<String, (Vec<usize>, Vec<f32>)>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(format!(
            "{}: bad checkpoint magic {:?}, expected \"ETGC\"",
            path.display(),
            magic
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let header_len = r.read_u32::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(format!("{}: bad header: {e}", path.display())))?;
    let mut tensors = IndexMap::new();
    for meta in header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut data = vec![0.0f32; n];
        for v in data.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: truncated tensor `{}`: {e}", path.display(), meta.name),
                ))
            })?;
        }
        tensors.insert(meta.name, (meta.shape, data));
    }
    Ok((header.config, header.iteration, tensors))
}

/// Flatten a model into `(prefix.param_name, tensor)` pairs.
pub fn model_to_tensors(
    model: &ModelParameters<f32>,
    out: &mut IndexMap<String, (Vec<usize>, Vec<f32>)>,
) {
    for (name, param) in &model.params {
        out.insert(
            format!("{}.{name}", model.kind.tag()),
            (param.shape.clone(), param.value.clone()),
        );
    }
}

/// Rebuild a model of the same topology as `template` from checkpoint
/// tensors. Every parameter must be present with a matching shape.
pub fn model_from_tensors(
    template: &ModelParameters<f32>,
    tensors: &IndexMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<ModelParameters<f32>> {
    let mut model = ModelParameters::new(template.kind);
    for (name, param) in &template.params {
        let key = format!("{}.{name}", template.kind.tag());
        let (shape, data) = tensors
            .get(&key)
            .ok_or_else(|| Error::validation(format!("checkpoint is missing tensor `{key}`")))?;
        if *shape != param.shape {
            return Err(Error::validation(format!(
                "checkpoint tensor `{key}` has shape {shape:?}, expected {:?}",
                param.shape
            )));
        }
        model.insert(name, shape.clone(), data.clone());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen_input(tape: &mut Tape<f32>, t: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..MCEP_DIMS * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.leaf(data, vec![MCEP_DIMS, t], false).unwrap()
    }

    #[test]
    fn generator_preserves_shape() {
        let config = GeneratorConfig { base_channels: 4, n_residual: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model: ModelParameters<f32> =
            build_generator(&config, NetworkKind::GeneratorXy, &mut rng).unwrap();
        let mut tape = Tape::new();
        let params = bind(&mut tape, &model, false).unwrap();
        let x = gen_input(&mut tape, 128, 2);
        let y = generator_forward(&mut tape, &params, &config, x).unwrap();
        assert_eq!(tape.shape(y), &[MCEP_DIMS, 128]);
    }

    #[test]
    fn generator_fresh_output_is_bounded() {
        let config = GeneratorConfig { base_channels: 8, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model: ModelParameters<f32> =
            build_generator(&config, NetworkKind::GeneratorXy, &mut rng).unwrap();
        let mut tape = Tape::new();
        let params = bind(&mut tape, &model, false).unwrap();
        let x = gen_input(&mut tape, 128, 4);
        let y = generator_forward(&mut tape, &params, &config, x).unwrap();
        assert!(tape.value(y).iter().all(|v| v.is_finite() && v.abs() < 100.0));
    }

    #[test]
    fn generator_build_is_deterministic() {
        let config = GeneratorConfig { base_channels: 4, n_residual: 1, ..Default::default() };
        let a: ModelParameters<f32> =
            build_generator(&config, NetworkKind::GeneratorXy, &mut ChaCha8Rng::seed_from_u64(5))
                .unwrap();
        let b: ModelParameters<f32> =
            build_generator(&config, NetworkKind::GeneratorXy, &mut ChaCha8Rng::seed_from_u64(5))
                .unwrap();
        for (name, pa) in &a.params {
            assert_eq!(pa.value, b.params[name].value, "{name}");
        }
    }

    #[test]
    fn generator_rejects_indivisible_length() {
        let config = GeneratorConfig { base_channels: 4, n_residual: 1, ..Default::default() };
        let model: ModelParameters<f32> =
            build_generator(&config, NetworkKind::GeneratorXy, &mut ChaCha8Rng::seed_from_u64(6))
                .unwrap();
        let mut tape = Tape::new();
        let params = bind(&mut tape, &model, false).unwrap();
        let x = gen_input(&mut tape, 130, 7);
        assert!(matches!(
            generator_forward(&mut tape, &params, &config, x),
            Err(Error::Dim(_))
        ));
    }

    fn critic_input(tape: &mut Tape<f32>, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..MCEP_DIMS * 128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.leaf(data, vec![1, MCEP_DIMS, 128], false).unwrap()
    }

    #[test]
    fn critic_outputs_scalar_and_can_be_negative() {
        let config = CriticConfig::desk();
        let mut model: ModelParameters<f32> =
            build_critic(&config, NetworkKind::CriticX, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        // force a negative score through the final bias
        model.params.get_mut("head.bias").unwrap().value[0] = -10.0;
        let mut tape = Tape::new();
        let params = bind(&mut tape, &model, false).unwrap();
        let x = critic_input(&mut tape, 9);
        let y = critic_forward(&mut tape, &params, &config, x, false).unwrap();
        assert_eq!(tape.value(y).len(), 1);
        assert!(tape.scalar_value(y) < 0.0);
    }

    #[test]
    fn critic_sigmoid_mode_is_in_unit_interval() {
        let config = CriticConfig::desk();
        let model: ModelParameters<f32> =
            build_critic(&config, NetworkKind::CriticY, &mut ChaCha8Rng::seed_from_u64(10))
                .unwrap();
        let mut tape = Tape::new();
        let params = bind(&mut tape, &model, false).unwrap();
        let x = critic_input(&mut tape, 11);
        let y = critic_forward(&mut tape, &params, &config, x, true).unwrap();
        let v = tape.scalar_value(y);
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn classifier_probs_sum_to_one() {
        let config = ClassifierConfig { n_speakers: 4, ..Default::default() };
        let model: ModelParameters<f32> =
            build_classifier(&config, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let mut tape = Tape::new();
        let params = bind(&mut tape, &model, false).unwrap();
        let x = critic_input(&mut tape, 13);
        let (probs, embedding) = classifier_forward(&mut tape, &params, &config, x).unwrap();
        let total: f32 = tape.value(probs).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(tape.value(embedding).len(), config.embedding_dim);
    }

    #[test]
    fn classifier_zeroed_head_is_uniform() {
        let config = ClassifierConfig { n_speakers: 4, ..Default::default() };
        let mut model: ModelParameters<f32> =
            build_classifier(&config, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        model.params.get_mut("head.weight").unwrap().value.fill(0.0);
        let mut tape = Tape::new();
        let params = bind(&mut tape, &model, false).unwrap();
        let x = critic_input(&mut tape, 15);
        let (probs, _) = classifier_forward(&mut tape, &params, &config, x).unwrap();
        for &p in tape.value(probs) {
            assert!((p - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn classifier_forward_is_deterministic() {
        let config = ClassifierConfig::default();
        let model: ModelParameters<f32> =
            build_classifier(&config, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let params = bind(&mut tape, &model, false).unwrap();
            let x = critic_input(&mut tape, 17);
            let (_, e) = classifier_forward(&mut tape, &params, &config, x).unwrap();
            tape.value(e).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.etgc");
        let config = GeneratorConfig { base_channels: 4, n_residual: 1, ..Default::default() };
        let model: ModelParameters<f32> =
            build_generator(&config, NetworkKind::GeneratorXy, &mut ChaCha8Rng::seed_from_u64(18))
                .unwrap();
        let mut tensors = IndexMap::new();
        model_to_tensors(&model, &mut tensors);
        write_checkpoint(&path, &serde_json::json!({"k": 1}), 42, &tensors).unwrap();
        let (cfg, iter, back) = read_checkpoint(&path).unwrap();
        assert_eq!(cfg["k"], 1);
        assert_eq!(iter, 42);
        assert_eq!(back, tensors);
        let rebuilt = model_from_tensors(&model, &back).unwrap();
        for (name, p) in &model.params {
            assert_eq!(p.value, rebuilt.params[name].value, "{name}");
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.etgc");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x02\x00\x00\x00{}").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_missing_tensor_is_named() {
        let config = GeneratorConfig { base_channels: 4, n_residual: 1, ..Default::default() };
        let model: ModelParameters<f32> =
            build_generator(&config, NetworkKind::GeneratorXy, &mut ChaCha8Rng::seed_from_u64(19))
                .unwrap();
        let mut tensors = IndexMap::new();
        model_to_tensors(&model, &mut tensors);
        tensors.shift_remove("gen_xy.down1.conv.weight");
        let err = model_from_tensors(&model, &tensors).unwrap_err();
        assert!(err.to_string().contains("gen_xy.down1.conv.weight"));
    }

    #[test]
    fn checkpoint_shape_mismatch_is_named() {
        let small = GeneratorConfig { base_channels: 4, n_residual: 1, ..Default::default() };
        let large = GeneratorConfig { base_channels: 8, n_residual: 1, ..Default::default() };
        let m_small: ModelParameters<f32> =
            build_generator(&small, NetworkKind::GeneratorXy, &mut ChaCha8Rng::seed_from_u64(20))
                .unwrap();
        let m_large: ModelParameters<f32> =
            build_generator(&large, NetworkKind::GeneratorXy, &mut ChaCha8Rng::seed_from_u64(21))
                .unwrap();
        let mut tensors = IndexMap::new();
        model_to_tensors(&m_small, &mut tensors);
        let err = model_from_tensors(&m_large, &tensors).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("shape"));
    }
}
