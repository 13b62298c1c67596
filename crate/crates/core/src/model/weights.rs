use std::collections::BTreeMap;
use std::path::Path;

use css_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ConformerConfig;
use crate::error::{CssError, Result};
use crate::Float;

const MAGIC: &[u8; 4] = b"CSSW";
const VERSION: u32 = 1;

/// How a tensor is filled by [`init_weights`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Name, shape and role of one tensor in a [`ConformerWeights`] set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// False for batchnorm running statistics.
    pub trainable: bool,
}

impl TensorSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name,
            shape,
            init,
            trainable: true,
        }
    }

    fn stat(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, shape, init)
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn linear(out: &mut Vec<TensorSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(TensorSpec::new(
        format!("{prefix}.weight"),
        vec![fan_in, fan_out],
        Init::Uniform { fan_in },
    ));
    out.push(TensorSpec::new(
        format!("{prefix}.bias"),
        vec![fan_out],
        Init::Uniform { fan_in },
    ));
}

/// Every tensor of a model with the given config, in file order.
pub fn tensor_specs(config: &ConformerConfig) -> Vec<TensorSpec> {
    let d = config.attn_dim;
    let f = config.ffn_dim;
    let mut out = Vec::new();
    linear(&mut out, "input", config.feature_dim, d);
    for l in 0..config.num_layers {
        let p = format!("layers.{l}");
        for ffn in ["ffn1", "ffn2"] {
            linear(&mut out, &format!("{p}.{ffn}.in"), d, f);
            linear(&mut out, &format!("{p}.{ffn}.out"), f, d);
        }
        for proj in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{p}.attn.{proj}"), d, d);
        }
        out.push(TensorSpec::new(
            format!("{p}.attn.pos"),
            vec![config.num_heads, config.pos_len(), config.head_dim()],
            Init::Zeros,
        ));
        linear(&mut out, &format!("{p}.conv.pw_in"), d, 2 * d);
        out.push(TensorSpec::new(
            format!("{p}.conv.dw.weight"),
            vec![config.conv_kernel, d],
            Init::Uniform {
                fan_in: config.conv_kernel,
            },
        ));
        out.push(TensorSpec::new(
            format!("{p}.conv.dw.bias"),
            vec![d],
            Init::Uniform {
                fan_in: config.conv_kernel,
            },
        ));
        out.push(TensorSpec::new(format!("{p}.conv.bn.gain"), vec![d], Init::Ones));
        out.push(TensorSpec::new(format!("{p}.conv.bn.bias"), vec![d], Init::Zeros));
        out.push(TensorSpec::stat(
            format!("{p}.conv.bn.running_mean"),
            vec![d],
            Init::Zeros,
        ));
        out.push(TensorSpec::stat(
            format!("{p}.conv.bn.running_var"),
            vec![d],
            Init::Ones,
        ));
        linear(&mut out, &format!("{p}.conv.pw_out"), d, d);
        out.push(TensorSpec::new(format!("{p}.norm.gain"), vec![d], Init::Ones));
        out.push(TensorSpec::new(format!("{p}.norm.bias"), vec![d], Init::Zeros));
    }
    for s in 0..config.num_output_masks {
        linear(&mut out, &format!("head.{s}"), d, config.num_bins);
    }
    out
}

/// Trainable parameter count, from shape arithmetic alone.
pub fn count_parameters(config: &ConformerConfig) -> usize {
    let d = config.attn_dim;
    let f = config.ffn_dim;
    let k = config.conv_kernel;
    let ffn = 2 * (d * f + f + f * d + d);
    let attn = 4 * (d * d + d) + config.num_heads * config.pos_len() * config.head_dim();
    let conv = (d * 2 * d + 2 * d) + (k * d + d) + 2 * d + (d * d + d);
    let norm = 2 * d;
    let input = config.feature_dim * d + d;
    let head = config.num_output_masks * (d * config.num_bins + config.num_bins);
    input + config.num_layers * (ffn + attn + conv + norm) + head
}

/// A full set of named model tensors together with the config they fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformerWeights<T> {
    config: ConformerConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ConformerWeights<T> {
    /// Assembles weights from named tensors, checking every expected tensor
    /// is present with the right shape and finite values.
    pub fn from_tensors(
        config: ConformerConfig,
        tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        for spec in &specs {
            let t = tensors
                .get(&spec.name)
                .ok_or_else(|| CssError::Shape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: vec![],
                })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(CssError::Shape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(CssError::CorruptFile(format!(
                    "tensor `{}` holds non-finite values",
                    spec.name
                )));
            }
        }
        if tensors.len() != specs.len() {
            let extra: Vec<&String> = tensors
                .keys()
                .filter(|k| !specs.iter().any(|s| &s.name == *k))
                .collect();
            return Err(CssError::CorruptFile(format!("unexpected tensors {extra:?}")));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ConformerConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no tensor named `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    /// Tensors in file order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        tensor_specs(&self.config)
            .into_iter()
            .map(move |s| {
                let (k, v) = self.tensors.get_key_value(&s.name).expect("validated");
                (k.as_str(), v)
            })
            .collect::<Vec<_>>()
            .into_iter()
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        tensor_specs(&self.config)
    }

    pub fn cast<U: Float>(&self) -> ConformerWeights<U> {
        ConformerWeights {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Changes how many previous chunks attention looks back on. No tensor
    /// depends on it.
    pub fn set_cache_chunks(&mut self, chunks: usize) {
        self.config.cache_chunks = chunks;
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }
}

/// Deterministic initialization from a seed.
pub fn init_weights<T: Float>(config: &ConformerConfig, seed: u64) -> Result<ConformerWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for spec in tensor_specs(config) {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| {
                    T::lit(rng.random_range(-bound..bound))
                })
            }
        };
        tensors.insert(spec.name, t);
    }
    Ok(ConformerWeights {
        config: config.clone(),
        tensors,
    })
}

/// Serializes a config plus named tensors into the weights container.
pub fn encode_container<'a>(
    config: &ConformerConfig,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in config.to_block() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CssError::CorruptFile("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weights container, verifying magic, version and checksum.
pub fn decode_container(bytes: &[u8]) -> Result<(ConformerConfig, Vec<(String, Tensor<f32>)>)> {
    if bytes.len() < 8 + 40 + 4 {
        return Err(CssError::CorruptFile(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(CssError::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CssError::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CssError::CorruptFile(format!("unsupported version {version}")));
    }
    let mut block = [0u32; 10];
    for b in &mut block {
        *b = r.u32()?;
    }
    let config = ConformerConfig::from_block(block);
    let mut tensors = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CssError::CorruptFile("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| CssError::CorruptFile(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| {
            CssError::CorruptFile(format!("tensor `{name}` is too large"))
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((config, tensors))
}

pub fn save_weights<T: Float>(weights: &ConformerWeights<T>, path: impl AsRef<Path>) -> Result<()> {
    let cast: Vec<(String, Tensor<f32>)> = weights
        .iter()
        .map(|(k, v)| (k.to_owned(), v.cast()))
        .collect();
    let bytes = encode_container(
        weights.config(),
        cast.iter().map(|(k, v)| (k.as_str(), v)),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads weights using the config stored in the file.
pub fn load_weights<T: Float>(path: impl AsRef<Path>) -> Result<ConformerWeights<T>> {
    let bytes = std::fs::read(path)?;
    let (config, tensors) = decode_container(&bytes)?;
    let map = tensors.into_iter().map(|(k, v)| (k, v.cast())).collect();
    ConformerWeights::from_tensors(config, map)
}

/// Loads weights and checks them against an expected config; the first
/// tensor whose shape disagrees is named in the error.
pub fn load_weights_for<T: Float>(
    path: impl AsRef<Path>,
    expected: &ConformerConfig,
) -> Result<ConformerWeights<T>> {
    let bytes = std::fs::read(path)?;
    let (_, tensors) = decode_container(&bytes)?;
    let map = tensors.into_iter().map(|(k, v)| (k, v.cast())).collect();
    ConformerWeights::from_tensors(expected.clone(), map)
}
