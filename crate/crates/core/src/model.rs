//! The model zoo: a ReLU MLP and the four-layer SimpleCNN.
//!
//! SimpleCNN is `conv 16@3×3 → relu → conv 32@3×3 → relu → 2×2 mean pool →
//! fc 128 → relu → fc κ`, with no normalization layers. Channel widths and the
//! hidden width are configurable through [`ModelSpec::layers`].

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    SimpleCnn,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::SimpleCnn => "simplecnn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// MLP: hidden widths. SimpleCNN: `[conv1 channels, conv2 channels, fc width]`.
    pub layers: Vec<usize>,
    /// Shape of one sample: `[d]` for the MLP (or any shape, flattened),
    /// `[c, h, w]` for SimpleCNN.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

/// Shape and initialization fan-in of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub name: String,
    pub shape: Vec<usize>,
    /// `None` for biases, which start at zero.
    pub fan_in: Option<usize>,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp,
            layers: hidden.to_vec(),
            input_shape: vec![input_dim],
            classes,
        }
    }

    pub fn simple_cnn(channels: usize, h: usize, w: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::SimpleCnn,
            layers: vec![16, 32, 128],
            input_shape: vec![channels, h, w],
            classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.layers.contains(&0) || self.input_len() == 0 {
            return bad("zero-width layer or input".into());
        }
        if self.arch == Architecture::SimpleCnn {
            match (self.layers.as_slice(), self.input_shape.as_slice()) {
                ([_, _, _], [_, h, w]) if *h >= 6 && *w >= 6 => {}
                _ => {
                    return bad(format!(
                        "simplecnn needs layers [c1, c2, fc] and input [c, h>=6, w>=6], got {:?} / {:?}",
                        self.layers, self.input_shape
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<ParamLayout> {
        let p = |name: &str, shape: Vec<usize>, fan_in: Option<usize>| ParamLayout {
            name: name.to_owned(),
            shape,
            fan_in,
        };
        match self.arch {
            Architecture::Mlp => {
                let mut widths = vec![self.input_len()];
                widths.extend(&self.layers);
                widths.push(self.classes);
                let mut out = Vec::new();
                for (i, w) in widths.windows(2).enumerate() {
                    out.push(p(&format!("fc{i}.weight"), vec![w[0], w[1]], Some(w[0])));
                    out.push(p(&format!("fc{i}.bias"), vec![w[1]], None));
                }
                out
            }
            Architecture::SimpleCnn => {
                let (c1, c2, fc) = (self.layers[0], self.layers[1], self.layers[2]);
                let [c, h, w] = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
                let flat = c2 * ((h - 4) / 2) * ((w - 4) / 2);
                vec![
                    p("conv1.weight", vec![c1, c, 3, 3], Some(c * 9)),
                    p("conv1.bias", vec![c1], None),
                    p("conv2.weight", vec![c2, c1, 3, 3], Some(c1 * 9)),
                    p("conv2.bias", vec![c2], None),
                    p("fc1.weight", vec![flat, fc], Some(flat)),
                    p("fc1.bias", vec![fc], None),
                    p("fc2.weight", vec![fc, self.classes], Some(fc)),
                    p("fc2.bias", vec![self.classes], None),
                ]
            }
        }
    }

    /// Builds logits `(batch, κ)` on `tape` from bound parameters and a batch `x`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() < 2 || shape[1..].iter().product::<usize>() != self.input_len() {
            return Err(Error::shape(
                "forward",
                format!("batch {shape:?} for input shape {:?}", self.input_shape),
            ));
        }
        let batch = shape[0];
        match self.arch {
            Architecture::Mlp => {
                let mut h = tape.reshape(x, &[batch, self.input_len()])?;
                let layers = params.len() / 2;
                for (i, wb) in params.chunks(2).enumerate() {
                    h = tape.matmul(h, wb[0])?;
                    h = tape.add_row_bias(h, wb[1])?;
                    if i + 1 < layers {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            Architecture::SimpleCnn => {
                let mut input = vec![batch];
                input.extend(&self.input_shape);
                let mut h = tape.reshape(x, &input)?;
                h = tape.conv2d(h, params[0])?;
                h = tape.add_channel_bias(h, params[1])?;
                h = tape.relu(h)?;
                h = tape.conv2d(h, params[2])?;
                h = tape.add_channel_bias(h, params[3])?;
                h = tape.relu(h)?;
                h = tape.mean_pool2(h)?;
                let flat = tape.value(h).row_len();
                h = tape.reshape(h, &[batch, flat])?;
                h = tape.matmul(h, params[4])?;
                h = tape.add_row_bias(h, params[5])?;
                h = tape.relu(h)?;
                h = tape.matmul(h, params[6])?;
                tape.add_row_bias(h, params[7])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// The ordered parameter list θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tensors: Vec<NamedTensor>,
}

impl ModelParams {
    /// Kaiming-uniform fan-in weights (`U(±√(6/fan_in))`), zero biases.
    pub fn init(spec: &ModelSpec, rng: &RngStream) -> Result<Self> {
        spec.validate()?;
        let mut g = rng.rng();
        let tensors = spec
            .layout()
            .into_iter()
            .map(|l| {
                let tensor = match l.fan_in {
                    Some(fan_in) => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let n = l.shape.iter().product();
                        let data = (0..n).map(|_| g.gen_range(-bound..bound)).collect();
                        Tensor::new(l.shape, data).expect("layout shape")
                    }
                    None => Tensor::zeros(&l.shape),
                };
                NamedTensor { name: l.name, tensor }
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            tensors: spec
                .layout()
                .into_iter()
                .map(|l| NamedTensor {
                    tensor: Tensor::zeros(&l.shape),
                    name: l.name,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| &t.tensor)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|t| &mut t.tensor)
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_layout(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.layout();
        if layout.len() != self.tensors.len()
            || layout
                .iter()
                .zip(&self.tensors)
                .any(|(l, t)| l.shape != t.tensor.shape())
        {
            return Err(Error::shape("params", "parameter shapes do not match the model spec"));
        }
        Ok(())
    }
}

/// A model spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

/// Largest batch pushed through one inference tape.
const INFERENCE_CHUNK: usize = 256;

impl Model {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        spec.validate()?;
        params.check_layout(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: ModelSpec, rng: &RngStream) -> Result<Self> {
        let params = ModelParams::init(&spec, rng)?;
        Ok(Self { spec, params })
    }

    /// Logits for a batch, without gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        if n <= INFERENCE_CHUNK {
            return self.logits_chunk(x);
        }
        let mut data = Vec::with_capacity(n * self.spec.classes);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(INFERENCE_CHUNK) {
            data.extend(self.logits_chunk(&x.select_rows(chunk))?.into_data());
        }
        Tensor::new(vec![n, self.spec.classes], data)
    }

    fn logits_chunk(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.spec.forward(&mut tape, &p, xv)?;
        Ok(tape.value(z).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Fraction of rows predicted as their label.
    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        if y.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(y).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / y.len() as f64)
    }

    /// Input batch shape for `n` samples.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend(&self.spec.input_shape);
        s
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PRBCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    seed: u64,
    params: Vec<(String, Vec<usize>)>,
}

/// Writes `magic | u32 version | u32 header length | JSON header | f64 LE blob`.
pub fn save_checkpoint(path: &Path, model: &Model, seed: u64) -> Result<()> {
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        seed,
        params: model
            .params
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.tensor.shape().to_vec()))
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * model.params.iter().map(Tensor::len).sum::<usize>());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in model.params.iter().flat_map(|t| t.data()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the model and its seed.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?)?;
    let mut blob = bytes[16 + hlen..].chunks_exact(8);
    let total: usize = header.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if blob.len() != total || !blob.remainder().is_empty() {
        return Err(bad("parameter blob size does not match header"));
    }
    let mut tensors = Vec::with_capacity(header.params.len());
    for (name, shape) in header.params {
        let n = shape.iter().product();
        let data = blob
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    let model = Model::new(header.spec, ModelParams { tensors })?;
    Ok((model, header.seed))
}
