//! Task-conditioned transformer: a bidirectional encoder with a classification
//! head, or a causal decoder, with the task embedding entering as an input
//! token, as adapter weights, or as layer-norm scales and shifts.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::benchgen::{Example, Target, Token};
use crate::numerics::{Tape, Tensor, TensorError, Var, LAYER_NORM_EPS};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

const MASKED: f64 = -1e30;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("sequence of length {len} exceeds {max} positions")]
    LengthOverflow { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch mixes input lengths {0} and {1}")]
    MixedLengths(usize, usize),
    #[error("task code does not fit this model: {0}")]
    TaskCode(String),
    #[error("example target does not match the {0:?} architecture")]
    TargetKind(Architecture),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Unmasked encoder with a classification head.
    Encoder,
    /// Causal decoder predicting a target sequence.
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    InputToken,
    Adapter,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Classes of the encoder head; ignored by decoders.
    pub num_classes: usize,
    pub architecture: Architecture,
    pub conditioning: Conditioning,
    pub adapter_bottleneck: usize,
    /// Size of the primitive embedding table; set for compositional models.
    pub num_primitives: Option<usize>,
    /// Start the output head at zero so untrained predictions are uniform.
    pub zero_init_output: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            embed_dim: 128,
            num_heads: 4,
            feedforward_dim: 512,
            vocab_size: 12,
            max_positions: 64,
            num_classes: 4,
            architecture: Architecture::Encoder,
            conditioning: Conditioning::InputToken,
            adapter_bottleneck: 16,
            num_primitives: None,
            zero_init_output: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("num_layers", self.num_layers),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("feedforward_dim", self.feedforward_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ] {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.num_heads > 0 && self.embed_dim % self.num_heads != 0 {
            v.push(format!(
                "embed_dim ({}) must be divisible by num_heads ({})",
                self.embed_dim, self.num_heads
            ));
        }
        if self.architecture == Architecture::Encoder && self.num_classes < 2 {
            v.push("num_classes must be at least 2".into());
        }
        if self.conditioning == Conditioning::Adapter && self.adapter_bottleneck == 0 {
            v.push("adapter_bottleneck must be positive".into());
        }
        if let Some(n) = self.num_primitives {
            if n == 0 {
                v.push("num_primitives must be positive".into());
            }
            if self.conditioning != Conditioning::InputToken {
                v.push("compositional models need input-token conditioning".into());
            }
        }
        v
    }

    pub fn is_compositional(&self) -> bool {
        self.num_primitives.is_some()
    }

    /// Rows the task code occupies in the input sequence.
    pub fn z_block_len(&self) -> usize {
        if self.is_compositional() {
            3
        } else {
            1
        }
    }

    /// Length of a dense task embedding (one slot in compositional mode).
    pub fn task_embedding_len(&self) -> usize {
        let d = self.embed_dim;
        let l = self.num_layers;
        match self.conditioning {
            Conditioning::InputToken => d,
            Conditioning::Adapter => {
                let r = self.adapter_bottleneck;
                l * 2 * (2 * d * r + r + d)
            }
            Conditioning::LayerNorm => (2 * l + 1) * 2 * d,
        }
    }
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1: Option<(usize, usize)>,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2: Option<(usize, usize)>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<(String, Vec<usize>, Init)>,
    token: usize,
    position: usize,
    start: Option<usize>,
    primitives: Option<usize>,
    unknown: Option<usize>,
    layers: Vec<LayerIdx>,
    final_ln: Option<(usize, usize)>,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.feedforward_dim;
        let emb_std = 0.02;
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let token = add("token_embedding".into(), vec![cfg.vocab_size, d], Init::Normal(emb_std));
        let position = add("position_embedding".into(), vec![cfg.max_positions, d], Init::Normal(emb_std));
        let start = (cfg.conditioning != Conditioning::InputToken)
            .then(|| add("start_token".into(), vec![1, d], Init::Normal(emb_std)));
        let (primitives, unknown) = match cfg.num_primitives {
            Some(n) => (
                Some(add("primitive_embedding".into(), vec![n, d], Init::Normal(emb_std))),
                Some(add("unknown_primitive_embedding".into(), vec![1, d], Init::Zeros)),
            ),
            None => (None, None),
        };
        let own_ln = cfg.conditioning != Conditioning::LayerNorm;
        let matrix = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let ln = |tag: &str, add: &mut dyn FnMut(String, Vec<usize>, Init) -> usize| {
                own_ln.then(|| {
                    (
                        add(p(&format!("{tag}.gamma")), vec![d], Init::Ones),
                        add(p(&format!("{tag}.beta")), vec![d], Init::Zeros),
                    )
                })
            };
            let ln1 = ln("ln1", &mut add);
            let wq = add(p("attn.wq"), vec![d, d], matrix(d));
            let bq = add(p("attn.bq"), vec![d], Init::Zeros);
            let wk = add(p("attn.wk"), vec![d, d], matrix(d));
            let bk = add(p("attn.bk"), vec![d], Init::Zeros);
            let wv = add(p("attn.wv"), vec![d, d], matrix(d));
            let bv = add(p("attn.bv"), vec![d], Init::Zeros);
            let wo = add(p("attn.wo"), vec![d, d], matrix(d));
            let bo = add(p("attn.bo"), vec![d], Init::Zeros);
            let ln2 = ln("ln2", &mut add);
            let w1 = add(p("ff.w1"), vec![d, f], matrix(d));
            let b1 = add(p("ff.b1"), vec![f], Init::Zeros);
            let w2 = add(p("ff.w2"), vec![f, d], matrix(f));
            let b2 = add(p("ff.b2"), vec![d], Init::Zeros);
            layers.push(LayerIdx {
                ln1,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_ln = own_ln.then(|| {
            (
                add("final_ln.gamma".into(), vec![d], Init::Ones),
                add("final_ln.beta".into(), vec![d], Init::Zeros),
            )
        });
        let out_init = if cfg.zero_init_output { Init::Zeros } else { matrix(d) };
        let (head_w, head_b) = match cfg.architecture {
            Architecture::Encoder => (
                add("head.weight".into(), vec![d, cfg.num_classes], out_init),
                add("head.bias".into(), vec![cfg.num_classes], Init::Zeros),
            ),
            Architecture::Decoder => (
                add("output.weight".into(), vec![d, cfg.vocab_size], out_init),
                add("output.bias".into(), vec![cfg.vocab_size], Init::Zeros),
            ),
        };
        Self {
            specs,
            token,
            position,
            start,
            primitives,
            unknown,
            layers,
            final_ln,
            head_w,
            head_b,
        }
    }
}

/// Task code recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub enum TaskCode {
    /// All-zero task embedding.
    Zero,
    /// Dense embedding of length [`ModelConfig::task_embedding_len`].
    Dense(Var),
    /// One entry per primitive slot (compositional models).
    Composite([Slot; 3]),
}

#[derive(Debug, Clone, Copy)]
pub enum Slot {
    /// Row of the primitive embedding table (global primitive id).
    Primitive(usize),
    /// The learned unknown-primitive embedding.
    Unknown,
    /// A free `[embed_dim]` vector.
    Free(Var),
}

/// Task code held outside a tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskCodeValue {
    Zero,
    Dense(Vec<f64>),
    Composite([SlotValue; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotValue {
    Primitive(usize),
    Unknown,
    Free(Vec<f64>),
}

/// Parameters recorded on a tape, indexed like [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Negative log-likelihood of a batch.
#[derive(Debug, Clone, Copy)]
pub struct Nll {
    /// Classification: mean cross-entropy. Sequences: per-example sums of
    /// token cross-entropies averaged over the batch.
    pub loss: Var,
    /// Scored target tokens (the batch size for classification).
    pub tokens: usize,
    /// Sum of per-token (or per-example) negative log-likelihoods.
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let v = config.violations();
        if !v.is_empty() {
            return Err(ModelError::Config(v));
        }
        let layout = Layout::new(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params(&self) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.init_seed);
        let mut names = Vec::with_capacity(self.layout.specs.len());
        let mut tensors = Vec::with_capacity(self.layout.specs.len());
        for (name, shape, init) in &self.layout.specs {
            let n: usize = shape.iter().product();
            let data = match *init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            names.push(name.clone());
            tensors.push(Tensor::new(shape.clone(), data).expect("layout shapes are valid"));
        }
        ModelParams { names, tensors }
    }

    /// Checks names and shapes against this model's layout.
    pub fn check_params(&self, params: &ModelParams) -> Result<(), ModelError> {
        if params.names.len() != self.layout.specs.len() || params.tensors.len() != params.names.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.layout.specs.len(),
                params.tensors.len()
            )));
        }
        for ((name, shape, _), (pname, t)) in self.layout.specs.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(ModelError::ParamShape {
                    name: pname.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Index of the primitive embedding table in [`ModelParams::tensors`].
    pub fn primitive_table_index(&self) -> Option<usize> {
        self.layout.primitives
    }

    pub fn unknown_embedding_index(&self) -> Option<usize> {
        self.layout.unknown
    }

    /// Records every parameter as a leaf; `trainable` decides whether the
    /// leaves collect gradients.
    pub fn bind(&self, tape: &mut Tape, params: &ModelParams, trainable: bool) -> Bound {
        self.bind_masked(tape, params, |_| trainable)
    }

    pub fn bind_masked(&self, tape: &mut Tape, params: &ModelParams, trainable: impl Fn(usize) -> bool) -> Bound {
        let vars = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                tape.param(t.shape().to_vec(), t.data().to_vec(), trainable(i))
                    .expect("tensor shapes are valid")
            })
            .collect();
        Bound { vars }
    }

    /// Records a task code; free vectors become leaves with `requires_grad`.
    pub fn bind_code(&self, tape: &mut Tape, code: &TaskCodeValue, requires_grad: bool) -> Result<TaskCode, ModelError> {
        Ok(match code {
            TaskCodeValue::Zero => TaskCode::Zero,
            TaskCodeValue::Dense(z) => {
                TaskCode::Dense(tape.param(vec![z.len().max(1)], z.clone(), requires_grad).map_err(|_| {
                    ModelError::TaskCode("empty dense task embedding".into())
                })?)
            }
            TaskCodeValue::Composite(slots) => {
                let mut out = [Slot::Unknown; 3];
                for (o, s) in out.iter_mut().zip(slots) {
                    *o = match s {
                        SlotValue::Primitive(i) => Slot::Primitive(*i),
                        SlotValue::Unknown => Slot::Unknown,
                        SlotValue::Free(z) => Slot::Free(
                            tape.param(vec![z.len().max(1)], z.clone(), requires_grad)
                                .map_err(|_| ModelError::TaskCode("empty slot vector".into()))?,
                        ),
                    };
                }
                TaskCode::Composite(out)
            }
        })
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), ModelError> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&token) => Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// `[z_block_len, D]` rows placed at the task position(s).
    fn z_block(&self, tape: &mut Tape, p: &Bound, code: &TaskCode) -> Result<Var, ModelError> {
        let d = self.config.embed_dim;
        if let Some(start) = self.layout.start {
            // adapter / layer-norm models: the task code lives elsewhere
            return Ok(p.vars[start]);
        }
        let dense = |tape: &mut Tape, z: Var| -> Result<Var, ModelError> {
            if tape.shape(z) != [d] {
                return Err(ModelError::TaskCode(format!(
                    "expected a [{d}] embedding, got {:?}",
                    tape.shape(z)
                )));
            }
            Ok(tape.reshape(z, &[1, d])?)
        };
        match (code, self.layout.primitives) {
            (TaskCode::Zero, _) => Ok(tape.constant(vec![self.config.z_block_len(), d], vec![0.0; self.config.z_block_len() * d])?),
            (TaskCode::Dense(z), None) => dense(tape, *z),
            (TaskCode::Composite(slots), Some(table)) => {
                let n = self.config.num_primitives.unwrap_or(0);
                let mut rows = Vec::with_capacity(3);
                for s in slots {
                    rows.push(match *s {
                        Slot::Primitive(i) => {
                            if i >= n {
                                return Err(ModelError::TaskCode(format!("primitive {i} outside table of {n}")));
                            }
                            tape.slice(p.vars[table], 0, i, i + 1)?
                        }
                        Slot::Unknown => p.vars[self.layout.unknown.expect("compositional layout")],
                        Slot::Free(z) => dense(tape, z)?,
                    });
                }
                Ok(tape.concat(&rows, 0)?)
            }
            (TaskCode::Dense(_), Some(_)) => Err(ModelError::TaskCode(
                "compositional models take one entry per slot".into(),
            )),
            (TaskCode::Composite(_), None) => Err(ModelError::TaskCode(
                "slot codes need a compositional model".into(),
            )),
        }
    }

    /// Dense z for adapter / layer-norm models; `None` means all zeros.
    fn site_code(&self, tape: &Tape, code: &TaskCode) -> Result<Option<Var>, ModelError> {
        if self.config.conditioning == Conditioning::InputToken {
            return Ok(None);
        }
        match code {
            TaskCode::Zero => Ok(None),
            TaskCode::Dense(z) => {
                let want = self.config.task_embedding_len();
                if tape.shape(*z) != [want] {
                    return Err(ModelError::TaskCode(format!(
                        "expected a [{want}] embedding, got {:?}",
                        tape.shape(*z)
                    )));
                }
                Ok(Some(*z))
            }
            TaskCode::Composite(_) => Err(ModelError::TaskCode(
                "slot codes need input-token conditioning".into(),
            )),
        }
    }

    fn affine_norm(
        &self,
        tape: &mut Tape,
        x: Var,
        own: Option<(usize, usize)>,
        p: &Bound,
        z: Option<Var>,
        ln_index: usize,
    ) -> Result<Var, ModelError> {
        let d = self.config.embed_dim;
        let normed = tape.layer_norm(x, LAYER_NORM_EPS)?;
        if let Some((g, b)) = own {
            let scaled = tape.mul(normed, p.vars[g])?;
            return Ok(tape.add(scaled, p.vars[b])?);
        }
        // layer-norm conditioning: gamma = 1 + z_gamma, beta = z_beta
        match z {
            None => Ok(normed),
            Some(z) => {
                let base = ln_index * 2 * d;
                let zg = tape.slice(z, 0, base, base + d)?;
                let zb = tape.slice(z, 0, base + d, base + 2 * d)?;
                let shifted = tape.mul(normed, zg)?;
                let gained = tape.add(normed, shifted)?;
                Ok(tape.add(gained, zb)?)
            }
        }
    }

    fn adapter(&self, tape: &mut Tape, u: Var, z: Option<Var>, site: usize) -> Result<Var, ModelError> {
        let (Conditioning::Adapter, Some(z)) = (self.config.conditioning, z) else {
            return Ok(u);
        };
        let d = self.config.embed_dim;
        let r = self.config.adapter_bottleneck;
        let mut off = site * (2 * d * r + r + d);
        let mut take = |tape: &mut Tape, n: usize, shape: &[usize]| -> Result<Var, TensorError> {
            let s = tape.slice(z, 0, off, off + n)?;
            off += n;
            tape.reshape(s, shape)
        };
        let down_w = take(tape, d * r, &[d, r])?;
        let down_b = take(tape, r, &[r])?;
        let up_w = take(tape, r * d, &[r, d])?;
        let up_b = take(tape, d, &[d])?;
        let h = tape.matmul(u, down_w)?;
        let h = tape.add(h, down_b)?;
        let h = tape.softplus(h)?;
        let h = tape.matmul(h, up_w)?;
        let h = tape.add(h, up_b)?;
        Ok(tape.add(u, h)?)
    }

    fn attention(&self, tape: &mut Tape, x: Var, l: &LayerIdx, p: &Bound, causal: bool) -> Result<Var, ModelError> {
        let shape = tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.num_heads;
        let dh = d / h;
        let proj = |tape: &mut Tape, w: usize, bias: usize| -> Result<Var, TensorError> {
            let y = tape.matmul(x, p.vars[w])?;
            let y = tape.add(y, p.vars[bias])?;
            tape.reshape(y, &[b, t, h, dh])
        };
        let q = proj(tape, l.wq, l.bq)?;
        let k = proj(tape, l.wk, l.bk)?;
        let v = proj(tape, l.wv, l.bv)?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let q = tape.reshape(q, &[b * h, t, dh])?;
        let kt = tape.permute(k, &[0, 2, 3, 1])?;
        let kt = tape.reshape(kt, &[b * h, dh, t])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        let v = tape.reshape(v, &[b * h, t, dh])?;
        let scores = tape.bmm(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if causal {
            let mut mask = vec![0.0; t * t];
            for i in 0..t {
                for j in i + 1..t {
                    mask[i * t + j] = MASKED;
                }
            }
            let mask = tape.constant(vec![t, t], mask)?;
            scores = tape.add(scores, mask)?;
        }
        let weights = tape.softmax(scores)?;
        let ctx = tape.bmm(weights, v)?;
        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let out = tape.matmul(ctx, p.vars[l.wo])?;
        Ok(tape.add(out, p.vars[l.bo])?)
    }

    /// Runs the layer stack over `[B, T, D]` inputs and applies the final norm.
    fn encode(&self, tape: &mut Tape, p: &Bound, code: &TaskCode, x: Var, causal: bool) -> Result<Var, ModelError> {
        let z = self.site_code(tape, code)?;
        let mut h = x;
        for (li, l) in self.layout.layers.iter().enumerate() {
            let a = self.affine_norm(tape, h, l.ln1, p, z, 2 * li)?;
            let a = self.attention(tape, a, l, p, causal)?;
            let a = self.adapter(tape, a, z, 2 * li)?;
            h = tape.add(h, a)?;
            let f = self.affine_norm(tape, h, l.ln2, p, z, 2 * li + 1)?;
            let f = tape.matmul(f, p.vars[l.w1])?;
            let f = tape.add(f, p.vars[l.b1])?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p.vars[l.w2])?;
            let f = tape.add(f, p.vars[l.b2])?;
            let f = self.adapter(tape, f, z, 2 * li + 1)?;
            h = tape.add(h, f)?;
        }
        self.affine_norm(tape, h, self.layout.final_ln, p, z, 2 * self.layout.layers.len())
    }

    /// Token embeddings of a `[B, n]` block as `[B, n, D]`.
    fn embed_tokens(&self, tape: &mut Tape, p: &Bound, rows: &[Vec<Token>]) -> Result<Var, ModelError> {
        let n = rows[0].len();
        let idx: Vec<usize> = rows.iter().flatten().map(|&t| t as usize).collect();
        let e = tape.embedding(p.vars[self.layout.token], &idx)?;
        Ok(tape.reshape(e, &[rows.len(), n, self.config.embed_dim])?)
    }

    fn repeat_block(&self, tape: &mut Tape, block: Var, batch: usize) -> Result<Var, ModelError> {
        let rows = tape.shape(block)[0];
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..rows).collect();
        let r = tape.embedding(block, &idx)?;
        Ok(tape.reshape(r, &[batch, rows, self.config.embed_dim])?)
    }

    fn add_positions(&self, tape: &mut Tape, p: &Bound, seq: Var) -> Result<Var, ModelError> {
        let t = tape.shape(seq)[1];
        if t > self.config.max_positions {
            return Err(ModelError::LengthOverflow {
                len: t,
                max: self.config.max_positions,
            });
        }
        let pos = tape.slice(p.vars[self.layout.position], 0, 0, t)?;
        Ok(tape.add(seq, pos)?)
    }

    fn uniform_len(xs: &[&[Token]]) -> Result<usize, ModelError> {
        let n = xs.first().ok_or(ModelError::EmptyBatch)?.len();
        if let Some(x) = xs.iter().find(|x| x.len() != n) {
            return Err(ModelError::MixedLengths(n, x.len()));
        }
        if n == 0 {
            return Err(ModelError::Config(vec!["empty input sequence".into()]));
        }
        Ok(n)
    }

    /// Class logits `[B, C]`: the head reads the first task position of
    /// `[z-block, x]` after the final norm.
    pub fn forward_classify(&self, tape: &mut Tape, p: &Bound, code: &TaskCode, xs: &[&[Token]]) -> Result<Var, ModelError> {
        if self.config.architecture != Architecture::Encoder {
            return Err(ModelError::TargetKind(self.config.architecture));
        }
        let n = Self::uniform_len(xs)?;
        for x in xs {
            self.check_tokens(x)?;
        }
        let b = xs.len();
        let zl = self.config.z_block_len();
        if zl + n > self.config.max_positions {
            return Err(ModelError::LengthOverflow {
                len: zl + n,
                max: self.config.max_positions,
            });
        }
        let block = self.z_block(tape, p, code)?;
        let zb = self.repeat_block(tape, block, b)?;
        let rows: Vec<Vec<Token>> = xs.iter().map(|x| x.to_vec()).collect();
        let xe = self.embed_tokens(tape, p, &rows)?;
        let seq = tape.concat(&[zb, xe], 1)?;
        let seq = self.add_positions(tape, p, seq)?;
        let hidden = self.encode(tape, p, code, seq, false)?;
        self.classify_head(tape, p, hidden)
    }

    /// Class logits from final hidden states `[B, T, D]`.
    pub(crate) fn classify_head(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var, ModelError> {
        let b = tape.shape(hidden)[0];
        let head = tape.slice(hidden, 1, 0, 1)?;
        let head = tape.reshape(head, &[b, self.config.embed_dim])?;
        let logits = tape.matmul(head, p.vars[self.layout.head_w])?;
        Ok(tape.add(logits, p.vars[self.layout.head_b])?)
    }

    /// Logits `[B, m, V]` for targets of length up to `m`, read from the last
    /// task position onwards over `[x, z-block, y_1..y_{m-1}]`. Shorter
    /// targets are padded with token 0; their padded rows are meaningless.
    pub fn forward_transduce(
        &self,
        tape: &mut Tape,
        p: &Bound,
        code: &TaskCode,
        xs: &[&[Token]],
        ys: &[&[Token]],
    ) -> Result<Var, ModelError> {
        if self.config.architecture != Architecture::Decoder {
            return Err(ModelError::TargetKind(self.config.architecture));
        }
        let n = Self::uniform_len(xs)?;
        if ys.len() != xs.len() {
            return Err(ModelError::MixedLengths(xs.len(), ys.len()));
        }
        let m = ys.iter().map(|y| y.len()).max().unwrap_or(0);
        if m == 0 {
            return Err(ModelError::Config(vec!["empty target sequence".into()]));
        }
        for (x, y) in xs.iter().zip(ys) {
            self.check_tokens(x)?;
            self.check_tokens(y)?;
        }
        let b = xs.len();
        let zl = self.config.z_block_len();
        let t = n + zl + m - 1;
        if t > self.config.max_positions {
            return Err(ModelError::LengthOverflow {
                len: t,
                max: self.config.max_positions,
            });
        }
        let x_rows: Vec<Vec<Token>> = xs.iter().map(|x| x.to_vec()).collect();
        let xe = self.embed_tokens(tape, p, &x_rows)?;
        let block = self.z_block(tape, p, code)?;
        let zb = self.repeat_block(tape, block, b)?;
        let mut parts = vec![xe, zb];
        if m > 1 {
            let y_rows: Vec<Vec<Token>> = ys
                .iter()
                .map(|y| (0..m - 1).map(|i| y.get(i).copied().unwrap_or(0)).collect())
                .collect();
            parts.push(self.embed_tokens(tape, p, &y_rows)?);
        }
        let seq = tape.concat(&parts, 1)?;
        let seq = self.add_positions(tape, p, seq)?;
        let hidden = self.encode(tape, p, code, seq, true)?;
        let read = tape.slice(hidden, 1, n + zl - 1, t)?;
        let logits = tape.matmul(read, p.vars[self.layout.head_w])?;
        Ok(tape.add(logits, p.vars[self.layout.head_b])?)
    }

    /// Batch negative log-likelihood; see [`Nll`] for the reduction.
    pub fn nll(&self, tape: &mut Tape, p: &Bound, code: &TaskCode, batch: &[&Example]) -> Result<Nll, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let xs: Vec<&[Token]> = batch.iter().map(|e| e.x.as_slice()).collect();
        match self.config.architecture {
            Architecture::Encoder => {
                let targets = batch
                    .iter()
                    .map(|e| e.y.label().map(Some).ok_or(ModelError::TargetKind(Architecture::Encoder)))
                    .collect::<Result<Vec<_>, _>>()?;
                let logits = self.forward_classify(tape, p, code, &xs)?;
                let ce = tape.cross_entropy(logits, &targets)?;
                let total = tape.value(ce).iter().sum();
                let loss = tape.mean(ce)?;
                Ok(Nll {
                    loss,
                    tokens: batch.len(),
                    total,
                })
            }
            Architecture::Decoder => {
                let ys = batch
                    .iter()
                    .map(|e| match &e.y {
                        Target::Sequence(s) if !s.is_empty() => Ok(s.as_slice()),
                        _ => Err(ModelError::TargetKind(Architecture::Decoder)),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let logits = self.forward_transduce(tape, p, code, &xs, &ys)?;
                let m = tape.shape(logits)[1];
                let targets: Vec<Option<usize>> = ys
                    .iter()
                    .flat_map(|y| (0..m).map(move |i| y.get(i).map(|&t| t as usize)))
                    .collect();
                let ce = tape.cross_entropy(logits, &targets)?;
                let total = tape.value(ce).iter().sum();
                let summed = tape.sum(ce)?;
                let loss = tape.scale(summed, 1.0 / batch.len() as f64)?;
                Ok(Nll {
                    loss,
                    tokens: ys.iter().map(|y| y.len()).sum(),
                    total,
                })
            }
        }
    }

    /// Logit rows without gradients: one `[C]` row per example for encoders,
    /// `|y|` rows of `[V]` per example for decoders.
    pub fn predict(&self, params: &ModelParams, code: &TaskCodeValue, batch: &[&Example]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, params, false);
        let code = self.bind_code(&mut tape, code, false)?;
        let xs: Vec<&[Token]> = batch.iter().map(|e| e.x.as_slice()).collect();
        match self.config.architecture {
            Architecture::Encoder => {
                let logits = self.forward_classify(&mut tape, &p, &code, &xs)?;
                let c = self.config.num_classes;
                Ok(tape.value(logits).chunks(c).map(|r| vec![r.to_vec()]).collect())
            }
            Architecture::Decoder => {
                let ys = batch
                    .iter()
                    .map(|e| e.y.tokens().ok_or(ModelError::TargetKind(Architecture::Decoder)))
                    .collect::<Result<Vec<_>, _>>()?;
                let logits = self.forward_transduce(&mut tape, &p, &code, &xs, &ys)?;
                let m = tape.shape(logits)[1];
                let v = self.config.vocab_size;
                let vals = tape.value(logits);
                Ok(ys
                    .iter()
                    .enumerate()
                    .map(|(bi, y)| {
                        (0..y.len())
                            .map(|i| vals[(bi * m + i) * v..(bi * m + i + 1) * v].to_vec())
                            .collect()
                    })
                    .collect())
            }
        }
    }

    /// Loss value of a batch without recording gradients.
    pub fn loss_value(&self, params: &ModelParams, code: &TaskCodeValue, batch: &[&Example]) -> Result<(f64, usize, f64), ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, params, false);
        let code = self.bind_code(&mut tape, code, false)?;
        let out = self.nll(&mut tape, &p, &code, batch)?;
        Ok((tape.value(out.loss)[0], out.tokens, out.total))
    }
}
