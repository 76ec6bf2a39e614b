//! The shared ranking backbone: a pre-norm Transformer encoder over the
//! lookback axis of each stock, mean-pooled and read out to one logit per
//! stock. Teachers and the student differ only in the [`PriorSpec`].

mod optim;
mod train;

pub use optim::Adam;
pub(crate) use train::{average_grads, check_finite};
pub use train::{
    evaluate_days, predict_days, rankable, train_all_teachers, train_teacher, train_teachers,
    EpochLog, TrainConfig, TrainData, TrainReport,
};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{rpb_bias, BuiltPrior, PriorSpec};
use crate::tensor::{NamedTensor, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub lookback: usize,
    pub features: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Add fixed sinusoidal position codes to the token embeddings.
    pub positional_encoding: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            d_ff: 256,
            heads: 4,
            lookback: 20,
            features: 8,
            dropout: 0.0,
            ln_eps: 1e-5,
            positional_encoding: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.lookback == 0 || self.features == 0 {
            return Err(Error::config("backbone dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Named parameter tensors of one model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: BackboneConfig,
    pub tensors: Vec<NamedTensor>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

impl ModelParams {
    /// Fresh parameters for `prior`, drawn from `seed`.
    pub fn init(config: &BackboneConfig, prior: &PriorSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let input = match prior {
            PriorSpec::Patch { patch_len, .. } => patch_len * config.features,
            _ => config.features,
        };
        let mut t = Vec::new();
        let mut push = |name: String, tensor: Tensor| t.push(NamedTensor { name, tensor });
        push("embed.w".into(), xavier(&mut rng, input, d));
        push("embed.b".into(), Tensor::zeros(&[d]));
        for l in 0..config.layers {
            push(format!("layer{l}.ln1.g"), Tensor::full(&[d], 1.0));
            push(format!("layer{l}.ln1.b"), Tensor::zeros(&[d]));
            for m in ["q", "k", "v", "o"] {
                push(format!("layer{l}.attn.w{m}"), xavier(&mut rng, d, d));
                push(format!("layer{l}.attn.b{m}"), Tensor::zeros(&[d]));
            }
            push(format!("layer{l}.ln2.g"), Tensor::full(&[d], 1.0));
            push(format!("layer{l}.ln2.b"), Tensor::zeros(&[d]));
            push(format!("layer{l}.ffn.w1"), xavier(&mut rng, d, config.d_ff));
            push(format!("layer{l}.ffn.b1"), Tensor::zeros(&[config.d_ff]));
            push(format!("layer{l}.ffn.w2"), xavier(&mut rng, config.d_ff, d));
            push(format!("layer{l}.ffn.b2"), Tensor::zeros(&[d]));
        }
        push("final_ln.g".into(), Tensor::full(&[d], 1.0));
        push("final_ln.b".into(), Tensor::zeros(&[d]));
        push("head.w".into(), xavier(&mut rng, d, 1));
        push("head.b".into(), Tensor::zeros(&[1]));
        if matches!(prior, PriorSpec::LearnableRpb) {
            let tokens = prior.tokens(config.lookback)?;
            push("rpb.table".into(), Tensor::zeros(&[2 * tokens - 1]));
        }
        Ok(Self {
            config: config.clone(),
            tensors: t,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.tensor)
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    /// Rebuilds parameters from checkpoint records, checking them against the
    /// layout `config` and `prior` imply.
    pub fn from_records(
        config: &BackboneConfig,
        prior: &PriorSpec,
        records: Vec<NamedTensor>,
    ) -> Result<Self> {
        let template = Self::init(config, prior, 0)?;
        let loaded = Self {
            config: config.clone(),
            tensors: records,
        };
        if !template.same_layout(&loaded) {
            return Err(Error::config(format!(
                "checkpoint layout does not match a {} backbone (d={}, L={}, H={})",
                prior.kind(),
                config.d_model,
                config.layers,
                config.heads
            )));
        }
        Ok(loaded)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        crate::tensor::write_checkpoint(f, &self.tensors)?;
        Ok(())
    }

    pub fn load(
        path: &std::path::Path,
        config: &BackboneConfig,
        prior: &PriorSpec,
    ) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let records = crate::tensor::read_checkpoint(f)?;
        Self::from_records(config, prior, records)
    }

    /// Records every tensor on `tape`; trainable leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.tensor.clone())
                } else {
                    tape.constant(t.tensor.clone())
                }
            })
            .collect();
        let index = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Bound { vars, index }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t> {
    pub vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    /// Gradients in parameter order (zeros where none reached a leaf).
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| match v.grad() {
                Some(g) => g.into_data(),
                None => vec![0.0; v.value().numel()],
            })
            .collect()
    }
}

/// Logits and retained attention maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts {
    /// One ranking logit per stock.
    pub logits: Vec<f64>,
    /// Per layer, attention weights `[S, H, T', T']`.
    pub attention: Vec<Tensor>,
}

/// Forward-pass output still attached to its tape.
pub struct ForwardVars<'t> {
    pub logits: Var<'t>,
    pub attention: Vec<Var<'t>>,
    /// Token states `[S, T', d]` after each layer.
    pub hidden: Vec<Var<'t>>,
}

pub fn sinusoidal_positions(tokens: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; tokens * d];
    for pos in 0..tokens {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![tokens, d], data).expect("shape")
}

fn diverged(stage: &str, layer: Option<usize>) -> Error {
    Error::Divergence {
        stage: stage.into(),
        layer,
        epoch: None,
    }
}

/// Runs the backbone on `x: [S, T, F]`.
///
/// `dropout_rng` enables dropout (when the configured rate is positive);
/// pass `None` for evaluation.
pub fn forward<'t>(
    params: &Bound<'t>,
    config: &BackboneConfig,
    prior: &BuiltPrior,
    x: Var<'t>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardVars<'t>> {
    let tape = x.tape();
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != config.lookback || shape[2] != config.features {
        return Err(Error::config(format!(
            "input shape {:?} does not match lookback {} x features {}",
            shape, config.lookback, config.features
        )));
    }
    let s = shape[0];
    let (d, h_count, dh) = (config.d_model, config.heads, config.head_dim());
    let tokens = prior.tokens;

    let input = match prior.patch() {
        Some((p, st)) => x.unfold(p, st)?,
        None => x,
    };
    let mut h = input
        .matmul(params.get("embed.w")?)?
        .add(params.get("embed.b")?)?;
    if config.positional_encoding {
        h = h.add(tape.constant(sinusoidal_positions(tokens, d)))?;
    }

    let additive = match (&prior.additive, &prior.rpb_index) {
        (_, Some(_)) => Some(rpb_bias(params.get("rpb.table")?, tokens)?),
        (Some(a), None) => Some(tape.constant_shared(a.clone())),
        (None, None) => None,
    };

    let mut dropout = |v: Var<'t>| -> Result<Var<'t>> {
        match dropout_rng.as_deref_mut() {
            Some(rng) if config.dropout > 0.0 => {
                let keep = 1.0 - config.dropout;
                let n = v.value().numel();
                let mask = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(v.mul(tape.constant(Tensor::new(v.shape(), mask)?))?)
            }
            _ => Ok(v),
        }
    };

    let mut attention = Vec::with_capacity(config.layers);
    let mut hidden = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = |n: &str| params.get(&format!("layer{l}.{n}"));
        let a = h.layernorm(p("ln1.g")?, p("ln1.b")?, config.ln_eps)?;
        let heads = |w: &str, b: &str| -> Result<Var<'t>> {
            Ok(a.matmul(p(w)?)?
                .add(p(b)?)?
                .reshape(&[s, tokens, h_count, dh])?
                .permute(&[0, 2, 1, 3])?)
        };
        let (q, k, v) = (
            heads("attn.wq", "attn.bq")?,
            heads("attn.wk", "attn.bk")?,
            heads("attn.wv", "attn.bv")?,
        );
        let (ctx, weights) = crate::priors::masked_attention(q, k, v, additive)?;
        let ctx = ctx.permute(&[0, 2, 1, 3])?.reshape(&[s, tokens, d])?;
        let attn_out = ctx.matmul(p("attn.wo")?)?.add(p("attn.bo")?)?;
        h = h.add(dropout(attn_out)?)?;
        let f = h.layernorm(p("ln2.g")?, p("ln2.b")?, config.ln_eps)?;
        let f = f.matmul(p("ffn.w1")?)?.add(p("ffn.b1")?)?.gelu();
        let f = f.matmul(p("ffn.w2")?)?.add(p("ffn.b2")?)?;
        h = h.add(dropout(f)?)?;
        if h.value().has_nan() {
            return Err(diverged("backbone forward", Some(l)));
        }
        attention.push(weights);
        hidden.push(h);
    }
    let h = h.layernorm(
        params.get("final_ln.g")?,
        params.get("final_ln.b")?,
        config.ln_eps,
    )?;
    let pooled = h.mean_axis(1)?;
    let logits = pooled
        .matmul(params.get("head.w")?)?
        .add(params.get("head.b")?)?
        .reshape(&[s])?;
    if logits.value().has_nan() {
        return Err(diverged("readout", None));
    }
    Ok(ForwardVars {
        logits,
        attention,
        hidden,
    })
}

impl ModelParams {
    /// Gradient-free forward pass with attention maps retained.
    pub fn predict(&self, prior: &BuiltPrior, x: &Tensor) -> Result<ForwardArtifacts> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let out = forward(&bound, &self.config, prior, xv, None)?;
        Ok(ForwardArtifacts {
            logits: out.logits.value().data().to_vec(),
            attention: out.attention.iter().map(|a| (*a.value()).clone()).collect(),
        })
    }

    /// Per-layer token states, for probing what each position can see.
    pub fn hidden_states(&self, prior: &BuiltPrior, x: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = forward(&bound, &self.config, prior, tape.constant(x.clone()), None)?;
        Ok(out.hidden.iter().map(|h| (*h.value()).clone()).collect())
    }

    /// Logits only.
    pub fn logits(&self, prior: &BuiltPrior, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.predict(prior, x)?.logits)
    }
}
