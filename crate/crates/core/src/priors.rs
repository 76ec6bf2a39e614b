//! Structural attention priors: masks, additive biases and input patching.
//!
//! Every teacher runs the same backbone; only the additive term
//! `M + B` entering the attention logits (or the patching of the input)
//! differs. Masks hold exactly `0` or `-inf`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result as TResult, Tensor, TensorError, Var};

/// One teacher's structural prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorSpec {
    Vanilla,
    /// Attend to current and earlier steps only.
    Past,
    /// Attend to strictly later steps (final step attends to itself).
    Future,
    Patch {
        patch_len: usize,
        stride: usize,
    },
    Alibi {
        slopes: Vec<f64>,
    },
    FixedPeriodic {
        periods: Vec<usize>,
    },
    LearnableRpb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Past,
    Future,
    Patch,
    Alibi,
    Fixed,
    Learn,
    Vanilla,
}

impl PriorKind {
    pub const ALL: [PriorKind; 7] = [
        PriorKind::Past,
        PriorKind::Future,
        PriorKind::Patch,
        PriorKind::Alibi,
        PriorKind::Fixed,
        PriorKind::Learn,
        PriorKind::Vanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Past => "past",
            PriorKind::Future => "future",
            PriorKind::Patch => "patch",
            PriorKind::Alibi => "alibi",
            PriorKind::Fixed => "fixed",
            PriorKind::Learn => "learn",
            PriorKind::Vanilla => "vanilla",
        }
    }

    pub fn group(self) -> BiasGroup {
        match self {
            PriorKind::Past | PriorKind::Future => BiasGroup::Causality,
            PriorKind::Patch | PriorKind::Alibi => BiasGroup::Locality,
            PriorKind::Fixed | PriorKind::Learn => BiasGroup::Periodicity,
            PriorKind::Vanilla => BiasGroup::Vanilla,
        }
    }

    /// Default construction used throughout the pipeline.
    pub fn default_spec(self, heads: usize) -> PriorSpec {
        match self {
            PriorKind::Past => PriorSpec::Past,
            PriorKind::Future => PriorSpec::Future,
            PriorKind::Patch => PriorSpec::Patch {
                patch_len: 2,
                stride: 1,
            },
            PriorKind::Alibi => PriorSpec::Alibi {
                slopes: alibi_slopes(heads),
            },
            PriorKind::Fixed => PriorSpec::FixedPeriodic {
                periods: default_periods(heads),
            },
            PriorKind::Learn => PriorSpec::LearnableRpb,
            PriorKind::Vanilla => PriorSpec::Vanilla,
        }
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PriorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        PriorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown prior kind `{s}`"))
    }
}

/// Teacher families used for ablation subsets and attention alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasGroup {
    Causality,
    Locality,
    Periodicity,
    Vanilla,
}

impl BiasGroup {
    pub const ALL: [BiasGroup; 4] = [
        BiasGroup::Causality,
        BiasGroup::Locality,
        BiasGroup::Periodicity,
        BiasGroup::Vanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BiasGroup::Causality => "causality",
            BiasGroup::Locality => "locality",
            BiasGroup::Periodicity => "periodicity",
            BiasGroup::Vanilla => "vanilla",
        }
    }
}

impl PriorSpec {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorSpec::Vanilla => PriorKind::Vanilla,
            PriorSpec::Past => PriorKind::Past,
            PriorSpec::Future => PriorKind::Future,
            PriorSpec::Patch { .. } => PriorKind::Patch,
            PriorSpec::Alibi { .. } => PriorKind::Alibi,
            PriorSpec::FixedPeriodic { .. } => PriorKind::Fixed,
            PriorSpec::LearnableRpb => PriorKind::Learn,
        }
    }

    /// Sequence length after any input patching.
    pub fn tokens(&self, lookback: usize) -> TResult<usize> {
        match self {
            PriorSpec::Patch { patch_len, stride } => patched_len(lookback, *patch_len, *stride),
            _ => Ok(lookback),
        }
    }

    /// Materializes the fixed parts of the prior for `lookback` input steps.
    pub fn build(&self, lookback: usize, heads: usize) -> TResult<BuiltPrior> {
        let tokens = self.tokens(lookback)?;
        let (mask, bias) = match self {
            PriorSpec::Vanilla | PriorSpec::Patch { .. } | PriorSpec::LearnableRpb => (None, None),
            PriorSpec::Past => (Some(causal_mask(tokens)?), None),
            PriorSpec::Future => (Some(reverse_mask(tokens)?), None),
            PriorSpec::Alibi { slopes } => {
                check_heads(slopes.len(), heads)?;
                (None, Some(alibi_bias(tokens, slopes)))
            }
            PriorSpec::FixedPeriodic { periods } => {
                check_heads(periods.len(), heads)?;
                (None, Some(fixed_periodic_bias(tokens, periods)?))
            }
        };
        // Mask and bias fold into one additive tensor, broadcast over heads.
        let additive = match (mask, bias) {
            (None, None) => None,
            (Some(m), None) => Some(m),
            (None, Some(b)) => Some(b),
            (Some(m), Some(b)) => {
                let t2 = tokens * tokens;
                let data = b
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + m.data()[i % t2])
                    .collect();
                Some(Tensor::new(b.shape().to_vec(), data)?)
            }
        };
        Ok(BuiltPrior {
            spec: self.clone(),
            tokens,
            additive: additive.map(Arc::new),
            rpb_index: matches!(self, PriorSpec::LearnableRpb).then(|| rpb_index(tokens)),
        })
    }
}

fn check_heads(got: usize, heads: usize) -> TResult<()> {
    if got != heads {
        return Err(TensorError::Invalid(format!(
            "prior defines {got} per-head values for {heads} heads"
        )));
    }
    Ok(())
}

/// A prior resolved for a fixed token count; immutable and shareable.
#[derive(Clone, Debug)]
pub struct BuiltPrior {
    pub spec: PriorSpec,
    pub tokens: usize,
    /// `[T', T']` or `[H, T', T']` term added to every layer's attention logits.
    pub additive: Option<Arc<Tensor>>,
    /// Flat lookup `(i - j) + (T' - 1)` for the learnable relative bias.
    pub rpb_index: Option<Arc<Vec<usize>>>,
}

impl BuiltPrior {
    pub fn patch(&self) -> Option<(usize, usize)> {
        match self.spec {
            PriorSpec::Patch { patch_len, stride } => Some((patch_len, stride)),
            _ => None,
        }
    }
}

/// The seven teachers: past, future, patch, ALiBi, fixed periodic, learnable
/// relative bias, vanilla.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSetSpec {
    specs: Vec<PriorSpec>,
}

impl TeacherSetSpec {
    pub const SIZE: usize = 7;

    pub fn new(specs: Vec<PriorSpec>) -> TResult<Self> {
        if specs.len() != Self::SIZE {
            return Err(TensorError::Invalid(format!(
                "teacher set needs exactly {} priors, got {}",
                Self::SIZE,
                specs.len()
            )));
        }
        Ok(Self { specs })
    }

    pub fn standard(heads: usize) -> Self {
        Self {
            specs: PriorKind::ALL
                .iter()
                .map(|k| k.default_spec(heads))
                .collect(),
        }
    }

    pub fn specs(&self) -> &[PriorSpec] {
        &self.specs
    }

    /// Members of the given families, in canonical order.
    pub fn subset(&self, groups: &[BiasGroup]) -> Vec<PriorSpec> {
        self.specs
            .iter()
            .filter(|s| groups.contains(&s.kind().group()))
            .cloned()
            .collect()
    }
}

pub fn patched_len(t: usize, patch: usize, stride: usize) -> TResult<usize> {
    if patch == 0 || stride == 0 || patch > t {
        return Err(TensorError::Invalid(format!(
            "patch length {patch} / stride {stride} invalid for {t} steps"
        )));
    }
    Ok((t - patch) / stride + 1)
}

/// `M[i][j] = 0` for `i >= j`, `-inf` above the diagonal.
pub fn causal_mask(t: usize) -> TResult<Tensor> {
    if t == 0 {
        return Err(TensorError::Invalid("causal mask needs T >= 1".into()));
    }
    let data = (0..t * t)
        .map(|k| {
            if k / t >= k % t {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Tensor::new(vec![t, t], data)
}

/// `M[i][j] = 0` for `i < j`, `-inf` otherwise, except the final row which
/// keeps its diagonal so it is not empty.
pub fn reverse_mask(t: usize) -> TResult<Tensor> {
    if t < 2 {
        return Err(TensorError::Invalid("reverse mask needs T >= 2".into()));
    }
    let mut data: Vec<f64> = (0..t * t)
        .map(|k| {
            if k / t < k % t {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    data[t * t - 1] = 0.0;
    Tensor::new(vec![t, t], data)
}

/// Head `h` (1-based) gets slope `2^(-8/h)`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads).map(|h| 2f64.powf(-8.0 / h as f64)).collect()
}

pub fn default_periods(heads: usize) -> Vec<usize> {
    (1..=heads).map(|h| 5 * h).collect()
}

/// `B[h][i][j] = -m_h |i - j|`.
pub fn alibi_bias(t: usize, slopes: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(slopes.len() * t * t);
    for &m in slopes {
        for i in 0..t {
            for j in 0..t {
                data.push(-m * i.abs_diff(j) as f64);
            }
        }
    }
    Tensor::new(vec![slopes.len(), t, t], data).expect("shape")
}

/// Triangular wave in `|i - j|` with period `p`, peaking at `p/2`.
pub fn periodic_value(distance: usize, period: usize) -> f64 {
    let beta = distance % period;
    if (beta as f64) < period as f64 / 2.0 {
        beta as f64
    } else {
        (period - beta) as f64
    }
}

pub fn fixed_periodic_bias(t: usize, periods: &[usize]) -> TResult<Tensor> {
    if let Some(p) = periods.iter().find(|&&p| p == 0) {
        return Err(TensorError::Invalid(format!(
            "period must be positive, got {p}"
        )));
    }
    let mut data = Vec::with_capacity(periods.len() * t * t);
    for &p in periods {
        for i in 0..t {
            for j in 0..t {
                data.push(periodic_value(i.abs_diff(j), p));
            }
        }
    }
    Tensor::new(vec![periods.len(), t, t], data)
}

pub fn rpb_index(t: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            idx.push(i + t - 1 - j);
        }
    }
    Arc::new(idx)
}

/// `B[i][j] = table[(i - j) + T - 1]`; the table holds one value per offset
/// in `-(T-1) ..= T-1`.
pub fn rpb_bias<'t>(table: Var<'t>, t: usize) -> TResult<Var<'t>> {
    let len = table.value().numel();
    if len != 2 * t - 1 {
        return Err(TensorError::Invalid(format!(
            "relative-bias table has {len} offsets, {t} tokens need {}",
            2 * t - 1
        )));
    }
    table.gather(rpb_index(t), &[t, t])
}

/// `softmax(Q Kᵀ / sqrt(d_head) + additive) V` over the last two axes.
/// Returns the attended values and the attention weights.
pub fn masked_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    additive: Option<Var<'t>>,
) -> TResult<(Var<'t>, Var<'t>)> {
    let dh = *q.shape().last().unwrap_or(&1);
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
    let scores = match additive {
        Some(a) => scores.add(a)?,
        None => scores,
    };
    let weights = scores.softmax()?;
    Ok((weights.matmul(v)?, weights))
}
