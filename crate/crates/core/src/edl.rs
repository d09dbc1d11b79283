//! Evidential segmentation head.
//!
//! Raw per-class scores are rectified into non-negative evidence `e`, which
//! parameterises a Dirichlet with `alpha = e + 1`. With `S = Σ alpha` over the
//! K foreground channels:
//!
//! * belief `b_i = e_i / S`, uncertainty `u = K / S` (so `u + Σ b = 1`),
//! * foreground probability `p_i^fg = alpha_i / S`,
//! * final probability over K + 1 channels: channel 0 (background) is `u`,
//!   channel `i` is `(1 - u) p_i^fg`.
//!
//! The background channel is synthesised; it never has parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rectifier {
    Relu,
    Exp,
    #[default]
    ExpSigmoid,
}

impl Rectifier {
    pub const ALL: [Rectifier; 3] = [Rectifier::Relu, Rectifier::Exp, Rectifier::ExpSigmoid];

    pub fn name(self) -> &'static str {
        match self {
            Rectifier::Relu => "relu",
            Rectifier::Exp => "exp",
            Rectifier::ExpSigmoid => "exp_sigmoid",
        }
    }
}

impl std::str::FromStr for Rectifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Rectifier::Relu),
            "exp" => Ok(Rectifier::Exp),
            "exp_sigmoid" | "exp-sigmoid" => Ok(Rectifier::ExpSigmoid),
            other => Err(Error::InvalidArgument(format!("unknown rectifier `{other}`"))),
        }
    }
}

/// Maps raw scores to evidence `e >= 0`.
pub fn rectify(tape: &mut Tape, scores: Var, kind: Rectifier) -> Result<Var> {
    tape.value(scores).ensure_finite("rectify input")?;
    match kind {
        Rectifier::Relu => tape.relu(scores),
        Rectifier::Exp => tape.exp(scores),
        Rectifier::ExpSigmoid => {
            let e = tape.exp(scores)?;
            let s = tape.sigmoid(scores)?;
            tape.mul(e, s)
        }
    }
}

/// Dirichlet quantities for an `N×K×H×W` evidence tensor.
#[derive(Clone, Copy, Debug)]
pub struct DirichletStats {
    pub evidence: Var,
    pub alpha: Var,
    pub belief: Var,
    /// `N×1×H×W`.
    pub uncertainty: Var,
    pub fg_prob: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EvidentialOutput {
    pub stats: DirichletStats,
    /// `N×(K+1)×H×W`, background at channel 0.
    pub full_prob: Var,
}

pub fn dirichlet_stats(tape: &mut Tape, evidence: Var) -> Result<DirichletStats> {
    let shape = tape.shape(evidence);
    if shape.len() != 4 {
        return Err(Error::Shape(format!("evidence must be N×K×H×W, got {shape:?}")));
    }
    let k = shape[1];
    if k == 0 {
        return Err(Error::InvalidArgument("evidence has zero classes".into()));
    }
    if tape.value(evidence).data().iter().any(|&e| e < 0.0) {
        return Err(Error::InvalidArgument("evidence must be non-negative".into()));
    }
    let alpha = tape.affine(evidence, 1.0, 1.0)?;
    let strength = tape.sum(alpha, Some(&[1]))?;
    let belief = tape.div(evidence, strength)?;
    let k_const = tape.constant(Tensor::scalar(k as f64));
    let uncertainty = tape.div(k_const, strength)?;
    let fg_prob = tape.div(alpha, strength)?;
    Ok(DirichletStats {
        evidence,
        alpha,
        belief,
        uncertainty,
        fg_prob,
    })
}

pub fn factorize_probability(tape: &mut Tape, stats: &DirichletStats) -> Result<Var> {
    let not_bg = tape.complement(stats.uncertainty)?;
    let fg = tape.mul(not_bg, stats.fg_prob)?;
    tape.concat(&[stats.uncertainty, fg], 1)
}

/// Scores to the full evidential output in one go.
pub fn evidential_output(tape: &mut Tape, scores: Var, kind: Rectifier) -> Result<EvidentialOutput> {
    let evidence = rectify(tape, scores, kind)?;
    evidential_from_evidence(tape, evidence)
}

pub fn evidential_from_evidence(tape: &mut Tape, evidence: Var) -> Result<EvidentialOutput> {
    let stats = dirichlet_stats(tape, evidence)?;
    let full_prob = factorize_probability(tape, &stats)?;
    Ok(EvidentialOutput { stats, full_prob })
}

/// Inference-time scale for an increment of `k_t` classes out of `k_total`:
/// `o = (2 k_t - 1) k_total² / (k_t² (2 k_total - 1))`.
pub fn increment_scale(k_t: usize, k_total: usize) -> Result<f64> {
    if k_t == 0 || k_total < k_t {
        return Err(Error::InvalidArgument(format!(
            "increment_scale needs 1 <= k_t <= k_total, got k_t={k_t}, k_total={k_total}"
        )));
    }
    let (kt, kk) = (k_t as f64, k_total as f64);
    Ok((2.0 * kt - 1.0) * kk * kk / (kt * kt * (2.0 * kk - 1.0)))
}

/// Scales, per pixel and per increment group, the largest positive evidence
/// value of that group by the group's [`increment_scale`]. Channels are laid
/// out group after group in `group_sizes` order. Ties go to the lowest channel.
pub fn apply_increment_balancing(evidence: &Tensor, group_sizes: &[usize]) -> Result<Tensor> {
    let &[n, k, h, w] = evidence.shape() else {
        return Err(Error::Shape(format!(
            "evidence must be N×K×H×W, got {:?}",
            evidence.shape()
        )));
    };
    let total: usize = group_sizes.iter().sum();
    if total != k || group_sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "increment sizes {group_sizes:?} do not match {k} evidence channels"
        )));
    }
    let scales = group_sizes
        .iter()
        .map(|&g| increment_scale(g, total))
        .collect::<Result<Vec<_>>>()?;
    let mut out = evidence.clone();
    let plane = h * w;
    let data = out.data_mut();
    for b in 0..n {
        let mut first = 0;
        for (&size, &scale) in group_sizes.iter().zip(&scales) {
            for p in 0..plane {
                let mut best: Option<(usize, f64)> = None;
                for c in first..first + size {
                    let v = data[(b * k + c) * plane + p];
                    if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((c, v));
                    }
                }
                if let Some((c, v)) = best {
                    data[(b * k + c) * plane + p] = v * scale;
                }
            }
            first += size;
        }
    }
    Ok(out)
}
