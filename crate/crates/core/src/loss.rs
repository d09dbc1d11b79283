//! Training objective: new-class cross-entropy, output-level distillation of
//! foreground probabilities and uncertainty, and foreground/background pixel
//! weighting.
//!
//! Labels are channel indices of the probability tensor (0 = background) or
//! [`IGNORE_LABEL`]. Ignored pixels are excluded from every average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::IGNORE_LABEL;
use crate::tensor::{Tape, Tensor, Var};

/// How the distillation weight applies to the two distillation terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum KdWeighting {
    /// `lambda_kd * (kd_fg + kd_u)`.
    #[default]
    Joint,
    /// Separate weights; `lambda_kd` is ignored.
    Separate { fg: f64, u: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_ce: f64,
    pub lambda_kd: f64,
    pub kd_weighting: KdWeighting,
    pub fg_bg_balancing: bool,
    pub weight_clamp: f64,
    pub epsilon: f64,
    /// Renormalise the student's foreground probabilities over the old
    /// channels before distilling. Off: distill the probabilities as-is.
    pub renormalize_student_fg: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_kd: 10.0,
            kd_weighting: KdWeighting::Joint,
            fg_bg_balancing: false,
            weight_clamp: 10.0,
            epsilon: 1e-12,
            renormalize_student_fg: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_ce, self.lambda_kd];
        let separate = match self.kd_weighting {
            KdWeighting::Joint => [0.0, 0.0],
            KdWeighting::Separate { fg, u } => [fg, u],
        };
        if weights.iter().chain(&separate).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        if !(self.weight_clamp >= 1.0) {
            return Err(Error::InvalidArgument("weight_clamp must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::InvalidArgument("epsilon must lie in (0, 1e-3)".into()));
        }
        Ok(())
    }
}

fn dims(tape: &Tape, var: Var, what: &str) -> Result<[usize; 4]> {
    tape.shape(var)
        .try_into()
        .map_err(|_| Error::Shape(format!("{what} must be N×C×H×W, got {:?}", tape.shape(var))))
}

fn check_labels_len(labels: &[u8], n: usize, h: usize, w: usize) -> Result<()> {
    if labels.len() != n * h * w {
        return Err(Error::Shape(format!(
            "label map has {} pixels, expected {n}×{h}×{w}",
            labels.len()
        )));
    }
    Ok(())
}

fn valid_count(labels: Option<&[u8]>, pixels: usize) -> usize {
    labels.map_or(pixels, |l| l.iter().filter(|&&y| y != IGNORE_LABEL).count())
}

/// Mean over non-ignored pixels of `-w * log p_y`; background pixels are
/// scored on channel 0.
pub fn loss_new(
    tape: &mut Tape,
    full_prob: Var,
    labels: &[u8],
    active_channels: &[usize],
    pixel_weights: Option<&[f64]>,
    epsilon: f64,
) -> Result<Var> {
    let [n, c, h, w] = dims(tape, full_prob, "probabilities")?;
    check_labels_len(labels, n, h, w)?;
    if let Some(pw) = pixel_weights {
        if pw.len() != labels.len() {
            return Err(Error::Shape("pixel weights do not match label map".into()));
        }
    }
    let plane = h * w;
    let count = valid_count(Some(labels), labels.len());
    let norm = 1.0 / count.max(1) as f64;
    let mut select = vec![0.0; n * c * plane];
    for (i, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        let y = y as usize;
        if y != 0 && !active_channels.contains(&y) {
            return Err(Error::Label(format!(
                "label {y} is neither background nor an active class {active_channels:?}"
            )));
        }
        if y >= c {
            return Err(Error::Label(format!("label {y} exceeds {c} channels")));
        }
        let (b, p) = (i / plane, i % plane);
        select[(b * c + y) * plane + p] = norm * pixel_weights.map_or(1.0, |pw| pw[i]);
    }
    let select = tape.constant(Tensor::new(&[n, c, h, w], select)?);
    weighted_neg_log(tape, full_prob, select, epsilon)
}

/// `-Σ select * log(max(p, eps))`.
fn weighted_neg_log(tape: &mut Tape, prob: Var, select: Var, epsilon: f64) -> Result<Var> {
    let clamped = tape.clamp_min(prob, epsilon)?;
    let log_p = tape.log(clamped)?;
    let weighted = tape.mul(log_p, select)?;
    let total = tape.sum(weighted, None)?;
    tape.scale(total, -1.0)
}

fn pixel_mask(labels: Option<&[u8]>, pixels: usize) -> Vec<f64> {
    let count = valid_count(labels, pixels);
    let norm = 1.0 / count.max(1) as f64;
    match labels {
        Some(l) => l
            .iter()
            .map(|&y| if y == IGNORE_LABEL { 0.0 } else { norm })
            .collect(),
        None => vec![norm; pixels],
    }
}

/// `-Σ_{old} p_teacher log p_student`, averaged over non-ignored pixels.
/// Old classes occupy the first `teacher_fg.shape()[1]` student channels.
pub fn loss_kd_fg(
    tape: &mut Tape,
    student_fg: Var,
    teacher_fg: &Tensor,
    labels: Option<&[u8]>,
    renormalize: bool,
    epsilon: f64,
) -> Result<Var> {
    let [n, ks, h, w] = dims(tape, student_fg, "student probabilities")?;
    let &[tn, ko, th, tw] = teacher_fg.shape() else {
        return Err(Error::Shape(format!(
            "teacher probabilities must be N×C×H×W, got {:?}",
            teacher_fg.shape()
        )));
    };
    if (tn, th, tw) != (n, h, w) || ko > ks {
        return Err(Error::Shape(format!(
            "teacher {:?} does not align with student {:?}",
            teacher_fg.shape(),
            tape.shape(student_fg)
        )));
    }
    if let Some(l) = labels {
        check_labels_len(l, n, h, w)?;
    }
    let plane = h * w;
    let mask = pixel_mask(labels, n * plane);
    let mut select = teacher_fg.clone();
    for (i, v) in select.data_mut().iter_mut().enumerate() {
        let (b, p) = (i / (ko * plane), i % plane);
        *v *= mask[b * plane + p];
    }
    let mut student_old = tape.narrow(student_fg, 1, 0, ko)?;
    if renormalize {
        let z = tape.sum(student_old, Some(&[1]))?;
        student_old = tape.div(student_old, z)?;
    }
    let select = tape.constant(select);
    weighted_neg_log(tape, student_old, select, epsilon)
}

/// Binary cross-entropy `-[u' log u + (1 - u') log(1 - u)]` between teacher
/// uncertainty `u'` and student uncertainty `u`, averaged over pixels.
pub fn loss_kd_u(
    tape: &mut Tape,
    student_u: Var,
    teacher_u: &Tensor,
    labels: Option<&[u8]>,
    epsilon: f64,
) -> Result<Var> {
    let shape = tape.shape(student_u).to_vec();
    if shape != teacher_u.shape() || shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Shape(format!(
            "uncertainty maps must both be N×1×H×W, got {shape:?} and {:?}",
            teacher_u.shape()
        )));
    }
    let in_unit = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
    if !in_unit(teacher_u) || !in_unit(tape.value(student_u)) {
        return Err(Error::InvalidArgument("uncertainty outside [0, 1]".into()));
    }
    let pixels = teacher_u.numel();
    if let Some(l) = labels {
        if l.len() != pixels {
            return Err(Error::Shape("label map does not match uncertainty map".into()));
        }
    }
    let mask = pixel_mask(labels, pixels);
    let pos: Vec<f64> = teacher_u.data().iter().zip(&mask).map(|(t, m)| t * m).collect();
    let neg: Vec<f64> = teacher_u.data().iter().zip(&mask).map(|(t, m)| (1.0 - t) * m).collect();
    let pos = tape.constant(Tensor::new(&shape, pos)?);
    let neg = tape.constant(Tensor::new(&shape, neg)?);
    let a = weighted_neg_log(tape, student_u, pos, epsilon)?;
    let not_u = tape.complement(student_u)?;
    let b = weighted_neg_log(tape, not_u, neg, epsilon)?;
    tape.add(a, b)
}

/// Per-pixel weights `min(clamp, N_tot / N_bg)` on background and
/// `min(clamp, N_tot / N_fg)` on foreground; ignored pixels get 0.
pub fn fg_bg_weights(labels: &[u8], clamp: f64) -> Result<Vec<f64>> {
    let bg = labels.iter().filter(|&&y| y == 0).count();
    let fg = labels.iter().filter(|&&y| y != 0 && y != IGNORE_LABEL).count();
    let total = bg + fg;
    if total == 0 {
        return Err(Error::Label("all pixels are ignored".into()));
    }
    let weight = |count: usize| (total as f64 / count as f64).min(clamp);
    let (w_bg, w_fg) = (
        if bg > 0 { weight(bg) } else { 0.0 },
        if fg > 0 { weight(fg) } else { 0.0 },
    );
    Ok(labels
        .iter()
        .map(|&y| match y {
            0 => w_bg,
            IGNORE_LABEL => 0.0,
            _ => w_fg,
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub new: Var,
    pub kd_fg: Option<Var>,
    pub kd_u: Option<Var>,
}

/// Step 0: `lambda_ce * new`. Later steps add the weighted distillation terms.
pub fn total_loss(tape: &mut Tape, step: usize, parts: LossParts, config: &LossConfig) -> Result<Var> {
    let has_kd = parts.kd_fg.is_some() || parts.kd_u.is_some();
    if step == 0 && has_kd {
        return Err(Error::InvalidArgument("distillation terms supplied at step 0".into()));
    }
    if step > 0 && !has_kd {
        return Err(Error::InvalidArgument(format!(
            "step {step} needs distillation terms from a teacher"
        )));
    }
    let ce = tape.scale(parts.new, config.lambda_ce)?;
    if step == 0 {
        return Ok(ce);
    }
    let terms = [(parts.kd_fg, true), (parts.kd_u, false)];
    match config.kd_weighting {
        KdWeighting::Joint => {
            if config.lambda_kd == 0.0 {
                return Ok(ce);
            }
            let mut kd: Option<Var> = None;
            for (term, _) in terms {
                if let Some(t) = term {
                    kd = Some(match kd {
                        Some(acc) => tape.add(acc, t)?,
                        None => t,
                    });
                }
            }
            let kd = tape.scale(kd.expect("checked above"), config.lambda_kd)?;
            tape.add(ce, kd)
        }
        KdWeighting::Separate { fg, u } => {
            let mut total = ce;
            for (term, is_fg) in terms {
                let weight = if is_fg { fg } else { u };
                if let (Some(t), true) = (term, weight != 0.0) {
                    let t = tape.scale(t, weight)?;
                    total = tape.add(total, t)?;
                }
            }
            Ok(total)
        }
    }
}
