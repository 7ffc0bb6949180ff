//! The five training loss components and the consistency ramp-up schedule.
//!
//! Each loss exists twice: as a plain scalar function over slices (the
//! reference used by tests and reporting) and as a graph builder used by the
//! trainer so gradients flow to the student. A cross-check test holds the two
//! routes together on random inputs.
//!
//! Ratio denominators are guarded with max(sum, eps) so that identical binary
//! masks cost exactly zero and empty-vs-empty degenerates to zero, while a
//! vanishing mask can never divide by zero.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::model::{upsample_attention, ForwardPass};
use crate::tensor::Tensor;

/// Weights and guards for the loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the attention-vs-segmentation ratio term.
    pub lambda_a: f64,
    /// Weight of the attention containment regularizer.
    pub lambda_r: f64,
    pub num_classes: usize,
    /// Denominator guard for every ratio and the log clamp.
    pub eps: f64,
    /// When set, segmentations of unlabeled samples also drive the attention
    /// loss; off by default so unlabeled ground truth stays hidden.
    pub attention_on_unlabeled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_a: 0.5,
            lambda_r: 0.001,
            num_classes: 3,
            eps: 1e-8,
            attention_on_unlabeled: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_a < 0.0 || self.lambda_r < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("loss eps must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// Which optional terms participate in the total loss; derived from the
/// training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossParts {
    pub attention: bool,
    pub class_consistency: bool,
    pub attention_consistency: bool,
}

/// Scalar values of one step's loss, satisfying
/// `l_total = l_c + l_a + w_tau*l_cc + w_tau*l_ac`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_a: f64,
    pub l_cc: f64,
    pub l_ac: f64,
    pub w_tau: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Recombine the components exactly as the trainer does.
    pub fn total_from_parts(&self) -> f64 {
        self.l_c + self.l_a + self.w_tau * self.l_cc + self.w_tau * self.l_ac
    }
}

/// Mean over labeled rows of -ln(max(prob[label], eps)); 0 when no row is
/// labeled.
pub fn cross_entropy(probs: &Tensor, labels: &[usize], labeled: &[bool], eps: f64) -> Result<f64> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "cross_entropy wants probs [N,n], got {shape:?}"
        )));
    }
    let (n, classes) = (shape[0], shape[1]);
    if labels.len() != n || labeled.len() != n {
        return Err(Error::Dimension(format!(
            "labels/mask lengths {}/{} do not match batch {n}",
            labels.len(),
            labeled.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..n {
        if !labeled[r] {
            continue;
        }
        if labels[r] >= classes {
            return Err(Error::Data(format!(
                "label {} out of range for {classes} classes",
                labels[r]
            )));
        }
        let p = probs.values()[r * classes + labels[r]].max(eps);
        sum += -p.ln();
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Per-sample attention supervision against a binary segmentation on the same
/// lattice:
/// `lambda_a * sum((f-S)^2) / max(sum(f)+sum(S), eps)
///  + lambda_r * (1 - sum(f*S) / max(sum(f), eps))`.
/// Two empty masks cost zero.
pub fn attention_loss(f: &[f64], seg: &[f64], lambda_a: f64, lambda_r: f64, eps: f64) -> Result<f64> {
    if f.len() != seg.len() {
        return Err(Error::Dimension(format!(
            "attention {} and segmentation {} lattices differ",
            f.len(),
            seg.len()
        )));
    }
    if let Some(v) = f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Corruption(format!(
            "attention value {v} outside [0,1]"
        )));
    }
    if let Some(v) = seg.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Data(format!("segmentation value {v} not binary")));
    }
    let sum_f: f64 = f.iter().sum();
    let sum_s: f64 = seg.iter().sum();
    if sum_f == 0.0 && sum_s == 0.0 {
        return Ok(0.0);
    }
    let num: f64 = f.iter().zip(seg).map(|(a, b)| (a - b) * (a - b)).sum();
    let inter: f64 = f.iter().zip(seg).map(|(a, b)| a * b).sum();
    let term1 = lambda_a * num / (sum_f + sum_s).max(eps);
    let term2 = lambda_r * (1.0 - inter / sum_f.max(eps));
    Ok(term1 + term2)
}

/// Mean over the batch of the per-sample mean squared probability gap
/// (1/n) * sum_n (p_s - p_t)^2.
pub fn classification_consistency(p_s: &Tensor, p_t: &Tensor) -> Result<f64> {
    if p_s.shape() != p_t.shape() {
        return Err(Error::Dimension(format!(
            "probability shapes differ: {:?} vs {:?}",
            p_s.shape(),
            p_t.shape()
        )));
    }
    let shape = p_s.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "classification_consistency wants [N,n], got {shape:?}"
        )));
    }
    let (n, classes) = (shape[0], shape[1]);
    let sq: f64 = p_s
        .values()
        .iter()
        .zip(p_t.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / (n * classes) as f64)
}

/// Per-sample attention gap `sum((f_s-f_t)^2) / max(sum(f_s)+sum(f_t), eps)`.
pub fn attention_consistency(f_s: &[f64], f_t: &[f64], eps: f64) -> Result<f64> {
    if f_s.len() != f_t.len() {
        return Err(Error::Dimension(format!(
            "attention lattices differ: {} vs {}",
            f_s.len(),
            f_t.len()
        )));
    }
    let num: f64 = f_s.iter().zip(f_t).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = f_s.iter().sum::<f64>() + f_t.iter().sum::<f64>();
    Ok(num / den.max(eps))
}

/// Consistency weight `exp(-5 * (1 - tau/tau_max)^2)`, clamped to 1 past
/// `tau_max`; strictly increasing on [0, tau_max].
pub fn rampup_weight(tau: u64, tau_max: u64) -> Result<f64> {
    if tau_max == 0 {
        return Err(Error::Config("rampup tau_max must be positive".into()));
    }
    if tau >= tau_max {
        return Ok(1.0);
    }
    let r = tau as f64 / tau_max as f64;
    Ok((-5.0 * (1.0 - r) * (1.0 - r)).exp())
}

/// Graph nodes for one step's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_c: TensorId,
    pub l_a: TensorId,
    pub l_cc: TensorId,
    pub l_ac: TensorId,
    pub l_total: TensorId,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph, w_tau: f64) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            l_c: g.item(self.l_c)?,
            l_a: g.item(self.l_a)?,
            l_cc: g.item(self.l_cc)?,
            l_ac: g.item(self.l_ac)?,
            w_tau,
            l_total: g.item(self.l_total)?,
        })
    }
}

fn zero_scalar(g: &mut Graph) -> Result<TensorId> {
    g.constant(vec![1], vec![0.0])
}

/// Assemble the total training loss on the graph.
///
/// Supervision (`l_c`, `l_a`) covers rows flagged labeled (for `l_a`, rows
/// whose segmentation is provided); both consistency terms average over the
/// whole batch. The teacher pass must come from a no-gradient forward so its
/// outputs enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn build_total_loss(
    g: &mut Graph,
    student: &ForwardPass,
    teacher: Option<&ForwardPass>,
    labels: &[usize],
    labeled: &[bool],
    segs: &[Option<&[f64]>],
    input_size: usize,
    w_tau: f64,
    cfg: &LossConfig,
    parts: LossParts,
) -> Result<LossTerms> {
    cfg.validate()?;
    let pshape = g.shape(student.probs).to_vec();
    if pshape.len() != 2 || pshape[1] != cfg.num_classes {
        return Err(Error::Dimension(format!(
            "student probs {pshape:?} do not match {} classes",
            cfg.num_classes
        )));
    }
    let n_batch = pshape[0];
    if labels.len() != n_batch || labeled.len() != n_batch || segs.len() != n_batch {
        return Err(Error::Dimension(format!(
            "batch metadata lengths {}/{}/{} do not match batch {n_batch}",
            labels.len(),
            labeled.len(),
            segs.len()
        )));
    }

    // L_c over labeled rows.
    let mut picks = Vec::new();
    for r in 0..n_batch {
        if labeled[r] {
            if labels[r] >= cfg.num_classes {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes",
                    labels[r], cfg.num_classes
                )));
            }
            picks.push((r, labels[r]));
        }
    }
    let l_c = if picks.is_empty() {
        zero_scalar(g)?
    } else {
        let k = picks.len() as f64;
        let gathered = g.gather(student.probs, picks)?;
        let logs = g.log_clamped(gathered, cfg.eps)?;
        let s = g.sum_all(logs)?;
        g.scale(s, -1.0 / k)?
    };

    // L_a over rows with visible segmentation.
    let seg_area = input_size * input_size;
    let seg_rows: Vec<usize> = (0..n_batch).filter(|&r| segs[r].is_some()).collect();
    let l_a = if !parts.attention || seg_rows.is_empty() {
        zero_scalar(g)?
    } else {
        let mut seg_vals = vec![0.0; n_batch * seg_area];
        let mut mask_vals = vec![0.0; n_batch];
        for &r in &seg_rows {
            let seg = segs[r].unwrap();
            if seg.len() != seg_area {
                return Err(Error::Dimension(format!(
                    "segmentation of {} pixels does not cover {input_size}x{input_size}",
                    seg.len()
                )));
            }
            if seg.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::Data("segmentation mask not binary".into()));
            }
            seg_vals[r * seg_area..(r + 1) * seg_area].copy_from_slice(seg);
            mask_vals[r] = 1.0;
        }
        let f_up = upsample_attention(g, student.attention, input_size)?;
        let f2 = g.reshape(f_up, vec![n_batch, seg_area])?;
        let seg_id = g.constant(vec![n_batch, seg_area], seg_vals)?;
        let diff = g.sub(f2, seg_id)?;
        let sq = g.mul(diff, diff)?;
        let num = g.sum_rows(sq)?;
        let sum_f = g.sum_rows(f2)?;
        let sum_s = g.sum_rows(seg_id)?;
        let den_sum = g.add(sum_f, sum_s)?;
        let den1 = g.max_const(den_sum, cfg.eps)?;
        let ratio = g.div_elem(num, den1)?;
        let prod = g.mul(f2, seg_id)?;
        let inter = g.sum_rows(prod)?;
        let den2 = g.max_const(sum_f, cfg.eps)?;
        let contained = g.div_elem(inter, den2)?;
        let neg = g.scale(contained, -1.0)?;
        let reg = g.add_const(neg, 1.0)?;
        let t1 = g.scale(ratio, cfg.lambda_a)?;
        let t2 = g.scale(reg, cfg.lambda_r)?;
        let per_sample = g.add(t1, t2)?;
        let mask = g.constant(vec![n_batch], mask_vals)?;
        let masked = g.mul(per_sample, mask)?;
        let total = g.sum_all(masked)?;
        g.scale(total, 1.0 / seg_rows.len() as f64)?
    };

    // Dual consistency over the full batch, teacher as constant.
    let (l_cc, l_ac) = if parts.class_consistency || parts.attention_consistency {
        let t = teacher.ok_or_else(|| {
            Error::Usage("consistency terms requested without a teacher pass".into())
        })?;
        if g.shape(t.probs) != pshape.as_slice() {
            return Err(Error::Dimension(format!(
                "teacher probs {:?} differ from student {pshape:?}",
                g.shape(t.probs)
            )));
        }
        let l_cc = if parts.class_consistency {
            let d = g.sub(student.probs, t.probs)?;
            let sq = g.mul(d, d)?;
            let s = g.sum_all(sq)?;
            g.scale(s, 1.0 / (n_batch * cfg.num_classes) as f64)?
        } else {
            zero_scalar(g)?
        };
        let l_ac = if parts.attention_consistency {
            let ashape = g.shape(student.attention).to_vec();
            if g.shape(t.attention) != ashape.as_slice() {
                return Err(Error::Dimension(format!(
                    "teacher attention {:?} differs from student {ashape:?}",
                    g.shape(t.attention)
                )));
            }
            let hw = ashape[2] * ashape[3];
            let fs = g.reshape(student.attention, vec![n_batch, hw])?;
            let ft = g.reshape(t.attention, vec![n_batch, hw])?;
            let d = g.sub(fs, ft)?;
            let sq = g.mul(d, d)?;
            let num = g.sum_rows(sq)?;
            let den_sum = {
                let a = g.sum_rows(fs)?;
                let b = g.sum_rows(ft)?;
                g.add(a, b)?
            };
            let den = g.max_const(den_sum, cfg.eps)?;
            let per = g.div_elem(num, den)?;
            let s = g.sum_all(per)?;
            g.scale(s, 1.0 / n_batch as f64)?
        } else {
            zero_scalar(g)?
        };
        (l_cc, l_ac)
    } else {
        (zero_scalar(g)?, zero_scalar(g)?)
    };

    let wcc = g.scale(l_cc, w_tau)?;
    let wac = g.scale(l_ac, w_tau)?;
    let ca = g.add(l_c, l_a)?;
    let with_cc = g.add(ca, wcc)?;
    let l_total = g.add(with_cc, wac)?;

    Ok(LossTerms {
        l_c,
        l_a,
        l_cc,
        l_ac,
        l_total,
    })
}
