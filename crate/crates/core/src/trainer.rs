//! Adam optimization of the student, EMA maintenance of the teacher, the
//! per-step training loop, and test-set evaluation.
//!
//! Step indices run 0..=tau_max with tau_max = total_steps - 1, so the logged
//! ramp weight starts at exp(-5) on the first step and ends exactly at 1.

use crate::config::{EvalModel, Method, RunConfig, TrainConfig};
use crate::data::{
    apply_augmentation, draw_augmentation, Augmentation, BatchSampler, Dataset, Mask, SplitDataset,
};
use crate::ema::ema_update;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{build_total_loss, rampup_weight, LossBreakdown, LossParts};
use crate::metrics::{auc_macro, confusion_matrix, iou, recall_f1, tiou, MetricsConfig, MetricsReport};
use crate::model::{forward, init_pair, upsample_attention_raster, ModelPair, NetworkConfig, ParamSet};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// First and second moment estimates, aligned with the parameter entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are first augmented with
/// `weight_decay * param`; a non-finite gradient aborts with the offending
/// parameter named.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adam_step alignment: {} grads, {} moments, {} params",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    let names: Vec<String> = params.names().iter().map(|s| s.to_string()).collect();
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (i, tensor) in params.tensors_mut().enumerate() {
        if grads[i].len() != tensor.numel() {
            return Err(Error::Dimension(format!(
                "gradient for {} has {} entries, parameter has {}",
                names[i],
                grads[i].len(),
                tensor.numel()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, p) in tensor.values_mut().iter_mut().enumerate() {
            let g0 = grads[i][j];
            if !g0.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} for parameter {}[{j}]",
                    g0, names[i]
                )));
            }
            let g = g0 + cfg.weight_decay * *p;
            m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * g;
            v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// One logged training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: u64,
    pub breakdown: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,l_c,l_a,l_cc,l_ac,w_tau,l_total";

pub fn log_csv_rows(rows: &[StepLog]) -> String {
    let mut out = String::new();
    for r in rows {
        let b = r.breakdown;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, b.l_c, b.l_a, b.l_cc, b.l_ac, b.w_tau, b.l_total
        ));
    }
    out
}

impl Method {
    fn loss_parts(self) -> LossParts {
        match self {
            Method::Supervised => LossParts {
                attention: true,
                class_consistency: false,
                attention_consistency: false,
            },
            Method::MeanTeacher => LossParts {
                attention: false,
                class_consistency: true,
                attention_consistency: false,
            },
            Method::DcmtNac => LossParts {
                attention: true,
                class_consistency: true,
                attention_consistency: false,
            },
            Method::Dcmt => LossParts {
                attention: true,
                class_consistency: true,
                attention_consistency: true,
            },
        }
    }
}

/// Owns all mutable training state; one instance per run, one thread.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    dataset: &'a Dataset,
    splits: &'a SplitDataset,
    pub pair: ModelPair,
    pub adam: AdamState,
    sampler: BatchSampler,
    aug_rng: ChaCha8Rng,
    step: u64,
    total_steps: u64,
    warnings: Vec<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, dataset: &'a Dataset, splits: &'a SplitDataset) -> Result<Self> {
        cfg.validate()?;
        if dataset.size != cfg.model.input_size {
            return Err(Error::Config(format!(
                "dataset size {} does not match model input {}",
                dataset.size, cfg.model.input_size
            )));
        }
        let pair = init_pair(&cfg.model)?;
        let adam = AdamState::zeros_like(&pair.student);

        let mut batch = cfg.batch;
        if cfg.trainer.method == Method::Supervised {
            // supervision only consumes labeled samples
            batch.unlabeled_per_batch = 0;
        }
        let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
        sampler_rng.set_stream(1);
        let sampler = BatchSampler::new(splits.labeled.len(), splits.unlabeled.len(), batch, sampler_rng)?;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
        aug_rng.set_stream(2);

        let steps_per_epoch = (splits.labeled.len() as u64).div_ceil(batch.labeled_per_batch as u64);
        let total_steps = cfg.trainer.epochs as u64 * steps_per_epoch;

        let mut warnings = Vec::new();
        if cfg.trainer.method != Method::Supervised && splits.unlabeled.is_empty() {
            warnings.push(
                "unlabeled pool is empty; consistency terms reduce to student-vs-teacher \
                 agreement on labeled data"
                    .to_string(),
            );
        }

        Ok(Trainer {
            cfg,
            dataset,
            splits,
            pair,
            adam,
            sampler,
            aug_rng,
            step: 0,
            total_steps,
            warnings,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn tau_max(&self) -> u64 {
        self.total_steps.saturating_sub(1)
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.total_steps / self.cfg.trainer.epochs as u64
    }

    fn ramp(&self, tau: u64) -> Result<f64> {
        if self.tau_max() == 0 {
            return Ok(1.0);
        }
        rampup_weight(tau, self.tau_max())
    }

    /// Execute one optimizer step. On a non-finite loss or gradient the error
    /// is returned before any update, leaving the trainer at the last good
    /// state (checkpoint it to recover).
    pub fn step(&mut self) -> Result<StepLog> {
        if self.step >= self.total_steps {
            return Err(Error::Usage("training already complete".into()));
        }
        let tau = self.step;
        let w_tau = self.ramp(tau)?;
        let method = self.cfg.trainer.method;
        let parts = method.loss_parts();
        let size = self.dataset.size;
        let area = size * size;

        let draw = self.sampler.next_batch();
        let mut ds_indices: Vec<(usize, bool)> = Vec::with_capacity(draw.labeled.len() + draw.unlabeled.len());
        for p in &draw.labeled {
            ds_indices.push((self.splits.labeled[*p], true));
        }
        for p in &draw.unlabeled {
            ds_indices.push((self.splits.unlabeled[*p], false));
        }
        let n_batch = ds_indices.len();

        let mut student_vals = Vec::with_capacity(n_batch * area);
        let mut teacher_vals = Vec::with_capacity(n_batch * area);
        let mut labels = Vec::with_capacity(n_batch);
        let mut labeled_flags = Vec::with_capacity(n_batch);
        let mut seg_store: Vec<Option<Vec<f64>>> = Vec::with_capacity(n_batch);
        for &(idx, is_labeled) in &ds_indices {
            let sample = &self.dataset.samples[idx];
            let aug = if self.cfg.trainer.augment {
                draw_augmentation(&mut self.aug_rng)
            } else {
                Augmentation::IDENTITY
            };
            let (img, seg) = apply_augmentation(&sample.image, &sample.seg, aug);
            if self.cfg.trainer.independent_augmentation {
                let taug = if self.cfg.trainer.augment {
                    draw_augmentation(&mut self.aug_rng)
                } else {
                    Augmentation::IDENTITY
                };
                let (timg, _) = apply_augmentation(&sample.image, &sample.seg, taug);
                teacher_vals.extend_from_slice(&timg.data);
            } else {
                teacher_vals.extend_from_slice(&img.data);
            }
            student_vals.extend_from_slice(&img.data);
            // the labeled-flag view: class and segmentation of unlabeled
            // samples stay hidden unless explicitly exposed
            labels.push(if is_labeled { sample.class.as_usize() } else { 0 });
            labeled_flags.push(is_labeled);
            let seg_visible = is_labeled || self.cfg.losses.attention_on_unlabeled;
            seg_store.push(seg_visible.then(|| seg.to_values()));
        }
        let segs: Vec<Option<&[f64]>> = seg_store.iter().map(|s| s.as_deref()).collect();

        let student_batch = Tensor::new(vec![n_batch, 1, size, size], student_vals)?;
        let mut g = Graph::new();
        let student_pass = forward(&mut g, &self.pair.student, &self.cfg.model, &student_batch, true)?;
        let teacher_pass = if method == Method::Supervised {
            None
        } else {
            let teacher_batch = Tensor::new(vec![n_batch, 1, size, size], teacher_vals)?;
            Some(forward(&mut g, &self.pair.teacher, &self.cfg.model, &teacher_batch, false)?)
        };

        let terms = build_total_loss(
            &mut g,
            &student_pass,
            teacher_pass.as_ref(),
            &labels,
            &labeled_flags,
            &segs,
            size,
            w_tau,
            &self.cfg.losses,
            parts,
        )?;
        let breakdown = terms.breakdown(&g, w_tau)?;
        if !breakdown.l_total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss {} is not finite at step {tau}; aborting before the update",
                breakdown.l_total
            )));
        }

        g.backward(terms.l_total)?;

        let grads: Vec<Vec<f64>> = student_pass
            .param_ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.values(id).len()])
            })
            .collect();
        if let Some(t) = &teacher_pass {
            for &id in &t.param_ids {
                if g.grad(id).is_some() {
                    return Err(Error::Corruption(
                        "gradient buffer appeared on a teacher parameter".into(),
                    ));
                }
            }
        }

        adam_step(&mut self.pair.student, &grads, &mut self.adam, &self.cfg.trainer)?;

        let alpha = if method == Method::Supervised {
            0.0 // teacher mirrors the student exactly
        } else {
            self.cfg.ema.effective_alpha(tau)
        };
        ema_update(&mut self.pair.teacher, &self.pair.student, alpha)?;

        self.step += 1;
        Ok(StepLog {
            step: tau,
            breakdown,
        })
    }

    /// Run up to `k` steps or until the schedule completes.
    pub fn run_steps(&mut self, k: u64) -> Result<Vec<StepLog>> {
        let mut out = Vec::new();
        for _ in 0..k {
            if self.step >= self.total_steps {
                break;
            }
            out.push(self.step()?);
        }
        Ok(out)
    }

    pub fn run_to_end(&mut self) -> Result<Vec<StepLog>> {
        self.run_steps(u64::MAX)
    }

    pub fn is_complete(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Snapshot the full resumable state.
    pub fn checkpoint(&self) -> crate::checkpoint::Checkpoint {
        let (lo, uo, lc, uc) = self.sampler.state();
        crate::checkpoint::Checkpoint {
            config_text: self.cfg.canonical_text(),
            config_hash: self.cfg.hash(),
            step: self.step,
            total_steps: self.total_steps,
            student: self.pair.student.clone(),
            teacher: self.pair.teacher.clone(),
            adam: self.adam.clone(),
            aug_rng: crate::checkpoint::RngState::capture(&self.aug_rng),
            sampler_rng: crate::checkpoint::RngState::capture(self.sampler.rng()),
            sampler_labeled_order: lo,
            sampler_unlabeled_order: uo,
            sampler_cursors: (lc, uc),
        }
    }

    /// Rebuild a trainer mid-run from a checkpoint taken under the same
    /// config (verified by hash).
    pub fn from_checkpoint(
        cfg: &'a RunConfig,
        dataset: &'a Dataset,
        splits: &'a SplitDataset,
        ckpt: &crate::checkpoint::Checkpoint,
    ) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Format(format!(
                "checkpoint was produced under config {} but the current config hashes to {}",
                ckpt.config_hash,
                cfg.hash()
            )));
        }
        let mut fresh = Trainer::new(cfg, dataset, splits)?;
        if fresh.total_steps != ckpt.total_steps {
            return Err(Error::Format(format!(
                "checkpoint schedule of {} steps does not match {}",
                ckpt.total_steps, fresh.total_steps
            )));
        }
        fresh.pair.student = ckpt.student.clone();
        fresh.pair.teacher = ckpt.teacher.clone();
        fresh.adam = ckpt.adam.clone();
        fresh.aug_rng = ckpt.aug_rng.restore();
        let mut batch = cfg.batch;
        if cfg.trainer.method == Method::Supervised {
            batch.unlabeled_per_batch = 0;
        }
        fresh.sampler = BatchSampler::restore(
            ckpt.sampler_labeled_order.clone(),
            ckpt.sampler_unlabeled_order.clone(),
            ckpt.sampler_cursors.0,
            ckpt.sampler_cursors.1,
            batch,
            ckpt.sampler_rng.restore(),
        );
        fresh.step = ckpt.step;
        Ok(fresh)
    }
}

// ── evaluation ───────────────────────────────────────────────────────

/// Forward a sample set without augmentation; probabilities plus attention
/// upsampled to full resolution.
pub struct EvalOutputs {
    pub probs: Tensor,
    pub attention_full: Vec<Vec<f64>>,
    /// Attention at its native lattice, for export.
    pub attention_native: Vec<Vec<f64>>,
    pub attention_size: usize,
}

pub fn forward_eval(
    params: &ParamSet,
    net: &NetworkConfig,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<EvalOutputs> {
    if indices.is_empty() {
        return Err(Error::Usage("evaluation over an empty sample set".into()));
    }
    let size = net.input_size;
    let att = net.attention_size();
    let mut prob_vals = Vec::with_capacity(indices.len() * net.num_classes);
    let mut attention_full = Vec::with_capacity(indices.len());
    let mut attention_native = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(16) {
        let mut vals = Vec::with_capacity(chunk.len() * size * size);
        for &i in chunk {
            vals.extend_from_slice(&dataset.samples[i].image.data);
        }
        let batch = Tensor::new(vec![chunk.len(), 1, size, size], vals)?;
        let mut g = Graph::new();
        let pass = forward(&mut g, params, net, &batch, false)?;
        prob_vals.extend_from_slice(g.values(pass.probs));
        let attn = g.values(pass.attention);
        for s in 0..chunk.len() {
            let native = attn[s * att * att..(s + 1) * att * att].to_vec();
            attention_full.push(upsample_attention_raster(&native, att, att, size)?);
            attention_native.push(native);
        }
    }
    Ok(EvalOutputs {
        probs: Tensor::new(vec![indices.len(), net.num_classes], prob_vals)?,
        attention_full,
        attention_native,
        attention_size: att,
    })
}

/// Row argmax with first-winner tie breaking.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let (n, classes) = (probs.shape()[0], probs.shape()[1]);
    (0..n)
        .map(|r| {
            let row = &probs.values()[r * classes..(r + 1) * classes];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Metric computation over prepared outputs; also the harness the oracle
/// upper-bound test drives directly.
pub fn report_from_outputs(
    probs: &Tensor,
    attention_full: &[Vec<f64>],
    labels: &[usize],
    segs: &[&Mask],
    mcfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let n_classes = probs.shape()[1];
    let preds = argmax_rows(probs);
    let confusion = confusion_matrix(labels, &preds, n_classes)?;
    let (recall, f1) = recall_f1(&confusion)?;
    let auc = auc_macro(probs, labels)?;
    let mut ious = Vec::with_capacity(attention_full.len());
    for (a, seg) in attention_full.iter().zip(segs) {
        ious.push(iou(a, seg, mcfg.bin_threshold)?);
    }
    let (tiou_value, per_threshold) = tiou(&ious)?;
    Ok(MetricsReport {
        recall,
        f1,
        auc: auc.value,
        tiou: tiou_value,
        per_threshold_accuracy: per_threshold,
        confusion,
        auc_skipped_classes: auc.skipped,
    })
}

/// Evaluate one parameter set on the given samples (normally the test split).
pub fn evaluate(
    params: &ParamSet,
    net: &NetworkConfig,
    dataset: &Dataset,
    indices: &[usize],
    mcfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let out = forward_eval(params, net, dataset, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].class.as_usize()).collect();
    let segs: Vec<&Mask> = indices.iter().map(|&i| &dataset.samples[i].seg).collect();
    report_from_outputs(&out.probs, &out.attention_full, &labels, &segs, mcfg)
}

/// Pick the parameter sets to evaluate per the configured choice.
pub fn eval_param_sets<'p>(pair: &'p ModelPair, which: EvalModel) -> Vec<(&'static str, &'p ParamSet)> {
    match which {
        EvalModel::Student => vec![("student", &pair.student)],
        EvalModel::Teacher => vec![("teacher", &pair.teacher)],
        EvalModel::Both => vec![("student", &pair.student), ("teacher", &pair.teacher)],
    }
}
