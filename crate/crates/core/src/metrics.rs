//! Evaluation suite: macro recall, macro F1, macro one-vs-rest AUC, IoU
//! against the segmentation, and the TIoU threshold-grid localization score.

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thresholds for localization correctness; TIoU averages over this grid.
pub const TIOU_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsConfig {
    /// Attention binarization threshold for IoU.
    pub bin_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { bin_threshold: 0.5 }
    }
}

/// Scores of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub tiou: f64,
    /// (threshold, fraction of samples with IoU strictly above it).
    pub per_threshold_accuracy: Vec<(f64, f64)>,
    /// Row = true class, column = predicted class.
    pub confusion: Vec<Vec<usize>>,
    /// Classes skipped by the AUC macro average for lack of examples.
    pub auc_skipped_classes: Vec<usize>,
}

/// Count predictions into an n-by-n matrix indexed [true][predicted].
pub fn confusion_matrix(labels: &[usize], preds: &[usize], n: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != preds.len() {
        return Err(Error::Dimension(format!(
            "{} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let mut m = vec![vec![0usize; n]; n];
    for (&l, &p) in labels.iter().zip(preds) {
        if l >= n || p >= n {
            return Err(Error::Data(format!("class {} out of range {n}", l.max(p))));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Macro-averaged recall and F1. Undefined per-class precision or F1
/// contributes zero instead of faulting.
pub fn recall_f1(confusion: &[Vec<usize>]) -> Result<(f64, f64)> {
    let n = confusion.len();
    if n == 0 || confusion.iter().all(|row| row.iter().all(|&c| c == 0)) {
        return Err(Error::Usage("empty confusion matrix".into()));
    }
    if confusion.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension("confusion matrix not square".into()));
    }
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    for c in 0..n {
        let tp = confusion[c][c] as f64;
        let fn_ = confusion[c].iter().sum::<usize>() as f64 - tp;
        let fp = (0..n).map(|r| confusion[r][c]).sum::<usize>() as f64 - tp;
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        recall_sum += recall;
        f1_sum += f1;
    }
    Ok((recall_sum / n as f64, f1_sum / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucMacro {
    pub value: f64,
    /// Classes with no positive or no negative examples, skipped from the mean.
    pub skipped: Vec<usize>,
}

/// Macro one-vs-rest AUC via the rank statistic with ties counted 1/2:
/// P(score(pos) > score(neg)) + P(equal)/2 per class.
pub fn auc_macro(scores: &Tensor, labels: &[usize]) -> Result<AucMacro> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "auc_macro wants scores [N,n], got {shape:?}"
        )));
    }
    let (n, classes) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {} score rows",
            labels.len(),
            n
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {l} out of range {classes}")));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for c in 0..classes {
        let pos_count = labels.iter().filter(|&&l| l == c).count();
        let neg_count = n - pos_count;
        if pos_count == 0 || neg_count == 0 {
            skipped.push(c);
            continue;
        }
        // rank the class-c scores with midranks for ties
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            scores.values()[a * classes + c]
                .partial_cmp(&scores.values()[b * classes + c])
                .expect("scores are finite")
        });
        let mut rank = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n
                && scores.values()[idx[j + 1] * classes + c] == scores.values()[idx[i] * classes + c]
            {
                j += 1;
            }
            let mid = (i + j + 2) as f64 / 2.0;
            for k in i..=j {
                rank[idx[k]] = mid;
            }
            i = j + 1;
        }
        let rank_sum: f64 = (0..n).filter(|&r| labels[r] == c).map(|r| rank[r]).sum();
        let p = pos_count as f64;
        let auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * neg_count as f64);
        sum += auc;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Usage(
            "every class lacks positives or negatives; AUC undefined".into(),
        ));
    }
    Ok(AucMacro {
        value: sum / used as f64,
        skipped,
    })
}

/// IoU between the binarized attention (strictly above `bin_threshold`) and a
/// binary segmentation on the same lattice; an empty union scores 0.
pub fn iou(attention: &[f64], seg: &Mask, bin_threshold: f64) -> Result<f64> {
    if attention.len() != seg.data.len() {
        return Err(Error::Dimension(format!(
            "attention lattice {} vs segmentation {}",
            attention.len(),
            seg.data.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &s) in attention.iter().zip(&seg.data) {
        let a = a > bin_threshold;
        if a && s {
            inter += 1;
        }
        if a || s {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean over the threshold grid of the fraction of samples whose IoU strictly
/// exceeds each threshold; also returns the per-threshold accuracies.
pub fn tiou(per_sample_ious: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    if per_sample_ious.is_empty() {
        return Err(Error::Usage("tiou over an empty sample set".into()));
    }
    let mut per = Vec::with_capacity(TIOU_THRESHOLDS.len());
    let mut total = 0.0;
    for &t in &TIOU_THRESHOLDS {
        let correct = per_sample_ious.iter().filter(|&&v| v > t).count();
        let acc = correct as f64 / per_sample_ious.len() as f64;
        per.push((t, acc));
        total += acc;
    }
    Ok((total / TIOU_THRESHOLDS.len() as f64, per))
}

/// Leaderboard CSV header shared by evaluation and ablation outputs.
pub const LEADERBOARD_HEADER: &str = "run_id,labeled_fraction,method,recall,f1,auc,tiou";

pub fn leaderboard_row(run_id: &str, labeled_fraction: f64, method: &str, r: &MetricsReport) -> String {
    format!(
        "{run_id},{labeled_fraction},{method},{},{},{},{}",
        r.recall, r.f1, r.auc, r.tiou
    )
}

pub const PER_THRESHOLD_HEADER: &str = "run_id,threshold,accuracy";

pub fn per_threshold_rows(run_id: &str, r: &MetricsReport) -> String {
    let mut out = String::new();
    for (t, acc) in &r.per_threshold_accuracy {
        out.push_str(&format!("{run_id},{t},{acc}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_confusion_is_perfect() {
        let m = vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 4]];
        let (r, f) = recall_f1(&m).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(f, 1.0);
    }

    #[test]
    fn symmetric_two_class_confusion() {
        let m = vec![vec![1, 1], vec![1, 1]];
        let (r, f) = recall_f1(&m).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert!((f - 0.5).abs() < 1e-15);
    }

    #[test]
    fn never_predicted_class_contributes_zero_without_fault() {
        let m = vec![vec![2, 0], vec![2, 0]];
        let (r, f) = recall_f1(&m).unwrap();
        assert!((r - 0.5).abs() < 1e-15); // class0 recall 1, class1 recall 0
        assert!((f - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_confusion_is_usage_error() {
        assert!(matches!(recall_f1(&[]), Err(Error::Usage(_))));
        let zeros = vec![vec![0, 0], vec![0, 0]];
        assert!(matches!(recall_f1(&zeros), Err(Error::Usage(_))));
    }

    #[test]
    fn recall_f1_matches_reference_on_fixed_library() {
        // independent per-class reference computed entry by entry
        fn reference(m: &[Vec<usize>]) -> (f64, f64) {
            let n = m.len();
            let (mut rs, mut fs) = (0.0, 0.0);
            for c in 0..n {
                let tp = m[c][c] as f64;
                let actual: f64 = m[c].iter().sum::<usize>() as f64;
                let predicted: f64 = (0..n).map(|r| m[r][c]).sum::<usize>() as f64;
                let recall = if actual > 0.0 { tp / actual } else { 0.0 };
                let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
                rs += recall;
                fs += if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
            }
            (rs / n as f64, fs / n as f64)
        }
        let library: Vec<Vec<Vec<usize>>> = vec![
            vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]],
            vec![vec![1, 1], vec![1, 1]],
            vec![vec![2, 0], vec![2, 0]],
            vec![vec![0, 3], vec![3, 0]],
            vec![vec![10, 2, 1], vec![0, 7, 3], vec![2, 2, 9]],
            vec![vec![1, 0, 0], vec![0, 0, 1], vec![0, 1, 0]],
            vec![vec![4, 1], vec![2, 3]],
            vec![vec![0, 0, 1], vec![0, 0, 1], vec![0, 0, 1]],
            vec![vec![6, 0, 0], vec![5, 1, 0], vec![4, 0, 2]],
            vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]],
        ];
        for (i, m) in library.iter().enumerate() {
            let (r, f) = recall_f1(m).unwrap();
            let (wr, wf) = reference(m);
            assert!((r - wr).abs() < 1e-12, "matrix {i} recall");
            assert!((f - wf).abs() < 1e-12, "matrix {i} f1");
        }
        // two hand-frozen spot checks
        let (r, f) = recall_f1(&library[4]).unwrap();
        // class recalls: 10/13, 7/10, 9/13
        let want_r = (10.0 / 13.0 + 0.7 + 9.0 / 13.0) / 3.0;
        assert!((r - want_r).abs() < 1e-12);
        assert!(f > 0.0 && f < 1.0);
    }

    /// Exhaustive pairwise oracle with ties counted one half.
    fn auc_pairwise(scores: &Tensor, labels: &[usize], class: usize) -> Option<f64> {
        let n = scores.shape()[0];
        let classes = scores.shape()[1];
        let pos: Vec<f64> = (0..n)
            .filter(|&r| labels[r] == class)
            .map(|r| scores.values()[r * classes + class])
            .collect();
        let neg: Vec<f64> = (0..n)
            .filter(|&r| labels[r] != class)
            .map(|r| scores.values()[r * classes + class])
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                if p > q {
                    wins += 1.0;
                } else if p == q {
                    wins += 0.5;
                }
            }
        }
        Some(wins / (pos.len() * neg.len()) as f64)
    }

    fn auc_macro_oracle(scores: &Tensor, labels: &[usize]) -> f64 {
        let classes = scores.shape()[1];
        let mut sum = 0.0;
        let mut used = 0;
        for c in 0..classes {
            if let Some(a) = auc_pairwise(scores, labels, c) {
                sum += a;
                used += 1;
            }
        }
        sum / used as f64
    }

    #[test]
    fn auc_perfect_separation_and_pure_ties() {
        let scores = Tensor::new(vec![4, 2], vec![0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.2, 0.8]).unwrap();
        let labels = [0, 0, 1, 1];
        assert_eq!(auc_macro(&scores, &labels).unwrap().value, 1.0);

        let flat = Tensor::new(vec![4, 2], vec![0.5; 8]).unwrap();
        assert_eq!(auc_macro(&flat, &labels).unwrap().value, 0.5);
    }

    #[test]
    fn auc_matches_exhaustive_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for round in 0..50 {
            let n = rng.gen_range(6..40);
            let classes = rng.gen_range(2..5);
            let vals: Vec<f64> = (0..n * classes)
                .map(|_| {
                    // quantized scores force plenty of ties
                    (rng.gen_range(0..8) as f64) / 7.0
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            if (0..classes).all(|c| {
                let p = labels.iter().filter(|&&l| l == c).count();
                p == 0 || p == n
            }) {
                continue;
            }
            let scores = Tensor::new(vec![n, classes], vals).unwrap();
            let got = auc_macro(&scores, &labels).unwrap().value;
            let want = auc_macro_oracle(&scores, &labels);
            assert!((got - want).abs() <= 1e-12, "round {round}: {got} vs {want}");
        }
    }

    #[test]
    fn auc_skips_absent_classes_and_errors_when_all_skipped() {
        let scores = Tensor::new(vec![3, 3], vec![0.7, 0.2, 0.1, 0.6, 0.3, 0.1, 0.2, 0.7, 0.1]).unwrap();
        let labels = [0, 0, 1]; // class 2 absent
        let r = auc_macro(&scores, &labels).unwrap();
        assert_eq!(r.skipped, vec![2]);

        let one_class = Tensor::new(vec![2, 2], vec![0.6, 0.4, 0.3, 0.7]).unwrap();
        assert!(matches!(
            auc_macro(&one_class, &[0, 0]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn iou_examples() {
        let seg = Mask {
            w: 4,
            h: 1,
            data: vec![true, true, false, false],
        };
        assert_eq!(iou(&[1.0, 1.0, 0.0, 0.0], &seg, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &seg, 0.5).unwrap(), 0.0);

        // 4-pixel prediction overlapping 2 pixels of an 8-pixel target:
        // 2 / (4 + 8 - 2) = 0.2
        let mut seg = Mask::new(10, 1);
        for x in 0..8 {
            seg.set(0, x, true);
        }
        let mut attn = vec![0.0; 10];
        for v in attn.iter_mut().skip(6) {
            *v = 1.0;
        }
        assert!((iou(&attn, &seg, 0.5).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn tiou_grid_evaluation() {
        let (t, per) = tiou(&[1.0; 5]).unwrap();
        assert_eq!(t, 1.0);
        assert!(per.iter().all(|&(_, a)| a == 1.0));

        let (t, per) = tiou(&[0.35]).unwrap();
        assert!((t - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(per[0], (0.1, 1.0));
        assert_eq!(per[3], (0.4, 0.0));

        let (t, _) = tiou(&[0.0, 0.0]).unwrap();
        assert_eq!(t, 0.0);

        assert!(matches!(tiou(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn tiou_is_monotone_and_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let n = rng.gen_range(1..30);
            let ious: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (base, _) = tiou(&ious).unwrap();
            let raised: Vec<f64> = ious.iter().map(|v| (v + 0.07).min(1.0)).collect();
            let (up, _) = tiou(&raised).unwrap();
            assert!(up >= base);
            let mut shuffled = ious.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            let (re, _) = tiou(&shuffled).unwrap();
            assert_eq!(re, base);
        }
    }

    #[test]
    fn metric_functions_ignore_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let n = 24;
        let vals: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let scores = Tensor::new(vec![n, 3], vals.clone()).unwrap();
        let base_auc = auc_macro(&scores, &labels).unwrap().value;
        let base_cm = confusion_matrix(&labels, &preds, 3).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let pv: Vec<f64> = perm
            .iter()
            .flat_map(|&i| vals[i * 3..(i + 1) * 3].to_vec())
            .collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let pp: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let pscores = Tensor::new(vec![n, 3], pv).unwrap();
        assert!((auc_macro(&pscores, &pl).unwrap().value - base_auc).abs() < 1e-12);
        assert_eq!(confusion_matrix(&pl, &pp, 3).unwrap(), base_cm);
    }
}
