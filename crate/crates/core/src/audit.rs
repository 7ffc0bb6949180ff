//! Deterministic gradient audit: every graph primitive plus the full
//! student training loss, each checked against central finite differences.

use crate::config::RunConfig;
use crate::data::generate_dataset;
use crate::error::Result;
use crate::gradcheck::{finite_difference_check, FdReport};
use crate::graph::{Graph, TensorId};
use crate::losses::{build_total_loss, LossParts};
use crate::model::{forward, init_pair, NetworkConfig, ParamSet};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub name: String,
    pub report: FdReport,
}

pub fn audit_passed(entries: &[AuditEntry]) -> bool {
    entries.iter().all(|e| e.report.passed)
}

fn check_single_leaf<F>(shape: Vec<usize>, seed: u64, h: f64, tol: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let x = g.insert(Tensor::new(shape.clone(), theta.clone())?.with_requires_grad());
    let root = build(&mut g, x)?;
    g.backward(root)?;
    let analytic = g.grad(x).expect("leaf on the loss path").to_vec();

    finite_difference_check(
        |vals| {
            let mut g = Graph::new();
            let x = g.insert(Tensor::new(shape.clone(), vals.to_vec())?.with_requires_grad());
            let root = build(&mut g, x)?;
            g.item(root)
        },
        &theta,
        &analytic,
        h,
        tol,
    )
}

/// Weighted readout so every output entry carries a distinct gradient.
fn readout(g: &mut Graph, y: TensorId, seed: u64) -> Result<TensorId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.values(y).len();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let shape = g.shape(y).to_vec();
    let wid = g.constant(shape, w)?;
    let p = g.mul(y, wid)?;
    g.sum_all(p)
}

/// Audit every primitive operation at h=1e-5 against tolerance `tol`.
pub fn audit_primitives(h: f64, tol: f64) -> Result<Vec<AuditEntry>> {
    let mut out = Vec::new();
    let mut push = |name: &str, report: FdReport| {
        out.push(AuditEntry {
            name: name.to_string(),
            report,
        });
    };

    push(
        "conv2d/input",
        check_single_leaf(vec![1, 2, 6, 6], 101, h, tol, |g, x| {
            let k = g.constant(vec![3, 2, 3, 3], pattern(54, 0.6))?;
            let b = g.constant(vec![3], vec![0.1, -0.2, 0.05])?;
            let y = g.conv2d(x, k, b, 1, 1)?;
            readout(g, y, 201)
        })?,
    );
    push(
        "conv2d/kernel",
        check_single_leaf(vec![2, 2, 3, 3], 102, h, tol, |g, k| {
            let x = g.constant(vec![1, 2, 5, 5], pattern(50, 0.8))?;
            let b = g.constant(vec![2], vec![0.0, 0.1])?;
            let y = g.conv2d(x, k, b, 2, 1)?;
            readout(g, y, 202)
        })?,
    );
    push(
        "conv2d/bias",
        check_single_leaf(vec![2], 103, h, tol, |g, b| {
            let x = g.constant(vec![1, 1, 4, 4], pattern(16, 0.9))?;
            let k = g.constant(vec![2, 1, 3, 3], pattern(18, 0.5))?;
            let y = g.conv2d(x, k, b, 1, 0)?;
            readout(g, y, 203)
        })?,
    );
    push(
        "relu",
        check_single_leaf(vec![3, 5], 104, h, tol, |g, x| {
            let y = g.relu(x)?;
            readout(g, y, 204)
        })?,
    );
    push(
        "sigmoid",
        check_single_leaf(vec![3, 5], 105, h, tol, |g, x| {
            let y = g.sigmoid(x)?;
            readout(g, y, 205)
        })?,
    );
    push(
        "softmax",
        check_single_leaf(vec![4, 3], 106, h, tol, |g, x| {
            let y = g.softmax(x)?;
            readout(g, y, 206)
        })?,
    );
    push(
        "max_pool2",
        check_single_leaf(vec![1, 2, 4, 4], 107, h, tol, |g, x| {
            let y = g.max_pool2(x)?;
            readout(g, y, 207)
        })?,
    );
    push(
        "global_avg_pool",
        check_single_leaf(vec![2, 3, 2, 2], 108, h, tol, |g, x| {
            let y = g.global_avg_pool(x)?;
            readout(g, y, 208)
        })?,
    );
    push(
        "linear",
        check_single_leaf(vec![2, 4], 109, h, tol, |g, w| {
            let x = g.constant(vec![3, 4], pattern(12, 0.7))?;
            let b = g.constant(vec![2], vec![0.2, -0.1])?;
            let y = g.linear(x, w, b)?;
            readout(g, y, 209)
        })?,
    );
    push(
        "upsample_nearest",
        check_single_leaf(vec![1, 1, 2, 2], 110, h, tol, |g, x| {
            let y = g.upsample_nearest(x, 3)?;
            readout(g, y, 210)
        })?,
    );
    push(
        "add_sub_mul_scale",
        check_single_leaf(vec![2, 3], 111, h, tol, |g, x| {
            let c = g.constant(vec![2, 3], pattern(6, 0.9))?;
            let a = g.mul(x, c)?;
            let s = g.sub(a, x)?;
            let t = g.add(s, x)?;
            let u = g.scale(t, 1.3)?;
            let v = g.add_const(u, 0.2)?;
            readout(g, v, 211)
        })?,
    );
    push(
        "max_const",
        check_single_leaf(vec![6], 112, h, tol, |g, x| {
            let y = g.max_const(x, 0.15)?;
            readout(g, y, 212)
        })?,
    );
    push(
        "sum_rows_div_elem",
        check_single_leaf(vec![3, 4], 113, h, tol, |g, x| {
            let sq = g.mul(x, x)?;
            let num = g.sum_rows(sq)?;
            let den0 = g.sum_rows(x)?;
            let den1 = g.mul(den0, den0)?;
            let den = g.add_const(den1, 1.5)?;
            let r = g.div_elem(num, den)?;
            readout(g, r, 213)
        })?,
    );
    push(
        "gather_log",
        check_single_leaf(vec![3, 3], 114, h, tol, |g, x| {
            let pos = g.add_const(x, 2.0)?;
            let picked = g.gather(pos, vec![(0, 2), (1, 0), (2, 1)])?;
            let l = g.log_clamped(picked, 1e-8)?;
            let s = g.sum_all(l)?;
            g.scale(s, -0.5)
        })?,
    );
    Ok(out)
}

/// Audit the full training objective (all four terms) on an 8-sample 16x16
/// batch: analytic student gradients against central finite differences over
/// every student parameter entry.
pub fn audit_full_loss(h: f64, tol: f64) -> Result<AuditEntry> {
    // base point chosen away from relu kinks so the finite-difference
    // comparison reflects the backward rules, not a grazed nondifferentiable
    // point (a kink within h of zero distorts the central difference)
    audit_full_loss_with_seed(h, tol, 91)
}

#[doc(hidden)]
pub fn audit_full_loss_with_seed(h: f64, tol: f64, seed: u64) -> Result<AuditEntry> {
    let mut cfg = RunConfig::default();
    cfg.data.size = 16;
    cfg.data.subjects = 4;
    cfg.data.slices_per_subject = 3;
    cfg.model.input_size = 16;
    cfg.model.conv_widths = vec![4, 6, 8, 8];
    cfg.apply_seed(seed);

    let ds = generate_dataset(&cfg.data)?;
    let net = cfg.model.clone();
    let student0 = init_pair(&net)?.student;
    let teacher = init_pair(&NetworkConfig {
        seed: net.seed ^ 0x5eed,
        ..net.clone()
    })?
    .student;

    // fixed batch: first 8 samples, first 5 labeled
    let size = cfg.data.size;
    let n_batch = 8usize;
    let mut vals = Vec::with_capacity(n_batch * size * size);
    let mut labels = Vec::new();
    let mut labeled = Vec::new();
    let mut seg_store = Vec::new();
    for (i, s) in ds.samples.iter().take(n_batch).enumerate() {
        vals.extend_from_slice(&s.image.data);
        labels.push(s.class.as_usize());
        let is_labeled = i < 5;
        labeled.push(is_labeled);
        seg_store.push(is_labeled.then(|| s.seg.to_values()));
    }
    let batch = Tensor::new(vec![n_batch, 1, size, size], vals)?;
    let segs: Vec<Option<&[f64]>> = seg_store.iter().map(|s| s.as_deref()).collect();
    let parts = LossParts {
        attention: true,
        class_consistency: true,
        attention_consistency: true,
    };
    let w_tau = 0.37;

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let sp = forward(&mut g, params, &net, &batch, true)?;
        let tp = forward(&mut g, &teacher, &net, &batch, false)?;
        let terms = build_total_loss(
            &mut g,
            &sp,
            Some(&tp),
            &labels,
            &labeled,
            &segs,
            size,
            w_tau,
            &cfg.losses,
            parts,
        )?;
        g.item(terms.l_total)
    };

    // analytic gradient at the base point
    let analytic = {
        let mut g = Graph::new();
        let sp = forward(&mut g, &student0, &net, &batch, true)?;
        let tp = forward(&mut g, &teacher, &net, &batch, false)?;
        let terms = build_total_loss(
            &mut g,
            &sp,
            Some(&tp),
            &labels,
            &labeled,
            &segs,
            size,
            w_tau,
            &cfg.losses,
            parts,
        )?;
        g.backward(terms.l_total)?;
        let mut flat = Vec::new();
        for &id in &sp.param_ids {
            match g.grad(id) {
                Some(gr) => flat.extend_from_slice(gr),
                None => flat.extend(std::iter::repeat(0.0).take(g.values(id).len())),
            }
        }
        flat
    };

    let theta = student0.flatten();
    let mut scratch = student0.clone();
    let report = finite_difference_check(
        |flat| {
            scratch.assign_flat(flat)?;
            eval(&scratch)
        },
        &theta,
        &analytic,
        h,
        tol,
    )?;
    Ok(AuditEntry {
        name: format!("full_loss ({} parameters)", theta.len()),
        report,
    })
}

/// The whole audit at the standard step size: primitives at 1e-6 relative
/// tolerance, the composite loss at 1e-4.
pub fn gradient_audit() -> Result<Vec<AuditEntry>> {
    let mut entries = audit_primitives(1e-5, 1e-6)?;
    entries.push(audit_full_loss(1e-5, 1e-4)?);
    Ok(entries)
}

fn pattern(n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|i| scale * (((i * 37 + 11) % 23) as f64 / 11.5 - 1.0))
        .collect()
}
