//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Flat index where the worst relative error occurred.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel error {:.3e} at index {} over {} entries (tol {:.1e})",
            if self.passed { "pass" } else { "FAIL" },
            self.max_rel_error,
            self.worst_index,
            self.checked,
            self.tol
        )
    }
}

/// Compare an analytic gradient against central finite differences of `eval`
/// at the point `theta`, entry by entry.
///
/// Relative error per entry is |a - f| / max(|a|, |f|, 1e-8); the report
/// passes iff the maximum stays within `tol`. `eval` must be deterministic.
pub fn finite_difference_check<F>(
    mut eval: F,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step h={h} must be positive")));
    }
    if theta.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "parameter vector has {} entries, analytic gradient {}",
            theta.len(),
            analytic.len()
        )));
    }
    let mut point = theta.to_vec();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..point.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = eval(&point)?;
        point[i] = orig - h;
        let down = eval(&point)?;
        point[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        worst_index: worst,
        checked: theta.len(),
        tol,
        passed: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, TensorId};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Check one graph-built scalar function of a single leaf tensor.
    fn check_op<F>(shape: Vec<usize>, seed: u64, tol: f64, build: F) -> FdReport
    where
        F: Fn(&mut Graph, TensorId) -> TensorId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let x = g.insert(Tensor::new(shape.clone(), theta.clone()).unwrap().with_requires_grad());
        let root = build(&mut g, x);
        g.backward(root).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        finite_difference_check(
            |vals| {
                let mut g = Graph::new();
                let x = g.insert(Tensor::new(shape.clone(), vals.to_vec()).unwrap().with_requires_grad());
                let root = build(&mut g, x);
                g.item(root)
            },
            &theta,
            &analytic,
            1e-5,
            tol,
        )
        .unwrap()
    }

    /// Weighted scalar readout so every output entry contributes distinctly.
    fn weighted_sum(g: &mut Graph, y: TensorId, seed: u64) -> TensorId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.values(y).len();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let shape = g.shape(y).to_vec();
        let wid = g.constant(shape, w).unwrap();
        let p = g.mul(y, wid).unwrap();
        g.sum_all(p).unwrap()
    }

    #[test]
    fn fd_quadratic_is_exact_up_to_rounding() {
        // loss = sum(x^2): analytic 2x, central difference exact for quadratics.
        let theta = vec![0.3, -0.7, 1.1];
        let analytic: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        let report = finite_difference_check(
            |p| Ok(p.iter().map(|v| v * v).sum()),
            &theta,
            &analytic,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn fd_detects_corrupted_gradient() {
        let theta = vec![0.3, -0.7, 1.1];
        let mut analytic: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        analytic[1] += 0.5; // corrupt one backward entry
        let report = finite_difference_check(
            |p| Ok(p.iter().map(|v| v * v).sum()),
            &theta,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_index, 1);
        assert!(report.max_rel_error > 1e-2);
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let r = finite_difference_check(|_| Ok(0.0), &[1.0], &[0.0], 0.0, 1e-6);
        assert!(r.is_err());
    }

    #[test]
    fn primitive_relu_gradient() {
        let r = check_op(vec![2, 3], 21, 1e-6, |g, x| {
            let y = g.relu(x).unwrap();
            weighted_sum(g, y, 101)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_sigmoid_gradient() {
        let r = check_op(vec![2, 3], 22, 1e-6, |g, x| {
            let y = g.sigmoid(x).unwrap();
            weighted_sum(g, y, 102)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_softmax_gradient() {
        let r = check_op(vec![3, 4], 23, 1e-6, |g, x| {
            let y = g.softmax(x).unwrap();
            weighted_sum(g, y, 103)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_conv2d_gradient_wrt_input() {
        let r = check_op(vec![1, 2, 5, 5], 24, 1e-6, |g, x| {
            let k = g
                .constant(vec![3, 2, 3, 3], (0..54).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect())
                .unwrap();
            let b = g.constant(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
            let y = g.conv2d(x, k, b, 1, 1).unwrap();
            weighted_sum(g, y, 104)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_conv2d_gradient_wrt_kernel_and_bias() {
        // leaf is the kernel here; bias checked through a second leafless pass
        let r = check_op(vec![2, 2, 3, 3], 25, 1e-6, |g, k| {
            let x = g
                .constant(vec![1, 2, 6, 6], (0..72).map(|i| ((i * 5 % 13) as f64 - 6.0) / 8.0).collect())
                .unwrap();
            let b = g.constant(vec![2], vec![0.05, -0.05]).unwrap();
            let y = g.conv2d(x, k, b, 2, 1).unwrap();
            weighted_sum(g, y, 105)
        });
        assert!(r.passed, "{r}");

        let r = check_op(vec![2], 26, 1e-6, |g, b| {
            let x = g
                .constant(vec![1, 1, 4, 4], (0..16).map(|i| (i as f64 - 8.0) / 9.0).collect())
                .unwrap();
            let k = g.constant(vec![2, 1, 3, 3], (0..18).map(|i| ((i % 5) as f64 - 2.0) / 4.0).collect()).unwrap();
            let y = g.conv2d(x, k, b, 1, 0).unwrap();
            weighted_sum(g, y, 106)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_max_pool_gradient() {
        let r = check_op(vec![1, 2, 4, 4], 27, 1e-6, |g, x| {
            let y = g.max_pool2(x).unwrap();
            weighted_sum(g, y, 107)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_global_avg_pool_gradient() {
        let r = check_op(vec![2, 3, 2, 2], 28, 1e-6, |g, x| {
            let y = g.global_avg_pool(x).unwrap();
            weighted_sum(g, y, 108)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_linear_gradient() {
        for seed in [29, 30, 31] {
            // rotate the leaf role: input, weight, bias
            let r = match seed {
                29 => check_op(vec![3, 4], seed, 1e-6, |g, x| {
                    let w = g.constant(vec![2, 4], (0..8).map(|i| (i as f64 - 4.0) / 5.0).collect()).unwrap();
                    let b = g.constant(vec![2], vec![0.2, -0.1]).unwrap();
                    let y = g.linear(x, w, b).unwrap();
                    weighted_sum(g, y, 109)
                }),
                30 => check_op(vec![2, 4], seed, 1e-6, |g, w| {
                    let x = g.constant(vec![3, 4], (0..12).map(|i| ((i * 3 % 7) as f64 - 3.0) / 4.0).collect()).unwrap();
                    let b = g.constant(vec![2], vec![0.2, -0.1]).unwrap();
                    let y = g.linear(x, w, b).unwrap();
                    weighted_sum(g, y, 110)
                }),
                _ => check_op(vec![2], seed, 1e-6, |g, b| {
                    let x = g.constant(vec![3, 4], (0..12).map(|i| ((i * 3 % 7) as f64 - 3.0) / 4.0).collect()).unwrap();
                    let w = g.constant(vec![2, 4], (0..8).map(|i| (i as f64 - 4.0) / 5.0).collect()).unwrap();
                    let y = g.linear(x, w, b).unwrap();
                    weighted_sum(g, y, 111)
                }),
            };
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn primitive_upsample_gradient() {
        let r = check_op(vec![1, 1, 2, 2], 32, 1e-6, |g, x| {
            let y = g.upsample_nearest(x, 3).unwrap();
            weighted_sum(g, y, 112)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_elementwise_and_reduction_gradients() {
        let r = check_op(vec![2, 3], 33, 1e-6, |g, x| {
            let c = g.constant(vec![2, 3], vec![0.5, -0.3, 0.8, 1.2, -0.9, 0.4]).unwrap();
            let a = g.mul(x, c).unwrap();
            let b = g.sub(a, x).unwrap();
            let s = g.add(b, x).unwrap();
            let sc = g.scale(s, 1.7).unwrap();
            let off = g.add_const(sc, 0.3).unwrap();
            let rows = g.sum_rows(off).unwrap();
            let total = g.sum_all(rows).unwrap();
            g.scale(total, 0.25).unwrap()
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_max_const_gradient() {
        let r = check_op(vec![6], 37, 1e-6, |g, x| {
            let y = g.max_const(x, 0.1).unwrap();
            weighted_sum(g, y, 114)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_div_elem_gradient() {
        let r = check_op(vec![4], 34, 1e-6, |g, x| {
            // keep the denominator away from zero
            let sq = g.mul(x, x).unwrap();
            let den = g.add_const(sq, 2.0).unwrap();
            let num = g.add_const(x, 3.0).unwrap();
            let y = g.div_elem(num, den).unwrap();
            weighted_sum(g, y, 113)
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn primitive_gather_log_gradient() {
        let r = check_op(vec![3, 3], 35, 1e-6, |g, x| {
            // shift into positive territory, pick a diagonal, take logs
            let pos = g.add_const(x, 2.5).unwrap();
            let picked = g.gather(pos, vec![(0, 1), (1, 2), (2, 0)]).unwrap();
            let logs = g.log_clamped(picked, 1e-8).unwrap();
            let s = g.sum_all(logs).unwrap();
            g.scale(s, -1.0 / 3.0).unwrap()
        });
        assert!(r.passed, "{r}");
    }

    #[test]
    fn composite_conv_relu_softmax_matches_fd() {
        let r = check_op(vec![1, 1, 4, 4], 36, 1e-5, |g, x| {
            let k = g.constant(vec![2, 1, 3, 3], (0..18).map(|i| ((i * 5 % 9) as f64 - 4.0) / 6.0).collect()).unwrap();
            let b = g.constant(vec![2], vec![0.1, -0.1]).unwrap();
            let c = g.conv2d(x, k, b, 1, 1).unwrap();
            let a = g.relu(c).unwrap();
            let p = g.global_avg_pool(a).unwrap();
            let sm = g.softmax(p).unwrap();
            let picked = g.gather(sm, vec![(0, 1)]).unwrap();
            let l = g.log_clamped(picked, 1e-8).unwrap();
            let s = g.sum_all(l).unwrap();
            g.scale(s, -1.0).unwrap()
        });
        assert!(r.passed, "{r}");
    }
}
