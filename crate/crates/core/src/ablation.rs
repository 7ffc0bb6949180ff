//! Ablation grids: the attention-loss sweep, the semi-supervision
//! comparison, and the method ladder, each run over a fixed seed set with a
//! paired dataset per seed.

use crate::config::{Method, RunConfig};
use crate::data::{generate_dataset, make_splits};
use crate::error::{Error, Result};
use crate::metrics::{leaderboard_row, MetricsReport, LEADERBOARD_HEADER, PER_THRESHOLD_HEADER};
use crate::trainer::{evaluate, StepLog, Trainer};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Shared training protocol for every grid run. Lighter than the config
/// defaults so a full table stays inside the desk-scale runtime budget, and
/// with a faster-tracking teacher than the conventional decay because the
/// schedules here are only a few hundred steps long.
#[derive(Debug, Clone)]
pub struct AblationProtocol {
    pub conv_widths: Vec<usize>,
    pub ema_alpha: f64,
    /// Epochs for runs over a partially labeled pool.
    pub epochs: usize,
    /// Epochs for the fully labeled reference run, chosen to roughly match
    /// the optimizer-step budget of the partially labeled runs.
    pub epochs_full_label: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationProtocol {
    fn default() -> Self {
        AblationProtocol {
            conv_widths: vec![8, 16, 32, 32],
            ema_alpha: 0.95,
            epochs: 60,
            epochs_full_label: 10,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

/// One grid cell: a full training run and its evaluation.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub run_id: String,
    pub method: Method,
    pub labeled_fraction: f64,
    pub lambda_a: f64,
    pub lambda_r: f64,
    pub seed: u64,
    pub report: MetricsReport,
    pub log: Vec<StepLog>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub table: u8,
    pub runs: Vec<AblationRun>,
}

#[derive(Debug, Clone, Copy)]
struct RowSpec {
    tag: &'static str,
    method: Method,
    labeled_fraction: f64,
    lambda_a: f64,
    lambda_r: f64,
}

fn table_rows(table: u8) -> Result<Vec<RowSpec>> {
    match table {
        1 => Ok(vec![
            RowSpec {
                tag: "la0_lr0",
                method: Method::Supervised,
                labeled_fraction: 0.1,
                lambda_a: 0.0,
                lambda_r: 0.0,
            },
            RowSpec {
                tag: "la0.5_lr0",
                method: Method::Supervised,
                labeled_fraction: 0.1,
                lambda_a: 0.5,
                lambda_r: 0.0,
            },
            RowSpec {
                tag: "la0.5_lr0.001",
                method: Method::Supervised,
                labeled_fraction: 0.1,
                lambda_a: 0.5,
                lambda_r: 0.001,
            },
        ]),
        2 => Ok(vec![
            RowSpec {
                tag: "fs10",
                method: Method::Supervised,
                labeled_fraction: 0.1,
                lambda_a: 0.5,
                lambda_r: 0.001,
            },
            RowSpec {
                tag: "fs100",
                method: Method::Supervised,
                labeled_fraction: 1.0,
                lambda_a: 0.5,
                lambda_r: 0.001,
            },
            RowSpec {
                tag: "dcmt10",
                method: Method::Dcmt,
                labeled_fraction: 0.1,
                lambda_a: 0.5,
                lambda_r: 0.001,
            },
        ]),
        3 => Ok(vec![
            RowSpec {
                tag: "mt",
                method: Method::MeanTeacher,
                labeled_fraction: 0.1,
                lambda_a: 0.5,
                lambda_r: 0.001,
            },
            RowSpec {
                tag: "dcmt_nac",
                method: Method::DcmtNac,
                labeled_fraction: 0.1,
                lambda_a: 0.5,
                lambda_r: 0.001,
            },
            RowSpec {
                tag: "dcmt",
                method: Method::Dcmt,
                labeled_fraction: 0.1,
                lambda_a: 0.5,
                lambda_r: 0.001,
            },
        ]),
        other => Err(Error::Usage(format!("no table {other}; tables are 1, 2, 3"))),
    }
}

fn run_config(base: &RunConfig, proto: &AblationProtocol, row: &RowSpec, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.conv_widths = proto.conv_widths.clone();
    cfg.ema.alpha = proto.ema_alpha;
    cfg.split.labeled_fraction = row.labeled_fraction;
    cfg.losses.lambda_a = row.lambda_a;
    cfg.losses.lambda_r = row.lambda_r;
    cfg.trainer.method = row.method;
    cfg.trainer.epochs = if row.labeled_fraction >= 1.0 {
        proto.epochs_full_label
    } else {
        proto.epochs
    };
    cfg.apply_seed(seed);
    cfg
}

/// Run every row of one table over the protocol's seed set. Within a seed all
/// rows share the same generated dataset and split, so comparisons are paired.
pub fn run_table(
    table: u8,
    base: &RunConfig,
    proto: &AblationProtocol,
    mut progress: impl FnMut(&str),
) -> Result<AblationOutcome> {
    let rows = table_rows(table)?;
    let mut runs = Vec::new();
    for &seed in &proto.seeds {
        for row in &rows {
            let cfg = run_config(base, proto, row, seed);
            let dataset = generate_dataset(&cfg.data)?;
            let splits = make_splits(&dataset, &cfg.split)?;
            let mut trainer = Trainer::new(&cfg, &dataset, &splits)?;
            let log = trainer.run_to_end()?;
            let eval_params = crate::trainer::eval_param_sets(&trainer.pair, cfg.trainer.eval_model);
            let (_, params) = eval_params[0];
            let report = evaluate(params, &cfg.model, &dataset, &splits.test, &cfg.metrics)?;
            let run_id = format!("t{table}_{}_s{seed}", row.tag);
            progress(&format!(
                "{run_id}: f1 {:.3} tiou {:.3} ({} steps)",
                report.f1,
                report.tiou,
                trainer.total_steps()
            ));
            runs.push(AblationRun {
                run_id,
                method: row.method,
                labeled_fraction: row.labeled_fraction,
                lambda_a: row.lambda_a,
                lambda_r: row.lambda_r,
                seed,
                report,
                log,
            });
        }
    }
    Ok(AblationOutcome { table, runs })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("metric values are finite"));
    v[v.len() / 2]
}

impl AblationOutcome {
    /// All runs of one row tag, in seed order.
    pub fn row(&self, tag_prefix: &str) -> Vec<&AblationRun> {
        let prefix = format!("t{}_{}_s", self.table, tag_prefix);
        self.runs.iter().filter(|r| r.run_id.starts_with(&prefix)).collect()
    }

    pub fn median_f1(&self, tag: &str) -> f64 {
        median(&self.row(tag).iter().map(|r| r.report.f1).collect::<Vec<_>>())
    }

    pub fn median_tiou(&self, tag: &str) -> f64 {
        median(&self.row(tag).iter().map(|r| r.report.tiou).collect::<Vec<_>>())
    }

    /// Leaderboard CSV: per-seed rows then one median row per table row.
    pub fn leaderboard_csv(&self) -> String {
        let mut out = String::from(LEADERBOARD_HEADER);
        out.push('\n');
        for r in &self.runs {
            out.push_str(&leaderboard_row(
                &r.run_id,
                r.labeled_fraction,
                r.method.as_str(),
                &r.report,
            ));
            out.push('\n');
        }
        let mut tags: Vec<String> = Vec::new();
        for r in &self.runs {
            let tag = r
                .run_id
                .rsplit_once("_s")
                .map(|(head, _)| head.to_string())
                .expect("run ids end in _s<seed>");
            if !tags.contains(&tag) {
                tags.push(tag);
            }
        }
        for tag in tags {
            let rows: Vec<&AblationRun> = self
                .runs
                .iter()
                .filter(|r| r.run_id.starts_with(&format!("{tag}_s")))
                .collect();
            let f1 = median(&rows.iter().map(|r| r.report.f1).collect::<Vec<_>>());
            let recall = median(&rows.iter().map(|r| r.report.recall).collect::<Vec<_>>());
            let auc = median(&rows.iter().map(|r| r.report.auc).collect::<Vec<_>>());
            let tiou = median(&rows.iter().map(|r| r.report.tiou).collect::<Vec<_>>());
            out.push_str(&format!(
                "{tag}_median,{},{},{recall},{f1},{auc},{tiou}\n",
                rows[0].labeled_fraction,
                rows[0].method.as_str(),
            ));
        }
        out
    }

    pub fn per_threshold_csv(&self) -> String {
        let mut out = String::from(PER_THRESHOLD_HEADER);
        out.push('\n');
        for r in &self.runs {
            out.push_str(&crate::metrics::per_threshold_rows(&r.run_id, &r.report));
        }
        out
    }
}
