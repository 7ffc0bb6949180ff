use dcmt_core::config::{Method, RunConfig};
use dcmt_core::data::{generate_dataset, make_splits};
use dcmt_core::trainer::{evaluate, Trainer};

fn run(seed: u64, method: Method, lf: f64, epochs: usize, widths: Vec<usize>) -> (f64, f64) {
    let mut cfg = RunConfig::default();
    cfg.model.conv_widths = widths;
    cfg.split.labeled_fraction = lf;
    cfg.trainer.method = method;
    cfg.trainer.epochs = epochs;
    cfg.ema.alpha = 0.95;
    cfg.apply_seed(seed);
    let ds = generate_dataset(&cfg.data).unwrap();
    let splits = make_splits(&ds, &cfg.split).unwrap();
    let mut tr = Trainer::new(&cfg, &ds, &splits).unwrap();
    tr.run_to_end().unwrap();
    let rt = evaluate(&tr.pair.teacher, &cfg.model, &ds, &splits.test, &cfg.metrics).unwrap();
    (rt.f1, rt.tiou)
}

fn main() {
    for widths in [vec![16usize, 32, 64, 64]] {
        for (label, method, lf, epochs) in [
            ("FS10 ", Method::Supervised, 0.1, 60usize),
            ("MT   ", Method::MeanTeacher, 0.1, 60),
            ("NAC  ", Method::DcmtNac, 0.1, 60),
            ("DCMT ", Method::Dcmt, 0.1, 60),
        ] {
            let mut f1s = Vec::new();
            for seed in [1u64, 2, 3] {
                let (f1, _) = run(seed, method, lf, epochs, widths.clone());
                f1s.push((f1 * 1000.0).round() / 1000.0);
            }
            println!("w{widths:?} {label} f1 {f1s:?}");
        }
    }
}
