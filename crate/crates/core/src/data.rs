//! Synthetic band-defect dataset: each image shows a bright curved band on a
//! dark background. Severity 0 keeps the band intact, severity 1 carves a
//! notch through part of its thickness, severity 2 severs it completely. The
//! segmentation mask is the pre-carve band, dilated.
//!
//! Also here: subject-wise train/test/labeled splits, the fixed-composition
//! batch sampler, flip/translate augmentation, and binary PGM round trips.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;

/// Grayscale raster with values in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(w: usize, h: usize) -> Self {
        Raster {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }
}

/// Binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(w: usize, h: usize) -> Self {
        Mask {
            w,
            h,
            data: vec![false; w * h],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// View as 0.0/1.0 values for loss and metric lattices.
    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Severity grade of the band defect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Normal = 0,
    Partial = 1,
    Full = 2,
}

pub const NUM_CLASSES: usize = 3;

impl Severity {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Severity::Normal),
            1 => Ok(Severity::Partial),
            2 => Ok(Severity::Full),
            _ => Err(Error::Data(format!("invalid class id {v}"))),
        }
    }

    pub fn as_usize(self) -> usize {
        self as usize
    }
}

/// One image with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Raster,
    /// Dilated pre-defect band mask; never empty.
    pub seg: Mask,
    pub class: Severity,
    pub subject_id: u32,
    pub sample_id: u32,
}

/// Generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub size: usize,
    pub subjects: u32,
    pub slices_per_subject: u32,
    pub noise_sigma: f64,
    pub dilate_iterations: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            size: 32,
            subjects: 100,
            slices_per_subject: 6,
            noise_sigma: 0.05,
            dilate_iterations: 1,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Data(format!("image size {} < 16", self.size)));
        }
        if self.subjects < 2 || self.slices_per_subject == 0 {
            return Err(Error::Config(
                "need at least 2 subjects and 1 slice per subject".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// splitmix64 scramble of (seed, a, b) into one stream seed.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SubjectGeometry {
    center: f64,
    amplitude: f64,
    cycles: f64,
    phase: f64,
    thickness: usize,
    band_intensity: f64,
    bg_base: f64,
    bg_slope: f64,
}

fn subject_geometry(seed: u64, subject_id: u32) -> SubjectGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, subject_id as u64, 0xA11CE));
    SubjectGeometry {
        center: rng.gen_range(0.35..0.65),
        amplitude: rng.gen_range(0.06..0.12),
        cycles: rng.gen_range(0.75..1.75),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        thickness: rng.gen_range(3..=5),
        band_intensity: rng.gen_range(0.75..0.90),
        bg_base: rng.gen_range(0.10..0.20),
        bg_slope: rng.gen_range(-0.06..0.06),
    }
}

/// Deterministic sample synthesis: pure function of
/// (seed, subject_id, sample_id, class).
pub fn generate_sample(
    cfg: &DataConfig,
    subject_id: u32,
    sample_id: u32,
    class: Severity,
) -> Result<Sample> {
    cfg.validate()?;
    let size = cfg.size;
    let geo = subject_geometry(cfg.seed, subject_id);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, subject_id as u64, sample_id as u64));

    // Per-slice jitter and defect parameters; drawn for every class so that
    // only the carving itself differs between severities.
    let center_jitter: f64 = rng.gen_range(-1.5..1.5);
    let phase_jitter: f64 = rng.gen_range(-0.4..0.4);
    let defect_width: usize = rng.gen_range(4..=7);
    let defect_x0: usize = rng.gen_range(2..=size - 2 - defect_width);
    let notch_frac: f64 = rng.gen_range(0.45..0.75);

    let t = geo.thickness;
    let mut band = Mask::new(size, size);
    let mut band_top = vec![0usize; size];
    for x in 0..size {
        let arg = std::f64::consts::TAU * geo.cycles * x as f64 / size as f64 + geo.phase + phase_jitter;
        let yc = geo.center * size as f64 + center_jitter + geo.amplitude * size as f64 * arg.sin();
        let y0 = (yc - t as f64 / 2.0).round().max(0.0) as usize;
        let y0 = y0.min(size - t);
        band_top[x] = y0;
        for y in y0..y0 + t {
            band.set(y, x, true);
        }
    }

    let mut image = Raster::new(size, size);
    for y in 0..size {
        let bg = geo.bg_base + geo.bg_slope * (y as f64 / size as f64 - 0.5);
        for x in 0..size {
            let v = if band.at(y, x) { geo.band_intensity } else { bg };
            image.set(y, x, v);
        }
    }

    // Carve the defect before noise: a partial notch leaves a sliver of
    // band, a full gap removes the whole thickness.
    let carved_rows = match class {
        Severity::Normal => 0,
        Severity::Partial => ((notch_frac * t as f64).round() as usize).clamp(1, t - 1),
        Severity::Full => t,
    };
    if carved_rows > 0 {
        for x in defect_x0..defect_x0 + defect_width {
            let bg_col: Vec<f64> = (0..carved_rows)
                .map(|i| {
                    let y = band_top[x] + i;
                    geo.bg_base + geo.bg_slope * (y as f64 / size as f64 - 0.5)
                })
                .collect();
            for (i, bg) in bg_col.iter().enumerate() {
                image.set(band_top[x] + i, x, *bg);
            }
        }
    }

    let seg = dilate(&band, cfg.dilate_iterations);

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma checked nonnegative");
        for v in &mut image.data {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    Ok(Sample {
        image,
        seg,
        class,
        subject_id,
        sample_id,
    })
}

/// Iterated binary dilation with the full 3x3 structuring element. The output
/// is always a superset of the input.
pub fn dilate(mask: &Mask, iterations: usize) -> Mask {
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let mut next = Mask::new(cur.w, cur.h);
        for y in 0..cur.h {
            for x in 0..cur.w {
                'probe: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0
                            && nx >= 0
                            && (ny as usize) < cur.h
                            && (nx as usize) < cur.w
                            && cur.at(ny as usize, nx as usize)
                        {
                            next.set(y, x, true);
                            break 'probe;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Full generated corpus, ordered by sample id. Every subject carries a
/// class-balanced set of slices, so subject-level splits stay balanced.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub size: usize,
    pub subjects: u32,
    pub slices_per_subject: u32,
}

pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity((cfg.subjects * cfg.slices_per_subject) as usize);
    for subject in 0..cfg.subjects {
        let mut classes: Vec<Severity> = (0..cfg.slices_per_subject)
            .map(|i| Severity::from_u8((i % 3) as u8).expect("0..3"))
            .collect();
        let mut crng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, subject as u64, 0xC1A55));
        classes.shuffle(&mut crng);
        for (slice, class) in classes.into_iter().enumerate() {
            let sample_id = subject * cfg.slices_per_subject + slice as u32;
            samples.push(generate_sample(cfg, subject, sample_id, class)?);
        }
    }
    Ok(Dataset {
        samples,
        size: cfg.size,
        subjects: cfg.subjects,
        slices_per_subject: cfg.slices_per_subject,
    })
}

/// Split proportions; partitions operate on whole subjects, never slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            labeled_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Sample-index pools after the subject-wise split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitDataset {
    pub fn subject_sets(&self, ds: &Dataset) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
        let collect = |idx: &[usize]| {
            let mut s: Vec<u32> = idx.iter().map(|&i| ds.samples[i].subject_id).collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        (collect(&self.labeled), collect(&self.unlabeled), collect(&self.test))
    }
}

/// Partition subjects into test / labeled-train / unlabeled-train pools and
/// return the per-pool sample indices in sample-id order.
pub fn make_splits(ds: &Dataset, spec: &SplitSpec) -> Result<SplitDataset> {
    if !(0.0 < spec.train_fraction && spec.train_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {} outside (0,1]",
            spec.train_fraction
        )));
    }
    if !(0.0 < spec.labeled_fraction && spec.labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled_fraction {} outside (0,1]",
            spec.labeled_fraction
        )));
    }
    let n_subjects = ds.subjects as usize;
    if n_subjects < 2 {
        return Err(Error::Config("need at least 2 subjects to split".into()));
    }
    let n_test = ((1.0 - spec.train_fraction) * n_subjects as f64).round() as usize;
    let n_train = n_subjects - n_test;
    if n_train == 0 {
        return Err(Error::Config("train_fraction leaves no training subjects".into()));
    }
    let n_labeled = ((spec.labeled_fraction * n_train as f64).round() as usize).clamp(1, n_train);

    let mut order: Vec<u32> = (0..ds.subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5711, 0));
    order.shuffle(&mut rng);
    let test_subjects: std::collections::HashSet<u32> = order[..n_test].iter().copied().collect();
    let labeled_subjects: std::collections::HashSet<u32> =
        order[n_test..n_test + n_labeled].iter().copied().collect();

    let mut out = SplitDataset {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    for (i, s) in ds.samples.iter().enumerate() {
        if test_subjects.contains(&s.subject_id) {
            out.test.push(i);
        } else if labeled_subjects.contains(&s.subject_id) {
            out.labeled.push(i);
        } else {
            out.unlabeled.push(i);
        }
    }
    Ok(out)
}

/// Batch composition; the default keeps the 2:1 labeled:unlabeled ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            labeled_per_batch: 8,
            unlabeled_per_batch: 4,
        }
    }
}

/// Positions into the labeled/unlabeled pools for one step.
#[derive(Debug, Clone)]
pub struct BatchDraw {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Without-replacement stream over each pool: a shuffled pass covers every
/// element exactly once, then reshuffles. Every batch has the exact spec
/// composition; a pool shorter than its per-batch count recycles mid-batch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labeled_order: Vec<u32>,
    unlabeled_order: Vec<u32>,
    l_cursor: usize,
    u_cursor: usize,
    spec: BatchSpec,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n_labeled: usize, n_unlabeled: usize, spec: BatchSpec, mut rng: ChaCha8Rng) -> Result<Self> {
        if n_labeled == 0 {
            return Err(Error::Data(
                "labeled pool is empty; training cannot proceed".into(),
            ));
        }
        if spec.labeled_per_batch == 0 {
            return Err(Error::Config("labeled_per_batch must be positive".into()));
        }
        let mut labeled_order: Vec<u32> = (0..n_labeled as u32).collect();
        let mut unlabeled_order: Vec<u32> = (0..n_unlabeled as u32).collect();
        labeled_order.shuffle(&mut rng);
        unlabeled_order.shuffle(&mut rng);
        Ok(BatchSampler {
            labeled_order,
            unlabeled_order,
            l_cursor: 0,
            u_cursor: 0,
            spec,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> BatchDraw {
        let labeled = Self::draw(
            &mut self.labeled_order,
            &mut self.l_cursor,
            self.spec.labeled_per_batch,
            &mut self.rng,
        );
        let unlabeled = if self.unlabeled_order.is_empty() {
            Vec::new()
        } else {
            Self::draw(
                &mut self.unlabeled_order,
                &mut self.u_cursor,
                self.spec.unlabeled_per_batch,
                &mut self.rng,
            )
        };
        BatchDraw { labeled, unlabeled }
    }

    fn draw(order: &mut Vec<u32>, cursor: &mut usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if *cursor == order.len() {
                order.shuffle(rng);
                *cursor = 0;
            }
            out.push(order[*cursor] as usize);
            *cursor += 1;
        }
        out
    }

    pub fn spec(&self) -> BatchSpec {
        self.spec
    }

    pub fn has_unlabeled(&self) -> bool {
        !self.unlabeled_order.is_empty()
    }

    pub(crate) fn state(&self) -> (Vec<u32>, Vec<u32>, usize, usize) {
        (
            self.labeled_order.clone(),
            self.unlabeled_order.clone(),
            self.l_cursor,
            self.u_cursor,
        )
    }

    pub(crate) fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub(crate) fn restore(
        labeled_order: Vec<u32>,
        unlabeled_order: Vec<u32>,
        l_cursor: usize,
        u_cursor: usize,
        spec: BatchSpec,
        rng: ChaCha8Rng,
    ) -> Self {
        BatchSampler {
            labeled_order,
            unlabeled_order,
            l_cursor,
            u_cursor,
            spec,
            rng,
        }
    }
}

/// One drawn transform, applied identically to image and segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        dx: 0,
        dy: 0,
    };
}

/// Horizontal flip with probability 1/2 and integer translation in
/// [-2, 2] on both axes.
pub fn draw_augmentation(rng: &mut ChaCha8Rng) -> Augmentation {
    Augmentation {
        flip: rng.gen_bool(0.5),
        dx: rng.gen_range(-2..=2),
        dy: rng.gen_range(-2..=2),
    }
}

/// Flip first, then translate with zero padding; the label is untouched.
pub fn apply_augmentation(image: &Raster, seg: &Mask, aug: Augmentation) -> (Raster, Mask) {
    let (w, h) = (image.w, image.h);
    let mut img = Raster::new(w, h);
    let mut mask = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let sy = y as i64 - aug.dy;
            let sx = x as i64 - aug.dx;
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            let src_x = if aug.flip { w - 1 - sx } else { sx };
            img.set(y, x, image.at(sy, src_x));
            mask.set(y, x, seg.at(sy, src_x));
        }
    }
    (img, mask)
}

// ── PGM round trips and the dataset directory layout ─────────────────

/// Write a [0,1] raster as binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, raster: &Raster) -> Result<()> {
    if let Some(v) = raster.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("pixel value {v} outside [0,1]")));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", raster.w, raster.h).into_bytes();
    bytes.extend(raster.data.iter().map(|&v| (v * 255.0).round() as u8));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raster = Raster {
        w: mask.w,
        h: mask.h,
        data: mask.to_values(),
    };
    write_pgm(path, &raster)
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    // header: magic, width, height, maxval, one whitespace byte, payload
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err("not a binary PGM (magic != P5)".into());
    }
    let w: usize = token(&mut pos)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing header terminator".into());
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != w * h {
        return Err(format!("payload of {} bytes, want {}", payload.len(), w * h));
    }
    Ok(Raster {
        w,
        h,
        data: payload.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let r = read_pgm(path)?;
    Ok(Mask {
        w: r.w,
        h: r.h,
        data: r.data.iter().map(|&v| v > 0.5).collect(),
    })
}

/// Write `images/<id>.pgm`, `segs/<id>.pgm`, and `manifest.csv`
/// (`sample_id,subject_id,class,split,labeled`).
pub fn write_dataset_dir(dir: &Path, ds: &Dataset, splits: &SplitDataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("segs"))?;
    let labeled: std::collections::HashSet<usize> = splits.labeled.iter().copied().collect();
    let test: std::collections::HashSet<usize> = splits.test.iter().copied().collect();
    let mut manifest = String::from("sample_id,subject_id,class,split,labeled\n");
    for (i, s) in ds.samples.iter().enumerate() {
        write_pgm(&dir.join("images").join(format!("{}.pgm", s.sample_id)), &s.image)?;
        write_pgm_mask(&dir.join("segs").join(format!("{}.pgm", s.sample_id)), &s.seg)?;
        let split = if test.contains(&i) { "test" } else { "train" };
        let lab = if labeled.contains(&i) { 1 } else { 0 };
        manifest.push_str(&format!(
            "{},{},{},{},{}\n",
            s.sample_id,
            s.subject_id,
            s.class.as_usize(),
            split,
            lab
        ));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Load a directory written by [`write_dataset_dir`].
pub fn load_dataset_dir(dir: &Path) -> Result<(Dataset, SplitDataset)> {
    let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = manifest.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
    if header != "sample_id,subject_id,class,split,labeled" {
        return Err(Error::Format(format!("unexpected manifest header {header:?}")));
    }
    let mut samples = Vec::new();
    let mut splits = SplitDataset {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    let mut size = 0usize;
    let mut max_subject = 0u32;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "manifest line {}: want 5 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| Error::Format(format!("manifest line {}: bad {what}", lineno + 2));
        let sample_id: u32 = fields[0].parse().map_err(|_| parse_err("sample_id"))?;
        let subject_id: u32 = fields[1].parse().map_err(|_| parse_err("subject_id"))?;
        let class_id: u8 = fields[2].parse().map_err(|_| parse_err("class"))?;
        let class = Severity::from_u8(class_id)?;
        let labeled_flag = match fields[4] {
            "0" => false,
            "1" => true,
            _ => return Err(parse_err("labeled")),
        };
        let image = read_pgm(&dir.join("images").join(format!("{sample_id}.pgm")))?;
        let seg = read_pgm_mask(&dir.join("segs").join(format!("{sample_id}.pgm")))?;
        if image.w != image.h || seg.w != image.w || seg.h != image.h {
            return Err(Error::Format(format!(
                "sample {sample_id}: image {}x{} and seg {}x{} must be square and equal",
                image.w, image.h, seg.w, seg.h
            )));
        }
        if size == 0 {
            size = image.w;
        } else if image.w != size {
            return Err(Error::Format(format!(
                "sample {sample_id}: size {} differs from {size}",
                image.w
            )));
        }
        max_subject = max_subject.max(subject_id);
        let idx = samples.len();
        match fields[3] {
            "test" => splits.test.push(idx),
            "train" => {
                if labeled_flag {
                    splits.labeled.push(idx)
                } else {
                    splits.unlabeled.push(idx)
                }
            }
            other => return Err(Error::Format(format!("unknown split {other:?}"))),
        }
        samples.push(Sample {
            image,
            seg,
            class,
            subject_id,
            sample_id,
        });
    }
    if samples.is_empty() {
        return Err(Error::Format("manifest lists no samples".into()));
    }
    Ok((
        Dataset {
            samples,
            size,
            subjects: max_subject + 1,
            slices_per_subject: 0,
        },
        splits,
    ))
}
