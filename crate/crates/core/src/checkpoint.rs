//! Bit-exact training state snapshots: a text manifest (config, step, RNG
//! positions, sampler order, tensor directory) followed by one binary payload
//! of little-endian f64 values. Loading a checkpoint and resuming reproduces
//! the uninterrupted run byte for byte.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::AdamState;
use rand::SeedableRng;
use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "dcmt-checkpoint v1";

/// Full positional state of one ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training bit-exactly from step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: String,
    pub step: u64,
    pub total_steps: u64,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub adam: AdamState,
    pub aug_rng: RngState,
    pub sampler_rng: RngState,
    pub sampler_labeled_order: Vec<u32>,
    pub sampler_unlabeled_order: Vec<u32>,
    pub sampler_cursors: (usize, usize),
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Format(format!("rng seed hex of length {}", s.len())));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16);
        let lo = (chunk[1] as char).to_digit(16);
        match (hi, lo) {
            (Some(h), Some(l)) => out[i] = (h * 16 + l) as u8,
            _ => return Err(Error::Format("invalid hex in rng seed".into())),
        }
    }
    Ok(out)
}

fn order_field(order: &[u32]) -> String {
    if order.is_empty() {
        "-".to_string()
    } else {
        order.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn parse_order(s: &str) -> Result<Vec<u32>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Error::Format(format!("bad order entry {t:?}")))
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        manifest.push_str(&format!("config_hash {}\n", self.config_hash));
        manifest.push_str(&format!("step {}\n", self.step));
        manifest.push_str(&format!("total_steps {}\n", self.total_steps));
        manifest.push_str(&format!("adam_t {}\n", self.adam.t));
        manifest.push_str(&format!(
            "aug_rng {} {} {}\n",
            hex(&self.aug_rng.seed),
            self.aug_rng.stream,
            self.aug_rng.word_pos
        ));
        manifest.push_str(&format!(
            "sampler_rng {} {} {}\n",
            hex(&self.sampler_rng.seed),
            self.sampler_rng.stream,
            self.sampler_rng.word_pos
        ));
        manifest.push_str(&format!(
            "sampler_cursors {} {}\n",
            self.sampler_cursors.0, self.sampler_cursors.1
        ));
        manifest.push_str(&format!(
            "sampler_labeled_order {}\n",
            order_field(&self.sampler_labeled_order)
        ));
        manifest.push_str(&format!(
            "sampler_unlabeled_order {}\n",
            order_field(&self.sampler_unlabeled_order)
        ));
        let config_lines: Vec<&str> = self.config_text.lines().collect();
        manifest.push_str(&format!("config_lines {}\n", config_lines.len()));
        for line in config_lines {
            manifest.push_str(line);
            manifest.push('\n');
        }

        // tensor directory + payload in a fixed order; values are f64 LE
        let mut payload: Vec<u8> = Vec::new();
        let mut push_tensor = |manifest: &mut String, name: String, shape: &[usize], values: &[f64]| {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {}\n", dims.join(",")));
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.student.iter() {
            push_tensor(&mut manifest, format!("student.{name}"), t.shape(), t.values());
        }
        for (name, t) in self.teacher.iter() {
            push_tensor(&mut manifest, format!("teacher.{name}"), t.shape(), t.values());
        }
        for ((name, t), m) in self.student.iter().zip(&self.adam.m) {
            push_tensor(&mut manifest, format!("adam_m.{name}"), t.shape(), m);
        }
        for ((name, t), v) in self.student.iter().zip(&self.adam.v) {
            push_tensor(&mut manifest, format!("adam_v.{name}"), t.shape(), v);
        }

        let mut out = manifest.into_bytes();
        out.extend_from_slice(format!("payload_bytes {}\n", payload.len()).as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut pos = 0usize;
        let mut line = || -> Result<String> {
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            if pos == bytes.len() {
                return Err(Error::Format("unterminated manifest line".into()));
            }
            let s = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::Format("manifest is not UTF-8".into()))?
                .to_string();
            pos += 1;
            Ok(s)
        };

        if line()? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut field = |name: &str| -> Result<String> {
            let l = line()?;
            l.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(|r| r.to_string())
                .ok_or_else(|| Error::Format(format!("expected {name}, got {l:?}")))
        };
        let config_hash = field("config_hash")?;
        let step: u64 = field("step")?
            .parse()
            .map_err(|_| Error::Format("bad step".into()))?;
        let total_steps: u64 = field("total_steps")?
            .parse()
            .map_err(|_| Error::Format("bad total_steps".into()))?;
        let adam_t: u64 = field("adam_t")?
            .parse()
            .map_err(|_| Error::Format("bad adam_t".into()))?;
        let parse_rng = |s: String| -> Result<RngState> {
            let parts: Vec<&str> = s.split(' ').collect();
            if parts.len() != 3 {
                return Err(Error::Format("rng state wants 3 fields".into()));
            }
            Ok(RngState {
                seed: unhex32(parts[0])?,
                stream: parts[1].parse().map_err(|_| Error::Format("bad rng stream".into()))?,
                word_pos: parts[2].parse().map_err(|_| Error::Format("bad rng word_pos".into()))?,
            })
        };
        let aug_rng = parse_rng(field("aug_rng")?)?;
        let sampler_rng = parse_rng(field("sampler_rng")?)?;
        let cursors_str = field("sampler_cursors")?;
        let cparts: Vec<&str> = cursors_str.split(' ').collect();
        if cparts.len() != 2 {
            return Err(Error::Format("sampler_cursors wants 2 fields".into()));
        }
        let sampler_cursors = (
            cparts[0].parse().map_err(|_| Error::Format("bad cursor".into()))?,
            cparts[1].parse().map_err(|_| Error::Format("bad cursor".into()))?,
        );
        let sampler_labeled_order = parse_order(&field("sampler_labeled_order")?)?;
        let sampler_unlabeled_order = parse_order(&field("sampler_unlabeled_order")?)?;
        let n_config: usize = field("config_lines")?
            .parse()
            .map_err(|_| Error::Format("bad config_lines".into()))?;
        let mut config_text = String::new();
        for _ in 0..n_config {
            config_text.push_str(&line()?);
            config_text.push('\n');
        }
        {
            let recomputed = crate::config::RunConfig::parse(&config_text)?.hash();
            if recomputed != config_hash {
                return Err(Error::Format(format!(
                    "embedded config hashes to {recomputed}, manifest claims {config_hash}"
                )));
            }
        }

        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        let payload_len: usize;
        loop {
            let l = line()?;
            if let Some(rest) = l.strip_prefix("tensor ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Format("tensor line wants name and shape".into()))?;
                let shape: Result<Vec<usize>> = dims
                    .split(',')
                    .map(|d| {
                        d.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad dim {d:?}")))
                    })
                    .collect();
                tensors.push((name.to_string(), shape?));
            } else if let Some(rest) = l.strip_prefix("payload_bytes ") {
                payload_len = rest
                    .parse()
                    .map_err(|_| Error::Format("bad payload_bytes".into()))?;
                break;
            } else {
                return Err(Error::Format(format!("unexpected manifest line {l:?}")));
            }
        }
        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            return Err(Error::Format(format!(
                "payload of {} bytes, manifest declares {payload_len}",
                payload.len()
            )));
        }
        let want: usize = tensors
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() * 8)
            .sum();
        if want != payload_len {
            return Err(Error::Format(format!(
                "tensor directory wants {want} payload bytes, got {payload_len}"
            )));
        }

        let mut off = 0usize;
        let mut student = Vec::new();
        let mut teacher = Vec::new();
        let mut adam_m: Vec<(String, Vec<f64>)> = Vec::new();
        let mut adam_v: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, shape) in tensors {
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for k in 0..n {
                let b: [u8; 8] = payload[off + 8 * k..off + 8 * k + 8]
                    .try_into()
                    .expect("length checked");
                values.push(f64::from_le_bytes(b));
            }
            off += 8 * n;
            if let Some(p) = name.strip_prefix("student.") {
                student.push((p.to_string(), Tensor::new(shape, values)?));
            } else if let Some(p) = name.strip_prefix("teacher.") {
                teacher.push((p.to_string(), Tensor::new(shape, values)?));
            } else if let Some(p) = name.strip_prefix("adam_m.") {
                adam_m.push((p.to_string(), values));
            } else if let Some(p) = name.strip_prefix("adam_v.") {
                adam_v.push((p.to_string(), values));
            } else {
                return Err(Error::Format(format!("unknown tensor family {name:?}")));
            }
        }
        let student = ParamSet::from_entries(student);
        let teacher = ParamSet::from_entries(teacher);
        let names: Vec<String> = student.names().iter().map(|s| s.to_string()).collect();
        let teacher_names: Vec<String> = teacher.names().iter().map(|s| s.to_string()).collect();
        if names != teacher_names
            || adam_m.len() != names.len()
            || adam_v.len() != names.len()
            || adam_m.iter().map(|(n, _)| n).ne(names.iter())
            || adam_v.iter().map(|(n, _)| n).ne(names.iter())
        {
            return Err(Error::Format(
                "student/teacher/optimizer tensor directories disagree".into(),
            ));
        }
        let adam = AdamState {
            m: adam_m.into_iter().map(|(_, v)| v).collect(),
            v: adam_v.into_iter().map(|(_, v)| v).collect(),
            t: adam_t,
        };

        Ok(Checkpoint {
            config_text,
            config_hash,
            step,
            total_steps,
            student,
            teacher,
            adam,
            aug_rng,
            sampler_rng,
            sampler_labeled_order,
            sampler_unlabeled_order,
            sampler_cursors,
        })
    }
}

/// Atomic save: write to a temp sibling, then rename over the target.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

/// Positional determinism helper used by tests: advancing a restored stream
/// must continue the original sequence.
pub fn rng_probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.next_u32()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Method, RunConfig};
    use crate::data::{generate_dataset, make_splits, SplitSpec};
    use crate::trainer::Trainer;

    fn tiny_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.size = 16;
        cfg.data.subjects = 10;
        cfg.data.slices_per_subject = 3;
        cfg.model.input_size = 16;
        cfg.model.conv_widths = vec![4, 4, 6, 6];
        cfg.split = SplitSpec {
            train_fraction: 0.8,
            labeled_fraction: 0.5,
            seed: 0,
        };
        cfg.batch.labeled_per_batch = 4;
        cfg.batch.unlabeled_per_batch = 2;
        cfg.trainer.epochs = 4;
        cfg.trainer.method = Method::Dcmt;
        cfg.apply_seed(seed);
        cfg
    }

    #[test]
    fn rng_state_round_trip_continues_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(3);
        let _burn = rng_probe(&mut rng, 17);
        let state = RngState::capture(&rng);
        let want = rng_probe(&mut rng, 10);
        let mut restored = state.restore();
        assert_eq!(rng_probe(&mut restored, 10), want);
    }

    #[test]
    fn checkpoint_bytes_round_trip_exactly() {
        let cfg = tiny_cfg(21);
        let ds = generate_dataset(&cfg.data).unwrap();
        let splits = make_splits(&ds, &cfg.split).unwrap();
        let mut t = Trainer::new(&cfg, &ds, &splits).unwrap();
        t.run_steps(3).unwrap();
        let ckpt = t.checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn save_load_file_round_trip() {
        let cfg = tiny_cfg(22);
        let ds = generate_dataset(&cfg.data).unwrap();
        let splits = make_splits(&ds, &cfg.split).unwrap();
        let mut t = Trainer::new(&cfg, &ds, &splits).unwrap();
        t.run_steps(2).unwrap();
        let ckpt = t.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let cfg = tiny_cfg(23);
        let ds = generate_dataset(&cfg.data).unwrap();
        let splits = make_splits(&ds, &cfg.split).unwrap();
        let t = Trainer::new(&cfg, &ds, &splits).unwrap();
        let bytes = t.checkpoint().to_bytes();
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Format(_))));
    }

    #[test]
    fn tampered_config_hash_is_rejected() {
        let cfg = tiny_cfg(24);
        let ds = generate_dataset(&cfg.data).unwrap();
        let splits = make_splits(&ds, &cfg.split).unwrap();
        let t = Trainer::new(&cfg, &ds, &splits).unwrap();
        let mut ckpt = t.checkpoint();
        ckpt.config_hash = "0000000000000000".into();
        let bytes = ckpt.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn resume_reproduces_the_straight_run_bitwise() {
        let cfg = tiny_cfg(25);
        let ds = generate_dataset(&cfg.data).unwrap();
        let splits = make_splits(&ds, &cfg.split).unwrap();

        let mut straight = Trainer::new(&cfg, &ds, &splits).unwrap();
        let full_log = straight.run_to_end().unwrap();
        let want = straight.checkpoint().to_bytes();

        let mut first = Trainer::new(&cfg, &ds, &splits).unwrap();
        let half = straight.total_steps() / 2;
        let mut log_a = first.run_steps(half).unwrap();
        let mid = first.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&path, &mid).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut second = Trainer::from_checkpoint(&cfg, &ds, &splits, &loaded).unwrap();
        let log_b = second.run_to_end().unwrap();
        let got = second.checkpoint().to_bytes();

        assert_eq!(got, want);
        log_a.extend(log_b);
        assert_eq!(
            crate::trainer::log_csv_rows(&log_a),
            crate::trainer::log_csv_rows(&full_log)
        );
    }

    #[test]
    fn checkpoint_under_different_config_is_rejected() {
        let cfg = tiny_cfg(26);
        let ds = generate_dataset(&cfg.data).unwrap();
        let splits = make_splits(&ds, &cfg.split).unwrap();
        let t = Trainer::new(&cfg, &ds, &splits).unwrap();
        let ckpt = t.checkpoint();
        let mut other = tiny_cfg(27);
        other.trainer.lr = 0.002;
        assert!(matches!(
            Trainer::from_checkpoint(&other, &ds, &splits, &ckpt),
            Err(Error::Format(_))
        ));
    }
}
