//! The shared student/teacher network: a small convolutional trunk feeding a
//! softmax classification head and a sigmoid attention head at 1/stride of
//! the input resolution. No normalization layers, so the forward pass of a
//! batch is exactly the concatenation of per-sample forward passes.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Topology and initialization settings shared by both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Square input edge length.
    pub input_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Attention map edge = input_size / attention_stride; must be a power
    /// of two (one 2x2 max-pool per factor of two).
    pub attention_stride: usize,
    /// Output width of each conv block; pooling happens in the first
    /// log2(attention_stride) blocks.
    pub conv_widths: Vec<usize>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 32,
            channels: 1,
            num_classes: 3,
            attention_stride: 4,
            conv_widths: vec![16, 32, 64, 64],
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes {} < 2",
                self.num_classes
            )));
        }
        if self.channels == 0 || self.input_size == 0 {
            return Err(Error::Config("channels and input_size must be positive".into()));
        }
        if self.attention_stride == 0 || !self.attention_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "attention_stride {} must be a positive power of two",
                self.attention_stride
            )));
        }
        if self.input_size % self.attention_stride != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by attention_stride {}",
                self.input_size, self.attention_stride
            )));
        }
        if self.conv_widths.is_empty() || self.conv_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("conv_widths must be nonempty and positive".into()));
        }
        if self.conv_widths.len() < self.pool_blocks() {
            return Err(Error::Config(format!(
                "attention_stride {} needs at least {} conv blocks, got {}",
                self.attention_stride,
                self.pool_blocks(),
                self.conv_widths.len()
            )));
        }
        Ok(())
    }

    fn pool_blocks(&self) -> usize {
        self.attention_stride.trailing_zeros() as usize
    }

    /// Attention map edge length.
    pub fn attention_size(&self) -> usize {
        self.input_size / self.attention_stride
    }

    /// Ordered parameter layout: (name, shape, fan_in). The single source of
    /// truth for initialization, forward wiring, and checkpoints.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut in_ch = self.channels;
        for (i, &w) in self.conv_widths.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![w, in_ch, 3, 3], in_ch * 9));
            out.push((format!("conv{}.bias", i + 1), vec![w], 0));
            in_ch = w;
        }
        out.push(("attn.weight".into(), vec![1, in_ch, 1, 1], in_ch));
        out.push(("attn.bias".into(), vec![1], 0));
        out.push(("fc.weight".into(), vec![self.num_classes, in_ch], in_ch));
        out.push(("fc.bias".into(), vec![self.num_classes], 0));
        out
    }

    /// Total parameter entry count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParamSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Concatenate every tensor's values in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in &self.entries {
            out.extend_from_slice(t.values());
        }
        out
    }

    /// Overwrite every tensor from one flat vector in layout order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.entries.iter().map(|(_, t)| t.numel()).sum();
        if flat.len() != total {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, parameters want {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Student parameters (optimized) and teacher parameters (EMA-maintained)
/// over one shared topology.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub config: NetworkConfig,
}

/// Build a freshly initialized pair: He fan-in normal weights from the seeded
/// generator, zero biases, teacher an exact copy of the student.
pub fn init_pair(config: &NetworkConfig) -> Result<ModelPair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    for (name, shape, fan_in) in config.layout() {
        let n: usize = shape.iter().product();
        let values = if fan_in == 0 {
            vec![0.0; n]
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is finite and positive");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        entries.push((name, Tensor::new(shape, values)?));
    }
    let student = ParamSet::from_entries(entries);
    let teacher = student.clone();
    Ok(ModelPair {
        student,
        teacher,
        config: config.clone(),
    })
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: TensorId,
    /// Softmax class probabilities, rows summing to 1.
    pub probs: TensorId,
    /// Sigmoid attention map [N, 1, input/stride, input/stride], entries in (0,1).
    pub attention: TensorId,
    /// Leaf ids aligned with the ParamSet entry order.
    pub param_ids: Vec<TensorId>,
}

/// Run the two-head network on a batch [N, channels, input_size, input_size].
/// With `track_grad` false the parameters enter the graph as constants and
/// nothing is recorded for them, which is how the teacher stays gradient-free.
pub fn forward(
    g: &mut Graph,
    params: &ParamSet,
    config: &NetworkConfig,
    batch: &Tensor,
    track_grad: bool,
) -> Result<ForwardPass> {
    let bs = batch.shape();
    if bs.len() != 4 || bs[1] != config.channels || bs[2] != config.input_size || bs[3] != config.input_size {
        return Err(Error::Dimension(format!(
            "batch shape {bs:?} does not match [N,{},{},{}]",
            config.channels, config.input_size, config.input_size
        )));
    }
    let layout = config.layout();
    if layout.len() != params.len() {
        return Err(Error::Corruption(format!(
            "parameter set has {} tensors, topology wants {}",
            params.len(),
            layout.len()
        )));
    }
    let mut ids = Vec::with_capacity(params.len());
    for ((name, shape, _), (pname, tensor)) in layout.iter().zip(params.iter()) {
        if name != pname || shape.as_slice() != tensor.shape() {
            return Err(Error::Corruption(format!(
                "parameter {pname} {:?} does not match topology slot {name} {shape:?}",
                tensor.shape()
            )));
        }
        let id = if track_grad {
            g.param(tensor)
        } else {
            g.insert(tensor.clone())
        };
        ids.push(id);
    }

    let mut x = g.insert(batch.clone());
    let pools = config.pool_blocks();
    let blocks = config.conv_widths.len();
    for i in 0..blocks {
        let w = ids[2 * i];
        let b = ids[2 * i + 1];
        x = g.conv2d(x, w, b, 1, 1)?;
        x = g.relu(x)?;
        if i < pools {
            x = g.max_pool2(x)?;
        }
    }
    let attn_w = ids[2 * blocks];
    let attn_b = ids[2 * blocks + 1];
    let pre = g.conv2d(x, attn_w, attn_b, 1, 0)?;
    let attention = g.sigmoid(pre)?;

    let fc_w = ids[2 * blocks + 2];
    let fc_b = ids[2 * blocks + 3];
    let feat = g.global_avg_pool(x)?;
    let logits = g.linear(feat, fc_w, fc_b)?;
    let probs = g.softmax(logits)?;

    Ok(ForwardPass {
        logits,
        probs,
        attention,
        param_ids: ids,
    })
}

/// Nearest-neighbor upsampling of an attention map node to a square lattice
/// of edge `target`; the target must be a multiple of the current edge.
pub fn upsample_attention(g: &mut Graph, mask: TensorId, target: usize) -> Result<TensorId> {
    let shape = g.shape(mask).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "upsample_attention wants [N,1,h,w], got {shape:?}"
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    if target < h || target < w || target % h != 0 || target % w != 0 || target / h != target / w {
        return Err(Error::Dimension(format!(
            "cannot upsample {h}x{w} attention to {target}x{target}"
        )));
    }
    g.upsample_nearest(mask, target / h)
}

/// Raster-level counterpart of [`upsample_attention`] for evaluation paths
/// that operate outside a graph.
pub fn upsample_attention_raster(values: &[f64], h: usize, w: usize, target: usize) -> Result<Vec<f64>> {
    if values.len() != h * w {
        return Err(Error::Dimension(format!(
            "raster of {} values is not {h}x{w}",
            values.len()
        )));
    }
    if target < h || target < w || target % h != 0 || target % w != 0 || target / h != target / w {
        return Err(Error::Dimension(format!(
            "cannot upsample {h}x{w} raster to {target}x{target}"
        )));
    }
    let f = target / h;
    let mut out = vec![0.0; target * target];
    for y in 0..target {
        for x in 0..target {
            out[y * target + x] = values[(y / f) * w + x / f];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            input_size: 16,
            conv_widths: vec![4, 6, 8, 8],
            seed: 42,
            ..NetworkConfig::default()
        }
    }

    fn batch(n: usize, size: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 1, size, size], vals).unwrap()
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let cfg = small_config();
        let a = init_pair(&cfg).unwrap();
        let b = init_pair(&cfg).unwrap();
        let fa = a.student.flatten();
        let fb = b.student.flatten();
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn teacher_starts_as_exact_copy() {
        let pair = init_pair(&small_config()).unwrap();
        assert_eq!(pair.student.max_abs_diff(&pair.teacher), 0.0);
    }

    #[test]
    fn indivisible_input_size_is_config_error() {
        let cfg = NetworkConfig {
            input_size: 30,
            ..NetworkConfig::default()
        };
        assert!(matches!(init_pair(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_is_pure_function_of_config() {
        let cfg = small_config();
        assert_eq!(cfg.param_count(), init_pair(&cfg).unwrap().student.flatten().len());
        let wider = NetworkConfig {
            conv_widths: vec![8, 12, 16, 16],
            ..small_config()
        };
        assert_ne!(cfg.param_count(), wider.param_count());
    }

    #[test]
    fn forward_probs_normalized_and_attention_bounded() {
        let cfg = small_config();
        let pair = init_pair(&cfg).unwrap();
        let mut g = Graph::new();
        let out = forward(&mut g, &pair.student, &cfg, &batch(3, 16, 1), true).unwrap();
        let probs = g.values(out.probs);
        for r in 0..3 {
            let s: f64 = probs[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
        assert_eq!(g.shape(out.attention), &[3, 1, 4, 4]);
        assert!(g.values(out.attention).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zeroed_classification_head_yields_uniform_rows() {
        let cfg = small_config();
        let mut pair = init_pair(&cfg).unwrap();
        for name in ["fc.weight", "fc.bias"] {
            let t = pair.student.get_mut(name).unwrap();
            t.values_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let out = forward(&mut g, &pair.student, &cfg, &batch(2, 16, 2), false).unwrap();
        for v in g.values(out.probs) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_forward_equals_concatenated_single_forwards() {
        let cfg = small_config();
        let pair = init_pair(&cfg).unwrap();
        let two = batch(2, 16, 3);
        let mut g = Graph::new();
        let out = forward(&mut g, &pair.student, &cfg, &two, false).unwrap();
        let batch_probs = g.values(out.probs).to_vec();
        let batch_attn = g.values(out.attention).to_vec();

        let mut singles_probs = Vec::new();
        let mut singles_attn = Vec::new();
        for i in 0..2 {
            let vals = two.values()[i * 256..(i + 1) * 256].to_vec();
            let one = Tensor::new(vec![1, 1, 16, 16], vals).unwrap();
            let mut g1 = Graph::new();
            let o = forward(&mut g1, &pair.student, &cfg, &one, false).unwrap();
            singles_probs.extend_from_slice(g1.values(o.probs));
            singles_attn.extend_from_slice(g1.values(o.attention));
        }
        assert!(batch_probs.iter().zip(&singles_probs).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(batch_attn.iter().zip(&singles_attn).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn student_and_teacher_forward_identically_with_equal_weights() {
        let cfg = small_config();
        let pair = init_pair(&cfg).unwrap();
        let b = batch(2, 16, 4);
        let mut g = Graph::new();
        let s = forward(&mut g, &pair.student, &cfg, &b, true).unwrap();
        let t = forward(&mut g, &pair.teacher, &cfg, &b, false).unwrap();
        assert!(g
            .values(s.probs)
            .iter()
            .zip(g.values(t.probs))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g
            .values(s.attention)
            .iter()
            .zip(g.values(t.attention))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn wrong_spatial_size_is_dimension_error() {
        let cfg = small_config();
        let pair = init_pair(&cfg).unwrap();
        let mut g = Graph::new();
        let bad = batch(1, 32, 5);
        assert!(matches!(
            forward(&mut g, &pair.student, &cfg, &bad, true),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn upsample_attention_contracts() {
        let mut g = Graph::new();
        let m = g.constant(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = upsample_attention(&mut g, m, 4).unwrap();
        assert_eq!(g.shape(up), &[1, 1, 4, 4]);
        // downsampling request
        assert!(matches!(
            upsample_attention(&mut g, up, 2),
            Err(Error::Dimension(_))
        ));
        // indivisible target
        let m3 = g.constant(vec![1, 1, 3, 3], vec![0.5; 9]).unwrap();
        assert!(matches!(
            upsample_attention(&mut g, m3, 8),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn raster_upsample_matches_graph_upsample() {
        let vals = vec![0.1, 0.9, 0.4, 0.6];
        let up = upsample_attention_raster(&vals, 2, 2, 6).unwrap();
        let mut g = Graph::new();
        let m = g.constant(vec![1, 1, 2, 2], vals).unwrap();
        let gu = upsample_attention(&mut g, m, 6).unwrap();
        assert_eq!(up, g.values(gu));
    }
}
