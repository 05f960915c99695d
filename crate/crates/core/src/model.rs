//! TC-ResNet-8: 1-D temporal convolutions over MFCC frames, with the
//! cepstral coefficients as input channels.
//!
//! ```text
//! stem    conv k3 s1 (40→16) · BN · ReLU                        98
//! block1  [conv k9 s2 · BN · ReLU · conv k9 s1 · BN] + [conv k1 s2 · BN] · ReLU   49
//! block2  same, 24→32                                          25
//! block3  same, 32→48                                          13
//! head    global average pool over time · linear 48→classes
//! ```
//!
//! Convolutions carry no bias (every one feeds a batch norm). With 30
//! classes this gives 66,062 trainable parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, Mode, Normalization, Param, Tape, Tensor, Var};
use crate::dsp::FeatureMatrix;
use crate::error::{shape_err, Error, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Rows per chunk when evaluating large sets in eval mode.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcResNet8Config {
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub kernel_first: usize,
    pub kernel_block: usize,
}

impl Default for TcResNet8Config {
    fn default() -> Self {
        Self { input_channels: 40, channels: vec![16, 24, 32, 48], num_classes: 30, kernel_first: 3, kernel_block: 9 }
    }
}

impl TcResNet8Config {
    pub fn with_classes(num_classes: usize) -> Self {
        Self { num_classes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(Error::InvalidConfig(format!("TC-ResNet-8 needs 4 channel widths, got {:?}", self.channels)));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_channels == 0 || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if self.kernel_first.is_multiple_of(2) || self.kernel_block.is_multiple_of(2) {
            return Err(Error::InvalidConfig("kernel sizes must be odd for length-preserving padding".into()));
        }
        Ok(())
    }
}

/// Running mean/variance of one batch-norm layer (not trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    fn new(name: String, c: usize) -> Self {
        Self { name, mean: vec![T::zero(); c], var: vec![T::one(); c] }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchMoments, momentum: f64) {
        let blend = |r: &mut T, b: f64| *r = T::from_f64_lossy((1.0 - momentum) * r.as_f64() + momentum * b);
        self.mean.iter_mut().zip(&batch.mean).for_each(|(r, &b)| blend(r, b));
        self.var.iter_mut().zip(&batch.var_unbiased).for_each(|(r, &b)| blend(r, b));
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: ConvBn,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvBn,
    blocks: [Block; 3],
    head_weight: usize,
    head_bias: usize,
}

#[derive(Debug, Clone)]
pub struct TcResNet8<T: Scalar> {
    config: TcResNet8Config,
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    layout: Layout,
}

/// Batch moments produced by a training-mode forward, keyed by layer.
#[derive(Debug, Clone)]
pub struct ForwardStats(Vec<(usize, BatchMoments)>);

struct Builder<'a, T: Scalar, R: Rng> {
    params: Vec<Param<T>>,
    running: Vec<RunningStats<T>>,
    rng: Option<&'a mut R>,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    /// Kaiming-uniform with ReLU gain: U(−√(6/fan_in), √(6/fan_in)).
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let tensor = match self.rng.as_deref_mut() {
            Some(rng) => Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound))),
            None => Tensor::zeros(shape),
        };
        self.params.push(Param::new(name, tensor));
        self.params.len() - 1
    }

    fn filled(&mut self, name: String, len: usize, value: f64) -> usize {
        self.params.push(Param::new(name, Tensor::full(&[len], T::from_f64_lossy(value))));
        self.params.len() - 1
    }

    fn conv_bn(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> ConvBn {
        let conv = self.kaiming(format!("{prefix}.conv.weight"), &[c_out, c_in, k], c_in * k);
        let gamma = self.filled(format!("{prefix}.bn.gamma"), c_out, 1.0);
        let beta = self.filled(format!("{prefix}.bn.beta"), c_out, 0.0);
        self.running.push(RunningStats::new(format!("{prefix}.bn"), c_out));
        ConvBn { conv, gamma, beta, stats: self.running.len() - 1, stride, padding: k / 2 }
    }
}

impl<T: Scalar> TcResNet8<T> {
    /// Builds the network with parameters drawn from the `init` stream of `seed`.
    pub fn build(config: TcResNet8Config, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, Stream::Init);
        Self::assemble(config, Some(&mut rng))
    }

    fn assemble(config: TcResNet8Config, rng: Option<&mut rng::Rng>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { params: Vec::new(), running: Vec::new(), rng };
        let ch = &config.channels;
        let stem = b.conv_bn("stem", config.input_channels, ch[0], config.kernel_first, 1);
        let mut blocks = Vec::with_capacity(3);
        for i in 0..3 {
            let (c_in, c_out) = (ch[i], ch[i + 1]);
            let p = format!("block{}", i + 1);
            let conv1 = b.conv_bn(&format!("{p}.main1"), c_in, c_out, config.kernel_block, 2);
            let conv2 = b.conv_bn(&format!("{p}.main2"), c_out, c_out, config.kernel_block, 1);
            let shortcut = b.conv_bn(&format!("{p}.shortcut"), c_in, c_out, 1, 2);
            blocks.push(Block { conv1, conv2, shortcut });
        }
        let head_weight = b.kaiming("head.weight".into(), &[config.num_classes, ch[3]], ch[3]);
        let head_bias = b.filled("head.bias".into(), config.num_classes, 0.0);
        let layout = Layout { stem, blocks: blocks.try_into().expect("three blocks"), head_weight, head_bias };
        Ok(Self { config, params: b.params, running: b.running, layout })
    }

    /// Rebuilds a model from stored arrays, checking every name and shape
    /// against the architecture implied by `config`.
    pub fn from_parts(config: TcResNet8Config, params: Vec<Param<T>>, running: Vec<RunningStats<T>>) -> Result<Self> {
        let mut model = Self::assemble(config, None)?;
        if params.len() != model.params.len() || running.len() != model.running.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays and {} running-stat sets, got {} and {}",
                model.params.len(),
                model.running.len(),
                params.len(),
                running.len()
            )));
        }
        for (want, got) in model.params.iter().zip(&params) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.tensor.shape(),
                    got.name,
                    got.tensor.shape()
                )));
            }
        }
        for (want, got) in model.running.iter().zip(&running) {
            if want.name != got.name || want.mean.len() != got.mean.len() || want.var.len() != got.var.len() {
                return Err(Error::Checkpoint(format!("running stats mismatch at {}", want.name)));
            }
        }
        model.params = params;
        model.running = running;
        Ok(model)
    }

    pub fn config(&self) -> &TcResNet8Config {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.params)
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.parameter(p.tensor.clone())).collect()
    }

    /// Registers parameters as constants (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect()
    }

    fn conv_bn(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        layer: ConvBn,
        mode: Mode,
        stats: &mut Vec<(usize, BatchMoments)>,
    ) -> Result<Var> {
        let y = tape.conv1d(x, vars[layer.conv], None, layer.stride, layer.padding)?;
        let running = &self.running[layer.stats];
        let norm = match mode {
            Mode::Train => Normalization::Batch { eps: BN_EPS },
            Mode::Eval => Normalization::Running { mean: &running.mean, var: &running.var, eps: BN_EPS },
        };
        let (out, moments) = tape.batch_norm(y, vars[layer.gamma], vars[layer.beta], norm)?;
        if let Some(m) = moments {
            stats.push((layer.stats, m));
        }
        Ok(out)
    }

    /// Pre-softmax logits for `input: n × input_channels × frames`.
    ///
    /// In [`Mode::Train`] batch norms use batch statistics; the returned
    /// [`ForwardStats`] must be passed to [`Self::apply_forward_stats`] to
    /// advance the running estimates.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], input: Var, mode: Mode) -> Result<(Var, ForwardStats)> {
        if vars.len() != self.params.len() {
            return Err(shape_err!("forward: {} bound vars for {} parameters", vars.len(), self.params.len()));
        }
        let shape = tape.value(input).shape();
        if shape.len() != 3 || shape[1] != self.config.input_channels {
            return Err(shape_err!(
                "forward: expected n x {} x frames input, got {:?}",
                self.config.input_channels,
                shape
            ));
        }
        let mut stats = Vec::new();
        let l = &self.layout;
        let stem = self.conv_bn(tape, vars, input, l.stem, mode, &mut stats)?;
        let mut h = tape.relu(stem);
        for block in &l.blocks {
            let a = self.conv_bn(tape, vars, h, block.conv1, mode, &mut stats)?;
            let a = tape.relu(a);
            let a = self.conv_bn(tape, vars, a, block.conv2, mode, &mut stats)?;
            let s = self.conv_bn(tape, vars, h, block.shortcut, mode, &mut stats)?;
            let sum = tape.add(a, s)?;
            h = tape.relu(sum);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.linear(pooled, vars[l.head_weight], vars[l.head_bias])?;
        Ok((logits, ForwardStats(stats)))
    }

    pub fn apply_forward_stats(&mut self, stats: ForwardStats) {
        for (idx, m) in stats.0 {
            self.running[idx].update(&m, BN_MOMENTUM);
        }
    }

    /// Eval-mode logits, one row per feature matrix.
    pub fn predict_logits(&self, inputs: &[&FeatureMatrix<T>]) -> Result<Vec<Vec<T>>> {
        let mut rows = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind_frozen(&mut tape);
            let x = tape.constant(features_to_input(chunk)?);
            let (logits, _) = self.forward(&mut tape, &vars, x, Mode::Eval)?;
            rows.extend(tape.value(logits).data().chunks_exact(self.config.num_classes).map(<[T]>::to_vec));
        }
        Ok(rows)
    }

    /// Temporal length after each stage for an input of `frames` frames.
    pub fn temporal_lengths(&self, frames: usize) -> Vec<usize> {
        let l = &self.layout;
        let mut lens = vec![frames];
        let step = |len: usize, c: ConvBn, k: usize| (len + 2 * c.padding - k) / c.stride + 1;
        let mut len = step(frames, l.stem, self.config.kernel_first);
        for b in &l.blocks {
            let main = step(step(len, b.conv1, self.config.kernel_block), b.conv2, self.config.kernel_block);
            let short = step(len, b.shortcut, 1);
            debug_assert_eq!(main, short);
            len = main;
            lens.push(len);
        }
        lens
    }
}

pub fn count_parameters<T: Scalar>(params: &[Param<T>]) -> usize {
    params.iter().map(|p| p.tensor.data().len()).sum()
}

/// Stacks time × coefficient matrices into a `n × coeffs × frames` tensor.
pub fn features_to_input<T: Scalar>(batch: &[&FeatureMatrix<T>]) -> Result<Tensor<T>> {
    let first = batch.first().ok_or_else(|| Error::InvalidInput("empty feature batch".into()))?;
    let (frames, coeffs) = (first.n_frames(), first.n_coeffs());
    let mut data = vec![T::zero(); batch.len() * frames * coeffs];
    for (b, f) in batch.iter().enumerate() {
        if (f.n_frames(), f.n_coeffs()) != (frames, coeffs) {
            return Err(shape_err!("feature batch mixes {}x{} with {}x{}", frames, coeffs, f.n_frames(), f.n_coeffs()));
        }
        let dst = &mut data[b * frames * coeffs..][..frames * coeffs];
        for t in 0..frames {
            for (c, v) in f.frame(t).iter().enumerate() {
                dst[c * frames + t] = *v;
            }
        }
    }
    Tensor::new(vec![batch.len(), coeffs, frames], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_features(seed: u64, n: usize, frames: usize) -> Vec<FeatureMatrix<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                FeatureMatrix::new(frames, 40, (0..frames * 40).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn parameter_count_matches_reconstruction() {
        let m = TcResNet8::<f32>::build(TcResNet8Config::default(), 0).unwrap();
        assert_eq!(m.count_parameters(), 66_062);
        assert!((61_256..=67_704).contains(&m.count_parameters()));
    }

    #[test]
    fn head_size_formula() {
        let count = |k| TcResNet8::<f32>::build(TcResNet8Config::with_classes(k), 0).unwrap().count_parameters();
        assert_eq!(count(12), 66_062 - 1470 + 48 * 12 + 12);
        assert_eq!(count(60) - count(30), 48 * 30 + 30);
    }

    #[test]
    fn empty_parameter_set_counts_zero() {
        assert_eq!(count_parameters::<f64>(&[]), 0);
    }

    #[test]
    fn build_is_deterministic_under_seed() {
        let a = TcResNet8::<f64>::build(TcResNet8Config::default(), 17).unwrap();
        let b = TcResNet8::<f64>::build(TcResNet8Config::default(), 17).unwrap();
        let c = TcResNet8::<f64>::build(TcResNet8Config::default(), 18).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn initialization_rules() {
        let m = TcResNet8::<f64>::build(TcResNet8Config::default(), 1).unwrap();
        for p in m.params() {
            if p.name.ends_with(".gamma") {
                assert!(p.tensor.data().iter().all(|&v| v == 1.0));
            } else if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0));
            } else {
                let s = p.tensor.shape();
                let fan_in: usize = s[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                assert!(p.tensor.data().iter().all(|v| v.abs() <= bound), "{}", p.name);
            }
        }
    }

    #[test]
    fn temporal_lengths_halve_through_blocks() {
        let m = TcResNet8::<f32>::build(TcResNet8Config::default(), 0).unwrap();
        assert_eq!(m.temporal_lengths(98), vec![98, 49, 25, 13]);
    }

    #[test]
    fn forward_output_shape_and_eval_batch_invariance() {
        let m = TcResNet8::<f64>::build(TcResNet8Config::with_classes(7), 3).unwrap();
        let feats = random_features(5, 5, 98);
        let refs: Vec<&FeatureMatrix<f64>> = feats.iter().collect();
        let batch = m.predict_logits(&refs).unwrap();
        assert_eq!(batch.len(), 5);
        assert!(batch.iter().all(|r| r.len() == 7));
        for (i, f) in feats.iter().enumerate() {
            let alone = m.predict_logits(&[f]).unwrap();
            assert_eq!(alone[0], batch[i], "row {i}");
        }
        let twins = m.predict_logits(&[&feats[0], &feats[0]]).unwrap();
        assert_eq!(twins[0], twins[1]);
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut m = TcResNet8::<f64>::build(TcResNet8Config::with_classes(4), 3).unwrap();
        let feats = random_features(2, 3, 20);
        let refs: Vec<&FeatureMatrix<f64>> = feats.iter().collect();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let x = tape.constant(features_to_input(&refs).unwrap());
        let (logits, stats) = m.forward(&mut tape, &vars, x, Mode::Train).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, 4]);
        assert_eq!(stats.0.len(), 10);
        let before = m.running_stats()[0].clone();
        let (idx, moments) = stats.0[0].clone();
        assert_eq!(idx, 0);
        m.apply_forward_stats(stats);
        let after = &m.running_stats()[0];
        for c in 0..before.mean.len() {
            assert!((after.mean[c] - (0.9 * before.mean[c] + 0.1 * moments.mean[c])).abs() < 1e-15);
            assert!((after.var[c] - (0.9 * before.var[c] + 0.1 * moments.var_unbiased[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn running_update_hand_values() {
        let mut rs = RunningStats::<f64>::new("x".into(), 2);
        rs.update(&BatchMoments { mean: vec![1.0, -2.0], var_unbiased: vec![3.0, 0.5] }, 0.1);
        assert_eq!(rs.mean, vec![0.1, -0.2]);
        assert!((rs.var[0] - 1.2).abs() < 1e-15 && (rs.var[1] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_input() {
        let m = TcResNet8::<f64>::build(TcResNet8Config::default(), 0).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 13, 98]));
        assert!(matches!(m.forward(&mut tape, &vars, x, Mode::Eval), Err(Error::InvalidShape(_))));
        assert!(
            TcResNet8::<f64>::build(TcResNet8Config { channels: vec![16, 24, 32], ..Default::default() }, 0).is_err()
        );
        assert!(TcResNet8::<f64>::build(TcResNet8Config::with_classes(1), 0).is_err());
    }

    #[test]
    fn from_parts_round_trips_and_validates() {
        let m = TcResNet8::<f32>::build(TcResNet8Config::with_classes(5), 9).unwrap();
        let again = TcResNet8::from_parts(m.config().clone(), m.params().to_vec(), m.running_stats().to_vec()).unwrap();
        assert_eq!(again.params(), m.params());
        let mut bad = m.params().to_vec();
        bad.pop();
        assert!(TcResNet8::from_parts(m.config().clone(), bad, m.running_stats().to_vec()).is_err());
    }
}
