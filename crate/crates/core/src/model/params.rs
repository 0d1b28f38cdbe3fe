//! Trainable parameters and normalization state of the network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchMoments, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{CombineMode, ModelConfig, EXTRACTOR_BLOCKS, HIDDEN_WIDTH};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Batch normalization parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::ones(&[channels]).with_grad(),
            shift: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    /// Exponential moving update from one batch. The running variance uses
    /// the unbiased estimate and is clamped to stay strictly positive.
    pub fn update_running(&mut self, moments: &BatchMoments) {
        let m = self.momentum;
        let n = moments.count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let rm = self.running_mean.data()[c].as_f64();
            let rv = self.running_var.data()[c].as_f64();
            let new_mean = (1.0 - m) * rm + m * moments.mean[c];
            let new_var = ((1.0 - m) * rv + m * moments.var[c] * unbias).max(f64::MIN_POSITIVE);
            self.running_mean.data_mut()[c] = T::from_f64_lossy(new_mean);
            self.running_var.data_mut()[c] = T::from_f64_lossy(new_var);
        }
    }

    pub fn running_mean_f64(&self) -> Vec<f64> {
        self.running_mean.data().iter().map(|x| x.as_f64()).collect()
    }

    pub fn running_var_f64(&self) -> Vec<f64> {
        self.running_var.data().iter().map(|x| x.as_f64()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNormState<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Pyramid pooling followed by linear layers with ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledMlp<T> {
    pub layers: Vec<LinearLayer<T>>,
}

/// Two-layer fully convolutional map generator.
#[derive(Clone, Debug, PartialEq)]
pub struct MapGenerator<T> {
    pub hidden: ConvLayer<T>,
    pub output: ConvLayer<T>,
}

/// Every parameter of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub extractor: Vec<ConvBlock<T>>,
    pub meta_weight_gen: PooledMlp<T>,
    pub spatial_attn_gen: MapGenerator<T>,
    pub classifier: PooledMlp<T>,
}

fn kaiming<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng))).with_grad()
}

fn conv<T: Scalar>(rng: &mut impl Rng, cin: usize, cout: usize) -> ConvLayer<T> {
    ConvLayer {
        kernel: kaiming(rng, &[cout, cin, 3, 3], cin * 9),
        bias: Tensor::zeros(&[cout]).with_grad(),
    }
}

fn linear<T: Scalar>(rng: &mut impl Rng, din: usize, dout: usize) -> LinearLayer<T> {
    LinearLayer {
        weight: kaiming(rng, &[dout, din], din),
        bias: Tensor::zeros(&[dout]).with_grad(),
    }
}

fn mlp<T: Scalar>(rng: &mut impl Rng, widths: &[usize]) -> PooledMlp<T> {
    PooledMlp {
        layers: widths.windows(2).map(|w| linear(rng, w[0], w[1])).collect(),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled normal weights, zero biases, identity normalization.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.feature_channels;
        let extractor = (0..EXTRACTOR_BLOCKS)
            .map(|i| ConvBlock {
                conv: conv(rng, if i == 0 { config.input_channels } else { c }, c),
                bn: BatchNormState::new(c),
            })
            .collect();
        let spp = config.spp_len();
        let meta_weight_gen = mlp(rng, &[spp, HIDDEN_WIDTH, HIDDEN_WIDTH, c]);
        let attn_in = match config.combine {
            CombineMode::Reweight => c,
            CombineMode::Concatenate => 2 * c,
        };
        let spatial_attn_gen = MapGenerator {
            hidden: conv(rng, attn_in, c),
            output: conv(rng, c, 1),
        };
        let classifier = mlp(rng, &[spp, HIDDEN_WIDTH, HIDDEN_WIDTH, 1]);
        Ok(Self {
            extractor,
            meta_weight_gen,
            spatial_attn_gen,
            classifier,
        })
    }

    /// Trainable tensors with stable dotted names, in a fixed order.
    pub fn named_trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.conv.kernel"), &b.conv.kernel));
            out.push((format!("extractor.{i}.conv.bias"), &b.conv.bias));
            out.push((format!("extractor.{i}.bn.scale"), &b.bn.scale));
            out.push((format!("extractor.{i}.bn.shift"), &b.bn.shift));
        }
        for (i, l) in self.meta_weight_gen.layers.iter().enumerate() {
            out.push((format!("meta_weight_gen.{i}.weight"), &l.weight));
            out.push((format!("meta_weight_gen.{i}.bias"), &l.bias));
        }
        let s = &self.spatial_attn_gen;
        out.push(("spatial_attn_gen.hidden.kernel".into(), &s.hidden.kernel));
        out.push(("spatial_attn_gen.hidden.bias".into(), &s.hidden.bias));
        out.push(("spatial_attn_gen.output.kernel".into(), &s.output.kernel));
        out.push(("spatial_attn_gen.output.bias".into(), &s.output.bias));
        for (i, l) in self.classifier.layers.iter().enumerate() {
            out.push((format!("classifier.{i}.weight"), &l.weight));
            out.push((format!("classifier.{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable view of the trainable tensors, same order as [`Self::named_trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.extractor {
            out.push(&mut b.conv.kernel);
            out.push(&mut b.conv.bias);
            out.push(&mut b.bn.scale);
            out.push(&mut b.bn.shift);
        }
        for l in &mut self.meta_weight_gen.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        let s = &mut self.spatial_attn_gen;
        out.push(&mut s.hidden.kernel);
        out.push(&mut s.hidden.bias);
        out.push(&mut s.output.kernel);
        out.push(&mut s.output.bias);
        for l in &mut self.classifier.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Normalization running statistics with dotted names.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("extractor.{i}.bn.running_var"), &b.bn.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.extractor {
            out.push(&mut b.bn.running_mean);
            out.push(&mut b.bn.running_var);
        }
        out
    }

    /// Trainable tensors followed by buffers, the full persisted state.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut all = self.named_trainable();
        all.extend(self.named_buffers());
        all
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut trainable: Vec<&mut Tensor<T>> = Vec::new();
        let mut buffers: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.extractor {
            let BatchNormState {
                scale,
                shift,
                running_mean,
                running_var,
                ..
            } = &mut b.bn;
            trainable.extend([&mut b.conv.kernel, &mut b.conv.bias, scale, shift]);
            buffers.extend([running_mean, running_var]);
        }
        for l in &mut self.meta_weight_gen.layers {
            trainable.extend([&mut l.weight, &mut l.bias]);
        }
        let s = &mut self.spatial_attn_gen;
        trainable.extend([
            &mut s.hidden.kernel,
            &mut s.hidden.bias,
            &mut s.output.kernel,
            &mut s.output.bias,
        ]);
        for l in &mut self.classifier.layers {
            trainable.extend([&mut l.weight, &mut l.bias]);
        }
        trainable.extend(buffers);
        trainable
    }

    pub fn parameter_count(&self) -> usize {
        self.named_trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.trainable_mut() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Records every trainable tensor as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self
            .named_trainable()
            .into_iter()
            .map(|(_, t)| tape.variable(t))
            .collect();
        BoundParams {
            vars,
            blocks: self.extractor.len(),
            mwg_layers: self.meta_weight_gen.layers.len(),
            cls_layers: self.classifier.layers.len(),
        }
    }

    /// Adds the gradients of `bound` into the parameters' grad buffers.
    pub fn accumulate_grads(
        &mut self,
        bound: &BoundParams<'_, T>,
        grads: &crate::autodiff::Gradients<T>,
    ) -> Result<()> {
        let targets = self.trainable_mut();
        if targets.len() != bound.vars.len() {
            return Err(Error::Contract("bound parameters do not match model".into()));
        }
        for (t, &v) in targets.into_iter().zip(&bound.vars) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    /// Applies running-statistics updates from a training-mode forward pass.
    pub fn apply_moments(&mut self, moments: &[BatchMoments]) -> Result<()> {
        if moments.len() != self.extractor.len() {
            return Err(Error::Contract(format!(
                "{} moment records for {} blocks",
                moments.len(),
                self.extractor.len()
            )));
        }
        for (b, m) in self.extractor.iter_mut().zip(moments) {
            b.bn.update_running(m);
        }
        Ok(())
    }

    /// Converts every tensor to another scalar type, keeping trainability.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        fn t<T: Scalar, U: Scalar>(x: &Tensor<T>) -> Tensor<U> {
            let y = x.cast::<U>();
            if x.requires_grad() {
                y.with_grad()
            } else {
                y
            }
        }
        let c = |l: &ConvLayer<T>| ConvLayer {
            kernel: t(&l.kernel),
            bias: t(&l.bias),
        };
        let m = |p: &PooledMlp<T>| PooledMlp {
            layers: p
                .layers
                .iter()
                .map(|l| LinearLayer {
                    weight: t(&l.weight),
                    bias: t(&l.bias),
                })
                .collect(),
        };
        ModelParams {
            extractor: self
                .extractor
                .iter()
                .map(|b| ConvBlock {
                    conv: c(&b.conv),
                    bn: BatchNormState {
                        scale: t(&b.bn.scale),
                        shift: t(&b.bn.shift),
                        running_mean: t(&b.bn.running_mean),
                        running_var: t(&b.bn.running_var),
                        momentum: b.bn.momentum,
                        epsilon: b.bn.epsilon,
                    },
                })
                .collect(),
            meta_weight_gen: m(&self.meta_weight_gen),
            spatial_attn_gen: MapGenerator {
                hidden: c(&self.spatial_attn_gen.hidden),
                output: c(&self.spatial_attn_gen.output),
            },
            classifier: m(&self.classifier),
        }
    }
}

/// Parameters recorded on a tape, in [`ModelParams::named_trainable`] order.
pub struct BoundParams<'t, T> {
    pub(crate) vars: Vec<Var<'t, T>>,
    blocks: usize,
    mwg_layers: usize,
    cls_layers: usize,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// (kernel, bias, bn scale, bn shift) of extractor block `i`.
    pub(crate) fn block(&self, i: usize) -> [Var<'t, T>; 4] {
        let o = 4 * i;
        [self.vars[o], self.vars[o + 1], self.vars[o + 2], self.vars[o + 3]]
    }

    pub(crate) fn meta_weight_layers(&self) -> Vec<(Var<'t, T>, Var<'t, T>)> {
        let o = 4 * self.blocks;
        (0..self.mwg_layers)
            .map(|i| (self.vars[o + 2 * i], self.vars[o + 2 * i + 1]))
            .collect()
    }

    /// (hidden kernel, hidden bias, output kernel, output bias).
    pub(crate) fn map_generator(&self) -> [Var<'t, T>; 4] {
        let o = 4 * self.blocks + 2 * self.mwg_layers;
        [self.vars[o], self.vars[o + 1], self.vars[o + 2], self.vars[o + 3]]
    }

    pub(crate) fn classifier_layers(&self) -> Vec<(Var<'t, T>, Var<'t, T>)> {
        let o = 4 * self.blocks + 2 * self.mwg_layers + 4;
        (0..self.cls_layers)
            .map(|i| (self.vars[o + 2 * i], self.vars[o + 2 * i + 1]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_shapes_match_the_architecture() {
        let p = ModelParams::<f32>::init(&ModelConfig::color84(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let shapes: Vec<(String, Vec<usize>)> = p
            .named_trainable()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let find = |name: &str| shapes.iter().find(|(n, _)| n == name).unwrap().1.clone();
        assert_eq!(find("extractor.0.conv.kernel"), vec![64, 3, 3, 3]);
        assert_eq!(find("extractor.3.conv.kernel"), vec![64, 64, 3, 3]);
        assert_eq!(find("meta_weight_gen.0.weight"), vec![200, 896]);
        assert_eq!(find("meta_weight_gen.1.weight"), vec![200, 200]);
        assert_eq!(find("meta_weight_gen.2.weight"), vec![64, 200]);
        assert_eq!(find("spatial_attn_gen.hidden.kernel"), vec![64, 64, 3, 3]);
        assert_eq!(find("spatial_attn_gen.output.kernel"), vec![1, 64, 3, 3]);
        assert_eq!(find("classifier.0.weight"), vec![200, 896]);
        assert_eq!(find("classifier.2.weight"), vec![1, 200]);
        assert_eq!(find("classifier.2.bias"), vec![1]);
    }

    #[test]
    fn concatenate_mode_doubles_attention_input() {
        let cfg = ModelConfig::grayscale28().with_combine(CombineMode::Concatenate);
        let p = ModelParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.spatial_attn_gen.hidden.kernel.shape(), &[64, 128, 3, 3]);
    }

    #[test]
    fn running_variance_stays_positive() {
        let mut bn = BatchNormState::<f32>::new(2);
        for _ in 0..500 {
            bn.update_running(&BatchMoments {
                mean: vec![0.0, 1.0],
                var: vec![0.0, 0.0],
                count: 8,
            });
        }
        assert!(bn.running_var.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn tensor_lists_are_consistent() {
        let mut p = ModelParams::<f32>::init(&ModelConfig::grayscale28(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let names = p.named_tensors().len();
        assert_eq!(p.tensors_mut().len(), names);
        assert_eq!(p.trainable_mut().len(), p.named_trainable().len());
    }
}
