//! Differentiable operations on [`Var`] and their backward rules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_chw, Tensor};

use super::kernels::{self, Chw};
use super::{Node, NodeId, Op, Var};

/// Per-channel statistics of a training-mode normalization pass.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values per channel.
    pub count: usize,
}

fn geom(op: &'static str, shape: &[usize]) -> Result<Chw> {
    let (batch, channels, height, width) = split_chw(op, shape)?;
    Ok(Chw {
        batch,
        channels,
        height,
        width,
    })
}

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars recorded on different tapes");
}

impl<'t, T: Scalar> Var<'t, T> {
    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Var<'t, T> {
        let requires = self.tape.requires(inputs);
        self.tape.push(value, op, requires)
    }

    /// 3x3 convolution, zero padding 1, stride 1. Input `[C,H,W]` or
    /// `[B,C,H,W]`; kernel `[O,C,3,3]`; bias `[O]`.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &kernel);
        same_tape(&self, &bias);
        let shape = self.shape();
        let g = geom("conv2d", &shape)?;
        let ks = kernel.shape();
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::dim("conv2d", format!("kernel must be [O,C,3,3], got {ks:?}")));
        }
        if ks[1] != g.channels {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, kernel expects {}", g.channels, ks[1]),
            ));
        }
        let out_channels = ks[0];
        if bias.shape() != [out_channels] {
            return Err(Error::dim("conv2d", format!("bias shape {:?}", bias.shape())));
        }
        let data = kernels::conv3x3_forward(
            self.value().data(),
            g,
            kernel.value().data(),
            bias.value().data(),
            out_channels,
        );
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape[n - 3] = out_channels;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(
            value,
            Op::Conv3x3 {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
                geom: g,
                out_channels,
            },
            &[self.id, kernel.id, bias.id],
        ))
    }

    /// 2x2 max pool, stride 2, odd trailing row/column dropped.
    pub fn maxpool2(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let g = geom("maxpool2", &shape)?;
        if g.height < 2 || g.width < 2 {
            return Err(Error::dim(
                "maxpool2",
                format!("spatial dims {}x{} < 2", g.height, g.width),
            ));
        }
        let (data, argmax) = kernels::maxpool2_forward(self.value().data(), g);
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape[n - 2] = g.height / 2;
        out_shape[n - 1] = g.width / 2;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(value, Op::MaxPool2 { input: self.id, argmax }, &[self.id]))
    }

    fn check_norm_params(&self, g: Chw, scale: &Var<'t, T>, shift: &Var<'t, T>) -> Result<()> {
        same_tape(self, scale);
        same_tape(self, shift);
        if scale.shape() != [g.channels] || shift.shape() != [g.channels] {
            return Err(Error::dim(
                "batchnorm",
                format!(
                    "scale {:?} / shift {:?} for {} channels",
                    scale.shape(),
                    shift.shape(),
                    g.channels
                ),
            ));
        }
        Ok(())
    }

    /// Normalization with statistics of this batch (training mode).
    pub fn batch_norm_train(
        self,
        scale: Var<'t, T>,
        shift: Var<'t, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, BatchMoments)> {
        let shape = self.shape();
        let g = geom("batchnorm", &shape)?;
        self.check_norm_params(g, &scale, &shift)?;
        let count = g.batch * g.plane();
        if count < 2 {
            return Err(Error::DegenerateBatch { op: "batchnorm", count });
        }
        let (mean, var) = kernels::channel_moments(self.value().data(), g);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = kernels::affine_normalize(
            self.value().data(),
            g,
            &mean,
            &inv_std,
            scale.value().data(),
            shift.value().data(),
        );
        let value = Tensor::new(&shape, data)?;
        let out = self.record(
            value,
            Op::Normalize {
                input: self.id,
                scale: scale.id,
                shift: shift.id,
                geom: g,
                mean: mean.clone(),
                inv_std,
                batch_stats: true,
            },
            &[self.id, scale.id, shift.id],
        );
        Ok((out, BatchMoments { mean, var, count }))
    }

    /// Normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        self,
        scale: Var<'t, T>,
        shift: Var<'t, T>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let g = geom("batchnorm", &shape)?;
        self.check_norm_params(g, &scale, &shift)?;
        if mean.len() != g.channels || var.len() != g.channels {
            return Err(Error::dim("batchnorm", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = kernels::affine_normalize(
            self.value().data(),
            g,
            mean,
            &inv_std,
            scale.value().data(),
            shift.value().data(),
        );
        let value = Tensor::new(&shape, data)?;
        Ok(self.record(
            value,
            Op::Normalize {
                input: self.id,
                scale: scale.id,
                shift: shift.id,
                geom: g,
                mean: mean.to_vec(),
                inv_std,
                batch_stats: false,
            },
            &[self.id, scale.id, shift.id],
        ))
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value();
        let data = v.data().iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        drop(v);
        self.record(value, Op::Relu { input: self.id }, &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value();
        let data = v.data().iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        drop(v);
        self.record(value, Op::Sigmoid { input: self.id }, &[self.id])
    }

    /// Affine map `x W^T + b` for `x: [B, D_in]`, `W: [D_out, D_in]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &weight);
        same_tape(&self, &bias);
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (rows, d_in, d_out) = (xs[0], xs[1], ws[0]);
        if bias.shape() != [d_out] {
            return Err(Error::dim(
                "linear",
                format!("bias {:?} for {d_out} outputs", bias.shape()),
            ));
        }
        let mut data = vec![T::zero(); rows * d_out];
        {
            let b = bias.value();
            for r in 0..rows {
                data[r * d_out..][..d_out].copy_from_slice(b.data());
            }
        }
        T::gemm(
            rows,
            d_in,
            d_out,
            self.value().data(),
            false,
            weight.value().data(),
            true,
            &mut data,
            true,
        );
        let value = Tensor::new(&[rows, d_out], data)?;
        Ok(self.record(
            value,
            Op::Linear {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                rows,
                d_in,
                d_out,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Mean over the last two axes: `[..., C, H, W] -> [..., C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let g = geom("global_avg_pool", &shape)?;
        let plane = g.plane();
        let data = self
            .value()
            .data()
            .chunks(plane)
            .map(|c| T::from_f64_lossy(crate::scalar::sum_f64(c) / plane as f64))
            .collect();
        let value = Tensor::new(&shape[..shape.len() - 2], data)?;
        Ok(self.record(value, Op::GlobalAvgPool { input: self.id, plane }, &[self.id]))
    }

    /// Spatial pyramid max pooling to `[..., C * sum(l^2)]`.
    pub fn spatial_pyramid_pool(self, levels: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let g = geom("spatial_pyramid_pool", &shape)?;
        let max_level = levels.iter().copied().max().unwrap_or(0);
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::dim("spatial_pyramid_pool", format!("invalid levels {levels:?}")));
        }
        if max_level > g.height.min(g.width) {
            return Err(Error::dim(
                "spatial_pyramid_pool",
                format!("level {max_level} exceeds {}x{} map", g.height, g.width),
            ));
        }
        let (data, argmax) = kernels::spp_forward(self.value().data(), g, levels);
        let per_item = g.channels * levels.iter().map(|l| l * l).sum::<usize>();
        let mut out_shape = shape[..shape.len() - 3].to_vec();
        out_shape.push(per_item);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(value, Op::Spp { input: self.id, argmax }, &[self.id]))
    }

    /// `out[b,c,h,w] = feature[b,c,h,w] * weights[b,c]`.
    pub fn channel_scale(self, weights: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &weights);
        let shape = self.shape();
        let g = geom("channel_scale", &shape)?;
        let ws = weights.shape();
        let wn: usize = ws.iter().product();
        if ws.last() != Some(&g.channels) || wn != g.batch * g.channels {
            return Err(Error::dim(
                "channel_scale",
                format!("weights {ws:?} for feature {shape:?}"),
            ));
        }
        let plane = g.plane();
        let data = {
            let f = self.value();
            let w = weights.value();
            f.data()
                .chunks(plane)
                .zip(w.data())
                .flat_map(|(chunk, &wc)| chunk.iter().map(move |&x| x * wc))
                .collect()
        };
        let value = Tensor::new(&shape, data)?;
        Ok(self.record(
            value,
            Op::ChannelScale {
                feature: self.id,
                weights: weights.id,
                geom: g,
            },
            &[self.id, weights.id],
        ))
    }

    /// `out[b,c,h,w] = feature[b,c,h,w] * map[b,0,h,w]`.
    pub fn broadcast_mul(self, map: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &map);
        let shape = self.shape();
        let g = geom("broadcast_mul", &shape)?;
        let ms = map.shape();
        let mg = geom("broadcast_mul", &ms)?;
        if mg.channels != 1 || mg.height != g.height || mg.width != g.width || mg.batch != g.batch {
            return Err(Error::dim("broadcast_mul", format!("map {ms:?} for feature {shape:?}")));
        }
        let plane = g.plane();
        let data = {
            let f = self.value();
            let m = map.value();
            let mut out = Vec::with_capacity(f.numel());
            for b in 0..g.batch {
                let mp = &m.data()[b * plane..][..plane];
                for c in 0..g.channels {
                    let fp = &f.data()[(b * g.channels + c) * plane..][..plane];
                    out.extend(fp.iter().zip(mp).map(|(&x, &y)| x * y));
                }
            }
            out
        };
        let value = Tensor::new(&shape, data)?;
        Ok(self.record(
            value,
            Op::BroadcastMul {
                feature: self.id,
                map: map.id,
                geom: g,
            },
            &[self.id, map.id],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; logits `[B, K]`.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::dim("softmax_cross_entropy", format!("logits {shape:?}")));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                detail: format!("target {t} out of range for {classes} classes"),
            });
        }
        let probs = kernels::softmax_rows(self.value().data(), rows, classes);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[r * classes + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / rows as f64;
        let value = Tensor::scalar(T::from_f64_lossy(loss));
        Ok(self.record(
            value,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                probs,
                targets: targets.to_vec(),
                classes,
            },
            &[self.id],
        ))
    }

    /// Gathers rows of the leading axis.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let row: usize = shape[1..].iter().product();
        if let Some(&i) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Index {
                op: "index_select",
                detail: format!("row {i} of {}", shape[0]),
            });
        }
        if indices.is_empty() {
            return Err(Error::dim("index_select", "empty index list"));
        }
        let data = {
            let v = self.value();
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                out.extend_from_slice(&v.data()[i * row..][..row]);
            }
            out
        };
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(
            value,
            Op::IndexSelect {
                input: self.id,
                indices: indices.to_vec(),
                row,
            },
            &[self.id],
        ))
    }

    /// Row `g` of the output is the mean of the input rows listed in `groups[g]`.
    pub fn mean_groups(self, groups: &[Vec<usize>]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let row: usize = shape[1..].iter().product();
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::dim("mean_groups", "every group needs at least one row"));
        }
        if groups.iter().flatten().any(|&i| i >= shape[0]) {
            return Err(Error::Index {
                op: "mean_groups",
                detail: format!("row index beyond {}", shape[0]),
            });
        }
        let data = {
            let v = self.value();
            let mut out = Vec::with_capacity(groups.len() * row);
            let mut acc = vec![0.0f64; row];
            for grp in groups {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &i in grp {
                    for (a, &x) in acc.iter_mut().zip(&v.data()[i * row..][..row]) {
                        *a += x.as_f64();
                    }
                }
                let n = grp.len() as f64;
                out.extend(acc.iter().map(|&a| T::from_f64_lossy(a / n)));
            }
            out
        };
        let mut out_shape = shape.clone();
        out_shape[0] = groups.len();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(
            value,
            Op::MeanGroups {
                input: self.id,
                groups: groups.to_vec(),
                row,
            },
            &[self.id],
        ))
    }

    /// Concatenates along axis 1 (channels for `[B, C, H, W]`).
    pub fn concat_channels(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let batch = sa[0];
        let a_inner: usize = sa[1..].iter().product();
        let b_inner: usize = sb[1..].iter().product();
        let data = {
            let (a, b) = (self.value(), other.value());
            let mut out = Vec::with_capacity(batch * (a_inner + b_inner));
            for i in 0..batch {
                out.extend_from_slice(&a.data()[i * a_inner..][..a_inner]);
                out.extend_from_slice(&b.data()[i * b_inner..][..b_inner]);
            }
            out
        };
        let mut out_shape = sa.clone();
        out_shape[1] = sa[1] + sb[1];
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.record(
            value,
            Op::ConcatInner {
                a: self.id,
                b: other.id,
                batch,
                a_inner,
                b_inner,
            },
            &[self.id, other.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshaped(shape)?;
        Ok(self.record(value, Op::Reshape { input: self.id }, &[self.id]))
    }

    // Fallible on shape mismatch, so not `std::ops::Add`.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::dim("add", format!("{sa:?} vs {sb:?}")));
        }
        let data = {
            let (a, b) = (self.value(), other.value());
            a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect()
        };
        let value = Tensor::new(&sa, data)?;
        Ok(self.record(
            value,
            Op::Add {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let value = {
            let v = self.value();
            Tensor::new(v.shape(), v.data().iter().map(|&x| x * factor).collect()).expect("same shape")
        };
        self.record(value, Op::Scale { input: self.id, factor }, &[self.id])
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = crate::scalar::sum_f64(self.value().data());
        self.record(
            Tensor::scalar(T::from_f64_lossy(s)),
            Op::Sum { input: self.id },
            &[self.id],
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.numel();
        self.sum().scale(T::from_f64_lossy(1.0 / n as f64))
    }
}

fn add_into<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: NodeId, contrib: impl FnOnce() -> Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    let c = contrib();
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(c),
    }
}

/// Pushes the gradient `g` of node `id` into its inputs.
pub(super) fn propagate<T: Scalar>(nodes: &[Node<T>], id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let needs = |i: NodeId| nodes[i].requires_grad;
    let val = |i: NodeId| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv3x3 {
            input,
            kernel,
            bias,
            geom,
            out_channels,
        } => {
            let cg = kernels::conv3x3_backward(
                val(*input),
                *geom,
                val(*kernel),
                *out_channels,
                g,
                [needs(*input), needs(*kernel), needs(*bias)],
            );
            if let Some(d) = cg.input {
                add_into(nodes, grads, *input, || d);
            }
            if let Some(d) = cg.kernel {
                add_into(nodes, grads, *kernel, || d);
            }
            if let Some(d) = cg.bias {
                add_into(nodes, grads, *bias, || d);
            }
        }
        Op::MaxPool2 { input, argmax } | Op::Spp { input, argmax } => {
            let n = nodes[*input].value.numel();
            add_into(nodes, grads, *input, || kernels::scatter_argmax(g, argmax, n));
        }
        Op::Normalize {
            input,
            scale,
            shift,
            geom,
            mean,
            inv_std,
            batch_stats,
        } => {
            let ng = kernels::normalize_backward(val(*input), *geom, mean, inv_std, val(*scale), g, *batch_stats);
            add_into(nodes, grads, *input, || ng.input);
            add_into(nodes, grads, *scale, || ng.scale);
            add_into(nodes, grads, *shift, || ng.shift);
        }
        Op::Relu { input } => {
            add_into(nodes, grads, *input, || {
                val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect()
            });
        }
        Op::Sigmoid { input } => {
            let y = nodes[id].value.data();
            add_into(nodes, grads, *input, || {
                y.iter().zip(g).map(|(&s, &d)| d * s * (T::one() - s)).collect()
            });
        }
        Op::Linear {
            input,
            weight,
            bias,
            rows,
            d_in,
            d_out,
        } => {
            let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
            add_into(nodes, grads, *input, || {
                let mut dx = vec![T::zero(); rows * d_in];
                T::gemm(rows, d_out, d_in, g, false, val(*weight), false, &mut dx, false);
                dx
            });
            add_into(nodes, grads, *weight, || {
                let mut dw = vec![T::zero(); d_out * d_in];
                T::gemm(d_out, rows, d_in, g, true, val(*input), false, &mut dw, false);
                dw
            });
            add_into(nodes, grads, *bias, || {
                (0..d_out)
                    .map(|o| T::from_f64_lossy((0..rows).map(|r| g[r * d_out + o].as_f64()).sum()))
                    .collect()
            });
        }
        Op::GlobalAvgPool { input, plane } => {
            let inv = T::from_f64_lossy(1.0 / *plane as f64);
            add_into(nodes, grads, *input, || {
                g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, *plane)).collect()
            });
        }
        Op::ChannelScale { feature, weights, geom } => {
            let plane = geom.plane();
            add_into(nodes, grads, *feature, || {
                g.chunks(plane)
                    .zip(val(*weights))
                    .flat_map(|(chunk, &w)| chunk.iter().map(move |&d| d * w))
                    .collect()
            });
            add_into(nodes, grads, *weights, || {
                g.chunks(plane)
                    .zip(val(*feature).chunks(plane))
                    .map(|(dc, fc)| T::from_f64_lossy(dc.iter().zip(fc).map(|(&d, &f)| d.as_f64() * f.as_f64()).sum()))
                    .collect()
            });
        }
        Op::BroadcastMul { feature, map, geom } => {
            let plane = geom.plane();
            let (f, m) = (val(*feature), val(*map));
            add_into(nodes, grads, *feature, || {
                let mut d = Vec::with_capacity(f.len());
                for b in 0..geom.batch {
                    let mp = &m[b * plane..][..plane];
                    for c in 0..geom.channels {
                        let gp = &g[(b * geom.channels + c) * plane..][..plane];
                        d.extend(gp.iter().zip(mp).map(|(&x, &y)| x * y));
                    }
                }
                d
            });
            add_into(nodes, grads, *map, || {
                let mut acc = vec![0.0f64; geom.batch * plane];
                for b in 0..geom.batch {
                    for c in 0..geom.channels {
                        let off = (b * geom.channels + c) * plane;
                        for p in 0..plane {
                            acc[b * plane + p] += g[off + p].as_f64() * f[off + p].as_f64();
                        }
                    }
                }
                acc.into_iter().map(T::from_f64_lossy).collect()
            });
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            targets,
            classes,
        } => {
            let upstream = g[0].as_f64();
            let rows = targets.len() as f64;
            add_into(nodes, grads, *logits, || {
                let mut d: Vec<f64> = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * classes + t] -= 1.0;
                }
                d.into_iter().map(|x| T::from_f64_lossy(x * upstream / rows)).collect()
            });
        }
        Op::IndexSelect { input, indices, row } => {
            let n = nodes[*input].value.numel();
            add_into(nodes, grads, *input, || {
                let mut d = vec![T::zero(); n];
                for (k, &i) in indices.iter().enumerate() {
                    for (a, &b) in d[i * row..][..*row].iter_mut().zip(&g[k * row..][..*row]) {
                        *a += b;
                    }
                }
                d
            });
        }
        Op::MeanGroups { input, groups, row } => {
            let n = nodes[*input].value.numel();
            add_into(nodes, grads, *input, || {
                let mut d = vec![T::zero(); n];
                for (k, grp) in groups.iter().enumerate() {
                    let inv = T::from_f64_lossy(1.0 / grp.len() as f64);
                    for &i in grp {
                        for (a, &b) in d[i * row..][..*row].iter_mut().zip(&g[k * row..][..*row]) {
                            *a += b * inv;
                        }
                    }
                }
                d
            });
        }
        Op::ConcatInner {
            a,
            b,
            batch,
            a_inner,
            b_inner,
        } => {
            let stride = a_inner + b_inner;
            add_into(nodes, grads, *a, || {
                (0..*batch)
                    .flat_map(|i| g[i * stride..][..*a_inner].iter().copied())
                    .collect()
            });
            add_into(nodes, grads, *b, || {
                (0..*batch)
                    .flat_map(|i| g[i * stride + a_inner..][..*b_inner].iter().copied())
                    .collect()
            });
        }
        Op::Reshape { input } => add_into(nodes, grads, *input, || g.to_vec()),
        Op::Add { a, b } => {
            add_into(nodes, grads, *a, || g.to_vec());
            add_into(nodes, grads, *b, || g.to_vec());
        }
        Op::Scale { input, factor } => {
            add_into(nodes, grads, *input, || g.iter().map(|&d| d * *factor).collect());
        }
        Op::Sum { input } => {
            let n = nodes[*input].value.numel();
            add_into(nodes, grads, *input, || vec![g[0]; n]);
        }
    }
}
