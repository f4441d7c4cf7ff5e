//! Reverse-mode autodiff over `ndarray` f64 tensors.
//!
//! A [`Graph`] is an append-only tape: every op computes its value eagerly
//! and records how to push gradients back to its inputs. Ids are topological
//! by construction, so [`Graph::backward`] is a single reverse sweep.
//! Gradients are only propagated into subgraphs that contain a leaf marked
//! `requires_grad`; frozen parameters bound as plain constants never get a
//! gradient buffer at all.

use crate::tensor;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayView4, Axis, IxDyn, Slice};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Clamp01(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    /// 3D convolution across (frame, height, width) of an `(N, C, H, W)`
    /// clip, treating the frame axis as depth; all dims preserved.
    Conv3dTemporal {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Group normalization applied independently per frame (moments over
    /// the channels of one group and the spatial extent, never across
    /// frames, so temporal locality stays exact).
    GroupNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    },
    Upsample2x(NodeId),
    AdaptiveAvgPool {
        input: NodeId,
    },
    ConcatChannels(NodeId, NodeId),
    /// `y[n,c,h,w] = x[n,c,h,w] + bias[n,c]` (per-sample channel bias, used
    /// for time-embedding injection).
    SampleChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    /// `y = x W^T + b` with `x (N,E)`, `W (C,E)`, `b (C)`.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Scalar mean squared error between two equal-shaped tensors.
    MseLoss(NodeId, NodeId),
    /// Weighted sum of scalar nodes.
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`]; indices are node ids.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn view4(a: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality().expect("expected 4-d tensor")
}

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected 2-d tensor")
}

fn scalar_value(a: &ArrayD<f64>) -> f64 {
    debug_assert_eq!(a.len(), 1);
    *a.iter().next().expect("scalar node")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        scalar_value(&self.nodes[id].value)
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].needs_grad)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "add shape mismatch"
        );
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = &self.nodes[a].value * factor;
        let ng = self.nodes[a].needs_grad;
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(|v| v.max(0.0));
        let ng = self.nodes[a].needs_grad;
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.nodes[a].needs_grad;
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(|v| v.clamp(0.0, 1.0));
        let ng = self.nodes[a].needs_grad;
        self.push(value, Op::Clamp01(a), ng)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let b: Array1<f64> = self.nodes[bias]
            .value
            .view()
            .into_dimensionality()
            .expect("bias 1-d")
            .to_owned();
        let value = tensor::conv2d(
            &view4(&self.nodes[input].value),
            &view4(&self.nodes[weight].value),
            Some(&b),
            stride,
            pad,
        );
        let ng = self.any_grad(&[input, weight, bias]);
        self.push(
            value.into_dyn(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn conv3d_temporal(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let volume = view4(&self.nodes[input].value)
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        let w5 = self.nodes[weight]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix5>()
            .expect("conv3d weight 5-d");
        let (_, _, kd, kh, kw) = w5.dim();
        let b: Array1<f64> = self.nodes[bias]
            .value
            .view()
            .into_dimensionality()
            .expect("bias 1-d")
            .to_owned();
        let out = tensor::conv3d(&volume.view(), &w5, Some(&b), (kd / 2, kh / 2, kw / 2));
        let value = out
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        let ng = self.any_grad(&[input, weight, bias]);
        self.push(
            value.into_dyn(),
            Op::Conv3dTemporal {
                input,
                weight,
                bias,
            },
            ng,
        )
    }

    pub fn group_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let x = view4(&self.nodes[input].value);
        let (n, c, h, w) = x.dim();
        assert_eq!(c % groups, 0, "groups must divide channels");
        let cg = c / groups;
        let g1: Array1<f64> = self.nodes[gamma]
            .value
            .view()
            .into_dimensionality()
            .expect("gamma 1-d")
            .to_owned();
        let b1: Array1<f64> = self.nodes[beta]
            .value
            .view()
            .into_dimensionality()
            .expect("beta 1-d")
            .to_owned();
        let mut out = x.to_owned();
        let m = (cg * h * w) as f64;
        for ni in 0..n {
            for gi in 0..groups {
                let slice = out.slice(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                let mean = slice.sum() / m;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let inv = 1.0 / (var + eps).sqrt();
                for ci in 0..cg {
                    let channel = gi * cg + ci;
                    let (gamma_c, beta_c) = (g1[channel], b1[channel]);
                    let mut view = out.slice_mut(ndarray::s![ni, channel, .., ..]);
                    view.mapv_inplace(|v| gamma_c * (v - mean) * inv + beta_c);
                }
            }
        }
        let ng = self.any_grad(&[input, gamma, beta]);
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                eps,
            },
            ng,
        )
    }

    pub fn upsample2x(&mut self, input: NodeId) -> NodeId {
        let value = tensor::upsample_nearest_2x(&view4(&self.nodes[input].value));
        let ng = self.nodes[input].needs_grad;
        self.push(value.into_dyn(), Op::Upsample2x(input), ng)
    }

    pub fn adaptive_avg_pool(&mut self, input: NodeId, oh: usize, ow: usize) -> NodeId {
        let value = tensor::adaptive_avg_pool2d(&view4(&self.nodes[input].value), oh, ow);
        let ng = self.nodes[input].needs_grad;
        self.push(value.into_dyn(), Op::AdaptiveAvgPool { input }, ng)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = view4(&self.nodes[a].value);
        let vb = view4(&self.nodes[b].value);
        let value = ndarray::concatenate(Axis(1), &[va, vb]).expect("concat shapes");
        let ng = self.any_grad(&[a, b]);
        self.push(value.into_dyn(), Op::ConcatChannels(a, b), ng)
    }

    pub fn sample_channel_bias(&mut self, input: NodeId, bias: NodeId) -> NodeId {
        let x = view4(&self.nodes[input].value);
        let b = view2(&self.nodes[bias].value);
        let (n, c, _, _) = x.dim();
        assert_eq!(b.dim(), (n, c), "bias must be (N, C)");
        let mut value = x.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let add = b[[ni, ci]];
                value
                    .slice_mut(ndarray::s![ni, ci, .., ..])
                    .mapv_inplace(|v| v + add);
            }
        }
        let ng = self.any_grad(&[input, bias]);
        self.push(value.into_dyn(), Op::SampleChannelBias { input, bias }, ng)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let x = view2(&self.nodes[input].value).to_owned();
        let w = view2(&self.nodes[weight].value).to_owned();
        let b: Array1<f64> = self.nodes[bias]
            .value
            .view()
            .into_dimensionality()
            .expect("bias 1-d")
            .to_owned();
        let mut y: Array2<f64> = x.dot(&w.t());
        for mut row in y.outer_iter_mut() {
            row += &b.view();
        }
        let ng = self.any_grad(&[input, weight, bias]);
        self.push(
            y.into_dyn(),
            Op::Linear {
                input,
                weight,
                bias,
            },
            ng,
        )
    }

    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "mse shape mismatch"
        );
        let n = self.nodes[a].value.len() as f64;
        let sum: f64 = self.nodes[a]
            .value
            .iter()
            .zip(self.nodes[b].value.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[]), sum / n);
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::MseLoss(a, b), ng)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let total: f64 = terms
            .iter()
            .map(|(id, w)| scalar_value(&self.nodes[*id].value) * w)
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        let ng = terms.iter().any(|(id, _)| self.nodes[*id].needs_grad);
        self.push(value, Op::WeightedSum(terms), ng)
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node on
    /// a `requires_grad` path; everything else stays `None`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), 1.0));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            // All consumers have larger ids and are already processed, so
            // this gradient is final; move it out instead of cloning.
            let Some(grad) = grads[id].take() else {
                continue;
            };
            for (input, contribution) in self.op_backward(id, &grad) {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(existing) => *existing += &contribution,
                    slot => *slot = Some(contribution),
                }
            }
        }
        Gradients { grads }
    }

    fn op_backward(&self, id: NodeId, grad: &ArrayD<f64>) -> Vec<(NodeId, ArrayD<f64>)> {
        match &self.nodes[id].op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Scale(a, factor) => vec![(*a, grad * *factor)],
            Op::Relu(a) => {
                let mask = self.nodes[*a]
                    .value
                    .mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![(*a, grad * &mask)]
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                vec![(*a, grad * &(y * &y.mapv(|v| 1.0 - v)))]
            }
            Op::Clamp01(a) => {
                let mask = self.nodes[*a]
                    .value
                    .mapv(|v| if v > 0.0 && v < 1.0 { 1.0 } else { 0.0 });
                vec![(*a, grad * &mask)]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let g4 = view4(grad);
                let (d_in, d_w, d_b) = tensor::conv2d_backward(
                    &view4(&self.nodes[*input].value),
                    &view4(&self.nodes[*weight].value),
                    &g4,
                    *stride,
                    *pad,
                );
                vec![
                    (*input, d_in.into_dyn()),
                    (*weight, d_w.into_dyn()),
                    (*bias, d_b.into_dyn()),
                ]
            }
            Op::Conv3dTemporal {
                input,
                weight,
                bias,
            } => {
                let volume = view4(&self.nodes[*input].value)
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .to_owned();
                let g_volume = view4(grad)
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .to_owned();
                let w5 = self.nodes[*weight]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix5>()
                    .expect("conv3d weight 5-d");
                let (_, _, kd, kh, kw) = w5.dim();
                let (d_vol, d_w, d_b) = tensor::conv3d_backward(
                    &volume.view(),
                    &w5,
                    &g_volume.view(),
                    (kd / 2, kh / 2, kw / 2),
                );
                let d_in = d_vol
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .to_owned();
                vec![
                    (*input, d_in.into_dyn()),
                    (*weight, d_w.into_dyn()),
                    (*bias, d_b.into_dyn()),
                ]
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let x = view4(&self.nodes[*input].value);
                let gy = view4(grad);
                let (n, c, h, w) = x.dim();
                let cg = c / groups;
                let m = (cg * h * w) as f64;
                let g1: Array1<f64> = self.nodes[*gamma]
                    .value
                    .view()
                    .into_dimensionality()
                    .expect("gamma 1-d")
                    .to_owned();

                let mut d_x = ndarray::Array4::<f64>::zeros((n, c, h, w));
                let mut d_gamma = Array1::<f64>::zeros(c);
                let mut d_beta = Array1::<f64>::zeros(c);

                for ni in 0..n {
                    for gi in 0..*groups {
                        let xs = x.slice(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                        let gs = gy.slice(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                        let mean = xs.sum() / m;
                        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                        let inv = 1.0 / (var + eps).sqrt();

                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for ci in 0..cg {
                            let gamma_c = g1[gi * cg + ci];
                            for y in 0..h {
                                for xx in 0..w {
                                    let xhat = (xs[[ci, y, xx]] - mean) * inv;
                                    let dxhat = gs[[ci, y, xx]] * gamma_c;
                                    sum_dxhat += dxhat;
                                    sum_dxhat_xhat += dxhat * xhat;
                                }
                            }
                        }
                        for ci in 0..cg {
                            let channel = gi * cg + ci;
                            let gamma_c = g1[channel];
                            for y in 0..h {
                                for xx in 0..w {
                                    let xhat = (xs[[ci, y, xx]] - mean) * inv;
                                    let dy = gs[[ci, y, xx]];
                                    let dxhat = dy * gamma_c;
                                    d_x[[ni, channel, y, xx]] =
                                        inv / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                                    d_gamma[channel] += dy * xhat;
                                    d_beta[channel] += dy;
                                }
                            }
                        }
                    }
                }
                vec![
                    (*input, d_x.into_dyn()),
                    (*gamma, d_gamma.into_dyn()),
                    (*beta, d_beta.into_dyn()),
                ]
            }
            Op::Upsample2x(a) => {
                let d = tensor::upsample_nearest_2x_backward(&view4(grad));
                vec![(*a, d.into_dyn())]
            }
            Op::AdaptiveAvgPool { input } => {
                let dim = view4(&self.nodes[*input].value).dim();
                let d = tensor::adaptive_avg_pool2d_backward(&view4(grad), dim);
                vec![(*input, d.into_dyn())]
            }
            Op::ConcatChannels(a, b) => {
                let ca = view4(&self.nodes[*a].value).dim().1;
                let g4 = view4(grad);
                let ga = g4
                    .slice_axis(Axis(1), Slice::from(..ca))
                    .to_owned()
                    .into_dyn();
                let gb = g4
                    .slice_axis(Axis(1), Slice::from(ca..))
                    .to_owned()
                    .into_dyn();
                vec![(*a, ga), (*b, gb)]
            }
            Op::SampleChannelBias { input, bias } => {
                let g4 = view4(grad);
                let (n, c, _, _) = g4.dim();
                let mut d_bias = Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        d_bias[[ni, ci]] = g4.slice(ndarray::s![ni, ci, .., ..]).sum();
                    }
                }
                vec![(*input, grad.clone()), (*bias, d_bias.into_dyn())]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let g2 = view2(grad).to_owned();
                let x = view2(&self.nodes[*input].value).to_owned();
                let w = view2(&self.nodes[*weight].value).to_owned();
                let d_x = g2.dot(&w);
                let d_w = g2.t().dot(&x);
                let d_b = g2.sum_axis(Axis(0));
                vec![
                    (*input, d_x.into_dyn()),
                    (*weight, d_w.into_dyn()),
                    (*bias, d_b.into_dyn()),
                ]
            }
            Op::MseLoss(a, b) => {
                let g = scalar_value(grad);
                let n = self.nodes[*a].value.len() as f64;
                let diff = &self.nodes[*a].value - &self.nodes[*b].value;
                let d_a = diff.mapv(|v| g * 2.0 * v / n);
                let d_b = d_a.mapv(|v| -v);
                vec![(*a, d_a), (*b, d_b)]
            }
            Op::WeightedSum(terms) => {
                let g = scalar_value(grad);
                terms
                    .iter()
                    .map(|(id, w)| (*id, ArrayD::from_elem(IxDyn(&[]), g * w)))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, normal_array};
    use ndarray::IxDyn;

    /// Central-difference check of `d loss / d leaf[target]` for every
    /// element, where `build` reconstructs the scalar loss from leaf values.
    fn finite_diff_check(
        values: &[ArrayD<f64>],
        target: usize,
        build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root);
        let analytic = grads.get(ids[target]).expect("target gradient").clone();

        let h = 1e-5;
        for k in 0..values[target].len() {
            let eval = |delta: f64| {
                let mut vs: Vec<ArrayD<f64>> = values.to_vec();
                *vs[target].iter_mut().nth(k).unwrap() += delta;
                let mut g = Graph::new();
                let ids: Vec<NodeId> = vs.iter().map(|v| g.leaf(v.clone(), true)).collect();
                let root = build(&mut g, &ids);
                g.scalar(root)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = *analytic.iter().nth(k).unwrap();
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "element {k}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn rand(shape: &[usize], label: &str) -> ArrayD<f64> {
        let mut rng = derive_rng(99, label);
        normal_array(&mut rng, shape)
    }

    #[test]
    fn conv2d_gradients() {
        let values = vec![
            rand(&[2, 3, 5, 5], "x"),
            rand(&[4, 3, 3, 3], "w") * 0.3,
            rand(&[4], "b") * 0.1,
        ];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1);
            let target = g.constant(ArrayD::zeros(g.value(y).raw_dim()));
            g.mse_loss(y, target)
        };
        for t in 0..3 {
            finite_diff_check(&values, t, &build, 1e-6);
        }
    }

    #[test]
    fn conv3d_temporal_gradients() {
        let values = vec![
            rand(&[4, 3, 4, 4], "x"),
            rand(&[3, 3, 3, 3, 3], "w") * 0.2,
            rand(&[3], "b") * 0.1,
        ];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.conv3d_temporal(ids[0], ids[1], ids[2]);
            let target = g.constant(ArrayD::zeros(g.value(y).raw_dim()));
            g.mse_loss(y, target)
        };
        for t in 0..3 {
            finite_diff_check(&values, t, &build, 1e-6);
        }
    }

    #[test]
    fn group_norm_gradients() {
        let values = vec![
            rand(&[2, 4, 3, 3], "x"),
            rand(&[4], "gamma") * 0.5 + 1.0,
            rand(&[4], "beta") * 0.2,
        ];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.group_norm(ids[0], ids[1], ids[2], 2, 1e-5);
            let target = g.constant(rand(&[2, 4, 3, 3], "lw"));
            g.mse_loss(y, target)
        };
        for t in 0..3 {
            finite_diff_check(&values, t, &build, 1e-5);
        }
    }

    #[test]
    fn activation_and_pool_gradients() {
        let values = vec![rand(&[1, 2, 6, 6], "x")];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let r = g.relu(ids[0]);
            let s = g.sigmoid(r);
            let c = g.clamp01(s);
            let u = g.upsample2x(c);
            let p = g.adaptive_avg_pool(u, 5, 3);
            let target = g.constant(ArrayD::zeros(g.value(p).raw_dim()));
            g.mse_loss(p, target)
        };
        finite_diff_check(&values, 0, &build, 1e-5);
    }

    #[test]
    fn linear_and_bias_gradients() {
        let values = vec![
            rand(&[2, 5], "x"),
            rand(&[4, 5], "w") * 0.4,
            rand(&[4], "b") * 0.1,
            rand(&[2, 4, 3, 3], "img"),
        ];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.linear(ids[0], ids[1], ids[2]);
            let img = g.sample_channel_bias(ids[3], y);
            let t1 = g.constant(ArrayD::zeros(g.value(img).raw_dim()));
            let l1 = g.mse_loss(img, t1);
            let t2 = g.constant(ArrayD::zeros(g.value(y).raw_dim()));
            let l2 = g.mse_loss(y, t2);
            g.weighted_sum(vec![(l1, 1.0), (l2, 0.5)])
        };
        for t in [0, 1, 2, 3] {
            finite_diff_check(&values, t, &build, 1e-5);
        }
    }

    #[test]
    fn concat_add_scale_gradients() {
        let values = vec![rand(&[2, 2, 3, 3], "a"), rand(&[2, 3, 3, 3], "b")];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let cat = g.concat_channels(ids[0], ids[1]);
            let doubled = g.scale(cat, 2.0);
            let sum = g.add(cat, doubled);
            let target = g.constant(ArrayD::zeros(g.value(sum).raw_dim()));
            g.mse_loss(sum, target)
        };
        finite_diff_check(&values, 0, &build, 1e-6);
        finite_diff_check(&values, 1, &build, 1e-6);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(rand(&[1, 2, 4, 4], "x"), true);
        let w_frozen = g.leaf(rand(&[2, 2, 3, 3], "w"), false);
        let b_frozen = g.leaf(ArrayD::zeros(IxDyn(&[2])), false);
        let y = g.conv2d(x, w_frozen, b_frozen, 1, 1);
        let target = g.constant(ArrayD::zeros(g.value(y).raw_dim()));
        let loss = g.mse_loss(y, target);
        let grads = g.backward(loss);
        assert!(grads.get(x).is_some(), "input gradient must flow through");
        assert!(grads.get(w_frozen).is_none(), "frozen weight has no buffer");
        assert!(grads.get(b_frozen).is_none(), "frozen bias has no buffer");
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2, 1, 2, 2]), 0.5), true);
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 4.0);
        let s = g.add(a, b);
        let target = g.constant(ArrayD::zeros(IxDyn(&[2, 1, 2, 2])));
        let loss = g.mse_loss(s, target);
        let grads = g.backward(loss);
        // loss = mean((7x)^2), so d/dx_i = 2 * 49 * x_i / n.
        let expect = 2.0 * 49.0 * 0.5 / 8.0;
        for v in grads.get(x).unwrap().iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }
}
