//! Layer graphs over the closed layer set, with explicit forward and
//! backward passes.
//!
//! A [`ModelGraph`] is a topologically ordered list of nodes. Node 0 is the
//! graph input; every other node names a [`Layer`] and the nodes it reads.
//! Parameters live outside the graph in a [`ParamSet`] so the same
//! architecture can run in `f32` for training and `f64` for gradient checks.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::ops;
use super::param::{ParamKind, ParamSet, ParamSpec};
use super::tensor::{Real, Shape5, Tensor5};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Input,
    /// 3x3x3 kernel, stride 1, same padding.
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        weight: usize,
        bias: usize,
    },
    Relu,
    /// 2x2x2 window, stride 2.
    MaxPool3d,
    /// Nearest-neighbor, factor 2.
    Upsample3d,
    ConcatChannels,
    SeBlock {
        channels: usize,
        reduction: usize,
        w1: usize,
        w2: usize,
    },
    Sigmoid,
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: Option<usize>,
    },
    /// Average pool of a graph tensor by an integer factor.
    DownsampleInput {
        factor: usize,
    },
}

/// Spatial extent of a node relative to the graph input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extent {
    /// Input dims divided by `scale`.
    Grid { scale: usize },
    /// Collapsed to 1x1x1.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
    pub extent: Extent,
}

/// Incrementally builds a [`ModelGraph`], checking channel and extent
/// algebra as each node is added.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
}

impl GraphBuilder {
    pub fn new(in_channels: usize) -> (Self, NodeId) {
        let input = Node {
            name: "input".into(),
            layer: Layer::Input,
            inputs: vec![],
            channels: in_channels,
            extent: Extent::Grid { scale: 1 },
        };
        (
            GraphBuilder {
                nodes: vec![input],
                params: vec![],
            },
            NodeId(0),
        )
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, name: String, layer: Layer, inputs: Vec<NodeId>, channels: usize, extent: Extent) -> NodeId {
        self.nodes.push(Node {
            name,
            layer,
            inputs,
            channels,
            extent,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn add_param(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize) -> Result<usize> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Shape(format!("duplicate parameter block `{name}`")));
        }
        self.params.push(ParamSpec {
            name,
            shape,
            kind,
            fan_in,
        });
        Ok(self.params.len() - 1)
    }

    fn grid_scale(&self, id: NodeId, what: &str) -> Result<usize> {
        match self.nodes[id.0].extent {
            Extent::Grid { scale } => Ok(scale),
            Extent::Pooled => Err(Error::Shape(format!("{what} needs a spatial input, `{}` is pooled", self.nodes[id.0].name))),
        }
    }

    pub fn conv3d(&mut self, name: &str, input: NodeId, out_channels: usize) -> Result<NodeId> {
        let scale = self.grid_scale(input, "conv3d")?;
        let in_channels = self.nodes[input.0].channels;
        let weight = self.add_param(
            format!("{name}.weight"),
            vec![out_channels, in_channels, 3, 3, 3],
            ParamKind::ConvKernel,
            in_channels * ops::TAPS,
        )?;
        let bias = self.add_param(format!("{name}.bias"), vec![out_channels], ParamKind::Bias, 1)?;
        let layer = Layer::Conv3d {
            in_channels,
            out_channels,
            weight,
            bias,
        };
        Ok(self.push(name.into(), layer, vec![input], out_channels, Extent::Grid { scale }))
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> NodeId {
        let n = &self.nodes[input.0];
        let (c, e) = (n.channels, n.extent);
        self.push(name.into(), Layer::Relu, vec![input], c, e)
    }

    pub fn sigmoid(&mut self, name: &str, input: NodeId) -> NodeId {
        let n = &self.nodes[input.0];
        let (c, e) = (n.channels, n.extent);
        self.push(name.into(), Layer::Sigmoid, vec![input], c, e)
    }

    pub fn maxpool(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let scale = self.grid_scale(input, "maxpool")?;
        let c = self.nodes[input.0].channels;
        Ok(self.push(name.into(), Layer::MaxPool3d, vec![input], c, Extent::Grid { scale: scale * 2 }))
    }

    pub fn upsample(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let scale = self.grid_scale(input, "upsample")?;
        if scale < 2 {
            return Err(Error::Shape(format!(
                "upsample `{name}` would exceed the input resolution"
            )));
        }
        let c = self.nodes[input.0].channels;
        Ok(self.push(name.into(), Layer::Upsample3d, vec![input], c, Extent::Grid { scale: scale / 2 }))
    }

    pub fn concat(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let extent = self.nodes[first.0].extent;
        for &i in inputs {
            if self.nodes[i.0].extent != extent {
                return Err(Error::Shape(format!(
                    "concat `{name}`: `{}` is at {:?}, `{}` at {:?}",
                    self.nodes[first.0].name, extent, self.nodes[i.0].name, self.nodes[i.0].extent
                )));
            }
        }
        let channels = inputs.iter().map(|i| self.nodes[i.0].channels).sum();
        Ok(self.push(name.into(), Layer::ConcatChannels, inputs.to_vec(), channels, extent))
    }

    pub fn se_block(&mut self, name: &str, input: NodeId, reduction: usize) -> Result<NodeId> {
        let scale = self.grid_scale(input, "SE block")?;
        let channels = self.nodes[input.0].channels;
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Shape(format!(
                "SE block `{name}`: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let w1 = self.add_param(format!("{name}.w1"), vec![hidden, channels], ParamKind::DenseWeight, channels)?;
        let w2 = self.add_param(format!("{name}.w2"), vec![channels, hidden], ParamKind::DenseWeight, hidden)?;
        let layer = Layer::SeBlock {
            channels,
            reduction,
            w1,
            w2,
        };
        Ok(self.push(name.into(), layer, vec![input], channels, Extent::Grid { scale }))
    }

    pub fn global_avg_pool(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        self.grid_scale(input, "global average pool")?;
        let c = self.nodes[input.0].channels;
        Ok(self.push(name.into(), Layer::GlobalAvgPool, vec![input], c, Extent::Pooled))
    }

    pub fn dense(&mut self, name: &str, input: NodeId, outputs: usize, with_bias: bool) -> Result<NodeId> {
        if self.nodes[input.0].extent != Extent::Pooled {
            return Err(Error::Shape(format!("dense `{name}` needs a pooled input")));
        }
        let inputs = self.nodes[input.0].channels;
        let weight = self.add_param(format!("{name}.weight"), vec![outputs, inputs], ParamKind::DenseWeight, inputs)?;
        let bias = if with_bias {
            Some(self.add_param(format!("{name}.bias"), vec![outputs], ParamKind::Bias, 1)?)
        } else {
            None
        };
        let layer = Layer::Dense {
            inputs,
            outputs,
            weight,
            bias,
        };
        Ok(self.push(name.into(), layer, vec![input], outputs, Extent::Pooled))
    }

    pub fn downsample_input(&mut self, name: &str, input: NodeId, factor: usize) -> Result<NodeId> {
        let scale = self.grid_scale(input, "downsample")?;
        if factor == 0 {
            return Err(Error::Shape("downsample factor must be positive".into()));
        }
        let c = self.nodes[input.0].channels;
        Ok(self.push(
            name.into(),
            Layer::DownsampleInput { factor },
            vec![input],
            c,
            Extent::Grid { scale: scale * factor },
        ))
    }

    pub fn finish(self, name: &str, output: NodeId) -> Result<ModelGraph> {
        Ok(ModelGraph {
            name: name.into(),
            nodes: self.nodes,
            params: self.params,
            output,
        })
    }
}

/// A validated network architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelGraph {
    name: String,
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    output: NodeId,
}

/// Per-node values kept for the backward pass.
#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    Argmax(Vec<u32>),
    Se(Box<ops::SeCache<T>>),
}

/// Everything a forward pass produced; consumed by [`ModelGraph::backward`].
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    outputs: Vec<Tensor5<T>>,
    aux: Vec<Aux<T>>,
    output: usize,
}

impl<T: Real> ForwardPass<T> {
    pub fn output(&self) -> &Tensor5<T> {
        &self.outputs[self.output]
    }

    pub fn into_output(mut self) -> Tensor5<T> {
        self.outputs.swap_remove(self.output)
    }

    /// Output of an arbitrary node, for inspection.
    pub fn node_output(&self, id: NodeId) -> &Tensor5<T> {
        &self.outputs[id.0]
    }

    /// Hash of every piecewise-linear decision taken (relu signs, maxpool
    /// winners). Two inputs with equal signatures lie on the same smooth
    /// piece of the network function.
    pub fn kink_signature(&self, graph: &ModelGraph) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            match (&node.layer, &self.aux[i]) {
                (Layer::Relu, _) => {
                    for v in self.outputs[i].data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                (_, Aux::Argmax(a)) => a.hash(&mut h),
                (_, Aux::Se(c)) => {
                    for v in c.hidden.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}

impl ModelGraph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn in_channels(&self) -> usize {
        self.nodes[0].channels
    }

    pub fn out_channels(&self) -> usize {
        self.nodes[self.output.0].channels
    }

    /// Spatial input dims must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n.extent {
                Extent::Grid { scale } => Some(scale),
                Extent::Pooled => None,
            })
            .max()
            .unwrap_or(1)
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        ParamSet::init(&self.params, seed)
    }

    /// Resolves every node shape for a concrete input before any arithmetic.
    pub fn infer_shapes(&self, input: Shape5) -> Result<Vec<Shape5>> {
        let [n, c, d, h, w] = input;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {c}",
                self.name,
                self.in_channels()
            )));
        }
        let div = self.required_divisor();
        if d == 0 || h == 0 || w == 0 || d % div != 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "{}: spatial dims {:?} must be positive multiples of {div}",
                self.name,
                [d, h, w]
            )));
        }
        Ok(self
            .nodes
            .iter()
            .map(|node| match node.extent {
                Extent::Grid { scale } => [n, node.channels, d / scale, h / scale, w / scale],
                Extent::Pooled => [n, node.channels, 1, 1, 1],
            })
            .collect())
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, input: &Tensor5<T>) -> Result<ForwardPass<T>> {
        self.infer_shapes(input.shape())?;
        params.check_against(&self.params)?;
        let mut outputs: Vec<Tensor5<T>> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let arg = |k: usize| &outputs[node.inputs[k].0];
            let (out, extra) = match &node.layer {
                Layer::Input => (input.clone(), Aux::None),
                Layer::Conv3d {
                    out_channels,
                    weight,
                    bias,
                    ..
                } => (
                    ops::conv3d_forward(arg(0), params.value(*weight), params.value(*bias), *out_channels)?,
                    Aux::None,
                ),
                Layer::Relu => (ops::relu_forward(arg(0)), Aux::None),
                Layer::Sigmoid => (ops::sigmoid_forward(arg(0)), Aux::None),
                Layer::MaxPool3d => {
                    let (y, idx) = ops::maxpool_forward(arg(0))?;
                    (y, Aux::Argmax(idx))
                }
                Layer::Upsample3d => (ops::upsample_forward(arg(0)), Aux::None),
                Layer::ConcatChannels => {
                    let parts: Vec<&Tensor5<T>> = node.inputs.iter().map(|i| &outputs[i.0]).collect();
                    (ops::concat_forward(&parts)?, Aux::None)
                }
                Layer::SeBlock { reduction, w1, w2, .. } => {
                    let (y, cache) = ops::se_forward(arg(0), params.value(*w1), params.value(*w2), *reduction)?;
                    (y, Aux::Se(Box::new(cache)))
                }
                Layer::GlobalAvgPool => (ops::global_avg_pool_forward(arg(0)), Aux::None),
                Layer::Dense {
                    outputs: width,
                    weight,
                    bias,
                    ..
                } => (
                    ops::dense_forward(arg(0), params.value(*weight), bias.map(|b| params.value(b)), *width)?,
                    Aux::None,
                ),
                Layer::DownsampleInput { factor } => (ops::avgpool_forward(arg(0), *factor)?, Aux::None),
            };
            if !out.all_finite() {
                return Err(Error::NonFinite(format!("non-finite output at node `{}`", node.name)));
            }
            outputs.push(out);
            aux.push(extra);
        }
        Ok(ForwardPass {
            outputs,
            aux,
            output: self.output.0,
        })
    }

    /// Forward pass returning only the output tensor.
    pub fn predict<T: Real>(&self, params: &ParamSet<T>, input: &Tensor5<T>) -> Result<Tensor5<T>> {
        Ok(self.forward(params, input)?.into_output())
    }

    /// Backpropagates `grad_output` through a recorded pass. Parameter
    /// gradients are added to `params`' accumulators; the gradient with
    /// respect to the graph input is returned.
    pub fn backward<T: Real>(
        &self,
        params: &mut ParamSet<T>,
        pass: &ForwardPass<T>,
        grad_output: &Tensor5<T>,
    ) -> Result<Tensor5<T>> {
        if pass.outputs.len() != self.nodes.len() {
            return Err(Error::Shape("forward pass was recorded on a different graph".into()));
        }
        if grad_output.shape() != pass.output().shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_output.shape(),
                pass.output().shape()
            )));
        }
        let mut grads: Vec<Option<Tensor5<T>>> = vec![None; self.nodes.len()];
        grads[self.output.0] = Some(grad_output.clone());

        fn deposit<T: Real>(grads: &mut [Option<Tensor5<T>>], id: NodeId, g: Tensor5<T>) {
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (1..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let x = &pass.outputs[node.inputs[0].0];
            match &node.layer {
                Layer::Input => unreachable!("input is node 0"),
                Layer::Conv3d { weight, bias, .. } => {
                    let (dx, dw, db) = ops::conv3d_backward(x, params.value(*weight), &g)?;
                    params.accumulate(*weight, &dw);
                    params.accumulate(*bias, &db);
                    deposit(&mut grads, node.inputs[0], dx);
                }
                Layer::Relu => deposit(&mut grads, node.inputs[0], ops::relu_backward(&pass.outputs[i], &g)),
                Layer::Sigmoid => deposit(&mut grads, node.inputs[0], ops::sigmoid_backward(&pass.outputs[i], &g)),
                Layer::MaxPool3d => {
                    let Aux::Argmax(idx) = &pass.aux[i] else {
                        unreachable!("maxpool records argmax")
                    };
                    deposit(&mut grads, node.inputs[0], ops::maxpool_backward(x.shape(), idx, &g));
                }
                Layer::Upsample3d => deposit(&mut grads, node.inputs[0], ops::upsample_backward(&g)?),
                Layer::ConcatChannels => {
                    let widths: Vec<usize> = node.inputs.iter().map(|id| self.nodes[id.0].channels).collect();
                    for (id, part) in node.inputs.iter().zip(ops::concat_backward(&g, &widths)) {
                        deposit(&mut grads, *id, part);
                    }
                }
                Layer::SeBlock { w1, w2, .. } => {
                    let Aux::Se(cache) = &pass.aux[i] else {
                        unreachable!("SE block records its cache")
                    };
                    let (dx, dw1, dw2) = ops::se_backward(x, cache, params.value(*w1), params.value(*w2), &g);
                    params.accumulate(*w1, &dw1);
                    params.accumulate(*w2, &dw2);
                    deposit(&mut grads, node.inputs[0], dx);
                }
                Layer::GlobalAvgPool => deposit(&mut grads, node.inputs[0], ops::global_avg_pool_backward(x.shape(), &g)),
                Layer::Dense { weight, bias, .. } => {
                    let (dx, dw, db) = ops::dense_backward(x, params.value(*weight), &g);
                    params.accumulate(*weight, &dw);
                    if let Some(b) = bias {
                        params.accumulate(*b, &db);
                    }
                    deposit(&mut grads, node.inputs[0], dx);
                }
                Layer::DownsampleInput { factor } => {
                    deposit(&mut grads, node.inputs[0], ops::avgpool_backward(&g, *factor))
                }
            }
        }
        Ok(grads[0].take().unwrap_or_else(|| Tensor5::zeros(pass.outputs[0].shape())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_graph() -> ModelGraph {
        let (mut b, input) = GraphBuilder::new(1);
        let c = b.conv3d("c", input, 2).unwrap();
        let r = b.relu("r", c);
        let p = b.maxpool("p", r).unwrap();
        let u = b.upsample("u", p).unwrap();
        let cat = b.concat("cat", &[u, input]).unwrap();
        let out = b.conv3d("head", cat, 1).unwrap();
        let s = b.sigmoid("s", out);
        b.finish("tiny", s).unwrap()
    }

    #[test]
    fn builder_tracks_channels_and_scale() {
        let g = tiny_graph();
        assert_eq!(g.required_divisor(), 2);
        assert_eq!(g.nodes()[g.find("cat").unwrap().0].channels, 3);
        let shapes = g.infer_shapes([1, 1, 4, 6, 2]).unwrap();
        assert_eq!(shapes[g.find("p").unwrap().0], [1, 2, 2, 3, 1]);
    }

    #[test]
    fn shape_errors_surface_before_arithmetic() {
        let g = tiny_graph();
        assert!(g.infer_shapes([1, 1, 3, 4, 4]).is_err());
        assert!(g.infer_shapes([1, 2, 4, 4, 4]).is_err());
        let (mut b, input) = GraphBuilder::new(1);
        let p = b.maxpool("p", input).unwrap();
        assert!(b.concat("bad", &[p, input]).is_err());
        assert!(b.upsample("up", input).is_err());
        assert!(b.se_block("se", input, 2).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let g = tiny_graph();
        let params = g.init_params::<f32>(3);
        let x = Tensor5::from_vec([1, 1, 4, 4, 4], (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let a = g.predict(&params, &x).unwrap();
        let b = g.predict(&params, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn backward_accumulates_into_params() {
        let g = tiny_graph();
        let mut params = g.init_params::<f64>(4);
        let x = Tensor5::from_vec([1, 1, 2, 2, 2], (0..8).map(|i| i as f64 / 8.0).collect()).unwrap();
        let pass = g.forward(&params, &x).unwrap();
        let ones = Tensor5::filled(pass.output().shape(), 1.0);
        g.backward(&mut params, &pass, &ones).unwrap();
        let first: Vec<f64> = params.get("head.bias").unwrap().grad.clone();
        g.backward(&mut params, &pass, &ones).unwrap();
        assert_eq!(params.get("head.bias").unwrap().grad[0], 2.0 * first[0]);
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let g = tiny_graph();
        let (mut b, input) = GraphBuilder::new(1);
        let c = b.conv3d("c", input, 3).unwrap();
        let other = b.finish("other", c).unwrap();
        let wrong = other.init_params::<f32>(0);
        let x = Tensor5::zeros([1, 1, 2, 2, 2]);
        match g.forward(&wrong, &x) {
            Err(Error::ParamMismatch { block, .. }) => assert_eq!(block, "c.weight"),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }
}
