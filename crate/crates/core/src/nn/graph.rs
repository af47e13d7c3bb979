//! Static compute graph over [`Grid4`] values. Nodes are created in
//! topological order by the builder, which also infers shapes so mismatches
//! fail at construction, before any compute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv;
use super::grid::Grid4;
use super::params::{Gradients, Init, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Node {
    Input {
        slot: usize,
    },
    Conv2d {
        input: NodeId,
        weight: usize,
        bias: usize,
        stride: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: f32,
    },
    Softplus {
        input: NodeId,
    },
    Upsample2x {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Training-mode quantizer surrogate: adds U[-0.5, 0.5) noise in
    /// [`ExecMode::Train`], passes through in [`ExecMode::Infer`].
    AddNoise {
        input: NodeId,
    },
    /// Inference-mode quantizer; backward is straight-through.
    Round {
        input: NodeId,
    },
}

#[derive(Debug, Clone, Copy)]
pub enum ExecMode {
    Train { noise_seed: u64 },
    Infer,
}

pub struct GraphBuilder<'p> {
    params: &'p mut ModelParams,
    nodes: Vec<Node>,
    shapes: Vec<[usize; 4]>,
    input_count: usize,
}

impl<'p> GraphBuilder<'p> {
    pub fn new(params: &'p mut ModelParams) -> Self {
        GraphBuilder {
            params,
            nodes: Vec::new(),
            shapes: Vec::new(),
            input_count: 0,
        }
    }

    fn push(&mut self, node: Node, shape: [usize; 4]) -> NodeId {
        self.nodes.push(node);
        self.shapes.push(shape);
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> [usize; 4] {
        self.shapes[id.0]
    }

    pub fn input(&mut self, shape: [usize; 4]) -> NodeId {
        let slot = self.input_count;
        self.input_count += 1;
        self.push(Node::Input { slot }, shape)
    }

    /// 3x3 or 1x1 convolution with zero padding of half the kernel.
    /// Parameters are `<name>.w` and `<name>.b`, registered on first use.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        name: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId> {
        if kernel % 2 == 0 {
            return Err(Error::GraphConstruction(format!(
                "conv {name}: kernel {kernel} must be odd"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::GraphConstruction(format!(
                "conv {name}: stride {stride} not supported"
            )));
        }
        let [b, in_c, h, w] = self.shapes[input.0];
        let weight = self.params.register(
            &format!("{name}.w"),
            [out_channels, in_c, kernel, kernel],
            Init::FanInUniform {
                fan_in: in_c * kernel * kernel,
            },
        )?;
        let bias = self
            .params
            .register(&format!("{name}.b"), [1, out_channels, 1, 1], Init::Zero)?;
        let (oh, ow) = conv::out_spatial(h, w, kernel, stride);
        Ok(self.push(
            Node::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            [b, out_channels, oh, ow],
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f32) -> NodeId {
        let shape = self.shapes[input.0];
        self.push(Node::LeakyRelu { input, slope }, shape)
    }

    pub fn softplus(&mut self, input: NodeId) -> NodeId {
        let shape = self.shapes[input.0];
        self.push(Node::Softplus { input }, shape)
    }

    pub fn upsample2x(&mut self, input: NodeId) -> NodeId {
        let [b, c, h, w] = self.shapes[input.0];
        self.push(Node::Upsample2x { input }, [b, c, 2 * h, 2 * w])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [ba, ca, ha, wa] = self.shapes[a.0];
        let [bb, cb, hb, wb] = self.shapes[b.0];
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::GraphConstruction(format!(
                "concat of {:?} and {:?}",
                self.shapes[a.0], self.shapes[b.0]
            )));
        }
        Ok(self.push(Node::Concat { a, b }, [ba, ca + cb, ha, wa]))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<[usize; 4]> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::GraphConstruction(format!(
                "{what} of {:?} and {:?}",
                self.shapes[a.0], self.shapes[b.0]
            )));
        }
        Ok(self.shapes[a.0])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary(a, b, "add")?;
        Ok(self.push(Node::Add { a, b }, shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary(a, b, "mul")?;
        Ok(self.push(Node::Mul { a, b }, shape))
    }

    pub fn add_noise(&mut self, input: NodeId) -> NodeId {
        let shape = self.shapes[input.0];
        self.push(Node::AddNoise { input }, shape)
    }

    pub fn round(&mut self, input: NodeId) -> NodeId {
        let shape = self.shapes[input.0];
        self.push(Node::Round { input }, shape)
    }

    pub fn build(self, outputs: Vec<NodeId>) -> Graph {
        Graph {
            nodes: self.nodes,
            shapes: self.shapes,
            input_count: self.input_count,
            outputs,
        }
    }
}

/// Values recorded during a forward pass, needed by backward and for reading
/// outputs.
pub struct Tape {
    values: Vec<Grid4>,
}

impl Tape {
    pub fn value(&self, id: NodeId) -> &Grid4 {
        &self.values[id.0]
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    shapes: Vec<[usize; 4]>,
    input_count: usize,
    outputs: Vec<NodeId>,
}

impl Graph {
    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn input_count(&self) -> usize {
        self.input_count
    }

    pub fn output_shape(&self, i: usize) -> [usize; 4] {
        self.shapes[self.outputs[i].0]
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        inputs: &[&Grid4],
        mode: ExecMode,
    ) -> Result<Tape> {
        if inputs.len() != self.input_count {
            return Err(Error::GraphState(format!(
                "graph takes {} inputs, got {}",
                self.input_count,
                inputs.len()
            )));
        }
        let mut values: Vec<Grid4> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let shape = self.shapes[idx];
            let value = match node {
                Node::Input { slot } => {
                    if inputs[*slot].shape() != shape {
                        return Err(Error::GraphState(format!(
                            "input {slot} has shape {:?}, graph expects {shape:?}",
                            inputs[*slot].shape()
                        )));
                    }
                    inputs[*slot].clone()
                }
                Node::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                } => {
                    let mut out = Grid4::zeros(shape);
                    conv::forward(
                        &values[input.0],
                        params.by_index(*weight),
                        params.by_index(*bias),
                        *stride,
                        &mut out,
                    );
                    out
                }
                Node::LeakyRelu { input, slope } => {
                    let mut out = values[input.0].clone();
                    for v in out.data_mut() {
                        if *v < 0.0 {
                            *v *= slope;
                        }
                    }
                    out
                }
                Node::Softplus { input } => {
                    let mut out = values[input.0].clone();
                    for v in out.data_mut() {
                        *v = softplus(*v);
                    }
                    out
                }
                Node::Upsample2x { input } => {
                    let src = &values[input.0];
                    let [b, c, h, w] = src.shape();
                    let mut out = Grid4::zeros(shape);
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let v = src.at(bi, ci, y, x);
                                    out.set(bi, ci, 2 * y, 2 * x, v);
                                    out.set(bi, ci, 2 * y, 2 * x + 1, v);
                                    out.set(bi, ci, 2 * y + 1, 2 * x, v);
                                    out.set(bi, ci, 2 * y + 1, 2 * x + 1, v);
                                }
                            }
                        }
                    }
                    out
                }
                Node::Concat { a, b } => {
                    let (ga, gb) = (&values[a.0], &values[b.0]);
                    let [bn, _, h, w] = ga.shape();
                    let (ca, cb) = (ga.shape()[1], gb.shape()[1]);
                    let mut out = Grid4::zeros(shape);
                    let plane = h * w;
                    for bi in 0..bn {
                        let dst = out.data_mut();
                        let base = bi * (ca + cb) * plane;
                        dst[base..base + ca * plane]
                            .copy_from_slice(&ga.data()[bi * ca * plane..(bi + 1) * ca * plane]);
                        dst[base + ca * plane..base + (ca + cb) * plane]
                            .copy_from_slice(&gb.data()[bi * cb * plane..(bi + 1) * cb * plane]);
                    }
                    out
                }
                Node::Add { a, b } => {
                    let mut out = values[a.0].clone();
                    for (o, v) in out.data_mut().iter_mut().zip(values[b.0].data()) {
                        *o += v;
                    }
                    out
                }
                Node::Mul { a, b } => {
                    let mut out = values[a.0].clone();
                    for (o, v) in out.data_mut().iter_mut().zip(values[b.0].data()) {
                        *o *= v;
                    }
                    out
                }
                Node::AddNoise { input } => {
                    let mut out = values[input.0].clone();
                    if let ExecMode::Train { noise_seed } = mode {
                        let mut rng = noise_rng(noise_seed, idx);
                        for v in out.data_mut() {
                            *v += rng.gen_range(-0.5f32..0.5);
                        }
                    }
                    out
                }
                Node::Round { input } => {
                    let mut out = values[input.0].clone();
                    for v in out.data_mut() {
                        *v = v.round();
                    }
                    out
                }
            };
            debug_assert!(value.all_finite(), "non-finite values after node {idx}");
            values.push(value);
        }
        Ok(Tape { values })
    }

    /// Reverse sweep. `seeds` maps output positions to d(loss)/d(output);
    /// gradients for every parameter and graph input are returned.
    pub fn backward(
        &self,
        params: &ModelParams,
        tape: &Tape,
        seeds: &[(usize, Grid4)],
    ) -> Result<Gradients> {
        if tape.values.len() != self.nodes.len() {
            return Err(Error::GraphState(
                "backward called with a foreign tape".into(),
            ));
        }
        let mut node_grads: Vec<Grid4> = self.shapes.iter().map(|&s| Grid4::zeros(s)).collect();
        for (out_idx, seed) in seeds {
            let node = self.outputs[*out_idx];
            if seed.shape() != self.shapes[node.0] {
                return Err(Error::GraphState(format!(
                    "seed for output {out_idx} has shape {:?}, expected {:?}",
                    seed.shape(),
                    self.shapes[node.0]
                )));
            }
            for (g, s) in node_grads[node.0].data_mut().iter_mut().zip(seed.data()) {
                *g += s;
            }
        }

        let mut grads = Gradients::default();
        grads.inputs = (0..self.input_count)
            .map(|_| Grid4::zeros([1, 1, 1, 1]))
            .collect();

        for idx in (0..self.nodes.len()).rev() {
            let grad_out = std::mem::replace(&mut node_grads[idx], Grid4::zeros([1, 1, 1, 1]));
            match &self.nodes[idx] {
                Node::Input { slot } => {
                    grads.inputs[*slot] = grad_out;
                }
                Node::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                } => {
                    conv::backward_input(
                        &grad_out,
                        params.by_index(*weight),
                        *stride,
                        &mut node_grads[input.0],
                    );
                    let mut gw = Grid4::zeros(params.by_index(*weight).shape());
                    let mut gb = Grid4::zeros(params.by_index(*bias).shape());
                    conv::backward_params(&grad_out, &tape.values[input.0], *stride, &mut gw, &mut gb);
                    grads.accumulate(params.name_of(*weight), gw);
                    grads.accumulate(params.name_of(*bias), gb);
                }
                Node::LeakyRelu { input, slope } => {
                    let src = &tape.values[input.0];
                    let dst = node_grads[input.0].data_mut();
                    for (i, g) in grad_out.data().iter().enumerate() {
                        let factor = if src.data()[i] > 0.0 { 1.0 } else { *slope };
                        dst[i] += g * factor;
                    }
                }
                Node::Softplus { input } => {
                    let src = &tape.values[input.0];
                    let dst = node_grads[input.0].data_mut();
                    for (i, g) in grad_out.data().iter().enumerate() {
                        dst[i] += g * sigmoid(src.data()[i]);
                    }
                }
                Node::Upsample2x { input } => {
                    let [b, c, h, w] = self.shapes[input.0];
                    let dst = &mut node_grads[input.0];
                    for bi in 0..b {
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let sum = grad_out.at(bi, ci, 2 * y, 2 * x)
                                        + grad_out.at(bi, ci, 2 * y, 2 * x + 1)
                                        + grad_out.at(bi, ci, 2 * y + 1, 2 * x)
                                        + grad_out.at(bi, ci, 2 * y + 1, 2 * x + 1);
                                    let i = dst.idx(bi, ci, y, x);
                                    dst.data_mut()[i] += sum;
                                }
                            }
                        }
                    }
                }
                Node::Concat { a, b } => {
                    let [bn, _, h, w] = grad_out.shape();
                    let (ca, cb) = (self.shapes[a.0][1], self.shapes[b.0][1]);
                    let plane = h * w;
                    for bi in 0..bn {
                        let base = bi * (ca + cb) * plane;
                        let ga = node_grads[a.0].data_mut();
                        for (i, g) in grad_out.data()[base..base + ca * plane].iter().enumerate() {
                            ga[bi * ca * plane + i] += g;
                        }
                        let gb = node_grads[b.0].data_mut();
                        for (i, g) in grad_out.data()[base + ca * plane..base + (ca + cb) * plane]
                            .iter()
                            .enumerate()
                        {
                            gb[bi * cb * plane + i] += g;
                        }
                    }
                }
                Node::Add { a, b } => {
                    for (d, g) in node_grads[a.0].data_mut().iter_mut().zip(grad_out.data()) {
                        *d += g;
                    }
                    for (d, g) in node_grads[b.0].data_mut().iter_mut().zip(grad_out.data()) {
                        *d += g;
                    }
                }
                Node::Mul { a, b } => {
                    for (i, g) in grad_out.data().iter().enumerate() {
                        node_grads[a.0].data_mut()[i] += g * tape.values[b.0].data()[i];
                    }
                    for (i, g) in grad_out.data().iter().enumerate() {
                        node_grads[b.0].data_mut()[i] += g * tape.values[a.0].data()[i];
                    }
                }
                // Additive noise and rounding both pass gradients through
                // unchanged (straight-through for the rounding quantizer).
                Node::AddNoise { input } | Node::Round { input } => {
                    for (d, g) in node_grads[input.0].data_mut().iter_mut().zip(grad_out.data()) {
                        *d += g;
                    }
                }
            }
        }
        Ok(grads)
    }
}

impl Graph {
    /// Double-precision shadow of `forward`, returning per-node value
    /// buffers. Node semantics and noise draws match the f32 path exactly;
    /// only the arithmetic width differs. Used by the numeric gradient
    /// checker, where f32 storage noise would drown the finite differences.
    pub(crate) fn forward_f64(
        &self,
        params: &ModelParams,
        inputs: &[&Grid4],
        mode: ExecMode,
    ) -> Result<Vec<Vec<f64>>> {
        if inputs.len() != self.input_count {
            return Err(Error::GraphState("input count mismatch".into()));
        }
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        let widen = |g: &Grid4| -> Vec<f64> { g.data().iter().map(|&v| f64::from(v)).collect() };
        for (idx, node) in self.nodes.iter().enumerate() {
            let value: Vec<f64> = match node {
                Node::Input { slot } => widen(inputs[*slot]),
                Node::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                } => {
                    let [bn, in_c, in_h, in_w] = self.shapes[input.0];
                    let [_, out_c, out_h, out_w] = self.shapes[idx];
                    let w = params.by_index(*weight);
                    let [_, _, kh, kw] = w.shape();
                    let bias = params.by_index(*bias);
                    let src = &values[input.0];
                    let pad = kh / 2;
                    let mut out = vec![0.0f64; bn * out_c * out_h * out_w];
                    for b in 0..bn {
                        for co in 0..out_c {
                            for oy in 0..out_h {
                                for ox in 0..out_w {
                                    let mut acc = f64::from(bias.data()[co]);
                                    for ci in 0..in_c {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= in_h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= in_w as isize {
                                                    continue;
                                                }
                                                acc += src[((b * in_c + ci) * in_h
                                                    + iy as usize)
                                                    * in_w
                                                    + ix as usize]
                                                    * f64::from(w.at(co, ci, ky, kx));
                                            }
                                        }
                                    }
                                    out[((b * out_c + co) * out_h + oy) * out_w + ox] = acc;
                                }
                            }
                        }
                    }
                    out
                }
                Node::LeakyRelu { input, slope } => values[input.0]
                    .iter()
                    .map(|&v| if v < 0.0 { v * f64::from(*slope) } else { v })
                    .collect(),
                Node::Softplus { input } => values[input.0]
                    .iter()
                    .map(|&v| {
                        if v > 20.0 {
                            v
                        } else if v < -20.0 {
                            v.exp()
                        } else {
                            v.exp().ln_1p()
                        }
                    })
                    .collect(),
                Node::Upsample2x { input } => {
                    let [bn, c, h, w] = self.shapes[input.0];
                    let src = &values[input.0];
                    let mut out = vec![0.0f64; bn * c * h * w * 4];
                    let (oh, ow) = (2 * h, 2 * w);
                    for bc in 0..bn * c {
                        for y in 0..h {
                            for x in 0..w {
                                let v = src[(bc * h + y) * w + x];
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    out[(bc * oh + 2 * y + dy) * ow + 2 * x + dx] = v;
                                }
                            }
                        }
                    }
                    out
                }
                Node::Concat { a, b } => {
                    let [bn, ca, h, w] = self.shapes[a.0];
                    let cb = self.shapes[b.0][1];
                    let plane = h * w;
                    let mut out = vec![0.0f64; bn * (ca + cb) * plane];
                    for bi in 0..bn {
                        let base = bi * (ca + cb) * plane;
                        out[base..base + ca * plane]
                            .copy_from_slice(&values[a.0][bi * ca * plane..(bi + 1) * ca * plane]);
                        out[base + ca * plane..base + (ca + cb) * plane]
                            .copy_from_slice(&values[b.0][bi * cb * plane..(bi + 1) * cb * plane]);
                    }
                    out
                }
                Node::Add { a, b } => values[a.0]
                    .iter()
                    .zip(&values[b.0])
                    .map(|(x, y)| x + y)
                    .collect(),
                Node::Mul { a, b } => values[a.0]
                    .iter()
                    .zip(&values[b.0])
                    .map(|(x, y)| x * y)
                    .collect(),
                Node::AddNoise { input } => {
                    let mut out = values[input.0].clone();
                    if let ExecMode::Train { noise_seed } = mode {
                        let mut rng = noise_rng(noise_seed, idx);
                        for v in &mut out {
                            *v += f64::from(rng.gen_range(-0.5f32..0.5));
                        }
                    }
                    out
                }
                Node::Round { input } => values[input.0].iter().map(|v| v.round()).collect(),
            };
            values.push(value);
        }
        Ok(values)
    }

    pub(crate) fn node_index(&self, id: NodeId) -> usize {
        id.0
    }
}

fn noise_rng(noise_seed: u64, node_idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(noise_seed ^ (node_idx as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

#[inline]
pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
