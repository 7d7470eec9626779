//! Static DAG of layers with forward evaluation and reverse-mode gradients.
//!
//! Nodes are stored in topological order; node 0 is the input. Parameters
//! live in one flat vector owned by the caller and each parametric node
//! records its offsets into it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn weight_len(&self) -> usize {
        self.cin * self.cout * self.kernel * self.kernel
    }

    /// Output extent of a forward convolution over `n` input pixels.
    fn conv_out(&self, n: usize) -> Option<usize> {
        let span = n + 2 * self.pad;
        (span >= self.kernel).then(|| (span - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over `n` input pixels.
    fn transpose_out(&self, n: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    /// Weight stored `cout × cin × k × k`.
    Conv {
        geom: ConvGeom,
        weight: usize,
        bias: usize,
    },
    /// Weight stored `cin × cout × k × k`.
    ConvTranspose {
        geom: ConvGeom,
        weight: usize,
        bias: usize,
    },
    Relu,
    MaxPool2,
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
}

/// Gaussian initialization of one parameter block; biases start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
struct InitBlock {
    offset: usize,
    len: usize,
    std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    channels: Vec<usize>,
    init: Vec<InitBlock>,
    n_params: usize,
}

/// Incrementally assembles a [`Graph`], tracking channel counts.
pub struct GraphBuilder {
    graph: Graph,
}

pub type NodeId = usize;

impl GraphBuilder {
    pub fn new(in_channels: usize) -> Self {
        Self {
            graph: Graph {
                nodes: vec![Node { op: Op::Input, inputs: vec![] }],
                channels: vec![in_channels],
                init: vec![],
                n_params: 0,
            },
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.graph.channels[id]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.graph.nodes.push(Node { op, inputs });
        self.graph.channels.push(channels);
        self.graph.nodes.len() - 1
    }

    fn alloc(&mut self, len: usize, std: Option<f64>) -> usize {
        let offset = self.graph.n_params;
        self.graph.n_params += len;
        if let Some(std) = std {
            self.graph.init.push(InitBlock { offset, len, std });
        }
        offset
    }

    /// Convolution with He-normal weights scaled by `gain`.
    pub fn conv(&mut self, x: NodeId, cout: usize, kernel: usize, stride: usize, pad: usize, gain: f64) -> NodeId {
        let geom = ConvGeom { cin: self.channels(x), cout, kernel, stride, pad };
        let fan_in = (geom.cin * kernel * kernel) as f64;
        let weight = self.alloc(geom.weight_len(), Some(gain * (2.0 / fan_in).sqrt()));
        let bias = self.alloc(cout, None);
        self.push(Op::Conv { geom, weight, bias }, vec![x], cout)
    }

    pub fn conv_transpose(&mut self, x: NodeId, cout: usize, kernel: usize, stride: usize, gain: f64) -> NodeId {
        let geom = ConvGeom { cin: self.channels(x), cout, kernel, stride, pad: 0 };
        // each output pixel sees cin · (k/s)² inputs
        let fan_in = (geom.cin * kernel * kernel) as f64 / (stride * stride) as f64;
        let weight = self.alloc(geom.weight_len(), Some(gain * (2.0 / fan_in.max(1.0)).sqrt()));
        let bias = self.alloc(cout, None);
        self.push(Op::ConvTranspose { geom, weight, bias }, vec![x], cout)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(Op::Relu, vec![x], c)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.push(Op::MaxPool2, vec![x], c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.channels(a), self.channels(b), "add needs equal channel counts");
        let c = self.channels(a);
        self.push(Op::Add, vec![a, b], c)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let c = self.channels(a) + self.channels(b);
        self.push(Op::Concat, vec![a, b], c)
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}

/// Saved forward state needed by [`Graph::backward`].
pub struct Trace<T> {
    pub values: Vec<Tensor<T>>,
    argmax: Vec<Vec<u32>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("graph has an output")
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.values.pop().expect("graph has an output")
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let k = g.kernel;
    let n = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, x: &mut [T]) {
    let k = g.kernel;
    let n = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ch * h + iy as usize) * w..][..w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut y[o * plane..(o + 1) * plane] {
            *v += b;
        }
    }
}

fn accumulate_bias_grad<T: Real>(dy: &[T], gb: &mut [T], plane: usize) {
    for (o, g) in gb.iter_mut().enumerate() {
        let mut s = 0.0f64;
        for &v in &dy[o * plane..(o + 1) * plane] {
            s += v.to_f64();
        }
        *g += T::from_f64(s);
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: (usize, usize, usize)) -> &mut Tensor<T> {
    slot.get_or_insert_with(|| Tensor::zeros(shape.0, shape.1, shape.2))
}

impl Graph {
    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn in_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Gaussian initialization of all weights from `rng`; biases are zero.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        let mut params = vec![0.0f32; self.n_params];
        for block in &self.init {
            let dist = Normal::new(0.0, block.std).expect("valid std");
            for p in &mut params[block.offset..block.offset + block.len] {
                *p = dist.sample(rng) as f32;
            }
        }
        params
    }

    pub fn forward<T: Real>(&self, params: &[T], input: Tensor<T>) -> Result<Trace<T>> {
        if params.len() != self.n_params {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params, params.len())));
        }
        if input.c != self.in_channels() {
            return Err(Error::Shape(format!("input has {} channels, model expects {}", input.c, self.in_channels())));
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut argmax: Vec<Vec<u32>> = Vec::with_capacity(self.nodes.len());
        values.push(input);
        argmax.push(Vec::new());
        for (id, node) in self.nodes.iter().enumerate().skip(1) {
            let mut idx = Vec::new();
            let out = {
                let x = &values[node.inputs[0]];
                match &node.op {
                    Op::Input => unreachable!("input is node 0 only"),
                    Op::Conv { geom, weight, bias } => {
                        let bad = || Error::Shape(format!("node {id}: input {}x{} too small for conv", x.h, x.w));
                        let ho = geom.conv_out(x.h).ok_or_else(bad)?;
                        let wo = geom.conv_out(x.w).ok_or_else(bad)?;
                        let n = ho * wo;
                        let kk = geom.cin * geom.kernel * geom.kernel;
                        let mut y = Tensor::zeros(geom.cout, ho, wo);
                        let w = &params[*weight..*weight + geom.weight_len()];
                        if is_pointwise(geom) {
                            gemm(false, false, geom.cout, n, kk, w, &x.data, T::ZERO, &mut y.data);
                        } else {
                            let mut cols = vec![T::ZERO; kk * n];
                            im2col(&x.data, x.c, x.h, x.w, geom, ho, wo, &mut cols);
                            gemm(false, false, geom.cout, n, kk, w, &cols, T::ZERO, &mut y.data);
                        }
                        add_bias(&mut y.data, &params[*bias..*bias + geom.cout], n);
                        y
                    }
                    Op::ConvTranspose { geom, weight, bias } => {
                        let bad = || Error::Shape(format!("node {id}: bad transposed-conv geometry"));
                        let ho = geom.transpose_out(x.h).ok_or_else(bad)?;
                        let wo = geom.transpose_out(x.w).ok_or_else(bad)?;
                        let n_in = x.plane();
                        let rows = geom.cout * geom.kernel * geom.kernel;
                        let w = &params[*weight..*weight + geom.weight_len()];
                        let mut cols = vec![T::ZERO; rows * n_in];
                        gemm(true, false, rows, n_in, geom.cin, w, &x.data, T::ZERO, &mut cols);
                        let mut y = Tensor::zeros(geom.cout, ho, wo);
                        col2im(&cols, geom.cout, ho, wo, geom, x.h, x.w, &mut y.data);
                        add_bias(&mut y.data, &params[*bias..*bias + geom.cout], ho * wo);
                        y
                    }
                    Op::Relu => Tensor::from_vec(
                        x.c,
                        x.h,
                        x.w,
                        x.data.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect(),
                    ),
                    Op::MaxPool2 => {
                        let (ho, wo) = (x.h / 2, x.w / 2);
                        if ho == 0 || wo == 0 {
                            return Err(Error::Shape(format!("node {id}: cannot pool {}x{}", x.h, x.w)));
                        }
                        let mut y = Tensor::zeros(x.c, ho, wo);
                        idx = vec![0u32; x.c * ho * wo];
                        for c in 0..x.c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let mut best = (c * x.h + 2 * oy) * x.w + 2 * ox;
                                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                        let j = (c * x.h + 2 * oy + dy) * x.w + 2 * ox + dx;
                                        if x.data[j] > x.data[best] {
                                            best = j;
                                        }
                                    }
                                    let o = (c * ho + oy) * wo + ox;
                                    y.data[o] = x.data[best];
                                    idx[o] = best as u32;
                                }
                            }
                        }
                        y
                    }
                    Op::Add => {
                        let b = &values[node.inputs[1]];
                        if b.shape() != x.shape() {
                            return Err(Error::Shape(format!("node {id}: add {:?} vs {:?}", x.shape(), b.shape())));
                        }
                        Tensor::from_vec(x.c, x.h, x.w, x.data.iter().zip(&b.data).map(|(&p, &q)| p + q).collect())
                    }
                    Op::Concat => {
                        let b = &values[node.inputs[1]];
                        if (b.h, b.w) != (x.h, x.w) {
                            return Err(Error::Shape(format!(
                                "node {id}: concat {}x{} with {}x{}",
                                x.h, x.w, b.h, b.w
                            )));
                        }
                        let mut data = Vec::with_capacity(x.data.len() + b.data.len());
                        data.extend_from_slice(&x.data);
                        data.extend_from_slice(&b.data);
                        Tensor::from_vec(x.c + b.c, x.h, x.w, data)
                    }
                }
            };
            values.push(out);
            argmax.push(idx);
        }
        Ok(Trace { values, argmax })
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂output`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        trace: &Trace<T>,
        grad_out: Tensor<T>,
        grads: &mut [T],
    ) -> Result<()> {
        assert_eq!(grads.len(), self.n_params, "gradient buffer length");
        let n = self.nodes.len();
        if grad_out.shape() != trace.output().shape() {
            return Err(Error::Shape("output gradient does not match output".into()));
        }
        let mut g: Vec<Option<Tensor<T>>> = vec![None; n];
        g[n - 1] = Some(grad_out);
        for id in (1..n).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            let xi = node.inputs[0];
            let x = &trace.values[xi];
            match &node.op {
                Op::Input => unreachable!(),
                Op::Conv { geom, weight, bias } => {
                    let (ho, wo) = (dy.h, dy.w);
                    let plane = ho * wo;
                    let kk = geom.cin * geom.kernel * geom.kernel;
                    let wlen = geom.weight_len();
                    let w = &params[*weight..*weight + wlen];
                    let pointwise = is_pointwise(geom);
                    let cols_owned;
                    let cols: &[T] = if pointwise {
                        &x.data
                    } else {
                        let mut c = vec![T::ZERO; kk * plane];
                        im2col(&x.data, x.c, x.h, x.w, geom, ho, wo, &mut c);
                        cols_owned = c;
                        &cols_owned
                    };
                    gemm(
                        false,
                        true,
                        geom.cout,
                        kk,
                        plane,
                        &dy.data,
                        cols,
                        T::ONE,
                        &mut grads[*weight..*weight + wlen],
                    );
                    accumulate_bias_grad(&dy.data, &mut grads[*bias..*bias + geom.cout], plane);
                    check_finite(&grads[*weight..*weight + wlen], id)?;
                    check_finite(&grads[*bias..*bias + geom.cout], id)?;
                    let dx = accumulate(&mut g[xi], x.shape());
                    if pointwise {
                        gemm(true, false, kk, plane, geom.cout, w, &dy.data, T::ONE, &mut dx.data);
                    } else {
                        let mut dcols = vec![T::ZERO; kk * plane];
                        gemm(true, false, kk, plane, geom.cout, w, &dy.data, T::ZERO, &mut dcols);
                        col2im(&dcols, x.c, x.h, x.w, geom, ho, wo, &mut dx.data);
                    }
                }
                Op::ConvTranspose { geom, weight, bias } => {
                    let rows = geom.cout * geom.kernel * geom.kernel;
                    let n_in = x.plane();
                    let wlen = geom.weight_len();
                    let mut dcols = vec![T::ZERO; rows * n_in];
                    im2col(&dy.data, dy.c, dy.h, dy.w, geom, x.h, x.w, &mut dcols);
                    gemm(
                        false,
                        true,
                        geom.cin,
                        rows,
                        n_in,
                        &x.data,
                        &dcols,
                        T::ONE,
                        &mut grads[*weight..*weight + wlen],
                    );
                    accumulate_bias_grad(&dy.data, &mut grads[*bias..*bias + geom.cout], dy.plane());
                    check_finite(&grads[*weight..*weight + wlen], id)?;
                    check_finite(&grads[*bias..*bias + geom.cout], id)?;
                    let w = &params[*weight..*weight + wlen];
                    let dx = accumulate(&mut g[xi], x.shape());
                    gemm(false, false, geom.cin, n_in, rows, w, &dcols, T::ONE, &mut dx.data);
                }
                Op::Relu => {
                    let y = &trace.values[id];
                    let dx = accumulate(&mut g[xi], x.shape());
                    for ((d, &gy), &v) in dx.data.iter_mut().zip(&dy.data).zip(&y.data) {
                        if v > T::ZERO {
                            *d += gy;
                        }
                    }
                }
                Op::MaxPool2 => {
                    let dx = accumulate(&mut g[xi], x.shape());
                    for (&j, &gy) in trace.argmax[id].iter().zip(&dy.data) {
                        dx.data[j as usize] += gy;
                    }
                }
                Op::Add => {
                    let bi = node.inputs[1];
                    for target in [xi, bi] {
                        let dx = accumulate(&mut g[target], dy.shape());
                        for (d, &gy) in dx.data.iter_mut().zip(&dy.data) {
                            *d += gy;
                        }
                    }
                }
                Op::Concat => {
                    let bi = node.inputs[1];
                    let split = x.data.len();
                    let b_shape = trace.values[bi].shape();
                    let da = accumulate(&mut g[xi], x.shape());
                    for (d, &gy) in da.data.iter_mut().zip(&dy.data[..split]) {
                        *d += gy;
                    }
                    let db = accumulate(&mut g[bi], b_shape);
                    for (d, &gy) in db.data.iter_mut().zip(&dy.data[split..]) {
                        *d += gy;
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_finite<T: Real>(v: &[T], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalInstability { layer })
    }
}
