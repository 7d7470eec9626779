//! Width-scalable segmentation architectures and the trainable model type.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, GraphBuilder, NodeId};
use super::{softmax2, Real, Tensor};
use crate::error::{Error, Result};
use crate::seeds::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchKind {
    /// U-Net style encoder-decoder with skip connections.
    EncoderDecoder,
    /// Wide residual network with a transposed-convolution head.
    WideResSeg,
}

/// Everything that determines the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Width factor `k`.
    pub width: f64,
    /// Resolution levels (encoder-decoder) or residual blocks per stage (WRN).
    pub depth: usize,
    pub in_channels: usize,
}

pub const ENCDEC_BASE_WIDTH: f64 = 8.0;
pub const WRN_STAGE_WIDTHS: [f64; 2] = [16.0, 32.0];
/// Initial scale of the last convolution in each residual branch.
const RESIDUAL_GAIN: f64 = 0.2;
const HEAD_GAIN: f64 = 0.5;

fn scaled(base: f64, k: f64) -> usize {
    ((base * k).round() as usize).max(1)
}

impl ArchSpec {
    pub fn encoder_decoder(width: f64, depth: usize, in_channels: usize) -> Self {
        Self { kind: ArchKind::EncoderDecoder, width, depth, in_channels }
    }

    pub fn wide_res_seg(width: f64, blocks_per_stage: usize, in_channels: usize) -> Self {
        Self { kind: ArchKind::WideResSeg, width, depth: blocks_per_stage, in_channels }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::Config(format!("width factor must be positive, got {}", self.width)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("model needs at least one input channel".into()));
        }
        match self.kind {
            ArchKind::EncoderDecoder if self.depth == 0 || self.depth > 6 => {
                Err(Error::Config(format!("encoder-decoder depth must be 1..=6, got {}", self.depth)))
            }
            ArchKind::WideResSeg if self.depth == 0 => Err(Error::Config("WRN needs >= 1 block per stage".into())),
            _ => Ok(()),
        }
    }

    /// Spatial size of training crops and slices must be a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        match self.kind {
            ArchKind::EncoderDecoder => 1 << (self.depth - 1),
            ArchKind::WideResSeg => 4,
        }
    }

    pub fn build_graph(&self) -> Graph {
        match self.kind {
            ArchKind::EncoderDecoder => self.build_encoder_decoder(),
            ArchKind::WideResSeg => self.build_wide_res_seg(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.build_graph().n_params()
    }

    fn build_encoder_decoder(&self) -> Graph {
        let mut b = GraphBuilder::new(self.in_channels);
        let widths: Vec<usize> =
            (0..self.depth).map(|i| scaled(ENCDEC_BASE_WIDTH * (1 << i) as f64, self.width)).collect();
        let mut x = b.input();
        let mut skips: Vec<NodeId> = Vec::new();
        for (level, &w) in widths.iter().enumerate() {
            let c = b.conv(x, w, 3, 1, 1, 1.0);
            x = b.relu(c);
            let c = b.conv(x, w, 3, 1, 1, 1.0);
            x = b.relu(c);
            if level + 1 < widths.len() {
                skips.push(x);
                x = b.max_pool2(x);
            }
        }
        for level in (0..widths.len() - 1).rev() {
            let w = widths[level];
            let up = b.conv_transpose(x, w, 2, 2, 1.0);
            let up = b.relu(up);
            let cat = b.concat(up, skips[level]);
            let c = b.conv(cat, w, 3, 1, 1, 1.0);
            x = b.relu(c);
        }
        b.conv(x, 2, 1, 1, 0, HEAD_GAIN);
        b.finish()
    }

    fn build_wide_res_seg(&self) -> Graph {
        let mut b = GraphBuilder::new(self.in_channels);
        let [w1, w2] = WRN_STAGE_WIDTHS.map(|base| scaled(base, self.width));
        let x = b.input();
        let mut x = b.conv(x, w1, 3, 2, 1, 1.0);
        for stage in 0..2 {
            if stage == 1 {
                let r = b.relu(x);
                x = b.conv(r, w2, 3, 2, 1, 1.0);
            }
            let w = if stage == 0 { w1 } else { w2 };
            for _ in 0..self.depth {
                let r = b.relu(x);
                let c = b.conv(r, w, 3, 1, 1, 1.0);
                let r = b.relu(c);
                let c = b.conv(r, w, 3, 1, 1, RESIDUAL_GAIN);
                x = b.add(x, c);
            }
        }
        let r = b.relu(x);
        b.conv_transpose(r, 2, 4, 4, HEAD_GAIN);
        b.finish()
    }
}

/// Architecture, parameters and the seed that initialized them.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub arch: ArchSpec,
    pub params: Vec<f32>,
    pub init_seed: u64,
    graph: Graph,
}

impl PartialEq for NetworkModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.init_seed == other.init_seed
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl NetworkModel {
    pub fn new(arch: ArchSpec, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let graph = arch.build_graph();
        let mut rng = seeds::rng(init_seed, tag::INIT, 0);
        let params = graph.init_params(&mut rng);
        Ok(Self { arch, params, init_seed, graph })
    }

    pub fn from_params(arch: ArchSpec, init_seed: u64, params: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        let graph = arch.build_graph();
        if graph.n_params() != params.len() {
            return Err(Error::Shape(format!(
                "architecture {:?} k={} needs {} parameters, got {}",
                arch.kind,
                arch.width,
                graph.n_params(),
                params.len()
            )));
        }
        Ok(Self { arch, params, init_seed, graph })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Raw two-class logits.
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.graph.forward(&self.params, x.clone())?.into_output())
    }

    /// Per-pixel class probabilities `(2, H, W)`; channel 1 is foreground.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let logits = self.logits(x)?;
        Ok(softmax2(&logits))
    }

    pub fn params_as<T: Real>(&self) -> Vec<T> {
        self.params.iter().map(|&p| T::from_f64(p as f64)).collect()
    }
}
