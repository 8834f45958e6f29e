//! The HA02 channel estimator: a transformer-encoder block (two-head
//! self-attention plus feed-forward, each with Add & Norm) followed by a
//! residual convolutional decoder with a fully connected upsampling stage.
//!
//! The network maps the packed LS pilot estimate `[72 x 2]` (real/imaginary
//! channels) to the packed full-slot channel estimate `[1008 x 2]`. Dense
//! layers act along axis 0 with weights shared over trailing axes, and the
//! three layer norms carry per-position scale/offset vectors of length 72;
//! this layout gives 31,824 encoder, 73,783 decoder and 105,607 total
//! parameters, 99.54% of them in fully connected layers.

mod io;

pub use io::{load_params, read_params_from, save_params, write_params_to, WeightFileError};

use num_complex::Complex64;
use rand::Rng;

use crate::estimators::PilotEstimate;
use crate::numerics::{Activation, Graph, NodeId, Real, TensorError};
use crate::ofdm::{FrameConfig, GridRole, ResourceGrid};
use crate::rng::stream;

/// Architecture constants; the defaults are the only configuration the
/// published parameter counts correspond to.
#[derive(Debug, Clone)]
pub struct Ha02Config {
    pub n_subcarriers: usize,
    pub n_pilot: usize,
    pub n_symbols: usize,
    pub n_heads: usize,
    pub n_filters: usize,
}

impl Default for Ha02Config {
    fn default() -> Self {
        Ha02Config {
            n_subcarriers: 72,
            n_pilot: 2,
            n_symbols: 14,
            n_heads: 2,
            n_filters: 2,
        }
    }
}

impl Ha02Config {
    /// Model axis length: the packed pilot count N_pilot * N_f / 2 = 72.
    pub fn model_len(&self) -> usize {
        self.n_pilot * self.n_subcarriers / 2
    }

    pub fn head_len(&self) -> usize {
        debug_assert_eq!(self.model_len() % self.n_heads, 0);
        self.model_len() / self.n_heads
    }

    /// Attention logit divisor sqrt(N_f / 2) = 6.
    pub fn attention_scale(&self) -> f64 {
        (self.n_subcarriers as f64 / 2.0).sqrt()
    }

    pub fn ffn_hidden(&self) -> usize {
        self.model_len()
    }

    pub fn output_len(&self) -> usize {
        self.n_symbols * self.n_subcarriers
    }
}

/// Which half of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Decoder,
}

/// One learnable tensor with a stable identifier.
#[derive(Debug, Clone)]
pub struct ParamTensor<F> {
    pub id: String,
    pub component: Component,
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    /// Part of a fully connected (dense) layer, weight or bias.
    pub fully_connected: bool,
}

impl<F> ParamTensor<F> {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Stable tensor order; indices into [`Ha02Params::tensors`].
pub mod idx {
    pub const W_IN: usize = 0;
    pub const B_IN: usize = 1;
    pub const W_ATTN_OUT: usize = 2;
    pub const B_ATTN_OUT: usize = 3;
    pub const NORM1_SCALE: usize = 4;
    pub const NORM1_OFFSET: usize = 5;
    pub const W_FF1: usize = 6;
    pub const B_FF1: usize = 7;
    pub const W_FF2: usize = 8;
    pub const B_FF2: usize = 9;
    pub const NORM2_SCALE: usize = 10;
    pub const NORM2_OFFSET: usize = 11;
    pub const CONV1_K: usize = 12;
    pub const CONV1_B: usize = 13;
    pub const RES_A_K: usize = 14;
    pub const RES_A_B: usize = 15;
    pub const RES_B_K: usize = 16;
    pub const RES_B_B: usize = 17;
    pub const NORM3_SCALE: usize = 18;
    pub const NORM3_OFFSET: usize = 19;
    pub const W_UP: usize = 20;
    pub const B_UP: usize = 21;
    pub const CONV_OUT_K: usize = 22;
    pub const CONV_OUT_B: usize = 23;
    pub const COUNT: usize = 24;
}

enum Init {
    GlorotDense,
    GlorotConv,
    Zero,
    One,
}

struct TensorSpec {
    id: &'static str,
    component: Component,
    shape: Vec<usize>,
    fully_connected: bool,
    init: Init,
}

fn layout(cfg: &Ha02Config) -> Vec<TensorSpec> {
    use Component::{Decoder, Encoder};
    let l = cfg.model_len();
    let hidden = cfg.ffn_hidden();
    let nf = cfg.n_filters;
    let out = cfg.output_len();
    vec![
        TensorSpec {
            id: "encoder.w_in",
            component: Encoder,
            shape: vec![3 * l, l],
            fully_connected: true,
            init: Init::GlorotDense,
        },
        TensorSpec {
            id: "encoder.b_in",
            component: Encoder,
            shape: vec![3 * l],
            fully_connected: true,
            init: Init::Zero,
        },
        TensorSpec {
            id: "encoder.w_attn_out",
            component: Encoder,
            shape: vec![l, l],
            fully_connected: true,
            init: Init::GlorotDense,
        },
        TensorSpec {
            id: "encoder.b_attn_out",
            component: Encoder,
            shape: vec![l],
            fully_connected: true,
            init: Init::Zero,
        },
        TensorSpec {
            id: "encoder.norm1.scale",
            component: Encoder,
            shape: vec![l],
            fully_connected: false,
            init: Init::One,
        },
        TensorSpec {
            id: "encoder.norm1.offset",
            component: Encoder,
            shape: vec![l],
            fully_connected: false,
            init: Init::Zero,
        },
        TensorSpec {
            id: "encoder.w_ff1",
            component: Encoder,
            shape: vec![hidden, l],
            fully_connected: true,
            init: Init::GlorotDense,
        },
        TensorSpec {
            id: "encoder.b_ff1",
            component: Encoder,
            shape: vec![hidden],
            fully_connected: true,
            init: Init::Zero,
        },
        TensorSpec {
            id: "encoder.w_ff2",
            component: Encoder,
            shape: vec![l, hidden],
            fully_connected: true,
            init: Init::GlorotDense,
        },
        TensorSpec {
            id: "encoder.b_ff2",
            component: Encoder,
            shape: vec![l],
            fully_connected: true,
            init: Init::Zero,
        },
        TensorSpec {
            id: "encoder.norm2.scale",
            component: Encoder,
            shape: vec![l],
            fully_connected: false,
            init: Init::One,
        },
        TensorSpec {
            id: "encoder.norm2.offset",
            component: Encoder,
            shape: vec![l],
            fully_connected: false,
            init: Init::Zero,
        },
        TensorSpec {
            id: "decoder.conv1.k",
            component: Decoder,
            shape: vec![2, 2, 1, nf],
            fully_connected: false,
            init: Init::GlorotConv,
        },
        TensorSpec {
            id: "decoder.conv1.b",
            component: Decoder,
            shape: vec![nf],
            fully_connected: false,
            init: Init::Zero,
        },
        TensorSpec {
            id: "decoder.res_a.k",
            component: Decoder,
            shape: vec![2, 2, nf, nf],
            fully_connected: false,
            init: Init::GlorotConv,
        },
        TensorSpec {
            id: "decoder.res_a.b",
            component: Decoder,
            shape: vec![nf],
            fully_connected: false,
            init: Init::Zero,
        },
        TensorSpec {
            id: "decoder.res_b.k",
            component: Decoder,
            shape: vec![2, 2, nf, nf],
            fully_connected: false,
            init: Init::GlorotConv,
        },
        TensorSpec {
            id: "decoder.res_b.b",
            component: Decoder,
            shape: vec![nf],
            fully_connected: false,
            init: Init::Zero,
        },
        TensorSpec {
            id: "decoder.norm3.scale",
            component: Decoder,
            shape: vec![l],
            fully_connected: false,
            init: Init::One,
        },
        TensorSpec {
            id: "decoder.norm3.offset",
            component: Decoder,
            shape: vec![l],
            fully_connected: false,
            init: Init::Zero,
        },
        TensorSpec {
            id: "decoder.w_up",
            component: Decoder,
            shape: vec![out, l],
            fully_connected: true,
            init: Init::GlorotDense,
        },
        TensorSpec {
            id: "decoder.b_up",
            component: Decoder,
            shape: vec![out],
            fully_connected: true,
            init: Init::Zero,
        },
        TensorSpec {
            id: "decoder.conv_out.k",
            component: Decoder,
            shape: vec![2, 2, nf, 1],
            fully_connected: false,
            init: Init::GlorotConv,
        },
        TensorSpec {
            id: "decoder.conv_out.b",
            component: Decoder,
            shape: vec![1],
            fully_connected: false,
            init: Init::Zero,
        },
    ]
}

/// Filter for [`Ha02Params::count`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountFilter {
    All,
    Encoder,
    Decoder,
    FullyConnected,
}

/// All learnable parameters of the encoder and decoder.
#[derive(Debug, Clone)]
pub struct Ha02Params<F: Real> {
    cfg: Ha02Config,
    tensors: Vec<ParamTensor<F>>,
}

impl<F: Real> Ha02Params<F> {
    /// Glorot-uniform weights, zero biases/offsets, unit norm scales,
    /// deterministic per seed.
    pub fn init(cfg: &Ha02Config, seed: u64) -> Self {
        let mut rng = stream(seed, 0);
        let tensors = layout(cfg)
            .into_iter()
            .map(|spec| {
                let numel: usize = spec.shape.iter().product();
                let values: Vec<F> = match spec.init {
                    Init::Zero => vec![F::zero(); numel],
                    Init::One => vec![F::one(); numel],
                    Init::GlorotDense => {
                        let (n, m) = (spec.shape[0], spec.shape[1]);
                        let limit = (6.0 / (n + m) as f64).sqrt();
                        (0..numel)
                            .map(|_| F::from_f64c(rng.gen_range(-limit..limit)))
                            .collect()
                    }
                    Init::GlorotConv => {
                        let fan_in = 4 * spec.shape[2];
                        let fan_out = 4 * spec.shape[3];
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..numel)
                            .map(|_| F::from_f64c(rng.gen_range(-limit..limit)))
                            .collect()
                    }
                };
                ParamTensor {
                    id: spec.id.to_string(),
                    component: spec.component,
                    shape: spec.shape,
                    values,
                    fully_connected: spec.fully_connected,
                }
            })
            .collect();
        Ha02Params {
            cfg: cfg.clone(),
            tensors,
        }
    }

    pub fn config(&self) -> &Ha02Config {
        &self.cfg
    }

    pub fn tensors(&self) -> &[ParamTensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<F>] {
        &mut self.tensors
    }

    /// Element count of all tensors passing the filter.
    pub fn count(&self, filter: CountFilter) -> usize {
        self.tensors
            .iter()
            .filter(|t| match filter {
                CountFilter::All => true,
                CountFilter::Encoder => t.component == Component::Encoder,
                CountFilter::Decoder => t.component == Component::Decoder,
                CountFilter::FullyConnected => t.fully_connected,
            })
            .map(ParamTensor::numel)
            .sum()
    }

    /// Convert values to another precision (f32 training vs f64 checks).
    pub fn convert<G: Real>(&self) -> Ha02Params<G> {
        Ha02Params {
            cfg: self.cfg.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    id: t.id.clone(),
                    component: t.component,
                    shape: t.shape.clone(),
                    values: t.values.iter().map(|v| G::from_f64c(v.to_f64c())).collect(),
                    fully_connected: t.fully_connected,
                })
                .collect(),
        }
    }

    /// Insert every tensor as a learnable graph leaf, in stable order.
    pub fn bind(&self, g: &mut Graph<F>) -> BoundParams {
        BoundParams {
            ids: self
                .tensors
                .iter()
                .map(|t| g.param(&t.shape, t.values.clone()))
                .collect(),
        }
    }
}

/// Node ids of the bound parameters, indexed by [`idx`] constants.
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Stack the two pilot blocks into a real `[72 x 2]` tensor: rows 0..36 are
/// pilot symbol 1, rows 36..72 pilot symbol 13; column 0 holds real parts,
/// column 1 imaginary parts.
pub fn pack_input<F: Real>(p: &PilotEstimate) -> Vec<F> {
    let mut out = Vec::with_capacity(p.values().len() * 2);
    for v in p.values() {
        out.push(F::from_f64c(v.re));
        out.push(F::from_f64c(v.im));
    }
    out
}

/// Inverse of [`pack_input`].
pub fn unpack_input<F: Real>(packed: &[F], per_symbol: usize) -> PilotEstimate {
    let values = packed
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0].to_f64c(), c[1].to_f64c()))
        .collect();
    PilotEstimate::new(values, per_symbol)
}

/// Pack a resource grid into the decoder output layout `[N_s N_f x 2]`:
/// row r = symbol * N_f + subcarrier, columns real/imaginary.
pub fn pack_grid<F: Real>(grid: &ResourceGrid) -> Vec<F> {
    let mut out = Vec::with_capacity(grid.data().len() * 2);
    for v in grid.data() {
        out.push(F::from_f64c(v.re));
        out.push(F::from_f64c(v.im));
    }
    out
}

/// Interpret a `[N_s N_f x 2]` output as the complex 72 x 14 estimate.
pub fn unflatten_output<F: Real>(values: &[F], cfg: &FrameConfig) -> ResourceGrid {
    assert_eq!(values.len(), 2 * cfg.n_subcarriers * cfg.n_symbols);
    let mut grid = ResourceGrid::zeros(GridRole::Estimate, cfg);
    for sym in 0..cfg.n_symbols {
        for sc in 0..cfg.n_subcarriers {
            let r = sym * cfg.n_subcarriers + sc;
            grid.set(
                sc,
                sym,
                Complex64::new(values[2 * r].to_f64c(), values[2 * r + 1].to_f64c()),
            );
        }
    }
    grid
}

/// Intermediate nodes exposed for inspection in tests.
pub struct ForwardTrace {
    /// Softmax attention matrix per head.
    pub attention: Vec<NodeId>,
    /// Pre-norm input of the first encoder Add & Norm.
    pub encoder_skip_sum: NodeId,
    /// Input of the decoder residual block.
    pub res_block_input: NodeId,
    /// Pre-norm output of the decoder residual block (input + block output).
    pub res_block_sum: NodeId,
}

/// Transformer encoder block: input projection to Q/K/V, two-head scaled
/// dot-product attention (no mask), output projection, Add & Norm with the
/// skip from the block input, then FFN (dense, GeLU, dense) with a second
/// Add & Norm.
pub fn encoder_forward<F: Real>(
    g: &mut Graph<F>,
    b: &BoundParams,
    x: NodeId,
    cfg: &Ha02Config,
) -> Result<NodeId, TensorError> {
    Ok(encoder_forward_traced(g, b, x, cfg)?.0)
}

fn encoder_forward_traced<F: Real>(
    g: &mut Graph<F>,
    b: &BoundParams,
    x: NodeId,
    cfg: &Ha02Config,
) -> Result<(NodeId, Vec<NodeId>, NodeId), TensorError> {
    let l = cfg.model_len();
    let hl = cfg.head_len();
    let z = g.dense_axis0(x, b.id(idx::W_IN), b.id(idx::B_IN))?;
    let q = g.slice_rows(z, 0, l);
    let k = g.slice_rows(z, l, l);
    let v = g.slice_rows(z, 2 * l, l);
    let inv_scale = F::from_f64c(1.0 / cfg.attention_scale());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut attention = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_rows(q, h * hl, hl);
        let kh = g.slice_rows(k, h * hl, hl);
        let vh = g.slice_rows(v, h * hl, hl);
        let kht = g.transpose(kh)?;
        let scores = g.matmul(qh, kht)?;
        let scaled = g.scale(scores, inv_scale);
        let attn = g.softmax_rows(scaled)?;
        attention.push(attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let concat = g.concat_rows(&heads)?;
    let attn_out = g.dense_axis0(concat, b.id(idx::W_ATTN_OUT), b.id(idx::B_ATTN_OUT))?;
    let sum1 = g.add(attn_out, x)?;
    let n1 = g.layer_norm(sum1, b.id(idx::NORM1_SCALE), b.id(idx::NORM1_OFFSET))?;
    let ff1 = g.dense_axis0(n1, b.id(idx::W_FF1), b.id(idx::B_FF1))?;
    let act = g.activation(ff1, Activation::Gelu);
    let ff2 = g.dense_axis0(act, b.id(idx::W_FF2), b.id(idx::B_FF2))?;
    let sum2 = g.add(ff2, n1)?;
    let n2 = g.layer_norm(sum2, b.id(idx::NORM2_SCALE), b.id(idx::NORM2_OFFSET))?;
    Ok((n2, attention, sum1))
}

/// Residual convolutional decoder: entry convolution, one residual block
/// (conv, ReLU, conv, skip), Add & Norm, fully connected upsampling along
/// axis 0, and a single-filter output convolution.
pub fn decoder_forward<F: Real>(
    g: &mut Graph<F>,
    b: &BoundParams,
    e: NodeId,
    cfg: &Ha02Config,
) -> Result<NodeId, TensorError> {
    Ok(decoder_forward_traced(g, b, e, cfg)?.0)
}

fn decoder_forward_traced<F: Real>(
    g: &mut Graph<F>,
    b: &BoundParams,
    e: NodeId,
    cfg: &Ha02Config,
) -> Result<(NodeId, NodeId, NodeId), TensorError> {
    let l = cfg.model_len();
    let x3 = g.reshape(e, &[l, 2, 1])?;
    let c1 = g.conv2d_same(x3, b.id(idx::CONV1_K), b.id(idx::CONV1_B))?;
    let ra = g.conv2d_same(c1, b.id(idx::RES_A_K), b.id(idx::RES_A_B))?;
    let act = g.activation(ra, Activation::Relu);
    let rb = g.conv2d_same(act, b.id(idx::RES_B_K), b.id(idx::RES_B_B))?;
    let sum = g.add(rb, c1)?;
    let n3 = g.layer_norm(sum, b.id(idx::NORM3_SCALE), b.id(idx::NORM3_OFFSET))?;
    let up = g.dense_axis0(n3, b.id(idx::W_UP), b.id(idx::B_UP))?;
    let out = g.conv2d_same(up, b.id(idx::CONV_OUT_K), b.id(idx::CONV_OUT_B))?;
    let flat = g.reshape(out, &[cfg.output_len(), 2])?;
    Ok((flat, c1, sum))
}

/// Full forward pass from a packed `[72 x 2]` input node to the packed
/// `[1008 x 2]` output node.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    b: &BoundParams,
    x: NodeId,
    cfg: &Ha02Config,
) -> Result<NodeId, TensorError> {
    let e = encoder_forward(g, b, x, cfg)?;
    decoder_forward(g, b, e, cfg)
}

/// Forward pass with intermediate nodes for structural tests.
pub fn forward_traced<F: Real>(
    g: &mut Graph<F>,
    b: &BoundParams,
    x: NodeId,
    cfg: &Ha02Config,
) -> Result<(NodeId, ForwardTrace), TensorError> {
    let (e, attention, encoder_skip_sum) = encoder_forward_traced(g, b, x, cfg)?;
    let (out, res_block_input, res_block_sum) = decoder_forward_traced(g, b, e, cfg)?;
    Ok((
        out,
        ForwardTrace {
            attention,
            encoder_skip_sum,
            res_block_input,
            res_block_sum,
        },
    ))
}

/// Run inference on one pilot estimate and return the complex channel grid.
pub fn infer<F: Real>(
    params: &Ha02Params<F>,
    p: &PilotEstimate,
    frame: &FrameConfig,
) -> Result<ResourceGrid, TensorError> {
    let cfg = params.config().clone();
    let mut g: Graph<F> = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(&[cfg.model_len(), 2], pack_input(p));
    let out = forward(&mut g, &bound, x, &cfg)?;
    Ok(unflatten_output(g.values(out), frame))
}

#[cfg(test)]
mod tests;
