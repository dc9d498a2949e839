//! The matching network.
//!
//! Reference and target images go through one shared encoder. The prompt mask
//! gates the reference pyramid, two aggregators (one shared by the reference
//! and masked pyramids, one for the target) produce stride-4 maps, which are
//! pooled to tokens. Two cross-attention stages carry the prompt from the
//! reference to the target and a small convolutional head predicts region,
//! kernel and similarity channels at full resolution.

mod checkpoint;
mod config;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{EncoderDepth, MaskFusion, ModelConfig};
pub use layers::AttentionTrace;
use layers::{Aggregator, CrossAttention, Encoder, Head};

/// Number of similarity channels.
pub const SIMILARITY_DIM: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Four feature maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

/// Row-major token sequence with its grid shape.
#[derive(Debug, Clone, Copy)]
pub struct TokenEmbedding {
    pub tokens: Var,
    pub grid: (usize, usize),
}

/// Network prediction for one target image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub height: usize,
    pub width: usize,
    /// Region probability per pixel.
    pub region: Vec<f64>,
    /// Kernel probability per pixel.
    pub kernel: Vec<f64>,
    /// Channel-major similarity vectors, `SIMILARITY_DIM × H × W`.
    pub similarity: Vec<f64>,
}

impl SegOutput {
    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            region: vec![0.0; n],
            kernel: vec![0.0; n],
            similarity: vec![0.0; SIMILARITY_DIM * n],
        }
    }

    /// Splits a `[6, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self, ModelError> {
        if t.shape().len() != 3 || t.dim(0) != 2 + SIMILARITY_DIM {
            return Err(ModelError::Shape(format!("expected [6,H,W], got {:?}", t.shape())));
        }
        let (h, w) = (t.dim(1), t.dim(2));
        let n = h * w;
        let d = t.data();
        Ok(Self {
            height: h,
            width: w,
            region: d[..n].to_vec(),
            kernel: d[n..2 * n].to_vec(),
            similarity: d[2 * n..].to_vec(),
        })
    }

    /// Concatenates the channels back into `[6, H, W]` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.region.len() * (2 + SIMILARITY_DIM));
        v.extend_from_slice(&self.region);
        v.extend_from_slice(&self.kernel);
        v.extend_from_slice(&self.similarity);
        v
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Similarity vector of pixel `i`.
    pub fn similarity_at(&self, i: usize) -> [f64; SIMILARITY_DIM] {
        let n = self.num_pixels();
        std::array::from_fn(|c| self.similarity[c * n + i])
    }

    pub fn is_finite(&self) -> bool {
        self.region
            .iter()
            .chain(&self.kernel)
            .chain(&self.similarity)
            .all(|v| v.is_finite())
    }
}

/// Handles for every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub reference_pyramid: FeaturePyramid,
    pub target_pyramid: FeaturePyramid,
    pub masked_pyramid: Option<FeaturePyramid>,
    pub reference_map: Var,
    pub masked_map: Var,
    pub target_map: Var,
    pub mask_tokens: TokenEmbedding,
    pub reference_tokens: TokenEmbedding,
    pub target_tokens: TokenEmbedding,
    pub prompt_attention: AttentionTrace,
    pub target_attention: AttentionTrace,
    /// `[6, H, W]`: sigmoid region and kernel, raw similarity.
    pub output: Var,
}

/// Max-pools an `H × W` mask by `factor` in both directions.
pub fn max_pool_mask(mask: &[f64], height: usize, width: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (height / factor, width / factor);
    let mut out = vec![f64::NEG_INFINITY; ho * wo];
    for y in 0..ho * factor {
        for x in 0..wo * factor {
            let o = &mut out[(y / factor) * wo + x / factor];
            *o = o.max(mask[y * width + x]);
        }
    }
    out
}

/// Maps 8-bit RGB (row-major, interleaved) to a normalized `[3, H, W]` tensor
/// with `(v/255 - 0.5) / 0.5`.
pub fn normalize_image(rgb: &[u8], height: usize, width: usize) -> Tensor {
    let n = height * width;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = (f64::from(rgb[3 * i + c]) / 255.0 - 0.5) / 0.5;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

#[derive(Debug, Clone)]
pub struct RoiMatcher {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    reference_aggregator: Aggregator,
    target_aggregator: Aggregator,
    prompt_attention: CrossAttention,
    target_attention: CrossAttention,
    head: Head,
}

impl RoiMatcher {
    /// Randomly initialised network.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dim = config.embed_dim();
        let encoder = Encoder::new(&mut params, &mut rng, &config);
        let reference_aggregator = Aggregator::new(&mut params, &mut rng, "agg_ref", &config);
        let target_aggregator = Aggregator::new(&mut params, &mut rng, "agg_tgt", &config);
        let prompt_attention =
            CrossAttention::new(&mut params, &mut rng, "attn_prompt", dim, config.attention_heads, config.bias);
        let target_attention =
            CrossAttention::new(&mut params, &mut rng, "attn_target", dim, config.attention_heads, config.bias);
        let head = Head::new(&mut params, &mut rng, &config);
        Ok(Self {
            config,
            params,
            encoder,
            reference_aggregator,
            target_aggregator,
            prompt_attention,
            target_attention,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters of the shared encoder.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    /// Parameters of the aggregator shared by the reference and masked
    /// pyramids, and of the target aggregator.
    pub fn aggregator_params(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        (self.reference_aggregator.param_ids(), self.target_aggregator.param_ids())
    }

    fn check_image(&self, g: &Graph, image: Var) -> Result<(), ModelError> {
        let s = g.shape(image);
        let (h, w) = self.config.input_size;
        if s != [3, h, w] {
            return Err(ModelError::Shape(format!("expected image [3,{h},{w}], got {s:?}")));
        }
        Ok(())
    }

    /// Multi-level features of a normalized `[3, H, W]` image.
    pub fn encode(&self, g: &mut Graph, image: Var) -> Result<FeaturePyramid, ModelError> {
        self.check_image(g, image)?;
        Ok(FeaturePyramid { levels: self.encoder.forward(g, &self.params, image) })
    }

    /// Gates every level with the prompt mask max-pooled to that level's size.
    pub fn fuse_mask(&self, g: &mut Graph, pyramid: &FeaturePyramid, mask: &[f64]) -> Result<FeaturePyramid, ModelError> {
        let (h, w) = self.config.input_size;
        if mask.len() != h * w {
            return Err(ModelError::Shape(format!("mask has {} pixels, expected {h}x{w}", mask.len())));
        }
        let mut levels = pyramid.levels;
        for lv in &mut levels {
            let lh = g.shape(*lv)[1];
            let pooled = max_pool_mask(mask, h, w, h / lh);
            *lv = g.mul_map(*lv, pooled);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Aggregates a pyramid to one stride-4 map; `target` selects the target
    /// aggregator instead of the shared reference one.
    pub fn aggregate(&self, g: &mut Graph, pyramid: &FeaturePyramid, target: bool) -> Var {
        let agg = if target { &self.target_aggregator } else { &self.reference_aggregator };
        agg.forward(g, &self.params, &pyramid.levels)
    }

    /// Average-pools a stride-4 map to the token grid and flattens it.
    pub fn to_tokens(&self, g: &mut Graph, map: Var) -> TokenEmbedding {
        let factor = self.config.effective_token_stride() / 4;
        let pooled = g.avg_pool(map, factor);
        let grid = (g.shape(pooled)[1], g.shape(pooled)[2]);
        TokenEmbedding { tokens: g.to_tokens(pooled), grid }
    }

    /// First stage (`prompt = true`: mask tokens attend to reference tokens)
    /// or second stage (target tokens attend to the prompt-conditioned
    /// tokens).
    pub fn cross_attend(
        &self,
        g: &mut Graph,
        query: &TokenEmbedding,
        context: &TokenEmbedding,
        prompt: bool,
    ) -> Result<AttentionTrace, ModelError> {
        let (dq, dc) = (g.shape(query.tokens)[1], g.shape(context.tokens)[1]);
        if dq != dc || dq != self.config.embed_dim() {
            return Err(ModelError::Shape(format!("embedding widths {dq} and {dc} differ")));
        }
        let block = if prompt { &self.prompt_attention } else { &self.target_attention };
        Ok(block.forward(g, &self.params, query.tokens, context.tokens))
    }

    /// Head on the token grid, upsampled to the input size.
    pub fn segment(&self, g: &mut Graph, tokens: &TokenEmbedding) -> Var {
        let (gh, gw) = tokens.grid;
        let grid = g.from_tokens(tokens.tokens, gh, gw);
        let logits = self.head.forward(g, &self.params, grid);
        let (h, w) = self.config.input_size;
        let up = g.resize_bilinear(logits, h, w);
        g.sigmoid_channels(up, 0, 2)
    }

    /// Full pipeline on normalized images and a binary prompt mask, all at the
    /// configured input size.
    pub fn forward(
        &self,
        g: &mut Graph,
        reference: &Tensor,
        prompt: &[f64],
        target: &Tensor,
    ) -> Result<ForwardTrace, ModelError> {
        let ref_img = g.input(reference.clone());
        let tgt_img = g.input(target.clone());
        let reference_pyramid = self.encode(g, ref_img)?;
        let target_pyramid = self.encode(g, tgt_img)?;
        let reference_map = self.aggregate(g, &reference_pyramid, false);
        let (masked_pyramid, masked_map) = match self.config.mask_fusion {
            config::MaskFusion::Pre => {
                let masked = self.fuse_mask(g, &reference_pyramid, prompt)?;
                let map = self.aggregate(g, &masked, false);
                (Some(masked), map)
            }
            config::MaskFusion::Post => {
                let (h, w) = self.config.input_size;
                if prompt.len() != h * w {
                    return Err(ModelError::Shape("prompt size does not match input".into()));
                }
                let pooled = max_pool_mask(prompt, h, w, 4);
                (None, g.mul_map(reference_map, pooled))
            }
        };
        let target_map = self.aggregate(g, &target_pyramid, true);
        let mask_tokens = self.to_tokens(g, masked_map);
        let reference_tokens = self.to_tokens(g, reference_map);
        let target_tokens = self.to_tokens(g, target_map);
        let prompt_attention = self.cross_attend(g, &mask_tokens, &reference_tokens, true)?;
        let prompted = TokenEmbedding { tokens: prompt_attention.output, grid: mask_tokens.grid };
        let target_attention = self.cross_attend(g, &target_tokens, &prompted, false)?;
        let fused = TokenEmbedding { tokens: target_attention.output, grid: target_tokens.grid };
        let output = self.segment(g, &fused);
        Ok(ForwardTrace {
            reference_pyramid,
            target_pyramid,
            masked_pyramid,
            reference_map,
            masked_map,
            target_map,
            mask_tokens,
            reference_tokens,
            target_tokens,
            prompt_attention,
            target_attention,
            output,
        })
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, reference: &Tensor, prompt: &[f64], target: &Tensor) -> Result<SegOutput, ModelError> {
        let mut g = Graph::inference();
        let trace = self.forward(&mut g, reference, prompt, target)?;
        SegOutput::from_tensor(g.value(trace.output))
    }

    /// Multiply-accumulates of one forward pass, counted from the layer
    /// shapes without running the network.
    pub fn forward_macs(&self) -> u64 {
        let (h, w) = self.config.input_size;
        let encoder = 2 * self.encoder.macs(h, w);
        let aggregators = 2 * self.reference_aggregator.macs(h, w) + self.target_aggregator.macs(h, w);
        let (gh, gw) = self.config.token_grid();
        let n = gh * gw;
        let attention = self.prompt_attention.macs(n, n) + self.target_attention.macs(n, n);
        encoder + aggregators + attention + self.head.macs(gh, gw)
    }
}
