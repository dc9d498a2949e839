use rand::Rng;

use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

use super::config::ModelConfig;

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        gain: f64,
        bias: bool,
    ) -> Self {
        let std = gain * (2.0 / (in_ch * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::randn(vec![out_ch, in_ch, k, k], std, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
        Self { w, b, stride, pad: k / 2, in_ch, out_ch, k }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Multiply-accumulates for an input of `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> (u64, usize, usize) {
        let ho = (h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.k) / self.stride + 1;
        ((self.out_ch * self.in_ch * self.k * self.k * ho * wo) as u64, ho, wo)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        bias: bool,
    ) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::randn(vec![in_dim, out_dim], std, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.linear(x, w, b)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let gamma = g.param(p, self.gamma);
        let beta = g.param(p, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two 3×3 convolutions with an identity shortcut.
#[derive(Debug, Clone)]
pub(crate) struct ResidualBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, ch: usize, bias: bool) -> Self {
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1.0, bias),
            // small residual branch at init keeps activations bounded without
            // normalization layers
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 0.2, bias),
        }
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Var {
        let y = self.conv1.forward(g, p, x);
        let y = g.relu(y);
        let y = self.conv2.forward(g, p, y);
        let y = g.add(x, y);
        g.relu(y)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w).0 + self.conv2.macs(h, w).0
    }
}

/// Residual convolutional encoder with outputs at strides 4, 8, 16, 32.
#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    stem: Conv,
    downs: Vec<Conv>,
    stages: Vec<Vec<ResidualBlock>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channels;
        let stem_ch = (c / 2).max(1);
        let stem = Conv::new(store, rng, "encoder.stem", 3, stem_ch, 3, 2, 1.0, cfg.bias);
        let mut downs = Vec::new();
        let mut stages = Vec::new();
        let mut in_ch = stem_ch;
        for (i, &n) in cfg.encoder_depth.blocks().iter().enumerate() {
            let out = cfg.level_channels(i);
            downs.push(Conv::new(store, rng, &format!("encoder.down{i}"), in_ch, out, 3, 2, 1.0, cfg.bias));
            stages.push(
                (0..n)
                    .map(|j| ResidualBlock::new(store, rng, &format!("encoder.stage{i}.block{j}"), out, cfg.bias))
                    .collect(),
            );
            in_ch = out;
        }
        Self { stem, downs, stages }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, image: Var) -> [Var; 4] {
        let x = self.stem.forward(g, p, image);
        let mut x = g.relu(x);
        let mut levels = Vec::with_capacity(4);
        for (down, blocks) in self.downs.iter().zip(&self.stages) {
            x = down.forward(g, p, x);
            x = g.relu(x);
            for b in blocks {
                x = b.forward(g, p, x);
            }
            levels.push(x);
        }
        [levels[0], levels[1], levels[2], levels[3]]
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut total, mut h, mut w) = self.stem.macs(h, w);
        for (down, blocks) in self.downs.iter().zip(&self.stages) {
            let (m, ho, wo) = down.macs(h, w);
            total += m;
            h = ho;
            w = wo;
            total += blocks.iter().map(|b| b.macs(h, w)).sum::<u64>();
        }
        total
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.w];
        ids.extend(self.stem.b);
        for d in &self.downs {
            ids.push(d.w);
            ids.extend(d.b);
        }
        for s in &self.stages {
            for b in s {
                for c in [&b.conv1, &b.conv2] {
                    ids.push(c.w);
                    ids.extend(c.b);
                }
            }
        }
        ids
    }
}

/// Pyramid aggregation into one stride-4 map with `4C` channels.
///
/// The concatenation variant reduces every level to `C` channels, smooths it
/// and concatenates the upsampled results. The classic variant keeps `4C`
/// lateral channels with a top-down summation before smoothing.
#[derive(Debug, Clone)]
pub(crate) struct Aggregator {
    laterals: Vec<Conv>,
    smooths: Vec<Conv>,
    top_down: bool,
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channels;
        let top_down = !cfg.use_fpnc;
        let inner = if top_down { 4 * c } else { c };
        let laterals = (0..4)
            .map(|i| Conv::new(store, rng, &format!("{name}.lateral{i}"), cfg.level_channels(i), inner, 1, 1, 1.0, cfg.bias))
            .collect();
        let smooths = (0..4)
            .map(|i| Conv::new(store, rng, &format!("{name}.smooth{i}"), inner, c, 3, 1, 1.0, cfg.bias))
            .collect();
        Self { laterals, smooths, top_down }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, levels: &[Var; 4]) -> Var {
        let (h0, w0) = (g.shape(levels[0])[1], g.shape(levels[0])[2]);
        let mut lat: Vec<Var> = levels
            .iter()
            .zip(&self.laterals)
            .map(|(&x, conv)| {
                let y = conv.forward(g, p, x);
                g.relu(y)
            })
            .collect();
        if self.top_down {
            for i in (0..3).rev() {
                let (h, w) = (g.shape(lat[i])[1], g.shape(lat[i])[2]);
                let up = g.resize_bilinear(lat[i + 1], h, w);
                lat[i] = g.add(lat[i], up);
            }
        }
        let outs: Vec<Var> = lat
            .into_iter()
            .zip(&self.smooths)
            .map(|(x, conv)| {
                let y = conv.forward(g, p, x);
                let y = g.relu(y);
                g.resize_bilinear(y, h0, w0)
            })
            .collect();
        g.concat_channels(&outs)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (0..4)
            .map(|i| {
                let (hi, wi) = (h / (4 << i), w / (4 << i));
                self.laterals[i].macs(hi, wi).0 + self.smooths[i].macs(hi, wi).0
            })
            .sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.laterals
            .iter()
            .chain(&self.smooths)
            .flat_map(|c| std::iter::once(c.w).chain(c.b))
            .collect()
    }
}

/// Intermediate values of one attention block, kept for inspection.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Attention matrices `[queries, keys]`, one per head.
    pub weights: Vec<Var>,
    /// Query plus the projected attention output (before the feed-forward
    /// sublayer).
    pub attended: Var,
    pub output: Var,
}

/// Pre-norm multi-head cross attention followed by a feed-forward sublayer.
#[derive(Debug, Clone)]
pub(crate) struct CrossAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, bias: bool) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, 1.0, bias),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, 1.0, bias),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, 1.0, bias),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, 0.5, bias),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, 2 * dim, 2f64.sqrt(), bias),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), 2 * dim, dim, 0.5, bias),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, query: Var, context: Var) -> AttentionTrace {
        let dim = g.shape(query)[1];
        let dh = dim / self.heads;
        let qn = self.norm_q.forward(g, p, query);
        let cn = self.norm_kv.forward(g, p, context);
        let q = self.q.forward(g, p, qn);
        let k = self.k.forward(g, p, cn);
        let v = self.v.forward(g, p, cn);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let s = g.matmul(qh, kh, true);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            weights.push(a);
            heads.push(g.matmul(a, vh, false));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let projected = self.out.forward(g, p, merged);
        let attended = g.add(query, projected);
        let f = self.norm_ff.forward(g, p, attended);
        let f = self.ff1.forward(g, p, f);
        let f = g.relu(f);
        let f = self.ff2.forward(g, p, f);
        let output = g.add(attended, f);
        AttentionTrace { weights, attended, output }
    }

    pub fn macs(&self, nq: usize, nk: usize) -> u64 {
        let dim = self.q.in_dim;
        self.q.macs(nq)
            + self.k.macs(nk)
            + self.v.macs(nk)
            + 2 * (nq * nk * dim) as u64
            + self.out.macs(nq)
            + self.ff1.macs(nq)
            + self.ff2.macs(nq)
    }
}

/// Convolutional head on the token grid producing six channels.
#[derive(Debug, Clone)]
pub(crate) struct Head {
    conv1: Conv,
    conv2: Conv,
    proj: Conv,
}

impl Head {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let (d, hc) = (cfg.embed_dim(), cfg.head_channels);
        Self {
            conv1: Conv::new(store, rng, "head.conv1", d, hc, 3, 1, 1.0, cfg.bias),
            conv2: Conv::new(store, rng, "head.conv2", hc, hc, 3, 1, 1.0, cfg.bias),
            proj: Conv::new(store, rng, "head.proj", hc, 6, 1, 1, 0.5, cfg.bias),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, grid: Var) -> Var {
        let x = self.conv1.forward(g, p, grid);
        let x = g.relu(x);
        let x = self.conv2.forward(g, p, x);
        let x = g.relu(x);
        self.proj.forward(g, p, x)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w).0 + self.conv2.macs(h, w).0 + self.proj.macs(h, w).0
    }
}
