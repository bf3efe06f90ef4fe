//! Toy pre-norm Transformer over the mixed-precision attention layer.
//!
//! Two shapes are supported: an encoder classifier fed with token
//! embeddings, which carries class tokens, and a causal decoder over an
//! integer vocabulary. The forward pass is written once over
//! [`Graph`] and runs in two layouts:
//!
//! * the *global* view ([`Model::forward_global`]) stacks every device's
//!   rows into one matrix and lets the mask encode who sees what. Training
//!   and evaluation use it.
//! * the *device* view ([`Model::device_block`] and friends) computes one
//!   device's rows against its inbox of dequantized remote tokens. The
//!   cluster simulator drives it.
//!
//! Each block quantizes the output of its first layer norm, so the remote
//! keys and values are `X̂ W_k` and `X̂ W_v` for the same projections used on
//! local rows.

use rand_distr::{Distribution, Normal};

use crate::attention::attend;
use crate::autodiff::{Eager, Graph};
use crate::cluster::ShardPlan;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, BoolMatrix, Precision, Tensor};
use crate::vq::{
    apply_noise, commitment_loss, kmeans_init, Codebook, CovarianceMode, KMeansOptions, NoiseConfig, QuantizedTokens,
    ResidualStats, RunMode,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASTM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassTokenMode {
    /// One class token, held by device 0 and seen only by its tokens.
    Single,
    /// One replica per device, mean-pooled at the end.
    #[default]
    Distributed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Classifier { input_dim: usize, classes: usize },
    Decoder { vocab: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub kind: ModelKind,
    pub max_tokens: usize,
    pub codebook_size: usize,
    pub groups: usize,
    pub cls_mode: ClassTokenMode,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn causal(&self) -> bool {
        matches!(self.kind, ModelKind::Decoder { .. })
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            ModelKind::Classifier { classes, .. } => classes,
            ModelKind::Decoder { vocab } => vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.layers == 0 {
            return bad("at least one layer required".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.groups == 0 || self.hidden % self.groups != 0 {
            return bad(format!("hidden {} not divisible by {} groups", self.hidden, self.groups));
        }
        if self.mlp_ratio == 0 || self.max_tokens == 0 || self.codebook_size == 0 {
            return bad("mlp ratio, max tokens and codebook size must be positive".into());
        }
        match self.kind {
            ModelKind::Classifier { input_dim, classes } if input_dim == 0 || classes < 2 => {
                bad("classifier needs input_dim > 0 and at least 2 classes".into())
            }
            ModelKind::Decoder { vocab } if vocab < 2 => bad("decoder needs a vocabulary of at least 2".into()),
            _ => Ok(()),
        }
    }
}

/// Indices of one block's tensors in the flat parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Flat parameter layout in declaration order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub embed: usize,
    pub embed_bias: Option<usize>,
    pub pos: usize,
    pub cls: Option<usize>,
    pub blocks: Vec<BlockSlots>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: (usize, usize)| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let d = cfg.hidden;
        let (embed, embed_bias, cls) = match cfg.kind {
            ModelKind::Classifier { input_dim, .. } => {
                let e = add("embed.w".into(), (input_dim, d));
                let b = add("embed.b".into(), (1, d));
                (e, Some(b), None)
            }
            ModelKind::Decoder { vocab } => (add("embed.tokens".into(), (vocab, d)), None, None),
        };
        let pos = add("embed.pos".into(), (cfg.max_tokens, d));
        let cls = match cfg.kind {
            ModelKind::Classifier { .. } => Some(add("cls".into(), (1, d))),
            ModelKind::Decoder { .. } => cls,
        };
        let m = d * cfg.mlp_ratio;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let mut slot = |n: &str, s| add(format!("block{l}.{n}"), s);
                BlockSlots {
                    ln1_g: slot("ln1.g", (1, d)),
                    ln1_b: slot("ln1.b", (1, d)),
                    wq: slot("attn.wq", (d, d)),
                    wk: slot("attn.wk", (d, d)),
                    wv: slot("attn.wv", (d, d)),
                    wo: slot("attn.wo", (d, d)),
                    bo: slot("attn.bo", (1, d)),
                    ln2_g: slot("ln2.g", (1, d)),
                    ln2_b: slot("ln2.b", (1, d)),
                    w1: slot("mlp.w1", (d, m)),
                    b1: slot("mlp.b1", (1, m)),
                    w2: slot("mlp.w2", (m, d)),
                    b2: slot("mlp.b2", (1, d)),
                }
            })
            .collect();
        let lnf_g = add("lnf.g".into(), (1, d));
        let lnf_b = add("lnf.b".into(), (1, d));
        let head_w = add("head.w".into(), (d, cfg.outputs()));
        let head_b = add("head.b".into(), (1, cfg.outputs()));
        Layout {
            embed,
            embed_bias,
            pos,
            cls,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            names,
            shapes,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Model input for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    /// `T × input_dim` token embeddings for the classifier.
    Embeddings(Tensor),
    /// Token ids for the decoder.
    Tokens(Vec<usize>),
}

impl Input {
    pub fn len(&self) -> usize {
        match self {
            Input::Embeddings(t) => t.rows(),
            Input::Tokens(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a row of activations lives: a device's class replica
/// (`token == None`) or a content token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowTag {
    pub device: usize,
    pub token: Option<usize>,
}

impl RowTag {
    fn sees(&self, key: &RowTag, quantized: bool, causal: bool) -> bool {
        match key.token {
            // replicas are never transmitted
            None => !quantized && key.device == self.device,
            Some(j) => {
                if causal && self.token.is_some_and(|i| j > i) {
                    return false;
                }
                (key.device == self.device) != quantized
            }
        }
    }
}

/// Mask for `queries` over the columns `[full | quantized]`.
pub fn view_mask(queries: &[RowTag], full: &[RowTag], quantized: &[RowTag], causal: bool) -> BoolMatrix {
    BoolMatrix::from_fn(queries.len(), full.len() + quantized.len(), |i, c| {
        if c < full.len() {
            queries[i].sees(&full[c], false, causal)
        } else {
            queries[i].sees(&quantized[c - full.len()], true, causal)
        }
    })
}

/// Mean of the class-token replicas (each `1 × D`).
pub fn aggregate_class_tokens(replicas: &[Tensor]) -> Result<Tensor> {
    if replicas.is_empty() {
        return Err(Error::Contract("no class-token replicas".into()));
    }
    let stacked = tensor::concat_rows(&replicas.iter().collect::<Vec<_>>())?;
    Ok(tensor::mean_rows(&stacked))
}

/// How a forward pass treats remote tokens.
#[derive(Clone, Copy, Debug)]
pub enum Quantization<'a> {
    /// Remote tokens at full precision (a vanilla Transformer).
    Exact,
    /// Remote tokens through each layer's codebook, optionally with noise.
    Codebooks {
        noise: Option<&'a NoiseConfig>,
        mode: RunMode,
    },
}

/// Result of a global-view forward pass.
pub struct GlobalOutput<V> {
    /// `1 × classes` for the classifier, `T × vocab` for the decoder.
    pub logits: V,
    /// Unweighted `Σ_l ‖X_l − sg(X̂_l)‖²`; present when quantizing.
    pub commitment: Option<V>,
    /// First-layer-norm outputs of the content rows, per layer.
    pub captures: Vec<Tensor>,
    /// Codebook assignments per layer; empty for exact passes.
    pub assignments: Vec<QuantizedTokens>,
}

/// One block's output on a device, with the key/value rows it attended over
/// (local rows first, then remote tokens in index order).
pub struct DeviceBlockOutput {
    pub x: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
}

/// Per-layer key/value rows of the decoding device.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub next_position: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<Tensor>,
    pub codebooks: Vec<Codebook>,
    pub residuals: Vec<Option<ResidualStats>>,
}

impl Model {
    /// Seeded random initialisation. Codebooks start empty.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut r = rng::stream(seed, "init");
        let mut params = Vec::with_capacity(layout.len());
        for (name, &(rows, cols)) in layout.names.iter().zip(&layout.shapes) {
            let fill = if name.ends_with(".g") {
                Some(1.0)
            } else if name.ends_with(".b") || name.ends_with(".bo") || name.ends_with(".b1") || name.ends_with(".b2") {
                Some(0.0)
            } else {
                None
            };
            let data = match fill {
                Some(v) => vec![v; rows * cols],
                None => {
                    let std = if name.starts_with("embed.pos") || name == "cls" || name == "embed.tokens" {
                        0.5
                    } else {
                        1.0 / (rows as f64).sqrt()
                    };
                    let n = Normal::new(0.0, std).unwrap();
                    (0..rows * cols).map(|_| n.sample(&mut r)).collect()
                }
            };
            params.push(Tensor::matrix(rows, cols, data, config.precision)?);
        }
        Ok(Model {
            config,
            layout,
            params,
            codebooks: Vec::new(),
            residuals: vec![None; config.layers],
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn has_codebooks(&self) -> bool {
        self.codebooks.len() == self.config.layers
    }

    pub fn codebook(&self, layer: usize) -> Result<&Codebook> {
        self.codebooks
            .get(layer)
            .ok_or_else(|| Error::Lifecycle(format!("codebook for layer {layer} not initialised")))
    }

    /// Devices holding a class-token replica, in row order.
    pub fn replica_devices(&self, devices: usize) -> Vec<usize> {
        match (self.config.kind, self.config.cls_mode) {
            (ModelKind::Decoder { .. }, _) => Vec::new(),
            (_, ClassTokenMode::Single) => vec![0],
            (_, ClassTokenMode::Distributed) => (0..devices).collect(),
        }
    }

    fn check_input(&self, input: &Input) -> Result<()> {
        let t = input.len();
        if t == 0 || t > self.config.max_tokens {
            return Err(Error::Contract(format!(
                "sequence length {t} outside 1..={}",
                self.config.max_tokens
            )));
        }
        match (self.config.kind, input) {
            (ModelKind::Classifier { input_dim, .. }, Input::Embeddings(x)) if x.cols() == input_dim => Ok(()),
            (ModelKind::Decoder { vocab }, Input::Tokens(ids)) => match ids.iter().find(|&&i| i >= vocab) {
                Some(i) => Err(Error::Contract(format!("token id {i} outside vocabulary of {vocab}"))),
                None => Ok(()),
            },
            _ => Err(Error::Contract("input does not match model kind".into())),
        }
    }

    /// Content-token embeddings at `positions`.
    fn embed<G: Graph>(&self, g: &mut G, p: &[G::V], input: &Input, positions: &[usize]) -> Result<G::V> {
        let e = match input {
            Input::Embeddings(x) => {
                let xs = g.constant(tensor::gather_rows(x, positions)?);
                let e = g.matmul(&xs, &p[self.layout.embed])?;
                g.add_row(&e, &p[self.layout.embed_bias.expect("classifier has an input bias")])?
            }
            Input::Tokens(ids) => {
                let sel: Vec<usize> = positions.iter().map(|&i| ids[i]).collect();
                g.gather_rows(&p[self.layout.embed], &sel)?
            }
        };
        let pe = g.gather_rows(&p[self.layout.pos], positions)?;
        g.add(&e, &pe)
    }

    fn ln1<G: Graph>(&self, g: &mut G, p: &[G::V], layer: usize, x: &G::V) -> Result<G::V> {
        let s = &self.layout.blocks[layer];
        g.layer_norm(x, &p[s.ln1_g], &p[s.ln1_b], LAYER_NORM_EPS)
    }

    /// Attention over `[h | remote]` followed by the MLP, both with residuals.
    #[allow(clippy::too_many_arguments)]
    fn block_rest<G: Graph>(
        &self,
        g: &mut G,
        p: &[G::V],
        layer: usize,
        x: &G::V,
        h: &G::V,
        remote: Option<&G::V>,
        mask: &BoolMatrix,
    ) -> Result<(G::V, G::V, G::V)> {
        let s = &self.layout.blocks[layer];
        let q = g.matmul(h, &p[s.wq])?;
        let mut k = g.matmul(h, &p[s.wk])?;
        let mut v = g.matmul(h, &p[s.wv])?;
        if let Some(r) = remote {
            let kr = g.matmul(r, &p[s.wk])?;
            let vr = g.matmul(r, &p[s.wv])?;
            k = g.concat_rows(&[k, kr])?;
            v = g.concat_rows(&[v, vr])?;
        }
        let a = attend(g, &q, &k, &v, mask, self.config.heads)?;
        let o = g.matmul(&a, &p[s.wo])?;
        let o = g.add_row(&o, &p[s.bo])?;
        let x1 = g.add(x, &o)?;
        let h2 = g.layer_norm(&x1, &p[s.ln2_g], &p[s.ln2_b], LAYER_NORM_EPS)?;
        let m = g.matmul(&h2, &p[s.w1])?;
        let m = g.add_row(&m, &p[s.b1])?;
        let m = g.gelu(&m);
        let m = g.matmul(&m, &p[s.w2])?;
        let m = g.add_row(&m, &p[s.b2])?;
        Ok((g.add(&x1, &m)?, k, v))
    }

    fn head<G: Graph>(&self, g: &mut G, p: &[G::V], x: &G::V) -> Result<G::V> {
        let y = g.layer_norm(x, &p[self.layout.lnf_g], &p[self.layout.lnf_b], LAYER_NORM_EPS)?;
        let y = g.matmul(&y, &p[self.layout.head_w])?;
        g.add_row(&y, &p[self.layout.head_b])
    }

    /// All devices' rows in one matrix: class replicas first, then content
    /// tokens in order. `stream_key` seeds any noise draws.
    pub fn forward_global<G: Graph>(
        &self,
        g: &mut G,
        p: &[G::V],
        input: &Input,
        plan: &ShardPlan,
        quant: Quantization<'_>,
    ) -> Result<GlobalOutput<G::V>> {
        self.check_input(input)?;
        let t = input.len();
        if plan.total() != t {
            return Err(Error::Plan(format!("plan covers {} tokens, input has {t}", plan.total())));
        }
        let replicas = self.replica_devices(plan.devices());
        let r = replicas.len();
        let positions: Vec<usize> = (0..t).collect();
        let mut x = self.embed(g, p, input, &positions)?;
        if r > 0 {
            let cls = g.gather_rows(&p[self.layout.cls.expect("classifier has a class token")], &vec![0; r])?;
            x = g.concat_rows(&[cls, x])?;
        }
        let tags: Vec<RowTag> = replicas
            .iter()
            .map(|&d| RowTag { device: d, token: None })
            .chain((0..t).map(|i| RowTag {
                device: plan.owner(i),
                token: Some(i),
            }))
            .collect();
        let content_idx: Vec<usize> = (r..r + t).collect();
        let mask = view_mask(&tags, &tags, &tags[r..], self.config.causal());

        let mut captures = Vec::with_capacity(self.config.layers);
        let mut assignments = Vec::new();
        let mut commitment: Option<G::V> = None;
        for layer in 0..self.config.layers {
            let h = self.ln1(g, p, layer, &x)?;
            let hc = if r > 0 { g.gather_rows(&h, &content_idx)? } else { h.clone() };
            captures.push(g.value(&hc).clone());
            let remote = match quant {
                Quantization::Exact => hc,
                Quantization::Codebooks { noise, mode } => {
                    let cb = self.codebook(layer)?;
                    let (q, x_hat) = cb.quantize(g.value(&hc))?;
                    let c = commitment_loss(g, &hc, &x_hat, 1.0)?;
                    commitment = Some(match commitment {
                        Some(acc) => g.add(&acc, &c)?,
                        None => c,
                    });
                    let target = match noise {
                        Some(cfg) if cfg.enabled && cfg.lambda != 0.0 => {
                            if mode == RunMode::Inference {
                                return Err(Error::Mode("noise augmentation is training-only".into()));
                            }
                            let stats = self.residuals[layer]
                                .as_ref()
                                .ok_or_else(|| Error::Lifecycle(format!("residual stats for layer {layer} missing")))?;
                            apply_noise(&x_hat, stats, cfg, mode, 0)?
                        }
                        _ => x_hat,
                    };
                    assignments.push(q);
                    g.straight_through(&hc, &target)?
                }
            };
            x = self.block_rest(g, p, layer, &x, &h, Some(&remote), &mask)?.0;
        }
        let logits = if r > 0 {
            let reps = g.gather_rows(&x, &(0..r).collect::<Vec<_>>())?;
            let pooled = g.mean_rows(&reps);
            self.head(g, p, &pooled)?
        } else {
            self.head(g, p, &x)?
        };
        Ok(GlobalOutput {
            logits,
            commitment,
            captures,
            assignments,
        })
    }

    /// Logits from the global view without gradient tracking.
    pub fn logits(&self, input: &Input, plan: &ShardPlan, quant: Quantization<'_>) -> Result<Tensor> {
        Ok(self.forward_global(&mut Eager::new(), &self.params, input, plan, quant)?.logits)
    }

    // -----------------------------------------------------------------------
    // Device view
    // -----------------------------------------------------------------------

    /// Row tags for `device`: its replica (if any), then its tokens.
    pub fn device_rows(&self, plan: &ShardPlan, device: usize) -> Vec<RowTag> {
        let mut rows = Vec::new();
        if self.replica_devices(plan.devices()).contains(&device) {
            rows.push(RowTag { device, token: None });
        }
        rows.extend(plan.range(device).map(|i| RowTag {
            device,
            token: Some(i),
        }));
        rows
    }

    /// Tokens not held by `device`, in index order.
    pub fn remote_tokens(plan: &ShardPlan, device: usize) -> Vec<usize> {
        (0..plan.total()).filter(|&i| plan.owner(i) != device).collect()
    }

    pub fn device_embed(&self, input: &Input, plan: &ShardPlan, device: usize) -> Result<Tensor> {
        self.check_input(input)?;
        if plan.total() != input.len() {
            return Err(Error::Plan("plan and input lengths differ".into()));
        }
        let g = &mut Eager::new();
        let positions: Vec<usize> = plan.range(device).collect();
        let x = self.embed(g, &self.params, input, &positions)?;
        if self.replica_devices(plan.devices()).contains(&device) {
            let cls = self.params[self.layout.cls.unwrap()].clone();
            return tensor::concat_rows(&[&cls, &x]);
        }
        Ok(x)
    }

    pub fn device_ln1(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        self.ln1(&mut Eager::new(), &self.params, layer, x)
    }

    /// Content rows of a device's activations (the replica row dropped).
    pub fn device_content(&self, plan: &ShardPlan, device: usize, h: &Tensor) -> Result<Tensor> {
        let skip = usize::from(self.replica_devices(plan.devices()).contains(&device));
        tensor::gather_rows(h, &(skip..h.rows()).collect::<Vec<_>>())
    }

    /// One block for one device. `remote` holds the dequantized embeddings
    /// of every token the device does not own, in index order.
    pub fn device_block(
        &self,
        layer: usize,
        plan: &ShardPlan,
        device: usize,
        x: &Tensor,
        h: &Tensor,
        remote: Option<&Tensor>,
    ) -> Result<DeviceBlockOutput> {
        let rows = self.device_rows(plan, device);
        let remote_ids = Self::remote_tokens(plan, device);
        let got = remote.map_or(0, |r| r.rows());
        if got != remote_ids.len() {
            return Err(Error::Protocol {
                layer,
                detail: format!(
                    "device {device} has {got} remote embeddings, expected {}",
                    remote_ids.len()
                ),
            });
        }
        let remote_tags: Vec<RowTag> = remote_ids
            .iter()
            .map(|&i| RowTag {
                device: plan.owner(i),
                token: Some(i),
            })
            .collect();
        let mask = view_mask(&rows, &rows, &remote_tags, self.config.causal());
        let (x, keys, values) = self.block_rest(&mut Eager::new(), &self.params, layer, x, h, remote, &mask)?;
        Ok(DeviceBlockOutput { x, keys, values })
    }

    /// Class-token aggregation followed by the prediction head.
    pub fn classify_head(&self, replicas: &[Tensor]) -> Result<Tensor> {
        let pooled = aggregate_class_tokens(replicas)?;
        self.head(&mut Eager::new(), &self.params, &pooled)
    }

    pub fn decoder_head(&self, x: &Tensor) -> Result<Tensor> {
        self.head(&mut Eager::new(), &self.params, x)
    }

    /// Appends `token` at the cache's next position and returns the
    /// next-token logits (`1 × vocab`).
    pub fn decode_step(&self, cache: &mut KvCache, token: usize) -> Result<Tensor> {
        let pos = cache.next_position;
        if pos >= self.config.max_tokens {
            return Err(Error::Contract(format!("position {pos} beyond max_tokens")));
        }
        match self.config.kind {
            ModelKind::Decoder { vocab } if token >= vocab => {
                return Err(Error::Contract(format!("token id {token} outside vocabulary")));
            }
            ModelKind::Decoder { .. } => {}
            _ => return Err(Error::Contract("decoding requires a decoder model".into())),
        }
        let g = &mut Eager::new();
        let p = &self.params;
        let e = g.gather_rows(&p[self.layout.embed], &[token])?;
        let pe = g.gather_rows(&p[self.layout.pos], &[pos])?;
        let mut x = g.add(&e, &pe)?;
        for layer in 0..self.config.layers {
            let s = &self.layout.blocks[layer];
            let h = self.ln1(g, p, layer, &x)?;
            let k = g.matmul(&h, &p[s.wk])?;
            let v = g.matmul(&h, &p[s.wv])?;
            cache.keys[layer] = tensor::concat_rows(&[&cache.keys[layer], &k])?;
            cache.values[layer] = tensor::concat_rows(&[&cache.values[layer], &v])?;
            let mask = BoolMatrix::new(1, cache.keys[layer].rows(), true);
            let q = g.matmul(&h, &p[s.wq])?;
            let a = attend(g, &q, &cache.keys[layer], &cache.values[layer], &mask, self.config.heads)?;
            let o = g.matmul(&a, &p[s.wo])?;
            let o = g.add_row(&o, &p[s.bo])?;
            let x1 = g.add(&x, &o)?;
            let h2 = g.layer_norm(&x1, &p[s.ln2_g], &p[s.ln2_b], LAYER_NORM_EPS)?;
            let m = g.matmul(&h2, &p[s.w1])?;
            let m = g.add_row(&m, &p[s.b1])?;
            let m = g.gelu(&m);
            let m = g.matmul(&m, &p[s.w2])?;
            let m = g.add_row(&m, &p[s.b2])?;
            x = g.add(&x1, &m)?;
        }
        cache.next_position += 1;
        self.decoder_head(&x)
    }

    // -----------------------------------------------------------------------
    // Entry points
    // -----------------------------------------------------------------------

    /// Distributed classification through the simulated cluster.
    pub fn classify(&self, input: &Input, plan: &ShardPlan) -> Result<Tensor> {
        if !matches!(self.config.kind, ModelKind::Classifier { .. }) {
            return Err(Error::Contract("classify requires a classifier model".into()));
        }
        let out = crate::cluster::run_inference(self, input, plan, crate::cluster::Mode::Classify, 1)?;
        Ok(out.logits)
    }

    /// Greedy generation: parallel prefill across the plan's devices, then
    /// KV-cached decoding on the device holding the last prompt token.
    pub fn generate(&self, prompt: &[usize], steps: usize, plan: &ShardPlan) -> Result<Vec<usize>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        let out = crate::cluster::run_inference(
            self,
            &Input::Tokens(prompt.to_vec()),
            plan,
            crate::cluster::Mode::Generate { steps },
            1,
        )?;
        Ok(out.tokens)
    }

    /// Reference autoregressive loop: full single-device forward per step.
    pub fn generate_reference(&self, prompt: &[usize], steps: usize) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let plan = crate::cluster::partition_tokens(seq.len(), 1)?;
            let logits = self.logits(&Input::Tokens(seq.clone()), &plan, Quantization::Exact)?;
            let next = argmax(logits.row(logits.rows() - 1));
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // Codebooks
    // -----------------------------------------------------------------------

    /// Per-layer first-layer-norm outputs of an exact single-device pass.
    pub fn capture_activations(&self, input: &Input) -> Result<Vec<Tensor>> {
        let plan = crate::cluster::partition_tokens(input.len(), 1)?;
        Ok(self
            .forward_global(&mut Eager::new(), &self.params, input, &plan, Quantization::Exact)?
            .captures)
    }

    /// k-means codebooks per layer from calibration inputs, plus residual
    /// statistics of the calibration set under those codebooks.
    pub fn init_codebooks(
        &mut self,
        calibration: &[Input],
        seed: u64,
        opts: KMeansOptions,
        cov: CovarianceMode,
    ) -> Result<()> {
        if calibration.is_empty() {
            return Err(Error::InsufficientData("no calibration inputs".into()));
        }
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); self.config.layers];
        for input in calibration {
            for (l, h) in self.capture_activations(input)?.into_iter().enumerate() {
                per_layer[l].push(h);
            }
        }
        let mut books = Vec::with_capacity(self.config.layers);
        let mut stats = Vec::with_capacity(self.config.layers);
        for (l, hs) in per_layer.iter().enumerate() {
            let all = tensor::concat_rows(&hs.iter().collect::<Vec<_>>())?;
            let cb = kmeans_init(
                l as u32,
                &all,
                self.config.codebook_size,
                self.config.groups,
                seed,
                opts,
            )?;
            let (_, x_hat) = cb.quantize(&all)?;
            stats.push(Some(ResidualStats::fit(l as u32, &all, &x_hat, cov)?));
            books.push(cb);
        }
        self.codebooks = books;
        self.residuals = stats;
        Ok(())
    }

    /// Codebooks holding every exact first-layer-norm output of `input`, so
    /// quantization is lossless for that input (up to f32 storage).
    pub fn set_identity_codebooks(&mut self, input: &Input) -> Result<()> {
        self.codebooks = self
            .capture_activations(input)?
            .iter()
            .enumerate()
            .map(|(l, h)| Codebook::from_rows(l as u32, h))
            .collect::<Result<_>>()?;
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Checkpoints
    // -----------------------------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let (tag, a, b) = match c.kind {
            ModelKind::Classifier { input_dim, classes } => (0u32, input_dim, classes),
            ModelKind::Decoder { vocab } => (1, vocab, 0),
        };
        let words = [
            CHECKPOINT_VERSION,
            c.layers as u32,
            c.hidden as u32,
            c.heads as u32,
            c.mlp_ratio as u32,
            tag,
            a as u32,
            b as u32,
            c.max_tokens as u32,
            c.codebook_size as u32,
            c.groups as u32,
            u32::from(c.cls_mode == ClassTokenMode::Distributed),
            c.precision.bits(),
            self.params.len() as u32,
        ];
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for p in &self.params {
            let (r, cols) = p.dims();
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for &v in p.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.codebooks.len() as u32).to_le_bytes());
        for cb in &self.codebooks {
            out.extend(cb.to_bytes());
        }
        out.extend_from_slice(&(self.residuals.len() as u32).to_le_bytes());
        for s in &self.residuals {
            match s {
                None => out.push(0),
                Some(s) => {
                    out.push(match s.mode() {
                        CovarianceMode::Isotropic => 1,
                        CovarianceMode::Diagonal => 2,
                    });
                    out.extend_from_slice(&s.count().to_le_bytes());
                    out.extend_from_slice(&(s.dim() as u32).to_le_bytes());
                    for v in s.mean().iter().chain(&s.variances()) {
                        out.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing ASTM header".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut w = [0usize; 13];
        for slot in &mut w {
            *slot = r.u32()? as usize;
        }
        let [layers, hidden, heads, mlp_ratio, tag, a, b, max_tokens, codebook_size, groups, cls, bits, nparams] = w;
        let kind = match tag {
            0 => ModelKind::Classifier {
                input_dim: a,
                classes: b,
            },
            1 => ModelKind::Decoder { vocab: a },
            _ => return Err(Error::Format(format!("unknown model kind {tag}"))),
        };
        let precision = match bits {
            32 => Precision::F32,
            64 => Precision::F64,
            _ => return Err(Error::Format(format!("unknown precision {bits}"))),
        };
        let config = ModelConfig {
            layers,
            hidden,
            heads,
            mlp_ratio,
            kind,
            max_tokens,
            codebook_size,
            groups,
            cls_mode: if cls == 1 {
                ClassTokenMode::Distributed
            } else {
                ClassTokenMode::Single
            },
            precision,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let layout = Layout::new(&config);
        if nparams != layout.len() {
            return Err(Error::Format(format!("{nparams} tensors, layout expects {}", layout.len())));
        }
        let mut params = Vec::with_capacity(nparams);
        for &shape in &layout.shapes {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if (rows, cols) != shape {
                return Err(Error::Format(format!("tensor shape {rows}x{cols}, expected {shape:?}")));
            }
            let data = (0..rows * cols).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            params.push(Tensor::matrix(rows, cols, data, precision)?);
        }
        let ncb = r.u32()? as usize;
        let mut codebooks = Vec::with_capacity(ncb);
        for _ in 0..ncb {
            let (cb, used) = Codebook::from_bytes(&bytes[r.at..])?;
            r.at += used;
            codebooks.push(cb);
        }
        let nres = r.u32()? as usize;
        let mut residuals = Vec::with_capacity(nres);
        for l in 0..nres {
            let mode = match r.take(1)?[0] {
                0 => {
                    residuals.push(None);
                    continue;
                }
                1 => CovarianceMode::Isotropic,
                2 => CovarianceMode::Diagonal,
                m => return Err(Error::Format(format!("unknown covariance mode {m}"))),
            };
            let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let dim = r.u32()? as usize;
            let vals = (0..2 * dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            residuals.push(Some(ResidualStats::from_moments(
                l as u32,
                mode,
                count,
                vals[..dim].to_vec(),
                vals[dim..].to_vec(),
            )?));
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Model {
            config,
            layout,
            params,
            codebooks,
            residuals,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::standard_attention;
    use crate::cluster::{partition_tokens, run_inference, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn classifier(layers: usize, d: usize, t: usize, k: usize, mode: ClassTokenMode) -> ModelConfig {
        ModelConfig {
            layers,
            hidden: d,
            heads: 2,
            mlp_ratio: 2,
            kind: ModelKind::Classifier { input_dim: 3, classes: 4 },
            max_tokens: t,
            codebook_size: k,
            groups: 1,
            cls_mode: mode,
            precision: Precision::F64,
        }
    }

    fn decoder(layers: usize, d: usize, t: usize) -> ModelConfig {
        ModelConfig {
            layers,
            hidden: d,
            heads: 2,
            mlp_ratio: 2,
            kind: ModelKind::Decoder { vocab: 11 },
            max_tokens: t,
            codebook_size: 4,
            groups: 2,
            cls_mode: ClassTokenMode::Distributed,
            precision: Precision::F64,
        }
    }

    fn embeddings(seed: u64, t: usize) -> Input {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Input::Embeddings(Tensor::matrix(t, 3, (0..3 * t).map(|_| r.random_range(-1.0..1.0)).collect(), Precision::F64).unwrap())
    }

    fn tokens(seed: u64, t: usize) -> Input {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Input::Tokens((0..t).map(|_| r.random_range(0..11)).collect())
    }

    /// Plain Transformer written directly against the tensor kernels.
    fn vanilla(m: &Model, input: &Input) -> Tensor {
        let p = &m.params;
        let l = &m.layout;
        let t = input.len();
        let pos = tensor::gather_rows(&p[l.pos], &(0..t).collect::<Vec<_>>()).unwrap();
        let mut x = match input {
            Input::Embeddings(e) => {
                let x = tensor::add_row(&tensor::matmul(e, &p[l.embed]).unwrap(), &p[l.embed_bias.unwrap()]).unwrap();
                let x = tensor::add(&x, &pos).unwrap();
                tensor::concat_rows(&[&p[l.cls.unwrap()], &x]).unwrap()
            }
            Input::Tokens(ids) => tensor::add(&tensor::gather_rows(&p[l.embed], ids).unwrap(), &pos).unwrap(),
        };
        for s in &l.blocks {
            let (h, _) = tensor::layer_norm(&x, &p[s.ln1_g], &p[s.ln1_b], LAYER_NORM_EPS).unwrap();
            let q = tensor::matmul(&h, &p[s.wq]).unwrap();
            let k = tensor::matmul(&h, &p[s.wk]).unwrap();
            let v = tensor::matmul(&h, &p[s.wv]).unwrap();
            let a = standard_attention(&q, &k, &v, m.config.causal(), m.config.heads).unwrap();
            let o = tensor::add_row(&tensor::matmul(&a, &p[s.wo]).unwrap(), &p[s.bo]).unwrap();
            x = tensor::add(&x, &o).unwrap();
            let (h2, _) = tensor::layer_norm(&x, &p[s.ln2_g], &p[s.ln2_b], LAYER_NORM_EPS).unwrap();
            let f = tensor::gelu(&tensor::add_row(&tensor::matmul(&h2, &p[s.w1]).unwrap(), &p[s.b1]).unwrap());
            let f = tensor::add_row(&tensor::matmul(&f, &p[s.w2]).unwrap(), &p[s.b2]).unwrap();
            x = tensor::add(&x, &f).unwrap();
        }
        if matches!(input, Input::Embeddings(_)) {
            x = tensor::gather_rows(&x, &[0]).unwrap();
        }
        let (y, _) = tensor::layer_norm(&x, &p[l.lnf_g], &p[l.lnf_b], LAYER_NORM_EPS).unwrap();
        tensor::add_row(&tensor::matmul(&y, &p[l.head_w]).unwrap(), &p[l.head_b]).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = classifier(1, 8, 4, 2, ClassTokenMode::Distributed);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = classifier(1, 8, 4, 2, ClassTokenMode::Distributed);
        c.groups = 3;
        assert!(c.validate().is_err());
        c.groups = 1;
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_device_matches_vanilla() {
        for mode in [ClassTokenMode::Single, ClassTokenMode::Distributed] {
            let m = Model::new(classifier(2, 8, 6, 2, mode), 1).unwrap();
            let input = embeddings(2, 6);
            let plan = partition_tokens(6, 1).unwrap();
            let got = m.logits(&input, &plan, Quantization::Exact).unwrap();
            assert!(got.max_abs_diff(&vanilla(&m, &input)) < 1e-5);
            let via_cluster = m.classify(&input, &plan).unwrap();
            assert!(via_cluster.max_abs_diff(&vanilla(&m, &input)) < 1e-5);
        }
        let m = Model::new(decoder(2, 8, 10), 3).unwrap();
        let input = tokens(4, 7);
        let got = m.logits(&input, &partition_tokens(7, 1).unwrap(), Quantization::Exact).unwrap();
        assert!(got.max_abs_diff(&vanilla(&m, &input)) < 1e-5);
    }

    #[test]
    fn identity_quantization_matches_single_device() {
        let input = embeddings(5, 8);
        let mut m = Model::new(classifier(2, 8, 8, 8, ClassTokenMode::Distributed), 6).unwrap();
        m.config.precision = Precision::F32;
        m.params = m.params.iter().map(|p| p.to_precision(Precision::F32)).collect();
        m.set_identity_codebooks(&input).unwrap();
        let reference = m.classify(&input, &partition_tokens(8, 1).unwrap()).unwrap();
        for n in [2, 4] {
            let plan = partition_tokens(8, n).unwrap();
            let out = m.classify(&input, &plan).unwrap();
            assert!(out.max_abs_diff(&reference) < 1e-5, "N={n}");
            let global = m
                .logits(&input, &plan, Quantization::Codebooks { noise: None, mode: RunMode::Inference })
                .unwrap();
            assert!(global.max_abs_diff(&reference) < 1e-5);
        }
    }

    #[test]
    fn replicas_stay_identical_under_identity_quantization() {
        let input = embeddings(7, 8);
        let mut m = Model::new(classifier(3, 8, 8, 8, ClassTokenMode::Distributed), 8).unwrap();
        m.set_identity_codebooks(&input).unwrap();
        let plan = partition_tokens(8, 4).unwrap();
        let mut c = crate::cluster::Cluster::new(&m, plan, 1).unwrap();
        c.prefill(&input).unwrap();
        let reps: Vec<Vec<f64>> = c.devices().iter().map(|d| d.x.row(0).to_vec()).collect();
        for r in &reps[1..] {
            for (a, b) in r.iter().zip(&reps[0]) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        let reps: Vec<Tensor> = c.devices().iter().map(|d| tensor::gather_rows(&d.x, &[0]).unwrap()).collect();
        let mean = aggregate_class_tokens(&reps).unwrap();
        assert!(mean.max_abs_diff(&reps[0]) < 1e-5);
    }

    #[test]
    fn global_and_device_views_agree() {
        let input = embeddings(9, 10);
        let mut m = Model::new(classifier(2, 8, 10, 3, ClassTokenMode::Distributed), 10).unwrap();
        m.init_codebooks(&[input.clone()], 1, KMeansOptions::default(), CovarianceMode::Isotropic).unwrap();
        let plan = partition_tokens(10, 3).unwrap();
        let a = m.classify(&input, &plan).unwrap();
        let b = m
            .logits(&input, &plan, Quantization::Codebooks { noise: None, mode: RunMode::Inference })
            .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);

        let mut d = Model::new(decoder(2, 8, 12), 11).unwrap();
        let prompt = tokens(12, 9);
        d.init_codebooks(&[prompt.clone()], 2, KMeansOptions::default(), CovarianceMode::Isotropic).unwrap();
        let plan = partition_tokens(9, 3).unwrap();
        let out = run_inference(&d, &prompt, &plan, Mode::Generate { steps: 1 }, 1).unwrap();
        let global = d
            .logits(&prompt, &plan, Quantization::Codebooks { noise: None, mode: RunMode::Inference })
            .unwrap();
        let last = tensor::gather_rows(&global, &[8]).unwrap();
        assert!(out.logits.max_abs_diff(&last) < 1e-9);
    }

    #[test]
    fn single_mode_lossy_codebook_differs_from_distributed() {
        let input = embeddings(13, 8);
        let mut a = Model::new(classifier(1, 8, 8, 2, ClassTokenMode::Single), 14).unwrap();
        a.init_codebooks(&[input.clone()], 0, KMeansOptions::default(), CovarianceMode::Isotropic).unwrap();
        let mut b = a.clone();
        b.config.cls_mode = ClassTokenMode::Distributed;
        let plan = partition_tokens(8, 2).unwrap();
        let la = a.classify(&input, &plan).unwrap();
        let lb = b.classify(&input, &plan).unwrap();
        assert!(la.max_abs_diff(&lb) > 1e-6);
        // with one device both modes are the same model
        let one = partition_tokens(8, 1).unwrap();
        assert!(a.classify(&input, &one).unwrap().max_abs_diff(&b.classify(&input, &one).unwrap()) < 1e-12);
    }

    #[test]
    fn ablated_block_is_attention_plus_residual() {
        let mut m = Model::new(classifier(1, 4, 3, 2, ClassTokenMode::Single), 15).unwrap();
        let s = m.layout.blocks[0];
        for idx in [s.wq, s.wk, s.wv, s.wo] {
            m.params[idx] = Tensor::identity(4, Precision::F64);
        }
        for idx in [s.w1, s.b1, s.w2, s.b2] {
            m.params[idx] = m.params[idx].map(|_| 0.0);
        }
        let input = embeddings(16, 3);
        let plan = partition_tokens(3, 1).unwrap();
        let x = m.device_embed(&input, &plan, 0).unwrap();
        let h = m.device_ln1(0, &x).unwrap();
        let out = m.device_block(0, &plan, 0, &x, &h, None).unwrap().x;
        let expect = tensor::add(&x, &standard_attention(&h, &h, &h, false, 2).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let a = Tensor::matrix(1, 2, vec![1.0, 1.0], Precision::F64).unwrap();
        let b = Tensor::matrix(1, 2, vec![3.0, 3.0], Precision::F64).unwrap();
        assert_eq!(aggregate_class_tokens(&[a.clone(), b.clone()]).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(aggregate_class_tokens(&[b.clone(), a.clone()]).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(aggregate_class_tokens(&[a.clone()]).unwrap(), a);
        assert!(matches!(aggregate_class_tokens(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn remote_payload_count_is_checked() {
        let m = Model::new(classifier(1, 4, 4, 2, ClassTokenMode::Single), 1).unwrap();
        let plan = partition_tokens(4, 2).unwrap();
        let input = embeddings(1, 4);
        let x = m.device_embed(&input, &plan, 0).unwrap();
        let h = m.device_ln1(0, &x).unwrap();
        assert!(matches!(
            m.device_block(0, &plan, 0, &x, &h, None),
            Err(Error::Protocol { layer: 0, .. })
        ));
    }

    #[test]
    fn generation_matches_reference_loop() {
        let m = Model::new(decoder(2, 8, 16), 20).unwrap();
        let prompt = vec![1, 5, 2, 7, 3, 3];
        assert!(m.generate(&prompt, 0, &partition_tokens(6, 1).unwrap()).unwrap().is_empty());
        let reference = m.generate_reference(&prompt, 6).unwrap();
        assert_eq!(m.generate(&prompt, 6, &partition_tokens(6, 1).unwrap()).unwrap(), reference);

        let mut q = m.clone();
        q.config.precision = Precision::F32;
        q.params = q.params.iter().map(|p| p.to_precision(Precision::F32)).collect();
        let reference = q.generate_reference(&prompt, 6).unwrap();
        q.set_identity_codebooks(&Input::Tokens(prompt.clone())).unwrap();
        for n in [2, 3] {
            let got = q.generate(&prompt, 6, &partition_tokens(6, n).unwrap()).unwrap();
            assert_eq!(got, reference, "N={n}");
        }
        assert!(q.generate(&prompt, 12, &partition_tokens(6, 2).unwrap()).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn lifecycle_and_mode_errors() {
        let m = Model::new(classifier(1, 4, 4, 2, ClassTokenMode::Single), 1).unwrap();
        let input = embeddings(1, 4);
        let plan = partition_tokens(4, 2).unwrap();
        let q = Quantization::Codebooks { noise: None, mode: RunMode::Inference };
        assert!(matches!(m.logits(&input, &plan, q), Err(Error::Lifecycle(_))));
        assert!(matches!(m.classify(&input, &plan), Err(Error::Lifecycle(_))));
        let mut m = m;
        m.init_codebooks(&[input.clone()], 0, KMeansOptions::default(), CovarianceMode::Isotropic).unwrap();
        let noise = NoiseConfig { lambda: 1.0, enabled: true, stream_key: 0 };
        let q = Quantization::Codebooks { noise: Some(&noise), mode: RunMode::Inference };
        assert!(matches!(m.logits(&input, &plan, q), Err(Error::Mode(_))));
        assert!(matches!(m.logits(&tokens(0, 4), &plan, Quantization::Exact), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Model::new(classifier(2, 8, 6, 3, ClassTokenMode::Single), 30).unwrap();
        m.config.precision = Precision::F32;
        m.params = m.params.iter().map(|p| p.to_precision(Precision::F32)).collect();
        m.init_codebooks(&[embeddings(3, 6)], 4, KMeansOptions::default(), CovarianceMode::Diagonal).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"ASTM");
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
        assert_eq!(back.codebooks.len(), 2);
        for (a, b) in back.codebooks.iter().zip(&m.codebooks) {
            assert_eq!(a.to_bytes(), b.to_bytes());
        }
        assert_eq!(back.to_bytes(), bytes);
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Format(_))));
    }
}
