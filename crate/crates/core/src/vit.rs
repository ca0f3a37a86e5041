//! Vision-transformer image encoder.
//!
//! An image is cut into non-overlapping square patches, each patch is
//! linearly projected to the model width, a learnable CLS token is
//! prepended and learnable position embeddings are added. The sequence then
//! passes through `depth` pre-norm blocks
//!
//! ```text
//! h   = x + Attention(LN₁(x))
//! out = h + MLP(LN₂(h))
//! ```
//!
//! and the CLS row of the final layer norm is projected to the shared
//! embedding space.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lora::LayerAdapters;
use crate::nn::{trunc_normal, ForwardCtx, LayerNorm, Linear, Module, INIT_STD};
use crate::tensor::{Param, Tape, Tensor, Var};

/// Pixel normalization recorded with every checkpoint.
pub const NORMALIZATION: &str = "minus_one_to_one";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
}

impl VitConfig {
    /// Base model, patch 16 at 224 px (about 86M parameters).
    pub const VIT_B: VitConfig = VitConfig {
        image_size: 224,
        patch_size: 16,
        channels: 3,
        depth: 12,
        width: 768,
        heads: 12,
        mlp_ratio: 4,
        embed_dim: 512,
    };

    /// Large model, patch 14 at 224 px (about 0.3B parameters).
    pub const VIT_L: VitConfig = VitConfig {
        image_size: 224,
        patch_size: 14,
        channels: 3,
        depth: 24,
        width: 1024,
        heads: 16,
        mlp_ratio: 4,
        embed_dim: 768,
    };

    /// Desk-scale model that trains on a CPU in minutes.
    pub const TINY: VitConfig = VitConfig {
        image_size: 32,
        patch_size: 8,
        channels: 3,
        depth: 4,
        width: 64,
        heads: 4,
        mlp_ratio: 4,
        embed_dim: 64,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "tiny" => Ok(Self::TINY),
            "vit-b" | "vitb" => Ok(Self::VIT_B),
            "vit-l" | "vitl" => Ok(Self::VIT_L),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.depth,
            self.width,
            self.heads,
            self.mlp_ratio,
            self.embed_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all sizes must be positive: {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Closed-form parameter count, matching [`VitBackbone::init`].
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let hidden = d * self.mlp_ratio;
        let embed = self.patch_dim() * d + d + d + self.seq_len() * d;
        let block = 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 4 * d;
        let tail = 2 * d + d * self.embed_dim + self.embed_dim;
        embed + self.depth * block + tail
    }

    fn write_meta(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("vit.image_size", self.image_size);
        ckpt.set_meta("vit.patch_size", self.patch_size);
        ckpt.set_meta("vit.channels", self.channels);
        ckpt.set_meta("vit.depth", self.depth);
        ckpt.set_meta("vit.width", self.width);
        ckpt.set_meta("vit.heads", self.heads);
        ckpt.set_meta("vit.mlp_ratio", self.mlp_ratio);
        ckpt.set_meta("vit.embed_dim", self.embed_dim);
        ckpt.set_meta("vit.normalization", NORMALIZATION);
    }

    fn read_meta(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = VitConfig {
            image_size: ckpt.meta_parse("vit.image_size")?,
            patch_size: ckpt.meta_parse("vit.patch_size")?,
            channels: ckpt.meta_parse("vit.channels")?,
            depth: ckpt.meta_parse("vit.depth")?,
            width: ckpt.meta_parse("vit.width")?,
            heads: ckpt.meta_parse("vit.heads")?,
            mlp_ratio: ckpt.meta_parse("vit.mlp_ratio")?,
            embed_dim: ckpt.meta_parse("vit.embed_dim")?,
        };
        let norm = ckpt.meta_str("vit.normalization")?;
        if norm != NORMALIZATION {
            return Err(Error::format(
                "vit.normalization",
                format!("unsupported normalization {norm:?}"),
            ));
        }
        cfg.validate()
            .map_err(|e| Error::format("vit", e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub projection: Linear,
    pub cls_token: Param,
    pub position: Param,
    config: VitConfig,
}

impl PatchEmbedder {
    fn init(config: &VitConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.width;
        PatchEmbedder {
            projection: Linear::init("embed.proj", config.patch_dim(), d, rng),
            cls_token: Param::new("embed.cls", trunc_normal(rng, &[1, d], INIT_STD)),
            position: Param::new(
                "embed.pos",
                trunc_normal(rng, &[config.seq_len(), d], INIT_STD),
            ),
            config: *config,
        }
    }

    /// Flattens a `C×H×W` image into `P × (C·p·p)` patch rows, patches in
    /// row-major grid order, each patch channel-major then row-major.
    pub fn patches(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let expected = [c.channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(Error::dimension("tokenize", image.shape(), &expected));
        }
        let (p, s, g) = (c.patch_size, c.image_size, c.grid());
        let src = image.data();
        let mut out = Vec::with_capacity(c.num_patches() * c.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.channels {
                    for y in 0..p {
                        let row = (ch * s + gy * p + y) * s + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
        Tensor::new(vec![c.num_patches(), c.patch_dim()], out)
    }

    pub fn tokenize_on(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let patches = tape.constant(self.patches(image)?);
        let projected = self.projection.forward(tape, patches)?;
        let cls = tape.param(&self.cls_token);
        let seq = tape.concat(&[cls, projected], 0)?;
        let pos = tape.param(&self.position);
        tape.add(seq, pos)
    }
}

impl Module for PatchEmbedder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.projection.params();
        v.push(&self.cls_token);
        v.push(&self.position);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.projection.params_mut();
        v.push(&mut self.cls_token);
        v.push(&mut self.position);
        v
    }
}

/// Multi-head self-attention with separate q/k/v/o projections.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionLayer {
    fn init(name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionLayer {
            q: Linear::init(&format!("{name}.q"), d, d, rng),
            k: Linear::init(&format!("{name}.k"), d, d, rng),
            v: Linear::init(&format!("{name}.v"), d, d, rng),
            o: Linear::init(&format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn width(&self) -> usize {
        self.q.output_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    /// Per head `Softmax(QᵢKᵢᵀ/√d_k)·Vᵢ`, heads concatenated along features,
    /// then the output projection. Adapters, when given, augment only the
    /// query and value projections.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        adapters: Option<&LayerAdapters>,
        ctx: &mut ForwardCtx<'_>,
        mut probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let d = tape.value(x).cols();
        if d != self.width() {
            return Err(Error::dimension("attention", tape.value(x).shape(), &[d, self.width()]));
        }
        let (q, v) = match adapters {
            Some(a) => (
                a.q.forward(tape, x, &self.q, ctx)?,
                a.v.forward(tape, x, &self.v, ctx)?,
            ),
            None => (self.q.forward(tape, x)?, self.v.forward(tape, x)?),
        };
        let k = self.k.forward(tape, x)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dk, dk)?;
            let kh = tape.slice(k, 1, h * dk, dk)?;
            let vh = tape.slice(v, 1, h * dk, dk)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let weights = tape.softmax(logits, 1)?;
            if let Some(p) = probe.as_deref_mut() {
                p.push(tape.value(weights).clone());
            }
            outputs.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat(&outputs, 1)?;
        self.o.forward(tape, joined)
    }
}

impl Module for AttentionLayer {
    fn params(&self) -> Vec<&Param> {
        [&self.q, &self.k, &self.v, &self.o]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: AttentionLayer,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    fn init(index: usize, config: &VitConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.width;
        let name = format!("blocks.{index}");
        TransformerBlock {
            norm1: LayerNorm::new(&format!("{name}.norm1"), d),
            attention: AttentionLayer::init(&format!("{name}.attn"), d, config.heads, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), d),
            fc1: Linear::init(&format!("{name}.mlp.fc1"), d, d * config.mlp_ratio, rng),
            fc2: Linear::init(&format!("{name}.mlp.fc2"), d * config.mlp_ratio, d, rng),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        adapters: Option<&LayerAdapters>,
        ctx: &mut ForwardCtx<'_>,
        opts: &EncodeOptions,
        probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let n1 = self.norm1.forward(tape, x)?;
        let a = self.attention.forward(tape, n1, adapters, ctx, probe)?;
        let h = if opts.residual { tape.add(x, a)? } else { a };
        let n2 = self.norm2.forward(tape, h)?;
        let m = self.fc1.forward(tape, n2)?;
        let m = tape.gelu(m);
        let m = self.fc2.forward(tape, m)?;
        if opts.residual {
            tape.add(h, m)
        } else {
            Ok(m)
        }
    }
}

impl Module for TransformerBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm1.params();
        v.extend(self.attention.params());
        v.extend(self.norm2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm1.params_mut();
        v.extend(self.attention.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncodeOptions {
    pub residual: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { residual: true }
    }
}

#[derive(Debug, Clone)]
pub struct VitBackbone {
    pub config: VitConfig,
    pub embedder: PatchEmbedder,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub projection: Linear,
}

impl VitBackbone {
    /// Truncated-normal (σ = 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = PatchEmbedder::init(&config, &mut rng);
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::init(i, &config, &mut rng))
            .collect();
        Ok(VitBackbone {
            config,
            embedder,
            blocks,
            final_norm: LayerNorm::new("norm", config.width),
            projection: Linear::init("proj", config.width, config.embed_dim, &mut rng),
        })
    }

    pub fn tokenize(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = self.embedder.tokenize_on(&mut tape, image)?;
        Ok(tape.value(t).clone())
    }

    /// Records the full encoder on `tape`, returning the `1 × embed_dim`
    /// embedding.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        adapters: Option<&[LayerAdapters]>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        self.encode_inner(tape, image, adapters, ctx, &EncodeOptions::default(), None)
    }

    pub(crate) fn encode_inner(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        adapters: Option<&[LayerAdapters]>,
        ctx: &mut ForwardCtx<'_>,
        opts: &EncodeOptions,
        mut probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        if let Some(a) = adapters {
            if a.len() != self.blocks.len() {
                return Err(Error::Config(format!(
                    "{} adapter layers for {} blocks",
                    a.len(),
                    self.blocks.len()
                )));
            }
        }
        let mut x = self.embedder.tokenize_on(tape, image)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = adapters.map(|a| &a[i]);
            x = block.forward(tape, x, layer, ctx, opts, probe.as_deref_mut())?;
        }
        let x = self.final_norm.forward(tape, x)?;
        let cls = tape.slice(x, 0, 0, 1)?;
        self.projection.forward(tape, cls)
    }

    /// Eval-mode embedding of one preprocessed `C×H×W` image.
    pub fn encode(&self, image: &Tensor, adapters: Option<&[LayerAdapters]>) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let mut tape = Tape::new();
        let e = self.encode_on(&mut tape, image, adapters, &mut ctx)?;
        tape.value(e).clone().reshape(&[self.config.embed_dim])
    }

    /// Attention weight matrices, indexed `[layer][head]`, for one image.
    pub fn attention_maps(
        &self,
        image: &Tensor,
        adapters: Option<&[LayerAdapters]>,
    ) -> Result<Vec<Vec<Tensor>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let mut tape = Tape::new();
        let mut maps = Vec::new();
        self.encode_inner(
            &mut tape,
            image,
            adapters,
            &mut ctx,
            &EncodeOptions::default(),
            Some(&mut maps),
        )?;
        Ok(maps
            .chunks(self.config.heads)
            .map(<[Tensor]>::to_vec)
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.config.write_meta(&mut ckpt);
        self.write_params(&mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = VitConfig::read_meta(ckpt)?;
        let mut backbone = VitBackbone::init(config, 0)?;
        backbone.read_params(ckpt)?;
        Ok(backbone)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for VitBackbone {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.embedder.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.final_norm.params());
        v.extend(self.projection.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.embedder.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.final_norm.params_mut());
        v.extend(self.projection.params_mut());
        v
    }
}
