//! Rank-stabilized low-rank adapters on the query and value projections.
//!
//! A frozen projection `W₀` (d×k) is augmented with trainable factors
//! `B` (d×r) and `A` (r×k):
//!
//! ```text
//! y = W₀·x + γ·B·A·x,    γ = α/√r
//! ```
//!
//! `B` starts at zero, so injection leaves the encoder's function
//! unchanged. After training, [`merge`] folds `γ·B·A` back into `W₀` and
//! returns a plain backbone with no extra inference cost.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, ForwardCtx, Linear, Module, INIT_STD};
use crate::tensor::{Param, Tape, Tensor, Var};
use crate::vit::VitBackbone;

/// Rank-stabilized scaling factor `α/√r`.
pub fn gamma(alpha: f64, rank: usize) -> Result<f64> {
    LoraScaling::RankStabilized.factor(alpha, rank)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoraScaling {
    /// `α/√r`
    #[default]
    RankStabilized,
    /// `α/r`, the original formulation.
    Standard,
}

impl LoraScaling {
    pub fn factor(self, alpha: f64, rank: usize) -> Result<f64> {
        if rank == 0 {
            return Err(Error::Parameter("LoRA rank must be at least 1".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::Parameter(format!("LoRA alpha must be positive, got {alpha}")));
        }
        Ok(match self {
            LoraScaling::RankStabilized => alpha / (rank as f64).sqrt(),
            LoraScaling::Standard => alpha / rank as f64,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            LoraScaling::RankStabilized => "rs",
            LoraScaling::Standard => "standard",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "rs" => Ok(LoraScaling::RankStabilized),
            "standard" => Ok(LoraScaling::Standard),
            other => Err(Error::format("lora.scaling", format!("unknown scaling {other:?}"))),
        }
    }
}

/// How the adapter of one projection is partitioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdapterLayout {
    /// One (A, B) pair for the whole d×d projection.
    #[default]
    Composite,
    /// An independent (Aᵢ, Bᵢ) pair per attention head, each producing that
    /// head's slice of the output features.
    PerHead,
}

impl AdapterLayout {
    fn as_str(self) -> &'static str {
        match self {
            AdapterLayout::Composite => "composite",
            AdapterLayout::PerHead => "per_head",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(AdapterLayout::Composite),
            "per_head" => Ok(AdapterLayout::PerHead),
            other => Err(Error::format("lora.layout", format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub scaling: LoraScaling,
    pub layout: AdapterLayout,
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64, dropout: f64) -> Self {
        LoraConfig {
            rank,
            alpha,
            dropout,
            scaling: LoraScaling::RankStabilized,
            layout: AdapterLayout::Composite,
        }
    }
}

/// Trainable factors attached to one frozen projection.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: Param,
    pub b: Param,
    alpha: f64,
    dropout: f64,
    scaling: LoraScaling,
}

impl LoraPair {
    /// `A` (r×k) truncated normal, `B` (d×r) zero.
    pub fn new(
        name: &str,
        out_dim: usize,
        in_dim: usize,
        cfg: &LoraConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.scaling.factor(cfg.alpha, cfg.rank)?;
        if cfg.rank >= out_dim.min(in_dim) {
            return Err(Error::Config(format!(
                "LoRA rank {} must be below min({out_dim}, {in_dim})",
                cfg.rank
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Parameter(format!(
                "LoRA dropout must lie in [0, 1), got {}",
                cfg.dropout
            )));
        }
        Ok(LoraPair {
            a: Param::new(format!("{name}.A"), trunc_normal(rng, &[cfg.rank, in_dim], INIT_STD)),
            b: Param::new(format!("{name}.B"), Tensor::zeros(&[out_dim, cfg.rank])),
            alpha: cfg.alpha,
            dropout: cfg.dropout,
            scaling: cfg.scaling,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.value.shape()[0]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Changes α; γ follows automatically.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        self.scaling.factor(alpha, self.rank())?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn gamma(&self) -> f64 {
        self.scaling
            .factor(self.alpha, self.rank())
            .expect("validated at construction")
    }

    /// `ΔW = γ·B·A`
    pub fn delta(&self) -> Tensor {
        self.b
            .value
            .matmul(&self.a.value)
            .expect("factor shapes compose")
            .scale(self.gamma())
    }

    /// `γ·(x·Aᵀ)·Bᵀ` on an already dropped-out input.
    fn branch(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = tape.param(&self.a);
        let b = tape.param(&self.b);
        let low = tape.matmul_nt(x, a)?;
        let up = tape.matmul_nt(low, b)?;
        Ok(tape.scale(up, self.gamma()))
    }
}

impl Module for LoraPair {
    fn params(&self) -> Vec<&Param> {
        vec![&self.a, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.a, &mut self.b]
    }
}

/// The adapter of one projection: one pair, or one pair per head.
#[derive(Debug, Clone)]
pub struct ProjectionAdapter {
    pub pairs: Vec<LoraPair>,
}

impl ProjectionAdapter {
    fn new(name: &str, base: &Linear, heads: usize, cfg: &LoraConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, k) = (base.output_dim(), base.input_dim());
        let pairs = match cfg.layout {
            AdapterLayout::Composite => vec![LoraPair::new(name, d, k, cfg, rng)?],
            AdapterLayout::PerHead => (0..heads)
                .map(|h| LoraPair::new(&format!("{name}.head{h}"), d / heads, k, cfg, rng))
                .collect::<Result<_>>()?,
        };
        Ok(ProjectionAdapter { pairs })
    }

    /// `W₀·x + b₀ + γ·B·A·dropout(x)`; dropout only touches the adapter branch.
    pub fn forward(&self, tape: &mut Tape, x: Var, base: &Linear, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let out_dim: usize = self.pairs.iter().map(|p| p.b.value.shape()[0]).sum();
        let in_dim = self.pairs[0].a.value.shape()[1];
        if out_dim != base.output_dim() || in_dim != base.input_dim() {
            return Err(Error::Config(format!(
                "adapter maps {in_dim}→{out_dim} but projection maps {}→{}",
                base.input_dim(),
                base.output_dim()
            )));
        }
        let frozen = base.forward(tape, x)?;
        let dropped = tape.dropout(x, self.pairs[0].dropout, ctx.training, &mut *ctx.rng)?;
        let branch = if self.pairs.len() == 1 {
            self.pairs[0].branch(tape, dropped)?
        } else {
            let parts = self
                .pairs
                .iter()
                .map(|p| p.branch(tape, dropped))
                .collect::<Result<Vec<_>>>()?;
            tape.concat(&parts, 1)?
        };
        tape.add(frozen, branch)
    }

    /// Full d×k update, per-head blocks stacked by rows.
    pub fn delta(&self) -> Tensor {
        let deltas: Vec<Tensor> = self.pairs.iter().map(LoraPair::delta).collect();
        let cols = deltas[0].cols();
        let rows: usize = deltas.iter().map(Tensor::rows).sum();
        let data = deltas.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![rows, cols], data).expect("stacked delta")
    }

    /// Read-only view of the rows of the update that feed head `h`.
    pub fn head_delta(&self, h: usize, heads: usize) -> Tensor {
        let full = self.delta();
        let dk = full.rows() / heads;
        let cols = full.cols();
        Tensor::new(vec![dk, cols], full.data()[h * dk * cols..(h + 1) * dk * cols].to_vec())
            .expect("head slice")
    }
}

impl Module for ProjectionAdapter {
    fn params(&self) -> Vec<&Param> {
        self.pairs.iter().flat_map(|p| p.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.pairs.iter_mut().flat_map(|p| p.params_mut()).collect()
    }
}

/// Query and value adapters of one transformer block. Keys, the output
/// projection and the MLP are never adapted.
#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub q: ProjectionAdapter,
    pub v: ProjectionAdapter,
}

impl Module for LayerAdapters {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.q.params();
        v.extend(self.v.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.q.params_mut();
        v.extend(self.v.params_mut());
        v
    }
}

/// The adapters for every block of one backbone.
#[derive(Debug, Clone)]
pub struct Adapters {
    pub config: LoraConfig,
    pub layers: Vec<LayerAdapters>,
}

impl Adapters {
    pub fn new(backbone: &VitBackbone, config: LoraConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = backbone.config.heads;
        let layers = backbone
            .blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                let attn = &block.attention;
                Ok(LayerAdapters {
                    q: ProjectionAdapter::new(&format!("lora.{i}.q"), &attn.q, heads, &config, &mut rng)?,
                    v: ProjectionAdapter::new(&format!("lora.{i}.v"), &attn.v, heads, &config, &mut rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Adapters { config, layers })
    }

    /// Closed-form trainable count for a backbone of the given shape.
    pub fn expected_count(backbone: &crate::vit::VitConfig, cfg: &LoraConfig) -> usize {
        let (d, r) = (backbone.width, cfg.rank);
        let per_projection = match cfg.layout {
            AdapterLayout::Composite => r * d + d * r,
            AdapterLayout::PerHead => backbone.heads * r * d + d * r,
        };
        backbone.depth * 2 * per_projection
    }

    pub fn write(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("lora.layers", self.layers.len());
        ckpt.set_meta("lora.rank", self.config.rank);
        ckpt.set_meta("lora.alpha", self.config.alpha);
        ckpt.set_meta("lora.dropout", self.config.dropout);
        ckpt.set_meta("lora.scaling", self.config.scaling.as_str());
        ckpt.set_meta("lora.layout", self.config.layout.as_str());
        for (i, layer) in self.layers.iter().enumerate() {
            for (proj, adapter) in [("q", &layer.q), ("v", &layer.v)] {
                let p = &adapter.pairs[0];
                ckpt.set_meta(
                    format!("lora.{i}.{proj}"),
                    format!("r={},alpha={},dropout={}", p.rank(), p.alpha(), p.dropout()),
                );
            }
        }
        self.write_params(ckpt);
    }

    /// `None` when the checkpoint carries no adapter blocks.
    pub fn read(ckpt: &Checkpoint, backbone: &VitBackbone) -> Result<Option<Self>> {
        if !ckpt.meta.contains_key("lora.rank") {
            return Ok(None);
        }
        let config = LoraConfig {
            rank: ckpt.meta_parse("lora.rank")?,
            alpha: ckpt.meta_parse("lora.alpha")?,
            dropout: ckpt.meta_parse("lora.dropout")?,
            scaling: LoraScaling::parse(ckpt.meta_str("lora.scaling")?)?,
            layout: AdapterLayout::parse(ckpt.meta_str("lora.layout")?)?,
        };
        let layers: usize = ckpt.meta_parse("lora.layers")?;
        if layers != backbone.blocks.len() {
            return Err(Error::format(
                "lora.layers",
                format!("{layers} adapter layers for {} blocks", backbone.blocks.len()),
            ));
        }
        let mut adapters =
            Adapters::new(backbone, config, 0).map_err(|e| Error::format("lora", e.to_string()))?;
        adapters.read_params(ckpt)?;
        Ok(Some(adapters))
    }
}

impl Module for Adapters {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// A frozen backbone together with its adapters.
#[derive(Debug, Clone)]
pub struct AdaptedBackbone {
    pub backbone: VitBackbone,
    pub adapters: Adapters,
}

impl AdaptedBackbone {
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.backbone.encode(image, Some(&self.adapters.layers))
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters
            .params()
            .iter()
            .filter(|p| !p.is_frozen())
            .map(|p| p.numel())
            .sum()
    }
}

/// Wraps every block's q and v projection with fresh adapters and freezes
/// the whole backbone.
pub fn inject(mut backbone: VitBackbone, config: LoraConfig, seed: u64) -> Result<AdaptedBackbone> {
    let adapters = Adapters::new(&backbone, config, seed)?;
    backbone.set_frozen(true);
    Ok(AdaptedBackbone { backbone, adapters })
}

/// Folds `γ·B·A` into the q and v weights. The result carries no adapter
/// state and keeps the frozen flags of the input backbone.
pub fn merge(adapted: &AdaptedBackbone) -> Result<VitBackbone> {
    let mut merged = adapted.backbone.clone();
    if adapted.adapters.layers.len() != merged.blocks.len() {
        return Err(Error::State("adapter count does not match backbone depth".into()));
    }
    for (block, layer) in merged.blocks.iter_mut().zip(&adapted.adapters.layers) {
        for (proj, adapter) in [
            (&mut block.attention.q, &layer.q),
            (&mut block.attention.v, &layer.v),
        ] {
            proj.weight.value = proj.weight.value.add(&adapter.delta())?;
        }
    }
    for p in merged.params_mut() {
        p.renew_id();
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;
    use rand::Rng;

    fn image(cfg: &VitConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn randomize_b(adapters: &mut Adapters, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut adapters.layers {
            for pair in layer.q.pairs.iter_mut().chain(layer.v.pairs.iter_mut()) {
                let shape = pair.b.value.shape().to_vec();
                pair.b.value = trunc_normal(&mut rng, &shape, 0.05);
            }
        }
    }

    #[test]
    fn gamma_values() {
        assert!((gamma(4.0, 2).unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((gamma(8.0, 2).unwrap() - 4.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(gamma(3.5, 1).unwrap(), 3.5);
        assert!(gamma(4.0, 0).is_err());
        assert!(gamma(0.0, 2).is_err());
        assert_eq!(LoraScaling::Standard.factor(4.0, 2).unwrap(), 2.0);
    }

    #[test]
    fn pair_starts_with_zero_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LoraPair::new("p", 8, 8, &LoraConfig::new(2, 4.0, 0.0), &mut rng).unwrap();
        assert!(p.b.value.data().iter().all(|&v| v == 0.0));
        assert!(p.delta().data().iter().all(|&v| v == 0.0));
        assert!(LoraPair::new("p", 8, 8, &LoraConfig::new(8, 4.0, 0.0), &mut rng).is_err());
        assert!(LoraPair::new("p", 8, 8, &LoraConfig::new(2, 4.0, 1.0), &mut rng).is_err());
    }

    fn single_forward(base: &Linear, adapter: &ProjectionAdapter, x: &Tensor) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = adapter.forward(&mut tape, xv, base, &mut ctx).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_b_reproduces_the_frozen_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Linear::init("w", 6, 6, &mut rng);
        let adapter = ProjectionAdapter::new("a", &base, 2, &LoraConfig::new(2, 4.0, 0.0), &mut rng).unwrap();
        let x = trunc_normal(&mut rng, &[3, 6], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let plain = base.forward(&mut tape, xv).unwrap();
        assert_eq!(&single_forward(&base, &adapter, &x), tape.value(plain));
    }

    #[test]
    fn rank_one_hand_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut base = Linear::init("w", 3, 3, &mut rng);
        base.weight.value = Tensor::zeros(&[3, 3]);
        let cfg = LoraConfig::new(1, 1.0, 0.0);
        let mut adapter = ProjectionAdapter::new("a", &base, 1, &cfg, &mut rng).unwrap();
        adapter.pairs[0].a.value = Tensor::ones(&[1, 3]);
        adapter.pairs[0].b.value = Tensor::ones(&[3, 1]);
        let x = Tensor::row(&[1.0, 2.0, 4.0]);
        assert_eq!(single_forward(&base, &adapter, &x).data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn gradient_reaches_factors_but_not_frozen_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut base = Linear::init("w", 4, 4, &mut rng);
        base.set_frozen(true);
        let mut adapter = ProjectionAdapter::new("a", &base, 1, &LoraConfig::new(1, 2.0, 0.0), &mut rng).unwrap();
        adapter.pairs[0].b.value = Tensor::full(&[4, 1], 0.3);
        let x = trunc_normal(&mut rng, &[2, 4], 1.0);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::train(&mut ctx_rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = adapter.forward(&mut tape, xv, &base, &mut ctx).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param(base.weight.id()).is_none());
        assert!(grads.param(base.bias.id()).is_none());
        assert!(grads.param(adapter.pairs[0].a.id()).is_some());
        assert!(grads.param(adapter.pairs[0].b.id()).is_some());
    }

    #[test]
    fn doubling_alpha_doubles_the_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Linear::init("w", 6, 6, &mut rng);
        let mut adapter = ProjectionAdapter::new("a", &base, 1, &LoraConfig::new(2, 4.0, 0.0), &mut rng).unwrap();
        adapter.pairs[0].b.value = trunc_normal(&mut rng, &[6, 2], 0.1);
        let x = trunc_normal(&mut rng, &[3, 6], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let plain = base.forward(&mut tape, xv).unwrap();
        let plain = tape.value(plain).clone();
        let once = single_forward(&base, &adapter, &x).add(&plain.scale(-1.0)).unwrap();
        adapter.pairs[0].set_alpha(8.0).unwrap();
        let twice = single_forward(&base, &adapter, &x).add(&plain.scale(-1.0)).unwrap();
        assert!(twice.max_abs_diff(&once.scale(2.0)) < 1e-12);
    }

    #[test]
    fn injection_preserves_function_and_freezes_backbone() {
        let cfg = VitConfig::TINY;
        let backbone = VitBackbone::init(cfg, 5).unwrap();
        let img = image(&cfg, 6);
        let before = backbone.encode(&img, None).unwrap();
        let adapted = inject(backbone, LoraConfig::new(2, 4.0, 0.4), 7).unwrap();
        assert!(adapted.encode(&img).unwrap().bit_eq(&before));
        assert!(adapted.backbone.params().iter().all(|p| p.is_frozen()));
        assert_eq!(adapted.trainable_count(), 2048);
        assert_eq!(Adapters::expected_count(&cfg, &adapted.adapters.config), 2048);
    }

    #[test]
    fn per_head_layout_counts_and_matches_stacked_delta() {
        let cfg = VitConfig::TINY;
        let mut lc = LoraConfig::new(2, 4.0, 0.0);
        lc.layout = AdapterLayout::PerHead;
        let backbone = VitBackbone::init(cfg, 8).unwrap();
        let mut adapted = inject(backbone, lc, 9).unwrap();
        assert_eq!(adapted.trainable_count(), Adapters::expected_count(&cfg, &lc));
        randomize_b(&mut adapted.adapters, 10);
        let q = &adapted.adapters.layers[0].q;
        assert_eq!(q.pairs.len(), cfg.heads);
        for h in 0..cfg.heads {
            assert!(q.head_delta(h, cfg.heads).bit_eq(&q.pairs[h].delta()));
        }
        let merged = merge(&adapted).unwrap();
        let img = image(&cfg, 11);
        let diff = merged
            .encode(&img, None)
            .unwrap()
            .max_abs_diff(&adapted.encode(&img).unwrap());
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn untrained_merge_is_bit_identical() {
        let backbone = VitBackbone::init(VitConfig::TINY, 12).unwrap();
        let original = backbone.clone();
        let adapted = inject(backbone, LoraConfig::new(2, 4.0, 0.0), 13).unwrap();
        let merged = merge(&adapted).unwrap();
        for (a, b) in original.params().iter().zip(merged.params()) {
            assert!(a.value.bit_eq(&b.value), "{}", a.name());
        }
        assert!(merged.to_checkpoint().names().all(|n| !n.starts_with("lora")));
    }

    #[test]
    fn merge_equivalence_over_settings() {
        let cfg = VitConfig::TINY;
        for (r, alpha) in [(1, 4.0), (2, 4.0), (2, 8.0), (4, 8.0)] {
            let backbone = VitBackbone::init(cfg, 14).unwrap();
            let mut adapted = inject(backbone, LoraConfig::new(r, alpha, 0.2), 15).unwrap();
            randomize_b(&mut adapted.adapters, 16 + r as u64);
            let merged = merge(&adapted).unwrap();
            for s in 0..3 {
                let img = image(&cfg, 100 + s);
                let diff = merged
                    .encode(&img, None)
                    .unwrap()
                    .max_abs_diff(&adapted.encode(&img).unwrap());
                assert!(diff < 1e-9, "r={r} alpha={alpha}: {diff}");
            }
        }
    }

    #[test]
    fn keys_and_mlp_are_untouched_by_injection() {
        let backbone = VitBackbone::init(VitConfig::TINY, 17).unwrap();
        let mut adapted = inject(backbone.clone(), LoraConfig::new(2, 4.0, 0.0), 18).unwrap();
        randomize_b(&mut adapted.adapters, 19);
        let merged = merge(&adapted).unwrap();
        for (orig, new) in backbone.blocks.iter().zip(&merged.blocks) {
            for (a, b) in [
                (&orig.attention.k, &new.attention.k),
                (&orig.attention.o, &new.attention.o),
                (&orig.fc1, &new.fc1),
                (&orig.fc2, &new.fc2),
            ] {
                assert!(a.weight.value.bit_eq(&b.weight.value));
            }
            assert!(!orig.attention.q.weight.value.bit_eq(&new.attention.q.weight.value));
        }
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let backbone = VitBackbone::init(VitConfig::TINY, 20).unwrap();
        let mut adapted = inject(backbone, LoraConfig::new(2, 8.0, 0.2), 21).unwrap();
        randomize_b(&mut adapted.adapters, 22);
        let mut ckpt = adapted.backbone.to_checkpoint();
        adapted.adapters.write(&mut ckpt);
        assert_eq!(ckpt.meta_str("lora.3.v").unwrap(), "r=2,alpha=8,dropout=0.2");
        let back = Adapters::read(&ckpt, &adapted.backbone).unwrap().unwrap();
        assert_eq!(back.config, adapted.adapters.config);
        for (a, b) in back.params().iter().zip(adapted.adapters.params()) {
            assert!(a.value.bit_eq(&b.value));
        }
        assert!(Adapters::read(&adapted.backbone.to_checkpoint(), &adapted.backbone)
            .unwrap()
            .is_none());
    }
}
