//! A detector: backbone, optional adapters and the two-way head.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::head::{predict_from, ClassifierHead};
use crate::label::Label;
use crate::lora::{merge, AdaptedBackbone, Adapters, LayerAdapters, LoraConfig};
use crate::nn::{seeded_rng, ForwardCtx, Module};
use crate::tensor::{Param, Tape, Tensor, Var};
use crate::vit::{VitBackbone, VitConfig};

#[derive(Debug, Clone)]
pub struct MadModel {
    pub backbone: VitBackbone,
    pub adapters: Option<Adapters>,
    pub head: ClassifierHead,
}

impl MadModel {
    pub fn new(backbone: VitBackbone, head_seed: u64) -> Self {
        let head = ClassifierHead::init(backbone.config.embed_dim, head_seed);
        MadModel {
            backbone,
            adapters: None,
            head,
        }
    }

    /// Random backbone and head from one seed.
    pub fn init(config: VitConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(VitBackbone::init(config, seed)?, seed ^ 0x4845_4144))
    }

    pub fn config(&self) -> &VitConfig {
        &self.backbone.config
    }

    /// Adds fresh adapters to every q and v projection.
    pub fn inject(&mut self, config: LoraConfig, seed: u64) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::State("model already carries adapters".into()));
        }
        self.adapters = Some(Adapters::new(&self.backbone, config, seed)?);
        Ok(())
    }

    fn layers(&self) -> Option<&[LayerAdapters]> {
        self.adapters.as_ref().map(|a| a.layers.as_slice())
    }

    /// `1×1` attack probability on the tape.
    pub fn attack_probability_on(&self, tape: &mut Tape, image: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let e = self.backbone.encode_on(tape, image, self.layers(), ctx)?;
        let p = self.head.probabilities_on(tape, e)?;
        tape.slice(p, 1, Label::Attack.index(), 1)
    }

    /// Eval-mode embedding.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        self.backbone.encode(image, self.layers())
    }

    pub fn probabilities(&self, image: &Tensor) -> Result<[f64; 2]> {
        self.head.probabilities(&self.embed(image)?)
    }

    pub fn attack_score(&self, image: &Tensor) -> Result<f64> {
        Ok(self.probabilities(image)?[Label::Attack.index()])
    }

    pub fn predict(&self, image: &Tensor) -> Result<Label> {
        Ok(predict_from(self.probabilities(image)?))
    }

    /// Attack scores in input order.
    pub fn scores(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        images.par_iter().map(|im| self.attack_score(im)).collect()
    }

    /// Eval-mode loss of one sample, for gradient checks.
    pub fn loss_on(&self, tape: &mut Tape, image: &Tensor, label: Label) -> Result<Var> {
        let mut rng = seeded_rng(0, 0);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let p = self.attack_probability_on(tape, image, &mut ctx)?;
        tape.bce(p, &[label.target()], crate::head::BCE_EPS)
    }

    /// Folds the adapters into the backbone.
    pub fn merged(&self) -> Result<MadModel> {
        let adapters = self
            .adapters
            .clone()
            .ok_or_else(|| Error::State("merge needs a model with adapters".into()))?;
        let adapted = AdaptedBackbone {
            backbone: self.backbone.clone(),
            adapters,
        };
        Ok(MadModel {
            backbone: merge(&adapted)?,
            adapters: None,
            head: self.head.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.backbone.to_checkpoint();
        if let Some(a) = &self.adapters {
            a.write(&mut ckpt);
        }
        self.head.write(&mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let backbone = VitBackbone::from_checkpoint(ckpt)?;
        let adapters = Adapters::read(ckpt, &backbone)?;
        let head = ClassifierHead::read(ckpt)?
            .ok_or_else(|| Error::format("head.embed_dim", "checkpoint has no detection head"))?;
        if head.embed_dim() != backbone.config.embed_dim {
            return Err(Error::format(
                "head.embed_dim",
                format!("{} does not match backbone embed_dim {}", head.embed_dim(), backbone.config.embed_dim),
            ));
        }
        Ok(MadModel {
            backbone,
            adapters,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module for MadModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        if let Some(a) = &self.adapters {
            v.extend(a.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        if let Some(a) = &mut self.adapters {
            v.extend(a.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_keeps_scores() {
        let mut m = MadModel::init(VitConfig::TINY, 3).unwrap();
        m.inject(LoraConfig::new(2, 4.0, 0.0), 4).unwrap();
        assert_eq!(m.inject(LoraConfig::new(2, 4.0, 0.0), 4).unwrap_err().kind(), "state");
        let image = Tensor::full(&[3, 32, 32], 0.25);
        let back = MadModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.attack_score(&image).unwrap(), m.attack_score(&image).unwrap());

        let plain = MadModel::init(VitConfig::TINY, 3).unwrap();
        assert_eq!(plain.merged().unwrap_err().kind(), "state");
        assert!(MadModel::from_checkpoint(&plain.backbone.to_checkpoint()).is_err());
    }
}
