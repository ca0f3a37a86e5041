//! Two-neuron softmax detection head and its loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::nn::{Linear, Module};
use crate::tensor::{Param, Tape, Tensor, Var};

/// Probability clamp applied before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Fully connected layer with outputs `[bona-fide, attack]`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn init(embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ClassifierHead {
            linear: Linear::init("head", embed_dim, 2, &mut rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.linear.input_dim()
    }

    fn check(&self, embedding: &Tensor) -> Result<()> {
        if embedding.len() != self.embed_dim() {
            return Err(Error::dimension("head", embedding.shape(), &[self.embed_dim()]));
        }
        Ok(())
    }

    /// `1×2` logits on the tape.
    pub fn logits_on(&self, tape: &mut Tape, embedding: Var) -> Result<Var> {
        self.linear.forward(tape, embedding)
    }

    /// `1×2` class probabilities on the tape.
    pub fn probabilities_on(&self, tape: &mut Tape, embedding: Var) -> Result<Var> {
        let logits = self.logits_on(tape, embedding)?;
        tape.softmax(logits, 1)
    }

    pub fn logits(&self, embedding: &Tensor) -> Result<[f64; 2]> {
        self.check(embedding)?;
        let mut tape = Tape::new();
        let e = tape.constant(embedding.clone().reshape(&[1, self.embed_dim()])?);
        let l = self.logits_on(&mut tape, e)?;
        let d = tape.value(l).data();
        Ok([d[0], d[1]])
    }

    pub fn probabilities(&self, embedding: &Tensor) -> Result<[f64; 2]> {
        self.check(embedding)?;
        let mut tape = Tape::new();
        let e = tape.constant(embedding.clone().reshape(&[1, self.embed_dim()])?);
        let p = self.probabilities_on(&mut tape, e)?;
        let d = tape.value(p).data();
        Ok([d[0], d[1]])
    }

    pub fn predict(&self, embedding: &Tensor) -> Result<Label> {
        Ok(predict_from(self.probabilities(embedding)?))
    }

    /// Attack-class probability; higher means more attack-like.
    pub fn attack_score(&self, embedding: &Tensor) -> Result<f64> {
        Ok(self.probabilities(embedding)?[Label::Attack.index()])
    }

    pub fn write(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("head.embed_dim", self.embed_dim());
        self.write_params(ckpt);
    }

    pub fn read(ckpt: &Checkpoint) -> Result<Option<Self>> {
        if !ckpt.meta.contains_key("head.embed_dim") {
            return Ok(None);
        }
        let mut head = ClassifierHead::init(ckpt.meta_parse("head.embed_dim")?, 0);
        head.read_params(ckpt)?;
        Ok(Some(head))
    }
}

impl Module for ClassifierHead {
    fn params(&self) -> Vec<&Param> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.linear.params_mut()
    }
}

/// Argmax over `[bona-fide, attack]`; exact ties go to bona-fide.
pub fn predict_from(probabilities: [f64; 2]) -> Label {
    if probabilities[1] > probabilities[0] {
        Label::Attack
    } else {
        Label::BonaFide
    }
}

/// `-(y·ln ŷ + (1-y)·ln(1-ŷ))` with `ŷ` clamped to `[ε, 1-ε]`.
pub fn bce_loss(label: Label, attack_probability: f64) -> f64 {
    let y = label.target();
    let p = attack_probability.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn head_with(weight: Tensor, bias: [f64; 2]) -> ClassifierHead {
        let mut h = ClassifierHead::init(weight.cols(), 0);
        h.linear.weight.value = weight;
        h.linear.bias.value = Tensor::new(vec![2], bias.to_vec()).unwrap();
        h
    }

    #[test]
    fn zero_head_is_uniform() {
        let h = head_with(Tensor::zeros(&[2, 4]), [0.0, 0.0]);
        let e = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(h.probabilities(&e).unwrap(), [0.5, 0.5]);
        assert_eq!(h.predict(&e).unwrap(), Label::BonaFide);
    }

    #[test]
    fn bias_only_closed_form() {
        let h = head_with(Tensor::zeros(&[2, 3]), [0.0, 3f64.ln()]);
        let p = h.probabilities(&Tensor::zeros(&[3])).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!((h.attack_score(&Tensor::zeros(&[3])).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(h.predict(&Tensor::zeros(&[3])).unwrap(), Label::Attack);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let h = ClassifierHead::init(4, 0);
        assert_eq!(h.logits(&Tensor::zeros(&[5])).unwrap_err().kind(), "dimension");
    }

    #[test]
    fn prediction_rule() {
        assert_eq!(predict_from([0.7, 0.3]), Label::BonaFide);
        assert_eq!(predict_from([0.5, 0.5]), Label::BonaFide);
        assert_eq!(predict_from([0.2, 0.8]), Label::Attack);
    }

    #[test]
    fn bce_closed_forms() {
        assert!(bce_loss(Label::Attack, 1.0) < 1e-6);
        assert!((bce_loss(Label::Attack, 0.5) - 2f64.ln()).abs() < 1e-12);
        assert!((bce_loss(Label::BonaFide, 0.9) + 0.1f64.ln()).abs() < 1e-12);
        assert!(bce_loss(Label::BonaFide, 1.0).is_finite());
    }

    #[test]
    fn bce_derivative_matches_finite_differences() {
        for &p in &[0.05, 0.3, 0.5, 0.8, 0.97] {
            for label in [Label::BonaFide, Label::Attack] {
                let mut tape = Tape::new();
                let v = tape.input(Tensor::scalar(p));
                let l = tape.bce(v, &[label.target()], BCE_EPS).unwrap();
                let analytic = tape.backward(l).unwrap().get(v).unwrap().data()[0];
                let h = 1e-6;
                let numeric = (bce_loss(label, p + h) - bce_loss(label, p - h)) / (2.0 * h);
                assert!(((analytic - numeric) / numeric).abs() < 1e-6, "{p} {label}");
            }
        }
    }

    proptest! {
        #[test]
        fn head_invariants(
            w in prop::collection::vec(-2.0f64..2.0, 8),
            b in prop::array::uniform2(-2.0f64..2.0),
            e in prop::collection::vec(-3.0f64..3.0, 4),
            shift in -10.0f64..10.0,
        ) {
            let h = head_with(Tensor::new(vec![2, 4], w).unwrap(), b);
            let e = Tensor::new(vec![4], e).unwrap();
            let p = h.probabilities(&e).unwrap();
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            let s = h.attack_score(&e).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            if p[0] != p[1] {
                prop_assert_eq!(h.predict(&e).unwrap() == Label::Attack, s > 0.5);
            }
            let shifted = head_with(h.linear.weight.value.clone(), [b[0] + shift, b[1] + shift]);
            prop_assert_eq!(shifted.predict(&e).unwrap(), h.predict(&e).unwrap());
        }

        #[test]
        fn bce_label_flip_symmetry(p in 0.0f64..1.0) {
            let a = bce_loss(Label::Attack, p);
            let b = bce_loss(Label::BonaFide, 1.0 - p);
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn score_ranking_follows_logit_gap(
            w in prop::collection::vec(-1.0f64..1.0, 6),
            es in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..20),
        ) {
            let h = head_with(Tensor::new(vec![2, 3], w).unwrap(), [0.1, -0.2]);
            let mut pairs: Vec<(f64, f64)> = es.iter().map(|e| {
                let e = Tensor::new(vec![3], e.clone()).unwrap();
                let l = h.logits(&e).unwrap();
                (l[1] - l[0], h.attack_score(&e).unwrap())
            }).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1 + 1e-15);
            }
        }
    }
}
