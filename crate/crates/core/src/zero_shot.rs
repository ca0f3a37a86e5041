//! Zero-shot classification by cosine similarity between an image
//! embedding and one embedding per label.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::tensor::Tensor;
use crate::vit::VitBackbone;

pub const ATTACK_PROMPT: &str = "face image morphing attack";
pub const BONAFIDE_PROMPT: &str = "bona-fide presentation";

pub fn canonical_prompt(label: Label) -> &'static str {
    match label {
        Label::BonaFide => BONAFIDE_PROMPT,
        Label::Attack => ATTACK_PROMPT,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dimension("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Parameter("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding {
    pub label: Label,
    pub prompt: String,
    /// Unit norm.
    pub vector: Vec<f64>,
}

impl LabelEmbedding {
    pub fn new(label: Label, prompt: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let n = norm(&vector);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::format(label.as_str(), "label vector must be nonzero and finite"));
        }
        Ok(LabelEmbedding {
            label,
            prompt: prompt.into(),
            vector: vector.iter().map(|x| x / n).collect(),
        })
    }
}

/// One embedding per label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddings {
    pub bona_fide: LabelEmbedding,
    pub attack: LabelEmbedding,
}

impl LabelEmbeddings {
    pub fn new(bona_fide: LabelEmbedding, attack: LabelEmbedding) -> Result<Self> {
        if bona_fide.label != Label::BonaFide || attack.label != Label::Attack {
            return Err(Error::format("labels", "expected one bona-fide and one attack entry"));
        }
        if bona_fide.vector.len() != attack.vector.len() {
            return Err(Error::format("labels", "label vectors differ in length"));
        }
        Ok(LabelEmbeddings { bona_fide, attack })
    }

    pub fn dim(&self) -> usize {
        self.bona_fide.vector.len()
    }

    /// Hashed embeddings of the two canonical prompts.
    pub fn toy(dim: usize, seed: u64) -> Result<Self> {
        let entry = |label| {
            let prompt = canonical_prompt(label);
            LabelEmbedding::new(label, prompt, toy_text_embed(prompt, dim, seed)?)
        };
        Self::new(entry(Label::BonaFide)?, entry(Label::Attack)?)
    }

    /// Per-class mean of the given embeddings.
    pub fn class_means(embeddings: &[Tensor], labels: &[Label]) -> Result<Self> {
        if embeddings.len() != labels.len() || embeddings.is_empty() {
            return Err(Error::Data("class means need one label per embedding".into()));
        }
        let dim = embeddings[0].len();
        let mean = |label: Label| -> Result<LabelEmbedding> {
            let mut sum = vec![0.0; dim];
            let mut n = 0usize;
            for (e, _) in embeddings.iter().zip(labels).filter(|(_, l)| **l == label) {
                if e.len() != dim {
                    return Err(Error::dimension("class_means", e.shape(), &[dim]));
                }
                for (s, x) in sum.iter_mut().zip(e.data()) {
                    *s += x;
                }
                n += 1;
            }
            if n == 0 {
                return Err(Error::Data(format!("no {label} embeddings for a class mean")));
            }
            let v = sum.into_iter().map(|s| s / n as f64).collect();
            LabelEmbedding::new(label, format!("mean of {n} {label} embeddings"), v)
        };
        Self::new(mean(Label::BonaFide)?, mean(Label::Attack)?)
    }

    /// Lines of `label<TAB>dim<TAB>v1,v2,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let (mut bona, mut attack) = (None, None);
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let field = format!("line {}", i + 1);
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::format(field, "expected label, dim and vector columns"));
            }
            let label: Label = cols[0].parse().map_err(|e: Error| Error::format(&field, e.to_string()))?;
            let dim: usize = cols[1]
                .trim()
                .parse()
                .map_err(|_| Error::format(&field, format!("bad dimension {:?}", cols[1])))?;
            let vector = cols[2]
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::format(&field, e.to_string()))?;
            if vector.len() != dim {
                return Err(Error::format(
                    field,
                    format!("declared dimension {dim}, found {} values", vector.len()),
                ));
            }
            let slot = match label {
                Label::BonaFide => &mut bona,
                Label::Attack => &mut attack,
            };
            if slot.is_some() {
                return Err(Error::format(field, format!("duplicate {label} row")));
            }
            *slot = Some(LabelEmbedding::new(label, canonical_prompt(label), vector)?);
        }
        let missing = |l: Label| Error::format("labels", format!("missing {l} row"));
        Self::new(
            bona.ok_or_else(|| missing(Label::BonaFide))?,
            attack.ok_or_else(|| missing(Label::Attack))?,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in [&self.bona_fide, &self.attack] {
            let values: Vec<String> = e.vector.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}\t{}\t{}", e.label, e.vector.len(), values.join(",")).unwrap();
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Cosine similarities `[bona-fide, attack]`.
    pub fn similarities(&self, embedding: &[f64]) -> Result<[f64; 2]> {
        Ok([
            cosine_similarity(embedding, &self.bona_fide.vector)?,
            cosine_similarity(embedding, &self.attack.vector)?,
        ])
    }

    /// Higher similarity wins; ties go to bona-fide.
    pub fn predict(&self, embedding: &[f64]) -> Result<Label> {
        let [bf, atk] = self.similarities(embedding)?;
        Ok(if atk > bf { Label::Attack } else { Label::BonaFide })
    }

    /// Attack component of the two-way softmax over the similarities.
    pub fn score(&self, embedding: &[f64]) -> Result<f64> {
        let [bf, atk] = self.similarities(embedding)?;
        Ok(1.0 / (1.0 + (bf - atk).exp()))
    }
}

pub fn ti_predict(image: &Tensor, backbone: &VitBackbone, labels: &LabelEmbeddings) -> Result<Label> {
    labels.predict(backbone.encode(image, None)?.data())
}

pub fn ti_score(image: &Tensor, backbone: &VitBackbone, labels: &LabelEmbeddings) -> Result<f64> {
    labels.score(backbone.encode(image, None)?.data())
}

/// Unit vector seeded by SHA-256 of `seed` and `prompt`.
pub fn toy_text_embed(prompt: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Parameter("embedding dimension must be positive".into()));
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&v);
    Ok(v.into_iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err().kind(), "parameter");
    }

    fn orthogonal() -> LabelEmbeddings {
        LabelEmbeddings::new(
            LabelEmbedding::new(Label::BonaFide, BONAFIDE_PROMPT, vec![1.0, 0.0]).unwrap(),
            LabelEmbedding::new(Label::Attack, ATTACK_PROMPT, vec![0.0, 2.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn prediction_and_scores() {
        let l = orthogonal();
        assert_eq!(l.predict(&[0.0, 1.0]).unwrap(), Label::Attack);
        assert_eq!(l.predict(&[1.0, 1.0]).unwrap(), Label::BonaFide);
        assert_eq!(l.score(&[1.0, 1.0]).unwrap(), 0.5);
        for c in [1e-3, 0.5, 7.0, 1e6] {
            assert_eq!(l.predict(&[0.2 * c, 0.9 * c]).unwrap(), Label::Attack);
        }
    }

    #[test]
    fn score_closed_form() {
        // sim_attack - sim_bf = ln 3 gives 3/(1+3)
        let d = 3f64.ln();
        assert!((1.0 / (1.0 + (-d).exp()) - 0.75).abs() < 1e-15);
        let theta = 0.3f64;
        let l = orthogonal();
        let e = [theta.cos(), theta.sin()];
        let expected = 1.0 / (1.0 + (theta.cos() - theta.sin()).exp());
        assert!((l.score(&e).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn label_file_round_trip_and_errors() {
        let l = LabelEmbeddings::parse("attack\t2\t0,3\nbonafide\t2\t4,0\n").unwrap();
        assert_eq!(l.attack.vector, vec![0.0, 1.0]);
        assert_eq!(l.bona_fide.prompt, BONAFIDE_PROMPT);
        assert_eq!(LabelEmbeddings::parse(&l.to_text()).unwrap(), l);

        for bad in [
            "attack\t2\t0,3\n",
            "attack\t3\t0,3\nbonafide\t2\t1,0\n",
            "attack\t2\t0,3\nbonafide\t3\t1,0,0\n",
            "attack\t2\t0,0\nbonafide\t2\t1,0\n",
            "attack\t2\tx,1\nbonafide\t2\t1,0\n",
        ] {
            assert_eq!(LabelEmbeddings::parse(bad).unwrap_err().kind(), "format", "{bad:?}");
        }
    }

    #[test]
    fn toy_embedder_is_deterministic_unit_norm() {
        let a = toy_text_embed(ATTACK_PROMPT, 64, 1).unwrap();
        assert_eq!(a, toy_text_embed(ATTACK_PROMPT, 64, 1).unwrap());
        assert_ne!(a, toy_text_embed(ATTACK_PROMPT, 64, 2).unwrap());
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        let t = LabelEmbeddings::toy(64, 1).unwrap();
        assert!(t.attack.vector.iter().zip(&a).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn distinct_prompts_are_nearly_orthogonal() {
        for i in 0..1000 {
            let u = toy_text_embed(&format!("prompt {i}"), 64, 0).unwrap();
            let v = toy_text_embed(&format!("prompt {i}'"), 64, 0).unwrap();
            assert!(cosine_similarity(&u, &v).unwrap() < 0.9);
        }
    }

    #[test]
    fn class_means() {
        let e = |v: [f64; 2]| Tensor::new(vec![2], v.to_vec()).unwrap();
        let l = LabelEmbeddings::class_means(
            &[e([2.0, 0.0]), e([4.0, 0.0]), e([0.0, 1.0])],
            &[Label::BonaFide, Label::BonaFide, Label::Attack],
        )
        .unwrap();
        assert_eq!(l.bona_fide.vector, vec![1.0, 0.0]);
        assert_eq!(l.attack.vector, vec![0.0, 1.0]);
        assert_eq!(
            LabelEmbeddings::class_means(&[e([1.0, 0.0])], &[Label::Attack]).unwrap_err().kind(),
            "data"
        );
    }
}
