//! Small building blocks shared by the backbone, adapters and head.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::tensor::{Param, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Anything that owns parameters.
pub trait Module {
    /// Parameters in a fixed, deterministic order.
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.set_frozen(frozen);
        }
    }

    /// SHA-256 over every parameter name, shape and value bit pattern.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name().as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn write_params(&self, ckpt: &mut Checkpoint) {
        for p in self.params() {
            ckpt.push(p.name(), p.value.clone());
        }
    }

    /// Overwrites every parameter from same-named, same-shaped blocks.
    fn read_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in self.params_mut() {
            let t = ckpt.expect(p.name(), p.value.shape())?;
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Per-call forward settings: training mode and the RNG feeding dropout.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: &'a mut dyn RngCore,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        ForwardCtx {
            training: true,
            rng,
        }
    }

    pub fn eval(rng: &'a mut dyn RngCore) -> Self {
        ForwardCtx {
            training: false,
            rng,
        }
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Deterministic RNG for a (seed, stream) pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Folds `parts` into `base` with SplitMix64 finalization.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Affine map `y = x·Wᵀ + b` with `W` of shape `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn init(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                trunc_normal(rng, &[output, input], INIT_STD),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), Tensor::ones(&[width])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layernorm(x, g, b, LN_EPS)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}
