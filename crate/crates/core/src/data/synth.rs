//! Procedural face-like identities, morphs and the benchmark generator.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{Image, ManifestEntry, SampleManifest};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::nn::derive_seed;

/// Per-pixel Gaussian noise of a render.
pub const NOISE_STD: f64 = 0.04;
pub const SUBSET: &str = "synthetic";
pub const NUM_PARAMS: usize = 21;
// slope of the face and eye boundaries
const EDGE_SHARPNESS: f64 = 40.0;

// (low, high) sampling range of every appearance parameter
const RANGES: [(f64, f64); NUM_PARAMS] = [
    (0.36, 0.64),  // face centre x
    (0.38, 0.62),  // face centre y
    (0.20, 0.32),  // radius x
    (0.28, 0.40),  // radius y
    (0.08, 0.16),  // eye offset x
    (-0.16, -0.06), // eye offset y
    (0.05, 0.08),  // eye radius
    (0.10, 0.22),  // mouth offset y
    (0.06, 0.16),  // mouth half width
    (0.02, 0.045), // mouth half height
    (3.0, 8.0),    // texture frequency
    (0.0, PI),     // texture angle
    (0.0, 2.0 * PI), // texture phase
    (0.22, 0.30),  // texture amplitude
    (0.85, 1.00),  // skin tone
    (0.47, 0.53),  // background level
    (0.0, 2.0 * PI), // background gradient direction
    (-0.05, 0.05), // background gradient slope
    (0.88, 1.0),   // red tint
    (0.88, 1.0),   // green tint
    (0.88, 1.0),   // blue tint
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticIdentity {
    pub seed: u64,
    pub params: [f64; NUM_PARAMS],
}

impl SyntheticIdentity {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = [0.0; NUM_PARAMS];
        for (p, &(lo, hi)) in params.iter_mut().zip(RANGES.iter()) {
            *p = rng.random_range(lo..hi);
        }
        SyntheticIdentity { seed, params }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphSpec {
    pub identity_a: SyntheticIdentity,
    pub identity_b: SyntheticIdentity,
    pub alpha: f64,
}

impl MorphSpec {
    pub fn new(identity_a: SyntheticIdentity, identity_b: SyntheticIdentity, alpha: f64) -> Self {
        MorphSpec {
            identity_a,
            identity_b,
            alpha,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Noise-free render with three channels in `[0, 1]`.
pub fn render_clean(params: &[f64; NUM_PARAMS], resolution: usize) -> Image {
    let [cx, cy, rx, ry, eye_dx, eye_dy, eye_r, mouth_dy, mouth_w, mouth_h, freq, angle, phase, amp, skin, bg, bg_dir, bg_slope, tr, tg, tb] =
        *params;
    let (ca, sa) = (angle.cos(), angle.sin());
    let (cb, sb) = (bg_dir.cos(), bg_dir.sin());
    let eyes = [(cx - eye_dx, cy + eye_dy), (cx + eye_dx, cy + eye_dy)];
    let n = resolution;
    let mut face_layer = vec![0.0; n * n];
    let mut back_layer = vec![0.0; n * n];
    for y in 0..n {
        let v = (y as f64 + 0.5) / n as f64;
        for x in 0..n {
            let u = (x as f64 + 0.5) / n as f64;
            let r2 = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            let mask = sigmoid((1.0 - r2) * EDGE_SHARPNESS);
            let texture = 1.0 + amp * (2.0 * PI * freq * (u * ca + v * sa) + phase).sin();
            let eye: f64 = eyes
                .iter()
                .map(|&(ex, ey)| {
                    let d2 = ((u - ex).powi(2) + (v - ey).powi(2)) / (eye_r * eye_r);
                    sigmoid((1.0 - d2) * EDGE_SHARPNESS)
                })
                .sum();
            let mouth = (-((u - cx) / mouth_w).powi(2) - ((v - cy - mouth_dy) / mouth_h).powi(2)).exp();
            let face = skin * texture * (1.0 - 0.75 * eye.min(1.0) - 0.6 * mouth);
            let back = bg + bg_slope * ((u - 0.5) * cb + (v - 0.5) * sb);
            face_layer[y * n + x] = mask * face;
            back_layer[y * n + x] = (1.0 - mask) * back;
        }
    }
    // the tint colours the face only
    let data = [tr, tg, tb]
        .iter()
        .flat_map(|&t| {
            face_layer
                .iter()
                .zip(&back_layer)
                .map(move |(f, b)| (f * t + b).clamp(0.0, 1.0))
        })
        .collect();
    Image::new(3, n, n, data).expect("positive resolution")
}

fn add_noise(image: Image, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let data = image
        .data()
        .iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            (v + NOISE_STD * z).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(c, h, w, data).expect("same size")
}

pub fn render(identity: &SyntheticIdentity, resolution: usize, noise_seed: u64) -> Image {
    add_noise(
        render_clean(&identity.params, resolution),
        derive_seed(noise_seed, &[identity.seed]),
    )
}

/// Half parameter-space blend, half pixel-space blend of the parents.
pub fn morph(spec: &MorphSpec, resolution: usize, noise_seed: u64) -> Result<Image> {
    let (a, b, alpha) = (&spec.identity_a, &spec.identity_b, spec.alpha);
    if a.seed == b.seed || a.params == b.params {
        return Err(Error::Parameter("morph parents must be distinct identities".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("morph blend {alpha} outside (0, 1)")));
    }
    let mut blended = [0.0; NUM_PARAMS];
    for (i, p) in blended.iter_mut().enumerate() {
        *p = (1.0 - alpha) * a.params[i] + alpha * b.params[i];
    }
    let pair_seed = derive_seed(noise_seed, &[a.seed ^ b.seed, 0x006d_6f72_7068]);
    let structural = add_noise(render_clean(&blended, resolution), pair_seed);
    let ra = render(a, resolution, noise_seed);
    let rb = render(b, resolution, noise_seed);
    let data = structural
        .data()
        .iter()
        .zip(ra.data().iter().zip(rb.data()))
        .map(|(s, (pa, pb))| 0.5 * s + 0.5 * ((1.0 - alpha) * pa + alpha * pb))
        .collect();
    Image::new(3, resolution, resolution, data)
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    /// Share of morphs among all images of a split.
    pub morph_fraction: f64,
    pub resolution: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_identities: 64,
            images_per_identity: 16,
            morph_fraction: 0.375,
            resolution: 32,
            alpha: 0.5,
            seed: 7,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 4 {
            return Err(Error::Parameter(format!(
                "need at least 4 identities, got {}",
                self.n_identities
            )));
        }
        if self.images_per_identity == 0 || self.resolution == 0 {
            return Err(Error::Parameter(
                "images per identity and resolution must be positive".into(),
            ));
        }
        if !(self.morph_fraction > 0.0 && self.morph_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "morph fraction {} outside (0, 1)",
                self.morph_fraction
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!("blend {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }

    /// Bona-fide and morph image counts of a split with `identities` identities.
    pub fn split_counts(&self, identities: usize) -> (usize, usize) {
        let bona = identities * self.images_per_identity;
        let morphs = (bona as f64 * self.morph_fraction / (1.0 - self.morph_fraction)).round();
        (bona, morphs as usize)
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub name: String,
    pub identities: Vec<u64>,
    pub manifest: SampleManifest,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Split,
    pub test: Split,
}

enum Job {
    Bona { identity: usize, k: usize },
    Morph { a: usize, b: usize, j: usize },
}

fn write_split(
    config: &BenchmarkConfig,
    name: &str,
    tag: u64,
    seeds: &[u64],
    dir: &Path,
) -> Result<Split> {
    let identities: Vec<_> = seeds.iter().map(|&s| SyntheticIdentity::from_seed(s)).collect();
    let (n_bona, n_morph) = config.split_counts(seeds.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[tag, 1]));
    let mut jobs: Vec<Job> = (0..seeds.len())
        .flat_map(|identity| (0..config.images_per_identity).map(move |k| Job::Bona { identity, k }))
        .collect();
    debug_assert_eq!(jobs.len(), n_bona);
    for j in 0..n_morph {
        let a = rng.random_range(0..seeds.len());
        let b = (a + rng.random_range(1..seeds.len())) % seeds.len();
        jobs.push(Job::Morph { a, b, j });
    }
    for sub in ["bonafide", "morph"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let entries = jobs
        .par_iter()
        .map(|job| -> Result<ManifestEntry> {
            let (rel, label, image) = match *job {
                Job::Bona { identity, k } => {
                    let noise = derive_seed(config.seed, &[tag, 2, k as u64]);
                    let img = render(&identities[identity], config.resolution, noise);
                    (format!("bonafide/{identity:03}_{k:02}.png"), Label::BonaFide, img)
                }
                Job::Morph { a, b, j } => {
                    let spec = MorphSpec::new(identities[a].clone(), identities[b].clone(), config.alpha);
                    let noise = derive_seed(config.seed, &[tag, 3, j as u64]);
                    let img = morph(&spec, config.resolution, noise)?;
                    (format!("morph/{j:04}_{a:03}_{b:03}.png"), Label::Attack, img)
                }
            };
            image.save_png(&dir.join(&rel))?;
            Ok(ManifestEntry {
                path: PathBuf::from(rel),
                label,
                subset: SUBSET.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = SampleManifest::new(dir, entries);
    manifest.write(&dir.join("manifest.csv"))?;
    let listing: String = seeds.iter().map(|s| format!("{s}\n")).collect();
    let ids = dir.join("identities.txt");
    fs::write(&ids, listing).map_err(|e| Error::io(&ids, e))?;
    Ok(Split {
        name: name.to_string(),
        identities: seeds.to_vec(),
        manifest,
    })
}

/// Writes `train/` and `test/` under `out_dir`, each with `bonafide/`,
/// `morph/`, `manifest.csv` and `identities.txt`. Identities are disjoint.
pub fn gen_benchmark(config: &BenchmarkConfig, out_dir: &Path) -> Result<Benchmark> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seeds: Vec<u64> = Vec::with_capacity(config.n_identities);
    while seeds.len() < config.n_identities {
        let s = rng.next_u64();
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    let (train, test) = seeds.split_at(config.n_identities / 2);
    Ok(Benchmark {
        train: write_split(config, "train", 0, train, &out_dir.join("train"))?,
        test: write_split(config, "test", 1, test, &out_dir.join("test"))?,
    })
}

/// Pearson correlation of two equally sized images.
pub fn correlation(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    let ma = a.data().iter().sum::<f64>() / n;
    let mb = b.data().iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_a_function_of_its_seed() {
        assert_eq!(SyntheticIdentity::from_seed(3), SyntheticIdentity::from_seed(3));
        assert_ne!(SyntheticIdentity::from_seed(3), SyntheticIdentity::from_seed(4));
        let id = SyntheticIdentity::from_seed(3);
        assert_eq!(render(&id, 16, 1), render(&id, 16, 1));
        assert_ne!(render(&id, 16, 1), render(&id, 16, 2));
        assert!(render(&id, 16, 1).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn morph_rejects_bad_specs() {
        let a = SyntheticIdentity::from_seed(1);
        let same = MorphSpec::new(a.clone(), a.clone(), 0.5);
        assert_eq!(morph(&same, 8, 0).unwrap_err().kind(), "parameter");
        let b = SyntheticIdentity::from_seed(2);
        assert!(morph(&MorphSpec::new(a, b, 1.0), 8, 0).is_err());
    }

    #[test]
    fn config_validation_and_counts() {
        let cfg = BenchmarkConfig::default();
        assert_eq!(cfg.split_counts(32), (512, 307));
        let bad = BenchmarkConfig {
            n_identities: 3,
            ..cfg.clone()
        };
        assert_eq!(bad.validate().unwrap_err().kind(), "parameter");
    }
}
