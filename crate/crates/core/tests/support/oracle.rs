//! Brute-force metric oracles and random score sets.

#![allow(dead_code)]

use madation::metrics::ScoreSet;
use madation::Label;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Error counts `(attacks <= t, bona-fide > t)` at `-inf` and at every
/// distinct score, recounted from scratch for each threshold.
pub fn brute_counts(set: &ScoreSet) -> Vec<(usize, usize)> {
    let mut thresholds: Vec<f64> = set.scores().to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds
        .iter()
        .map(|&t| {
            let mut atk = 0;
            let mut bf = 0;
            for (&s, &l) in set.scores().iter().zip(set.labels()) {
                match l {
                    Label::Attack if s <= t => atk += 1,
                    Label::BonaFide if s > t => bf += 1,
                    _ => {}
                }
            }
            (atk, bf)
        })
        .collect()
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn to_f64(p: i128, q: i128) -> f64 {
    let g = gcd(p, q).max(1);
    (p / g) as f64 / (q / g) as f64
}

/// EER as the APCER value where the linearly interpolated APCER and BPCER
/// meet, in exact rational arithmetic.
pub fn brute_eer(set: &ScoreSet) -> f64 {
    let na = set.count(Label::Attack) as i128;
    let nb = set.count(Label::BonaFide) as i128;
    let d = na * nb;
    // rates scaled by d
    let pts: Vec<(i128, i128)> = brute_counts(set)
        .into_iter()
        .map(|(a, b)| (a as i128 * nb, b as i128 * na))
        .collect();
    for (i, &(a, b)) in pts.iter().enumerate() {
        if a == b {
            return to_f64(a, d);
        }
        if a > b {
            let (a0, b0) = pts[i - 1];
            let (g0, g1) = (a0 - b0, a - b);
            // APCER at fraction g0 / (g0 - g1) of the way from point i-1
            return to_f64(a0 * (g0 - g1) + g0 * (a - a0), (g0 - g1) * d);
        }
    }
    unreachable!("the last point has apcer 1 and bpcer 0")
}

/// Rates of all points as fractions.
fn brute_rates(set: &ScoreSet) -> Vec<(f64, f64)> {
    let na = set.count(Label::Attack) as f64;
    let nb = set.count(Label::BonaFide) as f64;
    brute_counts(set)
        .into_iter()
        .map(|(a, b)| (a as f64 / na, b as f64 / nb))
        .collect()
}

/// Smallest APCER among the points with the largest BPCER not above `target`.
pub fn brute_apcer_at_bpcer(set: &ScoreSet, target: f64) -> f64 {
    let rates = brute_rates(set);
    let admissible = rates.iter().filter(|r| r.1 <= target);
    let best = admissible.clone().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    admissible
        .filter(|r| r.1 == best)
        .map(|r| r.0)
        .fold(f64::INFINITY, f64::min)
}

/// Smallest BPCER among the points with the largest APCER not above `target`.
pub fn brute_bpcer_at_apcer(set: &ScoreSet, target: f64) -> f64 {
    let rates = brute_rates(set);
    let admissible = rates.iter().filter(|r| r.0 <= target);
    let best = admissible.clone().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    admissible
        .filter(|r| r.0 == best)
        .map(|r| r.1)
        .fold(f64::INFINITY, f64::min)
}

/// Random set of `2..=1000` samples holding both classes. Half the sets draw
/// scores from a coarse grid so ties are common.
pub fn random_set(rng: &mut ChaCha8Rng) -> ScoreSet {
    let n = rng.random_range(2..=1000);
    let grid = rng.random_bool(0.5).then(|| rng.random_range(1..=40));
    let shift = rng.random_range(0.0..0.5);
    let mut labels: Vec<Label> = (0..n)
        .map(|_| if rng.random_bool(0.4) { Label::Attack } else { Label::BonaFide })
        .collect();
    labels[0] = Label::Attack;
    labels[1] = Label::BonaFide;
    let scores = labels
        .iter()
        .map(|&l| {
            let base: f64 = rng.random();
            let s = if l == Label::Attack { base + shift } else { base };
            match grid {
                Some(g) => (s * g as f64).round() / g as f64,
                None => s,
            }
        })
        .collect();
    ScoreSet::new(scores, labels).unwrap()
}

/// Labels drawn independently of uniform scores.
pub fn label_independent_set(rng: &mut ChaCha8Rng, n: usize) -> ScoreSet {
    let scores = (0..n).map(|_| rng.random()).collect();
    let labels = (0..n)
        .map(|_| if rng.random_bool(0.5) { Label::Attack } else { Label::BonaFide })
        .collect();
    ScoreSet::new(scores, labels).unwrap()
}

pub fn map_scores(set: &ScoreSet, f: impl Fn(f64) -> f64) -> ScoreSet {
    ScoreSet::new(set.scores().iter().map(|&s| f(s)).collect(), set.labels().to_vec()).unwrap()
}

/// Labels swapped and scores negated.
pub fn mirrored(set: &ScoreSet) -> ScoreSet {
    ScoreSet::new(
        set.scores().iter().map(|s| -s).collect(),
        set.labels()
            .iter()
            .map(|l| match l {
                Label::Attack => Label::BonaFide,
                Label::BonaFide => Label::Attack,
            })
            .collect(),
    )
    .unwrap()
}
