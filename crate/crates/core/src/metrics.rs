//! Presentation-attack detection error rates.
//!
//! Scores follow one convention throughout: higher means more attack-like,
//! and a sample is classified as an attack iff `score > threshold`. Ties with
//! the threshold therefore count as bona-fide.
//!
//! * APCER(t): fraction of attacks with `score <= t`
//! * BPCER(t): fraction of bona-fide samples with `score > t`
//!
//! The DET curve evaluates both rates at `-inf`, at the midpoint between
//! every pair of consecutive distinct scores, and at `+inf`. The EER is read
//! off that curve where `APCER - BPCER` changes sign, interpolating linearly
//! between the two bracketing points in exact integer arithmetic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

/// Fixed operating points reported alongside the EER.
pub const TARGETS: [f64; 3] = [0.01, 0.10, 0.20];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite score {bad}")));
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    fn require_both(&self) -> Result<()> {
        for label in [Label::BonaFide, Label::Attack] {
            if self.count(label) == 0 {
                return Err(Error::Data(format!("score set has no {label} samples")));
            }
        }
        Ok(())
    }

    /// Reads a `score,label` CSV file.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["score", "label"] {
            return Err(Error::format(
                path.display().to_string(),
                format!("expected header score,label, found {:?}", headers),
            ));
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let field = format!("{}:{}", path.display(), line + 2);
            let score: f64 = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::format(&field, format!("bad score {:?}", &record[0])))?;
            let label: Label = record[1]
                .parse()
                .map_err(|e: Error| Error::format(&field, e.to_string()))?;
            scores.push(score);
            labels.push(label);
        }
        ScoreSet::new(scores, labels)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("score,label\n");
        for (s, l) in self.scores.iter().zip(&self.labels) {
            writeln!(out, "{s},{l}").unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

pub fn apcer(set: &ScoreSet, threshold: f64) -> Result<f64> {
    rate(set, Label::Attack, |s| s <= threshold)
}

pub fn bpcer(set: &ScoreSet, threshold: f64) -> Result<f64> {
    rate(set, Label::BonaFide, |s| s > threshold)
}

fn rate(set: &ScoreSet, class: Label, wrong: impl Fn(f64) -> bool) -> Result<f64> {
    let total = set.count(class);
    if total == 0 {
        return Err(Error::Data(format!("score set has no {class} samples")));
    }
    let errors = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(&s, &l)| l == class && wrong(s))
        .count();
    Ok(errors as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// A point strictly inside `[a, b)`.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a.midpoint(b);
    if m >= b {
        a
    } else {
        m
    }
}

/// Error counts at every DET threshold: `(threshold, attacks at or below,
/// bona-fide above)`, ordered by increasing threshold.
struct DetCounts {
    n_atk: usize,
    n_bf: usize,
    steps: Vec<(f64, usize, usize)>,
}

impl DetCounts {
    fn new(set: &ScoreSet) -> Result<Self> {
        set.require_both()?;
        let n_atk = set.count(Label::Attack);
        let n_bf = set.count(Label::BonaFide);
        let mut order: Vec<(f64, Label)> = set.scores.iter().copied().zip(set.labels.iter().copied()).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut steps = vec![(f64::NEG_INFINITY, 0, n_bf)];
        let (mut atk_below, mut bf_below) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let value = order[i].0;
            while i < order.len() && order[i].0 == value {
                match order[i].1 {
                    Label::Attack => atk_below += 1,
                    Label::BonaFide => bf_below += 1,
                }
                i += 1;
            }
            let threshold = match order.get(i) {
                Some(&(next, _)) => midpoint(value, next),
                None => f64::INFINITY,
            };
            steps.push((threshold, atk_below, n_bf - bf_below));
        }
        Ok(DetCounts { n_atk, n_bf, steps })
    }

    fn curve(&self) -> Vec<OperatingPoint> {
        let (na, nb) = (self.n_atk as f64, self.n_bf as f64);
        self.steps
            .iter()
            .map(|&(threshold, a, b)| OperatingPoint {
                threshold,
                apcer: a as f64 / na,
                bpcer: b as f64 / nb,
            })
            .collect()
    }

    /// Exact rational crossing, rounded once. Both rates are scaled to the
    /// common denominator `n_atk·n_bf`; APCER and BPCER are each interpolated
    /// linearly between the bracketing points and averaged.
    fn eer(&self) -> f64 {
        let (na, nb) = (self.n_atk as i128, self.n_bf as i128);
        let scaled = |&(_, a, b): &(f64, usize, usize)| (a as i128 * nb, b as i128 * na);
        let k = self
            .steps
            .iter()
            .position(|s| {
                let (a, b) = scaled(s);
                a >= b
            })
            .expect("the +inf sentinel always has apcer 1 and bpcer 0");
        let (a1, b1) = scaled(&self.steps[k]);
        let denom = na * nb;
        if a1 == b1 {
            return ratio(a1, denom);
        }
        let (a0, b0) = scaled(&self.steps[k - 1]);
        let (g0, g1) = (a0 - b0, a1 - b1);
        ratio((a0 + b0) * g1 - (a1 + b1) * g0, 2 * (g1 - g0) * denom)
    }
}

/// `p / q` in lowest terms, then one rounding to `f64`.
fn ratio(p: i128, q: i128) -> f64 {
    fn gcd(mut a: i128, mut b: i128) -> i128 {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a.abs()
    }
    let g = gcd(p, q).max(1);
    (p / g) as f64 / (q / g) as f64
}

/// Operating points ordered by increasing threshold.
pub fn det_curve(set: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    Ok(DetCounts::new(set)?.curve())
}

/// Equal error rate: the value where APCER and BPCER cross on the DET curve.
pub fn eer(set: &ScoreSet) -> Result<f64> {
    Ok(DetCounts::new(set)?.eer())
}

/// Rate reported at a fixed operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedRate {
    pub rate: f64,
    pub point: OperatingPoint,
    /// False when no point met the constraint and the conservative endpoint
    /// was used instead.
    pub satisfied: bool,
}

/// APCER at the operating point with the largest BPCER not above `target`.
pub fn apcer_at_bpcer(set: &ScoreSet, target: f64) -> Result<FixedRate> {
    let points = det_curve(set)?;
    Ok(apcer_at_bpcer_on(&points, target))
}

/// BPCER at the operating point with the largest APCER not above `target`.
pub fn bpcer_at_apcer(set: &ScoreSet, target: f64) -> Result<FixedRate> {
    let points = det_curve(set)?;
    Ok(bpcer_at_apcer_on(&points, target))
}

pub fn apcer_at_bpcer_on(points: &[OperatingPoint], target: f64) -> FixedRate {
    // bpcer is non-increasing along the curve, so the first admissible point
    // has the largest bpcer and the smallest apcer.
    match points.iter().find(|p| p.bpcer <= target) {
        Some(p) => FixedRate {
            rate: p.apcer,
            point: *p,
            satisfied: true,
        },
        None => {
            let p = *points.last().expect("nonempty curve");
            FixedRate {
                rate: p.apcer,
                point: p,
                satisfied: false,
            }
        }
    }
}

pub fn bpcer_at_apcer_on(points: &[OperatingPoint], target: f64) -> FixedRate {
    match points.iter().rev().find(|p| p.apcer <= target) {
        Some(p) => FixedRate {
            rate: p.bpcer,
            point: *p,
            satisfied: true,
        },
        None => {
            let p = points[0];
            FixedRate {
                rate: p.bpcer,
                point: p,
                satisfied: false,
            }
        }
    }
}

/// One row of a results table; all rates are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub eer: f64,
    /// APCER at BPCER = 1%, 10%, 20%.
    pub apcer_at_bpcer: [f64; 3],
    /// BPCER at APCER = 1%, 10%, 20%.
    pub bpcer_at_apcer: [f64; 3],
}

impl MetricsRow {
    pub fn compute(name: &str, set: &ScoreSet) -> Result<Self> {
        let counts = DetCounts::new(set)?;
        let points = counts.curve();
        Ok(MetricsRow {
            name: name.to_string(),
            eer: counts.eer(),
            apcer_at_bpcer: TARGETS.map(|t| apcer_at_bpcer_on(&points, t).rate),
            bpcer_at_apcer: TARGETS.map(|t| bpcer_at_apcer_on(&points, t).rate),
        })
    }

    fn values(&self) -> [f64; 7] {
        let [a1, a10, a20] = self.apcer_at_bpcer;
        let [b1, b10, b20] = self.bpcer_at_apcer;
        [self.eer, a1, a10, a20, b1, b10, b20]
    }

    fn from_values(name: &str, v: [f64; 7]) -> Self {
        MetricsRow {
            name: name.to_string(),
            eer: v[0],
            apcer_at_bpcer: [v[1], v[2], v[3]],
            bpcer_at_apcer: [v[4], v[5], v[6]],
        }
    }
}

const COLUMNS: [&str; 7] = [
    "eer",
    "apcer_at_bpcer_1",
    "apcer_at_bpcer_10",
    "apcer_at_bpcer_20",
    "bpcer_at_apcer_1",
    "bpcer_at_apcer_10",
    "bpcer_at_apcer_20",
];

/// Per-subset rows plus the mean and the maximum of every column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<MetricsRow>,
    pub average: MetricsRow,
    pub worst: MetricsRow,
}

pub fn report(sets: &[(String, ScoreSet)]) -> Result<Report> {
    if sets.is_empty() {
        return Err(Error::Data("report needs at least one score set".into()));
    }
    let rows = sets
        .iter()
        .map(|(name, set)| MetricsRow::compute(name, set))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mut mean = [0.0; 7];
    let mut worst = [f64::NEG_INFINITY; 7];
    for row in &rows {
        for (i, v) in row.values().into_iter().enumerate() {
            mean[i] += v;
            worst[i] = worst[i].max(v);
        }
    }
    let mean = mean.map(|v| v / n);
    Ok(Report {
        average: MetricsRow::from_values("Average", mean),
        worst: MetricsRow::from_values("Worst", worst),
        rows,
    })
}

impl Report {
    pub fn all_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().chain([&self.average, &self.worst])
    }

    /// Fraction columns followed by the same values in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset");
        for c in COLUMNS {
            write!(out, ",{c}").unwrap();
        }
        for c in COLUMNS {
            write!(out, ",{c}_pct").unwrap();
        }
        out.push('\n');
        for row in self.all_rows() {
            out.push_str(&row.name);
            let v = row.values();
            for x in v {
                write!(out, ",{x}").unwrap();
            }
            for x in v {
                write!(out, ",{:.2}", x * 100.0).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        let pct = |row: &MetricsRow| {
            let v = row.values();
            COLUMNS
                .iter()
                .zip(v)
                .map(|(c, x)| (format!("{c}_pct"), serde_json::json!(x * 100.0)))
                .collect::<serde_json::Map<_, _>>()
        };
        value["percent"] = serde_json::Value::Object(
            self.all_rows()
                .map(|r| (r.name.clone(), serde_json::Value::Object(pct(r))))
                .collect(),
        );
        serde_json::to_string_pretty(&value).expect("report serializes")
    }

    /// Parses the fraction columns of [`Report::to_csv`] output.
    pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::format("report", e.to_string()))?;
            let mut v = [0.0; 7];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = record[i + 1]
                    .parse()
                    .map_err(|_| Error::format("report", format!("bad value {:?}", &record[i + 1])))?;
            }
            rows.push(MetricsRow::from_values(&record[0], v));
        }
        Ok(rows)
    }
}

pub fn det_csv(points: &[OperatingPoint]) -> String {
    let mut out = String::from("threshold,apcer,bpcer\n");
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.apcer, p.bpcer).unwrap();
    }
    out
}

/// Minimal static plot of BPCER against APCER.
pub fn det_svg(title: &str, points: &[OperatingPoint]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let coords: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "{:.2},{:.2}",
                PAD + p.apcer * SIZE,
                PAD + (1.0 - p.bpcer) * SIZE
            )
        })
        .collect();
    let total = SIZE + 2.0 * PAD;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    )
    .unwrap();
    writeln!(
        svg,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        svg,
        r##"<line x1="{PAD}" y1="{PAD}" x2="{}" y2="{}" stroke="#bbb" stroke-dasharray="4"/>"##,
        PAD + SIZE,
        PAD + SIZE
    )
    .unwrap();
    writeln!(
        svg,
        r##"<polyline fill="none" stroke="#c0392b" stroke-width="2" points="{}"/>"##,
        coords.join(" ")
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">APCER</text>"#,
        PAD + SIZE / 2.0,
        total - 10.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="14" y="{}" font-size="14" transform="rotate(-90 14 {})" text-anchor="middle">BPCER</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        PAD + SIZE / 2.0,
        escape(title)
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Attack as A, BonaFide as B};

    fn set(pairs: &[(f64, Label)]) -> ScoreSet {
        ScoreSet::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
        .unwrap()
    }

    fn four() -> ScoreSet {
        set(&[(0.2, B), (0.6, B), (0.4, A), (0.8, A)])
    }

    #[test]
    fn boundary_thresholds() {
        let s = four();
        assert_eq!(apcer(&s, 10.0).unwrap(), 1.0);
        assert_eq!(bpcer(&s, 10.0).unwrap(), 0.0);
        assert_eq!(apcer(&s, -10.0).unwrap(), 0.0);
        assert_eq!(bpcer(&s, -10.0).unwrap(), 1.0);
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[(0.1, B), (0.4, B), (0.6, A), (0.9, A)]);
        assert_eq!(apcer(&s, 0.5).unwrap(), 0.0);
        assert_eq!(bpcer(&s, 0.5).unwrap(), 0.0);
        assert_eq!(eer(&s).unwrap(), 0.0);
        for t in TARGETS {
            assert_eq!(apcer_at_bpcer(&s, t).unwrap().rate, 0.0);
            assert_eq!(bpcer_at_apcer(&s, t).unwrap().rate, 0.0);
        }
    }

    #[test]
    fn ties_count_as_bona_fide() {
        let s = set(&[(0.5, B), (0.5, A)]);
        assert_eq!(apcer(&s, 0.5).unwrap(), 1.0);
        assert_eq!(bpcer(&s, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn empty_class_is_a_data_error() {
        let s = set(&[(0.1, B)]);
        assert_eq!(apcer(&s, 0.0).unwrap_err().kind(), "data");
        assert!(eer(&s).is_err());
        assert!(ScoreSet::new(vec![0.1], vec![]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![A]).is_err());
    }

    #[test]
    fn curve_has_sentinels_and_one_point_per_distinct_score() {
        let s = set(&[(0.1, B), (0.3, A), (0.3, B), (0.7, A)]);
        let c = det_curve(&s).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!((c[0].apcer, c[0].bpcer), (0.0, 1.0));
        let last = c.last().unwrap();
        assert_eq!((last.apcer, last.bpcer), (1.0, 0.0));
        assert!(c.windows(2).all(|w| w[0].threshold < w[1].threshold));
    }

    #[test]
    fn four_point_hand_set() {
        // t = 0.5 gives apcer = bpcer = 1/2 exactly
        assert_eq!(eer(&four()).unwrap(), 0.5);
        // admissible points: t=0.3 (bpcer .5) fails; t=0.7 (apcer .5, bpcer 0)
        assert_eq!(apcer_at_bpcer(&four(), 0.20).unwrap().rate, 0.5);
        assert_eq!(bpcer_at_apcer(&four(), 0.20).unwrap().rate, 0.5);
    }

    #[test]
    fn interpolated_crossing() {
        // points: (0,1) (0,2/3) (1/2,2/3) (1/2,1/3) (1/2,0) (1,0)
        let s = set(&[(0.1, B), (0.2, A), (0.3, B), (0.4, B), (0.9, A)]);
        let value = eer(&s).unwrap();
        // gap goes -1/6 -> +1/6 between (1/2,2/3) and (1/2,1/3): crossing at 1/2
        assert_eq!(value, 0.5);
    }

    #[test]
    fn unsatisfiable_target_is_flagged() {
        let r = apcer_at_bpcer(&four(), -0.1).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.rate, 1.0);
        let r = bpcer_at_apcer(&four(), -0.1).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.rate, 1.0);
    }

    #[test]
    fn report_aggregates() {
        let sep = set(&[(0.1, B), (0.9, A)]);
        let single = report(&[("x".into(), four())]).unwrap();
        assert_eq!(single.average.values(), single.rows[0].values());
        assert_eq!(single.worst.values(), single.rows[0].values());

        let two = report(&[("sep".into(), sep), ("half".into(), four())]).unwrap();
        assert_eq!(two.average.eer, 0.25);
        assert_eq!(two.worst.eer, 0.5);
    }

    #[test]
    fn csv_and_json_carry_identical_numbers() {
        let mixed = set(&[(0.13, B), (0.61, B), (0.37, A), (0.83, A), (0.5, B), (0.2, A)]);
        let r = report(&[("a".into(), four()), ("b".into(), mixed)]).unwrap();
        let from_csv = Report::rows_from_csv(&r.to_csv()).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let from_json: Report = serde_json::from_value(json.clone()).unwrap();
        let json_rows: Vec<&MetricsRow> = from_json.all_rows().collect();
        assert_eq!(from_csv.len(), json_rows.len());
        for (a, b) in from_csv.iter().zip(json_rows) {
            assert_eq!(a, b);
        }
        assert_eq!(json["percent"]["Worst"]["eer_pct"], serde_json::json!(r.worst.eer * 100.0));
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = set(&[(0.1234567890123, B), (1e-17, A)]);
        s.write_csv(&path).unwrap();
        assert_eq!(ScoreSet::read_csv(&path).unwrap(), s);
        fs::write(&path, "value,label\n0.1,attack\n").unwrap();
        assert_eq!(ScoreSet::read_csv(&path).unwrap_err().kind(), "format");
        fs::write(&path, "score,label\n0.1,alien\n").unwrap();
        assert_eq!(ScoreSet::read_csv(&path).unwrap_err().kind(), "format");
    }

    #[test]
    fn det_exports() {
        let c = det_curve(&four()).unwrap();
        let csv = det_csv(&c);
        assert!(csv.starts_with("threshold,apcer,bpcer\n-inf,0,1\n"));
        assert!(csv.trim_end().ends_with("inf,1,0"));
        let svg = det_svg("a<b", &c);
        assert!(svg.contains("<polyline") && svg.contains("a&lt;b"));
    }
}
