//! Uncertainty analysis: max-probability and entropy per sample, grouped by
//! the prober's verdict, one-sided Mann–Whitney U tests, and the plane scan.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::classifier::{Classifier, Prediction};
use crate::data::{write_file, ImageSet};
use crate::error::{Error, Result};
use crate::prober::{Prober, ProberOutput, Verdict};

/// Products `n1 · n2` up to this size use the exact null distribution.
pub const EXACT_LIMIT: usize = 400;
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub max_prob: f64,
    pub entropy: f64,
    pub verdict: Verdict,
}

impl UncertaintyRecord {
    pub fn new(probs: &[f64], verdict: Verdict) -> Self {
        Self {
            max_prob: probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            entropy: entropy(probs),
            verdict,
        }
    }
}

/// `−Σ p ln p`, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub fn uncertainty_profile(
    classifier: &Classifier,
    prober: &Prober,
    dataset: &ImageSet,
) -> Result<Vec<UncertaintyRecord>> {
    let preds = classifier.predict_set(dataset)?;
    let outputs = prober_outputs(prober, &preds)?;
    Ok(profile_from(&preds, &outputs))
}

pub fn prober_outputs(prober: &Prober, preds: &[Prediction]) -> Result<Vec<ProberOutput>> {
    let dim = prober.rep_dim;
    let reps = ndarray::Array2::from_shape_fn((preds.len(), dim), |(i, j)| preds[i].rep[j]);
    if preds.iter().any(|p| p.rep.len() != dim) {
        return Err(Error::shape(dim, preds.iter().map(|p| p.rep.len()).find(|&l| l != dim).unwrap_or(0)));
    }
    prober.predict_rows(reps.view())
}

pub fn profile_from(preds: &[Prediction], outputs: &[ProberOutput]) -> Vec<UncertaintyRecord> {
    preds
        .iter()
        .zip(outputs)
        .map(|(p, o)| UncertaintyRecord::new(&p.probs, o.verdict))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// First sample tends to be larger.
    Greater,
    Less,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UTestResult {
    /// `U` of the first sample: pairs it wins plus half the ties.
    pub u: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub median_1: f64,
    pub median_2: f64,
    pub alternative: Alternative,
    pub exact: bool,
}

impl UTestResult {
    pub fn reject(&self) -> bool {
        self.p_value < SIGNIFICANCE
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Doubled midranks of the pooled sample (integers), first `a` then `b`.
fn doubled_midranks(a: &[f64], b: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks2 = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && pooled[idx[end]] == pooled[idx[start]] {
            end += 1;
        }
        // Ranks start..end are 1-based start+1..=end; doubled midrank = start + 1 + end.
        let r2 = (start + 1 + end) as u64;
        for &i in &idx[start..end] {
            ranks2[i] = r2;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks2, ties)
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyGroup(format!(
            "Mann-Whitney needs two non-empty groups (sizes {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Mann-Whitney input".into()));
    }
    Ok(())
}

/// `U_a = #{a_i > b_j} + ½ #{a_i = b_j}`.
pub fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (r2, _) = doubled_midranks(a, b);
    let n1 = a.len() as u64;
    let rank_sum2: u64 = r2[..a.len()].iter().sum();
    (rank_sum2 - n1 * (n1 + 1)) as f64 / 2.0
}

/// One-sided p from the exact permutation distribution of the rank sum,
/// with ties handled through midranks.
pub fn exact_p(a: &[f64], b: &[f64], alternative: Alternative) -> Result<f64> {
    check_groups(a, b)?;
    let (r2, _) = doubled_midranks(a, b);
    let n1 = a.len();
    let observed: u64 = r2[..n1].iter().sum();
    let max_sum: usize = r2.iter().map(|&r| r as usize).sum();
    // ways[j][s]: subsets of size j with doubled rank sum s.
    let mut ways = vec![vec![0u128; max_sum + 1]; n1 + 1];
    ways[0][0] = 1;
    for &r in &r2 {
        let r = r as usize;
        for j in (1..=n1).rev() {
            let (lo, hi) = ways.split_at_mut(j);
            let prev = &lo[j - 1];
            let cur = &mut hi[0];
            for s in (r..=max_sum).rev() {
                if prev[s - r] != 0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let total: u128 = ways[n1].iter().sum();
    let tail: u128 = ways[n1]
        .iter()
        .enumerate()
        .filter(|&(s, _)| match alternative {
            Alternative::Greater => s as u64 >= observed,
            Alternative::Less => s as u64 <= observed,
        })
        .map(|(_, &c)| c)
        .sum();
    Ok(tail as f64 / total as f64)
}

/// Normal approximation with continuity correction and tie-corrected variance.
pub fn normal_p(a: &[f64], b: &[f64], alternative: Alternative) -> Result<f64> {
    check_groups(a, b)?;
    let (_, ties) = doubled_midranks(a, b);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    let var = n1 * n2 / 12.0 * ((n + 1.0) - if n > 1.0 { tie_term / (n * (n - 1.0)) } else { 0.0 });
    if !(var > 0.0) {
        return Ok(1.0);
    }
    let u = u_statistic(a, b);
    let mu = n1 * n2 / 2.0;
    let sd = var.sqrt();
    let p = match alternative {
        Alternative::Greater => 0.5 * erfc((u - mu - 0.5) / sd / std::f64::consts::SQRT_2),
        Alternative::Less => 0.5 * erfc(-(u - mu + 0.5) / sd / std::f64::consts::SQRT_2),
    };
    Ok(p.min(1.0))
}

pub fn mannwhitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<UTestResult> {
    check_groups(a, b)?;
    let all_equal = a.iter().chain(b).all(|&v| v == a[0]);
    let exact = a.len() * b.len() <= EXACT_LIMIT;
    let p_value = if all_equal {
        1.0
    } else if exact {
        exact_p(a, b, alternative)?
    } else {
        normal_p(a, b, alternative)?
    };
    Ok(UTestResult {
        u: u_statistic(a, b),
        p_value,
        n1: a.len(),
        n2: b.len(),
        median_1: median(a),
        median_2: median(b),
        alternative,
        exact,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisTests {
    /// Hit group larger than miss group.
    pub max_prob: UTestResult,
    /// Hit group smaller than miss group.
    pub entropy: UTestResult,
}

pub fn run_hypothesis_tests(profile: &[UncertaintyRecord]) -> Result<HypothesisTests> {
    let pick = |verdict: Verdict, f: fn(&UncertaintyRecord) -> f64| -> Vec<f64> {
        profile.iter().filter(|r| r.verdict == verdict).map(f).collect()
    };
    let hit_p = pick(Verdict::Hit, |r| r.max_prob);
    let miss_p = pick(Verdict::Miss, |r| r.max_prob);
    if hit_p.is_empty() || miss_p.is_empty() {
        return Err(Error::EmptyGroup(format!(
            "prober verdict groups: {} hit, {} miss",
            hit_p.len(),
            miss_p.len()
        )));
    }
    Ok(HypothesisTests {
        max_prob: mannwhitney_u(&hit_p, &miss_p, Alternative::Greater)?,
        entropy: mannwhitney_u(
            &pick(Verdict::Hit, |r| r.entropy),
            &pick(Verdict::Miss, |r| r.entropy),
            Alternative::Less,
        )?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisRow {
    pub dataset: String,
    pub tests: HypothesisTests,
}

/// Columns: dataset, value_kind, u, p_value, reject, n_hit, n_miss, median_hit, median_miss.
pub fn write_hypothesis_csv(path: impl AsRef<Path>, rows: &[HypothesisRow]) -> Result<()> {
    let mut out = String::from("dataset,value_kind,u,p_value,reject,n_hit,n_miss,median_hit,median_miss\n");
    for row in rows {
        for (kind, t) in [("max_prob", &row.tests.max_prob), ("entropy", &row.tests.entropy)] {
            out.push_str(&format!(
                "{},{kind},{:.1},{:.3e},{},{},{},{:.6},{:.6}\n",
                row.dataset,
                t.u,
                t.p_value,
                t.reject(),
                t.n1,
                t.n2,
                t.median_1,
                t.median_2
            ));
        }
    }
    write_file(path.as_ref(), out.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; the top edge falls in the last bin.
    pub fn new(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for v in values {
            let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
            let b = (pos.max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + bin as f64 * w, self.lo + (bin + 1) as f64 * w)
    }
}

/// Histograms of max-prob and entropy per verdict group.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyHistograms {
    pub max_prob: [Histogram; 2],
    pub entropy: [Histogram; 2],
}

pub const HIST_BINS: usize = 20;

/// Index 0 is the hit group, 1 the miss group.
pub fn uncertainty_histograms(profile: &[UncertaintyRecord], class_count: usize) -> UncertaintyHistograms {
    let group = |v: Verdict, f: fn(&UncertaintyRecord) -> f64| profile.iter().filter(move |r| r.verdict == v).map(f);
    let ln_k = (class_count as f64).ln();
    UncertaintyHistograms {
        max_prob: [
            Histogram::new(group(Verdict::Hit, |r| r.max_prob), 0.0, 1.0, HIST_BINS),
            Histogram::new(group(Verdict::Miss, |r| r.max_prob), 0.0, 1.0, HIST_BINS),
        ],
        entropy: [
            Histogram::new(group(Verdict::Hit, |r| r.entropy), 0.0, ln_k, HIST_BINS),
            Histogram::new(group(Verdict::Miss, |r| r.entropy), 0.0, ln_k, HIST_BINS),
        ],
    }
}

pub fn write_histogram_csv(path: impl AsRef<Path>, dataset: &str, h: &UncertaintyHistograms) -> Result<()> {
    let mut out = String::from("dataset,value_kind,group,bin_lo,bin_hi,count\n");
    for (kind, pair) in [("max_prob", &h.max_prob), ("entropy", &h.entropy)] {
        for (group, hist) in ["hit", "miss"].iter().zip(pair) {
            for (b, c) in hist.counts.iter().enumerate() {
                let (lo, hi) = hist.edges(b);
                out.push_str(&format!("{dataset},{kind},{group},{lo:.6},{hi:.6},{c}\n"));
            }
        }
    }
    write_file(path.as_ref(), out.as_bytes())
}

pub const PLANE_MIN: f64 = -0.25;
pub const PLANE_MAX: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub s: f64,
    pub t: f64,
    pub max_prob: f64,
    pub predicted: usize,
    pub p_hit: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneScan {
    pub grid_n: usize,
    /// Row-major: `points[i * grid_n + j]` sits at `(s_i, t_j)`.
    pub points: Vec<PlanePoint>,
}

impl PlaneScan {
    pub fn at(&self, i: usize, j: usize) -> &PlanePoint {
        &self.points[i * self.grid_n + j]
    }
}

/// Lattice coordinate `i` of `grid_n` over `[−0.25, 1.25]`.
pub fn lattice(i: usize, grid_n: usize) -> f64 {
    if grid_n == 1 {
        return PLANE_MIN;
    }
    PLANE_MIN + i as f64 * ((PLANE_MAX - PLANE_MIN) / (grid_n - 1) as f64)
}

/// `clamp(x1 + (s (x2 − x1) + t (x3 − x1)))`; the inner sum makes the point
/// exactly symmetric under swapping `(x2, s)` with `(x3, t)`.
pub fn plane_image(x1: &[f64], x2: &[f64], x3: &[f64], s: f64, t: f64) -> Vec<f64> {
    x1.iter()
        .zip(x2)
        .zip(x3)
        .map(|((&a, &b), &c)| (a + (s * (b - a) + t * (c - a))).clamp(0.0, 1.0))
        .collect()
}

fn check_plane(x1: &[f64], x2: &[f64], x3: &[f64]) -> Result<()> {
    if x1.len() != x2.len() || x1.len() != x3.len() {
        return Err(Error::shape(x1.len(), x2.len().max(x3.len())));
    }
    let u: Vec<f64> = x2.iter().zip(x1).map(|(b, a)| b - a).collect();
    let v: Vec<f64> = x3.iter().zip(x1).map(|(c, a)| c - a).collect();
    let dot = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    let (uu, vv, uv) = (dot(&u, &u), dot(&v, &v), dot(&u, &v));
    if uu == 0.0 || vv == 0.0 || uu * vv - uv * uv <= 1e-12 * uu * vv {
        return Err(Error::DegeneratePlane);
    }
    Ok(())
}

fn point_from(s: f64, t: f64, pred: &Prediction, out: &ProberOutput) -> PlanePoint {
    PlanePoint {
        s,
        t,
        max_prob: pred.max_prob(),
        predicted: pred.predicted,
        p_hit: out.p_hit,
        verdict: out.verdict,
    }
}

pub fn plane_point(
    classifier: &Classifier,
    prober: &Prober,
    images: [&[f64]; 3],
    s: f64,
    t: f64,
) -> Result<PlanePoint> {
    let [x1, x2, x3] = images;
    check_plane(x1, x2, x3)?;
    let pred = classifier.predict(&plane_image(x1, x2, x3, s, t))?;
    let out = prober.predict(&pred.rep)?;
    Ok(point_from(s, t, &pred, &out))
}

pub fn plane_scan(
    classifier: &Classifier,
    prober: &Prober,
    images: [&[f64]; 3],
    grid_n: usize,
) -> Result<PlaneScan> {
    let [x1, x2, x3] = images;
    check_plane(x1, x2, x3)?;
    if grid_n < 2 {
        return Err(Error::InvalidConfig("plane scan needs grid_n >= 2".into()));
    }
    let d = x1.len();
    let mut coords = Vec::with_capacity(grid_n * grid_n);
    let mut batch = ndarray::Array2::zeros((grid_n * grid_n, d));
    for i in 0..grid_n {
        for j in 0..grid_n {
            let (s, t) = (lattice(i, grid_n), lattice(j, grid_n));
            let img = plane_image(x1, x2, x3, s, t);
            batch.row_mut(coords.len()).assign(&ndarray::ArrayView1::from(&img));
            coords.push((s, t));
        }
    }
    let preds = classifier.predict_rows(batch.view())?;
    let outs = prober_outputs(prober, &preds)?;
    Ok(PlaneScan {
        grid_n,
        points: coords
            .iter()
            .zip(preds.iter().zip(&outs))
            .map(|(&(s, t), (p, o))| point_from(s, t, p, o))
            .collect(),
    })
}

pub fn write_plane_csv(path: impl AsRef<Path>, scan: &PlaneScan) -> Result<()> {
    let mut out = String::from("i,j,s,t,max_prob,predicted,p_hit,verdict\n");
    for i in 0..scan.grid_n {
        for j in 0..scan.grid_n {
            let p = scan.at(i, j);
            out.push_str(&format!(
                "{i},{j},{:.6},{:.6},{:.6},{},{:.6},{}\n",
                p.s, p.t, p.max_prob, p.predicted, p.p_hit, p.verdict
            ));
        }
    }
    write_file(path.as_ref(), out.as_bytes())
}
