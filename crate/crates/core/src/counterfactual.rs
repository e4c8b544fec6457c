//! Counterfactuals toward *hit*: gradient ascent on the prober's hit logit in
//! the flow's latent space, decoded back to pixels.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, Prediction};
use crate::data::{write_file, ImageSet, ImageShape};
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::metrics::fmt2;
use crate::nn::{load_checkpoint, save_checkpoint, Mode};
use crate::prober::{Prober, ProberOutput, Verdict, HIT};

pub const RAW_KIND: &str = "counterfactuals";
pub const RECORDS_FILE: &str = "records.json";
pub const RAW_FILE: &str = "deltas.ckpt";
pub const GRID_FILE: &str = "delta_grid.png";
pub const TABLE_FILE: &str = "table4.csv";

/// Smallest per-sample step before the search gives up.
const MIN_STEP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentConfig {
    /// λ; zero returns the flow round trip of the input.
    pub step_size: f64,
    pub max_iters: usize,
    pub stop_p_hit: f64,
    /// Clamp emitted pixels to `[0, 1]`.
    pub clamp: bool,
    /// Halve a sample's step instead of taking a move that lowers its hit logit.
    pub step_halving: bool,
    /// Keep every accepted latent instead of the endpoints only.
    pub record_path: bool,
    /// Samples ascended together.
    pub batch_size: usize,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            step_size: 5e-3,
            max_iters: 500,
            stop_p_hit: 0.99,
            clamp: true,
            step_halving: true,
            record_path: false,
            batch_size: 32,
        }
    }
}

impl AscentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size {} must be finite and >= 0", self.step_size));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.stop_p_hit > 0.5 && self.stop_p_hit <= 1.0) {
            return bad(format!("stop_p_hit {} must lie in (0.5, 1]", self.stop_p_hit));
        }
        if self.batch_size == 0 {
            return bad("ascent batch size must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MissCategory {
    /// Prober says miss and the classifier is wrong.
    TrueMiss,
    /// Prober says miss but the classifier is right.
    FalseMiss,
    /// Prober says hit.
    NotApplicable,
}

impl fmt::Display for MissCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MissCategory::TrueMiss => "TrueMiss",
            MissCategory::FalseMiss => "FalseMiss",
            MissCategory::NotApplicable => "NotApplicable",
        })
    }
}

pub fn categorize_miss(prediction: &Prediction, true_label: usize, verdict: Verdict) -> MissCategory {
    match verdict {
        Verdict::Hit => MissCategory::NotApplicable,
        Verdict::Miss if prediction.predicted != true_label => MissCategory::TrueMiss,
        Verdict::Miss => MissCategory::FalseMiss,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredSummary {
    pub label: usize,
    pub max_prob: f64,
}

impl From<&Prediction> for PredSummary {
    fn from(p: &Prediction) -> Self {
        Self {
            label: p.predicted,
            max_prob: p.max_prob(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualResult {
    /// Position of the sample in its source set.
    pub index: usize,
    pub true_label: usize,
    pub x: Vec<f64>,
    /// `z(0)` and `z*`, or every accepted latent with `record_path`.
    pub z_path: Vec<Vec<f64>>,
    pub cf: Vec<f64>,
    /// `cf − x`.
    pub delta: Vec<f64>,
    pub p_hit_before: f64,
    pub p_hit_after: f64,
    pub pred_before: PredSummary,
    pub pred_after: PredSummary,
    pub category: MissCategory,
    pub converged: bool,
    pub iterations: usize,
    /// Hit logit at each accepted latent, starting at `z(0)`.
    pub hit_logits: Vec<f64>,
}

impl CounterfactualResult {
    pub fn record(&self) -> CounterfactualRecord {
        CounterfactualRecord {
            index: self.index,
            true_label: self.true_label,
            category: self.category,
            p_hit_before: self.p_hit_before,
            p_hit_after: self.p_hit_after,
            pred_before: self.pred_before,
            pred_after: self.pred_after,
            converged: self.converged,
            iterations: self.iterations,
            hit_logits: self.hit_logits.clone(),
            max_abs_delta: self.delta.iter().fold(0.0, |m, d| m.max(d.abs())),
        }
    }
}

/// The per-sample summary written to `records.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub index: usize,
    pub true_label: usize,
    pub category: MissCategory,
    pub p_hit_before: f64,
    pub p_hit_after: f64,
    pub pred_before: PredSummary,
    pub pred_after: PredSummary,
    pub converged: bool,
    pub iterations: usize,
    pub hit_logits: Vec<f64>,
    pub max_abs_delta: f64,
}

/// Hit logits, hit probabilities and latent gradients of the composed
/// objective `hit_logit(prober, f_l(g(z)))` for a batch of latents.
pub struct Objective {
    pub hit_logit: Array1<f64>,
    pub p_hit: Array1<f64>,
    pub grad: Array2<f64>,
}

pub fn objective(classifier: &Classifier, prober: &Prober, flow: &Flow, z: ArrayView2<f64>) -> Result<Objective> {
    let (x, _) = flow.decode_rows(z)?;
    let n = x.nrows();
    let (rep, ft) = classifier.features.forward(x.into_dyn(), &mut Mode::Eval);
    let (logits, pt) = prober.net.forward(rep, &mut Mode::Eval);
    let logits = logits
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape("prober logits (n, 2)", e))?;
    let mut g = ArrayD::zeros(IxDyn(&[n, 2]));
    for i in 0..n {
        g[[i, HIT]] = 1.0;
    }
    let (g_rep, _) = prober.net.backward(&pt, g);
    let (g_x, _) = classifier.features.backward(&ft, g_rep);
    let g_x = g_x
        .into_shape_with_order((n, flow.dim()))
        .map_err(|e| Error::shape("input gradient rows", e))?;
    let (grad, _) = flow.decode_vjp_rows(z, g_x.view())?;
    let out: Vec<ProberOutput> = logits
        .rows()
        .into_iter()
        .map(|l| ProberOutput::from_logits([l[0], l[1]]))
        .collect();
    Ok(Objective {
        hit_logit: logits.column(HIT).to_owned(),
        p_hit: out.iter().map(|o| o.p_hit).collect(),
        grad,
    })
}

/// Per-sample ascent state.
struct Track {
    z: Vec<f64>,
    logit: f64,
    p_hit: f64,
    grad: Vec<f64>,
    step: f64,
    iterations: usize,
    path: Vec<Vec<f64>>,
    logits: Vec<f64>,
    done: Option<bool>,
}

fn finite_row(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Hit logit, hit probability and gradient per proposal row; `None` where
/// the row decodes to non-finite values (a rejected step).
fn evaluate_proposals(
    classifier: &Classifier,
    prober: &Prober,
    flow: &Flow,
    proposal: &Array2<f64>,
) -> Result<Vec<Option<(f64, f64, Vec<f64>)>>> {
    let unpack = |o: &Objective, r: usize| {
        let g = o.grad.row(r).to_vec();
        (o.hit_logit[r].is_finite() && finite_row(&g)).then(|| (o.hit_logit[r], o.p_hit[r], g))
    };
    match objective(classifier, prober, flow, proposal.view()) {
        Ok(o) => Ok((0..proposal.nrows()).map(|r| unpack(&o, r)).collect()),
        Err(Error::NonFinite(_)) => (0..proposal.nrows())
            .map(|r| match objective(classifier, prober, flow, proposal.slice(ndarray::s![r..r + 1, ..])) {
                Ok(o) => Ok(unpack(&o, 0)),
                Err(Error::NonFinite(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect(),
        Err(e) => Err(e),
    }
}

/// Runs the latent ascent on a batch of latents; returns the tracks in order.
fn ascend(
    classifier: &Classifier,
    prober: &Prober,
    flow: &Flow,
    z0: &Array2<f64>,
    config: &AscentConfig,
) -> Result<Vec<Track>> {
    let start = objective(classifier, prober, flow, z0.view())?;
    let mut tracks: Vec<Track> = (0..z0.nrows())
        .map(|i| {
            let z = z0.row(i).to_vec();
            let logit = start.hit_logit[i];
            let p = start.p_hit[i];
            let grad = start.grad.row(i).to_vec();
            let done = if config.step_size == 0.0 {
                Some(p >= config.stop_p_hit)
            } else if p >= config.stop_p_hit {
                Some(true)
            } else if !finite_row(&grad) || !logit.is_finite() {
                Some(false)
            } else {
                None
            };
            Track {
                path: vec![z.clone()],
                z,
                logit,
                p_hit: p,
                grad,
                step: config.step_size,
                iterations: 0,
                logits: vec![logit],
                done,
            }
        })
        .collect();

    loop {
        let active: Vec<usize> = (0..tracks.len()).filter(|&i| tracks[i].done.is_none()).collect();
        if active.is_empty() {
            break;
        }
        let d = flow.dim();
        let proposal = Array2::from_shape_fn((active.len(), d), |(r, j)| {
            let t = &tracks[active[r]];
            t.z[j] + t.step * t.grad[j]
        });
        let evals = evaluate_proposals(classifier, prober, flow, &proposal)?;
        for (r, &i) in active.iter().enumerate() {
            let t = &mut tracks[i];
            t.iterations += 1;
            match evals[r].clone() {
                Some((logit, p, g)) if !config.step_halving || logit >= t.logit => {
                    t.z = proposal.row(r).to_vec();
                    t.logit = logit;
                    t.p_hit = p;
                    t.grad = g;
                    t.logits.push(logit);
                    if config.record_path {
                        t.path.push(t.z.clone());
                    }
                }
                Some(_) => t.step *= 0.5,
                None if config.step_halving => t.step *= 0.5,
                None => t.done = Some(false),
            }
            if t.done.is_some() {
                continue;
            }
            if t.p_hit >= config.stop_p_hit {
                t.done = Some(true);
            } else if t.iterations >= config.max_iters || t.step < MIN_STEP {
                t.done = Some(false);
            }
        }
    }
    for t in &mut tracks {
        if !config.record_path {
            t.path.push(t.z.clone());
        }
    }
    Ok(tracks)
}

/// Counterfactuals for the given samples (channel-first rows in `[0, 1]`).
pub fn adc_hit_rows(
    x: ArrayView2<f64>,
    true_labels: &[usize],
    indices: &[usize],
    classifier: &Classifier,
    prober: &Prober,
    flow: &Flow,
    config: &AscentConfig,
) -> Result<Vec<CounterfactualResult>> {
    config.validate()?;
    if x.ncols() != classifier.input_len() || flow.dim() != classifier.input_len() {
        return Err(Error::shape(
            format!("images of {} values for classifier and flow", classifier.input_len()),
            format!("{} values, flow dim {}", x.ncols(), flow.dim()),
        ));
    }
    if true_labels.len() != x.nrows() || indices.len() != x.nrows() {
        return Err(Error::shape(x.nrows(), true_labels.len().min(indices.len())));
    }
    let mut out = Vec::with_capacity(x.nrows());
    for start in (0..x.nrows()).step_by(config.batch_size) {
        let end = (start + config.batch_size).min(x.nrows());
        let xb = x.slice(ndarray::s![start..end, ..]);
        let before = classifier.predict_rows(xb)?;
        let p_before = prober.predict_rows(rep_rows(&before).view())?;
        let (z0, _) = flow.encode_rows(xb)?;
        let tracks = ascend(classifier, prober, flow, &z0, config)?;
        let z_star = Array2::from_shape_fn(z0.raw_dim(), |(i, j)| tracks[i].z[j]);
        let (mut cf, _) = flow.decode_rows(z_star.view())?;
        if config.clamp {
            cf.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        let after = classifier.predict_rows(cf.view())?;
        let p_after = prober.predict_rows(rep_rows(&after).view())?;
        for (k, t) in tracks.into_iter().enumerate() {
            let i = start + k;
            let xr = xb.row(k).to_vec();
            let cfr = cf.row(k).to_vec();
            out.push(CounterfactualResult {
                index: indices[i],
                true_label: true_labels[i],
                delta: cfr.iter().zip(&xr).map(|(c, x)| c - x).collect(),
                x: xr,
                z_path: t.path,
                cf: cfr,
                p_hit_before: p_before[k].p_hit,
                p_hit_after: p_after[k].p_hit,
                pred_before: (&before[k]).into(),
                pred_after: (&after[k]).into(),
                category: categorize_miss(&before[k], true_labels[i], p_before[k].verdict),
                converged: t.done == Some(true),
                iterations: t.iterations,
                hit_logits: t.logits,
            });
        }
        log::info!("counterfactuals: {end}/{} done", x.nrows());
    }
    Ok(out)
}

fn rep_rows(preds: &[Prediction]) -> Array2<f64> {
    let d = preds.first().map_or(0, |p| p.rep.len());
    Array2::from_shape_fn((preds.len(), d), |(i, j)| preds[i].rep[j])
}

/// Single-sample form of [`adc_hit_rows`].
pub fn adc_hit(
    x: &[f64],
    true_label: usize,
    classifier: &Classifier,
    prober: &Prober,
    flow: &Flow,
    config: &AscentConfig,
) -> Result<CounterfactualResult> {
    let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape("one image row", e))?;
    Ok(adc_hit_rows(row, &[true_label], &[0], classifier, prober, flow, config)?.remove(0))
}

/// Indices of samples the prober calls *miss*, in set order, at most `limit`.
pub fn miss_indices(classifier: &Classifier, prober: &Prober, set: &ImageSet, limit: Option<usize>) -> Result<Vec<usize>> {
    let preds = classifier.predict_set(set)?;
    let outs = prober.predict_rows(rep_rows(&preds).view())?;
    let mut idx: Vec<usize> = (0..set.len()).filter(|&i| outs[i].verdict == Verdict::Miss).collect();
    if let Some(l) = limit {
        idx.truncate(l);
    }
    Ok(idx)
}

/// Counterfactuals for every prober-predicted miss in `set` (capped at `limit`).
pub fn counterfactuals_for_misses(
    classifier: &Classifier,
    prober: &Prober,
    flow: &Flow,
    set: &ImageSet,
    limit: Option<usize>,
    config: &AscentConfig,
) -> Result<Vec<CounterfactualResult>> {
    let idx = miss_indices(classifier, prober, set, limit)?;
    if idx.is_empty() {
        return Ok(Vec::new());
    }
    let labels: Vec<usize> = idx.iter().map(|&i| set.samples[i].label).collect();
    adc_hit_rows(set.batch(&idx).view(), &labels, &idx, classifier, prober, flow, config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReclassGroup {
    Miss,
    TrueMiss,
    FalseMiss,
}

impl fmt::Display for ReclassGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReclassGroup::Miss => "Miss",
            ReclassGroup::TrueMiss => "TrueMiss",
            ReclassGroup::FalseMiss => "FalseMiss",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReclassReport {
    pub group: ReclassGroup,
    /// True-label accuracy in percent.
    pub acc_before: f64,
    pub acc_after: f64,
    /// Mean change of classifier max probability, in percentage points.
    pub delta_max_prob: f64,
    pub n: usize,
}

/// Table rows for all misses, true misses and false misses; empty groups are omitted.
pub fn aggregate(records: &[CounterfactualRecord]) -> Vec<ReclassReport> {
    let groups = [
        (ReclassGroup::Miss, None),
        (ReclassGroup::TrueMiss, Some(MissCategory::TrueMiss)),
        (ReclassGroup::FalseMiss, Some(MissCategory::FalseMiss)),
    ];
    let mut out = Vec::new();
    for (group, cat) in groups {
        let members: Vec<&CounterfactualRecord> = records
            .iter()
            .filter(|r| r.category != MissCategory::NotApplicable && cat.is_none_or(|c| r.category == c))
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let acc = |f: fn(&CounterfactualRecord) -> usize| {
            100.0 * members.iter().filter(|r| f(r) == r.true_label).count() as f64 / n
        };
        out.push(ReclassReport {
            group,
            acc_before: acc(|r| r.pred_before.label),
            acc_after: acc(|r| r.pred_after.label),
            delta_max_prob: 100.0
                * members
                    .iter()
                    .map(|r| r.pred_after.max_prob - r.pred_before.max_prob)
                    .sum::<f64>()
                / n,
            n: members.len(),
        });
    }
    out
}

/// Re-predicts originals and counterfactuals with `classifier` and aggregates.
pub fn reclassify_experiment(results: &[CounterfactualResult], classifier: &Classifier) -> Result<Vec<ReclassReport>> {
    if results.is_empty() {
        return Err(Error::EmptyGroup("no counterfactual results".into()));
    }
    let d = classifier.input_len();
    let rows = |f: fn(&CounterfactualResult) -> &Vec<f64>| {
        Array2::from_shape_fn((results.len(), d), |(i, j)| f(&results[i])[j])
    };
    let before = classifier.predict_rows(rows(|r| &r.x).view())?;
    let after = classifier.predict_rows(rows(|r| &r.cf).view())?;
    let records: Vec<CounterfactualRecord> = results
        .iter()
        .enumerate()
        .map(|(i, r)| CounterfactualRecord {
            pred_before: (&before[i]).into(),
            pred_after: (&after[i]).into(),
            ..r.record()
        })
        .collect();
    Ok(aggregate(&records))
}

/// Re-predicts stored originals and counterfactuals and aggregates by the
/// recorded categories.
pub fn reclassify_saved(
    raw: &RawDeltas,
    records: &[CounterfactualRecord],
    classifier: &Classifier,
) -> Result<Vec<ReclassReport>> {
    if raw.index.len() != records.len() || raw.x.nrows() != records.len() {
        return Err(Error::shape(
            format!("{} records", records.len()),
            format!("{} stored counterfactuals", raw.x.nrows()),
        ));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let before = classifier.predict_rows(raw.x.view())?;
    let after = classifier.predict_rows(raw.cf.view())?;
    let fresh: Vec<CounterfactualRecord> = records
        .iter()
        .enumerate()
        .map(|(i, r)| CounterfactualRecord {
            pred_before: (&before[i]).into(),
            pred_after: (&after[i]).into(),
            ..r.clone()
        })
        .collect();
    Ok(aggregate(&fresh))
}

/// Columns: group, n, acc_before, acc_after, delta_max_prob.
pub fn write_table4_csv(path: impl AsRef<Path>, reports: &[ReclassReport]) -> Result<()> {
    let mut out = String::from("group,n,acc_before,acc_after,delta_max_prob\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.group,
            r.n,
            fmt2(r.acc_before),
            fmt2(r.acc_after),
            fmt2(r.delta_max_prob)
        ));
    }
    write_file(path.as_ref(), out.as_bytes())
}

pub fn write_records(path: impl AsRef<Path>, records: &[CounterfactualRecord]) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(records)?;
    bytes.push(b'\n');
    write_file(path.as_ref(), &bytes)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<CounterfactualRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Originals, counterfactuals and their differences as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDeltas {
    pub shape: ImageShape,
    pub index: Vec<usize>,
    pub x: Array2<f64>,
    pub cf: Array2<f64>,
    pub delta: Array2<f64>,
}

fn stack(results: &[CounterfactualResult], f: fn(&CounterfactualResult) -> &Vec<f64>) -> ArrayD<f64> {
    let d = results.first().map_or(0, |r| f(r).len());
    ArrayD::from_shape_fn(IxDyn(&[results.len(), d]), |ix| f(&results[ix[0]])[ix[1]])
}

pub fn save_raw(path: impl AsRef<Path>, results: &[CounterfactualResult], shape: ImageShape) -> Result<()> {
    let x = stack(results, |r| &r.x);
    let cf = stack(results, |r| &r.cf);
    let delta = stack(results, |r| &r.delta);
    let z0 = stack(results, |r| &r.z_path[0]);
    let z_star = stack(results, |r| r.z_path.last().expect("non-empty path"));
    let index: Vec<usize> = results.iter().map(|r| r.index).collect();
    save_checkpoint(
        path,
        RAW_KIND,
        0,
        serde_json::Value::Null,
        serde_json::json!({ "shape": shape, "index": index }),
        serde_json::Value::Null,
        &[
            ("x".to_string(), &x),
            ("cf".to_string(), &cf),
            ("delta".to_string(), &delta),
            ("z0".to_string(), &z0),
            ("z_star".to_string(), &z_star),
        ],
    )
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<RawDeltas> {
    let path = path.as_ref();
    let ck = load_checkpoint(path)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if ck.header.module_kind != RAW_KIND {
        return Err(corrupt(format!("expected {RAW_KIND}, found {}", ck.header.module_kind)));
    }
    let shape: ImageShape = serde_json::from_value(ck.header.arch["shape"].clone())?;
    let index: Vec<usize> = serde_json::from_value(ck.header.arch["index"].clone())?;
    let two_d = |name: &str| -> Result<Array2<f64>> {
        ck.tensor(name)?
            .clone()
            .into_dimensionality()
            .map_err(|e| corrupt(format!("{name}: {e}")))
    };
    Ok(RawDeltas {
        shape,
        index,
        x: two_d("x")?,
        cf: two_d("cf")?,
        delta: two_d("delta")?,
    })
}

/// Paths of everything [`write_outputs`] emits.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualOutputs {
    pub records: PathBuf,
    pub raw: PathBuf,
    pub grid: PathBuf,
    pub table: PathBuf,
}

/// Writes records, raw tensors, the x | cf | δx grid and the re-classification table.
pub fn write_outputs(
    dir: impl AsRef<Path>,
    results: &[CounterfactualResult],
    shape: ImageShape,
) -> Result<CounterfactualOutputs> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = CounterfactualOutputs {
        records: dir.join(RECORDS_FILE),
        raw: dir.join(RAW_FILE),
        grid: dir.join(GRID_FILE),
        table: dir.join(TABLE_FILE),
    };
    let records: Vec<CounterfactualRecord> = results.iter().map(CounterfactualResult::record).collect();
    write_records(&out.records, &records)?;
    write_table4_csv(&out.table, &aggregate(&records))?;
    if !results.is_empty() {
        save_raw(&out.raw, results, shape)?;
        delta_grid(results, shape, &out.grid)?;
    }
    Ok(out)
}

/// One row per result: `x | cf | δx`, δx on a fixed diverging scale over `[−1, 1]`.
pub fn delta_grid(results: &[CounterfactualResult], shape: ImageShape, path: impl AsRef<Path>) -> Result<()> {
    if results.is_empty() {
        return Err(Error::EmptyGroup("no counterfactuals to draw".into()));
    }
    let rows: Vec<[Vec<f64>; 3]> = results
        .iter()
        .map(|r| [r.x.clone(), r.cf.clone(), r.delta.clone()])
        .collect();
    crate::plot::triptych_grid(&rows, shape, path.as_ref())
}

/// Per-sample counts by category, for logging.
pub fn category_counts(results: &[CounterfactualResult]) -> (usize, usize) {
    let t = results.iter().filter(|r| r.category == MissCategory::TrueMiss).count();
    let f = results.iter().filter(|r| r.category == MissCategory::FalseMiss).count();
    (t, f)
}

/// Latent rows of the results, for inspecting trajectories.
pub fn latent_endpoints(results: &[CounterfactualResult]) -> (Array2<f64>, Array2<f64>) {
    let z0 = stack(results, |r| &r.z_path[0]);
    let zs = stack(results, |r| r.z_path.last().expect("non-empty path"));
    let to2 = |a: ArrayD<f64>| a.into_dimensionality::<ndarray::Ix2>().expect("2-d stack");
    (to2(z0), to2(zs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(predicted: usize) -> Prediction {
        let mut logits = vec![0.0; 10];
        logits[predicted] = 3.0;
        Prediction::from_logits(logits, vec![])
    }

    #[test]
    fn categories() {
        assert_eq!(categorize_miss(&pred(9), 4, Verdict::Miss), MissCategory::TrueMiss);
        assert_eq!(categorize_miss(&pred(4), 4, Verdict::Miss), MissCategory::FalseMiss);
        assert_eq!(categorize_miss(&pred(9), 4, Verdict::Hit), MissCategory::NotApplicable);
    }

    fn rec(cat: MissCategory, y: usize, before: (usize, f64), after: (usize, f64)) -> CounterfactualRecord {
        CounterfactualRecord {
            index: 0,
            true_label: y,
            category: cat,
            p_hit_before: 0.1,
            p_hit_after: 0.9,
            pred_before: PredSummary {
                label: before.0,
                max_prob: before.1,
            },
            pred_after: PredSummary {
                label: after.0,
                max_prob: after.1,
            },
            converged: true,
            iterations: 3,
            hit_logits: vec![],
            max_abs_delta: 0.0,
        }
    }

    #[test]
    fn aggregation_by_group() {
        let r = vec![
            rec(MissCategory::TrueMiss, 4, (9, 0.5), (4, 0.9)),
            rec(MissCategory::TrueMiss, 1, (7, 0.6), (7, 0.6)),
            rec(MissCategory::FalseMiss, 2, (2, 0.4), (2, 0.8)),
        ];
        let rep = aggregate(&r);
        assert_eq!(rep.len(), 3);
        assert_eq!(rep[0].group, ReclassGroup::Miss);
        assert!((rep[0].acc_before - 100.0 / 3.0).abs() < 1e-12);
        assert!((rep[0].acc_after - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(rep[1].acc_before, 0.0);
        assert_eq!(rep[1].acc_after, 50.0);
        assert!((rep[1].delta_max_prob - 20.0).abs() < 1e-12);
        assert_eq!(rep[2].acc_before, 100.0);
        assert!((rep[2].delta_max_prob - 40.0).abs() < 1e-12);
    }

    #[test]
    fn empty_groups_are_omitted() {
        let r = vec![rec(MissCategory::FalseMiss, 2, (2, 0.4), (2, 0.8))];
        let groups: Vec<ReclassGroup> = aggregate(&r).iter().map(|g| g.group).collect();
        assert_eq!(groups, vec![ReclassGroup::Miss, ReclassGroup::FalseMiss]);
    }

    #[test]
    fn config_bounds() {
        assert!(AscentConfig::default().validate().is_ok());
        let bad = AscentConfig {
            stop_p_hit: 0.5,
            ..AscentConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = AscentConfig {
            step_size: 0.0,
            ..AscentConfig::default()
        };
        assert!(zero.validate().is_ok());
    }
}
