//! Evaluation: cross-modal retrieval with bootstrap pools, Procrustes
//! alignment, ridge probes and the metric definitions.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::linalg::{cholesky, cholesky_solve, det, svd, Mat, RANK_TOL};
use crate::model::EncoderBundle;

// ---------------------------------------------------------------- retrieval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top1_accuracy_percent_mean: f64,
    pub top1_accuracy_percent_std: f64,
    pub mean_rank_mean: f64,
    pub mean_rank_std: f64,
    /// Average candidate count per pool.
    pub pool_size: f64,
    pub n_pools: usize,
    /// `encoder` or `projected`.
    pub embedding_space: String,
}

fn normalized(rows: &[Vec<f64>], what: &str) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(CoreError::InvalidArgument(format!("{what} row {i} has zero or non-finite norm")));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank (1-based) of the true candidate for every query under descending
/// cosine similarity; ties go to the lower candidate index.
pub fn retrieval_ranks(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Result<Vec<usize>> {
    if queries.len() != candidates.len() || queries.is_empty() {
        return Err(CoreError::InvalidArgument("retrieval needs equally many queries and candidates".into()));
    }
    let q = normalized(queries, "query")?;
    let c = normalized(candidates, "candidate")?;
    Ok(q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let own = dot(qi, &c[i]);
            1 + c.iter().enumerate().filter(|&(j, cj)| j != i && { let s = dot(qi, cj); s > own || (s == own && j < i) }).count()
        })
        .collect())
}

/// Single-pool retrieval: row `i` of `candidates` matches row `i` of
/// `queries`.
pub fn retrieval(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Result<RetrievalReport> {
    let ranks = retrieval_ranks(queries, candidates)?;
    let (top1, mean_rank) = summarize_ranks(&ranks);
    Ok(RetrievalReport {
        top1_accuracy_percent_mean: top1,
        top1_accuracy_percent_std: 0.0,
        mean_rank_mean: mean_rank,
        mean_rank_std: 0.0,
        pool_size: ranks.len() as f64,
        n_pools: 1,
        embedding_space: "encoder".into(),
    })
}

fn summarize_ranks(ranks: &[usize]) -> (f64, f64) {
    let n = ranks.len() as f64;
    (100.0 * ranks.iter().filter(|&&r| r == 1).count() as f64 / n, ranks.iter().sum::<usize>() as f64 / n)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Repeated retrieval over random pools of `pool_participants`
/// participants, each pool holding all of their segment pairs.
pub fn bootstrap_retrieval(
    queries: &[Vec<f64>],
    candidates: &[Vec<f64>],
    participant_of: &[u32],
    pool_participants: usize,
    n_pools: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    if queries.len() != participant_of.len() || candidates.len() != queries.len() {
        return Err(CoreError::InvalidArgument("queries, candidates and participant ids must align".into()));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &p) in participant_of.iter().enumerate() {
        groups.entry(p).or_default().push(i);
    }
    let ids: Vec<u32> = groups.keys().copied().collect();
    if pool_participants == 0 || pool_participants > ids.len() || n_pools == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "cannot draw pools of {pool_participants} from {} participants",
            ids.len()
        )));
    }
    let q = normalized(queries, "query")?;
    let c = normalized(candidates, "candidate")?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (mut top1s, mut ranks, mut sizes) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_pools {
        let mut rows: Vec<usize> = index::sample(rng, ids.len(), pool_participants)
            .into_iter()
            .flat_map(|k| groups[&ids[k]].iter().copied())
            .collect();
        rows.sort_unstable();
        let pq: Vec<Vec<f64>> = rows.iter().map(|&i| q[i].clone()).collect();
        let pc: Vec<Vec<f64>> = rows.iter().map(|&i| c[i].clone()).collect();
        let (t, r) = summarize_ranks(&retrieval_ranks(&pq, &pc)?);
        top1s.push(t);
        ranks.push(r);
        sizes.push(rows.len() as f64);
    }
    let (tm, ts) = mean_std(&top1s);
    let (rm, rs) = mean_std(&ranks);
    Ok(RetrievalReport {
        top1_accuracy_percent_mean: tm,
        top1_accuracy_percent_std: ts,
        mean_rank_mean: rm,
        mean_rank_std: rs,
        pool_size: mean_std(&sizes).0,
        n_pools,
        embedding_space: "encoder".into(),
    })
}

// ---------------------------------------------------------------- procrustes

#[derive(Clone, Debug, PartialEq)]
pub struct ProcrustesFit {
    pub scale: f64,
    /// `D x D`; maps row vectors as `x R`.
    pub rotation: Mat,
    pub translation: Vec<f64>,
    /// Frobenius norm of `scale * source * R + translation - target`.
    pub residual: f64,
    /// Directions of the cross-covariance with (numerically) zero singular
    /// value; the rotation is not unique along them.
    pub degenerate: usize,
}

impl ProcrustesFit {
    pub fn apply(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let m = Mat::from_rows(x)?.matmul(&self.rotation);
        Ok(m.to_rows()
            .into_iter()
            .map(|r| r.iter().zip(&self.translation).map(|(v, t)| self.scale * v + t).collect())
            .collect())
    }
}

fn column_means(m: &Mat) -> Vec<f64> {
    let mut mu = vec![0.0; m.cols];
    for r in m.data.chunks(m.cols) {
        mu.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    mu.iter_mut().for_each(|a| *a /= m.rows as f64);
    mu
}

fn centered(m: &Mat, mu: &[f64]) -> Mat {
    let mut c = m.clone();
    for r in c.data.chunks_mut(m.cols) {
        r.iter_mut().zip(mu).for_each(|(a, b)| *a -= b);
    }
    c
}

/// Least-squares similarity transform (scale, proper rotation,
/// translation) taking `source` rows onto `target` rows.
pub fn procrustes_align(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<ProcrustesFit> {
    procrustes_fit(source, target, true)
}

/// Same as [`procrustes_align`] with the scale pinned to 1.
pub fn procrustes_rigid(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<ProcrustesFit> {
    procrustes_fit(source, target, false)
}

fn procrustes_fit(source: &[Vec<f64>], target: &[Vec<f64>], with_scale: bool) -> Result<ProcrustesFit> {
    let x = Mat::from_rows(source)?;
    let y = Mat::from_rows(target)?;
    if x.rows != y.rows || x.cols != y.cols || x.rows == 0 {
        return Err(CoreError::InvalidArgument("procrustes needs equally shaped, non-empty point sets".into()));
    }
    if x.data.iter().chain(&y.data).any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidArgument("procrustes inputs must be finite".into()));
    }
    let (mx, my) = (column_means(&x), column_means(&y));
    let (xc, yc) = (centered(&x, &mx), centered(&y, &my));
    let cross = xc.t_matmul(&yc);
    let d = svd(&cross)?;
    let smax = d.s.first().copied().unwrap_or(0.0);
    let degenerate = d.s.iter().filter(|&&s| s <= smax * RANK_TOL).count();
    if degenerate > 0 {
        log::warn!("procrustes: {degenerate} degenerate directions in the cross-covariance");
    }
    if source == target {
        // The identity is an optimum; returning it exactly avoids SVD round-off.
        let dim = x.cols;
        return Ok(ProcrustesFit { scale: 1.0, rotation: Mat::identity(dim), translation: vec![0.0; dim], residual: 0.0, degenerate });
    }
    // Flip the weakest direction if U Vᵀ would be a reflection.
    let mut sign = vec![1.0; d.s.len()];
    if det(&d.u) * det(&d.v) < 0.0 {
        *sign.last_mut().expect("non-empty") = -1.0;
    }
    let mut us = d.u.clone();
    for r in 0..us.rows {
        for (c, s) in sign.iter().enumerate() {
            *us.at_mut(r, c) *= s;
        }
    }
    let rotation = us.matmul(&d.v.transpose());
    let trace: f64 = d.s.iter().zip(&sign).map(|(s, g)| s * g).sum();
    let sx = xc.frobenius().powi(2);
    let scale = if with_scale && sx > 0.0 { trace / sx } else { 1.0 };
    let rotated_mean = Mat { rows: 1, cols: mx.len(), data: mx.clone() }.matmul(&rotation);
    let translation: Vec<f64> = my.iter().zip(&rotated_mean.data).map(|(t, r)| t - scale * r).collect();
    let mut fit = ProcrustesFit { scale, rotation, translation, residual: 0.0, degenerate };
    let mapped = fit.apply(source)?;
    fit.residual = mapped.iter().flatten().zip(target.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(fit)
}

// ---------------------------------------------------------------- ridge

/// Linear model `y = x · w + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| dot(r, &self.weights) + self.intercept).collect()
    }
}

/// Closed-form ridge regression on centered data, solved by Cholesky.
pub fn ridge_fit(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<RidgeModel> {
    if !(alpha >= 0.0) {
        return Err(CoreError::InvalidArgument(format!("ridge alpha must be non-negative, got {alpha}")));
    }
    if x.len() != y.len() || x.len() < 2 {
        return Err(CoreError::InvalidArgument("ridge needs at least 2 rows and one target per row".into()));
    }
    let xm = Mat::from_rows(x)?;
    let mu = column_means(&xm);
    let xc = centered(&xm, &mu);
    let ym = y.iter().sum::<f64>() / y.len() as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let mut gram = xc.t_matmul(&xc);
    for i in 0..gram.rows {
        *gram.at_mut(i, i) += alpha;
    }
    let rhs = xc.t_matmul(&Mat { rows: yc.len(), cols: 1, data: yc }).data;
    let l = cholesky(&gram)?;
    let weights = cholesky_solve(&l, &rhs);
    let intercept = ym - dot(&mu, &weights);
    Ok(RidgeModel { weights, intercept, alpha })
}

/// Default log-spaced ridge grid, 1e-3 to 1e3.
pub fn alpha_grid() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(e)).collect()
}

/// Picks alpha by grouped k-fold cross-validated MSE (rows sharing a group
/// id never straddle folds), then refits on all rows.
pub fn ridge_cv(x: &[Vec<f64>], y: &[f64], groups: &[u32], alphas: &[f64], folds: usize, seed: u64) -> Result<RidgeModel> {
    let mut ids: Vec<u32> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let k = folds.min(ids.len());
    if k < 2 {
        return ridge_fit(x, y, alphas.first().copied().unwrap_or(1.0));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &g)| (g, i % k)).collect();
    let mut best = (f64::INFINITY, alphas[0]);
    for &alpha in alphas {
        let mut sse = 0.0;
        let mut ok = true;
        for f in 0..k {
            let (tr, te): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| fold_of[&groups[i]] != f);
            if tr.len() < 2 || te.is_empty() {
                continue;
            }
            let xt: Vec<Vec<f64>> = tr.iter().map(|&i| x[i].clone()).collect();
            let yt: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
            match ridge_fit(&xt, &yt, alpha) {
                Ok(m) => {
                    let xe: Vec<Vec<f64>> = te.iter().map(|&i| x[i].clone()).collect();
                    sse += m.predict(&xe).iter().zip(&te).map(|(p, &i)| (p - y[i]).powi(2)).sum::<f64>();
                }
                Err(CoreError::Numeric(_)) => ok = false,
                Err(e) => return Err(e),
            }
        }
        if ok && sse < best.0 {
            best = (sse, alpha);
        }
    }
    ridge_fit(x, y, best.1)
}

/// Per-dimension z-scoring fitted on training rows.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let s = (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|r| r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()).collect()
    }
}

// ---------------------------------------------------------------- metrics

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub pearson_r: Option<f64>,
    pub roc_auc: Option<f64>,
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(CoreError::InvalidArgument("metric inputs must be non-empty and aligned".into()));
    }
    let n = y_true.len() as f64;
    let mae = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let rmse = (y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Metrics { mae: Some(mae), rmse: Some(rmse), pearson_r: Some(pearson(y_true, y_pred)), roc_auc: None })
}

/// ROC AUC as the Mann-Whitney statistic with tie-averaged ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::InvalidArgument("scores and labels must align".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::InvalidArgument("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

// ---------------------------------------------------------------- probing

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Hr,
    Sdnn,
    Rmssd,
    Trait,
}

impl Target {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hr" => Ok(Target::Hr),
            "sdnn" => Ok(Target::Sdnn),
            "rmssd" => Ok(Target::Rmssd),
            "trait" => Ok(Target::Trait),
            _ => Err(CoreError::InvalidArgument(format!("unknown target `{s}` (expected hr, sdnn, rmssd or trait)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Hr => "hr",
            Target::Sdnn => "sdnn",
            Target::Rmssd => "rmssd",
            Target::Trait => "trait",
        }
    }

    pub fn is_binary(self) -> bool {
        self == Target::Trait
    }

    /// Target value of segment `i`.
    pub fn value(self, data: &Dataset, i: usize) -> f64 {
        let s = &data.segments[i];
        match self {
            Target::Hr => s.labels.hr,
            Target::Sdnn => s.labels.sdnn,
            Target::Rmssd => s.labels.rmssd,
            Target::Trait => f64::from(u8::from(data.trait_of(s.participant_id))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Segment,
    Participant,
}

impl Granularity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "segment" => Ok(Granularity::Segment),
            "participant" => Ok(Granularity::Participant),
            _ => Err(CoreError::InvalidArgument(format!("unknown granularity `{s}` (expected segment or participant)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: Target,
    pub granularity: Granularity,
    pub label_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Metrics,
    /// Ridge penalty picked by cross-validation (absent for end-to-end
    /// supervised models).
    pub alpha: Option<f64>,
}

/// Minimum number of labelled training rows a probe accepts.
pub const MIN_PROBE_ROWS: usize = 10;

/// `round(fraction * n)` (at least one) training segments spread over as
/// many participants as possible: participants are visited round-robin in
/// a random order, each contributing its segments in random order.
pub fn subsample_labels<R: Rng>(data: &Dataset, train: &[usize], fraction: f64, rng: &mut R) -> Vec<usize> {
    let want = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len().max(1)).min(train.len());
    let mut groups: Vec<Vec<usize>> = data.by_participant(train).into_values().collect();
    groups.shuffle(rng);
    for g in &mut groups {
        g.shuffle(rng);
    }
    let mut out = Vec::with_capacity(want);
    let mut round = 0;
    while out.len() < want {
        for g in &groups {
            if let Some(&i) = g.get(round) {
                out.push(i);
                if out.len() == want {
                    break;
                }
            }
        }
        round += 1;
    }
    out.sort_unstable();
    out
}

/// Rows (and group ids) for a probe: one per segment, or the mean over
/// each participant's segments.
fn probe_rows(
    data: &Dataset,
    indices: &[usize],
    emb: &BTreeMap<usize, Vec<f64>>,
    target: Target,
    granularity: Granularity,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<u32>) {
    match granularity {
        Granularity::Segment => (
            indices.iter().map(|i| emb[i].clone()).collect(),
            indices.iter().map(|&i| target.value(data, i)).collect(),
            indices.iter().map(|&i| data.segments[i].participant_id).collect(),
        ),
        Granularity::Participant => {
            let (mut x, mut y, mut g) = (Vec::new(), Vec::new(), Vec::new());
            for (p, segs) in data.by_participant(indices) {
                let d = emb[&segs[0]].len();
                let mut m = vec![0.0; d];
                for s in &segs {
                    m.iter_mut().zip(&emb[s]).for_each(|(a, b)| *a += b);
                }
                m.iter_mut().for_each(|a| *a /= segs.len() as f64);
                x.push(m);
                y.push(segs.iter().map(|&s| target.value(data, s)).sum::<f64>() / segs.len() as f64);
                g.push(p);
            }
            (x, y, g)
        }
    }
}

pub fn score(target: Target, y_true: &[f64], y_pred: &[f64]) -> Result<Metrics> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(CoreError::InvalidArgument(format!("score needs equal, non-empty label and prediction sets ({} vs {})", y_true.len(), y_pred.len())));
    }
    if target.is_binary() {
        let labels: Vec<bool> = y_true.iter().map(|&v| v > 0.5).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            // Small held-out sets can be single-class; AUC is then undefined.
            log::warn!("held-out labels contain one class only; AUC not reported");
            return Ok(Metrics::default());
        }
        Ok(Metrics { roc_auc: Some(roc_auc(y_pred, &labels)?), ..Metrics::default() })
    } else {
        regression_metrics(y_true, y_pred)
    }
}

/// Probes precomputed embeddings (`emb[i]` for every train and test segment
/// index). Only training rows inform standardization, label subsampling
/// and alpha selection.
pub fn probe_embeddings(
    data: &Dataset,
    emb: &BTreeMap<usize, Vec<f64>>,
    target: Target,
    granularity: Granularity,
    fraction: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::InvalidArgument(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let train = match granularity {
        Granularity::Segment => subsample_labels(data, &data.train_indices(), fraction, rng),
        Granularity::Participant => {
            // Whole participants are subsampled so aggregation stays honest.
            let mut ids = data.split().train.clone();
            ids.shuffle(rng);
            ids.truncate(((fraction * ids.len() as f64).round() as usize).min(ids.len()));
            data.indices_of(&ids)
        }
    };
    let (xt, yt, gt) = probe_rows(data, &train, emb, target, granularity);
    if xt.len() < MIN_PROBE_ROWS {
        return Err(CoreError::InvalidArgument(format!(
            "label fraction {fraction} leaves {} training rows; at least {MIN_PROBE_ROWS} are needed",
            xt.len()
        )));
    }
    let (xe, ye, _) = probe_rows(data, &data.test_indices(), emb, target, granularity);
    let st = Standardizer::fit(&xt);
    let (xt, xe) = (st.apply(&xt), st.apply(&xe));
    let model = ridge_cv(&xt, &yt, &gt, &alpha_grid(), 5, seed)?;
    let pred = model.predict(&xe);
    Ok(ProbeReport {
        target,
        granularity,
        label_fraction: fraction,
        n_train: xt.len(),
        n_test: xe.len(),
        metrics: score(target, &ye, &pred)?,
        alpha: Some(model.alpha),
    })
}

/// Embeds every train and test segment with the frozen encoder (pooled
/// encoder outputs) and probes them.
pub fn probe(bundle: &EncoderBundle, data: &Dataset, target: Target, granularity: Granularity, fraction: f64, seed: u64) -> Result<ProbeReport> {
    let emb = embed_split(bundle, data, false)?;
    probe_embeddings(data, &emb, target, granularity, fraction, seed)
}

/// Embeddings of all train and test segments keyed by segment index.
pub fn embed_split(bundle: &EncoderBundle, data: &Dataset, projected: bool) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut idx = data.train_indices();
    idx.extend(data.test_indices());
    idx.sort_unstable();
    let rows = bundle.embed(data, &idx, projected)?;
    Ok(idx.into_iter().zip(rows).collect())
}

/// Cross-modal retrieval on the held-out participants: queries from
/// `query` (e.g. the accelerometry student), candidates from `key`.
pub fn cross_modal_retrieval(
    query: &EncoderBundle,
    key: &EncoderBundle,
    data: &Dataset,
    projected: bool,
    pool_participants: usize,
    n_pools: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let test = data.test_indices();
    let q = query.embed(data, &test, projected)?;
    let c = key.embed(data, &test, projected)?;
    let pids: Vec<u32> = test.iter().map(|&i| data.segments[i].participant_id).collect();
    let mut r = bootstrap_retrieval(&q, &c, &pids, pool_participants, n_pools, seed)?;
    r.embedding_space = if projected { "projected" } else { "encoder" }.into();
    Ok(r)
}
