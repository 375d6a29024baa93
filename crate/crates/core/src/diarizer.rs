//! The latent-class diarization engine: priors (random, AHC hard/soft), the
//! soft-clustering iteration with PLDA / SVM / hybrid back-ends, and the
//! eigenvoice (VB) baseline sharing the same loop skeleton.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{FeatureMatrix, SegmentGrid};
use crate::error::{Error, Result};
use crate::gmm::DiagonalGmm;
use crate::scoring::{
    plda_llr, posteriors_from_scores, svm_score, train_speaker_svms, PldaModel, Preprocessor,
    ScoreKind,
};
use crate::temporal::{apply_score_window, hmm_smooth};
use crate::tvspace::{
    eigenvoice_loglik, extract_ivector, speaker_ivector_cached, IVector, SegmentStatsCache,
    TotalVariability,
};

/// Probability floor on posterior entries. The multiplicative update makes
/// one-hot rows absorbing; the floor keeps every segment recoverable.
pub const EPS_FLOOR: f64 = 1e-6;

/// Row-stochastic segment-by-speaker posterior matrix Q.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    q: Array2<f64>,
}

impl PosteriorMatrix {
    /// Build from non-negative rows: floors entries at `EPS_FLOOR` and
    /// renormalizes each row.
    pub fn from_rows(mut q: Array2<f64>) -> Result<Self> {
        if q.ncols() == 0 || q.nrows() == 0 {
            return Err(Error::Parameter("posterior matrix must be non-empty".into()));
        }
        if q.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Numeric("posterior entries must be finite and >= 0".into()));
        }
        for mut row in q.rows_mut() {
            let sum: f64 = row.sum();
            if sum <= 0.0 {
                log::warn!("all-zero posterior row; falling back to uniform");
                row.fill(1.0 / row.len() as f64);
                continue;
            }
            row.mapv_inplace(|v| (v / sum).max(EPS_FLOOR));
            // restore the row sum by deducting the floor surplus from the
            // largest entry, keeping every entry >= EPS_FLOOR exactly
            let surplus = row.sum() - 1.0;
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            row[argmax] -= surplus;
        }
        Ok(PosteriorMatrix { q })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn segments(&self) -> usize {
        self.q.nrows()
    }

    pub fn speakers(&self) -> usize {
        self.q.ncols()
    }

    /// Hard decision per segment.
    pub fn labels(&self) -> Vec<usize> {
        self.q
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Normalized per-speaker mass (1/M) sum_m q_ms.
    pub fn column_mass(&self) -> Array1<f64> {
        let m = self.segments() as f64;
        let mut out = Array1::zeros(self.speakers());
        for row in self.q.rows() {
            out += &row;
        }
        out.mapv(|v| v / m)
    }

    /// Largest row-wise L1 change against another matrix of the same shape.
    pub fn max_row_delta(&self, other: &PosteriorMatrix) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.q.rows().into_iter().zip(other.q.rows()) {
            let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
            worst = worst.max(d);
        }
        worst
    }
}

/// Similarity back-end selecting how p(X_m, Y_s) is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Plda,
    Svm,
    /// Alternate PLDA and SVM on successive iterations, PLDA first.
    Hybrid,
    /// Eigenvoice log-likelihood scoring (the VB-style baseline).
    Vb,
}

/// How the posterior matrix is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    Random,
    AhcHard,
    AhcSoft,
}

#[derive(Debug, Clone)]
pub struct DiarizationConfig {
    pub speakers: usize,
    pub seg_len: usize,
    /// Data-level half window (segments) for segment i-vector extraction.
    pub data_half_window: usize,
    /// Score-level half window (segments).
    pub score_half_window: usize,
    /// Exponential decay rate of the neighbor window.
    pub lambda: f64,
    pub kappa_plda: f64,
    pub kappa_svm: f64,
    /// HMM self-loop probability.
    pub self_loop: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub backend: Backend,
    pub init: InitMethod,
    pub hard_prior_q: f64,
    pub soft_prior_k: f64,
    pub svm_c_reg: f64,
    pub seed: u64,
}

impl Default for DiarizationConfig {
    fn default() -> Self {
        DiarizationConfig {
            speakers: 2,
            seg_len: 10,
            data_half_window: 40,
            score_half_window: 40,
            lambda: 0.05,
            kappa_plda: 1.0,
            kappa_svm: 10.0,
            self_loop: 0.98,
            max_iters: 20,
            tol: 1e-3,
            backend: Backend::Plda,
            init: InitMethod::AhcSoft,
            hard_prior_q: 0.7,
            soft_prior_k: 10.0,
            svm_c_reg: 1.0,
            seed: 0,
        }
    }
}

impl DiarizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 1 {
            return Err(Error::Parameter("speaker count must be >= 1".into()));
        }
        if self.seg_len < 1 {
            return Err(Error::Parameter("segment length must be >= 1 frame".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::Parameter("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Parameter("tolerance must be > 0".into()));
        }
        if self.speakers > 1 {
            let lo = 1.0 / self.speakers as f64;
            if !(self.hard_prior_q > lo && self.hard_prior_q <= 1.0) {
                return Err(Error::Parameter(format!(
                    "hard prior q must lie in (1/S, 1] = ({lo}, 1]"
                )));
            }
        }
        if !(self.soft_prior_k > 0.0) {
            return Err(Error::Parameter("soft prior k must be > 0".into()));
        }
        if !(self.self_loop > 0.0 && self.self_loop <= 1.0) {
            return Err(Error::Parameter("self-loop must lie in (0, 1]".into()));
        }
        if !(self.kappa_plda >= 0.0) || !(self.kappa_svm >= 0.0) {
            return Err(Error::Parameter("kappa must be >= 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Parameter("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DiarizationResult {
    /// argmax_s Q[m, s] per segment.
    pub labels: Vec<usize>,
    pub q: PosteriorMatrix,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

/// Seeded Dirichlet(1,...,1) rows.
pub fn random_prior(m: usize, s: usize, seed: u64) -> Result<PosteriorMatrix> {
    if m < 1 || s < 1 {
        return Err(Error::Parameter("prior needs M >= 1 and S >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::<f64>::zeros((m, s));
    for mut row in q.rows_mut() {
        for v in row.iter_mut() {
            // unit-rate exponential draws normalize to a flat Dirichlet
            let u: f64 = rng.gen::<f64>();
            *v = -(1.0 - u).ln();
        }
    }
    PosteriorMatrix::from_rows(q)
}

/// Agglomerative clustering of segment i-vectors under average-linkage PLDA
/// log-likelihood-ratio similarity, merged down to exactly `s` clusters.
/// Ties break on the lowest cluster index pair.
pub fn ahc_cluster(seg_ivectors: &[IVector], p: &PldaModel, s: usize) -> Result<Vec<usize>> {
    let m = seg_ivectors.len();
    if s < 1 {
        return Err(Error::Parameter("cluster count must be >= 1".into()));
    }
    if m < s {
        return Err(Error::Data(format!("cannot form {s} clusters from {m} segments")));
    }
    // pairwise similarity, then Lance-Williams average-linkage updates
    let mut sim = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let v = plda_llr(p, &seg_ivectors[i], &seg_ivectors[j])?;
            sim[(i, j)] = v;
            sim[(j, i)] = v;
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..m).map(|i| Some(vec![i])).collect();
    let mut active: Vec<usize> = (0..m).collect();
    while active.len() > s {
        let mut best: Option<(usize, usize, f64)> = None;
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let v = sim[(i, j)];
                let better = match best {
                    None => true,
                    Some((_, _, bv)) => v > bv,
                };
                if better {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, _) = best.expect("at least two active clusters");
        let ni = members[i].as_ref().unwrap().len() as f64;
        let nj = members[j].as_ref().unwrap().len() as f64;
        for &k in &active {
            if k != i && k != j {
                let v = (ni * sim[(i, k)] + nj * sim[(j, k)]) / (ni + nj);
                sim[(i, k)] = v;
                sim[(k, i)] = v;
            }
        }
        let moved = members[j].take().unwrap();
        members[i].as_mut().unwrap().extend(moved);
        active.retain(|&k| k != j);
    }
    // stable labels: clusters numbered by their smallest member index
    let mut clusters: Vec<&Vec<usize>> = active.iter().map(|&i| members[i].as_ref().unwrap()).collect();
    clusters.sort_by_key(|c| *c.iter().min().unwrap());
    let mut labels = vec![0usize; m];
    for (idx, c) in clusters.iter().enumerate() {
        for &seg in c.iter() {
            labels[seg] = idx;
        }
    }
    Ok(labels)
}

/// Hard cluster prior: the own cluster gets `q`, every other speaker
/// (1 - q)/(S - 1).
pub fn hard_prior(labels: &[usize], s: usize, q: f64) -> Result<PosteriorMatrix> {
    if s < 1 {
        return Err(Error::Parameter("speaker count must be >= 1".into()));
    }
    if labels.iter().any(|&l| l >= s) {
        return Err(Error::Parameter("cluster label out of range".into()));
    }
    if s == 1 {
        return PosteriorMatrix::from_rows(Array2::ones((labels.len(), 1)));
    }
    if !(q > 1.0 / s as f64 && q <= 1.0) {
        return Err(Error::Parameter(format!("prior q must lie in (1/{s}, 1]")));
    }
    let off = (1.0 - q) / (s as f64 - 1.0);
    let mut m = Array2::from_elem((labels.len(), s), off);
    for (row, &l) in labels.iter().enumerate() {
        m[(row, l)] = q;
    }
    PosteriorMatrix::from_rows(m)
}

/// Distance-to-centroid confidence, ranging from 1 at the centroid down to
/// 0.5 at the cluster's farthest member.
pub(crate) fn soft_prior_value(ratio: f64, k: f64) -> f64 {
    let e1 = (-1.0f64).exp();
    0.5 * (((-(ratio.powf(k))).exp() - e1) / (1.0 - e1) + 1.0)
}

/// Soft cluster prior: own-cluster confidence decays with the Euclidean
/// distance to the cluster centroid, normalized by the cluster's maximum
/// member distance; the rest of the row is shared evenly.
pub fn soft_prior(labels: &[usize], seg_ivectors: &[IVector], k: f64) -> Result<PosteriorMatrix> {
    if labels.len() != seg_ivectors.len() {
        return Err(Error::Parameter("labels and i-vectors disagree on length".into()));
    }
    if labels.is_empty() {
        return Err(Error::Parameter("soft prior needs at least one segment".into()));
    }
    if !(k > 0.0) {
        return Err(Error::Parameter("soft prior k must be > 0".into()));
    }
    let s = labels.iter().copied().max().unwrap() + 1;
    let r = seg_ivectors[0].len();
    let mut counts = vec![0usize; s];
    let mut centroids = vec![Array1::<f64>::zeros(r); s];
    for (&l, w) in labels.iter().zip(seg_ivectors) {
        counts[l] += 1;
        centroids[l] += &w.0;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Degeneracy(format!("cluster {empty} is empty")));
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.mapv_inplace(|v| v / n as f64);
    }
    let dist = |w: &IVector, l: usize| -> f64 {
        let d = &w.0 - &centroids[l];
        d.dot(&d).sqrt()
    };
    let mut d_max = vec![0.0f64; s];
    for (&l, w) in labels.iter().zip(seg_ivectors) {
        d_max[l] = d_max[l].max(dist(w, l));
    }
    let mut q = Array2::<f64>::zeros((labels.len(), s));
    for (row, (&l, w)) in labels.iter().zip(seg_ivectors).enumerate() {
        let own = if d_max[l] == 0.0 {
            1.0
        } else {
            soft_prior_value(dist(w, l) / d_max[l], k)
        };
        if s == 1 {
            q[(row, 0)] = 1.0;
            continue;
        }
        let off = (1.0 - own) / (s as f64 - 1.0);
        for col in 0..s {
            q[(row, col)] = if col == l { own } else { off };
        }
    }
    PosteriorMatrix::from_rows(q)
}

/// Multiplicative posterior update q' ∝ q · p, row-normalized and floored.
/// `p` is a linear-domain non-negative matrix.
pub fn update_q(q: &PosteriorMatrix, p: ArrayView2<f64>) -> Result<PosteriorMatrix> {
    if p.dim() != q.matrix().dim() {
        return Err(Error::Parameter("shape mismatch between Q and P".into()));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Numeric("P entries must be finite and >= 0".into()));
    }
    PosteriorMatrix::from_rows(q.matrix() * &p)
}

/// The soft-clustering objective Σ_m log Σ_s q_ms p_ms for linear-domain P.
pub fn objective(q: &PosteriorMatrix, p: ArrayView2<f64>) -> Result<f64> {
    if p.dim() != q.matrix().dim() {
        return Err(Error::Parameter("shape mismatch between Q and P".into()));
    }
    let mut total = 0.0;
    for (qr, pr) in q.matrix().rows().into_iter().zip(p.rows()) {
        // log-sum-exp over log(q) + log(p)
        let logs: Vec<f64> = qr
            .iter()
            .zip(pr.iter())
            .map(|(&a, &b)| if a > 0.0 && b > 0.0 { a.ln() + b.ln() } else { f64::NEG_INFINITY })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::Numeric("objective row is identically zero".into()));
        }
        total += m + logs.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    }
    Ok(total)
}

/// Trained model bundle consumed by the diarization loops.
pub struct BackendModels<'a> {
    pub gmm: &'a DiagonalGmm,
    pub tv: &'a TotalVariability,
    pub plda: Option<&'a PldaModel>,
    pub prep: Option<&'a Preprocessor>,
}

/// The latent-class soft-clustering loop for PLDA / SVM / hybrid / VB
/// back-ends. Per iteration: speaker i-vectors from the current Q, the
/// back-end score matrix, neighbor-window smoothing, kappa posteriors, HMM
/// smoothing, multiplicative Q update. Stops when the largest row L1 change
/// drops below tolerance or at max_iters.
pub fn lcm_iterate(
    f: &FeatureMatrix,
    grid: &SegmentGrid,
    models: &BackendModels,
    cfg: &DiarizationConfig,
) -> Result<DiarizationResult> {
    cfg.validate()?;
    let m_count = grid.segments();
    let s = cfg.speakers;
    if m_count == 0 {
        return Err(Error::Data("no segments to diarize".into()));
    }
    if s == 1 {
        let q = PosteriorMatrix::from_rows(Array2::ones((m_count, 1)))?;
        return Ok(DiarizationResult {
            labels: vec![0; m_count],
            q,
            iterations: 1,
            objective_trace: vec![0.0],
        });
    }
    if matches!(cfg.backend, Backend::Plda | Backend::Hybrid) && models.plda.is_none() {
        return Err(Error::Parameter("PLDA backend selected but no PLDA model given".into()));
    }

    let gammas = models.gmm.responsibilities_matrix(f)?;
    let cache = SegmentStatsCache::build(models.gmm, f, &gammas, grid);

    // segment i-vectors: data window around each segment, extracted once
    let mut seg_stats = Vec::with_capacity(m_count);
    let mut seg_iv = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let stats = cache.window(m, cfg.data_half_window);
        let w = extract_ivector(models.tv, &stats)?;
        let w = match models.prep {
            Some(prep) if cfg.backend != Backend::Vb => prep.apply(&w)?,
            _ => w,
        };
        seg_stats.push(stats);
        seg_iv.push(w);
    }

    let mut q = match cfg.init {
        InitMethod::Random => random_prior(m_count, s, cfg.seed)?,
        InitMethod::AhcHard | InitMethod::AhcSoft => {
            let plda = models.plda.ok_or_else(|| {
                Error::Parameter("AHC initialization requires a PLDA model".into())
            })?;
            let labels = ahc_cluster(&seg_iv, plda, s)?;
            if cfg.init == InitMethod::AhcHard {
                hard_prior(&labels, s, cfg.hard_prior_q)?
            } else {
                soft_prior(&labels, &seg_iv, cfg.soft_prior_k)?
            }
        }
    };

    let mut trace = Vec::new();
    let mut iterations = 0;
    for iter in 0..cfg.max_iters {
        reseed_dead_speakers(&mut q)?;

        // speaker models from the current soft assignment
        let mut spk_iv = Vec::with_capacity(s);
        for sp in 0..s {
            let q_col: Vec<f64> = q.matrix().column(sp).to_vec();
            let w = speaker_ivector_cached(models.tv, models.gmm, f, &gammas, grid, &q_col)?;
            let w = match models.prep {
                Some(prep) if cfg.backend != Backend::Vb => prep.apply(&w)?,
                _ => w,
            };
            spk_iv.push(w);
        }

        let use_svm = match cfg.backend {
            Backend::Svm => true,
            Backend::Hybrid => iter % 2 == 1,
            _ => false,
        };
        let mut scores = Array2::<f64>::zeros((m_count, s));
        let kappa;
        if cfg.backend == Backend::Vb {
            kappa = cfg.kappa_plda;
            for m in 0..m_count {
                for sp in 0..s {
                    scores[(m, sp)] =
                        eigenvoice_loglik(models.tv, models.gmm, &seg_stats[m], &spk_iv[sp])?;
                }
            }
        } else if use_svm {
            kappa = cfg.kappa_svm;
            let svms = train_speaker_svms(&spk_iv, cfg.svm_c_reg)?;
            for m in 0..m_count {
                for sp in 0..s {
                    scores[(m, sp)] = svm_score(&svms[sp], &seg_iv[m])?;
                }
            }
        } else {
            kappa = cfg.kappa_plda;
            let plda = models.plda.expect("checked above");
            for m in 0..m_count {
                for sp in 0..s {
                    scores[(m, sp)] = plda_llr(plda, &seg_iv[m], &spk_iv[sp])?;
                }
            }
        }

        let windowed = apply_score_window(scores.view(), cfg.lambda, cfg.score_half_window)?;
        let kind = match (cfg.backend, use_svm) {
            (Backend::Vb, _) => ScoreKind::EigenvoiceLoglik,
            (_, true) => ScoreKind::SvmMargin,
            _ => ScoreKind::PldaLlr,
        };
        let mut emissions = Array2::<f64>::zeros((m_count, s));
        for (m, row) in windowed.rows().into_iter().enumerate() {
            let post = posteriors_from_scores(row, kappa, kind);
            emissions.row_mut(m).assign(&post);
        }

        let pi = if iter == 0 {
            Array1::from_elem(s, 1.0 / s as f64)
        } else {
            q.column_mass()
        };
        let smoothed = hmm_smooth(emissions.view(), pi.view(), cfg.self_loop)?;

        let q_new = update_q(&q, smoothed.view())?;
        trace.push(objective(&q_new, smoothed.view())?);
        let delta = q_new.max_row_delta(&q);
        q = q_new;
        iterations = iter + 1;
        if delta < cfg.tol {
            break;
        }
    }

    Ok(DiarizationResult { labels: q.labels(), q, iterations, objective_trace: trace })
}

/// VB-style baseline: the same loop with eigenvoice scoring.
pub fn vb_iterate(
    f: &FeatureMatrix,
    grid: &SegmentGrid,
    models: &BackendModels,
    cfg: &DiarizationConfig,
) -> Result<DiarizationResult> {
    let mut vb_cfg = cfg.clone();
    vb_cfg.backend = Backend::Vb;
    lcm_iterate(f, grid, models, &vb_cfg)
}

/// A speaker whose posterior column has (numerically) no mass can never
/// recover under the multiplicative update; re-seed it from the most
/// ambiguous segments.
fn reseed_dead_speakers(q: &mut PosteriorMatrix) -> Result<()> {
    let m = q.segments();
    let s = q.speakers();
    let threshold = 1e-4;
    let mass = q.column_mass();
    let dead: Vec<usize> = (0..s).filter(|&sp| mass[sp] < threshold).collect();
    if dead.is_empty() {
        return Ok(());
    }
    let mut ambiguity: Vec<(usize, f64)> = q
        .matrix()
        .rows()
        .into_iter()
        .enumerate()
        .map(|(row, r)| (row, r.iter().cloned().fold(0.0f64, f64::max)))
        .collect();
    // lowest max-entry first = least committed segments
    ambiguity.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let per_speaker = (m / (4 * s)).max(1);
    let mut raw = q.matrix().clone();
    let mut next = 0usize;
    for &sp in &dead {
        log::warn!("speaker {sp} column collapsed (mass {:.2e}); re-seeding", mass[sp]);
        for _ in 0..per_speaker {
            if next >= ambiguity.len() {
                break;
            }
            let row = ambiguity[next].0;
            next += 1;
            let mut r = raw.row_mut(row);
            let keep = 0.3 / (1.0 - r[sp]).max(EPS_FLOOR);
            for (col, v) in r.iter_mut().enumerate() {
                *v = if col == sp { 0.7 } else { *v * keep };
            }
        }
    }
    *q = PosteriorMatrix::from_rows(raw)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn random_prior_is_seeded_and_stochastic() {
        let a = random_prior(8, 3, 42).unwrap();
        let b = random_prior(8, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = random_prior(8, 3, 43).unwrap();
        assert_ne!(a, c);
        for row in a.matrix().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&v| v >= EPS_FLOOR));
        }
    }

    #[test]
    fn random_prior_single_speaker() {
        let p = random_prior(5, 1, 0).unwrap();
        assert!(p.matrix().iter().all(|&v| v == 1.0));
    }

    fn toy_plda(r: usize) -> PldaModel {
        PldaModel::new(Array1::zeros(r), Array2::eye(r), Array2::eye(r).mapv(|v: f64| v * 0.1))
            .unwrap()
    }

    #[test]
    fn ahc_separates_identical_groups() {
        let mut pts = Vec::new();
        for _ in 0..4 {
            pts.push(IVector(array![1.0, 0.0]));
        }
        for _ in 0..3 {
            pts.push(IVector(array![-1.0, 0.5]));
        }
        let labels = ahc_cluster(&pts, &toy_plda(2), 2).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn ahc_no_merges_when_s_equals_m() {
        let pts: Vec<IVector> = (0..4).map(|i| IVector(array![i as f64, 0.0])).collect();
        let labels = ahc_cluster(&pts, &toy_plda(2), 4).unwrap();
        assert_eq!(labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ahc_too_few_segments_is_data_error() {
        let pts = vec![IVector(array![0.0, 0.0])];
        assert!(matches!(ahc_cluster(&pts, &toy_plda(2), 2), Err(Error::Data(_))));
    }

    /// Oracle: recompute every average-linkage similarity from the raw
    /// pairwise matrix at each step instead of Lance-Williams updates.
    fn bruteforce_ahc(pts: &[IVector], p: &PldaModel, s: usize) -> Vec<usize> {
        let m = pts.len();
        let mut sim = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    sim[(i, j)] = plda_llr(p, &pts[i], &pts[j]).unwrap();
                }
            }
        }
        let mut clusters: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
        while clusters.len() > s {
            let mut best = (0usize, 1usize, f64::NEG_INFINITY);
            for i in 0..clusters.len() {
                for j in (i + 1)..clusters.len() {
                    let mut acc = 0.0;
                    for &a in &clusters[i] {
                        for &b in &clusters[j] {
                            acc += sim[(a, b)];
                        }
                    }
                    let v = acc / (clusters[i].len() * clusters[j].len()) as f64;
                    if v > best.2 {
                        best = (i, j, v);
                    }
                }
            }
            let moved = clusters.remove(best.1);
            clusters[best.0].extend(moved);
        }
        clusters.sort_by_key(|c| *c.iter().min().unwrap());
        let mut labels = vec![0usize; m];
        for (idx, c) in clusters.iter().enumerate() {
            for &seg in c {
                labels[seg] = idx;
            }
        }
        labels
    }

    #[test]
    fn ahc_matches_bruteforce_oracle() {
        use rand::{Rng, SeedableRng};
        let p = toy_plda(3);
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<IVector> = (0..6)
                .map(|_| IVector(Array1::from_shape_fn(3, |_| rng.gen_range(-2.0..2.0))))
                .collect();
            for s in 1..=4 {
                assert_eq!(
                    ahc_cluster(&pts, &p, s).unwrap(),
                    bruteforce_ahc(&pts, &p, s),
                    "seed {seed}, S={s}"
                );
            }
        }
    }

    #[test]
    fn hard_prior_hand_cases() {
        let p = hard_prior(&[0, 2], 3, 0.7).unwrap();
        assert_abs_diff_eq!(p.matrix()[(0, 0)], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(p.matrix()[(0, 1)], 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(p.matrix()[(0, 2)], 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(p.matrix()[(1, 2)], 0.7, epsilon = 1e-12);

        let p2 = hard_prior(&[0, 1], 2, 0.7).unwrap();
        assert_abs_diff_eq!(p2.matrix()[(0, 1)], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn hard_prior_at_uniform_bound() {
        // q -> 1/S is excluded; slightly above gives near-uniform rows
        assert!(hard_prior(&[0], 2, 0.5).is_err());
        let p = hard_prior(&[0], 2, 0.5 + 1e-9).unwrap();
        assert_abs_diff_eq!(p.matrix()[(0, 0)], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn hard_prior_rejects_bad_q() {
        assert!(hard_prior(&[0, 1], 2, 0.4).is_err());
        assert!(hard_prior(&[0, 1], 2, 1.1).is_err());
    }

    #[test]
    fn soft_prior_value_hand_cases() {
        assert_abs_diff_eq!(soft_prior_value(0.0, 10.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(soft_prior_value(1.0, 10.0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(soft_prior_value(0.5, 10.0), 0.99923, epsilon = 1e-5);
        // confidence stays within [0.5, 1] across the whole range
        for i in 0..=100 {
            let v = soft_prior_value(i as f64 / 100.0, 10.0);
            assert!((0.5..=1.0).contains(&v));
        }
    }

    #[test]
    fn soft_prior_rows() {
        let pts = vec![
            IVector(array![0.0, 0.0]),
            IVector(array![2.0, 0.0]),
            IVector(array![10.0, 10.0]),
        ];
        let p = soft_prior(&[0, 0, 1], &pts, 10.0).unwrap();
        // centroid of cluster 0 is (1,0); both members sit at d = d_max -> 0.5
        assert_abs_diff_eq!(p.matrix()[(0, 0)], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(p.matrix()[(1, 0)], 0.5, epsilon = 1e-10);
        // singleton cluster: d_max = 0 -> full confidence (up to the floor)
        assert!(p.matrix()[(2, 1)] > 1.0 - 1e-5);
        for row in p.matrix().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn soft_prior_empty_cluster_is_degenerate() {
        let pts = vec![IVector(array![0.0]), IVector(array![1.0])];
        // labels say 3 clusters exist but cluster 1 has no members
        assert!(matches!(
            soft_prior(&[0, 2], &pts, 10.0),
            Err(Error::Degeneracy(_))
        ));
    }

    #[test]
    fn update_q_hand_cases() {
        let q = PosteriorMatrix::from_rows(array![[0.5, 0.5]]).unwrap();
        let p = array![[0.2, 0.1]];
        let out = update_q(&q, p.view()).unwrap();
        assert_abs_diff_eq!(out.matrix()[(0, 0)], 2.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.matrix()[(0, 1)], 1.0 / 3.0, epsilon = 1e-9);

        let uq = PosteriorMatrix::from_rows(array![[0.25, 0.25, 0.25, 0.25]]).unwrap();
        let up = array![[3.0, 3.0, 3.0, 3.0]];
        let uout = update_q(&uq, up.view()).unwrap();
        for &v in uout.matrix().iter() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn update_q_one_hot_is_absorbing_up_to_floor() {
        let q = PosteriorMatrix::from_rows(array![[1.0, 0.0]]).unwrap();
        let p = array![[0.1, 100.0]];
        let out = update_q(&q, p.view()).unwrap();
        assert!(out.matrix()[(0, 0)] > 0.9);
        assert!(out.matrix()[(0, 1)] >= EPS_FLOOR);
    }

    #[test]
    fn update_q_zero_row_falls_back_to_uniform() {
        let q = PosteriorMatrix::from_rows(array![[0.5, 0.5]]).unwrap();
        let p = array![[0.0, 0.0]];
        let out = update_q(&q, p.view()).unwrap();
        assert_abs_diff_eq!(out.matrix()[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn objective_hand_cases() {
        let q = PosteriorMatrix::from_rows(array![[1.0, 0.0]]).unwrap();
        let p = array![[0.3, 9.0]];
        // floored q keeps a sliver on the second entry; tolerance reflects it
        let got = objective(&q, p.view()).unwrap();
        assert_abs_diff_eq!(got, 0.3f64.ln(), epsilon = 1e-4);

        let uq = PosteriorMatrix::from_rows(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let up = array![[0.2, 0.4], [1.0, 3.0]];
        let got2 = objective(&uq, up.view()).unwrap();
        assert_abs_diff_eq!(got2, 0.3f64.ln() + 2.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn update_q_never_decreases_objective() {
        use rand::{Rng, SeedableRng};
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..6);
            let s = rng.gen_range(2..5);
            let q =
                PosteriorMatrix::from_rows(Array2::from_shape_fn((m, s), |_| rng.gen::<f64>() + 1e-6))
                    .unwrap();
            let p = Array2::from_shape_fn((m, s), |_| rng.gen::<f64>() * 5.0 + 1e-9);
            let before = objective(&q, p.view()).unwrap();
            let after = objective(&update_q(&q, p.view()).unwrap(), p.view()).unwrap();
            assert!(
                after >= before - 1e-12 * before.abs(),
                "seed {seed}: {before} -> {after}"
            );
        }
    }

    #[test]
    fn posterior_rows_always_stochastic() {
        let p = PosteriorMatrix::from_rows(array![[10.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        for row in p.matrix().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&v| v >= EPS_FLOOR && v <= 1.0));
        }
    }

    #[test]
    fn reseed_revives_collapsed_column() {
        let mut raw = Array2::from_elem((10, 2), 0.0);
        for mut row in raw.rows_mut() {
            row[0] = 1.0;
        }
        let mut q = PosteriorMatrix::from_rows(raw).unwrap();
        assert!(q.column_mass()[1] < 1e-4);
        reseed_dead_speakers(&mut q).unwrap();
        assert!(q.column_mass()[1] > 1e-3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DiarizationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.hard_prior_q = 0.4;
        assert!(cfg.validate().is_err());
        cfg = DiarizationConfig { tol: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = DiarizationConfig { speakers: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
