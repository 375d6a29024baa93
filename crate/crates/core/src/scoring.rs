//! Similarity back-ends: i-vector preprocessing (centering, whitening,
//! length normalization), simplified-PLDA training with two-covariance
//! likelihood-ratio scoring, tiny one-vs-rest linear SVMs, and the
//! kappa-scaled posterior normalization used by the LCM loop.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg::{eigh, Cholesky};
use crate::tvspace::IVector;

/// Centering + whitening + length normalization learned from training
/// i-vectors, reusable on test vectors.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    mean: Array1<f64>,
    whiten: Array2<f64>,
}

impl Preprocessor {
    pub fn from_parts(mean: Array1<f64>, whiten: Array2<f64>) -> Result<Self> {
        if whiten.nrows() != mean.len() || whiten.ncols() != mean.len() {
            return Err(Error::Parameter("whitening shape does not match mean".into()));
        }
        Ok(Preprocessor { mean, whiten })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn whiten(&self) -> &Array2<f64> {
        &self.whiten
    }

    /// Centering and whitening only (no length normalization).
    pub fn project(&self, w: &IVector) -> Result<Array1<f64>> {
        if w.len() != self.dim() {
            return Err(Error::Parameter(format!(
                "i-vector dim {} does not match transform dim {}",
                w.len(),
                self.dim()
            )));
        }
        Ok(self.whiten.dot(&(&w.0 - &self.mean)))
    }

    /// Full transform: center, whiten, normalize to unit length.
    pub fn apply(&self, w: &IVector) -> Result<IVector> {
        let p = self.project(w)?;
        let norm = p.dot(&p).sqrt();
        if norm == 0.0 {
            // zero vector stays zero; downstream scoring treats it as the origin
            return Ok(IVector(p));
        }
        Ok(IVector(p.mapv(|v| v / norm)))
    }
}

/// Fit the preprocessing transform on training i-vectors.
pub fn preprocess_ivectors(train: &[IVector]) -> Result<Preprocessor> {
    if train.len() < 2 {
        return Err(Error::Data("need at least 2 i-vectors to fit preprocessing".into()));
    }
    let r = train[0].len();
    if train.iter().any(|w| w.len() != r) {
        return Err(Error::Parameter("training i-vectors disagree on dim".into()));
    }
    let n = train.len() as f64;
    let mut mean = Array1::<f64>::zeros(r);
    for w in train {
        mean += &w.0;
    }
    mean.mapv_inplace(|v| v / n);
    let mut cov = Array2::<f64>::zeros((r, r));
    for w in train {
        let d = &w.0 - &mean;
        for i in 0..r {
            for j in i..r {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    for i in 0..r {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    cov.mapv_inplace(|v| v / n);
    let trace = cov.diag().sum();
    let (mut vals, vecs) = eigh(cov.view())?;
    let floor = 1e-6 * trace / r as f64;
    let mut shrunk = false;
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor.max(1e-300);
            shrunk = true;
        }
    }
    if shrunk {
        log::warn!("singular i-vector covariance; applied shrinkage floor {floor:.3e}");
    }
    // whiten = V diag(1/sqrt(lambda)) V^t
    let inv_sqrt = Array2::from_diag(&vals.mapv(|v| 1.0 / v.sqrt()));
    let whiten = vecs.dot(&inv_sqrt).dot(&vecs.t());
    Preprocessor::from_parts(mean, whiten)
}

/// Simplified PLDA: w = mu + Phi y + eps, eps ~ N(0, Sigma_eps).
/// Scoring uses the two-covariance form B = Phi Phi^t, W = Sigma_eps.
#[derive(Debug, Clone)]
pub struct PldaModel {
    mu: Array1<f64>,
    phi: Array2<f64>,
    sigma_eps: Array2<f64>,
    cache: ScoringCache,
}

#[derive(Debug, Clone)]
struct ScoringCache {
    /// Lambda - A where Lambda = (B+W)^-1 and A is the same-speaker
    /// diagonal precision block.
    q_mat: Array2<f64>,
    /// -C, the negated same-speaker cross precision block.
    p_mat: Array2<f64>,
    /// -0.5 (log|Sigma_same| - log|Sigma_diff|).
    log_det_term: f64,
}

impl PldaModel {
    pub fn new(mu: Array1<f64>, phi: Array2<f64>, sigma_eps: Array2<f64>) -> Result<Self> {
        let r = mu.len();
        if phi.nrows() != r {
            return Err(Error::Parameter("Phi rows must match mu".into()));
        }
        if phi.ncols() > r {
            return Err(Error::Parameter("rank of Phi may not exceed R".into()));
        }
        if sigma_eps.nrows() != r || sigma_eps.ncols() != r {
            return Err(Error::Parameter("Sigma_eps must be R x R".into()));
        }
        let b = phi.dot(&phi.t());
        let cache = ScoringCache::build(&b, &sigma_eps)?;
        Ok(PldaModel { mu, phi, sigma_eps, cache })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn phi(&self) -> &Array2<f64> {
        &self.phi
    }

    pub fn sigma_eps(&self) -> &Array2<f64> {
        &self.sigma_eps
    }

    /// Between-speaker covariance B = Phi Phi^t.
    pub fn between(&self) -> Array2<f64> {
        self.phi.dot(&self.phi.t())
    }

    /// Within-speaker covariance W = Sigma_eps.
    pub fn within(&self) -> &Array2<f64> {
        &self.sigma_eps
    }
}

impl ScoringCache {
    fn build(b: &Array2<f64>, w: &Array2<f64>) -> Result<Self> {
        let r = b.nrows();
        let mut tot = b + w; // Sigma_tot = B + W
        // guard against exactly singular totals from degenerate training
        for i in 0..r {
            tot[(i, i)] += 1e-12 * (1.0 + tot[(i, i)].abs());
        }
        let chol_tot = Cholesky::new(tot.view())?;
        let lambda = chol_tot.inverse();
        let log_det_tot = chol_tot.log_det();
        // Schur complement Sigma_tot - B Sigma_tot^-1 B
        let blamb = b.dot(&lambda);
        let schur = &tot - &blamb.dot(b);
        let chol_schur = Cholesky::new(schur.view())?;
        let a = chol_schur.inverse();
        // C = -A B Sigma_tot^-1
        let c = -a.dot(&blamb);
        let log_det_same = log_det_tot + chol_schur.log_det();
        let log_det_diff = 2.0 * log_det_tot;
        Ok(ScoringCache {
            q_mat: &lambda - &a,
            p_mat: c.mapv(|v| -v),
            log_det_term: -0.5 * (log_det_same - log_det_diff),
        })
    }
}

/// Two-covariance PLDA log-likelihood ratio (same speaker vs different).
pub fn plda_llr(p: &PldaModel, w1: &IVector, w2: &IVector) -> Result<f64> {
    if w1.len() != p.dim() || w2.len() != p.dim() {
        return Err(Error::Parameter("i-vector dim does not match PLDA".into()));
    }
    let x1 = &w1.0 - &p.mu;
    let x2 = &w2.0 - &p.mu;
    let q1 = x1.dot(&p.cache.q_mat.dot(&x1));
    let q2 = x2.dot(&p.cache.q_mat.dot(&x2));
    let cross = x1.dot(&p.cache.p_mat.dot(&x2));
    Ok(0.5 * q1 + 0.5 * q2 + cross + p.cache.log_det_term)
}

/// PLDA EM training result.
#[derive(Debug, Clone)]
pub struct PldaTraining {
    pub model: PldaModel,
    pub loglik_trace: Vec<f64>,
}

/// Two-covariance EM on labeled i-vectors. `labels[i]` is the speaker of
/// `ivectors[i]`.
pub fn train_plda(
    ivectors: &[IVector],
    labels: &[usize],
    rank_phi: usize,
    iters: usize,
) -> Result<PldaTraining> {
    if ivectors.len() != labels.len() {
        return Err(Error::Parameter("labels length does not match i-vectors".into()));
    }
    if ivectors.is_empty() {
        return Err(Error::Data("no training i-vectors".into()));
    }
    let r = ivectors[0].len();
    if ivectors.iter().any(|w| w.len() != r) {
        return Err(Error::Parameter("training i-vectors disagree on dim".into()));
    }
    if rank_phi == 0 || rank_phi > r {
        return Err(Error::Parameter(format!("rank_phi must be in 1..={r}")));
    }
    let n_speakers = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_speakers];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Degeneracy("PLDA training needs at least 2 speakers".into()));
    }

    let n = ivectors.len() as f64;
    let mut mu = Array1::<f64>::zeros(r);
    for w in ivectors {
        mu += &w.0;
    }
    mu.mapv_inplace(|v| v / n);

    // per-speaker centered sums
    let mut spk_sums = vec![Array1::<f64>::zeros(r); n_speakers];
    let mut total_scatter = Array2::<f64>::zeros((r, r));
    for (w, &l) in ivectors.iter().zip(labels) {
        let x = &w.0 - &mu;
        spk_sums[l] += &x;
        for i in 0..r {
            for j in 0..r {
                total_scatter[(i, j)] += x[i] * x[j];
            }
        }
    }

    // moment-based init: Phi from the between-speaker scatter of session
    // means, Sigma from the within-speaker residual scatter
    let mut between = Array2::<f64>::zeros((r, r));
    for s in 0..n_speakers {
        if counts[s] == 0 {
            continue;
        }
        let ni = counts[s] as f64;
        for i in 0..r {
            for j in 0..r {
                between[(i, j)] += spk_sums[s][i] * spk_sums[s][j] / ni;
            }
        }
    }
    between.mapv_inplace(|v| v / n);
    let within = &total_scatter.mapv(|v| v / n) - &between;
    let (vals, vecs) = eigh(between.view())?;
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let mut phi = Array2::<f64>::zeros((r, rank_phi));
    for (k, &idx) in order.iter().take(rank_phi).enumerate() {
        let scale = vals[idx].max(1e-8).sqrt();
        for i in 0..r {
            phi[(i, k)] = vecs[(i, idx)] * scale;
        }
    }
    let mut sigma = (&within + &within.t()).mapv(|v| v * 0.5);
    for i in 0..r {
        sigma[(i, i)] += 1e-6 * (1.0 + sigma[(i, i)].abs());
    }

    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        trace.push(plda_marginal_loglik(ivectors, labels, &mu, &phi, &sigma)?);

        // E-step
        let chol_sigma = Cholesky::new(sigma.view())?;
        let sigma_inv = chol_sigma.inverse();
        let proj = phi.t().dot(&sigma_inv); // q x r
        let ptp = proj.dot(&phi); // q x q
        let q = rank_phi;
        let mut rhs = Array2::<f64>::zeros((r, q)); // sum_i sum_i_centered E[y]_i^t
        let mut lhs = Array2::<f64>::zeros((q, q)); // sum_i n_i E[y y^t]_i
        let mut ey_per_spk = vec![Array1::<f64>::zeros(q); n_speakers];
        for s in 0..n_speakers {
            if counts[s] == 0 {
                continue;
            }
            let ni = counts[s] as f64;
            let mut l = Array2::<f64>::eye(q);
            l.scaled_add(ni, &ptp);
            let chol_l = Cholesky::new(l.view())?;
            let ey = chol_l.solve(proj.dot(&spk_sums[s]).view());
            let cov_y = chol_l.inverse();
            let mut second = cov_y;
            for i in 0..q {
                for j in 0..q {
                    second[(i, j)] += ey[i] * ey[j];
                }
            }
            lhs.scaled_add(ni, &second);
            for i in 0..r {
                for j in 0..q {
                    rhs[(i, j)] += spk_sums[s][i] * ey[j];
                }
            }
            ey_per_spk[s] = ey;
        }

        // M-step
        let chol_lhs = Cholesky::new(lhs.view())?;
        let lhs_inv = chol_lhs.inverse();
        let phi_new = rhs.dot(&lhs_inv);
        let mut sigma_new = total_scatter.clone();
        // subtract Phi_new * sum_i E[y_i] sum_i^t
        let mut ysum = Array2::<f64>::zeros((q, r));
        for s in 0..n_speakers {
            if counts[s] == 0 {
                continue;
            }
            for i in 0..q {
                for j in 0..r {
                    ysum[(i, j)] += ey_per_spk[s][i] * spk_sums[s][j];
                }
            }
        }
        let correction = phi_new.dot(&ysum);
        sigma_new -= &correction;
        sigma_new.mapv_inplace(|v| v / n);
        // symmetrize and floor
        let sym = (&sigma_new + &sigma_new.t()).mapv(|v| v * 0.5);
        sigma = sym;
        for i in 0..r {
            sigma[(i, i)] += 1e-9 * (1.0 + sigma[(i, i)].abs());
        }
        phi = phi_new;
    }

    let model = PldaModel::new(mu, phi, sigma)?;
    Ok(PldaTraining { model, loglik_trace: trace })
}

/// Exact marginal log-likelihood of labeled i-vectors under the
/// two-covariance model, grouped by speaker.
fn plda_marginal_loglik(
    ivectors: &[IVector],
    labels: &[usize],
    mu: &Array1<f64>,
    phi: &Array2<f64>,
    sigma: &Array2<f64>,
) -> Result<f64> {
    let r = mu.len();
    let b = phi.dot(&phi.t());
    let chol_w = Cholesky::new(sigma.view())?;
    let w_inv = chol_w.inverse();
    let log_det_w = chol_w.log_det();
    let n_speakers = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_spk: Vec<Vec<usize>> = vec![Vec::new(); n_speakers];
    for (i, &l) in labels.iter().enumerate() {
        per_spk[l].push(i);
    }
    let two_pi_term = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for idxs in per_spk.iter().filter(|v| !v.is_empty()) {
        let ni = idxs.len() as f64;
        // Cov = I (x) W + J (x) B; log|Cov| = (n-1) log|W| + log|W + nB|
        let mut wnb = sigma.clone();
        wnb.scaled_add(ni, &b);
        let chol_wnb = Cholesky::new(wnb.view())?;
        let log_det = (ni - 1.0) * log_det_w + chol_wnb.log_det();
        // quad = sum_j x^t W^-1 x - (sum x)^t (W+nB)^-1 B W^-1 (sum x)
        let mut xsum = Array1::<f64>::zeros(r);
        let mut quad = 0.0;
        for &j in idxs {
            let x = &ivectors[j].0 - mu;
            quad += x.dot(&w_inv.dot(&x));
            xsum += &x;
        }
        let t1 = w_inv.dot(&xsum);
        let t3 = chol_wnb.solve(xsum.view());
        quad -= t1.dot(&b.dot(&t3));
        total += -0.5 * (ni * r as f64 * two_pi_term + log_det + quad);
    }
    Ok(total)
}

/// One-vs-rest linear SVM for one speaker.
#[derive(Debug, Clone)]
pub struct LinearSvm {
    pub eta: Array1<f64>,
    pub bias: f64,
}

/// Affine SVM score eta^t w + b.
pub fn svm_score(svm: &LinearSvm, w: &IVector) -> Result<f64> {
    if w.len() != svm.eta.len() {
        return Err(Error::Parameter("i-vector dim does not match SVM".into()));
    }
    Ok(svm.eta.dot(&w.0) + svm.bias)
}

/// Train one-vs-rest linear SVMs over the S speaker i-vectors. Deterministic
/// dual coordinate descent with a fixed sweep order; bias is handled by
/// feature augmentation.
pub fn train_speaker_svms(speaker_ivectors: &[IVector], c_reg: f64) -> Result<Vec<LinearSvm>> {
    let s = speaker_ivectors.len();
    if s < 2 {
        return Err(Error::Degeneracy("SVM training needs at least 2 speakers".into()));
    }
    if !(c_reg > 0.0) {
        return Err(Error::Parameter("C_reg must be positive".into()));
    }
    let r = speaker_ivectors[0].len();
    if speaker_ivectors.iter().any(|w| w.len() != r) {
        return Err(Error::Parameter("speaker i-vectors disagree on dim".into()));
    }
    // augmented points (w, 1)
    let aug: Vec<Array1<f64>> = speaker_ivectors
        .iter()
        .map(|w| {
            let mut v = Array1::zeros(r + 1);
            v.slice_mut(ndarray::s![..r]).assign(&w.0);
            v[r] = 1.0;
            v
        })
        .collect();
    let qdiag: Vec<f64> = aug.iter().map(|v| v.dot(v)).collect();

    let mut out = Vec::with_capacity(s);
    for pos in 0..s {
        for (i, v) in aug.iter().enumerate() {
            if i != pos && (v - &aug[pos]).mapv(f64::abs).sum() < 1e-12 {
                log::warn!(
                    "speaker {pos} i-vector duplicates speaker {i}; SVM margin degenerates"
                );
            }
        }
        let labels: Vec<f64> = (0..s).map(|i| if i == pos { 1.0 } else { -1.0 }).collect();
        let mut alpha = vec![0.0f64; s];
        let mut eta = Array1::<f64>::zeros(r + 1);
        for _sweep in 0..100_000 {
            let mut max_delta = 0.0f64;
            for i in 0..s {
                if qdiag[i] == 0.0 {
                    continue;
                }
                let g = labels[i] * eta.dot(&aug[i]) - 1.0;
                let cand = (alpha[i] - g / qdiag[i]).clamp(0.0, c_reg);
                let delta = cand - alpha[i];
                if delta != 0.0 {
                    eta.scaled_add(delta * labels[i], &aug[i]);
                    alpha[i] = cand;
                }
                max_delta = max_delta.max(delta.abs());
            }
            if max_delta < 1e-12 {
                break;
            }
        }
        let bias = eta[r];
        let eta_w = eta.slice(ndarray::s![..r]).to_owned();
        out.push(LinearSvm { eta: eta_w, bias });
    }
    Ok(out)
}

/// Which score domain a matrix carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Log-likelihood ratios from PLDA.
    PldaLlr,
    /// Affine SVM margins.
    SvmMargin,
    /// Eigenvoice log-likelihoods (VB baseline).
    EigenvoiceLoglik,
}

/// Segment x speaker scores in the log domain.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub values: Array2<f64>,
    pub kind: ScoreKind,
}

impl ScoreMatrix {
    pub fn new(values: Array2<f64>, kind: ScoreKind) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("score matrix contains non-finite entries".into()));
        }
        Ok(ScoreMatrix { values, kind })
    }
}

/// kappa-scaled posterior over speakers from one score row. For PLDA the
/// scores are log ratios and the result is (s^kappa) normalized; for SVM and
/// eigenvoice scores it is a softmax of kappa * score. Both reduce to a
/// max-subtracted softmax in the log domain.
pub fn posteriors_from_scores(row: ArrayView1<f64>, kappa: f64, kind: ScoreKind) -> Array1<f64> {
    let _ = kind; // identical arithmetic in the log domain for every kind
    let s = row.len();
    if s == 0 {
        return Array1::zeros(0);
    }
    if kappa == 0.0 {
        return Array1::from_elem(s, 1.0 / s as f64);
    }
    let scaled = row.mapv(|v| kappa * v);
    let m = scaled.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        log::warn!("all scores are -inf; returning uniform posteriors");
        return Array1::from_elem(s, 1.0 / s as f64);
    }
    let mut e = scaled.mapv(|v| (v - m).exp());
    let z = e.sum();
    e.mapv_inplace(|v| v / z);
    e
}
