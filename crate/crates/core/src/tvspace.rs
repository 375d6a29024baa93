//! Total-variability space: Baum-Welch statistics, EM training of T,
//! closed-form i-vector extraction, q-weighted speaker i-vectors, windowed
//! segment i-vectors, and the eigenvoice log-likelihood used by the VB
//! baseline.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{FeatureMatrix, SegmentGrid};
use crate::error::{Error, Result};
use crate::gmm::{frame_f64, DiagonalGmm};
use crate::linalg::Cholesky;

/// Zeroth/centered-first order statistics against the UBM, plus the
/// sigma-weighted squared norm of the centered frames (needed by the
/// eigenvoice log-likelihood; constant in w).
#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    /// N_c, per component.
    pub n: Array1<f64>,
    /// F_c, component x dim.
    pub f: Array2<f64>,
    /// sum_m weight_m gamma_mc (x_m - mu_c)^t Sigma_c^-1 (x_m - mu_c).
    pub quad: f64,
}

impl BaumWelchStats {
    pub fn zeros(components: usize, dim: usize) -> Self {
        BaumWelchStats { n: Array1::zeros(components), f: Array2::zeros((components, dim)), quad: 0.0 }
    }

    pub fn components(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn add_scaled(&mut self, other: &BaumWelchStats, scale: f64) {
        self.n.scaled_add(scale, &other.n);
        self.f.scaled_add(scale, &other.f);
        self.quad += scale * other.quad;
    }
}

/// Weighted Baum-Welch statistics: N_c = sum_m w_m gamma_mc,
/// F_c = sum_m w_m gamma_mc (x_m - mu_c).
pub fn accumulate_stats(
    g: &DiagonalGmm,
    f: &FeatureMatrix,
    frame_weights: &[f64],
) -> Result<BaumWelchStats> {
    if frame_weights.len() != f.frames() {
        return Err(Error::Parameter(format!(
            "{} frame weights for {} frames",
            frame_weights.len(),
            f.frames()
        )));
    }
    let gammas = g.responsibilities_matrix(f)?;
    Ok(accumulate_with_gammas(g, f, &gammas, frame_weights))
}

/// Same accumulation with responsibilities already computed (frames x C).
pub fn accumulate_with_gammas(
    g: &DiagonalGmm,
    f: &FeatureMatrix,
    gammas: &Array2<f64>,
    frame_weights: &[f64],
) -> BaumWelchStats {
    let c = g.components();
    let dim = g.dim();
    let mut stats = BaumWelchStats::zeros(c, dim);
    let mut buf = Array1::zeros(dim);
    for m in 0..f.frames() {
        let w = frame_weights[m];
        if w == 0.0 {
            continue;
        }
        frame_f64(f, m, &mut buf);
        for k in 0..c {
            let wg = w * gammas[(m, k)];
            if wg == 0.0 {
                continue;
            }
            stats.n[k] += wg;
            let mut quad = 0.0;
            for d in 0..dim {
                let centered = buf[d] - g.means()[(k, d)];
                stats.f[(k, d)] += wg * centered;
                quad += centered * centered / g.vars()[(k, d)];
            }
            stats.quad += wg * quad;
        }
    }
    stats
}

/// Point-estimate i-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IVector(pub Array1<f64>);

impl IVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Total variability matrix T ((C*dim) x R) paired with the UBM covariance.
#[derive(Debug, Clone)]
pub struct TotalVariability {
    t: Array2<f64>,
    /// Diagonal UBM covariance, component x dim.
    sigma: Array2<f64>,
    components: usize,
    dim: usize,
    /// Precomputed T_c^t Sigma_c^-1 T_c, one R x R gram per component.
    grams: Vec<Array2<f64>>,
}

impl TotalVariability {
    pub fn new(t: Array2<f64>, sigma: Array2<f64>) -> Result<Self> {
        let components = sigma.nrows();
        let dim = sigma.ncols();
        if t.nrows() != components * dim {
            return Err(Error::Parameter(format!(
                "T has {} rows, expected C*dim = {}",
                t.nrows(),
                components * dim
            )));
        }
        if t.ncols() == 0 {
            return Err(Error::Parameter("rank must be >= 1".into()));
        }
        if sigma.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Parameter("sigma entries must be positive".into()));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("T contains non-finite entries".into()));
        }
        let mut grams = Vec::with_capacity(components);
        for c in 0..components {
            let block = t.slice(s![c * dim..(c + 1) * dim, ..]);
            let r = t.ncols();
            let mut gram = Array2::<f64>::zeros((r, r));
            for d in 0..dim {
                let inv = 1.0 / sigma[(c, d)];
                let row = block.row(d);
                for a in 0..r {
                    let ra = row[a] * inv;
                    for b in a..r {
                        gram[(a, b)] += ra * row[b];
                    }
                }
            }
            for a in 0..r {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
            grams.push(gram);
        }
        Ok(TotalVariability { t, sigma, components, dim, grams })
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.t
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    pub fn block(&self, c: usize) -> ArrayView2<'_, f64> {
        self.t.slice(s![c * self.dim..(c + 1) * self.dim, ..])
    }

    fn check_stats(&self, stats: &BaumWelchStats) -> Result<()> {
        if stats.components() != self.components || stats.dim() != self.dim {
            return Err(Error::Parameter(format!(
                "stats shape ({}, {}) does not match TV ({}, {})",
                stats.components(),
                stats.dim(),
                self.components,
                self.dim
            )));
        }
        Ok(())
    }

    /// Posterior precision L = I_R + T^t N Sigma^-1 T for the given stats.
    fn precision(&self, stats: &BaumWelchStats) -> Array2<f64> {
        let r = self.rank();
        let mut l = Array2::<f64>::eye(r);
        for c in 0..self.components {
            let n = stats.n[c];
            if n != 0.0 {
                l.scaled_add(n, &self.grams[c]);
            }
        }
        l
    }

    /// Right-hand side T^t Sigma^-1 F for the given stats.
    fn projected_stats(&self, stats: &BaumWelchStats) -> Array1<f64> {
        let r = self.rank();
        let mut rhs = Array1::<f64>::zeros(r);
        for c in 0..self.components {
            let block = self.block(c);
            for d in 0..self.dim {
                let fd = stats.f[(c, d)] / self.sigma[(c, d)];
                if fd != 0.0 {
                    for a in 0..r {
                        rhs[a] += block[(d, a)] * fd;
                    }
                }
            }
        }
        rhs
    }
}

/// Closed-form MAP i-vector: w = (I + T^t N Sigma^-1 T)^-1 T^t Sigma^-1 F.
pub fn extract_ivector(tv: &TotalVariability, stats: &BaumWelchStats) -> Result<IVector> {
    tv.check_stats(stats)?;
    let l = tv.precision(stats);
    let rhs = tv.projected_stats(stats);
    let chol = Cholesky::new(l.view())?;
    Ok(IVector(chol.solve(rhs.view())))
}

/// EM training result for the total-variability matrix.
#[derive(Debug, Clone)]
pub struct TvTraining {
    pub model: TotalVariability,
    /// Per-iteration marginal objective (T-dependent part), non-decreasing.
    pub objective_trace: Vec<f64>,
}

/// Train T by EM over per-utterance stats. `sigma` is the UBM covariance.
pub fn train_tv(
    stats: &[BaumWelchStats],
    sigma: &Array2<f64>,
    rank: usize,
    iters: usize,
    seed: u64,
) -> Result<TvTraining> {
    if stats.is_empty() {
        return Err(Error::Data("no utterance statistics for TV training".into()));
    }
    if rank == 0 {
        return Err(Error::Parameter("rank must be >= 1".into()));
    }
    if iters == 0 {
        return Err(Error::Parameter("iters must be >= 1".into()));
    }
    let components = sigma.nrows();
    let dim = sigma.ncols();
    for st in stats {
        if st.components() != components || st.dim() != dim {
            return Err(Error::Parameter("stats shape does not match sigma".into()));
        }
    }

    // Seeded random init, scaled to the data spread.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = sigma.mean().unwrap_or(1.0).sqrt();
    let t0 = Array2::from_shape_fn((components * dim, rank), |_| {
        (rng.gen::<f64>() - 0.5) * scale
    });
    let mut tv = TotalVariability::new(t0, sigma.clone())?;
    let mut trace = Vec::with_capacity(iters);

    for _ in 0..iters {
        // E-step: posterior moments per utterance, plus the marginal objective.
        let mut objective = 0.0;
        let mut rhs_acc = vec![Array2::<f64>::zeros((dim, rank)); components];
        let mut lhs_acc = vec![Array2::<f64>::zeros((rank, rank)); components];
        for st in stats {
            let l = tv.precision(st);
            let a = tv.projected_stats(st);
            let chol = Cholesky::new(l.view())?;
            let mean = chol.solve(a.view());
            objective += 0.5 * a.dot(&mean) - 0.5 * chol.log_det();
            let cov = chol.inverse();
            // E[w w^t] = L^-1 + E[w] E[w]^t
            let mut second = cov;
            for i in 0..rank {
                for j in 0..rank {
                    second[(i, j)] += mean[i] * mean[j];
                }
            }
            for c in 0..components {
                if st.n[c] != 0.0 {
                    lhs_acc[c].scaled_add(st.n[c], &second);
                }
                for d in 0..dim {
                    let fd = st.f[(c, d)];
                    if fd != 0.0 {
                        for a in 0..rank {
                            rhs_acc[c][(d, a)] += fd * mean[a];
                        }
                    }
                }
            }
        }
        trace.push(objective);

        // M-step: per-component least squares T_c = RHS_c * LHS_c^-1.
        let mut t_new = Array2::<f64>::zeros((components * dim, rank));
        for c in 0..components {
            // guard: components never touched by any utterance keep their rows
            let total_n: f64 = lhs_acc[c].diag().sum();
            if total_n <= 0.0 {
                t_new
                    .slice_mut(s![c * dim..(c + 1) * dim, ..])
                    .assign(&tv.block(c));
                continue;
            }
            let mut lhs = lhs_acc[c].clone();
            // tiny ridge keeps the solve well-posed when rank > utterances
            let ridge = 1e-10 * (1.0 + lhs.diag().sum() / rank as f64);
            for i in 0..rank {
                lhs[(i, i)] += ridge;
            }
            let chol = Cholesky::new(lhs.view())?;
            let inv = chol.inverse();
            let block = rhs_acc[c].dot(&inv);
            t_new.slice_mut(s![c * dim..(c + 1) * dim, ..]).assign(&block);
        }
        tv = TotalVariability::new(t_new, sigma.clone())?;
    }

    Ok(TvTraining { model: tv, objective_trace: trace })
}

/// Speaker i-vector from the q-weighted whole recording: each frame inherits
/// the q of its segment.
pub fn speaker_ivector(
    tv: &TotalVariability,
    g: &DiagonalGmm,
    f: &FeatureMatrix,
    grid: &SegmentGrid,
    q_col: &[f64],
) -> Result<IVector> {
    let gammas = g.responsibilities_matrix(f)?;
    speaker_ivector_cached(tv, g, f, &gammas, grid, q_col)
}

pub fn speaker_ivector_cached(
    tv: &TotalVariability,
    g: &DiagonalGmm,
    f: &FeatureMatrix,
    gammas: &Array2<f64>,
    grid: &SegmentGrid,
    q_col: &[f64],
) -> Result<IVector> {
    if grid.speech_frames() != f.frames() {
        return Err(Error::Parameter("grid does not match feature frame count".into()));
    }
    if q_col.len() != grid.segments() {
        return Err(Error::Parameter(format!(
            "q column has {} entries for {} segments",
            q_col.len(),
            grid.segments()
        )));
    }
    if q_col.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Err(Error::Parameter("q entries must lie in [0, 1]".into()));
    }
    let weights: Vec<f64> = (0..f.frames()).map(|i| q_col[grid.segment_of(i)]).collect();
    let stats = accumulate_with_gammas(g, f, gammas, &weights);
    extract_ivector(tv, &stats)
}

/// i-vector for segment m extracted from the data-level window
/// [m - half, m + half], truncated at the edges.
pub fn segment_ivector(
    tv: &TotalVariability,
    g: &DiagonalGmm,
    f: &FeatureMatrix,
    grid: &SegmentGrid,
    m: usize,
    half_window: usize,
) -> Result<IVector> {
    let stats = segment_window_stats(g, f, grid, m, half_window)?;
    extract_ivector(tv, &stats)
}

/// Baum-Welch stats of the frames in the window around segment m.
pub fn segment_window_stats(
    g: &DiagonalGmm,
    f: &FeatureMatrix,
    grid: &SegmentGrid,
    m: usize,
    half_window: usize,
) -> Result<BaumWelchStats> {
    if m >= grid.segments() {
        return Err(Error::Parameter(format!(
            "segment {m} out of range (M = {})",
            grid.segments()
        )));
    }
    let lo = m.saturating_sub(half_window);
    let hi = (m + half_window).min(grid.segments() - 1);
    let mut weights = vec![0.0; f.frames()];
    for seg in lo..=hi {
        for fr in grid.frames_of(seg) {
            weights[fr] = 1.0;
        }
    }
    accumulate_stats(g, f, &weights)
}

/// Per-segment stats with O(1) windowed sums via prefix accumulation.
/// Built once per recording; shared by the diarization loops.
pub struct SegmentStatsCache {
    prefix: Vec<BaumWelchStats>,
    segments: usize,
}

impl SegmentStatsCache {
    pub fn build(
        g: &DiagonalGmm,
        f: &FeatureMatrix,
        gammas: &Array2<f64>,
        grid: &SegmentGrid,
    ) -> Self {
        let m_count = grid.segments();
        let mut prefix = Vec::with_capacity(m_count + 1);
        prefix.push(BaumWelchStats::zeros(g.components(), g.dim()));
        let mut weights = vec![0.0; f.frames()];
        for m in 0..m_count {
            for w in weights.iter_mut() {
                *w = 0.0;
            }
            for fr in grid.frames_of(m) {
                weights[fr] = 1.0;
            }
            let seg = accumulate_with_gammas(g, f, gammas, &weights);
            let mut acc = prefix[m].clone();
            acc.add_scaled(&seg, 1.0);
            prefix.push(acc);
        }
        SegmentStatsCache { prefix, segments: m_count }
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    /// Stats of one segment.
    pub fn segment(&self, m: usize) -> BaumWelchStats {
        self.window(m, 0)
    }

    /// Stats of the truncated window [m - half, m + half].
    pub fn window(&self, m: usize, half: usize) -> BaumWelchStats {
        let lo = m.saturating_sub(half);
        let hi = (m + half).min(self.segments - 1);
        let mut out = self.prefix[hi + 1].clone();
        out.add_scaled(&self.prefix[lo], -1.0);
        out
    }
}

/// Eigenvoice log-likelihood of segment stats under a speaker i-vector:
/// the gamma-weighted GMM bound with each mean shifted by T_c w.
pub fn eigenvoice_loglik(
    tv: &TotalVariability,
    g: &DiagonalGmm,
    seg_stats: &BaumWelchStats,
    w: &IVector,
) -> Result<f64> {
    tv.check_stats(seg_stats)?;
    if w.len() != tv.rank() {
        return Err(Error::Parameter(format!(
            "i-vector rank {} does not match TV rank {}",
            w.len(),
            tv.rank()
        )));
    }
    if g.components() != tv.components() || g.dim() != tv.dim() {
        return Err(Error::Parameter("UBM shape does not match TV".into()));
    }
    let mut out = -0.5 * seg_stats.quad;
    for c in 0..tv.components() {
        out += seg_stats.n[c] * g.log_const(c);
    }
    // linear term w^t T^t Sigma^-1 F and quadratic -1/2 w^t (sum N_c G_c) w
    let rhs = tv.projected_stats(seg_stats);
    out += w.0.dot(&rhs);
    let mut quad = 0.0;
    for c in 0..tv.components() {
        let n = seg_stats.n[c];
        if n != 0.0 {
            let gw = tv.grams[c].dot(&w.0);
            quad += n * w.0.dot(&gw);
        }
    }
    Ok(out - 0.5 * quad)
}
