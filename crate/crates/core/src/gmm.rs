//! Diagonal-covariance GMM (the UBM): maximum-likelihood EM training and
//! per-frame responsibilities. All density math is in the log domain.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};

const LOG_2PI: f64 = 1.8378770664093453;
/// Relative variance floor applied per dimension during EM.
const VAR_FLOOR_REL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct DiagonalGmm {
    weights: Array1<f64>,
    means: Array2<f64>,
    vars: Array2<f64>,
    log_weights: Array1<f64>,
    /// -0.5 * sum_d log(2*pi*var_cd), per component.
    log_consts: Array1<f64>,
}

impl DiagonalGmm {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, vars: Array2<f64>) -> Result<Self> {
        let c = weights.len();
        if c == 0 {
            return Err(Error::Parameter("GMM needs at least one component".into()));
        }
        if means.nrows() != c || vars.nrows() != c || means.ncols() != vars.ncols() {
            return Err(Error::Parameter("GMM weight/mean/var shapes disagree".into()));
        }
        let wsum: f64 = weights.sum();
        if (wsum - 1.0).abs() > 1e-10 {
            return Err(Error::Parameter(format!("GMM weights sum to {wsum}, not 1")));
        }
        if vars.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Parameter("GMM variances must be positive".into()));
        }
        let log_weights = weights.mapv(f64::ln);
        let log_consts = Array1::from_iter(
            vars.rows()
                .into_iter()
                .map(|row| -0.5 * row.iter().map(|v| LOG_2PI + v.ln()).sum::<f64>()),
        );
        Ok(DiagonalGmm { weights, means, vars, log_weights, log_consts })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn vars(&self) -> &Array2<f64> {
        &self.vars
    }

    pub fn log_const(&self, c: usize) -> f64 {
        self.log_consts[c]
    }

    /// log N(x | mu_c, Sigma_c) for one component.
    fn log_density(&self, c: usize, frame: ArrayView1<f64>) -> f64 {
        let mut quad = 0.0;
        for d in 0..self.dim() {
            let diff = frame[d] - self.means[(c, d)];
            quad += diff * diff / self.vars[(c, d)];
        }
        self.log_consts[c] - 0.5 * quad
    }

    /// Per-component log weighted densities: log(w_c N(x|mu_c, Sigma_c)).
    fn log_joint(&self, frame: ArrayView1<f64>) -> Result<Array1<f64>> {
        if frame.len() != self.dim() {
            return Err(Error::Parameter(format!(
                "frame dim {} does not match model dim {}",
                frame.len(),
                self.dim()
            )));
        }
        Ok(Array1::from_iter(
            (0..self.components()).map(|c| self.log_weights[c] + self.log_density(c, frame)),
        ))
    }

    /// log p(x) under the mixture.
    pub fn loglik(&self, frame: ArrayView1<f64>) -> Result<f64> {
        Ok(log_sum_exp(self.log_joint(frame)?.view()))
    }

    /// Posterior component responsibilities, summing to 1.
    pub fn responsibilities(&self, frame: ArrayView1<f64>) -> Result<Array1<f64>> {
        let lj = self.log_joint(frame)?;
        let lse = log_sum_exp(lj.view());
        Ok(lj.mapv(|v| (v - lse).exp()))
    }

    /// Responsibilities for every frame of a feature matrix (frames x C).
    pub fn responsibilities_matrix(&self, f: &FeatureMatrix) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((f.frames(), self.components()));
        let mut buf = Array1::zeros(f.dim());
        for i in 0..f.frames() {
            frame_f64(f, i, &mut buf);
            out.row_mut(i).assign(&self.responsibilities(buf.view())?);
        }
        Ok(out)
    }
}

pub fn log_sum_exp(v: ArrayView1<f64>) -> f64 {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn frame_f64(f: &FeatureMatrix, i: usize, out: &mut Array1<f64>) {
    for (o, v) in out.iter_mut().zip(f.frame(i).iter()) {
        *o = *v as f64;
    }
}

/// EM training result: the model plus the per-iteration total log-likelihood.
#[derive(Debug, Clone)]
pub struct UbmTraining {
    pub model: DiagonalGmm,
    pub loglik_trace: Vec<f64>,
}

/// Train a diagonal UBM with seeded initialization and `iters` EM passes.
pub fn train_ubm(
    features: &[&FeatureMatrix],
    components: usize,
    iters: usize,
    seed: u64,
) -> Result<UbmTraining> {
    if components == 0 {
        return Err(Error::Parameter("component count must be >= 1".into()));
    }
    if iters == 0 {
        return Err(Error::Parameter("iters must be >= 1".into()));
    }
    let dim = features
        .first()
        .map(|f| f.dim())
        .ok_or_else(|| Error::Data("no training features".into()))?;
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::Data("training features disagree on dim".into()));
    }
    let total_frames: usize = features.iter().map(|f| f.frames()).sum();
    if total_frames < components {
        return Err(Error::Data(format!(
            "{total_frames} frames is fewer than {components} components"
        )));
    }

    // Global statistics for the variance floor.
    let mut gmean = Array1::<f64>::zeros(dim);
    let mut gsq = Array1::<f64>::zeros(dim);
    for f in features {
        for i in 0..f.frames() {
            for d in 0..dim {
                let v = f.frame(i)[d] as f64;
                gmean[d] += v;
                gsq[d] += v * v;
            }
        }
    }
    let n = total_frames as f64;
    gmean.mapv_inplace(|v| v / n);
    let gvar = Array1::from_shape_fn(dim, |d| (gsq[d] / n - gmean[d] * gmean[d]).max(1e-12));
    let floor = gvar.mapv(|v| v * VAR_FLOOR_REL);

    // Seeded init: random distinct frames as means, one k-means pass, then
    // per-cluster sample statistics.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..total_frames).collect();
    idx.shuffle(&mut rng);
    let frame_at = |g: usize, out: &mut Array1<f64>| {
        let mut off = g;
        for f in features {
            if off < f.frames() {
                frame_f64(f, off, out);
                return;
            }
            off -= f.frames();
        }
        unreachable!("global frame index in range");
    };
    let mut means = Array2::<f64>::zeros((components, dim));
    let mut buf = Array1::<f64>::zeros(dim);
    for c in 0..components {
        frame_at(idx[c], &mut buf);
        means.row_mut(c).assign(&buf);
    }

    // One k-means assignment pass.
    let mut counts = vec![0f64; components];
    let mut sums = Array2::<f64>::zeros((components, dim));
    let mut sqs = Array2::<f64>::zeros((components, dim));
    for g in 0..total_frames {
        frame_at(g, &mut buf);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..components {
            let d: f64 = (0..dim).map(|d| (buf[d] - means[(c, d)]).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        counts[best] += 1.0;
        for d in 0..dim {
            sums[(best, d)] += buf[d];
            sqs[(best, d)] += buf[d] * buf[d];
        }
    }
    let mut weights = Array1::<f64>::zeros(components);
    let mut vars = Array2::<f64>::zeros((components, dim));
    for c in 0..components {
        if counts[c] > 0.0 {
            weights[c] = counts[c] / n;
            for d in 0..dim {
                let m = sums[(c, d)] / counts[c];
                means[(c, d)] = m;
                vars[(c, d)] = (sqs[(c, d)] / counts[c] - m * m).max(floor[d]);
            }
        } else {
            // empty cluster: keep the seeded mean, use global variance
            weights[c] = 1.0 / n;
            for d in 0..dim {
                vars[(c, d)] = gvar[d];
            }
        }
    }
    let wsum = weights.sum();
    weights.mapv_inplace(|w| w / wsum);

    let mut model = DiagonalGmm::new(weights, means, vars)?;
    let mut trace = Vec::with_capacity(iters);

    for _ in 0..iters {
        let c = model.components();
        let mut acc_w = Array1::<f64>::zeros(c);
        let mut acc_m = Array2::<f64>::zeros((c, dim));
        let mut acc_s = Array2::<f64>::zeros((c, dim));
        let mut total_ll = 0.0;
        for f in features {
            for i in 0..f.frames() {
                frame_f64(f, i, &mut buf);
                let lj = model.log_joint(buf.view())?;
                let lse = log_sum_exp(lj.view());
                total_ll += lse;
                for k in 0..c {
                    let g = (lj[k] - lse).exp();
                    acc_w[k] += g;
                    for d in 0..dim {
                        acc_m[(k, d)] += g * buf[d];
                        acc_s[(k, d)] += g * buf[d] * buf[d];
                    }
                }
            }
        }
        trace.push(total_ll);

        let mut weights = Array1::<f64>::zeros(c);
        let mut means = Array2::<f64>::zeros((c, dim));
        let mut vars = Array2::<f64>::zeros((c, dim));
        let heaviest = acc_w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        for k in 0..c {
            if acc_w[k] < 1e-8 {
                // dead component: re-seed near the heaviest one
                log::warn!("UBM component {k} collapsed; re-seeding from component {heaviest}");
                weights[k] = acc_w[heaviest].max(1.0) / n * 0.5;
                for d in 0..dim {
                    let jitter = gvar[d].sqrt() * 0.01 * ((k + 1) as f64);
                    means[(k, d)] = acc_m[(heaviest, d)] / acc_w[heaviest].max(1e-12) + jitter;
                    vars[(k, d)] = gvar[d];
                }
            } else {
                weights[k] = acc_w[k] / n;
                for d in 0..dim {
                    let m = acc_m[(k, d)] / acc_w[k];
                    means[(k, d)] = m;
                    vars[(k, d)] = (acc_s[(k, d)] / acc_w[k] - m * m).max(floor[d]);
                }
            }
        }
        let wsum = weights.sum();
        weights.mapv_inplace(|w| w / wsum);
        model = DiagonalGmm::new(weights, means, vars)?;
    }

    Ok(UbmTraining { model, loglik_trace: trace })
}
