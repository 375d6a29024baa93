//! Temporal structure: exponential-decay neighbor windows over segment
//! scores and HMM posterior smoothing via scaled forward-backward.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Exponential decay weight e^{-lambda |dm|} for a neighbor at offset dm.
pub fn poisson_weight(lambda: f64, dm: i64) -> f64 {
    (-lambda * dm.unsigned_abs() as f64).exp()
}

/// Smooth a log-domain segment-by-speaker score matrix with a truncated
/// exponential window: for each speaker the linear-domain scores are
/// replaced by the weighted sum over segments within `half_width` of the
/// current one. Windows are truncated at sequence boundaries. The sum is
/// computed with a per-speaker max subtraction so large log scores do not
/// overflow.
pub fn apply_score_window(
    scores: ArrayView2<f64>,
    lambda: f64,
    half_width: usize,
) -> Result<Array2<f64>> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter("window decay rate must be finite and >= 0".into()));
    }
    let (m, s) = scores.dim();
    let mut out = Array2::<f64>::zeros((m, s));
    if m == 0 || s == 0 {
        return Ok(out);
    }
    let weights: Vec<f64> = (0..=half_width as i64).map(|d| poisson_weight(lambda, d)).collect();
    for spk in 0..s {
        let col = scores.column(spk);
        let shift = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !shift.is_finite() {
            return Err(Error::Numeric("score column has no finite entries".into()));
        }
        let lin: Vec<f64> = col.iter().map(|&v| (v - shift).exp()).collect();
        for i in 0..m {
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width).min(m - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += weights[i.abs_diff(j)] * lin[j];
            }
            out[(i, spk)] = acc.ln() + shift;
        }
    }
    Ok(out)
}

/// Posterior smoothing over segments with a sticky S-state HMM. The input
/// rows are per-segment emission likelihoods (linear domain, need not be
/// normalized); `initial` is the state prior. Uses the scaled
/// forward-backward recursion and returns row-stochastic state posteriors.
pub fn hmm_smooth(
    emissions: ArrayView2<f64>,
    initial: ArrayView1<f64>,
    self_loop: f64,
) -> Result<Array2<f64>> {
    let (m, s) = emissions.dim();
    if initial.len() != s {
        return Err(Error::Parameter("initial distribution length must match states".into()));
    }
    if !(self_loop > 0.0 && self_loop <= 1.0) {
        return Err(Error::Parameter("self-loop probability must be in (0, 1]".into()));
    }
    if emissions.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Numeric("emissions must be finite and non-negative".into()));
    }
    if m == 0 {
        return Ok(Array2::zeros((0, s)));
    }
    if s == 1 {
        return Ok(Array2::ones((m, 1)));
    }
    let cross = (1.0 - self_loop) / (s as f64 - 1.0);

    // scaled forward pass
    let mut alpha = Array2::<f64>::zeros((m, s));
    let mut scale = Array1::<f64>::zeros(m);
    for j in 0..s {
        alpha[(0, j)] = initial[j] * emissions[(0, j)];
    }
    for t in 0..m {
        if t > 0 {
            // sum_i alpha[t-1,i] a_ij = cross * total + (self - cross) * alpha[t-1,j]
            let total: f64 = (0..s).map(|i| alpha[(t - 1, i)]).sum();
            for j in 0..s {
                let pred = cross * total + (self_loop - cross) * alpha[(t - 1, j)];
                alpha[(t, j)] = pred * emissions[(t, j)];
            }
        }
        let c: f64 = (0..s).map(|j| alpha[(t, j)]).sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Numeric(format!(
                "forward recursion vanished at segment {t}"
            )));
        }
        for j in 0..s {
            alpha[(t, j)] /= c;
        }
        scale[t] = c;
    }

    // scaled backward pass
    let mut beta = Array2::<f64>::zeros((m, s));
    for j in 0..s {
        beta[(m - 1, j)] = 1.0;
    }
    for t in (0..m - 1).rev() {
        let mut total = 0.0;
        let mut terms = vec![0.0f64; s];
        for j in 0..s {
            terms[j] = emissions[(t + 1, j)] * beta[(t + 1, j)];
            total += terms[j];
        }
        for i in 0..s {
            beta[(t, i)] = (cross * total + (self_loop - cross) * terms[i]) / scale[t + 1];
        }
    }

    let mut gamma = Array2::<f64>::zeros((m, s));
    for t in 0..m {
        let mut z = 0.0;
        for j in 0..s {
            gamma[(t, j)] = alpha[(t, j)] * beta[(t, j)];
            z += gamma[(t, j)];
        }
        if !(z > 0.0) {
            return Err(Error::Numeric(format!("posterior vanished at segment {t}")));
        }
        for j in 0..s {
            gamma[(t, j)] /= z;
        }
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn weight_hand_values() {
        assert_abs_diff_eq!(poisson_weight(1.0, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(poisson_weight(1.0, 1), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(poisson_weight(1.0, -1), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(poisson_weight(2.0f64.ln(), 2), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn window_hand_case() {
        // linear scores (1,2,4) with lambda = ln 2, half-width 1 -> (2, 4.5, 5)
        let logs = array![[1.0f64.ln()], [2.0f64.ln()], [4.0f64.ln()]];
        let out = apply_score_window(logs.view(), 2.0f64.ln(), 1).unwrap();
        assert_abs_diff_eq!(out[(0, 0)].exp(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[(1, 0)].exp(), 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out[(2, 0)].exp(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn window_zero_width_is_identity() {
        let logs = array![[0.3, -1.2], [7.0, 0.0], [-3.0, 2.5]];
        let out = apply_score_window(logs.view(), 0.7, 0).unwrap();
        for (a, b) in logs.iter().zip(out.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn window_huge_scores_do_not_overflow() {
        let logs = array![[5000.0], [5001.0], [4999.0]];
        let out = apply_score_window(logs.view(), 0.5, 1).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        // shifting all scores by a constant shifts the output by the same constant
        let shifted = logs.mapv(|v| v - 5000.0);
        let out2 = apply_score_window(shifted.view(), 0.5, 1).unwrap();
        for (a, b) in out.iter().zip(out2.iter()) {
            assert_abs_diff_eq!(a - 5000.0, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn window_matches_direct_linear_sum() {
        let logs = array![
            [0.1, -0.4, 1.2],
            [0.9, 0.3, -2.0],
            [-1.1, 0.0, 0.4],
            [2.2, -0.6, 0.8],
            [0.0, 1.5, -0.2]
        ];
        let lambda = 0.3;
        let half = 2;
        let out = apply_score_window(logs.view(), lambda, half).unwrap();
        let (m, s) = logs.dim();
        for i in 0..m {
            for j in 0..s {
                let mut acc = 0.0;
                for k in 0..m {
                    if i.abs_diff(k) <= half {
                        acc += poisson_weight(lambda, i as i64 - k as i64) * logs[(k, j)].exp();
                    }
                }
                assert_abs_diff_eq!(out[(i, j)], acc.ln(), epsilon = 1e-10);
            }
        }
    }

    /// Brute-force path enumeration oracle for gamma.
    fn bruteforce_gamma(
        emissions: ArrayView2<f64>,
        initial: ArrayView1<f64>,
        self_loop: f64,
    ) -> Array2<f64> {
        let (m, s) = emissions.dim();
        let cross = (1.0 - self_loop) / (s as f64 - 1.0);
        let n_paths = s.pow(m as u32);
        let mut gamma = Array2::<f64>::zeros((m, s));
        let mut z = 0.0;
        for code in 0..n_paths {
            let mut path = vec![0usize; m];
            let mut c = code;
            for t in 0..m {
                path[t] = c % s;
                c /= s;
            }
            let mut p = initial[path[0]] * emissions[(0, path[0])];
            for t in 1..m {
                p *= if path[t] == path[t - 1] { self_loop } else { cross };
                p *= emissions[(t, path[t])];
            }
            z += p;
            for t in 0..m {
                gamma[(t, path[t])] += p;
            }
        }
        gamma.mapv(|v| v / z)
    }

    #[test]
    fn hmm_matches_path_enumeration() {
        let emissions = array![
            [0.9, 0.1, 0.3],
            [0.2, 0.7, 0.1],
            [0.4, 0.4, 0.2],
            [0.1, 0.1, 0.8],
            [0.5, 0.3, 0.2],
            [0.05, 0.9, 0.05]
        ];
        let initial = array![0.5, 0.3, 0.2];
        for &a in &[0.5, 0.9, 0.98] {
            let fast = hmm_smooth(emissions.view(), initial.view(), a).unwrap();
            let slow = bruteforce_gamma(emissions.view(), initial.view(), a);
            for (x, y) in fast.iter().zip(slow.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn hmm_self_loop_one_freezes_initial_winner() {
        // a_ii = 1 forbids switching: posterior mass concentrates on the
        // state with the best joint path, identically across segments
        let emissions = array![[0.9, 0.1], [0.9, 0.1], [0.1, 0.9]];
        let initial = array![0.5, 0.5];
        let g = hmm_smooth(emissions.view(), initial.view(), 1.0).unwrap();
        for t in 1..3 {
            for j in 0..2 {
                assert_abs_diff_eq!(g[(t, j)], g[(0, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hmm_uniform_transition_is_pointwise() {
        // a_ii = 1/S makes every transition equally likely, so smoothing
        // reduces to per-segment normalization of the emissions
        let emissions = array![[0.9, 0.3], [0.2, 0.6], [0.5, 0.5]];
        let initial = array![0.5, 0.5];
        let g = hmm_smooth(emissions.view(), initial.view(), 0.5).unwrap();
        for t in 0..3 {
            let z = emissions[(t, 0)] + emissions[(t, 1)];
            assert_abs_diff_eq!(g[(t, 0)], emissions[(t, 0)] / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn hmm_single_state_is_all_ones() {
        let emissions = array![[0.3], [0.8], [0.1]];
        let initial = array![1.0];
        let g = hmm_smooth(emissions.view(), initial.view(), 0.98).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hmm_rejects_bad_self_loop() {
        let emissions = array![[0.5, 0.5]];
        let initial = array![0.5, 0.5];
        assert!(hmm_smooth(emissions.view(), initial.view(), 0.0).is_err());
        assert!(hmm_smooth(emissions.view(), initial.view(), 1.5).is_err());
    }

    #[test]
    fn window_is_linear_in_linear_domain() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let m = rng.gen_range(2..10);
            let a = Array2::from_shape_fn((m, 2), |_| rng.gen_range(0.1..5.0f64));
            let b = Array2::from_shape_fn((m, 2), |_| rng.gen_range(0.1..5.0f64));
            let sum = (&a + &b).mapv(f64::ln);
            let wa = apply_score_window(a.mapv(f64::ln).view(), 0.4, 2).unwrap();
            let wb = apply_score_window(b.mapv(f64::ln).view(), 0.4, 2).unwrap();
            let wsum = apply_score_window(sum.view(), 0.4, 2).unwrap();
            for ((x, y), z) in wa.iter().zip(wb.iter()).zip(wsum.iter()) {
                let lhs = x.exp() + y.exp();
                assert!((lhs - z.exp()).abs() / lhs <= 1e-9);
            }
        }
    }

    #[test]
    fn higher_self_loop_reduces_label_switches() {
        use rand::{Rng, SeedableRng};
        let mut fewer = 0;
        for seed in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let emissions = Array2::from_shape_fn((30, 3), |_| rng.gen::<f64>() + 1e-3);
            let initial = array![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
            let switches = |g: &Array2<f64>| {
                let labels: Vec<usize> = g
                    .rows()
                    .into_iter()
                    .map(|r| {
                        r.iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1))
                            .unwrap()
                            .0
                    })
                    .collect();
                labels.windows(2).filter(|w| w[0] != w[1]).count()
            };
            let low = hmm_smooth(emissions.view(), initial.view(), 0.4).unwrap();
            let high = hmm_smooth(emissions.view(), initial.view(), 0.98).unwrap();
            if switches(&high) <= switches(&low) {
                fewer += 1;
            }
        }
        assert!(fewer >= 90, "only {fewer}/100 seeds showed fewer switches");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn hmm_rows_are_stochastic(seed in 0u64..1000, a in 0.05f64..0.999) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..12);
            let s = rng.gen_range(2..5);
            let emissions = Array2::from_shape_fn((m, s), |_| rng.gen::<f64>() + 1e-3);
            let mut initial = Array1::from_shape_fn(s, |_| rng.gen::<f64>() + 1e-3);
            let z = initial.sum();
            initial.mapv_inplace(|v| v / z);
            let g = hmm_smooth(emissions.view(), initial.view(), a).unwrap();
            for row in g.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-10);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn hmm_small_matches_oracle(seed in 0u64..300) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(2..7);
            let s = rng.gen_range(2..4);
            let a = rng.gen_range(0.2..0.99);
            let emissions = Array2::from_shape_fn((m, s), |_| rng.gen::<f64>() + 1e-3);
            let mut initial = Array1::from_shape_fn(s, |_| rng.gen::<f64>() + 1e-3);
            let z = initial.sum();
            initial.mapv_inplace(|v| v / z);
            let fast = hmm_smooth(emissions.view(), initial.view(), a).unwrap();
            let slow = bruteforce_gamma(emissions.view(), initial.view(), a);
            for (x, y) in fast.iter().zip(slow.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
