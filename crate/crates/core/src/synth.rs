//! Seeded synthetic data: a generative chain (UBM + total-variability
//! subspace + PLDA speaker prior) that produces conversations with known
//! reference labels, used by the acceptance tests and the `synth` command.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::corpus::{FeatureMatrix, LabeledInterval, ReferenceLabels};
use crate::error::{Error, Result};
use crate::gmm::DiagonalGmm;
use crate::scoring::PldaModel;
use crate::tvspace::{IVector, TotalVariability};

/// The full generative model: frames come from the UBM with every component
/// mean shifted by T_c w, where the speaker identity w follows the PLDA
/// prior.
#[derive(Debug, Clone)]
pub struct GenerativeChain {
    pub gmm: DiagonalGmm,
    pub tv: TotalVariability,
    pub plda: PldaModel,
}

/// Random but reproducible chain with the requested sizes.
pub fn make_chain(
    dim: usize,
    components: usize,
    rank: usize,
    rank_phi: usize,
    seed: u64,
) -> Result<GenerativeChain> {
    if rank_phi > rank {
        return Err(Error::Parameter("rank_phi may not exceed the subspace rank".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let weights = Array1::from_elem(components, 1.0 / components as f64);
    let means = Array2::from_shape_fn((components, dim), |_| 3.0 * normal.sample(&mut rng));
    let vars = Array2::from_shape_fn((components, dim), |_| rng.gen_range(0.5..1.5));
    let gmm = DiagonalGmm::new(weights, means, vars)?;

    // per-dimension speaker shift of order 1 relative to unit frame noise
    let t_scale = 1.0 / (rank as f64).sqrt();
    let t = Array2::from_shape_fn((components * dim, rank), |_| t_scale * normal.sample(&mut rng));
    let tv = TotalVariability::new(t, gmm.vars().clone())?;

    let phi_scale = 1.0 / (rank_phi as f64).sqrt();
    let phi = Array2::from_shape_fn((rank, rank_phi), |_| phi_scale * normal.sample(&mut rng));
    let mut sigma_eps = Array2::zeros((rank, rank));
    for i in 0..rank {
        sigma_eps[(i, i)] = 0.05;
    }
    let plda = PldaModel::new(Array1::zeros(rank), phi, sigma_eps)?;

    Ok(GenerativeChain { gmm, tv, plda })
}

/// Draw one session identity w = mu + Phi y + eps from the PLDA prior.
/// `speaker_y` fixes the speaker; sessions of the same speaker share y.
pub fn sample_session_ivector(
    chain: &GenerativeChain,
    speaker_y: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> IVector {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let rank = chain.tv.rank();
    let mut w = chain.plda.mu() + &chain.plda.phi().dot(speaker_y);
    // Sigma_eps is diagonal in the generator
    for i in 0..rank {
        w[i] += chain.plda.sigma_eps()[(i, i)].sqrt() * normal.sample(rng);
    }
    IVector(w)
}

pub fn sample_speaker_y(chain: &GenerativeChain, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array1::from_shape_fn(chain.plda.phi().ncols(), |_| normal.sample(rng))
}

/// Frames for one identity: component c ~ UBM weights, then
/// x = mu_c + T_c w + noise_scale * Sigma_c^{1/2} xi.
pub fn sample_frames(
    chain: &GenerativeChain,
    w: &IVector,
    frames: usize,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let dim = chain.gmm.dim();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let weights = chain.gmm.weights();
    let mut out = Array2::<f32>::zeros((frames, dim));
    for mut row in out.rows_mut() {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut c = 0;
        for (i, &wgt) in weights.iter().enumerate() {
            acc += wgt;
            if u < acc {
                c = i;
                break;
            }
            c = i;
        }
        let shift = chain.tv.block(c).dot(&w.0);
        for d in 0..dim {
            let v = chain.gmm.means()[(c, d)]
                + shift[d]
                + noise_scale * chain.gmm.vars()[(c, d)].sqrt() * normal.sample(rng);
            row[d] = v as f32;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ConversationSpec {
    pub speakers: usize,
    /// Seconds; tiled exactly by the reference labels.
    pub duration: f64,
    /// Mean turn length in seconds (exponential).
    pub turn_mean: f64,
    pub frame_shift_ms: f64,
    /// Relative speaking-time weights; empty = uniform.
    pub speaker_weights: Vec<f64>,
    /// Multiplier on the per-frame noise standard deviation.
    pub noise_scale: f64,
}

impl Default for ConversationSpec {
    fn default() -> Self {
        ConversationSpec {
            speakers: 2,
            duration: 60.0,
            turn_mean: 3.0,
            frame_shift_ms: 10.0,
            speaker_weights: Vec::new(),
            noise_scale: 1.0,
        }
    }
}

/// One seeded conversation: exponential-length speaker turns tiling
/// [0, duration] exactly, frames drawn from the chain per active speaker.
pub fn synthesize_conversation(
    chain: &GenerativeChain,
    spec: &ConversationSpec,
    seed: u64,
) -> Result<(FeatureMatrix, ReferenceLabels)> {
    if spec.speakers < 1 {
        return Err(Error::Parameter("need at least one speaker".into()));
    }
    if !(spec.duration > 0.0) || !(spec.turn_mean > 0.0) || !(spec.frame_shift_ms > 0.0) {
        return Err(Error::Parameter("duration, turn_mean, frame_shift must be positive".into()));
    }
    if !spec.speaker_weights.is_empty() {
        if spec.speaker_weights.len() != spec.speakers {
            return Err(Error::Parameter("speaker_weights length must equal speakers".into()));
        }
        if spec.speaker_weights.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Parameter("speaker_weights must be positive".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame_shift = spec.frame_shift_ms / 1000.0;
    let frames_total = (spec.duration / frame_shift).round() as usize;
    if frames_total == 0 {
        return Err(Error::Parameter("duration shorter than one frame".into()));
    }

    // speaker identities (one session each within the conversation)
    let speaker_ws: Vec<IVector> = (0..spec.speakers)
        .map(|_| {
            let y = sample_speaker_y(chain, &mut rng);
            sample_session_ivector(chain, &y, &mut rng)
        })
        .collect();

    // turn sequence tiling the duration
    let exp = Exp::new(1.0 / spec.turn_mean).unwrap();
    // each turn is drawn independently so speaker_weights control the
    // long-run occupancy; consecutive same-speaker turns simply merge
    let pick = |rng: &mut ChaCha8Rng| -> usize {
        let weights: Vec<f64> = (0..spec.speakers)
            .map(|s| {
                if spec.speaker_weights.is_empty() {
                    1.0
                } else {
                    spec.speaker_weights[s]
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (s, &w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return s;
            }
        }
        spec.speakers - 1
    };
    let mut labels: ReferenceLabels = Vec::new();
    let mut t = 0.0;
    while t < spec.duration {
        let s = pick(&mut rng);
        let len = exp.sample(&mut rng).max(2.0 * frame_shift);
        let end = (t + len).min(spec.duration);
        let name = format!("spk{s:02}");
        match labels.last_mut() {
            Some(last) if last.speaker == name => last.end = end,
            _ => labels.push(LabeledInterval { start: t, end, speaker: name }),
        }
        t = end;
    }

    // frames by frame-center membership
    let mut data = Array2::<f32>::zeros((frames_total, chain.gmm.dim()));
    for i in 0..frames_total {
        let mid = (i as f64 + 0.5) * frame_shift;
        let s = labels
            .iter()
            .position(|iv| iv.start <= mid && mid < iv.end)
            .unwrap_or(labels.len() - 1);
        let spk: usize = labels[s].speaker[3..].parse().unwrap();
        let frame = sample_frames(chain, &speaker_ws[spk], 1, spec.noise_scale, &mut rng);
        data.row_mut(i).assign(&frame.row(0));
    }
    let features = FeatureMatrix::new(data, (spec.frame_shift_ms * 1000.0).round() as u32)?;
    Ok((features, labels))
}

/// Labeled multi-session training material for the UBM/TV/PLDA stack.
pub struct TrainingSet {
    pub features: Vec<FeatureMatrix>,
    /// Speaker id per feature matrix.
    pub speaker_ids: Vec<usize>,
}

pub fn synthesize_training_set(
    chain: &GenerativeChain,
    n_speakers: usize,
    sessions_per_speaker: usize,
    frames_per_session: usize,
    frame_shift_us: u32,
    seed: u64,
) -> Result<TrainingSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut speaker_ids = Vec::new();
    for spk in 0..n_speakers {
        let y = sample_speaker_y(chain, &mut rng);
        for _ in 0..sessions_per_speaker {
            let w = sample_session_ivector(chain, &y, &mut rng);
            let data = sample_frames(chain, &w, frames_per_session, 1.0, &mut rng);
            features.push(FeatureMatrix::new(data, frame_shift_us)?);
            speaker_ids.push(spk);
        }
    }
    Ok(TrainingSet { features, speaker_ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_chain() -> GenerativeChain {
        make_chain(3, 4, 5, 2, 99).unwrap()
    }

    #[test]
    fn conversation_is_deterministic() {
        let chain = tiny_chain();
        let spec = ConversationSpec { duration: 5.0, ..Default::default() };
        let (f1, l1) = synthesize_conversation(&chain, &spec, 7).unwrap();
        let (f2, l2) = synthesize_conversation(&chain, &spec, 7).unwrap();
        assert_eq!(f1.data(), f2.data());
        assert_eq!(l1, l2);
        let (f3, _) = synthesize_conversation(&chain, &spec, 8).unwrap();
        assert_ne!(f1.data(), f3.data());
    }

    #[test]
    fn labels_partition_duration() {
        let chain = tiny_chain();
        let spec = ConversationSpec { duration: 12.5, ..Default::default() };
        let (f, labels) = synthesize_conversation(&chain, &spec, 3).unwrap();
        assert_eq!(f.frames(), 1250);
        assert_abs_diff_eq!(labels[0].start, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(labels.last().unwrap().end, 12.5, epsilon = 1e-12);
        for pair in labels.windows(2) {
            assert_abs_diff_eq!(pair[0].end, pair[1].start, epsilon = 1e-12);
            assert!(pair[0].end > pair[0].start);
        }
    }

    #[test]
    fn all_speakers_appear_on_long_conversations() {
        let chain = tiny_chain();
        let spec = ConversationSpec { speakers: 3, duration: 120.0, ..Default::default() };
        let (_, labels) = synthesize_conversation(&chain, &spec, 1).unwrap();
        let mut names: Vec<&str> = labels.iter().map(|l| l.speaker.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 3);
    }

    #[test]
    fn speaker_weights_skew_occupancy() {
        let chain = tiny_chain();
        let spec = ConversationSpec {
            duration: 600.0,
            speaker_weights: vec![0.9, 0.1],
            ..Default::default()
        };
        let (_, labels) = synthesize_conversation(&chain, &spec, 5).unwrap();
        let time = |s: &str| -> f64 {
            labels.iter().filter(|l| l.speaker == s).map(|l| l.end - l.start).sum()
        };
        assert!(time("spk00") > 2.0 * time("spk01"));
    }

    #[test]
    fn training_set_shapes_and_determinism() {
        let chain = tiny_chain();
        let a = synthesize_training_set(&chain, 4, 3, 50, 10_000, 11).unwrap();
        assert_eq!(a.features.len(), 12);
        assert_eq!(a.speaker_ids, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert_eq!(a.features[0].frames(), 50);
        let b = synthesize_training_set(&chain, 4, 3, 50, 10_000, 11).unwrap();
        assert_eq!(a.features[5].data(), b.features[5].data());
    }

    #[test]
    fn bad_specs_are_rejected() {
        let chain = tiny_chain();
        let mut spec = ConversationSpec { speakers: 0, ..Default::default() };
        assert!(synthesize_conversation(&chain, &spec, 0).is_err());
        spec = ConversationSpec {
            speakers: 2,
            speaker_weights: vec![1.0],
            ..Default::default()
        };
        assert!(synthesize_conversation(&chain, &spec, 0).is_err());
    }
}
