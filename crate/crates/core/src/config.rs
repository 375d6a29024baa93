//! Flat key=value run configuration shared by every CLI command. Unknown
//! keys are rejected; every key has a documented default.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::diarizer::{Backend, DiarizationConfig, InitMethod};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model sizes
    pub components: usize,
    pub rank: usize,
    pub rank_phi: usize,
    // diarization loop
    pub speakers: usize,
    pub seg_len: usize,
    pub data_half_window: usize,
    pub score_half_window: usize,
    pub lambda: f64,
    pub kappa_plda: f64,
    pub kappa_svm: f64,
    pub self_loop: f64,
    pub hard_prior_q: f64,
    pub soft_prior_k: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub backend: Backend,
    pub init: InitMethod,
    pub svm_c_reg: f64,
    pub seed: u64,
    // training
    pub ubm_iters: usize,
    pub tv_iters: usize,
    pub plda_iters: usize,
    // scoring
    pub collar: f64,
    pub score_overlap: bool,
    // synthesis
    pub dim: usize,
    pub frame_shift_ms: f64,
    pub duration: f64,
    pub turn_mean: f64,
    pub speaker_weights: Vec<f64>,
    pub synth_noise: f64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            components: 512,
            rank: 300,
            rank_phi: 150,
            speakers: 2,
            seg_len: 10,
            data_half_window: 40,
            score_half_window: 40,
            lambda: 0.05,
            kappa_plda: 1.0,
            kappa_svm: 10.0,
            self_loop: 0.98,
            hard_prior_q: 0.7,
            soft_prior_k: 10.0,
            max_iters: 20,
            tol: 1e-3,
            backend: Backend::Plda,
            init: InitMethod::AhcSoft,
            svm_c_reg: 1.0,
            seed: 0,
            ubm_iters: 10,
            tv_iters: 10,
            plda_iters: 10,
            collar: 0.25,
            score_overlap: true,
            dim: 20,
            frame_shift_ms: 10.0,
            duration: 60.0,
            turn_mean: 3.0,
            speaker_weights: Vec::new(),
            synth_noise: 1.0,
            threads: 1,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Parameter(format!("key '{key}': cannot parse '{value}': {e}")))
}

pub fn parse_backend(value: &str) -> Result<Backend> {
    match value {
        "plda" => Ok(Backend::Plda),
        "svm" => Ok(Backend::Svm),
        "hybrid" => Ok(Backend::Hybrid),
        "vb" => Ok(Backend::Vb),
        other => Err(Error::Parameter(format!(
            "backend '{other}' is not one of plda, svm, hybrid, vb"
        ))),
    }
}

pub fn parse_init(value: &str) -> Result<InitMethod> {
    match value {
        "random" => Ok(InitMethod::Random),
        "ahc-hard" => Ok(InitMethod::AhcHard),
        "ahc-soft" => Ok(InitMethod::AhcSoft),
        other => Err(Error::Parameter(format!(
            "init '{other}' is not one of random, ahc-hard, ahc-soft"
        ))),
    }
}

impl RunConfig {
    /// Apply one key=value pair; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "components" => self.components = parse_as(key, value)?,
            "rank" => self.rank = parse_as(key, value)?,
            "rank_phi" => self.rank_phi = parse_as(key, value)?,
            "speakers" => self.speakers = parse_as(key, value)?,
            "seg_len" => self.seg_len = parse_as(key, value)?,
            "data_half_window" => self.data_half_window = parse_as(key, value)?,
            "score_half_window" => self.score_half_window = parse_as(key, value)?,
            "lambda" => self.lambda = parse_as(key, value)?,
            "kappa_plda" => self.kappa_plda = parse_as(key, value)?,
            "kappa_svm" => self.kappa_svm = parse_as(key, value)?,
            "self_loop" => self.self_loop = parse_as(key, value)?,
            "hard_prior_q" => self.hard_prior_q = parse_as(key, value)?,
            "soft_prior_k" => self.soft_prior_k = parse_as(key, value)?,
            "max_iters" => self.max_iters = parse_as(key, value)?,
            "tol" => self.tol = parse_as(key, value)?,
            "backend" => self.backend = parse_backend(value)?,
            "init" => self.init = parse_init(value)?,
            "svm_c_reg" => self.svm_c_reg = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "ubm_iters" => self.ubm_iters = parse_as(key, value)?,
            "tv_iters" => self.tv_iters = parse_as(key, value)?,
            "plda_iters" => self.plda_iters = parse_as(key, value)?,
            "collar" => self.collar = parse_as(key, value)?,
            "score_overlap" => self.score_overlap = parse_as(key, value)?,
            "dim" => self.dim = parse_as(key, value)?,
            "frame_shift_ms" => self.frame_shift_ms = parse_as(key, value)?,
            "duration" => self.duration = parse_as(key, value)?,
            "turn_mean" => self.turn_mean = parse_as(key, value)?,
            "synth_noise" => self.synth_noise = parse_as(key, value)?,
            "threads" => self.threads = parse_as(key, value)?,
            "speaker_weights" => {
                self.speaker_weights = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse_as::<f64>(key, v.trim()))
                        .collect::<Result<Vec<f64>>>()?
                };
            }
            other => return Err(Error::Parameter(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a config file of `key = value` lines; '#' starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = fs::read_to_string(path)?;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(Error::Parse { line, msg: format!("expected key=value, got '{stripped}'") });
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn diarization(&self) -> DiarizationConfig {
        DiarizationConfig {
            speakers: self.speakers,
            seg_len: self.seg_len,
            data_half_window: self.data_half_window,
            score_half_window: self.score_half_window,
            lambda: self.lambda,
            kappa_plda: self.kappa_plda,
            kappa_svm: self.kappa_svm,
            self_loop: self.self_loop,
            max_iters: self.max_iters,
            tol: self.tol,
            backend: self.backend,
            init: self.init,
            hard_prior_q: self.hard_prior_q,
            soft_prior_k: self.soft_prior_k,
            svm_c_reg: self.svm_c_reg,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_match_documentation() {
        let c = RunConfig::default();
        assert_eq!(c.components, 512);
        assert_eq!(c.rank, 300);
        assert_eq!(c.rank_phi, 150);
        assert_eq!(c.data_half_window, 40);
        assert_eq!(c.score_half_window, 40);
        assert_eq!(c.lambda, 0.05);
        assert_eq!(c.kappa_plda, 1.0);
        assert_eq!(c.kappa_svm, 10.0);
        assert_eq!(c.self_loop, 0.98);
        assert_eq!(c.hard_prior_q, 0.7);
        assert_eq!(c.soft_prior_k, 10.0);
        assert_eq!(c.collar, 0.25);
    }

    #[test]
    fn file_parsing_with_comments_and_overrides() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nspeakers = 3\nbackend = hybrid # trailing\ninit=ahc-hard\nlambda = 0.1\nspeaker_weights = 0.9, 0.1\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.speakers, 3);
        assert_eq!(cfg.backend, Backend::Hybrid);
        assert_eq!(cfg.init, InitMethod::AhcHard);
        assert_eq!(cfg.lambda, 0.1);
        assert_eq!(cfg.speaker_weights, vec![0.9, 0.1]);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "speakers = 2\nnot_a_key = 1\n").unwrap();
        match RunConfig::from_file(&path) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("not_a_key"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("lambda", "fast").is_err());
        assert!(cfg.set("backend", "magic").is_err());
    }
}
