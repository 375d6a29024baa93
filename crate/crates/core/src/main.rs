use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lcmdiar::archive::{
    get_plda, get_prep, get_tv, get_ubm, put_plda, put_prep, put_tv, put_ubm, ModelArchive,
};
use lcmdiar::config::RunConfig;
use lcmdiar::corpus::{
    apply_speech_marks, load_features, read_speech_marks, write_features, write_speech_marks,
    FeatureMatrix, SegmentGrid, SpeechMarks,
};
use lcmdiar::diarizer::{lcm_iterate, BackendModels, DiarizationResult};
use lcmdiar::error::{Error, Result};
use lcmdiar::evaluate::{compute_der, hypothesis_intervals, read_rttm, write_rttm};
use lcmdiar::gmm::train_ubm;
use lcmdiar::scoring::{preprocess_ivectors, train_plda};
use lcmdiar::synth::{make_chain, synthesize_conversation, synthesize_training_set, ConversationSpec};
use lcmdiar::tvspace::{accumulate_stats, extract_ivector, train_tv, BaumWelchStats};

#[derive(Parser)]
#[command(name = "lcmdiar", version, about = "Latent-class speaker diarization toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config overrides; every flag mirrors a config-file key.
#[derive(Args, Default)]
struct Overrides {
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    components: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    #[arg(long)]
    rank_phi: Option<String>,
    #[arg(long)]
    seg_len: Option<String>,
    #[arg(long)]
    data_half_window: Option<String>,
    #[arg(long)]
    score_half_window: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    kappa_plda: Option<String>,
    #[arg(long)]
    kappa_svm: Option<String>,
    #[arg(long)]
    self_loop: Option<String>,
    #[arg(long)]
    hard_prior_q: Option<String>,
    #[arg(long)]
    soft_prior_k: Option<String>,
    #[arg(long)]
    max_iters: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    svm_c_reg: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    ubm_iters: Option<String>,
    #[arg(long)]
    tv_iters: Option<String>,
    #[arg(long)]
    plda_iters: Option<String>,
    #[arg(long)]
    collar: Option<String>,
    #[arg(long)]
    score_overlap: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    frame_shift_ms: Option<String>,
    #[arg(long)]
    duration: Option<String>,
    #[arg(long)]
    turn_mean: Option<String>,
    #[arg(long)]
    speaker_weights: Option<String>,
    #[arg(long)]
    synth_noise: Option<String>,
    #[arg(long)]
    threads: Option<String>,
}

impl Overrides {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let pairs: [(&str, &Option<String>); 31] = [
            ("components", &self.components),
            ("rank", &self.rank),
            ("rank_phi", &self.rank_phi),
            ("seg_len", &self.seg_len),
            ("data_half_window", &self.data_half_window),
            ("score_half_window", &self.score_half_window),
            ("lambda", &self.lambda),
            ("kappa_plda", &self.kappa_plda),
            ("kappa_svm", &self.kappa_svm),
            ("self_loop", &self.self_loop),
            ("hard_prior_q", &self.hard_prior_q),
            ("soft_prior_k", &self.soft_prior_k),
            ("max_iters", &self.max_iters),
            ("tol", &self.tol),
            ("backend", &self.backend),
            ("init", &self.init),
            ("svm_c_reg", &self.svm_c_reg),
            ("seed", &self.seed),
            ("ubm_iters", &self.ubm_iters),
            ("tv_iters", &self.tv_iters),
            ("plda_iters", &self.plda_iters),
            ("collar", &self.collar),
            ("score_overlap", &self.score_overlap),
            ("dim", &self.dim),
            ("frame_shift_ms", &self.frame_shift_ms),
            ("duration", &self.duration),
            ("turn_mean", &self.turn_mean),
            ("speaker_weights", &self.speaker_weights),
            ("synth_noise", &self.synth_noise),
            ("threads", &self.threads),
            ("speakers", &None), // set via dedicated flags where applicable
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Ok(raw) = std::env::var("LCMD_THREADS") {
            let n: usize = raw.parse().map_err(|_| {
                Error::Parameter(format!("LCMD_THREADS must be a positive integer, got '{raw}'"))
            })?;
            if n == 0 {
                return Err(Error::Parameter("LCMD_THREADS must be >= 1".into()));
            }
            cfg.threads = cfg.threads.min(n).max(1);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the diagonal-covariance UBM.
    TrainUbm {
        /// Model archive to create or update.
        #[arg(long)]
        archive: PathBuf,
        /// Feature files (binary feature matrices).
        #[arg(required = true)]
        features: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the total-variability subspace (requires a trained UBM).
    TrainTv {
        #[arg(long)]
        archive: PathBuf,
        #[arg(required = true)]
        features: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train PLDA and the i-vector preprocessing (requires UBM + subspace).
    TrainPlda {
        #[arg(long)]
        archive: PathBuf,
        /// Text file with one integer speaker id per feature file.
        #[arg(long)]
        labels: PathBuf,
        #[arg(required = true)]
        features: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Diarize one recording into an RTTM hypothesis.
    Diarize {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Speech marks file; omitted = everything is speech.
        #[arg(long)]
        marks: Option<PathBuf>,
        /// Number of speakers (required; the model assumes it known).
        #[arg(long)]
        speakers: usize,
        /// Output RTTM path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-iteration diagnostics CSV.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a hypothesis RTTM against a reference.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a seeded synthetic conversation (and optional training set).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Speakers in the conversation.
        #[arg(long)]
        speakers: Option<usize>,
        /// Also emit a labeled training set with this many speakers.
        #[arg(long)]
        train_speakers: Option<usize>,
        #[arg(long, default_value_t = 4)]
        train_sessions: usize,
        #[arg(long, default_value_t = 2000)]
        train_frames: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load_feature_list(paths: &[PathBuf]) -> Result<Vec<FeatureMatrix>> {
    paths.iter().map(|p| load_features(p)).collect()
}

fn full_file_stats(
    g: &lcmdiar::gmm::DiagonalGmm,
    f: &FeatureMatrix,
) -> Result<BaumWelchStats> {
    let weights = vec![1.0; f.frames()];
    accumulate_stats(g, f, &weights)
}

fn cmd_train_ubm(archive: &Path, features: &[PathBuf], cfg: &RunConfig) -> Result<()> {
    let feats = load_feature_list(features)?;
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();
    let training = train_ubm(&refs, cfg.components, cfg.ubm_iters, cfg.seed)?;
    for (i, ll) in training.loglik_trace.iter().enumerate() {
        log::info!("ubm iter {i}: loglik {ll:.6}");
    }
    let mut arch = if archive.exists() { ModelArchive::load(archive)? } else { ModelArchive::new() };
    put_ubm(&mut arch, &training.model)?;
    arch.save(archive)?;
    println!(
        "trained ubm: {} components, dim {}",
        training.model.components(),
        training.model.dim()
    );
    Ok(())
}

fn cmd_train_tv(archive: &Path, features: &[PathBuf], cfg: &RunConfig) -> Result<()> {
    let mut arch = ModelArchive::load(archive)?;
    let ubm = get_ubm(&arch)?;
    let feats = load_feature_list(features)?;
    let stats: Vec<BaumWelchStats> = feats
        .iter()
        .map(|f| full_file_stats(&ubm, f))
        .collect::<Result<_>>()?;
    let training = train_tv(&stats, ubm.vars(), cfg.rank, cfg.tv_iters, cfg.seed)?;
    for (i, obj) in training.objective_trace.iter().enumerate() {
        log::info!("tv iter {i}: objective {obj:.6}");
    }
    put_tv(&mut arch, &training.model)?;
    arch.save(archive)?;
    println!("trained subspace: rank {}", training.model.rank());
    Ok(())
}

fn cmd_train_plda(
    archive: &Path,
    labels_path: &Path,
    features: &[PathBuf],
    cfg: &RunConfig,
) -> Result<()> {
    let mut arch = ModelArchive::load(archive)?;
    let ubm = get_ubm(&arch)?;
    let tv = get_tv(&arch)?;
    let labels_text = fs::read_to_string(labels_path)?;
    let labels: Vec<usize> = labels_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("speaker id '{}' is not an integer", l.trim()),
            })
        })
        .collect::<Result<_>>()?;
    if labels.len() != features.len() {
        return Err(Error::Data(format!(
            "{} labels for {} feature files",
            labels.len(),
            features.len()
        )));
    }
    let feats = load_feature_list(features)?;
    let mut ivecs = Vec::with_capacity(feats.len());
    for f in &feats {
        ivecs.push(extract_ivector(&tv, &full_file_stats(&ubm, f)?)?);
    }
    let prep = preprocess_ivectors(&ivecs)?;
    let processed: Vec<_> = ivecs.iter().map(|w| prep.apply(w)).collect::<Result<_>>()?;
    let training = train_plda(&processed, &labels, cfg.rank_phi, cfg.plda_iters)?;
    for (i, ll) in training.loglik_trace.iter().enumerate() {
        log::info!("plda iter {i}: loglik {ll:.6}");
    }
    put_prep(&mut arch, &prep)?;
    put_plda(&mut arch, &training.model)?;
    arch.save(archive)?;
    println!("trained plda: rank {}", training.model.phi().ncols());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_diarize(
    archive: &Path,
    features_path: &Path,
    marks_path: Option<&Path>,
    speakers: usize,
    out: &Path,
    diagnostics: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let arch = ModelArchive::load(archive)?;
    let ubm = get_ubm(&arch)?;
    let tv = get_tv(&arch)?;
    let plda = get_plda(&arch).ok();
    let prep = get_prep(&arch).ok();
    let features = load_features(features_path)?;
    let marks = match marks_path {
        Some(p) => read_speech_marks(p)?,
        None => SpeechMarks::new(vec![(0.0, features.span())])?,
    };
    let speech = apply_speech_marks(&features, &marks)?;
    let grid = SegmentGrid::new(speech.features.frames(), cfg.seg_len)?;
    let mut dcfg = cfg.diarization();
    dcfg.speakers = speakers;
    let models = BackendModels {
        gmm: &ubm,
        tv: &tv,
        plda: plda.as_ref(),
        prep: prep.as_ref(),
    };
    let result: DiarizationResult = lcm_iterate(&speech.features, &grid, &models, &dcfg)?;
    let intervals =
        hypothesis_intervals(&result.labels, &grid, &speech.frame_map, features.frame_shift())?;
    let file_id = features_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "rec".into());
    write_rttm(&intervals, &file_id, out)?;
    if let Some(path) = diagnostics {
        let mut f = fs::File::create(path)?;
        writeln!(f, "iter,objective")?;
        for (i, obj) in result.objective_trace.iter().enumerate() {
            writeln!(f, "{},{obj:.9}", i + 1)?;
        }
    }
    println!(
        "diarized {} segments into {} speakers in {} iterations",
        grid.segments(),
        speakers,
        result.iterations
    );
    Ok(())
}

fn cmd_score(reference: &Path, hyp: &Path, cfg: &RunConfig) -> Result<()> {
    let r = read_rttm(reference)?;
    let h = read_rttm(hyp)?;
    let d = compute_der(&r, &h, cfg.collar, cfg.score_overlap)?;
    println!("scored_time_s: {:8.3}", d.scored_time);
    println!("miss:  {:6.2}%", 100.0 * d.miss);
    println!("fa:    {:6.2}%", 100.0 * d.fa);
    println!("se:    {:6.2}%", 100.0 * d.se);
    println!("der:   {:6.2}%", 100.0 * d.der);
    Ok(())
}

fn cmd_synth(
    out_dir: &Path,
    speakers: Option<usize>,
    train_speakers: Option<usize>,
    train_sessions: usize,
    train_frames: usize,
    cfg: &RunConfig,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let chain = make_chain(cfg.dim, cfg.components, cfg.rank, cfg.rank_phi, cfg.seed)?;
    let spec = ConversationSpec {
        speakers: speakers.unwrap_or(cfg.speakers),
        duration: cfg.duration,
        turn_mean: cfg.turn_mean,
        frame_shift_ms: cfg.frame_shift_ms,
        speaker_weights: cfg.speaker_weights.clone(),
        noise_scale: cfg.synth_noise,
    };
    let (features, labels) = synthesize_conversation(&chain, &spec, cfg.seed)?;
    write_features(&features, &out_dir.join("conv.fmx"))?;
    let marks = SpeechMarks::new(vec![(0.0, features.span())])?;
    write_speech_marks(&marks, &out_dir.join("conv.marks"))?;
    write_rttm(&labels, "conv", &out_dir.join("conv.rttm"))?;
    println!("wrote conversation: {} frames, {} turns", features.frames(), labels.len());
    if let Some(n) = train_speakers {
        let set = synthesize_training_set(
            &chain,
            n,
            train_sessions,
            train_frames,
            (cfg.frame_shift_ms * 1000.0).round() as u32,
            cfg.seed.wrapping_add(1),
        )?;
        let mut label_lines = String::new();
        for (i, (f, spk)) in set.features.iter().zip(&set.speaker_ids).enumerate() {
            write_features(f, &out_dir.join(format!("train_{i:03}.fmx")))?;
            label_lines.push_str(&format!("{spk}\n"));
        }
        fs::write(out_dir.join("train_labels.txt"), label_lines)?;
        println!("wrote training set: {} sessions of {n} speakers", set.features.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::TrainUbm { archive, features, overrides } => {
            cmd_train_ubm(archive, features, &overrides.build()?)
        }
        Cmd::TrainTv { archive, features, overrides } => {
            cmd_train_tv(archive, features, &overrides.build()?)
        }
        Cmd::TrainPlda { archive, labels, features, overrides } => {
            cmd_train_plda(archive, labels, features, &overrides.build()?)
        }
        Cmd::Diarize { archive, features, marks, speakers, out, diagnostics, overrides } => {
            cmd_diarize(
                archive,
                features,
                marks.as_deref(),
                *speakers,
                out,
                diagnostics.as_deref(),
                &overrides.build()?,
            )
        }
        Cmd::Score { reference, hyp, overrides } => cmd_score(reference, hyp, &overrides.build()?),
        Cmd::Synth { out_dir, speakers, train_speakers, train_sessions, train_frames, overrides } => {
            cmd_synth(
                out_dir,
                *speakers,
                *train_speakers,
                *train_sessions,
                *train_frames,
                &overrides.build()?,
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with successful exit
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
