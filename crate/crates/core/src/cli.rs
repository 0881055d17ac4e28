//! Command-line interface. `run` never exits the process; it returns the
//! exit code so the binary and tests share one path.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::diarize::{compute_der, diarize_session, speech_regions, DerConfig, DerResult, DiarizeConfig, Domain, Segment};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{load_wav, write_wav, FrameConfig, MelFrontend};
use crate::io::{
    config_file_args, load_checkpoint, parse_rttm, read_embeddings, read_manifest, read_trials, save_checkpoint,
    segments_to_rttm, utterance_id, write_bytes, write_embeddings, write_manifest, write_rttm, write_trials,
    Checkpoint, ManifestEntry, RttmSegment,
};
use crate::model::{ModelConfig, TitaNet};
use crate::train::{
    chunked_examples, split_validation, synth_conversation, train, utterance_features, AAMConfig, Example,
    SyntheticCorpus, TrainConfig,
};
use crate::verify::{det_csv, det_points, sample_trials, score_trials, summarize, DcfConfig};

/// Parameter counts reported for the three published model sizes.
pub const REFERENCE_PARAMS: [(&str, f64); 3] = [("titanet_s", 6.4e6), ("titanet_m", 13.4e6), ("titanet_l", 25.3e6)];
/// Speaker count of the large training set the reference counts assume.
pub const REFERENCE_CLASSES: usize = 16_681;

const SUBCOMMANDS: [&str; 7] = ["synth", "train", "embed", "verify", "diarize", "score-der", "params"];

#[derive(Debug, Parser)]
#[command(name = "titanet", version, about = "Speaker embeddings, verification and diarization")]
#[command(args_override_self = true)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Architecture preset: titanet_s, titanet_m, titanet_l or toy.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    /// Flat key=value file with default flag values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Extract embeddings for every manifest row.
    Embed(EmbedArgs),
    /// Score a trial list and report EER and MinDCF.
    Verify(VerifyArgs),
    /// Diarize recordings using oracle speech regions.
    Diarize(DiarizeArgs),
    /// Score hypothesis RTTM against reference RTTM.
    ScoreDer(ScoreDerArgs),
    /// Report parameter counts.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
struct ArchArgs {
    /// Override the number of mega blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Override sub-blocks per mega block.
    #[arg(long)]
    repeats: Option<usize>,
    /// Override mega-block width.
    #[arg(long)]
    channels: Option<usize>,
    /// Override epilogue width.
    #[arg(long)]
    epilogue_channels: Option<usize>,
    /// Override the mega-block kernel sizes, e.g. `7,11,15`.
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<usize>>,
}

impl ArchArgs {
    fn apply(&self, preset: &str) -> Result<EncoderConfig> {
        let mut cfg = EncoderConfig::preset(preset)?;
        if let Some(b) = self.blocks {
            cfg = cfg.with_blocks(b);
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(c) = self.channels {
            cfg.channels = c;
        }
        if let Some(e) = self.epilogue_channels {
            cfg.epilogue_channels = e;
        }
        if let Some(k) = &self.kernels {
            cfg.mega_kernels = k.clone();
            if self.blocks.is_none() {
                cfg.mega_blocks = k.len();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    /// Training utterances per speaker.
    #[arg(long, default_value_t = 50)]
    utterances: usize,
    #[arg(long, default_value_t = 1.5)]
    min_duration: f64,
    #[arg(long, default_value_t = 2.0)]
    max_duration: f64,
    /// Additional held-out utterances per speaker (with a trial list).
    #[arg(long, default_value_t = 0)]
    heldout: usize,
    /// Trials in the held-out list, half of them target trials.
    #[arg(long, default_value_t = 500)]
    trials: usize,
    /// Two-speaker conversations to render, with reference RTTM.
    #[arg(long, default_value_t = 0)]
    sessions: usize,
    /// Approximate conversation length in seconds.
    #[arg(long, default_value_t = 40.0)]
    session_duration: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path for the best-validation weights.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log (defaults to the checkpoint path with `.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 0.08)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    min_lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Angular margin in radians.
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 30.0)]
    scale: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 300)]
    max_frames: usize,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Trained checkpoint; without one a randomly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
}

impl ModelArgs {
    fn load(&self, preset: &str, seed: u64) -> Result<TitaNet> {
        match &self.checkpoint {
            Some(path) => Ok(load_checkpoint(path)?.1),
            None => TitaNet::new(ModelConfig::new(self.arch.apply(preset)?, 0), seed),
        }
    }
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Embedding store to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Write `<enroll> <test> <score>` lines here.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Write DET operating points as CSV here.
    #[arg(long)]
    det: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    p_target: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
}

#[derive(Debug, Args)]
struct DerArgs {
    #[arg(long, default_value_t = 0.25)]
    collar: f64,
    /// Score regions where the reference has overlapping speakers.
    #[arg(long)]
    score_overlap: bool,
}

impl DerArgs {
    fn config(&self) -> DerConfig {
        DerConfig {
            collar: self.collar,
            ignore_overlap: !self.score_overlap,
        }
    }
}

#[derive(Debug, Args)]
struct DiarizeArgs {
    /// Recording(s); the session name is the file stem.
    #[arg(long, required = true, num_args = 1..)]
    audio: Vec<PathBuf>,
    /// Reference RTTM providing oracle speech regions and the DER reference.
    #[arg(long)]
    rttm: PathBuf,
    /// Hypothesis RTTM to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "telephonic")]
    domain: String,
    #[arg(long, default_value_t = 8)]
    max_speakers: usize,
    /// Known number of speakers (skips count estimation).
    #[arg(long)]
    num_speakers: Option<usize>,
    #[command(flatten)]
    der: DerArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct ScoreDerArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[command(flatten)]
    der: DerArgs,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Class count assumed for the logits head.
    #[arg(long, default_value_t = REFERENCE_CLASSES)]
    classes: usize,
    #[command(flatten)]
    arch: ArchArgs,
}

/// Inserts arguments from `--config <file>` right after the subcommand so
/// explicit flags (which come later) take precedence.
fn expand_config(args: &[String]) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args.to_vec());
    };
    let extra = config_file_args(Path::new(&path))?;
    let at = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map_or(args.len(), |i| i + 1);
    let mut out = args[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a, out),
        Command::Train(a) => train_cmd(cli, a, out),
        Command::Embed(a) => embed(cli, a, out),
        Command::Verify(a) => verify(a, out),
        Command::Diarize(a) => diarize(cli, a, out),
        Command::ScoreDer(a) => score_der(a, out),
        Command::Params(a) => params(cli, a, out),
    }
}

fn emit(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => { emit($out, format_args!($($arg)*)) };
}

fn synth(cli: &Cli, a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = SyntheticCorpus {
        n_speakers: a.speakers,
        utterances_per_speaker: a.utterances,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        seed: cli.seed,
        first_utterance: 0,
    };
    let train_rows = corpus.write(&a.out.join("train"))?;
    write_manifest(&a.out.join("train.tsv"), &train_rows)?;
    say!(out, "wrote {} training utterances of {} speakers", train_rows.len(), a.speakers)?;

    if a.heldout > 0 {
        let held = SyntheticCorpus {
            utterances_per_speaker: a.heldout,
            first_utterance: a.utterances,
            ..corpus.clone()
        };
        let rows = held.write(&a.out.join("heldout"))?;
        write_manifest(&a.out.join("heldout.tsv"), &rows)?;
        let keyed = keyed_rows(&rows);
        let n_target = a.trials / 2;
        let trials = sample_trials(&keyed, n_target, a.trials - n_target, cli.seed)?;
        write_trials(&a.out.join("trials.txt"), &trials)?;
        say!(out, "wrote {} held-out utterances and {} trials", rows.len(), trials.len())?;
    }

    if a.sessions > 0 {
        let profiles = corpus.speakers();
        if profiles.len() < 2 {
            return Err(Error::Config("conversations need at least two speakers".into()));
        }
        let mut rttm = Vec::new();
        for s in 0..a.sessions {
            let i = (2 * s) % profiles.len();
            let j = (2 * s + 1 + s / profiles.len()) % profiles.len();
            let j = if j == i { (i + 1) % profiles.len() } else { j };
            let conv = synth_conversation(&[&profiles[i], &profiles[j]], a.session_duration, cli.seed.wrapping_add(s as u64))?;
            let name = format!("session{s:03}");
            write_wav(a.out.join("sessions").join(format!("{name}.wav")), &conv.signal)?;
            rttm.extend(segments_to_rttm(&name, &conv.reference));
        }
        write_rttm(&a.out.join("sessions.rttm"), &rttm)?;
        say!(out, "wrote {} two-speaker sessions", a.sessions)?;
    }
    Ok(())
}

/// `(utterance id, speaker index)` pairs with speakers indexed in sorted order.
fn keyed_rows(rows: &[ManifestEntry]) -> Vec<(String, usize)> {
    let names = speaker_names(rows);
    rows.iter()
        .map(|r| (utterance_id(&r.path), names.binary_search(&r.speaker).expect("name listed")))
        .collect()
}

fn speaker_names(rows: &[ManifestEntry]) -> Vec<String> {
    let mut names: Vec<String> = rows.iter().map(|r| r.speaker.clone()).collect();
    names.sort();
    names.dedup();
    names
}

fn train_cmd(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let rows = read_manifest(&a.manifest)?;
    if rows.is_empty() {
        return Err(Error::Config(format!("manifest {} is empty", a.manifest.display())));
    }
    let speakers = speaker_names(&rows);
    let frontend = MelFrontend::new(FrameConfig::default())?;
    let examples = rows
        .iter()
        .zip(keyed_rows(&rows))
        .map(|(row, (id, label))| {
            Ok(Example {
                id,
                label,
                features: utterance_features(&frontend, &load_wav(&row.path)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        initial_lr: a.lr,
        min_lr: a.min_lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        seed: cli.seed,
        val_fraction: a.val_fraction,
        max_frames: a.max_frames,
    };
    let aam = AAMConfig {
        margin: a.margin,
        scale: a.scale,
    };
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let (train_idx, val_idx) = split_validation(&labels, cfg.val_fraction, cfg.seed);
    let train_set = chunked_examples(&train_idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>(), cfg.seed);
    let val_set: Vec<Example> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let encoder = a.arch.apply(&cli.preset)?;
    let mut model = TitaNet::new(ModelConfig::new(encoder, speakers.len()), cli.seed)?;
    say!(
        out,
        "training {} parameters on {} examples ({} held out), {} speakers",
        model.num_parameters(),
        train_set.len(),
        val_set.len(),
        speakers.len()
    )?;
    let mut log_err = Ok(());
    let report = train(&mut model, &train_set, &val_set, &cfg, &aam, |m| {
        let val = m.val_acc.map_or("-".to_string(), |v| format!("{v:.4}"));
        if log_err.is_ok() {
            log_err = say!(
                out,
                "epoch {:>3}  lr {:.5}  loss {:.4}  train_acc {:.4}  val_acc {val}",
                m.epoch,
                m.lr,
                m.train_loss,
                m.train_acc
            );
        }
    })?;
    log_err?;
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.aam = Some(aam);
    ckpt.train = Some(cfg);
    ckpt.speakers = speakers;
    ckpt.metrics = vec![
        ("best_epoch".into(), report.best_epoch as f64),
        ("final_train_acc".into(), report.last().train_acc),
        ("final_train_loss".into(), report.last().train_loss),
    ];
    if let Some(v) = report.best().val_acc {
        ckpt.metrics.push(("best_val_acc".into(), v));
    }
    save_checkpoint(&ckpt, &a.out)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_bytes(&metrics, report.to_csv().as_bytes())?;
    say!(
        out,
        "saved epoch {} weights to {} (metrics in {})",
        report.best_epoch,
        a.out.display(),
        metrics.display()
    )
}

fn embed(cli: &Cli, a: &EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let model = a.model.load(&cli.preset, cli.seed)?;
    let frontend = MelFrontend::new(FrameConfig::default())?;
    let rows = read_manifest(&a.manifest)?;
    let mut entries = Vec::with_capacity(rows.len());
    for row in &rows {
        let mel = utterance_features(&frontend, &load_wav(&row.path)?)?;
        entries.push((utterance_id(&row.path), model.extract_embedding(&mel)?));
    }
    write_embeddings(&a.out, &entries)?;
    say!(out, "wrote {} embeddings to {}", entries.len(), a.out.display())
}

fn verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let store: HashMap<_, _> = read_embeddings(&a.embeddings)?.into_iter().collect();
    let trials = read_trials(&a.trials)?;
    let scored = score_trials(&trials, &store)?;
    let dcf = DcfConfig {
        p_target: a.p_target,
        c_fa: a.c_fa,
        c_miss: a.c_miss,
    };
    let summary = summarize(&scored, &dcf)?;
    if let Some(path) = &a.scores {
        write_bytes(path, crate::io::format_scores(&trials, &scored.scores).as_bytes())?;
    }
    if let Some(path) = &a.det {
        write_bytes(path, det_csv(&det_points(&scored)?).as_bytes())?;
    }
    say!(out, "trials {}", trials.len())?;
    say!(out, "EER {:.4}% (threshold {:.6})", 100.0 * summary.eer, summary.eer_threshold)?;
    say!(
        out,
        "MinDCF {:.4} (p_target {}, threshold {:.6})",
        summary.min_dcf,
        dcf.p_target,
        summary.min_dcf_threshold
    )
}

fn der_line(out: &mut dyn Write, name: &str, r: &DerResult) -> Result<()> {
    say!(
        out,
        "{name:<16} DER {:>6.2}%  missed {:>6.2}%  false_alarm {:>6.2}%  confusion {:>6.2}%  scored {:.2}s",
        100.0 * r.der,
        100.0 * r.missed / r.scored,
        100.0 * r.false_alarm / r.scored,
        100.0 * r.confusion / r.scored,
        r.scored
    )
}

fn to_segments(rows: &[RttmSegment]) -> Vec<Segment> {
    rows.iter().map(RttmSegment::to_segment).collect()
}

fn diarize(cli: &Cli, a: &DiarizeArgs, out: &mut dyn Write) -> Result<()> {
    let model = a.model.load(&cli.preset, cli.seed)?;
    let frontend = MelFrontend::new(FrameConfig::default())?;
    let reference = parse_rttm(&a.rttm)?;
    let cfg = DiarizeConfig {
        domain: a.domain.parse::<Domain>()?,
        max_speakers: a.max_speakers,
        known_k: a.num_speakers,
        seed: cli.seed,
    };
    let der_cfg = a.der.config();
    let mut hyp_rows = Vec::new();
    let mut results = Vec::new();
    for path in &a.audio {
        let session = utterance_id(path);
        let ref_rows = reference
            .get(&session)
            .ok_or_else(|| Error::Config(format!("reference RTTM has no session {session:?}")))?;
        let ref_segments = to_segments(ref_rows);
        let audio = load_wav(path)?;
        let output = diarize_session(&model, &frontend, &audio, &speech_regions(&ref_segments), &cfg)?;
        let der = compute_der(&ref_segments, &output.hypothesis.segments, &der_cfg)?;
        der_line(out, &session, &der)?;
        say!(out, "{:<16} speakers {}  windows {}", "", output.cluster.estimated_k, output.spans.len())?;
        hyp_rows.extend(segments_to_rttm(&session, &output.hypothesis.segments));
        results.push(der);
    }
    write_rttm(&a.out, &hyp_rows)?;
    if let Some(total) = DerResult::combine(&results) {
        der_line(out, "OVERALL", &total)?;
    }
    Ok(())
}

fn score_der(a: &ScoreDerArgs, out: &mut dyn Write) -> Result<()> {
    let reference = parse_rttm(&a.reference)?;
    let hypothesis = parse_rttm(&a.hyp)?;
    if reference.is_empty() {
        return Err(Error::Degenerate(format!("{} has no SPEAKER lines", a.reference.display())));
    }
    let cfg = a.der.config();
    let empty = Vec::new();
    let mut results = BTreeMap::new();
    for (session, rows) in &reference {
        let hyp = hypothesis.get(session).unwrap_or(&empty);
        let r = compute_der(&to_segments(rows), &to_segments(hyp), &cfg)?;
        der_line(out, session, &r)?;
        results.insert(session.clone(), r);
    }
    let all: Vec<DerResult> = results.into_values().collect();
    if let Some(total) = DerResult::combine(&all) {
        der_line(out, "OVERALL", &total)?;
    }
    Ok(())
}

fn params(cli: &Cli, a: &ParamsArgs, out: &mut dyn Write) -> Result<()> {
    let encoder = a.arch.apply(&cli.preset)?;
    let config = ModelConfig::new(encoder, a.classes);
    let breakdown = config.breakdown();
    say!(out, "preset {} ({})", cli.preset, config.encoder)?;
    say!(out, "{breakdown}")?;
    if let Some((_, reference)) = REFERENCE_PARAMS.iter().find(|(n, _)| *n == cli.preset) {
        let total = breakdown.total() as f64;
        say!(
            out,
            "reference {:.1}M; total {:.2}M ({:+.1}%), backbone {:.2}M ({:+.1}%)",
            reference / 1e6,
            total / 1e6,
            100.0 * (total - reference) / reference,
            breakdown.backbone() as f64 / 1e6,
            100.0 * (breakdown.backbone() as f64 - reference) / reference
        )?;
    }
    Ok(())
}
