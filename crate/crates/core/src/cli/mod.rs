//! `fastmel` command-line interface. Commands return a human-readable summary;
//! the binary prints it and maps errors to exit codes via [`Error::exit_code`].

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

pub use config::{RunConfig, SEED_ENV};

use crate::bench::{check_fairness, run_bench, speedups, to_csv, toy_config};
use crate::duration::AlignmentReport;
use crate::error::{Error, Result};
use crate::io::{
    load_checkpoint, load_manifest, load_vocab, save_checkpoint, write_atomic, write_durations, write_json,
    write_manifest, write_tensor, Checkpoint, LoadedEntry, Manifest, ManifestEntry,
};
use crate::length_regulator::SpeedFactor;
use crate::model::{FastSpeech, PhonemeSequence, TeacherLite};
use crate::training::distill::check_alignment;
use crate::training::fit::{evaluate_student, evaluate_teacher};
use crate::training::{
    distill_dataset, train_student, train_teacher, AdamState, StepMetrics, TeacherSample, ToyCorpus, TrainReport,
    TrainingSample,
};

#[derive(Debug, Parser)]
#[command(name = "fastmel", version, about = "Parallel phoneme-to-mel synthesis: training, distillation and benchmarking")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    /// Use the full-size model hyperparameters instead of the desk preset.
    #[arg(long, global = true)]
    pub paper_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic toy corpus (mels, gold durations, manifest, vocabulary).
    GenCorpus {
        /// Leave duration paths out of the manifest.
        #[arg(long)]
        no_durations: bool,
    },
    /// Train the autoregressive teacher on a manifest of phoneme/mel pairs.
    TrainTeacher {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Extract per-phoneme durations from the teacher's attention.
    ExtractDurations {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Build the student's training set from teacher outputs.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the parallel model on a manifest that has durations.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from this student checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize a mel-spectrogram for one phoneme sequence.
    Synthesize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Whitespace-separated phoneme ids, or tokens when --vocab is given.
        #[arg(long)]
        phonemes: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        alpha: f64,
        /// Lengthen phoneme K by B frames (after speed scaling); repeatable.
        #[arg(long = "break-at", value_name = "K:B", value_parser = parse_break)]
        break_at: Vec<(usize, usize)>,
    },
    /// Time one parallel pass against m autoregressive steps.
    Bench {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256, 512])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Run even when the two models differ in width or depth.
        #[arg(long)]
        allow_mismatch: bool,
    },
}

fn parse_break(s: &str) -> std::result::Result<(usize, usize), String> {
    let (k, b) = s.split_once(':').ok_or_else(|| format!("expected K:B, got {s:?}"))?;
    let k = k.trim().parse().map_err(|_| format!("bad phoneme index in {s:?}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad frame count in {s:?}"))?;
    Ok((k, b))
}

/// Runs a parsed command. `seed_env` is the value of `FASTMEL_SEED`, if set.
pub fn execute(cli: &Cli, seed_env: Option<&str>) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.paper_config {
        cfg.use_paper_preset();
        cfg.validate()?;
    }
    cfg.apply_seed_override(seed_env)?;
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::GenCorpus { no_durations } => gen_corpus(&cfg, out, !no_durations),
        Command::TrainTeacher { manifest, steps } => cmd_train_teacher(&cfg, out, manifest.as_deref(), *steps),
        Command::ExtractDurations { teacher, manifest } => {
            cmd_extract_durations(&cfg, out, teacher.as_deref(), manifest.as_deref())
        }
        Command::Distill { teacher, manifest } => cmd_distill(&cfg, out, teacher.as_deref(), manifest.as_deref()),
        Command::Train { manifest, steps, resume } => {
            cmd_train(&cfg, out, manifest.as_deref(), *steps, resume.as_deref())
        }
        Command::Synthesize { checkpoint, phonemes, vocab, alpha, break_at } => {
            cmd_synthesize(&cfg, out, checkpoint.as_deref(), phonemes, vocab.as_deref(), *alpha, break_at)
        }
        Command::Bench { student, teacher, lengths, reps, allow_mismatch } => {
            cmd_bench(&cfg, out, student.as_deref(), teacher.as_deref(), lengths, *reps, *allow_mismatch)
        }
    }
}

fn required<'p>(flag: Option<&'p Path>, config: &'p Option<PathBuf>, what: &str, hint: &str) -> Result<&'p Path> {
    flag.or(config.as_deref())
        .ok_or_else(|| Error::Usage(format!("no {what} given; {hint}")))
}

fn manifest_path<'p>(flag: Option<&'p Path>, cfg: &'p RunConfig) -> Result<&'p Path> {
    required(flag, &cfg.manifest, "manifest", "pass --manifest or set \"manifest\" in the config")
}

fn open_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::Usage(format!("manifest {} does not exist", path.display())));
    }
    load_manifest(path)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in metrics {
        w.serialize(m).map_err(|e| Error::Integrity(format!("csv: {e}")))?;
    }
    if metrics.is_empty() {
        w.write_record(["step", "lr", "total", "mel", "duration"])
            .map_err(|e| Error::Integrity(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Integrity(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

fn divergence(report: &TrainReport, saved: &Path) -> Result<()> {
    match &report.diverged {
        Some(msg) => Err(Error::Numeric(format!("training diverged ({msg}); last good weights saved to {}", saved.display()))),
        None => Ok(()),
    }
}

fn gen_corpus(cfg: &RunConfig, out: &Path, with_durations: bool) -> Result<String> {
    let corpus = ToyCorpus::generate(&cfg.corpus_config())?;
    let mut manifest = Manifest::new(out);
    for (i, s) in corpus.samples.iter().enumerate() {
        let id = format!("utt{i:04}");
        let mel_path = PathBuf::from(format!("mels/{id}.fstn"));
        write_tensor(&out.join(&mel_path), s.target_mel.frames(), cfg.dtype.into())?;
        let duration_path = if with_durations {
            let p = PathBuf::from(format!("durations/{id}.json"));
            write_durations(&out.join(&p), &s.target_durations)?;
            Some(p)
        } else {
            None
        };
        manifest.entries.push(ManifestEntry {
            id,
            phoneme_ids: s.phonemes.tokens().to_vec(),
            mel_path,
            duration_path,
            attention_dir: None,
        });
    }
    write_manifest(&out.join("manifest.jsonl"), &manifest)?;
    let vocab: String = (0..cfg.model_config().vocab_size).map(|i| format!("P{i}\n")).collect();
    write_atomic(&out.join("vocab.txt"), vocab.as_bytes())?;
    Ok(format!("wrote {} utterances to {}", corpus.samples.len(), out.join("manifest.jsonl").display()))
}

fn teacher_samples(entries: &[LoadedEntry]) -> Vec<TeacherSample> {
    entries.iter().map(|e| TeacherSample { phonemes: e.phonemes.clone(), mel: e.mel.clone() }).collect()
}

fn cmd_train_teacher(cfg: &RunConfig, out: &Path, manifest: Option<&Path>, steps: Option<u64>) -> Result<String> {
    let manifest = open_manifest(manifest_path(manifest, cfg)?)?;
    let data = teacher_samples(&manifest.load_entries()?);
    let mut teacher = TeacherLite::new(cfg.teacher_config(), cfg.seed)?;
    let mut state = AdamState::for_params(teacher.weights());
    let opt = cfg.teacher_optimizer_config();
    let report = train_teacher(&mut teacher, &mut state, &data, &opt, &cfg.train_options(&cfg.teacher_train, steps))?;
    let ckpt = out.join("teacher.ckpt");
    save_checkpoint(&ckpt, &Checkpoint::teacher(&teacher, &opt, &state, cfg.seed), cfg.dtype.into())?;
    write_metrics(&out.join("teacher_loss.csv"), &report.metrics)?;
    divergence(&report, &ckpt)?;
    let mse = evaluate_teacher(&teacher, &data)?;
    Ok(format!("teacher trained for {} steps; teacher-forced mel MSE {mse:.6}; saved {}", report.metrics.len(), ckpt.display()))
}

fn load_teacher(path: &Path) -> Result<TeacherLite> {
    Ok(load_checkpoint(path)?.into_teacher()?.0)
}

fn load_student(path: &Path) -> Result<(FastSpeech, AdamState, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let (m, st) = ckpt.clone().into_student()?;
    Ok((m, st, ckpt))
}

fn teacher_path<'p>(flag: Option<&'p Path>, cfg: &'p RunConfig) -> Result<&'p Path> {
    required(flag, &cfg.teacher_checkpoint, "teacher checkpoint", "pass --teacher or set \"teacher_checkpoint\"")
}

#[derive(Serialize)]
struct AlignmentEntry<'a> {
    id: &'a str,
    #[serde(flatten)]
    report: &'a AlignmentReport,
}

#[derive(Serialize)]
struct SkippedEntry<'a> {
    id: &'a str,
    best_focus: f64,
}

#[derive(Serialize)]
struct AlignmentFile<'a> {
    heads_per_pass: usize,
    samples: Vec<AlignmentEntry<'a>>,
    skipped: Vec<SkippedEntry<'a>>,
}

fn cmd_extract_durations(cfg: &RunConfig, out: &Path, teacher: Option<&Path>, manifest: Option<&Path>) -> Result<String> {
    let teacher = load_teacher(teacher_path(teacher, cfg)?)?;
    let manifest = open_manifest(manifest_path(manifest, cfg)?)?;
    let entries = manifest.load_entries()?;
    let data = teacher_samples(&entries);
    let mut written = Manifest::new(out);
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for (i, (entry, sample)) in entries.iter().zip(&data).enumerate() {
        let heads = teacher.teacher_forced_attention(&sample.phonemes, &sample.mel)?;
        match check_alignment(i, &heads)? {
            Ok(report) => {
                let duration_path = PathBuf::from(format!("durations/{}.json", entry.id));
                write_durations(&out.join(&duration_path), &report.durations)?;
                let attention_dir = PathBuf::from(format!("attention/{}", entry.id));
                for (h, a) in heads.iter().enumerate() {
                    write_tensor(&out.join(&attention_dir).join(format!("head_{h}.fstn")), a.weights(), cfg.dtype.into())?;
                }
                let src = &manifest.entries[i];
                written.entries.push(ManifestEntry {
                    id: entry.id.clone(),
                    phoneme_ids: src.phoneme_ids.clone(),
                    mel_path: absolute(&manifest.resolve(&src.mel_path))?,
                    duration_path: Some(duration_path),
                    attention_dir: Some(attention_dir),
                });
                reports.push((i, report));
            }
            Err(skip) => skipped.push(skip),
        }
    }
    let file = AlignmentFile {
        heads_per_pass: teacher.heads_per_pass(),
        samples: reports.iter().map(|(i, r)| AlignmentEntry { id: &entries[*i].id, report: r }).collect(),
        skipped: skipped.iter().map(|s| SkippedEntry { id: &entries[s.index].id, best_focus: s.best_focus }).collect(),
    };
    write_json(&out.join("alignments.json"), &file)?;
    write_manifest(&out.join("manifest.jsonl"), &written)?;
    Ok(format!(
        "extracted durations for {} utterances, skipped {} with degenerate alignments",
        reports.len(),
        skipped.len()
    ))
}

fn cmd_distill(cfg: &RunConfig, out: &Path, teacher: Option<&Path>, manifest: Option<&Path>) -> Result<String> {
    let teacher = load_teacher(teacher_path(teacher, cfg)?)?;
    let manifest = open_manifest(manifest_path(manifest, cfg)?)?;
    let entries = manifest.load_entries()?;
    let distilled = distill_dataset(&teacher, &teacher_samples(&entries))?;
    let mut written = Manifest::new(out);
    for ((i, _), s) in distilled.reports.iter().zip(&distilled.samples) {
        let id = &entries[*i].id;
        let mel_path = PathBuf::from(format!("mels/{id}.fstn"));
        let duration_path = PathBuf::from(format!("durations/{id}.json"));
        write_tensor(&out.join(&mel_path), s.target_mel.frames(), cfg.dtype.into())?;
        write_durations(&out.join(&duration_path), &s.target_durations)?;
        written.entries.push(ManifestEntry {
            id: id.clone(),
            phoneme_ids: s.phonemes.tokens().to_vec(),
            mel_path,
            duration_path: Some(duration_path),
            attention_dir: None,
        });
    }
    let file = AlignmentFile {
        heads_per_pass: teacher.heads_per_pass(),
        samples: distilled.reports.iter().map(|(i, r)| AlignmentEntry { id: &entries[*i].id, report: r }).collect(),
        skipped: distilled
            .skipped
            .iter()
            .map(|s| SkippedEntry { id: &entries[s.index].id, best_focus: s.best_focus })
            .collect(),
    };
    write_json(&out.join("alignments.json"), &file)?;
    write_manifest(&out.join("manifest.jsonl"), &written)?;
    Ok(format!(
        "distilled {} utterances, skipped {} with degenerate alignments",
        distilled.samples.len(),
        distilled.skipped.len()
    ))
}

fn training_samples(manifest: &Manifest) -> Result<Vec<TrainingSample>> {
    if let Some(e) = manifest.entries.iter().find(|e| e.duration_path.is_none()) {
        return Err(Error::Usage(format!(
            "manifest entry {} has no durations; run `fastmel extract-durations` (or `distill`) first \
             and train on the manifest it writes",
            e.id
        )));
    }
    manifest
        .load_entries()?
        .into_iter()
        .map(|e| TrainingSample::new(e.phonemes, e.mel, e.durations.expect("checked above")))
        .collect()
}

fn cmd_train(cfg: &RunConfig, out: &Path, manifest: Option<&Path>, steps: Option<u64>, resume: Option<&Path>) -> Result<String> {
    let manifest = open_manifest(manifest_path(manifest, cfg)?)?;
    let data = training_samples(&manifest)?;
    let (mut model, mut state, opt, seed) = match resume {
        Some(p) => {
            let (m, st, ckpt) = load_student(p)?;
            (m, st, ckpt.header.optimizer_config, ckpt.header.seed)
        }
        None => {
            let m = FastSpeech::new(cfg.model_config(), cfg.seed)?;
            let st = AdamState::for_params(m.weights());
            (m, st, cfg.optimizer_config(), cfg.seed)
        }
    };
    let options = crate::training::TrainOptions { seed, ..cfg.train_options(&cfg.train, steps) };
    let report = train_student(&mut model, &mut state, &data, &opt, &options)?;
    let ckpt = out.join("student.ckpt");
    save_checkpoint(&ckpt, &Checkpoint::student(&model, &opt, &state, seed), cfg.dtype.into())?;
    write_metrics(&out.join("train_loss.csv"), &report.metrics)?;
    divergence(&report, &ckpt)?;
    let (mel, dur) = evaluate_student(&model, &data)?;
    Ok(format!(
        "student at step {}; mel MSE {mel:.6}, duration log-MSE {dur:.6}; saved {}",
        state.step,
        ckpt.display()
    ))
}

fn read_phonemes(path: &Path, vocab: Option<&Path>) -> Result<PhonemeSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids = match vocab {
        Some(v) => load_vocab(v)?.encode(&text)?,
        None => text
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Input(format!("phoneme {t:?} is not an integer id"))))
            .collect::<Result<Vec<usize>>>()?,
    };
    PhonemeSequence::new(ids)
}

fn cmd_synthesize(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    phonemes: &Path,
    vocab: Option<&Path>,
    alpha: f64,
    breaks: &[(usize, usize)],
) -> Result<String> {
    let alpha = SpeedFactor::new(alpha).map_err(|_| Error::Usage(format!("--alpha must be positive and finite, got {alpha}")))?;
    if let Some((k, _)) = breaks.iter().find(|(_, b)| *b == 0).copied() {
        return Err(Error::Usage(format!("--break-at {k}:0 adds no frames")));
    }
    let ckpt = required(checkpoint, &cfg.student_checkpoint, "student checkpoint", "pass --checkpoint or set \"student_checkpoint\"")?;
    let p = read_phonemes(phonemes, vocab)?;
    let (model, _, _) = load_student(ckpt)?;
    let s = model.synthesize_with_breaks(&p, alpha, breaks)?;
    write_tensor(&out.join("mel.fstn"), s.mel.frames(), cfg.dtype.into())?;
    write_durations(&out.join("durations.json"), &s.durations)?;
    Ok(format!("synthesized {} frames for {} phonemes", s.mel.len(), p.len()))
}

fn cmd_bench(
    cfg: &RunConfig,
    out: &Path,
    student: Option<&Path>,
    teacher: Option<&Path>,
    lengths: &[usize],
    reps: usize,
    allow_mismatch: bool,
) -> Result<String> {
    let student = match student.or(cfg.student_checkpoint.as_deref()) {
        Some(p) => load_student(p)?.0,
        None => FastSpeech::new(toy_config(), cfg.seed)?,
    };
    let teacher = match teacher.or(cfg.teacher_checkpoint.as_deref()) {
        Some(p) => load_teacher(p)?,
        None => TeacherLite::new(toy_config(), cfg.seed.wrapping_add(1))?,
    };
    if let Err(Error::Config(msg)) = check_fairness(student.config(), teacher.config()) {
        if !allow_mismatch {
            return Err(Error::config(format!("{msg}; pass --allow-mismatch to run anyway")));
        }
        log::warn!("{msg}");
    }
    let vocab = student.config().vocab_size.min(teacher.config().vocab_size);
    let p = PhonemeSequence::new((0..16).map(|i| i % vocab).collect())?;
    let records = run_bench(&student, &teacher, &p, lengths, reps)?;
    write_atomic(&out.join("bench.csv"), to_csv(&records)?.as_bytes())?;
    let summary = speedups(&records);
    write_json(&out.join("bench_summary.json"), &summary)?;
    let mut text = String::from("m\tparallel_s\tautoregressive_s\tspeedup\n");
    for s in &summary {
        text.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.2}\n", s.m, s.parallel, s.autoregressive, s.speedup));
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("fastmel").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn parses_breaks_and_lengths() {
        let c = cli(&["synthesize", "--phonemes", "p.txt", "--alpha", "1.5", "--break-at", "3:20", "--break-at", "5:2"]);
        match c.command {
            Command::Synthesize { alpha, break_at, .. } => {
                assert_eq!(alpha, 1.5);
                assert_eq!(break_at, vec![(3, 20), (5, 2)]);
            }
            _ => panic!("wrong command"),
        }
        let c = cli(&["bench", "--lengths", "8,16", "--reps", "6"]);
        assert!(matches!(c.command, Command::Bench { ref lengths, reps: 6, .. } if lengths == &[8, 16]));
        assert!(Cli::try_parse_from(["fastmel", "synthesize", "--phonemes", "p", "--break-at", "3"]).is_err());
    }

    #[test]
    fn missing_manifest_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = cli(&["train-teacher", "--out-dir", dir.path().to_str().unwrap()]);
        let err = execute(&c, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert_eq!(err.exit_code(), 2);
        let c = cli(&["train-teacher", "--manifest", "/nonexistent/m.jsonl"]);
        assert_eq!(execute(&c, None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn non_positive_alpha_is_usage_error() {
        let c = cli(&["synthesize", "--phonemes", "p.txt", "--alpha", "-1", "--checkpoint", "x"]);
        assert!(matches!(execute(&c, None), Err(Error::Usage(_))));
        let c = cli(&["synthesize", "--phonemes", "p.txt", "--alpha", "0", "--checkpoint", "x"]);
        assert_eq!(execute(&c, None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn bad_seed_env_is_config_error() {
        let c = cli(&["gen-corpus", "--out-dir", "/nonexistent"]);
        assert_eq!(execute(&c, Some("abc")).unwrap_err().exit_code(), 2);
    }
}
