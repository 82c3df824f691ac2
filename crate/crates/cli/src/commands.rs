use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use asdkit::align::{project_assoc, Match};
use asdkit::datamodel::{
    load_manifest, validate_bundle, validate_streams, write_face_sidecar, write_manifest, write_utterance_sidecar,
    Bundle, FrameScoreStream, ParseMode, ValidationReport, CLIPS_FILE, FACE_EMB_SIDECAR, LABELS_FILE, TRACKS_FILE,
    UTTERANCES_FILE, UTT_EMB_SIDECAR,
};
use asdkit::fusion::{fuse_all, parse_grid, sweep_alpha, FusionConfig};
use asdkit::fva::{load_params, save_params, score_bundle, train_head, HeadConfig, HeadParams, TrainConfig};
use asdkit::metrics::{evaluate, EvalReport};
use asdkit::report::{write_masking_csv, write_strata_csv, write_summary_csv, SummaryRow};
use asdkit::simgen::{generate_bundle, synth_sync_scores, SimConfig};
use asdkit::strata::{evaluate_strata, masking_experiment, stratify_by_quality, summarise, MaskingConfig};
use serde::Serialize;

use crate::args::*;

/// Validation findings were reported; maps to exit status 1.
#[derive(Debug)]
pub struct Findings(pub usize);

impl std::fmt::Display for Findings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} validation finding(s)", self.0)
    }
}

impl std::error::Error for Findings {}

pub const SYNC_FILE: &str = "sync.jsonl";

fn fail_on(report: ValidationReport) -> Result<()> {
    if report.is_empty() {
        return Ok(());
    }
    for f in &report.findings {
        eprintln!("{f}");
    }
    Err(Findings(report.findings.len()).into())
}

fn load_bundle(dir: &Path, mode: ParseMode) -> Result<Bundle> {
    let bundle = Bundle::load_dir(dir, mode).with_context(|| format!("loading bundle {}", dir.display()))?;
    fail_on(validate_bundle(&bundle))?;
    Ok(bundle)
}

fn load_streams(path: &Path, mode: ParseMode) -> Result<Vec<FrameScoreStream>> {
    load_manifest(path, mode).with_context(|| format!("loading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    create(path)?;
    write_manifest(path, records).with_context(|| format!("writing {}", path.display()))
}

fn csv_out(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> csv::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mode = if cli.lenient { ParseMode::Lenient } else { ParseMode::Strict };
    match cli.command {
        Command::Ingest(a) => ingest(a, mode),
        Command::Validate(a) => validate(a, mode),
        Command::Simulate(a) => simulate(a),
        Command::FvaTrain(a) => fva_train(a, mode),
        Command::FvaScore(a) => fva_score(a, mode),
        Command::Project(a) => project(a, mode),
        Command::Fuse(a) => fuse(a, mode),
        Command::Sweep(a) => sweep(a, mode),
        Command::Eval(a) => eval(a, mode),
        Command::Stratify(a) => stratify(a, mode),
        Command::MaskSweep(a) => mask_sweep(a, mode),
        Command::Report(a) => report(a),
    }
}

fn ingest(a: IngestArgs, mode: ParseMode) -> Result<()> {
    if same_dir(&a.input, &a.out) {
        bail!("--out must differ from --input");
    }
    let bundle = load_bundle(&a.input, mode)?;
    if a.sidecar {
        fs::create_dir_all(&a.out)?;
        write_jsonl(&a.out.join(CLIPS_FILE), &bundle.clips)?;
        write_jsonl(&a.out.join(TRACKS_FILE), &bundle.tracks)?;
        write_jsonl(&a.out.join(LABELS_FILE), &bundle.labels)?;
        write_jsonl(&a.out.join(UTTERANCES_FILE), &bundle.utterances)?;
        write_utterance_sidecar(&a.out.join(UTT_EMB_SIDECAR), &bundle.utt_embeddings)?;
        write_face_sidecar(&a.out.join(FACE_EMB_SIDECAR), &bundle.face_embeddings)?;
    } else {
        bundle.write_dir(&a.out)?;
    }
    eprintln!(
        "ingested {} clips, {} tracks, {} utterances",
        bundle.clips.len(),
        bundle.tracks.len(),
        bundle.utterances.len()
    );
    Ok(())
}

fn validate(a: ValidateArgs, mode: ParseMode) -> Result<()> {
    let bundle = Bundle::load_dir(&a.bundle, mode).with_context(|| format!("loading bundle {}", a.bundle.display()))?;
    let mut report = validate_bundle(&bundle);
    for path in &a.scores {
        let streams = load_streams(path, mode)?;
        report.findings.extend(validate_streams(&bundle, &streams).findings);
    }
    fail_on(report)?;
    eprintln!("valid: {} clips, {} tracks", bundle.clips.len(), bundle.tracks.len());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.sim_config {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(w) = a.world_seed {
        cfg.world_seed = w;
    }
    if let Some(n) = a.n_clips {
        cfg.n_clips = n;
    }
    if let Some(d) = a.duration_s {
        cfg.duration_s = d;
    }
    cfg.validate()?;
    let bundle = generate_bundle(&cfg)?;
    let sync = synth_sync_scores(&cfg, &bundle)?;
    bundle.write_dir(&a.out)?;
    write_jsonl(&a.out.join(SYNC_FILE), &sync)?;
    let mut w = create(&a.out.join("sim.toml"))?;
    w.write_all(toml::to_string(&cfg)?.as_bytes())?;
    w.flush()?;
    eprintln!("simulated {} clips, {} tracks into {}", bundle.clips.len(), bundle.tracks.len(), a.out.display());
    Ok(())
}

fn fva_train(a: TrainArgs, mode: ParseMode) -> Result<()> {
    let bundle = load_bundle(&a.bundle, mode)?;
    let init = match &a.init {
        Some(p) => load_params(p)?,
        None => {
            let d_speaker = bundle.utt_embeddings.first().map(|e| e.vector.len());
            let d_face = bundle.face_embeddings.first().map(|f| f.dim());
            let (Some(d_speaker), Some(d_face)) = (d_speaker, d_face) else {
                bail!("bundle has no embeddings to train on");
            };
            let cfg = HeadConfig {
                d_model: a.d_model,
                heads: a.heads,
                ff_mult: a.ff_mult,
                max_frames: a.max_frames,
                ..HeadConfig::new(d_speaker, d_face)
            };
            HeadParams::init(cfg, a.seed)?
        }
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        decay_factor: a.decay_factor,
        decay_every: a.decay_every,
        freeze_projections: a.freeze_projections,
        train_feed_forward: !a.freeze_feed_forward,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (params, trace) = train_head(&init, &bundle, &tc)?;
    create(&a.out)?;
    save_params(&a.out, &params)?;
    if let Some(p) = &a.trace {
        write_json(p, &trace)?;
    }
    if let Some(last) = trace.last() {
        eprintln!("epoch {}: loss {:.4}, accuracy {:.3}", last.epoch, last.loss, last.accuracy);
    }
    Ok(())
}

fn fva_score(a: ScoreArgs, mode: ParseMode) -> Result<()> {
    let bundle = load_bundle(&a.bundle, mode)?;
    let params = load_params(&a.params)?;
    let matches = score_bundle(&params, &bundle)?;
    write_jsonl(&a.out, &matches)
}

fn project(a: ProjectArgs, mode: ParseMode) -> Result<()> {
    let bundle = load_bundle(&a.bundle, mode)?;
    let matches: Vec<Match> = load_manifest(&a.matches, mode).with_context(|| format!("loading {}", a.matches.display()))?;
    let assoc = project_assoc(&matches, &bundle.utterances, &bundle.tracks, |c| {
        bundle.clip(c).map(|m| m.video_fps)
    })?;
    write_jsonl(&a.out, &assoc)
}

fn fuse(a: FuseArgs, mode: ParseMode) -> Result<()> {
    let sync = load_streams(&a.sync, mode)?;
    let assoc = load_streams(&a.assoc, mode)?;
    let fused = fuse_all(&sync, &assoc, FusionConfig::new(a.alpha)?)?;
    write_jsonl(&a.out, &fused)
}

fn sweep(a: SweepArgs, mode: ParseMode) -> Result<()> {
    let bundle = load_bundle(&a.bundle, mode)?;
    let sync = load_streams(&a.sync, mode)?;
    let assoc = load_streams(&a.assoc, mode)?;
    let mut report = validate_streams(&bundle, &sync);
    report.findings.extend(validate_streams(&bundle, &assoc).findings);
    fail_on(report)?;
    let grid = parse_grid(&a.grid)?;
    let result = sweep_alpha(&bundle.labels, &sync, &assoc, &grid, a.metric)?;
    write_json(&a.out, &result)?;
    eprintln!("best alpha {:.2}: {} {:.4}", result.best_alpha, a.metric, result.best_score);
    Ok(())
}

fn eval(a: EvalArgs, mode: ParseMode) -> Result<()> {
    let bundle = load_bundle(&a.bundle, mode)?;
    let streams = load_streams(&a.scores, mode)?;
    fail_on(validate_streams(&bundle, &streams))?;
    let mut report = evaluate(&streams, &bundle.labels, a.metric)?;
    report.model = a.model;
    report.ensemble = a.ensemble || a.alpha.is_some();
    report.alpha = a.alpha;
    write_json(&a.out, &report)?;
    eprintln!("{} {:.4}", a.metric, report.value());
    Ok(())
}

fn stratify(a: StratifyArgs, mode: ParseMode) -> Result<()> {
    let bundle = load_bundle(&a.bundle, mode)?;
    let sync = load_streams(&a.sync, mode)?;
    let assoc = load_streams(&a.assoc, mode)?;
    let ensemble = a
        .alpha
        .map(|alpha| fuse_all(&sync, &assoc, FusionConfig::new(alpha)?))
        .transpose()?;
    let mut methods: Vec<(&str, &[FrameScoreStream])> = vec![("sync", &sync), ("fva", &assoc)];
    if let Some(e) = &ensemble {
        methods.push(("ensemble", e));
    }
    let mut strata = stratify_by_quality(&bundle.tracks, a.bins)?;
    evaluate_strata(&mut strata, &bundle.labels, &methods, a.metric)?;
    csv_out(&a.out, |w| write_strata_csv(w, &strata))?;
    if let Some(p) = &a.json {
        write_json(p, &strata)?;
    }
    Ok(())
}

fn mask_sweep(a: MaskArgs, mode: ParseMode) -> Result<()> {
    let bundle = load_bundle(&a.bundle, mode)?;
    let sync = load_streams(&a.sync, mode)?;
    fail_on(validate_streams(&bundle, &sync))?;
    let matches: Vec<Match> = load_manifest(&a.matches, mode).with_context(|| format!("loading {}", a.matches.display()))?;
    let cfg = MaskingConfig {
        degrade_mode: a.degrade_mode,
        degrade_strength: a.degrade_strength,
        metric: a.metric,
        ..MaskingConfig::new(parse_grid(&a.grid)?, a.trials, a.seed, a.alpha)
    };
    let trials = masking_experiment(&bundle, &sync, &matches, &cfg)?;
    csv_out(&a.out, |w| write_masking_csv(w, &summarise(&trials)))?;
    if let Some(p) = &a.trials_out {
        write_json(p, &trials)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let rows = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(SummaryRow::from_report(&stem, &r))
        })
        .collect::<Result<Vec<_>>>()?;
    csv_out(&a.out, |w| write_summary_csv(w, &rows))
}
