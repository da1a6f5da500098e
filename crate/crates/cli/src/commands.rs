use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use accent_core::accent_expand::{
    expand, load_transcript_file, load_transcripts, AssignmentPolicy, EngineGroup, EngineRegistry, ExpandOptions,
    MockBackend, RemoteBackend, SynthesisBackend, Transcript, ENDPOINT_ENV,
};
use accent_core::eval::{join_scores, per_language_report, read_scores, relative_change, write_scores, EvalReport, RelativeChangeEntry};
use accent_core::manifest::{load_manifest, merge, save_manifest, GroupKey};
use accent_core::testset_builders::{build_tts_cl, build_vc_cl3, MockVoiceConversion, TtsClOptions};
use accent_core::{Label, Manifest};
use accent_nn::trainer::{EerValidator, ManifestSource};
use accent_nn::{build_model, score_manifest, train, Checkpoint};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::provenance::Provenance;
use crate::tables::{reproduce_tables, ReferenceTables, REFERENCE_TABLES};
use crate::{BackendKind, BuildTtsArgs, BuildVcArgs, Cli, Command, EvalArgs, ExpandArgs, ManifestCommand, ReportArgs, ScoreArgs, TableFormat, TrainArgs};

struct Context {
    cfg: RunConfig,
    deterministic: bool,
    provenance: Provenance,
}

impl Context {
    fn workers(&self, requested: usize) -> usize {
        if self.deterministic {
            1
        } else {
            requested.max(1)
        }
    }

    fn finish(mut self, outputs: &[&Path]) -> Result<(), CliError> {
        self.provenance.outputs = outputs.iter().map(|p| p.to_path_buf()).collect();
        eprintln!("{}", self.provenance.to_line());
        for out in outputs {
            self.provenance.write_beside(out)?;
        }
        Ok(())
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Expand(_) => "expand",
        Command::Manifest(ManifestCommand::Summarize { .. }) => "manifest summarize",
        Command::Manifest(ManifestCommand::Split { .. }) => "manifest split",
        Command::Manifest(ManifestCommand::Downsample { .. }) => "manifest downsample",
        Command::Manifest(ManifestCommand::Merge { .. }) => "manifest merge",
        Command::Train(_) => "train",
        Command::Score(_) => "score",
        Command::Eval(_) => "eval",
        Command::Report(_) => "report",
        Command::BuildVcCl3(_) => "build-vc-cl3",
        Command::BuildTtsCl(_) => "build-tts-cl",
    }
}

pub fn dispatch(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    if cli.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(cli.seed)?;
    let provenance = Provenance::new(
        command_name(&cli.command),
        argv,
        cfg.config_hash(),
        cfg.seed(),
        cli.deterministic,
    );
    let ctx = Context {
        cfg,
        deterministic: cli.deterministic,
        provenance,
    };
    match cli.command {
        Command::Expand(a) => run_expand(ctx, a),
        Command::Manifest(m) => run_manifest(ctx, m),
        Command::Train(a) => run_train(ctx, a),
        Command::Score(a) => run_score(ctx, a),
        Command::Eval(a) => run_eval(ctx, a),
        Command::Report(a) => run_report(ctx, a),
        Command::BuildVcCl3(a) => run_build_vc(ctx, a),
        Command::BuildTtsCl(a) => run_build_tts(ctx, a),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime("io", format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn require<'a>(flag: Option<&'a PathBuf>, fallback: Option<&'a PathBuf>, name: &str) -> Result<&'a PathBuf, CliError> {
    flag.or(fallback)
        .ok_or_else(|| CliError::validation("missing_path", format!("--{name} not given and not set in [paths]")))
}

fn backend(kind: BackendKind) -> Result<Box<dyn SynthesisBackend>, CliError> {
    Ok(match kind {
        BackendKind::Mock => Box::new(MockBackend::new()),
        BackendKind::Remote => Box::new(RemoteBackend::from_env().ok_or_else(|| {
            CliError::validation("backend_config", format!("remote backend needs {ENDPOINT_ENV}"))
        })?),
    })
}

fn run_expand(ctx: Context, a: ExpandArgs) -> Result<(), CliError> {
    let group: EngineGroup = a.group.parse().map_err(|e: String| CliError::validation("invalid_group", e))?;
    let policy: AssignmentPolicy = a.policy.parse().map_err(|e: String| CliError::validation("invalid_policy", e))?;
    let engines = require(a.engines.as_ref(), ctx.cfg.paths.engines.as_ref(), "engines")?;
    let registry = EngineRegistry::load(engines)?;
    let tpath = require(a.transcripts.as_ref(), ctx.cfg.paths.transcripts.as_ref(), "transcripts")?;
    let transcripts = if tpath.is_dir() {
        load_transcripts(tpath)?
    } else {
        load_transcript_file(tpath)?
    };
    if transcripts.is_empty() {
        return Err(CliError::validation("no_transcripts", format!("{} holds no transcripts", tpath.display())));
    }
    let options = ExpandOptions {
        group,
        policy,
        seed: ctx.cfg.seed(),
        workers: ctx.workers(a.workers),
    };
    let backend = backend(a.backend)?;
    create_dir(&a.out)?;
    let report = expand(&transcripts, &registry, &options, backend.as_ref(), &a.out)?;
    let manifest_path = a.out.join("manifest.jsonl");
    save_manifest(&report.manifest, &manifest_path)?;
    tracing::info!(records = report.manifest.len(), failures = report.failures.len(), "expand finished");
    ctx.finish(&[&a.out])
}

fn parse_ratio(s: &str) -> Result<(u32, u32), CliError> {
    let bad = || CliError::validation("invalid_ratio", format!("ratio `{s}` is not of the form A:B"));
    let (t, v) = s.split_once(':').ok_or_else(bad)?;
    Ok((t.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
}

fn run_manifest(ctx: Context, cmd: ManifestCommand) -> Result<(), CliError> {
    let seed = ctx.cfg.seed();
    match cmd {
        ManifestCommand::Summarize { input, by, format } => {
            let m = load_manifest(&input)?;
            let keys = GroupKey::parse_list(&by)?;
            let delim = match format {
                TableFormat::Tsv => '\t',
                TableFormat::Csv => ',',
            };
            print!("{}", m.summarize(&keys).to_table(delim));
            ctx.finish(&[])
        }
        ManifestCommand::Split {
            input,
            ratio,
            out_train,
            out_valid,
        } => {
            let (rt, rv) = parse_ratio(&ratio)?;
            let m = load_manifest(&input)?;
            let (tr, va) = m.split(rt, rv, seed)?;
            create_parent(&out_train)?;
            create_parent(&out_valid)?;
            save_manifest(&tr, &out_train)?;
            save_manifest(&va, &out_valid)?;
            println!("train\t{}\nvalid\t{}", tr.len(), va.len());
            ctx.finish(&[&out_train, &out_valid])
        }
        ManifestCommand::Downsample { input, target, out } => {
            let m = load_manifest(&input)?;
            let d = m.downsample(target, seed)?;
            create_parent(&out)?;
            save_manifest(&d, &out)?;
            println!("records\t{}", d.len());
            ctx.finish(&[&out])
        }
        ManifestCommand::Merge { inputs, name, out } => {
            let ms = inputs.iter().map(load_manifest).collect::<Result<Vec<Manifest>, _>>()?;
            let merged = merge(&ms, name)?;
            create_parent(&out)?;
            save_manifest(&merged, &out)?;
            println!("records\t{}", merged.len());
            ctx.finish(&[&out])
        }
    }
}

fn check_two_classes(m: &Manifest, which: &str) -> Result<(), CliError> {
    let bona = m.count(Label::BonaFide);
    if bona == 0 || bona == m.len() {
        return Err(CliError::validation(
            "class_balance",
            format!(
                "{which} manifest `{}` has {bona} bona fide and {} spoof records; both classes are required",
                m.name,
                m.len() - bona
            ),
        ));
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, body).map_err(io_err(path))
}

fn run_train(ctx: Context, a: TrainArgs) -> Result<(), CliError> {
    let train_m = load_manifest(&a.train)?;
    let valid_m = load_manifest(&a.valid)?;
    check_two_classes(&train_m, "training")?;
    check_two_classes(&valid_m, "validation")?;
    let cfg = &ctx.cfg;
    let seed = cfg.seed();
    let mut model = build_model(&cfg.model, seed)?;
    let source = ManifestSource::new(train_m, &cfg.frontend, &cfg.augment, seed, true);
    let valid = ManifestSource::evaluation(valid_m, &cfg.frontend);
    let mut validator = EerValidator {
        source: &valid,
        batch_size: cfg.eval.batch_size,
    };
    tracing::info!(params = model.param_count(), variant = ?cfg.model.variant, "training");
    let outcome = train(&mut model, &source, &mut validator, &cfg.trainer)?;
    create_dir(&a.out)?;
    Checkpoint::from_model(&model, &cfg.frontend, Some(&cfg.trainer), Some(&outcome.history))?
        .save(a.out.join("checkpoint.json"))?;
    write_json(&a.out.join("history.json"), &outcome.history)?;
    println!(
        "best_epoch\t{}\nbest_eer\t{:.6}",
        outcome.history.best_epoch, outcome.history.best_metric
    );
    ctx.finish(&[&a.out])
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn run_score(ctx: Context, a: ScoreArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.restore()?;
    let manifest = load_manifest(&a.manifest)?;
    let out = score_manifest(&model, &manifest, &ck.frontend, ctx.cfg.eval.batch_size)?;
    for id in &out.missing {
        tracing::warn!(utt_id = %id, "audio missing; not scored");
    }
    let model_id = a
        .model_id
        .clone()
        .or_else(|| ctx.cfg.eval.model_id.clone())
        .unwrap_or_else(|| file_stem(&a.checkpoint));
    create_parent(&a.out)?;
    write_scores(&a.out, &model_id, &out.scores)?;
    ctx.finish(&[&a.out])
}

/// `model=` from a score file's `#` header line.
fn header_model(path: &Path) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    let header = text.lines().next()?.strip_prefix('#')?;
    header
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("model="))
        .map(str::to_string)
}

fn run_eval(ctx: Context, a: EvalArgs) -> Result<(), CliError> {
    let raw = read_scores(&a.scores)?;
    let manifest = load_manifest(&a.manifest)?;
    let scores = join_scores(&raw, &manifest)?;
    let model_id = a
        .model_id
        .clone()
        .or_else(|| ctx.cfg.eval.model_id.clone())
        .or_else(|| header_model(&a.scores))
        .unwrap_or_else(|| file_stem(&a.scores));
    let mut report = per_language_report(&scores, &manifest, &model_id)?;
    report.config_hash = Some(ctx.provenance.config_hash.clone());
    if let Some(ref_path) = &a.reference {
        let text = fs::read_to_string(ref_path).map_err(io_err(ref_path))?;
        let reference: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::validation("reference_report", format!("{}: {e}", ref_path.display())))?;
        report.relative_changes = relative_changes(&reference, &report)?;
    }
    report.write_to_dir(&a.out)?;
    print!("{}", report.to_table());
    for c in &report.relative_changes {
        println!("change\t{}\t{:+.2}%", c.name, c.percent);
    }
    ctx.finish(&[&a.out])
}

/// Per-group relative EER change for groups defined in both reports.
fn relative_changes(reference: &EvalReport, new: &EvalReport) -> Result<Vec<RelativeChangeEntry>, CliError> {
    let old: BTreeMap<&str, f64> = reference
        .per_language
        .iter()
        .chain(std::iter::once(&reference.overall))
        .filter_map(|g| g.eer.map(|e| (g.group.as_str(), e)))
        .collect();
    let mut out = Vec::new();
    for g in new.per_language.iter().chain(std::iter::once(&new.overall)) {
        let (Some(value), Some(&r)) = (g.eer, old.get(g.group.as_str())) else {
            continue;
        };
        if r == 0.0 {
            tracing::warn!(group = %g.group, "reference EER is zero; relative change undefined");
            continue;
        }
        out.push(RelativeChangeEntry {
            name: g.group.clone(),
            reference: r,
            value,
            percent: relative_change(r, value)?,
        });
    }
    Ok(out)
}

fn run_report(ctx: Context, a: ReportArgs) -> Result<(), CliError> {
    let text = match &a.data {
        Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
        None => REFERENCE_TABLES.to_string(),
    };
    let report = reproduce_tables(&ReferenceTables::parse(&text)?)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    let mut outputs = Vec::new();
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let p = dir.join("tables.tsv");
        fs::write(&p, &tsv).map_err(io_err(&p))?;
        outputs.push(dir.as_path());
    }
    ctx.finish(&outputs)?;
    let failed: Vec<String> = report
        .failures()
        .map(|c| format!("{} {} expected {:.2} actual {:.4}", c.table, c.row, c.expected, c.actual))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation("table_mismatch", failed.join("; ")))
    }
}

fn run_build_vc(ctx: Context, a: BuildVcArgs) -> Result<(), CliError> {
    let bona = load_manifest(&a.bona)?;
    create_dir(&a.out)?;
    let m = build_vc_cl3(&bona, &MockVoiceConversion, ctx.cfg.seed(), &a.out, ctx.workers(a.workers))?;
    save_manifest(&m, a.out.join("manifest.jsonl"))?;
    println!("records\t{}", m.len());
    ctx.finish(&[&a.out])
}

fn load_language_transcripts(dir: &Path) -> Result<BTreeMap<String, Vec<Transcript>>, CliError> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    for e in entries {
        let p = e.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            out.insert(file_stem(&p), load_transcript_file(&p)?);
        }
    }
    Ok(out)
}

fn run_build_tts(ctx: Context, a: BuildTtsArgs) -> Result<(), CliError> {
    let bona = load_manifest(&a.bona)?;
    let engines = require(a.engines.as_ref(), ctx.cfg.paths.engines.as_ref(), "engines")?;
    let registry = EngineRegistry::load(engines)?;
    let tdir = require(a.transcripts.as_ref(), ctx.cfg.paths.transcripts.as_ref(), "transcripts")?;
    let transcripts = load_language_transcripts(tdir)?;
    let backend = backend(a.backend)?;
    let opts = TtsClOptions {
        vocoder_tag: a.vocoder_tag.clone(),
        spoof_per_bona: a.spoof_per_bona,
        seed: ctx.cfg.seed(),
        workers: ctx.workers(a.workers),
    };
    create_dir(&a.out)?;
    let m = build_tts_cl(&bona, &transcripts, &registry, backend.as_ref(), &opts, &a.out)?;
    save_manifest(&m, a.out.join("manifest.jsonl"))?;
    println!("records\t{}", m.len());
    ctx.finish(&[&a.out])
}
