use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lvlm_fairness::audit::{self, AuditFailure, AuditRun, FailureStage};
use lvlm_fairness::backends::{BackendConfig, Dispatcher, ResponseCache};
use lvlm_fairness::dataset::{parse_utkface_filenames, Attribute, ClassVocabulary, Dataset, FacetLoader, PersonRecord};
use lvlm_fairness::encoder::{Encoder, Policy, RemoteEmbedder};
use lvlm_fairness::metrics::{response_shift, Aggregation};
use lvlm_fairness::mitigation::{mitigate_all, BundleArchive, BundleFlag, MitigationOptions};
use lvlm_fairness::prompts::{PromptStyle, RenderedPrompt};
use lvlm_fairness::report::{
    emit_heatmap, emit_tables, mitigation_rows, read_report, AuditReport, Formats, GdMatrix, ModelAudit, ResampleSpec,
    RunMetadata, ShiftRow,
};

#[derive(Parser)]
#[command(
    name = "lvlm-fairness",
    version,
    about = "Demographic fairness audits for vision-language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset and write its manifest.
    Ingest(IngestArgs),
    /// Query every record, score the answers and write the report.
    Audit(AuditArgs),
    /// Run the rationale pipeline and compare against raw answers.
    Mitigate(MitigateArgs),
    /// Balanced resampling over the outcomes of a previous audit.
    Resample(ResampleArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// `facet:<table>`, `utkface:<dir>` or `manifest:<json>`. A bare path is
    /// a manifest if it ends in `.json`, a Facet table otherwise.
    #[arg(long)]
    dataset: String,
    /// Class vocabulary file; the built-in occupation list when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Directory for `manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, default_value = "direct")]
    prompt_style: PromptStyle,
    #[arg(long, default_value = "regex-then-embedding")]
    encoder: Policy,
    /// `builtin` or `remote:<url>`.
    #[arg(long, default_value = "builtin")]
    embed_provider: String,
    /// Model id requested from a remote embedding service.
    #[arg(long, default_value = "clip-text")]
    embed_model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Response cache; defaults to `<out>/cache.jsonl`.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also report macro-averaged disparities.
    #[arg(long = "macro")]
    macro_: bool,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Backend configuration file; repeat for several models.
    #[arg(long, required = true)]
    backend: Vec<PathBuf>,
    /// Render and price prompts without querying.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct MitigateArgs {
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long)]
    backend: PathBuf,
    /// Backend that writes rationales; the target backend when omitted.
    #[arg(long)]
    rationale_backend: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_sub_questions: usize,
}

#[derive(Args)]
struct ResampleArgs {
    /// Output directory of a previous audit.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "500,1000,1500")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Defaults to the seed recorded by the audit.
    #[arg(long)]
    seed: Option<u64>,
}

fn load_dataset(args: &DatasetArgs) -> Result<(Dataset, ClassVocabulary)> {
    let vocabulary = match &args.vocab {
        Some(path) => ClassVocabulary::from_file(path)?,
        None => ClassVocabulary::facet_default(),
    };
    let spec = args.dataset.as_str();
    let dataset = if let Some(path) = spec.strip_prefix("facet:") {
        FacetLoader::default().load(Path::new(path), &vocabulary)?
    } else if let Some(dir) = spec.strip_prefix("utkface:") {
        parse_utkface_filenames(Path::new(dir))?
    } else if let Some(path) = spec.strip_prefix("manifest:") {
        Dataset::read_manifest(Path::new(path))?
    } else if spec.ends_with(".json") {
        Dataset::read_manifest(Path::new(spec))?
    } else {
        FacetLoader::default().load(Path::new(spec), &vocabulary)?
    };
    let vocabulary = dataset.vocabulary.clone().unwrap_or(vocabulary);
    Ok((dataset, vocabulary))
}

fn build_encoder(args: &QueryArgs) -> Result<Encoder> {
    if args.encoder == Policy::RegexOnly {
        return Ok(Encoder::regex_only());
    }
    match args.embed_provider.as_str() {
        "builtin" => Ok(Encoder::builtin()),
        other => match other.strip_prefix("remote:") {
            Some(url) => {
                let remote = RemoteEmbedder::connect(url, &args.embed_model, Duration::from_secs(30))?;
                Ok(Encoder::with_provider(Arc::new(remote)))
            }
            None => bail!("--embed-provider must be `builtin` or `remote:<url>`, got `{other}`"),
        },
    }
}

fn open_cache(args: &QueryArgs) -> Result<Arc<ResponseCache>> {
    let path = args.cache.clone().unwrap_or_else(|| args.out.join("cache.jsonl"));
    Ok(Arc::new(
        ResponseCache::open(&path).with_context(|| format!("opening cache {}", path.display()))?,
    ))
}

fn dispatcher(path: &Path, records: &[PersonRecord], cache: &Arc<ResponseCache>) -> Result<Dispatcher> {
    let config = BackendConfig::from_file(path)?;
    let backend = config.build(records)?;
    Ok(Dispatcher::new(config, backend, cache.clone()))
}

fn metadata(
    args: &QueryArgs,
    dataset: &Dataset,
    backends: &[&BackendConfig],
    templates: BTreeSet<String>,
    encoder: &Encoder,
) -> RunMetadata {
    RunMetadata {
        dataset_digest: dataset.manifest_digest(),
        backend_ids: backends.iter().map(|b| b.backend_id.clone()).collect(),
        models: backends.iter().map(|b| b.model_name.clone()).collect(),
        prompt_style: args.prompt_style.name().to_string(),
        template_ids: templates.into_iter().collect(),
        encoder_policy: args.encoder,
        embed_provider: encoder.provider_id().map(str::to_string),
        seed: args.seed,
        aggregation: Aggregation::Micro,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct FailureManifest<'a> {
    backend_id: &'a str,
    failures: &'a [AuditFailure],
}

fn write_report(report: &AuditReport, out: &Path) -> Result<()> {
    emit_tables(report, out, Formats::default())?;
    for attribute in Attribute::ALL {
        for (a, b) in attribute.reported_pairs() {
            let matrix = GdMatrix::from_report(report, a, b);
            if !matrix.is_empty() {
                let name = format!("heatmap_{}_{}_{}.svg", attribute.name(), a.label(), b.label());
                emit_heatmap(&matrix, &out.join(name))?;
            }
        }
    }
    Ok(())
}

fn run_path(out: &Path, backend_id: &str) -> PathBuf {
    out.join(format!("run_{backend_id}.json"))
}

fn cmd_ingest(args: &DatasetArgs, out: &Path) -> Result<u8> {
    let (dataset, _) = load_dataset(args)?;
    fs::create_dir_all(out)?;
    dataset.write_manifest(&out.join("manifest.json"))?;
    println!("admitted {}, rejected {}", dataset.len(), dataset.rejections.len());
    for attribute in Attribute::ALL {
        let counts: Vec<String> = dataset
            .count_by(attribute)
            .into_iter()
            .filter(|&(_, n)| n > 0)
            .map(|(g, n)| format!("{g} {n}"))
            .collect();
        if !counts.is_empty() {
            println!("{}: {}", attribute.name(), counts.join(", "));
        }
    }
    println!("manifest digest {}", dataset.manifest_digest());
    Ok(0)
}

fn cmd_audit(args: &AuditArgs) -> Result<u8> {
    let q = &args.query;
    let (dataset, vocabulary) = load_dataset(&q.data)?;
    fs::create_dir_all(&q.out)?;
    let configs = args
        .backend
        .iter()
        .map(|p| BackendConfig::from_file(p))
        .collect::<Result<Vec<_>, _>>()?;
    if args.dry_run {
        let estimates: Vec<_> = configs
            .iter()
            .map(|c| {
                let e = audit::dry_run(&dataset, &vocabulary, q.prompt_style, c);
                println!(
                    "{}: {} prompts, {} chars, cost {}",
                    c.backend_id,
                    e.prompts,
                    e.prompt_chars,
                    e.estimated_cost.map_or("unpriced".to_string(), |c| format!("{c:.4}"))
                );
                (c.backend_id.clone(), e)
            })
            .collect();
        write_json(&q.out.join("dry_run.json"), &estimates)?;
        return Ok(0);
    }
    let encoder = build_encoder(q)?;
    let cache = open_cache(q)?;
    let mut templates = BTreeSet::new();
    let mut audits = Vec::new();
    let mut failed = 0;
    for (path, config) in args.backend.iter().zip(&configs) {
        let dispatcher = dispatcher(path, &dataset.records, &cache)?;
        let run = audit::run_audit(&dataset, &vocabulary, &dispatcher, &encoder, q.prompt_style, q.encoder);
        templates.extend(run.items.iter().map(|i| i.template_id.clone()));
        eprintln!(
            "{}: {} scored, {} failed, {} network calls, {} cache hits",
            config.backend_id,
            run.outcomes.len(),
            run.failures.len(),
            run.stats.network_calls,
            run.stats.cache_hits
        );
        failed += run.failures.len();
        write_json(
            &q.out.join(format!("failures_{}.json", config.backend_id)),
            &FailureManifest {
                backend_id: &config.backend_id,
                failures: &run.failures,
            },
        )?;
        write_json(&run_path(&q.out, &config.backend_id), &run)?;
        audits.push(ModelAudit::build(
            &config.backend_id,
            q.prompt_style.name(),
            &run.outcomes,
            Aggregation::Micro,
            q.macro_,
            None,
        ));
    }
    let refs: Vec<&BackendConfig> = configs.iter().collect();
    let mut report = AuditReport::new(metadata(q, &dataset, &refs, templates, &encoder));
    report.models = audits;
    write_report(&report, &q.out)?;
    Ok(if failed > 0 { 2 } else { 0 })
}

fn cmd_mitigate(args: &MitigateArgs) -> Result<u8> {
    let q = &args.query;
    let (dataset, vocabulary) = load_dataset(&q.data)?;
    fs::create_dir_all(&q.out)?;
    let encoder = build_encoder(q)?;
    let cache = open_cache(q)?;
    let target = dispatcher(&args.backend, &dataset.records, &cache)?;
    let rationale_path = args.rationale_backend.as_ref().unwrap_or(&args.backend);
    let rationale = dispatcher(rationale_path, &dataset.records, &cache)?;

    let (rendered, mut failures) = audit::render_all(&dataset, &vocabulary, q.prompt_style);
    let cases: Vec<(PersonRecord, RenderedPrompt)> = rendered.into_iter().map(|(r, p)| (r.clone(), p)).collect();
    let options = MitigationOptions {
        max_sub_questions: args.max_sub_questions,
        policy: q.encoder,
    };
    let results = mitigate_all(&rationale, &target, &cases, &encoder, &options);

    let archive_path = q.out.join("bundles.jsonl");
    if archive_path.exists() {
        fs::remove_file(&archive_path)?;
    }
    let archive = BundleArchive::open(&archive_path)?;
    let mut bundles = Vec::new();
    for ((record, _), result) in cases.iter().zip(results) {
        match result {
            Ok(bundle) => {
                archive.append(&bundle)?;
                for flag in &bundle.flags {
                    if matches!(
                        flag,
                        BundleFlag::RawQueryFailed { .. } | BundleFlag::FinalQueryFailed { .. }
                    ) {
                        failures.push(AuditFailure {
                            image_id: record.image_id.clone(),
                            stage: FailureStage::Query,
                            error: serde_json::to_string(flag)?,
                        });
                    }
                }
                bundles.push(bundle);
            }
            Err(e) => failures.push(AuditFailure {
                image_id: record.image_id.clone(),
                stage: FailureStage::Query,
                error: e.to_string(),
            }),
        }
    }
    let backend_id = &target.config().backend_id;
    write_json(
        &q.out.join(format!("failures_{backend_id}.json")),
        &FailureManifest {
            backend_id,
            failures: &failures,
        },
    )?;

    let (raw, mitigated) = audit::bundle_outcomes(&dataset.records, &bundles);
    let templates = cases.iter().map(|(_, p)| p.template_id.clone()).collect();
    let mut configs = vec![target.config()];
    if args.rationale_backend.is_some() {
        configs.push(rationale.config());
    }
    let mut report = AuditReport::new(metadata(q, &dataset, &configs, templates, &encoder));
    report.models.push(ModelAudit::build(
        backend_id,
        q.prompt_style.name(),
        &raw,
        Aggregation::Micro,
        q.macro_,
        None,
    ));
    report.models.push(ModelAudit::build(
        &format!("{backend_id}+rationale"),
        q.prompt_style.name(),
        &mitigated,
        Aggregation::Micro,
        q.macro_,
        None,
    ));
    report.mitigation = mitigation_rows(backend_id, &raw, &mitigated, Aggregation::Micro);
    if q.prompt_style == PromptStyle::SingleChoice {
        let (before, after) = audit::bundle_answers(&bundles);
        report.shifts.push(ShiftRow {
            model: backend_id.clone(),
            matrix: response_shift(&before, &after)?,
        });
    }
    write_report(&report, &q.out)?;
    eprintln!(
        "{backend_id}: {} bundles, {} failed, {} target calls, {} rationale calls",
        bundles.len(),
        failures.len(),
        target.network_calls(),
        rationale.network_calls()
    );
    Ok(if failures.is_empty() { 0 } else { 2 })
}

fn cmd_resample(args: &ResampleArgs) -> Result<u8> {
    let mut report = read_report(&args.out.join("report.json"))
        .with_context(|| format!("no audit report in {}", args.out.display()))?;
    let seed = args.seed.unwrap_or(report.metadata.seed);
    report.metadata.seed = seed;
    let spec = ResampleSpec {
        sizes: args.sizes.clone(),
        trials: args.trials,
    };
    let mut errors = 0;
    for model in &mut report.models {
        let path = run_path(&args.out, &model.model);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let run: AuditRun = serde_json::from_str(&text)?;
        let rebuilt = ModelAudit::build(
            &model.model,
            &model.prompt_style,
            &run.outcomes,
            report.metadata.aggregation,
            false,
            Some((&spec, seed)),
        );
        errors += rebuilt.resamples.iter().filter(|r| r.error.is_some()).count();
        for r in &rebuilt.resamples {
            match (&r.summary, &r.error) {
                (Some(s), _) => println!(
                    "{} {} {}-{} n={}: mean GD {:.4} ± {:.4}{}",
                    model.model,
                    r.attribute,
                    r.pair.0,
                    r.pair.1,
                    r.n_per_group,
                    s.mean,
                    s.standard_error,
                    if s.degenerate { " (single trial)" } else { "" }
                ),
                (None, Some(e)) => println!(
                    "{} {} {}-{} n={}: {e}",
                    model.model, r.attribute, r.pair.0, r.pair.1, r.n_per_group
                ),
                _ => {}
            }
        }
        model.resamples = rebuilt.resamples;
    }
    write_report(&report, &args.out)?;
    Ok(if errors > 0 { 2 } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(args) => cmd_ingest(&args.data, &args.out),
        Command::Audit(args) => cmd_audit(args),
        Command::Mitigate(args) => cmd_mitigate(args),
        Command::Resample(args) => cmd_resample(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
