//! One function per subcommand. Each returns a [`Summary`]; human-readable
//! output goes to stdout only when `--json` is off.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Map, Value};

use falconer_core::backends::{DispatchOptions, OpenAiChat};
use falconer_core::corpus::{load_corpus, Corpus};
use falconer_core::eval::{consistency, render_report, word_f1, ReportFormat};
use falconer_core::executor::{execute, read_results, write_results, Bindings, ExecOptions, FieldValue, ResultSet};
use falconer_core::generator::{
    degrade_spans, emit_dataset, generate_classification_set, generate_extraction_set, load_dataset, sub_seed,
    Examples, Manifest, TrainingSet,
};
use falconer_core::plan::{parse_plan, validate_plan, Plan};
use falconer_core::planner::{
    load_icl_examples, load_task_plans, request_plan, score_planning, Candidate, PlannerRequest, DEFAULT_REPAIR_ROUNDS,
};
use falconer_core::primitives::SpanSet;

use crate::args::{
    DegradeArgs, DispatchArgs, EvalArgs, Format, GenerateArgs, HttpArgs, Mode, PlanArgs, RunArgs, ScorePlansArgs,
    ValidateArgs,
};
use crate::backend::{self, BackendSpec, HttpSettings};
use crate::config::FileConfig;
use crate::exit::{fail, BAD_ARGS, OK, VALIDATION};

const DEFAULT_TIMEOUT_SECS: u64 = 60;
const DEFAULT_RETRIES: u32 = 3;
const DEFAULT_BATCH: usize = 64;
const DEFAULT_MODEL: &str = "planner";
const DEFAULT_OUT: &str = "out";

pub struct Ctx {
    pub json: bool,
    pub seed: u64,
    pub config: FileConfig,
}

/// What a command reports back; serialized as the `--json` object.
pub struct Summary {
    pub status: &'static str,
    pub code: u8,
    pub artifacts: Vec<PathBuf>,
    pub extra: Map<String, Value>,
}

impl Summary {
    fn ok(artifacts: Vec<PathBuf>) -> Self {
        Self {
            status: "ok",
            code: OK,
            artifacts,
            extra: Map::new(),
        }
    }

    fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn to_json(&self) -> Value {
        let mut m = self.extra.clone();
        m.insert("status".into(), self.status.into());
        m.insert(
            "artifacts".into(),
            self.artifacts
                .iter()
                .map(|p| Value::from(p.display().to_string()))
                .collect(),
        );
        Value::Object(m)
    }
}

impl Ctx {
    fn http(&self, a: &HttpArgs) -> HttpSettings {
        let c = &self.config;
        HttpSettings {
            api_key: a.api_key.clone(),
            planner_url: a.planner_url.clone().or_else(|| c.planner_url.clone()),
            proxy_url: a.proxy_url.clone().or_else(|| c.proxy_url.clone()),
            timeout: Duration::from_secs(a.timeout_secs.or(c.timeout_secs).unwrap_or(DEFAULT_TIMEOUT_SECS)),
            retries: a.retries.or(c.retries).unwrap_or(DEFAULT_RETRIES),
        }
    }

    fn dispatch(&self, a: &DispatchArgs) -> (DispatchOptions, Option<PathBuf>) {
        let c = &self.config;
        let use_cache = !a.no_cache && c.cache.unwrap_or(true);
        let opts = DispatchOptions {
            batch: a.batch.or(c.batch).unwrap_or(DEFAULT_BATCH).max(1),
            parallel: a.parallel.or(c.parallel).unwrap_or(1).max(1),
            use_cache,
        };
        let dir = use_cache
            .then(|| a.cache_dir.clone().or_else(|| c.cache_dir.clone()))
            .flatten();
        (opts, dir)
    }

    fn print(&self, text: &str) {
        if !self.json {
            println!("{text}");
        }
    }
}

fn read_file(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| fail(BAD_ARGS, format!("reading {}: {e}", path.display())))
}

fn read_plan(path: &Path) -> anyhow::Result<Plan> {
    parse_plan(&read_file(path)?).map_err(|e| fail(VALIDATION, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| fail(BAD_ARGS, format!("creating {}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| fail(BAD_ARGS, format!("writing {}: {e}", path.display())))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn spec(raw: Option<&String>, what: &str) -> anyhow::Result<BackendSpec> {
    let raw = raw.ok_or_else(|| {
        fail(
            BAD_ARGS,
            format!("no {what} given; pass --backend or set it in the config"),
        )
    })?;
    BackendSpec::parse(raw)
}

pub fn plan(ctx: &Ctx, args: PlanArgs) -> anyhow::Result<Summary> {
    let http = ctx.http(&args.http);
    let model = args
        .model
        .or_else(|| ctx.config.model.clone())
        .unwrap_or_else(|| DEFAULT_MODEL.into());
    let repairs = args.repairs.or(ctx.config.repairs).unwrap_or(DEFAULT_REPAIR_ROUNDS);
    let mut request = PlannerRequest::new(&args.task, &model);
    if let Some(dir) = &args.icl_dir {
        request.icl_examples = load_icl_examples(dir)?;
        log::info!("loaded {} in-context examples", request.icl_examples.len());
    }
    let client = OpenAiChat::new(http.planner_url()?, &model, http.transport());
    log::info!("requesting a plan from {model} (up to {repairs} repair rounds)");
    let plan = request_plan(&client, &request, repairs)?;
    write_file(&args.out, &(plan.to_json_pretty() + "\n"))?;
    let digest = plan.digest()?;
    log::info!("wrote plan {digest} to {}", args.out.display());
    ctx.print(&format!("{}\t{}", digest, args.out.display()));
    Ok(Summary::ok(vec![args.out])
        .with("plan_id", digest)
        .with("nodes", plan.nodes.len()))
}

pub fn validate(ctx: &Ctx, args: ValidateArgs) -> anyhow::Result<Summary> {
    let plan = read_plan(&args.plan)?;
    let report = validate_plan(&plan);
    let mut out = json!({"valid": report.is_valid(), "violations": report.violations});
    if report.is_valid() {
        out["plan_id"] = plan.digest()?.into();
    }
    ctx.print(pretty(&out).trim_end());
    for v in &report.violations {
        log::error!("{v}");
    }
    let summary = Summary {
        status: if report.is_valid() { "ok" } else { "invalid" },
        code: if report.is_valid() { OK } else { VALIDATION },
        artifacts: vec![],
        extra: Map::new(),
    };
    Ok(summary.with("report", out))
}

pub fn run(ctx: &Ctx, args: RunArgs) -> anyhow::Result<Summary> {
    let c = &ctx.config;
    let plan = read_plan(&args.plan)?;
    let report = validate_plan(&plan);
    if !report.is_valid() {
        return Err(fail(VALIDATION, format!("{}: {report}", args.plan.display())));
    }
    let corpus = load_corpus(&args.corpus)?;
    let http = ctx.http(&args.http);
    let (dopts, cache_dir) = ctx.dispatch(&args.dispatch);

    let default = args.backend.as_ref().or(c.backend.as_ref());
    let label_raw = args.label_backend.as_ref().or(c.label_backend.as_ref()).or(default);
    let span_raw = args.span_backend.as_ref().or(c.span_backend.as_ref()).or(default);
    let label = label_raw.map(|s| BackendSpec::parse(s)).transpose()?;
    let span = span_raw.map(|s| BackendSpec::parse(s)).transpose()?;
    let label_d = label
        .as_ref()
        .map(|s| backend::dispatcher(s, &http, cache_dir.as_deref()))
        .transpose()?;
    let span_d = match (&span, &label, &label_d) {
        // one dispatcher when both roles use the same backend, so usage is reported once
        (Some(s), Some(l), Some(d)) if s == l => Some(d.clone()),
        (Some(s), _, _) => Some(backend::dispatcher(s, &http, cache_dir.as_deref())?),
        (None, _, _) => None,
    };
    let bindings = Bindings {
        label: label_d,
        span: span_d,
    };
    let opts = ExecOptions {
        batch: dopts.batch,
        parallel: dopts.parallel,
        cache: dopts.use_cache,
        strict: args.strict || c.strict.unwrap_or(false),
    };
    log::info!("executing {} over {} records", args.plan.display(), corpus.len());
    let (results, cost) = execute(&plan, &corpus, &bindings, &opts)?;
    let out = args.out.or_else(|| c.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
    write_results(&out, &results, &cost)?;
    let run_info = json!({
        "plan": args.plan.display().to_string(),
        "plan_id": results.plan_id,
        "corpus": args.corpus.display().to_string(),
        "records": corpus.len(),
        "seed": ctx.seed,
        "label_backend": label_raw,
        "span_backend": span_raw,
        "options": {"batch": opts.batch, "parallel": opts.parallel, "cache": opts.cache, "strict": opts.strict},
    });
    let run_path = out.join("run.json");
    write_file(&run_path, &pretty(&run_info))?;
    log::info!(
        "{} rows, {} dropped, {} wire calls",
        results.rows.len(),
        results.dropped.len(),
        cost.totals.wire_calls
    );
    ctx.print(&format!(
        "{} rows, {} dropped -> {}",
        results.rows.len(),
        results.dropped.len(),
        out.display()
    ));
    Ok(
        Summary::ok(vec![out.join("results.jsonl"), out.join("report.json"), run_path])
            .with("plan_id", results.plan_id.clone())
            .with("rows", results.rows.len())
            .with("dropped", results.dropped.len()),
    )
}

fn dataset_summary(ctx: &Ctx, out: &Path, set: &TrainingSet, manifest: &Manifest) -> Summary {
    log::info!("wrote {} examples to {}", set.len(), out.display());
    ctx.print(&format!(
        "{} examples, digest {} -> {}",
        set.len(),
        manifest.digest,
        out.display()
    ));
    Summary::ok(vec![
        out.join(&manifest.file),
        out.join(falconer_core::generator::MANIFEST_FILE),
    ])
    .with("digest", manifest.digest.clone())
    .with("examples", set.len())
    .with("counts", manifest.counts.clone())
}

pub fn generate(ctx: &Ctx, args: GenerateArgs) -> anyhow::Result<Summary> {
    let corpus = load_corpus(&args.corpus)?;
    let http = ctx.http(&args.http);
    let (opts, cache_dir) = ctx.dispatch(&args.dispatch);
    let spec = spec(
        args.backend.as_ref().or(ctx.config.backend.as_ref()),
        "annotator backend",
    )?;
    let d = backend::dispatcher(&spec, &http, cache_dir.as_deref())?;
    let mut set = match args.mode {
        Mode::Classification => {
            let label = args
                .label
                .ok_or_else(|| fail(BAD_ARGS, "--label is required for classification"))?;
            log::info!("scoring {} records for {label:?}", corpus.len());
            let mut set = generate_classification_set(&corpus, &label, args.n, &d, &opts)?;
            set.provenance.notes.push(format!("root seed {}", ctx.seed));
            set
        }
        Mode::Extraction => {
            let instruction = args
                .instruction
                .ok_or_else(|| fail(BAD_ARGS, "--instruction is required for extraction"))?;
            let seed = sub_seed(ctx.seed, "sample");
            log::info!("annotating {} sampled records", args.n);
            let mut set = generate_extraction_set(&corpus, &instruction, args.n, seed, &d, &opts)?;
            set.provenance
                .notes
                .push(format!("root seed {}, sub-seed \"sample\"", ctx.seed));
            set
        }
    };
    set.provenance.notes.sort();
    let manifest = emit_dataset(&set, &args.out)?;
    Ok(dataset_summary(ctx, &args.out, &set, &manifest))
}

pub fn degrade(ctx: &Ctx, args: DegradeArgs) -> anyhow::Result<Summary> {
    let (set, _) = load_dataset(&args.dataset)?;
    let mut degraded = degrade_spans(&set, sub_seed(ctx.seed, "degrade"))?;
    degraded
        .provenance
        .notes
        .push(format!("root seed {}, sub-seed \"degrade\"", ctx.seed));
    let manifest = emit_dataset(&degraded, &args.out)?;
    Ok(dataset_summary(ctx, &args.out, &degraded, &manifest))
}

/// The single span-valued field of a run, unless one is named explicitly.
fn span_field(results: &ResultSet, requested: Option<String>) -> anyhow::Result<String> {
    if let Some(f) = requested {
        return Ok(f);
    }
    let fields: std::collections::BTreeSet<&String> = results
        .rows
        .iter()
        .flat_map(|r| r.fields.iter())
        .filter(|(_, v)| matches!(v, FieldValue::Spans(_)))
        .map(|(k, _)| k)
        .collect();
    match fields.len() {
        1 => Ok(fields.into_iter().next().expect("one field").clone()),
        0 => Err(fail(VALIDATION, "predictions have no span field")),
        _ => Err(fail(
            BAD_ARGS,
            format!("several span fields {fields:?}; pick one with --field"),
        )),
    }
}

fn against_dataset(
    pred: &ResultSet,
    dir: &Path,
    field: Option<String>,
    corpus: &Corpus,
) -> anyhow::Result<falconer_core::eval::EvalReport> {
    let (set, _) = load_dataset(dir)?;
    let Examples::Extraction(examples) = set.examples else {
        return Err(fail(
            VALIDATION,
            format!("{} is not an extraction dataset", dir.display()),
        ));
    };
    let field = span_field(pred, field)?;
    let gold: Vec<SpanSet> = examples
        .iter()
        .map(|e| SpanSet::new(&e.record_id, e.spans.clone()))
        .collect();
    let predicted: Vec<SpanSet> = examples
        .iter()
        .map(|e| {
            let spans = pred
                .row(&e.record_id)
                .and_then(|r| r.fields.get(&field))
                .and_then(FieldValue::as_spans)
                .map(<[_]>::to_vec)
                .unwrap_or_default();
            SpanSet::new(&e.record_id, spans)
        })
        .collect();
    Ok(word_f1(&predicted, &gold, corpus)?)
}

pub fn eval(ctx: &Ctx, args: EvalArgs) -> anyhow::Result<Summary> {
    let corpus = load_corpus(&args.corpus)?;
    let (pred, _) = read_results(&args.pred)?;
    let report = if args.gold.is_dir() {
        against_dataset(&pred, &args.gold, args.field, &corpus)?
    } else {
        let (gold, _) = read_results(&args.gold)?;
        consistency(&pred, &gold, &corpus)?
    };
    let format = match args.format {
        Format::Json => ReportFormat::Json,
        Format::Markdown => ReportFormat::Markdown,
    };
    let rendered = render_report(&report, format);
    let mut artifacts = vec![];
    if let Some(out) = args.out {
        write_file(&out, &rendered)?;
        artifacts.push(out);
    }
    ctx.print(rendered.trim_end());
    Ok(Summary::ok(artifacts).with("report", serde_json::to_value(&report)?))
}

pub fn score_plans(ctx: &Ctx, args: ScorePlansArgs) -> anyhow::Result<Summary> {
    let candidates: Vec<Candidate> = load_task_plans(&args.candidates)?
        .iter()
        .map(|f| (f.task.clone(), f.candidate()))
        .collect();
    let mut golden = BTreeMap::new();
    for f in load_task_plans(&args.golden)? {
        let plan = f
            .candidate()
            .map_err(|e| fail(VALIDATION, format!("golden plan for {:?}: {e}", f.task)))?;
        golden.insert(f.task, plan);
    }
    let probe = load_corpus(&args.probe)?;
    let spec = spec(args.backend.as_ref().or(ctx.config.backend.as_ref()), "mock backend")?;
    let BackendSpec::Mock(rules) = spec else {
        return Err(fail(BAD_ARGS, "score-plans needs a mock:RULES.json backend"));
    };
    let mock = std::sync::Arc::new(backend::load_mock(&rules)?);
    let score = score_planning(&candidates, &golden, &probe, mock)?;
    let value = serde_json::to_value(&score)?;
    let mut artifacts = vec![];
    if let Some(out) = args.out {
        write_file(&out, &pretty(&value))?;
        artifacts.push(out);
    }
    log::info!(
        "{} of {} candidates behave like their golden plan",
        score.correct,
        score.total
    );
    ctx.print(&format!("score {} ({} / {})", score.score, score.correct, score.total));
    Ok(Summary::ok(artifacts).with("score", value))
}
