//! Run lifecycle: plan, perturb, render, execute, parse, score.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;

use surveyor_core::chat::{CompletionProvider, ConversationTurn, Role};
use surveyor_core::methods::{
    compile, plan_open_ended, ClassificationSpec, CompileOptions, GenerationMethod, MethodError, RequestSpec,
};
use surveyor_core::metrics::{alignment_report, AlignmentReport, Cell, MetricError, Prediction, ReferenceError, ReferenceSet};
use surveyor_core::parsers::{
    judge_parse, parse_response, AnswerValue, JudgeTranscript, ParseContext, ParsedAnswer, Reason,
};
use surveyor_core::perturbation::{apply_pipeline, PerturbError, Variant};
use surveyor_core::presentation::{render, InferenceUnit, PlanKey, PresentationMode, PromptPlan, RenderError, UnitId, BATTERY_ITEM};
use surveyor_core::survey::{Question, Questionnaire};

use crate::client::{BlockingProvider, ChatClient, ClientError};
use crate::config::{ConfigError, ExperimentConfig, Inputs, ParsingConfig, VariantConfig};
use crate::store::{
    latest_records, write_atomic, write_results, AnswerRecord, AuxUsage, CallRecord, Journal, OutputDir, RunManifest,
    RunState, UnitEntry, UnitRecord, UnitStatus,
};
use crate::wire::{ChatRequest, Usage};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} already holds a run; pass --resume to continue it or choose another output_dir")]
    OutputExists(String),
    #[error("config changed since the run started (digest {expected}, now {actual})")]
    DigestMismatch { expected: String, actual: String },
    #[error("variant {variant}: {source}")]
    Perturb {
        variant: String,
        #[source]
        source: PerturbError,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Method(#[from] MethodError),
    #[error("run aborted: {0}")]
    Auth(String),
    #[error("reference: {0}")]
    Reference(#[from] ReferenceError),
    #[error("scoring: {0}")]
    Metric(#[from] MetricError),
}

/// A planned run: loaded inputs plus the unit inventory.
#[derive(Debug, Clone)]
pub struct Plan {
    pub inputs: Inputs,
    pub manifest: RunManifest,
}

fn items_for(mode: PresentationMode, q: &Questionnaire) -> Vec<String> {
    match mode {
        PresentationMode::Battery => vec![BATTERY_ITEM.to_string()],
        _ => q.questions.iter().map(|q| q.id.clone()).collect(),
    }
}

/// Builds the full inventory personas × variants × modes × methods × seeds
/// without touching the network. Unit ids are deterministic.
pub fn plan_run(cfg: &ExperimentConfig) -> Result<Plan, ConfigError> {
    let inputs = cfg.load_inputs()?;
    let mut units = Vec::new();
    let mut variants = BTreeMap::new();
    for v in &inputs.variants {
        variants.insert(v.name.clone(), inputs.variant_id(v));
    }
    for persona in &inputs.personas {
        for v in &inputs.variants {
            let variant_id = inputs.variant_id(v);
            for &mode in &cfg.modes {
                for method in &cfg.methods {
                    for &seed in &cfg.seeds {
                        for item in items_for(mode, &inputs.questionnaire) {
                            units.push(UnitEntry {
                                unit_id: UnitId {
                                    persona_id: persona.id.clone(),
                                    variant_id: variant_id.clone(),
                                    mode,
                                    method: method.name(),
                                    seed,
                                    item,
                                },
                                variant: v.name.clone(),
                                status: UnitStatus::Pending,
                            });
                        }
                    }
                }
            }
        }
    }
    let manifest = RunManifest::new(cfg.name.clone(), inputs.digest.clone(), variants, units);
    Ok(Plan { inputs, manifest })
}

#[derive(Debug, Error)]
pub enum PreviewError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown persona {0}")]
    UnknownPersona(String),
    #[error("unknown variant {0}")]
    UnknownVariant(String),
    #[error("unknown presentation mode {0:?} (expected sequential, battery or single_item)")]
    UnknownMode(String),
    #[error("method {0} is not configured")]
    UnknownMethod(String),
    #[error("variant {0} paraphrases questions and can only be previewed after a run")]
    NeedsProvider(String),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Method(#[from] MethodError),
}

/// What the engine would send for one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub plan: PromptPlan,
    /// Compiled request per unit, without sequential history.
    pub requests: Vec<RequestSpec>,
    /// Exact wire body of the first request.
    pub first_request: ChatRequest,
}

impl Preview {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("preview serializes")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviewRequest {
    pub persona: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub mode: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Renders and compiles a plan exactly as a run would, without network.
pub fn preview(cfg: &ExperimentConfig, inputs: &Inputs, req: &PreviewRequest) -> Result<Preview, PreviewError> {
    let persona = inputs
        .persona(&req.persona)
        .ok_or_else(|| PreviewError::UnknownPersona(req.persona.clone()))?;
    let mode = PresentationMode::parse(&req.mode).ok_or_else(|| PreviewError::UnknownMode(req.mode.clone()))?;
    let method = cfg
        .method(&req.method)
        .ok_or_else(|| PreviewError::UnknownMethod(req.method.clone()))?;
    let variant_cfg = match &req.variant {
        Some(name) => inputs
            .variant(name)
            .ok_or_else(|| PreviewError::UnknownVariant(name.clone()))?,
        None => &inputs.variants[0],
    };
    if variant_cfg.perturbations.iter().any(|s| s.op.needs_provider()) {
        return Err(PreviewError::NeedsProvider(variant_cfg.name.clone()));
    }
    let variant = apply_pipeline(&inputs.questionnaire, &variant_cfg.perturbations, &inputs.perturbation, None)?;
    let seed = req.seed.unwrap_or(cfg.seeds[0]);
    let opts = cfg.compile_options(&inputs.template);
    let plan = render(
        mode,
        &variant.questionnaire,
        persona,
        &inputs.template,
        method,
        &PlanKey::new(variant.id.to_string(), method.name(), seed),
    )?;
    let requests = plan
        .units
        .iter()
        .map(|u| compile_unit(method, u, &variant.questionnaire, &opts).map(|(spec, _)| spec))
        .collect::<Result<Vec<_>, _>>()?;
    let first_request = ChatRequest::build(&requests[0], &[], &cfg.provider);
    Ok(Preview {
        plan,
        requests,
        first_request,
    })
}

fn unit_questions<'a>(unit: &InferenceUnit, q: &'a Questionnaire) -> Result<Vec<&'a Question>, MethodError> {
    unit.expected_answers
        .iter()
        .map(|id| q.question(id).ok_or_else(|| MethodError::MissingQuestion(id.clone())))
        .collect()
}

fn compile_unit(
    method: &GenerationMethod,
    unit: &InferenceUnit,
    q: &Questionnaire,
    opts: &CompileOptions,
) -> Result<(RequestSpec, Option<ClassificationSpec>), MethodError> {
    let questions = unit_questions(unit, q)?;
    if method.kind.is_open_ended() {
        let (first, followup) = plan_open_ended(method, unit, questions[0], opts)?;
        Ok((first, Some(followup)))
    } else {
        Ok((compile(method, unit, &questions, opts)?, None))
    }
}

/// Stable grouping of jobs by system prompt, so requests sharing a prompt
/// prefix are dispatched back to back. Returns a permutation of indices.
pub fn prefix_friendly_order(system_prompts: &[&str]) -> Vec<usize> {
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (i, s) in system_prompts.iter().enumerate() {
        first_seen.entry(s).or_insert(i);
    }
    let mut order: Vec<usize> = (0..system_prompts.len()).collect();
    order.sort_by_key(|&i| (first_seen[system_prompts[i]], i));
    order
}

/// Options for [`run`].
#[derive(Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Live copy of the manifest, updated as units complete.
    pub live: Option<Arc<Mutex<RunManifest>>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub records: Vec<UnitRecord>,
    pub report: Option<AlignmentReport>,
}

/// One unit ready to send.
struct Prepared {
    unit: InferenceUnit,
    key: String,
    variant_name: String,
    variant: Arc<Variant>,
    method: GenerationMethod,
    spec: RequestSpec,
    followup: Option<ClassificationSpec>,
}

struct Job {
    system: String,
    units: Vec<Prepared>,
}

/// Shared, read-only context of the executing tasks.
struct Exec {
    client: Arc<ChatClient>,
    cfg: ExperimentConfig,
    base: Questionnaire,
    answer_field: String,
    abort: AtomicBool,
    abort_reason: Mutex<Option<String>>,
    done: BTreeMap<String, UnitRecord>,
    tx: mpsc::UnboundedSender<UnitRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VariantEntry {
    name: String,
    variant: Variant,
}

/// Executes a config end to end and writes the output directory.
pub async fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome, RunError> {
    let plan = plan_run(cfg)?;
    let out = OutputDir::new(cfg.output_path());
    std::fs::create_dir_all(&out.root)?;

    let prior = latest_records(&out.records())?;
    if !prior.is_empty() {
        if !opts.resume {
            return Err(RunError::OutputExists(out.root.display().to_string()));
        }
        if let Ok(m) = RunManifest::load(&out.manifest()) {
            if m.config_digest != plan.manifest.config_digest {
                return Err(RunError::DigestMismatch {
                    expected: m.config_digest,
                    actual: plan.manifest.config_digest,
                });
            }
        }
    }
    let done: BTreeMap<String, UnitRecord> = prior.into_iter().filter(|(_, r)| r.status == UnitStatus::Done).collect();

    let mut manifest = plan.manifest.clone();
    manifest.apply_records(&done);
    manifest.state = RunState::Running;
    let now = chrono::Utc::now().to_rfc3339();
    manifest.started_at = Some(now.clone());
    manifest.updated_at = Some(now);
    manifest.save(&out.manifest())?;
    if let Some(live) = &opts.live {
        *live.lock().expect("live manifest lock") = manifest.clone();
    }

    let client = Arc::new(ChatClient::new(&cfg.provider)?);
    let inputs = &plan.inputs;
    let variants = build_variants(cfg, inputs, &client, &out, opts.resume && !done.is_empty()).await?;
    write_atomic(&out.questionnaire(), inputs.questionnaire.to_json().as_bytes())?;

    let jobs = prepare_jobs(cfg, inputs, &variants)?;
    let order: Vec<usize> = if cfg.provider.prefix_friendly_order {
        prefix_friendly_order(&jobs.iter().map(|j| j.system.as_str()).collect::<Vec<_>>())
    } else {
        (0..jobs.len()).collect()
    };
    let mut slots: Vec<Option<Job>> = jobs.into_iter().map(Some).collect();
    let ordered: Vec<Job> = order.into_iter().filter_map(|i| slots[i].take()).collect();

    let (tx, rx) = mpsc::unbounded_channel();
    let exec = Arc::new(Exec {
        client,
        cfg: cfg.clone(),
        base: inputs.questionnaire.clone(),
        answer_field: inputs.template.answer_field.clone(),
        abort: AtomicBool::new(false),
        abort_reason: Mutex::new(None),
        done,
        tx,
    });

    let writer = spawn_writer(out.records(), rx, opts.live.clone());
    let width = (cfg.provider.max_in_flight * 4).max(16);
    futures::stream::iter(ordered)
        .for_each_concurrent(width, |job| {
            let exec = exec.clone();
            async move { run_job(exec, job).await }
        })
        .await;
    let abort_reason = exec.abort_reason.lock().expect("abort lock").clone();
    drop(exec);
    writer.await.expect("writer task")?;

    finish(cfg, plan, &out, abort_reason, opts.live.as_ref())
}

fn finish(
    cfg: &ExperimentConfig,
    plan: Plan,
    out: &OutputDir,
    abort_reason: Option<String>,
    live: Option<&Arc<Mutex<RunManifest>>>,
) -> Result<RunOutcome, RunError> {
    let latest = latest_records(&out.records())?;
    let mut manifest = RunManifest::load(&out.manifest()).unwrap_or(plan.manifest.clone());
    manifest.apply_records(&latest);
    manifest.state = if abort_reason.is_some() {
        RunState::Aborted
    } else if manifest.counts.failed > 0 || manifest.counts.pending > 0 {
        RunState::Partial
    } else {
        RunState::Completed
    };
    manifest.updated_at = Some(chrono::Utc::now().to_rfc3339());
    manifest.save(&out.manifest())?;
    if let Some(live) = live {
        *live.lock().expect("live manifest lock") = manifest.clone();
    }

    let records: Vec<UnitRecord> = manifest
        .units
        .iter()
        .filter_map(|u| latest.get(&u.unit_id.to_string()).cloned())
        .collect();
    write_results(&out.results(), &records)?;

    if let Some(reason) = abort_reason {
        return Err(RunError::Auth(reason));
    }

    let report = match cfg.reference_path() {
        Some(path) => {
            let file = std::fs::File::open(&path)?;
            let reference = ReferenceSet::from_csv(file, &plan.inputs.questionnaire)?;
            let report = alignment_report(&predictions(&records), &reference, &plan.inputs.questionnaire, &cfg.stratify_by)?;
            write_atomic(&out.report_json(), report.to_json().as_bytes())?;
            write_atomic(&out.report_csv(), report.to_csv().as_bytes())?;
            Some(report)
        }
        None => None,
    };
    Ok(RunOutcome {
        manifest,
        records,
        report,
    })
}

/// Predictions on the base questionnaire from completed records.
pub fn predictions(records: &[UnitRecord]) -> Vec<Prediction> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.status == UnitStatus::Done) {
        let cell = Cell {
            variant: r.variant.clone(),
            mode: r.unit_id.mode.as_str().to_string(),
            method: r.unit_id.method.clone(),
            seed: r.unit_id.seed,
        };
        for a in &r.answers {
            let value = match (&a.base_value, &a.parsed.value) {
                (Some(v), _) => v.clone(),
                // Unparseable answers are kept so they count against the
                // cell's parse rate.
                (None, v @ AnswerValue::Unparseable { .. }) => v.clone(),
                (None, _) => continue,
            };
            out.push(Prediction {
                cell: cell.clone(),
                persona_id: r.unit_id.persona_id.clone(),
                question_id: a.parsed.question_id.clone(),
                value,
            });
        }
    }
    out
}

/// Scores a results file against a reference CSV.
pub fn score_results(
    results: &Path,
    reference: &Path,
    questionnaire: &Questionnaire,
    stratify_by: &[String],
) -> Result<AlignmentReport, RunError> {
    let records: Vec<UnitRecord> = crate::store::read_jsonl(results)?;
    let reference = ReferenceSet::from_csv(std::fs::File::open(reference)?, questionnaire)?;
    Ok(alignment_report(&predictions(&records), &reference, questionnaire, stratify_by)?)
}

async fn build_variants(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    client: &Arc<ChatClient>,
    out: &OutputDir,
    reuse: bool,
) -> Result<Vec<(VariantConfig, Arc<Variant>)>, RunError> {
    if reuse {
        if let Ok(text) = std::fs::read_to_string(out.variants()) {
            if let Ok(saved) = serde_json::from_str::<Vec<VariantEntry>>(&text) {
                let matches = saved.len() == inputs.variants.len()
                    && saved.iter().zip(&inputs.variants).all(|(s, v)| s.name == v.name && s.variant.id.to_string() == inputs.variant_id(v));
                if matches {
                    return Ok(inputs.variants.iter().cloned().zip(saved.into_iter().map(|s| Arc::new(s.variant))).collect());
                }
            }
        }
    }
    let mut built = Vec::with_capacity(inputs.variants.len());
    for v in &inputs.variants {
        let variant = if v.perturbations.iter().any(|s| s.op.needs_provider()) {
            let provider = BlockingProvider::new(
                client.clone(),
                tokio::runtime::Handle::current(),
                format!("paraphrase/{}", v.name),
                Some(cfg.seeds[0]),
            );
            let (base, specs, ctx) = (inputs.questionnaire.clone(), v.perturbations.clone(), inputs.perturbation.clone());
            tokio::task::spawn_blocking(move || apply_pipeline(&base, &specs, &ctx, Some(&provider as &dyn CompletionProvider)))
                .await
                .expect("paraphrase task")
        } else {
            apply_pipeline(&inputs.questionnaire, &v.perturbations, &inputs.perturbation, None)
        }
        .map_err(|source| RunError::Perturb {
            variant: v.name.clone(),
            source,
        })?;
        built.push((v.clone(), Arc::new(variant)));
    }
    let entries: Vec<VariantEntry> = built
        .iter()
        .map(|(v, var)| VariantEntry {
            name: v.name.clone(),
            variant: (**var).clone(),
        })
        .collect();
    write_atomic(&out.variants(), serde_json::to_string_pretty(&entries).expect("variants serialize").as_bytes())?;
    Ok(built)
}

fn prepare_jobs(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    variants: &[(VariantConfig, Arc<Variant>)],
) -> Result<Vec<Job>, RunError> {
    let opts = cfg.compile_options(&inputs.template);
    let mut jobs = Vec::new();
    for persona in &inputs.personas {
        for (vcfg, variant) in variants {
            for &mode in &cfg.modes {
                for method in &cfg.methods {
                    for &seed in &cfg.seeds {
                        let key = PlanKey::new(variant.id.to_string(), method.name(), seed);
                        let plan = render(mode, &variant.questionnaire, persona, &inputs.template, method, &key)?;
                        let mut prepared = Vec::with_capacity(plan.units.len());
                        for unit in plan.units {
                            let (spec, followup) = compile_unit(method, &unit, &variant.questionnaire, &opts)?;
                            prepared.push(Prepared {
                                key: unit.unit_id.to_string(),
                                unit,
                                variant_name: vcfg.name.clone(),
                                variant: variant.clone(),
                                method: method.clone(),
                                spec,
                                followup,
                            });
                        }
                        let system = prepared
                            .first()
                            .and_then(|p| p.spec.messages.iter().find(|m| m.role == Role::System))
                            .map(|m| m.content.clone())
                            .unwrap_or_default();
                        if mode == PresentationMode::Sequential {
                            jobs.push(Job { system, units: prepared });
                        } else {
                            jobs.extend(prepared.into_iter().map(|p| Job {
                                system: system.clone(),
                                units: vec![p],
                            }));
                        }
                    }
                }
            }
        }
    }
    Ok(jobs)
}

fn spawn_writer(
    path: std::path::PathBuf,
    mut rx: mpsc::UnboundedReceiver<UnitRecord>,
    live: Option<Arc<Mutex<RunManifest>>>,
) -> tokio::task::JoinHandle<std::io::Result<()>> {
    tokio::spawn(async move {
        let mut journal = Journal::open(&path)?;
        let index: HashMap<String, usize> = live
            .as_ref()
            .map(|l| {
                l.lock()
                    .expect("live manifest lock")
                    .units
                    .iter()
                    .enumerate()
                    .map(|(i, u)| (u.unit_id.to_string(), i))
                    .collect()
            })
            .unwrap_or_default();
        while let Some(record) = rx.recv().await {
            journal.append(&record)?;
            if let Some(live) = &live {
                let mut m = live.lock().expect("live manifest lock");
                if let Some(&i) = index.get(&record.key()) {
                    m.units[i].status = record.status;
                }
                m.totals.calls += record.calls();
                let u = record.usage();
                m.totals.input_tokens += u.input_tokens;
                m.totals.output_tokens += u.output_tokens;
                m.recount();
            }
        }
        Ok(())
    })
}

/// Conversation history after a unit: its turns plus the reply. A primed
/// assistant turn is merged with its continuation.
fn extend_history(history: &mut Vec<ConversationTurn>, spec: &RequestSpec, reply: &str) {
    history.extend(spec.messages.iter().cloned());
    match history.last_mut() {
        Some(last) if spec.assistant_prefix().is_some() && last.role == Role::Assistant => last.content.push_str(reply),
        _ => history.push(ConversationTurn::assistant(reply)),
    }
}

async fn run_job(exec: Arc<Exec>, job: Job) {
    let mut history: Vec<ConversationTurn> = Vec::new();
    let mut broken: Option<String> = None;
    for p in job.units {
        if exec.abort.load(Ordering::SeqCst) {
            return;
        }
        if !p.unit.depends_on_previous {
            history.clear();
            broken = None;
        }
        if let Some(done) = exec.done.get(&p.key) {
            let reply = done.response.raw_text.clone().unwrap_or_default();
            extend_history(&mut history, &p.spec, &reply);
            continue;
        }
        if let Some(reason) = &broken {
            let record = failed_record(&p, CallRecord::failed(reason.clone(), 0));
            let _ = exec.tx.send(record);
            continue;
        }
        match execute_unit(&exec, &p, &history).await {
            Some(record) => {
                if record.status == UnitStatus::Done {
                    extend_history(&mut history, &p.spec, record.response.raw_text.as_deref().unwrap_or_default());
                } else {
                    broken = Some(format!("skipped: earlier turn {} failed", p.key));
                }
                let _ = exec.tx.send(record);
            }
            None => return,
        }
    }
}

fn unparseable_answers(p: &Prepared, detail: &str) -> Vec<AnswerRecord> {
    p.unit
        .expected_answers
        .iter()
        .map(|qid| AnswerRecord {
            parsed: ParsedAnswer {
                question_id: qid.clone(),
                value: AnswerValue::Unparseable {
                    reason: Reason::ProviderError,
                    detail: Some(detail.to_string()),
                },
                parse_path: surveyor_core::parsers::ParsePath::Json,
                reasoning_text: None,
            },
            base_value: None,
        })
        .collect()
}

fn failed_record(p: &Prepared, response: CallRecord) -> UnitRecord {
    let detail = response.error.clone().unwrap_or_default();
    UnitRecord {
        unit_id: p.unit.unit_id.clone(),
        variant: p.variant_name.clone(),
        status: UnitStatus::Failed,
        response,
        followup: None,
        judge: Vec::new(),
        auxiliary: AuxUsage::default(),
        answers: unparseable_answers(p, &detail),
    }
}

fn call_record(outcome: crate::client::Outcome) -> Result<(CallRecord, Option<crate::wire::Completion>), (CallRecord, bool)> {
    match outcome.result {
        Ok(c) => Ok((
            CallRecord {
                raw_text: Some(c.text.clone()),
                top_logprobs: c.top_logprobs.clone(),
                usage: c.usage,
                attempts: outcome.attempts,
                finish_reason: c.finish_reason.clone(),
                error: None,
                latency_ms: Some(outcome.latency_ms),
            },
            Some(c),
        )),
        Err(e) => {
            let mut r = CallRecord::failed(e.to_string(), outcome.attempts);
            r.latency_ms = Some(outcome.latency_ms);
            Err((r, e.is_auth()))
        }
    }
}

/// Sends one unit (and its follow-up), parses it and builds the record.
/// Returns `None` when the run was aborted.
async fn execute_unit(exec: &Arc<Exec>, p: &Prepared, history: &[ConversationTurn]) -> Option<UnitRecord> {
    let req = ChatRequest::build(&p.spec, history, &exec.cfg.provider);
    let outcome = exec.client.send(&req, &p.key).await;
    let (response, completion) = match call_record(outcome) {
        Ok((r, c)) => (r, c.expect("completion present")),
        Err((r, auth)) => {
            if auth {
                abort(exec, r.error.clone().unwrap_or_default());
                return None;
            }
            return Some(failed_record(p, r));
        }
    };

    let mut followup = None;
    let mut parse_text = completion.text.clone();
    if let Some(spec) = &p.followup {
        let freq = ChatRequest::build(&spec.request(&completion.text), &[], &exec.cfg.provider);
        let out = exec.client.send(&freq, &format!("{}#classify", p.key)).await;
        match call_record(out) {
            Ok((r, c)) => {
                parse_text = c.expect("completion present").text;
                followup = Some(r);
            }
            Err((r, auth)) => {
                if auth {
                    abort(exec, r.error.clone().unwrap_or_default());
                    return None;
                }
                let mut record = failed_record(p, response);
                record.answers = unparseable_answers(p, r.error.as_deref().unwrap_or_default());
                record.followup = Some(r);
                return Some(record);
            }
        }
    }

    let exec2 = exec.clone();
    let (variant, method, unit) = (p.variant.clone(), p.method.clone(), p.unit.clone());
    let raw = completion.text.clone();
    let top = completion.top_logprobs.clone();
    let key = p.key.clone();
    let handle = tokio::runtime::Handle::current();
    let (answers, judge, aux) = tokio::task::spawn_blocking(move || {
        let judge_provider = exec2.cfg.parsing.judge.then(|| {
            BlockingProvider::new(exec2.client.clone(), handle, format!("{key}#judge"), Some(unit.unit_id.seed))
        });
        let parsed = parse_unit(
            &exec2.cfg.parsing,
            &method,
            &unit,
            &variant.questionnaire,
            &exec2.base,
            &exec2.answer_field,
            &raw,
            &parse_text,
            top.as_deref(),
            judge_provider.as_ref().map(|j| j as &dyn CompletionProvider),
        );
        let mut aux = AuxUsage::default();
        for c in judge_provider.map(|j| j.calls()).unwrap_or_default() {
            aux.calls += 1;
            aux.attempts += c.attempts;
            aux.usage.add(Usage {
                input_tokens: c.input_tokens,
                output_tokens: c.output_tokens,
            });
        }
        (parsed.0, parsed.1, aux)
    })
    .await
    .expect("parse task");

    Some(UnitRecord {
        unit_id: p.unit.unit_id.clone(),
        variant: p.variant_name.clone(),
        status: UnitStatus::Done,
        response,
        followup,
        judge,
        auxiliary: aux,
        answers,
    })
}

fn abort(exec: &Exec, reason: String) {
    exec.abort.store(true, Ordering::SeqCst);
    let mut r = exec.abort_reason.lock().expect("abort lock");
    r.get_or_insert(reason);
}

fn judgeable(reason: Reason) -> bool {
    matches!(
        reason,
        Reason::Ambiguous | Reason::NoMatch | Reason::NoJson | Reason::MissingAnswer | Reason::MissingKey
    )
}

/// Parses a reply, optionally consults the judge for unparseable free text
/// and maps every answer to the base questionnaire.
#[allow(clippy::too_many_arguments)]
pub fn parse_unit(
    parsing: &ParsingConfig,
    method: &GenerationMethod,
    unit: &InferenceUnit,
    variant: &Questionnaire,
    base: &Questionnaire,
    answer_field: &str,
    raw_text: &str,
    parse_text: &str,
    top_logprobs: Option<&[surveyor_core::methods::TokenLogprob]>,
    judge: Option<&dyn CompletionProvider>,
) -> (Vec<AnswerRecord>, Vec<JudgeTranscript>) {
    let questions: Vec<&Question> = unit.expected_answers.iter().filter_map(|id| variant.question(id)).collect();
    let ctx = ParseContext {
        method,
        mode: unit.unit_id.mode,
        answer_field,
        think_delimiters: &parsing.think_delimiters,
        alias_prefixes: &parsing.alias_prefixes,
    };
    let mut parsed = parse_response(&ctx, &questions, parse_text, top_logprobs);
    let mut transcripts = Vec::new();
    if let Some(provider) = judge.filter(|_| !method.kind.reads_logprobs() && !method.kind.yields_distribution()) {
        for (a, q) in parsed.iter_mut().zip(&questions) {
            if a.value.reason().is_some_and(judgeable) {
                let (judged, t) = judge_parse(raw_text, q, provider, &parsing.judge_config);
                transcripts.push(t);
                let reasoning = a.reasoning_text.take();
                *a = judged;
                a.reasoning_text = reasoning;
            }
        }
    }
    let answers = parsed
        .into_iter()
        .zip(&questions)
        .map(|(parsed, vq)| {
            let base_value = base
                .question(&parsed.question_id)
                .and_then(|bq| match &parsed.value {
                    AnswerValue::Unparseable { .. } => None,
                    v => surveyor_core::metrics::map_to_base(v, vq, bq),
                });
            AnswerRecord { parsed, base_value }
        })
        .collect();
    (answers, transcripts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_order_groups_stably() {
        let order = prefix_friendly_order(&["a", "b", "a", "c", "b", "a"]);
        assert_eq!(order, vec![0, 2, 5, 1, 4, 3]);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn history_merges_primed_turn() {
        let spec = RequestSpec {
            messages: vec![ConversationTurn::user("q"), ConversationTurn::assistant("Answer:")],
            sampling: surveyor_core::methods::Sampling {
                temperature: None,
                seed: None,
                max_tokens: 1,
            },
            want_logprobs: true,
            top_logprobs: Some(5),
            allowed_outputs: None,
            json_schema: None,
            output_instruction: String::new(),
        };
        let mut h = Vec::new();
        extend_history(&mut h, &spec, " B");
        assert_eq!(h.len(), 2);
        assert_eq!(h[1].content, "Answer: B");
    }
}
