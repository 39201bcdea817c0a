//! The triage-diagnosis-treatment orchestrator: three clinician agents
//! exchanging structured context/thinking/answer messages, a chief agent
//! that approves or critiques each decision, and the batch runner.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::case_model::{label_from_token, Label, PatientCase, Task};
use crate::config::{BackendKind, EmbeddingKind, QueryMode, RunConfig};
use crate::model_backends::{
    BackendError, ChatBackend, ChatRequest, EmbedBackend, HashEmbedBackend, HttpBackendConfig,
    HttpChatBackend, HttpEmbedBackend, MockChatBackend, MockSpec,
};
use crate::record_review::{review_history, ReviewResult};
use crate::reg_retrieval::{
    assemble_cot_context, rerank, retrieve, IdentityReranker, MetadataFilterReranker, Reranker,
    RetrievedSet, VectorIndex,
};

pub const PARSE_FAIL: &str = "PARSE_FAIL";

/// Section headers the orchestrator injects into prompts; the ablation
/// tests key off these to isolate toggled blocks.
pub const DEMOGRAPHICS_HEADER: &str = "PATIENT DEMOGRAPHICS:";
pub const HISTORY_HEADER: &str = "MEDICAL HISTORY:";
pub const PRIOR_HEADER: &str = "PRIOR STAGE DECISIONS:";
pub const GUIDANCE_HEADER: &str = "GUIDANCE:";

/// The three-field structured protocol unit exchanged by agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub context: String,
    pub thinking: String,
    pub answer: String,
}

/// Chief verdict for one attempt; critique is empty iff approved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceVerdict {
    pub approved: bool,
    pub critique: String,
}

impl GuidanceVerdict {
    fn approve() -> Self {
        GuidanceVerdict { approved: true, critique: String::new() }
    }
}

/// A stage answer: a canonical label code, or the parse-failure marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Label(String),
    ParseFail,
}

impl Prediction {
    pub fn as_str(&self) -> &str {
        match self {
            Prediction::Label(code) => code,
            Prediction::ParseFail => PARSE_FAIL,
        }
    }

    pub fn is_parse_fail(&self) -> bool {
        matches!(self, Prediction::ParseFail)
    }
}

impl Serialize for Prediction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == PARSE_FAIL { Prediction::ParseFail } else { Prediction::Label(s) })
    }
}

/// One chat round: the exact prompt sent, the parsed message, the verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub prompt: String,
    pub message: AgentMessage,
    pub verdict: GuidanceVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Task,
    pub attempts: Vec<AttemptRecord>,
    pub final_prediction: Prediction,
    pub guidance_rounds_used: u32,
}

/// Review section of a trace; `Disabled` marks the ablation toggle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "UPPERCASE")]
pub enum ReviewOutcome {
    Disabled,
    Done { result: ReviewResult },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "UPPERCASE")]
pub enum EpisodeStatus {
    Complete,
    Aborted { stage: Task, error: String },
}

/// Full record of one case's pathway run; serializable and replayable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub case_id: String,
    pub config_hash: String,
    pub status: EpisodeStatus,
    pub review: ReviewOutcome,
    /// Doc ids and scores fed to the diagnosis stage; absent when retrieval
    /// is disabled.
    pub retrieved: Option<Vec<DocScore>>,
    pub stages: Vec<StageRecord>,
}

impl EpisodeTrace {
    pub fn stage(&self, task: Task) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == task)
    }
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Prompt templates for each (agent, stage) pair; defaults are embedded and
/// any file of the same name in the templates dir overrides its default.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub triage: String,
    pub diagnosis: String,
    pub treatment: String,
    pub chief_triage: String,
    pub chief_diagnosis: String,
    pub chief_treatment: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            triage: include_str!("../templates/triage.txt").to_string(),
            diagnosis: include_str!("../templates/diagnosis.txt").to_string(),
            treatment: include_str!("../templates/treatment.txt").to_string(),
            chief_triage: include_str!("../templates/chief_triage.txt").to_string(),
            chief_diagnosis: include_str!("../templates/chief_diagnosis.txt").to_string(),
            chief_treatment: include_str!("../templates/chief_treatment.txt").to_string(),
        }
    }
}

impl TemplateSet {
    pub fn load(dir: &Path) -> std::io::Result<TemplateSet> {
        let mut set = TemplateSet::default();
        let slots: [(&str, &mut String); 6] = [
            ("triage.txt", &mut set.triage),
            ("diagnosis.txt", &mut set.diagnosis),
            ("treatment.txt", &mut set.treatment),
            ("chief_triage.txt", &mut set.chief_triage),
            ("chief_diagnosis.txt", &mut set.chief_diagnosis),
            ("chief_treatment.txt", &mut set.chief_treatment),
        ];
        for (file, slot) in slots {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(set)
    }

    fn stage(&self, task: Task) -> &str {
        match task {
            Task::Triage => &self.triage,
            Task::Diagnosis => &self.diagnosis,
            Task::Treatment => &self.treatment,
        }
    }

    fn chief(&self, task: Task) -> &str {
        match task {
            Task::Triage => &self.chief_triage,
            Task::Diagnosis => &self.chief_diagnosis,
            Task::Treatment => &self.chief_treatment,
        }
    }
}

/// Substitute {name} placeholders and collapse blank runs left by empty
/// blocks.
fn render_template(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in substitutions {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    while out.contains("\n\n\n") {
        out = out.replace("\n\n\n", "\n\n");
    }
    out.trim().to_string()
}

fn options_block(task: Task) -> String {
    task.options()
        .iter()
        .map(|(code, title)| format!("{code} - {title}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn demographics_block(case: &PatientCase) -> String {
    format!(
        "{DEMOGRAPHICS_HEADER}\nlanguage: {}; marital status: {}; race: {}; gender: {}",
        case.demographics.language,
        case.demographics.marital_status,
        case.demographics.race,
        case.demographics.gender
    )
}

fn history_block(history: &str) -> String {
    if history.trim().is_empty() {
        String::new()
    } else {
        format!("{HISTORY_HEADER}\n{history}")
    }
}

fn prior_block(prior: &[(Task, AgentMessage)]) -> String {
    if prior.is_empty() {
        return String::new();
    }
    let mut lines = vec![PRIOR_HEADER.to_string()];
    for (task, msg) in prior {
        lines.push(format!("- {} answered: {}", task.name(), msg.answer));
    }
    lines.join("\n")
}

fn guidance_block(critique: &str) -> String {
    if critique.is_empty() {
        String::new()
    } else {
        format!("{GUIDANCE_HEADER}\n{critique}")
    }
}

fn digest(text: &str, limit: usize) -> String {
    let one_line = text.split_whitespace().collect::<Vec<_>>().join(" ");
    one_line.chars().take(limit).collect()
}

fn task_statement(task: Task) -> &'static str {
    match task {
        Task::Triage => "assign the patient to one of 9 admission departments",
        Task::Diagnosis => "identify the primary disease category among 17 options",
        Task::Treatment => "select the appropriate treatment among 16 options",
    }
}

/// The orchestrator-composed context field: task statement, prior answers,
/// and 300-character thinking digests.
fn compose_context(task: Task, prior: &[(Task, AgentMessage)]) -> String {
    let mut parts = vec![format!("Task: {}.", task_statement(task))];
    if !prior.is_empty() {
        let answers: Vec<String> =
            prior.iter().map(|(t, m)| format!("{}={}", t.name(), m.answer)).collect();
        parts.push(format!("Prior answers: {}.", answers.join(", ")));
        for (t, m) in prior {
            if !m.thinking.is_empty() {
                parts.push(format!("{} thinking: {}", t.name(), digest(&m.thinking, 300)));
            }
        }
    }
    parts.join(" ")
}

// ---------------------------------------------------------------------------
// Protocol parsing
// ---------------------------------------------------------------------------

/// Parse a completion into the three protocol fields. Completions without
/// any recognizable header are treated as a bare answer.
pub fn parse_protocol(text: &str) -> AgentMessage {
    let header = Regex::new(r"(?im)^[ \t]*(context|thinking|answer)[ \t]*:").unwrap();
    let mut sections: Vec<(String, usize, usize)> = Vec::new();
    for caps in header.captures_iter(text) {
        let whole = caps.get(0).unwrap();
        let name = caps.get(1).unwrap().as_str().to_lowercase();
        sections.push((name, whole.start(), whole.end()));
    }
    if sections.is_empty() {
        return AgentMessage {
            context: String::new(),
            thinking: String::new(),
            answer: text.trim().to_string(),
        };
    }
    let mut context = String::new();
    let mut thinking = String::new();
    let mut answer = String::new();
    for (i, (name, _, body_start)) in sections.iter().enumerate() {
        let body_end = sections.get(i + 1).map_or(text.len(), |(_, start, _)| *start);
        let body = text[*body_start..body_end].trim().to_string();
        match name.as_str() {
            "context" => context = body,
            "thinking" => thinking = body,
            "answer" => answer = body,
            _ => unreachable!(),
        }
    }
    AgentMessage { context, thinking, answer }
}

/// Canonicalize an answer into a label: direct token match first, then a
/// unique option code appearing as a word, then a unique long title
/// appearing as a substring.
pub fn canonicalize_answer(task: Task, answer: &str) -> Option<Label> {
    if let Ok(label) = label_from_token(task, answer) {
        return Some(label);
    }
    let mut code_hits: Vec<Label> = Vec::new();
    for (code, _) in task.options() {
        let pattern = format!(r"(?i)\b{}\b", regex::escape(code));
        if Regex::new(&pattern).unwrap().is_match(answer) {
            code_hits.push(label_from_token(task, code).unwrap());
        }
    }
    if code_hits.len() == 1 {
        return Some(code_hits[0]);
    }
    let lowered = answer.to_lowercase();
    let mut title_hits: Vec<Label> = Vec::new();
    for (code, title) in task.options() {
        if lowered.contains(&title.to_lowercase()) {
            title_hits.push(label_from_token(task, code).unwrap());
        }
    }
    if title_hits.len() == 1 {
        return Some(title_hits[0]);
    }
    None
}

fn parse_chief_verdict(text: &str) -> GuidanceVerdict {
    let trimmed = text.trim();
    let lowered = trimmed.to_lowercase();
    if lowered.starts_with("approve") {
        return GuidanceVerdict::approve();
    }
    if let Some(rest) = lowered.strip_prefix("revise") {
        let critique = rest.trim_start_matches([':', ' ', '\t']);
        let offset = trimmed.len() - critique.len();
        let critique = trimmed[offset..].trim().to_string();
        if !critique.is_empty() {
            return GuidanceVerdict { approved: false, critique };
        }
    }
    // fail-open on unparseable chief output
    log::warn!("unparseable chief verdict, approving: {trimmed:?}");
    GuidanceVerdict::approve()
}

// ---------------------------------------------------------------------------
// Services
// ---------------------------------------------------------------------------

/// Everything a pathway run needs: backends, knowledge index, templates,
/// reranker hook, and the resolved configuration.
pub struct PathwayServices {
    pub chat: Arc<dyn ChatBackend>,
    pub chief_chat: Arc<dyn ChatBackend>,
    pub embed: Arc<dyn EmbedBackend>,
    pub index: Option<Arc<VectorIndex>>,
    pub reranker: Arc<dyn Reranker>,
    pub templates: TemplateSet,
    pub config: RunConfig,
    pub config_hash: String,
    pub lexicon: Option<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
    #[error("mock backend requires a rules file (backend.mock_rules)")]
    MissingMockRules,
    #[error("bad mock rules file {0}: {1}")]
    BadMockRules(String, #[source] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn load_mock(path: &Path) -> Result<MockChatBackend, ServiceError> {
    let text = std::fs::read_to_string(path)?;
    let spec: MockSpec = serde_json::from_str(&text)
        .map_err(|e| ServiceError::BadMockRules(path.display().to_string(), e))?;
    Ok(MockChatBackend::new(&spec)?)
}

impl PathwayServices {
    /// Build services from a config, loading mock rule files, templates,
    /// and the optional lexicon from disk.
    pub fn from_config(
        config: RunConfig,
        index: Option<VectorIndex>,
    ) -> Result<PathwayServices, ServiceError> {
        // MAP_API_BASE overrides the configured endpoint for live backends
        let base_override = std::env::var(crate::model_backends::ENV_API_BASE).ok();
        let chat: Arc<dyn ChatBackend> = match config.backend.kind {
            BackendKind::Mock => {
                let path =
                    config.backend.mock_rules.as_ref().ok_or(ServiceError::MissingMockRules)?;
                Arc::new(load_mock(path)?)
            }
            BackendKind::Http => {
                let base =
                    base_override.clone().unwrap_or_else(|| config.backend.base_url.clone());
                let mut http = HttpBackendConfig::new(base, config.backend.model.clone());
                http.retry = config.backend.retries.clone();
                http.max_inflight = config.backend.inflight;
                Arc::new(HttpChatBackend::new(http)?)
            }
        };
        let chief_chat: Arc<dyn ChatBackend> = match &config.guidance.chief_mock_rules {
            Some(path) if config.backend.kind == BackendKind::Mock => Arc::new(load_mock(path)?),
            _ => chat.clone(),
        };
        let embed: Arc<dyn EmbedBackend> = match config.embedding.kind {
            EmbeddingKind::Hash => {
                Arc::new(HashEmbedBackend::new(config.embedding.dim, config.embedding.seed))
            }
            EmbeddingKind::Http => {
                let base =
                    base_override.unwrap_or_else(|| config.embedding.base_url.clone());
                let mut http = HttpBackendConfig::new(base, config.embedding.model.clone());
                http.retry = config.backend.retries.clone();
                http.max_inflight = config.backend.inflight;
                Arc::new(HttpEmbedBackend::new(http)?)
            }
        };
        let templates = match &config.templates_dir {
            Some(dir) => TemplateSet::load(dir)?,
            None => TemplateSet::default(),
        };
        let lexicon = match &config.record_review.lexicon {
            Some(path) => Some(
                std::fs::read_to_string(path)?
                    .lines()
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .collect(),
            ),
            None => None,
        };
        let config_hash = config.hash();
        Ok(PathwayServices {
            chat,
            chief_chat,
            embed,
            index: index.map(Arc::new),
            reranker: Arc::new(IdentityReranker),
            templates,
            config,
            config_hash,
            lexicon,
        })
    }

    /// Assemble services around pre-built backends (the hermetic test path).
    pub fn with_backends(
        config: RunConfig,
        chat: Arc<dyn ChatBackend>,
        chief_chat: Arc<dyn ChatBackend>,
        embed: Arc<dyn EmbedBackend>,
        index: Option<VectorIndex>,
    ) -> PathwayServices {
        let config_hash = config.hash();
        PathwayServices {
            chat,
            chief_chat,
            embed,
            index: index.map(Arc::new),
            reranker: Arc::new(IdentityReranker),
            templates: TemplateSet::default(),
            config,
            config_hash,
            lexicon: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Stage execution
// ---------------------------------------------------------------------------

const SYSTEM_PROMPT: &str = "You are a clinical decision-support agent inside an inpatient \
pathway team. Always reply using the structured protocol fields CONTEXT, THINKING, and ANSWER.";

struct StageInputs<'a> {
    case: &'a PatientCase,
    history: &'a str,
    retrieved_context: &'a str,
}

fn build_stage_prompt(
    services: &PathwayServices,
    stage: Task,
    inputs: &StageInputs,
    prior: &[(Task, AgentMessage)],
    guidance: &str,
) -> String {
    render_template(
        services.templates.stage(stage),
        &[
            ("demographics", demographics_block(inputs.case).as_str()),
            ("radiology_report", inputs.case.radiology_report.as_str()),
            ("history", history_block(inputs.history).as_str()),
            ("prior_messages", prior_block(prior).as_str()),
            ("retrieved_context", inputs.retrieved_context),
            ("options", options_block(stage).as_str()),
            ("guidance", guidance_block(guidance).as_str()),
        ],
    )
}

/// Ask the chief to judge one attempt, grounding it with guideline snippets
/// retrieved for the agent's answer.
pub fn chief_review(
    stage: Task,
    msg: &AgentMessage,
    services: &PathwayServices,
) -> Result<GuidanceVerdict, BackendError> {
    let snippets = match &services.index {
        Some(index) => {
            let query = format!("{} {}", msg.answer, digest(&msg.thinking, 300));
            let hits = retrieve(index, &query, 3, services.embed.as_ref())
                .map(|set| {
                    rerank(
                        set,
                        &MetadataFilterReranker { field: "kind".into(), value: "guideline".into() },
                    )
                })
                .unwrap_or(RetrievedSet { hits: Vec::new(), k_requested: 0 });
            hits.hits
                .iter()
                .map(|h| format!("[{}] {}", h.doc.doc_id, h.doc.text))
                .collect::<Vec<_>>()
                .join("\n")
        }
        None => String::new(),
    };
    let snippet_block = if snippets.is_empty() {
        String::new()
    } else {
        format!("GUIDELINE EXCERPTS:\n{snippets}")
    };
    let prompt = render_template(
        services.templates.chief(stage),
        &[
            ("stage", stage.name()),
            ("thinking", msg.thinking.as_str()),
            ("answer", msg.answer.as_str()),
            ("retrieved_context", snippet_block.as_str()),
            ("options", options_block(stage).as_str()),
        ],
    );
    let req = ChatRequest {
        system_prompt: SYSTEM_PROMPT.to_string(),
        user_prompt: prompt,
        temperature: services.config.backend.temperature,
        max_tokens: services.config.backend.max_tokens,
    };
    let resp = services.chief_chat.chat(&req)?;
    Ok(parse_chief_verdict(&resp.text))
}

/// Run one stage: prompt, parse, canonicalize, and loop through chief
/// critiques up to max_rounds retries.
pub fn run_stage(
    stage: Task,
    inputs: &StageInputs,
    prior: &[(Task, AgentMessage)],
    services: &PathwayServices,
) -> Result<StageRecord, BackendError> {
    let chief_applies = services.config.guidance.enabled
        && services.config.guidance.stages.contains(&stage);
    let max_rounds = services.config.guidance.max_rounds;
    let mut attempts: Vec<AttemptRecord> = Vec::new();
    let mut guidance = String::new();
    loop {
        let prompt = build_stage_prompt(services, stage, inputs, prior, &guidance);
        let req = ChatRequest {
            system_prompt: SYSTEM_PROMPT.to_string(),
            user_prompt: prompt.clone(),
            temperature: services.config.backend.temperature,
            max_tokens: services.config.backend.max_tokens,
        };
        let resp = services.chat.chat(&req)?;
        let parsed = parse_protocol(&resp.text);
        // the recorded context is the orchestrator's deterministic digest,
        // not the model's echo
        let message = AgentMessage {
            context: compose_context(stage, prior),
            thinking: parsed.thinking,
            answer: parsed.answer,
        };
        let verdict = if chief_applies {
            chief_review(stage, &message, services)?
        } else {
            GuidanceVerdict::approve()
        };
        let approved = verdict.approved;
        let critique = verdict.critique.clone();
        attempts.push(AttemptRecord { prompt, message, verdict });
        if approved || attempts.len() as u32 > max_rounds {
            break;
        }
        guidance = critique;
    }
    let final_prediction = attempts
        .iter()
        .rev()
        .find_map(|a| canonicalize_answer(stage, &a.message.answer))
        .map(|label| Prediction::Label(label.code().to_string()))
        .unwrap_or(Prediction::ParseFail);
    let guidance_rounds_used = attempts.len() as u32 - 1;
    Ok(StageRecord { stage, attempts, final_prediction, guidance_rounds_used })
}

/// Execute the full pathway for one case: record review, retrieval for the
/// diagnosis stage, then the three stages in order. Backend failures yield
/// a partial trace marked aborted.
pub fn run_pathway(case: &PatientCase, services: &PathwayServices) -> EpisodeTrace {
    let mut trace = EpisodeTrace {
        case_id: case.case_id.clone(),
        config_hash: services.config_hash.clone(),
        status: EpisodeStatus::Complete,
        review: ReviewOutcome::Disabled,
        retrieved: None,
        stages: Vec::new(),
    };
    let abort = |mut trace: EpisodeTrace, stage: Task, err: BackendError| {
        trace.status = EpisodeStatus::Aborted { stage, error: err.to_string() };
        trace
    };

    // record review
    let history: String = if services.config.record_review.enabled {
        let result = match review_history(
            &case.medical_history,
            &case.radiology_report,
            services.embed.as_ref(),
            &services.config.record_review,
            services.lexicon.as_deref(),
        ) {
            Ok(r) => r,
            Err(e) => return abort(trace, Task::Triage, e),
        };
        let history = result.filtered_history.clone();
        trace.review = ReviewOutcome::Done { result };
        history
    } else {
        case.medical_history.clone()
    };

    // retrieval feeds the diagnosis stage
    let mut retrieved_context = String::new();
    if services.config.retrieval.enabled {
        if let Some(index) = &services.index {
            let query = match services.config.retrieval.query_mode {
                QueryMode::Report => case.radiology_report.clone(),
                QueryMode::ReportHistory => {
                    if history.is_empty() {
                        case.radiology_report.clone()
                    } else {
                        format!("{}\n{}", case.radiology_report, history)
                    }
                }
            };
            let hits = match retrieve(
                index,
                &query,
                services.config.retrieval.k,
                services.embed.as_ref(),
            ) {
                Ok(set) => rerank(set, services.reranker.as_ref()),
                Err(crate::reg_retrieval::IndexError::Backend(e)) => {
                    return abort(trace, Task::Diagnosis, e)
                }
                Err(_) => RetrievedSet { hits: Vec::new(), k_requested: 0 },
            };
            trace.retrieved = Some(
                hits.hits
                    .iter()
                    .map(|h| DocScore { doc_id: h.doc.doc_id.clone(), score: h.score })
                    .collect(),
            );
            retrieved_context = assemble_cot_context(&hits, services.config.retrieval.budget);
        }
    }

    let mut prior: Vec<(Task, AgentMessage)> = Vec::new();
    for stage in [Task::Triage, Task::Diagnosis, Task::Treatment] {
        let stage_context = if stage == Task::Diagnosis { retrieved_context.as_str() } else { "" };
        let inputs = StageInputs { case, history: &history, retrieved_context: stage_context };
        match run_stage(stage, &inputs, &prior, services) {
            Ok(record) => {
                if let Some(last) = record.attempts.last() {
                    prior.push((stage, last.message.clone()));
                }
                trace.stages.push(record);
            }
            Err(e) => return abort(trace, stage, e),
        }
    }
    trace
}

/// Run every case with at most `parallelism` concurrent episodes; the
/// output order always matches the input order.
pub fn run_batch(
    cases: &[PatientCase],
    services: &PathwayServices,
    parallelism: usize,
) -> Vec<EpisodeTrace> {
    let parallelism = parallelism.max(1);
    if parallelism == 1 || cases.len() <= 1 {
        return cases.iter().map(|case| run_pathway(case, services)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<EpisodeTrace>>> = Mutex::new(vec![None; cases.len()]);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(cases.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cases.len() {
                    break;
                }
                let trace = run_pathway(&cases[i], services);
                results.lock().unwrap()[i] = Some(trace);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|t| t.expect("every episode completes"))
        .collect()
}

/// Serialize traces as JSON lines.
pub fn write_traces_jsonl(traces: &[EpisodeTrace], path: &Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for trace in traces {
        writeln!(file, "{}", serde_json::to_string(trace).expect("trace serializes"))?;
    }
    Ok(())
}

pub fn read_traces_jsonl(path: &Path) -> std::io::Result<Vec<EpisodeTrace>> {
    let text = std::fs::read_to_string(path)?;
    let mut traces = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let trace: EpisodeTrace = serde_json::from_str(line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        traces.push(trace);
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_model::{Demographics, DiagnosisRecord, DiseaseCategory};
    use crate::model_backends::MockChatBackend;

    fn sample_case() -> PatientCase {
        PatientCase {
            case_id: "7-77".into(),
            demographics: Demographics {
                language: "English".into(),
                marital_status: "SINGLE".into(),
                race: "WHITE".into(),
                gender: "M".into(),
            },
            radiology_report: "Chest x-ray shows a stable lung nodule. Heart size normal.".into(),
            medical_history: "pulmonary nodule noted previously. gout".into(),
            diagnoses: vec![DiagnosisRecord {
                icd_code: "J18".into(),
                icd_version: 10,
                long_title: "Pneumonia".into(),
                category: DiseaseCategory::from_token("D9").unwrap(),
                priority: 1,
            }],
            department: crate::case_model::DepartmentLabel::from_token("MICU").unwrap(),
            treatment: crate::case_model::TreatmentLabel::from_token("T11").unwrap(),
        }
    }

    fn happy_mock() -> Arc<MockChatBackend> {
        Arc::new(MockChatBackend::from_pairs(
            &[
                ("DEPARTMENT OPTIONS", "CONTEXT: triage\nTHINKING: cardiac unit fits\nANSWER: MICU"),
                ("DIAGNOSIS OPTIONS", "CONTEXT: dx\nTHINKING: stable nodule\nANSWER: D9"),
                ("TREATMENT OPTIONS", "CONTEXT: tx\nTHINKING: conservative\nANSWER: T11"),
            ],
            "APPROVE",
        ))
    }

    fn services_with(chat: Arc<dyn ChatBackend>, chief: Arc<dyn ChatBackend>) -> PathwayServices {
        PathwayServices::with_backends(
            RunConfig::default(),
            chat,
            chief,
            Arc::new(HashEmbedBackend::default()),
            None,
        )
    }

    #[test]
    fn parse_protocol_extracts_fields() {
        let msg = parse_protocol("CONTEXT: c here\nTHINKING: because x\nANSWER: CCU");
        assert_eq!(msg.context, "c here");
        assert_eq!(msg.thinking, "because x");
        assert_eq!(msg.answer, "CCU");
    }

    #[test]
    fn parse_protocol_bare_answer() {
        let msg = parse_protocol("  CCU  ");
        assert_eq!(msg.answer, "CCU");
        assert_eq!(msg.thinking, "");
    }

    #[test]
    fn parse_protocol_multiline_thinking() {
        let msg = parse_protocol("THINKING: line one\nline two\nANSWER: D5");
        assert_eq!(msg.thinking, "line one\nline two");
        assert_eq!(msg.answer, "D5");
    }

    #[test]
    fn canonicalize_direct_and_embedded() {
        assert_eq!(canonicalize_answer(Task::Triage, "ccu").unwrap().code(), "CCU");
        assert_eq!(
            canonicalize_answer(Task::Diagnosis, "The most likely category is D9.")
                .unwrap()
                .code(),
            "D9"
        );
        assert_eq!(
            canonicalize_answer(Task::Diagnosis, "Diseases of the respiratory system fit best")
                .unwrap()
                .code(),
            "D9"
        );
        assert!(canonicalize_answer(Task::Diagnosis, "either D9 or D14").is_none());
        assert!(canonicalize_answer(Task::Treatment, "no treatment mentioned").is_none());
    }

    #[test]
    fn canonicalize_does_not_confuse_code_prefixes() {
        assert_eq!(canonicalize_answer(Task::Diagnosis, "answer: D1").unwrap().code(), "D1");
        assert_eq!(canonicalize_answer(Task::Diagnosis, "answer: D14").unwrap().code(), "D14");
    }

    #[test]
    fn chief_verdict_parsing() {
        assert!(parse_chief_verdict("APPROVE").approved);
        assert!(parse_chief_verdict("approve - looks right").approved);
        let revise = parse_chief_verdict(
            "REVISE: The lung nodule feature mentioned in the radiological report seems relevant to this case but was not considered",
        );
        assert!(!revise.approved);
        assert!(revise.critique.starts_with("The lung nodule feature"));
        // fail-open on gibberish
        assert!(parse_chief_verdict("hmm not sure").approved);
        assert!(parse_chief_verdict("REVISE:").approved);
    }

    #[test]
    fn run_stage_happy_path() {
        let services = services_with(happy_mock(), Arc::new(MockChatBackend::from_pairs(&[], "APPROVE")));
        let case = sample_case();
        let inputs = StageInputs { case: &case, history: "", retrieved_context: "" };
        let record = run_stage(Task::Triage, &inputs, &[], &services).unwrap();
        assert_eq!(record.final_prediction, Prediction::Label("MICU".into()));
        assert_eq!(record.guidance_rounds_used, 0);
        assert_eq!(record.attempts.len(), 1);
    }

    #[test]
    fn run_stage_critique_loop() {
        // first diagnosis answer D4; chief only approves D9; the retry
        // prompt carries the guidance block, flipping the agent's answer
        let chat = Arc::new(MockChatBackend::from_pairs(
            &[
                ("GUIDANCE:", "CONTEXT: c\nTHINKING: reconsidered the nodule\nANSWER: D9"),
                ("DIAGNOSIS OPTIONS", "CONTEXT: c\nTHINKING: tumor suspected\nANSWER: D4"),
            ],
            "CONTEXT: c\nTHINKING: t\nANSWER: D4",
        ));
        let chief = Arc::new(MockChatBackend::from_pairs(
            &[("AGENT ANSWER:\nD9", "APPROVE")],
            "REVISE: The lung nodule feature seems relevant but was not considered",
        ));
        let services = services_with(chat, chief);
        let case = sample_case();
        let inputs = StageInputs { case: &case, history: "", retrieved_context: "" };
        let record = run_stage(Task::Diagnosis, &inputs, &[], &services).unwrap();
        assert_eq!(record.attempts.len(), 2);
        assert_eq!(record.guidance_rounds_used, 1);
        assert!(!record.attempts[0].verdict.approved);
        assert!(record.attempts[1].verdict.approved);
        assert_eq!(record.final_prediction, Prediction::Label("D9".into()));
        assert!(record.attempts[1].prompt.contains(GUIDANCE_HEADER));
    }

    #[test]
    fn run_stage_records_parse_fail() {
        let chat = Arc::new(MockChatBackend::from_pairs(&[], "free prose with no option token"));
        let chief = Arc::new(MockChatBackend::from_pairs(&[], "APPROVE"));
        let services = services_with(chat, chief);
        let case = sample_case();
        let inputs = StageInputs { case: &case, history: "", retrieved_context: "" };
        let record = run_stage(Task::Treatment, &inputs, &[], &services).unwrap();
        assert_eq!(record.final_prediction, Prediction::ParseFail);
    }

    #[test]
    fn rounds_never_exceed_max() {
        let chat = Arc::new(MockChatBackend::from_pairs(&[], "CONTEXT: c\nTHINKING: t\nANSWER: D4"));
        let chief = Arc::new(MockChatBackend::from_pairs(&[], "REVISE: never satisfied"));
        let services = services_with(chat, chief);
        let case = sample_case();
        let inputs = StageInputs { case: &case, history: "", retrieved_context: "" };
        let record = run_stage(Task::Diagnosis, &inputs, &[], &services).unwrap();
        assert_eq!(record.attempts.len() as u32, services.config.guidance.max_rounds + 1);
        assert_eq!(record.guidance_rounds_used, services.config.guidance.max_rounds);
        // unapproved but parseable: the last answer still counts
        assert_eq!(record.final_prediction, Prediction::Label("D4".into()));
    }

    #[test]
    fn pathway_produces_three_ordered_stages() {
        let services = services_with(happy_mock(), happy_mock());
        let trace = run_pathway(&sample_case(), &services);
        assert_eq!(trace.status, EpisodeStatus::Complete);
        let stages: Vec<Task> = trace.stages.iter().map(|s| s.stage).collect();
        assert_eq!(stages, vec![Task::Triage, Task::Diagnosis, Task::Treatment]);
        assert!(matches!(trace.review, ReviewOutcome::Done { .. }));
    }

    #[test]
    fn pathway_passes_prior_answers_forward() {
        let services = services_with(happy_mock(), happy_mock());
        let trace = run_pathway(&sample_case(), &services);
        let dx_prompt = &trace.stage(Task::Diagnosis).unwrap().attempts[0].prompt;
        assert!(dx_prompt.contains("triage answered: MICU"));
        let tx_prompt = &trace.stage(Task::Treatment).unwrap().attempts[0].prompt;
        assert!(tx_prompt.contains("triage answered: MICU"));
        assert!(tx_prompt.contains("diagnosis answered: D9"));
    }

    #[test]
    fn pathway_review_disabled_passes_raw_history() {
        let mut config = RunConfig::default();
        config.record_review.enabled = false;
        let services = PathwayServices::with_backends(
            config,
            happy_mock(),
            happy_mock(),
            Arc::new(HashEmbedBackend::default()),
            None,
        );
        let trace = run_pathway(&sample_case(), &services);
        assert_eq!(trace.review, ReviewOutcome::Disabled);
        let prompt = &trace.stage(Task::Triage).unwrap().attempts[0].prompt;
        assert!(prompt.contains("gout"));
    }

    #[test]
    fn pathway_guidance_disabled_single_attempts() {
        let mut config = RunConfig::default();
        config.guidance.enabled = false;
        let services = PathwayServices::with_backends(
            config,
            happy_mock(),
            Arc::new(MockChatBackend::from_pairs(&[], "REVISE: would reject everything")),
            Arc::new(HashEmbedBackend::default()),
            None,
        );
        let trace = run_pathway(&sample_case(), &services);
        assert!(trace.stages.iter().all(|s| s.attempts.len() == 1));
        assert!(trace.stages.iter().all(|s| s.guidance_rounds_used == 0));
    }

    #[test]
    fn pathway_aborts_on_backend_failure() {
        struct FailingBackend;
        impl ChatBackend for FailingBackend {
            fn chat(&self, _req: &ChatRequest) -> Result<crate::model_backends::ChatResponse, BackendError> {
                Err(BackendError::Unavailable("down".into()))
            }
            fn id(&self) -> &str {
                "failing"
            }
        }
        let services = services_with(Arc::new(FailingBackend), happy_mock());
        let trace = run_pathway(&sample_case(), &services);
        assert!(matches!(trace.status, EpisodeStatus::Aborted { stage: Task::Triage, .. }));
        assert!(trace.stages.is_empty());
    }

    #[test]
    fn batch_is_ordered_and_schedule_independent() {
        let services = services_with(happy_mock(), happy_mock());
        let cases: Vec<PatientCase> = (0..20)
            .map(|i| {
                let mut c = sample_case();
                c.case_id = format!("case-{i}");
                c
            })
            .collect();
        let seq = run_batch(&cases, &services, 1);
        let par = run_batch(&cases, &services, 8);
        assert_eq!(seq.len(), 20);
        for (i, trace) in seq.iter().enumerate() {
            assert_eq!(trace.case_id, format!("case-{i}"));
        }
        assert_eq!(seq, par);
    }

    #[test]
    fn trace_serialization_round_trips() {
        let services = services_with(happy_mock(), happy_mock());
        let trace = run_pathway(&sample_case(), &services);
        let json = serde_json::to_string(&trace).unwrap();
        let back: EpisodeTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(trace, back);
    }
}
