//! Multi-expert knowledge distillation: a Director extracts key points from a
//! log, an Executor writes expert knowledge from them, and an Evaluator grades
//! the result against reference examples, feeding failures back for
//! refinement until the knowledge passes or the iteration budget is spent.
//!
//! Role prompts are editable text assets (see `assets/roles/`); defaults ship
//! embedded in the crate.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{KnowledgePair, LogTemplate, Strategy};
use crate::gateway::{CallKey, ChatMessage, ChatRequest, Gateway, GatewayError};

pub const DIRECTOR_CARD: &str = include_str!("../assets/roles/director.txt");
pub const EXECUTOR_CARD: &str = include_str!("../assets/roles/executor.txt");
pub const EVALUATOR_CARD: &str = include_str!("../assets/roles/evaluator.txt");
pub const NEGATIVE_TEMPLATE: &str = include_str!("../assets/roles/negative.txt");
pub const COT_TEMPLATE: &str = include_str!("../assets/roles/cot.txt");
pub const VERDICT_REPROMPT: &str = include_str!("../assets/roles/reprompt.txt");

/// Number of negative reference examples accompanying the one positive.
pub const NEGATIVE_COUNT: usize = 3;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("backend failure during distillation: {source}")]
    Backend {
        source: GatewayError,
        /// Whatever the run had produced before the failure.
        partial: Box<DistillationTrace>,
    },
    #[error("could not parse negative-example response: {raw:?}")]
    NegativeParse { raw: String },
    #[error("could not parse evaluator verdict: {raw:?}")]
    VerdictParse { raw: String },
    #[error("backend returned empty knowledge")]
    EmptyKnowledge,
    #[error("no traces given")]
    EmptyInput,
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("role card error: {0}")]
    RoleCard(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleKind {
    Director,
    Executor,
    Evaluator,
}

impl RoleKind {
    /// Key under which the role's calls are scripted in a mock transcript.
    pub fn key(self) -> &'static str {
        match self {
            RoleKind::Director => "director",
            RoleKind::Executor => "executor",
            RoleKind::Evaluator => "evaluator",
        }
    }

    fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            RoleKind::Director => &["{log}"],
            RoleKind::Executor => &["{log}", "{keypoints}"],
            RoleKind::Evaluator => &["{log}", "{keypoints}", "{content}", "{examples}"],
        }
    }
}

/// One expert's prompt card: who it is, what it must achieve, the constraints
/// on its output, and the user-turn template with named placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleCard {
    pub role: RoleKind,
    pub identity: String,
    pub objective: String,
    pub requirements: String,
    pub template: String,
    /// Executor only: template for the refinement turns ({content},{feedback}).
    #[serde(default)]
    pub refine_template: Option<String>,
}

impl RoleCard {
    /// Parses the sectioned plain-text card format:
    /// `[identity]`, `[objective]`, `[requirements]`, `[template]` and an
    /// optional `[refine_template]`.
    pub fn parse(role: RoleKind, text: &str) -> Result<Self, DistillError> {
        let mut sections: BTreeMap<String, String> = BTreeMap::new();
        let mut current: Option<String> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                current = Some(trimmed[1..trimmed.len() - 1].to_owned());
                sections.entry(current.clone().unwrap()).or_default();
            } else if let Some(name) = &current {
                let section = sections.get_mut(name).expect("section exists");
                section.push_str(line);
                section.push('\n');
            }
        }
        let take = |name: &str| -> Result<String, DistillError> {
            sections
                .get(name)
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| DistillError::RoleCard(format!("missing section [{name}]")))
        };
        let card = RoleCard {
            role,
            identity: take("identity")?,
            objective: take("objective")?,
            requirements: take("requirements")?,
            template: take("template")?,
            refine_template: sections
                .get("refine_template")
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty()),
        };
        card.validate()?;
        Ok(card)
    }

    /// Checks that every placeholder the role uses appears in its template.
    pub fn validate(&self) -> Result<(), DistillError> {
        for ph in self.role.required_placeholders() {
            if !self.template.contains(ph) {
                return Err(DistillError::RoleCard(format!(
                    "{:?} template is missing placeholder {ph}",
                    self.role
                )));
            }
        }
        if let Some(refine) = &self.refine_template {
            for ph in ["{content}", "{feedback}"] {
                if !refine.contains(ph) {
                    return Err(DistillError::RoleCard(format!(
                        "refine template is missing placeholder {ph}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn system_prompt(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}",
            self.identity, self.objective, self.requirements
        )
    }
}

/// The three cards of one distillation team.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleCards {
    pub director: RoleCard,
    pub executor: RoleCard,
    pub evaluator: RoleCard,
}

impl RoleCards {
    /// The built-in default cards.
    pub fn builtin() -> Self {
        RoleCards {
            director: RoleCard::parse(RoleKind::Director, DIRECTOR_CARD).expect("builtin card"),
            executor: RoleCard::parse(RoleKind::Executor, EXECUTOR_CARD).expect("builtin card"),
            evaluator: RoleCard::parse(RoleKind::Evaluator, EVALUATOR_CARD).expect("builtin card"),
        }
    }

    /// Loads `director.txt`, `executor.txt` and `evaluator.txt` from a
    /// directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, DistillError> {
        let dir = dir.as_ref();
        let read = |name: &str, role: RoleKind| -> Result<RoleCard, DistillError> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                DistillError::RoleCard(format!("cannot read {}: {e}", path.display()))
            })?;
            RoleCard::parse(role, &text)
        };
        Ok(RoleCards {
            director: read("director.txt", RoleKind::Director)?,
            executor: read("executor.txt", RoleKind::Executor)?,
            evaluator: read("evaluator.txt", RoleKind::Evaluator)?,
        })
    }
}

/// The three aspects the Evaluator grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Completeness,
    Consistency,
    Conciseness,
}

impl Aspect {
    pub const ALL: [Aspect; 3] = [Aspect::Completeness, Aspect::Consistency, Aspect::Conciseness];

    pub fn parse(s: &str) -> Option<Aspect> {
        match s.trim().to_ascii_lowercase().as_str() {
            "completeness" => Some(Aspect::Completeness),
            "consistency" => Some(Aspect::Consistency),
            "conciseness" => Some(Aspect::Conciseness),
            _ => None,
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Aspect::Completeness => "completeness",
            Aspect::Consistency => "consistency",
            Aspect::Conciseness => "conciseness",
        };
        f.write_str(name)
    }
}

/// A deliberately degraded knowledge text with the aspects it violates and
/// the stated reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeExample {
    pub text: String,
    pub violated_aspects: Vec<Aspect>,
    pub reason: String,
}

/// One positive knowledge plus exactly three negatives for the same log,
/// handed to the Evaluator as grading references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveExampleSet {
    pub log: LogTemplate,
    pub positive: String,
    pub negatives: Vec<NegativeExample>,
}

impl ContrastiveExampleSet {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.positive.trim().is_empty() {
            return Err(DistillError::BadInput("positive example is empty".into()));
        }
        if self.negatives.len() != NEGATIVE_COUNT {
            return Err(DistillError::BadInput(format!(
                "expected {NEGATIVE_COUNT} negatives, got {}",
                self.negatives.len()
            )));
        }
        for (i, n) in self.negatives.iter().enumerate() {
            if n.violated_aspects.is_empty() {
                return Err(DistillError::BadInput(format!(
                    "negative {i} lists no violated aspect"
                )));
            }
            if n.reason.trim().is_empty() {
                return Err(DistillError::BadInput(format!("negative {i} has no reason")));
            }
        }
        Ok(())
    }

    /// Renders the block embedded into every Evaluator prompt: exactly one
    /// positive and three negatives.
    pub fn render(&self) -> String {
        let mut out = format!(
            "Reference log: {}\n\nPositive example:\n{}\n",
            self.log.template_text, self.positive
        );
        for (i, n) in self.negatives.iter().enumerate() {
            let aspects = n
                .violated_aspects
                .iter()
                .map(Aspect::to_string)
                .collect::<Vec<_>>()
                .join(", ");
            out.push_str(&format!(
                "\nNegative example {} (violates {}):\n{}\nReason: {}\n",
                i + 1,
                aspects,
                n.text,
                n.reason
            ));
        }
        out
    }

    /// A hand-curated set usable when no project-specific examples exist yet.
    pub fn builtin() -> Self {
        let log = LogTemplate::from_text(
            "OSPF neighbor state changed to Down (Interface=<*>, NeighborId=<*>)",
        );
        ContrastiveExampleSet {
            log,
            positive: "The OSPF adjacency on the named interface went down: the router \
stopped receiving hello packets from the neighbor identified by NeighborId. Interface names \
the local port, NeighborId the peer's router id. Common causes are a physical link failure, \
an MTU or timer mismatch, or the peer restarting. Check the interface state, verify hello and \
dead timers on both ends, and inspect the peer router; the adjacency re-forms once hellos \
resume."
                .into(),
            negatives: vec![
                NegativeExample {
                    text: "The OSPF adjacency on the named interface went down. The \
adjacency re-forms once hellos resume."
                        .into(),
                    violated_aspects: vec![Aspect::Completeness],
                    reason: "The modified knowledge drops the parameter meanings, the \
probable causes and the handling procedure, so it no longer covers the log completely."
                        .into(),
                },
                NegativeExample {
                    text: "The BGP session on the named interface was closed because the \
hold timer expired. Interface names the local port. Restart the BGP process to recover."
                        .into(),
                    violated_aspects: vec![Aspect::Consistency],
                    reason: "The modified knowledge describes a BGP event although the log \
reports an OSPF neighbor going down, contradicting the log text."
                        .into(),
                },
                NegativeExample {
                    text: "The OSPF adjacency on the named interface went down, which means \
the OSPF adjacency is no longer up on that interface. Generally speaking, networks can \
experience many kinds of issues, and issues can have many kinds of causes, so it is \
important to investigate. Check the interface state, verify hello and dead timers on both \
ends, and inspect the peer router. As mentioned, the adjacency went down."
                        .into(),
                    violated_aspects: vec![Aspect::Conciseness],
                    reason: "The modified knowledge repeats itself and pads the text with \
vague filler sentences that add no information."
                        .into(),
                },
            ],
        }
    }
}

/// The Evaluator's parsed judgement of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationVerdict {
    pub pass: bool,
    pub failed_aspects: Vec<Aspect>,
    pub feedback: String,
}

impl EvaluationVerdict {
    pub fn pass() -> Self {
        EvaluationVerdict {
            pass: true,
            failed_aspects: Vec::new(),
            feedback: String::new(),
        }
    }
}

/// Full record of one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationTrace {
    pub log: LogTemplate,
    pub keypoints: String,
    pub generations: Vec<String>,
    pub verdicts: Vec<EvaluationVerdict>,
    pub epochs_used: usize,
    pub final_knowledge: String,
    pub max_epochs: usize,
}

impl DistillationTrace {
    fn empty(log: &LogTemplate, max_epochs: usize) -> Self {
        DistillationTrace {
            log: log.clone(),
            keypoints: String::new(),
            generations: Vec::new(),
            verdicts: Vec::new(),
            epochs_used: 0,
            final_knowledge: String::new(),
            max_epochs,
        }
    }
}

/// Substitutes `{name}` placeholders.
fn render(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (name, value) in substitutions {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

/// Parses the Evaluator's verdict line.
///
/// Grammar: `PASS` or `FAIL: <aspect>[,<aspect>]* | <feedback>`, keyword
/// case-insensitive, aspects drawn from the three requirement names.
pub fn parse_verdict(evaluator_output: &str) -> Result<EvaluationVerdict, DistillError> {
    let raw = evaluator_output.trim();
    if raw.eq_ignore_ascii_case("pass") {
        return Ok(EvaluationVerdict::pass());
    }
    let err = || DistillError::VerdictParse {
        raw: evaluator_output.to_owned(),
    };
    let lower = raw.to_ascii_lowercase();
    let rest = lower.strip_prefix("fail:").ok_or_else(err)?;
    let rest_original = &raw[raw.len() - rest.len()..];
    let (aspects_part, feedback) = rest_original.split_once('|').ok_or_else(err)?;
    let mut failed_aspects = Vec::new();
    for name in aspects_part.split(',') {
        let aspect = Aspect::parse(name).ok_or_else(err)?;
        if !failed_aspects.contains(&aspect) {
            failed_aspects.push(aspect);
        }
    }
    let feedback = feedback.trim().to_owned();
    if failed_aspects.is_empty() || feedback.is_empty() {
        return Err(err());
    }
    Ok(EvaluationVerdict {
        pass: false,
        failed_aspects,
        feedback,
    })
}

/// One role's threaded conversation against the gateway. Turn indices count
/// the role's own calls within the current run, which keys the mock script.
struct RoleConversation<'a> {
    gateway: &'a Gateway,
    model: &'a str,
    key: &'static str,
    turns: u32,
    messages: Vec<ChatMessage>,
}

impl<'a> RoleConversation<'a> {
    fn new(gateway: &'a Gateway, model: &'a str, key: &'static str, system: String) -> Self {
        RoleConversation {
            gateway,
            model,
            key,
            turns: 0,
            messages: vec![ChatMessage::system(system)],
        }
    }

    fn call(&mut self, user_message: String) -> Result<String, GatewayError> {
        let request = ChatRequest::with_history(self.model, &self.messages, user_message);
        let reply = self
            .gateway
            .complete(CallKey::new(self.key, self.turns), &request)?;
        self.turns += 1;
        self.messages = request.messages;
        self.messages.push(ChatMessage::assistant(reply.clone()));
        Ok(reply)
    }
}

/// Builds the contrastive example set by prompting the model to degrade a
/// confirmed positive, one modification prompt per negative. Each prompt
/// carries the raw log, the positive knowledge, the key points and the three
/// evaluation requirements; each response must state the modified text and
/// the reason it fails.
pub fn build_negative_examples(
    positive: &str,
    log: &LogTemplate,
    keypoints: &str,
    target_aspects: &[Vec<Aspect>],
    gateway: &Gateway,
    model: &str,
) -> Result<ContrastiveExampleSet, DistillError> {
    if positive.trim().is_empty() {
        return Err(DistillError::BadInput("positive knowledge is empty".into()));
    }
    if target_aspects.len() != NEGATIVE_COUNT {
        return Err(DistillError::BadInput(format!(
            "expected {NEGATIVE_COUNT} target aspect sets, got {}",
            target_aspects.len()
        )));
    }
    if target_aspects.iter().any(Vec::is_empty) {
        return Err(DistillError::BadInput(
            "every negative needs at least one target aspect".into(),
        ));
    }

    let mut negatives = Vec::with_capacity(NEGATIVE_COUNT);
    for (turn, aspects) in target_aspects.iter().enumerate() {
        let aspect_names = aspects
            .iter()
            .map(Aspect::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        let prompt = render(
            NEGATIVE_TEMPLATE,
            &[
                ("aspects", aspect_names.as_str()),
                ("log", log.template_text.as_str()),
                ("positive", positive),
                ("keypoints", keypoints),
            ],
        );
        let request = ChatRequest::new(model, vec![ChatMessage::user(prompt)]);
        let raw = gateway.complete(CallKey::new("negative", turn as u32), &request)?;
        let (text, reason) = parse_negative_response(&raw).ok_or(DistillError::NegativeParse {
            raw: raw.clone(),
        })?;
        negatives.push(NegativeExample {
            text,
            violated_aspects: aspects.clone(),
            reason,
        });
    }

    let set = ContrastiveExampleSet {
        log: log.clone(),
        positive: positive.to_owned(),
        negatives,
    };
    set.validate()?;
    Ok(set)
}

fn parse_negative_response(raw: &str) -> Option<(String, String)> {
    let modified_at = raw.find("MODIFIED:")?;
    let after_modified = &raw[modified_at + "MODIFIED:".len()..];
    let reason_at = after_modified.find("REASON:")?;
    let text = after_modified[..reason_at].trim().to_owned();
    let reason = after_modified[reason_at + "REASON:".len()..].trim().to_owned();
    (!text.is_empty() && !reason.is_empty()).then_some((text, reason))
}

/// Runs the full generate/evaluate/refine loop for one log.
///
/// The Director derives key points once; the Executor produces the initial
/// content; then up to `max_epochs` evaluation rounds run, each failing round
/// triggering one regeneration. A regeneration produced in the final round is
/// emitted without being re-evaluated.
pub fn distill(
    log: &LogTemplate,
    gateway: &Gateway,
    model: &str,
    roles: &RoleCards,
    examples: &ContrastiveExampleSet,
    max_epochs: usize,
) -> Result<(KnowledgePair, DistillationTrace), DistillError> {
    if max_epochs == 0 {
        return Err(DistillError::BadInput("max_epochs must be >= 1".into()));
    }
    roles.director.validate()?;
    roles.executor.validate()?;
    roles.evaluator.validate()?;
    examples.validate()?;

    let mut trace = DistillationTrace::empty(log, max_epochs);
    let fail = |source: GatewayError, trace: &DistillationTrace| DistillError::Backend {
        source,
        partial: Box::new(trace.clone()),
    };

    let mut director = RoleConversation::new(
        gateway,
        model,
        RoleKind::Director.key(),
        roles.director.system_prompt(),
    );
    let keypoints = director
        .call(render(
            &roles.director.template,
            &[("log", log.template_text.as_str())],
        ))
        .map_err(|e| fail(e, &trace))?;
    trace.keypoints = keypoints.clone();

    let mut executor = RoleConversation::new(
        gateway,
        model,
        RoleKind::Executor.key(),
        roles.executor.system_prompt(),
    );
    let mut content = executor
        .call(render(
            &roles.executor.template,
            &[
                ("log", log.template_text.as_str()),
                ("keypoints", keypoints.as_str()),
            ],
        ))
        .map_err(|e| fail(e, &trace))?;
    trace.generations.push(content.clone());

    let mut evaluator = RoleConversation::new(
        gateway,
        model,
        RoleKind::Evaluator.key(),
        roles.evaluator.system_prompt(),
    );
    let examples_block = examples.render();
    let refine_template = roles
        .executor
        .refine_template
        .as_deref()
        .unwrap_or(DEFAULT_REFINE_TEMPLATE);

    let mut passed = false;
    for epoch in 1..=max_epochs {
        let eval_prompt = render(
            &roles.evaluator.template,
            &[
                ("log", log.template_text.as_str()),
                ("keypoints", keypoints.as_str()),
                ("content", content.as_str()),
                ("examples", examples_block.as_str()),
            ],
        );
        let raw = evaluator.call(eval_prompt).map_err(|e| fail(e, &trace))?;
        let verdict = match parse_verdict(&raw) {
            Ok(v) => v,
            // Real models drift from formats; one re-prompt, then give up.
            Err(_) => {
                let raw = evaluator
                    .call(VERDICT_REPROMPT.to_owned())
                    .map_err(|e| fail(e, &trace))?;
                parse_verdict(&raw)?
            }
        };
        let verdict_failed = !verdict.pass;
        let feedback = verdict.feedback.clone();
        trace.verdicts.push(verdict);
        trace.epochs_used = epoch;
        if !verdict_failed {
            passed = true;
            break;
        }
        content = executor
            .call(render(
                refine_template,
                &[("content", content.as_str()), ("feedback", feedback.as_str())],
            ))
            .map_err(|e| fail(e, &trace))?;
        trace.generations.push(content.clone());
    }

    trace.final_knowledge = content.clone();
    let pair = KnowledgePair {
        template: log.clone(),
        knowledge_text: content,
        strategy: Strategy::Mec,
        epochs_used: trace.epochs_used,
        passed,
        trace_ref: None,
    };
    Ok((pair, trace))
}

const DEFAULT_REFINE_TEMPLATE: &str = "Your previous knowledge did not meet the evaluation \
requirements.\n\nPrevious knowledge:\n{content}\n\nEvaluator feedback:\n{feedback}\n\nRewrite \
the expert knowledge so it fixes the reported problems.";

/// Single-prompt chain-of-thought distillation, the non-collaborative
/// baseline strategy.
pub fn cot_distill(
    log: &LogTemplate,
    gateway: &Gateway,
    model: &str,
) -> Result<KnowledgePair, DistillError> {
    let prompt = render(COT_TEMPLATE, &[("log", log.template_text.as_str())]);
    let request = ChatRequest::new(model, vec![ChatMessage::user(prompt)]);
    let knowledge = gateway.complete(CallKey::new("cot", 0), &request)?;
    if knowledge.trim().is_empty() {
        return Err(DistillError::EmptyKnowledge);
    }
    Ok(KnowledgePair {
        template: log.clone(),
        knowledge_text: knowledge,
        strategy: Strategy::Cot,
        epochs_used: 0,
        passed: true,
        trace_ref: None,
    })
}

/// Grades arbitrary knowledge text (for example documentation-sourced) with
/// the Evaluator role alone.
pub fn audit_knowledge(
    log: &LogTemplate,
    knowledge: &str,
    gateway: &Gateway,
    model: &str,
    evaluator: &RoleCard,
    examples: &ContrastiveExampleSet,
) -> Result<EvaluationVerdict, DistillError> {
    if knowledge.trim().is_empty() {
        return Err(DistillError::BadInput("knowledge is empty".into()));
    }
    evaluator.validate()?;
    examples.validate()?;

    let mut convo = RoleConversation::new(
        gateway,
        model,
        RoleKind::Evaluator.key(),
        evaluator.system_prompt(),
    );
    let prompt = render(
        &evaluator.template,
        &[
            ("log", log.template_text.as_str()),
            ("keypoints", "(not provided)"),
            ("content", knowledge),
            ("examples", examples.render().as_str()),
        ],
    );
    let raw = convo.call(prompt)?;
    match parse_verdict(&raw) {
        Ok(v) => Ok(v),
        Err(_) => {
            let raw = convo.call(VERDICT_REPROMPT.to_owned())?;
            parse_verdict(&raw)
        }
    }
}

/// Per-epoch failure proportions and the aspect histogram over failing
/// verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// `proportions[e]` = failing verdicts at epoch e+1 over traces evaluated
    /// at that epoch.
    pub proportions: Vec<f64>,
    pub evaluated: Vec<usize>,
    pub failed: Vec<usize>,
    pub aspect_counts: BTreeMap<Aspect, usize>,
}

pub fn iteration_stats(traces: &[DistillationTrace]) -> Result<IterationStats, DistillError> {
    if traces.is_empty() {
        return Err(DistillError::EmptyInput);
    }
    let max_epochs = traces[0].max_epochs;
    if traces.iter().any(|t| t.max_epochs != max_epochs) {
        return Err(DistillError::BadInput(
            "traces disagree on max_epochs".into(),
        ));
    }

    let deepest = traces.iter().map(|t| t.verdicts.len()).max().unwrap_or(0);
    let mut evaluated = vec![0usize; deepest];
    let mut failed = vec![0usize; deepest];
    let mut aspect_counts: BTreeMap<Aspect, usize> = BTreeMap::new();
    for trace in traces {
        for (idx, verdict) in trace.verdicts.iter().enumerate() {
            evaluated[idx] += 1;
            if !verdict.pass {
                failed[idx] += 1;
                for aspect in &verdict.failed_aspects {
                    *aspect_counts.entry(*aspect).or_default() += 1;
                }
            }
        }
    }
    let proportions = failed
        .iter()
        .zip(&evaluated)
        .map(|(&f, &n)| f as f64 / n as f64)
        .collect();
    Ok(IterationStats {
        proportions,
        evaluated,
        failed,
        aspect_counts,
    })
}
