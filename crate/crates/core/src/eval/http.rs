//! Evaluator that executes each node against a chat-completions endpoint.
//!
//! Nodes run in topological order. `Input` nodes make no call and emit the
//! instance input; every other node receives its rendered prompt as the system
//! message and the problem plus upstream outputs as the user message. The
//! final node's output is graded. Token usage is taken from the `usage` block
//! of each response.

use std::collections::BTreeMap;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{DatasetInstance, EvalError, Evaluator, InstanceFailure, InstanceRun, NodeCall};
use crate::graph::{NodeId, OperatorKind, WorkflowGraph, WorkflowNode};

pub const API_KEY_ENV: &str = "SLIM_API_KEY";
pub const API_BASE_ENV: &str = "SLIM_API_BASE";

/// Compares the final node output with the instance target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Grader {
    /// Trimmed string equality.
    Exact,
    /// Last number in the output within `tolerance` of the target.
    Numeric { tolerance: f64 },
}

impl Grader {
    pub fn grade(&self, output: &str, target: &Value) -> f64 {
        let hit = match self {
            Grader::Exact => output.trim() == target_text(target).trim(),
            Grader::Numeric { tolerance } => match (last_number(output), target_number(target)) {
                (Some(got), Some(want)) => (got - want).abs() <= *tolerance,
                _ => false,
            },
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

fn target_text(target: &Value) -> String {
    match target {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn target_number(target: &Value) -> Option<f64> {
    match target {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => last_number(s),
        _ => None,
    }
}

fn last_number(text: &str) -> Option<f64> {
    let re = Regex::new(r"-?\d[\d,]*(?:\.\d+)?(?:[eE][-+]?\d+)?").expect("valid regex");
    re.find_iter(text)
        .last()
        .and_then(|m| m.as_str().replace(',', "").parse().ok())
}

/// Bounded retry with deterministic exponential backoff (no jitter).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

#[derive(Debug, Clone)]
pub struct HttpEvaluatorConfig {
    pub base_url: String,
    pub api_key: String,
    pub grader: Grader,
    /// Prompt texts keyed by `prompt_ref`.
    pub prompts: BTreeMap<String, String>,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub parallelism: usize,
}

impl HttpEvaluatorConfig {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, grader: Grader) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            grader,
            prompts: BTreeMap::new(),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
            parallelism: 4,
        }
    }

    /// Reads the endpoint and credential from `SLIM_API_BASE` / `SLIM_API_KEY`.
    pub fn from_env(grader: Grader) -> Result<Self, EvalError> {
        let base = std::env::var(API_BASE_ENV).map_err(|_| EvalError::Config(format!("{API_BASE_ENV} is not set")))?;
        let key = std::env::var(API_KEY_ENV).map_err(|_| EvalError::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self::new(base, key, grader))
    }
}

pub struct HttpEvaluator {
    config: HttpEvaluatorConfig,
    client: reqwest::blocking::Client,
}

impl HttpEvaluator {
    pub fn new(config: HttpEvaluatorConfig) -> Result<Self, EvalError> {
        if config.base_url.trim().is_empty() {
            return Err(EvalError::Config("endpoint URL is empty".into()));
        }
        if config.api_key.is_empty() {
            return Err(EvalError::Config("API credential is empty".into()));
        }
        if config.retry.attempts == 0 {
            return Err(EvalError::Config("retry attempts must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| EvalError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn system_prompt(&self, node: &WorkflowNode, instance: &DatasetInstance) -> String {
        let text = node
            .prompt_ref
            .as_ref()
            .and_then(|key| self.config.prompts.get(key))
            .cloned()
            .or_else(|| (!node.description.is_empty()).then(|| node.description.clone()))
            .unwrap_or_else(|| default_role(&node.operator));
        text.replace("{input}", &instance.input)
    }

    fn call(&self, model: &str, system: &str, user: &str) -> Result<Completion, String> {
        let body = json!({
            "model": model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
        });
        let attempts = self.config.retry.attempts;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.delay(attempt - 1));
            }
            let sent = self
                .client
                .post(self.endpoint())
                .bearer_auth(&self.config.api_key)
                .json(&body)
                .send();
            let response = match sent {
                Ok(r) => r,
                Err(e) => {
                    last_error = format!("transport error: {e}");
                    continue;
                }
            };
            let status = response.status().as_u16();
            if status == 429 || status >= 500 {
                last_error = format!("HTTP {status}");
                continue;
            }
            if !(200..300).contains(&status) {
                return Err(format!("HTTP {status} (not retried)"));
            }
            let payload: Value = response.json().map_err(|e| format!("malformed response: {e}"))?;
            return parse_completion(&payload);
        }
        Err(format!("request failed after {attempts} attempts: {last_error}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Completion {
    content: String,
    prompt_tokens: u64,
    completion_tokens: u64,
}

fn parse_completion(payload: &Value) -> Result<Completion, String> {
    let content = payload
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or("malformed response: missing choices[0].message.content")?;
    let usage = |field: &str| {
        payload
            .pointer(&format!("/usage/{field}"))
            .and_then(Value::as_u64)
            .ok_or(format!("malformed response: missing usage.{field}"))
    };
    Ok(Completion {
        content: content.to_string(),
        prompt_tokens: usage("prompt_tokens")?,
        completion_tokens: usage("completion_tokens")?,
    })
}

fn default_role(kind: &OperatorKind) -> String {
    match kind {
        OperatorKind::AnswerFormat { dataset } => {
            format!("Extract the final answer for the {dataset} task. Reply with the answer only.")
        }
        OperatorKind::ScEnsemble => {
            "Several candidate solutions follow. Reply with the answer most of them agree on.".into()
        }
        _ => "Think step by step and solve the problem.".into(),
    }
}

impl Evaluator for HttpEvaluator {
    fn run(&self, graph: &WorkflowGraph, instance: &DatasetInstance) -> Result<InstanceRun, InstanceFailure> {
        let order = graph.topo_order().map_err(|e| InstanceFailure::Fatal(e.to_string()))?;
        let mut outputs: BTreeMap<NodeId, String> = BTreeMap::new();
        let mut calls = Vec::new();
        for id in &order {
            let node = graph.node(id).expect("topo order lists graph nodes");
            if node.operator == OperatorKind::Input {
                outputs.insert(id.clone(), instance.input.clone());
                continue;
            }
            let mut user = format!("Problem:\n{}", instance.input);
            for pred in graph.predecessors(id).expect("node exists") {
                let node_pred = graph.node(&pred).expect("edge endpoints exist");
                if node_pred.operator == OperatorKind::Input {
                    continue;
                }
                if let Some(text) = outputs.get(&pred) {
                    user.push_str(&format!("\n\nOutput of {pred}:\n{text}"));
                }
            }
            let system = self.system_prompt(node, instance);
            match self.call(node.model.as_str(), &system, &user) {
                Ok(done) => {
                    calls.push(NodeCall {
                        node: id.clone(),
                        model: node.model.clone(),
                        input_tokens: done.prompt_tokens,
                        output_tokens: done.completion_tokens,
                    });
                    outputs.insert(id.clone(), done.content);
                }
                Err(message) => {
                    return Err(InstanceFailure::Instance {
                        message: format!("node {id}: {message}"),
                        calls,
                    })
                }
            }
        }
        let answer = outputs.get(graph.final_id()).cloned().unwrap_or_default();
        Ok(InstanceRun {
            score: self.config.grader.grade(&answer, &instance.target),
            calls,
        })
    }

    fn max_parallelism(&self) -> usize {
        self.config.parallelism.max(1)
    }
}
