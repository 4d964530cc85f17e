//! Querying LLM providers for attribute values.
//!
//! Each provider is one annotator. Every (provider, product) pair gets one
//! prompt; the answer is normalized into the attribute's label set and emitted
//! as an [`AnnotationRecord`]. Requests that still fail after retries produce
//! no record, which the ensemble treats as a missing cell.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use reqwest::{StatusCode, Url};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::error::{Error, Result};
use crate::label::{encode_label, normalize, AnnotationRecord, AttributeSchema, ExtendedLabel};

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/default_prompt.txt");

const PLACEHOLDERS: [&str; 4] = ["{title}", "{description}", "{attribute}", "{labels}"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductText {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
}

impl ProductText {
    pub fn validate(&self) -> Result<()> {
        if self.item_id.trim().is_empty() {
            return Err(Error::input("product item_id is empty"));
        }
        if self.title.trim().is_empty() {
            return Err(Error::input(format!(
                "product `{}` has an empty title",
                self.item_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    /// Each of `{title}`, `{description}`, `{attribute}` and `{labels}` must
    /// occur exactly once.
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        for p in PLACEHOLDERS {
            let n = text.matches(p).count();
            if n != 1 {
                return Err(Error::input(format!(
                    "prompt template must contain {p} exactly once, found {n}"
                )));
            }
        }
        Ok(PromptTemplate { text })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

/// Substitutes the placeholders in a single left-to-right pass, so
/// placeholder-like text inside the product never gets expanded.
pub fn render_prompt(
    template: &PromptTemplate,
    product: &ProductText,
    schema: &AttributeSchema,
) -> String {
    let labels = schema.labels().join(", ");
    let mut out = String::with_capacity(
        template.text.len() + product.title.len() + product.description.len(),
    );
    let mut rest = template.text.as_str();
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let hit = PLACEHOLDERS.iter().find(|p| tail.starts_with(**p));
        match hit {
            Some(&p) => {
                out.push_str(match p {
                    "{title}" => product.title.trim(),
                    "{description}" => product.description.trim(),
                    "{attribute}" => schema.name(),
                    _ => &labels,
                });
                rest = &tail[p.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Surface form → canonical label, applied after response cleanup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymMap {
    map: HashMap<String, String>,
}

impl SynonymMap {
    pub fn new<K: AsRef<str>, V: AsRef<str>>(
        schema: &AttributeSchema,
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Self> {
        let mut map = HashMap::new();
        for (from, to) in pairs {
            let key = clean_response(from.as_ref());
            let target = encode_label(schema, to.as_ref());
            let Some(canonical) = schema.decode(target) else {
                return Err(Error::input(format!(
                    "synonym `{}` maps to `{}`, which is not a label of `{}`",
                    from.as_ref(),
                    to.as_ref(),
                    schema.name()
                )));
            };
            let own = encode_label(schema, &key);
            if !own.is_missing() && own != target {
                return Err(Error::input(format!(
                    "synonym `{}` would redirect label `{}`",
                    from.as_ref(),
                    schema.decode(own).unwrap_or_default()
                )));
            }
            if key.is_empty() {
                return Err(Error::input("empty synonym"));
            }
            map.insert(key, canonical.to_string());
        }
        Ok(SynonymMap { map })
    }

    /// Reads a JSON object of `"surface": "label"` pairs.
    pub fn from_file(path: &Path, schema: &AttributeSchema) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let pairs: BTreeMap<String, String> =
            serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?;
        Self::new(schema, pairs)
    }

    pub fn get(&self, cleaned: &str) -> Option<&str> {
        self.map.get(cleaned).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn is_strippable(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            '"' | '\''
                | '`'
                | '\u{2018}'
                | '\u{2019}'
                | '\u{201c}'
                | '\u{201d}'
                | '.'
                | ','
                | ';'
                | ':'
                | '!'
                | '?'
        )
}

/// Strips surrounding whitespace, quotes and punctuation, then case-folds.
fn clean_response(raw: &str) -> String {
    let leading_trimmed = raw.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '\u{2018}' | '\u{201c}')
    });
    normalize(leading_trimmed.trim_end_matches(is_strippable))
}

/// Maps a free-text answer into the label set. Anything that is not exactly a
/// label (or a known synonym) after cleanup is missing; labels embedded in
/// longer sentences are not searched for.
pub fn parse_response(raw: &str, schema: &AttributeSchema, synonyms: &SynonymMap) -> ExtendedLabel {
    let cleaned = clean_response(raw);
    match synonyms.get(&cleaned) {
        Some(canonical) => encode_label(schema, canonical),
        None => encode_label(schema, &cleaned),
    }
}

/// Failure of a single completion request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// Worth retrying: timeouts, rate limits, server errors.
    Transient(String),
    /// Not worth retrying: bad credentials, malformed request.
    Fatal(String),
}

impl std::fmt::Display for ProviderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProviderError::Transient(m) => write!(f, "transient: {m}"),
            ProviderError::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestPolicy {
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
}

impl Default for RequestPolicy {
    fn default() -> Self {
        RequestPolicy {
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff: Duration::from_millis(500),
        }
    }
}

/// An LLM seen as an opaque annotator.
#[async_trait]
pub trait CompletionProvider: Send + Sync {
    fn id(&self) -> &str;

    async fn complete(&self, prompt: &str) -> std::result::Result<String, ProviderError>;

    /// Checked once before any request is issued; an error disables the
    /// provider for the whole batch.
    fn check_credentials(&self) -> std::result::Result<(), ProviderError> {
        Ok(())
    }

    fn policy(&self) -> RequestPolicy {
        RequestPolicy::default()
    }

    /// Providers returning `false` receive one request at a time.
    fn concurrent(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// OpenAI-compatible `chat/completions` endpoint.
    #[default]
    OpenaiChat,
    Mock,
}

/// One provider entry of a providers file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub provider_id: String,
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Environment variable holding the API key. Defaults to
    /// `LLME_<PROVIDER_ID>_API_KEY`.
    #[serde(default)]
    pub credential_ref: Option<String>,
    /// Extra request body fields; `temperature` defaults to 0.
    #[serde(default)]
    pub options: Map<String, Value>,
    #[serde(default)]
    pub mock: Option<MockSpec>,
}

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

impl ProviderSpec {
    pub fn credential_var(&self) -> String {
        self.credential_ref.clone().unwrap_or_else(|| {
            let id: String = self
                .provider_id
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() {
                        c.to_ascii_uppercase()
                    } else {
                        '_'
                    }
                })
                .collect();
            format!("LLME_{id}_API_KEY")
        })
    }

    pub fn policy(&self) -> RequestPolicy {
        RequestPolicy {
            timeout: Duration::from_secs_f64(self.timeout_secs),
            max_retries: self.max_retries,
            backoff: Duration::from_millis(self.backoff_ms),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.provider_id;
        if id.trim().is_empty() {
            return Err(Error::input("provider_id is empty"));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::input(format!(
                "provider `{id}`: timeout_secs must be positive"
            )));
        }
        match self.kind {
            ProviderKind::OpenaiChat => {
                let endpoint = self.endpoint.as_deref().ok_or_else(|| {
                    Error::input(format!("provider `{id}`: endpoint is required"))
                })?;
                Url::parse(endpoint)
                    .map_err(|e| Error::input(format!("provider `{id}`: bad endpoint: {e}")))?;
                if self.model_name.as_deref().unwrap_or("").is_empty() {
                    return Err(Error::input(format!(
                        "provider `{id}`: model_name is required"
                    )));
                }
            }
            ProviderKind::Mock => {
                if self.mock.is_none() {
                    return Err(Error::input(format!(
                        "provider `{id}`: mock providers need a `mock` section"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds the adapter for this spec, resolving credentials from the
    /// environment.
    pub fn build(&self) -> Result<Arc<dyn CompletionProvider>> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::OpenaiChat => Arc::new(OpenAiChatProvider::new(self)?),
            ProviderKind::Mock => Arc::new(MockProvider::new(
                self.provider_id.clone(),
                self.mock.clone().unwrap_or_default(),
                self.policy(),
            )),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersFile {
    pub providers: Vec<ProviderSpec>,
}

pub fn read_providers(path: &Path) -> Result<Vec<ProviderSpec>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed: ProvidersFile =
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
    for (idx, spec) in parsed.providers.iter().enumerate() {
        spec.validate()?;
        if parsed.providers[..idx]
            .iter()
            .any(|o| o.provider_id == spec.provider_id)
        {
            return Err(Error::input(format!(
                "duplicate provider_id `{}`",
                spec.provider_id
            )));
        }
    }
    Ok(parsed.providers)
}

/// Adapter for OpenAI-compatible chat completion APIs.
pub struct OpenAiChatProvider {
    id: String,
    endpoint: Url,
    model: String,
    api_key: Option<String>,
    credential_var: String,
    options: Map<String, Value>,
    policy: RequestPolicy,
    client: reqwest::Client,
}

impl OpenAiChatProvider {
    pub fn new(spec: &ProviderSpec) -> Result<Self> {
        let endpoint = Url::parse(spec.endpoint.as_deref().unwrap_or_default()).map_err(|e| {
            Error::input(format!(
                "provider `{}`: bad endpoint: {e}",
                spec.provider_id
            ))
        })?;
        let credential_var = spec.credential_var();
        let api_key = std::env::var(&credential_var)
            .ok()
            .filter(|k| !k.is_empty());
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| Error::Provider {
                provider: spec.provider_id.clone(),
                message: e.to_string(),
            })?;
        Ok(OpenAiChatProvider {
            id: spec.provider_id.clone(),
            endpoint,
            model: spec.model_name.clone().unwrap_or_default(),
            api_key,
            credential_var,
            options: spec.options.clone(),
            policy: spec.policy(),
            client,
        })
    }

    fn request_body(&self, prompt: &str) -> Value {
        let mut body = Map::new();
        body.insert("model".into(), json!(self.model));
        body.insert(
            "messages".into(),
            json!([{ "role": "user", "content": prompt }]),
        );
        body.insert("temperature".into(), json!(0.0));
        for (k, v) in &self.options {
            body.insert(k.clone(), v.clone());
        }
        Value::Object(body)
    }
}

#[async_trait]
impl CompletionProvider for OpenAiChatProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn check_credentials(&self) -> std::result::Result<(), ProviderError> {
        match self.api_key {
            Some(_) => Ok(()),
            None => Err(ProviderError::Fatal(format!(
                "environment variable {} is not set",
                self.credential_var
            ))),
        }
    }

    fn policy(&self) -> RequestPolicy {
        self.policy
    }

    async fn complete(&self, prompt: &str) -> std::result::Result<String, ProviderError> {
        let mut request = self
            .client
            .post(self.endpoint.clone())
            .json(&self.request_body(prompt));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .await
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = response.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(ProviderError::Fatal(format!("HTTP {status}")));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Fatal(format!("HTTP {status}")));
        }
        let body: Value = response
            .json()
            .await
            .map_err(|e| ProviderError::Transient(format!("bad response body: {e}")))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                ProviderError::Fatal("response has no choices[0].message.content".into())
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// The rule applies when the prompt contains every one of these strings.
    pub contains: Vec<String>,
    pub reply: String,
}

/// Scripted provider for tests and dry runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Reply when no rule matches; without one the request fails.
    #[serde(default)]
    pub default_reply: Option<String>,
    /// Fail every request.
    #[serde(default)]
    pub down: bool,
    /// Reject credentials before the batch starts.
    #[serde(default)]
    pub bad_credentials: bool,
    #[serde(default)]
    pub delay_ms: u64,
}

pub struct MockProvider {
    id: String,
    spec: MockSpec,
    policy: RequestPolicy,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(id: impl Into<String>, spec: MockSpec, policy: RequestPolicy) -> Self {
        MockProvider {
            id: id.into(),
            spec,
            policy,
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    /// Highest number of simultaneously outstanding requests seen so far.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl CompletionProvider for MockProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn check_credentials(&self) -> std::result::Result<(), ProviderError> {
        if self.spec.bad_credentials {
            Err(ProviderError::Fatal("mock credentials rejected".into()))
        } else {
            Ok(())
        }
    }

    fn policy(&self) -> RequestPolicy {
        self.policy
    }

    async fn complete(&self, prompt: &str) -> std::result::Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.spec.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(self.spec.delay_ms)).await;
        }
        if self.spec.down {
            return Err(ProviderError::Transient("mock provider is down".into()));
        }
        self.spec
            .rules
            .iter()
            .find(|r| r.contains.iter().all(|s| prompt.contains(s.as_str())))
            .map(|r| r.reply.clone())
            .or_else(|| self.spec.default_reply.clone())
            .ok_or_else(|| ProviderError::Transient("no scripted reply".into()))
    }
}

/// Records plus per-provider counts of products that produced no record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractOutcome {
    pub records: Vec<AnnotationRecord>,
    pub failures: BTreeMap<String, usize>,
}

async fn request_with_retries(
    provider: &dyn CompletionProvider,
    prompt: &str,
    global: &Semaphore,
    local: Option<&Semaphore>,
) -> std::result::Result<String, ProviderError> {
    let policy = provider.policy();
    let mut attempt = 0;
    loop {
        let outcome = {
            let _local = match local {
                Some(s) => Some(s.acquire().await.expect("semaphore closed")),
                None => None,
            };
            let _permit = global.acquire().await.expect("semaphore closed");
            match tokio::time::timeout(policy.timeout, provider.complete(prompt)).await {
                Ok(result) => result,
                Err(_) => Err(ProviderError::Transient(format!(
                    "timed out after {:?}",
                    policy.timeout
                ))),
            }
        };
        match outcome {
            Err(ProviderError::Transient(msg)) if attempt < policy.max_retries => {
                tracing::debug!(provider = provider.id(), attempt, "retrying: {msg}");
                tokio::time::sleep(policy.backoff * 2u32.saturating_pow(attempt)).await;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Asks every provider about every product, at most `max_in_flight`
/// requests at a time. Records come out provider-major, product-minor.
pub async fn extract_labels(
    products: &[ProductText],
    schema: &AttributeSchema,
    providers: &[Arc<dyn CompletionProvider>],
    template: &PromptTemplate,
    synonyms: &SynonymMap,
    max_in_flight: usize,
) -> Result<ExtractOutcome> {
    if products.is_empty() {
        return Err(Error::input("no products to label"));
    }
    if providers.is_empty() {
        return Err(Error::input("no providers configured"));
    }
    if max_in_flight == 0 {
        return Err(Error::input("max_in_flight must be at least 1"));
    }
    for p in products {
        p.validate()?;
    }

    let prompts: Arc<Vec<String>> = Arc::new(
        products
            .iter()
            .map(|p| render_prompt(template, p, schema))
            .collect(),
    );
    let global = Arc::new(Semaphore::new(max_in_flight));
    let mut failures = BTreeMap::new();
    let mut tasks = JoinSet::new();

    for (pi, provider) in providers.iter().enumerate() {
        failures.insert(provider.id().to_string(), 0usize);
        if let Err(e) = provider.check_credentials() {
            tracing::error!(provider = provider.id(), "skipping provider: {e}");
            failures.insert(provider.id().to_string(), products.len());
            continue;
        }
        let local = (!provider.concurrent()).then(|| Arc::new(Semaphore::new(1)));
        for ji in 0..products.len() {
            let provider = Arc::clone(provider);
            let prompts = Arc::clone(&prompts);
            let global = Arc::clone(&global);
            let local = local.clone();
            tasks.spawn(async move {
                let result = request_with_retries(
                    provider.as_ref(),
                    &prompts[ji],
                    &global,
                    local.as_deref(),
                )
                .await;
                (pi, ji, result)
            });
        }
    }

    let mut answers: Vec<Vec<Option<String>>> = vec![vec![None; products.len()]; providers.len()];
    while let Some(joined) = tasks.join_next().await {
        let (pi, ji, result) = joined.map_err(|e| Error::Provider {
            provider: "<task>".into(),
            message: e.to_string(),
        })?;
        match result {
            Ok(text) => answers[pi][ji] = Some(text),
            Err(e) => {
                tracing::warn!(
                    provider = providers[pi].id(),
                    item = products[ji].item_id.as_str(),
                    "request failed: {e}"
                );
                *failures.get_mut(providers[pi].id()).expect("registered") += 1;
            }
        }
    }

    let mut records = Vec::new();
    for (pi, row) in answers.into_iter().enumerate() {
        for (ji, answer) in row.into_iter().enumerate() {
            let Some(text) = answer else { continue };
            let Some(raw_label) = record_label(&text, schema, synonyms) else {
                continue;
            };
            records.push(AnnotationRecord::new(
                providers[pi].id(),
                products[ji].item_id.as_str(),
                schema.name(),
                raw_label,
            ));
        }
    }
    Ok(ExtractOutcome { records, failures })
}

/// The label stored in a record: the canonical name when the answer parses,
/// otherwise the trimmed answer itself (which encodes to missing). Blank
/// answers produce no record.
fn record_label(text: &str, schema: &AttributeSchema, synonyms: &SynonymMap) -> Option<String> {
    let parsed = parse_response(text, schema, synonyms);
    match schema.decode(parsed) {
        Some(name) => Some(name.to_string()),
        None => {
            let trimmed = text.trim();
            (!trimmed.is_empty()).then(|| trimmed.to_string())
        }
    }
}
