//! Ranking stage: prompt construction, backend contract, response validation
//! and the final prediction with retrieval-order fallback.

use std::collections::{HashMap, HashSet};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::retrieve::CandidateList;

pub const MAX_PROMPT_CANDIDATES: usize = 32;
pub const RANKER_URL_ENV: &str = "RAR_RANKER_URL";

const PROMPT_HEAD: &str = "Please play the role of a classification expert, and sort the provided \
categories from high to low according to the top";
const PROMPT_MID: &str = "similarity with the input image. Here are the optional categories:";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RankError {
    #[error("{0} candidates exceed the prompt limit of {MAX_PROMPT_CANDIDATES}")]
    TooManyCandidates(usize),
    #[error("no candidates to rank")]
    EmptyCandidates,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum BackendError {
    #[error("ranker backend unreachable: {0}")]
    Unreachable(String),
    #[error("ranker backend sent an unusable response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    #[default]
    Plain,
    InContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPrompt {
    pub text: String,
    pub candidates: Vec<String>,
    pub k: usize,
    pub style: PromptStyle,
}

fn number_word(n: usize) -> String {
    const ONES: [&str; 20] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
        "nineteen",
    ];
    const TENS: [&str; 4] = ["", "", "twenty", "thirty"];
    match n {
        0..=19 => ONES[n].to_string(),
        20..=39 if n % 10 == 0 => TENS[n / 10].to_string(),
        20..=39 => format!("{}-{}", TENS[n / 10], ONES[n % 10]),
        _ => n.to_string(),
    }
}

/// `A`..`Z`, then `AA`, `AB`, ...
fn placeholder_letter(i: usize) -> String {
    let mut i = i;
    let mut s = Vec::new();
    loop {
        s.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

fn quote(name: &str) -> String {
    if name.contains('\'') && !name.contains('"') {
        format!("\"{name}\"")
    } else {
        format!("'{name}'")
    }
}

/// `['a', 'b', 'c']`, quoting like a Python list repr.
pub fn format_name_list<S: AsRef<str>>(names: &[S]) -> String {
    let items: Vec<String> = names.iter().map(|n| quote(n.as_ref())).collect();
    format!("[{}]", items.join(", "))
}

pub fn build_prompt_from_names(names: &[String], style: PromptStyle) -> Result<RankingPrompt, RankError> {
    let k = names.len();
    if k == 0 {
        return Err(RankError::EmptyCandidates);
    }
    if k > MAX_PROMPT_CANDIDATES {
        return Err(RankError::TooManyCandidates(k));
    }
    let mut text = format!("{PROMPT_HEAD} {k} {PROMPT_MID}{}.", format_name_list(names));
    if style == PromptStyle::InContext {
        let placeholders: Vec<String> = (0..k)
            .map(|i| format!("category {}", placeholder_letter(i)))
            .collect();
        let noun = if k == 1 { "category" } else { "categories" };
        text.push_str(&format!(
            " Your answer should follow the following format, like:{}. Only choose {} {noun}, and no further information.",
            format_name_list(&placeholders),
            number_word(k),
        ));
    }
    Ok(RankingPrompt {
        text,
        candidates: names.to_vec(),
        k,
        style,
    })
}

pub fn build_ranking_prompt(candidates: &CandidateList, style: PromptStyle) -> Result<RankingPrompt, RankError> {
    let names: Vec<String> = candidates.candidates.iter().map(|c| c.category.clone()).collect();
    build_prompt_from_names(&names, style)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerVerdict {
    pub ordering: Vec<String>,
    pub raw: String,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

fn closing_quote(open: char) -> Option<char> {
    match open {
        '\'' => Some('\''),
        '"' => Some('"'),
        '`' => Some('\''),
        '\u{2018}' => Some('\u{2019}'),
        '\u{201c}' => Some('\u{201d}'),
        _ => None,
    }
}

/// Parses a list body starting right after `[`. A quote only closes an item
/// when the next non-space character is `,` or `]`, so apostrophes inside
/// names survive.
fn parse_list_body(s: &str) -> Option<Vec<String>> {
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    let skip_ws = |i: &mut usize| {
        while *i < chars.len() && chars[*i].is_whitespace() {
            *i += 1;
        }
    };
    let mut items = Vec::new();
    loop {
        skip_ws(&mut i);
        match chars.get(i) {
            Some(']') => return Some(items),
            Some(&c) => {
                let close = closing_quote(c)?;
                i += 1;
                let start = i;
                let mut from = start;
                let end = loop {
                    let q = from + chars[from..].iter().position(|&ch| ch == close)?;
                    let mut after = q + 1;
                    skip_ws(&mut after);
                    if matches!(chars.get(after), Some(',') | Some(']')) {
                        break q;
                    }
                    from = q + 1;
                };
                items.push(chars[start..end].iter().collect::<String>());
                i = end + 1;
                skip_ws(&mut i);
                match chars.get(i) {
                    Some(',') => i += 1,
                    Some(']') => return Some(items),
                    _ => return None,
                }
            }
            None => return None,
        }
    }
}

/// First `[...]` in `raw` that parses as a list of quoted strings.
pub fn extract_quoted_list(raw: &str) -> Option<Vec<String>> {
    raw.match_indices('[')
        .find_map(|(pos, _)| parse_list_body(&raw[pos + 1..]))
}

/// Validates names against the candidates: exact match first, then a unique
/// case-insensitive match; returned names use the candidates' casing.
pub fn verdict_from_names<S: AsRef<str>>(names: &[String], candidates: &[S], raw: String) -> RankerVerdict {
    let mut ordering = Vec::with_capacity(names.len());
    let mut seen = HashSet::new();
    let mut reason = None;
    for name in names {
        let trimmed = name.trim();
        let exact = candidates.iter().find(|c| c.as_ref() == trimmed);
        let matched = exact.or_else(|| {
            let lower = trimmed.to_lowercase();
            let mut hits = candidates.iter().filter(|c| c.as_ref().to_lowercase() == lower);
            match (hits.next(), hits.next()) {
                (Some(one), None) => Some(one),
                _ => None,
            }
        });
        match matched {
            Some(c) => {
                let c = c.as_ref().to_string();
                if !seen.insert(c.clone()) && reason.is_none() {
                    reason = Some(format!("duplicate name {c:?}"));
                }
                ordering.push(c);
            }
            None => {
                if reason.is_none() {
                    reason = Some(format!("{trimmed:?} is beyond the given list"));
                }
                ordering.push(trimmed.to_string());
            }
        }
    }
    if ordering.is_empty() && reason.is_none() {
        reason = Some("empty ranking".into());
    }
    RankerVerdict {
        ordering,
        raw,
        valid: reason.is_none(),
        reason,
    }
}

pub fn parse_ranking_names<S: AsRef<str>>(raw: &str, candidates: &[S]) -> RankerVerdict {
    match extract_quoted_list(raw) {
        Some(names) => verdict_from_names(&names, candidates, raw.to_string()),
        None => RankerVerdict {
            ordering: Vec::new(),
            raw: raw.to_string(),
            valid: false,
            reason: Some("no bracketed list of quoted names".into()),
        },
    }
}

pub fn parse_ranking(raw: &str, candidates: &CandidateList) -> RankerVerdict {
    parse_ranking_names(raw, &candidates.names())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRequest {
    pub query_id: u64,
    pub image_ref: String,
    pub prompt: RankingPrompt,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RankerReply {
    /// Free text to be parsed for a bracketed list.
    Text(String),
    /// An already structured ordering.
    Names(Vec<String>),
}

pub trait RankerBackend: Send + Sync {
    fn name(&self) -> &str;
    fn rank(&self, request: &RankRequest) -> Result<RankerReply, BackendError>;
}

/// Returns the candidates in retrieval order.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRanker;

impl RankerBackend for IdentityRanker {
    fn name(&self) -> &str {
        "identity"
    }

    fn rank(&self, request: &RankRequest) -> Result<RankerReply, BackendError> {
        Ok(RankerReply::Names(request.prompt.candidates.clone()))
    }
}

/// Test double that knows the ground truth and moves it to the front when
/// it is among the candidates.
#[derive(Debug, Clone, Default)]
pub struct OracleRanker {
    truth: HashMap<u64, String>,
}

impl OracleRanker {
    pub fn new(truth: HashMap<u64, String>) -> Self {
        OracleRanker { truth }
    }
}

impl RankerBackend for OracleRanker {
    fn name(&self) -> &str {
        "oracle"
    }

    fn rank(&self, request: &RankRequest) -> Result<RankerReply, BackendError> {
        let mut names = request.prompt.candidates.clone();
        if let Some(truth) = self.truth.get(&request.query_id) {
            if let Some(pos) = names.iter().position(|n| n == truth) {
                let t = names.remove(pos);
                names.insert(0, t);
            }
        }
        Ok(RankerReply::Names(names))
    }
}

/// Body of `POST /rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankWireRequest {
    pub image_ref: String,
    pub candidates: Vec<String>,
    pub k: usize,
    pub style: PromptStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankWireResponse {
    pub ranking: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retries: u32,
    /// Delay before the first retry; doubles each retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.freed.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            timeout: Duration::from_secs(60),
            max_in_flight: 8,
            retry: RetryPolicy::default(),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(RANKER_URL_ENV).ok().filter(|s| !s.is_empty()).map(Self::new)
    }
}

/// HTTP ranker speaking the `/rank` JSON contract.
///
/// Transport failures and 5xx responses are retried with exponential
/// backoff; 4xx responses fail immediately. Both end as
/// [`BackendError::Unreachable`].
pub struct RemoteRanker {
    config: RemoteConfig,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

impl std::fmt::Debug for RemoteRanker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteRanker").field("config", &self.config).finish()
    }
}

impl RemoteRanker {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(config.timeout)
            .max_idle_connections_per_host(config.max_in_flight.max(1))
            .build();
        RemoteRanker {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            agent,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/rank", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &RankWireRequest) -> Result<RankWireResponse, (bool, BackendError)> {
        let _permit = self.in_flight.acquire();
        match self.agent.post(&self.endpoint()).send_json(body) {
            Ok(resp) => resp
                .into_json::<RankWireResponse>()
                .map_err(|e| (false, BackendError::BadResponse(e.to_string()))),
            Err(ureq::Error::Status(code, _)) => Err((
                code >= 500,
                BackendError::Unreachable(format!("HTTP {code} from {}", self.endpoint())),
            )),
            Err(ureq::Error::Transport(t)) => Err((true, BackendError::Unreachable(t.to_string()))),
        }
    }
}

impl RankerBackend for RemoteRanker {
    fn name(&self) -> &str {
        "remote"
    }

    fn rank(&self, request: &RankRequest) -> Result<RankerReply, BackendError> {
        let body = RankWireRequest {
            image_ref: request.image_ref.clone(),
            candidates: request.prompt.candidates.clone(),
            k: request.prompt.k,
            style: request.prompt.style,
        };
        let mut delay = self.config.retry.base_delay;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(resp) => return Ok(RankerReply::Names(resp.ranking)),
                Err((retryable, err)) => {
                    if !retryable || attempt >= self.config.retry.retries {
                        return Err(err);
                    }
                }
            }
            std::thread::sleep(delay);
            delay *= 2;
            attempt += 1;
        }
    }
}

/// What to do with an invalid or partial ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackPolicy {
    /// Complete a valid partial ranking with the missing candidates in retrieval order.
    pub append_missing: bool,
}

impl Default for FallbackPolicy {
    fn default() -> Self {
        FallbackPolicy {
            append_missing: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Ranker,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub category: String,
    pub source: PredictionSource,
    /// Best-first names used for top-k metrics.
    pub ordering: Vec<String>,
    pub candidates: CandidateList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<RankerVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BackendError>,
}

impl Prediction {
    /// Retrieval similarity of the predicted category.
    pub fn confidence(&self) -> f64 {
        self.candidates.similarity_of(&self.category).unwrap_or(0.0)
    }
}

/// Per-query inputs the ranker may use besides the candidates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryContext {
    pub query_id: u64,
    pub image_ref: String,
    pub style: PromptStyle,
}

pub fn rerank(
    candidates: &CandidateList,
    query: &QueryContext,
    backend: &dyn RankerBackend,
    policy: &FallbackPolicy,
) -> Result<Prediction, RankError> {
    let prompt = build_ranking_prompt(candidates, query.style)?;
    let request = RankRequest {
        query_id: query.query_id,
        image_ref: query.image_ref.clone(),
        prompt,
    };
    let retrieval: Vec<String> = candidates.candidates.iter().map(|c| c.category.clone()).collect();
    let (verdict, error) = match backend.rank(&request) {
        Ok(RankerReply::Text(text)) => (Some(parse_ranking_names(&text, &retrieval)), None),
        Ok(RankerReply::Names(names)) => {
            let raw = serde_json::to_string(&names).unwrap_or_default();
            (Some(verdict_from_names(&names, &retrieval, raw)), None)
        }
        Err(e) => (None, Some(e)),
    };

    let accepted = verdict.as_ref().filter(|v| v.valid && !v.ordering.is_empty());
    let (category, source, ordering) = match accepted {
        Some(v) => {
            let mut ordering = v.ordering.clone();
            if policy.append_missing {
                for name in &retrieval {
                    if !ordering.contains(name) {
                        ordering.push(name.clone());
                    }
                }
            }
            (ordering[0].clone(), PredictionSource::Ranker, ordering)
        }
        None => (retrieval[0].clone(), PredictionSource::Fallback, retrieval),
    };
    Ok(Prediction {
        category,
        source,
        ordering,
        candidates: candidates.clone(),
        verdict,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieve::{Candidate, RetrievalMode};

    fn list(names: &[&str]) -> CandidateList {
        CandidateList {
            candidates: names
                .iter()
                .enumerate()
                .map(|(i, n)| Candidate {
                    category: n.to_string(),
                    similarity: 0.9 - i as f64 * 0.1,
                })
                .collect(),
            mode: RetrievalMode::ImageToImage,
            k: names.len(),
            insufficient: false,
        }
    }

    #[test]
    fn plain_prompt_matches_template() {
        let p = build_ranking_prompt(&list(&["a", "b", "c", "d", "e"]), PromptStyle::Plain).unwrap();
        assert_eq!(
            p.text,
            "Please play the role of a classification expert, and sort the provided categories from high to low \
according to the top 5 similarity with the input image. Here are the optional categories:['a', 'b', 'c', 'd', 'e']."
        );
        assert_eq!(p.k, 5);
    }

    #[test]
    fn in_context_prompt_suffix() {
        let p = build_ranking_prompt(&list(&["a", "b", "c", "d", "e"]), PromptStyle::InContext).unwrap();
        assert!(p.text.ends_with(
            " Your answer should follow the following format, like:['category A', 'category B', 'category C', \
'category D', 'category E']. Only choose five categories, and no further information."
        ));
    }

    #[test]
    fn single_candidate_prompt() {
        let p = build_ranking_prompt(&list(&["Boeing 747"]), PromptStyle::Plain).unwrap();
        assert!(p.text.contains("top 1 similarity"));
        assert!(p.text.contains("['Boeing 747']"));
        let p = build_ranking_prompt(&list(&["x"]), PromptStyle::InContext).unwrap();
        assert!(p.text.ends_with("Only choose one category, and no further information."));
    }

    #[test]
    fn prompt_limits() {
        let names: Vec<String> = (0..33).map(|i| format!("n{i}")).collect();
        assert_eq!(build_prompt_from_names(&names, PromptStyle::Plain), Err(RankError::TooManyCandidates(33)));
        assert_eq!(build_prompt_from_names(&[], PromptStyle::Plain), Err(RankError::EmptyCandidates));
        let p = build_prompt_from_names(&names[..32], PromptStyle::InContext).unwrap();
        assert!(p.text.contains("'category AF'"));
        assert!(p.text.contains("Only choose thirty-two categories"));
    }

    #[test]
    fn number_words() {
        assert_eq!(number_word(5), "five");
        assert_eq!(number_word(20), "twenty");
        assert_eq!(number_word(21), "twenty-one");
        assert_eq!(number_word(32), "thirty-two");
        assert_eq!(placeholder_letter(0), "A");
        assert_eq!(placeholder_letter(25), "Z");
        assert_eq!(placeholder_letter(26), "AA");
    }

    #[test]
    fn parse_examples() {
        let c = list(&["cat", "dog", "fox"]);
        let v = parse_ranking("['cat','dog','fox']", &c);
        assert!(v.valid);
        assert_eq!(v.ordering, vec!["cat", "dog", "fox"]);

        let v = parse_ranking("['lion','cat']", &list(&["cat", "dog"]));
        assert!(!v.valid);
        assert!(v.reason.unwrap().contains("beyond the given list"));

        let v = parse_ranking("I think the answer is ['Dog', 'Cat']", &list(&["cat", "dog"]));
        assert!(v.valid);
        assert_eq!(v.ordering, vec!["dog", "cat"]);
    }

    #[test]
    fn parse_edge_cases() {
        let c = list(&["cat", "dog"]);
        assert!(!parse_ranking("no list here", &c).valid);
        assert!(!parse_ranking("[]", &c).valid);
        assert!(!parse_ranking("['cat', 'cat']", &c).valid);
        // first bracket is not a quoted list; the second one is
        let v = parse_ranking("[1] then [\"dog\" , 'cat' ,]", &c);
        assert!(v.valid, "{v:?}");
        assert_eq!(v.ordering, vec!["dog", "cat"]);
        // surrounding whitespace inside quotes is trimmed
        assert_eq!(parse_ranking("[' cat ']", &c).ordering, vec!["cat"]);
        // apostrophes inside names
        let c = list(&["dead man's fingers", "kelp"]);
        let v = parse_ranking("['dead man's fingers', 'kelp']", &c);
        assert!(v.valid, "{v:?}");
        let v = parse_ranking(&format_name_list(&["kelp", "dead man's fingers"]), &c);
        assert_eq!(v.ordering, vec!["kelp", "dead man's fingers"]);
        // smart quotes
        let v = parse_ranking("[\u{2018}kelp\u{2019}]", &c);
        assert!(v.valid);
    }

    #[test]
    fn case_insensitive_match_prefers_exact() {
        let v = parse_ranking_names("['Cat']", &["cat", "Cat"]);
        assert_eq!(v.ordering, vec!["Cat"]);
        // ambiguous case-insensitive match is rejected
        let v = parse_ranking_names("['CAT']", &["cat", "Cat"]);
        assert!(!v.valid);
    }

    struct Garbage;
    impl RankerBackend for Garbage {
        fn name(&self) -> &str {
            "garbage"
        }
        fn rank(&self, _: &RankRequest) -> Result<RankerReply, BackendError> {
            Ok(RankerReply::Text("¯\\_(ツ)_/¯".into()))
        }
    }

    struct Down;
    impl RankerBackend for Down {
        fn name(&self) -> &str {
            "down"
        }
        fn rank(&self, _: &RankRequest) -> Result<RankerReply, BackendError> {
            Err(BackendError::Unreachable("connection refused".into()))
        }
    }

    struct Partial;
    impl RankerBackend for Partial {
        fn name(&self) -> &str {
            "partial"
        }
        fn rank(&self, _: &RankRequest) -> Result<RankerReply, BackendError> {
            Ok(RankerReply::Text("['c']".into()))
        }
    }

    #[test]
    fn rerank_backends() {
        let c = list(&["a", "b", "c"]);
        let ctx = QueryContext { query_id: 7, ..Default::default() };
        let policy = FallbackPolicy::default();

        let p = rerank(&c, &ctx, &IdentityRanker, &policy).unwrap();
        assert_eq!((p.category.as_str(), p.source), ("a", PredictionSource::Ranker));

        let oracle = OracleRanker::new(HashMap::from([(7, "c".to_string())]));
        let p = rerank(&c, &ctx, &oracle, &policy).unwrap();
        assert_eq!(p.category, "c");
        assert_eq!(p.ordering, vec!["c", "a", "b"]);
        assert!((p.confidence() - 0.7).abs() < 1e-12);

        let p = rerank(&c, &ctx, &Garbage, &policy).unwrap();
        assert_eq!((p.category.as_str(), p.source), ("a", PredictionSource::Fallback));
        assert!(!p.verdict.as_ref().unwrap().valid);

        let p = rerank(&c, &ctx, &Down, &policy).unwrap();
        assert_eq!(p.source, PredictionSource::Fallback);
        assert!(matches!(p.error, Some(BackendError::Unreachable(_))));
        assert_eq!(p.ordering, vec!["a", "b", "c"]);

        let p = rerank(&c, &ctx, &Partial, &policy).unwrap();
        assert_eq!(p.ordering, vec!["c", "a", "b"]);
        let p = rerank(&c, &ctx, &Partial, &FallbackPolicy { append_missing: false }).unwrap();
        assert_eq!(p.ordering, vec!["c"]);
    }

    #[test]
    fn rerank_requires_candidates() {
        let ctx = QueryContext::default();
        assert_eq!(
            rerank(&list(&[]), &ctx, &IdentityRanker, &FallbackPolicy::default()),
            Err(RankError::EmptyCandidates)
        );
    }

    #[test]
    fn wire_format() {
        let req = RankWireRequest {
            image_ref: "img/1.png".into(),
            candidates: vec!["a".into()],
            k: 1,
            style: PromptStyle::InContext,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"image_ref":"img/1.png","candidates":["a"],"k":1,"style":"in_context"}"#
        );
        let resp: RankWireResponse = serde_json::from_str(r#"{"ranking":["b","a"]}"#).unwrap();
        assert_eq!(resp.ranking, vec!["b", "a"]);
    }

    struct Verbatim;
    impl RankerBackend for Verbatim {
        fn name(&self) -> &str {
            "verbatim"
        }
        fn rank(&self, r: &RankRequest) -> Result<RankerReply, BackendError> {
            let text = &r.prompt.text;
            let start = text.find(":[").expect("list") + 1;
            let end = text[start..].find("].").expect("end") + start + 1;
            Ok(RankerReply::Text(text[start..end].to_string()))
        }
    }

    struct Adversary(String);
    impl RankerBackend for Adversary {
        fn name(&self) -> &str {
            "adversary"
        }
        fn rank(&self, _: &RankRequest) -> Result<RankerReply, BackendError> {
            Ok(RankerReply::Text(self.0.clone()))
        }
    }

    fn unique_names() -> impl proptest::strategy::Strategy<Value = Vec<String>> {
        proptest::collection::btree_set("[a-zA-Z][a-zA-Z' -]{0,10}[a-zA-Z]", 1..=32)
            .prop_map(|s| s.into_iter().collect::<Vec<_>>())
            .prop_shuffle()
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn verbatim_ranker_reproduces_order(names in unique_names(), in_context in any::<bool>()) {
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let style = if in_context { PromptStyle::InContext } else { PromptStyle::Plain };
            let c = list(&refs);
            let p = rerank(&c, &QueryContext { style, ..Default::default() }, &Verbatim, &FallbackPolicy::default()).unwrap();
            prop_assert_eq!(p.source, PredictionSource::Ranker);
            prop_assert_eq!(p.ordering, names);
        }

        #[test]
        fn prediction_is_always_a_candidate(names in unique_names(), junk in ".{0,80}", pick in proptest::collection::vec(0usize..64, 0..6)) {
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let c = list(&refs);
            let mut reply = junk.clone();
            // splice in a list mixing real and fake names
            let items: Vec<String> = pick.iter().map(|&i| names.get(i).cloned().unwrap_or_else(|| format!("fake{i}"))).collect();
            reply.push_str(&format_name_list(&items));
            for text in [junk, reply] {
                let p = rerank(&c, &QueryContext::default(), &Adversary(text), &FallbackPolicy::default()).unwrap();
                prop_assert!(c.contains(&p.category));
                prop_assert!(p.ordering.iter().all(|n| c.contains(n)));
            }
        }
    }
}
