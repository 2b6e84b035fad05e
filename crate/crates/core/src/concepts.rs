//! Key-concept extraction: which objects a question is about.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::Cached;
use crate::digest::{sha256_hex, write_atomic};
use crate::model_client::{ClientError, ModelClient};

pub const EXTRACTION_PROMPT_VERSION: &str = "extract-v1";
const EXTRACTION_TEMPLATE: &str = include_str!("../prompts/extract_v1.txt");

pub const MAX_CONCEPTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptMode {
    /// Objects named in the question itself.
    #[default]
    Direct,
    /// Objects suggested for a scene-level question.
    SceneAssociative,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptSet {
    pub concepts: Vec<String>,
    pub mode: ConceptMode,
}

impl ConceptSet {
    /// Canonical two-line form, the same shape the extraction prompt asks for.
    pub fn render(&self) -> String {
        let mode = match self.mode {
            ConceptMode::Direct => "direct",
            ConceptMode::SceneAssociative => "scene",
        };
        format!(
            "mode: {mode}\nobjects: {}",
            serde_json::to_string(&self.concepts).expect("strings serialize")
        )
    }

    pub fn contains(&self, label: &str) -> bool {
        self.concepts.iter().any(|c| c == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionPrompt {
    pub text: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConceptError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no concepts found in response")]
    NoConceptsFound,
    #[error(transparent)]
    Client(#[from] ClientError),
}

pub fn build_extraction_prompt(question: &str) -> Result<ExtractionPrompt, ConceptError> {
    if question.trim().is_empty() {
        return Err(ConceptError::EmptyQuestion);
    }
    Ok(ExtractionPrompt {
        text: EXTRACTION_TEMPLATE.replacen("{question}", question, 1),
    })
}

/// Lowercase, collapse whitespace, strip surrounding quotes and punctuation.
/// Plurals are left alone.
pub fn normalize_concept(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_whitespace() || "\"'`.,;:".contains(c))
        .to_string()
}

/// A successful parse plus any concepts dropped by the five-item cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedConcepts {
    pub set: ConceptSet,
    pub dropped: Vec<String>,
}

/// Parse an extraction response.
///
/// Looks for a bracketed list first (JSON or bare comma-separated), then for
/// numbered/bulleted lines, then for a comma-separated line. A `mode:` line
/// selects scene-associative mode; anything else is direct.
pub fn parse_concepts(raw: &str) -> Result<ParsedConcepts, ConceptError> {
    let items = bracketed_items(raw)
        .or_else(|| listed_items(raw))
        .or_else(|| comma_items(raw))
        .unwrap_or_default();

    let mut concepts: Vec<String> = Vec::new();
    for item in items {
        let c = normalize_concept(&item);
        if !c.is_empty() && !concepts.contains(&c) {
            concepts.push(c);
        }
    }
    if concepts.is_empty() {
        return Err(ConceptError::NoConceptsFound);
    }
    let dropped = if concepts.len() > MAX_CONCEPTS {
        concepts.split_off(MAX_CONCEPTS)
    } else {
        Vec::new()
    };
    Ok(ParsedConcepts {
        set: ConceptSet {
            concepts,
            mode: declared_mode(raw),
        },
        dropped,
    })
}

fn declared_mode(raw: &str) -> ConceptMode {
    for line in raw.lines() {
        let l = line.trim().to_lowercase();
        if let Some(rest) = l.strip_prefix("mode:") {
            return if rest.trim_start().starts_with("scene") {
                ConceptMode::SceneAssociative
            } else {
                ConceptMode::Direct
            };
        }
    }
    ConceptMode::Direct
}

fn bracketed_items(raw: &str) -> Option<Vec<String>> {
    for (start, _) in raw.match_indices('[') {
        let tail = &raw[start..];
        let mut stream = serde_json::Deserializer::from_str(tail).into_iter::<Vec<String>>();
        if let Some(Ok(list)) = stream.next() {
            return Some(list);
        }
        if let Some(end) = tail.find(']') {
            let inner = &tail[1..end];
            if inner.contains('[') {
                continue;
            }
            return Some(inner.split(',').map(str::to_string).collect());
        }
    }
    None
}

fn listed_items(raw: &str) -> Option<Vec<String>> {
    let items: Vec<String> = raw
        .lines()
        .filter_map(|line| strip_list_marker(line.trim()))
        .map(str::to_string)
        .collect();
    (!items.is_empty()).then_some(items)
}

fn strip_list_marker(line: &str) -> Option<&str> {
    if let Some(rest) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) {
        return Some(rest);
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    rest.strip_prefix(". ")
        .or_else(|| rest.strip_prefix(") "))
        .or_else(|| rest.strip_prefix('.').filter(|r| !r.is_empty()))
}

fn comma_items(raw: &str) -> Option<Vec<String>> {
    raw.lines()
        .map(|line| {
            let l = line.trim();
            match l.split_once(':') {
                Some((head, rest)) if head.trim().eq_ignore_ascii_case("objects") => rest,
                _ => l,
            }
        })
        .find(|l| l.contains(','))
        .map(|l| l.split(',').map(str::to_string).collect())
}

/// Cached extraction results under `{root}/concepts/`.
#[derive(Debug, Clone)]
pub struct ConceptCache {
    dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConceptCacheEntry {
    question: String,
    prompt_version: String,
    concepts: Vec<String>,
    mode: ConceptMode,
}

impl ConceptCache {
    pub fn new(cache_root: &Path) -> Self {
        Self {
            dir: cache_root.join("concepts"),
        }
    }

    pub fn key(question: &str) -> String {
        sha256_hex(format!("{question}{EXTRACTION_PROMPT_VERSION}"))
    }

    pub fn path_for(&self, question: &str) -> PathBuf {
        self.dir.join(format!("{}.json", Self::key(question)))
    }

    pub fn get(&self, question: &str) -> Option<ConceptSet> {
        let bytes = std::fs::read(self.path_for(question)).ok()?;
        let e: ConceptCacheEntry = serde_json::from_slice(&bytes).ok()?;
        (e.question == question && e.prompt_version == EXTRACTION_PROMPT_VERSION).then_some(
            ConceptSet {
                concepts: e.concepts,
                mode: e.mode,
            },
        )
    }

    pub fn put(&self, question: &str, set: &ConceptSet) -> std::io::Result<()> {
        let entry = ConceptCacheEntry {
            question: question.to_string(),
            prompt_version: EXTRACTION_PROMPT_VERSION.to_string(),
            concepts: set.concepts.clone(),
            mode: set.mode,
        };
        let bytes = serde_json::to_vec_pretty(&entry).expect("serializable");
        write_atomic(&self.path_for(question), &bytes)
    }
}

/// Prompt the text model for the question's key concepts, going through the
/// cache when one is supplied. Failures never write a cache entry.
pub fn extract_key_concepts(
    question: &str,
    client: &ModelClient,
    cache: Option<&ConceptCache>,
) -> Result<Cached<ConceptSet>, ConceptError> {
    let prompt = build_extraction_prompt(question)?;
    if let Some(hit) = cache.and_then(|c| c.get(question)) {
        return Ok(Cached { value: hit, hit: true });
    }
    let raw = client.query_text(&client.text_request(prompt.text))?;
    let parsed = parse_concepts(&raw)?;
    if !parsed.dropped.is_empty() {
        log::warn!(
            "extraction for {question:?} returned more than {MAX_CONCEPTS} concepts; dropped {:?}",
            parsed.dropped
        );
    }
    if let Some(c) = cache {
        if let Err(e) = c.put(question, &parsed.set) {
            log::warn!("concept cache write failed: {e}");
        }
    }
    Ok(Cached {
        value: parsed.set,
        hit: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cassette::testing::{caller, ScriptedTransport};
    use crate::cassette::{Cassette, CassetteMode, RemoteError};
    use crate::model_client::{chat_response_body, ChatBackend};
    use crate::transport::TransportError;

    #[test]
    fn prompt_embeds_question_verbatim() {
        let q = "How many people are in the image?";
        let p = build_extraction_prompt(q).unwrap();
        assert!(p.text.contains(q));
        assert_eq!(p, build_extraction_prompt(q).unwrap());
        assert!(p.text.contains("3-5"));
        assert_eq!(build_extraction_prompt(""), Err(ConceptError::EmptyQuestion));
        assert_eq!(build_extraction_prompt("  "), Err(ConceptError::EmptyQuestion));
    }

    #[test]
    fn parses_json_list() {
        let p = parse_concepts(r#"["giraffe", "tree"]"#).unwrap();
        assert_eq!(p.set.concepts, ["giraffe", "tree"]);
        assert_eq!(p.set.mode, ConceptMode::Direct);
    }

    #[test]
    fn numbered_lines_dedup_and_normalize() {
        let p = parse_concepts("1. Cat\n2. cat\n3. Sofa").unwrap();
        assert_eq!(p.set.concepts, ["cat", "sofa"]);
    }

    #[test]
    fn prose_without_list_is_rejected() {
        assert_eq!(
            parse_concepts("no objects mentioned"),
            Err(ConceptError::NoConceptsFound)
        );
        assert_eq!(parse_concepts("objects: []"), Err(ConceptError::NoConceptsFound));
    }

    #[test]
    fn scene_marker_and_bare_brackets() {
        let p = parse_concepts("Mode: Scene\nobjects: [People, bench , crowd]").unwrap();
        assert_eq!(p.set.mode, ConceptMode::SceneAssociative);
        assert_eq!(p.set.concepts, ["people", "bench", "crowd"]);
    }

    #[test]
    fn comma_fallback() {
        let p = parse_concepts("objects: dog,  red ball").unwrap();
        assert_eq!(p.set.concepts, ["dog", "red ball"]);
    }

    #[test]
    fn long_lists_truncate_to_five() {
        let p = parse_concepts(r#"["a","b","c","d","e","f","g"]"#).unwrap();
        assert_eq!(p.set.concepts.len(), 5);
        assert_eq!(p.dropped, ["f", "g"]);
    }

    #[test]
    fn normalization_is_idempotent_on_examples() {
        for s in ["  Red   Car. ", "\"tree\"", "'a, b'", "Ünïcode  Thing"] {
            let n = normalize_concept(s);
            assert_eq!(normalize_concept(&n), n);
        }
        assert_eq!(normalize_concept("  Red   Car. "), "red car");
    }

    fn client(dir: &Path, mode: CassetteMode, t: std::sync::Arc<ScriptedTransport>) -> ModelClient {
        ModelClient::new(
            ChatBackend {
                id: "text".into(),
                endpoint: "http://localhost:9".into(),
                model: "m".into(),
                api_key_env: None,
                dialect: Default::default(),
            },
            Cassette::new(dir, "text", mode),
            caller(t),
        )
    }

    #[test]
    fn extraction_caches_result() {
        let dir = tempfile::tempdir().unwrap();
        let t = ScriptedTransport::new(vec![ScriptedTransport::ok(&chat_response_body(
            "mode: direct\nobjects: [\"person\"]",
        ))]);
        let c = client(dir.path(), CassetteMode::Passthrough, t.clone());
        let cache = ConceptCache::new(dir.path());
        let q = "How many people are in the image?";
        let first = extract_key_concepts(q, &c, Some(&cache)).unwrap();
        assert!(!first.hit);
        assert_eq!(first.value.concepts, ["person"]);
        let second = extract_key_concepts(q, &c, Some(&cache)).unwrap();
        assert!(second.hit);
        assert_eq!(second.value, first.value);
        assert_eq!(t.calls(), 1);

        let stored: serde_json::Value =
            serde_json::from_slice(&std::fs::read(cache.path_for(q)).unwrap()).unwrap();
        assert_eq!(stored["prompt_version"], EXTRACTION_PROMPT_VERSION);
        assert_eq!(stored["question"], q);
    }

    #[test]
    fn timeout_writes_no_cache_entry() {
        let dir = tempfile::tempdir().unwrap();
        let t = ScriptedTransport::new(vec![
            Err(TransportError::Timeout),
            Err(TransportError::Timeout),
            Err(TransportError::Timeout),
        ]);
        let c = client(dir.path(), CassetteMode::Passthrough, t);
        let cache = ConceptCache::new(dir.path());
        let err = extract_key_concepts("Is this place crowded?", &c, Some(&cache)).unwrap_err();
        assert_eq!(
            err,
            ConceptError::Client(ClientError::Remote(RemoteError::Timeout { attempts: 3 }))
        );
        assert!(!cache.path_for("Is this place crowded?").exists());
    }
}
