//! Answer-time text prompts and response parsing.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TaskKind;

pub const ANSWER_PROMPT_VERSION: &str = "answer-v1";

const PLAIN_TEMPLATE: &str = include_str!("../prompts/answer_plain_v1.txt");
const COT_TEMPLATE: &str = include_str!("../prompts/answer_cot_v1.txt");
const L2M_TEMPLATE: &str = include_str!("../prompts/answer_l2m_v1.txt");
const TPROMPT_TEMPLATE: &str = include_str!("../prompts/answer_tprompt_v1.txt");

const FORMAT_DIRECT_YES_NO: &str = "Answer with yes or no.";
const FORMAT_DIRECT_OPTION: &str = "Answer with the letter of the correct option.";
const FORMAT_FINAL_YES_NO: &str =
    "End your reply with a final line of the form \"Answer: yes\" or \"Answer: no\".";
const FORMAT_FINAL_OPTION: &str = "End your reply with a final line of the form \"Answer: <letter>\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    /// Question and options only.
    Plain,
    ZeroShotCot,
    LeastToMost,
    /// Marker-aware three-step prompt.
    Tprompt,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 4] = [
        PromptStrategy::Plain,
        PromptStrategy::ZeroShotCot,
        PromptStrategy::LeastToMost,
        PromptStrategy::Tprompt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStrategy::Plain => "plain",
            PromptStrategy::ZeroShotCot => "zero_shot_cot",
            PromptStrategy::LeastToMost => "least_to_most",
            PromptStrategy::Tprompt => "tprompt",
        }
    }

    /// Column header used in combined reports.
    pub fn label(self) -> &'static str {
        match self {
            PromptStrategy::Plain => "No TP",
            PromptStrategy::ZeroShotCot => "+ ZS CoT",
            PromptStrategy::LeastToMost => "+ L-to-M",
            PromptStrategy::Tprompt => "+ TP",
        }
    }
}

impl std::fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "plain" | "none" => Ok(PromptStrategy::Plain),
            "zero_shot_cot" | "cot" => Ok(PromptStrategy::ZeroShotCot),
            "least_to_most" | "l2m" => Ok(PromptStrategy::LeastToMost),
            "tprompt" | "tp" => Ok(PromptStrategy::Tprompt),
            other => Err(format!("unknown prompt strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPrompt {
    pub text: String,
    pub strategy: PromptStrategy,
    pub prompt_version: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("question is empty")]
    EmptyQuestion,
}

pub fn build_answer_prompt(
    question: &str,
    options: &[(String, String)],
    strategy: PromptStrategy,
) -> Result<AnswerPrompt, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    let mut body = question.to_string();
    for (letter, text) in options {
        body.push('\n');
        body.push_str(&format!("{letter}. {text}"));
    }
    let yes_no = options.is_empty();
    let (template, format) = match strategy {
        PromptStrategy::Plain => (
            PLAIN_TEMPLATE,
            if yes_no { FORMAT_DIRECT_YES_NO } else { FORMAT_DIRECT_OPTION },
        ),
        other => (
            match other {
                PromptStrategy::ZeroShotCot => COT_TEMPLATE,
                PromptStrategy::LeastToMost => L2M_TEMPLATE,
                _ => TPROMPT_TEMPLATE,
            },
            if yes_no { FORMAT_FINAL_YES_NO } else { FORMAT_FINAL_OPTION },
        ),
    };
    // Substitute `{format}` first so a question containing "{format}" stays verbatim.
    let text = template
        .trim_end()
        .replacen("{format}", format, 1)
        .replacen("{body}", &body, 1);
    Ok(AnswerPrompt {
        text,
        strategy,
        prompt_version: ANSWER_PROMPT_VERSION.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerValue {
    YesNo(bool),
    Option(String),
    Free(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    /// The reply led with the answer.
    Exact,
    /// Found via an answer marker or an unambiguous token inside the reply.
    Pattern,
    /// Matched by option text or taken as free text.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub value: AnswerValue,
    pub raw: String,
    pub parse_path: ParsePath,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnswerError {
    #[error("could not parse an answer from {0:?}")]
    UnparsableAnswer(String),
}

struct Patterns {
    yn_leading: Regex,
    yn_marker: Regex,
    yn_token: Regex,
    opt_leading: Regex,
    opt_marker: Regex,
    opt_paren: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        yn_leading: Regex::new(r"(?i)^[^\p{L}\p{N}]*(yes|no)\b").unwrap(),
        yn_marker: Regex::new(r"(?i)\banswer\b\s*(?:is\b|:)?[\s:*\-]*(yes|no)\b").unwrap(),
        yn_token: Regex::new(r"(?i)\b(yes|no)\b").unwrap(),
        opt_leading: Regex::new(r"^\s*(?:\(([A-Z])\)|([A-Z])(?:[.):]|\s*$))").unwrap(),
        opt_marker: Regex::new(r"\b[Aa]nswer\b\s*(?:is\b|:)?[\s:*]*\(?([A-Z])\b").unwrap(),
        opt_paren: Regex::new(r"\(([A-Z])\)").unwrap(),
    })
}

/// Turn a free-text reply into a task-typed answer.
///
/// Never panics; anything without a recognizable answer is
/// [`AnswerError::UnparsableAnswer`].
pub fn parse_answer(
    raw: &str,
    task: &TaskKind,
    options: &[(String, String)],
) -> Result<ParsedAnswer, AnswerError> {
    let found = if task.is_yes_no() {
        parse_yes_no(raw)
    } else if options.is_empty() {
        let t = raw.trim();
        (!t.is_empty()).then(|| (AnswerValue::Free(t.to_string()), ParsePath::Fallback))
    } else {
        parse_option(raw, options)
    };
    found
        .map(|(value, parse_path)| ParsedAnswer {
            value,
            raw: raw.to_string(),
            parse_path,
        })
        .ok_or_else(|| AnswerError::UnparsableAnswer(raw.to_string()))
}

fn yes(token: &str) -> AnswerValue {
    AnswerValue::YesNo(token.eq_ignore_ascii_case("yes"))
}

fn parse_yes_no(raw: &str) -> Option<(AnswerValue, ParsePath)> {
    let p = patterns();
    if let Some(c) = p.yn_leading.captures(raw) {
        return Some((yes(&c[1]), ParsePath::Exact));
    }
    if let Some(c) = p.yn_marker.captures_iter(raw).last() {
        return Some((yes(&c[1]), ParsePath::Pattern));
    }
    p.yn_token
        .captures(raw)
        .map(|c| (yes(&c[1]), ParsePath::Pattern))
}

fn parse_option(raw: &str, options: &[(String, String)]) -> Option<(AnswerValue, ParsePath)> {
    let p = patterns();
    let valid = |l: &str| options.iter().any(|(o, _)| o == l);
    let pick = |l: &str, path| Some((AnswerValue::Option(l.to_string()), path));

    if let Some(c) = p.opt_leading.captures(raw) {
        let l = c.get(1).or_else(|| c.get(2)).map_or("", |m| m.as_str());
        if valid(l) {
            return pick(l, ParsePath::Exact);
        }
    }
    if let Some(l) = p
        .opt_marker
        .captures_iter(raw)
        .map(|c| c[1].to_string())
        .filter(|l| valid(l))
        .last()
    {
        return pick(&l, ParsePath::Pattern);
    }
    let mut parens: Vec<String> = p
        .opt_paren
        .captures_iter(raw)
        .map(|c| c[1].to_string())
        .filter(|l| valid(l))
        .collect();
    parens.dedup();
    parens.sort();
    parens.dedup();
    if parens.len() == 1 {
        return pick(&parens[0], ParsePath::Pattern);
    }
    let lowered = raw.to_lowercase();
    let hits: Vec<&str> = options
        .iter()
        .filter(|(_, text)| !text.trim().is_empty() && lowered.contains(&text.trim().to_lowercase()))
        .map(|(l, _)| l.as_str())
        .collect();
    match hits.as_slice() {
        [l] => pick(l, ParsePath::Fallback),
        _ => None,
    }
}

/// Whether `parsed` matches the instance's answer key.
pub fn is_correct(parsed: &ParsedAnswer, ground_truth: &str) -> bool {
    match &parsed.value {
        AnswerValue::YesNo(b) => ground_truth.eq_ignore_ascii_case(if *b { "yes" } else { "no" }),
        AnswerValue::Option(l) => l == ground_truth,
        AnswerValue::Free(t) => t.trim().eq_ignore_ascii_case(ground_truth.trim()),
    }
}
