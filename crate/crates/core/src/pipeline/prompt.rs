//! Concept-augmentation prompts and the "keyword: portrayal" response grammar.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{normalize_label, word_count, ConceptVariation, ObjectTag};

pub const CONTEXT_SLOT: &str = "{context}";
pub const OBJECT_SLOT: &str = "{object}";
const OBJECT_PREFIX: &str = "Object: ";
const REQUEST_PREFIX: &str = "Write ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template slot {slot} appears {count} times; expected exactly once")]
    Slot { slot: &'static str, count: usize },
    #[error("template needs at least one in-context example")]
    NoExamples,
    #[error("in-context example {0} has an empty field")]
    EmptyExample(usize),
    #[error("template instruction is empty")]
    EmptyInstruction,
}

/// One demonstration of the transformation: object -> (keyword, portrayal).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub object: String,
    pub portrayal: String,
    pub keyword: String,
}

impl IclExample {
    pub fn new(object: &str, keyword: &str, portrayal: &str) -> Self {
        Self {
            object: object.to_string(),
            portrayal: portrayal.to_string(),
            keyword: keyword.to_string(),
        }
    }
}

/// Loadable from TOML with keys `instruction`, `query` and `[[examples]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub examples: Vec<IclExample>,
    /// Query section holding [`CONTEXT_SLOT`] and [`OBJECT_SLOT`] once each.
    /// Lines containing the context slot are dropped when no context is given.
    pub query: String,
}

fn number_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

impl PromptTemplate {
    pub fn default_template() -> Self {
        Self {
            instruction: "Propose alternative versions of an object that appears in a photo. \
                          Change the kind of object, its appearance or its attributes so that it \
                          still fits the scene described in the context."
                .to_string(),
            examples: vec![
                IclExample::new("bread", "freshly baked loaf", "a freshly baked loaf with a golden crust"),
                IclExample::new("bird", "bald eagle", "a black and white bald eagle"),
                IclExample::new("rock", "volcanic rock", "a jagged black volcanic rock"),
            ],
            query: format!("Context: {CONTEXT_SLOT}\n{OBJECT_PREFIX}{OBJECT_SLOT}"),
        }
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.instruction.trim().is_empty() {
            return Err(TemplateError::EmptyInstruction);
        }
        if self.examples.is_empty() {
            return Err(TemplateError::NoExamples);
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if [&ex.object, &ex.keyword, &ex.portrayal].iter().any(|f| f.trim().is_empty()) {
                return Err(TemplateError::EmptyExample(i));
            }
        }
        for slot in [CONTEXT_SLOT, OBJECT_SLOT] {
            let count = self.query.matches(slot).count();
            if count != 1 {
                return Err(TemplateError::Slot { slot, count });
            }
        }
        Ok(())
    }

    /// Render the full prompt for one query object asking for `k` variations.
    pub fn render(
        &self,
        context_caption: &str,
        object: &ObjectTag,
        k: usize,
        keyword_word_limit: usize,
    ) -> Result<String, TemplateError> {
        self.validate()?;
        let mut out = String::new();
        out.push_str(self.instruction.trim());
        out.push('\n');
        out.push_str(&format!(
            "{REQUEST_PREFIX}{k} variation{} for the query object, one per line, in the form \
             \"keyword: portrayal\". The portrayal describes the new object in detail for an \
             image editor. The keyword summarizes the portrayal using a maximum of {} word{}.\n",
            if k == 1 { "" } else { "s" },
            number_word(keyword_word_limit),
            if keyword_word_limit == 1 { "" } else { "s" },
        ));

        let mut current: Option<&str> = None;
        for ex in &self.examples {
            if current != Some(ex.object.as_str()) {
                out.push('\n');
                out.push_str(OBJECT_PREFIX);
                out.push_str(&ex.object);
                out.push('\n');
                current = Some(&ex.object);
            }
            out.push_str(&format!("{}: {}\n", ex.keyword, ex.portrayal));
        }

        out.push('\n');
        let context = context_caption.trim();
        for line in self.query.lines() {
            if line.contains(CONTEXT_SLOT) && context.is_empty() {
                continue;
            }
            out.push_str(&line.replace(CONTEXT_SLOT, context).replace(OBJECT_SLOT, &object.label));
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn build_prompt(
    template: &PromptTemplate,
    context_caption: &str,
    object: &ObjectTag,
    k: usize,
    keyword_word_limit: usize,
) -> Result<String, TemplateError> {
    template.render(context_caption, object, k, keyword_word_limit)
}

/// What a rendered prompt asks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptQuery {
    pub object: String,
    pub count: usize,
}

/// Recover the query object and requested count from a rendered prompt.
pub fn parse_query(prompt: &str) -> Option<PromptQuery> {
    let object = prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(OBJECT_PREFIX))?
        .trim()
        .to_string();
    let count = prompt
        .lines()
        .find_map(|l| l.strip_prefix(REQUEST_PREFIX))
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|n| n.parse().ok())?;
    Some(PromptQuery { object, count })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineReject {
    NoDelimiter,
    EmptyKeyword,
    EmptyPortrayal,
    KeywordTooLong { words: usize, limit: usize },
    EchoedLabel,
    Duplicate,
    Surplus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    pub line_no: usize,
    pub text: String,
    pub reason: LineReject,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedVariations {
    pub variations: Vec<ConceptVariation>,
    pub rejected: Vec<RejectedLine>,
}

/// No line of the response parsed; the caller skips the object.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("response contained no parseable variation ({} lines rejected)", .rejected.len())]
pub struct EmptyResponse {
    pub rejected: Vec<RejectedLine>,
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim_start();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = t.strip_prefix(bullet) {
            return rest;
        }
    }
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if r.starts_with(char::is_whitespace) {
                return r;
            }
        }
    }
    t
}

fn unquote(s: &str) -> &str {
    s.trim().trim_matches(|c| c == '"' || c == '\'' || c == '*').trim()
}

/// Parse up to `k` "keyword: portrayal" lines. Lines that break the grammar,
/// exceed the keyword word limit, or come after the first `k` valid lines are
/// reported in `rejected`.
pub fn parse_variations(
    response: &str,
    object: &ObjectTag,
    k: usize,
    keyword_word_limit: usize,
) -> Result<ParsedVariations, EmptyResponse> {
    let mut out = ParsedVariations::default();
    for (i, raw) in response.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let reject = |reason| RejectedLine {
            line_no: i + 1,
            text: raw.to_string(),
            reason,
        };
        let body = strip_list_marker(raw);
        let Some((kw, portrayal)) = body.split_once(':') else {
            out.rejected.push(reject(LineReject::NoDelimiter));
            continue;
        };
        let keyword = normalize_spaces(unquote(kw));
        let portrayal = normalize_spaces(unquote(portrayal));
        if keyword.is_empty() {
            out.rejected.push(reject(LineReject::EmptyKeyword));
            continue;
        }
        if portrayal.is_empty() {
            out.rejected.push(reject(LineReject::EmptyPortrayal));
            continue;
        }
        let lowered = normalize_label(&keyword);
        if lowered == "object" || lowered == "context" || lowered == "keyword" {
            out.rejected.push(reject(LineReject::EchoedLabel));
            continue;
        }
        let words = word_count(&keyword);
        if words > keyword_word_limit {
            out.rejected.push(reject(LineReject::KeywordTooLong {
                words,
                limit: keyword_word_limit,
            }));
            continue;
        }
        if out
            .variations
            .iter()
            .any(|v| normalize_label(&v.keyword) == lowered)
        {
            out.rejected.push(reject(LineReject::Duplicate));
            continue;
        }
        if out.variations.len() >= k {
            out.rejected.push(reject(LineReject::Surplus));
            continue;
        }
        out.variations.push(ConceptVariation {
            object: object.clone(),
            portrayal,
            keyword,
        });
    }
    if out.variations.is_empty() {
        return Err(EmptyResponse { rejected: out.rejected });
    }
    Ok(out)
}

fn normalize_spaces(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn water() -> ObjectTag {
        ObjectTag::detected("water")
    }

    #[test]
    fn golden_prompt() {
        let t = PromptTemplate {
            instruction: "Propose alternative versions of an object.".into(),
            examples: vec![IclExample::new("bread", "freshly baked loaf", "a freshly baked loaf with a golden crust")],
            query: "Context: {context}\nObject: {object}".into(),
        };
        let p = build_prompt(&t, "a seagull flying over the water near a large ship", &water(), 4, 3).unwrap();
        assert_eq!(p, include_str!("../../tests/golden/prompt_water.txt"));
        assert!(p.contains("freshly baked loaf"));
        assert!(p.contains("using a maximum of three words"));
    }

    #[test]
    fn single_variation_request() {
        let p = PromptTemplate::default_template().render("ctx", &water(), 1, 3).unwrap();
        assert!(p.contains("Write 1 variation for the query object"));
        assert_eq!(parse_query(&p), Some(PromptQuery { object: "water".into(), count: 1 }));
    }

    #[test]
    fn empty_context_omits_section() {
        let p = PromptTemplate::default_template().render("  ", &water(), 2, 3).unwrap();
        assert!(!p.contains("Context:"));
        assert!(p.ends_with("Object: water\n"));
    }

    #[test]
    fn missing_slot_is_template_error() {
        let mut t = PromptTemplate::default_template();
        t.query = "Object: {object}".into();
        assert_eq!(
            t.render("c", &water(), 1, 3),
            Err(TemplateError::Slot { slot: CONTEXT_SLOT, count: 0 })
        );
        t.query = "{context} {context} {object}".into();
        assert!(matches!(t.validate(), Err(TemplateError::Slot { count: 2, .. })));
        let mut t = PromptTemplate::default_template();
        t.examples.clear();
        assert_eq!(t.validate(), Err(TemplateError::NoExamples));
    }

    #[test]
    fn parses_eagle_line() {
        let r = parse_variations("bald eagle: a black and white bald eagle", &ObjectTag::detected("bird"), 4, 3).unwrap();
        assert_eq!(r.variations.len(), 1);
        assert_eq!(r.variations[0].keyword, "bald eagle");
        assert_eq!(r.variations[0].portrayal, "a black and white bald eagle");
    }

    #[test]
    fn parses_mountain_lake() {
        let r = parse_variations(
            "mountain lake: a serene mountain lake with snow-capped peaks reflected in it",
            &water(),
            4,
            3,
        )
        .unwrap();
        assert_eq!(r.variations[0].keyword, "mountain lake");
    }

    #[test]
    fn truncates_to_k() {
        let text = (1..=6).map(|i| format!("kw{i}: portrayal {i}")).collect::<Vec<_>>().join("\n");
        let r = parse_variations(&text, &water(), 4, 3).unwrap();
        let kws: Vec<_> = r.variations.iter().map(|v| v.keyword.as_str()).collect();
        assert_eq!(kws, ["kw1", "kw2", "kw3", "kw4"]);
        assert_eq!(r.rejected.iter().filter(|l| l.reason == LineReject::Surplus).count(), 2);
    }

    #[test]
    fn drops_bad_lines_with_report() {
        let text = "Here are 3 variations:\n1. frozen river: a frozen river\n- a very long keyword here: x\nno delimiter\nObject: water\n";
        let r = parse_variations(text, &water(), 3, 3).unwrap();
        assert_eq!(r.variations.len(), 1);
        assert_eq!(r.variations[0].keyword, "frozen river");
        let reasons: Vec<_> = r.rejected.iter().map(|l| l.reason.clone()).collect();
        assert_eq!(
            reasons,
            vec![
                LineReject::EmptyPortrayal,
                LineReject::KeywordTooLong { words: 5, limit: 3 },
                LineReject::NoDelimiter,
                LineReject::EchoedLabel
            ]
        );
        assert_eq!(r.rejected[0].line_no, 1);
    }

    #[test]
    fn empty_response_signal() {
        let e = parse_variations("nothing useful", &water(), 2, 3).unwrap_err();
        assert_eq!(e.rejected.len(), 1);
        assert!(parse_variations("", &water(), 2, 3).is_err());
    }

    proptest! {
        #[test]
        fn keywords_never_exceed_limit(lines in proptest::collection::vec("[a-z ]{0,30}:?[a-z ]{0,30}", 0..12), limit in 1usize..5, k in 1usize..6) {
            let text = lines.join("\n");
            if let Ok(r) = parse_variations(&text, &water(), k, limit) {
                prop_assert!(r.variations.len() <= k);
                for v in &r.variations {
                    prop_assert!(word_count(&v.keyword) <= limit);
                    prop_assert!(!v.keyword.is_empty() && !v.portrayal.is_empty());
                }
            }
        }
    }
}
