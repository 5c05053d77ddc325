//! Caption editing: swap the first whole-word occurrence of a tag for the
//! variation's keyword, falling back to the tagger's scene caption when the
//! human caption never mentions the tag.

use std::ops::Range;

use thiserror::Error;

use crate::model::{CaptionEdit, ConceptVariation, ObjectTag, SourcePair};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EditError {
    #[error("tag `{0}` occurs in neither the human nor the generated caption")]
    TagNotFound(String),
    #[error("variation keyword is empty")]
    EmptyKeyword,
    #[error("replacing `{original}` with `{keyword}` leaves the caption unchanged")]
    NoChange { original: String, keyword: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditedCaption {
    pub caption: String,
    pub edit: CaptionEdit,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn chars_eq_ignore_case(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// Byte ranges of case-insensitive, whole-word, non-overlapping occurrences
/// of `needle` in `haystack`.
pub fn find_whole_word(haystack: &str, needle: &str) -> Vec<Range<usize>> {
    let mut found = Vec::new();
    if needle.is_empty() {
        return found;
    }
    let mut prev: Option<char> = None;
    let mut skip_until = 0usize;
    for (start, c) in haystack.char_indices() {
        let boundary_before = prev.is_none_or(|p| !is_word_char(p));
        prev = Some(c);
        if start < skip_until || !boundary_before {
            continue;
        }
        let mut hay = haystack[start..].char_indices();
        let mut end = None;
        let mut matched = true;
        let mut needle_chars = needle.chars().peekable();
        while let Some(n) = needle_chars.next() {
            match hay.next() {
                Some((_, h)) if chars_eq_ignore_case(h, n) => {
                    if needle_chars.peek().is_none() {
                        end = Some(start + hay.next().map_or(haystack.len() - start, |(i, _)| i));
                    }
                }
                _ => {
                    matched = false;
                    break;
                }
            }
        }
        if !matched {
            continue;
        }
        let Some(end) = end else { continue };
        let boundary_after = haystack[end..].chars().next().is_none_or(|n| !is_word_char(n));
        if boundary_after {
            found.push(start..end);
            skip_until = end;
        }
    }
    found
}

fn replace_first(caption: &str, tag: &ObjectTag, keyword: &str, used_fallback: bool) -> Option<EditedCaption> {
    let hits = find_whole_word(caption, &tag.label);
    let first = hits.first()?.clone();
    let mut edited = String::with_capacity(caption.len() + keyword.len());
    edited.push_str(&caption[..first.start]);
    edited.push_str(keyword);
    edited.push_str(&caption[first.end..]);
    Some(EditedCaption {
        edit: CaptionEdit {
            start: first.start,
            end: first.start + keyword.len(),
            original: caption[first.clone()].to_string(),
            used_fallback,
            multi_instance: hits.len() > 1,
        },
        caption: edited,
    })
}

/// Replace the tag with the variation's keyword.
///
/// The human caption is tried first; if it does not contain the tag as a
/// whole word, the pair's generated caption is edited instead and
/// `used_fallback` is set. Everything outside the replaced span is kept.
pub fn edit_caption(
    pair: &SourcePair,
    tag: &ObjectTag,
    variation: &ConceptVariation,
) -> Result<EditedCaption, EditError> {
    let keyword = variation.keyword.trim();
    if keyword.is_empty() {
        return Err(EditError::EmptyKeyword);
    }
    let edited = replace_first(&pair.caption, tag, keyword, false)
        .or_else(|| {
            pair.generated_caption
                .as_deref()
                .and_then(|g| replace_first(g, tag, keyword, true))
        })
        .ok_or_else(|| EditError::TagNotFound(tag.label.clone()))?;
    if edited.edit.original == keyword {
        return Err(EditError::NoChange {
            original: edited.edit.original,
            keyword: keyword.to_string(),
        });
    }
    Ok(edited)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageRef, Split};
    use proptest::prelude::*;

    fn pair(caption: &str, generated: Option<&str>) -> SourcePair {
        SourcePair {
            id: "p".into(),
            image: ImageRef {
                id: "p".into(),
                path: "p.png".into(),
                width: 1,
                height: 1,
            },
            caption: caption.into(),
            generated_caption: generated.map(Into::into),
            split: Split::Train,
        }
    }

    fn variation(object: &str, keyword: &str) -> ConceptVariation {
        ConceptVariation {
            object: ObjectTag::detected(object),
            portrayal: format!("a detailed {keyword}"),
            keyword: keyword.into(),
        }
    }

    #[test]
    fn seagull_becomes_bald_eagle() {
        let p = pair("a seagull flying over the water near a large ship", None);
        let e = edit_caption(&p, &ObjectTag::detected("seagull"), &variation("seagull", "bald eagle")).unwrap();
        assert_eq!(e.caption, "a bald eagle flying over the water near a large ship");
        assert!(!e.edit.used_fallback);
        assert!(!e.edit.multi_instance);
        assert_eq!(&e.caption[e.edit.start..e.edit.end], "bald eagle");
    }

    #[test]
    fn city_falls_back_to_generated_caption() {
        let p = pair(
            "a seagull flying over the water near a large ship",
            Some("a seagull in the ocean near a harbor with a ship and a city in the background"),
        );
        let e = edit_caption(&p, &ObjectTag::detected("city"), &variation("city", "historic town")).unwrap();
        assert_eq!(
            e.caption,
            "a seagull in the ocean near a harbor with a ship and a historic town in the background"
        );
        assert!(e.edit.used_fallback);
    }

    #[test]
    fn only_first_instance_replaced() {
        let p = pair("a plate of food and a plate of fruit", None);
        let e = edit_caption(&p, &ObjectTag::detected("plate"), &variation("plate", "wooden bowl")).unwrap();
        assert_eq!(e.caption, "a wooden bowl of food and a plate of fruit");
        assert!(e.edit.multi_instance);
    }

    #[test]
    fn whole_word_and_case_insensitive() {
        assert_eq!(find_whole_word("Catalog of a cat", "cat"), vec![13..16]);
        assert_eq!(find_whole_word("A Seagull, flying", "seagull"), vec![2..9]);
        assert!(find_whole_word("mountains", "mountain").is_empty());
        assert_eq!(find_whole_word("bird bird", "bird"), vec![0..4, 5..9]);
        assert_eq!(find_whole_word("a hot dog stand", "hot dog"), vec![2..9]);
        assert_eq!(find_whole_word("é cat", "cat"), vec![3..6]);
    }

    #[test]
    fn absent_everywhere_is_error() {
        let p = pair("a dog on grass", Some("a dog in a park"));
        assert_eq!(
            edit_caption(&p, &ObjectTag::detected("cat"), &variation("cat", "tabby")),
            Err(EditError::TagNotFound("cat".into()))
        );
    }

    #[test]
    fn identity_keyword_rejected() {
        let p = pair("a dog on grass", None);
        assert!(matches!(
            edit_caption(&p, &ObjectTag::detected("dog"), &variation("dog", "dog")),
            Err(EditError::NoChange { .. })
        ));
    }

    proptest! {
        #[test]
        fn revert_reproduces_source(
            prefix in "[A-Za-z ,]{0,20}",
            suffix in "[A-Za-z ,.]{0,20}",
            label in "[a-z]{2,8}",
            keyword in "[a-z]{1,6}( [a-z]{1,6}){0,2}",
            upper in any::<bool>(),
        ) {
            let written = if upper { label.to_uppercase() } else { label.clone() };
            let caption = format!("{prefix} {written} {suffix}");
            let p = pair(&caption, None);
            match edit_caption(&p, &ObjectTag::detected(&label), &variation(&label, &keyword)) {
                Ok(e) => prop_assert_eq!(e.edit.revert(&e.caption).unwrap(), caption),
                Err(EditError::NoChange { .. }) => {}
                Err(other) => prop_assert!(false, "{other}"),
            }
        }
    }
}
