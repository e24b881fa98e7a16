use std::sync::OnceLock;

use regex::Regex;

use super::BehaviorError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorFields {
    pub facial_expression: String,
    pub body_language: String,
    pub posture: String,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Facial,
    Body,
    Posture,
}

fn header_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Optional markdown emphasis around the header, then a colon.
    RE.get_or_init(|| {
        Regex::new(r"(?i)\**\b(facial\s+expressions?|body\s+language|posture)\b\**\s*:").unwrap()
    })
}

/// Extracts `Facial expression:`, `Body language:` and `Posture:` sections,
/// in any order and case. Each value runs to the next header or the end.
pub fn parse_behavior_response(raw: &str) -> Result<BehaviorFields, BehaviorError> {
    if raw.trim().is_empty() {
        return Err(BehaviorError::Precondition("response is empty".into()));
    }
    let headers: Vec<(Section, usize, usize)> = header_regex()
        .captures_iter(raw)
        .map(|c| {
            let whole = c.get(0).unwrap();
            let name = c[1].to_ascii_lowercase();
            let section = if name.starts_with("facial") {
                Section::Facial
            } else if name.starts_with("body") {
                Section::Body
            } else {
                Section::Posture
            };
            (section, whole.start(), whole.end())
        })
        .collect();

    let value_of = |wanted: Section| -> Option<String> {
        let idx = headers.iter().position(|(s, _, _)| *s == wanted)?;
        let start = headers[idx].2;
        let end = headers.get(idx + 1).map_or(raw.len(), |h| h.1);
        let value = raw[start..end].trim_matches(|c: char| c.is_whitespace() || c == '*' || c == '-');
        (!value.is_empty()).then(|| value.to_string())
    };

    Ok(BehaviorFields {
        facial_expression: value_of(Section::Facial)
            .ok_or(BehaviorError::MissingSection("facial expression"))?,
        body_language: value_of(Section::Body).ok_or(BehaviorError::MissingSection("body language"))?,
        posture: value_of(Section::Posture).ok_or(BehaviorError::MissingSection("posture"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_in_declared_order() {
        let f = parse_behavior_response(
            "Facial expression: smiling broadly. Body language: leaning forward eagerly. Posture: upright and open.",
        )
        .unwrap();
        assert_eq!(f.facial_expression, "smiling broadly.");
        assert_eq!(f.body_language, "leaning forward eagerly.");
        assert_eq!(f.posture, "upright and open.");
    }

    #[test]
    fn order_independent_and_case_insensitive() {
        let a = parse_behavior_response("Facial expression: a\nBody language: b\nPosture: c").unwrap();
        let b = parse_behavior_response("POSTURE: c\nfacial expression: a\nBody Language: b").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn markdown_headers() {
        let f = parse_behavior_response("**Facial expression**: frown\n**Body language:** arms crossed\n- Posture: slumped").unwrap();
        assert_eq!(f.facial_expression, "frown");
        assert_eq!(f.body_language, "arms crossed");
        assert_eq!(f.posture, "slumped");
    }

    #[test]
    fn missing_section_is_named() {
        let err = parse_behavior_response("Facial expression: a. Body language: b.").unwrap_err();
        assert!(matches!(err, BehaviorError::MissingSection("posture")));
        let err = parse_behavior_response("Facial expression: Body language: b. Posture: c").unwrap_err();
        assert!(matches!(err, BehaviorError::MissingSection("facial expression")));
    }

    #[test]
    fn empty_input_is_a_precondition_error() {
        assert!(matches!(parse_behavior_response(""), Err(BehaviorError::Precondition(_))));
    }
}
