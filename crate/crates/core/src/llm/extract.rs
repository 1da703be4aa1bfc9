use thiserror::Error;

use crate::model::QueryKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtractError {
    #[error("no <{0}> tag in completion")]
    Missing(String),
    #[error("<{0}> tag is not closed")]
    Unclosed(String),
    #[error("`{0}` is not a number")]
    NotNumeric(String),
    #[error("{kind} value {value} is out of bounds")]
    OutOfBounds { value: f64, kind: QueryKind },
}

/// Wraps `inner` in `<tag>...</tag>`.
pub fn wrap(tag: &str, inner: &str) -> String {
    format!("<{tag}>{inner}</{tag}>")
}

fn find_tagged<'a>(text: &'a str, tag: &str) -> Result<(&'a str, usize), ExtractError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open).ok_or_else(|| ExtractError::Missing(tag.to_string()))? + open.len();
    let len = text[start..]
        .find(&close)
        .ok_or_else(|| ExtractError::Unclosed(tag.to_string()))?;
    Ok((&text[start..start + len], start + len + close.len()))
}

/// Trimmed content of the first `<tag>…</tag>` pair. Tags are lowercase and
/// matched case-sensitively.
pub fn extract_tagged(text: &str, tag: &str) -> Result<String, ExtractError> {
    find_tagged(text, tag).map(|(inner, _)| inner.trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListItem {
    pub answer: String,
    pub kind: Option<String>,
}

/// Ordered `<answer>` items from the first `<list>` block, each paired with
/// the `<type>` that immediately follows it when present.
pub fn extract_list(text: &str) -> Result<Vec<ListItem>, ExtractError> {
    let (mut rest, _) = find_tagged(text, "list")?;
    let mut items = Vec::new();
    while rest.contains("<answer>") {
        let (answer, end) = find_tagged(rest, "answer")?;
        rest = &rest[end..];
        let mut kind = None;
        let trimmed = rest.trim_start();
        if trimmed.starts_with("<type>") {
            let (t, end) = find_tagged(trimmed, "type")?;
            kind = Some(t.trim().to_string());
            rest = &trimmed[end..];
        }
        items.push(ListItem {
            answer: answer.trim().to_string(),
            kind,
        });
    }
    Ok(items)
}

/// Parses a model-written number and checks it against the answer kind.
///
/// Commas, currency symbols and surrounding whitespace are stripped; a
/// trailing `%` divides by 100.
pub fn parse_numeric(text: &str, kind: QueryKind) -> Result<f64, ExtractError> {
    let mut s: String = text
        .chars()
        .filter(|c| !matches!(c, ',' | '$' | '\u{20ac}' | '\u{00a3}' | '\u{00a5}' | '_') && !c.is_whitespace())
        .collect();
    let percent = s.ends_with('%');
    if percent {
        s.pop();
    }
    let mut value: f64 = s
        .parse()
        .map_err(|_| ExtractError::NotNumeric(text.trim().to_string()))?;
    if !value.is_finite() {
        return Err(ExtractError::NotNumeric(text.trim().to_string()));
    }
    if percent {
        value /= 100.0;
    }
    if !kind.admits(value) {
        return Err(ExtractError::OutOfBounds { value, kind });
    }
    Ok(value)
}
