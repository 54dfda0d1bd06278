use crate::error::CampaignError;

struct Fence<'a> {
    tag: &'a str,
    body: &'a str,
}

/// Fenced blocks in order of appearance. An unterminated block runs to the
/// end of the text.
fn fences(text: &str) -> Vec<Fence<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let (tag, body_start) = match after.find('\n') {
            Some(nl) => (after[..nl].trim(), nl + 1),
            None => (after.trim(), after.len()),
        };
        let body_and_more = &after[body_start..];
        let (body, next) = match body_and_more.find("```") {
            Some(close) => (&body_and_more[..close], &body_and_more[close + 3..]),
            None => (body_and_more, ""),
        };
        let body = body.strip_suffix('\n').unwrap_or(body);
        let body = body.strip_suffix('\r').unwrap_or(body);
        out.push(Fence { tag, body });
        rest = next;
    }
    out
}

/// The model's answer: the first block tagged `input`, else the first tagged
/// `input-base64` (decoded), else the first fenced block of any tag.
pub fn extract_answer(completion: &str) -> Result<Vec<u8>, CampaignError> {
    let blocks = fences(completion);
    if let Some(b) = blocks.iter().find(|b| b.tag == "input") {
        return Ok(b.body.as_bytes().to_vec());
    }
    if let Some(b) = blocks.iter().find(|b| b.tag == "input-base64") {
        return crate::b64_decode(b.body).map_err(|_| CampaignError::ExtractionFailure);
    }
    blocks
        .first()
        .map(|b| b.body.as_bytes().to_vec())
        .ok_or(CampaignError::ExtractionFailure)
}
