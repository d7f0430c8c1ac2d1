//! Shared text helpers: value normalization, token-boundary matching and a
//! small edit-distance implementation used by slot-type merging.

/// Normalize a slot value or model output: trim, collapse internal
/// whitespace to single spaces, lowercase.
pub fn normalize_value(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Collapse whitespace runs to single spaces without touching case. Used for
/// utterances, where the original casing is kept.
pub fn tidy_text(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Simple case fold: first char of the full Unicode lowercase expansion.
/// Exact for ASCII and the vast majority of letters; both the matcher and
/// its test oracle use this same definition.
pub fn fold_char(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

/// True for characters stripped from token edges before comparison.
/// Interior punctuation stays, so "09:15" and "don't" are single tokens.
/// Angle brackets are kept even at edges so the mask sentinel "<mask>"
/// never collides with a value spelled "mask".
fn is_strippable(c: char) -> bool {
    !c.is_alphanumeric() && c != '<' && c != '>'
}

/// Byte span of a whitespace token's core: the token with strippable
/// punctuation removed from both edges. `None` for punctuation-only
/// tokens.
fn token_core(token_start: usize, token: &str) -> Option<(usize, usize)> {
    let mut start = None;
    let mut end = 0;
    for (offset, c) in token.char_indices() {
        if !is_strippable(c) {
            if start.is_none() {
                start = Some(offset);
            }
            end = offset + c.len_utf8();
        }
    }
    start.map(|s| (token_start + s, token_start + end))
}

fn cores(text: &str) -> Vec<(usize, usize)> {
    text.split_whitespace()
        .filter_map(|token| {
            let start = token.as_ptr() as usize - text.as_ptr() as usize;
            token_core(start, token)
        })
        .collect()
}

fn folded_eq(a: &str, b: &str) -> bool {
    let mut ia = a.chars().map(fold_char);
    let mut ib = b.chars().map(fold_char);
    loop {
        match (ia.next(), ib.next()) {
            (None, None) => return true,
            (Some(x), Some(y)) if x == y => {}
            _ => return false,
        }
    }
}

/// Byte spans of case-insensitive, token-boundary occurrences of `needle`
/// in `haystack`, non-overlapping, left to right. Both sides are cut into
/// whitespace tokens whose edge punctuation is ignored; a match is a run
/// of haystack token cores equal to the needle's token cores. So "15"
/// matches in "pay 15 dollars" but not inside "09:15", "north" matches in
/// "the north." despite the full stop, and "park" never matches inside
/// "parking". Spans run from the first core's start to the last core's
/// end.
pub fn find_occurrences(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    let needle_cores: Vec<&str> = cores(needle)
        .into_iter()
        .map(|(s, e)| &needle[s..e])
        .collect();
    if needle_cores.is_empty() {
        return Vec::new();
    }
    let hay_cores = cores(haystack);
    let n = needle_cores.len();
    let mut spans = Vec::new();
    let mut i = 0;
    while i + n <= hay_cores.len() {
        let hit = (0..n).all(|k| {
            let (s, e) = hay_cores[i + k];
            folded_eq(&haystack[s..e], needle_cores[k])
        });
        if hit {
            spans.push((hay_cores[i].0, hay_cores[i + n - 1].1));
            i += n;
        } else {
            i += 1;
        }
    }
    spans
}

/// Levenshtein distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Similarity in [0, 1]: 1 - distance / max(len). Two empty strings are
/// identical by convention.
pub fn normalized_similarity(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let longest = la.max(lb);
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}
