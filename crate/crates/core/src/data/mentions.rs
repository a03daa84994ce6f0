use serde::{Deserialize, Serialize};

use super::corpus::Span;

/// Class name to surface forms; each form is a token sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynonymDict {
    entries: Vec<(String, Vec<Vec<String>>)>,
}

impl SynonymDict {
    pub fn new(entries: Vec<(String, Vec<Vec<String>>)>) -> Self {
        Self { entries }
    }

    pub fn from_words(entries: &[(&str, &[&str])]) -> Self {
        Self::new(
            entries
                .iter()
                .map(|(class, forms)| {
                    let forms = forms
                        .iter()
                        .map(|f| f.split_whitespace().map(str::to_string).collect())
                        .collect();
                    (class.to_string(), forms)
                })
                .collect(),
        )
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(c, _)| c.as_str())
    }
}

/// Leftmost-longest, non-overlapping dictionary matches. Classes mentioned
/// more than once are dropped, keeping only single-instance mentions.
pub fn match_mentions(tokens: &[String], dict: &SynonymDict) -> Vec<(String, Span)> {
    let mut found: Vec<(String, Span)> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut best: Option<(&str, usize)> = None;
        for (class, forms) in &dict.entries {
            for form in forms {
                let n = form.len();
                if n > 0
                    && tokens.len() - i >= n
                    && tokens[i..i + n] == form[..]
                    && best.is_none_or(|(_, len)| n > len)
                {
                    best = Some((class, n));
                }
            }
        }
        match best {
            Some((class, n)) => {
                found.push((class.to_string(), Span::new(i, i + n)));
                i += n;
            }
            None => i += 1,
        }
    }
    let count = |c: &str| found.iter().filter(|(k, _)| k == c).count();
    found.iter().filter(|(c, _)| count(c) == 1).cloned().collect()
}
