//! Tokenization, vocabularies and minibatch plans.

mod batching;
mod classification;

pub use batching::{plan_random, plan_successive, Batch, BatchMode, BatchPlan, SuccessivePlan};
pub use classification::{kfold_assignments, load_classification_tsv, parse_classification_tsv, ClassificationData};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const START_ID: usize = 0;
pub const END_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const START_TOKEN: &str = "<s>";
pub const END_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
const RESERVED: [&str; 3] = [START_TOKEN, END_TOKEN, UNK_TOKEN];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenLevel {
    /// One token per Unicode scalar value; newlines are ordinary tokens.
    Char,
    /// Whitespace-separated words; each line ends with END.
    Word,
}

impl fmt::Display for TokenLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenLevel::Char => "char",
            TokenLevel::Word => "word",
        })
    }
}

impl FromStr for TokenLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenLevel::Char),
            "word" => Ok(TokenLevel::Word),
            other => Err(Error::invalid(format!("unknown token level `{other}`"))),
        }
    }
}

pub fn tokenize(text: &str, level: TokenLevel) -> Vec<String> {
    match level {
        TokenLevel::Char => text.chars().map(String::from).collect(),
        TokenLevel::Word => {
            let mut out = Vec::new();
            for line in text.lines() {
                let before = out.len();
                out.extend(line.split_whitespace().map(String::from));
                if out.len() > before {
                    out.push(END_TOKEN.to_string());
                }
            }
            out
        }
    }
}

/// Dense token ↔ id map. Ids 0, 1 and 2 are START, END and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if v.index.contains_key(&t) {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{}`", escape(&t))));
            }
            v.index.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| self.token(id).ok_or(Error::TokenOutOfRange { id, vocab: self.len() }))
            .collect()
    }

    /// One escaped token per line, reserved entries included.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(&escape(t));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        for (i, r) in RESERVED.iter().enumerate() {
            match lines.next() {
                Some(l) if l == *r => {}
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("expected reserved token `{r}`"),
                    })
                }
            }
        }
        let rest: Vec<String> = lines.enumerate().map(|(i, l)| unescape(l, i + 4)).collect::<Result<_>>()?;
        Self::from_tokens(rest)
    }
}

fn escape(t: &str) -> String {
    let mut s = String::with_capacity(t.len());
    for c in t.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            '\t' => s.push_str("\\t"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(line: &str, lineno: usize) -> Result<String> {
    let mut s = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            s.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => s.push('\\'),
            Some('n') => s.push('\n'),
            Some('r') => s.push('\r'),
            Some('t') => s.push('\t'),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "bad escape in vocabulary entry".into(),
                })
            }
        }
    }
    if s.is_empty() {
        return Err(Error::Parse {
            line: lineno,
            msg: "empty vocabulary entry".into(),
        });
    }
    Ok(s)
}

/// Keeps the most frequent tokens (ties broken lexicographically). `max_size`
/// counts non-reserved entries; tokens seen fewer than `min_count` times are
/// dropped. Reserved tokens in the input are not counted.
pub fn build_vocab<I, S>(tokens: I, max_size: Option<usize>, min_count: usize) -> Vocab
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in tokens {
        let t = t.as_ref();
        if RESERVED.contains(&t) {
            continue;
        }
        match counts.get_mut(t) {
            Some(c) => *c += 1,
            None => {
                counts.insert(t.to_string(), 1);
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(m) = max_size {
        ranked.truncate(m);
    }
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t)).expect("ranked tokens are distinct")
}

/// START followed by the encoded tokens.
pub fn encode_stream<S: AsRef<str>>(vocab: &Vocab, tokens: &[S]) -> Vec<usize> {
    std::iter::once(START_ID).chain(tokens.iter().map(|t| vocab.id(t.as_ref()))).collect()
}

/// Contiguous split of a token stream by fractions; the test split takes
/// whatever remains.
pub fn split_by_fraction<T: Clone>(items: &[T], train: f64, valid: f64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if !(train > 0.0 && valid >= 0.0 && train + valid <= 1.0) {
        return Err(Error::invalid(format!("bad split fractions train={train} valid={valid}")));
    }
    let n = items.len();
    let a = (n as f64 * train).floor() as usize;
    let b = (n as f64 * (train + valid)).floor() as usize;
    Ok((items[..a].to_vec(), items[a..b].to_vec(), items[b..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_examples() {
        let v = build_vocab(tokenize("abab", TokenLevel::Char), None, 1);
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(3), Some("a"));
        assert_eq!(v.token(4), Some("b"));

        let toks = ["x", "y", "x", "y", "x", "x", "y", "x"];
        let v = build_vocab(toks, Some(1), 1);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("x"), 3);
        assert_eq!(v.id("y"), UNK_ID);

        let v = build_vocab(["b", "a", "c", "a", "b"], None, 1);
        assert_eq!(v.tokens()[3..], ["a".to_string(), "b".into(), "c".into()]);
        let v = build_vocab(["b", "a", "c", "a", "b"], None, 2);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn word_tokens_mark_line_ends() {
        let t = tokenize("the cat\n\n sat  down \n", TokenLevel::Word);
        assert_eq!(t, ["the", "cat", END_TOKEN, "sat", "down", END_TOKEN]);
        let v = build_vocab(&t, None, 1);
        assert_eq!(v.id(END_TOKEN), END_ID);
        let ids = encode_stream(&v, &t);
        assert_eq!(ids[0], START_ID);
        assert_eq!(ids[3], END_ID);
    }

    #[test]
    fn text_round_trip_with_escapes() {
        let v = build_vocab(tokenize("a\\b\n\tc\r", TokenLevel::Char), None, 1);
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocab::from_text("x\n").is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = build_vocab(["p", "q", "r"], None, 1);
        let ids = v.encode(&["q", "zz", "p"]);
        assert_eq!(ids, [v.id("q"), UNK_ID, v.id("p")]);
        assert_eq!(v.decode(&ids).unwrap(), ["q", UNK_TOKEN, "p"]);
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn fraction_split() {
        let x: Vec<usize> = (0..10).collect();
        let (a, b, c) = split_by_fraction(&x, 0.8, 0.1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert!(split_by_fraction(&x, 0.9, 0.2).is_err());
    }
}
