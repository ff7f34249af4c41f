//! Control-token markers, token sequences and the marker-aware tokenizer.
//!
//! Marker grammar (each marker is exactly one token):
//!
//! ```text
//! <|budget:k/K|>    ratio mode, 1 <= k <= K
//! <|elapsed:k|>     fixed-interval mode, k >= 1
//! ```
//!
//! The default tokenizer splits on whitespace. Each token keeps the whitespace
//! that precedes it, so rendering a tokenized string reproduces it byte for
//! byte. Markers are split out before whitespace splitting, so a marker glued
//! to a word still counts as its own token.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<\|(?:budget:(\d+)/(\d+)|elapsed:(\d+))\|>").unwrap())
}

/// Anything that looks like a reserved marker, well-formed or not.
fn reserved_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<\|(?:budget|elapsed):[^|<>]*\|>").unwrap())
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*\S+").unwrap())
}

/// A reserved control marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlToken {
    /// `c_index` of a ratio schedule with `of` intervals.
    Budget { index: u32, of: u32 },
    /// The `index`-th marker of a fixed-interval schedule.
    Elapsed { index: u32 },
}

impl ControlToken {
    pub fn budget(index: u32, of: u32) -> Result<Self> {
        if of == 0 || index == 0 || index > of {
            return Err(Error::invalid(format!("budget marker {index}/{of} out of range")));
        }
        Ok(ControlToken::Budget { index, of })
    }

    pub fn elapsed(index: u32) -> Result<Self> {
        if index == 0 {
            return Err(Error::invalid("elapsed marker index must be >= 1"));
        }
        Ok(ControlToken::Elapsed { index })
    }

    pub fn index(&self) -> u32 {
        match *self {
            ControlToken::Budget { index, .. } | ControlToken::Elapsed { index } => index,
        }
    }

    pub fn surface_form(&self) -> String {
        self.to_string()
    }

    /// Finds every well-formed marker in `text` with its byte range.
    pub fn find_all(text: &str) -> Vec<(std::ops::Range<usize>, ControlToken)> {
        marker_re()
            .captures_iter(text)
            .filter_map(|c| {
                let m = c.get(0)?;
                parse_captures(&c).map(|tok| (m.range(), tok))
            })
            .collect()
    }
}

fn parse_captures(c: &regex::Captures<'_>) -> Option<ControlToken> {
    if let (Some(k), Some(total)) = (c.get(1), c.get(2)) {
        let k = k.as_str().parse().ok()?;
        let total = total.as_str().parse().ok()?;
        ControlToken::budget(k, total).ok()
    } else {
        let k = c.get(3)?.as_str().parse().ok()?;
        ControlToken::elapsed(k).ok()
    }
}

impl fmt::Display for ControlToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlToken::Budget { index, of } => write!(f, "<|budget:{index}/{of}|>"),
            ControlToken::Elapsed { index } => write!(f, "<|elapsed:{index}|>"),
        }
    }
}

impl FromStr for ControlToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let c = marker_re()
            .captures(s)
            .filter(|c| c.get(0).map(|m| m.range()) == Some(0..s.len()))
            .ok_or_else(|| Error::invalid(format!("not a control marker: {s:?}")))?;
        parse_captures(&c).ok_or_else(|| Error::invalid(format!("marker out of range: {s:?}")))
    }
}

impl Serialize for ControlToken {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ControlToken {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// True if `text` contains anything shaped like a reserved marker.
pub fn contains_reserved_marker(text: &str) -> bool {
    reserved_re().is_match(text)
}

/// Removes every well-formed marker from `text`, leaving surrounding whitespace untouched.
pub fn strip_control_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (range, _) in ControlToken::find_all(text) {
        out.push_str(&text[last..range.start]);
        last = range.end;
    }
    out.push_str(&text[last..]);
    out
}

/// One token: its exact surface text (including any attached whitespace) and,
/// for markers, the parsed control token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    text: String,
    control: Option<ControlToken>,
}

impl Token {
    /// A sampled token. Its text is taken verbatim.
    pub fn sampled(text: impl Into<String>) -> Self {
        Token {
            text: text.into(),
            control: None,
        }
    }

    /// An injected control token with no surrounding whitespace.
    pub fn control(token: ControlToken) -> Self {
        Token {
            text: token.surface_form(),
            control: Some(token),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn as_control(&self) -> Option<ControlToken> {
        self.control
    }

    pub fn is_control(&self) -> bool {
        self.control.is_some()
    }

    /// Whitespace carried by a control token around its marker.
    fn residual_whitespace(&self) -> String {
        match self.control {
            Some(c) => self.text.replacen(&c.surface_form(), "", 1),
            None => String::new(),
        }
    }
}

/// An ordered token sequence. Its length is the token count `|y|`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marker-aware whitespace tokenization.
    pub fn from_text(text: &str) -> Self {
        let mut tokens = Vec::new();
        let mut pending_ws = String::new();
        let push_words = |segment: &str, tokens: &mut Vec<Token>, pending: &mut String| {
            let mut end = 0;
            for m in word_re().find_iter(segment) {
                let mut t = std::mem::take(pending);
                t.push_str(m.as_str());
                tokens.push(Token::sampled(t));
                end = m.end();
            }
            pending.push_str(&segment[end..]);
        };

        let mut last = 0;
        for (range, control) in ControlToken::find_all(text) {
            push_words(&text[last..range.start], &mut tokens, &mut pending_ws);
            let mut t = std::mem::take(&mut pending_ws);
            t.push_str(&text[range.clone()]);
            tokens.push(Token {
                text: t,
                control: Some(control),
            });
            last = range.end;
        }
        push_words(&text[last..], &mut tokens, &mut pending_ws);
        if let Some(tail) = tokens.last_mut() {
            tail.text.push_str(&pending_ws);
        }
        TokenSeq { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: Token) {
        self.tokens.push(token);
    }

    pub fn extend(&mut self, other: TokenSeq) {
        self.tokens.extend(other.tokens);
    }

    pub fn concat(mut self, other: TokenSeq) -> TokenSeq {
        self.extend(other);
        self
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.tokens.iter()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn truncate(&mut self, len: usize) {
        self.tokens.truncate(len);
    }

    /// Concatenated surface text.
    pub fn render(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Indices of control tokens within the sequence.
    pub fn control_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_control())
            .map(|(i, _)| i)
            .collect()
    }

    /// Control tokens paired with their indices.
    pub fn controls(&self) -> impl Iterator<Item = (usize, ControlToken)> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.control.map(|c| (i, c)))
    }
}

impl FromIterator<Token> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        TokenSeq {
            tokens: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for TokenSeq {
    type Item = Token;
    type IntoIter = std::vec::IntoIter<Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.tokens.into_iter()
    }
}

/// Removes every control token. Whitespace a removed marker carried is moved
/// onto the next kept token (or the previous one at the end), so the rendered
/// text equals [`strip_control_markers`] of the original rendering.
pub fn strip_control_tokens(seq: &TokenSeq) -> TokenSeq {
    let mut out: Vec<Token> = Vec::with_capacity(seq.len());
    let mut carry = String::new();
    for tok in seq.iter() {
        if tok.is_control() {
            carry.push_str(&tok.residual_whitespace());
        } else if carry.is_empty() {
            out.push(tok.clone());
        } else {
            let mut text = std::mem::take(&mut carry);
            text.push_str(&tok.text);
            out.push(Token::sampled(text));
        }
    }
    if !carry.is_empty() {
        if let Some(last) = out.last_mut() {
            last.text.push_str(&carry);
        }
    }
    TokenSeq { tokens: out }
}

/// How tokens are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    /// Whitespace split, each reserved marker exactly one token.
    #[default]
    MarkerAwareWhitespace,
    /// One streamed event is one token.
    EventCount,
}

/// Counts tokens in a sequence under the given mode. Event counting takes the
/// sequence's own token boundaries; whitespace counting re-tokenizes its text.
pub fn count_tokens(seq: &TokenSeq, mode: TokenizerMode) -> usize {
    match mode {
        TokenizerMode::EventCount => seq.len(),
        TokenizerMode::MarkerAwareWhitespace => count_text_tokens(&seq.render()),
    }
}

/// Marker-aware whitespace count of plain text.
pub fn count_text_tokens(text: &str) -> usize {
    TokenSeq::from_text(text).len()
}
