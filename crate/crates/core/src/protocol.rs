//! Token protocol shared by every other module.
//!
//! A completion is laid out as
//!
//! ```text
//! <bos> prompt.. <think> cot.. </think> <answer> answer.. </answer>
//! ```
//!
//! Generation starts right after `<think>` (the rendered prompt ends there).
//! Everything sampled before `<answer>` is the chain of thought, formatting
//! tokens included. Likelihood rewards score the reference answer plus the
//! closing `</answer>` immediately after `prompt ++ cot ++ [<answer>]`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub const BOS: Token = Token(0);
    pub const THINK_OPEN: Token = Token(1);
    pub const THINK_CLOSE: Token = Token(2);
    pub const ANS_OPEN: Token = Token(3);
    pub const ANS_CLOSE: Token = Token(4);
    pub const PAD: Token = Token(5);

    pub const NUM_SPECIAL: usize = 6;

    pub fn is_special(self) -> bool {
        (self.0 as usize) < Self::NUM_SPECIAL
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const SPECIAL_SYMBOLS: [&str; Token::NUM_SPECIAL] =
    ["<bos>", "<think>", "</think>", "<answer>", "</answer>", "<pad>"];

/// Dense token vocabulary. Specials occupy ids 0..6, ordinary symbols follow
/// in declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, Token>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    ordinary: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        Vocab::new(repr.ordinary)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            ordinary: v.ordinary_symbols().to_vec(),
        }
    }
}

impl Vocab {
    pub fn new<I, S>(ordinary: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut symbols: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
        symbols.extend(ordinary.into_iter().map(Into::into));
        if symbols.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("vocabulary too large".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, sym) in symbols.iter().enumerate() {
            if index.insert(sym.clone(), Token(id as u16)).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary symbol `{sym}`"
                )));
            }
        }
        Ok(Vocab { symbols, index })
    }

    /// Vocabulary of the built-in tasks: digits, `+`, and the letters a..l.
    pub fn builtin() -> Self {
        let mut ordinary: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        ordinary.push("+".into());
        ordinary.extend(('a'..='l').map(|c| c.to_string()));
        Vocab::new(ordinary).expect("builtin vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn token(&self, symbol: &str) -> Option<Token> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, token: Token) -> &str {
        &self.symbols[token.index()]
    }

    pub fn ordinary_symbols(&self) -> &[String] {
        &self.symbols[Token::NUM_SPECIAL..]
    }

    pub fn ordinary_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (Token::NUM_SPECIAL..self.size()).map(|i| Token(i as u16))
    }

    pub fn contains(&self, token: Token) -> bool {
        token.index() < self.size()
    }

    /// Looks up each symbol, returning the first unknown one on failure.
    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> std::result::Result<Vec<Token>, String> {
        symbols
            .iter()
            .map(|s| self.token(s.as_ref()).ok_or_else(|| s.as_ref().to_string()))
            .collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> Vec<String> {
        tokens.iter().map(|&t| self.symbol(t).to_string()).collect()
    }
}

/// A prompt with its reference answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    id: String,
    prompt: Vec<Token>,
    answer: Vec<Token>,
}

impl Example {
    pub fn new(id: impl Into<String>, prompt: Vec<Token>, answer: Vec<Token>) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: &str| Error::InvalidExample {
            id: id.clone(),
            reason: reason.to_string(),
        };
        if prompt.is_empty() {
            return Err(invalid("empty prompt"));
        }
        if answer.is_empty() {
            return Err(invalid("empty answer"));
        }
        if prompt.iter().chain(&answer).any(|t| t.is_special()) {
            return Err(invalid("special token in prompt or answer"));
        }
        Ok(Example { id, prompt, answer })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn prompt(&self) -> &[Token] {
        &self.prompt
    }

    pub fn answer(&self) -> &[Token] {
        &self.answer
    }

    /// Reference answer followed by the closing tag; this is what likelihood
    /// rewards score.
    pub fn answer_target(&self) -> Vec<Token> {
        let mut t = self.answer.clone();
        t.push(Token::ANS_CLOSE);
        t
    }
}

/// `[BOS] ++ prompt ++ [THINK_OPEN]`.
pub fn render_prompt(example: &Example) -> Vec<Token> {
    let mut out = Vec::with_capacity(example.prompt.len() + 2);
    out.push(Token::BOS);
    out.extend_from_slice(&example.prompt);
    out.push(Token::THINK_OPEN);
    out
}

/// One sampled completion after `<think>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Every sampled token, in order.
    pub completion: Vec<Token>,
    /// Temperature-1 log-probability of each sampled token.
    pub logprobs: Vec<f64>,
    /// Tokens before the first `<answer>`.
    pub cot: Vec<Token>,
    pub cot_logprobs: Vec<f64>,
    /// Tokens strictly between `<answer>` and `</answer>`; empty when unparsed.
    pub answer: Vec<Token>,
    /// `<answer>` was emitted (the CoT ended on its own).
    pub cot_closed: bool,
    /// Both tags present in order.
    pub parse_ok: bool,
    /// Sampling stopped at the token budget instead of the stop token.
    pub truncated: bool,
}

impl Rollout {
    pub fn cot_len(&self) -> usize {
        self.cot.len()
    }
}

/// Splits a generated continuation at `<answer>` / `</answer>`.
pub fn parse_completion(tokens: Vec<Token>, logprobs: Vec<f64>, truncated: bool) -> Rollout {
    debug_assert_eq!(tokens.len(), logprobs.len());
    let open = tokens.iter().position(|&t| t == Token::ANS_OPEN);
    let cot_end = open.unwrap_or(tokens.len());
    let close = open.and_then(|o| {
        tokens[o + 1..]
            .iter()
            .position(|&t| t == Token::ANS_CLOSE)
            .map(|p| o + 1 + p)
    });
    let (answer, parse_ok) = match (open, close) {
        (Some(o), Some(c)) => (tokens[o + 1..c].to_vec(), true),
        _ => (Vec::new(), false),
    };
    Rollout {
        cot: tokens[..cot_end].to_vec(),
        cot_logprobs: logprobs[..cot_end].to_vec(),
        answer,
        cot_closed: open.is_some(),
        parse_ok,
        truncated,
        completion: tokens,
        logprobs,
    }
}

/// `rendered_prompt ++ cot ++ [ANS_OPEN]`, regardless of whether the rollout
/// emitted `<answer>` itself.
pub fn cot_prefix_for_scoring(rollout: &Rollout, rendered_prompt: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(rendered_prompt.len() + rollout.cot.len() + 1);
    out.extend_from_slice(rendered_prompt);
    out.extend_from_slice(&rollout.cot);
    out.push(Token::ANS_OPEN);
    out
}

/// G rollouts of one example with their rewards and advantages.
#[derive(Clone, Debug)]
pub struct Group {
    example_id: String,
    rollouts: Vec<Rollout>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
}

impl Group {
    pub fn new(
        example_id: impl Into<String>,
        rollouts: Vec<Rollout>,
        rewards: Vec<f64>,
        advantages: Vec<f64>,
    ) -> Result<Self> {
        let g = rollouts.len();
        if rewards.len() != g || advantages.len() != g {
            return Err(Error::InvalidArgument(format!(
                "group lists disagree: {} rollouts, {} rewards, {} advantages",
                g,
                rewards.len(),
                advantages.len()
            )));
        }
        if g < 2 {
            return Err(Error::GroupTooSmall(g));
        }
        Ok(Group {
            example_id: example_id.into(),
            rollouts,
            rewards,
            advantages,
        })
    }

    pub fn example_id(&self) -> &str {
        &self.example_id
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }
}
