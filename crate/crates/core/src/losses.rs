//! Per-sample scalar criteria: perplexity (ppl), task likelihood (tl), task
//! likelihood difference (tld) and sentence likelihood (sl).
//!
//! All criteria skip the first token of a sequence because it has no context.
//! tl and tld are mean negative log-likelihoods over answer tokens only and are
//! not exponentiated. Accumulation is in f64.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_logprobs, LogProbTable, PrunedView, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Ppl,
    Tl,
    Tld,
    Sl,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Ppl => "ppl",
            Criterion::Tl => "tl",
            Criterion::Tld => "tld",
            Criterion::Sl => "sl",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppl" => Ok(Criterion::Ppl),
            "tl" => Ok(Criterion::Tl),
            "tld" => Ok(Criterion::Tld),
            "sl" => Ok(Criterion::Sl),
            other => Err(Error::Config(format!(
                "unknown criterion {other:?} (expected ppl, tl, tld or sl)"
            ))),
        }
    }
}

/// A sequence split into prompt `tokens[..split]` and answer `tokens[split..]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptAnswerPair {
    tokens: TokenSequence,
    split: usize,
    wrong_answers: Vec<TokenSequence>,
}

impl PromptAnswerPair {
    pub fn new(prompt: &[u32], answer: &[u32], wrong_answers: Vec<Vec<u32>>) -> Result<Self> {
        if answer.is_empty() {
            return Err(Error::InsufficientLength("answer must be non-empty".into()));
        }
        let tokens = TokenSequence::new([prompt, answer].concat())?;
        let wrong_answers = wrong_answers
            .into_iter()
            .map(TokenSequence::new)
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens,
            split: prompt.len(),
            wrong_answers,
        })
    }

    pub fn from_split(tokens: TokenSequence, split: usize, wrong_answers: Vec<TokenSequence>) -> Result<Self> {
        if split >= tokens.len() {
            return Err(Error::InsufficientLength(format!(
                "split {split} leaves no answer in a {}-token sequence",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            split,
            wrong_answers,
        })
    }

    /// Treats a bare prompt as its own calibration sample: every token after
    /// the first is scored. This is all a per-prompt search can see at
    /// inference time, since the answer is unknown.
    pub fn prompt_only(prompt: &TokenSequence) -> Result<Self> {
        Self::from_split(prompt.clone(), 1, Vec::new())
    }

    pub fn tokens(&self) -> &TokenSequence {
        &self.tokens
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens.tokens()[..self.split]
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens.tokens()[self.split..]
    }

    pub fn wrong_answers(&self) -> &[TokenSequence] {
        &self.wrong_answers
    }

    /// Prompt tokens as a sequence (the router's input). Errors when `split == 0`.
    pub fn prompt_sequence(&self) -> Result<TokenSequence> {
        TokenSequence::new(self.prompt().to_vec())
    }

    /// The same prompt followed by `answer`, with no wrong answers.
    pub fn with_answer(&self, answer: &TokenSequence) -> Self {
        let tokens = TokenSequence::new([self.prompt(), answer.tokens()].concat()).expect("non-empty answer");
        Self {
            tokens,
            split: self.split,
            wrong_answers: Vec::new(),
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        self.tokens.validate(vocab)?;
        self.wrong_answers.iter().try_for_each(|w| w.validate(vocab))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub criterion: Criterion,
}

/// Mean `-log p(z_i | z_<i)` over 0-based token positions `start..T`, read from `table`.
/// `start` must be at least 1.
pub fn mean_nll(table: &LogProbTable, tokens: &[u32], start: usize) -> f64 {
    debug_assert!(start >= 1 && start < tokens.len());
    let total: f64 = (start..tokens.len())
        .map(|i| -(table.get(i - 1, tokens[i]) as f64))
        .sum();
    total / (tokens.len() - start) as f64
}

fn require_two(z: &TokenSequence) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::InsufficientLength(format!(
            "need at least 2 tokens to score a prediction, got {}",
            z.len()
        )));
    }
    Ok(())
}

pub fn sentence_likelihood(view: &PrunedView<'_>, z: &TokenSequence) -> Result<LossValue> {
    require_two(z)?;
    let table = forward_logprobs(view, z)?;
    Ok(LossValue {
        value: mean_nll(&table, z.tokens(), 1),
        criterion: Criterion::Sl,
    })
}

pub fn perplexity(view: &PrunedView<'_>, z: &TokenSequence) -> Result<LossValue> {
    let sl = sentence_likelihood(view, z)?;
    Ok(LossValue {
        value: sl.value.exp(),
        criterion: Criterion::Ppl,
    })
}

fn tl_value(view: &PrunedView<'_>, pair: &PromptAnswerPair) -> Result<f64> {
    require_two(&pair.tokens)?;
    let table = forward_logprobs(view, &pair.tokens)?;
    Ok(mean_nll(&table, pair.tokens.tokens(), pair.split.max(1)))
}

pub fn task_likelihood(view: &PrunedView<'_>, pair: &PromptAnswerPair) -> Result<LossValue> {
    Ok(LossValue {
        value: tl_value(view, pair)?,
        criterion: Criterion::Tl,
    })
}

/// `tl(correct) - mean over wrong answers of tl(wrong)`.
pub fn task_likelihood_difference(view: &PrunedView<'_>, pair: &PromptAnswerPair) -> Result<LossValue> {
    if pair.wrong_answers.is_empty() {
        return Err(Error::MissingContrast);
    }
    let correct = tl_value(view, pair)?;
    let mut wrong = 0.0;
    for w in &pair.wrong_answers {
        wrong += tl_value(view, &pair.with_answer(w))?;
    }
    Ok(LossValue {
        value: correct - wrong / pair.wrong_answers.len() as f64,
        criterion: Criterion::Tld,
    })
}

pub fn evaluate(view: &PrunedView<'_>, pair: &PromptAnswerPair, criterion: Criterion) -> Result<LossValue> {
    match criterion {
        Criterion::Ppl => perplexity(view, &pair.tokens),
        Criterion::Tl => task_likelihood(view, pair),
        Criterion::Tld => task_likelihood_difference(view, pair),
        Criterion::Sl => sentence_likelihood(view, &pair.tokens),
    }
}

/// Arithmetic mean of per-sample losses.
pub fn dataset_loss(view: &PrunedView<'_>, data: &[PromptAnswerPair], criterion: Criterion) -> Result<LossValue> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for (index, pair) in data.iter().enumerate() {
        total += evaluate(view, pair, criterion)
            .map_err(|e| Error::Sample {
                index,
                source: Box::new(e),
            })?
            .value;
    }
    Ok(LossValue {
        value: total / data.len() as f64,
        criterion,
    })
}

/// Multiple-choice scoring: correct when the right answer has strictly lower tl than every wrong one.
pub fn choice_is_correct(view: &PrunedView<'_>, pair: &PromptAnswerPair) -> Result<bool> {
    if pair.wrong_answers.is_empty() {
        return Err(Error::MissingContrast);
    }
    let correct = tl_value(view, pair)?;
    for w in &pair.wrong_answers {
        if tl_value(view, &pair.with_answer(w))? <= correct {
            return Ok(false);
        }
    }
    Ok(true)
}
