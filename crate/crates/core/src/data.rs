//! JSONL files of prompt-answer pairs and of bare prompts.
//!
//! A pair line holds token ids, `{"prompt":[..],"answer":[..],"wrong_answers":[[..]]}`,
//! or text for the configured tokenizer,
//! `{"prompt_text":"..","answer_text":"..","wrong_texts":[".."]}`.
//! A prompt line is `{"prompt":[..]}` or `{"text":".."}`.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PromptAnswerPair;
use crate::model::tokenizer::Tokenizer;
use crate::model::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairRecord {
    Tokens {
        prompt: Vec<u32>,
        answer: Vec<u32>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        wrong_answers: Vec<Vec<u32>>,
    },
    Text {
        prompt_text: String,
        answer_text: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        wrong_texts: Vec<String>,
    },
}

impl PairRecord {
    pub fn from_pair(pair: &PromptAnswerPair) -> Self {
        PairRecord::Tokens {
            prompt: pair.prompt().to_vec(),
            answer: pair.answer().to_vec(),
            wrong_answers: pair.wrong_answers().iter().map(|w| w.tokens().to_vec()).collect(),
        }
    }

    pub fn into_pair(self, tokenizer: &Tokenizer) -> Result<PromptAnswerPair> {
        match self {
            PairRecord::Tokens {
                prompt,
                answer,
                wrong_answers,
            } => PromptAnswerPair::new(&prompt, &answer, wrong_answers),
            PairRecord::Text {
                prompt_text,
                answer_text,
                wrong_texts,
            } => PromptAnswerPair::new(
                &tokenizer.encode(&prompt_text),
                &tokenizer.encode(&answer_text),
                wrong_texts.iter().map(|w| tokenizer.encode(w)).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptRecord {
    Tokens { prompt: Vec<u32> },
    Text { text: String },
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push((n + 1, rec));
    }
    Ok(out)
}

fn write_lines<T: Serialize>(records: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<PromptAnswerPair>> {
    read_lines::<PairRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            r.into_pair(tokenizer)
                .map_err(|e| Error::Format(format!("{}:{line}: {e}", path.display())))
        })
        .collect()
}

pub fn write_pairs(pairs: &[PromptAnswerPair], path: &Path) -> Result<()> {
    write_lines(pairs.iter().map(PairRecord::from_pair), path)
}

pub fn read_prompts(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<TokenSequence>> {
    read_lines::<PromptRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            let tokens = match r {
                PromptRecord::Tokens { prompt } => prompt,
                PromptRecord::Text { text } => tokenizer.encode(&text),
            };
            TokenSequence::new(tokens).map_err(|e| Error::Format(format!("{}:{line}: {e}", path.display())))
        })
        .collect()
}

pub fn write_prompts(prompts: &[TokenSequence], path: &Path) -> Result<()> {
    write_lines(
        prompts.iter().map(|p| PromptRecord::Tokens {
            prompt: p.tokens().to_vec(),
        }),
        path,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_and_text_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(
            &path,
            "{\"prompt\":[1,2],\"answer\":[3],\"wrong_answers\":[[4]]}\n\n{\"prompt_text\":\"ab\",\"answer_text\":\"c\"}\n",
        )
        .unwrap();
        let pairs = read_pairs(&path, &Tokenizer::Byte).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].wrong_answers().len(), 1);
        assert_eq!(pairs[1].prompt(), &[97, 98]);
        assert_eq!(pairs[1].answer(), &[99]);

        write_pairs(&pairs, &path).unwrap();
        assert_eq!(read_pairs(&path, &Tokenizer::Byte).unwrap(), pairs);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(
            &path,
            "{\"prompt\":[1],\"answer\":[2]}\n{\"prompt\":[1],\"answer\":[]}\n",
        )
        .unwrap();
        let err = read_pairs(&path, &Tokenizer::Byte).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn prompts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let prompts = vec![TokenSequence::new(vec![5, 6]).unwrap()];
        write_prompts(&prompts, &path).unwrap();
        assert_eq!(read_prompts(&path, &Tokenizer::Byte).unwrap(), prompts);
        std::fs::write(&path, "").unwrap();
        assert!(read_prompts(&path, &Tokenizer::Byte).unwrap().is_empty());
    }
}
