//! Frozen toy text conditioner: a seeded embedding table over a fixed vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{OpKind, Tensor};

/// Rare identifier bound to the personalized subject.
pub const IDENTIFIER: &str = "S*";
pub const PAD: &str = "<pad>";

pub const VOCAB: &[&str] = &[
    PAD, "a", IDENTIFIER, "photo", "of", "shape", "circle", "square", "triangle", "ring", "cross", "diamond",
];

pub fn token_id(token: &str) -> Option<usize> {
    VOCAB.iter().position(|&t| t == token)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    /// "a S* <class>"
    Instance,
    /// "a <class>"
    Prior,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    pub tokens: Vec<String>,
    pub kind: PromptKind,
    pub prompt_id: u32,
}

impl PromptSpec {
    pub fn instance(class: &str, prompt_id: u32) -> Self {
        Self {
            tokens: vec!["a".into(), IDENTIFIER.into(), class.into()],
            kind: PromptKind::Instance,
            prompt_id,
        }
    }

    pub fn prior(class: &str, prompt_id: u32) -> Self {
        Self {
            tokens: vec!["a".into(), class.into()],
            kind: PromptKind::Prior,
            prompt_id,
        }
    }

    /// Whitespace separated text; the kind follows from the presence of `S*`.
    pub fn parse(text: &str, prompt_id: u32) -> Result<Self> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        let kind = if tokens.iter().any(|t| t == IDENTIFIER) {
            PromptKind::Instance
        } else {
            PromptKind::Prior
        };
        let p = Self {
            tokens,
            kind,
            prompt_id,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Config("empty prompt".into()));
        }
        if let Some(bad) = self.tokens.iter().find(|t| token_id(t).is_none()) {
            return Err(Error::Config(format!("unknown token `{bad}`")));
        }
        let ids = self.tokens.iter().filter(|t| *t == IDENTIFIER).count();
        match (self.kind, ids) {
            (PromptKind::Instance, 1) | (PromptKind::Prior, 0) => Ok(()),
            (k, n) => Err(Error::Config(format!(
                "{k:?} prompt `{}` has {n} identifier tokens",
                self.text()
            ))),
        }
    }
}

/// Embedding table `[|VOCAB|, dim]` with unit-variance Gaussian entries.
pub fn embedding_table(seed: u64, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[VOCAB.len(), dim], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    })
}

/// Context `[1, len, dim]`: token embeddings padded with `<pad>` to `len`.
pub fn embed_prompt(prompt: &PromptSpec, table_seed: u64, dim: usize, len: usize) -> Result<Tensor> {
    prompt.validate()?;
    if prompt.tokens.len() > len {
        return Err(Error::Config(format!(
            "prompt `{}` longer than context length {len}",
            prompt.text()
        )));
    }
    let mut ids: Vec<usize> = prompt.tokens.iter().map(|t| token_id(t).expect("validated")).collect();
    ids.resize(len, 0);
    let table = embedding_table(table_seed, dim);
    let op = OpKind::EmbedLookup { ids };
    let dims = op
        .infer_shape(&[table.dims()])
        .map_err(|m| Error::shape("embed_prompt", m))?;
    Ok(op.forward(&[&table], &dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_checked() {
        assert!(PromptSpec::instance("circle", 0).validate().is_ok());
        assert!(PromptSpec::prior("circle", 1).validate().is_ok());
        let mut p = PromptSpec::prior("circle", 1);
        p.tokens.push(IDENTIFIER.into());
        assert!(p.validate().is_err());
        assert!(PromptSpec::parse("a S* S* shape", 0).is_err());
        assert!(PromptSpec::parse("a dog", 0).is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_sensitive() {
        let a = embed_prompt(&PromptSpec::instance("shape", 0), 7, 32, 8).unwrap();
        let b = embed_prompt(&PromptSpec::instance("shape", 0), 7, 32, 8).unwrap();
        let c = embed_prompt(&PromptSpec::prior("shape", 0), 7, 32, 8).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert_eq!(a.dims(), &[1, 8, 32]);
    }
}
