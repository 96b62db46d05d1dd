//! Class-name prompts and their token embeddings.
//!
//! [`StubEmbedder`] is a deterministic offline stand-in for a pretrained text
//! encoder: every token row comes from a SHA-256 keyed ChaCha stream and is
//! scaled to unit L2 norm, so results are identical on every platform.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::domain::normalize_class_name;
use crate::error::{io_err, validation, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `n × d` token embeddings for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T> {
    pub prompt: String,
    tokens: Tensor<T>,
    null: bool,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn new(prompt: impl Into<String>, tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.is_empty() {
            return Err(validation("text embedding must be a non-empty n x d matrix"));
        }
        if !tokens.all_finite() {
            return Err(validation("text embedding contains non-finite values"));
        }
        Ok(Self {
            prompt: prompt.into(),
            tokens,
            null: false,
        })
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// True for the all-zero null condition.
    pub fn is_null(&self) -> bool {
        self.null
    }

    /// Mean over tokens, length `d`.
    pub fn mean_vector(&self) -> Vec<f64> {
        let (n, d) = (self.num_tokens(), self.width());
        let mut m = vec![0.0; d];
        for row in self.tokens.data().chunks(d) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v.to_f64_lossy() / n as f64;
            }
        }
        m
    }

    pub fn cast<U: Scalar>(&self) -> TextEmbedding<U> {
        TextEmbedding {
            prompt: self.prompt.clone(),
            tokens: self.tokens.cast(),
            null: self.null,
        }
    }
}

/// The bare normalized class name; no caption template is applied.
pub fn build_prompt(class_name: &str) -> Result<String> {
    let p = normalize_class_name(class_name);
    if p.is_empty() {
        return Err(validation("class name is empty"));
    }
    Ok(p)
}

/// All-zero embedding marking the absent text condition.
pub fn null_embedding<T: Scalar>(n: usize, d: usize) -> TextEmbedding<T> {
    TextEmbedding {
        prompt: String::new(),
        tokens: Tensor::zeros(&[n.max(1), d.max(1)]),
        null: true,
    }
}

/// Anything that turns a prompt into a fixed-shape embedding.
pub trait TextEmbedder<T: Scalar> {
    fn num_tokens(&self) -> usize;
    fn width(&self) -> usize;
    /// Same prompt must give a bitwise-identical embedding.
    fn embed(&self, prompt: &str) -> Result<TextEmbedding<T>>;

    fn null(&self) -> TextEmbedding<T> {
        null_embedding(self.num_tokens(), self.width())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubEmbedder {
    pub num_tokens: usize,
    pub width: usize,
    pub salt: u64,
}

impl StubEmbedder {
    pub fn new(num_tokens: usize, width: usize, salt: u64) -> Result<Self> {
        if num_tokens == 0 || width == 0 {
            return Err(validation("stub embedder needs n, d >= 1"));
        }
        Ok(Self {
            num_tokens,
            width,
            salt,
        })
    }
}

impl<T: Scalar> TextEmbedder<T> for StubEmbedder {
    fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    fn width(&self) -> usize {
        self.width
    }

    fn embed(&self, prompt: &str) -> Result<TextEmbedding<T>> {
        stub_embed(prompt, self.num_tokens, self.width, self.salt)
    }
}

pub fn stub_embed<T: Scalar>(
    prompt: &str,
    n: usize,
    d: usize,
    seed_salt: u64,
) -> Result<TextEmbedding<T>> {
    if n == 0 || d == 0 {
        return Err(validation("stub embedding needs n, d >= 1"));
    }
    let mut values = Vec::with_capacity(n * d);
    for token in 0..n {
        let mut hasher = Sha256::new();
        hasher.update(prompt.as_bytes());
        hasher.update([0u8]);
        hasher.update((token as u64).to_le_bytes());
        hasher.update(seed_salt.to_le_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        values.extend(row.iter().map(|v| T::of(v / norm)));
    }
    TextEmbedding::new(prompt, Tensor::new(&[n, d], values)?)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Writes embeddings as text records: the prompt on its own line, a header
/// line `n d`, then `n` lines of `d` decimal values.
pub fn write_embedding_cache<T: Scalar>(path: &Path, records: &[TextEmbedding<T>]) -> Result<()> {
    let mut s = String::new();
    for e in records {
        let _ = writeln!(s, "{}", e.prompt);
        let _ = writeln!(s, "{} {}", e.num_tokens(), e.width());
        for row in e.tokens.data().chunks(e.width()) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_embedding_cache<T: Scalar>(path: &Path) -> Result<Vec<TextEmbedding<T>>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let mut out = Vec::new();
    while let Some(prompt) = lines.next() {
        let header = lines
            .next()
            .ok_or_else(|| validation(format!("cache record `{prompt}` lacks its header")))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| validation(format!("bad cache header `{header}`")))?;
        let [n, d] = dims[..] else {
            return Err(validation(format!("bad cache header `{header}`")));
        };
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row = lines
                .next()
                .ok_or_else(|| validation(format!("cache record `{prompt}` is truncated")))?;
            for tok in row.split_whitespace() {
                let v = T::from_str_radix(tok, 10)
                    .map_err(|_| validation(format!("bad cache value `{tok}`")))?;
                values.push(v);
            }
        }
        out.push(TextEmbedding::new(prompt, Tensor::new(&[n, d], values)?)?);
    }
    Ok(out)
}
