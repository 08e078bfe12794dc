//! Statistics-to-text descriptions and operator text embeddings.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Field, Sample};
use crate::error::{MofsError, Result};
use crate::tensor::Tensor;

pub const TEMPLATE: &str = include_str!("../fixtures/description_template.txt");
pub const DEFAULT_D_BERT: usize = 64;
pub const DEFAULT_MAX_TOKENS: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStatistics {
    pub mu_a: f64,
    pub sigma_a: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub mu_u: f64,
    pub sigma_u: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub mu_grad_u: f64,
    pub sigma_grad_u: f64,
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.clone().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    (mean, var.max(0.0).sqrt(), lo, hi)
}

/// `|∇u|` in grid-index units: central differences inside, one-sided on edges.
pub fn gradient_magnitude(u: &Field) -> Vec<f64> {
    let (h, w) = u.dims();
    let d = |get: &dyn Fn(usize) -> f64, k: usize, n: usize| {
        if k == 0 {
            get(1) - get(0)
        } else if k == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            0.5 * (get(k + 1) - get(k - 1))
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let ux = d(&|c| u.at(i, c), j, w);
            let uy = d(&|r| u.at(r, j), i, h);
            out.push((ux * ux + uy * uy).sqrt());
        }
    }
    out
}

pub fn compute_statistics(samples: &[Sample]) -> FieldStatistics {
    let (mu_a, sigma_a, a_min, a_max) = moments(samples.iter().flat_map(|s| s.a.values().iter().copied()));
    let (mu_u, sigma_u, u_min, u_max) = moments(samples.iter().flat_map(|s| s.u.values().iter().copied()));
    let grads: Vec<f64> = samples.iter().flat_map(|s| gradient_magnitude(&s.u)).collect();
    let (mu_grad_u, sigma_grad_u, _, _) = moments(grads.iter().copied());
    FieldStatistics { mu_a, sigma_a, a_min, a_max, mu_u, sigma_u, u_min, u_max, mu_grad_u, sigma_grad_u }
}

/// Four significant digits; scientific notation outside `[1e-4, 1e4)`.
pub fn format_sig4(v: f64) -> String {
    if v == 0.0 {
        return "0.000".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.3e}").parse().expect("float round-trips");
    let e = rounded.abs().log10().floor() as i32;
    if (-4..4).contains(&e) {
        format!("{:.*}", (3 - e) as usize, rounded)
    } else {
        format!("{rounded:.3e}")
    }
}

pub fn render_description(name: &str, s: &FieldStatistics) -> String {
    let f = format_sig4;
    TEMPLATE
        .replace("{name}", name)
        .replace("{mu_a}", &f(s.mu_a))
        .replace("{sigma_a}", &f(s.sigma_a))
        .replace("{a_min}", &f(s.a_min))
        .replace("{a_max}", &f(s.a_max))
        .replace("{mu_u}", &f(s.mu_u))
        .replace("{sigma_u}", &f(s.sigma_u))
        .replace("{u_min}", &f(s.u_min))
        .replace("{u_max}", &f(s.u_max))
        .replace("{mu_grad}", &f(s.mu_grad_u))
        .replace("{sigma_grad}", &f(s.sigma_grad_u))
}

pub fn describe_samples(name: &str, samples: &[Sample]) -> String {
    render_description(name, &compute_statistics(samples))
}

/// One description per sample.
pub fn sample_descriptions(name: &str, samples: &[Sample]) -> Vec<String> {
    samples.iter().map(|s| describe_samples(name, std::slice::from_ref(s))).collect()
}

/// Whitespace split, then leading and trailing ASCII punctuation as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut lo = 0;
        while lo < chars.len() && chars[lo].is_ascii_punctuation() {
            out.push(chars[lo].to_string());
            lo += 1;
        }
        let mut hi = chars.len();
        while hi > lo && chars[hi - 1].is_ascii_punctuation() {
            hi -= 1;
        }
        if hi > lo {
            out.push(chars[lo..hi].iter().collect());
        }
        out.extend(chars[hi.max(lo)..].iter().map(|c| c.to_string()));
    }
    out
}

/// Hidden states for one string plus its attention mask.
#[derive(Debug, Clone)]
pub struct TokenStates {
    /// `max_tokens × d_bert`, zero rows past the true length.
    pub hidden: Tensor,
    pub mask: Vec<bool>,
}

impl TokenStates {
    /// Mean over unmasked positions.
    pub fn pooled(&self) -> Vec<f64> {
        let n = self.mask.iter().filter(|&&m| m).count().max(1);
        let d = self.hidden.cols();
        let mut out = vec![0.0; d];
        for (r, &m) in self.mask.iter().enumerate() {
            if m {
                for (o, v) in out.iter_mut().zip(self.hidden.row_slice(r)) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        out
    }
}

pub trait TextEncoder {
    fn d_bert(&self) -> usize;
    fn max_tokens(&self) -> usize;
    fn token_vector(&self, token: &str) -> Vec<f64>;

    fn encode(&self, text: &str) -> TokenStates {
        let mut tokens = tokenize(text);
        if tokens.len() > self.max_tokens() {
            warn!("description has {} tokens; truncating to {}", tokens.len(), self.max_tokens());
            tokens.truncate(self.max_tokens());
        }
        let mut hidden = Tensor::zeros(self.max_tokens(), self.d_bert());
        for (r, t) in tokens.iter().enumerate() {
            for (c, v) in self.token_vector(t).into_iter().enumerate() {
                hidden.set(r, c, v);
            }
        }
        let mask = (0..self.max_tokens()).map(|r| r < tokens.len()).collect();
        TokenStates { hidden, mask }
    }

    /// Pooled states for a batch, `B × d_bert`.
    fn pooled_batch(&self, texts: &[String]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(MofsError::Config("text batch is empty".into()));
        }
        let mut data = Vec::with_capacity(texts.len() * self.d_bert());
        for t in texts {
            data.extend(self.encode(t).pooled());
        }
        Ok(Tensor::new(texts.len(), self.d_bert(), data))
    }
}

/// Offline encoder: each token maps to a fixed Gaussian vector seeded by its hash.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    pub d_bert: usize,
    pub max_tokens: usize,
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self { d_bert: DEFAULT_D_BERT, max_tokens: DEFAULT_MAX_TOKENS }
    }
}

pub fn hash_token_vector(token: &str, d: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl TextEncoder for HashEncoder {
    fn d_bert(&self) -> usize {
        self.d_bert
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        hash_token_vector(token, self.d_bert)
    }
}

/// Encoder backed by an exported embedding table; unknown tokens use the hash vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableEncoder {
    pub d_bert: usize,
    pub max_tokens: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl TableEncoder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: TableEncoder = serde_json::from_slice(&std::fs::read(path)?)?;
        if let Some((k, v)) = t.vectors.iter().find(|(_, v)| v.len() != t.d_bert) {
            return Err(MofsError::Shape(format!("token {k:?} has width {} not {}", v.len(), t.d_bert)));
        }
        Ok(t)
    }
}

impl TextEncoder for TableEncoder {
    fn d_bert(&self) -> usize {
        self.d_bert
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        self.vectors.get(token).cloned().unwrap_or_else(|| hash_token_vector(token, self.d_bert))
    }
}

/// Batch-averaged projected embedding `mean_b(z_b · W_p)`.
pub fn embed_operator(texts: &[String], encoder: &dyn TextEncoder, w_p: &Tensor) -> Result<Vec<f64>> {
    let z = encoder.pooled_batch(texts)?;
    if w_p.rows() != encoder.d_bert() {
        return Err(MofsError::Shape(format!("projection {:?} vs d_bert {}", w_p.shape(), encoder.d_bert())));
    }
    Ok(z.matmul(w_p).mean_rows().data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_with_mu_a(mu_a: f64) -> FieldStatistics {
        FieldStatistics {
            mu_a,
            sigma_a: 0.5,
            a_min: 0.0,
            a_max: 2.0,
            mu_u: 0.25,
            sigma_u: 0.125,
            u_min: 0.0,
            u_max: 0.75,
            mu_grad_u: 3.0,
            sigma_grad_u: 0.0,
        }
    }

    #[test]
    fn constant_output_has_zero_spread_and_gradient() {
        let s = Sample { a: Field::filled(4, 4, 1.0), u: Field::filled(4, 4, 2.5) };
        let st = compute_statistics(&[s]);
        assert_eq!((st.mu_u, st.sigma_u, st.mu_grad_u), (2.5, 0.0, 0.0));
    }

    #[test]
    fn unit_ramp_has_unit_gradient() {
        let u = Field::from_fn(8, 8, |_, j| j as f64).unwrap();
        let s = Sample { a: Field::zeros(8, 8), u };
        assert!((compute_statistics(&[s]).mu_grad_u - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_input_extremes() {
        let a = Field::from_fn(4, 4, |i, _| (i % 2) as f64).unwrap();
        let st = compute_statistics(&[Sample { a, u: Field::zeros(4, 4) }]);
        assert_eq!((st.a_min, st.a_max), (0.0, 1.0));
    }

    #[test]
    fn rendered_text_follows_template() {
        let t = render_description("DarcyFlow-1.0", &stats_with_mu_a(1.0));
        assert!(t.contains("PDE sample. The input coefficient field has mean"));
        assert!(t.starts_with("This is a DarcyFlow-1.0 PDE sample."));
        let input_clause = &t[..t.find("The output").unwrap()];
        assert_eq!(input_clause.matches("mean 1.000").count(), 1);
        assert_eq!(t, render_description("DarcyFlow-1.0", &stats_with_mu_a(1.0)));
    }

    #[test]
    fn four_significant_digits() {
        assert_eq!(format_sig4(1.0), "1.000");
        assert_eq!(format_sig4(0.073671), "0.07367");
        assert_eq!(format_sig4(-12.3456), "-12.35");
        assert_eq!(format_sig4(9.99996), "10.00");
        assert_eq!(format_sig4(123456.0), "1.235e5");
    }

    #[test]
    fn tokenizer_peels_punctuation() {
        assert_eq!(tokenize("range [0.000, 1.500]."), vec!["range", "[", "0.000", ",", "1.500", "]", "."]);
    }

    #[test]
    fn two_token_embedding_matches_hand_evaluation() {
        let enc = HashEncoder { d_bert: 6, max_tokens: 8 };
        let w_p = Tensor::from_fn(6, 3, |i, j| (i as f64 - j as f64) * 0.3);
        let got = embed_operator(&["alpha beta".to_string()], &enc, &w_p).unwrap();
        let a = hash_token_vector("alpha", 6);
        let b = hash_token_vector("beta", 6);
        for (j, g) in got.iter().enumerate() {
            let want: f64 = (0..6).map(|i| 0.5 * (a[i] + b[i]) * w_p.get(i, j)).sum();
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_batch_equals_single() {
        let enc = HashEncoder::default();
        let w_p = Tensor::from_fn(64, 4, |i, j| ((i * 7 + j) % 5) as f64 - 2.0);
        let one = embed_operator(&["a b c".into()], &enc, &w_p).unwrap();
        let three = embed_operator(&vec!["a b c".to_string(); 3], &enc, &w_p).unwrap();
        for (x, y) in one.iter().zip(&three) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_truncates() {
        let enc = HashEncoder { d_bert: 4, max_tokens: 3 };
        let st = enc.encode("a b c d e");
        assert_eq!(st.mask.iter().filter(|&&m| m).count(), 3);
    }
}
