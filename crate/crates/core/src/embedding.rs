//! Fixed standard-basis embeddings.
//!
//! `E(i)` is coordinate `i - 1` and `Ẽ(i)` is coordinate `N + i`, both
//! zero-based, so the two families occupy disjoint blocks of `R^d`. The
//! unembedding row for token `j` is `E(j)`, which means unembedding a vector
//! is just reading its first `K` coordinates.

use ndarray::{Array1, Array2};

use crate::data::{Sentence, TaskConfig, Token};
use crate::error::{config_err, domain_err, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingBasis {
    dim: usize,
    vocab_size: usize,
}

impl EmbeddingBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `N`, not counting the noise token.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Coordinate carrying `E(token)`.
    #[inline]
    pub fn e_index(&self, token: Token) -> usize {
        debug_assert!(token >= 1 && token <= self.vocab_size + 1);
        token - 1
    }

    /// Coordinate carrying `Ẽ(token)`.
    #[inline]
    pub fn e_tilde_index(&self, token: Token) -> usize {
        debug_assert!(token >= 1 && token <= self.vocab_size + 1);
        self.vocab_size + token
    }

    pub fn e(&self, token: Token) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim);
        v[self.e_index(token)] = 1.0;
        v
    }

    pub fn e_tilde(&self, token: Token) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim);
        v[self.e_tilde_index(token)] = 1.0;
        v
    }

    /// `K × d` matrix whose row `j - 1` is `E(j)ᵀ`.
    pub fn unembedding(&self, k: usize) -> Array2<f64> {
        let mut u = Array2::zeros((k, self.dim));
        for j in 1..=k {
            u[[j - 1, self.e_index(j)]] = 1.0;
        }
        u
    }
}

/// Builds `E`, `Ẽ` as standard basis vectors; requires `2(N+1) ≤ d`.
pub fn standard_basis(cfg: &TaskConfig) -> Result<EmbeddingBasis> {
    let n = cfg.vocab_size;
    if 2 * (n + 1) > cfg.embed_dim {
        return config_err(format!(
            "embedding dimension {} below 2(N+1) = {}",
            cfg.embed_dim,
            2 * (n + 1)
        ));
    }
    let basis = EmbeddingBasis { dim: cfg.embed_dim, vocab_size: n };
    // Orthogonality reduces to the two index maps being injective with
    // disjoint images.
    let mut seen = vec![false; basis.dim];
    for t in 1..=n + 1 {
        for idx in [basis.e_index(t), basis.e_tilde_index(t)] {
            if seen[idx] {
                return config_err(format!("embedding coordinate {idx} reused"));
            }
            seen[idx] = true;
        }
    }
    Ok(basis)
}

/// Embedded context stored by its nonzero coordinates: row `h` is
/// `E(z_h) + Ẽ(z_{h-1})`, and row 1 is `E(z_1)` alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Embedded {
    dim: usize,
    rows: Vec<(usize, Option<usize>)>,
}

impl Embedded {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Nonzero coordinates of row `h` (zero-based): the `E` coordinate and,
    /// past the first row, the `Ẽ` coordinate.
    #[inline]
    pub fn row(&self, h: usize) -> (usize, Option<usize>) {
        self.rows[h]
    }

    /// The query row `x_H`.
    #[inline]
    pub fn last(&self) -> (usize, Option<usize>) {
        self.rows[self.rows.len() - 1]
    }

    /// `x_hᵀ v`.
    #[inline]
    pub fn dot(&self, h: usize, v: &[f64]) -> f64 {
        let (a, b) = self.rows[h];
        v[a] + b.map_or(0.0, |b| v[b])
    }

    /// `out += c · x_h`.
    #[inline]
    pub fn axpy(&self, h: usize, c: f64, out: &mut [f64]) {
        let (a, b) = self.rows[h];
        out[a] += c;
        if let Some(b) = b {
            out[b] += c;
        }
    }

    /// Dense `H × d` matrix with rows `x_1..x_H`.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.rows.len(), self.dim));
        for (h, &(a, b)) in self.rows.iter().enumerate() {
            x[[h, a]] += 1.0;
            if let Some(b) = b {
                x[[h, b]] += 1.0;
            }
        }
        x
    }
}

/// Embeds `z_1..z_H`.
pub fn embed_sequence(basis: &EmbeddingBasis, s: &Sentence) -> Result<Embedded> {
    embed_tokens(basis, s.context())
}

pub fn embed_tokens(basis: &EmbeddingBasis, context: &[Token]) -> Result<Embedded> {
    let max = basis.vocab_size + 1;
    if let Some(&bad) = context.iter().find(|&&t| t == 0 || t > max) {
        return domain_err(format!("token {bad} outside 1..={max}"));
    }
    let rows = context
        .iter()
        .enumerate()
        .map(|(h, &t)| {
            let prev = (h > 0).then(|| basis.e_tilde_index(context[h - 1]));
            (basis.e_index(t), prev)
        })
        .collect();
    Ok(Embedded { dim: basis.dim, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dimensions_fit() {
        let cfg = TaskConfig::default();
        let b = standard_basis(&cfg).unwrap();
        assert_eq!(b.e_index(61), 60);
        assert_eq!(b.e_tilde_index(1), 61);
        assert_eq!(b.e_tilde_index(61), 121);
    }

    #[test]
    fn too_small_dimension_is_rejected() {
        let cfg = TaskConfig { embed_dim: 121, ..TaskConfig::default() };
        assert!(standard_basis(&cfg).is_err());
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let b = standard_basis(&TaskConfig::default()).unwrap();
        assert!(embed_tokens(&b, &[3, 62]).is_err());
        assert!(embed_tokens(&b, &[0, 3]).is_err());
    }
}
