//! Attention visibility between observations.
//!
//! Support tokens see the whole support block. Inference (query) tokens see
//! the support block and themselves, never each other; support tokens never
//! see inference tokens. This keeps every query prediction independent of
//! whatever else happens to be in the query batch.

use ndarray::Array2;

/// Dense attender/attended visibility matrix, support rows first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    allowed: Array2<bool>,
    n_support: usize,
    n_query: usize,
}

impl AttentionMask {
    pub fn allowed(&self, attender: usize, attended: usize) -> bool {
        self.allowed[(attender, attended)]
    }

    pub fn n_support(&self) -> usize {
        self.n_support
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn size(&self) -> usize {
        self.n_support + self.n_query
    }

    pub fn as_matrix(&self) -> &Array2<bool> {
        &self.allowed
    }
}

/// Standard mask: queries attend the support block plus themselves.
pub fn build_mask(n_support: usize, n_query: usize) -> AttentionMask {
    build_mask_opts(n_support, n_query, true)
}

/// Mask with the query self-attention ablation switch.
pub fn build_mask_opts(n_support: usize, n_query: usize, query_self_attend: bool) -> AttentionMask {
    assert!(n_support >= 1 && n_query >= 1, "mask needs at least one token per side");
    let n = n_support + n_query;
    let mut allowed = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in 0..n_support {
            allowed[(i, j)] = true;
        }
    }
    if query_self_attend {
        for i in n_support..n {
            allowed[(i, i)] = true;
        }
    }
    AttentionMask { allowed, n_support, n_query }
}
