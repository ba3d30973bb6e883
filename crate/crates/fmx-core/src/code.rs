//! Sparse codes: per-token sets of `(latent index, activation)` pairs.

/// Batch of per-token sparse activations in compressed row layout.
///
/// Entries are sorted by latent index within each token, indices are unique
/// per token, and values are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl SparseCode {
    /// Build from per-token rows. Rows are sorted by index; nonpositive
    /// values are dropped.
    pub fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for mut row in rows {
            row.retain(|&(_, v)| v > 0.0);
            row.sort_unstable_by_key(|&(i, _)| i);
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0), "duplicate latent index");
            entries.extend_from_slice(&row);
            offsets.push(entries.len());
        }
        Self { offsets, entries }
    }

    pub fn empty(tokens: usize) -> Self {
        Self { offsets: vec![0; tokens + 1], entries: Vec::new() }
    }

    pub fn tokens(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn token(&self, t: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn iter_tokens(&self) -> impl Iterator<Item = &[(u32, f64)]> + '_ {
        (0..self.tokens()).map(move |t| self.token(t))
    }

    /// Activation of latent `i` for token `t` (0 when unselected).
    pub fn value(&self, t: usize, i: u32) -> f64 {
        match self.token(t).binary_search_by_key(&i, |&(idx, _)| idx) {
            Ok(pos) => self.token(t)[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn total_active(&self) -> usize {
        self.entries.len()
    }

    pub fn mean_active(&self) -> f64 {
        if self.tokens() == 0 {
            0.0
        } else {
            self.entries.len() as f64 / self.tokens() as f64
        }
    }

    /// Flat entry storage, aligned with gradient buffers produced by the
    /// decoder backward pass.
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    /// Per-latent count of tokens on which the latent is active.
    pub fn active_counts(&self, d_sae: usize) -> Vec<usize> {
        let mut counts = vec![0usize; d_sae];
        for &(i, _) in &self.entries {
            counts[i as usize] += 1;
        }
        counts
    }

    /// Copy of a contiguous token range as its own code.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Self {
        let base = self.offsets[start];
        let offsets = self.offsets[start..=end].iter().map(|o| o - base).collect();
        let entries = self.entries[self.offsets[start]..self.offsets[end]].to_vec();
        Self { offsets, entries }
    }
}
