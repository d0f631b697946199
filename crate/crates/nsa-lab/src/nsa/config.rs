use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hyperparameters of the sparse attention operator.
///
/// `block_len` (l) and `stride` (d) shape the compression branch,
/// `sel_block_len` (l') and `n_selected` (n) the selection branch, and
/// `window` (w) the sliding-window branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NsaConfig {
    /// Compression block length l (tokens per compressed key).
    pub block_len: usize,
    /// Compression stride d between adjacent blocks.
    pub stride: usize,
    /// Selection block size l'.
    pub sel_block_len: usize,
    /// Number of selected blocks n (forced blocks count toward it).
    pub n_selected: usize,
    /// Sliding window size w.
    pub window: usize,
    pub n_heads: usize,
    pub n_groups: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Always-selected initial blocks.
    pub n_fixed_initial: usize,
    /// Always-selected most-recent blocks.
    pub n_fixed_local: usize,
}

impl Default for NsaConfig {
    fn default() -> Self {
        NsaConfig {
            block_len: 32,
            stride: 16,
            sel_block_len: 64,
            n_selected: 16,
            window: 512,
            n_heads: 64,
            n_groups: 4,
            d_q: 192,
            d_k: 192,
            d_v: 128,
            n_fixed_initial: 1,
            n_fixed_local: 2,
        }
    }
}

impl NsaConfig {
    /// Small configuration for tests and toy training.
    pub fn toy() -> Self {
        NsaConfig {
            block_len: 8,
            stride: 4,
            sel_block_len: 8,
            n_selected: 3,
            window: 8,
            n_heads: 2,
            n_groups: 1,
            d_q: 4,
            d_k: 4,
            d_v: 4,
            n_fixed_initial: 1,
            n_fixed_local: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.block_len,
            self.stride,
            self.sel_block_len,
            self.n_selected,
            self.window,
            self.n_heads,
            self.n_groups,
            self.d_q,
            self.d_k,
            self.d_v,
        ];
        if all.iter().any(|&v| v == 0) {
            return Err(Error::Config("all size parameters must be positive".into()));
        }
        if self.stride > self.block_len {
            return Err(Error::Config(format!(
                "stride {} exceeds block_len {}",
                self.stride, self.block_len
            )));
        }
        if self.block_len > self.sel_block_len {
            return Err(Error::Config(format!(
                "block_len {} exceeds sel_block_len {}",
                self.block_len, self.sel_block_len
            )));
        }
        if self.block_len % self.stride != 0 {
            return Err(Error::Config("stride must divide block_len".into()));
        }
        if self.sel_block_len % self.stride != 0 {
            return Err(Error::Config("stride must divide sel_block_len".into()));
        }
        if self.n_heads % self.n_groups != 0 {
            return Err(Error::Config("n_groups must divide n_heads".into()));
        }
        if self.n_fixed_initial + self.n_fixed_local > self.n_selected {
            return Err(Error::Config(
                "forced blocks exceed the selection budget n".into(),
            ));
        }
        Ok(())
    }

    /// Query heads per GQA group (H).
    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_groups
    }

    pub fn group_of_head(&self, head: usize) -> usize {
        head / self.heads_per_group()
    }

    /// Compression blocks fully inside a prefix of `t` tokens:
    /// floor((t - l) / d) + 1, or 0 when t < l.
    pub fn num_cmp_blocks(&self, t: usize) -> usize {
        if t < self.block_len {
            0
        } else {
            (t - self.block_len) / self.stride + 1
        }
    }

    /// Selection blocks touching a prefix of `t` tokens: ceil(t / l').
    pub fn num_sel_blocks(&self, t: usize) -> usize {
        t.div_ceil(self.sel_block_len)
    }

    /// Logit scale 1/sqrt(d_k), shared by all three branches.
    pub fn scale(&self) -> f64 {
        1.0 / (self.d_k as f64).sqrt()
    }

    /// Total remapped key count N_t at 1-based position `t`: compressed
    /// tokens + selected tokens (last partial block counted only up to t)
    /// + window tokens.
    pub fn sparsity_count(&self, t: usize) -> usize {
        let cmp = self.num_cmp_blocks(t);
        let avail = self.num_sel_blocks(t);
        let picked = self.n_selected.min(avail);
        let slc = if picked == 0 {
            0
        } else {
            let last_block_tokens = t - (avail - 1) * self.sel_block_len;
            // the most recent block is always selected (forced local)
            (picked - 1) * self.sel_block_len + last_block_tokens.min(self.sel_block_len)
        };
        cmp + slc + self.window.min(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_valid() {
        NsaConfig::default().validate().unwrap();
        NsaConfig::toy().validate().unwrap();
    }

    #[test]
    fn invariants_enforced() {
        let mut c = NsaConfig::default();
        c.stride = 24; // does not divide block_len
        assert!(c.validate().is_err());
        let mut c = NsaConfig::default();
        c.n_groups = 3;
        assert!(c.validate().is_err());
        let mut c = NsaConfig::default();
        c.n_fixed_local = 16;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cmp_block_count() {
        let c = NsaConfig { block_len: 32, stride: 16, ..NsaConfig::default() };
        // t=64: blocks cover [1..32], [17..48], [33..64]
        assert_eq!(c.num_cmp_blocks(64), 3);
        assert_eq!(c.num_cmp_blocks(31), 0);
        assert_eq!(c.num_cmp_blocks(32), 1);
    }

    #[test]
    fn sparsity_count_default_config() {
        let c = NsaConfig::default();
        // 4095 compressed + 1024 selected + 512 window
        assert_eq!(c.sparsity_count(65536), 5631);
        assert!((c.sparsity_count(65536) as f64 / 65536.0 - 0.0859).abs() < 1e-3);
    }

    #[test]
    fn sparsity_count_t1() {
        let c = NsaConfig::default();
        // no compression blocks; one partial selection block; window of 1
        assert_eq!(c.sparsity_count(1), 2);
    }
}
