//! Attention mask builders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AttentionMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Causal,
    /// Rows before the boundary see the whole first visit; later rows see the
    /// first visit plus their own causal prefix.
    SplitContext(usize),
    /// Layout `[V_0..V_{n-1}, F_1, P_1, .., F_k, P_k]`.
    ParallelV2 { n_ctx: usize, n_targets: usize },
}

pub fn build_mask(kind: MaskKind, n: usize) -> Result<AttentionMask> {
    match kind {
        MaskKind::Causal => Ok(AttentionMask::from_fn(n, |q, k| k <= q)),
        MaskKind::SplitContext(b) => {
            if b > n {
                return Err(Error::InvalidArgument(format!("split boundary {b} exceeds length {n}")));
            }
            Ok(AttentionMask::from_fn(n, |q, k| if q < b { k < b } else { k < b || (k >= b && k <= q) }))
        }
        MaskKind::ParallelV2 { n_ctx, n_targets } => {
            if n != n_ctx + 2 * n_targets {
                return Err(Error::InvalidArgument(format!(
                    "parallel mask with {n_ctx} context rows and {n_targets} targets needs {} rows, got {n}",
                    n_ctx + 2 * n_targets
                )));
            }
            Ok(AttentionMask::from_fn(n, |q, k| {
                if q < n_ctx {
                    return k <= q;
                }
                let pair = (q - n_ctx) / 2;
                let is_probe = (q - n_ctx) % 2 == 1;
                let filler = n_ctx + 2 * pair;
                if !is_probe {
                    k == q
                } else {
                    k < n_ctx || k == filler || k == q
                }
            }))
        }
    }
}

/// Row index of target `i`'s probe position under `ParallelV2`.
pub fn parallel_probe_row(n_ctx: usize, i: usize) -> usize {
    n_ctx + 2 * i + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: &AttentionMask) -> Vec<Vec<u8>> {
        (0..m.n).map(|q| m.row(q).iter().map(|&b| b as u8).collect()).collect()
    }

    #[test]
    fn causal_three() {
        let m = build_mask(MaskKind::Causal, 3).unwrap();
        assert_eq!(dense(&m), vec![vec![1, 0, 0], vec![1, 1, 0], vec![1, 1, 1]]);
    }

    #[test]
    fn split_context_two_of_three() {
        let m = build_mask(MaskKind::SplitContext(2), 3).unwrap();
        assert_eq!(dense(&m), vec![vec![1, 1, 0], vec![1, 1, 0], vec![1, 1, 1]]);
        assert!(build_mask(MaskKind::SplitContext(4), 3).is_err());
    }

    #[test]
    fn parallel_probe_sees_context_and_own_filler() {
        let m = build_mask(MaskKind::ParallelV2 { n_ctx: 2, n_targets: 2 }, 6).unwrap();
        // Rows: V0 V1 F1 P1 F2 P2.
        assert_eq!(dense(&m)[3], vec![1, 1, 1, 1, 0, 0]);
        assert_eq!(dense(&m)[5], vec![1, 1, 0, 0, 1, 1]);
        assert_eq!(dense(&m)[2], vec![0, 0, 1, 0, 0, 0]);
        assert_eq!(dense(&m)[1], vec![1, 1, 0, 0, 0, 0]);
        assert_eq!(parallel_probe_row(2, 1), 5);
    }

    #[test]
    fn every_row_sees_itself() {
        for kind in [
            MaskKind::Causal,
            MaskKind::SplitContext(3),
            MaskKind::SplitContext(0),
            MaskKind::ParallelV2 { n_ctx: 1, n_targets: 2 },
        ] {
            let m = build_mask(kind, 5).unwrap();
            assert!((0..5).all(|q| m.allows(q, q)), "{kind:?}");
        }
    }
}
