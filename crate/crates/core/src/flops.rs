//! Analytic FLOP counts for the block types.
//!
//! A layer with `D` parameters applied at every pixel costs `2HWD`; each
//! selective scan over `HW` positions with `C` channels and state size `N`
//! adds `9HWCN`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Conv,
    BiMamba,
    FourDir,
    FusionMamba,
    Attention,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] =
        [BlockKind::Conv, BlockKind::BiMamba, BlockKind::FourDir, BlockKind::FusionMamba, BlockKind::Attention];

    /// Number of selective scans the block runs.
    pub fn scans(self) -> u128 {
        match self {
            BlockKind::Conv | BlockKind::Attention => 0,
            BlockKind::BiMamba => 2,
            BlockKind::FourDir => 4,
            BlockKind::FusionMamba => 8,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Conv => "conv",
            BlockKind::BiMamba => "bimamba",
            BlockKind::FourDir => "fourdir",
            BlockKind::FusionMamba => "fusionmamba",
            BlockKind::Attention => "attention",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Usage(format!("unknown block kind {s:?}")))
    }
}

/// FLOPs per scan position per channel per state component.
pub const SCAN_FLOPS: u128 = 9;

/// FLOP count for one block at resolution `h x w`.
///
/// `c` and `n` are the channel count and state size, `d` the number of
/// parameters. All arithmetic is in `u128`.
pub fn count_flops(kind: BlockKind, h: u64, w: u64, c: u64, n: u64, d: u64) -> Result<u128> {
    if [h, w, c, n, d].contains(&0) {
        return Err(Error::Usage("flop count arguments must be positive".into()));
    }
    let (h, w, c, n, d) = (h as u128, w as u128, c as u128, n as u128, d as u128);
    let hw = h * w;
    let base = 2 * hw * d;
    let extra = match kind {
        BlockKind::Attention => 4 * hw * hw * c,
        k => k.scans() * SCAN_FLOPS * hw * c * n,
    };
    Ok(base + extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_resolution_values() {
        let f = |k| count_flops(k, 1, 1, 1, 1, 10).unwrap();
        assert_eq!(f(BlockKind::Conv), 20);
        assert_eq!(f(BlockKind::BiMamba), 38);
        assert_eq!(f(BlockKind::FourDir), 56);
        assert_eq!(f(BlockKind::FusionMamba), 92);
    }

    #[test]
    fn names_round_trip() {
        for k in BlockKind::ALL {
            assert_eq!(k.to_string().parse::<BlockKind>().unwrap(), k);
        }
        assert!("mlp".parse::<BlockKind>().is_err());
    }

    #[test]
    fn zero_argument_rejected() {
        assert!(count_flops(BlockKind::Conv, 0, 1, 1, 1, 1).is_err());
    }
}
