//! PCIe transfer times for latent-cache blocks.
//!
//! `per_call` issues one copy per block and pays a fixed overhead each time;
//! `batched` ships a whole address list in one launch and runs at link
//! bandwidth.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    PerCall,
    #[default]
    Batched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    H2d,
    D2h,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferModel {
    pub mode: TransferMode,
    pub bw_h2d_gbs: f64,
    pub bw_d2h_gbs: f64,
    /// Fixed cost of one individual copy in `per_call` mode.
    pub per_call_overhead_h2d_us: f64,
    pub per_call_overhead_d2h_us: f64,
    pub block_bytes: f64,
}

impl TransferModel {
    /// Batched model with no per-call overhead.
    pub fn batched(bw_h2d_gbs: f64, bw_d2h_gbs: f64, block_bytes: f64) -> Self {
        Self {
            mode: TransferMode::Batched,
            bw_h2d_gbs,
            bw_d2h_gbs,
            per_call_overhead_h2d_us: 0.0,
            per_call_overhead_d2h_us: 0.0,
            block_bytes,
        }
    }

    pub fn bandwidth_gbs(&self, dir: Direction) -> f64 {
        match dir {
            Direction::H2d => self.bw_h2d_gbs,
            Direction::D2h => self.bw_d2h_gbs,
        }
    }

    pub fn overhead_us(&self, dir: Direction) -> f64 {
        match dir {
            Direction::H2d => self.per_call_overhead_h2d_us,
            Direction::D2h => self.per_call_overhead_d2h_us,
        }
    }

    /// Microseconds to move `blocks` blocks in one direction.
    pub fn transfer_time(&self, blocks: f64, dir: Direction) -> f64 {
        if blocks <= 0.0 {
            return 0.0;
        }
        // GB/s is bytes per nanosecond, so bytes / (GB/s * 1e3) is microseconds.
        let wire = blocks * self.block_bytes / (self.bandwidth_gbs(dir) * 1e3);
        match self.mode {
            TransferMode::Batched => wire,
            TransferMode::PerCall => wire + blocks * self.overhead_us(dir),
        }
    }

    /// Achieved bandwidth for a transfer of `blocks` blocks.
    pub fn effective_bandwidth_gbs(&self, blocks: f64, dir: Direction) -> f64 {
        let t = self.transfer_time(blocks, dir);
        if t <= 0.0 {
            return self.bandwidth_gbs(dir);
        }
        blocks * self.block_bytes / (t * 1e3)
    }

    /// Per-copy overhead that makes single-block copies run at
    /// `effective_gbs` on a link of `bw_gbs`.
    pub fn overhead_for_effective(block_bytes: f64, bw_gbs: f64, effective_gbs: f64) -> f64 {
        (block_bytes / (effective_gbs * 1e3) - block_bytes / (bw_gbs * 1e3)).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batched_full_topk_h2d() {
        let m = TransferModel::batched(37.0, 43.0, 656.0);
        let t = m.transfer_time(2048.0, Direction::H2d);
        assert!((t - 36.31).abs() < 0.01, "{t}");
    }

    #[test]
    fn zero_blocks_cost_nothing() {
        let mut m = TransferModel::batched(37.0, 43.0, 656.0);
        m.mode = TransferMode::PerCall;
        m.per_call_overhead_h2d_us = 5.0;
        assert_eq!(m.transfer_time(0.0, Direction::H2d), 0.0);
    }

    #[test]
    fn per_call_overhead_reproduces_effective_bandwidth() {
        let h = TransferModel::overhead_for_effective(656.0, 37.0, 0.79);
        let d = TransferModel::overhead_for_effective(656.0, 43.0, 0.23);
        let m = TransferModel {
            mode: TransferMode::PerCall,
            per_call_overhead_h2d_us: h,
            per_call_overhead_d2h_us: d,
            ..TransferModel::batched(37.0, 43.0, 656.0)
        };
        let eh = m.effective_bandwidth_gbs(1.0, Direction::H2d);
        let ed = m.effective_bandwidth_gbs(1.0, Direction::D2h);
        assert!((eh - 0.79).abs() < 1e-9);
        assert!((ed - 0.23).abs() < 1e-9);
        let slow = m.transfer_time(2048.0, Direction::H2d);
        assert!((slow - 1700.7).abs() < 0.5, "{slow}");
    }

    #[test]
    fn mode_serializes_snake_case() {
        #[derive(Serialize, Deserialize)]
        struct W {
            m: TransferMode,
        }
        let s = toml::to_string(&W {
            m: TransferMode::PerCall,
        })
        .unwrap();
        assert!(s.contains("per_call"));
        let back: W = toml::from_str("m = \"batched\"").unwrap();
        assert_eq!(back.m, TransferMode::Batched);
    }
}
