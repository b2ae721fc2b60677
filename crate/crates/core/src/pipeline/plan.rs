//! Layer-wise overlap strategy selection.

use serde::{Deserialize, Serialize};

use super::timeline::Strategy;
use crate::scenario::OverlapPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub strategies: Vec<Strategy>,
    /// Miss threshold at or above which a layer runs DBA, if thresholded.
    pub threshold: Option<f64>,
    /// Where the per-layer miss means came from.
    pub source: String,
}

impl LayerPlan {
    pub fn uniform(strategy: Strategy, layers: usize) -> Self {
        Self {
            strategies: vec![strategy; layers],
            threshold: None,
            source: format!("uniform:{strategy}"),
        }
    }

    /// Plan for `policy`, using per-layer mean misses when it is layer-wise.
    pub fn for_policy(policy: OverlapPolicy, layer_means: &[f64], source: &str) -> Self {
        let n = layer_means.len();
        match policy {
            OverlapPolicy::None => Self::uniform(Strategy::None, n),
            OverlapPolicy::Da => Self::uniform(Strategy::Da, n),
            OverlapPolicy::Dba => Self::uniform(Strategy::Dba, n),
            OverlapPolicy::Layerwise(t) => plan_layers(layer_means, t, source),
        }
    }

    pub fn count(&self, strategy: Strategy) -> usize {
        self.strategies.iter().filter(|&&s| s == strategy).count()
    }
}

/// DBA for layers whose mean miss count reaches `threshold`, DA otherwise.
pub fn plan_layers(layer_means: &[f64], threshold: f64, source: &str) -> LayerPlan {
    LayerPlan {
        strategies: layer_means
            .iter()
            .map(|&m| {
                if m >= threshold {
                    Strategy::Dba
                } else {
                    Strategy::Da
                }
            })
            .collect(),
        threshold: Some(threshold),
        source: source.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_splits_layers() {
        let p = plan_layers(&[600.0, 20.0], 512.0, "test");
        assert_eq!(p.strategies, vec![Strategy::Dba, Strategy::Da]);
        let all = plan_layers(&[600.0, 20.0], 0.0, "test");
        assert_eq!(all.count(Strategy::Dba), 2);
        let none = plan_layers(&[600.0, 20.0], f64::INFINITY, "test");
        assert_eq!(none.count(Strategy::Da), 2);
    }

    #[test]
    fn fixed_policies_are_uniform() {
        let p = LayerPlan::for_policy(OverlapPolicy::None, &[1.0, 2.0, 3.0], "x");
        assert_eq!(p.count(Strategy::None), 3);
        let p = LayerPlan::for_policy(OverlapPolicy::Layerwise(2.0), &[1.0, 2.0, 3.0], "x");
        assert_eq!(
            p.strategies,
            vec![Strategy::Da, Strategy::Dba, Strategy::Dba]
        );
    }
}
