//! Three-stage prompts: laterality, region count, then the exact regions.

use crate::data::scene::{Anchor, SceneSpec};
use crate::error::{Error, Result};

/// Every word the prompt generator can emit, in vocabulary order.
pub const GRAMMAR: &[&str] = &[
    "unilateral", "bilateral", "pulmonary", "infection", "one", "two", "three", "four", "infected", "areas",
    "located", "at", "left", "right", "upper", "lower", "lung",
];

const COUNT_WORDS: [&str; 4] = ["one", "two", "three", "four"];

/// Prompt text split into its three granularity stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptStages {
    pub stage1: String,
    pub stage2: String,
    pub stage3: String,
}

/// Builds the three prompt stages describing the infected regions of `scene`.
pub fn gen_prompt(scene: &SceneSpec) -> Result<PromptStages> {
    let anchors = scene.infected_anchors();
    if anchors.is_empty() {
        return Err(Error::Contract("scene has no infected region to describe".into()));
    }
    Ok(describe(&anchors))
}

/// Prompt for an arbitrary non-empty anchor set (sorted into the fixed order).
pub fn describe(anchors: &[Anchor]) -> PromptStages {
    let mut sorted = anchors.to_vec();
    sorted.sort();
    sorted.dedup();
    let left = sorted.iter().any(|a| a.is_left());
    let right = sorted.iter().any(|a| !a.is_left());
    let laterality = if left && right { "bilateral" } else { "unilateral" };
    let names: Vec<&str> = sorted.iter().map(|a| a.name()).collect();
    PromptStages {
        stage1: format!("{laterality} pulmonary infection"),
        stage2: format!("{} infected areas", COUNT_WORDS[sorted.len() - 1]),
        stage3: format!("located at {}", names.join(", ")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_region() {
        let p = describe(&[Anchor::LeftUpper]);
        assert_eq!(p.stage1, "unilateral pulmonary infection");
        assert_eq!(p.stage2, "one infected areas");
        assert_eq!(p.stage3, "located at left upper lung");
    }

    #[test]
    fn bilateral_pair_in_fixed_order() {
        let p = describe(&[Anchor::RightLower, Anchor::LeftUpper]);
        assert_eq!(p.stage1, "bilateral pulmonary infection");
        assert_eq!(p.stage2, "two infected areas");
        assert_eq!(p.stage3, "located at left upper lung, right lower lung");
    }

    #[test]
    fn same_side_pair_is_unilateral() {
        let p = describe(&[Anchor::RightUpper, Anchor::RightLower]);
        assert_eq!(p.stage1, "unilateral pulmonary infection");
    }
}
