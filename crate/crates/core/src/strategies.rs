//! Layer-drop plans. All plan indices are 1-based (layer 1 is the lowest
//! encoder layer); `zero_based_*` helpers convert at the boundary.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contribution::SimilarityProfile;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("cannot drop {k} of {layers} layers: K must be below the layer count")]
    TooMany { layers: usize, k: usize },
    #[error("alternate dropping needs an even layer count, got {0}")]
    OddLayerCount(usize),
    #[error("alternate dropping of {k} layers out of range for {layers} layers (max {max})")]
    AlternateRange { layers: usize, k: usize, max: usize },
    #[error("asymmetric remainder: {layers} - {k} is odd, no equal top/bottom split")]
    AsymmetricRemainder { layers: usize, k: usize },
    #[error("layer index {index} outside 1..={layers}")]
    IndexOutOfRange { index: usize, layers: usize },
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("similarity profile is empty")]
    EmptyProfile,
    #[error("plan is inconsistent: {0}")]
    Inconsistent(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
}

pub type Result<T> = std::result::Result<T, PlanError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Top,
    Bottom,
    OddAlternate,
    EvenAlternate,
    Symmetric,
    Contribution,
    /// Explicit layer set, e.g. a single step of gradual dropping.
    Custom,
}

impl Strategy {
    pub const POSITIONAL: [Strategy; 5] = [
        Strategy::Top,
        Strategy::Bottom,
        Strategy::OddAlternate,
        Strategy::EvenAlternate,
        Strategy::Symmetric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Top => "top",
            Strategy::Bottom => "bottom",
            Strategy::OddAlternate => "odd-alternate",
            Strategy::EvenAlternate => "even-alternate",
            Strategy::Symmetric => "symmetric",
            Strategy::Contribution => "contribution",
            Strategy::Custom => "custom",
        }
    }

    /// Plan for a positional strategy; `Contribution` and `Custom` need more
    /// than (L, K) and are rejected.
    pub fn plan(self, layers: usize, k: usize) -> Result<DropPlan> {
        match self {
            Strategy::Top => plan_top(layers, k),
            Strategy::Bottom => plan_bottom(layers, k),
            Strategy::OddAlternate => plan_odd_alternate(layers, k),
            Strategy::EvenAlternate => plan_even_alternate(layers, k),
            Strategy::Symmetric => plan_symmetric(layers, k),
            Strategy::Contribution | Strategy::Custom => Err(PlanError::Inconsistent(format!(
                "{} plans cannot be derived from (L, K) alone",
                self.name()
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self> {
        [Strategy::Contribution, Strategy::Custom]
            .into_iter()
            .chain(Strategy::POSITIONAL)
            .find(|st| st.name() == s)
            .ok_or_else(|| PlanError::UnknownStrategy(s.to_string()))
    }
}

/// A set of 1-based layer indices to remove from an `num_layers`-layer model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPlan")]
pub struct DropPlan {
    pub strategy: Strategy,
    pub num_layers: usize,
    pub dropped: BTreeSet<usize>,
    pub kept: Vec<usize>,
}

#[derive(Deserialize)]
struct RawPlan {
    strategy: Strategy,
    num_layers: usize,
    dropped: Vec<usize>,
    #[serde(default)]
    kept: Option<Vec<usize>>,
}

impl TryFrom<RawPlan> for DropPlan {
    type Error = PlanError;

    fn try_from(raw: RawPlan) -> Result<Self> {
        let plan = DropPlan::new(raw.strategy, raw.num_layers, raw.dropped)?;
        if let Some(kept) = raw.kept {
            if kept != plan.kept {
                return Err(PlanError::Inconsistent(format!(
                    "kept {kept:?} does not complement dropped {:?}",
                    plan.dropped
                )));
            }
        }
        Ok(plan)
    }
}

impl DropPlan {
    pub fn new(
        strategy: Strategy,
        num_layers: usize,
        dropped: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let dropped: BTreeSet<usize> = dropped.into_iter().collect();
        if let Some(&bad) = dropped.iter().find(|&&i| i == 0 || i > num_layers) {
            return Err(PlanError::IndexOutOfRange {
                index: bad,
                layers: num_layers,
            });
        }
        let kept = (1..=num_layers).filter(|i| !dropped.contains(i)).collect();
        Ok(Self {
            strategy,
            num_layers,
            dropped,
            kept,
        })
    }

    /// Plan that keeps every layer.
    pub fn identity(num_layers: usize) -> Self {
        Self::new(Strategy::Custom, num_layers, []).expect("empty plan is always valid")
    }

    pub fn k(&self) -> usize {
        self.dropped.len()
    }

    pub fn layers_after(&self) -> usize {
        self.kept.len()
    }

    pub fn dropped_vec(&self) -> Vec<usize> {
        self.dropped.iter().copied().collect()
    }

    pub fn zero_based_dropped(&self) -> BTreeSet<usize> {
        self.dropped.iter().map(|i| i - 1).collect()
    }

    pub fn zero_based_kept(&self) -> Vec<usize> {
        self.kept.iter().map(|i| i - 1).collect()
    }
}

fn check_below(layers: usize, k: usize) -> Result<()> {
    if k >= layers {
        return Err(PlanError::TooMany { layers, k });
    }
    Ok(())
}

/// Drop the highest K layers.
pub fn plan_top(layers: usize, k: usize) -> Result<DropPlan> {
    check_below(layers, k)?;
    DropPlan::new(Strategy::Top, layers, layers - k + 1..=layers)
}

/// Drop the lowest K layers; the embedding output then feeds layer K+1.
pub fn plan_bottom(layers: usize, k: usize) -> Result<DropPlan> {
    check_below(layers, k)?;
    DropPlan::new(Strategy::Bottom, layers, 1..=k)
}

fn check_alternate(layers: usize, k: usize) -> Result<()> {
    if !layers.is_multiple_of(2) {
        return Err(PlanError::OddLayerCount(layers));
    }
    if k > layers / 2 {
        return Err(PlanError::AlternateRange {
            layers,
            k,
            max: layers / 2,
        });
    }
    Ok(())
}

/// Drop K even-numbered layers counting down from the top: L, L-2, ...
pub fn plan_even_alternate(layers: usize, k: usize) -> Result<DropPlan> {
    check_alternate(layers, k)?;
    DropPlan::new(Strategy::EvenAlternate, layers, (0..k).map(|i| layers - 2 * i))
}

/// Drop K odd-numbered layers counting down from the top: L-1, L-3, ...
pub fn plan_odd_alternate(layers: usize, k: usize) -> Result<DropPlan> {
    check_alternate(layers, k)?;
    DropPlan::new(Strategy::OddAlternate, layers, (0..k).map(|i| layers - 1 - 2 * i))
}

/// Keep X layers at each end and drop the K in the middle, with 2X + K = L.
pub fn plan_symmetric(layers: usize, k: usize) -> Result<DropPlan> {
    check_below(layers, k)?;
    if !(layers - k).is_multiple_of(2) {
        return Err(PlanError::AsymmetricRemainder { layers, k });
    }
    let x = (layers - k) / 2;
    DropPlan::new(Strategy::Symmetric, layers, x + 1..=x + k)
}

/// Drop every layer whose mean input/output similarity is strictly above `tau`.
pub fn select_by_threshold(profile: &SimilarityProfile, tau: f64) -> Result<DropPlan> {
    if profile.mean_similarity.is_empty() {
        return Err(PlanError::EmptyProfile);
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(PlanError::BadThreshold(tau));
    }
    let dropped = profile
        .mean_similarity
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau)
        .map(|(i, _)| i + 1);
    DropPlan::new(Strategy::Contribution, profile.mean_similarity.len(), dropped)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};
    use proptest::strategy::Strategy as _;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn profile(v: &[f64]) -> SimilarityProfile {
        SimilarityProfile {
            num_layers: v.len(),
            mean_similarity: v.to_vec(),
            n_examples: 1,
        }
    }

    #[test]
    fn top_plans() {
        assert_eq!(plan_top(12, 2).unwrap().dropped, set(&[11, 12]));
        assert!(plan_top(12, 0).unwrap().dropped.is_empty());
        assert_eq!(plan_top(6, 3).unwrap().dropped, set(&[4, 5, 6]));
        assert!(plan_top(12, 12).is_err());
    }

    #[test]
    fn bottom_plans() {
        assert_eq!(plan_bottom(12, 2).unwrap().dropped, set(&[1, 2]));
        assert_eq!(plan_bottom(12, 6).unwrap().dropped, set(&[1, 2, 3, 4, 5, 6]));
        assert_eq!(plan_bottom(12, 12), Err(PlanError::TooMany { layers: 12, k: 12 }));
    }

    #[test]
    fn even_alternate_plans() {
        assert_eq!(plan_even_alternate(12, 4).unwrap().dropped, set(&[6, 8, 10, 12]));
        assert_eq!(plan_even_alternate(12, 2).unwrap().dropped, set(&[10, 12]));
        assert_eq!(
            plan_even_alternate(12, 6).unwrap().dropped,
            set(&[2, 4, 6, 8, 10, 12])
        );
        assert!(plan_even_alternate(12, 7).is_err());
        assert_eq!(plan_even_alternate(7, 2), Err(PlanError::OddLayerCount(7)));
    }

    #[test]
    fn odd_alternate_plans() {
        assert_eq!(plan_odd_alternate(12, 4).unwrap().dropped, set(&[5, 7, 9, 11]));
        assert_eq!(plan_odd_alternate(12, 2).unwrap().dropped, set(&[9, 11]));
        assert_eq!(plan_odd_alternate(12, 1).unwrap().dropped, set(&[11]));
    }

    #[test]
    fn symmetric_plans() {
        assert_eq!(plan_symmetric(12, 6).unwrap().dropped, set(&[4, 5, 6, 7, 8, 9]));
        assert_eq!(plan_symmetric(12, 2).unwrap().dropped, set(&[6, 7]));
        let err = plan_symmetric(12, 3).unwrap_err();
        assert!(err.to_string().contains("asymmetric remainder"));
    }

    #[test]
    fn threshold_selection() {
        let p = profile(&[0.99, 0.50, 0.96, 0.40]);
        let plan = select_by_threshold(&p, 0.95).unwrap();
        assert_eq!(plan.dropped, set(&[1, 3]));
        assert_eq!(plan.strategy, Strategy::Contribution);
        assert!(select_by_threshold(&p, 1.0).unwrap().dropped.is_empty());
        // ties at exactly tau are kept
        let tie = profile(&[0.95, 0.951]);
        assert_eq!(select_by_threshold(&tie, 0.95).unwrap().dropped, set(&[2]));
        assert_eq!(
            select_by_threshold(&profile(&[]), 0.9),
            Err(PlanError::EmptyProfile)
        );
        assert!(select_by_threshold(&p, 1.5).is_err());
    }

    #[test]
    fn kept_complements_dropped() {
        let p = plan_symmetric(12, 2).unwrap();
        assert_eq!(p.kept, vec![1, 2, 3, 4, 5, 8, 9, 10, 11, 12]);
        assert_eq!(p.zero_based_dropped(), set(&[5, 6]));
    }

    #[test]
    fn plan_json_round_trip_and_validation() {
        let p = plan_odd_alternate(12, 4).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"odd-alternate\""));
        let back: DropPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"strategy":"top","num_layers":4,"dropped":[5]}"#;
        assert!(serde_json::from_str::<DropPlan>(bad).is_err());
        let inconsistent = r#"{"strategy":"top","num_layers":4,"dropped":[4],"kept":[1,2]}"#;
        assert!(serde_json::from_str::<DropPlan>(inconsistent).is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::POSITIONAL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("middle".parse::<Strategy>().is_err());
    }

    fn positional_cases() -> impl proptest::strategy::Strategy<Value = (Strategy, usize, usize)> {
        (1usize..=24, 0usize..24, 0usize..5).prop_filter_map("valid (L, K)", |(l, k, s)| {
            let strat = Strategy::POSITIONAL[s];
            strat.plan(l, k).ok().map(|_| (strat, l, k))
        })
    }

    proptest! {
        #[test]
        fn plans_drop_exactly_k((strat, l, k) in positional_cases()) {
            let p = strat.plan(l, k).unwrap();
            prop_assert_eq!(p.k(), k);
            prop_assert!(p.dropped.iter().all(|&i| (1..=l).contains(&i)));
            prop_assert_eq!(p.kept.len(), l - k);
            prop_assert!(p.kept.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn top_and_bottom_disjoint(l in 1usize..30, k in 0usize..15) {
            prop_assume!(2 * k <= l && k < l);
            let top = plan_top(l, k).unwrap();
            let bottom = plan_bottom(l, k).unwrap();
            prop_assert!(top.dropped.is_disjoint(&bottom.dropped));
        }

        #[test]
        fn alternates_complement(half in 1usize..12) {
            let l = 2 * half;
            let odd = plan_odd_alternate(l, half).unwrap();
            let even = plan_even_alternate(l, half).unwrap();
            prop_assert!(odd.dropped.iter().all(|i| i % 2 == 1));
            prop_assert!(even.dropped.iter().all(|i| i % 2 == 0));
            let union: BTreeSet<usize> = odd.dropped.union(&even.dropped).copied().collect();
            prop_assert_eq!(union, (1..=l).collect::<BTreeSet<_>>());
        }

        #[test]
        fn threshold_is_monotone(
            sims in proptest::collection::vec(-1.0f64..=1.0, 1..16),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p = profile(&sims);
            let strict = select_by_threshold(&p, hi).unwrap();
            let loose = select_by_threshold(&p, lo).unwrap();
            prop_assert!(strict.dropped.is_subset(&loose.dropped));
        }
    }
}
