//! Checkpoint surgery: remove the layers named by a [`DropPlan`] and renumber
//! the survivors so the result is an ordinary (L-K)-layer checkpoint.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::strategies::DropPlan;
use crate::tensorstore::Checkpoint;
use crate::topology::{ModelTopology, ParamReport};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SurgeryError {
    #[error("plan is for {plan} layers but the checkpoint has {topology}")]
    LayerCountMismatch { plan: usize, topology: usize },
    #[error("plan would leave zero encoder layers")]
    EmptyEncoder,
    #[error("tensor {0:?} listed in the topology is missing from the checkpoint")]
    MissingTensor(String),
    #[error("tensor {0:?} does not match the layer pattern")]
    NotALayerTensor(String),
    #[error("score table is empty")]
    EmptyScores,
    #[error("no full-model score: provide K = 0 in the table or pass one explicitly")]
    NoBaseline,
}

pub type Result<T> = std::result::Result<T, SurgeryError>;

/// Delete dropped layers and compact the survivors to indices 0..L-K-1.
/// Tensor buffers are shared with the input, so bytes are untouched.
pub fn apply_plan(c: &Checkpoint, t: &ModelTopology, p: &DropPlan) -> Result<Checkpoint> {
    if p.num_layers != t.num_layers {
        return Err(SurgeryError::LayerCountMismatch {
            plan: p.num_layers,
            topology: t.num_layers,
        });
    }
    if p.kept.is_empty() {
        return Err(SurgeryError::EmptyEncoder);
    }
    let (tensors, metadata) = c.clone().into_parts();
    let mut out = BTreeMap::new();

    for name in t.embedding_tensors.iter().chain(&t.other_tensors) {
        let entry = tensors
            .get(name)
            .ok_or_else(|| SurgeryError::MissingTensor(name.clone()))?;
        out.insert(name.clone(), entry.clone());
    }
    for (new_index, old_index) in p.zero_based_kept().into_iter().enumerate() {
        for name in &t.layer_tensors[old_index] {
            let entry = tensors
                .get(name)
                .ok_or_else(|| SurgeryError::MissingTensor(name.clone()))?;
            let (_, suffix) = t
                .scheme
                .match_layer(name)
                .ok_or_else(|| SurgeryError::NotALayerTensor(name.clone()))?;
            out.insert(t.scheme.layer_name(new_index, suffix), entry.clone());
        }
    }
    Ok(Checkpoint::from_parts(out, metadata))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub params_before: usize,
    pub params_after: usize,
    pub reduction_fraction: f64,
    pub layers_before: usize,
    pub layers_after: usize,
    /// Analytic fine-tuning speedup L / (L - K); wall-clock time is not measured.
    pub est_finetune_speedup: f64,
}

pub fn reduction_report(before: &ParamReport, after: &ParamReport, p: &DropPlan) -> ReductionReport {
    let layers_before = p.num_layers;
    let layers_after = p.layers_after();
    ReductionReport {
        params_before: before.total,
        params_after: after.total,
        reduction_fraction: 1.0 - after.total as f64 / before.total as f64,
        layers_before,
        layers_after,
        est_finetune_speedup: layers_before as f64 / layers_after as f64,
    }
}

// Guards against decimal-looking inputs such as 92.43 - 91.43 landing a hair
// above 1.0 in binary floating point.
const SCORE_EPS: f64 = 1e-9;

/// Largest K whose score is within `threshold` absolute points of the full
/// model; 0 when no K qualifies. `full_score` overrides the K = 0 entry.
pub fn max_droppable_within(
    scores: &BTreeMap<usize, f64>,
    full_score: Option<f64>,
    threshold: f64,
) -> Result<usize> {
    if scores.is_empty() {
        return Err(SurgeryError::EmptyScores);
    }
    let full = full_score
        .or_else(|| scores.get(&0).copied())
        .ok_or(SurgeryError::NoBaseline)?;
    Ok(scores
        .iter()
        .filter(|(_, &s)| full - s <= threshold + SCORE_EPS)
        .map(|(&k, _)| k)
        .max()
        .unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategies::{plan_top, DropPlan, Strategy};
    use crate::tensorstore::DType;
    use crate::topology::{count_parameters, infer_topology, NamingScheme};

    fn toy(layers: usize) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_f32("embeddings.w", vec![2], &[0.5, 0.25]).unwrap();
        for i in 0..layers {
            let v = i as f32;
            c.insert_f32(format!("encoder.layer.{i}.a"), vec![2], &[v, v + 0.5])
                .unwrap();
            c.insert_f32(format!("encoder.layer.{i}.b"), vec![], &[-v])
                .unwrap();
        }
        c.insert_f32("pooler.w", vec![1], &[9.0]).unwrap();
        c
    }

    #[test]
    fn drops_and_renumbers() {
        let c = toy(4);
        let t = infer_topology(&c, &NamingScheme::bert()).unwrap();
        let p = DropPlan::new(Strategy::Custom, 4, [3, 4]).unwrap();
        let out = apply_plan(&c, &t, &p).unwrap();
        let t2 = infer_topology(&out, &NamingScheme::bert()).unwrap();
        assert_eq!(t2.num_layers, 2);
        for i in 0..2 {
            for s in ["a", "b"] {
                let name = format!("encoder.layer.{i}.{s}");
                assert_eq!(out.entry(&name).unwrap().bytes(), c.entry(&name).unwrap().bytes());
            }
        }
        assert_eq!(out.entry("pooler.w"), c.entry("pooler.w"));
        assert!(!out.contains("encoder.layer.2.a"));
    }

    #[test]
    fn renumbering_keeps_order() {
        let c = toy(4);
        let t = infer_topology(&c, &NamingScheme::bert()).unwrap();
        let p = DropPlan::new(Strategy::Custom, 4, [1, 3]).unwrap();
        let out = apply_plan(&c, &t, &p).unwrap();
        assert_eq!(
            out.entry("encoder.layer.0.a").unwrap().bytes(),
            c.entry("encoder.layer.1.a").unwrap().bytes()
        );
        assert_eq!(
            out.entry("encoder.layer.1.a").unwrap().bytes(),
            c.entry("encoder.layer.3.a").unwrap().bytes()
        );
    }

    #[test]
    fn empty_plan_is_identity() {
        let c = toy(3);
        let t = infer_topology(&c, &NamingScheme::bert()).unwrap();
        let out = apply_plan(&c, &t, &DropPlan::identity(3)).unwrap();
        assert_eq!(out, c);
        assert_eq!(
            crate::tensorstore::write_checkpoint(&out),
            crate::tensorstore::write_checkpoint(&c)
        );
    }

    #[test]
    fn rejects_mismatched_or_emptying_plans() {
        let c = toy(3);
        let t = infer_topology(&c, &NamingScheme::bert()).unwrap();
        assert_eq!(
            apply_plan(&c, &t, &plan_top(4, 1).unwrap()),
            Err(SurgeryError::LayerCountMismatch { plan: 4, topology: 3 })
        );
        let all = DropPlan::new(Strategy::Contribution, 3, [1, 2, 3]).unwrap();
        assert_eq!(apply_plan(&c, &t, &all), Err(SurgeryError::EmptyEncoder));
    }

    #[test]
    fn top_plans_compose() {
        let c = toy(6);
        let scheme = NamingScheme::bert();
        let t = infer_topology(&c, &scheme).unwrap();
        let once = apply_plan(&c, &t, &plan_top(6, 3).unwrap()).unwrap();
        let first = apply_plan(&c, &t, &plan_top(6, 1).unwrap()).unwrap();
        let t1 = infer_topology(&first, &scheme).unwrap();
        let twice = apply_plan(&first, &t1, &plan_top(5, 2).unwrap()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn bert_base_top6_counts() {
        let c = crate::fixtures::bert_shaped(&crate::fixtures::BertDims::base(), DType::F32);
        let t = infer_topology(&c, &NamingScheme::bert()).unwrap();
        let p = plan_top(12, 6).unwrap();
        let before = count_parameters(&c, &t);
        let out = apply_plan(&c, &t, &p).unwrap();
        let after = count_parameters(&out, &infer_topology(&out, &NamingScheme::bert()).unwrap());
        assert_eq!(after.total, 66_955_008);
        let r = reduction_report(&before, &after, &p);
        assert!((r.reduction_fraction - 0.388_439_5).abs() < 1e-6);
        assert_eq!(r.est_finetune_speedup, 2.0);
        assert_eq!(r.layers_after, 6);
    }

    #[test]
    fn speedup_is_layer_ratio() {
        let dummy = ParamReport {
            total: 10,
            embedding: 0,
            per_layer: vec![],
            other: 0,
            without_other: 10,
        };
        let s = |k| reduction_report(&dummy, &dummy, &plan_top(12, k).unwrap()).est_finetune_speedup;
        assert!((s(2) - 1.2).abs() < 1e-12);
        assert!((s(4) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn droppable_within_threshold() {
        let sst2 = BTreeMap::from([(0, 92.43), (2, 92.20), (4, 90.60), (6, 90.25)]);
        assert_eq!(max_droppable_within(&sst2, None, 1.0), Ok(2));
        let flat = BTreeMap::from([(0, 90.0), (6, 90.0)]);
        assert_eq!(max_droppable_within(&flat, None, 0.0), Ok(6));
        let steep = BTreeMap::from([(0, 90.0), (2, 88.0)]);
        assert_eq!(max_droppable_within(&steep, None, 1.0), Ok(0));
        assert_eq!(
            max_droppable_within(&BTreeMap::new(), None, 1.0),
            Err(SurgeryError::EmptyScores)
        );
        let no_base = BTreeMap::from([(2, 88.0)]);
        assert_eq!(
            max_droppable_within(&no_base, None, 1.0),
            Err(SurgeryError::NoBaseline)
        );
        assert_eq!(max_droppable_within(&no_base, Some(88.5), 1.0), Ok(2));
    }
}
