use std::collections::BTreeMap;

use proptest::prelude::*;

use monoprobe_core::corpus::{quartiles_from_values, Label, QualityMetric};
use monoprobe_core::featurize::{pool_features, PaperFeatureVector, SaeConfig, SparseRow, TokenFeatureMatrix};
use monoprobe_core::interpret::feature_importances;
use monoprobe_core::probe::{train_tree, TreeConfig};

fn values_strategy() -> impl Strategy<Value = Vec<(String, f64)>> {
    prop::collection::vec(0u32..20, 4..120)
        .prop_map(|vs| vs.into_iter().enumerate().map(|(i, v)| (format!("id{i:03}"), v as f64)).collect())
}

proptest! {
    #[test]
    fn quartiles_ignore_input_order(values in values_strategy(), seed in any::<u64>()) {
        let mut shuffled = values.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7919) % n);
        }
        let a = quartiles_from_values(QualityMetric::Sjr, &values).unwrap();
        let b = quartiles_from_values(QualityMetric::Sjr, &shuffled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pooled_values_stay_within_column_bounds(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..100.0, 16), 1..20)
    ) {
        let matrix = TokenFeatureMatrix {
            paper_id: "p".into(),
            sae: SaeConfig::new("m", 0, 16, "m/16").unwrap(),
            tokens: vec!["t".into(); rows.len()],
            rows: rows.iter().map(|r| SparseRow::from_dense(r)).collect(),
        };
        let pooled = pool_features(&matrix).unwrap().values;
        for f in 0..16 {
            let lo = rows.iter().map(|r| r[f]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[f]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pooled[f] >= lo - 1e-9 && pooled[f] <= hi + 1e-9);
        }
    }

    #[test]
    fn importances_sum_to_one(
        data in prop::collection::vec((prop::collection::vec(0u8..5, 3), any::<bool>()), 4..40),
        leaves in 2usize..10,
    ) {
        let labels: Vec<Label> = data.iter().map(|(_, h)| if *h { Label::High } else { Label::Low }).collect();
        prop_assume!(labels.contains(&Label::High) && labels.contains(&Label::Low));
        let sae = SaeConfig::new("m", 0, 3, "m/3").unwrap();
        let vectors: Vec<PaperFeatureVector> = data
            .iter()
            .enumerate()
            .map(|(i, (x, _))| PaperFeatureVector {
                paper_id: i.to_string(),
                sae: sae.clone(),
                values: x.iter().map(|v| *v as f64).collect(),
            })
            .collect();
        let train: Vec<_> = vectors.iter().zip(labels).collect();
        let tree = train_tree(&train, &TreeConfig::default().with_max_leaf_nodes(leaves), QualityMetric::HIndex).unwrap();
        let imp: BTreeMap<usize, f64> = feature_importances(&tree);
        prop_assert!(tree.leaf_count() <= leaves);
        if !imp.is_empty() {
            prop_assert!((imp.values().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(imp.values().all(|v| *v > 0.0));
        }
    }
}
