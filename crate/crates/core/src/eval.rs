//! Retrieval evaluation by per-query ROC/AUC, and the reliable-pair diagnostic.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batchopt::BatchAssignment;
use crate::cliques::CliqueAssignment;
use crate::dataset::EvalAnnotations;
use crate::error::{Error, Result};
use crate::similarity::{ReliabilityBands, SimilarityMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    pub query: usize,
    pub auc: f64,
    /// `(false positive rate, true positive rate)` from `(0,0)` to `(1,1)`.
    pub curve: Vec<(f64, f64)>,
}

/// AUC as the rank statistic: wins of positives over negatives plus half the
/// ties, over all pairs. The curve sweeps thresholds over the distinct scores.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<RocResult> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut scored: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut wins = 0.0;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < scored.len() {
        // one threshold per group of equal scores
        let (mut gp, mut gn) = (0usize, 0usize);
        let v = scored[i].0;
        while i < scored.len() && scored[i].0 == v {
            if scored[i].1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // each negative here loses to every positive above and ties with this group
        wins += gn as f64 * tp as f64 + 0.5 * gn as f64 * gp as f64;
        tp += gp;
        fp += gn;
        curve.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(RocResult {
        query: 0,
        auc: wins / (np * nn),
        curve,
    })
}

/// Trapezoidal area under a ROC curve.
pub fn curve_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub mean_auc: f64,
    pub per_query: Vec<RocResult>,
    /// Queries with an empty positive or negative list.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub mean_auc: f64,
    pub n_queries: usize,
    pub skipped: usize,
}

impl RetrievalReport {
    pub fn summary(&self) -> RetrievalSummary {
        RetrievalSummary {
            mean_auc: self.mean_auc,
            n_queries: self.per_query.len(),
            skipped: self.skipped,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("query,auc\n");
        for r in &self.per_query {
            out.push_str(&format!("{},{}\n", r.query, r.auc));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary())?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mean per-query AUC of `S[q][·]` separating each query's positives from its
/// negatives. Queries lacking either side are skipped and counted.
pub fn evaluate_retrieval(s: &SimilarityMatrix, annotations: &EvalAnnotations) -> Result<RetrievalReport> {
    annotations.validate(s.n())?;
    let results: Vec<Option<RocResult>> = annotations
        .queries
        .par_iter()
        .map(|(&q, ann)| {
            let pos: Vec<f64> = ann.pos.iter().map(|&j| s.get(q, j)).collect();
            let neg: Vec<f64> = ann.neg.iter().map(|&j| s.get(q, j)).collect();
            roc_auc(&pos, &neg).ok().map(|r| RocResult { query: q, ..r })
        })
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} queries without positives or negatives were skipped");
    }
    let per_query: Vec<RocResult> = results.into_iter().flatten().collect();
    if per_query.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mean_auc = per_query.iter().map(|r| r.auc).sum::<f64>() / per_query.len() as f64;
    Ok(RetrievalReport {
        mean_auc,
        per_query,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliablePairs {
    pub per_batch: Vec<usize>,
    pub mean: f64,
}

/// For each batch row, counts unordered sample pairs in the union of its
/// cliques that the bands vouch for: pairs sharing a clique of the row that
/// are reliably similar, and pairs in different cliques of the row that are
/// reliably dissimilar.
pub fn reliable_pairs_per_batch(
    s: &SimilarityMatrix,
    cliques: &CliqueAssignment,
    batches: &BatchAssignment,
    bands: &ReliabilityBands,
) -> ReliablePairs {
    let per_batch: Vec<usize> = batches
        .rows()
        .into_iter()
        .map(|row| {
            // clique memberships within this row, per sample
            let mut owners: Vec<Vec<usize>> = vec![Vec::new(); cliques.n];
            for &k in &row {
                for &i in &cliques.cliques[k] {
                    owners[i].push(k);
                }
            }
            let members: Vec<usize> = (0..cliques.n).filter(|&i| !owners[i].is_empty()).collect();
            let mut count = 0;
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    let shared = owners[i].iter().any(|k| owners[j].contains(k));
                    let reliable = if shared {
                        bands.pair_similar(s, i, j)
                    } else {
                        bands.pair_dissimilar(s, i, j)
                    };
                    count += usize::from(reliable);
                }
            }
            count
        })
        .collect();
    let mean = if per_batch.is_empty() {
        0.0
    } else {
        per_batch.iter().sum::<usize>() as f64 / per_batch.len() as f64
    };
    ReliablePairs { per_batch, mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QueryAnnotation;
    use crate::rng::seeded;
    use crate::similarity::reliability_bands;
    use nalgebra::DMatrix;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn pair_count_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut acc = 0.0;
        for p in pos {
            for n in neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.7, 0.1]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.8], &[0.9, 0.1]).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&[0.3, 0.1, 0.3], &[0.1, 0.3, 0.3]).unwrap().auc, 0.5);
        assert!(matches!(roc_auc(&[], &[1.0]), Err(Error::EmptyInput)));
        assert!(matches!(roc_auc(&[1.0], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn curve_endpoints() {
        let r = roc_auc(&[0.5, 0.2], &[0.4]).unwrap();
        assert_eq!(r.curve.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.curve.last(), Some(&(1.0, 1.0)));
    }

    fn annotations(entries: &[(usize, &[usize], &[usize])]) -> EvalAnnotations {
        EvalAnnotations {
            queries: entries
                .iter()
                .map(|(q, p, n)| (*q, QueryAnnotation { pos: p.to_vec(), neg: n.to_vec() }))
                .collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn oracle_and_constant_similarity() {
        let labels = [0, 0, 0, 1, 1, 1, 2, 2];
        let ann = EvalAnnotations::from_labels(&labels, None, 0);
        let block = DMatrix::from_fn(8, 8, |i, j| f64::from(u8::from(labels[i] == labels[j])));
        let report = evaluate_retrieval(&SimilarityMatrix::new(block).unwrap(), &ann).unwrap();
        assert_eq!(report.mean_auc, 1.0);
        assert_eq!(report.per_query.len(), 8);
        let constant = SimilarityMatrix::new(DMatrix::from_element(8, 8, 0.3)).unwrap();
        assert_eq!(evaluate_retrieval(&constant, &ann).unwrap().mean_auc, 0.5);
    }

    #[test]
    fn empty_queries_are_skipped() {
        let s = SimilarityMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let ann = annotations(&[(0, &[1], &[2]), (1, &[], &[2])]);
        let report = evaluate_retrieval(&s, &ann).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.summary().n_queries, 1);
        let none = annotations(&[(1, &[], &[2])]);
        assert!(matches!(evaluate_retrieval(&s, &none), Err(Error::EmptyInput)));
    }

    fn singleton_cliques(n: usize) -> CliqueAssignment {
        CliqueAssignment {
            n,
            cliques: (0..n).map(|i| vec![i]).collect(),
            seeds: (0..n).collect(),
            intra: vec![f64::INFINITY; n],
        }
    }

    #[test]
    fn reliable_pair_examples() {
        // samples 0..3 tightly similar, 3..6 far from everything
        let mut m = DMatrix::from_element(6, 6, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = 0.9;
            }
        }
        m.fill_diagonal(1.0);
        let s = SimilarityMatrix::new(m).unwrap();
        let bands = ReliabilityBands {
            lower_q: 0.05,
            upper_q: 0.95,
            low: vec![-0.5; 6],
            high: vec![0.8; 6],
        };
        let one = CliqueAssignment {
            n: 6,
            cliques: vec![vec![0, 1, 2], vec![3], vec![4]],
            seeds: vec![0, 3, 4],
            intra: vec![0.9, f64::INFINITY, f64::INFINITY],
        };
        let x = BatchAssignment::from_rows(&[vec![0]], 3, 1).unwrap();
        assert_eq!(reliable_pairs_per_batch(&s, &one, &x, &bands).per_batch, vec![3]);
        // 3 and 4 at 0.0 sit inside the band
        let x = BatchAssignment::from_rows(&[vec![1, 2]], 3, 2).unwrap();
        assert_eq!(reliable_pairs_per_batch(&s, &one, &x, &bands).per_batch, vec![0]);
    }

    #[test]
    fn reliable_pairs_match_double_loop() {
        let n = 12;
        let mut rng = seeded(5);
        let mut m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        m = (&m + m.transpose()) * 0.5;
        let s = SimilarityMatrix::new(m).unwrap();
        let bands = reliability_bands(&s, 0.2, 0.8).unwrap();
        let cliques = singleton_cliques(n);
        let rows: Vec<Vec<usize>> = (0..3).map(|b| (0..4).map(|t| b * 4 + t).collect()).collect();
        let x = BatchAssignment::from_rows(&rows, n, 4).unwrap();
        let got = reliable_pairs_per_batch(&s, &cliques, &x, &bands);
        for (b, row) in rows.iter().enumerate() {
            let mut expected = 0;
            for &i in row {
                for &j in row {
                    let v = s.get(i, j);
                    if i < j && (v <= bands.low[i] || v <= bands.low[j]) {
                        expected += 1;
                    }
                }
            }
            assert_eq!(got.per_batch[b], expected);
        }
        let mean = got.per_batch.iter().sum::<usize>() as f64 / 3.0;
        assert_eq!(got.mean, mean);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn scores() -> impl Strategy<Value = Vec<f64>> {
            // coarse grid so ties actually happen
            proptest::collection::vec((-20i32..20).prop_map(|v| f64::from(v) / 4.0), 1..30)
        }

        proptest! {
            #[test]
            fn matches_pair_count_and_curve(pos in scores(), neg in scores()) {
                let r = roc_auc(&pos, &neg).unwrap();
                prop_assert!((r.auc - pair_count_auc(&pos, &neg)).abs() < 1e-12);
                prop_assert!((r.auc - curve_area(&r.curve)).abs() < 1e-9);
                for w in r.curve.windows(2) {
                    prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
                }
            }

            #[test]
            fn complementary(pos in scores(), neg in scores()) {
                let a = roc_auc(&pos, &neg).unwrap().auc;
                let b = roc_auc(&neg, &pos).unwrap().auc;
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }

            #[test]
            fn monotone_transform_invariant(pos in scores(), neg in scores()) {
                let f = |v: &f64| (v * 0.7).exp() + 3.0;
                let tp: Vec<f64> = pos.iter().map(f).collect();
                let tn: Vec<f64> = neg.iter().map(f).collect();
                prop_assert_eq!(roc_auc(&pos, &neg).unwrap().auc, roc_auc(&tp, &tn).unwrap().auc);
            }

            #[test]
            fn annotation_order_invariant(seed in 0u64..1000) {
                let n = 10;
                let mut rng = seeded(seed);
                let mut m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                m = (&m + m.transpose()) * 0.5;
                let s = SimilarityMatrix::new(m).unwrap();
                let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
                let ann = EvalAnnotations::from_labels(&labels, None, 0);
                let mut shuffled = ann.clone();
                for q in shuffled.queries.values_mut() {
                    q.pos.reverse();
                    q.neg.rotate_left(1);
                }
                let a = evaluate_retrieval(&s, &ann).unwrap();
                let b = evaluate_retrieval(&s, &shuffled).unwrap();
                prop_assert!((a.mean_auc - b.mean_auc).abs() < 1e-15);
            }
        }
    }
}
