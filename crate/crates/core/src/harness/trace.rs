//! Greedy merge traces of single records and their agreement with planted
//! trees.

use std::collections::BTreeSet;

use rand::Rng;

use crate::data::{MergeTree, RegionFeatureRecord};
use crate::embedder::Model;
use crate::error::Result;
use crate::hierarchy::{upper_tri_pairs, Branch, HierarchyTrace, TraceEntry};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceReport {
    pub trace: HierarchyTrace,
    pub embedding: Tensor,
    /// Fraction of merges reproducing a ground-truth subtree, when the
    /// record has one.
    pub fidelity: Option<f64>,
}

impl TraceReport {
    /// Trace lines, each followed by a `# soft` line with the selection
    /// distribution of that level.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.trace.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.level, e.branch, e.a_id, e.b_id, e.new_id
            ));
            if let Some(soft) = &e.soft {
                let s: Vec<String> = soft.iter().map(|p| format!("{p:.6}")).collect();
                out.push_str(&format!("# soft {}\n", s.join(" ")));
            }
        }
        if let Some(f) = self.fidelity {
            out.push_str(&format!("# fidelity {f:.4}\n"));
        }
        out
    }
}

/// Subtree leaf sets with at least two leaves.
pub fn subtree_sets(tree: &MergeTree) -> BTreeSet<BTreeSet<u32>> {
    tree.to_trace(Branch::Photo)
        .merge_leaf_sets(tree.n_leaves)
        .into_iter()
        .collect()
}

/// Fraction of the merges of `trace` whose leaf set is a subtree of
/// `tree`. A record with a single region has nothing to merge and scores 1.
pub fn fidelity(trace: &HierarchyTrace, tree: &MergeTree) -> f64 {
    let truth = subtree_sets(tree);
    let sets = trace.merge_leaf_sets(tree.n_leaves);
    if sets.is_empty() {
        return 1.0;
    }
    sets.iter().filter(|s| truth.contains(*s)).count() as f64 / sets.len() as f64
}

pub fn trace_record(model: &Model, record: &RegionFeatureRecord) -> Result<TraceReport> {
    let (embedding, trace) = model.embed_single_value(&record.regions, record.modality, None)?;
    let fidelity = record.tree.as_ref().map(|t| fidelity(&trace, t));
    Ok(TraceReport {
        trace,
        embedding,
        fidelity,
    })
}

/// Merge trace of the policy that picks a uniformly random pair at every
/// level, using the same id and placement rules as the model.
pub fn random_trace<R: Rng>(n_leaves: usize, branch: Branch, rng: &mut R) -> HierarchyTrace {
    let mut ids: Vec<u32> = (0..n_leaves as u32).collect();
    let mut next = n_leaves as u32;
    let mut trace = HierarchyTrace::new();
    let mut level = 0;
    while ids.len() > 1 {
        let pairs = upper_tri_pairs(ids.len());
        let (a, b) = pairs[rng.gen_range(0..pairs.len())];
        trace.push(TraceEntry {
            level,
            branch,
            a_id: ids[a],
            b_id: ids[b],
            new_id: next,
            soft: None,
        });
        ids[a] = next;
        ids.remove(b);
        next += 1;
        level += 1;
    }
    trace
}

/// Expected fidelity of the uniform random policy, by enumerating every
/// merge sequence. The count grows as prod C(k,2), so keep `n_leaves`
/// small (6 leaves is 2700 sequences).
pub fn random_policy_fidelity(tree: &MergeTree) -> f64 {
    fn walk(groups: &[BTreeSet<u32>], truth: &BTreeSet<BTreeSet<u32>>, hits: usize, total: usize) -> f64 {
        if groups.len() == 1 {
            return if total == 0 { 1.0 } else { hits as f64 / total as f64 };
        }
        let pairs = upper_tri_pairs(groups.len());
        let mut sum = 0.0;
        for &(a, b) in &pairs {
            let mut next = groups.to_vec();
            let merged: BTreeSet<u32> = next[a].union(&next[b]).copied().collect();
            let hit = truth.contains(&merged) as usize;
            next[a] = merged;
            next.remove(b);
            sum += walk(&next, truth, hits + hit, total + 1);
        }
        sum / pairs.len() as f64
    }
    let truth = subtree_sets(tree);
    let groups: Vec<BTreeSet<u32>> = (0..tree.n_leaves as u32).map(|i| BTreeSet::from([i])).collect();
    walk(&groups, &truth, 0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn caterpillar(n: usize) -> MergeTree {
        // ((((0,1),2),3),...)
        let mut merges = vec![(0, 1, n as u32)];
        for k in 2..n as u32 {
            merges.push((n as u32 + k - 2, k, n as u32 + k - 1));
        }
        MergeTree {
            n_leaves: n,
            merges,
        }
    }

    #[test]
    fn own_trace_scores_one() {
        let t = caterpillar(5);
        assert_eq!(fidelity(&t.to_trace(Branch::Photo), &t), 1.0);
    }

    #[test]
    fn three_leaf_baseline_by_hand() {
        // truth {0,1}: the first merge hits with probability 1/3, the final
        // merge always hits (the root), so the mean is (1/3 + 1) / 2.
        let t = caterpillar(3);
        let expected = (1.0 / 3.0 + 1.0) / 2.0;
        assert!((random_policy_fidelity(&t) - expected).abs() < 1e-15);
    }

    #[test]
    fn random_policy_matches_enumeration() {
        let t = MergeTree {
            n_leaves: 6,
            merges: vec![(0, 1, 6), (2, 3, 7), (6, 7, 8), (4, 5, 9), (8, 9, 10)],
        };
        let exact = random_policy_fidelity(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| fidelity(&random_trace(6, Branch::Photo, &mut rng), &t))
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - exact).abs() < 4.0 * (var / n as f64).sqrt(), "{mean} vs {exact}");
    }

    #[test]
    fn random_traces_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..9 {
            let t = random_trace(n, Branch::Sketch, &mut rng);
            t.validate(n, true).unwrap();
        }
    }
}
