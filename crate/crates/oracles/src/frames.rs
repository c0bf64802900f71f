//! Brute-force token clustering by shared context.
//!
//! Two tokens belong together when some pair of sentences is identical
//! except at one position where the two tokens differ; the relation is then
//! closed transitively. Implemented as merge-edge collection plus BFS over
//! a token graph so it stays structurally different from a union-find.

use std::collections::{BTreeMap, BTreeSet};

/// Returns the partition of the corpus vocabulary as sorted clusters in
/// sorted order.
pub fn oracle_frame_closure(sentences: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut vocab: BTreeSet<&str> = BTreeSet::new();
    for s in sentences {
        for t in s {
            vocab.insert(t);
        }
    }

    let mut edges: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (i, a) in sentences.iter().enumerate() {
        for b in sentences.iter().skip(i + 1) {
            if a.len() != b.len() {
                continue;
            }
            let diffs: Vec<usize> = (0..a.len()).filter(|&j| a[j] != b[j]).collect();
            if let [j] = diffs[..] {
                edges.insert((a[j].as_str(), b[j].as_str()));
                edges.insert((b[j].as_str(), a[j].as_str()));
            }
        }
    }

    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for &(u, v) in &edges {
        adj.entry(u).or_default().push(v);
    }

    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut clusters = Vec::new();
    for &start in &vocab {
        if seen.contains(start) {
            continue;
        }
        let mut component = BTreeSet::new();
        let mut queue = vec![start];
        seen.insert(start);
        while let Some(u) = queue.pop() {
            component.insert(u);
            for &v in adj.get(u).into_iter().flatten() {
                if seen.insert(v) {
                    queue.push(v);
                }
            }
        }
        clusters.push(component.into_iter().map(|t| t.to_string()).collect());
    }
    clusters
}
