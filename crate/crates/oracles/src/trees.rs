//! Brute-force span eligibility over parent-array trees.
//!
//! A token range [p, p+k] is eligible when its node set induces a connected
//! substructure, at most one member has its parent outside the set, and at
//! most one member has a child outside the set. The root's parent and leaf
//! children are imaginary and never count as outside nodes here; the root
//! being in the set simply contributes no outside-parent edge, which the
//! connectivity check compensates for.

use std::collections::HashSet;

/// `parent[i]` is the parent index of node `i`, or -1 for the root.
/// Node order is token order.
pub fn oracle_eligibility(parent: &[i64], p: usize, k: usize) -> bool {
    let n = parent.len();
    if n == 0 || p + k >= n {
        return false;
    }
    let set: HashSet<usize> = (p..=p + k).collect();

    let mut outside_parent = 0usize;
    for &v in &set {
        let pa = parent[v];
        if pa >= 0 && !set.contains(&(pa as usize)) {
            outside_parent += 1;
        }
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &pa) in parent.iter().enumerate() {
        if pa >= 0 {
            children[pa as usize].push(i);
        }
    }
    let mut outside_child = 0usize;
    for &v in &set {
        if children[v].iter().any(|c| !set.contains(c)) {
            outside_child += 1;
        }
    }

    // Connectivity of the induced subgraph, treating parent edges as
    // undirected. BFS from the leftmost node.
    let mut seen = HashSet::new();
    let mut queue = vec![p];
    seen.insert(p);
    while let Some(v) = queue.pop() {
        let pa = parent[v];
        if pa >= 0 {
            let pa = pa as usize;
            if set.contains(&pa) && seen.insert(pa) {
                queue.push(pa);
            }
        }
        for &c in &children[v] {
            if set.contains(&c) && seen.insert(c) {
                queue.push(c);
            }
        }
    }
    let connected = seen.len() == set.len();

    connected && outside_parent <= 1 && outside_child <= 1
}
