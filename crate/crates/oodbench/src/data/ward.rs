//! Ward agglomerative clustering of class prototypes and the in/out
//! root partition derived from the merge tree.
//!
//! The linkage is the variance-increase form on squared Euclidean
//! distances: `D(A, B) = |A||B| / (|A| + |B|) * ||mu_A - mu_B||^2`, which
//! makes the singleton linkage `||a - b||^2 / 2`. Merges are updated with
//! the Lance-Williams recurrence; ties are broken by the lexicographically
//! smallest node-id pair.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// One agglomeration step, children ordered by node id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub cost: f64,
}

/// Stepwise dendrogram. Leaves are node ids `0..leaf_count`; merge `t`
/// creates node id `leaf_count + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTree {
    pub leaf_count: usize,
    pub merges: Vec<Merge>,
}

impl MergeTree {
    pub fn root(&self) -> usize {
        self.leaf_count + self.merges.len() - 1
    }

    /// Leaves under `node` in deterministic traversal order (left child
    /// first, then right).
    pub fn leaves_of(&self, node: usize) -> Vec<usize> {
        let mut leaves = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if n < self.leaf_count {
                leaves.push(n);
            } else {
                let merge = &self.merges[n - self.leaf_count];
                // Right is pushed first so the left subtree is visited first.
                stack.push(merge.right);
                stack.push(merge.left);
            }
        }
        leaves
    }

    pub fn validate(&self) -> Result<()> {
        if self.merges.len() + 1 != self.leaf_count {
            return Err(Error::contract(format!(
                "merge tree with {} leaves must have {} internal nodes, found {}",
                self.leaf_count,
                self.leaf_count - 1,
                self.merges.len()
            )));
        }
        let mut used = vec![false; 2 * self.leaf_count - 1];
        for (t, merge) in self.merges.iter().enumerate() {
            let id = self.leaf_count + t;
            if merge.left >= id || merge.right >= id || merge.left == merge.right {
                return Err(Error::contract("merge references an invalid child"));
            }
            if used[merge.left] || used[merge.right] {
                return Err(Error::contract("merge reuses an already-merged node"));
            }
            used[merge.left] = true;
            used[merge.right] = true;
            if merge.cost < 0.0 || !merge.cost.is_finite() {
                return Err(Error::contract("merge cost must be finite nonnegative"));
            }
        }
        Ok(())
    }
}

/// Builds the Ward merge tree over prototype rows.
pub fn ward_tree(prototypes: &[Vec<f64>]) -> Result<MergeTree> {
    let n = prototypes.len();
    if n < 2 {
        return Err(Error::parameter(
            "ward clustering needs at least two prototypes",
        ));
    }
    let dim = prototypes[0].len();
    for (i, p) in prototypes.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::shape(format!(
                "prototype {i} has dim {}, expected {dim}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("prototype {i} is not finite")));
        }
    }

    let total_nodes = 2 * n - 1;
    // Dense pairwise linkage over node ids; inactive entries are +inf.
    let mut dist = vec![f64::INFINITY; total_nodes * total_nodes];
    let mut size = vec![0usize; total_nodes];
    let mut active = vec![false; total_nodes];
    let index = |a: usize, b: usize| a * total_nodes + b;

    for i in 0..n {
        size[i] = 1;
        active[i] = true;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = prototypes[i]
                .iter()
                .zip(&prototypes[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[index(i, j)] = d / 2.0;
        }
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..(n - 1) {
        let limit = n + step;
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..limit {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..limit {
                if !active[j] {
                    continue;
                }
                let d = dist[index(i, j)];
                // Strict < keeps the first (lexicographically smallest) pair
                // among equal costs.
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (cost, a, b) = best.expect("at least two active clusters remain");
        let new_id = n + step;
        let (sa, sb) = (size[a] as f64, size[b] as f64);

        // Lance-Williams update for the variance-increase linkage.
        for k in 0..limit {
            if !active[k] || k == a || k == b {
                continue;
            }
            let sk = size[k] as f64;
            let dak = dist[index(a.min(k), a.max(k))];
            let dbk = dist[index(b.min(k), b.max(k))];
            let updated = ((sa + sk) * dak + (sb + sk) * dbk - sk * cost) / (sa + sb + sk);
            dist[index(k, new_id)] = updated;
        }
        active[a] = false;
        active[b] = false;
        active[new_id] = true;
        size[new_id] = size[a] + size[b];
        merges.push(Merge {
            left: a,
            right: b,
            cost,
        });
    }

    let tree = MergeTree {
        leaf_count: n,
        merges,
    };
    debug_assert!(tree.validate().is_ok());
    Ok(tree)
}

/// In/out class split derived from a merge tree's root.
#[derive(Clone, Debug)]
pub struct ClassPartition {
    pub in_classes: Vec<usize>,
    pub out_classes: Vec<usize>,
    /// Absent when the partition was loaded from a file rather than built.
    pub tree: Option<MergeTree>,
    in_label_map: HashMap<usize, usize>,
}

impl ClassPartition {
    pub fn from_sets(in_classes: Vec<usize>, out_classes: Vec<usize>, tree: Option<MergeTree>) -> Result<Self> {
        if in_classes.is_empty() || out_classes.is_empty() {
            return Err(Error::data("partition sides must be nonempty"));
        }
        if in_classes.len() != out_classes.len() {
            return Err(Error::data(format!(
                "partition sides must have equal size, got {} vs {}",
                in_classes.len(),
                out_classes.len()
            )));
        }
        let mut in_label_map = HashMap::new();
        for (label, &class) in in_classes.iter().enumerate() {
            if in_label_map.insert(class, label).is_some() {
                return Err(Error::data(format!("duplicate class {class} in partition")));
            }
        }
        if out_classes.iter().any(|c| in_label_map.contains_key(c)) {
            return Err(Error::data("partition sides overlap"));
        }
        Ok(ClassPartition {
            in_classes,
            out_classes,
            tree,
            in_label_map,
        })
    }

    /// Contiguous training label for an in-domain class id.
    pub fn in_label_of(&self, class: usize) -> Option<usize> {
        self.in_label_map.get(&class).copied()
    }

    pub fn num_in_classes(&self) -> usize {
        self.in_classes.len()
    }
}

/// Splits the leaf set at the root: with `L`, `R` the root children's leaf
/// sequences in traversal order and `m = min(|L|, |R|)`, the first `m`
/// leaves of `L` become in-domain and the first `m` of `R` out-domain.
pub fn root_partition(tree: &MergeTree) -> Result<ClassPartition> {
    tree.validate()?;
    let root = &tree.merges[tree.merges.len() - 1];
    let left = tree.leaves_of(root.left);
    let right = tree.leaves_of(root.right);
    let m = left.len().min(right.len());
    let in_classes = left[..m].to_vec();
    let out_classes = right[..m].to_vec();
    ClassPartition::from_sets(in_classes, out_classes, Some(tree.clone()))
}
