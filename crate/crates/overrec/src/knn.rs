//! Neighbour selection over a Gram row and next-item score maps.
//!
//! Two prediction rules are provided: the kernel-weighted vote over the
//! neighbours' held-out target items, and the session-style rule that
//! credits every item of a neighbouring sequence with that neighbour's
//! similarity. Cosine similarity over binary item sets is the baseline
//! sequence similarity.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashMap;

use crate::rntk::ItemSequence;

/// One corpus sequence and the item its user interacted with next.
///
/// The target is not required to be absent from the sequence itself.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub sequence: ItemSequence,
    pub target: u32,
}

/// Sparse next-item scores; absent items implicitly score zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreMap {
    scores: HashMap<u32, f64>,
}

impl ScoreMap {
    pub fn get(&self, item: u32) -> f64 {
        self.scores.get(&item).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, item: u32, weight: f64) {
        *self.scores.entry(item).or_insert(0.0) += weight;
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.scores.iter().map(|(&i, &s)| (i, s))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn retain_nonzero(&mut self) {
        self.scores.retain(|_, s| *s != 0.0);
    }
}

#[derive(PartialEq)]
struct Neighbor {
    value: f64,
    index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        // "Greater" means a better neighbour: larger value, ties broken
        // towards the smaller corpus index.
        self.value
            .total_cmp(&other.value)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `k` largest row entries as `(corpus index, value)`, best first.
///
/// Ties on the value go to the smaller corpus index; fewer than `k`
/// entries are returned when the corpus is smaller.
pub fn top_k_neighbors(row: &[f64], k: usize) -> Vec<(usize, f64)> {
    top_k_neighbors_where(row, k, |_| true)
}

/// [`top_k_neighbors`] restricted to corpus indices accepted by `keep`.
pub fn top_k_neighbors_where(
    row: &[f64],
    k: usize,
    mut keep: impl FnMut(usize) -> bool,
) -> Vec<(usize, f64)> {
    if k == 0 {
        return Vec::new();
    }
    // Min-heap of the current best k; the root is the worst of them.
    let mut heap: BinaryHeap<std::cmp::Reverse<Neighbor>> = BinaryHeap::with_capacity(k + 1);
    for (index, &value) in row.iter().enumerate() {
        if !keep(index) {
            continue;
        }
        let cand = Neighbor { value, index };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(cand));
        } else if cand > heap.peek().expect("heap non-empty").0 {
            heap.pop();
            heap.push(std::cmp::Reverse(cand));
        }
    }
    // Ascending order of `Reverse` is descending neighbour quality, so the
    // sorted heap is already best-first.
    heap.into_sorted_vec()
        .into_iter()
        .map(|std::cmp::Reverse(n)| (n.index, n.value))
        .collect()
}

/// Kernel-weighted vote over the neighbours' target items.
///
/// Scores are the per-target kernel mass divided by the total mass, so
/// they sum to one. A zero total falls back to uniform mass `1/k` on each
/// neighbour's target, keeping the operation total.
pub fn predict_weighted_y(neighbors: &[(usize, f64)], corpus: &[CorpusEntry]) -> ScoreMap {
    let mut map = ScoreMap::default();
    if neighbors.is_empty() {
        return map;
    }
    debug_assert!(neighbors.iter().all(|(_, v)| *v >= 0.0));
    let total: f64 = neighbors.iter().map(|(_, v)| v).sum();
    if total > 0.0 {
        for &(idx, value) in neighbors {
            map.add(corpus[idx].target, value / total);
        }
        map.retain_nonzero();
    } else {
        let share = 1.0 / neighbors.len() as f64;
        for &(idx, _) in neighbors {
            map.add(corpus[idx].target, share);
        }
    }
    map
}

/// Session-style vote: every distinct item of a neighbouring sequence
/// receives that neighbour's similarity. `include_target` also credits the
/// neighbour's target item; only the induced ranking matters, so the
/// scores are left unnormalised.
pub fn predict_equal_item(
    neighbors: &[(usize, f64)],
    corpus: &[CorpusEntry],
    include_target: bool,
) -> ScoreMap {
    let mut map = ScoreMap::default();
    let mut items = Vec::new();
    for &(idx, value) in neighbors {
        if value == 0.0 {
            continue;
        }
        let entry = &corpus[idx];
        items.clear();
        items.extend_from_slice(&entry.sequence.items);
        if include_target {
            items.push(entry.target);
        }
        items.sort_unstable();
        items.dedup();
        for &item in &items {
            map.add(item, value);
        }
    }
    map
}

/// Cosine similarity of the binary item-set vectors of two sequences.
pub fn sknn_similarity(x: &ItemSequence, y: &ItemSequence) -> f64 {
    let set = |s: &ItemSequence| -> Vec<u32> {
        let mut v = s.items.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    cosine_over_item_sets(&set(x), &set(y))
}

/// Cosine over pre-sorted, deduplicated item sets.
pub(crate) fn cosine_over_item_sets(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut shared = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    shared as f64 / ((a.len() * b.len()) as f64).sqrt()
}
