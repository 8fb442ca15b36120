//! Minimal learned item embeddings for soft search.
//!
//! Items that co-occur in a user's same-day activity are pulled together by
//! a skip-gram-style logistic objective with uniform negative sampling. This
//! is deliberately small: just enough signal for embedding-relevance
//! retrieval at desk scale.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BehaviorEvent, ItemId};

/// Item id to dense vector map with a fixed dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<ItemId, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, vectors: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, item: ItemId, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "embedding dimension mismatch");
        self.vectors.insert(item, vector);
    }

    pub fn get(&self, item: ItemId) -> Option<&[f64]> {
        self.vectors.get(&item).map(|v| v.as_slice())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Learn item embeddings from same-(user, day) co-occurrence. Deterministic
/// for a fixed seed.
pub fn learn_item_embeddings(
    events: &[BehaviorEvent],
    dim: usize,
    epochs: usize,
    seed: u64,
) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut vocab: Vec<ItemId> = events.iter().map(|e| e.item_id).collect();
    vocab.sort();
    vocab.dedup();
    let mut table = EmbeddingTable::new(dim);
    if vocab.is_empty() {
        return table;
    }
    let bound = 0.5 / (dim as f64).sqrt();
    let mut vecs: BTreeMap<ItemId, Vec<f64>> = vocab
        .iter()
        .map(|&id| (id, (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect()))
        .collect();

    // Same-day item sequences per user, in time order.
    let mut groups: BTreeMap<(crate::data::UserId, i64), Vec<ItemId>> = BTreeMap::new();
    for e in events {
        groups.entry((e.user_id, e.date_key())).or_default().push(e.item_id);
    }

    let lr = 0.05;
    let negatives = 2;
    for _ in 0..epochs.max(1) {
        for items in groups.values() {
            for pair in items.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if a == b {
                    continue;
                }
                sgd_pair(&mut vecs, a, b, 1.0, lr);
                for _ in 0..negatives {
                    let n = vocab[rng.gen_range(0..vocab.len())];
                    if n != a {
                        sgd_pair(&mut vecs, a, n, 0.0, lr);
                    }
                }
            }
        }
    }

    for (id, v) in vecs {
        table.insert(id, v);
    }
    table
}

fn sgd_pair(vecs: &mut BTreeMap<ItemId, Vec<f64>>, a: ItemId, b: ItemId, label: f64, lr: f64) {
    let va = vecs[&a].clone();
    let vb = vecs[&b].clone();
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    let g = sigmoid(dot) - label;
    {
        let ea = vecs.get_mut(&a).unwrap();
        for (x, &y) in ea.iter_mut().zip(&vb) {
            *x -= lr * g * y;
        }
    }
    {
        let eb = vecs.get_mut(&b).unwrap();
        for (x, &y) in eb.iter_mut().zip(&va) {
            *x -= lr * g * y;
        }
    }
}
