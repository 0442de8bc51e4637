use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::labels::ClickSample;

pub const PRICE_BUCKETS: usize = 16;
pub const DISCOUNT_BUCKETS: usize = 16;

/// String id → dense row index. Row 0 is reserved for out-of-vocabulary ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i + 1)).collect();
        Self { ids, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.ids
    }
}

impl Vocab {
    pub fn insert(&mut self, id: &str) {
        if !self.index.contains_key(id) {
            self.ids.push(id.to_string());
            self.index.insert(id.to_string(), self.ids.len());
        }
    }

    pub fn get(&self, id: &str) -> usize {
        self.index.get(id).copied().unwrap_or(0)
    }

    /// Number of rows an embedding table needs, including the OOV row.
    pub fn rows(&self) -> usize {
        self.ids.len() + 1
    }
}

/// Model-ready view of a [`ClickSample`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub user: usize,
    pub item: usize,
    pub category: usize,
    pub price_bucket: usize,
    pub discount_bucket: usize,
    pub discount: f64,
    pub dense: Vec<f64>,
    pub atc_seq: Vec<usize>,
    pub pay_seq: Vec<usize>,
    pub atc: f64,
    pub y_all: f64,
    pub y_delay: f64,
}

/// Vocabularies and bucket edges fitted on training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub users: Vocab,
    pub items: Vocab,
    pub categories: Vocab,
    /// Quantile cut points for the exposure price.
    pub price_edges: Vec<f64>,
    pub dense_dim: usize,
}

impl FeatureEncoder {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a ClickSample>) -> Self {
        let mut users = Vocab::default();
        let mut items = Vocab::default();
        let mut categories = Vocab::default();
        let mut prices = Vec::new();
        let mut dense_dim = 0;
        for s in samples {
            users.insert(&s.features.user_id);
            items.insert(&s.features.item_id);
            categories.insert(&s.features.category_id);
            for id in s.atc_seq.iter().chain(&s.pay_seq) {
                items.insert(id);
            }
            prices.push(s.features.price);
            dense_dim = dense_dim.max(s.features.dense.len());
        }
        prices.sort_by(f64::total_cmp);
        let price_edges = if prices.is_empty() {
            vec![0.0; PRICE_BUCKETS - 1]
        } else {
            (1..PRICE_BUCKETS)
                .map(|k| prices[(k * prices.len() / PRICE_BUCKETS).min(prices.len() - 1)])
                .collect()
        };
        Self {
            users,
            items,
            categories,
            price_edges,
            dense_dim,
        }
    }

    pub fn price_bucket(&self, price: f64) -> usize {
        self.price_edges.partition_point(|&e| e < price)
    }

    pub fn discount_bucket(discount: f64) -> usize {
        ((discount.clamp(0.0, 1.0) * DISCOUNT_BUCKETS as f64) as usize).min(DISCOUNT_BUCKETS - 1)
    }

    pub fn encode(&self, s: &ClickSample) -> EncodedSample {
        let f = &s.features;
        let mut dense = f.dense.clone();
        dense.resize(self.dense_dim, 0.0);
        EncodedSample {
            user: self.users.get(&f.user_id),
            item: self.items.get(&f.item_id),
            category: self.categories.get(&f.category_id),
            price_bucket: self.price_bucket(f.price),
            discount_bucket: Self::discount_bucket(f.discount),
            discount: f.discount,
            dense,
            atc_seq: s.atc_seq.iter().map(|i| self.items.get(i)).collect(),
            pay_seq: s.pay_seq.iter().map(|i| self.items.get(i)).collect(),
            atc: f64::from(u8::from(s.atc)),
            y_all: f64::from(u8::from(s.y_all)),
            y_delay: f64::from(u8::from(s.y_delay)),
        }
    }

    pub fn encode_all(&self, samples: &[ClickSample]) -> Vec<EncodedSample> {
        samples.iter().map(|s| self.encode(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserves_oov_row() {
        let mut v = Vocab::default();
        v.insert("a");
        v.insert("b");
        v.insert("a");
        assert_eq!((v.get("a"), v.get("b"), v.get("zzz")), (1, 2, 0));
        assert_eq!(v.rows(), 3);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn discount_buckets_cover_range() {
        assert_eq!(FeatureEncoder::discount_bucket(0.0), 0);
        assert_eq!(FeatureEncoder::discount_bucket(1.0), DISCOUNT_BUCKETS - 1);
        assert_eq!(FeatureEncoder::discount_bucket(-3.0), 0);
        assert_eq!(FeatureEncoder::discount_bucket(0.5), DISCOUNT_BUCKETS / 2);
    }
}
