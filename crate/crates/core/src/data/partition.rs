use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::labels::ClickSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub daily_train: Vec<ClickSample>,
    pub prepromo_train: Vec<ClickSample>,
    pub prepromo_eval: Vec<ClickSample>,
}

/// Number of training samples for `n` samples at `ratio`, rounded to nearest.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).min(n)
}

/// Seeded shuffle of `items`; the first `ratio` fraction is returned first.
pub fn partition_items<T>(items: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_count(items.len(), ratio);

    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("index visited once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let eval = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok((train, eval))
}

/// Seeded shuffle of the pre-promotion samples, then the first `ratio`
/// fraction becomes training data. Daily samples pass through unchanged.
pub fn partition_dataset(
    daily: Vec<ClickSample>,
    prepromo: Vec<ClickSample>,
    split_ratio: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if prepromo.is_empty() {
        return Err(Error::data("no pre-promotion samples in calendar window"));
    }
    let (prepromo_train, prepromo_eval) = partition_items(prepromo, split_ratio, seed)?;
    Ok(DatasetSplit {
        daily_train: daily,
        prepromo_train,
        prepromo_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::labels::Features;

    fn sample(i: usize) -> ClickSample {
        ClickSample {
            features: Features {
                user_id: format!("u{i}"),
                item_id: "i".into(),
                category_id: "c".into(),
                price: 0.0,
                discount: 0.0,
                click_day: 0,
                dense: vec![],
            },
            click_ts: i as i64 + 1,
            atc: false,
            y_all: false,
            y_delay: false,
            atc_seq: vec![],
            pay_seq: vec![],
        }
    }

    #[test]
    fn eight_two_split() {
        let s = partition_dataset(vec![], (0..10).map(sample).collect(), 0.8, 1).unwrap();
        assert_eq!((s.prepromo_train.len(), s.prepromo_eval.len()), (8, 2));
    }

    #[test]
    fn deterministic() {
        let a = partition_dataset(vec![], (0..50).map(sample).collect(), 0.8, 9).unwrap();
        let b = partition_dataset(vec![], (0..50).map(sample).collect(), 0.8, 9).unwrap();
        assert_eq!(a.prepromo_train, b.prepromo_train);
        assert_eq!(a.prepromo_eval, b.prepromo_eval);
    }

    #[test]
    fn empty_prepromo_is_error() {
        let err = partition_dataset(vec![sample(0)], vec![], 0.8, 1).unwrap_err();
        assert!(err.to_string().contains("no pre-promotion samples in calendar window"));
    }

    #[test]
    fn bad_ratio() {
        assert!(partition_dataset(vec![], vec![sample(0)], 1.0, 1).is_err());
        assert!(partition_dataset(vec![], vec![sample(0)], 0.0, 1).is_err());
    }
}
