use serde::{Deserialize, Serialize};

use crate::autodiff::bce;
use crate::data::EncodedSample;
use crate::error::{Error, Result};

/// Mann–Whitney AUC: the share of (positive, negative) pairs ranked correctly,
/// ties counting one half.
///
/// Computed from exact integer pair counts, so the result is the same
/// floating-point number a full pair enumeration would give.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    let (twice_wins, pairs) = auc_counts(pos, neg)?;
    Ok(twice_wins as f64 / (2 * pairs) as f64)
}

/// `(2·wins + ties, pairs)` over all positive/negative pairs.
pub fn auc_counts(pos: &[f64], neg: &[f64]) -> Result<(u128, u128)> {
    if pos.is_empty() {
        return Err(Error::data("AUC needs at least one positive sample"));
    }
    if neg.is_empty() {
        return Err(Error::data("AUC needs at least one negative sample"));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::data("AUC scores contain NaN"));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        // -0.0 and 0.0 compare equal, as they do pairwise.
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok((twice_wins, pos.len() as u128 * neg.len() as u128))
}

fn check_len(scores: &[f64], samples: &[EncodedSample]) -> Result<()> {
    if scores.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} samples",
            scores.len(),
            samples.len()
        )));
    }
    Ok(())
}

/// Delayed conversions against non-conversions; direct conversions are left out.
pub fn auc_delay(scores: &[f64], samples: &[EncodedSample]) -> Result<f64> {
    check_len(scores, samples)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&s, x) in scores.iter().zip(samples) {
        if x.y_delay == 1.0 {
            pos.push(s);
        } else if x.y_all == 0.0 {
            neg.push(s);
        }
    }
    auc(&pos, &neg).map_err(|e| Error::data(format!("auc_delay: {e}")))
}

/// All conversions (direct and delayed) against non-conversions.
pub fn auc_all(scores: &[f64], samples: &[EncodedSample]) -> Result<f64> {
    check_len(scores, samples)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&s, x) in scores.iter().zip(samples) {
        if x.y_all == 1.0 {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    auc(&pos, &neg).map_err(|e| Error::data(format!("auc_all: {e}")))
}

/// Mean clamped BCE of delay scores against `y_delay`. Direct conversions
/// count as negatives unless `exclude_direct` is set.
pub fn nll_delay(scores: &[f64], samples: &[EncodedSample], exclude_direct: bool) -> Result<f64> {
    check_len(scores, samples)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (&s, x) in scores.iter().zip(samples) {
        if exclude_direct && x.y_all == 1.0 && x.y_delay == 0.0 {
            continue;
        }
        sum += bce(s, x.y_delay);
        n += 1;
    }
    if n == 0 {
        return Err(Error::data("nll_delay over an empty sample set"));
    }
    Ok(sum / n as f64)
}

/// Closed-form NLL of the constant predictor `r` on a set with base rate `r`.
pub fn constant_rate_nll(r: f64) -> f64 {
    if r <= 0.0 || r >= 1.0 {
        return 0.0;
    }
    -(r * r.ln() + (1.0 - r) * (1.0 - r).ln())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub samples: usize,
    pub delayed: usize,
    pub direct: usize,
    pub non_conversions: usize,
}

impl ClassCounts {
    pub fn of(samples: &[EncodedSample]) -> Self {
        let mut c = Self {
            samples: samples.len(),
            ..Default::default()
        };
        for s in samples {
            match (s.y_all == 1.0, s.y_delay == 1.0) {
                (true, true) => c.delayed += 1,
                (true, false) => c.direct += 1,
                _ => c.non_conversions += 1,
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(y_all: f64, y_delay: f64) -> EncodedSample {
        EncodedSample {
            user: 0,
            item: 0,
            category: 0,
            price_bucket: 0,
            discount_bucket: 0,
            discount: 0.0,
            dense: vec![],
            atc_seq: vec![],
            pay_seq: vec![],
            atc: 0.0,
            y_all,
            y_delay,
        }
    }

    #[test]
    fn small_cases() {
        assert_eq!(auc(&[0.9], &[0.1, 0.8]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.3], &[0.3]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert_eq!(auc(&[0.0], &[-0.0]).unwrap(), 0.5);
    }

    #[test]
    fn empty_class_named() {
        assert!(auc(&[], &[0.1]).unwrap_err().to_string().contains("positive"));
        assert!(auc(&[0.1], &[]).unwrap_err().to_string().contains("negative"));
        assert!(auc(&[f64::NAN], &[0.1]).is_err());
    }

    #[test]
    fn delay_auc_skips_direct() {
        let samples = [labeled(1.0, 1.0), labeled(1.0, 0.0), labeled(0.0, 0.0)];
        assert_eq!(auc_delay(&[0.8, 0.9, 0.1], &samples).unwrap(), 1.0);
        assert_eq!(auc_all(&[0.8, 0.9, 0.1], &samples).unwrap(), 1.0);
        assert!(auc_delay(&[0.8, 0.9], &samples).is_err());
    }

    #[test]
    fn nll_cases() {
        let samples = [labeled(1.0, 1.0), labeled(1.0, 0.0), labeled(0.0, 0.0), labeled(0.0, 0.0)];
        let half = nll_delay(&[0.5; 4], &samples, false).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        let r = 0.25;
        let v = nll_delay(&[r; 4], &samples, false).unwrap();
        assert!((v - constant_rate_nll(r)).abs() < 1e-12);
        let excl = nll_delay(&[r; 4], &samples, true).unwrap();
        assert!((excl - (bce(r, 1.0) + 2.0 * bce(r, 0.0)) / 3.0).abs() < 1e-15);
        assert!(nll_delay(&[], &[], false).is_err());
    }

    #[test]
    fn counts() {
        let samples = [labeled(1.0, 1.0), labeled(1.0, 0.0), labeled(0.0, 0.0)];
        let c = ClassCounts::of(&samples);
        assert_eq!((c.samples, c.delayed, c.direct, c.non_conversions), (3, 1, 1, 1));
    }
}
