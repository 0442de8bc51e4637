//! Synthetic pre-promotion worlds with known propensities and outcome laws.
//!
//! Per click: `x ~ N(0, I_d)`, `disc ~ U(0, 1)`, `p_a = σ(w_a·x)`,
//! `A ~ Bernoulli(p_a)`, `q_dir = scale·σ(w_dir·x + b_dir)` and
//! `q_del = scale·σ(w_del·x + tau·A + gamma·disc + b_del)` (zero in daily
//! mode). The outcome is drawn categorically: direct with `q_dir`, delayed
//! with `q_del`, none otherwise. Because `scale <= 0.5`, `q_dir + q_del < 1`.
//!
//! The first `user_dims` coordinates of `x` are a per-user profile shared by
//! all of that user's clicks; the rest are drawn per click. Marginally every
//! `x` is still standard normal. `w_del` shares support with `w_a` (so ATC is
//! confounded with the delayed outcome) and with `w_dir`.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::{ActionEvent, ActionKind, ClickSample, CsvSchema, Features, SECONDS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub d: usize,
    pub tau: f64,
    pub scale: f64,
    pub gamma: f64,
    /// Weight of `w_a` inside `w_del`.
    pub atc_overlap: f64,
    /// Weight of `w_dir` inside `w_del`.
    pub direct_overlap: f64,
    pub user_dims: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub daily_direct_rate: f64,
    pub prepromo_direct_rate: f64,
    pub delayed_rate: f64,
    pub max_seq_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d: 16,
            tau: 2.0,
            scale: 0.3,
            gamma: 1.5,
            atc_overlap: 0.5,
            direct_overlap: 0.5,
            user_dims: 4,
            n_users: 2000,
            n_items: 1000,
            n_categories: 20,
            daily_direct_rate: 0.02,
            prepromo_direct_rate: 0.007,
            delayed_rate: 0.025,
            max_seq_len: crate::data::DEFAULT_MAX_SEQ_LEN,
        }
    }
}

impl WorldConfig {
    pub fn new(d: usize, tau: f64, scale: f64) -> Self {
        Self {
            d,
            tau,
            scale,
            user_dims: (d / 4).max(1).min(d),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::config(format!("world dimension d = {} must be >= 2", self.d)));
        }
        if !(self.scale > 0.0 && self.scale <= 0.5) {
            return Err(Error::config(format!("world scale {} not in (0, 0.5]", self.scale)));
        }
        if self.user_dims > self.d {
            return Err(Error::config("user_dims exceeds d"));
        }
        if self.atc_overlap.powi(2) + self.direct_overlap.powi(2) > 1.0 {
            return Err(Error::config("atc_overlap² + direct_overlap² must be <= 1"));
        }
        if self.n_users == 0 || self.n_items == 0 || self.n_categories == 0 {
            return Err(Error::config("world needs at least one user, item and category"));
        }
        for (name, r) in [
            ("daily_direct_rate", self.daily_direct_rate),
            ("prepromo_direct_rate", self.prepromo_direct_rate),
            ("delayed_rate", self.delayed_rate),
        ] {
            if !(r > 0.0 && r < self.scale) {
                return Err(Error::config(format!("{name} {r} must lie in (0, scale)")));
            }
        }
        Ok(())
    }
}

/// Ground-truth generator coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub d: usize,
    pub w_a: Vec<f64>,
    pub w_dir: Vec<f64>,
    /// Direct-conversion bias in daily mode.
    pub b_dir: f64,
    /// Direct-conversion bias in pre-promotion mode (the pre-promotion CVR dip).
    pub b_dir_prepromo: f64,
    pub w_del: Vec<f64>,
    pub b_del: f64,
    pub tau: f64,
    pub gamma: f64,
    pub scale: f64,
    pub user_dims: usize,
    pub user_profiles: Vec<Vec<f64>>,
    pub item_prices: Vec<f64>,
    pub n_categories: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Daily,
    Prepromo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub p_a_true: f64,
    pub mu1_true: f64,
    pub mu0_true: f64,
    pub q_dir_true: f64,
    /// `q_del` at the realised treatment.
    pub q_del_true: f64,
    pub ice_true: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample: ClickSample,
    pub truth: GroundTruth,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Largest-to-smallest bisection of a bias so that `rate(b)` hits `target`.
fn solve_bias(target: f64, rate: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

const CALIBRATION_DRAWS: usize = 20_000;

/// Draws a world. Biases are calibrated on a fixed Monte-Carlo sample so the
/// configured base rates are hit approximately.
pub fn sample_world(seed: u64, cfg: &WorldConfig) -> Result<WorldParams> {
    cfg.validate()?;
    let d = cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv = 1.0 / (d as f64).sqrt();
    let w_a = normal_vec(&mut rng, d, inv);
    let w_dir = normal_vec(&mut rng, d, inv);
    let own = normal_vec(&mut rng, d, inv);
    let rest = (1.0 - cfg.atc_overlap.powi(2) - cfg.direct_overlap.powi(2)).sqrt();
    let w_del: Vec<f64> = (0..d)
        .map(|k| cfg.atc_overlap * w_a[k] + cfg.direct_overlap * w_dir[k] + rest * own[k])
        .collect();

    let user_profiles = (0..cfg.n_users)
        .map(|_| normal_vec(&mut rng, cfg.user_dims, 1.0))
        .collect();
    let price_dist = LogNormal::<f64>::new(3.0, 1.0).expect("valid lognormal");
    let item_prices = (0..cfg.n_items)
        .map(|_| (price_dist.sample(&mut rng) * 100.0).round() / 100.0)
        .collect();

    let mut cal = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, "world-calibration"));
    let draws: Vec<(Vec<f64>, f64)> = (0..CALIBRATION_DRAWS)
        .map(|_| (normal_vec(&mut cal, d, 1.0), cal.random::<f64>()))
        .collect();
    let mean = |f: &dyn Fn(&[f64], f64) -> f64| -> f64 {
        draws.iter().map(|(x, u)| f(x, *u)).sum::<f64>() / draws.len() as f64
    };
    let scale = cfg.scale;
    let b_dir = solve_bias(cfg.daily_direct_rate, |b| {
        mean(&|x, _| scale * sigmoid(dot(&w_dir, x) + b))
    });
    let b_dir_prepromo = solve_bias(cfg.prepromo_direct_rate, |b| {
        mean(&|x, _| scale * sigmoid(dot(&w_dir, x) + b))
    });
    let b_del = solve_bias(cfg.delayed_rate, |b| {
        mean(&|x, u| {
            let pa = sigmoid(dot(&w_a, x));
            let base = dot(&w_del, x) + cfg.gamma * u + b;
            scale * (pa * sigmoid(base + cfg.tau) + (1.0 - pa) * sigmoid(base))
        })
    });

    Ok(WorldParams {
        d,
        w_a,
        w_dir,
        b_dir,
        b_dir_prepromo,
        w_del,
        b_del,
        tau: cfg.tau,
        gamma: cfg.gamma,
        scale,
        user_dims: cfg.user_dims,
        user_profiles,
        item_prices,
        n_categories: cfg.n_categories,
        max_seq_len: cfg.max_seq_len,
    })
}

impl WorldParams {
    pub fn propensity(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.w_a, x))
    }

    pub fn q_dir(&self, x: &[f64], mode: Mode) -> f64 {
        let b = match mode {
            Mode::Daily => self.b_dir,
            Mode::Prepromo => self.b_dir_prepromo,
        };
        self.scale * sigmoid(dot(&self.w_dir, x) + b)
    }

    /// Delayed-conversion probability under treatment `a` (pre-promotion law).
    pub fn q_del(&self, x: &[f64], a: f64, discount: f64) -> f64 {
        self.scale * sigmoid(dot(&self.w_del, x) + self.tau * a + self.gamma * discount + self.b_del)
    }

    pub fn ice(&self, x: &[f64], discount: f64) -> f64 {
        self.q_del(x, 1.0, discount) - self.q_del(x, 0.0, discount)
    }

    /// Ground truth for one click given its features and realised treatment.
    pub fn truth(&self, x: &[f64], discount: f64, atc: bool, mode: Mode) -> GroundTruth {
        let mu1 = self.q_del(x, 1.0, discount);
        let mu0 = self.q_del(x, 0.0, discount);
        let q_del = match mode {
            Mode::Daily => 0.0,
            Mode::Prepromo if atc => mu1,
            Mode::Prepromo => mu0,
        };
        GroundTruth {
            p_a_true: self.propensity(x),
            mu1_true: mu1,
            mu0_true: mu0,
            q_dir_true: self.q_dir(x, mode),
            q_del_true: q_del,
            ice_true: mu1 - mu0,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_profiles.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_prices.len()
    }
}

/// First day index of each synthetic phase; pre-promotion follows daily data
/// and the promotion day follows pre-promotion.
pub const SYNTH_DAILY_START: i64 = 17_000;
pub const SYNTH_DAILY_DAYS: i64 = 30;
pub const SYNTH_PREPROMO_START: i64 = SYNTH_DAILY_START + SYNTH_DAILY_DAYS;
pub const SYNTH_PREPROMO_DAYS: i64 = 3;
pub const SYNTH_PROMO_DAY: i64 = SYNTH_PREPROMO_START + SYNTH_PREPROMO_DAYS;

/// Generates `n` clicks in timestamp order.
pub fn generate_dataset(world: &WorldParams, n: usize, mode: Mode, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::config("synthetic dataset size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (start, days) = match mode {
        Mode::Daily => (SYNTH_DAILY_START, SYNTH_DAILY_DAYS),
        Mode::Prepromo => (SYNTH_PREPROMO_START, SYNTH_PREPROMO_DAYS),
    };
    let span = days * SECONDS_PER_DAY;
    let mut atc_hist: HashMap<usize, Vec<String>> = HashMap::new();
    let mut pay_hist: HashMap<usize, Vec<String>> = HashMap::new();
    let recent = |h: Option<&Vec<String>>| -> Vec<String> {
        h.map(|v| v.iter().rev().take(world.max_seq_len).cloned().collect())
            .unwrap_or_default()
    };

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let user = rng.random_range(0..world.n_users());
        let item = rng.random_range(0..world.n_items());
        let mut x = world.user_profiles[user].clone();
        x.extend(normal_vec(&mut rng, world.d - world.user_dims, 1.0));
        let discount: f64 = rng.random();
        let atc = rng.random::<f64>() < world.propensity(&x);
        let truth = world.truth(&x, discount, atc, mode);
        let u: f64 = rng.random();
        let direct = u < truth.q_dir_true;
        let delayed = !direct && u < truth.q_dir_true + truth.q_del_true;

        // Spread clicks evenly over the phase, keeping generation order = time order.
        let offset = (i as i64 * span) / n as i64;
        let click_ts = start * SECONDS_PER_DAY + offset + 1;
        let item_id = format!("i{item}");
        let sample = ClickSample {
            features: Features {
                user_id: format!("u{user}"),
                item_id: item_id.clone(),
                category_id: format!("c{}", item % world.n_categories),
                price: world.item_prices[item],
                discount,
                click_day: click_ts.div_euclid(SECONDS_PER_DAY),
                dense: x,
            },
            click_ts,
            atc,
            y_all: direct || delayed,
            y_delay: delayed,
            atc_seq: recent(atc_hist.get(&user)),
            pay_seq: recent(pay_hist.get(&user)),
        };
        if atc {
            atc_hist.entry(user).or_default().push(item_id.clone());
        }
        if direct {
            pay_hist.entry(user).or_default().push(item_id);
        }
        out.push(SyntheticSample { sample, truth });
    }
    Ok(out)
}

/// Mean true individual effect.
pub fn true_ate(samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("true_ate of an empty sample set"));
    }
    Ok(samples.iter().map(|s| s.truth.ice_true).sum::<f64>() / samples.len() as f64)
}

/// Raw action log for synthetic clicks: each click, its add-to-cart (same
/// day, one minute later) and its purchase (same day for direct conversions,
/// the promotion day for delayed ones).
pub fn to_events(samples: &[SyntheticSample]) -> Vec<ActionEvent> {
    let promo_ts = SYNTH_PROMO_DAY * SECONDS_PER_DAY;
    let mut events = Vec::with_capacity(samples.len() * 2);
    for (i, s) in samples.iter().enumerate() {
        let f = &s.sample.features;
        let mk = |action, ts| ActionEvent {
            user_id: f.user_id.clone(),
            item_id: f.item_id.clone(),
            category_id: f.category_id.clone(),
            action,
            timestamp: ts,
            price: Some(f.price),
            discount: Some(f.discount),
        };
        let ts = s.sample.click_ts;
        events.push(mk(ActionKind::Click, ts));
        if s.sample.atc {
            events.push(mk(ActionKind::Atc, ts + 60));
        }
        if s.sample.is_direct() {
            events.push(mk(ActionKind::Buy, ts + 120));
        } else if s.sample.y_delay {
            events.push(mk(ActionKind::Buy, promo_ts + 3600 + i as i64 % 3600));
        }
    }
    events.sort_by_key(|e| e.timestamp);
    events
}

/// Column layout used for synthetic event files: the default behaviour-log
/// layout plus price and discount columns.
pub fn event_schema() -> CsvSchema {
    CsvSchema {
        price_col: Some(5),
        discount_col: Some(6),
        ..CsvSchema::default()
    }
}

/// Ground-truth sidecar: `sample_id,p_a_true,mu1_true,mu0_true,ice_true`.
pub fn write_ground_truth(samples: &[SyntheticSample], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sample_id", "p_a_true", "mu1_true", "mu0_true", "ice_true"])?;
    for (i, s) in samples.iter().enumerate() {
        let t = &s.truth;
        w.write_record([
            i.to_string(),
            t.p_a_true.to_string(),
            t.mu1_true.to_string(),
            t.mu0_true.to_string(),
            t.ice_true.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
