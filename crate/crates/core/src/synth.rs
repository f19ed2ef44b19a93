//! Planted-partition synthetic click logs with class-labelled query texts.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use qgraph_numcore::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clickgraph::ClickRecord;
use crate::downstream::{write_labeled_tsv, write_pairs_tsv, LabeledQuery, QueryPair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_queries: usize,
    pub n_classes: usize,
    /// Mean query length in tokens; lengths are uniform within ±2.
    pub tokens_per_query: usize,
    /// Distinct topic words owned by each class.
    pub topic_vocab: usize,
    /// Shared noise words.
    pub noise_vocab: usize,
    /// Probability that a token is a topic word of the query's class.
    pub beta_text: Real,
    /// Target probability that two same-class queries share a url.
    pub p_in: Real,
    /// Target probability that two different-class queries share a url.
    pub p_out: Real,
    /// Urls owned by each class.
    pub urls_per_class: usize,
    /// Matching pairs, half same-class and half different-class.
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_queries: 500,
            n_classes: 5,
            tokens_per_query: 10,
            topic_vocab: 100,
            noise_vocab: 400,
            beta_text: 0.3,
            p_in: 0.08,
            p_out: 0.004,
            urls_per_class: 20,
            n_pairs: 500,
            seed: 0,
        }
    }
}

/// Per-url click rates realizing the configured edge probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClickRates {
    /// Click probability for each url of the query's own class.
    pub own: Real,
    /// Click probability for each url of another class.
    pub foreign: Real,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries < 2 || self.n_classes == 0 || self.urls_per_class == 0 {
            return Err(Error::Config("need at least 2 queries, 1 class and 1 url per class".into()));
        }
        if self.tokens_per_query == 0 || self.topic_vocab == 0 || self.noise_vocab == 0 {
            return Err(Error::Config("query length and vocabularies must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_text) {
            return Err(Error::Config(format!("beta_text {} outside [0, 1]", self.beta_text)));
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= p_out < p_in <= 1, got p_in {} p_out {}",
                self.p_in, self.p_out
            )));
        }
        if self.expected_degree() <= 0.0 {
            return Err(Error::Config("expected query degree is 0; the click graph would have no edges".into()));
        }
        Ok(())
    }

    /// Mean degree of the projected graph implied by `p_in` and `p_out`,
    /// not counting the fallback click of queries that drew none.
    pub fn expected_degree(&self) -> Real {
        let per_class = self.n_queries as Real / self.n_classes as Real;
        (per_class - 1.0).max(0.0) * self.p_in + (self.n_queries as Real - per_class) * self.p_out
    }

    /// Same-class pairs share one of `U` own-pool urls with probability
    /// `1 - (1 - own²)^U = p_in`; different-class pairs share one of the two
    /// pools where one clicks natively with `1 - (1 - own·foreign)^(2U) =
    /// p_out`. Cross terms through third-class pools are ignored.
    pub fn click_rates(&self) -> Result<ClickRates> {
        self.validate()?;
        let u = self.urls_per_class as Real;
        let own = (1.0 - (1.0 - self.p_in).powf(1.0 / u)).sqrt();
        let foreign = (1.0 - (1.0 - self.p_out).powf(1.0 / (2.0 * u))) / own;
        if own <= 0.0 || foreign > 1.0 {
            return Err(Error::Config(format!(
                "p_in {} / p_out {} cannot be realized with {} urls per class",
                self.p_in, self.p_out, self.urls_per_class
            )));
        }
        Ok(ClickRates { own, foreign })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub clicks: Vec<ClickRecord>,
    /// One entry per query, in generation order.
    pub labeled: Vec<LabeledQuery>,
    pub pairs: Vec<QueryPair>,
}

pub fn topic_word(class: usize, k: usize) -> String {
    format!("t{class}x{k}")
}

pub fn noise_word(k: usize) -> String {
    format!("w{k}")
}

fn query_text(cfg: &SynthConfig, class: usize, rng: &mut ChaCha8Rng) -> String {
    let lo = cfg.tokens_per_query.saturating_sub(2).max(1);
    let hi = cfg.tokens_per_query + 2;
    let len = rng.random_range(lo..=hi);
    let words: Vec<String> = (0..len)
        .map(|_| {
            if rng.random::<Real>() < cfg.beta_text {
                topic_word(class, rng.random_range(0..cfg.topic_vocab))
            } else {
                noise_word(rng.random_range(0..cfg.noise_vocab))
            }
        })
        .collect();
    words.join(" ")
}

/// Generates queries round-robin over classes with distinct texts, their
/// clicks, and balanced matching pairs.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    let rates = cfg.click_rates()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut labeled = Vec::with_capacity(cfg.n_queries);
    for q in 0..cfg.n_queries {
        let class = q % cfg.n_classes;
        let mut tries = 0;
        let text = loop {
            let t = query_text(cfg, class, &mut rng);
            if seen.insert(t.clone()) {
                break t;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::Config("cannot generate enough distinct query texts".into()));
            }
        };
        labeled.push(LabeledQuery { text, label: class });
    }

    let mut clicks = Vec::new();
    for q in &labeled {
        let before = clicks.len();
        for pool in 0..cfg.n_classes {
            let rate = if pool == q.label { rates.own } else { rates.foreign };
            for u in 0..cfg.urls_per_class {
                if rng.random::<Real>() < rate {
                    clicks.push(click(q, pool, u, &mut rng));
                }
            }
        }
        if clicks.len() == before {
            let u = rng.random_range(0..cfg.urls_per_class);
            clicks.push(click(q, q.label, u, &mut rng));
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_classes];
    for (i, q) in labeled.iter().enumerate() {
        by_class[q.label].push(i);
    }
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for k in 0..cfg.n_pairs {
        let same = k % 2 == 0 || cfg.n_classes == 1;
        let ca = rng.random_range(0..cfg.n_classes);
        let cb = if same {
            ca
        } else {
            (ca + rng.random_range(1..cfg.n_classes)) % cfg.n_classes
        };
        let a = by_class[ca][rng.random_range(0..by_class[ca].len())];
        let b = loop {
            let b = by_class[cb][rng.random_range(0..by_class[cb].len())];
            if b != a || by_class[cb].len() == 1 {
                break b;
            }
        };
        pairs.push(QueryPair {
            a: labeled[a].text.clone(),
            b: labeled[b].text.clone(),
            label: same,
        });
    }
    Ok(SynthData { clicks, labeled, pairs })
}

fn click(q: &LabeledQuery, pool: usize, u: usize, rng: &mut ChaCha8Rng) -> ClickRecord {
    ClickRecord {
        query_text: q.text.clone(),
        url: format!("https://site{pool}.example/{u}"),
        clicks: rng.random_range(1..=5),
    }
}

pub const CLICKS_FILE: &str = "clicks.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const PAIRS_FILE: &str = "pairs.tsv";

/// Writes `clicks.tsv` (`query\turl\tclicks`), `labels.tsv` and `pairs.tsv`
/// into `dir`.
pub fn write_synthetic(data: &SynthData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut s = String::new();
    for c in &data.clicks {
        let _ = writeln!(s, "{}\t{}\t{}", c.query_text, c.url, c.clicks);
    }
    std::fs::write(dir.join(CLICKS_FILE), s)?;
    write_labeled_tsv(&data.labeled, dir.join(LABELS_FILE))?;
    write_pairs_tsv(&data.pairs, dir.join(PAIRS_FILE))?;
    Ok(())
}
