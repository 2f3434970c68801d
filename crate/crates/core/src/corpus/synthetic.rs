//! Synthetic multi-author corpus with tunable group and individual signal.
//!
//! Every author draws an age (which fixes an age bucket) and a style-mixing
//! vector π over `n_styles` shared style tables. Characters are sampled
//! i.i.d. from
//!
//! ```text
//! p = (1 - g - s) · background + g · bucket_table[bucket] + s · Σ_k π_k · style_table[k]
//! ```
//!
//! so with `g = s = 0` every author writes from the same distribution.
//! Attributes: `age`, `age_group` (1 if age ≥ `group_threshold`), and
//! `ope = 1 + 4 · Σ_k π_k c_k`, an affine function of π and therefore of the
//! author's expected character frequencies. Document labels: `topic` (the
//! bucket index), `target` (uniform per document) and `stance`, which
//! depends only on π and the target.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::record::{AuthorRecord, Corpus, Document};
use crate::error::{Error, Result};
use crate::transformer::fnv1a;

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const STANCE_LABELS: [&str; 3] = ["against", "none", "favor"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_authors: usize,
    pub docs_per_author: usize,
    /// Characters per document (the mean when `geometric_lengths` is set).
    pub doc_len: usize,
    /// Draw document lengths as `1 + Geometric(1/doc_len)`. The length
    /// distribution is then memoryless, so past document boundaries carry
    /// no information about where the next one falls.
    pub geometric_lengths: bool,
    /// Distinct characters used (at most 62).
    pub alphabet_size: usize,
    pub group_signal: f64,
    pub individual_signal: f64,
    pub age_min: f64,
    pub age_max: f64,
    /// Interior bucket boundaries for the age-bucket tables.
    pub age_boundaries: Vec<f64>,
    pub group_threshold: f64,
    pub n_styles: usize,
    pub n_targets: usize,
    /// Dirichlet concentration of the bucket and style tables; small values
    /// give peaky, easily distinguished tables.
    pub table_concentration: f64,
    /// Dirichlet concentration of each author's style weights π; small
    /// values make authors lean on a single style.
    pub style_concentration: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_authors: 60,
            docs_per_author: 8,
            doc_len: 40,
            geometric_lengths: false,
            alphabet_size: 26,
            group_signal: 0.25,
            individual_signal: 0.25,
            age_min: 13.0,
            age_max: 60.0,
            age_boundaries: vec![18.0, 21.0, 30.0, 45.0],
            group_threshold: 30.0,
            n_styles: 4,
            n_targets: 5,
            table_concentration: 0.3,
            style_concentration: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (g, s) = (self.group_signal, self.individual_signal);
        if !(0.0..=1.0).contains(&g) || !(0.0..=1.0).contains(&s) {
            return Err(Error::config(format!("signal strengths must lie in [0, 1] (g={g}, s={s})")));
        }
        if g + s > 1.0 + 1e-12 {
            return Err(Error::config(format!("group_signal + individual_signal = {} exceeds 1", g + s)));
        }
        if self.alphabet_size < 2 || self.alphabet_size > ALPHABET.len() {
            return Err(Error::config(format!("alphabet_size must be in 2..={}", ALPHABET.len())));
        }
        if self.doc_len == 0 || self.docs_per_author == 0 {
            return Err(Error::config("doc_len and docs_per_author must be positive"));
        }
        if !(self.age_min < self.age_max) {
            return Err(Error::config("age_min must be below age_max"));
        }
        if self.age_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("age_boundaries must be strictly increasing"));
        }
        if self.n_styles == 0 || self.n_targets == 0 {
            return Err(Error::config("n_styles and n_targets must be positive"));
        }
        if !(self.table_concentration > 0.0) || !(self.style_concentration > 0.0) {
            return Err(Error::config("table_concentration and style_concentration must be positive"));
        }
        Ok(())
    }

    pub fn bucket_of(&self, age: f64) -> usize {
        self.age_boundaries.iter().take_while(|&&b| age >= b).count()
    }
}

/// Shared distributions every author mixes from.
#[derive(Clone, Debug)]
pub struct SyntheticTables {
    pub background: Vec<f64>,
    pub buckets: Vec<Vec<f64>>,
    pub styles: Vec<Vec<f64>>,
    /// Per-style coefficient in `[0, 1]` for the `ope` attribute.
    pub ope_coef: Vec<f64>,
    /// `stance[target][class]` projection vectors over styles.
    pub stance: Vec<Vec<Vec<f64>>>,
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

impl SyntheticTables {
    pub fn draw(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a("synthetic/tables"));
        let v = spec.alphabet_size;
        let background = dirichlet(&mut rng, 5.0, v);
        let buckets = (0..=spec.age_boundaries.len())
            .map(|_| dirichlet(&mut rng, spec.table_concentration, v))
            .collect();
        let styles = (0..spec.n_styles)
            .map(|_| dirichlet(&mut rng, spec.table_concentration, v))
            .collect();
        let ope_coef = (0..spec.n_styles).map(|_| rng.random::<f64>()).collect();
        let stance = (0..spec.n_targets)
            .map(|_| {
                (0..STANCE_LABELS.len())
                    .map(|_| (0..spec.n_styles).map(|_| rng.random::<f64>()).collect())
                    .collect()
            })
            .collect();
        Self {
            background,
            buckets,
            styles,
            ope_coef,
            stance,
        }
    }

    pub fn author_table(&self, pi: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.background.len()];
        for (w, table) in pi.iter().zip(&self.styles) {
            for (a, b) in t.iter_mut().zip(table) {
                *a += w * b;
            }
        }
        t
    }

    pub fn stance_for(&self, pi: &[f64], target: usize) -> usize {
        let scores: Vec<f64> = self.stance[target]
            .iter()
            .map(|d| d.iter().zip(pi).map(|(a, b)| a * b).sum())
            .collect();
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Latent draws for one author, exposed for tests and analysis.
#[derive(Clone, Debug)]
pub struct AuthorLatent {
    pub age: f64,
    pub bucket: usize,
    pub pi: Vec<f64>,
    pub mixture: Vec<f64>,
}

fn generate_author(spec: &SyntheticSpec, tables: &SyntheticTables, index: usize) -> (AuthorRecord, AuthorLatent) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a(&format!("synthetic/author/{index}")));
    let age = rng.random_range(spec.age_min..spec.age_max);
    let bucket = spec.bucket_of(age);
    let pi = dirichlet(&mut rng, spec.style_concentration, spec.n_styles);
    let author_table = tables.author_table(&pi);
    let (g, s) = (spec.group_signal, spec.individual_signal);
    let mixture: Vec<f64> = (0..spec.alphabet_size)
        .map(|c| (1.0 - g - s) * tables.background[c] + g * tables.buckets[bucket][c] + s * author_table[c])
        .collect();
    let sampler = WeightedIndex::new(&mixture).expect("mixture has positive mass");
    let alphabet: Vec<char> = ALPHABET.chars().take(spec.alphabet_size).collect();
    let lengths = Geometric::new(1.0 / spec.doc_len as f64).expect("doc_len is positive");

    let mut timestamp: i64 = 1_500_000_000 + rng.random_range(0..10_000_000);
    let documents = (0..spec.docs_per_author)
        .map(|_| {
            timestamp += rng.random_range(60..86_400);
            let len = if spec.geometric_lengths {
                1 + lengths.sample(&mut rng) as usize
            } else {
                spec.doc_len
            };
            let text: String = (0..len).map(|_| alphabet[sampler.sample(&mut rng)]).collect();
            let target = rng.random_range(0..spec.n_targets);
            let labels = BTreeMap::from([
                ("topic".to_string(), bucket.to_string()),
                ("target".to_string(), target.to_string()),
                ("stance".to_string(), STANCE_LABELS[tables.stance_for(&pi, target)].to_string()),
            ]);
            Document {
                timestamp,
                text,
                labels,
            }
        })
        .collect();
    let ope = 1.0 + 4.0 * pi.iter().zip(&tables.ope_coef).map(|(a, b)| a * b).sum::<f64>();
    let attributes = BTreeMap::from([
        ("age".to_string(), age),
        ("age_group".to_string(), f64::from(u8::from(age >= spec.group_threshold))),
        ("ope".to_string(), ope),
    ]);
    (
        AuthorRecord {
            author_id: format!("a{index:05}"),
            documents,
            attributes,
        },
        AuthorLatent {
            age,
            bucket,
            pi,
            mixture,
        },
    )
}

/// Generates the corpus and the per-author latent draws. Authors are drawn
/// in parallel from per-author seeds, so the output does not depend on
/// thread scheduling.
pub fn generate_with_latents(spec: &SyntheticSpec) -> Result<(Corpus, Vec<AuthorLatent>)> {
    spec.validate()?;
    let tables = SyntheticTables::draw(spec);
    let (authors, latents): (Vec<_>, Vec<_>) = (0..spec.n_authors)
        .into_par_iter()
        .map(|i| generate_author(spec, &tables, i))
        .collect::<Vec<_>>()
        .into_iter()
        .unzip();
    Ok((Corpus::new(authors), latents))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    generate_with_latents(spec).map(|(c, _)| c)
}

/// Partitions authors into train/dev/test by a seeded shuffle. Split sizes
/// are `round(n · ratio)` for train and dev; test takes the rest.
pub fn split_by_author(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<[Corpus; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = corpus.authors.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a("split"));
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_dev = (((n as f64) * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for (rank, &i) in order.iter().enumerate() {
        let which = if rank < n_train {
            0
        } else if rank < n_train + n_dev {
            1
        } else {
            2
        };
        parts[which].push(i);
    }
    Ok(parts.map(|mut idx| {
        idx.sort_unstable();
        Corpus::new(idx.into_iter().map(|i| corpus.authors[i].clone()).collect())
    }))
}
