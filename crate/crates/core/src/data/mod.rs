//! Synthetic token-sequence corpora with known gold ambiguity distributions.
//!
//! Every class owns a block of signature tokens. A token drawn from class
//! `c`'s unigram prototype comes from that block with probability
//! `signal_strength` and from the whole vocabulary otherwise. A sample has a
//! latent class posterior; each of its tokens is drawn from the
//! posterior-weighted mixture of prototypes, and its gold distribution is the
//! vote histogram of simulated annotators who each sample a label from the
//! same posterior.

mod io;

pub use io::{read_corpus, read_split, write_corpus, write_split, Manifest, MANIFEST_FILE};

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub sequence_length: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub eval_size: usize,
    pub ambiguous_fraction: f64,
    pub annotators_per_sample: usize,
    /// Unambiguous posteriors put `κ / (1 + κ)` on their class and spread the
    /// rest uniformly; larger values give more peaked gold distributions.
    pub mixing_concentration: f64,
    /// Probability that a prototype token comes from the class's signature block.
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_classes: 3,
            vocab_size: 500,
            sequence_length: 24,
            train_size: 2000,
            validation_size: 500,
            eval_size: 500,
            ambiguous_fraction: 0.3,
            annotators_per_sample: 100,
            mixing_concentration: 49.0,
            signal_strength: 0.6,
            seed: 0,
        }
    }
}

/// Ambiguous samples mix two classes with weight drawn from this range.
const MIX_WEIGHT_RANGE: (f64, f64) = (0.3, 0.7);

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("train_size", self.train_size),
            ("validation_size", self.validation_size),
            ("eval_size", self.eval_size),
            ("sequence_length", self.sequence_length),
            ("annotators_per_sample", self.annotators_per_sample),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "at least 2 classes are required"));
        }
        if self.signature_block() == 0 {
            return Err(Error::config(
                "num_classes",
                format!(
                    "{} classes need at least {} vocabulary entries for distinct prototypes, vocab_size is {}",
                    self.num_classes,
                    2 * self.num_classes,
                    self.vocab_size
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::config("ambiguous_fraction", "must lie in [0, 1]"));
        }
        if !(self.mixing_concentration > 0.0 && self.mixing_concentration.is_finite()) {
            return Err(Error::config("mixing_concentration", "must be positive and finite"));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength <= 1.0) {
            return Err(Error::config("signal_strength", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Size of each class's signature block. Blocks cover half the vocabulary.
    pub fn signature_block(&self) -> usize {
        self.vocab_size / (2 * self.num_classes)
    }

    fn off_class_mass(&self) -> f64 {
        1.0 / (1.0 + self.mixing_concentration)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Validation,
    Eval,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Validation, SplitKind::Eval];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Eval => "eval",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.tsv", self.name())
    }

    pub fn parse(s: &str) -> Option<SplitKind> {
        SplitKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether every record of this split must carry a gold distribution.
    pub fn requires_distribution(self) -> bool {
        !matches!(self, SplitKind::Train)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub label: usize,
    pub gold: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn token_refs(&self) -> Vec<&[u32]> {
        self.samples.iter().map(|s| s.tokens.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `(gold distribution, gold label)` pairs; an error if any sample lacks a distribution.
    pub fn golds(&self) -> Result<Vec<(Vec<f64>, usize)>> {
        self.samples
            .iter()
            .map(|s| {
                s.gold.clone().map(|g| (g, s.label)).ok_or_else(|| {
                    Error::Invalid(format!("{} sample {} has no gold distribution", self.kind.name(), s.id))
                })
            })
            .collect()
    }

    /// Hex sha256 of the canonical file encoding.
    pub fn checksum(&self) -> String {
        io::split_checksum(self)
    }

    /// The samples whose ids are in `ids`, in split order.
    pub fn subset(&self, ids: &BTreeSet<u64>) -> Split {
        Split {
            kind: self.kind,
            num_classes: self.num_classes,
            samples: self.samples.iter().filter(|s| ids.contains(&s.id)).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Split,
    pub validation: Split,
    pub eval: Split,
}

impl Corpus {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Eval => &self.eval,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}

/// Generation output: the corpus plus the ids drawn from two-class mixtures.
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    pub ambiguous_ids: BTreeSet<u64>,
}

struct Generator<'a> {
    cfg: &'a CorpusConfig,
    rng: ChaCha8Rng,
    next_id: u64,
}

impl Generator<'_> {
    fn posterior(&mut self, ambiguous: bool) -> Vec<f64> {
        let c = self.cfg.num_classes;
        let eps = self.cfg.off_class_mass();
        let mut mix = vec![0.0; c];
        if ambiguous {
            let a = self.rng.random_range(0..c);
            let b = (a + self.rng.random_range(1..c)) % c;
            let w = self.rng.random_range(MIX_WEIGHT_RANGE.0..MIX_WEIGHT_RANGE.1);
            mix[a] = w;
            mix[b] = 1.0 - w;
        } else {
            mix[self.rng.random_range(0..c)] = 1.0;
        }
        mix.iter().map(|m| (1.0 - eps) * m + eps / c as f64).collect()
    }

    fn token(&mut self, class: usize) -> u32 {
        let block = self.cfg.signature_block();
        if self.rng.random::<f64>() < self.cfg.signal_strength {
            (class * block + self.rng.random_range(0..block)) as u32
        } else {
            self.rng.random_range(0..self.cfg.vocab_size) as u32
        }
    }

    fn sample(&mut self, ambiguous: bool) -> Sample {
        let posterior = self.posterior(ambiguous);
        let classes = WeightedIndex::new(&posterior).expect("posterior has positive mass");
        let tokens = (0..self.cfg.sequence_length)
            .map(|_| {
                let c = classes.sample(&mut self.rng);
                self.token(c)
            })
            .collect();
        let mut votes = vec![0usize; self.cfg.num_classes];
        for _ in 0..self.cfg.annotators_per_sample {
            votes[classes.sample(&mut self.rng)] += 1;
        }
        let n = self.cfg.annotators_per_sample as f64;
        let gold: Vec<f64> = votes.iter().map(|&v| v as f64 / n).collect();
        let id = self.next_id;
        self.next_id += 1;
        Sample {
            id,
            tokens,
            label: argmax(&gold),
            gold: Some(gold),
        }
    }

    fn split(&mut self, kind: SplitKind, size: usize, ambiguous_ids: &mut BTreeSet<u64>) -> Split {
        let n_amb = (self.cfg.ambiguous_fraction * size as f64).round() as usize;
        let mut flags: Vec<bool> = (0..size).map(|i| i < n_amb).collect();
        flags.shuffle(&mut self.rng);
        let samples = flags
            .into_iter()
            .map(|amb| {
                let s = self.sample(amb);
                if amb {
                    ambiguous_ids.insert(s.id);
                }
                s
            })
            .collect();
        Split {
            kind,
            num_classes: self.cfg.num_classes,
            samples,
        }
    }
}

/// Generates train, validation and eval splits with globally unique ids.
/// Train samples keep their gold distributions; only the label-distribution
/// baseline and post-hoc analyses read them.
pub fn generate_corpus(config: &CorpusConfig) -> Result<GeneratedCorpus> {
    config.validate()?;
    let mut g = Generator {
        cfg: config,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        next_id: 0,
    };
    let mut ambiguous_ids = BTreeSet::new();
    let train = g.split(SplitKind::Train, config.train_size, &mut ambiguous_ids);
    let validation = g.split(SplitKind::Validation, config.validation_size, &mut ambiguous_ids);
    let eval = g.split(SplitKind::Eval, config.eval_size, &mut ambiguous_ids);
    Ok(GeneratedCorpus {
        corpus: Corpus { train, validation, eval },
        ambiguous_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::entropy;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train_size: 300,
            validation_size: 100,
            eval_size: 100,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn no_ambiguity_gives_peaked_gold() {
        let cfg = CorpusConfig {
            ambiguous_fraction: 0.0,
            ..CorpusConfig::default()
        };
        let g = generate_corpus(&cfg).unwrap();
        assert!(g.ambiguous_ids.is_empty());
        for kind in SplitKind::ALL {
            for s in &g.corpus.split(kind).samples {
                let gold = s.gold.as_ref().unwrap();
                assert!(gold.iter().cloned().fold(0.0, f64::max) >= 0.9, "{gold:?}");
            }
        }
    }

    #[test]
    fn ambiguous_samples_have_higher_entropy() {
        let g = generate_corpus(&small()).unwrap();
        let (mut amb, mut clear) = (Vec::new(), Vec::new());
        for kind in SplitKind::ALL {
            for s in &g.corpus.split(kind).samples {
                let h = entropy(s.gold.as_ref().unwrap());
                if g.ambiguous_ids.contains(&s.id) {
                    amb.push(h);
                } else {
                    clear.push(h);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&amb) > mean(&clear) + 0.3);
    }

    #[test]
    fn exact_ambiguous_count_per_split() {
        let g = generate_corpus(&small()).unwrap();
        let count = |sp: &Split| sp.samples.iter().filter(|s| g.ambiguous_ids.contains(&s.id)).count();
        assert_eq!(count(&g.corpus.train), 90);
        assert_eq!(count(&g.corpus.validation), 30);
        assert_eq!(count(&g.corpus.eval), 30);
    }

    #[test]
    fn invariants_hold() {
        let cfg = small();
        let g = generate_corpus(&cfg).unwrap();
        let mut ids = BTreeSet::new();
        for kind in SplitKind::ALL {
            for s in &g.corpus.split(kind).samples {
                assert!(ids.insert(s.id), "duplicate id {}", s.id);
                assert_eq!(s.tokens.len(), cfg.sequence_length);
                assert!(s.tokens.iter().all(|&t| (t as usize) < cfg.vocab_size));
                let gold = s.gold.as_ref().unwrap();
                assert!((gold.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(s.label, argmax(gold));
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        let c = generate_corpus(&CorpusConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn too_many_classes_for_vocab() {
        let cfg = CorpusConfig {
            num_classes: 6,
            vocab_size: 10,
            ..CorpusConfig::default()
        };
        match generate_corpus(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "num_classes"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
