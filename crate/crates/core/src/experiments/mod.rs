//! Desk-scale evaluations: answer accuracy, knowledge recovery against the
//! planted graph, baselines, ablations, the prior-fraction sweep and the edge
//! influence diagnostic.

mod baselines;
mod config;
mod influence;
mod report;

pub use baselines::{cooccur_ranking, lp_baseline, tfidf_ranking, LpOutcome};
pub use config::{DataConfig, ExperimentConfig, LpConfig, RunConfig, RESOLVED_CONFIG};
pub use influence::{edge_influence, edge_influence_between, Influence};
pub use report::{
    mean_std, BaselineReport, BaselineRow, ExperimentReport, ReportRow, BASELINE_HEADER, REPORT_HEADER, SUMMARY_HEADER,
};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, CorpusError, Problem, Symbols, Vocabulary};
use crate::diff::ParamStore;
use crate::knowledge::{build_prior, precision_at_k, rank_edges, KnowledgeError, KnowledgePosterior, KnowledgePrior};
use crate::solver::{EdgeMode, Model, SolverError};
use crate::synth::{generate_corpus, PlantedKg, SynthError, KG_FILE, TEST_FILE, TRAIN_FILE, VALIDATION_FILE};
use crate::training::{evaluate, EdgeSetting, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("no planted knowledge graph available; {0} needs one")]
    NoTruth(&'static str),
    #[error("the link-prediction baseline needs at least one known edge (alpha > 0)")]
    NoKnownEdges,
    #[error("no evaluation problem contains the words of edge {0}")]
    NoApplicableProblems(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Model variants compared in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_SE")]
    NoSe,
    #[serde(rename = "no_RE")]
    NoRe,
    /// Edges clamped to the planted graph; no encoder, no KL.
    #[serde(rename = "EK")]
    Ek,
    /// Edges clamped to 0 and no KL.
    #[serde(rename = "backbone")]
    Backbone,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoSe, Variant::NoRe, Variant::Ek, Variant::Backbone];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSe => "no_SE",
            Variant::NoRe => "no_RE",
            Variant::Ek => "EK",
            Variant::Backbone => "backbone",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(name))
    }

    /// `base` adjusted for this variant.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoSe => c.model.use_se = false,
            Variant::NoRe => c.model.use_re = false,
            Variant::Ek => {
                c.knowledge.edges = EdgeSetting::Planted;
                c.knowledge.lambda_kl = 0.0;
            }
            Variant::Backbone => {
                c.knowledge.edges = EdgeSetting::None;
                c.knowledge.lambda_kl = 0.0;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Planted edges expressed in vocabulary indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    /// Word pairs with `i < j`.
    pub ww: HashSet<(usize, usize)>,
    /// (word, operator) pairs, operators indexed as in the vocabulary symbols.
    pub wo: HashSet<(usize, usize)>,
    /// All planted word–word edges as strings, in the graph's order.
    pub ww_words: Vec<(String, String)>,
}

impl Truth {
    /// Edges whose words are missing from the vocabulary are dropped.
    pub fn new(kg: &PlantedKg, vocab: &Vocabulary) -> Self {
        let ww_words: Vec<(String, String)> = kg
            .ww_pairs_named()
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let ww = ww_words
            .iter()
            .filter_map(|(a, b)| {
                let (i, j) = (vocab.word_index(a)?, vocab.word_index(b)?);
                Some((i.min(j), i.max(j)))
            })
            .collect();
        let wo = kg
            .wo_pairs_named()
            .into_iter()
            .filter_map(|(w, op)| Some((vocab.word_index(w)?, vocab.symbols.operator_index(op)?)))
            .collect();
        Self { ww, wo, ww_words }
    }

    pub fn edge_mode(&self) -> EdgeMode {
        EdgeMode::Fixed {
            ww: self.ww.iter().copied().collect(),
            wo: self.wo.iter().copied().collect(),
        }
    }
}

/// Splits, vocabulary and (when known) the planted graph.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<Problem>,
    pub validation: Vec<Problem>,
    pub test: Vec<Problem>,
    pub vocab: Vocabulary,
    pub kg: Option<PlantedKg>,
    pub truth: Option<Truth>,
}

impl Prepared {
    pub fn new(
        train: Vec<Problem>,
        validation: Vec<Problem>,
        test: Vec<Problem>,
        kg: Option<PlantedKg>,
        min_count: usize,
    ) -> Self {
        let vocab = Vocabulary::build(&train, min_count, Symbols::default());
        let truth = kg.as_ref().map(|kg| Truth::new(kg, &vocab));
        Self {
            train,
            validation,
            test,
            vocab,
            kg,
            truth,
        }
    }

    /// Reads a corpus directory; `kg.json` is optional.
    pub fn from_dir(dir: &Path, min_count: usize) -> Result<Self, ExperimentError> {
        let kg_path = dir.join(KG_FILE);
        let kg = if kg_path.exists() {
            Some(PlantedKg::load(&kg_path)?)
        } else {
            None
        };
        Ok(Self::new(
            load_corpus(&dir.join(TRAIN_FILE))?,
            load_corpus(&dir.join(VALIDATION_FILE))?,
            load_corpus(&dir.join(TEST_FILE))?,
            kg,
            min_count,
        ))
    }

    pub fn load(data: &DataConfig) -> Result<Self, ExperimentError> {
        match &data.dir {
            Some(dir) => Self::from_dir(dir, data.min_count),
            None => {
                let g = generate_corpus(&data.synth, data.seed)?;
                Ok(Self::new(g.train, g.validation, g.test, Some(g.kg), data.min_count))
            }
        }
    }

    pub fn truth(&self, what: &'static str) -> Result<&Truth, ExperimentError> {
        self.truth.as_ref().ok_or(ExperimentError::NoTruth(what))
    }

    /// Prior with `alpha` of the planted word–word edges known. Without a
    /// planted graph only `alpha = 0` is possible.
    pub fn prior(&self, config: &TrainConfig, seed: u64) -> Result<KnowledgePrior, ExperimentError> {
        let k = &config.knowledge;
        match &self.truth {
            Some(t) => Ok(build_prior(&self.vocab, &t.ww_words, k.alpha, k.base_prob, k.known_prob, seed)?),
            None if k.alpha == 0.0 => Ok(KnowledgePrior {
                known: k.known_prob,
                ..KnowledgePrior::uniform(k.base_prob)
            }),
            None => Err(ExperimentError::NoTruth("a prior with alpha > 0")),
        }
    }

    pub fn edge_mode(&self, setting: EdgeSetting) -> Result<EdgeMode, ExperimentError> {
        Ok(match setting {
            EdgeSetting::Learned => EdgeMode::Learned,
            EdgeSetting::None => EdgeMode::none(),
            EdgeSetting::Planted => self.truth("planted edges")?.edge_mode(),
        })
    }

    /// A trainer for `config` with the seed taken from `config.train.seed`.
    pub fn trainer(&self, config: &TrainConfig) -> Result<Trainer, ExperimentError> {
        let seed = config.train.seed;
        let prior = self.prior(config, seed)?;
        let mode = self.edge_mode(config.knowledge.edges)?;
        let (model, store) = Model::new(
            config.model.clone(),
            self.vocab.clone(),
            mode,
            config.knowledge.init_prob(),
            seed,
        );
        Ok(Trainer::new(
            config.clone(),
            model,
            store,
            prior,
            self.train.clone(),
            self.validation.clone(),
        )?)
    }
}

pub fn answer_accuracy(model: &Model, store: &ParamStore, problems: &[Problem]) -> Result<f64, ExperimentError> {
    Ok(evaluate(model, store, problems)?.0)
}

/// Word–word and word–operator precision of the posterior ranking. Known
/// edges are removed from both the ranking and the truth.
pub fn knowledge_recovery(
    posterior: &KnowledgePosterior,
    truth: &Truth,
    known: &BTreeSet<(usize, usize)>,
    k_ww: usize,
    k_wo: usize,
) -> (f64, f64) {
    (
        ww_precision(&posterior.ww_edges(), truth, known, k_ww),
        precision_at_k(&ranked(&posterior.wo_edges(), &HashSet::new()), &truth.wo, k_wo),
    )
}

/// Precision of a word–word ranking against the truth outside `known`.
pub fn ww_precision(edges: &[((usize, usize), f64)], truth: &Truth, known: &BTreeSet<(usize, usize)>, k: usize) -> f64 {
    let exclude: HashSet<(usize, usize)> = known.iter().copied().collect();
    let held_out: HashSet<(usize, usize)> = truth.ww.difference(&exclude).copied().collect();
    precision_at_k(&ranked(edges, &exclude), &held_out, k)
}

fn ranked(edges: &[((usize, usize), f64)], exclude: &HashSet<(usize, usize)>) -> Vec<(usize, usize)> {
    rank_edges(edges, exclude).into_iter().map(|(e, _)| e).collect()
}

/// One finished training run and its scores.
pub struct RunOutcome {
    pub row: ReportRow,
    pub trainer: Trainer,
}

impl RunOutcome {
    /// Model with the best-validation parameters.
    pub fn model(&self) -> (&Model, &ParamStore) {
        (&self.trainer.model, &self.trainer.best_store)
    }
}

type RunKey = (Variant, u64, u64);

/// Trains (variant, alpha, seed) combinations on demand and keeps the
/// results, so overlapping experiments share runs.
pub struct Runner<'a> {
    pub data: &'a Prepared,
    pub config: RunConfig,
    runs: BTreeMap<RunKey, RunOutcome>,
    /// Called after every epoch with (variant, alpha, seed, epoch).
    pub progress: Option<Box<dyn FnMut(Variant, f64, u64, usize) + 'a>>,
}

impl<'a> Runner<'a> {
    pub fn new(data: &'a Prepared, config: RunConfig) -> Self {
        Self {
            data,
            config,
            runs: BTreeMap::new(),
            progress: None,
        }
    }

    pub fn run(&mut self, variant: Variant, alpha: f64, seed: u64) -> Result<&RunOutcome, ExperimentError> {
        let key = (variant, alpha.to_bits(), seed);
        if !self.runs.contains_key(&key) {
            let outcome = self.train(variant, alpha, seed)?;
            self.runs.insert(key, outcome);
        }
        Ok(&self.runs[&key])
    }

    fn train(&mut self, variant: Variant, alpha: f64, seed: u64) -> Result<RunOutcome, ExperimentError> {
        let mut base = self.config.train_config();
        base.train.seed = seed;
        base.knowledge.alpha = alpha;
        let config = variant.apply(&base);
        let mut trainer = self.data.trainer(&config)?;
        while !trainer.is_finished() {
            trainer.run_epoch()?;
            if let Some(p) = self.progress.as_mut() {
                p(variant, alpha, seed, trainer.epoch);
            }
        }
        let accuracy = answer_accuracy(&trainer.model, &trainer.best_store, &self.data.test)?;
        let (p_ww, p_wo) = match (&self.data.truth, trainer.model.edge_mode.is_learned()) {
            (Some(truth), true) => {
                let posterior = trainer.model.knowledge.posterior(&trainer.best_store)?;
                let e = &self.config.experiment;
                let (a, b) = knowledge_recovery(&posterior, truth, &trainer.prior.known_ww, e.k, e.k_wo);
                (Some(a), Some(b))
            }
            _ => (None, None),
        };
        Ok(RunOutcome {
            row: ReportRow {
                variant: variant.name().to_string(),
                seed,
                alpha,
                accuracy,
                p_at_k_ww: p_ww,
                p_at_k_wo: p_wo,
            },
            trainer,
        })
    }

    /// Every variant of the config over its seeds, at the configured alpha.
    pub fn ablate(&mut self) -> Result<ExperimentReport, ExperimentError> {
        let variants = self.config.experiment.variants.clone();
        self.grid(&variants, &[self.config.knowledge.alpha])
    }

    /// The full model over every configured alpha and seed.
    pub fn alpha_sweep(&mut self) -> Result<ExperimentReport, ExperimentError> {
        let alphas = self.config.experiment.alphas.clone();
        self.grid(&[Variant::Full], &alphas)
    }

    /// Held-out word–word precision of the learned posterior, the
    /// link-prediction baseline on the same known set, co-occurrence and
    /// tf-idf, for every configured seed at `alpha`.
    pub fn baselines(&mut self, alpha: f64) -> Result<BaselineReport, ExperimentError> {
        let truth = self.data.truth("the baseline comparison")?;
        let k = self.config.experiment.k;
        let cooccur = cooccur_ranking(&self.data.train, &self.data.vocab);
        let tfidf = tfidf_ranking(&self.data.train, &self.data.vocab);
        let seeds = self.config.experiment.seeds.clone();
        let mut base = self.config.train_config();
        base.knowledge.alpha = alpha;
        for &seed in &seeds {
            if self.data.prior(&base, seed)?.known_ww.is_empty() {
                return Err(ExperimentError::NoKnownEdges);
            }
        }
        let mut rows = Vec::new();
        for seed in seeds {
            let run = self.run(Variant::Full, alpha, seed)?;
            let known = run.trainer.prior.known_ww.clone();
            let learned = run.row.p_at_k_ww.expect("full runs are scored");
            let lp = lp_baseline(&self.data.vocab, &known, self.config.model.dim, &self.config.experiment.lp, seed)?;
            let scores = [
                ("learned", learned),
                ("lp", ww_precision(&lp.posterior.ww_edges(), truth, &known, k)),
                ("cooccur", ww_precision(&cooccur, truth, &known, k)),
                ("tfidf", ww_precision(&tfidf, truth, &known, k)),
            ];
            rows.extend(scores.into_iter().map(|(method, p)| BaselineRow {
                method: method.to_string(),
                seed,
                alpha,
                k,
                p_at_k_ww: p,
            }));
        }
        Ok(BaselineReport { rows })
    }

    pub fn grid(&mut self, variants: &[Variant], alphas: &[f64]) -> Result<ExperimentReport, ExperimentError> {
        let seeds = self.config.experiment.seeds.clone();
        let mut rows = Vec::new();
        for &variant in variants {
            for &alpha in alphas {
                for &seed in &seeds {
                    rows.push(self.run(variant, alpha, seed)?.row.clone());
                }
            }
        }
        Ok(ExperimentReport { rows })
    }
}
