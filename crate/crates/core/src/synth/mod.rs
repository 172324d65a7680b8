//! Template-driven synthetic corpora with a planted ground-truth knowledge graph.

mod kg;
mod template;

pub use kg::{plant_knowledge_graph, Group, PlantedKg};
pub use template::{default_templates, instantiate_problem, partner_of, Template, ASKED};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_corpus, CorpusError, Problem};
use crate::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
    #[error("inconsistent knowledge graph: {0}")]
    InconsistentKg(String),
    #[error("template {0}: {1}")]
    BadTemplate(String, String),
    #[error("no templates to sample from")]
    NoTemplates,
    #[error("i/o error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_words: usize,
    pub num_operators: usize,
    pub triggers_per_operator: usize,
    pub ww_edges: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// Distractor items from the partner category in each problem.
    pub distractors: usize,
    pub min_number: i64,
    pub max_number: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_words: 60,
            num_operators: 4,
            triggers_per_operator: 3,
            ww_edges: 40,
            train_size: 2000,
            validation_size: 200,
            test_size: 400,
            distractors: 1,
            min_number: 2,
            max_number: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub train: Vec<Problem>,
    pub validation: Vec<Problem>,
    pub test: Vec<Problem>,
    pub kg: PlantedKg,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const KG_FILE: &str = "kg.json";

impl GeneratedCorpus {
    /// Writes the three splits and the planted graph into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir).map_err(|e| SynthError::Io(dir.display().to_string(), e))?;
        write_corpus(&dir.join(TRAIN_FILE), &self.train)?;
        write_corpus(&dir.join(VALIDATION_FILE), &self.validation)?;
        write_corpus(&dir.join(TEST_FILE), &self.test)?;
        self.kg.save(&dir.join(KG_FILE))
    }
}

pub fn generate_corpus(config: &SynthConfig, seed: u64) -> Result<GeneratedCorpus, SynthError> {
    if config.min_number < 1 || config.min_number > config.max_number {
        return Err(SynthError::Infeasible(format!(
            "number range [{}, {}] must be nonempty and positive",
            config.min_number, config.max_number
        )));
    }
    let kg = plant_knowledge_graph(config, seed)?;
    let smallest = kg.groups.iter().map(|g| g.members.len()).min().unwrap_or(0);
    if config.distractors > smallest {
        return Err(SynthError::Infeasible(format!(
            "{} distractors requested but a category has only {smallest} members",
            config.distractors
        )));
    }
    let templates = default_templates(&kg.operators);
    let mut rng = stream(seed, Stream::Data);
    let range = (config.min_number, config.max_number);
    let mut split = |name: &str, n: usize| -> Result<Vec<Problem>, SynthError> {
        (0..n)
            .map(|i| instantiate_problem(&templates, &kg, config.distractors, range, &format!("{name}-{i:05}"), &mut rng))
            .collect()
    };
    let train = split("train", config.train_size)?;
    let validation = split("valid", config.validation_size)?;
    let test = split("test", config.test_size)?;
    Ok(GeneratedCorpus {
        train,
        validation,
        test,
        kg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus, Symbols};
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig {
            train_size: 200,
            validation_size: 20,
            test_size: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn defaults_give_2600_valid_problems() {
        let g = generate_corpus(&SynthConfig::default(), 1).unwrap();
        assert_eq!((g.train.len(), g.validation.len(), g.test.len()), (2000, 200, 400));
        let symbols = Symbols::default();
        for p in g.train.iter().chain(&g.validation).chain(&g.test) {
            p.validate(&symbols).unwrap();
        }
        let ids: HashSet<&str> = g
            .train
            .iter()
            .chain(&g.validation)
            .chain(&g.test)
            .map(|p| p.id.as_str())
            .collect();
        assert_eq!(ids.len(), 2600);
    }

    #[test]
    fn every_operator_has_a_trigger_in_its_problem() {
        let g = generate_corpus(&small(), 2).unwrap();
        for p in &g.train {
            for tok in p.prefix.iter().filter(|t| !t.starts_with("NUM")) {
                let c = g.kg.operators.iter().position(|o| o.token() == tok).unwrap();
                let triggers: Vec<&str> = g.kg.triggers(c).iter().map(|&i| g.kg.words[i].as_str()).collect();
                assert!(p.tokens.iter().any(|t| triggers.contains(&t.as_str())), "{:?}", p.tokens);
            }
        }
    }

    #[test]
    fn triggers_never_appear_without_their_operator() {
        let g = generate_corpus(&small(), 3).unwrap();
        for p in &g.train {
            for (i, c) in &g.kg.wo_edges {
                if p.tokens.contains(&g.kg.words[*i]) {
                    assert!(p.prefix.iter().any(|t| t == g.kg.operators[*c].token()));
                }
            }
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_corpus(&small(), 5).unwrap().write(&a).unwrap();
        generate_corpus(&small(), 5).unwrap().write(&b).unwrap();
        for f in [TRAIN_FILE, VALIDATION_FILE, TEST_FILE, KG_FILE] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        assert_eq!(load_corpus(&a.join(TRAIN_FILE)).unwrap().len(), 200);
    }

    #[test]
    fn seed_changes_corpus_but_not_graph_statistics() {
        let a = generate_corpus(&small(), 1).unwrap();
        let b = generate_corpus(&small(), 2).unwrap();
        assert_ne!(a.train, b.train);
        assert_eq!(a.kg.ww_edges.len(), b.kg.ww_edges.len());
        assert_eq!(a.kg.wo_edges.len(), b.kg.wo_edges.len());
        assert_eq!(a.kg.words.len(), b.kg.words.len());
    }

    #[test]
    fn empty_validation_split_is_fine() {
        let cfg = SynthConfig {
            validation_size: 0,
            ..small()
        };
        assert!(generate_corpus(&cfg, 1).unwrap().validation.is_empty());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = toml::from_str::<SynthConfig>("num_words = 60\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
