//! Built-in consistency checks: gradients of every primitive and of the full
//! training loss, and lossless corpus serialization.

use std::io::BufReader;

use crate::corpus::{read_corpus, Problem, Symbols, Vocabulary};
use crate::diff::{finite_difference_check, primitive_suite, Tape};
use crate::knowledge::{KnowledgePrior, Relaxation};
use crate::rng::{stream, Stream};
use crate::solver::{EdgeMode, Model, ModelConfig};
use crate::synth::{generate_corpus, PlantedKg, SynthConfig};
use crate::training::{elbo_loss, KnowledgeConfig, TrainError};

/// Largest accepted relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn gradient(name: impl Into<String>, result: Result<f64, String>) -> Self {
        match result {
            Ok(err) => Self {
                name: name.into(),
                passed: err < GRADIENT_TOLERANCE,
                detail: format!("max relative error {err:.3e}"),
            },
            Err(e) => Self {
                name: name.into(),
                passed: false,
                detail: e,
            },
        }
    }
}

fn tiny_corpus(seed: u64) -> Result<crate::synth::GeneratedCorpus, String> {
    let config = SynthConfig {
        train_size: 8,
        validation_size: 2,
        test_size: 2,
        ..SynthConfig::default()
    };
    generate_corpus(&config, seed).map_err(|e| e.to_string())
}

/// Max relative error of the gradient of `NLL + KL` on a two-problem batch
/// with learned edges, both enhancement modules and fixed relaxation noise.
/// Very narrow models can leave whole rows at an exact relu kink, where
/// central differences and the subgradient disagree, so the check uses `d = 8`.
pub fn elbo_gradient_error(seed: u64) -> Result<f64, String> {
    let corpus = tiny_corpus(seed)?;
    let problems: Vec<&Problem> = corpus.train.iter().take(2).collect();
    let vocab = Vocabulary::build(&corpus.train, 1, Symbols::default());
    let config = ModelConfig {
        dim: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let (model, store) = Model::new(config, vocab, EdgeMode::Learned, 0.3, seed);
    let batch = model.batch(&problems, true).map_err(|e| e.to_string())?;
    let prior = KnowledgePrior::uniform(0.1);
    let knowledge = KnowledgeConfig {
        lambda_kl: 1.0,
        relaxation: Relaxation::Logistic,
        ..KnowledgeConfig::default()
    };
    finite_difference_check(
        |tape: &mut Tape, st| {
            let mut gumbel = stream(seed, Stream::Gumbel);
            Ok::<_, TrainError>(elbo_loss(tape, &model, st, &batch, &prior, &knowledge, 0.5, &mut gumbel, None)?.loss)
        },
        &store,
        1e-7,
    )
    .map_err(|e| e.to_string())
}

/// Serializes a generated corpus and its planted graph and reads them back.
pub fn corpus_round_trip(seed: u64) -> Result<(), String> {
    let corpus = tiny_corpus(seed)?;
    let symbols = Symbols::default();
    for split in [&corpus.train, &corpus.validation, &corpus.test] {
        let text: String = split
            .iter()
            .map(|p| serde_json::to_string(p).map(|l| l + "\n"))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let back = read_corpus(BufReader::new(text.as_bytes()), &symbols).map_err(|e| e.to_string())?;
        if &back != split {
            return Err("corpus changed in a JSONL round trip".into());
        }
    }
    let kg_text = serde_json::to_string(&corpus.kg).map_err(|e| e.to_string())?;
    let kg: PlantedKg = serde_json::from_str(&kg_text).map_err(|e| e.to_string())?;
    if kg != corpus.kg {
        return Err("knowledge graph changed in a JSON round trip".into());
    }
    Ok(())
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    match primitive_suite(seed) {
        Ok(cases) => out.extend(cases.into_iter().map(|(name, err)| CheckOutcome::gradient(format!("gradient {name}"), Ok(err)))),
        Err(e) => out.push(CheckOutcome::gradient("gradient primitives", Err(e.to_string()))),
    }
    out.push(CheckOutcome::gradient("gradient full loss", elbo_gradient_error(seed)));
    let rt = corpus_round_trip(seed);
    out.push(CheckOutcome {
        name: "corpus round trip".into(),
        passed: rt.is_ok(),
        detail: rt.err().unwrap_or_else(|| "identical".into()),
    });
    out
}
