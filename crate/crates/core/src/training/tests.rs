use super::*;
use crate::corpus::{Symbols, Vocabulary};
use crate::diff::Tensor;
use crate::knowledge::KnowledgePrior;
use crate::rng::{stream, Stream};
use crate::solver::{Backbone, EdgeMode};
use crate::synth::{generate_corpus, SynthConfig};

fn toy_data(n: usize) -> (Vec<Problem>, Vocabulary) {
    let cfg = SynthConfig {
        train_size: n,
        validation_size: 4,
        test_size: 4,
        ..SynthConfig::default()
    };
    let corpus = generate_corpus(&cfg, 11).unwrap();
    let vocab = Vocabulary::build(&corpus.train, 1, Symbols::default());
    (corpus.train, vocab)
}

fn toy_config(dim: usize, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.dim = dim;
    c.model.dropout = 0.0;
    c.train.epochs = epochs;
    c.train.batch_size = 2;
    c.train.lr = 0.01;
    c.train.seed = 5;
    c
}

fn trainer(config: &TrainConfig, problems: &[Problem], vocab: &Vocabulary, validation: usize) -> Trainer {
    let (model, store) = Model::new(
        config.model.clone(),
        vocab.clone(),
        EdgeMode::Learned,
        config.knowledge.init_prob(),
        config.train.seed,
    );
    let prior = KnowledgePrior::uniform(config.knowledge.base_prob);
    Trainer::new(
        config.clone(),
        model,
        store,
        prior,
        problems.to_vec(),
        problems[..validation].to_vec(),
    )
    .unwrap()
}

#[test]
fn temperature_schedule() {
    assert_eq!(temperature_at(0, 10, 0.5, 0.1), 0.5);
    assert!((temperature_at(10, 10, 0.5, 0.1) - 0.1).abs() < 1e-15);
    assert!((temperature_at(5, 10, 0.5, 0.1) - 0.3).abs() < 1e-15);
    assert_eq!(temperature_at(0, 0, 0.5, 0.1), 0.1);
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::default();
    assert!(c.validate().is_ok());
    c.knowledge.tau_end = 0.0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.model.dropout = 1.0;
    assert!(c.validate().is_err());
    let text = "[model]\ndim = 8\n[train]\nepochs = 3\nbogus = 1\n";
    assert!(toml::from_str::<TrainConfig>(text).is_err());
}

fn loss_parts(config: &TrainConfig, zero_head: bool) -> (f64, f64, f64) {
    let (problems, vocab) = toy_data(6);
    let (model, mut store) = Model::new(config.model.clone(), vocab, EdgeMode::Learned, 0.1, 3);
    if zero_head {
        for net in [&model.knowledge.ww_net, &model.knowledge.wo_net] {
            let shape = store.get(net.out_w).shape().to_vec();
            *store.get_mut(net.out_w) = Tensor::zeros(&shape);
        }
    }
    let refs: Vec<&Problem> = problems.iter().collect();
    let batch = model.batch(&refs, true).unwrap();
    let prior = KnowledgePrior::uniform(0.1);
    let mut tape = Tape::training();
    let mut rng = stream(1, Stream::Gumbel);
    let t = elbo_loss(&mut tape, &model, &store, &batch, &prior, &config.knowledge, 0.5, &mut rng, None).unwrap();
    (tape.value(t.loss).item(), t.nll, t.kl)
}

#[test]
fn elbo_components() {
    let mut c = toy_config(8, 1);
    let (loss, nll, kl) = loss_parts(&c, false);
    assert!(nll >= 0.0 && kl >= 0.0);
    assert!((loss - (nll + kl)).abs() < 1e-9);
    c.knowledge.lambda_kl = 0.0;
    let (loss, nll, kl) = loss_parts(&c, false);
    assert_eq!(loss, nll);
    assert_eq!(kl, 0.0);
    // Encoder output at its bias, logit(0.1): posterior equals the prior.
    let c = toy_config(8, 1);
    let (_, _, kl) = loss_parts(&c, true);
    assert!(kl.abs() < 1e-9, "{kl}");
}

#[test]
fn encoder_learns_through_the_likelihood_alone() {
    let mut c = toy_config(8, 1);
    c.knowledge.lambda_kl = 0.0;
    let (problems, vocab) = toy_data(6);
    let (model, store) = Model::new(c.model.clone(), vocab, EdgeMode::Learned, 0.1, 3);
    let refs: Vec<&Problem> = problems.iter().collect();
    let batch = model.batch(&refs, true).unwrap();
    let prior = KnowledgePrior::uniform(0.1);
    let mut tape = Tape::training();
    let mut rng = stream(1, Stream::Gumbel);
    let t = elbo_loss(&mut tape, &model, &store, &batch, &prior, &c.knowledge, 0.5, &mut rng, None).unwrap();
    let g = tape.backward(t.loss, &store).unwrap();
    for id in [model.knowledge.ww_net.w_left, model.knowledge.wo_net.w_left, model.knowledge.word_emb] {
        assert!(g.get(id).data().iter().any(|v| v.abs() > 0.0), "{}", store.name(id));
    }
}

#[test]
fn toy_run_fits_training_set() {
    let (problems, vocab) = toy_data(10);
    let c = toy_config(32, 300);
    let mut t = trainer(&c, &problems, &vocab, 0);
    t.run().unwrap();
    let (acc, _) = evaluate(&t.model, &t.store, &problems).unwrap();
    assert_eq!(acc, 1.0);
    assert!(t.metrics.last().unwrap().nll < 0.05);
}

#[test]
fn bare_backbone_fits_training_set() {
    let (problems, vocab) = toy_data(10);
    let mut c = toy_config(32, 150);
    c.model.use_se = false;
    c.model.use_re = false;
    c.knowledge.lambda_kl = 0.0;
    for backbone in [Backbone::Birnn, Backbone::Pool] {
        c.model.backbone = backbone;
        let (model, store) = Model::new(c.model.clone(), vocab.clone(), EdgeMode::none(), 0.1, 1);
        let mut t = Trainer::new(c.clone(), model, store, KnowledgePrior::uniform(0.1), problems.clone(), vec![]).unwrap();
        t.run().unwrap();
        let (acc, _) = evaluate(&t.model, &t.store, &problems).unwrap();
        assert_eq!(acc, 1.0, "{backbone:?}");
    }
}

#[test]
fn runs_are_reproducible_and_resumable() {
    let (problems, vocab) = toy_data(12);
    let mut c = toy_config(8, 4);
    c.model.dropout = 0.3;
    c.train.batch_size = 5;
    let mut a = trainer(&c, &problems, &vocab, 4);
    a.run().unwrap();
    let mut b = trainer(&c, &problems, &vocab, 4);
    b.run().unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());

    let mut first = trainer(&c, &problems, &vocab, 4);
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let bytes = Checkpoint::from_trainer(&first).to_bytes();
    let mut resumed = Checkpoint::from_bytes(&bytes)
        .unwrap()
        .resume(problems.clone(), problems[..4].to_vec())
        .unwrap();
    resumed.run().unwrap();
    assert_eq!(resumed.metrics_csv(), a.metrics_csv());
    assert_eq!(Checkpoint::from_trainer(&resumed).to_bytes(), Checkpoint::from_trainer(&a).to_bytes());
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let (problems, vocab) = toy_data(6);
    let c = toy_config(8, 1);
    let mut t = trainer(&c, &problems, &vocab, 2);
    t.run().unwrap();
    let ck = Checkpoint::from_trainer(&t);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    let (_, store) = loaded.best_model().unwrap();
    for (id, _, tensor) in store.iter() {
        assert_eq!(tensor, t.best_store.get(id));
    }

    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::from_bytes(b"not json").is_err());
    let mut wrong = ck.clone();
    wrong.version = 99;
    assert!(matches!(Checkpoint::from_bytes(&wrong.to_bytes()), Err(TrainError::Checkpoint(_))));

    let big = toy_config(16, 1);
    let (_, mut store) = Model::new(big.model.clone(), vocab.clone(), EdgeMode::Learned, 0.1, 5);
    assert!(matches!(ck.load_into(&mut store), Err(TrainError::Checkpoint(_))));
}

#[test]
fn non_finite_loss_names_the_operation() {
    let (problems, vocab) = toy_data(6);
    let c = toy_config(8, 1);
    let mut t = trainer(&c, &problems, &vocab, 0);
    let ids: Vec<_> = t.store.ids().collect();
    for id in ids {
        t.store.get_mut(id).data_mut().fill(1e300);
    }
    match t.run_epoch() {
        Err(TrainError::NonFinite { op, epoch, batch }) => {
            assert!(!op.is_empty());
            assert_eq!((epoch, batch), (1, 0));
        }
        other => panic!("expected a non-finite failure, got {:?}", other.err()),
    }
}
