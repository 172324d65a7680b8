use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mwp_core::corpus::Operator;
use mwp_core::experiments::{edge_influence, ExperimentError, Prepared, RunConfig, Runner, Truth, Variant};
use mwp_core::knowledge::export_json;
use mwp_core::selftest;
use mwp_core::solver::{EdgeRef, Model};
use mwp_core::synth::generate_corpus;
use mwp_core::training::{evaluate, Checkpoint, Trainer};

#[derive(Parser)]
#[command(name = "mwp", version, about = "Math word problem solving with a learned knowledge graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed: generator seed for gen-data, training seed for
    /// train, the seed list for experiments.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the fraction of known word–word edges.
    #[arg(long)]
    alpha: Option<f64>,
    /// Overrides the precision cut-off (and caps extract-kg lists).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its planted knowledge graph.
    GenData(Common),
    /// Train one model and write its checkpoint and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// full, no_SE, no_RE, EK or backbone.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Answer accuracy of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the learned knowledge graph of a checkpoint, ranked.
    ExtractKg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Word–word precision of the learned graph against three baselines.
    Baselines(Common),
    /// Train every variant over the seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of variants.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train the full model over the configured alphas and seeds.
    SweepAlpha(Common),
    /// Likelihood change from switching single edges on versus off.
    Influence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `word,word` or `word,op` with op one of + - * /. Defaults to every
        /// planted word–operator edge.
        #[arg(long = "edge")]
        edges: Vec<String>,
    },
    /// Gradient checks and serialization round trips.
    Selftest(Common),
}

/// Failures mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData(c) => gen_data(&c),
        Command::Train { common, variant } => train(&common, variant.as_deref()),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::ExtractKg { common, checkpoint } => extract_kg(&common, &checkpoint),
        Command::Baselines(c) => baselines(&c),
        Command::Ablate { common, variant } => ablate(&common, variant.as_deref()),
        Command::SweepAlpha(c) => sweep_alpha(&c),
        Command::Influence {
            common,
            checkpoint,
            edges,
        } => influence(&common, &checkpoint, &edges),
        Command::Selftest(c) => run_selftest(&c),
    }
}

/// Seed as applied by commands other than gen-data and the experiments.
fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut config = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.train.seed = seed;
    }
    if let Some(alpha) = c.alpha {
        config.knowledge.alpha = alpha;
    }
    if let Some(k) = c.k {
        config.experiment.k = k;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn out_dir(c: &Common) -> Result<&Path, Failure> {
    c.out.as_deref().ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn parse_variant(name: &str) -> Result<Variant, Failure> {
    Variant::parse(name.trim()).ok_or_else(|| {
        let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        Failure::Usage(format!("unknown variant {name:?}; expected one of {}", known.join(", ")))
    })
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// The resolved config and the seed that drives the command.
fn provenance(config: &RunConfig, out: &Path, seed: u64) -> Result<(), Failure> {
    config.write_resolved(out)?;
    write(&out.join("seed.txt"), &format!("{seed}\n"))
}

fn gen_data(c: &Common) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let mut config = load_config(c)?;
    if let Some(seed) = c.seed {
        config.data.seed = seed;
    }
    let corpus = generate_corpus(&config.data.synth, config.data.seed).map_err(runtime)?;
    corpus.write(out).map_err(runtime)?;
    config.data.dir = Some(std::path::absolute(out).map_err(runtime)?);
    provenance(&config, out, config.data.seed)?;
    println!(
        "wrote {} train, {} validation and {} test problems to {}",
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn train(c: &Common, variant: Option<&str>) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let config = load_config(c)?;
    let variant = variant.map(parse_variant).transpose()?.unwrap_or(Variant::Full);
    let data = Prepared::load(&config.data)?;
    let train_config = variant.apply(&config.train_config());
    let mut trainer = data.trainer(&train_config)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    let resolved = RunConfig {
        model: train_config.model.clone(),
        knowledge: train_config.knowledge.clone(),
        ..config.clone()
    };
    provenance(&resolved, out, config.train.seed)?;
    run_trainer(&mut trainer)?;
    Checkpoint::from_trainer(&trainer).save(&out.join("checkpoint.json")).map_err(runtime)?;
    write(&out.join("metrics.csv"), &trainer.metrics_csv())?;
    println!(
        "best validation accuracy {:.4} at epoch {}",
        trainer.best_val, trainer.best_epoch
    );
    Ok(())
}

fn run_trainer(trainer: &mut Trainer) -> Result<(), Failure> {
    while !trainer.is_finished() {
        let m = trainer.run_epoch().map_err(runtime)?;
        eprintln!(
            "epoch {:>3}  loss {:.4}  nll {:.4}  kl {:.4}  val {:.4}",
            m.epoch, m.loss, m.nll, m.kl, m.val_acc
        );
    }
    Ok(())
}

fn checkpoint_model(path: &Path) -> Result<(Checkpoint, Model, mwp_core::diff::ParamStore), Failure> {
    let ck = Checkpoint::load(path).map_err(runtime)?;
    let (model, store) = ck.best_model().map_err(runtime)?;
    Ok((ck, model, store))
}

/// Config recording both the data source and the checkpoint's settings.
fn checkpoint_config(config: &RunConfig, ck: &Checkpoint) -> RunConfig {
    RunConfig {
        model: ck.config.model.clone(),
        knowledge: ck.config.knowledge.clone(),
        train: ck.config.train.clone(),
        ..config.clone()
    }
}

fn eval(c: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let config = load_config(c)?;
    let (ck, model, store) = checkpoint_model(checkpoint)?;
    let data = Prepared::load(&config.data)?;
    let (accuracy, outputs) = evaluate(&model, &store, &data.test).map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    let resolved = checkpoint_config(&config, &ck);
    provenance(&resolved, out, resolved.train.seed)?;
    let mut csv = String::from("id,predicted,correct\n");
    for (p, (decoded, ok)) in data.test.iter().zip(&outputs) {
        let _ = writeln!(csv, "{},{},{}", p.id, decoded.tokens.join(" "), ok);
    }
    write(&out.join("predictions.csv"), &csv)?;
    println!("accuracy {accuracy:.4}");
    Ok(())
}

fn extract_kg(c: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let config = load_config(c)?;
    let (ck, model, store) = checkpoint_model(checkpoint)?;
    if !model.edge_mode.is_learned() {
        return Err(runtime("the checkpoint uses fixed edges; there is no learned graph to extract"));
    }
    let posterior = model.knowledge.posterior(&store).map_err(runtime)?;
    let export = export_json(&posterior, &model.vocab, c.k);
    std::fs::create_dir_all(out).map_err(runtime)?;
    let resolved = checkpoint_config(&config, &ck);
    provenance(&resolved, out, resolved.train.seed)?;
    let text = serde_json_pretty(&export)?;
    write(&out.join("kg_ranked.json"), &text)?;
    println!("wrote {} word-word and {} word-operator edges", export.ww.len(), export.wo.len());
    Ok(())
}

fn serde_json_pretty(export: &mwp_core::knowledge::KgExport) -> Result<String, Failure> {
    serde_json::to_string_pretty(export).map_err(runtime)
}

/// Config for the multi-run commands: `--seed` narrows the seed list.
fn experiment_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut config = load_config(c)?;
    if let Some(seed) = c.seed {
        config.experiment.seeds = vec![seed];
    }
    if config.experiment.seeds.is_empty() {
        return Err(Failure::Usage("the experiment needs at least one seed".into()));
    }
    Ok(config)
}

fn runner_progress(runner: &mut Runner<'_>) {
    let total = runner.config.train.epochs;
    runner.progress = Some(Box::new(move |v, alpha, seed, epoch| {
        if epoch == total || epoch % 5 == 0 {
            eprintln!("{v} alpha={alpha} seed={seed}: epoch {epoch}/{total}");
        }
    }));
}

fn experiment_seed(config: &RunConfig) -> u64 {
    config.experiment.seeds[0]
}

fn baselines(c: &Common) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let config = experiment_config(c)?;
    let data = Prepared::load(&config.data)?;
    provenance(&config, out, experiment_seed(&config))?;
    let mut runner = Runner::new(&data, config.clone());
    runner_progress(&mut runner);
    let report = runner.baselines(config.knowledge.alpha)?;
    report.write(out, "baselines")?;
    print!("{}", report.summary_csv());
    Ok(())
}

fn ablate(c: &Common, variants: Option<&str>) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let mut config = experiment_config(c)?;
    if let Some(list) = variants {
        config.experiment.variants = list.split(',').map(parse_variant).collect::<Result<_, _>>()?;
    }
    let data = Prepared::load(&config.data)?;
    provenance(&config, out, experiment_seed(&config))?;
    let mut runner = Runner::new(&data, config);
    runner_progress(&mut runner);
    let report = runner.ablate()?;
    report.write(out, "ablation")?;
    print!("{}", report.summary_csv());
    Ok(())
}

fn sweep_alpha(c: &Common) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let mut config = experiment_config(c)?;
    if let Some(alpha) = c.alpha {
        config.experiment.alphas = vec![alpha];
    }
    let data = Prepared::load(&config.data)?;
    provenance(&config, out, experiment_seed(&config))?;
    let mut runner = Runner::new(&data, config);
    runner_progress(&mut runner);
    let report = runner.alpha_sweep()?;
    report.write(out, "sweep_alpha")?;
    print!("{}", report.summary_csv());
    Ok(())
}

/// `word,word` or `word,op` in the model's vocabulary.
fn parse_edge(model: &Model, spec: &str) -> Result<EdgeRef, Failure> {
    let (a, b) = spec
        .split_once(',')
        .ok_or_else(|| Failure::Usage(format!("edge {spec:?} must look like word,word or word,op")))?;
    let word = |w: &str| {
        model
            .vocab
            .word_index(w.trim())
            .ok_or_else(|| Failure::Runtime(ExperimentError::UnknownWord(w.trim().to_string()).to_string()))
    };
    let i = word(a)?;
    match Operator::from_token(b.trim()).and_then(|op| model.vocab.symbols.operator_index(op)) {
        Some(op) => Ok(EdgeRef::Wo(i, op)),
        None => Ok(EdgeRef::Ww(i, word(b)?)),
    }
}

fn describe(model: &Model, edge: EdgeRef) -> (String, String, String) {
    match edge {
        EdgeRef::Ww(i, j) => ("ww".into(), model.vocab.word(i).into(), model.vocab.word(j).into()),
        EdgeRef::Wo(i, c) => (
            "wo".into(),
            model.vocab.word(i).into(),
            model.vocab.symbols.operators[c].token().into(),
        ),
    }
}

fn influence(c: &Common, checkpoint: &Path, specs: &[String]) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let config = load_config(c)?;
    let (ck, model, store) = checkpoint_model(checkpoint)?;
    let data = Prepared::load(&config.data)?;
    let edges: Vec<EdgeRef> = if specs.is_empty() {
        let kg = data.kg.as_ref().ok_or(ExperimentError::NoTruth("influence without --edge"))?;
        let mut wo: Vec<(usize, usize)> = Truth::new(kg, &model.vocab).wo.into_iter().collect();
        wo.sort_unstable();
        wo.into_iter().map(|(i, op)| EdgeRef::Wo(i, op)).collect()
    } else {
        specs.iter().map(|s| parse_edge(&model, s)).collect::<Result<_, _>>()?
    };
    std::fs::create_dir_all(out).map_err(runtime)?;
    let resolved = checkpoint_config(&config, &ck);
    provenance(&resolved, out, resolved.train.seed)?;
    let mut csv = String::from("kind,source,target,delta,positive_fraction,problems\n");
    for edge in edges {
        let inf = match edge_influence(&model, &store, &data.test, edge) {
            Ok(inf) => inf,
            // Planted edges whose words never reach the test split are skipped.
            Err(ExperimentError::NoApplicableProblems(words)) if specs.is_empty() => {
                eprintln!("skipping {words}: no test problem contains it");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let (kind, a, b) = describe(&model, inf.edge);
        let line = format!(
            "{kind},{a},{b},{},{},{}",
            inf.delta,
            inf.positive_fraction(),
            inf.per_problem.len()
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    write(&out.join("influence.csv"), &csv)
}

fn run_selftest(c: &Common) -> Result<(), Failure> {
    let seed = c.seed.unwrap_or(0);
    let checks = selftest::run_all(seed);
    let mut report = String::new();
    for check in &checks {
        let _ = writeln!(
            report,
            "{} {}: {}",
            if check.passed { "ok  " } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    print!("{report}");
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out).map_err(runtime)?;
        write(&out.join("selftest.txt"), &report)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
