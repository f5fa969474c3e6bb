use std::collections::BTreeMap;
use std::path::Path;

use eduembed::attributes::{export_attribute_file, AttributeSet};
use eduembed::cat::{pretrain_cat, pretrain_cut, run_cat, AnswerOracle, CatReport, LoggedOracle, PlantedOracle, PoolMode, Strategy};
use eduembed::cdmodels::{
    evaluate, run_inductive, run_zeroshot, score, train_transductive, FitReport, FusedCDModel, Head, InductiveReport, ModelSpec,
    SplitMetrics, ZeroShotReport,
};
use eduembed::config::RunConfig;
use eduembed::corpus::{
    load_corpus, split_cat, split_inductive, split_transductive, write_corpus, Corpus, CorpusPaths, DomainSpec, CAT_PRETRAIN_FRACTION,
    DEFAULT_RATIOS,
};
use eduembed::encoder::{load_embedding_file, save_embedding_file, EmbeddingTable};
use eduembed::raif::{predict_table, train_stage1, Stage1Report};
use eduembed::synthetic::{generate, PlantedSpec, PlantedTruth};
use eduembed::{Error, Result};
use serde::Serialize;

use crate::report::{aggregate, flatten, read_json, write_json, write_mastery, Summary};
use crate::{CatArgs, CatRunArgs, ConfigArgs, Domain, EvalArgs, PrepareArgs, Scenario, ScenarioArgs, SeedsArgs, SeedsCommand, SplitArg, Stage1Args, SynthArgs, TrainArgs};

type Metrics = BTreeMap<String, f64>;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(e) = args.stage1_epochs {
        cfg.stage1_epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(dir: &Path) -> Result<Corpus> {
    load_corpus(&CorpusPaths::in_dir(dir))
}

fn labels(corpus: &Corpus, indices: &[usize]) -> Vec<u8> {
    indices.iter().map(|&i| corpus.responses()[i].score).collect()
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn print_metrics(label: &str, m: &SplitMetrics) {
    println!("{label}: n={} auc={} acc={} doa={}", m.count, fmt(m.auc), fmt(m.acc), fmt(m.doa));
}

fn warn(warnings: &mut Vec<String>, message: String) {
    eprintln!("warning: {message}");
    warnings.push(message);
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct SplitSizes {
    train: usize,
    valid: usize,
    test: usize,
}

// ---------------------------------------------------------------------------
// prepare / synth

#[derive(Serialize)]
struct PrepareReport {
    command: &'static str,
    config: RunConfig,
    input_students: usize,
    students: usize,
    exercises: usize,
    concepts: usize,
    responses: usize,
    dropped_students: Vec<String>,
    attribute_records: usize,
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(m) = a.min_responses {
        cfg.min_responses = m;
    }
    let raw = load(&a.data)?;
    let corpus = raw.filter_min_responses(cfg.min_responses)?;
    let kept: std::collections::HashSet<&str> = corpus.student_ids().iter().map(String::as_str).collect();
    let dropped_students = raw
        .student_ids()
        .iter()
        .filter(|id| !kept.contains(id.as_str()))
        .cloned()
        .collect();
    write_corpus(&corpus, &a.out)?;
    let attrs = AttributeSet::build(&corpus, cfg.cap, cfg.seed, cfg.stage1().attributes);
    let lines = attrs.lines(&corpus);
    export_attribute_file(&lines, a.out.join("attributes.jsonl"))?;
    let report = PrepareReport {
        command: "prepare",
        input_students: raw.num_students(),
        students: corpus.num_students(),
        exercises: corpus.num_exercises(),
        concepts: corpus.num_concepts(),
        responses: corpus.responses().len(),
        dropped_students,
        attribute_records: lines.len(),
        config: cfg,
    };
    write_json(&a.out.join("prepare_report.json"), &report)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::Invalid(e.to_string()))?
    );
    Ok(())
}

#[derive(Serialize)]
struct SynthReport {
    command: &'static str,
    seed: u64,
    domain: &'static str,
    students: usize,
    exercises: usize,
    concepts: usize,
    responses: usize,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let (spec, domain) = match a.domain {
        Domain::A => (PlantedSpec::standard(a.seed), "a"),
        Domain::B => (PlantedSpec::second_domain(a.seed), "b"),
    };
    let planted = generate(&spec)?;
    let c = &planted.corpus;
    write_corpus(c, &a.out)?;
    write_json(&a.out.join("planted.json"), &planted.truth)?;
    let report = SynthReport {
        command: "synth",
        seed: a.seed,
        domain,
        students: c.num_students(),
        exercises: c.num_exercises(),
        concepts: c.num_concepts(),
        responses: c.responses().len(),
    };
    write_json(&a.out.join("synth_report.json"), &report)?;
    println!("synth: {} students, {} exercises, {} responses", report.students, report.exercises, report.responses);
    Ok(())
}

// ---------------------------------------------------------------------------
// stage1

#[derive(Serialize)]
struct Stage1CommandReport {
    command: &'static str,
    config: RunConfig,
    split: SplitSizes,
    stage1: Stage1Report,
    test: SplitMetrics,
}

pub fn stage1(a: &Stage1Args) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let corpus = load(&a.corpus)?;
    let split = split_transductive(&corpus, DEFAULT_RATIOS, cfg.seed)?;
    let out = train_stage1(&corpus, &split, &cfg.stage1())?;
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    save_embedding_file(&out.table, &corpus, &a.out)?;
    out.encoder.save(a.encoder.clone().unwrap_or_else(|| a.out.with_extension("encoder")))?;
    let test = score(&predict_table(&out.table.quantized(), &corpus, &split.test), &labels(&corpus, &split.test));
    println!("stage1: best epoch {} valid auc {}", out.report.best_epoch, fmt(out.report.best_valid_auc));
    print_metrics("test", &test);
    let report = Stage1CommandReport {
        command: "stage1",
        config: cfg,
        split: SplitSizes {
            train: split.train.len(),
            valid: split.valid.len(),
            test: split.test.len(),
        },
        stage1: out.report,
        test,
    };
    write_json(&a.report.clone().unwrap_or_else(|| a.out.with_extension("report.json")), &report)
}

// ---------------------------------------------------------------------------
// train

fn scenario_config(args: &ScenarioArgs, seed: Option<u64>, warnings: &mut Vec<String>) -> Result<RunConfig> {
    let mut cfg = load_config(&args.cfg)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let zero_shot = matches!(args.scenario, Scenario::CrossDomain | Scenario::CrossSubject);
    if let Some(l) = args.lambda {
        match args.scenario {
            Scenario::Transductive => cfg.lambda = l,
            Scenario::Inductive => {
                warn(warnings, "--lambda applies to exercises and concepts; students are text-only (lambda forced to 1)".into());
                cfg.lambda = l;
            }
            _ => warn(warnings, "--lambda ignored: zero-shot models are text-only (lambda forced to 1)".into()),
        }
    }
    if let Some(al) = args.alpha {
        if zero_shot {
            warn(warnings, "--alpha ignored: zero-shot models have no ID embeddings to align".into());
        } else {
            cfg.alpha = al;
        }
    }
    if let Some(h) = args.head {
        cfg.head = Some(h.into());
    }
    if args.scenario == Scenario::CrossDomain && cfg.overlap_students {
        warn(warnings, "overlap_students applies to cross-subject runs only".into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require<'a, T>(v: &'a Option<T>, flag: &str, scenario: Scenario) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Invalid(format!("--{flag} is required for the {} scenario", scenario.name())))
}

fn reject(present: bool, flag: &str, scenario: Scenario) -> Result<()> {
    if present {
        return Err(Error::Invalid(format!("--{flag} does not apply to the {} scenario", scenario.name())));
    }
    Ok(())
}

#[derive(Serialize)]
struct TransductiveCommandReport {
    command: &'static str,
    scenario: &'static str,
    config: RunConfig,
    warnings: Vec<String>,
    /// Present when Stage 1 ran in-process.
    stage1: Option<Stage1Report>,
    split: SplitSizes,
    fit: FitReport,
    valid: SplitMetrics,
    test: SplitMetrics,
}

#[derive(Serialize)]
struct InductiveCommandReport {
    command: &'static str,
    scenario: &'static str,
    config: RunConfig,
    warnings: Vec<String>,
    inductive: InductiveReport,
}

#[derive(Serialize)]
struct ZeroShotCommandReport {
    command: &'static str,
    scenario: &'static str,
    config: RunConfig,
    warnings: Vec<String>,
    sources: usize,
    target_eval: usize,
    zeroshot: ZeroShotReport,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    run_scenario(&a.run, None, Some(&a.out)).map(|_| ())
}

/// Runs one scenario; writes artifacts when `out` is given and returns the
/// flattened metrics.
fn run_scenario(args: &ScenarioArgs, seed: Option<u64>, out: Option<&Path>) -> Result<Metrics> {
    let mut warnings = Vec::new();
    let cfg = scenario_config(args, seed, &mut warnings)?;
    let s = args.scenario;
    let mut metrics = Metrics::new();
    match s {
        Scenario::Transductive => {
            reject(!args.source.is_empty(), "source", s)?;
            reject(args.target.is_some(), "target", s)?;
            let corpus = load(require(&args.corpus, "corpus", s)?)?;
            let split = split_transductive(&corpus, DEFAULT_RATIOS, cfg.seed)?;
            let (table, stage1) = match &args.emb {
                Some(p) => (load_embedding_file(p, &corpus)?, None),
                None => {
                    let s1 = train_stage1(&corpus, &split, &cfg.stage1())?;
                    // same values a saved-and-reloaded table would carry
                    (s1.table.quantized(), Some(s1.report))
                }
            };
            let spec = cfg.model_spec(ModelSpec::transductive, Head::MonotoneMlp);
            let (model, rep) = train_transductive(&corpus, &split, Some(&table), spec, &cfg.fit())?;
            flatten(&mut metrics, "valid", &rep.valid);
            flatten(&mut metrics, "test", &rep.test);
            if let Some(dir) = out {
                print_metrics("valid", &rep.valid);
                print_metrics("test", &rep.test);
                model.save(dir.join("model.ckpt"))?;
                if args.emb.is_none() {
                    save_embedding_file(&table, &corpus, dir.join("embeddings.jsonl"))?;
                }
                write_mastery(&dir.join("mastery.csv"), &model.diagnose(Some(&table))?, &corpus)?;
                let report = TransductiveCommandReport {
                    command: "train",
                    scenario: s.name(),
                    config: cfg,
                    warnings,
                    stage1,
                    split: SplitSizes {
                        train: split.train.len(),
                        valid: split.valid.len(),
                        test: split.test.len(),
                    },
                    fit: rep.fit,
                    valid: rep.valid,
                    test: rep.test,
                };
                write_json(&dir.join("report.json"), &report)?;
            }
        }
        Scenario::Inductive => {
            reject(!args.source.is_empty(), "source", s)?;
            reject(args.target.is_some(), "target", s)?;
            if args.emb.is_some() {
                warn(
                    &mut warnings,
                    "--emb ignored: inductive runs retrain Stage 1 on existing students so new students stay unseen".into(),
                );
            }
            let corpus = load(require(&args.corpus, "corpus", s)?)?;
            let split = split_inductive(&corpus, cfg.seed)?;
            let spec = cfg.model_spec(ModelSpec::inductive, Head::Mirt);
            let (model, s1, rep) = run_inductive(&corpus, &split, &cfg.stage1(), spec, &cfg.fit())?;
            flatten(&mut metrics, "existing_valid", &rep.existing_valid);
            flatten(&mut metrics, "eval", &rep.eval);
            if rep.checksum_before != rep.checksum_after {
                return Err(Error::Numeric("model parameters changed during inductive inference".into()));
            }
            if let Some(dir) = out {
                print_metrics("existing valid", &rep.existing_valid);
                print_metrics("new students", &rep.eval);
                model.save(dir.join("model.ckpt"))?;
                s1.encoder.save(dir.join("encoder.ckpt"))?;
                let report = InductiveCommandReport {
                    command: "train",
                    scenario: s.name(),
                    config: cfg,
                    warnings,
                    inductive: rep,
                };
                write_json(&dir.join("report.json"), &report)?;
            }
        }
        Scenario::CrossDomain | Scenario::CrossSubject => {
            reject(args.corpus.is_some(), "corpus", s)?;
            if args.emb.is_some() {
                warn(&mut warnings, "--emb ignored: Stage 1 is trained on the source domains".into());
            }
            if args.source.is_empty() {
                return Err(Error::Invalid(format!("--source is required for the {} scenario", s.name())));
            }
            let sources = args.source.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            let target = load(require(&args.target, "target", s)?)?;
            let (support, eval) = DomainSpec::split_target(&target, cfg.support_fraction, cfg.seed);
            let n_sources = sources.len();
            let n_eval = eval.len();
            let domain = DomainSpec::new(sources, target, support, eval, s == Scenario::CrossDomain)?;
            let overlap = s == Scenario::CrossSubject && cfg.overlap_students;
            let spec = cfg.model_spec(ModelSpec::text_only, Head::Mirt);
            let outcome = run_zeroshot(&domain, &cfg.stage1(), spec, &cfg.fit(), overlap)?;
            let rep = outcome.report;
            flatten(&mut metrics, "source_valid", &rep.source_valid);
            flatten(&mut metrics, "target", &rep.target);
            if let Some(dir) = out {
                print_metrics("source valid", &rep.source_valid);
                print_metrics("target", &rep.target);
                outcome.model.save(dir.join("model.ckpt"))?;
                outcome.stage1.encoder.save(dir.join("encoder.ckpt"))?;
                save_embedding_file(&outcome.target_table, &domain.target, dir.join("target_embeddings.jsonl"))?;
                write_mastery(&dir.join("target_mastery.csv"), &outcome.mastery, &domain.target)?;
                let report = ZeroShotCommandReport {
                    command: "train",
                    scenario: s.name(),
                    config: cfg,
                    warnings,
                    sources: n_sources,
                    target_eval: n_eval,
                    zeroshot: rep,
                };
                write_json(&dir.join("report.json"), &report)?;
            }
        }
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// cat

#[derive(Serialize)]
struct CatCommandReport {
    command: &'static str,
    config: RunConfig,
    warnings: Vec<String>,
    strategy: &'static str,
    oracle: &'static str,
    stage1: Stage1Report,
    pretrain_fit: FitReport,
    pretrain_valid: SplitMetrics,
    cat: CatReport,
}

pub fn cat(a: &CatArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    run_cat_command(&a.run, None, Some(&a.out)).map(|_| ())
}

fn run_cat_command(args: &CatRunArgs, seed: Option<u64>, out: Option<&Path>) -> Result<Metrics> {
    let mut warnings = Vec::new();
    let mut cfg = load_config(&args.cfg)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(steps) = &args.steps {
        cfg.checkpoints = steps.clone();
    }
    cfg.validate()?;
    if cfg.checkpoints.is_empty() {
        return Err(Error::Invalid("at least one checkpoint step is required".into()));
    }
    if cfg.head == Some(Head::MonotoneMlp) {
        warn(&mut warnings, "adaptive testing always uses the MIRT head".into());
    }
    let strategy: Strategy = args.strategy.into();
    let corpus = load(&args.corpus)?;
    let split = split_cat(&corpus, CAT_PRETRAIN_FRACTION, cfg.cat_eval_fraction, cfg.seed)?;
    let s1 = train_stage1(&corpus, &pretrain_cut(&split, cfg.seed)?, &cfg.stage1())?;
    let table: EmbeddingTable = s1.table.quantized();
    let mut spec = ModelSpec::cat(cfg.fusion());
    spec.mlp_hidden = cfg.mlp_hidden;
    let (model, fit, pre) = pretrain_cat(&corpus, &split, Some(&table), spec, &cfg.fit())?;

    let (oracle, pool, oracle_name): (Box<dyn AnswerOracle>, PoolMode, &'static str) = match &args.planted {
        Some(path) => {
            let truth: PlantedTruth = read_json(path)?;
            if truth.theta.len() != corpus.num_students() || truth.b.len() != corpus.num_exercises() {
                return Err(Error::Shape(format!(
                    "planted parameters cover {} students and {} exercises, corpus has {} and {}",
                    truth.theta.len(),
                    truth.b.len(),
                    corpus.num_students(),
                    corpus.num_exercises()
                )));
            }
            (Box::new(PlantedOracle::new(truth.probabilities(), cfg.seed)), PoolMode::Unseen, "planted")
        }
        None => (Box::new(LoggedOracle::new(&corpus)), PoolMode::Logged, "logged"),
    };
    let rep = run_cat(&model, Some(&table), &corpus, &split, strategy, oracle.as_ref(), &cfg.cat(pool))?;
    if rep.params_checksum_before != rep.params_checksum_after {
        return Err(Error::Numeric("exercise parameters changed during the simulation".into()));
    }
    let mut metrics = Metrics::new();
    flatten(&mut metrics, "pretrain_valid", &pre);
    for c in &rep.checkpoints {
        flatten(&mut metrics, &format!("step{}", c.step), &c.metrics);
    }
    if let Some(dir) = out {
        for c in &rep.checkpoints {
            print_metrics(&format!("{} step {}", strategy.name(), c.step), &c.metrics);
        }
        let report = CatCommandReport {
            command: "cat",
            config: cfg,
            warnings,
            strategy: strategy.name(),
            oracle: oracle_name,
            stage1: s1.report,
            pretrain_fit: fit,
            pretrain_valid: pre,
            cat: rep,
        };
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Serialize)]
struct EvalReport {
    command: &'static str,
    config: RunConfig,
    split: &'static str,
    metrics: SplitMetrics,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let corpus = load(&a.corpus)?;
    let model = FusedCDModel::load(&a.checkpoint)?;
    let expected = [corpus.num_students(), corpus.num_exercises(), corpus.num_concepts()];
    if model.counts() != expected {
        return Err(Error::Shape(format!(
            "checkpoint was trained on {:?} students/exercises/concepts, corpus has {:?}",
            model.counts(),
            expected
        )));
    }
    let table = a.emb.as_ref().map(|p| load_embedding_file(p, &corpus)).transpose()?;
    if table.is_none() && model.spec.roles.iter().any(|r| r.text) {
        return Err(Error::Invalid("this checkpoint reads textual embeddings; pass --emb".into()));
    }
    let split = split_transductive(&corpus, DEFAULT_RATIOS, cfg.seed)?;
    let (name, indices) = match a.split {
        SplitArg::Train => ("train", &split.train),
        SplitArg::Valid => ("valid", &split.valid),
        SplitArg::Test => ("test", &split.test),
    };
    let mastery = model.diagnose(table.as_ref())?;
    let metrics = evaluate(&model, table.as_ref(), &corpus, indices, Some(&mastery))?;
    print_metrics(name, &metrics);
    let report = EvalReport {
        command: "eval",
        config: cfg,
        split: name,
        metrics,
    };
    write_json(&a.out, &report)
}

// ---------------------------------------------------------------------------
// seeds

#[derive(Serialize)]
struct SeedsReport {
    command: &'static str,
    run: String,
    config: RunConfig,
    seeds: Vec<u64>,
    runs: Vec<Metrics>,
    summary: BTreeMap<String, Summary>,
}

pub fn seeds(a: &SeedsArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Invalid("--n must be at least 1".into()));
    }
    let seeds: Vec<u64> = (a.start..a.start + a.n).collect();
    let (run, base) = match &a.what {
        SeedsCommand::Train(s) => (format!("train {}", s.scenario.name()), scenario_config(s, Some(a.start), &mut Vec::new())?),
        SeedsCommand::Cat(c) => {
            let mut cfg = load_config(&c.cfg)?;
            cfg.seed = a.start;
            if let Some(steps) = &c.steps {
                cfg.checkpoints = steps.clone();
            }
            (format!("cat {}", Strategy::from(c.strategy).name()), cfg)
        }
    };
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let m = match &a.what {
            SeedsCommand::Train(s) => run_scenario(s, Some(seed), None)?,
            SeedsCommand::Cat(c) => run_cat_command(c, Some(seed), None)?,
        };
        runs.push(m);
    }
    let summary = aggregate(&runs);
    for (k, s) in &summary {
        println!("{k}: {:.4} ± {:.4} (n={})", s.mean, s.std, s.n);
    }
    let report = SeedsReport {
        command: "seeds",
        run,
        config: base,
        seeds,
        runs,
        summary,
    };
    write_json(&a.out, &report)
}
