// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::config::RunConfig;
use crate::baselines::{
    train_contrastive_prefixes, train_offense_classifier, train_prefix_tuning, train_stance_bank,
    BankLossRow, OffenseClassifier, RouteRecord,
};
use crate::corpus::{
    dialogue_context, dialogue_target, generate_corpus, prepare_classifier_split,
    prepare_prefix_split, read_corpus, split_path, write_corpus, Corpus, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, compare, generate_set, split_hash, Comparison, Controller, EvalReport,
    GenerationSet,
};
use crate::prefix::{
    load_artifact, save_artifact, to_kv, ArtifactHeader, ControlArtifact, MetaInference,
    PrefixBank, ReparamPrefix,
};
use crate::tensor::Mat;
use crate::tinylm::{
    init_lm, load_checkpoint, save_checkpoint, train_lm, Checkpoint, LmConfig, LmTrainConfig,
};
use crate::training::{
    margin_report, train_hierarchical, train_toxicity_bank, write_loss_trace, Ablation,
    TrainExample,
};

/// Evaluated methods, in the order reports are produced.
pub const METHODS: [&str; 8] = [
    "uncontrolled",
    "ours",
    "prefix_tuning",
    "contrastive",
    "clsgen",
    "ablation_no_Ls",
    "ablation_no_Lc",
    "ablation_no_both",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Base,
    Reference,
    Toxicity,
    /// The hierarchical model; `Full` is the main method.
    Hierarchical(Ablation),
    PrefixTuning,
    Contrastive,
    ClsGen,
}

impl Target {
    /// Training order of the full grid.
    pub const ALL: [Target; 10] = [
        Target::Base,
        Target::Reference,
        Target::Toxicity,
        Target::Hierarchical(Ablation::Full),
        Target::PrefixTuning,
        Target::Contrastive,
        Target::ClsGen,
        Target::Hierarchical(Ablation::NoLs),
        Target::Hierarchical(Ablation::NoLc),
        Target::Hierarchical(Ablation::NoBoth),
    ];

    /// Accepts `base`, `reference`, `toxicity`, `ours`, `prefix_tuning`,
    /// `contrastive`, `clsgen` and `ablation:<variant>`.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => Target::Base,
            "reference" => Target::Reference,
            "toxicity" => Target::Toxicity,
            "ours" => Target::Hierarchical(Ablation::Full),
            "prefix_tuning" => Target::PrefixTuning,
            "contrastive" => Target::Contrastive,
            "clsgen" => Target::ClsGen,
            other => match other.strip_prefix("ablation:") {
                Some(v) => Target::Hierarchical(Ablation::parse(v)?),
                None => return Err(Error::Config(format!("unknown train target {other:?}"))),
            },
        })
    }

    pub fn name(self) -> String {
        match self {
            Target::Base => "base".into(),
            Target::Reference => "reference".into(),
            Target::Toxicity => "toxicity".into(),
            Target::Hierarchical(Ablation::Full) => "ours".into(),
            Target::Hierarchical(a) => format!("ablation_{}", a.as_str()),
            Target::PrefixTuning => "prefix_tuning".into(),
            Target::Contrastive => "contrastive".into(),
            Target::ClsGen => "clsgen".into(),
        }
    }

    pub fn path(self, cfg: &RunConfig) -> PathBuf {
        match self {
            Target::Base | Target::Reference => {
                cfg.ckpt_dir().join(format!("{}.json", self.name()))
            }
            _ => cfg.artifact_dir().join(format!("{}.json", self.name())),
        }
    }

    pub fn trace_path(self, cfg: &RunConfig) -> PathBuf {
        self.path(cfg)
            .with_file_name(format!("{}_loss.csv", self.name()))
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitSummary {
    pub split: &'static str,
    pub n: usize,
    pub offensive_contexts: usize,
    pub offensive_responses: usize,
    pub supportive: usize,
    pub neutral: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub dir: PathBuf,
    pub vocab_size: usize,
    /// False when an identical corpus already existed.
    pub written: bool,
    pub splits: Vec<SplitSummary>,
}

impl fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verb = if self.written {
            "wrote"
        } else {
            "kept existing"
        };
        writeln!(
            f,
            "{verb} corpus in {} (vocabulary {})",
            self.dir.display(),
            self.vocab_size
        )?;
        writeln!(
            f,
            "{:<18} {:>6} {:>8} {:>8} {:>8} {:>8}",
            "split", "n", "t_c=1", "t_r=1", "s_r=1", "neutral"
        )?;
        for s in &self.splits {
            writeln!(
                f,
                "{:<18} {:>6} {:>8} {:>8} {:>8} {:>8}",
                s.split, s.n, s.offensive_contexts, s.offensive_responses, s.supportive, s.neutral
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub target: String,
    pub path: PathBuf,
    pub hash: String,
    pub final_loss: Option<f64>,
}

fn summarize(corpus: &Corpus, dir: &Path, written: bool) -> CorpusSummary {
    let splits = Split::ALL
        .iter()
        .map(|&s| {
            let xs = corpus.split(s);
            SplitSummary {
                split: s.name(),
                n: xs.len(),
                offensive_contexts: xs.iter().filter(|e| e.t_c).count(),
                offensive_responses: xs.iter().filter(|e| e.t_r).count(),
                supportive: xs.iter().filter(|e| e.s_r == Some(true)).count(),
                neutral: xs.iter().filter(|e| e.s_r.is_none()).count(),
            }
        })
        .collect();
    CorpusSummary {
        dir: dir.to_path_buf(),
        vocab_size: corpus.vocab.len(),
        written,
        splits,
    }
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        Err(Error::AlreadyExists(path.to_path_buf()))
    } else {
        Ok(())
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// The resolved config as embedded in outputs. The run directory is left
/// out so that relocating a run does not change any byte.
fn manifest_config(cfg: &RunConfig) -> serde_json::Value {
    let mut c = cfg.clone();
    c.run_dir = PathBuf::new();
    serde_json::to_value(c).expect("config serializes")
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct StepLoss {
    step: usize,
    loss: f64,
}

fn step_rows(trace: &[f64]) -> Vec<StepLoss> {
    trace
        .iter()
        .enumerate()
        .map(|(step, &loss)| StepLoss { step, loss })
        .collect()
}

/// Generate and write the corpus. An existing corpus with the same config is
/// left alone; a different one needs `force`.
pub fn cmd_corpus(cfg: &RunConfig, force: bool) -> Result<CorpusSummary> {
    let dir = cfg.corpus_dir();
    let exists = Split::ALL.iter().any(|&s| split_path(&dir, s).exists());
    if exists && !force {
        let existing = read_corpus(&dir)?;
        if existing.config == cfg.corpus {
            return Ok(summarize(&existing, &dir, false));
        }
        return Err(Error::AlreadyExists(dir));
    }
    let corpus = generate_corpus(&cfg.corpus)?;
    if corpus.vocab.len() != cfg.lm.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} tokens, model expects {}",
            corpus.vocab.len(),
            cfg.lm.vocab
        )));
    }
    write_corpus(&corpus, &dir)?;
    Ok(summarize(&corpus, &dir, true))
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = cfg.corpus_dir();
    require(&split_path(&dir, Split::TrainPrefix))?;
    let corpus = read_corpus(&dir)?;
    if corpus.vocab.len() != cfg.lm.vocab {
        return Err(Error::HeaderMismatch(format!(
            "corpus vocabulary {} does not match lm.vocab {}",
            corpus.vocab.len(),
            cfg.lm.vocab
        )));
    }
    Ok(corpus)
}

fn load_backbone(cfg: &RunConfig, target: Target) -> Result<Checkpoint> {
    let path = target.path(cfg);
    require(&path)?;
    load_checkpoint(&path)
}

fn load_control(cfg: &RunConfig, target: Target, backbone: &Checkpoint) -> Result<ControlArtifact> {
    let a = load_artifact(&target.path(cfg))?;
    a.check_backbone(&backbone.params, &backbone.hash)?;
    Ok(a)
}

/// The raw training dialogues as `[BOS] c [SEP] r [EOS]`.
fn lm_sequences(corpus: &Corpus) -> Vec<Vec<u32>> {
    corpus
        .train_classifier
        .iter()
        .chain(&corpus.train_prefix)
        .map(|e| {
            let mut s = dialogue_context(&corpus.vocab, &e.c);
            s.extend(dialogue_target(&corpus.vocab, &e.r));
            s
        })
        .collect()
}

fn prefix_examples(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<TrainExample>> {
    let balanced = prepare_prefix_split(&corpus.train_prefix, cfg.seed)?;
    TrainExample::from_split(&balanced, &corpus.vocab)
}

fn header(cfg: &RunConfig) -> ArtifactHeader {
    ArtifactHeader {
        m: cfg.prefix.len,
        n_layers: cfg.lm.n_layers,
        hidden: cfg.lm.hidden,
        p: cfg.prefix.hidden,
    }
}

fn put_reparam(state: &mut BTreeMap<String, Mat>, name: &str, p: &ReparamPrefix) {
    state.insert(format!("{name}.h"), p.h_small().clone());
    state.insert(format!("{name}.w"), p.w().clone());
}

fn take_bank(a: &ControlArtifact, name: &str) -> Result<PrefixBank> {
    let entry = |k: usize| -> Result<ReparamPrefix> {
        ReparamPrefix::new(
            a.state(&format!("{name}.{k}.h"))?.clone(),
            a.state(&format!("{name}.{k}.w"))?.clone(),
        )
    };
    PrefixBank::new(entry(0)?, entry(1)?)
}

/// Verify that training left the backbone untouched.
fn check_frozen(backbone: &Checkpoint) -> Result<String> {
    let after = backbone.params.content_hash();
    if after != backbone.hash {
        return Err(Error::Mismatch(format!(
            "backbone hash changed during prefix training: {} -> {after}",
            backbone.hash
        )));
    }
    Ok(after)
}

fn train_backbone(
    cfg: &RunConfig,
    corpus: &Corpus,
    lm_cfg: &LmConfig,
    train: &LmTrainConfig,
    target: Target,
) -> Result<TrainOutcome> {
    let mut params = init_lm(lm_cfg)?;
    let trace = train_lm(&mut params, &lm_sequences(corpus), train)?;
    let manifest = json!({
        "target": target.name(),
        "config": manifest_config(cfg),
        "corpus_hash": split_hash(&corpus.train_classifier),
        "final_loss": trace.last(),
    });
    let path = target.path(cfg);
    let hash = save_checkpoint(&params.frozen(), &manifest, &path)?;
    write_csv(&step_rows(&trace), &target.trace_path(cfg))?;
    Ok(TrainOutcome {
        target: target.name(),
        path,
        hash,
        final_loss: trace.last().copied(),
    })
}

fn finish(
    cfg: &RunConfig,
    target: Target,
    mut a: ControlArtifact,
    final_loss: Option<f64>,
) -> Result<TrainOutcome> {
    if a.manifest.is_null() {
        a.manifest = json!({});
    }
    a.manifest["config"] = manifest_config(cfg);
    a.manifest["target"] = json!(target.name());
    let path = target.path(cfg);
    let hash = save_artifact(&a, &path)?;
    Ok(TrainOutcome {
        target: target.name(),
        path,
        hash,
        final_loss,
    })
}

/// Train one target and persist it with its loss trace.
pub fn cmd_train(cfg: &RunConfig, target: Target, force: bool) -> Result<TrainOutcome> {
    guard(&target.path(cfg), force)?;
    let corpus = load_corpus(cfg)?;
    match target {
        Target::Base => return train_backbone(cfg, &corpus, &cfg.lm, &cfg.base_train, target),
        Target::Reference => {
            return train_backbone(
                cfg,
                &corpus,
                &cfg.reference_lm(),
                &cfg.reference_train,
                target,
            )
        }
        _ => {}
    }
    let backbone = load_backbone(cfg, Target::Base)?;
    let lm = &backbone.params;
    let mut art = ControlArtifact::new(&target.name(), header(cfg), &backbone.hash);
    let final_loss;
    match target {
        Target::Base | Target::Reference => unreachable!("handled above"),
        Target::Toxicity => {
            let ex = prefix_examples(cfg, &corpus)?;
            let run = train_toxicity_bank(lm, &ex, &cfg.prefix, &cfg.toxicity)?;
            for k in [false, true] {
                art.tensors
                    .insert(format!("toxicity.{}", u8::from(k)), run.bank.materialize(k));
                put_reparam(
                    &mut art.training_state,
                    &format!("toxicity.{}", u8::from(k)),
                    run.bank.entry(k),
                );
            }
            write_csv(&run.trace, &target.trace_path(cfg))?;
            final_loss = run.trace.last().map(|r: &BankLossRow| r.total);
            art.manifest = json!({ "loss": { "lm_weight": cfg.toxicity.lm_weight, "disc_weight": cfg.toxicity.disc_weight } });
        }
        Target::Hierarchical(ablation) => {
            let tox_art = load_control(cfg, Target::Toxicity, &backbone)?;
            let tox_init = take_bank(&tox_art, "toxicity")?;
            let ex = prefix_examples(cfg, &corpus)?;
            let mut train = cfg.train.clone();
            train.ablation = ablation;
            let run = train_hierarchical(lm, &ex, &tox_init, &cfg.prefix, &cfg.weights, &train)?;
            let margins = margin_report(lm, &run.meta, &corpus.dev, &corpus.vocab)?;
            let inf = MetaInference::from_model(&run.meta);
            art.tensors.insert("meta.prefix.0".into(), inf.prefix);
            art.tensors
                .insert("readout.embeddings".into(), inf.readout_embeddings);
            art.tensors
                .insert("readout.projection".into(), inf.readout_projection);
            art.tensors
                .insert("toxicity.0".into(), run.tox.materialize(false));
            write_loss_trace(&run.trace, &target.trace_path(cfg))?;
            final_loss = run.trace.last().map(|r| r.total);
            art.manifest = json!({
                "ablation": ablation.as_str(),
                "weights": cfg.weights,
                "effective_weights": ablation.effective(&cfg.weights),
                "toxicity_hash": tox_art.hash,
                "dev_margins": margins,
            });
        }
        Target::PrefixTuning => {
            let ex = prefix_examples(cfg, &corpus)?;
            let run = train_prefix_tuning(lm, &ex, &cfg.prefix, &cfg.prefix_tuning)?;
            art.tensors
                .insert("prefix".into(), run.prefix.materialize());
            write_csv(&step_rows(&run.trace), &target.trace_path(cfg))?;
            final_loss = run.trace.last().copied();
            art.manifest =
                json!({ "n_safe": ex.iter().filter(|e| crate::baselines::is_safe(e)).count() });
        }
        Target::Contrastive => {
            let ex = prefix_examples(cfg, &corpus)?;
            let run = train_contrastive_prefixes(lm, &ex, &cfg.prefix, &cfg.contrastive)?;
            art.tensors
                .insert("prefix.0".into(), run.bank.materialize(false));
            art.tensors
                .insert("prefix.1".into(), run.bank.materialize(true));
            write_csv(&run.trace, &target.trace_path(cfg))?;
            final_loss = run.trace.last().map(|r| r.total);
            art.manifest = json!({ "loss": { "lm_weight": cfg.contrastive.lm_weight, "disc_weight": cfg.contrastive.disc_weight } });
        }
        Target::ClsGen => {
            let tox_art = load_control(cfg, Target::Toxicity, &backbone)?;
            let ex = prefix_examples(cfg, &corpus)?;
            let run = train_stance_bank(lm, &ex, &cfg.prefix, &cfg.stance)?;
            let cls_train = prepare_classifier_split(&corpus.train_classifier, cfg.seed)?;
            let clf = train_offense_classifier(&cls_train, corpus.vocab.len(), &cfg.classifier)?;
            let train_metrics = clf.evaluate(&corpus.train_classifier)?;
            let test_metrics = clf.evaluate(&corpus.test)?;
            art.tensors.extend(clf.to_tensors());
            art.tensors
                .insert("toxicity.0".into(), tox_art.tensor("toxicity.0")?.clone());
            art.tensors
                .insert("stance.0".into(), run.bank.materialize(false));
            write_csv(&run.trace, &target.trace_path(cfg))?;
            final_loss = run.trace.last().map(|r| r.total);
            art.manifest = json!({
                "toxicity_hash": tox_art.hash,
                "concat_order": cfg.concat_order,
                "threshold": cfg.classifier.threshold,
                "classifier_train": train_metrics,
                "classifier_test": test_metrics,
            });
        }
    }
    art.manifest["backbone_hash_after"] = json!(check_frozen(&backbone)?);
    finish(cfg, target, art, final_loss)
}

fn controller(
    cfg: &RunConfig,
    method: &str,
    backbone: &Checkpoint,
) -> Result<(Controller, Option<String>)> {
    if method == "uncontrolled" {
        return Ok((Controller::Uncontrolled, None));
    }
    let target = Target::parse(match method {
        m if m.starts_with("ablation_") => return ablation_controller(cfg, m, backbone),
        m => m,
    })?;
    let a = load_control(cfg, target, backbone)?;
    let lm_cfg = &backbone.params.config;
    let c = match target {
        Target::Hierarchical(_) => hierarchical(&a)?,
        Target::PrefixTuning => Controller::Static(to_kv(a.tensor("prefix")?, lm_cfg)?),
        Target::Contrastive => Controller::Static(to_kv(a.tensor("prefix.0")?, lm_cfg)?),
        Target::ClsGen => Controller::ClsGen {
            classifier: OffenseClassifier::from_tensors(&a.tensors, cfg.classifier.threshold)?,
            toxicity: a.tensor("toxicity.0")?.clone(),
            stance: a.tensor("stance.0")?.clone(),
            order: cfg.concat_order,
        },
        other => return Err(Error::Config(format!("{other} is not an evaluable method"))),
    };
    Ok((c, Some(a.hash)))
}

fn ablation_controller(
    cfg: &RunConfig,
    method: &str,
    backbone: &Checkpoint,
) -> Result<(Controller, Option<String>)> {
    let variant = method.trim_start_matches("ablation_");
    let target = Target::Hierarchical(Ablation::parse(variant)?);
    let a = load_control(cfg, target, backbone)?;
    Ok((hierarchical(&a)?, Some(a.hash)))
}

fn hierarchical(a: &ControlArtifact) -> Result<Controller> {
    Ok(Controller::Hierarchical {
        meta: MetaInference {
            prefix: a.tensor("meta.prefix.0")?.clone(),
            readout_embeddings: a.tensor("readout.embeddings")?.clone(),
            readout_projection: a.tensor("readout.projection")?.clone(),
        },
        toxicity: a.tensor("toxicity.0")?.clone(),
    })
}

/// The frozen backbone and the trained controller of `method`.
pub fn load_method(cfg: &RunConfig, method: &str) -> Result<(Checkpoint, Controller)> {
    let backbone = load_backbone(cfg, Target::Base)?;
    let (c, _) = controller(cfg, method, &backbone)?;
    Ok((backbone, c))
}

fn report_path(cfg: &RunConfig, method: &str) -> PathBuf {
    cfg.report_dir().join(format!("{method}.json"))
}

fn write_routes(routes: &[RouteRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in routes {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Generate on the test split and write one report per method.
pub fn cmd_eval(cfg: &RunConfig, methods: &[&str], force: bool) -> Result<Vec<EvalReport>> {
    for m in methods {
        if !METHODS.contains(m) {
            return Err(Error::Config(format!("unknown method {m:?}")));
        }
        guard(&report_path(cfg, m), force)?;
    }
    let corpus = load_corpus(cfg)?;
    let backbone = load_backbone(cfg, Target::Base)?;
    let reference = load_backbone(cfg, Target::Reference)?;
    let lm = &backbone.params;
    let test = &corpus.test;
    let (uncontrolled, _) = generate_set(
        lm,
        &Controller::Uncontrolled,
        &corpus.vocab,
        test,
        &cfg.gen,
        cfg.seed,
        "uncontrolled",
    )?;
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let (ctrl, artifact_hash) = controller(cfg, m, &backbone)?;
        let (set, routes): (GenerationSet, Vec<RouteRecord>) = if m == "uncontrolled" {
            (uncontrolled.clone(), Vec::new())
        } else {
            generate_set(lm, &ctrl, &corpus.vocab, test, &cfg.gen, cfg.seed, m)?
        };
        if !routes.is_empty() {
            write_routes(&routes, &cfg.report_dir().join(format!("{m}_routes.jsonl")))?;
        }
        let manifest = json!({
            "config": manifest_config(cfg),
            "run_seed": cfg.seed,
            "backbone_hash": backbone.hash,
            "reference_hash": reference.hash,
            "artifact_hash": artifact_hash,
            "test_hash": split_hash(test),
        });
        let baseline = (m != "uncontrolled").then_some(&uncontrolled);
        let report = build_report(
            m,
            test,
            &set,
            baseline,
            &reference.params,
            &corpus.vocab,
            &routes,
            manifest,
        )?;
        report.write(&report_path(cfg, m))?;
        out.push(report);
    }
    Ok(out)
}

/// Read the reports of `methods` and write the comparison table as CSV and
/// text.
pub fn cmd_compare(cfg: &RunConfig, methods: &[&str]) -> Result<Comparison> {
    let reports = methods
        .iter()
        .map(|m| EvalReport::read(&report_path(cfg, m)))
        .collect::<Result<Vec<_>>>()?;
    let c = compare(&reports)?;
    let dir = cfg.report_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let csv_path = dir.join("comparison.csv");
    fs::write(&csv_path, c.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = dir.join("comparison.txt");
    fs::write(&txt_path, c.render()).map_err(|e| Error::io(&txt_path, e))?;
    Ok(c)
}

/// Corpus, every training target, every evaluation, comparison. `progress`
/// receives one line per finished stage.
pub fn cmd_all(cfg: &RunConfig, force: bool, mut progress: impl FnMut(&str)) -> Result<Comparison> {
    let summary = cmd_corpus(cfg, force)?;
    progress(&summary.to_string());
    for t in Target::ALL {
        let o = cmd_train(cfg, t, force)?;
        progress(&format!(
            "trained {:<18} final loss {}",
            o.target,
            o.final_loss
                .map_or_else(|| "-".into(), |l| format!("{l:.4}"))
        ));
    }
    cmd_eval(cfg, &METHODS, force)?;
    progress("evaluated all methods");
    cmd_compare(cfg, &METHODS)
}
