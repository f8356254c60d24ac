use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use clinli::abbrev::{expand as expand_text, expand_dataset, AbbrevTable};
use clinli::data::{parse_jsonl, read_jsonl, write_jsonl, GroupKey, NliExample};
use clinli::eval::{
    agreement_partition, predict_listwise_dataset, predict_pointwise, read_predictions, write_predictions,
    MetricsReport, PredictionRun,
};
use clinli::synth::{generate_corpus, generate_transfer_pair, split_by_premise, SynthSpec};
use clinli::training::{evaluate, run_chain, Stage, TransferChain, FORMAT_VERSION};
use clinli::{Checkpoint, ModelKind, NliModel, Tokenizer};

use crate::config::{Overrides, RunConfig, RunKind, DEFAULT_OUT_DIR};
use crate::{Classify, CmdResult, Failure, Mode, ModelArg};

pub const SPLITS: [(&str, f64); 3] = [("train", 0.8), ("dev", 0.1), ("test", 0.1)];

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!("{what} {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_dataset(path: &Path) -> anyhow::Result<Vec<NliExample>> {
    read_jsonl(path).with_context(|| format!("data: {}", path.display()))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = DEFAULT_OUT_DIR)]
    out_dir: PathBuf,
    #[arg(long)]
    examples: Option<usize>,
    /// Number of distinct findings.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    templates_per_class: Option<usize>,
    /// Word-distribution shift of the target corpus, in [0, 1].
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    id_prefix: Option<String>,
    /// Also generate a shifted target corpus of this many examples. Source
    /// and target splits go to `source/` and `target/` under the output directory.
    #[arg(long)]
    target_examples: Option<usize>,
}

fn write_splits(dir: &Path, corpus: &[NliExample]) -> anyhow::Result<()> {
    create_dir(dir)?;
    let fractions: Vec<f64> = SPLITS.iter().map(|s| s.1).collect();
    let parts = split_by_premise(corpus, &fractions).context("synth")?;
    for ((name, _), part) in SPLITS.iter().zip(&parts) {
        let path = dir.join(format!("{name}.jsonl"));
        write_jsonl(&path, part).with_context(|| format!("data: {}", path.display()))?;
        println!("{}: {} examples", path.display(), part.len());
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let mut spec = match &a.config {
        Some(p) => {
            require_file(p, "synth config")?;
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .usage()?;
            toml::from_str::<SynthSpec>(&text)
                .with_context(|| format!("synth config {}", p.display()))
                .usage()?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.examples {
        spec.examples = v;
    }
    if let Some(v) = a.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(v) = a.templates_per_class {
        spec.templates_per_class = v;
    }
    if let Some(v) = a.shift {
        spec.shift = v;
    }
    if let Some(v) = a.id_prefix {
        spec.id_prefix = v;
    }
    spec.validate().context("synth").usage()?;
    if a.target_examples == Some(0) {
        return Err(Failure::Usage(anyhow!("--target-examples must be positive")));
    }

    match a.target_examples {
        None => {
            let corpus = generate_corpus(&spec).context("synth").runtime()?;
            write_splits(&a.out_dir, &corpus).runtime()
        }
        Some(n) => {
            let (source, target) = generate_transfer_pair(&spec, spec.examples, n)
                .context("synth")
                .runtime()?;
            write_splits(&a.out_dir.join("source"), &source).runtime()?;
            write_splits(&a.out_dir.join("target"), &target).runtime()
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run description.
    #[arg(long)]
    config: PathBuf,
    /// Must agree with the config's model kind when both are given.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

pub fn run(a: RunArgs, kind: RunKind) -> CmdResult {
    require_file(&a.config, "config")?;
    let overrides = Overrides {
        model: a.model.map(Into::into),
        seed: a.seed,
        out_dir: a.out_dir,
    };
    let cfg = RunConfig::load(&a.config, kind, &overrides).usage()?;
    execute_run(&cfg).runtime()
}

fn execute_run(cfg: &RunConfig) -> anyhow::Result<()> {
    let table = cfg
        .abbreviations
        .as_ref()
        .map(|p| AbbrevTable::load(p).with_context(|| format!("abbrev: {}", p.display())))
        .transpose()?;
    let load = |p: &Path| -> anyhow::Result<Vec<NliExample>> {
        let examples = load_dataset(p)?;
        Ok(match &table {
            Some(t) => {
                let (expanded, report) = expand_dataset(&examples, t);
                log::info!("{}: {} abbreviations expanded", p.display(), report.total());
                expanded
            }
            None => examples,
        })
    };
    let stages = cfg
        .stages
        .iter()
        .map(|s| {
            Ok(Stage {
                name: s.name.clone(),
                train: load(&s.train)?,
                dev: load(&s.dev)?,
                config: s.config.clone(),
                head: s.head,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let chain = TransferChain::new(stages);
    let ck = run_chain(
        |corpus| {
            let tok = Tokenizer::train(cfg.tokenizer, corpus, cfg.wordpiece_size)?;
            NliModel::new(cfg.model.clone(), tok, cfg.seed)
        },
        &chain,
    )
    .context("training")?;
    let last = chain.stages.last().expect("validated chains are non-empty");
    let train_acc = evaluate(&ck.model, &last.train).context("training")?.accuracy;
    let summary = format!("{}, train_acc={train_acc}", ck.summary());

    let dir = &cfg.out_dir;
    create_dir(dir)?;
    let path = dir.join("model.ckpt");
    ck.save(&path)
        .with_context(|| format!("checkpoint: {}", path.display()))?;
    let path = dir.join("vocab.txt");
    ck.model
        .tokenizer()
        .vocab
        .save(&path)
        .with_context(|| format!("tokenizer: {}", path.display()))?;
    write_file(&dir.join("history.tsv"), ck.history_tsv())?;
    write_file(&dir.join("summary.txt"), format!("{summary}\n"))?;
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    mode: Mode,
    /// Fail unless the checkpoint holds this kind of model.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, default_value = DEFAULT_OUT_DIR)]
    out_dir: PathBuf,
}

/// Loads a checkpoint and checks it against the expected model kind.
fn load_checkpoint(path: &Path, expected: Option<ModelArg>) -> CmdResult<Checkpoint> {
    require_file(path, "checkpoint")?;
    let ck = Checkpoint::load(path)
        .with_context(|| format!("checkpoint: {}", path.display()))
        .runtime()?;
    if let Some(want) = expected.map(ModelKind::from) {
        if ck.kind() != want {
            return Err(Failure::Usage(anyhow!(
                "checkpoint {} holds a {} model, not {want}",
                path.display(),
                ck.kind()
            )));
        }
    }
    Ok(ck)
}

fn run_predictions(model: &NliModel, examples: &[NliExample], mode: Mode) -> PredictionRun {
    let run = match mode {
        Mode::Pointwise => predict_pointwise(model, examples),
        Mode::Listwise => predict_listwise_dataset(model, examples, &GroupKey::Premise),
    };
    for f in &run.failures {
        log::warn!("example {} ({}) not scored: {}", f.index, f.pair_id, f.message);
    }
    run
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Pointwise => "pointwise",
        Mode::Listwise => "listwise",
    }
}

pub fn predict(a: PredictArgs) -> CmdResult {
    require_file(&a.data, "dataset")?;
    let ck = load_checkpoint(&a.checkpoint, a.model)?;
    let examples = load_dataset(&a.data).runtime()?;
    let run = run_predictions(&ck.model, &examples, a.mode);

    let mut report = String::new();
    let _ = writeln!(report, "mode={}", mode_name(a.mode));
    let _ = writeln!(report, "examples={}", examples.len());
    let _ = writeln!(report, "predicted={}", run.predictions.len());
    let _ = writeln!(report, "failures={}", run.failures.len());
    if a.mode == Mode::Listwise {
        let _ = writeln!(report, "pointwise_fallbacks={}", run.pointwise_fallbacks);
    }
    create_dir(&a.out_dir).runtime()?;
    let path = a.out_dir.join("predictions.tsv");
    write_predictions(&path, &run.predictions)
        .with_context(|| format!("eval: {}", path.display()))
        .runtime()?;
    write_file(&a.out_dir.join("predict_report.txt"), &report).runtime()?;
    print!("{report}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold-labelled dataset.
    #[arg(long)]
    data: PathBuf,
    /// Predict with this checkpoint first.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score an existing prediction file.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// A second system's predictions; adds the agreement partition.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    mode: Mode,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, default_value = DEFAULT_OUT_DIR)]
    out_dir: PathBuf,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    require_file(&a.data, "dataset")?;
    if let Some(p) = &a.compare {
        require_file(p, "comparison predictions")?;
    }
    let from_checkpoint = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => Some(load_checkpoint(ck, a.model)?),
        (None, Some(p)) => {
            if a.model.is_some() || a.mode != Mode::Pointwise {
                return Err(Failure::Usage(anyhow!(
                    "--model and --mode apply only with --checkpoint"
                )));
            }
            require_file(p, "predictions")?;
            None
        }
        (None, None) => return Err(Failure::Usage(anyhow!("give --checkpoint or --predictions"))),
    };

    let golds = load_dataset(&a.data).runtime()?;
    create_dir(&a.out_dir).runtime()?;
    let (preds, run) = match (&from_checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let run = run_predictions(&ck.model, &golds, a.mode);
            let path = a.out_dir.join("predictions.tsv");
            write_predictions(&path, &run.predictions)
                .with_context(|| format!("eval: {}", path.display()))
                .runtime()?;
            (run.predictions.clone(), Some(run))
        }
        (None, Some(p)) => {
            let preds = read_predictions(p)
                .with_context(|| format!("eval: {}", p.display()))
                .runtime()?;
            (preds, None)
        }
        (None, None) => unreachable!("checked above"),
    };

    let mut report = MetricsReport::compute(&preds, &golds).context("eval").runtime()?;
    if let Some(run) = &run {
        report.failures = run.failures.len();
        if a.mode == Mode::Listwise {
            report.pointwise_fallbacks = Some(run.pointwise_fallbacks);
        }
    }
    if let Some(p) = &a.compare {
        let other = read_predictions(p)
            .with_context(|| format!("eval: {}", p.display()))
            .runtime()?;
        let part = agreement_partition(&preds, &other, &golds).context("eval").runtime()?;
        report.agreement = Some(part);
    }
    write_file(&a.out_dir.join("metrics.txt"), report.to_key_values()).runtime()?;
    print!("{}", report.to_text());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long)]
    data: PathBuf,
    /// `surface<TAB>expansion` file, or `demo` for the bundled table.
    #[arg(long)]
    table: String,
    #[arg(long, default_value = DEFAULT_OUT_DIR)]
    out_dir: PathBuf,
}

/// Rewrites the sentence fields of changed lines and copies every other
/// line through untouched, so extra keys and formatting survive.
fn expand_lines(text: &str, table: &AbbrevTable) -> anyhow::Result<String> {
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() {
            out.push_str(line);
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(body).with_context(|| format!("data: line {}", i + 1))?;
        let mut changed = false;
        for key in ["sentence1", "sentence2"] {
            if let Some(s) = value.get(key).and_then(|v| v.as_str()) {
                let expanded = expand_text(s, table);
                if expanded != s {
                    value[key] = expanded.into();
                    changed = true;
                }
            }
        }
        if changed {
            out.push_str(&serde_json::to_string(&value)?);
            out.push_str(&line[body.len()..]);
        } else {
            out.push_str(line);
        }
    }
    Ok(out)
}

pub fn expand(a: ExpandArgs) -> CmdResult {
    require_file(&a.data, "dataset")?;
    let table = if a.table == "demo" {
        AbbrevTable::demo()
    } else {
        let path = Path::new(&a.table);
        require_file(path, "abbreviation table")?;
        AbbrevTable::load(path)
            .with_context(|| format!("abbrev: {}", path.display()))
            .runtime()?
    };
    let text = fs::read_to_string(&a.data)
        .with_context(|| format!("reading {}", a.data.display()))
        .runtime()?;
    let examples = parse_jsonl(&text)
        .with_context(|| format!("data: {}", a.data.display()))
        .runtime()?;
    let (_, report) = expand_dataset(&examples, &table);
    let expanded = expand_lines(&text, &table).runtime()?;

    create_dir(&a.out_dir).runtime()?;
    write_file(&a.out_dir.join("expanded.jsonl"), expanded).runtime()?;
    write_file(&a.out_dir.join("expansion_counts.tsv"), report.to_tsv()).runtime()?;
    println!(
        "{} replacements in {} of {} examples",
        report.total(),
        report.examples_changed,
        examples.len()
    );
    Ok(())
}

pub fn inspect(path: &Path) -> CmdResult {
    let ck = load_checkpoint(path, None)?;
    let describe = || -> anyhow::Result<String> {
        let store = ck.model.params();
        let mut s = String::new();
        writeln!(s, "kind={}", ck.kind())?;
        writeln!(s, "format_version={FORMAT_VERSION}")?;
        writeln!(s, "provenance={}", ck.provenance.join(","))?;
        let tok = ck.model.tokenizer();
        writeln!(
            s,
            "tokenizer={}",
            serde_json::to_value(tok.mode)?.as_str().unwrap_or_default()
        )?;
        writeln!(s, "vocab_size={}", tok.vocab.len())?;
        writeln!(s, "parameter_tensors={}", store.len())?;
        writeln!(s, "parameters={}", store.numel())?;
        writeln!(s, "optimizer_step={}", ck.optimizer.step)?;
        writeln!(s, "evaluations={}", ck.history.len())?;
        if let Some(b) = ck.best {
            writeln!(s, "best_step={}", b.step)?;
        }
        writeln!(s, "{}", ck.summary())?;
        writeln!(s, "model_config={}", serde_json::to_string(ck.model.config())?)?;
        writeln!(s, "train_config={}", serde_json::to_string(&ck.train_config)?)?;
        Ok(s)
    };
    print!("{}", describe().runtime()?);
    Ok(())
}
