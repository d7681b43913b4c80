//! Command-line front end.
//!
//! Exit codes: 0 success, 1 any other failure, 2 usage error, bad config or
//! missing file, 3 checkpoint version mismatch, 4 unknown entity or relation
//! name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::embed::{pretrain, EmbedModel};
use crate::env::{Env, Query};
use crate::error::{Error, Result};
use crate::eval::{
    adapt_and_evaluate, beam_search, compute_metrics, robustness_sweep, AnswerRecord, MetricReport,
};
use crate::kg::{Dataset, RelationId, TaskSplit, Triple};
use crate::meta::{MetaLearner, Validation};
use crate::policy::{render_path, PolicyNet};
use crate::tensor::{Checkpoint, ParamSet};

#[derive(Debug, Parser)]
#[command(name = "metakgr", version, about = "Meta-learned multi-hop reasoning over knowledge graphs")]
pub struct Cli {
    /// key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: every core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub graph: Option<PathBuf>,
    #[arg(long, global = true)]
    pub split: Option<PathBuf>,
    #[arg(long = "reward-model", global = true)]
    pub reward_model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Few-shot frequency threshold.
    #[arg(long = "K", global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub beam: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Any config key, as key=value; repeatable.
    #[arg(long = "set", global = true, value_parser = parse_key_value)]
    pub set: Vec<(String, String)>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Fewshot,
    Normal,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse triple files into a graph checkpoint.
    Ingest {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Write the normal/few-shot task-split manifest.
    Split,
    /// Train the reward-shaping scorer on normal relations.
    Pretrain,
    /// Learn the meta-initialization over normal relations.
    MetaTrain {
        /// Training log path (default: stderr).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt a checkpoint to one relation's training triples.
    Adapt {
        #[arg(long)]
        relation: String,
    },
    /// Link-prediction metrics on test triples (x100).
    Eval {
        #[arg(long, value_enum, default_value_t = Scope::Fewshot)]
        scope: Scope,
        /// Per-query answer dump (JSON lines).
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Metrics with few-shot training triples truncated to each K.
    Sweep {
        /// Comma-separated K values; `max` keeps every triple.
        #[arg(long = "k-list")]
        k_list: Option<String>,
    },
    /// Top answers and their paths for one query.
    Explain {
        #[arg(long)]
        source: String,
        #[arg(long)]
        relation: String,
    },
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Config(_) => 2,
        Error::VersionMismatch { .. } => 3,
        Error::UnknownName { .. } => 4,
        _ => 1,
    }
}

impl Cli {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = self.set.clone();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("workers", self.workers.map(|v| v.to_string())),
            ("graph", path(&self.graph)),
            ("split", path(&self.split)),
            ("reward_model", path(&self.reward_model)),
            ("checkpoint", path(&self.checkpoint)),
            ("out", path(&self.out)),
            ("k", self.k.map(|v| v.to_string())),
            ("beam", self.beam.map(|v| v.to_string())),
            ("horizon", self.horizon.map(|v| v.to_string())),
        ];
        o.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        if let Command::Sweep { k_list: Some(ks) } = &self.command {
            o.push(("k_list".to_string(), ks.clone()));
        }
        o
    }

    pub fn resolve_config(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    eprint!("# resolved config\n{}", cfg.render());
    let workers: usize = cfg.get("workers")?;
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    match &cli.command {
        Command::Ingest { train, valid, test } => ingest(&cfg, train, valid.as_deref(), test.as_deref()),
        Command::Split => split(&cfg),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::MetaTrain { log } => meta_train(&cfg, log.as_deref()),
        Command::Adapt { relation } => adapt(&cfg, relation),
        Command::Eval { scope, answers } => eval(&cfg, *scope, answers.as_deref()),
        Command::Sweep { .. } => sweep(&cfg),
        Command::Explain { source, relation } => explain(&cfg, source, relation),
    }
}

fn path_of(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    cfg.optional::<PathBuf>(key)?
        .ok_or_else(|| Error::Config(format!("`--{}` is required", key.replace('_', "-"))))
}

fn write_out(cfg: &RunConfig, text: &str) -> Result<()> {
    match cfg.optional::<PathBuf>("out")? {
        Some(p) => std::fs::write(&p, text).map_err(|e| Error::io(&p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&path_of(cfg, "graph")?)
}

fn load_split(cfg: &RunConfig, dataset: &Dataset) -> Result<TaskSplit> {
    if let Some(p) = cfg.optional::<PathBuf>("split")? {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        return dataset.split_from_manifest(&text);
    }
    match cfg.optional::<usize>("k")? {
        Some(k) => dataset.split(k),
        None => Err(Error::Config("either `--split` or `--K` is required".into())),
    }
}

fn load_reward(cfg: &RunConfig, dataset: &Dataset) -> Result<Option<EmbedModel>> {
    let Some(p) = cfg.optional::<PathBuf>("reward_model")? else {
        return Ok(None);
    };
    let m = EmbedModel::from_checkpoint(&Checkpoint::load(&p)?)?;
    if m.num_entities() != dataset.graph.num_entities() || m.num_relations() != dataset.graph.num_relations() {
        return Err(Error::Checkpoint("reward model does not match the graph".into()));
    }
    Ok(Some(m))
}

fn load_policy(cfg: &RunConfig, dataset: &Dataset) -> Result<(PolicyNet, ParamSet)> {
    let ck = Checkpoint::load(&path_of(cfg, "checkpoint")?)?;
    let (net, params) = PolicyNet::from_checkpoint(&ck)?;
    if net.num_entities != dataset.graph.num_entities() || net.num_relations != dataset.graph.num_relations() {
        return Err(Error::Checkpoint("policy checkpoint does not match the graph".into()));
    }
    Ok((net, params))
}

fn save_policy(cfg: &RunConfig, net: &PolicyNet, params: &ParamSet, step: u64, extra: &[(&str, String)]) -> Result<()> {
    let mut ck = net.to_checkpoint(params);
    ck.seed = cfg.get("seed")?;
    ck.step = step;
    for (k, v) in extra {
        ck = ck.with_meta(k, v);
    }
    ck.save(&path_of(cfg, "out")?)
}

fn training_triples(dataset: &Dataset, r: RelationId) -> Vec<Triple> {
    dataset.train.iter().filter(|t| t.relation == r).copied().collect()
}

fn ingest(cfg: &RunConfig, train: &Path, valid: Option<&Path>, test: Option<&Path>) -> Result<()> {
    let d = Dataset::from_files(train, valid, test, cfg.get("add_inverses")?)?;
    eprintln!(
        "ingested {} entities, {} relations, {} train / {} valid / {} test triples",
        d.graph.num_entities(),
        d.graph.num_forward_relations(),
        d.train.len(),
        d.valid.len(),
        d.test.len()
    );
    d.save(&path_of(cfg, "out")?)
}

fn split(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let k: usize = cfg.get("k")?;
    let s = d.split(k)?;
    eprintln!("{} normal and {} few-shot relations", s.normal.len(), s.fewshot.len());
    write_out(cfg, &d.manifest(&s))
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let s = load_split(cfg, &d)?;
    let p = pretrain(&d.graph, &s, &cfg.pretrain_config()?)?;
    for (i, l) in p.epoch_losses.iter().enumerate() {
        eprintln!("epoch {}\tloss {l:.6}", i + 1);
    }
    let mut ck = p.model.to_checkpoint();
    ck.seed = cfg.get("seed")?;
    ck.step = p.epoch_losses.len() as u64;
    ck.save(&path_of(cfg, "out")?)
}

fn meta_train(cfg: &RunConfig, log: Option<&Path>) -> Result<()> {
    let d = load_dataset(cfg)?;
    let s = load_split(cfg, &d)?;
    let reward = load_reward(cfg, &d)?;
    let net = PolicyNet::for_graph(cfg.policy_config()?, &d.graph)?;
    let meta = cfg.meta_config()?;
    let learner = MetaLearner::new(&net, &d.graph, reward.as_ref(), meta)?;
    let mut tasks: Vec<(RelationId, Vec<Triple>, Vec<Triple>)> = Vec::new();
    for &r in s.fewshot.keys() {
        let eval: Vec<Triple> = d.valid.iter().filter(|t| t.relation == r).copied().collect();
        if !eval.is_empty() {
            tasks.push((r, training_triples(&d, r), eval));
        }
    }
    let validation = Validation {
        tasks,
        adapt_steps: cfg.get("adapt_steps")?,
        beam: cfg.beam_config()?,
        known: d.known_triples(),
    };
    let mut sink: Box<dyn std::io::Write> = match log {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stderr()),
    };
    let _ = writeln!(sink, "{}", crate::meta::MetaLogLine::HEADER);
    let init = net.init(cfg.get("seed")?);
    let out = learner.meta_train(&s.normal, init, Some(&validation), |line| {
        let _ = writeln!(sink, "{}", line.render(&d.graph));
    })?;
    save_policy(
        cfg,
        &net,
        &out.params,
        out.best_step as u64,
        &[("role", "meta-init".to_string()), ("steps_run", out.steps_run.to_string())],
    )
}

fn adapt(cfg: &RunConfig, relation: &str) -> Result<()> {
    let d = load_dataset(cfg)?;
    let r = d.graph.relation_id(relation)?;
    let (net, params) = load_policy(cfg, &d)?;
    let triples = training_triples(&d, r);
    if triples.is_empty() {
        return Err(Error::invalid(format!("relation `{relation}` has no training triples")));
    }
    let reward = load_reward(cfg, &d)?;
    let learner = MetaLearner::new(&net, &d.graph, reward.as_ref(), cfg.meta_config()?)?;
    let steps: usize = cfg.get("adapt_steps")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.get("seed")?);
    let adapted = learner.adapt_fewshot(&params, &triples, steps, &mut rng)?;
    save_policy(
        cfg,
        &net,
        &adapted,
        steps as u64,
        &[("role", "adapted".to_string()), ("relation", relation.to_string())],
    )
}

fn report_table(label_header: &str, rows: &[(String, &MetricReport)]) -> String {
    let mut s = format!("{label_header}\tcount\t{}\n", MetricReport::HEADER);
    for (label, m) in rows {
        let _ = writeln!(s, "{label}\t{}\t{}", m.count, m.row());
    }
    s
}

fn eval(cfg: &RunConfig, scope: Scope, answers_path: Option<&Path>) -> Result<()> {
    let d = load_dataset(cfg)?;
    let s = load_split(cfg, &d)?;
    let (net, params) = load_policy(cfg, &d)?;
    let reward = load_reward(cfg, &d)?;
    let meta = cfg.meta_config()?;
    let sweep = cfg.sweep_config()?;
    let mut tests: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
    for t in &d.test {
        let few = s.is_fewshot(t.relation);
        let keep = match scope {
            Scope::Fewshot => few,
            Scope::Normal => !few,
            Scope::All => true,
        };
        if keep {
            tests.entry(t.relation).or_default().push(*t);
        }
    }
    if tests.is_empty() {
        return Err(Error::invalid("no test triples in the selected scope"));
    }
    let support: BTreeMap<RelationId, Vec<Triple>> =
        s.fewshot.iter().map(|(r, ts)| (*r, ts.clone())).collect();
    let answers = adapt_and_evaluate(&net, &params, &d.graph, reward.as_ref(), &meta, &support, &tests, &sweep)?;
    let known = d.known_triples();
    let m = compute_metrics(&answers, &known, sweep.filtered)?;
    let mut rows = vec![("all".to_string(), &m)];
    let per: Vec<(String, MetricReport)> = m
        .per_relation
        .iter()
        .map(|(r, rm)| {
            (
                d.graph.relation_name(*r).to_string(),
                MetricReport {
                    mrr: rm.mrr,
                    hits1: rm.hits1,
                    hits10: rm.hits10,
                    count: rm.count,
                    per_relation: BTreeMap::new(),
                },
            )
        })
        .collect();
    rows.extend(per.iter().map(|(n, r)| (n.clone(), r)));
    if let Some(p) = answers_path {
        let top_k: usize = cfg.get("top_k")?;
        let mut text = String::new();
        for a in &answers {
            let rec = AnswerRecord::new(&d.graph, a, a.rank(&known, sweep.filtered), top_k);
            text.push_str(&serde_json::to_string(&rec).map_err(|e| Error::invalid(e.to_string()))?);
            text.push('\n');
        }
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    write_out(cfg, &report_table("relation", &rows))
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let d = load_dataset(cfg)?;
    let s = load_split(cfg, &d)?;
    let (net, params) = load_policy(cfg, &d)?;
    let reward = load_reward(cfg, &d)?;
    let rows = robustness_sweep(&d, &s, &net, &params, reward.as_ref(), &cfg.meta_config()?, &cfg.sweep_config()?)?;
    let labeled: Vec<(String, &MetricReport)> = rows.iter().map(|(k, m)| (k.to_string(), m)).collect();
    write_out(cfg, &report_table("K", &labeled))
}

fn explain(cfg: &RunConfig, source: &str, relation: &str) -> Result<()> {
    let d = load_dataset(cfg)?;
    let e = d.graph.entity_id(source)?;
    let r = d.graph.relation_id(relation)?;
    let (net, params) = load_policy(cfg, &d)?;
    let env = Env::new(&d.graph, cfg.env_config()?)?;
    let ans = beam_search(&net, &params, &env, &Query::new(e, r, None), &cfg.beam_config()?)?;
    let top_k: usize = cfg.get("top_k")?;
    let mut s = String::from("rank\tentity\tscore\tpath\n");
    for (i, c) in ans.candidates.iter().take(top_k).enumerate() {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{}",
            i + 1,
            d.graph.entity_name(c.entity),
            c.score,
            render_path(&d.graph, e, &c.path)
        );
    }
    write_out(cfg, &s)
}
