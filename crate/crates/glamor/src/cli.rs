//! Command-line definitions and command implementations. Each command
//! removes any stale run manifest from its output directory first and
//! writes a fresh one last, after every artifact it lists.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use glamor_core::datamodel::{Attribute, DatasetView, Sample, Split};
use glamor_core::metrics::{MapCmc, Protocol};
use glamor_core::teaming::{GateDecision, PolicyMode, ProxyGate, RoutingPolicy};
use glamor_core::training::{train_with_observer, CheckpointReason, ProxyClasses, Recipe, TrainObserver, TrainState};
use serde_json::{json, Value};

use crate::checkpoint::{self, write_atomic};
use crate::config::{parse_set, read_entries, Entries, ResolvedConfig};
use crate::dataset::{self, DatasetSource, Layout, PreparedDataset};
use crate::error::{Error, IoContext, Result};
use crate::plot;
use crate::report::{self, EvalSplit, RunManifest};
use crate::team::{ExpertSpec, Team};

#[derive(Debug, Parser)]
#[command(
    name = "glamor",
    version,
    about = "Teamed vehicle identification: datasets, training, evaluation and expert teams"
)]
pub struct Cli {
    /// CI mode: every command that consumes randomness requires --seed.
    #[arg(long, global = true)]
    pub ci: bool,
    /// Seed for all randomness (synthetic data, training, k-means).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset or ingest a dataset directory.
    Prepare(PrepareArgs),
    /// Train an embedding model with a recipe.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a prepared dataset.
    Eval(EvalArgs),
    /// Assemble, extend and run expert teams.
    #[command(subcommand)]
    Team(TeamCommand),
    /// Collect metrics from several runs into a table and bar charts.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Synthetic dataset spec, e.g. "brands=4 ids=5 views=8 seed=7".
    #[arg(long, conflicts_with_all = ["layout", "root"])]
    pub synthetic: Option<String>,
    /// Directory layout: cars196 or veri776.
    #[arg(long, requires = "root")]
    pub layout: Option<String>,
    /// Dataset root directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Square image size samples are resized to.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// brand_proxynca or reid_triplet.
    #[arg(long)]
    pub recipe: Option<String>,
    /// desk or full.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override any config key, e.g. --set base_lr=0.002 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// cars196_zsl or veri776; defaults to the dataset's own protocol.
    #[arg(long)]
    pub protocol: Option<String>,
    /// test (held-out identities) or train (leave-one-out on train data).
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the ranked retrieval list as rankings.csv.
    #[arg(long)]
    pub rankings: bool,
    /// Ranked entries kept per query in rankings.csv.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Write SVG plots of the metrics.
    #[arg(long)]
    pub plots: bool,
}

#[derive(Debug, Subcommand)]
pub enum TeamCommand {
    /// Build a team directory from gate and expert checkpoints.
    Assemble(AssembleArgs),
    /// Register a new expert in an existing team.
    AddExpert(AddExpertArgs),
    /// Route samples and dump the gate decisions.
    Route(RouteArgs),
    /// Gate, expert embedding and ranking for query against gallery.
    Identify(IdentifyArgs),
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    /// Team directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Gate checkpoint (repeatable, one per attribute).
    #[arg(long = "gate")]
    pub gates: Vec<PathBuf>,
    /// Expert as id:predicate:checkpoint, predicate `any` or e.g. `brand=2`
    /// (repeatable).
    #[arg(long = "expert", required = true)]
    pub experts: Vec<String>,
    /// single_best or per_dimension.
    #[arg(long, default_value = "single_best")]
    pub policy: String,
    /// Gate confidence below which inputs go to the default expert.
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Dimension precedence, e.g. brand,color,type.
    #[arg(long, default_value = "brand,color,type")]
    pub priority: String,
}

#[derive(Debug, Args)]
pub struct AddExpertArgs {
    #[arg(long)]
    pub team: PathBuf,
    /// Expert as id:predicate:checkpoint.
    #[arg(long)]
    pub expert: String,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub team: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// test, train or all.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub team: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// cars196_zsl or veri776; veri776 drops same-camera matches.
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub rankings: bool,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories holding a manifest.json with metrics.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let needs_seed = match &cli.command {
        Command::Prepare(a) => a.synthetic.as_deref().is_some_and(|s| !s.contains("seed=")),
        Command::Train(_) | Command::Eval(_) => true,
        Command::Team(_) | Command::Report(_) => false,
    };
    let out = match &cli.command {
        Command::Prepare(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Eval(a) => &a.out,
        Command::Team(TeamCommand::Assemble(a)) => &a.out,
        Command::Team(TeamCommand::AddExpert(a)) => &a.team,
        Command::Team(TeamCommand::Route(a)) => &a.out,
        Command::Team(TeamCommand::Identify(a)) => &a.out,
        Command::Report(a) => &a.out,
    };
    if out.is_dir() {
        RunManifest::clear(out)?;
    }
    if cli.ci && needs_seed && cli.seed.is_none() {
        return Err(Error::Usage("--seed is required in CI mode".into()));
    }
    match cli.command {
        Command::Prepare(a) => prepare(&a, cli.seed),
        Command::Train(a) => train(&a, cli.seed),
        Command::Eval(a) => eval(&a, cli.seed.unwrap_or(0)),
        Command::Team(TeamCommand::Assemble(a)) => team_assemble(&a),
        Command::Team(TeamCommand::AddExpert(a)) => team_add_expert(&a),
        Command::Team(TeamCommand::Route(a)) => team_route(&a),
        Command::Team(TeamCommand::Identify(a)) => team_identify(&a),
        Command::Report(a) => report_runs(&a),
    }
}

fn start(out: &Path) -> Result<()> {
    fs::create_dir_all(out).at(out)
}

fn write_text(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    manifest.add(path);
    Ok(())
}

pub fn prepare(args: &PrepareArgs, seed: Option<u64>) -> Result<PathBuf> {
    let source = match (&args.synthetic, &args.layout, &args.root) {
        (Some(spec), None, None) => DatasetSource::parse_synthetic(spec, seed)?,
        (None, Some(layout), Some(root)) => DatasetSource::Directory {
            layout: Layout::parse(layout)
                .ok_or_else(|| Error::Usage(format!("unknown layout `{layout}`, expected cars196 or veri776")))?,
            root: fs::canonicalize(root)
                .map_err(|_| Error::Ingest(format!("dataset root {} does not exist", root.display())))?,
            resolution: args.resolution,
        },
        _ => return Err(Error::Usage("prepare needs --synthetic SPEC or --layout LAYOUT --root DIR".into())),
    };
    let view = source.load()?;
    start(&args.out)?;
    let prepared = PreparedDataset { fingerprint: dataset::fingerprint(&view), source };
    let mut manifest = RunManifest::new("prepare");
    manifest.dataset_fingerprint = Some(prepared.fingerprint.clone());
    manifest.add(prepared.write(&args.out)?);
    let ids = args.out.join(dataset::IDENTITY_MAP_FILE);
    dataset::write_identity_map(&view, &ids)?;
    manifest.add(ids);
    let stats = dataset::stats(&view);
    let stats_path = args.out.join(dataset::STATS_FILE);
    report::write_json(&stats, &stats_path)?;
    manifest.add(stats_path);
    manifest.metrics = Some(stats);
    manifest.write(&args.out)
}

struct CheckpointWriter {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(
        &mut self,
        reason: CheckpointReason,
        model: &glamor_core::model::EmbeddingModel,
        _state: &TrainState,
    ) -> glamor_core::Result<()> {
        let path = self.dir.join(format!("{}.{}", reason.tag(), checkpoint::EXTENSION));
        checkpoint::write_model(model, &path).map_err(|e| glamor_core::Error::Checkpoint(e.to_string()))?;
        if !self.written.contains(&path) {
            self.written.push(path);
        }
        Ok(())
    }
}

/// Flag entries for config resolution, in the order they take effect.
pub fn train_flag_entries(args: &TrainArgs, seed: Option<u64>) -> Result<Entries> {
    let mut flags = Vec::new();
    if let Some(p) = &args.profile {
        flags.push(("profile".to_string(), p.clone()));
    }
    if let Some(r) = &args.recipe {
        flags.push(("recipe".to_string(), r.clone()));
    }
    if let Some(e) = args.epochs {
        flags.push(("total_epochs".to_string(), e.to_string()));
    }
    if let Some(s) = seed {
        flags.push(("seed".to_string(), s.to_string()));
    }
    for s in &args.sets {
        flags.push(parse_set(s)?);
    }
    Ok(flags)
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> Result<PathBuf> {
    let file = match &args.config {
        Some(p) => read_entries(p)?,
        None => Vec::new(),
    };
    let config = ResolvedConfig::resolve(&file, &train_flag_entries(args, seed)?)?;
    let (prepared, view) = PreparedDataset::load(&args.data)?;
    glamor_core::training::preflight(&view, &config.train)?;
    start(&args.out)?;
    let mut manifest = RunManifest::new("train");
    manifest.config_hash = Some(config.hash());
    manifest.dataset_fingerprint = Some(prepared.fingerprint);
    write_text(&args.out.join("config.resolved"), &config.dump(), &mut manifest)?;

    let ckpt_dir = args.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).at(&ckpt_dir)?;
    let mut writer = CheckpointWriter { dir: ckpt_dir, written: Vec::new() };
    let outcome = train_with_observer(&view, &config.descriptor, &config.loss, &config.train, &mut writer)?;
    if writer.written.is_empty() {
        writer.on_checkpoint(CheckpointReason::Final, &outcome.model, &outcome.state)?;
    }
    for p in writer.written {
        manifest.add(p);
    }

    if let (Recipe::BrandProxyNca, ProxyClasses::Attribute(attribute)) = (config.train.recipe, config.train.classes) {
        let gate = ProxyGate::from_prototypes(outcome.model.clone(), &view, attribute, config.gate_sharpness)?;
        let path = args.out.join("gate.ckpt");
        checkpoint::write_gate(&gate, &path)?;
        manifest.add(path);
    }

    let loss_path = args.out.join("loss.csv");
    report::write_loss_csv(&outcome.state.loss_history, &loss_path)?;
    manifest.add(loss_path);
    let plot_path = args.out.join("loss.svg");
    let points: Vec<(u64, f64)> = outcome.state.loss_history.iter().map(|p| (p.step, p.loss)).collect();
    plot::loss_curve(&points, &plot_path)?;
    manifest.add(plot_path);
    let state = report::train_state_json(&outcome.state);
    let state_path = args.out.join("train_state.json");
    report::write_json(&state, &state_path)?;
    manifest.add(state_path);
    manifest.metrics = Some(state);
    manifest.write(&args.out)
}

/// The protocol for `source`, rejecting combinations that do not fit the
/// dataset. Synthetic data has both query/gallery splits and cameras, so it
/// accepts either protocol.
pub fn protocol_for(source: &DatasetSource, requested: Option<&str>) -> Result<Protocol> {
    let requested = requested
        .map(|p| {
            Protocol::parse(p)
                .ok_or_else(|| Error::Usage(format!("unknown protocol `{p}`, expected cars196_zsl or veri776")))
        })
        .transpose()?;
    let natural = match source {
        DatasetSource::Synthetic(_) => None,
        DatasetSource::Directory { layout: Layout::Cars196, .. } => Some(Protocol::Cars196Zsl),
        DatasetSource::Directory { layout: Layout::Veri776, .. } => Some(Protocol::Veri776),
    };
    match (requested, natural) {
        (Some(r), Some(n)) if r != n => {
            Err(Error::Usage(format!("protocol {} does not match a {} dataset", r.as_str(), source.layout())))
        }
        (Some(r), _) => Ok(r),
        (None, Some(n)) => Ok(n),
        (None, None) => Ok(Protocol::Cars196Zsl),
    }
}

pub fn eval(args: &EvalArgs, seed: u64) -> Result<PathBuf> {
    let split = EvalSplit::parse(&args.split).ok_or_else(|| Error::Usage(format!("unknown split `{}`", args.split)))?;
    let (prepared, view) = PreparedDataset::load(&args.data)?;
    let protocol = protocol_for(&prepared.source, args.protocol.as_deref())?;
    let model = checkpoint::read_model(&args.checkpoint)?;
    let evaluation = report::evaluate_model(&model, &view, protocol, split, seed)?;
    start(&args.out)?;
    let mut manifest = RunManifest::new("eval");
    manifest.dataset_fingerprint = Some(prepared.fingerprint);
    manifest.config_hash = Some(model.content_hash());
    let json = report::report_json(&evaluation.report);
    let report_path = args.out.join("report.json");
    report::write_json(&json, &report_path)?;
    manifest.add(report_path);
    if args.rankings {
        let path = args.out.join("rankings.csv");
        report::write_rankings_csv(&evaluation.rankings, Some(args.top), &path)?;
        manifest.add(path);
    }
    if args.plots {
        let r = &evaluation.report;
        let path = args.out.join("metrics.svg");
        let bars: Vec<(String, f64)> = match protocol {
            Protocol::Cars196Zsl => std::iter::once(("NMI".to_string(), r.nmi.unwrap_or(0.0)))
                .chain(r.recall_at.iter().map(|(k, v)| (format!("R@{k}"), *v)))
                .collect(),
            Protocol::Veri776 => vec![
                ("mAP".into(), r.map.unwrap_or(0.0)),
                ("CMC-1".into(), r.cmc.first().copied().unwrap_or(0.0)),
                ("CMC-5".into(), r.cmc.get(4).or(r.cmc.last()).copied().unwrap_or(0.0)),
            ],
        };
        plot::bar_chart(protocol.as_str(), &bars, &path)?;
        manifest.add(path);
        if protocol == Protocol::Veri776 {
            let path = args.out.join("cmc.svg");
            plot::cmc_curve(&r.cmc, &path)?;
            manifest.add(path);
        }
    }
    manifest.metrics = Some(json);
    manifest.write(&args.out)
}

fn policy_from(args: &AssembleArgs) -> Result<RoutingPolicy> {
    let mode =
        PolicyMode::parse(&args.policy).ok_or_else(|| Error::Usage(format!("unknown policy `{}`", args.policy)))?;
    let priority = args
        .priority
        .split(',')
        .map(|a| {
            Attribute::parse(a.trim()).ok_or_else(|| Error::Usage(format!("unknown attribute `{a}` in --priority")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoutingPolicy { mode, priority, confidence_threshold: args.threshold })
}

fn team_manifest(command: &str, team: &Team) -> RunManifest {
    let mut m = RunManifest::new(command);
    m.add(team.dir.join(crate::team::MANIFEST_FILE));
    for d in &team.manifest.experts {
        m.add(team.store().join(format!("{}.{}", d.checkpoint_ref, checkpoint::EXTENSION)));
    }
    for (_, h) in &team.manifest.gates {
        m.add(team.store().join(format!("{h}.{}", checkpoint::EXTENSION)));
    }
    m.metrics = Some(json!({ "experts": team.manifest.experts.len(), "gates": team.manifest.gates.len() }));
    m
}

pub fn team_assemble(args: &AssembleArgs) -> Result<PathBuf> {
    let experts = args.experts.iter().map(|e| ExpertSpec::parse(e)).collect::<Result<Vec<_>>>()?;
    let policy = policy_from(args)?;
    start(&args.out)?;
    let team = Team::assemble(&args.out, &args.gates, &experts, policy)?;
    team_manifest("team assemble", &team).write(&args.out)
}

pub fn team_add_expert(args: &AddExpertArgs) -> Result<PathBuf> {
    let spec = ExpertSpec::parse(&args.expert)?;
    let team = Team::load(&args.team)?;
    let extended = team.add_expert(&spec)?;
    team_manifest("team add-expert", &extended).write(&args.team)
}

fn select(view: &DatasetView, split: &str) -> Result<Vec<usize>> {
    match split {
        "test" => Ok(view.test_indices()),
        "train" => Ok(view.indices(Split::Train)),
        "all" => Ok((0..view.len()).collect()),
        _ => Err(Error::Usage(format!("unknown split `{split}`, expected test, train or all"))),
    }
}

fn gather(view: &DatasetView, indices: &[usize]) -> Vec<Sample> {
    indices.iter().map(|&i| view.samples()[i].clone()).collect()
}

/// One routing line: `sample, identity, selected, weights, used_default,
/// evidence`, tab separated. Weights list every expert as `id=w`.
pub fn decision_line(team: &Team, index: usize, label: &str, d: &GateDecision) -> String {
    let weights: Vec<String> = team
        .registry
        .experts()
        .iter()
        .zip(&d.weights)
        .map(|(e, w)| format!("{}={w}", e.descriptor.expert_id))
        .collect();
    let evidence: Vec<String> =
        d.evidence.iter().map(|(a, p)| format!("{}={}@{:.4}", a.as_str(), p.label, p.confidence)).collect();
    format!(
        "{index}\t{label}\t{}\t{}\t{}\t{}",
        d.selected.join(","),
        weights.join(","),
        d.used_default,
        if evidence.is_empty() { "-".into() } else { evidence.join(",") }
    )
}

pub fn team_route(args: &RouteArgs) -> Result<PathBuf> {
    let team = Team::load(&args.team)?;
    let (prepared, view) = PreparedDataset::load(&args.data)?;
    let indices = select(&view, &args.split)?;
    let decisions = team.registry.route_batch(&gather(&view, &indices))?;
    start(&args.out)?;
    let mut manifest = RunManifest::new("team route");
    manifest.dataset_fingerprint = Some(prepared.fingerprint);
    let mut text = String::from("sample\tidentity\tselected\tweights\tused_default\tevidence\n");
    let mut defaults = 0;
    for (&i, d) in indices.iter().zip(&decisions) {
        let label = &view.identity_labels()[view.samples()[i].identity_id as usize];
        text.push_str(&decision_line(&team, i, label, d));
        text.push('\n');
        defaults += usize::from(d.used_default);
    }
    write_text(&args.out.join("routes.tsv"), &text, &mut manifest)?;
    manifest.metrics = Some(json!({ "routed": decisions.len(), "to_default": defaults }));
    manifest.write(&args.out)
}

/// JSON summary of a query/gallery identification run.
pub fn identification_json(protocol: Protocol, result: &MapCmc) -> Value {
    json!({
        "protocol": protocol.as_str(),
        "map": result.map,
        "cmc.1": result.cmc_at(1),
        "cmc.5": result.cmc_at(5),
        "queries_without_relevant": result.queries_without_relevant,
    })
}

pub fn team_identify(args: &IdentifyArgs) -> Result<PathBuf> {
    let team = Team::load(&args.team)?;
    let (prepared, view) = PreparedDataset::load(&args.data)?;
    let protocol = protocol_for(&prepared.source, args.protocol.as_deref())?;
    let q_idx = view.indices(Split::Query);
    let g_idx = view.indices(Split::Gallery);
    if q_idx.is_empty() || g_idx.is_empty() {
        return Err(Error::Usage("team identify needs query and gallery splits".into()));
    }
    let id = team.registry.identify(&gather(&view, &q_idx), &gather(&view, &g_idx), protocol)?;
    start(&args.out)?;
    let mut manifest = RunManifest::new("team identify");
    manifest.dataset_fingerprint = Some(prepared.fingerprint);
    let mut text = String::from("query_id\tselected\tfirst_hit\taverage_precision\n");
    for ((r, d), &q) in id.result.rankings.iter().zip(&id.query_decisions).zip(&q_idx) {
        text.push_str(&format!(
            "{q}\t{}\t{}\t{}\n",
            d.selected.join(","),
            r.first_hit().map_or("-".into(), |h| (h + 1).to_string()),
            r.average_precision().map_or("-".into(), |a| format!("{a:?}"))
        ));
    }
    write_text(&args.out.join("queries.tsv"), &text, &mut manifest)?;
    if args.rankings {
        let rankings: Vec<_> = id
            .result
            .rankings
            .iter()
            .map(|r| glamor_core::metrics::RankingResult {
                query_index: q_idx[r.query_index],
                gallery_order: r.gallery_order.iter().map(|&j| g_idx[j]).collect(),
                ..r.clone()
            })
            .collect();
        let path = args.out.join("rankings.csv");
        report::write_rankings_csv(&rankings, Some(args.top), &path)?;
        manifest.add(path);
    }
    let json = identification_json(protocol, &id.result);
    let path = args.out.join("report.json");
    report::write_json(&json, &path)?;
    manifest.add(path);
    manifest.metrics = Some(json);
    manifest.write(&args.out)
}

pub fn report_runs(args: &ReportArgs) -> Result<PathBuf> {
    let mut rows = Vec::new();
    let mut keys = BTreeSet::new();
    for dir in &args.runs {
        let manifest = RunManifest::read(dir)?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let metrics = manifest["metrics"].as_object().cloned().unwrap_or_default();
        keys.extend(metrics.iter().filter(|(_, v)| v.is_number()).map(|(k, _)| k.clone()));
        rows.push((name, metrics));
    }
    start(&args.out)?;
    let mut manifest = RunManifest::new("report");
    let mut csv = String::from("run");
    for k in &keys {
        csv.push(',');
        csv.push_str(k);
    }
    csv.push('\n');
    for (name, metrics) in &rows {
        csv.push_str(name);
        for k in &keys {
            csv.push(',');
            if let Some(v) = metrics.get(k).and_then(Value::as_f64) {
                csv.push_str(&format!("{v:?}"));
            }
        }
        csv.push('\n');
    }
    write_text(&args.out.join("summary.csv"), &csv, &mut manifest)?;
    for k in &keys {
        let bars: Vec<(String, f64)> =
            rows.iter().filter_map(|(n, m)| m.get(k).and_then(Value::as_f64).map(|v| (n.clone(), v))).collect();
        let path = args.out.join(format!("{}.svg", k.replace('.', "_")));
        plot::bar_chart(k, &bars, &path)?;
        manifest.add(path);
    }
    manifest.metrics = Some(json!({ "runs": rows.len() }));
    manifest.write(&args.out)
}
