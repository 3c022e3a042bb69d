//! Command-line entry points. Each stage is available on its own, reading
//! and writing the same files the full `run` produces.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::clients::slug;
use crate::error::{Error, Result};
use crate::matrix::{read_matrix, write_index, write_matrix};
use crate::pipeline::{run_pipeline, save_score_map, PipelineConfig};
use crate::region::{select_region_positive_causal, select_region_top_k, Region, RegionMode};
use crate::retrieval::{coverage_report, CoverageLevel, CoverageThresholds, RequestedCounts};
use crate::scoring::{region_scores, score_voxels, Component, ScoringSets, VoxelScoreTable, DEFAULT_HARD_NEGATIVES};
use crate::simulator::{build_world, run_fpr_experiment, FprOptions, WorldSpec};
use crate::stats::{SignificanceResult, Criterion, DEFAULT_ALPHA};
use crate::stimulus::{build_generation_plan, PlanConfig, Source, Split, StimulusManifest};
use crate::verdict::{assess_causal_evidence, decide, EvidenceThresholds};

#[derive(Debug, Parser)]
#[command(name = "causeloc", version, about = "Causal concept localization over voxel responses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the generation plan for a concept.
    Plan(PlanArgs),
    /// Score every voxel of a response matrix.
    Score(ScoreArgs),
    /// Build a candidate region from a score table.
    SelectRegion(SelectRegionArgs),
    /// Score a frozen region on a split of a manifest.
    Evaluate(EvaluateArgs),
    /// Empirical p-value of a target score against baseline scores.
    Pvalue(PvalueArgs),
    /// Measured-data coverage of a manifest.
    Coverage(CoverageArgs),
    /// Causal evidence and decision from region scores, gate and coverage.
    Verdict(VerdictArgs),
    /// Write a synthetic world's datasets and measured pool to disk.
    Simulate(SimulateArgs),
    /// Activation versus causal ranking on a synthetic world.
    CompareBaselines(CompareArgs),
    /// Export one score column as a (voxel_id, score) table.
    ExportMap(ExportMapArgs),
    /// Run the full pipeline from a config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub concept: String,
    /// Pipeline config whose [plan] section supplies overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_pos_train: Option<usize>,
    #[arg(long)]
    pub n_pos_eval: Option<usize>,
    #[arg(long)]
    pub n_counter_concepts: Option<usize>,
    #[arg(long)]
    pub n_prompts_per_counter: Option<usize>,
    #[arg(long)]
    pub n_edit_parents_train: Option<usize>,
    #[arg(long)]
    pub n_edit_parents_eval: Option<usize>,
    #[arg(long)]
    pub n_edits_per_parent: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Generated,
    RetrievedPool,
    RetrievedMeasured,
}

impl From<SourceArg> for Source {
    fn from(s: SourceArg) -> Source {
        match s {
            SourceArg::Generated => Source::Generated,
            SourceArg::RetrievedPool => Source::RetrievedPool,
            SourceArg::RetrievedMeasured => Source::RetrievedMeasured,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Response matrix (binary container).
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Restrict to these sources; all sources when omitted.
    #[arg(long, value_enum)]
    pub source: Vec<SourceArg>,
    #[arg(long, default_value_t = DEFAULT_HARD_NEGATIVES)]
    pub hard_negatives: usize,
    /// Combined-score weight as NAME=WEIGHT; repeatable.
    #[arg(long = "weight", value_parser = parse_weight)]
    pub weights: Vec<(String, f64)>,
    /// Skip z-scoring components before weighting.
    #[arg(long)]
    pub no_standardize: bool,
    /// Also use images without the verification flag their role needs.
    #[arg(long)]
    pub include_unverified: bool,
    #[arg(long)]
    pub output: PathBuf,
}

fn parse_weight(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, w) = s.split_once('=').ok_or("expected NAME=WEIGHT")?;
    name.parse::<Component>().map_err(|e| e.to_string())?;
    let w: f64 = w.parse().map_err(|e| format!("bad weight {w:?}: {e}"))?;
    Ok((name.to_string(), w))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    TopK,
    PositiveCausal,
}

#[derive(Debug, Args)]
pub struct SelectRegionArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub concept: String,
    #[arg(long, value_enum, default_value = "top-k")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = crate::region::DEFAULT_REGION_SIZE)]
    pub k: usize,
    #[arg(long, default_value = "s_causal")]
    pub score: String,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Region CSV as written by select-region.
    #[arg(long)]
    pub region: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    pub split: SplitArg,
    #[arg(long, value_enum)]
    pub source: Vec<SourceArg>,
    #[arg(long, default_value_t = DEFAULT_HARD_NEGATIVES)]
    pub hard_negatives: usize,
}

#[derive(Debug, Args)]
pub struct PvalueArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub target: f64,
    /// Comma-separated baseline scores; may be empty.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, num_args = 0..)]
    pub baselines: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value = "CausalGen")]
    pub criterion: String,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub n_pos: usize,
    #[arg(long)]
    pub n_neg_per_counter: usize,
    #[arg(long, default_value_t = crate::retrieval::DEFAULT_COVERAGE_THRESHOLD)]
    pub pos_threshold: f64,
    #[arg(long, default_value_t = crate::retrieval::DEFAULT_COVERAGE_THRESHOLD)]
    pub neg_threshold: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GateArg {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CoverageArg {
    High,
    Low,
}

#[derive(Debug, Args)]
pub struct VerdictArgs {
    /// Region causal score on generated eval data.
    #[arg(long, allow_negative_numbers = true)]
    pub gen_causal: f64,
    /// Region causal score on measured data, when available.
    #[arg(long, allow_negative_numbers = true)]
    pub meas_causal: Option<f64>,
    #[arg(long, value_enum)]
    pub gate: GateArg,
    #[arg(long, value_enum)]
    pub coverage: CoverageArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Defaults to the seed in the world file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concepts to write; all concepts of the world when omitted.
    #[arg(long)]
    pub concept: Vec<String>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Zero every noise level first.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Per-concept outcomes as CSV.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportMapArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value = "s_causal")]
    pub score: String,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// `println!` that reports a closed stdout instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::from(e).at_path(dir))?;
    }
    let f = File::create(path).map_err(|e| Error::from(e).at_path(path))?;
    Ok(BufWriter::new(f))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    out!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn sets_for(manifest: &StimulusManifest, split: Split, sources: &[SourceArg], verified_only: bool) -> ScoringSets {
    let sources: Vec<Source> = sources.iter().map(|&s| s.into()).collect();
    ScoringSets::from_images(
        manifest
            .images
            .iter()
            .filter(|i| i.split == split && (sources.is_empty() || sources.contains(&i.source))),
        verified_only,
    )
}

fn plan(a: PlanArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?.plan,
        None => PlanConfig::default(),
    };
    let overrides = [
        (&mut cfg.n_pos_train, a.n_pos_train),
        (&mut cfg.n_pos_eval, a.n_pos_eval),
        (&mut cfg.n_counter_concepts, a.n_counter_concepts),
        (&mut cfg.n_prompts_per_counter, a.n_prompts_per_counter),
        (&mut cfg.n_edit_parents_train, a.n_edit_parents_train),
        (&mut cfg.n_edit_parents_eval, a.n_edit_parents_eval),
        (&mut cfg.n_edits_per_parent, a.n_edits_per_parent),
    ];
    for (slot, v) in overrides {
        if v.is_some() {
            *slot = v;
        }
    }
    print_json(&build_generation_plan(&a.concept, &cfg)?)
}

fn score(a: ScoreArgs) -> Result<()> {
    let m = read_matrix(&a.matrix)?;
    let manifest = StimulusManifest::load(&a.manifest)?;
    let sets = sets_for(&manifest, a.split.into(), &a.source, !a.include_unverified);
    let mut table = score_voxels(&m, &sets, a.hard_negatives)?;
    table.set_component(Component::Mag.as_str(), table.s_pos.clone())?;
    if let Some(v) = table.s_neg.clone() {
        table.set_component(Component::Csg.as_str(), v)?;
    }
    if let Some(v) = table.s_edit.clone() {
        table.set_component(Component::Ceg.as_str(), v)?;
    }
    if !a.weights.is_empty() {
        let weights: BTreeMap<String, f64> = a.weights.into_iter().collect();
        table.set_combined(&weights, !a.no_standardize)?;
    }
    table.write_csv(create(&a.output)?)?;
    eprintln!(
        "scored {} voxels from {} positives, {} negatives, {} edit pairs",
        table.len(),
        table.counts.n_positives,
        table.counts.n_negatives_used,
        table.counts.n_edit_pairs_used
    );
    Ok(())
}

fn select_region(a: SelectRegionArgs) -> Result<()> {
    let table = VoxelScoreTable::load_csv(&a.scores)?;
    let region = match a.mode {
        ModeArg::TopK => select_region_top_k(&a.concept, &table, &a.score, a.k)?,
        ModeArg::PositiveCausal => select_region_positive_causal(&a.concept, &table),
    };
    region.write_csv(create(&a.output)?)?;
    eprintln!("{} voxels{}", region.len(), if region.short { " (short)" } else { "" });
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let m = read_matrix(&a.matrix)?;
    let manifest = StimulusManifest::load(&a.manifest)?;
    let f = File::open(&a.region).map_err(|e| Error::from(e).at_path(&a.region))?;
    let region = Region::read_csv(BufReader::new(f), &manifest.concept, RegionMode::PositiveCausal, "s_causal")?;
    let sets = sets_for(&manifest, a.split.into(), &a.source, true);
    print_json(&region_scores(&m, &sets, &region, a.hard_negatives)?)
}

fn pvalue(a: PvalueArgs) -> Result<()> {
    let c: Criterion = a.criterion.parse()?;
    let r = SignificanceResult::new(c, a.target, a.baselines, a.alpha);
    out!("p = {} ({} baselines), passed at alpha {}: {}", r.p_value, r.baseline_scores.len(), a.alpha, r.passed);
    Ok(())
}

fn coverage(a: CoverageArgs) -> Result<()> {
    let manifest = StimulusManifest::load(&a.manifest)?;
    let thresholds = CoverageThresholds {
        pos: a.pos_threshold,
        neg: a.neg_threshold,
    };
    thresholds.validate()?;
    let requested = RequestedCounts {
        n_pos: a.n_pos,
        n_neg_per_counter: a.n_neg_per_counter,
    };
    print_json(&coverage_report(&manifest.concept, &manifest, requested, thresholds))
}

fn verdict(a: VerdictArgs) -> Result<()> {
    let set = |c: f64| crate::scoring::RegionScoreSet {
        n_voxels: 0,
        s_pos: 0.0,
        s_neg: None,
        s_edit: None,
        s_causal: Some(c),
        partial_causal: false,
    };
    let gen = set(a.gen_causal);
    let meas = a.meas_causal.map(set);
    let gate = crate::stats::GateDecision {
        passed: matches!(a.gate, GateArg::Pass),
        alpha: DEFAULT_ALPHA,
        required: Vec::new(),
        failing: Vec::new(),
    };
    let level = match a.coverage {
        CoverageArg::High => CoverageLevel::High,
        CoverageArg::Low => CoverageLevel::Low,
    };
    let evidence = assess_causal_evidence(Some(&gen), meas.as_ref(), &gate, level, &EvidenceThresholds::default())?;
    out!("evidence {evidence:?}, coverage {level:?}: {}", decide(evidence, level));
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let spec = WorldSpec::load(&a.world)?;
    let world = build_world(&spec, a.seed.unwrap_or(spec.seed))?;
    let plan = build_generation_plan("plan", &spec.experiment.plan)?;
    let concepts = if a.concept.is_empty() { world.concept_names() } else { a.concept };
    std::fs::create_dir_all(&a.output).map_err(|e| Error::from(e).at_path(&a.output))?;
    for c in &concepts {
        let (m, manifest) = world.concept_stimuli(c, &plan)?;
        let stem = slug(c);
        manifest.save(a.output.join(format!("{stem}.manifest.jsonl")))?;
        write_matrix(&m, a.output.join(format!("{stem}.predicted.bcrm")))?;
        eprintln!("{c}: {} images", manifest.images.len());
    }
    let pool = world.measured_pool()?;
    write_matrix(&pool.measured, a.output.join("measured.bcrm"))?;
    write_index(&pool.index, a.output.join("measured.bcei"))?;
    eprintln!("measured pool: {} images, {} voxels", pool.measured.n_images(), pool.measured.n_voxels());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut spec = WorldSpec::load(&a.world)?;
    if a.noiseless {
        spec = spec.noiseless();
    }
    let world = build_world(&spec, a.seed.unwrap_or(spec.seed))?;
    let mut opts = FprOptions::from_spec(&spec.experiment)?;
    opts.workers = a.workers;
    let m = run_fpr_experiment(&world, &opts)?;
    out!("strategy     fpr     tpr     sign-fpr");
    out!("activation   {:.3}   {:.3}   {:.3}", m.fpr_activation, m.tpr_activation, m.sign_fpr_activation);
    out!("causal       {:.3}   {:.3}   {:.3}", m.fpr_causal, m.tpr_causal, m.sign_fpr_causal);
    if let Some(p) = &a.output {
        let mut w = create(p)?;
        m.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn export_map(a: ExportMapArgs) -> Result<()> {
    let table = VoxelScoreTable::load_csv(&a.scores)?;
    save_score_map(&table, &a.score, &a.output)
}

fn run(a: RunArgs) -> Result<i32> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(o) = a.output {
        cfg.output_dir = Some(o);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(alpha) = a.alpha {
        cfg.significance.alpha = alpha;
    }
    let report = run_pipeline(&cfg)?;
    for r in &report.reports {
        out!("{:<20} {}", r.concept, r.verdict.decision);
    }
    for (c, e) in &report.failures {
        out!("{c:<20} FAILED: {e}");
    }
    out!("outputs in {}", report.output_dir.display());
    Ok(report.exit_code())
}

/// Runs the parsed command. Returns the process exit code: 0 on success,
/// 1 on configuration or input errors, 2 when some concepts failed.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Plan(a) => plan(a).map(|_| 0),
        Command::Score(a) => score(a).map(|_| 0),
        Command::SelectRegion(a) => select_region(a).map(|_| 0),
        Command::Evaluate(a) => evaluate(a).map(|_| 0),
        Command::Pvalue(a) => pvalue(a).map(|_| 0),
        Command::Coverage(a) => coverage(a).map(|_| 0),
        Command::Verdict(a) => verdict(a).map(|_| 0),
        Command::Simulate(a) => simulate(a).map(|_| 0),
        Command::CompareBaselines(a) => compare(a).map(|_| 0),
        Command::ExportMap(a) => export_map(a).map(|_| 0),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(code) => code,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    execute(Cli::parse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn weight_parser_rejects_unknown_components() {
        assert_eq!(parse_weight("CEG=0.5").unwrap(), ("CEG".to_string(), 0.5));
        assert!(parse_weight("XYZ=1").is_err());
        assert!(parse_weight("CEG").is_err());
    }
}
