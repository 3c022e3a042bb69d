//! The full pipeline on the bundled small config: assembly, scoring, region
//! selection, evaluation, significance, coverage and verdicts.
//!
//! ```text
//! cargo run --example pipeline_run -- [config.toml] [output_dir]
//! ```

use causeloc::pipeline::{run_pipeline, PipelineConfig};

fn main() -> causeloc::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/small.toml").to_string());
    let mut cfg = PipelineConfig::load(&path)?;
    if let Some(out) = args.next() {
        cfg.output_dir = Some(out.into());
    }
    let report = run_pipeline(&cfg)?;

    println!("{:<10} {:<24} {:<8} {:<8} {:>9} {:>9}", "concept", "decision", "evidence", "coverage", "gen", "measured");
    for r in &report.reports {
        let causal = |s: &Option<causeloc::scoring::RegionScoreSet>| {
            s.as_ref().and_then(|s| s.s_causal).map_or("-".to_string(), |c| format!("{c:.3}"))
        };
        println!(
            "{:<10} {:<24} {:<8} {:<8} {:>9} {:>9}",
            r.concept,
            r.verdict.decision.to_string(),
            format!("{:?}", r.verdict.causal_evidence),
            format!("{:?}", r.coverage.coverage_level),
            causal(&r.generated_eval),
            causal(&r.measured_eval),
        );
    }
    for (c, e) in &report.failures {
        println!("{c}: failed: {e}");
    }
    println!("outputs in {} (config hash {})", report.output_dir.display(), report.config_hash);
    Ok(())
}
