//! Activation ranking versus causal ranking on a world with planted confounds.
//!
//! ```text
//! cargo run --release --example fpr_experiment -- [world.toml] [seed]
//! ```

use causeloc::simulator::{build_world, run_fpr_experiment, FprOptions, Outcome, WorldSpec};

fn main() -> causeloc::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/worlds/reference.toml").to_string());
    let spec = WorldSpec::load(&path)?;
    let seed = args.next().map_or(spec.seed, |s| s.parse().expect("seed must be an integer"));
    let opts = FprOptions::from_spec(&spec.experiment)?;

    for (label, spec) in [("noisy", spec.clone()), ("noiseless", spec.noiseless())] {
        let world = build_world(&spec, seed)?;
        let m = run_fpr_experiment(&world, &opts)?;
        println!("{label} world, {} concepts, {} voxels", m.outcomes.len(), world.n_voxels());
        println!("  activation  fpr {:.3}  tpr {:.3}", m.fpr_activation, m.tpr_activation);
        println!("  causal      fpr {:.3}  tpr {:.3}", m.fpr_causal, m.tpr_causal);
        println!(
            "  sign-labelled false positives: activation {:.3}, causal {:.3}",
            m.sign_fpr_activation, m.sign_fpr_causal
        );
        for o in &m.outcomes {
            let tag = |x: Outcome| match x {
                Outcome::TruePositive => "TP",
                Outcome::FalsePositive => "FP",
                Outcome::Withheld => "--",
            };
            println!(
                "  {:<12} {} activation {} ({:>2} selective / {:>2} confound)  causal {} ({:>2} / {:>2})",
                o.concept,
                if o.pure_confound { "confound-only" } else { "             " },
                tag(o.activation.outcome),
                o.activation.n_selective,
                o.activation.n_confound,
                tag(o.causal.outcome),
                o.causal.n_selective,
                o.causal.n_confound,
            );
        }
    }
    Ok(())
}
