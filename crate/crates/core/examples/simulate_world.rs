//! A synthetic world with planted selective and confound voxels: one
//! concept's generated dataset and the simulated measured pool.
//!
//! ```text
//! cargo run --example simulate_world -- [world.toml] [concept]
//! ```

use causeloc::scoring::{score_voxels, ScoringSets};
use causeloc::simulator::{build_world, WorldSpec};
use causeloc::stimulus::build_generation_plan;
use causeloc::{Role, Split};

fn main() -> causeloc::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/worlds/small.toml").to_string());
    let spec = WorldSpec::load(&path)?;
    let world = build_world(&spec, spec.seed)?;
    let concept = args.next().unwrap_or_else(|| world.concept_names()[0].clone());
    let plan = build_generation_plan(&concept, &spec.experiment.plan)?;

    let (m, manifest) = world.concept_stimuli(&concept, &plan)?;
    println!("{concept}: {} images x {} voxels, counters {:?}", m.n_images(), m.n_voxels(), manifest.counter_concepts);
    for role in [Role::Positive, Role::SemanticNegative, Role::CounterfactualEdit] {
        let n = manifest.images.iter().filter(|i| i.role == role).count();
        println!("  {role}: {n}");
    }

    let train = manifest.images.iter().filter(|i| i.split == Split::Train);
    let table = score_voxels(&m, &ScoringSets::from_images(train, true), 10)?;
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| table.s_causal[b].total_cmp(&table.s_causal[a]));
    println!("highest causal scores:");
    for &i in order.iter().take(5) {
        println!("  {:<28} causal {:>6.3}  s_pos {:>6.3}", table.voxel_ids[i], table.s_causal[i], table.s_pos[i]);
    }

    let pool = world.measured_pool()?;
    println!(
        "measured pool: {} images, {} voxels, {}-dim embeddings",
        pool.measured.n_images(),
        pool.measured.n_voxels(),
        pool.index.dim()
    );
    Ok(())
}
