//! Binary containers for response matrices and embedding indices, and the
//! JSONL stimulus manifest, each written and read back.
//!
//! ```text
//! cargo run --example formats
//! ```

use causeloc::matrix::{read_index, read_matrix, write_index, write_matrix, zscore_normalize};
use causeloc::{EmbeddingIndex, Provenance, ResponseMatrix, Split, StimulusImage, StimulusManifest, Source};

fn main() -> causeloc::Result<()> {
    let dir = std::env::temp_dir().join(format!("causeloc-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let m = ResponseMatrix::from_rows(
        vec!["img-a".into(), "img-b".into(), "img-c".into()],
        vec!["v0".into(), "v1".into()],
        &[vec![1.0, 10.0], vec![2.0, 30.0], vec![3.0, 20.0]],
        Provenance::Measured,
    )?;
    let (z, stats) = zscore_normalize(&m)?;
    println!("voxel means {:?}, stds {:?}", stats.mean, stats.std);
    let path = dir.join("responses.bcrm");
    write_matrix(&z, &path)?;
    let back = read_matrix(&path)?;
    println!("{}: {} x {}, identical: {}", path.display(), back.n_images(), back.n_voxels(), back == z);

    let index = EmbeddingIndex::from_raw(vec!["img-a".into(), "img-b".into()], 2, vec![3.0, 4.0, 0.0, 2.0])?;
    let path = dir.join("embeddings.bcei");
    write_index(&index, &path)?;
    println!("{}: rows {:?}", path.display(), read_index(&path)?.vectors());

    let mut manifest = StimulusManifest::new("horse");
    manifest.counter_concepts = vec!["cow".into()];
    manifest.extra.insert("subject".into(), serde_json::json!("subj01"));
    let mut img = StimulusImage::positive("img-a", "horse", Split::Train, Source::Generated)
        .with_verified_present(true)
        .with_prompt("a horse in a field");
    img.extra.insert("generator_seed".into(), serde_json::json!(1234));
    manifest.images.push(img);
    let path = dir.join("manifest.jsonl");
    manifest.save(&path)?;
    print!("{}", std::fs::read_to_string(&path)?);
    println!("round trip preserved: {}", StimulusManifest::load(&path)? == manifest);

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
