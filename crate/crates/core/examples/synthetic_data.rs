//! Synthetic scene pairs from a training profile and its shifted test
//! profile, written to disk and read back.
//!
//! `cargo run --release --example synthetic_data -- [dir]`

use ptta::synth::{generate_pairs, measured_overlap, read_dataset, write_dataset, DatasetManifest, DomainProfile};

fn main() -> ptta::Result<()> {
    let train = DomainProfile::indoor("indoor");
    let test = train.shifted("shifted");
    let mut pairs = generate_pairs(&train, 4, 7)?;
    pairs.extend(generate_pairs(&test, 4, 7)?);
    for p in &pairs {
        println!(
            "{:<16} {:>4} -> {:>4} points, overlap {:.2}",
            p.pair_id,
            p.source.len(),
            p.target.len(),
            measured_overlap(p, 2.0 * train.voxel)
        );
    }
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ptta-example-data"));
    let manifest = write_dataset(&pairs, &DatasetManifest::new(7, vec![train, test], &pairs), &dir)?;
    let (back, _) = read_dataset(&dir)?;
    println!("{} pairs in {}, round trip exact: {}", manifest.entries.len(), dir.display(), back == pairs);
    Ok(())
}
