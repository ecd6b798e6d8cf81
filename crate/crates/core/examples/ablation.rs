//! Four-regime comparison on the shifted test domain: joint training only,
//! with test-time adaptation, with meta-training, and with both.
//!
//! `cargo run --release --example ablation -- [seed ...]`

use ptta::harness::{format_ablation_table, run_ablation, RunConfig};

fn main() -> ptta::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    for seed in seeds {
        let cfg = RunConfig { seed, train: ptta::meta::TrainConfig { seed, ..Default::default() }, ..Default::default() };
        let t = std::time::Instant::now();
        let a = run_ablation(&cfg, &mut |h| eprintln!("seed {seed} {} epoch {} pri {:.4} aux {:.4}", h.phase, h.epoch, h.pri, h.aux))?;
        println!("seed {seed} ({:.0?})", t.elapsed());
        print!("{}", format_ablation_table(&a.rows));
        for (r, row) in a.reports.iter().zip(&a.rows) {
            println!("{} median dL_aux {:?}", row.label, r.overall().median_aux_delta);
        }
    }
    Ok(())
}
