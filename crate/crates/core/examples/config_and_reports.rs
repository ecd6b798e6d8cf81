//! End-to-end run through the command drivers: generate, train, evaluate in
//! both modes, and read the written report back.
//!
//! `cargo run --release --example config_and_reports -- [out_dir]`

use ptta::harness::{cmd_eval, cmd_generate, cmd_train_joint, cmd_train_meta, Overrides, Report, RunConfig, REPORT_TXT};
use ptta::meta::EvalMode;

fn main() -> ptta::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ptta-example-run"));
    let set = [
        "data.train_pairs=16",
        "data.val_pairs=4",
        "data.test_pairs=16",
        "encoder.feature_dim=16",
        "encoder.hidden=16",
        "encoder.agg_hidden=16",
        "train.joint_epochs=3",
        "train.meta_epochs=1",
    ];
    let ov = Overrides { set: set.iter().map(|s| s.to_string()).collect(), out_dir: Some(out.clone()), ..Default::default() };
    let mut cfg = RunConfig::load(None, &ov)?;
    print!("{}", cfg.to_toml());
    cmd_generate(&cfg)?;
    cmd_train_joint(&cfg, &mut |h| eprintln!("{} epoch {} pri {:.4}", h.phase, h.epoch, h.pri))?;
    cmd_train_meta(&cfg, &mut |h| eprintln!("{} epoch {} pri {:.4}", h.phase, h.epoch, h.pri))?;
    for mode in [EvalMode::Plain, EvalMode::Tta] {
        cfg.eval.mode = mode;
        let r = cmd_eval(&cfg)?;
        let s = r.overall();
        println!("{mode}: RR {:.3} mean RE {:.2} mean TE {:.3} fallback {:.2}", s.rr, s.mean_re, s.mean_te, s.fallback_rate);
    }
    let last = Report::read_json(&out.join(REPORT_TXT))?;
    println!("{} rows in {}", last.rows.len(), out.display());
    Ok(())
}
