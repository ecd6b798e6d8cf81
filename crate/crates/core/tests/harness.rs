//! Configuration, command drivers and report files.

use std::path::Path;

use ptta::harness::{
    cmd_eval, cmd_generate, cmd_register, cmd_train_joint, cmd_train_meta, read_report_csv, summarize, Overrides,
    Report, RunConfig, CURVES_CSV, JOINT_CHECKPOINT, LOSSES_CSV, REPORT_CSV, REPORT_TXT,
};
use ptta::meta::{Checkpoint, EvalMode};
use ptta::synth::{read_dataset, write_cloud, Split};
use ptta::ErrorClass;

const SMALL: &str = r#"
seed = 5
data.train_profile.name = "indoor"
data.train_profile.point_count = 160
data.train_profile.noise_sigma = 0.005
data.train_profile.outlier_fraction = 0.0
data.train_profile.overlap_ratio = 0.8
data.train_profile.voxel = 0.05
data.train_pairs = 6
data.val_pairs = 2
data.test_pairs = 4
encoder = { feature_dim = 8, hidden = 8, agg_hidden = 8, k = 6, decoder_hidden = 8, proj_hidden = 8, proj_dim = 8, head_hidden = 8 }
train.batch_size = 2
train.joint_epochs = 2
train.meta_epochs = 1
train.inner_steps = 2
train.tta_steps = 2

[[data.test_profiles]]
name = "shifted"
point_count = 80
noise_sigma = 0.01
outlier_fraction = 0.0
overlap_ratio = 0.64
voxel = 0.05
"#;

fn small(dir: &Path, set: &[&str]) -> RunConfig {
    let ov = Overrides {
        set: set.iter().map(|s| s.to_string()).collect(),
        out_dir: Some(dir.to_path_buf()),
        ..Default::default()
    };
    let path = dir.join("run.toml");
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(&path, SMALL).unwrap();
    RunConfig::load(Some(&path), &ov).unwrap()
}

#[test]
fn config_defaults_overrides_and_rejections() {
    let d = RunConfig::from_toml("", &[]).unwrap();
    assert_eq!(d, RunConfig::default());
    assert_eq!((d.eval.re_max, d.eval.te_max), (15.0, 0.30));

    let c = RunConfig::from_toml("seed = 4\ntrain.alpha = 3e-4\n[eval]\nmode = \"tta\"", &["train.tta_steps=7".into()])
        .unwrap();
    assert_eq!((c.seed, c.train.seed, c.train.alpha, c.train.tta_steps), (4, 4, 3e-4, 7));
    assert_eq!(c.eval.mode, EvalMode::Tta);

    for bad in ["bogus = 1", "train.bogus = 1", "train.seed = 3", "seed = 2\ntrain.seed = 3", "data.train_profile.colour = 1", "seed = \"x\""] {
        let e = RunConfig::from_toml(bad, &[]).unwrap_err();
        assert_eq!(e.class(), ErrorClass::Config, "{bad}");
    }
    assert!(RunConfig::from_toml("", &["train".into()]).is_err());

    let ov = Overrides {
        seed: Some(9),
        mode: Some(EvalMode::Tta),
        use_byol: Some(false),
        use_meta: Some(false),
        tta_steps: Some(1),
        alpha: Some(2e-4),
        beta: Some(3e-4),
        ..Default::default()
    };
    let mut c = RunConfig::default();
    c.apply(&ov);
    assert_eq!((c.seed, c.train.seed), (9, 9));
    assert!(!c.train.flags.use_byol && c.train.flags.use_rec && !c.train.use_meta);
    assert_eq!((c.train.tta_steps, c.train.alpha, c.train.beta), (1, 2e-4, 3e-4));
    c.validate().unwrap();

    let mut none = RunConfig::default();
    none.train.flags = ptta::auxiliary::AuxFlags { use_rec: false, use_byol: false, use_cc: false };
    assert_eq!(none.validate().unwrap_err().class(), ErrorClass::Config);

    let missing = RunConfig::load(Some(Path::new("/nonexistent/run.toml")), &Overrides::default()).unwrap_err();
    assert_eq!(missing.class(), ErrorClass::Config);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), &["task.tau_in=0.12"]);
    let again = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
    assert_eq!(again, c);
}

#[test]
fn generate_is_deterministic_and_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = cmd_generate(&small(a.path(), &[])).unwrap();
    let mb = cmd_generate(&small(b.path(), &[])).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.entries.len(), 6 + 2 + 4);
    assert_eq!((ma.count(Split::Train), ma.count(Split::Val), ma.count(Split::Test)), (6, 2, 4));
    let profiles: Vec<&str> = ma.profiles.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(profiles, ["indoor", "shifted"]);
    assert!(ma.entries.iter().any(|e| e.profile == "shifted"));
    let (pairs, _) = read_dataset(&a.path().join("data")).unwrap();
    assert_eq!(pairs.len(), 12);

    let hundred = tempfile::tempdir().unwrap();
    let m = cmd_generate(&small(hundred.path(), &["data.train_pairs=100", "data.val_pairs=0", "data.test_pairs=0"]))
        .unwrap();
    assert_eq!(m.entries.len(), 100);
}

#[test]
fn zero_epochs_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["train.joint_epochs=0"]);
    cmd_generate(&cfg).unwrap();
    let path = cmd_train_joint(&cfg, &mut |_| {}).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let init = Checkpoint::initial(cfg.encoder, cfg.train.clone()).unwrap();
    assert_eq!(ck.partition, init.partition);
    assert_eq!(ck.content_hash(), init.content_hash());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let full = small(&dir.path().join("full"), &[]);
    cmd_generate(&full).unwrap();
    let data = full.data_dir();
    let whole = Checkpoint::load(&cmd_train_joint(&full, &mut |_| {}).unwrap()).unwrap();

    let part_dir = dir.path().join("part");
    let mut first = small(&part_dir, &["train.joint_epochs=1"]);
    first.data_dir = Some(data.clone());
    let half = cmd_train_joint(&first, &mut |_| {}).unwrap();
    let mut second = small(&part_dir, &[]);
    second.data_dir = Some(data);
    second.checkpoint = Some(half);
    let resumed = Checkpoint::load(&cmd_train_joint(&second, &mut |_| {}).unwrap()).unwrap();
    assert_eq!(resumed.content_hash(), whole.content_hash());

    let losses = std::fs::read_to_string(part_dir.join(LOSSES_CSV)).unwrap();
    assert_eq!(losses.lines().count(), 3);
    assert!(losses.starts_with("phase,epoch,lr,pri,aux,val_pri"));
}

#[test]
fn evaluation_reports_agree_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[]);
    cmd_generate(&cfg).unwrap();
    cmd_train_joint(&cfg, &mut |_| {}).unwrap();
    let meta = cmd_train_meta(&cfg, &mut |_| {}).unwrap();
    assert!(meta.exists());

    let r1 = cmd_eval(&cfg).unwrap();
    let text1 = std::fs::read(dir.path().join(REPORT_TXT)).unwrap();
    let csv1 = std::fs::read(dir.path().join(REPORT_CSV)).unwrap();
    let r2 = cmd_eval(&cfg).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(text1, std::fs::read(dir.path().join(REPORT_TXT)).unwrap());
    assert_eq!(csv1, std::fs::read(dir.path().join(REPORT_CSV)).unwrap());

    let parsed = Report::read_json(&dir.path().join(REPORT_TXT)).unwrap();
    assert_eq!(parsed, r1);
    assert_eq!(read_report_csv(&dir.path().join(REPORT_CSV)).unwrap(), r1.rows);
    assert_eq!(summarize(&r1.rows).unwrap(), r1.summaries);
    assert_eq!(r1.rows.len(), 4);
    assert_eq!(r1.config, cfg);

    let curves = r1.curves();
    let rr = r1.overall().rr;
    let at = |axis: &str, th: f64| curves.iter().find(|c| c.axis == axis && c.threshold == th).unwrap().recall;
    assert_eq!(at("re", 15.0), rr);
    assert_eq!(at("te", 0.30), rr);
    assert!(at("re", 20.0) >= at("re", 1.0) && at("te", 0.60) >= at("te", 0.05));
    let text = std::fs::read_to_string(dir.path().join(CURVES_CSV)).unwrap();
    assert_eq!(text.lines().count(), 1 + 20 + 12);

    let tta = small(dir.path(), &["eval.mode=\"tta\""]);
    let rt = cmd_eval(&tta).unwrap();
    assert_eq!(rt.mode, EvalMode::Tta);
    assert!(rt.rows.iter().all(|r| r.fallback || r.aux_trace.len() == 3));
}

#[test]
fn register_matches_plain_evaluation_and_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["train.joint_epochs=1"]);
    let m = cmd_generate(&cfg).unwrap();
    let ckpt = cmd_train_joint(&cfg, &mut |_| {}).unwrap();
    let report = cmd_eval(&cfg).unwrap();
    let row = &report.rows[0];
    let entry = m.entries.iter().find(|e| e.pair_id == row.pair_id).unwrap();
    let data = cfg.data_dir();
    let gt = dir.path().join("gt.txt");
    std::fs::write(&gt, entry.gt.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")).unwrap();
    let mut rc = cfg.clone();
    rc.checkpoint = Some(ckpt);
    let out = cmd_register(&rc, &data.join(&entry.source.path), &data.join(&entry.target.path), Some(&gt)).unwrap();
    assert_eq!(out.transform.len(), 12);
    assert_eq!(out.re, Some(row.re));
    assert_eq!(out.te, Some(row.te));

    let pair = ptta::synth::load_pair(&data, entry).unwrap();
    let xyz = dir.path().join("src.xyz");
    let text: String = pair.source.points().iter().map(|p| format!("{} {} {}\n", p[0], p[1], p[2])).collect();
    std::fs::write(&xyz, format!("# source\n{text}")).unwrap();
    let tgt = dir.path().join("tgt.ptta");
    write_cloud(&tgt, &pair.target).unwrap();
    let again = cmd_register(&rc, &xyz, &tgt, None).unwrap();
    assert_eq!(again.transform, out.transform);

    let bad = dir.path().join("bad.xyz");
    std::fs::write(&bad, "1 2 three\n").unwrap();
    let e = cmd_register(&rc, &bad, &tgt, None).unwrap_err();
    assert_eq!(e.class(), ErrorClass::DataIo);
    let trunc = dir.path().join("trunc.ptta");
    std::fs::write(&trunc, b"PTTA\x01").unwrap();
    assert_eq!(cmd_register(&rc, &trunc, &tgt, None).unwrap_err().class(), ErrorClass::DataIo);
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[]);
    assert_eq!(cmd_train_joint(&cfg, &mut |_| {}).unwrap_err().class(), ErrorClass::DataIo);
    assert_eq!(cmd_eval(&cfg).unwrap_err().class(), ErrorClass::DataIo);
    assert!(!dir.path().join(JOINT_CHECKPOINT).exists());
}
