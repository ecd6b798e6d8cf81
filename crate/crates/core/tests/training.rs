//! Training-run oracles on small synthetic problems.

use ptta::auxiliary::AuxFlags;
use ptta::autodiff::AdamConfig;
use ptta::geometry::{rotation_error, EvalThresholds, RigidTransform};
use ptta::meta::{
    evaluate, joint_train, joint_train_step, meta_train, prepare_pairs, Checkpoint, EvalMode,
    PairInput, RegistrationTask, TaskModel, TrainConfig, INNER_TRAINABLE,
};
use ptta::networks::{EncoderConfig, Group, ParamPartition, Trainable};
use ptta::registration::{label_inliers, register_prepared};
use ptta::rng::substream;
use ptta::synth::{generate_pairs, DomainProfile, ScenePair};

fn profile() -> DomainProfile {
    DomainProfile { point_count: 160, ..DomainProfile::indoor("t") }
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        feature_dim: 16,
        hidden: 16,
        agg_hidden: 16,
        k: 8,
        decoder_hidden: 16,
        proj_hidden: 16,
        proj_dim: 16,
        head_hidden: 16,
    }
}

fn task(flags: AuxFlags) -> RegistrationTask {
    let mut t = RegistrationTask::for_voxel(profile().voxel, flags);
    t.primary.mutual = true;
    t
}

fn init(enc: EncoderConfig, seed: u64) -> ParamPartition {
    ParamPartition::init(enc, &mut substream(seed, "init")).unwrap()
}

const REC_ONLY: AuxFlags = AuxFlags { use_rec: true, use_byol: false, use_cc: false };

#[test]
fn decoder_overfits_one_cloud() {
    let pair = &generate_pairs(&profile(), 1, 11).unwrap()[0];
    let x = PairInput::new(pair, small_encoder().k).unwrap();
    let t = task(REC_ONLY);
    let draw = t.sample_draw(&x, &mut substream(0, "draw")).unwrap();
    let mut p = init(small_encoder(), 1);
    let rec = |p: &ParamPartition| t.aux_loss(p, &x, &draw, None).unwrap().parts["rec"];
    let start = rec(&p);
    let adam = AdamConfig::default();
    for _ in 0..500 {
        let l = t.aux_loss(&p, &x, &draw, Some(INNER_TRAINABLE)).unwrap();
        for g in [Group::Shar, Group::Aux] {
            p.store_mut(g).adam_step(l.grads.get(g).unwrap(), 3e-3, &adam).unwrap();
        }
    }
    let end = rec(&p);
    assert!(end * 10.0 <= start, "rec {start} -> {end}");
}

fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut hit, mut total) = (0.0, 0.0);
    for (a, la) in scores.iter().zip(labels) {
        for (b, lb) in scores.iter().zip(labels) {
            if *la && !*lb {
                total += 1.0;
                hit += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    hit / total
}

#[test]
fn head_overfits_one_labeled_set() {
    let pair = &generate_pairs(&profile(), 1, 12).unwrap()[0];
    let x = PairInput::new(pair, small_encoder().k).unwrap();
    let t = task(REC_ONLY);
    let mut p = init(small_encoder(), 2);
    let adam = AdamConfig::default();
    let head_only = Trainable { shar: false, pri: true, aux: false, balance: false };
    for _ in 0..300 {
        let l = t.pri_loss(&p, &x, &pair.gt, Some(head_only)).unwrap();
        p.store_mut(Group::Pri).adam_step(l.grads.get(Group::Pri).unwrap(), 1e-2, &adam).unwrap();
    }
    let r = register_prepared(&p, &x.source, &x.target, true).unwrap();
    let labels = label_inliers(&r.corr, &pair.source, &pair.target, &pair.gt, t.primary.tau_in).unwrap();
    assert!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
    let a = auc(r.corr.weights.as_ref().unwrap(), &labels);
    assert!(a > 0.95, "auc {a}");
}

#[test]
fn fixed_batch_loss_goes_down() {
    let pairs = generate_pairs(&profile(), 4, 13).unwrap();
    let data = prepare_pairs(&pairs, small_encoder().k).unwrap();
    let batch: Vec<_> = data.iter().map(|(x, y)| (x, y)).collect();
    let t = task(AuxFlags::default());
    let cfg = TrainConfig::default();
    let mut p = init(small_encoder(), 3);
    let total = |p: &ParamPartition| -> f64 {
        let mut rng = substream(9, "eval");
        data.iter()
            .map(|(x, y)| {
                let d = t.sample_draw(x, &mut rng).unwrap();
                t.joint_loss(p, x, y, &d).unwrap().value
            })
            .sum()
    };
    let start = total(&p);
    let mut rng = substream(3, "steps");
    for _ in 0..200 {
        joint_train_step(&t, &mut p, &batch, 1e-3, &cfg, &mut rng).unwrap();
    }
    let end = total(&p);
    assert!(end < start, "{start} -> {end}");
}

fn trained(seed: u64, flags: AuxFlags, epochs: usize) -> (RegistrationTask, Checkpoint, Vec<ScenePair>) {
    let pairs = generate_pairs(&profile(), 16, seed).unwrap();
    let data = prepare_pairs(&pairs, small_encoder().k).unwrap();
    let t = task(flags);
    let cfg = TrainConfig { joint_epochs: epochs, meta_epochs: 2, inner_steps: 2, seed, flags, ..TrainConfig::default() };
    let ck = Checkpoint::initial(small_encoder(), cfg).unwrap();
    let ck = joint_train(&t, ck, &data, &mut |_| Ok(true)).unwrap();
    (t, ck, pairs)
}

#[test]
fn self_pairs_register_to_identity() {
    let (t, ck, pairs) = trained(14, AuxFlags::default(), 2);
    let selves: Vec<ScenePair> = pairs
        .iter()
        .take(6)
        .map(|p| ScenePair { target: p.source.clone(), gt: RigidTransform::identity(), ..p.clone() })
        .collect();
    let out = evaluate(&t, &ck.partition, &selves, &EvalThresholds::default(), EvalMode::Plain, 0.0, 0, 0).unwrap();
    for o in &out {
        assert!(o.result.re < 1.0 && o.result.success, "{o:?}");
    }
    let untrained = init(small_encoder(), 99);
    let x = PairInput::new(&selves[0], small_encoder().k).unwrap();
    let r = register_prepared(&untrained, &x.source, &x.target, false).unwrap();
    assert!(rotation_error(&r.transform, &RigidTransform::identity()) < 1.0);
}

#[test]
fn byol_parameters_are_untouched_without_byol() {
    let flags = AuxFlags { use_rec: true, use_byol: false, use_cc: true };
    let (_, ck, _) = trained(15, flags, 1);
    let fresh = init(small_encoder(), 15);
    for (name, w) in fresh.aux.iter().filter(|(n, _)| n.starts_with("proj.") || n.starts_with("pred.")) {
        assert_eq!(ck.partition.aux.get(name).unwrap(), w, "{name}");
    }
    assert_eq!(ck.partition.byol_target, fresh.byol_target);
    let changed = fresh.aux.iter().any(|(n, w)| n.starts_with("dec.") && ck.partition.aux.get(n).unwrap() != w);
    assert!(changed);
}

#[test]
fn meta_training_lowers_validation_loss_and_tta_descends() {
    let (t, ck, pairs) = trained(16, AuxFlags::default(), 3);
    let val = prepare_pairs(&generate_pairs(&profile(), 8, 116).unwrap(), small_encoder().k).unwrap();
    let data = prepare_pairs(&pairs, small_encoder().k).unwrap();
    let m = meta_train(&t, ck, &data, &val, &mut |_| Ok(true)).unwrap();
    let v: Vec<f64> = m.history.iter().filter_map(|h| h.val_pri).collect();
    assert_eq!(v.len(), 3);
    assert!(v.last() < v.first(), "{v:?}");

    let test = generate_pairs(&profile().shifted("s"), 12, 216).unwrap();
    let out = evaluate(&t, &m.partition, &test, &EvalThresholds::default(), EvalMode::Tta, 1e-4, 3, 7).unwrap();
    let mut deltas: Vec<f64> = out
        .iter()
        .filter(|o| !o.fallback && o.error.is_none())
        .map(|o| o.result.aux_loss_trace.last().unwrap() - o.result.aux_loss_trace[0])
        .collect();
    assert!(!deltas.is_empty());
    deltas.sort_by(f64::total_cmp);
    assert!(deltas[deltas.len() / 2] <= 0.0, "{deltas:?}");
    for o in &out {
        let d = o.result.aux_loss_trace.last().unwrap() - o.result.aux_loss_trace[0];
        assert!(o.fallback || d <= 0.0);
    }
}
