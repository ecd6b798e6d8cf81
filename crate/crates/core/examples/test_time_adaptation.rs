//! Registers shifted-domain pairs with a briefly trained model, before and
//! after a few self-supervised adaptation steps on each pair.

use ptta::auxiliary::AuxFlags;
use ptta::geometry::{rotation_error, translation_error};
use ptta::meta::{joint_train, prepare_pairs, tta_register, Checkpoint, PairInput, RegistrationTask, TrainConfig};
use ptta::networks::EncoderConfig;
use ptta::registration::register_prepared;
use ptta::synth::{generate_pairs, DomainProfile};

fn main() -> ptta::Result<()> {
    let profile = DomainProfile { point_count: 256, ..DomainProfile::indoor("indoor") };
    let enc = EncoderConfig { feature_dim: 16, hidden: 16, agg_hidden: 16, k: 8, ..EncoderConfig::default() };
    let train = prepare_pairs(&generate_pairs(&profile, 16, 3)?, enc.k)?;
    let task = RegistrationTask::for_voxel(profile.voxel, AuxFlags::default());
    let cfg = TrainConfig { joint_epochs: 5, ..TrainConfig::default() };
    let ckpt = joint_train(&task, Checkpoint::initial(enc, cfg.clone())?, &train, &mut |_| Ok(true))?;

    for (i, pair) in generate_pairs(&profile.shifted("shifted"), 5, 4)?.iter().enumerate() {
        let x = PairInput::new(pair, enc.k)?;
        let plain = register_prepared(&ckpt.partition, &x.source, &x.target, task.primary.mutual)?;
        let tta = tta_register(&task, &ckpt.partition, &x, cfg.alpha, cfg.tta_steps, i as u64)?;
        println!(
            "{}: plain RE {:6.2} TE {:.3} | adapted RE {:6.2} TE {:.3} | L_aux {:.4} -> {:.4}{}",
            pair.pair_id,
            rotation_error(&plain.transform, &pair.gt),
            translation_error(&plain.transform, &pair.gt),
            rotation_error(&tta.registration.transform, &pair.gt),
            translation_error(&tta.registration.transform, &pair.gt),
            tta.trace.first().copied().unwrap_or(f64::NAN),
            tta.trace.last().copied().unwrap_or(f64::NAN),
            if tta.fallback { " (fallback)" } else { "" }
        );
    }
    Ok(())
}
