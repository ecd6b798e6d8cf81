//! Joint training followed by meta-auxiliary training of a small model,
//! printing the per-epoch losses.

use ptta::auxiliary::AuxFlags;
use ptta::meta::{joint_train, meta_train, prepare_pairs, Checkpoint, RegistrationTask, TrainConfig};
use ptta::networks::EncoderConfig;
use ptta::synth::{generate_pairs, DomainProfile};

fn main() -> ptta::Result<()> {
    let profile = DomainProfile { point_count: 256, ..DomainProfile::indoor("indoor") };
    let enc = EncoderConfig { feature_dim: 16, hidden: 16, agg_hidden: 16, k: 8, ..EncoderConfig::default() };
    let train = prepare_pairs(&generate_pairs(&profile, 16, 1)?, enc.k)?;
    let val = prepare_pairs(&generate_pairs(&profile, 4, 2)?, enc.k)?;
    let task = RegistrationTask::for_voxel(profile.voxel, AuxFlags::default());
    let cfg = TrainConfig { joint_epochs: 5, meta_epochs: 2, ..TrainConfig::default() };
    let mut log = |c: &Checkpoint| {
        if let Some(h) = c.history.last() {
            println!("{} epoch {} pri {:.4} aux {:.4} val_pri {:?}", h.phase, h.epoch, h.pri, h.aux, h.val_pri);
        }
        Ok(true)
    };
    let ckpt = joint_train(&task, Checkpoint::initial(enc, cfg)?, &train, &mut log)?;
    let ckpt = meta_train(&task, ckpt, &train, &val, &mut log)?;
    println!("checkpoint {}", ckpt.content_hash());
    Ok(())
}
