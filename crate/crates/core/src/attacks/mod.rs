//! Digital perturbation attacks and the physical patch pipeline.

use thiserror::Error;

use crate::stack::ModelError;
use crate::world::WorldError;

pub mod digital;
pub mod patch;

pub use digital::{
    attack_success_rate, bim, fgsm, fgsm_with, mi_fgsm, pgd, random_noise, run_attack, Attack, AttackConfig,
    AttackMethod,
};
pub use patch::{optimize_patch, patch_gradient, render_fused, EotConfig, PatchAttachment, PatchSpec, Texture};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("patch target agent {0} does not exist")]
    MissingAgent(usize),
    #[error("invalid patch: {0}")]
    Patch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
