mod artifact;
mod config;
mod loss;
mod mask;
mod run;
mod selection;

pub use artifact::{load_artifact, save_artifact, AttackArtifact};
pub use config::{AttackConfig, AttackMode, Budget, GradientCombine};
pub use loss::{
    apply_perturbation, apply_perturbation_var, attention_loss, attention_loss_var, build_target_prompt,
    combine_gradients, loss_weights, TargetPrompt,
};
pub use mask::{sparse_project_topk, Mask};
pub use run::{evaluate_perturbed, run_captionfool, AttackRun, CheckRecord, PerturbedEval};
pub use selection::{patch_importance, select_from_importance, select_universal_patches, top_n};
