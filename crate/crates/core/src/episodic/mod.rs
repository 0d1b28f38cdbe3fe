//! Episode sampling, losses, training, test-time adaptation and evaluation.

mod baseline;
mod episode;
mod evaluate;
mod loss;
mod optim;
mod train;

pub use baseline::nearest_centroid_predict;
pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use evaluate::{
    argmax_rows, decision_scores, evaluate, evaluate_with, finetune_one_step, mean_ci95, predict, self_episode_plan,
    tta_class_weights, tta_support_weights, EvalOptions, EvalReport, FINETUNE_LR, TTA_COPIES,
};
pub use loss::{
    attention_loss, class_weight_average, classification_loss, episode_losses, forward_episode, label_groups,
    loss_values, total_loss, LossValues, LossVars,
};
pub use optim::{sgd_update, Adam};
pub use train::{train, train_step, TrainConfig};
