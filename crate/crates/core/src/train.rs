//! Training loop: clip sampling, multi-task loss, AdamW with linear warmup
//! and cosine annealing, per-epoch validation mAP, best-checkpoint saving.

use crate::autograd::Graph;
use crate::config::SpotConfig;
use crate::data::{ClipSampler, DataError, VideoData};
use crate::eval::{pooled_map, EvalError, VideoEval};
use crate::infer::{detect_events, predict_scores, PredictFlags};
use crate::model::checkpoint::{save_checkpoint, CheckpointError};
use crate::model::{ModelError, SpotModel};
use crate::rng::DetRng;
use crate::supervision::{
    build_targets, classification_loss, displacement_loss, grasp_loss, total_loss, LossParts,
    SupervisionError,
};
use crate::types::ClipSample;
use ndarray::ArrayD;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("train/val split overlaps on video {0}")]
    SplitOverlap(String),
    #[error("validation split is empty; lower val_fraction or add videos")]
    EmptyVal,
}

/// AdamW over a flat list of parameter tensors.
pub struct AdamW {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(shapes: &[Vec<usize>], weight_decay: f64) -> Self {
        Self {
            m: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update; `params` and `grads` align with the constructor shapes.
    pub fn step(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`;
/// `max_norm == 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [ArrayD<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let total: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
}

/// Linear warmup over the first `warmup_steps`, then cosine annealing to
/// zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Per-epoch log record.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub classification: f64,
    pub displacement: f64,
    pub grasp: f64,
    pub val_map: f64,
}

impl EpochLog {
    pub fn format_line(&self) -> String {
        format!(
            "epoch {:>3} loss {:.6} cls {:.6} disp {:.6} grasp {:.6} val_mAP {:.4}",
            self.epoch, self.total, self.classification, self.displacement, self.grasp, self.val_map
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_map: f64,
}

/// Deterministic split by sorted video id; the trailing fraction validates.
pub fn split_train_val(
    videos: &[VideoData],
    val_fraction: f64,
) -> Result<(Vec<&VideoData>, Vec<&VideoData>), TrainError> {
    let mut order: Vec<&VideoData> = videos.iter().collect();
    order.sort_by(|a, b| a.annotation.video_id.cmp(&b.annotation.video_id));
    let n_val = ((videos.len() as f64 * val_fraction).round() as usize)
        .min(videos.len().saturating_sub(1))
        .max(1);
    let (train, val) = order.split_at(order.len() - n_val);
    if val.is_empty() || train.is_empty() {
        return Err(TrainError::EmptyVal);
    }
    for t in train {
        for v in val.iter() {
            if t.annotation.video_id == v.annotation.video_id {
                return Err(TrainError::SplitOverlap(t.annotation.video_id.clone()));
            }
        }
    }
    Ok((train.to_vec(), val.to_vec()))
}

/// Forward one clip and assemble its total loss on the graph.
///
/// Returns the loss node plus the three component values.
pub fn clip_loss(
    g: &mut Graph,
    model: &SpotModel,
    p: &crate::model::layers::BoundParams,
    clip: &ClipSample,
    cfg: &SpotConfig,
) -> Result<(crate::autograd::Var, [f64; 3]), TrainError> {
    let out = model.forward(g, p, clip)?;
    let targets = build_targets(&clip.event_frames(), clip.grasp_labels(), cfg);
    let parts = LossParts {
        classification: classification_loss(g, out.y_c, &targets.y_c, cfg.loss_kind, cfg),
        displacement: displacement_loss(g, out.y_d, &targets.y_d, &targets.d_mask),
        grasp: grasp_loss(g, out.y_g, &targets.y_g, &targets.g_mask),
    };
    let values = [
        g.scalar(parts.classification),
        g.scalar(parts.displacement),
        g.scalar(parts.grasp),
    ];
    let loss = total_loss(g, &parts, cfg.lambda_g)?;
    Ok((loss, values))
}

/// Pooled validation mAP with the full post-processing pipeline.
pub fn validation_map(
    model: &SpotModel,
    videos: &[&VideoData],
    cfg: &SpotConfig,
) -> Result<f64, TrainError> {
    let mut evals = Vec::with_capacity(videos.len());
    for video in videos {
        let scores = predict_scores(model, video, cfg)?;
        let preds = detect_events(&scores, cfg, PredictFlags::full());
        evals.push(VideoEval { preds, gts: video.annotation.event_frames() });
    }
    let (map, _) = pooled_map(&evals, &cfg.tolerances)?;
    Ok(map)
}

/// Train on `videos`, writing `train_log.txt` and `best.ckpt` under
/// `out_dir` (when given), and returning the per-epoch history.
pub fn train(
    videos: &[VideoData],
    cfg: &SpotConfig,
    out_dir: Option<&Path>,
) -> Result<(SpotModel, TrainReport), TrainError> {
    let (train_videos, val_videos) = split_train_val(videos, cfg.val_fraction)?;
    let train_owned: Vec<VideoData> = train_videos.iter().map(|&v| v.clone()).collect();
    let sampler = ClipSampler::new(&train_owned, cfg)?;

    let mut model = SpotModel::new(cfg);
    let shapes: Vec<Vec<usize>> =
        model.store.iter().map(|(_, _, v)| v.shape().to_vec()).collect();
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    let mut optimizer = AdamW::new(&shapes, cfg.weight_decay);

    let steps_per_epoch = (cfg.clips_per_epoch / cfg.batch_size).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let path = dir.join("train_log.txt");
            Some(std::fs::File::create(&path).map_err(|source| TrainError::Io {
                path: path.display().to_string(),
                source,
            })?)
        }
        None => None,
    };

    let root_rng = DetRng::new(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sample_rng = root_rng.derive(0xE000 + epoch as u64);
        let mut sums = [0.0f64; 4]; // total, cls, disp, grasp
        let mut count = 0usize;
        for _ in 0..steps_per_epoch {
            let lr = lr_at(global_step, total_steps, warmup_steps, cfg.learning_rate);
            let mut grad_acc: Vec<ArrayD<f64>> =
                shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect();
            for _ in 0..cfg.batch_size {
                let clip = sampler.sample(&mut sample_rng);
                let mut g = Graph::new();
                let p = model.bind(&mut g);
                let (loss, parts) = clip_loss(&mut g, &model, &p, &clip, cfg)?;
                let total = g.scalar(loss);
                sums[0] += total;
                sums[1] += parts[0];
                sums[2] += parts[1];
                sums[3] += parts[2];
                count += 1;
                let grads = g.backward(loss);
                for (acc, &id) in grad_acc.iter_mut().zip(&ids) {
                    *acc += &grads.get(&g, p.var(id));
                }
            }
            let scale = 1.0 / cfg.batch_size as f64;
            for acc in grad_acc.iter_mut() {
                acc.mapv_inplace(|v| v * scale);
            }
            clip_grad_norm(&mut grad_acc, cfg.grad_clip);
            let mut params: Vec<ArrayD<f64>> =
                ids.iter().map(|&id| model.store.get(id).clone()).collect();
            optimizer.step(&mut params, &grad_acc, lr);
            for (&id, value) in ids.iter().zip(params) {
                *model.store.get_mut(id) = value;
            }
            global_step += 1;
        }

        let val_map = validation_map(&model, &val_videos, cfg)?;
        let log = EpochLog {
            epoch,
            total: sums[0] / count as f64,
            classification: sums[1] / count as f64,
            displacement: sums[2] / count as f64,
            grasp: sums[3] / count as f64,
            val_map,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", log.format_line()).map_err(|source| TrainError::Io {
                path: "train_log.txt".into(),
                source,
            })?;
        }
        if val_map > best.1 {
            best = (epoch, val_map);
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.ckpt"), &model, cfg)?;
            }
        }
        epochs.push(log);
    }

    // reload the best weights so the returned model matches best.ckpt
    if let Some(dir) = out_dir {
        let (best_model, _) =
            crate::model::checkpoint::load_checkpoint(&dir.join("best.ckpt"))?;
        model = best_model;
    }
    let report = TrainReport { epochs, best_epoch: best.0, best_val_map: best.1 };
    Ok((model, report))
}
