//! Patch-based stage training with weighted cross-entropy and Adam.

use crate::autodiff::{BnMode, Graph, Optimizer, Tensor};
use crate::checkpoint::{load_checkpoint_expecting, CheckpointMeta};
use crate::preproc::{
    downsample_labels, downsample_mask, downsample_volume, roi_from_mask, BoundingBox, Factors,
};
use crate::unet::{UNet, UNetConfig};
use crate::volume::{Dims, LabelVolume, MaskVolume, NUM_CLASSES};
use crate::{derive_seed, Error, Result};

use super::sampler::{PatchBatch, PatchSampler, SamplerCase};
use super::{CaseInput, StagePlan};

/// Inverse-frequency class weights over the masked voxels of a training
/// set: w_c = N_total / (K * N_c), clamped to [0.1, 10]. Absent classes
/// get the upper clamp.
pub fn inverse_frequency_weights<'a>(
    items: impl Iterator<Item = (&'a LabelVolume, &'a MaskVolume)>,
) -> [f32; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    let mut total = 0u64;
    for (labels, mask) in items {
        for (&l, &m) in labels.labels().iter().zip(mask.bits()) {
            if m {
                counts[l as usize] += 1;
                total += 1;
            }
        }
    }
    let mut w = [0.0f32; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        w[c] = if counts[c] == 0 {
            10.0
        } else {
            ((total as f64 / (NUM_CLASSES as f64 * counts[c] as f64)) as f32).clamp(0.1, 10.0)
        };
    }
    w
}

fn pad_dims(d: Dims, patch: usize) -> Dims {
    Dims::new(d.nx.max(patch), d.ny.max(patch), d.nz.max(patch))
}

fn origin_box(d: Dims) -> BoundingBox {
    BoundingBox::new([0, 0, 0], [d.nx, d.ny, d.nz]).expect("non-degenerate")
}

/// Build the per-case sampling grids for a stage.
///
/// Stage 1 trains on downsampled whole volumes with the body mask as the
/// mask channel. Stage 2 trains inside the ground-truth ROI (foreground
/// box dilated by the plan margin) with the ground-truth foreground mask
/// as the mask channel, matching what the stage receives from stage-1
/// predictions at inference. Grids smaller than the patch are padded
/// with background.
fn stage_cases(cases: &[CaseInput], plan: &StagePlan) -> Result<Vec<SamplerCase>> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let labels = case
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("case '{}' has no labels", case.id)))?;

        let (image, mask_channel, loss_mask, labels) = match plan.stage {
            1 => {
                let f = Factors::uniform(plan.downsample);
                let img = downsample_volume(&case.normalized, f)?;
                let body = downsample_mask(&case.body, f)?;
                let labs = downsample_labels(labels, f)?;
                (img, body.clone(), body, labs)
            }
            _ => {
                let fg = labels.foreground_mask();
                let roi = roi_from_mask(&fg, plan.roi_margin)?;
                (
                    case.normalized.crop(&roi)?,
                    fg.crop(&roi)?,
                    case.body.crop(&roi)?,
                    labels.crop(&roi)?,
                )
            }
        };

        let padded = pad_dims(image.dims(), plan.patch);
        let (image, mask_channel, loss_mask, labels) = if padded != image.dims() {
            let b = origin_box(image.dims());
            (
                image.embed(&b, padded, -1.0)?,
                mask_channel.embed(&b, padded, false)?,
                loss_mask.embed(&b, padded, false)?,
                labels.embed(&b, padded, 0)?,
            )
        } else {
            (image, mask_channel, loss_mask, labels)
        };
        out.push(SamplerCase::new(image, mask_channel, loss_mask, labels)?);
    }
    Ok(out)
}

/// Loss of the current parameters on one batch, using the same forward
/// path as a training step (batch-statistics BN).
pub fn evaluate_batch_loss(
    net: &mut UNet,
    batch: &PatchBatch,
    class_weights: &[f32],
) -> Result<f32> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g, false);
    let iv = g.leaf(batch.input.clone(), false);
    let logits = net.forward(&mut g, &vars, iv, BnMode::Train)?;
    let loss = g.weighted_cross_entropy(logits, &batch.targets, class_weights, &batch.loss_mask)?;
    g.value(loss).scalar_value()
}

/// Result of one stage training run.
pub struct TrainOutcome {
    pub net: UNet,
    pub meta: CheckpointMeta,
    /// (iteration, loss-before-update) per iteration.
    pub loss_trace: Vec<(u64, f32)>,
    /// Periodic parameter snapshots (iteration, network), final included.
    pub snapshots: Vec<(u64, UNet)>,
    pub class_weights: [f32; NUM_CLASSES],
    pub stopped_early: bool,
}

/// Train one cascade stage on prepared cases.
///
/// With an init checkpoint the run fine-tunes: parameters, BN statistics
/// and nothing else start from the checkpoint (no layer freezing), at the
/// plan's learning rate. The loss recorded at each iteration is computed
/// before the parameter update, so iteration 0 reports the init
/// parameters' loss.
pub fn train_stage(
    cases: &[CaseInput],
    plan: &StagePlan,
    config: UNetConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    plan.validate(config.patch_divisor())?;
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.in_channels != 2 {
        return Err(Error::InvalidConfig(format!(
            "cascade stages use 2 input channels, config has {}",
            config.in_channels
        )));
    }

    let grids = stage_cases(cases, plan)?;
    let class_weights =
        inverse_frequency_weights(grids.iter().map(|c| (&c.labels, &c.loss_mask)));

    let mut net = match &plan.init_checkpoint {
        Some(path) => {
            let (net, meta) = load_checkpoint_expecting(path, &config)?;
            if meta.stage != plan.stage {
                return Err(Error::Checkpoint(format!(
                    "init checkpoint is stage {}, plan is stage {}",
                    meta.stage, plan.stage
                )));
            }
            net
        }
        None => UNet::build(config, derive_seed(seed, "init"))?,
    };

    let mut sampler = PatchSampler::from_cases(grids, plan, derive_seed(seed, "patches"))?;
    let mut opt = Optimizer::adam(plan.learning_rate, net.param_tensors());

    let mut loss_trace: Vec<(u64, f32)> = Vec::with_capacity(plan.iterations as usize);
    let mut snapshots: Vec<(u64, UNet)> = Vec::new();
    let mut stopped_early = false;

    let mut iterations_run = 0u64;
    for it in 0..plan.iterations {
        let batch = sampler.batch(plan.batch);

        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let iv = g.leaf(batch.input.clone(), false);
        let logits = net.forward(&mut g, &vars, iv, BnMode::Train)?;
        let loss =
            g.weighted_cross_entropy(logits, &batch.targets, &class_weights, &batch.loss_mask)?;
        let loss_value = g.value(loss).scalar_value()?;
        loss_trace.push((it, loss_value));

        g.backward(loss)?;
        let grads: Vec<Option<&Tensor>> = vars.iter().map(|&v| g.grad(v)).collect();
        opt.step(net.param_tensors_mut(), &grads)?;
        iterations_run = it + 1;

        if it % 50 == 0 {
            log::info!("stage {} iteration {}/{} loss {:.4}", plan.stage, it, plan.iterations, loss_value);
        }
        if plan.snapshot_interval > 0
            && iterations_run % plan.snapshot_interval == 0
            && iterations_run < plan.iterations
        {
            snapshots.push((iterations_run, net.clone()));
        }
        if let Some(target) = plan.stop_at_loss {
            if loss_trace.len() >= 10 {
                let smoothed: f32 =
                    loss_trace.iter().rev().take(10).map(|&(_, l)| l).sum::<f32>() / 10.0;
                if smoothed < target {
                    log::info!(
                        "stage {} stopping at iteration {} (smoothed loss {:.4} < {:.4})",
                        plan.stage,
                        iterations_run,
                        smoothed,
                        target
                    );
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    snapshots.push((iterations_run, net.clone()));

    let tail_start = loss_trace.len().saturating_sub(16);
    let meta = CheckpointMeta {
        config,
        stage: plan.stage,
        alpha_training: plan.alpha_training,
        iteration: iterations_run,
        loss_tail: loss_trace[tail_start..].iter().map(|&(_, l)| l).collect(),
        seed,
        downsample: plan.downsample,
        patch: plan.patch,
        roi_margin: plan.roi_margin,
    };
    Ok(TrainOutcome { net, meta, loss_trace, snapshots, class_weights, stopped_early })
}
