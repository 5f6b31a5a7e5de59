//! Deterministic foreground-biased patch sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::volume::{Dims, LabelVolume, MaskVolume, Volume};
use crate::{Error, Result};

use super::{CaseInput, StagePlan};

/// One training batch: a (batch, 2, p, p, p) input tensor, per-voxel
/// target labels, and the loss mask, both of length batch * p^3.
pub struct PatchBatch {
    pub input: Tensor,
    pub targets: Vec<u8>,
    pub loss_mask: Vec<bool>,
    /// Patch centers, one per batch entry: (case index, x, y, z).
    pub centers: Vec<(usize, usize, usize, usize)>,
}

/// Grids one case contributes to sampling. `mask_channel` becomes input
/// channel 1 as (-1, +1); `loss_mask` selects loss voxels; foreground
/// indices come from the labels.
pub(crate) struct SamplerCase {
    pub image: Volume,
    pub mask_channel: MaskVolume,
    pub loss_mask: MaskVolume,
    pub labels: LabelVolume,
    fg_indices: Vec<u32>,
    body_indices: Vec<u32>,
}

impl SamplerCase {
    pub(crate) fn new(
        image: Volume,
        mask_channel: MaskVolume,
        loss_mask: MaskVolume,
        labels: LabelVolume,
    ) -> Result<Self> {
        let dims = image.dims();
        if mask_channel.dims() != dims || loss_mask.dims() != dims || labels.dims() != dims {
            return Err(Error::ShapeMismatch("sampler grids must share dims".into()));
        }
        let fg_indices: Vec<u32> =
            (0..dims.count()).filter(|&i| labels.labels()[i] != 0).map(|i| i as u32).collect();
        let body_indices: Vec<u32> =
            (0..dims.count()).filter(|&i| loss_mask.bits()[i]).map(|i| i as u32).collect();
        if body_indices.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(SamplerCase { image, mask_channel, loss_mask, labels, fg_indices, body_indices })
    }

    fn dims(&self) -> Dims {
        self.image.dims()
    }
}

/// Deterministic patch stream over one or more cases.
pub struct PatchSampler {
    cases: Vec<SamplerCase>,
    patch: usize,
    fg_fraction: f64,
    rng: ChaCha8Rng,
    warned_no_fg: bool,
}

impl PatchSampler {
    pub(crate) fn from_cases(cases: Vec<SamplerCase>, plan: &StagePlan, seed: u64) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for c in &cases {
            let d = c.dims();
            if d.nx < plan.patch || d.ny < plan.patch || d.nz < plan.patch {
                return Err(Error::ShapeMismatch(format!(
                    "case dims {d:?} smaller than patch {}",
                    plan.patch
                )));
            }
        }
        Ok(PatchSampler {
            cases,
            patch: plan.patch,
            fg_fraction: plan.fg_fraction,
            rng: ChaCha8Rng::seed_from_u64(seed),
            warned_no_fg: false,
        })
    }

    /// Draw the next batch. With probability `fg_fraction` a patch is
    /// centered on a uniformly drawn foreground voxel, otherwise on a
    /// uniformly drawn loss-mask voxel. Fixed seed, fixed sequence.
    pub fn batch(&mut self, batch: usize) -> PatchBatch {
        let p = self.patch;
        let pvox = p * p * p;
        let mut input = vec![0.0f32; batch * 2 * pvox];
        let mut targets = vec![0u8; batch * pvox];
        let mut loss_mask = vec![false; batch * pvox];
        let mut centers = Vec::with_capacity(batch);

        for b in 0..batch {
            let ci = if self.cases.len() == 1 { 0 } else { self.rng.gen_range(0..self.cases.len()) };
            let want_fg = self.rng.gen::<f64>() < self.fg_fraction;
            let case = &self.cases[ci];
            let pool = if want_fg && !case.fg_indices.is_empty() {
                &case.fg_indices
            } else {
                if want_fg && !self.warned_no_fg {
                    log::warn!("case has no foreground voxels; sampling from body mask instead");
                    self.warned_no_fg = true;
                }
                &case.body_indices
            };
            let center = pool[self.rng.gen_range(0..pool.len())] as usize;
            let dims = case.dims();
            let (cx, cy, cz) = dims.coords(center);
            let x0 = cx.saturating_sub(p / 2).min(dims.nx - p);
            let y0 = cy.saturating_sub(p / 2).min(dims.ny - p);
            let z0 = cz.saturating_sub(p / 2).min(dims.nz - p);
            centers.push((ci, cx, cy, cz));

            let img = case.image.values();
            let mch = case.mask_channel.bits();
            let lmask = case.loss_mask.bits();
            let labs = case.labels.labels();
            for z in 0..p {
                for y in 0..p {
                    let src = dims.index(x0, y0 + y, z0 + z);
                    let dst = (z * p + y) * p;
                    let img_row = &img[src..src + p];
                    let ch0 = &mut input[(b * 2) * pvox + dst..(b * 2) * pvox + dst + p];
                    ch0.copy_from_slice(img_row);
                    for x in 0..p {
                        input[(b * 2 + 1) * pvox + dst + x] =
                            if mch[src + x] { 1.0 } else { -1.0 };
                        targets[b * pvox + dst + x] = labs[src + x];
                        loss_mask[b * pvox + dst + x] = lmask[src + x];
                    }
                }
            }
        }
        PatchBatch {
            input: Tensor::new(vec![batch, 2, p, p, p], input).expect("patch tensor"),
            targets,
            loss_mask,
            centers,
        }
    }
}

/// Patch stream over a single prepared training case: channel 0 is the
/// normalized mixed image, channel 1 the body mask as (-1, +1).
pub fn sample_patches(case: &CaseInput, plan: &StagePlan, seed: u64) -> Result<PatchSampler> {
    let labels = case
        .labels
        .clone()
        .ok_or_else(|| Error::InvalidConfig("sampling requires a labeled case".into()))?;
    let sc = SamplerCase::new(
        case.normalized.clone(),
        case.body.clone(),
        case.body.clone(),
        labels,
    )?;
    PatchSampler::from_cases(vec![sc], plan, seed)
}
