//! Tiled inference and the two-stage prediction path.

use crate::checkpoint::CheckpointMeta;
use crate::preproc::{
    downsample_mask, downsample_volume, roi_from_mask, upsample_mask_nn, BoundingBox, Factors,
};
use crate::unet::UNet;
use crate::volume::{Dims, LabelVolume, MaskVolume, Volume};
use crate::{Error, Result};

use super::CaseInput;

fn tile_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut s = 0usize;
    loop {
        let start = s.min(dim - patch);
        if v.last() != Some(&start) {
            v.push(start);
        }
        if s + patch >= dim {
            break;
        }
        s += stride;
    }
    v
}

/// Per-voxel argmax over channel maps, smallest index winning ties.
pub(crate) fn argmax_channels(maps: &[Vec<f32>]) -> Vec<u8> {
    let n = maps[0].len();
    let mut out = vec![0u8; n];
    for i in 0..n {
        let mut best = maps[0][i];
        let mut lab = 0u8;
        for (c, m) in maps.iter().enumerate().skip(1) {
            if m[i] > best {
                best = m[i];
                lab = c as u8;
            }
        }
        out[i] = lab;
    }
    out
}

/// Sliding-window inference over a two-channel region.
///
/// Patches cover the region with the given overlap fraction; edge patches
/// shift inward rather than padding past the volume. Logits are averaged
/// uniformly where patches overlap (fixed accumulation order), then
/// softmaxed into per-class probability maps. Regions smaller than the
/// patch are padded with background (-1 image, mask off) and cropped back.
pub fn tile_inference(
    net: &mut UNet,
    image: &Volume,
    mask_channel: &MaskVolume,
    patch: usize,
    overlap: f64,
) -> Result<Vec<Volume>> {
    if image.dims() != mask_channel.dims() {
        return Err(Error::ShapeMismatch(format!(
            "image dims {:?} != mask dims {:?}",
            image.dims(),
            mask_channel.dims()
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidConfig(format!("overlap {overlap} outside [0, 1)")));
    }
    let div = net.config().patch_divisor();
    if patch == 0 || patch % div != 0 {
        return Err(Error::InvalidConfig(format!("patch {patch} must divide {div}")));
    }
    let classes = net.config().out_channels;
    let dims = image.dims();

    // Pad any axis shorter than the patch with background.
    let padded_dims =
        Dims::new(dims.nx.max(patch), dims.ny.max(patch), dims.nz.max(patch));
    let (img, mask);
    let (img_ref, mask_ref) = if padded_dims != dims {
        let b = BoundingBox::new([0, 0, 0], [dims.nx, dims.ny, dims.nz])?;
        img = image.embed(&b, padded_dims, -1.0)?;
        mask = mask_channel.embed(&b, padded_dims, false)?;
        (&img, &mask)
    } else {
        (image, mask_channel)
    };

    let stride = ((patch as f64) * (1.0 - overlap)).floor().max(1.0) as usize;
    let xs = tile_starts(padded_dims.nx, patch, stride);
    let ys = tile_starts(padded_dims.ny, patch, stride);
    let zs = tile_starts(padded_dims.nz, patch, stride);

    let n = padded_dims.count();
    let mut sums = vec![vec![0.0f32; n]; classes];
    let mut counts = vec![0u32; n];
    let pvox = patch * patch * patch;

    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                let mut input = vec![0.0f32; 2 * pvox];
                for z in 0..patch {
                    for y in 0..patch {
                        let src = padded_dims.index(x0, y0 + y, z0 + z);
                        let dst = (z * patch + y) * patch;
                        input[dst..dst + patch]
                            .copy_from_slice(&img_ref.values()[src..src + patch]);
                        for x in 0..patch {
                            input[pvox + dst + x] =
                                if mask_ref.bits()[src + x] { 1.0 } else { -1.0 };
                        }
                    }
                }
                let logits = net.infer(crate::autodiff::Tensor::new(
                    vec![1, 2, patch, patch, patch],
                    input,
                )?)?;
                for c in 0..classes {
                    let ch = &logits.data()[c * pvox..(c + 1) * pvox];
                    for z in 0..patch {
                        for y in 0..patch {
                            let dst = padded_dims.index(x0, y0 + y, z0 + z);
                            let src = (z * patch + y) * patch;
                            for x in 0..patch {
                                sums[c][dst + x] += ch[src + x];
                            }
                        }
                    }
                }
                for z in 0..patch {
                    for y in 0..patch {
                        let dst = padded_dims.index(x0, y0 + y, z0 + z);
                        for x in 0..patch {
                            counts[dst + x] += 1;
                        }
                    }
                }
            }
        }
    }

    // Average, then per-voxel softmax with max subtraction.
    for c in 0..classes {
        for (s, &k) in sums[c].iter_mut().zip(&counts) {
            *s /= k as f32;
        }
    }
    let mut probs = vec![vec![0.0f32; n]; classes];
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for s in sums.iter() {
            mx = mx.max(s[i] as f64);
        }
        let mut denom = 0.0f64;
        for s in sums.iter() {
            denom += ((s[i] as f64) - mx).exp();
        }
        for (c, s) in sums.iter().enumerate() {
            probs[c][i] = (((s[i] as f64) - mx).exp() / denom) as f32;
        }
    }

    // Crop back to the unpadded region.
    let crop = BoundingBox::new([0, 0, 0], [dims.nx, dims.ny, dims.nz])?;
    let mut out = Vec::with_capacity(classes);
    for p in probs {
        out.push(Volume::new(padded_dims, image.spacing(), p)?.crop(&crop)?);
    }
    Ok(out)
}

/// Stage-1 output: coarse probability maps, the derived ROI, and the
/// full-resolution foreground mask.
pub struct Stage1Prediction {
    pub probabilities: Vec<Volume>,
    pub roi: BoundingBox,
    pub mask: MaskVolume,
    /// True when stage 1 found no foreground and the ROI fell back to the
    /// body bounding box.
    pub used_fallback: bool,
}

/// Coarse inference on the downsampled case; the non-background argmax
/// mask, upsampled to full resolution, yields the ROI.
pub fn predict_stage1(
    case: &CaseInput,
    net: &mut UNet,
    meta: &CheckpointMeta,
) -> Result<Stage1Prediction> {
    if meta.stage != 1 {
        return Err(Error::Checkpoint(format!("stage-1 checkpoint has stage {}", meta.stage)));
    }
    let f = Factors::uniform(meta.downsample);
    let ds_img = downsample_volume(&case.normalized, f)?;
    let ds_body = downsample_mask(&case.body, f)?;
    let probabilities = tile_inference(net, &ds_img, &ds_body, meta.patch, 0.5)?;

    let maps: Vec<Vec<f32>> = probabilities.iter().map(|v| v.values().to_vec()).collect();
    let coarse_labels = argmax_channels(&maps);
    let coarse = MaskVolume::new(
        ds_img.dims(),
        ds_img.spacing(),
        coarse_labels.iter().map(|&l| l != 0).collect(),
    )?;
    let mask = upsample_mask_nn(&coarse, f, case.dims())?;

    let (roi, used_fallback) = if mask.is_empty() {
        log::warn!("stage 1 predicted no foreground for '{}'; using body bounding box", case.id);
        (roi_from_mask(&case.body, 0)?, true)
    } else {
        (roi_from_mask(&mask, meta.roi_margin)?, false)
    };
    Ok(Stage1Prediction { probabilities, roi, mask, used_fallback })
}

/// Full two-stage prediction for one case.
///
/// Stage 2 sees the ROI-cropped normalized image with the stage-1 mask as
/// its second channel (tiled, 50% overlap); per-voxel argmax labels are
/// embedded into the full grid and everything outside the body mask is
/// forced to background.
pub fn predict_cascade(
    case: &CaseInput,
    stage1: (&mut UNet, &CheckpointMeta),
    stage2: (&mut UNet, &CheckpointMeta),
) -> Result<LabelVolume> {
    let (net1, meta1) = stage1;
    let (net2, meta2) = stage2;
    if meta2.stage != 2 {
        return Err(Error::Checkpoint(format!("stage-2 checkpoint has stage {}", meta2.stage)));
    }
    if meta1.config.out_channels != meta2.config.out_channels {
        return Err(Error::Checkpoint(format!(
            "stage checkpoints disagree on classes: {} vs {}",
            meta1.config.out_channels, meta2.config.out_channels
        )));
    }

    let s1 = predict_stage1(case, net1, meta1)?;
    let cropped_img = case.normalized.crop(&s1.roi)?;
    let cropped_mask = s1.mask.crop(&s1.roi)?;
    let probs = tile_inference(net2, &cropped_img, &cropped_mask, meta2.patch, 0.5)?;

    let maps: Vec<Vec<f32>> = probs.iter().map(|v| v.values().to_vec()).collect();
    let roi_labels = argmax_channels(&maps);
    let roi_vol = LabelVolume::new(s1.roi.dims(), cropped_img.spacing(), roi_labels)?;
    let full = roi_vol.embed(&s1.roi, case.dims(), 0)?;

    let gated: Vec<u8> = full
        .labels()
        .iter()
        .zip(case.body.bits())
        .map(|(&l, &inside)| if inside { l } else { 0 })
        .collect();
    LabelVolume::new(case.dims(), case.spacing(), gated)
}
