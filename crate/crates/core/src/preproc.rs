//! Dual-energy preprocessing: spectral blending, intensity normalization,
//! skin-contour body masking, and the resolution/ROI plumbing that feeds
//! the two-stage cascade.
//!
//! All operations are pure functions of immutable inputs.

use serde::{Deserialize, Serialize};

use crate::volume::{Dims, LabelVolume, MaskVolume, Volume, MAX_LABEL};
use crate::{Error, Result};

/// HU clamp bound used by [`normalize`]; values map onto [-1, +1].
pub const NORMALIZE_CLAMP_HU: f32 = 1024.0;

/// Default skin threshold in HU. Air sits near -1000, tissue near 0, so
/// the exact value is uncritical anywhere in between.
pub const DEFAULT_SKIN_THRESHOLD_HU: f32 = -500.0;

/// Default ROI dilation in voxels applied per face.
pub const DEFAULT_ROI_MARGIN: usize = 8;

/// Blending weight for the dual-energy composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    alpha: f64,
}

impl MixConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
            return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(MixConfig { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Axis-aligned voxel box, `lo` inclusive, `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if lo.iter().zip(&hi).any(|(l, h)| l >= h) {
            return Err(Error::ShapeMismatch(format!("degenerate box lo {lo:?} hi {hi:?}")));
        }
        Ok(BoundingBox { lo, hi })
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2])
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }

    pub fn fits_in(&self, dims: Dims) -> bool {
        self.hi[0] <= dims.nx && self.hi[1] <= dims.ny && self.hi[2] <= dims.nz
    }

    fn check_fits(&self, dims: Dims) -> Result<()> {
        if !self.fits_in(dims) {
            return Err(Error::ShapeMismatch(format!("box {self:?} outside dims {dims:?}")));
        }
        Ok(())
    }
}

/// Per-voxel linear blend of the two spectra:
/// `out = alpha * low + (1 - alpha) * high`.
///
/// Computed in f64 and rounded once, so the result never leaves
/// `[min(low, high), max(low, high)]` and `low == high` voxels pass
/// through bit-exactly.
pub fn mix(low: &Volume, high: &Volume, cfg: MixConfig) -> Result<Volume> {
    if low.dims() != high.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mix inputs {:?} vs {:?}",
            low.dims(),
            high.dims()
        )));
    }
    if low.spacing() != high.spacing() {
        return Err(Error::ShapeMismatch(format!(
            "mix spacings {:?} vs {:?}",
            low.spacing(),
            high.spacing()
        )));
    }
    let a = cfg.alpha();
    let b = 1.0 - a;
    let values: Vec<f32> = low
        .values()
        .iter()
        .zip(high.values())
        .map(|(&l, &h)| (a * l as f64 + b * h as f64) as f32)
        .collect();
    Volume::new(low.dims(), low.spacing(), values)
}

/// Skin-contour body mask: threshold, keep the largest 6-connected
/// component, then fill enclosed cavities (complement of the exterior
/// flood fill).
pub fn body_mask(mixed: &Volume, threshold_hu: f32) -> Result<MaskVolume> {
    let dims = mixed.dims();
    let above: Vec<bool> = mixed.values().iter().map(|&v| v >= threshold_hu).collect();
    if !above.iter().any(|&b| b) {
        return Err(Error::EmptyBody);
    }

    let component = largest_component(&above, dims);
    let exterior = exterior_fill(&component, dims);
    let bits: Vec<bool> =
        component.iter().zip(&exterior).map(|(&c, &e)| c || !e).collect();
    MaskVolume::new(dims, mixed.spacing(), bits)
}

/// Largest 6-connected true component; ties resolved toward the component
/// containing the lowest linear index.
fn largest_component(above: &[bool], dims: Dims) -> Vec<bool> {
    let n = dims.count();
    let mut label = vec![u32::MAX; n];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();

    for seed in 0..n {
        if !above[seed] || label[seed] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0usize;
        label[seed] = id;
        stack.push(seed);
        while let Some(idx) = stack.pop() {
            size += 1;
            for nb in neighbors6(idx, dims) {
                if above[nb] && label[nb] == u32::MAX {
                    label[nb] = id;
                    stack.push(nb);
                }
            }
        }
        sizes.push(size);
    }

    let best = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32)
        .expect("at least one component");
    label.iter().map(|&l| l == best).collect()
}

/// Flood fill of false voxels reachable from the grid boundary (6-conn).
fn exterior_fill(component: &[bool], dims: Dims) -> Vec<bool> {
    let n = dims.count();
    let mut exterior = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();

    for idx in 0..n {
        let (x, y, z) = dims.coords(idx);
        let boundary = x == 0
            || y == 0
            || z == 0
            || x == dims.nx - 1
            || y == dims.ny - 1
            || z == dims.nz - 1;
        if boundary && !component[idx] && !exterior[idx] {
            exterior[idx] = true;
            stack.push(idx);
        }
    }
    while let Some(idx) = stack.pop() {
        for nb in neighbors6(idx, dims) {
            if !component[nb] && !exterior[nb] {
                exterior[nb] = true;
                stack.push(nb);
            }
        }
    }
    exterior
}

fn neighbors6(idx: usize, dims: Dims) -> impl Iterator<Item = usize> {
    let (x, y, z) = dims.coords(idx);
    let mut out = [usize::MAX; 6];
    let mut n = 0;
    if x > 0 {
        out[n] = idx - 1;
        n += 1;
    }
    if x + 1 < dims.nx {
        out[n] = idx + 1;
        n += 1;
    }
    if y > 0 {
        out[n] = idx - dims.nx;
        n += 1;
    }
    if y + 1 < dims.ny {
        out[n] = idx + dims.nx;
        n += 1;
    }
    if z > 0 {
        out[n] = idx - dims.nx * dims.ny;
        n += 1;
    }
    if z + 1 < dims.nz {
        out[n] = idx + dims.nx * dims.ny;
        n += 1;
    }
    out.into_iter().take(n)
}

/// Clamp to `[-NORMALIZE_CLAMP_HU, +NORMALIZE_CLAMP_HU]`, map affinely to
/// `[-1, +1]`, and force voxels outside the mask to -1.
pub fn normalize(volume: &Volume, mask: &MaskVolume) -> Result<Volume> {
    if volume.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!(
            "normalize dims {:?} vs mask {:?}",
            volume.dims(),
            mask.dims()
        )));
    }
    let values: Vec<f32> = volume
        .values()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &inside)| {
            if inside {
                v.clamp(-NORMALIZE_CLAMP_HU, NORMALIZE_CLAMP_HU) / NORMALIZE_CLAMP_HU
            } else {
                -1.0
            }
        })
        .collect();
    Volume::new(volume.dims(), volume.spacing(), values)
}

/// Per-axis integer downsampling factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factors(pub usize, pub usize, pub usize);

impl Factors {
    pub fn uniform(f: usize) -> Self {
        Factors(f, f, f)
    }

    fn validate(&self) -> Result<()> {
        if self.0 == 0 || self.1 == 0 || self.2 == 0 {
            return Err(Error::InvalidConfig("zero downsampling factor".into()));
        }
        Ok(())
    }

    fn out_dims(&self, dims: Dims) -> Dims {
        Dims::new(div_ceil(dims.nx, self.0), div_ceil(dims.ny, self.1), div_ceil(dims.nz, self.2))
    }
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

fn scaled_spacing(s: crate::volume::Spacing, f: Factors) -> crate::volume::Spacing {
    crate::volume::Spacing::new(s.sx * f.0 as f64, s.sy * f.1 as f64, s.sz * f.2 as f64)
}

/// Iterate the source voxels of one output block, replicating edge
/// voxels where the block sticks out past the input dims.
fn for_block(dims: Dims, f: Factors, ox: usize, oy: usize, oz: usize, mut visit: impl FnMut(usize)) {
    for dz in 0..f.2 {
        let z = (oz * f.2 + dz).min(dims.nz - 1);
        for dy in 0..f.1 {
            let y = (oy * f.1 + dy).min(dims.ny - 1);
            for dx in 0..f.0 {
                let x = (ox * f.0 + dx).min(dims.nx - 1);
                visit(dims.index(x, y, z));
            }
        }
    }
}

/// Block-mean downsampling for scalar volumes.
pub fn downsample_volume(v: &Volume, f: Factors) -> Result<Volume> {
    f.validate()?;
    let dims = v.dims();
    let out_dims = f.out_dims(dims);
    let block = (f.0 * f.1 * f.2) as f64;
    let mut values = Vec::with_capacity(out_dims.count());
    for oz in 0..out_dims.nz {
        for oy in 0..out_dims.ny {
            for ox in 0..out_dims.nx {
                let mut sum = 0.0f64;
                for_block(dims, f, ox, oy, oz, |idx| sum += v.values()[idx] as f64);
                values.push((sum / block) as f32);
            }
        }
    }
    Volume::new(out_dims, scaled_spacing(v.spacing(), f), values)
}

/// Block majority vote, ties broken toward the smallest label value.
pub fn downsample_labels(l: &LabelVolume, f: Factors) -> Result<LabelVolume> {
    f.validate()?;
    let dims = l.dims();
    let out_dims = f.out_dims(dims);
    let mut labels = Vec::with_capacity(out_dims.count());
    for oz in 0..out_dims.nz {
        for oy in 0..out_dims.ny {
            for ox in 0..out_dims.nx {
                let mut counts = [0usize; MAX_LABEL as usize + 1];
                for_block(dims, f, ox, oy, oz, |idx| {
                    counts[l.labels()[idx] as usize] += 1;
                });
                let winner = counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(lab, _)| lab as u8)
                    .unwrap();
                labels.push(winner);
            }
        }
    }
    LabelVolume::new(out_dims, scaled_spacing(l.spacing(), f), labels)
}

/// Block majority vote for masks; ties resolve to false (the smaller value).
pub fn downsample_mask(m: &MaskVolume, f: Factors) -> Result<MaskVolume> {
    f.validate()?;
    let dims = m.dims();
    let out_dims = f.out_dims(dims);
    let block = f.0 * f.1 * f.2;
    let mut bits = Vec::with_capacity(out_dims.count());
    for oz in 0..out_dims.nz {
        for oy in 0..out_dims.ny {
            for ox in 0..out_dims.nx {
                let mut trues = 0usize;
                for_block(dims, f, ox, oy, oz, |idx| trues += m.bits()[idx] as usize);
                bits.push(2 * trues > block);
            }
        }
    }
    MaskVolume::new(out_dims, scaled_spacing(m.spacing(), f), bits)
}

fn check_upsample_target(src: Dims, f: Factors, target: Dims) -> Result<()> {
    let ok = |s: usize, f: usize, t: usize| t > (s - 1) * f && t <= s * f;
    if !(ok(src.nx, f.0, target.nx) && ok(src.ny, f.1, target.ny) && ok(src.nz, f.2, target.nz)) {
        return Err(Error::ShapeMismatch(format!(
            "upsample target {target:?} incompatible with source {src:?} x {f:?}"
        )));
    }
    Ok(())
}

fn upsampled_spacing(s: crate::volume::Spacing, f: Factors) -> crate::volume::Spacing {
    crate::volume::Spacing::new(s.sx / f.0 as f64, s.sy / f.1 as f64, s.sz / f.2 as f64)
}

/// Nearest-neighbour upsampling of a mask to `target` dims (inverse of
/// [`downsample_mask`] padding included).
pub fn upsample_mask_nn(m: &MaskVolume, f: Factors, target: Dims) -> Result<MaskVolume> {
    f.validate()?;
    check_upsample_target(m.dims(), f, target)?;
    let mut bits = Vec::with_capacity(target.count());
    for z in 0..target.nz {
        for y in 0..target.ny {
            for x in 0..target.nx {
                bits.push(m.get(x / f.0, y / f.1, z / f.2));
            }
        }
    }
    MaskVolume::new(target, upsampled_spacing(m.spacing(), f), bits)
}

/// Nearest-neighbour upsampling of a scalar volume to `target` dims.
pub fn upsample_volume_nn(v: &Volume, f: Factors, target: Dims) -> Result<Volume> {
    f.validate()?;
    check_upsample_target(v.dims(), f, target)?;
    let mut values = Vec::with_capacity(target.count());
    for z in 0..target.nz {
        for y in 0..target.ny {
            for x in 0..target.nx {
                values.push(v.get(x / f.0, y / f.1, z / f.2));
            }
        }
    }
    Volume::new(target, upsampled_spacing(v.spacing(), f), values)
}

/// Tight bounding box of the true voxels, dilated by `margin` per face
/// and clipped to the grid.
pub fn roi_from_mask(mask: &MaskVolume, margin: usize) -> Result<BoundingBox> {
    let dims = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (idx, &b) in mask.bits().iter().enumerate() {
        if !b {
            continue;
        }
        let (x, y, z) = dims.coords(idx);
        let p = [x, y, z];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a] + 1);
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let bounds = [dims.nx, dims.ny, dims.nz];
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin);
        hi[a] = (hi[a] + margin).min(bounds[a]);
    }
    BoundingBox::new(lo, hi)
}

fn crop_raw<T: Copy>(data: &[T], dims: Dims, b: &BoundingBox) -> Vec<T> {
    let bd = b.dims();
    let mut out = Vec::with_capacity(bd.count());
    for z in b.lo[2]..b.hi[2] {
        for y in b.lo[1]..b.hi[1] {
            let row = dims.index(b.lo[0], y, z);
            out.extend_from_slice(&data[row..row + bd.nx]);
        }
    }
    out
}

fn embed_raw<T: Copy>(data: &[T], b: &BoundingBox, full: Dims, fill: T) -> Vec<T> {
    let bd = b.dims();
    let mut out = vec![fill; full.count()];
    for z in 0..bd.nz {
        for y in 0..bd.ny {
            let src = bd.index(0, y, z);
            let dst = full.index(b.lo[0], b.lo[1] + y, b.lo[2] + z);
            out[dst..dst + bd.nx].copy_from_slice(&data[src..src + bd.nx]);
        }
    }
    out
}

impl Volume {
    pub fn crop(&self, b: &BoundingBox) -> Result<Volume> {
        b.check_fits(self.dims())?;
        Volume::new(b.dims(), self.spacing(), crop_raw(self.values(), self.dims(), b))
    }

    /// Write this (cropped) volume back into a `full`-sized grid, filling
    /// outside the box with `fill`.
    pub fn embed(&self, b: &BoundingBox, full: Dims, fill: f32) -> Result<Volume> {
        b.check_fits(full)?;
        if b.dims() != self.dims() {
            return Err(Error::ShapeMismatch(format!(
                "embed: box dims {:?} != volume dims {:?}",
                b.dims(),
                self.dims()
            )));
        }
        Volume::new(full, self.spacing(), embed_raw(self.values(), b, full, fill))
    }
}

impl LabelVolume {
    pub fn crop(&self, b: &BoundingBox) -> Result<LabelVolume> {
        b.check_fits(self.dims())?;
        LabelVolume::new(b.dims(), self.spacing(), crop_raw(self.labels(), self.dims(), b))
    }

    pub fn embed(&self, b: &BoundingBox, full: Dims, fill: u8) -> Result<LabelVolume> {
        b.check_fits(full)?;
        if b.dims() != self.dims() {
            return Err(Error::ShapeMismatch(format!(
                "embed: box dims {:?} != label dims {:?}",
                b.dims(),
                self.dims()
            )));
        }
        LabelVolume::new(full, self.spacing(), embed_raw(self.labels(), b, full, fill))
    }
}

impl MaskVolume {
    pub fn crop(&self, b: &BoundingBox) -> Result<MaskVolume> {
        b.check_fits(self.dims())?;
        MaskVolume::new(b.dims(), self.spacing(), crop_raw(self.bits(), self.dims(), b))
    }

    pub fn embed(&self, b: &BoundingBox, full: Dims, fill: bool) -> Result<MaskVolume> {
        b.check_fits(full)?;
        if b.dims() != self.dims() {
            return Err(Error::ShapeMismatch(format!(
                "embed: box dims {:?} != mask dims {:?}",
                b.dims(),
                self.dims()
            )));
        }
        MaskVolume::new(full, self.spacing(), embed_raw(self.bits(), b, full, fill))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sp() -> Spacing {
        Spacing::isotropic(1.0)
    }

    fn vol(dims: Dims, values: Vec<f32>) -> Volume {
        Volume::new(dims, sp(), values).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng, dims: Dims) -> (Volume, Volume) {
        let low: Vec<f32> = (0..dims.count()).map(|_| rng.gen_range(-1100.0..2000.0)).collect();
        let high: Vec<f32> = (0..dims.count()).map(|_| rng.gen_range(-1100.0..2000.0)).collect();
        (vol(dims, low), vol(dims, high))
    }

    #[test]
    fn mix_endpoints_are_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (low, high) = random_pair(&mut rng, Dims::new(4, 3, 2));
        let m1 = mix(&low, &high, MixConfig::new(1.0).unwrap()).unwrap();
        assert_eq!(m1.values(), low.values());
        let m0 = mix(&low, &high, MixConfig::new(0.0).unwrap()).unwrap();
        assert_eq!(m0.values(), high.values());
    }

    #[test]
    fn mix_hand_arithmetic() {
        let low = vol(Dims::new(1, 1, 1), vec![100.0]);
        let high = vol(Dims::new(1, 1, 1), vec![50.0]);
        let m = mix(&low, &high, MixConfig::new(0.6).unwrap()).unwrap();
        assert!((m.values()[0] - 80.0).abs() < 1e-4, "got {}", m.values()[0]);
    }

    #[test]
    fn mix_bounded_between_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (low, high) = random_pair(&mut rng, Dims::new(6, 5, 4));
        for &a in &[0.1, 0.3, 0.5, 0.77, 0.999] {
            let m = mix(&low, &high, MixConfig::new(a).unwrap()).unwrap();
            for ((&l, &h), &o) in low.values().iter().zip(high.values()).zip(m.values()) {
                assert!(o >= l.min(h) && o <= l.max(h), "alpha {a}: {o} outside [{l}, {h}]");
            }
        }
    }

    #[test]
    fn mix_affine_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (low, high) = random_pair(&mut rng, Dims::new(5, 5, 5));
        let (a1, a2) = (0.2, 0.9);
        let m1 = mix(&low, &high, MixConfig::new(a1).unwrap()).unwrap();
        let m2 = mix(&low, &high, MixConfig::new(a2).unwrap()).unwrap();
        let mid = mix(&low, &high, MixConfig::new((a1 + a2) / 2.0).unwrap()).unwrap();
        for ((&v1, &v2), &vm) in m1.values().iter().zip(m2.values()).zip(mid.values()) {
            assert!((v1 + v2 - 2.0 * vm).abs() < 1e-2, "{v1} + {v2} vs 2*{vm}");
        }
    }

    #[test]
    fn mix_alpha_domain_checked() {
        assert!(MixConfig::new(1.5).is_err());
        assert!(MixConfig::new(-0.1).is_err());
        assert!(MixConfig::new(f64::NAN).is_err());
    }

    /// Air-filled grid with an above-threshold cuboid burned in.
    fn air_with_cube(dims: Dims, lo: [usize; 3], hi: [usize; 3]) -> Volume {
        let mut values = vec![-1000.0f32; dims.count()];
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    values[dims.index(x, y, z)] = 0.0;
                }
            }
        }
        vol(dims, values)
    }

    #[test]
    fn body_mask_solid_cube() {
        let dims = Dims::new(8, 8, 8);
        let v = air_with_cube(dims, [2, 2, 2], [6, 6, 6]);
        let m = body_mask(&v, -500.0).unwrap();
        for idx in 0..dims.count() {
            let (x, y, z) = dims.coords(idx);
            let inside = (2..6).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z);
            assert_eq!(m.bits()[idx], inside);
        }
    }

    #[test]
    fn body_mask_fills_interior_hole() {
        let dims = Dims::new(8, 8, 8);
        let mut v = air_with_cube(dims, [2, 2, 2], [6, 6, 6]);
        let hole = dims.index(4, 4, 4);
        let mut values = v.values().to_vec();
        values[hole] = -1000.0;
        v = vol(dims, values);
        let m = body_mask(&v, -500.0).unwrap();
        assert!(m.bits()[hole], "interior cavity must be filled");
        assert_eq!(m.count_true(), 64);
    }

    #[test]
    fn body_mask_keeps_largest_blob_only() {
        let dims = Dims::new(10, 6, 6);
        let mut values = vec![-1000.0f32; dims.count()];
        // 27-voxel blob and a disjoint 8-voxel blob.
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    values[dims.index(x, y, z)] = 0.0;
                }
            }
        }
        for z in 1..3 {
            for y in 1..3 {
                for x in 7..9 {
                    values[dims.index(x, y, z)] = 0.0;
                }
            }
        }
        let m = body_mask(&vol(dims, values), -500.0).unwrap();
        assert_eq!(m.count_true(), 27);
        assert!(m.get(2, 2, 2));
        assert!(!m.get(7, 1, 1));
    }

    #[test]
    fn body_mask_empty_is_error() {
        let v = vol(Dims::new(3, 3, 3), vec![-1000.0; 27]);
        assert!(matches!(body_mask(&v, -500.0), Err(Error::EmptyBody)));
    }

    /// Brute-force oracle: above-threshold components by exhaustive
    /// labeling, then per-voxel exterior reachability.
    fn body_mask_oracle(v: &Volume, thr: f32) -> Vec<bool> {
        let dims = v.dims();
        let n = dims.count();
        let above: Vec<bool> = v.values().iter().map(|&x| x >= thr).collect();

        // Exhaustive component labeling by repeated expansion.
        let mut comp: Vec<Option<usize>> = vec![None; n];
        let mut next = 0usize;
        for s in 0..n {
            if !above[s] || comp[s].is_some() {
                continue;
            }
            comp[s] = Some(next);
            loop {
                let mut changed = false;
                for i in 0..n {
                    if comp[i] != Some(next) {
                        continue;
                    }
                    for nb in neighbors6(i, dims) {
                        if above[nb] && comp[nb].is_none() {
                            comp[nb] = Some(next);
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            next += 1;
        }
        let mut sizes = vec![0usize; next];
        for c in comp.iter().flatten() {
            sizes[*c] += 1;
        }
        let best = sizes.iter().enumerate().max_by_key(|&(i, &s)| (s, usize::MAX - i)).unwrap().0;
        let keep: Vec<bool> = comp.iter().map(|c| *c == Some(best)).collect();

        // Exterior reachability by fixed-point iteration.
        let mut ext = vec![false; n];
        for i in 0..n {
            let (x, y, z) = dims.coords(i);
            if !keep[i]
                && (x == 0
                    || y == 0
                    || z == 0
                    || x == dims.nx - 1
                    || y == dims.ny - 1
                    || z == dims.nz - 1)
            {
                ext[i] = true;
            }
        }
        loop {
            let mut changed = false;
            for i in 0..n {
                if ext[i] || keep[i] {
                    continue;
                }
                if neighbors6(i, dims).any(|nb| ext[nb]) {
                    ext[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        (0..n).map(|i| keep[i] || !ext[i]).collect()
    }

    #[test]
    fn body_mask_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..30 {
            let dims = Dims::new(
                rng.gen_range(3..10),
                rng.gen_range(3..10),
                rng.gen_range(3..10),
            );
            let values: Vec<f32> = (0..dims.count())
                .map(|_| if rng.gen_bool(0.45) { 0.0 } else { -1000.0 })
                .collect();
            let v = vol(dims, values);
            match body_mask(&v, -500.0) {
                Ok(m) => {
                    let oracle = body_mask_oracle(&v, -500.0);
                    assert_eq!(m.bits(), &oracle[..], "trial {trial} dims {dims:?}");
                }
                Err(Error::EmptyBody) => {
                    assert!(v.values().iter().all(|&x| x < -500.0));
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn normalize_reference_points() {
        let dims = Dims::new(4, 1, 1);
        let v = vol(dims, vec![0.0, 2000.0, -512.0, -3000.0]);
        let mask =
            MaskVolume::new(dims, sp(), vec![true, true, true, false]).unwrap();
        let n = normalize(&v, &mask).unwrap();
        assert_eq!(n.values()[0], 0.0);
        assert_eq!(n.values()[1], 1.0);
        assert_eq!(n.values()[2], -0.5);
        assert_eq!(n.values()[3], -1.0); // outside mask
    }

    #[test]
    fn normalize_output_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = Dims::new(6, 6, 6);
        let values: Vec<f32> = (0..dims.count()).map(|_| rng.gen_range(-4000.0..4000.0)).collect();
        let bits: Vec<bool> = (0..dims.count()).map(|_| rng.gen_bool(0.7)).collect();
        let n = normalize(&vol(dims, values), &MaskVolume::new(dims, sp(), bits).unwrap()).unwrap();
        assert!(n.values().iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = Dims::new(3, 4, 5);
        let values: Vec<f32> = (0..dims.count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = vol(dims, values);
        let d = downsample_volume(&v, Factors::uniform(1)).unwrap();
        assert_eq!(d, v);
    }

    #[test]
    fn downsample_block_mean() {
        let dims = Dims::new(2, 2, 2);
        let v = vol(dims, vec![0.0, 0.0, 0.0, 0.0, 4.0, 4.0, 4.0, 4.0]);
        let d = downsample_volume(&v, Factors::uniform(2)).unwrap();
        assert_eq!(d.dims(), Dims::new(1, 1, 1));
        assert_eq!(d.values(), &[2.0]);
    }

    #[test]
    fn downsample_label_majority_and_tiebreak() {
        let dims = Dims::new(2, 2, 2);
        let l = LabelVolume::new(dims, sp(), vec![1, 1, 2, 2, 0, 0, 0, 0]).unwrap();
        let d = downsample_labels(&l, Factors::uniform(2)).unwrap();
        assert_eq!(d.labels(), &[0]);

        // 4-4 tie between labels 1 and 3 resolves to 1.
        let l = LabelVolume::new(dims, sp(), vec![1, 1, 1, 1, 3, 3, 3, 3]).unwrap();
        let d = downsample_labels(&l, Factors::uniform(2)).unwrap();
        assert_eq!(d.labels(), &[1]);
    }

    #[test]
    fn downsample_pads_by_replication() {
        // 3 wide, factor 2: second block replicates the edge column.
        let dims = Dims::new(3, 1, 1);
        let v = vol(dims, vec![1.0, 3.0, 7.0]);
        let d = downsample_volume(&v, Factors(2, 1, 1)).unwrap();
        assert_eq!(d.dims(), Dims::new(2, 1, 1));
        assert_eq!(d.values(), &[2.0, 7.0]);
    }

    #[test]
    fn downsample_zero_factor_rejected() {
        let v = vol(Dims::new(2, 2, 2), vec![0.0; 8]);
        assert!(downsample_volume(&v, Factors(0, 1, 1)).is_err());
    }

    #[test]
    fn downsample_upsample_preserves_block_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = Dims::new(6, 6, 6);
        let values: Vec<f32> = (0..dims.count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = vol(dims, values);
        let f = Factors::uniform(2);
        let d = downsample_volume(&v, f).unwrap();
        let u = upsample_volume_nn(&d, f, dims).unwrap();
        let du = downsample_volume(&u, f).unwrap();
        for (&a, &b) in d.values().iter().zip(du.values()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    fn single_voxel_mask(dims: Dims, x: usize, y: usize, z: usize) -> MaskVolume {
        let mut bits = vec![false; dims.count()];
        bits[dims.index(x, y, z)] = true;
        MaskVolume::new(dims, sp(), bits).unwrap()
    }

    #[test]
    fn roi_single_voxel_no_margin() {
        let m = single_voxel_mask(Dims::new(10, 10, 10), 3, 3, 3);
        let b = roi_from_mask(&m, 0).unwrap();
        assert_eq!(b, BoundingBox { lo: [3, 3, 3], hi: [4, 4, 4] });
    }

    #[test]
    fn roi_margin_dilates() {
        let m = single_voxel_mask(Dims::new(10, 10, 10), 3, 3, 3);
        let b = roi_from_mask(&m, 2).unwrap();
        assert_eq!(b, BoundingBox { lo: [1, 1, 1], hi: [6, 6, 6] });
    }

    #[test]
    fn roi_clips_at_corner() {
        let m = single_voxel_mask(Dims::new(10, 10, 10), 0, 0, 0);
        let b = roi_from_mask(&m, 3).unwrap();
        assert_eq!(b.lo, [0, 0, 0]);
        assert_eq!(b.hi, [4, 4, 4]);
    }

    #[test]
    fn roi_empty_mask_is_error() {
        let m = MaskVolume::new(Dims::new(3, 3, 3), sp(), vec![false; 27]).unwrap();
        assert!(matches!(roi_from_mask(&m, 0), Err(Error::EmptyMask)));
    }

    fn ramp(dims: Dims) -> Volume {
        vol(dims, (0..dims.count()).map(|i| i as f32).collect())
    }

    #[test]
    fn crop_full_box_is_identity() {
        let v = ramp(Dims::new(4, 4, 4));
        let b = BoundingBox::new([0, 0, 0], [4, 4, 4]).unwrap();
        assert_eq!(v.crop(&b).unwrap().values(), v.values());
    }

    #[test]
    fn crop_hand_picked_indices() {
        let dims = Dims::new(4, 4, 4);
        let v = ramp(dims);
        let b = BoundingBox::new([1, 1, 1], [3, 3, 3]).unwrap();
        let c = v.crop(&b).unwrap();
        let expect: Vec<f32> = [
            (1, 1, 1),
            (2, 1, 1),
            (1, 2, 1),
            (2, 2, 1),
            (1, 1, 2),
            (2, 1, 2),
            (1, 2, 2),
            (2, 2, 2),
        ]
        .iter()
        .map(|&(x, y, z)| dims.index(x, y, z) as f32)
        .collect();
        assert_eq!(c.values(), &expect[..]);
    }

    #[test]
    fn embed_restores_cropped_region() {
        let dims = Dims::new(5, 4, 3);
        let v = ramp(dims);
        let b = BoundingBox::new([1, 0, 1], [4, 3, 3]).unwrap();
        let c = v.crop(&b).unwrap();
        let e = c.embed(&b, dims, -7.0).unwrap();
        for idx in 0..dims.count() {
            let (x, y, z) = dims.coords(idx);
            if b.contains(x, y, z) {
                assert_eq!(e.values()[idx], v.values()[idx]);
            } else {
                assert_eq!(e.values()[idx], -7.0);
            }
        }
    }

    #[test]
    fn crop_out_of_range_rejected() {
        let v = ramp(Dims::new(4, 4, 4));
        let b = BoundingBox::new([1, 1, 1], [5, 3, 3]).unwrap();
        assert!(v.crop(&b).is_err());
    }
}
