//! Synthetic co-registered dual-energy abdominal phantoms with ground
//! truth, standing in for clinical data.
//!
//! Geometry is ellipsoids only: a soft-tissue body in air, one large
//! liver-like ellipsoid, one medium spleen-like ellipsoid, and two small
//! kidney-like ellipsoids left and right of the midline. Each voxel gets
//! its material's HU per spectrum, the clean volumes are Gaussian-blurred,
//! and per-spectrum Gaussian noise is added. Labels are the noiseless
//! geometry. Everything is deterministic per seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::volume::{DectPair, Dims, LabelVolume, MaskVolume, Organ, Spacing, Volume};
use crate::{Error, Result};

/// HU per tissue at the two spectra (low kV, high kV). The values are
/// plausible inventions that create energy-dependent soft-tissue
/// contrast; they are configuration, not measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialTable {
    pub air: (f32, f32),
    pub soft_tissue: (f32, f32),
    pub liver: (f32, f32),
    pub spleen: (f32, f32),
    pub kidney: (f32, f32),
}

impl MaterialTable {
    /// Dual-energy table: organ contrast is stronger at the low spectrum.
    pub fn dect_default() -> Self {
        MaterialTable {
            air: (-1000.0, -1000.0),
            soft_tissue: (60.0, 45.0),
            liver: (120.0, 70.0),
            spleen: (110.0, 65.0),
            kidney: (140.0, 75.0),
        }
    }

    /// Single-spectrum table for the pretraining corpus; both slots equal.
    pub fn sect_default() -> Self {
        MaterialTable {
            air: (-1000.0, -1000.0),
            soft_tissue: (52.0, 52.0),
            liver: (95.0, 95.0),
            spleen: (88.0, 88.0),
            kidney: (105.0, 105.0),
        }
    }

    fn hu(&self, material: Material, low: bool) -> f32 {
        let pair = match material {
            Material::Air => self.air,
            Material::SoftTissue => self.soft_tissue,
            Material::Liver => self.liver,
            Material::Spleen => self.spleen,
            Material::Kidney => self.kidney,
        };
        if low {
            pair.0
        } else {
            pair.1
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Material {
    Air,
    SoftTissue,
    Liver,
    Spleen,
    Kidney,
}

/// Per-axis (lo, hi) ranges, in fractions of the volume extent, for an
/// organ's ellipsoid center and radii.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidRange {
    pub center: [(f64, f64); 3],
    pub radius: [(f64, f64); 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: Dims,
    pub spacing: Spacing,
    pub materials: MaterialTable,
    pub noise_sigma_low: f32,
    pub noise_sigma_high: f32,
    /// Gaussian blur standard deviation in voxels.
    pub blur_sigma: f32,
    /// Body ellipsoid radius ranges (center is the volume center).
    pub body_radius: [(f64, f64); 3],
    pub liver: EllipsoidRange,
    pub spleen: EllipsoidRange,
    pub right_kidney: EllipsoidRange,
    pub left_kidney: EllipsoidRange,
    pub max_retries: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        // Canonical patient orientation: the patient's right side is at
        // low x, so the liver and right kidney sit at small x.
        PhantomSpec {
            seed: 0,
            dims: Dims::new(64, 64, 64),
            spacing: Spacing::new(0.9, 0.9, 0.6),
            materials: MaterialTable::dect_default(),
            noise_sigma_low: 25.0,
            noise_sigma_high: 12.0,
            blur_sigma: 0.7,
            body_radius: [(0.40, 0.44), (0.34, 0.38), (0.44, 0.48)],
            liver: EllipsoidRange {
                center: [(0.34, 0.40), (0.40, 0.46), (0.46, 0.54)],
                radius: [(0.16, 0.20), (0.12, 0.15), (0.15, 0.19)],
            },
            spleen: EllipsoidRange {
                center: [(0.66, 0.72), (0.42, 0.48), (0.46, 0.56)],
                radius: [(0.07, 0.10), (0.07, 0.10), (0.08, 0.12)],
            },
            right_kidney: EllipsoidRange {
                center: [(0.34, 0.42), (0.62, 0.67), (0.24, 0.32)],
                radius: [(0.05, 0.07), (0.05, 0.07), (0.05, 0.07)],
            },
            left_kidney: EllipsoidRange {
                center: [(0.58, 0.66), (0.62, 0.67), (0.24, 0.32)],
                radius: [(0.05, 0.07), (0.05, 0.07), (0.05, 0.07)],
            },
            max_retries: 64,
        }
    }
}

impl PhantomSpec {
    /// Single-spectrum variant used to simulate the pretraining corpus.
    pub fn sect_default() -> Self {
        PhantomSpec {
            materials: MaterialTable::sect_default(),
            noise_sigma_low: 15.0,
            noise_sigma_high: 15.0,
            ..PhantomSpec::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.nx < 8 || self.dims.ny < 8 || self.dims.nz < 8 {
            return Err(Error::InvalidConfig(format!("phantom dims {:?} too small", self.dims)));
        }
        if self.blur_sigma < 0.0 || self.noise_sigma_low < 0.0 || self.noise_sigma_high < 0.0 {
            return Err(Error::InvalidConfig("negative sigma".into()));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radius: [f64; 3],
}

impl Ellipsoid {
    /// Normalized squared radius of a voxel in the ellipsoid frame.
    fn rho2(&self, x: usize, y: usize, z: usize) -> f64 {
        let dx = (x as f64 - self.center[0]) / self.radius[0];
        let dy = (y as f64 - self.center[1]) / self.radius[1];
        let dz = (z as f64 - self.center[2]) / self.radius[2];
        dx * dx + dy * dy + dz * dz
    }
}

fn draw_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn draw_ellipsoid(rng: &mut ChaCha8Rng, r: &EllipsoidRange, dims: Dims) -> Ellipsoid {
    let ext = [dims.nx as f64, dims.ny as f64, dims.nz as f64];
    let center = [
        draw_range(rng, r.center[0]) * ext[0],
        draw_range(rng, r.center[1]) * ext[1],
        draw_range(rng, r.center[2]) * ext[2],
    ];
    let radius = [
        draw_range(rng, r.radius[0]) * ext[0],
        draw_range(rng, r.radius[1]) * ext[1],
        draw_range(rng, r.radius[2]) * ext[2],
    ];
    Ellipsoid { center, radius }
}

/// A generated case: the two spectra, ground-truth labels, and the clean
/// body geometry mask.
pub struct Phantom {
    pub low: Volume,
    pub high: Volume,
    pub labels: LabelVolume,
    pub body: MaskVolume,
}

/// Deterministically generate one phantom from its spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims.count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let ext = [dims.nx as f64, dims.ny as f64, dims.nz as f64];
    let body = Ellipsoid {
        center: [ext[0] / 2.0, ext[1] / 2.0, ext[2] / 2.0],
        radius: [
            draw_range(&mut rng, spec.body_radius[0]) * ext[0],
            draw_range(&mut rng, spec.body_radius[1]) * ext[1],
            draw_range(&mut rng, spec.body_radius[2]) * ext[2],
        ],
    };

    let mut material = vec![Material::Air; n];
    let mut body_bits = vec![false; n];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                if body.rho2(x, y, z) <= 1.0 {
                    let i = dims.index(x, y, z);
                    material[i] = Material::SoftTissue;
                    body_bits[i] = true;
                }
            }
        }
    }

    // Organs must sit strictly inside the body and stay pairwise
    // disjoint; a colliding draw is retried with fresh geometry.
    let mut labels = vec![0u8; n];
    let organs: [(Organ, &EllipsoidRange, Material); 4] = [
        (Organ::Liver, &spec.liver, Material::Liver),
        (Organ::Spleen, &spec.spleen, Material::Spleen),
        (Organ::RightKidney, &spec.right_kidney, Material::Kidney),
        (Organ::LeftKidney, &spec.left_kidney, Material::Kidney),
    ];
    for (organ, range, mat) in organs {
        let mut placed = false;
        'retry: for _ in 0..spec.max_retries {
            let e = draw_ellipsoid(&mut rng, range, dims);
            let mut voxels = Vec::new();
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x in 0..dims.nx {
                        if e.rho2(x, y, z) <= 1.0 {
                            let i = dims.index(x, y, z);
                            // Strictly inside the body and off other organs.
                            if body.rho2(x, y, z) > 0.85 || labels[i] != 0 {
                                continue 'retry;
                            }
                            voxels.push(i);
                        }
                    }
                }
            }
            if voxels.is_empty() {
                continue 'retry;
            }
            for &i in &voxels {
                labels[i] = organ.label();
                material[i] = mat;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place {} within {} retries",
                organ.name(),
                spec.max_retries
            )));
        }
    }

    let clean_low: Vec<f32> = material.iter().map(|&m| spec.materials.hu(m, true)).collect();
    let clean_high: Vec<f32> = material.iter().map(|&m| spec.materials.hu(m, false)).collect();
    let blurred_low = gaussian_blur(&clean_low, dims, spec.blur_sigma);
    let blurred_high = gaussian_blur(&clean_high, dims, spec.blur_sigma);

    let mut low = blurred_low;
    for v in low.iter_mut() {
        *v += spec.noise_sigma_low * rng.sample::<f32, _>(StandardNormal);
    }
    let mut high = blurred_high;
    for v in high.iter_mut() {
        *v += spec.noise_sigma_high * rng.sample::<f32, _>(StandardNormal);
    }

    Ok(Phantom {
        low: Volume::new(dims, spec.spacing, low)?,
        high: Volume::new(dims, spec.spacing, high)?,
        labels: LabelVolume::new(dims, spec.spacing, labels)?,
        body: MaskVolume::new(dims, spec.spacing, body_bits)?,
    })
}

/// Separable Gaussian blur with edge replication; no-op for sigma 0.
fn gaussian_blur(data: &[f32], dims: Dims, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / s2).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let pass = |src: &[f32], axis: usize| -> Vec<f32> {
        let mut dst = vec![0.0f32; src.len()];
        let bounds = [dims.nx as isize, dims.ny as isize, dims.nz as isize];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let mut acc = 0.0f64;
                    let p = [x as isize, y as isize, z as isize];
                    for (ki, k) in kernel.iter().enumerate() {
                        let mut q = p;
                        q[axis] = (p[axis] + ki as isize - radius).clamp(0, bounds[axis] - 1);
                        acc += k * src[dims.index(q[0] as usize, q[1] as usize, q[2] as usize)]
                            as f64;
                    }
                    dst[dims.index(x, y, z)] = acc as f32;
                }
            }
        }
        dst
    };
    let a = pass(data, 0);
    let b = pass(&a, 1);
    pass(&b, 2)
}

/// One dataset entry: file paths are relative to the manifest location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub low: String,
    pub high: String,
    pub labels: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<ManifestCase>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Manifest(format!("serialize: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("parse: {e}")))
    }

    /// Load one case's volumes, resolving paths against `dir`.
    pub fn load_case(&self, dir: &Path, index: usize) -> Result<(DectPair, LabelVolume)> {
        let case = self
            .cases
            .get(index)
            .ok_or_else(|| Error::Manifest(format!("case index {index} out of range")))?;
        let low = crate::volume::read_metaimage(dir.join(&case.low))?.into_volume()?;
        let high = crate::volume::read_metaimage(dir.join(&case.high))?.into_volume()?;
        let labels = crate::volume::read_metaimage(dir.join(&case.labels))?.into_labels()?;
        let pair = DectPair::new(low, high, case.id.clone())?;
        if labels.dims() != pair.dims() {
            return Err(Error::Manifest(format!("case '{}': label dims differ", case.id)));
        }
        Ok((pair, labels))
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.id.clone()).collect()
    }
}

fn write_case(
    out_dir: &Path,
    id: &str,
    low: &Volume,
    high: &Volume,
    labels: &LabelVolume,
    seed: u64,
) -> Result<ManifestCase> {
    let low_name = format!("{id}_low.mhd");
    let high_name = format!("{id}_high.mhd");
    let labels_name = format!("{id}_labels.mhd");
    low.write_metaimage(out_dir.join(&low_name))?;
    high.write_metaimage(out_dir.join(&high_name))?;
    labels.write_metaimage(out_dir.join(&labels_name))?;
    Ok(ManifestCase {
        id: id.to_owned(),
        low: low_name,
        high: high_name,
        labels: labels_name,
        seed,
    })
}

/// Generate `n` dual-energy phantoms (seeds base_seed + i) under
/// `out_dir` and persist the manifest as `manifest.json`.
pub fn generate_dataset(
    n: usize,
    base_seed: u64,
    out_dir: impl AsRef<Path>,
    template: &PhantomSpec,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::default();
    for i in 0..n {
        let seed = base_seed + i as u64;
        let phantom = generate_phantom(&template.clone().with_seed(seed))?;
        let id = format!("case_{i:03}");
        manifest.cases.push(write_case(
            out_dir,
            &id,
            &phantom.low,
            &phantom.high,
            &phantom.labels,
            seed,
        )?);
    }
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(manifest)
}

/// Single-spectrum dataset for the pretraining pathway: both spectra are
/// the same image (bit-identical files), drawn from a distinct material
/// table.
pub fn sect_like_dataset(
    n: usize,
    base_seed: u64,
    out_dir: impl AsRef<Path>,
    template: &PhantomSpec,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::default();
    for i in 0..n {
        let seed = base_seed + i as u64;
        let phantom = generate_phantom(&template.clone().with_seed(seed))?;
        let id = format!("sect_{i:03}");
        manifest.cases.push(write_case(
            out_dir,
            &id,
            &phantom.low,
            &phantom.low,
            &phantom.labels,
            seed,
        )?);
    }
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(manifest)
}
