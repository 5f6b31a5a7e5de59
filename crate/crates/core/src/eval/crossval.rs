//! Cross-validation and alpha-study drivers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cascade::{predict_cascade, prepare_case, train_stage, CaseInput, StagePlan};
use crate::checkpoint::CheckpointMeta;
use crate::phantom::DatasetManifest;
use crate::unet::{UNet, UNetConfig};
use crate::volume::Organ;
use crate::{derive_seed, Error, Result};

use super::{dice, DiceRecord, Fold, FoldPlan, MetricsReport};

/// Per-run settings shared by the cross-validation and alpha-study
/// drivers. The stage plans carry iteration counts and learning rates;
/// their alpha and init-checkpoint fields are overridden per run.
#[derive(Clone, Debug)]
pub struct CrossvalConfig {
    pub net: UNetConfig,
    pub stage1: StagePlan,
    pub stage2: StagePlan,
    pub seed: u64,
    pub skin_threshold_hu: f32,
    /// SECT-like general models to fine-tune from, when present.
    pub pretrained_stage1: Option<std::path::PathBuf>,
    pub pretrained_stage2: Option<std::path::PathBuf>,
}

/// Seed for one stage-training job. Shared between the cross-validation
/// and alpha-study paths so identical (fold, stage, alpha) jobs are
/// bit-identical across entry points.
pub fn stage_seed(base: u64, fold: usize, stage: u8, alpha_train: f64) -> u64 {
    derive_seed(base, &format!("fold{fold}/stage{stage}/alpha{alpha_train:.4}"))
}

fn load_cases(
    manifest: &DatasetManifest,
    dir: &Path,
    ids: &[String],
    alpha: f64,
    skin_threshold: f32,
) -> Result<Vec<CaseInput>> {
    let mut cases = Vec::with_capacity(ids.len());
    for id in ids {
        let index = manifest
            .cases
            .iter()
            .position(|c| &c.id == id)
            .ok_or_else(|| Error::Manifest(format!("id '{id}' not in manifest")))?;
        let (pair, labels) = manifest.load_case(dir, index)?;
        cases.push(prepare_case(&pair, alpha, Some(labels), skin_threshold)?);
    }
    Ok(cases)
}

/// Mean Dice of a cascade over already-prepared cases.
fn mean_dice_over(
    cases: &[CaseInput],
    s1: (&mut UNet, &CheckpointMeta),
    s2: (&mut UNet, &CheckpointMeta),
) -> Result<f64> {
    let (net1, meta1) = s1;
    let (net2, meta2) = s2;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for case in cases {
        let pred = predict_cascade(case, (net1, meta1), (net2, meta2))?;
        let truth = case.labels.as_ref().expect("validation cases carry labels");
        for organ in Organ::ALL {
            sum += dice(&pred, truth, organ)?;
            count += 1;
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Trained cascade for one fold at one training alpha: stage 1 trained to
/// completion, stage 2 selected by best validation mean Dice across its
/// snapshots (ties resolve to the earliest).
pub(crate) struct TrainedCascade {
    pub net1: UNet,
    pub meta1: CheckpointMeta,
    pub net2: UNet,
    pub meta2: CheckpointMeta,
}

fn train_cascade_for_fold(
    manifest: &DatasetManifest,
    dir: &Path,
    fold: &Fold,
    fold_index: usize,
    alpha_train: f64,
    cfg: &CrossvalConfig,
) -> Result<TrainedCascade> {
    let train_cases =
        load_cases(manifest, dir, &fold.train, alpha_train, cfg.skin_threshold_hu)?;
    let val_cases =
        load_cases(manifest, dir, &fold.validation, alpha_train, cfg.skin_threshold_hu)?;

    let mut plan1 = cfg.stage1.clone();
    plan1.alpha_training = alpha_train;
    plan1.init_checkpoint = cfg.pretrained_stage1.clone();
    let mut plan2 = cfg.stage2.clone();
    plan2.alpha_training = alpha_train;
    plan2.init_checkpoint = cfg.pretrained_stage2.clone();

    log::info!("fold {fold_index}: training stage 1 (alpha {alpha_train})");
    let out1 = train_stage(
        &train_cases,
        &plan1,
        cfg.net,
        stage_seed(cfg.seed, fold_index, 1, alpha_train),
    )?;
    let (mut net1, meta1) = (out1.net, out1.meta);

    log::info!("fold {fold_index}: training stage 2 (alpha {alpha_train})");
    let out2 = train_stage(
        &train_cases,
        &plan2,
        cfg.net,
        stage_seed(cfg.seed, fold_index, 2, alpha_train),
    )?;

    // Validation-based selection over stage-2 snapshots.
    let mut best: Option<(f64, u64, UNet)> = None;
    for (iteration, snapshot) in out2.snapshots {
        let mut candidate = snapshot;
        let mut meta2 = out2.meta.clone();
        meta2.iteration = iteration;
        let score =
            mean_dice_over(&val_cases, (&mut net1, &meta1), (&mut candidate, &meta2))?;
        log::info!(
            "fold {fold_index}: stage-2 snapshot at iteration {iteration}: validation mean dice {score:.4}"
        );
        let better = match &best {
            None => true,
            Some((best_score, _, _)) => score > *best_score,
        };
        if better {
            best = Some((score, iteration, candidate));
        }
    }
    let (_, iteration, net2) = best.expect("at least the final snapshot");
    let mut meta2 = out2.meta;
    meta2.iteration = iteration;
    Ok(TrainedCascade { net1, meta1, net2, meta2 })
}

fn record_case(
    records: &mut Vec<DiceRecord>,
    csv: &mut Option<fs::File>,
    case: &CaseInput,
    truth_pred: (&crate::volume::LabelVolume, &crate::volume::LabelVolume),
    fold: usize,
    alpha_train: f64,
    alpha_test: f64,
) -> Result<()> {
    let (truth, pred) = truth_pred;
    for organ in Organ::ALL {
        let d = dice(pred, truth, organ)?;
        let rec = DiceRecord {
            case_id: case.id.clone(),
            fold,
            alpha_train,
            alpha_test,
            organ,
            dice: d,
        };
        if let Some(f) = csv {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                rec.case_id, rec.fold, rec.alpha_train, rec.alpha_test, organ.name(), rec.dice
            )
            .map_err(|e| Error::Manifest(format!("records csv: {e}")))?;
        }
        records.push(rec);
    }
    Ok(())
}

/// Cross-validation at one (alpha_train, alpha_test) pair.
///
/// Per fold: train both stages on the train split (fine-tuning from the
/// pretrained checkpoints when configured), select the stage-2 snapshot
/// with the best validation mean Dice, then measure Dice per organ on
/// the test split. Records stream to `records_csv` as folds finish, so a
/// failed fold leaves partial records on disk.
pub fn run_crossval(
    manifest: &DatasetManifest,
    dir: &Path,
    plan: &FoldPlan,
    cfg: &CrossvalConfig,
    alpha_train: f64,
    alpha_test: f64,
    records_csv: Option<&Path>,
) -> Result<MetricsReport> {
    let mut csv = match records_csv {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "case_id,fold,alpha_train,alpha_test,organ,dice")
                .map_err(|e| Error::Manifest(format!("records csv: {e}")))?;
            Some(f)
        }
        None => None,
    };

    let mut records = Vec::new();
    for (fi, fold) in plan.folds.iter().enumerate() {
        let cascade = train_cascade_for_fold(manifest, dir, fold, fi, alpha_train, cfg)?;
        let TrainedCascade { mut net1, meta1, mut net2, meta2 } = cascade;

        let test_cases =
            load_cases(manifest, dir, &fold.test, alpha_test, cfg.skin_threshold_hu)?;
        for case in &test_cases {
            let pred = predict_cascade(case, (&mut net1, &meta1), (&mut net2, &meta2))?;
            let truth = case.labels.as_ref().expect("test cases carry labels");
            record_case(&mut records, &mut csv, case, (truth, &pred), fi, alpha_train, alpha_test)?;
        }
        log::info!("fold {fi}: complete ({} records so far)", records.len());
    }

    Ok(MetricsReport {
        records,
        overlap_note: plan.test_windows_overlap.then(|| {
            format!(
                "test windows wrap: {} folds x {} test cases exceed the dataset",
                plan.k,
                plan.folds.first().map_or(0, |f| f.test.len())
            )
        }),
    })
}

/// One cell of the alpha grid: per-organ mean Dice for a training/test
/// alpha combination, with best-in-group markers.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaCell {
    pub alpha_train: f64,
    pub alpha_test: f64,
    pub organ_mean: [f64; 4],
    /// Per organ: best mean within this cell's alpha_train group
    /// (first-best tie-break across ascending alpha_test).
    pub best: [bool; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlphaGrid {
    pub cells: Vec<AlphaCell>,
    pub records: Vec<DiceRecord>,
}

/// Alpha study on one designated fold: one cascade trained per
/// alpha_train, each evaluated at every alpha_test.
pub fn run_alpha_study(
    manifest: &DatasetManifest,
    dir: &Path,
    plan: &FoldPlan,
    fold_index: usize,
    alphas_train: &[f64],
    alphas_test: &[f64],
    cfg: &CrossvalConfig,
) -> Result<AlphaGrid> {
    let fold = plan
        .folds
        .get(fold_index)
        .ok_or_else(|| Error::FoldPlan(format!("fold {fold_index} out of range")))?;

    let mut grid = AlphaGrid::default();
    for &at in alphas_train {
        let cascade = train_cascade_for_fold(manifest, dir, fold, fold_index, at, cfg)?;
        let TrainedCascade { mut net1, meta1, mut net2, meta2 } = cascade;

        for &ae in alphas_test {
            let test_cases = load_cases(manifest, dir, &fold.test, ae, cfg.skin_threshold_hu)?;
            let mut organ_sum = [0.0f64; 4];
            for case in &test_cases {
                let pred = predict_cascade(case, (&mut net1, &meta1), (&mut net2, &meta2))?;
                let truth = case.labels.as_ref().expect("test cases carry labels");
                record_case(
                    &mut grid.records,
                    &mut None,
                    case,
                    (truth, &pred),
                    fold_index,
                    at,
                    ae,
                )?;
                for (oi, rec) in grid.records[grid.records.len() - 4..].iter().enumerate() {
                    organ_sum[oi] += rec.dice;
                }
            }
            let n = test_cases.len().max(1) as f64;
            grid.cells.push(AlphaCell {
                alpha_train: at,
                alpha_test: ae,
                organ_mean: [
                    organ_sum[0] / n,
                    organ_sum[1] / n,
                    organ_sum[2] / n,
                    organ_sum[3] / n,
                ],
                best: [false; 4],
            });
        }
    }

    // Flag the best cell per organ within each alpha_train group.
    for &at in alphas_train {
        for oi in 0..4 {
            let mut best_idx: Option<usize> = None;
            for (i, cell) in grid.cells.iter().enumerate() {
                if cell.alpha_train != at {
                    continue;
                }
                let better = match best_idx {
                    None => true,
                    Some(b) => cell.organ_mean[oi] > grid.cells[b].organ_mean[oi],
                };
                if better {
                    best_idx = Some(i);
                }
            }
            if let Some(i) = best_idx {
                grid.cells[i].best[oi] = true;
            }
        }
    }
    Ok(grid)
}
