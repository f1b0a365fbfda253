//! Evaluation, ablation/sweep drivers, and run reporting.
//!
//! Evaluation samples un-augmented episodes from the validation or test
//! split; the only transform it ever applies is optional shot augmentation
//! (appending transformed copies of each support image before the head
//! solve). Confidence radii are one standard error of the per-episode
//! accuracies.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PoolSpec, RunConfig};
use crate::datastore::{FewShotDataset, Split};
use crate::episodic::{
    apply_descriptor, identity_pool, sample_episode, AugParams, AugmentationDescriptor,
    DescriptorEntry, EntryParams, Mode, TaskConfig, Technique,
};
use crate::error::{Error, Result};
use crate::learner::{episode_loss, HeadKind, ModelParams, Real};
use crate::rng::RngStream;

// ---------------------------------------------------------------------------
// Shot augmentation at test time
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotAugTechnique {
    Hflip,
    Rot90,
    Crop,
    Duplicate,
}

impl std::str::FromStr for ShotAugTechnique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hflip" => Ok(Self::Hflip),
            "rot90" => Ok(Self::Rot90),
            "crop" => Ok(Self::Crop),
            "duplicate" => Ok(Self::Duplicate),
            other => Err(Error::Config(format!(
                "unknown shot augmentation `{other}` (expected hflip, rot90, crop, duplicate)"
            ))),
        }
    }
}

impl ShotAugTechnique {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Hflip => "hflip",
            Self::Rot90 => "rot90",
            Self::Crop => "crop",
            Self::Duplicate => "duplicate",
        }
    }

    fn technique(&self) -> Technique {
        match self {
            Self::Hflip => Technique::Hflip,
            Self::Rot90 => Technique::Rotation,
            Self::Crop => Technique::RandomCrop,
            Self::Duplicate => Technique::Duplicate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShotAug {
    pub technique: ShotAugTechnique,
    pub copies: usize,
}

impl ShotAug {
    fn descriptor(&self) -> AugmentationDescriptor {
        AugmentationDescriptor {
            entries: vec![DescriptorEntry {
                mode: Mode::Shot,
                technique: self.technique.technique(),
                params: EntryParams {
                    copies: Some(self.copies),
                    ..EntryParams::default()
                },
            }],
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    /// Mean accuracy in percent.
    pub mean_accuracy: f64,
    /// One standard error of the mean, in percentage points.
    pub radius: f64,
    /// Per-episode accuracies as fractions in [0, 1].
    pub per_episode: Vec<f64>,
    pub config_fingerprint: String,
    pub shot_aug: Option<String>,
}

/// One standard error of the mean, in percentage points, from per-episode
/// accuracy fractions.
pub fn standard_error_radius(per_episode: &[f64]) -> f64 {
    let n = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    100.0 * var.sqrt() / n.sqrt()
}

/// Evaluate on `n_episodes` un-augmented episodes from the val or test
/// split. Ties in the argmax count as wrong. Episode streams derive from
/// `rng.child("episode", i)`, disjoint from every training stream.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    dataset: &FewShotDataset,
    cfg: &TaskConfig,
    head: HeadKind,
    n_episodes: usize,
    shot_aug: Option<ShotAug>,
    rng: &RngStream,
) -> Result<EvalReport> {
    if cfg.split == Split::Train {
        return Err(Error::Config(
            "evaluation split must be val or test".into(),
        ));
    }
    if n_episodes < 2 {
        return Err(Error::Config("evaluation needs at least 2 episodes".into()));
    }
    cfg.validate()?;
    let pool = identity_pool(dataset, cfg.split);
    let aug = AugParams::default();
    let descriptor = shot_aug.map(|sa| sa.descriptor());

    let per_episode: Vec<f64> = (0..n_episodes)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let ep_stream = rng.child("episode", i as u64);
            let mut sample_rng = ep_stream.child("sample", 0);
            let mut episode = sample_episode(dataset, &pool, cfg, &aug, &mut sample_rng)?;
            if let Some(d) = &descriptor {
                let mut aug_rng = ep_stream.child("shot-aug", 0);
                episode = apply_descriptor(&episode, d, &aug, &mut aug_rng)?;
            }
            let episode = episode.normalized(&dataset.stats)?;
            Ok(episode_loss(params, &episode, head)?.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mean = per_episode.iter().sum::<f64>() / n_episodes as f64;
    let fingerprint = {
        let mut hasher = Sha256::new();
        let desc = serde_json::json!({
            "way": cfg.way,
            "shot": cfg.shot,
            "query": cfg.query,
            "split": cfg.split,
            "head": head,
            "n_episodes": n_episodes,
            "shot_aug": shot_aug.map(|sa| format!("{}x{}", sa.technique.as_str(), sa.copies)),
        });
        hasher.update(desc.to_string().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    };
    Ok(EvalReport {
        n_episodes,
        mean_accuracy: 100.0 * mean,
        radius: standard_error_radius(&per_episode),
        per_episode,
        config_fingerprint: fingerprint,
        shot_aug: shot_aug.map(|sa| format!("{}x{}", sa.technique.as_str(), sa.copies)),
    })
}

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Percent.
    pub train_acc: f64,
    /// Percent.
    pub val_acc: f64,
    /// Mean selected query loss.
    pub loss: f64,
    pub lr: f64,
}

pub fn write_curves_csv(path: &Path, rows: &[CurvePoint]) -> Result<()> {
    let mut out = String::from("epoch,train_acc,val_acc,loss,lr\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.train_acc, row.val_acc, row.loss, row.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "epoch,train_acc,val_acc,loss,lr" {
                return Err(Error::Config(format!("unexpected curves header `{line}`")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Config(format!("bad curves row `{line}`")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad number `{s}`: {e}")))
        };
        rows.push(CurvePoint {
            epoch: fields[0]
                .parse()
                .map_err(|e| Error::Config(format!("bad epoch `{}`: {e}", fields[0])))?,
            train_acc: parse(fields[1])?,
            val_acc: parse(fields[2])?,
            loss: parse(fields[3])?,
            lr: parse(fields[4])?,
        });
    }
    for w in rows.windows(2) {
        if w[1].epoch <= w[0].epoch {
            return Err(Error::Config("curve epochs must strictly increase".into()));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub epochs: usize,
    pub best_val_epoch: usize,
    pub best_val_acc: f64,
    pub train_acc_at_best: f64,
    /// train - val at the best validation epoch.
    pub generalization_gap: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    /// train - val at the final epoch.
    pub final_gap: f64,
}

/// Read a run's curves.csv, rewrite it (bytes are idempotent), and write a
/// summary.json next to it.
pub fn emit_curves(run_dir: &Path) -> Result<CurveSummary> {
    let csv_path = run_dir.join("curves.csv");
    let rows = read_curves_csv(&csv_path)?;
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "{} has no data rows",
            csv_path.display()
        )));
    }
    write_curves_csv(&csv_path, &rows)?;

    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.val_acc > rows[best].val_acc {
            best = i;
        }
    }
    let last = rows.last().unwrap();
    let summary = CurveSummary {
        epochs: rows.len(),
        best_val_epoch: rows[best].epoch,
        best_val_acc: rows[best].val_acc,
        train_acc_at_best: rows[best].train_acc,
        generalization_gap: rows[best].train_acc - rows[best].val_acc,
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        final_gap: last.train_acc - last.val_acc,
    };
    std::fs::write(
        run_dir.join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Ablation and sweep drivers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateGrid {
    pub cells: Vec<AblateCell>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AblateCell {
    pub mode: Mode,
    pub technique: Technique,
}

impl AblateGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid grid: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGrid {
    pub pools: Vec<String>,
    pub m: Vec<usize>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid grid: {e}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub label: (String, String),
    pub one_shot: f64,
    pub one_shot_radius: f64,
    pub five_shot: f64,
    pub five_shot_radius: f64,
    pub init_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<CellResult>,
    pub csv_path: PathBuf,
}

/// Train one model per cell from a shared seed (hence a shared initial
/// checkpoint) and evaluate it at 1-shot and 5-shot on the validation split.
fn run_cell(
    base: &RunConfig,
    dir_name: &str,
    pool: PoolSpec,
    m: usize,
    label: (String, String),
) -> Result<CellResult> {
    let mut config = base.clone();
    config.pool = pool;
    config.m = m;
    config.out_dir = base.out_dir.join("cells").join(dir_name);
    let summary = crate::metamaxup::run_training(&config)?;

    let dataset = config.dataset.load()?;
    let ckpt = crate::metamaxup::latest_checkpoint(&summary.run_dir)?
        .ok_or_else(|| Error::Config("trained cell has no checkpoint".into()))?;
    let (params, _opt) = ckpt.restore::<f32>()?;
    let eval_stream = RngStream::root(config.seed).child("eval", 0);
    let report_for = |shot: usize| -> Result<EvalReport> {
        let cfg = TaskConfig {
            way: config.eval_way.unwrap_or(config.task.way),
            shot,
            query: config.task.query,
            split: Split::Val,
            forbid_shared_base: false,
        };
        evaluate(
            &params,
            &dataset,
            &cfg,
            config.head,
            config.eval_episodes,
            None,
            &eval_stream,
        )
    };
    let one = report_for(1)?;
    let five = report_for(5)?;
    Ok(CellResult {
        label,
        one_shot: one.mean_accuracy,
        one_shot_radius: one.radius,
        five_shot: five.mean_accuracy,
        five_shot_radius: five.radius,
        init_fingerprint: summary.init_fingerprint,
    })
}

fn write_grid_csv(
    path: &Path,
    header: (&str, &str),
    rows: &[CellResult],
) -> Result<()> {
    let mut out = format!(
        "{},{},one_shot,one_shot_radius,five_shot,five_shot_radius\n",
        header.0, header.1
    );
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.label.0, row.label.1, row.one_shot, row.one_shot_radius, row.five_shot, row.five_shot_radius
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Mode-isolation ablation: a baseline row plus one row per grid cell, each
/// trained with a single-entry descriptor pool at m = 1.
pub fn ablate_modes(config: &RunConfig, grid: &AblateGrid) -> Result<GridResult> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let mut cells: Vec<(String, PoolSpec, (String, String))> = vec![(
        "baseline".to_string(),
        PoolSpec::Explicit(vec![crate::episodic::baseline_descriptor()]),
        ("baseline".to_string(), "crop+hflip+jitter".to_string()),
    )];
    for cell in &grid.cells {
        let d = AugmentationDescriptor::new(vec![DescriptorEntry::new(cell.mode, cell.technique)])?;
        let dir = format!("{}-{}", cell.mode.as_str(), cell.technique.as_str());
        cells.push((
            dir,
            PoolSpec::Explicit(vec![d]),
            (
                cell.mode.as_str().to_string(),
                cell.technique.as_str().to_string(),
            ),
        ));
    }

    let rows: Vec<CellResult> = cells
        .into_par_iter()
        .map(|(dir, pool, label)| run_cell(config, &dir, pool, 1, label))
        .collect::<Result<Vec<_>>>()?;

    let csv_path = config.out_dir.join("ablate.csv");
    write_grid_csv(&csv_path, ("mode", "technique"), &rows)?;
    Ok(GridResult { rows, csv_path })
}

/// Pool-size x m sweep.
pub fn sweep_maxup(config: &RunConfig, grid: &SweepGrid) -> Result<GridResult> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let mut cells = Vec::new();
    for pool_name in &grid.pools {
        crate::episodic::preset_pool(pool_name)?;
        for &m in &grid.m {
            cells.push((
                format!("{pool_name}-m{m}"),
                PoolSpec::Preset(pool_name.clone()),
                m,
                (pool_name.clone(), m.to_string()),
            ));
        }
    }
    let rows: Vec<CellResult> = cells
        .into_par_iter()
        .map(|(dir, pool, m, label)| run_cell(config, &dir, pool, m, label))
        .collect::<Result<Vec<_>>>()?;

    let csv_path = config.out_dir.join("sweep.csv");
    write_grid_csv(&csv_path, ("pool", "m"), &rows)?;
    Ok(GridResult { rows, csv_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{generate_synthetic, SyntheticSpec};
    use crate::learner::ArchConfig;

    #[test]
    fn radius_matches_hand_formula() {
        // Accuracies (0.5, 1.0): mean 75.0, radius 0.25/sqrt(2)*100.
        let accs = [0.5, 1.0];
        let mean = 100.0 * accs.iter().sum::<f64>() / 2.0;
        let radius = standard_error_radius(&accs);
        assert_eq!(mean, 75.0);
        assert!((radius - 100.0 * 0.25 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((radius - 17.677_669_529_663_689).abs() < 1e-9);
    }

    #[test]
    fn radius_zero_for_constant_accuracies() {
        let accs = [1.0; 8];
        assert_eq!(standard_error_radius(&accs), 0.0);
    }

    #[test]
    fn radius_matches_independent_oracle_on_random_vectors() {
        use rand::Rng;
        let mut rng = crate::rng::RngStream::root(5).child("radius", 0);
        for trial in 0..50 {
            let n = rng.random_range(2..200usize);
            let accs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            // Independent oracle: two-pass population std over percentages.
            let percents: Vec<f64> = accs.iter().map(|a| 100.0 * a).collect();
            let mean = percents.iter().sum::<f64>() / n as f64;
            let var = percents.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n as f64;
            let oracle = var.sqrt() / (n as f64).sqrt();
            let got = standard_error_radius(&accs);
            assert!(
                (got - oracle).abs() <= 1e-12,
                "trial {trial}: {got} vs {oracle}"
            );
        }
    }

    fn tiny_dataset() -> FewShotDataset {
        generate_synthetic(&SyntheticSpec {
            train_classes: 4,
            val_classes: 4,
            test_classes: 4,
            images_per_class: 12,
            channels: 3,
            height: 16,
            width: 16,
            seed: 21,
        })
        .unwrap()
    }

    fn tiny_params(dataset: &FewShotDataset) -> ModelParams<f32> {
        let arch = ArchConfig::new(dataset.geometry, vec![4, 8]);
        let mut rng = RngStream::root(13).child("init", 0);
        ModelParams::init(arch, &mut rng).unwrap()
    }

    fn val_cfg() -> TaskConfig {
        TaskConfig {
            way: 3,
            shot: 1,
            query: 4,
            split: Split::Val,
            forbid_shared_base: false,
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_reports_invariants() {
        let ds = tiny_dataset();
        let params = tiny_params(&ds);
        let stream = RngStream::root(99).child("eval", 0);
        let a = evaluate(&params, &ds, &val_cfg(), HeadKind::Ridge, 16, None, &stream).unwrap();
        let b = evaluate(&params, &ds, &val_cfg(), HeadKind::Ridge, 16, None, &stream).unwrap();
        assert_eq!(a.per_episode, b.per_episode);
        assert_eq!(a.mean_accuracy, b.mean_accuracy);
        assert!(a.mean_accuracy >= 0.0 && a.mean_accuracy <= 100.0);
        assert!((a.radius - standard_error_radius(&a.per_episode)).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_train_split_and_tiny_counts() {
        let ds = tiny_dataset();
        let params = tiny_params(&ds);
        let stream = RngStream::root(99).child("eval", 0);
        let mut cfg = val_cfg();
        cfg.split = Split::Train;
        assert!(evaluate(&params, &ds, &cfg, HeadKind::Ridge, 16, None, &stream).is_err());
        assert!(evaluate(&params, &ds, &val_cfg(), HeadKind::Ridge, 1, None, &stream).is_err());
    }

    #[test]
    fn no_shot_aug_equals_none_bitwise() {
        // Identity shot augmentation is "no copies", so the report with
        // shot_aug = None is the reference; duplicate with zero copies must
        // match it bitwise.
        let ds = tiny_dataset();
        let params = tiny_params(&ds);
        let stream = RngStream::root(4).child("eval", 0);
        let plain = evaluate(&params, &ds, &val_cfg(), HeadKind::Prototype, 12, None, &stream).unwrap();
        let zero_copies = ShotAug {
            technique: ShotAugTechnique::Duplicate,
            copies: 0,
        };
        let with = evaluate(
            &params,
            &ds,
            &val_cfg(),
            HeadKind::Prototype,
            12,
            Some(zero_copies),
            &stream,
        )
        .unwrap();
        assert_eq!(plain.per_episode, with.per_episode);
    }

    #[test]
    fn shot_aug_changes_only_support() {
        let ds = tiny_dataset();
        let params = tiny_params(&ds);
        let stream = RngStream::root(4).child("eval", 0);
        let aug = ShotAug {
            technique: ShotAugTechnique::Hflip,
            copies: 1,
        };
        let report = evaluate(
            &params,
            &ds,
            &val_cfg(),
            HeadKind::Prototype,
            12,
            Some(aug),
            &stream,
        )
        .unwrap();
        assert_eq!(report.n_episodes, 12);
        assert_eq!(report.shot_aug.as_deref(), Some("hflipx1"));
    }

    #[test]
    fn curves_csv_round_trip_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            CurvePoint {
                epoch: 0,
                train_acc: 40.0,
                val_acc: 35.0,
                loss: 1.5,
                lr: 0.05,
            },
            CurvePoint {
                epoch: 1,
                train_acc: 60.0,
                val_acc: 50.0,
                loss: 1.2,
                lr: 0.05,
            },
            CurvePoint {
                epoch: 2,
                train_acc: 70.0,
                val_acc: 48.0,
                loss: 1.0,
                lr: 0.005,
            },
        ];
        let path = dir.path().join("curves.csv");
        write_curves_csv(&path, &rows).unwrap();
        let back = read_curves_csv(&path).unwrap();
        assert_eq!(rows, back);

        let before = std::fs::read(&path).unwrap();
        let summary = emit_curves(dir.path()).unwrap();
        let after = std::fs::read(&path).unwrap();
        assert_eq!(before, after, "emit_curves must not change csv bytes");
        assert_eq!(summary.best_val_epoch, 1);
        assert_eq!(summary.generalization_gap, 10.0);
        assert_eq!(summary.final_gap, 22.0);
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn curves_csv_rejects_nonincreasing_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        std::fs::write(
            &path,
            "epoch,train_acc,val_acc,loss,lr\n1,50,40,1.0,0.1\n1,55,41,0.9,0.1\n",
        )
        .unwrap();
        assert!(read_curves_csv(&path).is_err());
    }
}
