//! Minimax augmentation selection and the training loop.
//!
//! Per task: sample m descriptors from the pool with replacement, apply each
//! to the task, evaluate the query loss forward-only, keep the candidate
//! with the highest loss (ties break toward the lowest index), and compute
//! the gradient for that winner alone. Batches average task gradients in
//! index order and take one Nesterov step.
//!
//! Stream-key map (all derived from the master seed, so runs are bitwise
//! reproducible and resumable without saving RNG state):
//!   root(seed)
//!     "init" 0                 parameter initialization
//!     "epoch" e
//!       "pool" 0               class-pool rebuild (task augmentation)
//!       "episode" i            one task
//!         "sample" 0           episode sampling
//!         "baseline" 0         stacked baseline (when enabled)
//!         "select" 0           candidate descriptor indices
//!         "candidate" j        candidate j's augmentation draws
//!     "eval" s                 evaluation (s: 0 = val, 1 = test)
//!       "episode" i

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::datastore::{ChannelStats, FewShotDataset, Split};
use crate::episodic::{
    apply_descriptor, baseline_descriptor, build_epoch_pool, sample_episode, AugParams,
    AugmentationPool, Episode, TaskConfig, VirtualClass,
};
use crate::error::{Error, Result};
use crate::harness::{self, CurvePoint};
use crate::learner::{
    loss_and_grad, sgd_step, HeadKind, LossValue, ModelParams, OptState, Precision, Real,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxUpConfig {
    pub pool: AugmentationPool,
    /// Candidates per task.
    pub m: usize,
    /// Tasks per parameter update.
    pub batch_size: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
}

impl MaxUpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.m > crate::config::MAX_M {
            return Err(Error::Config(format!(
                "m must be in 1..={}, got {}",
                crate::config::MAX_M,
                self.m
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.pool.descriptors.is_empty() {
            return Err(Error::Config("augmentation pool is empty".into()));
        }
        Ok(())
    }
}

/// One candidate's evaluation inside a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    /// Index into the pool's descriptor list.
    pub descriptor_index: usize,
    pub loss: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome<T> {
    pub loss_value: LossValue<T>,
    pub records: Vec<CandidateRecord>,
    /// Query accuracy of the selected candidate.
    pub accuracy: f64,
}

/// Evaluate m sampled augmentations of one raw episode and backpropagate
/// only through the loss-maximizing one.
pub fn maxup_task<T: Real>(
    params: &ModelParams<T>,
    raw: &Episode,
    pool: &AugmentationPool,
    m: usize,
    head: HeadKind,
    stats: &ChannelStats,
    aug: &AugParams,
    task_stream: &RngStream,
) -> Result<TaskOutcome<T>> {
    if m < 1 {
        return Err(Error::Config("m must be >= 1".into()));
    }
    if pool.descriptors.is_empty() {
        return Err(Error::Config("augmentation pool is empty".into()));
    }

    let mut select = task_stream.child("select", 0);
    let indices: Vec<usize> = (0..m)
        .map(|_| rand::Rng::random_range(&mut select, 0..pool.descriptors.len()))
        .collect();

    let tag_candidate = |e: Error, j: usize| match e {
        Error::NumericFailure { stage } => Error::NumericFailure {
            stage: format!("candidate-{j}/{stage}"),
        },
        other => other,
    };

    let mut records = Vec::with_capacity(m);
    let mut best: Option<(usize, f64, f64)> = None; // (j, loss, accuracy)
    for (j, &descriptor_index) in indices.iter().enumerate() {
        let mut crng = task_stream.child("candidate", j as u64);
        let candidate = apply_descriptor(raw, &pool.descriptors[descriptor_index], aug, &mut crng)
            .map_err(|e| tag_candidate(e, j))?
            .normalized(stats)?;
        let outcome =
            crate::learner::episode_loss(params, &candidate, head).map_err(|e| tag_candidate(e, j))?;
        records.push(CandidateRecord {
            descriptor_index,
            loss: outcome.loss,
            selected: false,
        });
        let better = match best {
            None => true,
            Some((_, best_loss, _)) => outcome.loss > best_loss,
        };
        if better {
            best = Some((j, outcome.loss, outcome.accuracy));
        }
    }
    let (winner, _, accuracy) = best.expect("m >= 1");
    records[winner].selected = true;

    // Rebuild the winning candidate from its stream key and backpropagate.
    let mut crng = task_stream.child("candidate", winner as u64);
    let candidate = apply_descriptor(raw, &pool.descriptors[indices[winner]], aug, &mut crng)?
        .normalized(stats)?;
    let loss_value =
        loss_and_grad(params, &candidate, head).map_err(|e| tag_candidate(e, winner))?;

    Ok(TaskOutcome {
        loss_value,
        records,
        accuracy,
    })
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_selected_loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
    pub wall_secs: f64,
    /// Candidate records per task, in episode order.
    pub records: Vec<Vec<CandidateRecord>>,
}

/// Everything an epoch needs besides the mutable parameter state.
pub struct TrainContext<'a> {
    pub dataset: &'a FewShotDataset,
    pub task: TaskConfig,
    pub maxup: &'a MaxUpConfig,
    pub head: HeadKind,
    pub aug: &'a AugParams,
    pub optimizer: crate::learner::OptimizerConfig,
    pub stack_baseline: bool,
    pub seed: u64,
}

fn run_task<T: Real>(
    ctx: &TrainContext<'_>,
    params: &ModelParams<T>,
    class_pool: &[VirtualClass],
    epoch_stream: &RngStream,
    index: usize,
) -> Result<TaskOutcome<T>> {
    let task_stream = epoch_stream.child("episode", index as u64);
    let mut sample_rng = task_stream.child("sample", 0);
    let mut episode = sample_episode(ctx.dataset, class_pool, &ctx.task, ctx.aug, &mut sample_rng)?;
    if ctx.stack_baseline {
        let mut rng = task_stream.child("baseline", 0);
        episode = apply_descriptor(&episode, &baseline_descriptor(), ctx.aug, &mut rng)?;
    }
    maxup_task(
        params,
        &episode,
        &ctx.maxup.pool,
        ctx.maxup.m,
        ctx.head,
        &ctx.dataset.stats,
        ctx.aug,
        &task_stream,
    )
}

/// One pass over `episodes_per_epoch` tasks in batches: per batch, task
/// gradients are computed (in parallel) and averaged in index order, then a
/// single optimizer step is taken. The class pool is rebuilt at epoch start.
pub fn train_epoch<T: Real>(
    ctx: &TrainContext<'_>,
    params: &mut ModelParams<T>,
    opt: &mut OptState<T>,
    epoch: usize,
    lr: f64,
) -> Result<EpochStats> {
    let start = Instant::now();
    let epoch_stream = RngStream::root(ctx.seed).child("epoch", epoch as u64);
    let mut pool_rng = epoch_stream.child("pool", 0);
    let techniques = ctx.maxup.pool.task_techniques();
    let class_pool = build_epoch_pool(ctx.dataset, &techniques, &mut pool_rng)?;

    let mut sum_loss = 0.0;
    let mut sum_acc = 0.0;
    let mut all_records = Vec::with_capacity(ctx.maxup.episodes_per_epoch);
    let mut done = 0;
    while done < ctx.maxup.episodes_per_epoch {
        let batch = (ctx.maxup.episodes_per_epoch - done).min(ctx.maxup.batch_size);
        let outcomes: Vec<Result<TaskOutcome<T>>> = (done..done + batch)
            .into_par_iter()
            .map(|i| run_task(ctx, params, &class_pool, &epoch_stream, i))
            .collect();

        let mut grad = vec![T::zero(); params.data.len()];
        for outcome in outcomes {
            let outcome = outcome?;
            for (g, &x) in grad.iter_mut().zip(&outcome.loss_value.grad) {
                *g += x;
            }
            sum_loss += outcome.loss_value.loss.to_f64();
            sum_acc += outcome.accuracy;
            all_records.push(outcome.records);
        }
        let scale = T::from_f64(1.0 / batch as f64);
        for g in &mut grad {
            *g *= scale;
        }
        sgd_step(params, &grad, opt, lr, &ctx.optimizer);
        done += batch;
    }

    let n = ctx.maxup.episodes_per_epoch as f64;
    Ok(EpochStats {
        epoch,
        mean_selected_loss: sum_loss / n,
        train_accuracy: sum_acc / n,
        lr,
        wall_secs: start.elapsed().as_secs_f64(),
        records: all_records,
    })
}

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    /// SHA-256 of the initial parameter bytes; identical across runs that
    /// share a seed and architecture.
    pub init_fingerprint: String,
    pub final_epoch: usize,
    pub curve: Vec<CurvePoint>,
}

pub fn param_fingerprint(params: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in params {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Execute a full training run into `config.out_dir`: per epoch it trains,
/// evaluates on the validation split with a fixed episode set, appends a
/// curve row, and checkpoints. Fails on config or disk problems before any
/// compute happens.
pub fn run_training(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    let arch = config.arch_for(&dataset)?;
    let pool = config.pool.resolve()?;
    let run_dir = config.out_dir.clone();
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    std::fs::write(
        run_dir.join("config.json"),
        format!("{}\n", serde_json::to_string_pretty(config)?),
    )?;

    match config.precision {
        Precision::F32 => train_from::<f32>(config, &dataset, arch, pool, &run_dir, None),
        Precision::F64 => train_from::<f64>(config, &dataset, arch, pool, &run_dir, None),
    }
}

/// Continue an interrupted run in place. The stored `config.json` is
/// authoritative; training resumes after the latest checkpoint and the curve
/// matches an uninterrupted run bit for bit.
pub fn resume_training(run_dir: &Path) -> Result<RunSummary> {
    let config = RunConfig::load(&run_dir.join("config.json"))?;
    let dataset = config.dataset.load()?;
    let arch = config.arch_for(&dataset)?;
    let pool = config.pool.resolve()?;
    let resume = latest_checkpoint(run_dir)?;
    match config.precision {
        Precision::F32 => train_from::<f32>(&config, &dataset, arch, pool, run_dir, resume.as_ref()),
        Precision::F64 => train_from::<f64>(&config, &dataset, arch, pool, run_dir, resume.as_ref()),
    }
}

pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<Checkpoint>> {
    let dir = run_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(epoch) = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".fsck"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().map(|(e, _)| epoch > *e).unwrap_or(true) {
            best = Some((epoch, path));
        }
    }
    match best {
        Some((_, path)) => Ok(Some(load_checkpoint(&path)?)),
        None => Ok(None),
    }
}

fn train_from<T: Real>(
    config: &RunConfig,
    dataset: &FewShotDataset,
    arch: crate::learner::ArchConfig,
    pool: AugmentationPool,
    run_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<RunSummary> {
    let maxup = MaxUpConfig {
        pool,
        m: config.m,
        batch_size: config.batch_size,
        episodes_per_epoch: config.episodes_per_epoch,
        epochs: config.epochs,
    };
    maxup.validate()?;

    let mut task = config.task;
    task.split = Split::Train;

    let (mut params, mut opt, start_epoch, mut curve) = match resume {
        Some(ckpt) => {
            if ckpt.header.arch != arch {
                return Err(Error::Config(
                    "checkpoint architecture does not match config".into(),
                ));
            }
            if ckpt.header.head != config.head || ckpt.header.seed != config.seed {
                return Err(Error::Config(
                    "checkpoint head or seed does not match config".into(),
                ));
            }
            let (params, opt) = ckpt.restore::<T>()?;
            let rows = harness::read_curves_csv(&run_dir.join("curves.csv"))?
                .into_iter()
                .filter(|row| row.epoch <= ckpt.header.epoch)
                .collect();
            (params, opt, ckpt.header.epoch + 1, rows)
        }
        None => {
            let mut init_rng = RngStream::root(config.seed).child("init", 0);
            let params = ModelParams::<T>::init(arch, &mut init_rng)?;
            let opt = OptState::zeros(params.data.len());
            let init = Checkpoint::from_state(
                &params,
                &opt,
                config.head,
                &dataset.stats,
                config.seed,
                0,
            );
            save_checkpoint(&run_dir.join("checkpoints").join("init.fsck"), &init)?;
            (params, opt, 0, Vec::new())
        }
    };

    let init_fingerprint = {
        let ckpt = load_checkpoint(&run_dir.join("checkpoints").join("init.fsck"))?;
        param_fingerprint(&ckpt.params)
    };

    let ctx = TrainContext {
        dataset,
        task,
        maxup: &maxup,
        head: config.head,
        aug: &config.aug,
        optimizer: config.optimizer,
        stack_baseline: config.stack_baseline,
        seed: config.seed,
    };

    let mut val_task = config.task;
    val_task.way = config.eval_way.unwrap_or(config.task.way);
    val_task.split = Split::Val;
    let eval_stream = RngStream::root(config.seed).child("eval", 0);

    for epoch in start_epoch..config.epochs {
        let lr = config.schedule.rate(epoch);
        let stats = train_epoch(&ctx, &mut params, &mut opt, epoch, lr)?;
        let report = harness::evaluate(
            &params,
            dataset,
            &val_task,
            config.head,
            config.eval_episodes,
            None,
            &eval_stream,
        )?;
        curve.push(CurvePoint {
            epoch,
            train_acc: stats.train_accuracy * 100.0,
            val_acc: report.mean_accuracy,
            loss: stats.mean_selected_loss,
            lr,
        });
        harness::write_curves_csv(&run_dir.join("curves.csv"), &curve)?;
        let ckpt = Checkpoint::from_state(
            &params,
            &opt,
            config.head,
            &dataset.stats,
            config.seed,
            epoch,
        );
        save_checkpoint(
            &run_dir
                .join("checkpoints")
                .join(format!("epoch_{epoch:04}.fsck")),
            &ckpt,
        )?;
    }

    harness::emit_curves(run_dir)?;
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        init_fingerprint,
        final_epoch: config.epochs.saturating_sub(1),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetSource, PoolSpec};
    use crate::datastore::{generate_synthetic, SyntheticSpec};
    use crate::episodic::{identity_pool, preset_pool, AugmentationDescriptor};
    use crate::learner::{ArchConfig, LrSchedule, OptimizerConfig};

    fn dataset() -> FewShotDataset {
        generate_synthetic(&SyntheticSpec {
            train_classes: 5,
            val_classes: 3,
            test_classes: 3,
            images_per_class: 10,
            channels: 3,
            height: 8,
            width: 8,
            seed: 77,
        })
        .unwrap()
    }

    fn params_for(ds: &FewShotDataset, seed: u64) -> ModelParams<f32> {
        let arch = ArchConfig::new(ds.geometry, vec![2, 2]);
        let mut rng = RngStream::root(seed).child("init", 0);
        ModelParams::init(arch, &mut rng).unwrap()
    }

    fn train_task_cfg() -> TaskConfig {
        TaskConfig {
            way: 3,
            shot: 1,
            query: 2,
            split: Split::Train,
            forbid_shared_base: false,
        }
    }

    #[test]
    fn selected_record_is_argmax_with_low_index_ties() {
        let ds = dataset();
        let params = params_for(&ds, 1);
        let pool = preset_pool("medium").unwrap();
        let class_pool = identity_pool(&ds, Split::Train);
        let aug = AugParams::default();
        let task_stream = RngStream::root(5).child("epoch", 0).child("episode", 0);
        let mut sample_rng = task_stream.child("sample", 0);
        let ep = sample_episode(&ds, &class_pool, &train_task_cfg(), &aug, &mut sample_rng).unwrap();

        let out = maxup_task(
            &params,
            &ep,
            &pool,
            4,
            HeadKind::Ridge,
            &ds.stats,
            &aug,
            &task_stream,
        )
        .unwrap();
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.records.iter().filter(|r| r.selected).count(), 1);
        let max = out.records.iter().map(|r| r.loss).fold(f64::MIN, f64::max);
        let winner = out.records.iter().position(|r| r.selected).unwrap();
        assert_eq!(out.records[winner].loss, max);
        // Ties break low: identity-only pool makes every candidate equal.
        let identity = AugmentationPool::new(
            "identity",
            vec![AugmentationDescriptor::identity(); 3],
        )
        .unwrap();
        let out = maxup_task(
            &params,
            &ep,
            &identity,
            3,
            HeadKind::Ridge,
            &ds.stats,
            &aug,
            &task_stream,
        )
        .unwrap();
        assert!(out.records[0].selected);
        assert!(out.records.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    #[test]
    fn identity_pool_loss_equals_unaugmented_loss() {
        let ds = dataset();
        let params = params_for(&ds, 2);
        let identity = AugmentationPool::new(
            "identity",
            vec![AugmentationDescriptor::identity()],
        )
        .unwrap();
        let class_pool = identity_pool(&ds, Split::Train);
        let aug = AugParams::default();
        let task_stream = RngStream::root(6).child("epoch", 0).child("episode", 0);
        let mut sample_rng = task_stream.child("sample", 0);
        let ep = sample_episode(&ds, &class_pool, &train_task_cfg(), &aug, &mut sample_rng).unwrap();

        let out = maxup_task(
            &params,
            &ep,
            &identity,
            5,
            HeadKind::Prototype,
            &ds.stats,
            &aug,
            &task_stream,
        )
        .unwrap();
        let direct = crate::learner::episode_loss(
            &params,
            &ep.normalized(&ds.stats).unwrap(),
            HeadKind::Prototype,
        )
        .unwrap();
        assert_eq!(out.loss_value.loss as f64, direct.loss);
    }

    #[test]
    fn m1_identity_epoch_is_bitwise_plain_training() {
        let ds = dataset();
        let seed = 11;
        let maxup = MaxUpConfig {
            pool: AugmentationPool::new("identity", vec![AugmentationDescriptor::identity()])
                .unwrap(),
            m: 1,
            batch_size: 1,
            episodes_per_epoch: 1,
            epochs: 1,
        };
        let aug = AugParams::default();
        let ctx = TrainContext {
            dataset: &ds,
            task: train_task_cfg(),
            maxup: &maxup,
            head: HeadKind::Ridge,
            aug: &aug,
            optimizer: OptimizerConfig::default(),
            stack_baseline: false,
            seed,
        };
        let mut params = params_for(&ds, seed);
        let mut opt = OptState::zeros(params.data.len());
        train_epoch(&ctx, &mut params, &mut opt, 0, 0.05).unwrap();

        // Hand-wired single step on the same episode, same stream keys.
        let mut direct = params_for(&ds, seed);
        let mut direct_opt = OptState::zeros(direct.data.len());
        let epoch_stream = RngStream::root(seed).child("epoch", 0);
        let mut pool_rng = epoch_stream.child("pool", 0);
        let class_pool = build_epoch_pool(&ds, &[], &mut pool_rng).unwrap();
        let task_stream = epoch_stream.child("episode", 0);
        let mut sample_rng = task_stream.child("sample", 0);
        let ep = sample_episode(&ds, &class_pool, &ctx.task, &aug, &mut sample_rng).unwrap();
        // The identity descriptor consumes no draws, so applying it changes
        // nothing; the direct pipeline skips it entirely.
        let normalized = ep.normalized(&ds.stats).unwrap();
        let lv = loss_and_grad(&direct, &normalized, HeadKind::Ridge).unwrap();
        sgd_step(
            &mut direct,
            &lv.grad,
            &mut direct_opt,
            0.05,
            &OptimizerConfig::default(),
        );

        assert_eq!(params.data, direct.data);
        assert_eq!(opt.velocity, direct_opt.velocity);
    }

    fn micro_config(dir: &std::path::Path, seed: u64, m: usize, pool: PoolSpec) -> RunConfig {
        RunConfig {
            dataset: DatasetSource::Synthetic {
                synthetic: SyntheticSpec {
                    train_classes: 5,
                    val_classes: 3,
                    test_classes: 3,
                    images_per_class: 10,
                    channels: 3,
                    height: 8,
                    width: 8,
                    seed: 77,
                },
            },
            task: train_task_cfg(),
            head: HeadKind::Ridge,
            widths: vec![2, 2],
            ridge_lambda: 1.0,
            optimizer: OptimizerConfig::default(),
            schedule: LrSchedule::new(vec![(0, 0.05)]).unwrap(),
            pool,
            m,
            batch_size: 2,
            episodes_per_epoch: 4,
            epochs: 3,
            eval_episodes: 4,
            seed,
            out_dir: dir.to_path_buf(),
            aug: AugParams::default(),
            stack_baseline: false,
            precision: Precision::F32,
        }
    }

    #[test]
    fn training_runs_are_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let a = micro_config(&tmp.path().join("a"), 3, 2, PoolSpec::Preset("medium".into()));
        let b = micro_config(&tmp.path().join("b"), 3, 2, PoolSpec::Preset("medium".into()));
        let sa = run_training(&a).unwrap();
        let sb = run_training(&b).unwrap();
        assert_eq!(sa.init_fingerprint, sb.init_fingerprint);
        let read = |dir: &Path, name: &str| std::fs::read(dir.join(name)).unwrap();
        assert_eq!(
            read(&sa.run_dir, "curves.csv"),
            read(&sb.run_dir, "curves.csv")
        );
        assert_eq!(
            read(&sa.run_dir, "checkpoints/epoch_0002.fsck"),
            read(&sb.run_dir, "checkpoints/epoch_0002.fsck")
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let tmp = tempfile::tempdir().unwrap();
        let full = micro_config(&tmp.path().join("full"), 9, 1, PoolSpec::Preset("cutmix-only".into()));
        let s_full = run_training(&full).unwrap();

        // Same run, then simulate an interruption after epoch 0 by deleting
        // later checkpoints and truncating the curve.
        let broken = micro_config(&tmp.path().join("broken"), 9, 1, PoolSpec::Preset("cutmix-only".into()));
        let _ = run_training(&broken).unwrap();
        for e in 1..3 {
            std::fs::remove_file(
                tmp.path()
                    .join("broken/checkpoints")
                    .join(format!("epoch_{e:04}.fsck")),
            )
            .unwrap();
        }
        let rows = harness::read_curves_csv(&tmp.path().join("broken/curves.csv")).unwrap();
        harness::write_curves_csv(&tmp.path().join("broken/curves.csv"), &rows[..1]).unwrap();
        std::fs::remove_file(tmp.path().join("broken/summary.json")).unwrap();

        let s_resumed = resume_training(&tmp.path().join("broken")).unwrap();
        assert_eq!(s_resumed.final_epoch, s_full.final_epoch);
        let read = |dir: &str, name: &str| std::fs::read(tmp.path().join(dir).join(name)).unwrap();
        assert_eq!(read("full", "curves.csv"), read("broken", "curves.csv"));
        assert_eq!(
            read("full", "checkpoints/epoch_0002.fsck"),
            read("broken", "checkpoints/epoch_0002.fsck")
        );
        assert_eq!(read("full", "summary.json"), read("broken", "summary.json"));
    }

    #[test]
    fn selected_losses_dominate_candidates_across_epoch() {
        let ds = dataset();
        let maxup = MaxUpConfig {
            pool: preset_pool("medium").unwrap(),
            m: 4,
            batch_size: 2,
            episodes_per_epoch: 6,
            epochs: 1,
        };
        let aug = AugParams::default();
        let ctx = TrainContext {
            dataset: &ds,
            task: train_task_cfg(),
            maxup: &maxup,
            head: HeadKind::Prototype,
            aug: &aug,
            optimizer: OptimizerConfig::default(),
            stack_baseline: false,
            seed: 15,
        };
        let mut params = params_for(&ds, 15);
        let mut opt = OptState::zeros(params.data.len());
        let stats = train_epoch(&ctx, &mut params, &mut opt, 0, 0.05).unwrap();
        assert_eq!(stats.records.len(), 6);
        for records in &stats.records {
            let selected = records.iter().find(|r| r.selected).unwrap();
            for r in records {
                assert!(selected.loss >= r.loss);
            }
        }
    }
}
