//! Training and evaluation loops, learning-rate schedules, run records,
//! and explosion handling.
//!
//! A run is a pure function of (network config, train config): shuffling is
//! re-seeded per epoch from (seed, epoch), augmentation draws from its own
//! stream, and every random choice funnels through the splittable PRNG, so
//! repeated runs produce bit-identical checkpoints and CSV records.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::backbone::{Network, NetworkConfig};
use crate::checkpoint;
use crate::data::{
    augment_crop_flip, compute_norm_stats, load_splits, normalize, DataSpec, Dataset, NormStats,
    IMAGE_SIDE, IMAGE_VALUES,
};
use crate::error::{Error, ExplosionEvent, ExplosionSite, Result};
use crate::ops;
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs after which the learning rate is multiplied by gamma.
    pub schedule: Vec<usize>,
    pub gamma: f64,
    pub augment: bool,
    pub seed: u64,
    pub data: DataSpec,
    pub subset: usize,
    pub test_subset: usize,
    /// Accuracy evaluation every this many epochs (plus once at the end).
    pub eval_interval: usize,
    /// Optional hard cap on optimizer steps; 0 disables the cap.
    pub max_steps: usize,
    /// Record the range of attention vector entries seen during training.
    pub capture_attention_range: bool,
    /// Test hook: overwrite the loss with NaN at this 1-based step to
    /// exercise the explosion path. 0 disables.
    pub inject_nan_at_step: usize,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 3,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Vec::new(),
            gamma: 0.1,
            augment: false,
            seed: 1,
            data: DataSpec::Synth { classes: 10, difficulty: crate::data::DIFFICULTY_MID },
            subset: 2000,
            test_subset: 1000,
            eval_interval: 1,
            max_steps: 0,
            capture_attention_range: false,
            inject_nan_at_step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.subset == 0 || self.test_subset == 0 {
            return Err(Error::Config(
                "batch size, epochs, and subset sizes must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !self.schedule.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "schedule must be strictly increasing, got {:?}",
                self.schedule
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during a 1-based epoch: the base rate decayed
    /// once per schedule point already passed.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.schedule.iter().filter(|&&s| epoch > s).count();
        self.lr * self.gamma.powi(decays as i32)
    }
}

/// One CSV row of the run record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub step: usize,
    pub epoch: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

/// Append-only log of a run: per-step train loss, per-eval accuracies, and
/// any explosion event. Wall time is kept out of the CSV so records stay
/// bit-reproducible.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub rows: Vec<RecordRow>,
    pub explosion: Option<ExplosionEvent>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,split,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.epoch, r.split, r.metric, r.value
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub exploded: bool,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    /// (min, max) over every attention entry seen, when capture was on.
    pub attention_range: Option<(f64, f64)>,
    pub checkpoint_path: PathBuf,
    pub csv_path: PathBuf,
}

fn batch_tensor(ds: &Dataset, indices: &[usize], augment: bool, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * IMAGE_VALUES);
    for &i in indices {
        if augment {
            data.extend(augment_crop_flip(ds.image(i), rng));
        } else {
            data.extend_from_slice(ds.image(i));
        }
    }
    Tensor::from_vec(data, &[indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE])
}

/// Share of rows whose argmax matches the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = ops::argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy over a dataset, batched, inference mode.
pub fn evaluate(net: &Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut hits = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut throwaway = Rng::new(0);
    for chunk in indices.chunks(batch_size) {
        let images = batch_tensor(ds, chunk, false, &mut throwaway);
        let out = net.forward(&images, false, false)?;
        let pred = ops::argmax_rows(&out.logits);
        hits += pred
            .iter()
            .zip(chunk.iter().map(|&i| ds.labels[i]))
            .filter(|(p, l)| **p == *l)
            .count();
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Builds the checkpoint entry list: model state plus the normalization
/// statistics the model was trained with.
fn checkpoint_entries(net: &Network, stats: &NormStats) -> Vec<checkpoint::Entry> {
    let mut entries = net.export_state();
    entries.push(("norm.mean".to_string(), vec![3], stats.mean.to_vec()));
    entries.push(("norm.std".to_string(), vec![3], stats.std.to_vec()));
    entries
}

/// Restores a checkpoint into a freshly built network; returns the network
/// and the stored normalization statistics.
pub fn load_checkpoint(config: &NetworkConfig, path: &Path, seed: u64) -> Result<(Network, NormStats)> {
    let entries = checkpoint::read_entries(path)?;
    let (model_entries, extra): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|(id, _, _)| !id.starts_with("norm."));
    let mut mean = None;
    let mut std = None;
    for (id, _, data) in &extra {
        match id.as_str() {
            "norm.mean" if data.len() == 3 => mean = Some([data[0], data[1], data[2]]),
            "norm.std" if data.len() == 3 => std = Some([data[0], data[1], data[2]]),
            other => return Err(Error::Format(format!("unexpected checkpoint entry '{other}'"))),
        }
    }
    let (mean, std) = match (mean, std) {
        (Some(m), Some(s)) => (m, s),
        _ => return Err(Error::Format("checkpoint lacks normalization statistics".into())),
    };
    let net = Network::new(config, seed)?;
    net.import_state(&model_entries)?;
    Ok((net, NormStats { mean, std }))
}

/// Runs the full training loop and writes `run.csv` and `checkpoint.dia`
/// under `out_dir`. An explosion halts the run, is recorded in the CSV, and
/// marks the outcome; it is not an error.
pub fn train(net_cfg: &NetworkConfig, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    net_cfg.validate()?;
    cfg.validate()?;
    if net_cfg.classes != cfg.data.classes() {
        return Err(Error::Config(format!(
            "network has {} classes but the dataset provides {}",
            net_cfg.classes,
            cfg.data.classes()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    let (train_raw, test_raw) = load_splits(&cfg.data, cfg.seed, cfg.subset, cfg.test_subset)?;
    let stats = compute_norm_stats(&train_raw);
    let train_ds = normalize(&train_raw, &stats);
    let test_ds = normalize(&test_raw, &stats);

    let net = Network::new(net_cfg, cfg.seed)?;
    let params = net.parameters();
    let mut sgd = Sgd::new(&params, cfg.momentum, cfg.weight_decay);

    let root_rng = Rng::new(cfg.seed);
    let mut augment_rng = root_rng.derive("augment");

    let mut record = RunRecord::default();
    let mut step = 0usize;
    let mut exploded: Option<ExplosionEvent> = None;
    let mut h_range: Option<(f64, f64)> = None;
    let mut final_train_acc = None;
    let mut final_test_acc = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        root_rng
            .derive(&format!("shuffle-epoch{epoch}"))
            .shuffle(&mut order);

        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let images = batch_tensor(&train_ds, chunk, cfg.augment, &mut augment_rng);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_ds.labels[i]).collect();

            let forward = net.forward(&images, true, cfg.capture_attention_range);
            let out = match forward {
                Ok(out) => out,
                Err(Error::Explosion(mut ev)) => {
                    ev.step = step;
                    ev.epoch = epoch;
                    exploded = Some(ev);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };

            if cfg.capture_attention_range {
                for trace in out.traces.iter().flatten() {
                    for &v in &trace.values {
                        let (lo, hi) = h_range.unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
                        h_range = Some((lo.min(v), hi.max(v)));
                    }
                }
            }

            let loss = ops::softmax_cross_entropy(&out.logits, &labels)?;
            let mut loss_value = loss.item();
            if cfg.inject_nan_at_step == step {
                loss_value = f64::NAN;
            }
            if !loss_value.is_finite() {
                exploded = Some(ExplosionEvent {
                    step,
                    epoch,
                    site: ExplosionSite::Loss,
                });
                break 'epochs;
            }
            record.rows.push(RecordRow {
                step,
                epoch,
                split: "train",
                metric: "loss",
                value: loss_value,
            });

            loss.backward()?;
            sgd.step(&params, lr);

            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
        }

        if epoch % cfg.eval_interval == 0 && epoch != cfg.epochs {
            let train_acc = evaluate(&net, &train_ds, cfg.batch_size)?;
            let test_acc = evaluate(&net, &test_ds, cfg.batch_size)?;
            record.rows.push(RecordRow { step, epoch, split: "train", metric: "accuracy", value: train_acc });
            record.rows.push(RecordRow { step, epoch, split: "test", metric: "accuracy", value: test_acc });
        }
    }

    let final_epoch = record.rows.last().map(|r| r.epoch).unwrap_or(0);
    if let Some(ev) = exploded {
        record.rows.push(RecordRow {
            step: ev.step,
            epoch: ev.epoch,
            split: "train",
            metric: "explosion",
            value: ev.site_code(&net_cfg.blocks_per_stage()) as f64,
        });
        record.explosion = Some(ev);
    } else {
        let train_acc = evaluate(&net, &train_ds, cfg.batch_size)?;
        let test_acc = evaluate(&net, &test_ds, cfg.batch_size)?;
        record.rows.push(RecordRow { step, epoch: final_epoch, split: "train", metric: "accuracy", value: train_acc });
        record.rows.push(RecordRow { step, epoch: final_epoch, split: "test", metric: "accuracy", value: test_acc });
        final_train_acc = Some(train_acc);
        final_test_acc = Some(test_acc);
    }

    let checkpoint_path = out_dir.join("checkpoint.dia");
    checkpoint::write_entries(&checkpoint_path, &checkpoint_entries(&net, &stats))?;
    let csv_path = out_dir.join("run.csv");
    record.wall_seconds = started.elapsed().as_secs_f64();
    record.write_csv(&csv_path)?;

    Ok(TrainOutcome {
        exploded: record.explosion.is_some(),
        record,
        final_train_accuracy: final_train_acc,
        final_test_accuracy: final_test_acc,
        attention_range: h_range,
        checkpoint_path,
        csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AttentionKind, BlockKind, FExt, StageSpec};
    use crate::attention::OutputActivation;

    fn toy_net_cfg() -> NetworkConfig {
        NetworkConfig {
            stages: vec![
                StageSpec { channels: 4, blocks: 1, stride: 1 },
                StageSpec { channels: 8, blocks: 1, stride: 2 },
            ],
            block_kind: BlockKind::Basic,
            attention: AttentionKind::DiaLstm,
            reduction_ratio: 2,
            cells_per_unit: 1,
            output_activation: OutputActivation::Sigmoid,
            f_ext: FExt::Gap,
            use_batch_norm: true,
            skip_removal_fraction: 0.0,
            dia_enabled_stages: vec![0, 1],
            classes: 4,
            force_attention_ones: false,
        }
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 1,
            subset: 32,
            test_subset: 16,
            max_steps: 3,
            data: DataSpec::Synth { classes: 4, difficulty: 4.0 },
            ..TrainConfig::desk_default()
        }
    }

    #[test]
    fn lr_schedule_steps_by_gamma() {
        let cfg = TrainConfig {
            schedule: vec![2, 4],
            lr: 0.1,
            gamma: 0.1,
            ..TrainConfig::desk_default()
        };
        assert!((cfg.lr_at_epoch(1) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(2) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(3) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(4) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(5) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(9) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn schedule_must_increase() {
        let cfg = TrainConfig {
            schedule: vec![4, 2],
            ..TrainConfig::desk_default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            gamma: 0.0,
            ..TrainConfig::desk_default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identical_seeds_give_identical_records_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let net_cfg = toy_net_cfg();
        let mut cfg = toy_train_cfg();
        cfg.augment = true; // exercise the augmentation stream too
        let out1 = train(&net_cfg, &cfg, &dir.path().join("a")).unwrap();
        let out2 = train(&net_cfg, &cfg, &dir.path().join("b")).unwrap();
        assert_eq!(out1.record.to_csv(), out2.record.to_csv());
        let ck1 = std::fs::read(out1.checkpoint_path).unwrap();
        let ck2 = std::fs::read(out2.checkpoint_path).unwrap();
        assert_eq!(ck1, ck2);
    }

    #[test]
    fn injected_nan_is_recorded_and_halts() {
        let dir = tempfile::tempdir().unwrap();
        let net_cfg = toy_net_cfg();
        let mut cfg = toy_train_cfg();
        cfg.inject_nan_at_step = 2;
        cfg.max_steps = 10;
        let out = train(&net_cfg, &cfg, dir.path()).unwrap();
        assert!(out.exploded);
        let ev = out.record.explosion.unwrap();
        assert_eq!(ev.step, 2);
        assert_eq!(ev.site, ExplosionSite::Loss);
        // The CSV holds the finite prefix plus the explosion row.
        let csv = out.record.to_csv();
        assert!(csv.contains("explosion"));
        let loss_rows = csv.lines().filter(|l| l.contains(",loss,")).count();
        assert_eq!(loss_rows, 1, "only the pre-explosion loss is recorded");
    }

    #[test]
    fn evaluate_is_deterministic_and_stub_accurate() {
        // Perfect-logit and random-logit stubs exercise the accuracy math.
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let mut perfect = vec![0.0; 40 * 4];
        for (i, &l) in labels.iter().enumerate() {
            perfect[i * 4 + l] = 10.0;
        }
        let logits = Tensor::from_vec(perfect, &[40, 4]);
        assert_eq!(accuracy_from_logits(&logits, &labels), 1.0);

        let mut rng = Rng::new(123);
        let mut random = vec![0.0; 4000 * 4];
        rng.fill_normal(&mut random, 0.0, 1.0);
        let logits = Tensor::from_vec(random, &[4000, 4]);
        let all_labels: Vec<usize> = (0..4000).map(|_| rng.below(4)).collect();
        let acc = accuracy_from_logits(&logits, &all_labels);
        // 1/K within 3 sigma of a binomial(4000, 1/4).
        let sigma = (0.25 * 0.75 / 4000.0_f64).sqrt();
        assert!((acc - 0.25).abs() < 3.0 * sigma, "acc {acc}");
    }

    #[test]
    fn checkpoint_reload_reproduces_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let net_cfg = toy_net_cfg();
        let cfg = toy_train_cfg();
        let out = train(&net_cfg, &cfg, dir.path()).unwrap();

        let (net, stats) = load_checkpoint(&net_cfg, &out.checkpoint_path, 999).unwrap();
        let (_, test_raw) = load_splits(&cfg.data, cfg.seed, cfg.subset, cfg.test_subset).unwrap();
        let test_ds = normalize(&test_raw, &stats);
        let acc1 = evaluate(&net, &test_ds, cfg.batch_size).unwrap();
        let acc2 = evaluate(&net, &test_ds, cfg.batch_size).unwrap();
        assert_eq!(acc1, acc2);
        assert_eq!(out.final_test_accuracy.unwrap(), acc1);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut net_cfg = toy_net_cfg();
        net_cfg.classes = 7;
        let cfg = toy_train_cfg();
        assert!(train(&net_cfg, &cfg, dir.path()).is_err());
    }
}
