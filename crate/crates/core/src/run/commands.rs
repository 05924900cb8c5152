//! Reproducible runs: data preparation, training, evaluation, prediction.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::dataset::{write_palette_png, write_split};
use crate::data::{
    augment, class_frequencies, class_weights, generate_scenes, load_dataset, read_image,
    resize_bilinear, resize_nearest, IouReport, SamplePair,
};
use crate::error::{Error, Result};
use crate::model::{
    build_optimizer, calibrate_batchnorm, evaluate_model, predict, Batch, Segmenter, TrainState,
    Trainer,
};
use crate::numerics::Rng;
use crate::run::checkpoint::Checkpoint;
use crate::run::config::{DataSource, RunConfig};

/// Independent random streams derived from the run seed.
const STREAM_MODEL: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[SamplePair]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

/// Synthetic scenes divided by the split ratios, in generation order.
pub fn synthetic_splits(cfg: &RunConfig) -> Result<Splits> {
    let all = generate_scenes(
        &cfg.data.scene,
        &Rng::new(cfg.seed).split(STREAM_DATA),
        cfg.data.count,
    )?;
    let (tr, va, _) = cfg.data.split.counts(all.len());
    let mut it = all.into_iter();
    Ok(Splits {
        train: it.by_ref().take(tr).collect(),
        val: it.by_ref().take(va).collect(),
        test: it.collect(),
    })
}

fn directory_split(root: &Path, split: &str) -> Result<Vec<SamplePair>> {
    if !root.join(split).exists() {
        return Ok(Vec::new());
    }
    load_dataset(root, split)?.load_all()
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    match cfg.data.source {
        DataSource::Synthetic => synthetic_splits(cfg),
        DataSource::Directory => {
            let root = cfg
                .data
                .root
                .as_deref()
                .ok_or_else(|| Error::config("data.root is required"))?;
            if !root.is_dir() {
                return Err(Error::io(
                    root,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
                ));
            }
            Ok(Splits {
                train: directory_split(root, "train")?,
                val: directory_split(root, "val")?,
                test: directory_split(root, "test")?,
            })
        }
    }
}

/// Indices of the `bs` samples used at `step`: a fresh permutation per epoch,
/// so any step's batch is a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, bs: usize, n: usize) -> Vec<usize> {
    let order = Rng::new(seed).split(STREAM_ORDER);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..bs as u64)
        .map(|i| {
            let g = step * bs as u64 + i;
            let (epoch, pos) = (g / n as u64, (g % n as u64) as usize);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                order.split(epoch).shuffle(&mut perm);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos]
        })
        .collect()
}

pub fn new_trainer(cfg: &RunConfig, train: &[SamplePair], max_iter: u64) -> Result<Trainer<f32>> {
    let freqs = class_frequencies(train.iter().map(|s| &s.labels), cfg.model.num_classes)?;
    let model = Segmenter::<f32>::new(&cfg.model, &Rng::new(cfg.seed).split(STREAM_MODEL))?;
    let optimizer = build_optimizer(&model, &cfg.optimizer_config())?;
    Ok(Trainer {
        model,
        optimizer,
        state: TrainState {
            step: 0,
            max_iter,
            base_lr: cfg.train.base_lr,
            power: cfg.train.power,
            rng: Rng::new(cfg.seed),
        },
        class_weights: class_weights(&freqs),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    /// Completed optimizer steps.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_train_miou: f64,
    pub trainer: Trainer<f32>,
    pub splits: Splits,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.cmss"))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_line(w: &mut impl Write, path: &Path, v: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train per `cfg` (already resolved), optionally resuming from a checkpoint.
///
/// Writes `config.json`, a `metrics.jsonl` stream and checkpoints under
/// `cfg.output_dir`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    if splits.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let max_iter = cfg.max_iter(splits.train.len());
    let mut trainer = new_trainer(cfg, &splits.train, max_iter)?;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        let mut a = ckpt.manifest.config.clone();
        let mut b = cfg.clone();
        a.output_dir = PathBuf::new();
        b.output_dir = PathBuf::new();
        if a.model != b.model || a.train.optimizer != b.train.optimizer {
            return Err(Error::config(
                "resume checkpoint was trained with a different model or optimizer",
            ));
        }
        ckpt.restore(&mut trainer)?;
        trainer.state.max_iter = max_iter;
        log::info!(
            "resumed from {} at step {}",
            path.display(),
            trainer.state.step
        );
    }

    let out = &cfg.output_dir;
    create_dir(&out.join("checkpoints"))?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics_path = out.join("metrics.jsonl");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);

    let t = &cfg.train;
    let aug_rng = Rng::new(cfg.seed).split(STREAM_AUGMENT);
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut final_miou = None;
    while trainer.state.step < max_iter {
        let step = trainer.state.step;
        let idx = batch_indices(cfg.seed, step, t.batch_size, splits.train.len());
        let samples = idx
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut r = aug_rng.split(step * t.batch_size as u64 + i as u64);
                augment(&splits.train[k], &mut r, &t.augment)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&SamplePair> = samples.iter().collect();
        let batch = Batch::from_samples(&refs, t.zero_thermal)?;
        let rec = trainer.train_step(&batch)?;
        let done = trainer.state.step;
        let mut record = MetricRecord {
            step: done,
            lr: rec.lr,
            loss: rec.loss,
            miou: None,
        };
        if done % t.checkpoint_every == 0 || done == max_iter {
            if t.calibrate_bn {
                calibrate_batchnorm(&mut trainer.model, &splits.train, t.zero_thermal)?;
            }
            let (rep, _) = evaluate_model(
                &mut trainer.model,
                &splits.train,
                t.batch_size,
                t.zero_thermal,
            )?;
            record.miou = Some(rep.miou);
            final_miou = Some(rep.miou);
            let path = checkpoint_path(out, done);
            Checkpoint::capture(&trainer, cfg, Some(rep.miou)).save(&path)?;
            checkpoints.push(path);
            log::info!(
                "step {done}/{max_iter} loss {:.4} train mIoU {:.4}",
                rec.loss,
                rep.miou
            );
        } else {
            log::debug!(
                "step {done}/{max_iter} lr {:.3e} loss {:.4}",
                rec.lr,
                rec.loss
            );
        }
        write_line(&mut metrics, &metrics_path, &record)?;
        records.push(record);
    }
    let final_train_miou = match final_miou {
        Some(m) => m,
        None => {
            evaluate_model(
                &mut trainer.model,
                &splits.train,
                t.batch_size,
                t.zero_thermal,
            )?
            .0
            .miou
        }
    };
    Ok(TrainOutcome {
        records,
        checkpoints,
        final_train_miou,
        trainer,
        splits,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub split: String,
    pub samples: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Evaluate a checkpoint on a split of `data_root`, or of its own configured data when `None`.
pub fn evaluate(checkpoint: &Path, data_root: Option<&Path>, split: &str) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.manifest.config;
    let samples = match data_root {
        Some(root) => load_dataset(root, split)?.load_all()?,
        None => prepare_data(cfg)?.get(split)?.to_vec(),
    };
    if samples.is_empty() {
        return Err(Error::Dataset(format!("split '{split}' has no samples")));
    }
    let k = cfg.model.num_classes;
    let mut trainer = ckpt.to_trainer(vec![1.0; k])?;
    let (rep, _): (IouReport, _) = evaluate_model(
        &mut trainer.model,
        &samples,
        cfg.train.batch_size,
        cfg.train.zero_thermal,
    )?;
    Ok(EvalReport {
        checkpoint: checkpoint.to_owned(),
        split: split.to_owned(),
        samples: samples.len(),
        per_class_iou: rep.per_class,
        miou: rep.miou,
    })
}

/// Stable class palette for prediction images; class `k` uses entry `k % 16`.
pub const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
];

/// Predict a class map for one image pair and write it as a palette PNG.
///
/// Inputs must have sides divisible by 32 unless `auto_resize` is set, in
/// which case they are resized to the nearest multiple of 32 and the
/// prediction is resized back with nearest-neighbour sampling.
pub fn predict_files(
    checkpoint: &Path,
    rgb: &Path,
    thermal: &Path,
    out: &Path,
    auto_resize: bool,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = &ckpt.manifest.config;
    let mut trainer = ckpt.to_trainer(vec![1.0; cfg.model.num_classes])?;
    let rgb = read_image(rgb)?;
    let mut thermal = read_image(thermal)?;
    if rgb.shape() != thermal.shape() {
        return Err(Error::dim("predict inputs", rgb.shape(), thermal.shape()));
    }
    if cfg.train.zero_thermal {
        thermal.fill(0.0);
    }
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let fit = |n: usize| (n.div_ceil(32).max(1)) * 32;
    let labels = if auto_resize && (h % 32 != 0 || w % 32 != 0) {
        let (ph, pw) = (fit(h), fit(w));
        let small = predict(
            &mut trainer.model,
            &resize_bilinear(&rgb, ph, pw)?,
            &resize_bilinear(&thermal, ph, pw)?,
        )?;
        resize_nearest(&small, h, w)
    } else {
        predict(&mut trainer.model, &rgb, &thermal)?
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_palette_png(&labels, &PALETTE, out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneratedDataset<'a> {
    pub seed: u64,
    pub count: usize,
    pub splits: SplitCounts,
    pub scene: &'a crate::data::SceneSpec,
}

/// Write `count` synthetic scenes to `root/{train,val,test}` plus `spec.json`.
pub fn gen_data(cfg: &RunConfig, root: &Path, count: usize) -> Result<()> {
    cfg.data.scene.validate()?;
    let mut cfg = cfg.clone();
    cfg.data.count = count;
    let splits = synthetic_splits(&cfg)?;
    for name in SPLITS {
        write_split(root, name, splits.get(name)?)?;
    }
    let info = GeneratedDataset {
        seed: cfg.seed,
        count,
        splits: SplitCounts {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
        scene: &cfg.data.scene,
    };
    let path = root.join("spec.json");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &info)?;
    Ok(())
}
