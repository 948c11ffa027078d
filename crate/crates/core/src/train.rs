//! Training loop and evaluation driver.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{augment, gen_dataset, load_dataset, stack, Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{argmax_labels, seg_loss};
use crate::metrics::{aggregate, score_sample, MetricTable, SegMask, CSV_HEADER};
use crate::model::Missformer;
use crate::optim::{poly_lr, Sgd};
use crate::params::ParamStore;
use crate::tensor::Tape;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const RESOLVED_FILE: &str = "resolved.toml";

/// Predicted label masks for `samples`, one forward pass per sample.
pub fn predict(
    model: &Missformer,
    params: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<Vec<SegMask>> {
    samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            let x = tape.constant(s.image.clone().reshaped(shape)?);
            let y = model.forward(&mut tape, &p, x)?;
            SegMask::new(s.mask.height, s.mask.width, argmax_labels(tape.value(y)))
        })
        .collect()
}

/// Per-class DSC/HD95/HD100 averaged over `samples`.
pub fn evaluate(
    model: &Missformer,
    params: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<MetricTable> {
    let k = model.cfg.num_classes;
    for s in samples {
        s.mask.check_classes(k)?;
    }
    let preds = predict(model, params, samples)?;
    let scores = preds
        .par_iter()
        .zip(samples)
        .map(|(p, s)| score_sample(p, &s.mask, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&scores, k))
}

/// Evaluates a saved checkpoint.
pub fn evaluate_checkpoint(ck: &Checkpoint, samples: &[Sample]) -> Result<MetricTable> {
    if let Some(s) = samples.first() {
        if s.image.shape()[1..] != [ck.model.height, ck.model.width] {
            return Err(Error::Config(format!(
                "dataset images {:?} do not fit model input {}x{}",
                s.image.shape(),
                ck.model.height,
                ck.model.width
            )));
        }
    }
    let model = Missformer::attach(&ck.model, &ck.params)?;
    evaluate(&model, &ck.params, samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub epochs_run: usize,
    pub best_val_dsc: f64,
    pub final_train: MetricTable,
    pub final_val: Option<MetricTable>,
    /// First iteration count at which training DSC reached the target.
    pub reached_target: Option<usize>,
    pub output: PathBuf,
}

pub fn dataset_for(run: &RunConfig) -> Result<Dataset> {
    match &run.train.data_dir {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            if ds.spec.num_classes != run.model.num_classes {
                return Err(Error::Config(format!(
                    "train.data_dir: dataset has {} classes, model has {}",
                    ds.spec.num_classes, run.model.num_classes
                )));
            }
            Ok(ds)
        }
        None => gen_dataset(&run.data),
    }
}

struct Outputs {
    dir: PathBuf,
    metrics: String,
    loss: String,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            metrics: format!("{CSV_HEADER}\n"),
            loss: "iteration,lr,loss\n".into(),
        })
    }

    fn flush(&self) -> Result<()> {
        fs::write(self.dir.join(METRICS_FILE), &self.metrics)?;
        fs::write(self.dir.join(LOSS_FILE), &self.loss)?;
        Ok(())
    }

    fn checkpoint(
        &self,
        name: &str,
        run: &RunConfig,
        params: &ParamStore<f32>,
        meta: CheckpointMeta,
    ) -> Result<()> {
        let dir = self.dir.join("checkpoints").join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        Checkpoint {
            model: run.model.clone(),
            meta,
            params: params.clone(),
        }
        .save(&dir)
    }
}

/// Runs the full training loop described by `run`, writing metrics,
/// losses, checkpoints, and the resolved config under `run.output.dir`.
pub fn train(run: &RunConfig) -> Result<TrainReport> {
    run.validate()?;
    let data = dataset_for(run)?;
    train_on(run, &data)
}

pub fn train_on(run: &RunConfig, data: &Dataset) -> Result<TrainReport> {
    run.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config(
            "data.train_samples: training set is empty".into(),
        ));
    }
    let mut out = Outputs::new(&run.output.dir)?;
    fs::write(out.dir.join(RESOLVED_FILE), run.to_toml()?)?;

    let tc = &run.train;
    let (model, mut params) = Missformer::build::<f32>(&run.model, tc.seed)?;
    let mut opt = Sgd::new(run.optim.clone(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let per_epoch = data.train.len().div_ceil(tc.batch_size);
    let max_iter = tc.epochs * per_epoch;
    let background = data.spec.intensity(0) as f32;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut losses = Vec::with_capacity(max_iter);
    let mut iter = 0;
    let mut best = f64::NEG_INFINITY;
    let mut reached = None;
    let mut epochs_run = 0;
    let mut last_good = params.clone();

    let eval_point = |epoch: usize,
                      iter: usize,
                      params: &ParamStore<f32>,
                      out: &mut Outputs,
                      best: &mut f64|
     -> Result<(MetricTable, Option<MetricTable>)> {
        let tr = evaluate(&model, params, &data.train)?;
        out.metrics.push_str(&tr.csv_rows(epoch, "train"));
        let val = if data.val.is_empty() {
            None
        } else {
            let v = evaluate(&model, params, &data.val)?;
            out.metrics.push_str(&v.csv_rows(epoch, "val"));
            Some(v)
        };
        let score = val.as_ref().unwrap_or(&tr).mean().dsc;
        let meta = CheckpointMeta {
            epoch,
            iteration: iter,
            mean_dsc: Some(score),
        };
        if score > *best {
            *best = score;
            out.checkpoint("best", run, params, meta.clone())?;
        }
        out.checkpoint("last", run, params, meta)?;
        out.flush()?;
        Ok((tr, val))
    };

    let mut last_eval = None;
    if tc.epochs == 0 {
        last_eval = Some(eval_point(0, 0, &params, &mut out, &mut best)?);
    }
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let lr = poly_lr(iter, max_iter, run.optim.base_lr);
            let batch: Vec<Cow<Sample>> = chunk
                .iter()
                .map(|&i| {
                    if data.spec.augment {
                        Cow::Owned(augment(&data.train[i], background, &mut rng))
                    } else {
                        Cow::Borrowed(&data.train[i])
                    }
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().map(|c| c.as_ref()).collect();
            let (x, labels) = stack(&refs)?;

            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let x = tape.constant(x);
            let logits = model.forward(&mut tape, &p, x)?;
            let loss = seg_loss(&mut tape, logits, &labels)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                out.checkpoint(
                    "last-good",
                    run,
                    &last_good,
                    CheckpointMeta {
                        epoch,
                        iteration: iter,
                        mean_dsc: None,
                    },
                )?;
                out.flush()?;
                return Err(Error::NonFinite(format!(
                    "loss is {lv} at iteration {iter}"
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Cow<[f32]>> = p
                .vars()
                .iter()
                .zip(params.iter())
                .map(|(&v, (_, t))| {
                    tape.grad(v)
                        .map(Cow::Borrowed)
                        .unwrap_or_else(|| Cow::Owned(vec![0.0; t.numel()]))
                })
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_ref()).collect();
            last_good.clone_from(&params);
            opt.step(&mut params, &grad_refs, lr)?;
            out.loss.push_str(&format!("{iter},{lr:.8},{lv:.8}\n"));
            losses.push(lv);
            iter += 1;
        }
        epochs_run = epoch;
        if epoch % tc.eval_every == 0 || epoch == tc.epochs {
            let (tr, val) = eval_point(epoch, iter, &params, &mut out, &mut best)?;
            let hit = tc.target_dsc.is_some_and(|t| tr.mean().dsc >= t);
            last_eval = Some((tr, val));
            if hit {
                reached = Some(iter);
                break;
            }
        }
    }
    let (final_train, final_val) = last_eval.expect("at least one evaluation runs");
    Ok(TrainReport {
        losses,
        iterations: iter,
        epochs_run,
        best_val_dsc: best,
        final_train,
        final_val,
        reached_target: reached,
        output: out.dir.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use crate::model::ModelConfig;

    fn micro_run(dir: &Path, epochs: usize) -> RunConfig {
        let mut run = RunConfig {
            model: ModelConfig::micro(),
            data: SynthSpec {
                height: 32,
                width: 32,
                train_samples: 4,
                val_samples: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        run.model.bridge.depth = 1;
        run.model.blocks_per_stage = 1;
        run.train.epochs = epochs;
        run.train.eval_every = 1;
        run.output.dir = dir.to_path_buf();
        run
    }

    #[test]
    fn zero_epochs_checkpoint_is_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let run = micro_run(dir.path(), 0);
        let rep = train(&run).unwrap();
        assert_eq!(rep.iterations, 0);
        let ck = Checkpoint::load(&dir.path().join("checkpoints/last")).unwrap();
        let (_, init) = Missformer::build::<f32>(&run.model, run.train.seed).unwrap();
        for ((_, a), (_, b)) in ck.params.iter().zip(init.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn short_run_is_deterministic() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let r1 = train(&micro_run(d1.path(), 2)).unwrap();
        let r2 = train(&micro_run(d2.path(), 2)).unwrap();
        assert_eq!(r1.iterations, 2);
        assert_eq!(r1.losses, r2.losses);
        let m1 = fs::read(d1.path().join(METRICS_FILE)).unwrap();
        assert_eq!(m1, fs::read(d2.path().join(METRICS_FILE)).unwrap());
        assert_eq!(
            String::from_utf8(m1).unwrap().lines().count(),
            1 + 2 * 2 * 4
        );
        assert!(d1.path().join("checkpoints/best/manifest.toml").exists());
        let resolved = fs::read_to_string(d1.path().join(RESOLVED_FILE)).unwrap();
        assert!(resolved.contains("ffn_steps = 1"));
    }

    #[test]
    fn ground_truth_and_background_predictions() {
        let ds = gen_dataset(&SynthSpec {
            height: 32,
            width: 32,
            ..Default::default()
        })
        .unwrap();
        let scores: Vec<_> = ds
            .train
            .iter()
            .map(|s| score_sample(&s.mask, &s.mask, 4).unwrap())
            .collect();
        let t = aggregate(&scores, 4);
        assert!(t
            .classes
            .iter()
            .all(|c| c.dsc == 1.0 && c.hd95 == 0.0 && c.hd100 == 0.0));
        let zeros = SegMask::new(32, 32, vec![0; 1024]).unwrap();
        let scores: Vec<_> = ds
            .train
            .iter()
            .map(|s| score_sample(&zeros, &s.mask, 4).unwrap())
            .collect();
        assert!(aggregate(&scores, 4).classes.iter().all(|c| c.dsc == 0.0));
    }

    #[test]
    fn evaluation_ignores_sample_order() {
        let run = micro_run(Path::new("/unused"), 0);
        let ds = gen_dataset(&run.data).unwrap();
        let (m, p) = Missformer::build::<f32>(&run.model, 1).unwrap();
        let a = evaluate(&m, &p, &ds.train).unwrap();
        let mut rev = ds.train.clone();
        rev.reverse();
        assert_eq!(a, evaluate(&m, &p, &rev).unwrap());
    }
}
