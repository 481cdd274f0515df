use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::heads::{CrdHeads, HintHead};
use super::losses::{loss_ce, loss_crd, loss_hint, loss_kl, make_pseudo_soft_labels, soft_cross_entropy};
use super::optim::Adadelta;
use super::{DistillConfig, Method, TrainAugment};
use crate::data::{augment, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{build_mnist_net, Mode, Model, TAP_PENULTIMATE};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::{Tape, Tensor};

/// One row of the per-epoch log. Loss terms are unweighted batch means;
/// `train_acc` is measured on the training batches as seen (train mode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_distill: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The trained network, in eval mode.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub hint_head: Option<HintHead>,
    pub crd_heads: Option<CrdHeads>,
}

pub fn write_epoch_csv(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn augment_batch(
    batch: Tensor<f32>,
    indices: &[usize],
    aug: &TrainAugment,
    seed: u64,
    epoch: usize,
) -> Result<Tensor<f32>> {
    let shape = batch.shape().to_vec();
    let item: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(batch.len());
    for (b, &idx) in indices.iter().enumerate() {
        let mut img = Tensor::new(shape[1..].to_vec(), batch.data()[b * item..(b + 1) * item].to_vec())?;
        let mut rng = rng_for(seed, &[stream::AUGMENT, epoch as u64, idx as u64]);
        for &mode in &aug.modes {
            img = augment(&img, &aug.spec, mode, &mut rng)?;
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(shape, data)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    100.0 * pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Top-1 accuracy in percent, evaluating at the model's input channels.
pub(crate) fn evaluate(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    let mut preds = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        let batch = ds.batch(chunk, model.in_channels())?;
        preds.extend(model.forward(&batch)?.argmax_rows());
    }
    Ok(accuracy(&preds, ds.labels()))
}

fn tap_shape(model: &Model, tap: &str) -> Result<Vec<usize>> {
    let [c, h, w] = model.input_shape();
    let acts = model.forward_with_taps(&Tensor::zeros([1, c, h, w]), &[tap])?;
    Ok(acts.feature(tap)?.shape().to_vec())
}

/// Teacher penultimate features for every training item, `M×d`. Exact
/// because the teacher is frozen.
fn teacher_feature_bank(teacher: &Model, ds: &LabeledDataset) -> Result<Tensor<f32>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in idx.chunks(256) {
        let batch = ds.batch(chunk, teacher.in_channels())?;
        let acts = teacher.forward_with_taps(&batch, &[TAP_PENULTIMATE])?;
        let f = acts.feature(TAP_PENULTIMATE)?;
        width = f.shape()[1];
        data.extend_from_slice(f.data());
    }
    Tensor::new([ds.len(), width], data)
}

/// For each anchor, `n` item indices whose class differs from the anchor's.
fn sample_negatives(labels: &[usize], anchors: &[usize], n: usize, rng: &mut crate::rng::Rng) -> Result<Vec<usize>> {
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::Input("CRD needs at least two classes in the training set".into()));
    }
    let mut out = Vec::with_capacity(anchors.len() * n);
    for &a in anchors {
        for _ in 0..n {
            loop {
                let j = rng.random_range(0..labels.len());
                if labels[j] != labels[a] {
                    out.push(j);
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Trains a fresh network on `train_set`.
///
/// Initialization, batch order and dropout masks depend only on the seed,
/// so an independent and a distilled run with equal seeds start from the
/// same weights and see the same batches. The teacher is used in eval mode
/// and receives no gradients. With `test_set`, test accuracy is logged per
/// epoch.
pub fn train(
    config: &DistillConfig,
    train_set: &LabeledDataset,
    teacher: Option<&Model>,
    test_set: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    crate::alloc::retain_large_buffers();
    config.validate()?;
    let method = config.method;
    let teacher = match (method.needs_teacher(), teacher) {
        (true, None) => {
            return Err(Error::Config(format!("method `{}` needs a teacher", method.name())))
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!("method `{}` takes no teacher", method.name())))
        }
        (_, t) => t.map(|t| {
            let mut t = t.clone();
            t.set_mode(Mode::Eval);
            t
        }),
    };
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let num_classes = train_set.num_classes();
    if let Some(t) = &teacher {
        if t.num_classes() != num_classes {
            return Err(Error::Config(format!(
                "teacher predicts {} classes, data has {num_classes}",
                t.num_classes()
            )));
        }
    }
    let channels = config.in_channels.unwrap_or_else(|| {
        train_set
            .channels()
            .max(teacher.as_ref().map_or(0, |t| t.in_channels()))
    });
    if let Some(t) = teacher.as_ref().filter(|t| t.in_channels() != channels) {
        return Err(Error::Config(format!(
            "student takes {channels} input channels but the teacher takes {}",
            t.in_channels()
        )));
    }
    let seed = config.seed;
    let mut model = build_mnist_net(channels, num_classes, seed)?;
    let m = train_set.len();

    let mut hint_head = None;
    let mut crd_heads = None;
    let mut bank = None;
    if let Some(t) = &teacher {
        match method {
            Method::Hint => {
                let ts = tap_shape(t, &config.hint_tap)?;
                let ss = tap_shape(&model, &config.hint_tap)?;
                hint_head = Some(HintHead::new(ss[1], ts[1], ss.len() == 4, seed));
            }
            Method::Crd => {
                if config.crd_negatives >= m {
                    return Err(Error::Config(format!(
                        "crd_negatives ({}) must be below the training-set size ({m})",
                        config.crd_negatives
                    )));
                }
                let ts = tap_shape(t, TAP_PENULTIMATE)?;
                let ss = tap_shape(&model, TAP_PENULTIMATE)?;
                crd_heads = Some(CrdHeads::new(ss[1], ts[1], config.crd_dim, seed));
                bank = Some(teacher_feature_bank(t, train_set)?);
            }
            _ => {}
        }
    }

    let mut opt = Adadelta::new(&config.optimizer);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..m).collect();
    for epoch in 0..config.epochs {
        model.set_mode(Mode::Train);
        order.sort_unstable();
        order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
        let lr = config.optimizer.lr_at(epoch);
        let (mut sum_cls, mut sum_distill, mut correct) = (0.0, 0.0, 0usize);
        let steps = m.div_ceil(config.batch_size);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let mut batch = train_set.batch(idx, channels)?;
            if let Some(aug) = &config.augment {
                batch = augment_batch(batch, idx, aug, seed, epoch)?;
            }

            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let x = tape.constant(batch.clone());
            let taps: Vec<&str> = match method {
                Method::Hint => vec![config.hint_tap.as_str()],
                Method::Crd => vec![TAP_PENULTIMATE],
                _ => vec![],
            };
            let dropout_seed = derive_seed(seed, &[stream::DROPOUT, epoch as u64, step as u64]);
            let acts = model.forward_tape(&bound, x, &taps, dropout_seed)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels()[i]).collect();
            let pred = acts.logits.value().argmax_rows();
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();

            let ce = loss_ce(acts.logits, &train_set.one_hot(idx))?;
            let mut head_vars = Vec::new();
            let (distill, weight) = match method {
                Method::Independent => (None, 0.0),
                Method::Kl => {
                    let zt = teacher.as_ref().unwrap().forward(&batch)?;
                    (Some(loss_kl(acts.logits, &zt, config.tau)?), config.alpha)
                }
                Method::PseudoSoft => {
                    let mut targets = Vec::with_capacity(idx.len() * num_classes);
                    for (r, &i) in idx.iter().enumerate() {
                        let y = train_set.one_hot(&[i]);
                        let mut rng = rng_for(seed, &[stream::SOFT_LABELS, epoch as u64, i as u64]);
                        let p = make_pseudo_soft_labels(&y, config.pseudo_noise_sd, config.pseudo_tau, &mut rng)?;
                        debug_assert_eq!(targets.len(), r * num_classes);
                        targets.extend_from_slice(p.data());
                    }
                    let p = Tensor::new([idx.len(), num_classes], targets)?;
                    let tau = config.tau;
                    let l = soft_cross_entropy(acts.logits, &p, tau)?.scale(tau * tau);
                    (Some(l), config.alpha)
                }
                Method::Hint => {
                    let t = teacher.as_ref().unwrap();
                    let ft = t.forward_with_taps(&batch, &[config.hint_tap.as_str()])?;
                    let head = hint_head.as_ref().unwrap().bind(&tape, true);
                    head_vars.extend(head.vars());
                    let fs = *acts.feature(&config.hint_tap)?;
                    (Some(loss_hint(fs, ft.feature(&config.hint_tap)?, &head)?), config.beta)
                }
                Method::Crd => {
                    let t = teacher.as_ref().unwrap();
                    let bank = bank.as_ref().unwrap();
                    let positives = if config.augment.is_some() {
                        let acts = t.forward_with_taps(&batch, &[TAP_PENULTIMATE])?;
                        acts.feature(TAP_PENULTIMATE)?.clone()
                    } else {
                        bank.gather(idx)
                    };
                    let mut rng = rng_for(seed, &[stream::NEGATIVES, epoch as u64, step as u64]);
                    let neg_idx = sample_negatives(train_set.labels(), idx, config.crd_negatives, &mut rng)?;
                    let heads = crd_heads.as_ref().unwrap().bind(&tape, true);
                    head_vars.extend(heads.vars());
                    let s = heads.embed_student(*acts.feature(TAP_PENULTIMATE)?)?;
                    let tp = heads.embed_teacher(tape.constant(positives))?;
                    let tn = heads.embed_teacher(tape.constant(bank.gather(&neg_idx)))?;
                    (Some(loss_crd(s, tp, tn, config.tau, m)?), config.beta)
                }
            };
            sum_cls += ce.value().item()? as f64;
            let total = match distill {
                Some(d) => {
                    sum_distill += d.value().item()? as f64;
                    ce.scale(config.gamma).add(d.scale(weight))?
                }
                None => ce.scale(config.gamma),
            };
            tape.backward(total)?;

            let mut grads: Vec<Option<Tensor<f32>>> = bound.flat().map(|v| v.grad()).collect();
            grads.extend(head_vars.iter().map(|v| v.grad()));
            let mut params: Vec<&mut Tensor<f32>> = model.params_mut().collect();
            if let Some(h) = hint_head.as_mut() {
                params.extend(h.params_mut());
            }
            if let Some(h) = crd_heads.as_mut() {
                params.extend(h.params_mut());
            }
            opt.step(&mut params, &grads, lr);
            if step % 100 == 0 {
                log::debug!("{} epoch {epoch} step {step}/{steps}", method.name());
            }
        }
        model.set_mode(Mode::Eval);
        let steps = steps.max(1) as f64;
        let test_acc = test_set.map(|t| evaluate(&model, t)).transpose()?;
        let row = EpochLog {
            epoch,
            loss_cls: sum_cls / steps,
            loss_distill: sum_distill / steps,
            train_acc: 100.0 * correct as f64 / m as f64,
            test_acc,
        };
        log::info!(
            "{} epoch {epoch}: loss_cls {:.4} loss_distill {:.4} train_acc {:.2} test_acc {:?}",
            method.name(),
            row.loss_cls,
            row.loss_distill,
            row.train_acc,
            row.test_acc
        );
        log.push(row);
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        model,
        log,
        hint_head,
        crd_heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Two classes: a bright left half versus a bright right half.
    pub(crate) fn toy_set(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = rng_for(seed, &[]);
        let mut data = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            for _y in 0..28 {
                for x in 0..28 {
                    let lit = (x < 14) == (label == 0);
                    let v: f32 = if lit { 0.6 } else { 0.1 };
                    data.push((v + rng.random_range(0.0..0.3f32)).min(1.0));
                }
            }
            labels.push(label);
        }
        LabeledDataset::new(Tensor::new([n, 1, 28, 28], data).unwrap(), labels, 2).unwrap()
    }

    fn quick(method: Method) -> DistillConfig {
        DistillConfig {
            epochs: 1,
            batch_size: 16,
            crd_negatives: 4,
            ..DistillConfig::preset(method)
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = toy_set(8, 0);
        let cfg = DistillConfig {
            epochs: 0,
            ..DistillConfig::default()
        };
        let out = train(&cfg, &ds, None, None).unwrap();
        assert_eq!(out.model, build_mnist_net(1, 2, cfg.seed).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn teacher_presence_is_checked() {
        let ds = toy_set(8, 0);
        let err = train(&quick(Method::Kl), &ds, None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let t = build_mnist_net(1, 2, 0).unwrap();
        assert!(train(&quick(Method::Independent), &ds, Some(&t), None).is_err());
    }

    #[test]
    fn every_method_runs_and_is_deterministic() {
        let ds = toy_set(32, 1);
        let teacher = train(&quick(Method::Independent), &ds, None, Some(&ds)).unwrap().model;
        for method in [Method::Kl, Method::Hint, Method::Crd, Method::PseudoSoft] {
            let t = method.needs_teacher().then_some(&teacher);
            let a = train(&quick(method), &ds, t, None).unwrap();
            let b = train(&quick(method), &ds, t, None).unwrap();
            assert_eq!(a.model, b.model, "{method:?}");
            assert_eq!(a.log, b.log);
            assert!(a.log[0].loss_distill > 0.0, "{method:?}");
            assert!(a.log[0].loss_cls.is_finite());
        }
    }

    #[test]
    fn learns_a_separable_task() {
        let ds = toy_set(64, 2);
        let cfg = DistillConfig {
            epochs: 3,
            batch_size: 16,
            ..DistillConfig::default()
        };
        let out = train(&cfg, &ds, None, Some(&toy_set(32, 3))).unwrap();
        assert!(out.log.last().unwrap().test_acc.unwrap() > 90.0, "{:?}", out.log);
    }

    #[test]
    fn negatives_have_other_classes() {
        let labels = [0, 1, 2, 0, 1, 2];
        let mut rng = rng_for(0, &[]);
        let neg = sample_negatives(&labels, &[0, 4], 5, &mut rng).unwrap();
        assert!(neg[..5].iter().all(|&j| labels[j] != 0));
        assert!(neg[5..].iter().all(|&j| labels[j] != 1));
        assert!(sample_negatives(&[1, 1], &[0], 1, &mut rng).is_err());
    }

    #[test]
    fn csv_log_has_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let row = EpochLog {
            epoch: 0,
            loss_cls: 0.5,
            loss_distill: 0.25,
            train_acc: 90.0,
            test_acc: None,
        };
        write_epoch_csv(&[row], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,loss_cls,loss_distill,train_acc,test_acc\n0,0.5,0.25,90.0,\n");
    }
}
