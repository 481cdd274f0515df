use serde::{Deserialize, Serialize};

use super::{all_items, ProbeReport, Record};
use crate::data::LabeledDataset;
use crate::distill::loss_ce;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::{Tape, Tensor};

/// Iterative FGSM settings: `k` signed-gradient steps of size `alpha`
/// inside an L∞ ball of radius `epsilon` (pixel units in `[0,1]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub k: usize,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epsilon: 0.15,
            alpha: 0.15 / 4.0,
            k: 5,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.alpha > 0.0 && self.k >= 1) {
            return Err(Error::Parameter(format!(
                "need epsilon >= 0, alpha > 0, k >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

fn next_down(v: f32) -> f32 {
    if v > 0.0 {
        f32::from_bits(v.to_bits() - 1)
    } else if v == 0.0 {
        -f32::from_bits(1)
    } else {
        f32::from_bits(v.to_bits() + 1)
    }
}

fn next_up(v: f32) -> f32 {
    -next_down(-v)
}

/// Per-pixel box `[I−ε, I+ε] ∩ [0,1]`, tightened so that every f32 inside
/// it is within ε of `I` when measured exactly.
fn clip_box(image: f32, eps: f64) -> (f32, f32) {
    let x = image as f64;
    let mut hi = ((x + eps) as f32).min(1.0);
    while hi as f64 - x > eps {
        hi = next_down(hi);
    }
    let mut lo = ((x - eps) as f32).max(0.0);
    while x - lo as f64 > eps {
        lo = next_up(lo);
    }
    (lo.min(image), hi.max(image))
}

/// Iterative FGSM on a batch (`B×C×H×W`) against cross-entropy on the true
/// labels, with the model in eval mode. The result never leaves
/// `[I−ε, I+ε] ∩ [0,1]`.
pub fn ifgsm_batch(model: &Model, images: &Tensor<f32>, labels: &[usize], cfg: &AdvConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let b = images.shape().first().copied().unwrap_or(0);
    if labels.len() != b {
        return Err(Error::dim("ifgsm", "0 (batch)", b, labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::Parameter(format!("label {l} out of range")));
    }
    if cfg.epsilon == 0.0 || b == 0 {
        return Ok(images.clone());
    }
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let boxes: Vec<(f32, f32)> = images.data().iter().map(|&v| clip_box(v, cfg.epsilon)).collect();
    let mut onehot = Tensor::<f32>::zeros([b, model.num_classes()]);
    for (r, &l) in labels.iter().enumerate() {
        onehot.data_mut()[r * model.num_classes() + l] = 1.0;
    }
    let alpha = cfg.alpha as f32;
    let mut x = images.clone();
    for _ in 0..cfg.k {
        let tape = Tape::new();
        let bound = eval.bind(&tape, false);
        let input = tape.leaf(x.clone(), true);
        let logits = eval.forward_tape(&bound, input, &[], 0)?.logits;
        loss_ce(logits, &onehot)?.backward()?;
        let grad = input.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        for ((v, &g), &(lo, hi)) in x.data_mut().iter_mut().zip(grad.data()).zip(&boxes) {
            let step = if g > 0.0 {
                alpha
            } else if g < 0.0 {
                -alpha
            } else {
                0.0
            };
            *v = (*v + step).clamp(lo, hi);
        }
    }
    Ok(x)
}

/// Single-image form of [`ifgsm_batch`] for a `C×H×W` image.
pub fn ifgsm_attack(model: &Model, image: &Tensor<f32>, true_label: usize, cfg: &AdvConfig) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(shape)?;
    ifgsm_batch(model, &batch, &[true_label], cfg)?.reshape(image.shape().to_vec())
}

/// Attacks `target` on the items it classifies correctly, keeps the pairs
/// whose target prediction flips, and for each victim reports the percentage
/// of kept pairs on which the victim's prediction changes too.
///
/// Metrics: `target` (fooling rate of the attacked model) and
/// `victim:<name>`; the summary is the first victim's rate and is degenerate
/// when no pair was kept.
pub fn fooling_rates(
    target: &Model,
    victims: &[(&str, &Model)],
    ds: &LabeledDataset,
    cfg: &AdvConfig,
) -> Result<ProbeReport> {
    cfg.validate()?;
    let channels = target.in_channels();
    if let Some((name, _)) = victims.iter().find(|(_, v)| v.input_shape() != target.input_shape()) {
        return Err(Error::dim(
            "fooling_rates",
            format!("victim `{name}` input"),
            format!("{:?}", target.input_shape()),
            "different",
        ));
    }
    let mut records = Vec::new();
    for chunk in all_items(ds).chunks(128) {
        let clean = ds.batch(chunk, channels)?;
        let clean_pred = target.forward(&clean)?.argmax_rows();
        let hit: Vec<usize> = (0..chunk.len())
            .filter(|&r| clean_pred[r] == ds.labels()[chunk[r]])
            .collect();
        if hit.is_empty() {
            continue;
        }
        let items: Vec<usize> = hit.iter().map(|&r| chunk[r]).collect();
        let clean = clean.gather(&hit);
        let labels: Vec<usize> = items.iter().map(|&i| ds.labels()[i]).collect();
        let adv = ifgsm_batch(target, &clean, &labels, cfg)?;
        let adv_pred = target.forward(&adv)?.argmax_rows();
        let kept: Vec<usize> = (0..items.len()).filter(|&r| adv_pred[r] != labels[r]).collect();
        for r in 0..items.len() {
            let fooled = adv_pred[r] != labels[r];
            records.push(
                Record::new(items[r], "target", fooled as u8 as f64).with_predictions(adv_pred[r], labels[r]),
            );
        }
        if kept.is_empty() {
            continue;
        }
        let (kc, ka) = (clean.gather(&kept), adv.gather(&kept));
        for (name, victim) in victims {
            let before = victim.forward(&kc)?.argmax_rows();
            let after = victim.forward(&ka)?.argmax_rows();
            for (j, &r) in kept.iter().enumerate() {
                let changed = after[j] != before[j];
                records.push(
                    Record::new(items[r], format!("victim:{name}"), changed as u8 as f64)
                        .with_predictions(after[j], before[j]),
                );
            }
        }
    }
    let summary_key = victims
        .first()
        .map_or("target".to_string(), |(n, _)| format!("victim:{n}"));
    Ok(ProbeReport::from_records(
        "fooling_rates",
        summary_key,
        100.0,
        records,
        serde_json::to_value(cfg)?,
        0,
    ))
}
