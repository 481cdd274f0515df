use super::{all_items, predict_items, ProbeReport, Record};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Model;

/// Top-1 accuracy in percent under the `correct` key.
pub fn accuracy(model: &Model, ds: &LabeledDataset) -> Result<ProbeReport> {
    let items = all_items(ds);
    let pred = predict_items(model, ds, &items)?;
    let records = items
        .iter()
        .map(|&i| {
            let y = ds.labels()[i];
            Record::new(i, "correct", (pred[i] == y) as u8 as f64).with_predictions(pred[i], y)
        })
        .collect();
    Ok(ProbeReport::from_records(
        "accuracy",
        "correct",
        100.0,
        records,
        serde_json::Value::Null,
        0,
    ))
}

/// Top-1 accuracy in percent per group (`group:<g>`) and over all items
/// (`overall`, the summary). Groups with no items do not appear.
pub fn group_accuracy(model: &Model, ds: &LabeledDataset) -> Result<ProbeReport> {
    let groups = ds
        .groups()
        .ok_or_else(|| Error::Input("group_accuracy needs a dataset with groups".into()))?
        .to_vec();
    let items = all_items(ds);
    let pred = predict_items(model, ds, &items)?;
    let mut records = Vec::with_capacity(2 * items.len());
    for &i in &items {
        let y = ds.labels()[i];
        let hit = (pred[i] == y) as u8 as f64;
        records.push(Record::new(i, format!("group:{}", groups[i]), hit).with_predictions(pred[i], y));
        records.push(Record::new(i, "overall", hit).with_predictions(pred[i], y));
    }
    Ok(ProbeReport::from_records(
        "group_accuracy",
        "overall",
        100.0,
        records,
        serde_json::Value::Null,
        0,
    ))
}

/// Fraction of cue-conflict decisions that follow shape: among items whose
/// prediction is the shape label or the texture (secondary) label, the share
/// matching shape. Degenerate when no item qualifies.
pub fn shape_bias(model: &Model, cue_conflict: &LabeledDataset) -> Result<ProbeReport> {
    let texture = cue_conflict
        .secondary_labels()
        .ok_or_else(|| Error::Input("shape_bias needs a dataset with secondary labels".into()))?
        .to_vec();
    let items = all_items(cue_conflict);
    let pred = predict_items(model, cue_conflict, &items)?;
    let mut records = Vec::new();
    for &i in &items {
        let shape = cue_conflict.labels()[i];
        let value = if pred[i] == shape {
            1.0
        } else if pred[i] == texture[i] {
            0.0
        } else {
            continue;
        };
        records.push(Record::new(i, "shape", value).with_predictions(pred[i], shape));
    }
    Ok(ProbeReport::from_records(
        "shape_bias",
        "shape",
        1.0,
        records,
        serde_json::Value::Null,
        0,
    ))
}
