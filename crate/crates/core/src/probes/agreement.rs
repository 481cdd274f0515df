use std::fmt;

use super::{all_items, predict_items, ProbeReport, Record};
use crate::data::{augment, AugmentMode, AugmentSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{grad_cam_batch, Model};
use crate::rng::{rng_for, stream, Rng};
use crate::tensor::Tensor;

type PairFn = dyn Fn(&Tensor<f32>, &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> + Send + Sync;

/// Produces two views `(X1, X2)` of one `C×H×W` image. Deterministic given
/// the rng state.
pub struct PairGenerator {
    name: String,
    config: serde_json::Value,
    f: Box<PairFn>,
}

impl fmt::Debug for PairGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PairGenerator({})", self.name)
    }
}

impl PairGenerator {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&Tensor<f32>, &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> + Send + Sync + 'static,
    ) -> Self {
        PairGenerator {
            name: name.into(),
            config: serde_json::Value::Null,
            f: Box::new(f),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn generate(&self, image: &Tensor<f32>, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
        (self.f)(image, rng)
    }

    fn augmenting(name: &str, spec: AugmentSpec, mode: AugmentMode) -> Result<Self> {
        spec.validate()?;
        let config = serde_json::to_value(&spec)?;
        let mut g = PairGenerator::new(name, move |img, rng| {
            Ok((augment(img, &spec, mode, rng)?, augment(img, &spec, mode, rng)?))
        });
        g.config = config;
        Ok(g)
    }
}

/// `(X, X)`.
pub fn identity_pair() -> PairGenerator {
    PairGenerator::new("identity", |img, _| Ok((img.clone(), img.clone())))
}

/// Two independent color jitters of the same image (3-channel input).
pub fn jitter_pair(spec: AugmentSpec) -> Result<PairGenerator> {
    PairGenerator::augmenting("jitter", spec, AugmentMode::Jitter)
}

/// Two independent random resized crops.
pub fn crop_pair(spec: AugmentSpec) -> Result<PairGenerator> {
    PairGenerator::augmenting("crop", spec, AugmentMode::Crop)
}

/// Two independent random translations.
pub fn shift_pair(spec: AugmentSpec) -> Result<PairGenerator> {
    PairGenerator::augmenting("shift", spec, AugmentMode::Shift)
}

fn stack(views: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = vec![views.len()];
    shape.extend_from_slice(views[0].shape());
    Tensor::new(shape, views.iter().flat_map(|v| v.data().iter().copied()).collect())
}

/// Percentage of items whose two generated views receive the same argmax
/// class. Item `i` draws its views from the stream `(seed, i)`.
pub fn agreement_score(
    model: &Model,
    ds: &LabeledDataset,
    generator: &PairGenerator,
    seed: u64,
) -> Result<ProbeReport> {
    let channels = model.in_channels();
    let mut records = Vec::with_capacity(ds.len());
    for chunk in all_items(ds).chunks(128) {
        let images = ds.batch(chunk, channels)?;
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (r, &i) in chunk.iter().enumerate() {
            let mut rng = rng_for(seed, &[stream::PROBE, i as u64]);
            let item = images.select(r).reshape(images.shape()[1..].to_vec())?;
            let (a, b) = generator.generate(&item, &mut rng)?;
            first.push(a);
            second.push(b);
        }
        let p1 = model.forward(&stack(&first)?)?.argmax_rows();
        let p2 = model.forward(&stack(&second)?)?.argmax_rows();
        for (r, &i) in chunk.iter().enumerate() {
            records.push(Record::new(i, "agree", (p1[r] == p2[r]) as u8 as f64).with_predictions(p1[r], p2[r]));
        }
    }
    let config = serde_json::json!({ "generator": generator.name, "augment": generator.config });
    Ok(ProbeReport::from_records("agreement", "agree", 100.0, records, config, seed))
}

/// Percentage of items on which teacher and student predict the same class,
/// regardless of the label.
pub fn consensus_score(teacher: &Model, student: &Model, ds: &LabeledDataset) -> Result<ProbeReport> {
    if teacher.num_classes() != student.num_classes() {
        return Err(Error::dim(
            "consensus_score",
            "classes",
            teacher.num_classes(),
            student.num_classes(),
        ));
    }
    let items = all_items(ds);
    let t = predict_items(teacher, ds, &items)?;
    let s = predict_items(student, ds, &items)?;
    let records = items
        .iter()
        .map(|&i| Record::new(i, "consensus", (t[i] == s[i]) as u8 as f64).with_predictions(s[i], t[i]))
        .collect();
    Ok(ProbeReport::from_records(
        "consensus",
        "consensus",
        100.0,
        records,
        serde_json::Value::Null,
        0,
    ))
}

fn cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Percentage of items where the teacher's ground-truth Grad-CAM is more
/// cosine-similar to the distilled student's than to the independent
/// student's. Ties score one half. Items where any heatmap is all zero are
/// skipped and counted under the `skipped` key.
pub fn cam_preference(
    teacher: &Model,
    distilled: &Model,
    independent: &Model,
    ds: &LabeledDataset,
    tap: &str,
) -> Result<ProbeReport> {
    let mut records = Vec::with_capacity(ds.len());
    for chunk in all_items(ds).chunks(64) {
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels()[i]).collect();
        let cams = |m: &Model| -> Result<Vec<Tensor<f32>>> {
            grad_cam_batch(m, &ds.batch(chunk, m.in_channels())?, &labels, tap)
        };
        let (t, d, s) = (cams(teacher)?, cams(distilled)?, cams(independent)?);
        if t[0].shape() != d[0].shape() || t[0].shape() != s[0].shape() {
            return Err(Error::dim(
                "cam_preference",
                format!("tap `{tap}` resolution"),
                format!("{:?}", t[0].shape()),
                format!("{:?} / {:?}", d[0].shape(), s[0].shape()),
            ));
        }
        for (r, &i) in chunk.iter().enumerate() {
            let zero = |c: &Tensor<f32>| c.data().iter().all(|&v| v == 0.0);
            if zero(&t[r]) || zero(&d[r]) || zero(&s[r]) {
                records.push(Record::new(i, "skipped", 1.0));
                continue;
            }
            let (cd, cs) = (cosine(&t[r], &d[r]), cosine(&t[r], &s[r]));
            let win = if cd > cs {
                1.0
            } else if cd == cs {
                0.5
            } else {
                0.0
            };
            records.push(Record::new(i, "preference", win));
        }
    }
    Ok(ProbeReport::from_records(
        "cam_preference",
        "preference",
        100.0,
        records,
        serde_json::json!({ "tap": tap }),
        0,
    ))
}
