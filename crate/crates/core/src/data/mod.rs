//! Labeled image datasets, IDX persistence, synthetic domains, augmentation
//! and group-composition sampling.

mod augment;
mod compose;
mod idx;
mod synth;

pub use augment::{augment, jitter_with, AugmentMode, AugmentSpec, JitterFactors};
pub use compose::compose_subsets;
pub use idx::{load_dataset, load_idx, save_dataset, write_idx};
pub use synth::{
    synth_grouped_domains, synth_mnist_color, synth_mnist_m, Domain, PatchSource, GROUPED_DOMAINS,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[0,1]` (`N×C×H×W`) with one class label per item, and
/// optional group ids and secondary (texture) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    groups: Option<Vec<usize>>,
    secondary_labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::dim("dataset", "rank", 4, shape.len()));
        }
        if shape[0] != labels.len() {
            return Err(Error::dim("dataset", "0 (items)", shape[0], labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0,1]")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            groups: None,
            secondary_labels: None,
            num_classes,
        })
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        if groups.len() != self.len() {
            return Err(Error::dim("dataset", "groups", self.len(), groups.len()));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    /// Attaches texture labels; each must differ from the item's shape label.
    pub fn with_secondary_labels(mut self, secondary: Vec<usize>) -> Result<Self> {
        if secondary.len() != self.len() {
            return Err(Error::dim("dataset", "secondary_labels", self.len(), secondary.len()));
        }
        for (i, (&s, &l)) in secondary.iter().zip(&self.labels).enumerate() {
            if s >= self.num_classes || s == l {
                return Err(Error::Input(format!(
                    "item {i}: secondary label {s} must be a valid class distinct from {l}"
                )));
            }
        }
        self.secondary_labels = Some(secondary);
        Ok(self)
    }

    /// Number of items (M).
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }

    pub fn secondary_labels(&self) -> Option<&[usize]> {
        self.secondary_labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// `[C, H, W]` of one item.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn item_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.item_len();
        &self.images.data()[index * n..(index + 1) * n]
    }

    /// Stacks the given items into a `B×channels×H×W` batch. Grayscale items
    /// are replicated when `channels` is 3.
    pub fn batch(&self, indices: &[usize], channels: usize) -> Result<Tensor<f32>> {
        let [c, h, w] = self.item_shape();
        if channels != c && !(c == 1 && channels == 3) {
            return Err(Error::dim("batch", "1 (channels)", channels, c));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * channels * plane);
        for &i in indices {
            let img = self.image(i);
            if c == channels {
                data.extend_from_slice(img);
            } else {
                for _ in 0..channels {
                    data.extend_from_slice(img);
                }
            }
        }
        Tensor::new([indices.len(), channels, h, w], data)
    }

    /// Items at `indices`, in that order, with their labels and metadata.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let pick = |v: &Vec<usize>| indices.iter().map(|&i| v[i]).collect();
        LabeledDataset {
            images: self.images.gather(indices),
            labels: pick(&self.labels),
            groups: self.groups.as_ref().map(pick),
            secondary_labels: self.secondary_labels.as_ref().map(pick),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` items (or all of them).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Copy with `channels` channels; grayscale is replicated.
    pub fn with_channels(&self, channels: usize) -> Result<LabeledDataset> {
        let idx: Vec<usize> = (0..self.len()).collect();
        Ok(LabeledDataset {
            images: self.batch(&idx, channels)?,
            ..self.clone()
        })
    }

    /// Concatenates datasets, replicating grayscale parts to `channels`.
    /// Group ids and secondary labels survive only if every part has them.
    pub fn concat(parts: Vec<LabeledDataset>, channels: usize) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let [_, h, w] = first.item_shape();
        let num_classes = parts.iter().map(|p| p.num_classes).max().unwrap_or(0);
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let keep_groups = parts.iter().all(|p| p.groups.is_some());
        let keep_secondary = parts.iter().all(|p| p.secondary_labels.is_some());
        let mut data = Vec::with_capacity(total * channels * h * w);
        let mut labels = Vec::with_capacity(total);
        let mut groups = Vec::new();
        let mut secondary = Vec::new();
        for part in parts {
            let [_, ph, pw] = part.item_shape();
            if (ph, pw) != (h, w) {
                return Err(Error::dim("concat", "spatial", format!("{h}×{w}"), format!("{ph}×{pw}")));
            }
            let idx: Vec<usize> = (0..part.len()).collect();
            data.extend_from_slice(part.batch(&idx, channels)?.data());
            labels.extend_from_slice(&part.labels);
            groups.extend(part.groups.unwrap_or_default());
            secondary.extend(part.secondary_labels.unwrap_or_default());
        }
        Ok(LabeledDataset {
            images: Tensor::new([total, channels, h, w], data)?,
            labels,
            groups: keep_groups.then_some(groups),
            secondary_labels: keep_secondary.then_some(secondary),
            num_classes,
        })
    }

    /// Per-group item counts, indexed by group id.
    pub fn group_histogram(&self) -> Option<Vec<usize>> {
        let groups = self.groups.as_ref()?;
        let mut hist = vec![0; groups.iter().max().map_or(0, |g| g + 1)];
        for &g in groups {
            hist[g] += 1;
        }
        Some(hist)
    }

    /// One-hot label rows for the given items.
    pub fn one_hot(&self, indices: &[usize]) -> Tensor<f32> {
        let mut t = Tensor::zeros([indices.len(), self.num_classes]);
        for (r, &i) in indices.iter().enumerate() {
            t.data_mut()[r * self.num_classes + self.labels[i]] = 1.0;
        }
        t
    }
}
