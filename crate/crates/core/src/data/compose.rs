use rand::seq::SliceRandom;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Samples exactly `counts[g]` items of each group `g` without replacement.
/// Groups beyond `counts` are dropped. Selected items keep their source
/// order.
pub fn compose_subsets(src: &LabeledDataset, counts: &[usize], seed: u64) -> Result<LabeledDataset> {
    let groups = src
        .groups()
        .ok_or_else(|| Error::Contract("compose_subsets needs a dataset with group ids".into()))?;
    let mut chosen = Vec::with_capacity(counts.iter().sum());
    for (g, &want) in counts.iter().enumerate() {
        let mut members: Vec<usize> = (0..src.len()).filter(|&i| groups[i] == g).collect();
        if members.len() < want {
            return Err(Error::Input(format!(
                "group {g} has {} items, {want} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng_for(seed, &[stream::SUBSET, g as u64]));
        chosen.extend_from_slice(&members[..want]);
    }
    chosen.sort_unstable();
    Ok(src.subset(&chosen))
}
