//! Samples, stratified splitting and deterministic batching.

pub mod busi;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use busi::{export_busi_dir, load_busi_dir, LoadReport};
pub use synthetic::generate_synthetic;

/// Diagnostic class of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
    Normal = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Benign, Label::Malignant, Label::Normal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    /// Directory / display name.
    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
            Label::Normal => "normal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One image with its lesion mask and class.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `<class>/<stem>`, unique within a dataset.
    pub id: String,
    /// `[1, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, S, S]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub label: Label,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn mask_is_empty(&self) -> bool {
        self.mask.data().iter().all(|&v| v == 0.0)
    }
}

/// Samples addressable by id.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        let mut size = None;
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            if *size.get_or_insert(s.size()) != s.size() {
                return Err(Error::Data(format!("sample {} has a different image size", s.id)));
            }
        }
        Ok(Self { samples, index })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    /// Image side length (0 for an empty dataset).
    pub fn image_size(&self) -> usize {
        self.samples.first().map_or(0, Sample::size)
    }

    pub fn labels_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.get(id).map(|s| s.label.index()).ok_or_else(|| Error::Data(format!("unknown sample id {id}")))
            })
            .collect()
    }
}

/// Disjoint train/test id lists, each sorted lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
}

/// Stratified split: each class is shuffled with a seeded generator and its
/// first `round(ratio * count)` ids (clamped to `1..count`) go to training.
pub fn split(samples: &[Sample], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::param(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let mut by_class: BTreeMap<Label, Vec<String>> = Label::ALL.iter().map(|&l| (l, Vec::new())).collect();
    for s in samples {
        by_class.get_mut(&s.label).expect("all labels present").push(s.id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut ids) in by_class {
        if ids.len() < 2 {
            return Err(Error::Split(format!("class {label} has {} samples, at least 2 are needed", ids.len())));
        }
        ids.sort();
        ids.shuffle(&mut rng);
        let n_train = ((ratio * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
        test.extend(ids.split_off(n_train));
        train.extend(ids);
    }
    train.sort();
    test.sort();
    Ok(DatasetSplit { train, test, seed, ratio })
}

/// Stacked samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[N, C, S, S]`; the grayscale plane is replicated `C` times.
    pub images: Tensor,
    /// `[N, 1, S, S]`
    pub masks: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], channels: usize) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let s = first.size();
        let plane = s * s;
        let mut images = Vec::with_capacity(samples.len() * channels * plane);
        let mut masks = Vec::with_capacity(samples.len() * plane);
        for sample in samples {
            for _ in 0..channels {
                images.extend_from_slice(sample.image.data());
            }
            masks.extend_from_slice(sample.mask.data());
        }
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::new(&[samples.len(), channels, s, s], images)?,
            masks: Tensor::new(&[samples.len(), 1, s, s], masks)?,
            labels: samples.iter().map(|s| s.label.index()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Epoch-ordered batches over a list of sample ids.
///
/// Ids are visited in lexicographic order, or, with `shuffle`, in an order
/// drawn from a generator seeded with `seed ^ epoch`. The final partial batch
/// is kept.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<&'a Sample>,
    batch_size: usize,
    channels: usize,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        dataset: &'a Dataset,
        ids: &[String],
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        let mut sorted: Vec<&String> = ids.iter().collect();
        sorted.sort();
        let mut order = sorted
            .into_iter()
            .map(|id| dataset.get(id).ok_or_else(|| Error::Data(format!("unknown sample id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
            order.shuffle(&mut rng);
        }
        Ok(Self { dataset, order, batch_size, channels: 1, pos: 0 })
    }

    /// Replicates the grayscale plane into `channels` input channels.
    pub fn channels(mut self, channels: usize) -> Self {
        self.channels = channels.max(1);
        self
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = Batch::from_samples(&self.order[self.pos..end], self.channels)
            .expect("non-empty batch of equal-size samples");
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(label: Label, i: usize) -> Sample {
        Sample {
            id: format!("{label}/s{i:03}"),
            image: Tensor::full(&[1, 2, 2], i as f64 / 100.0),
            mask: Tensor::zeros(&[1, 2, 2]),
            label,
        }
    }

    fn fake_set(per_class: usize) -> Vec<Sample> {
        Label::ALL.iter().flat_map(|&l| (0..per_class).map(move |i| fake(l, i))).collect()
    }

    #[test]
    fn eight_two_split_per_class() {
        let samples = fake_set(10);
        let sp = split(&samples, 0.8, 1).unwrap();
        assert_eq!(sp.train.len(), 24);
        assert_eq!(sp.test.len(), 6);
        for l in Label::ALL {
            let n = sp.test.iter().filter(|id| id.starts_with(l.name())).count();
            assert_eq!(n, 2);
        }
    }

    #[test]
    fn split_is_seeded() {
        let samples = fake_set(10);
        assert_eq!(split(&samples, 0.8, 5).unwrap(), split(&samples, 0.8, 5).unwrap());
        assert_ne!(split(&samples, 0.8, 5).unwrap().test, split(&samples, 0.8, 6).unwrap().test);
    }

    #[test]
    fn half_split_of_pairs() {
        let sp = split(&fake_set(2), 0.5, 0).unwrap();
        assert_eq!((sp.train.len(), sp.test.len()), (3, 3));
    }

    #[test]
    fn split_needs_two_per_class() {
        let mut samples = fake_set(3);
        samples.retain(|s| s.label != Label::Normal || s.id.ends_with("000"));
        assert!(matches!(split(&samples, 0.8, 0), Err(Error::Split(_))));
        assert!(matches!(split(&fake_set(3), 1.0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn batches_partition_with_partial_tail() {
        let ds = Dataset::new(fake_set(4)).unwrap();
        let ids: Vec<String> = ds.samples().iter().take(10).map(|s| s.id.clone()).collect();
        let sizes: Vec<usize> = BatchIter::new(&ds, &ids, 4, true, 3, 1).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn unshuffled_batches_are_lexicographic() {
        let ds = Dataset::new(fake_set(4)).unwrap();
        let mut ids: Vec<String> = ds.samples().iter().map(|s| s.id.clone()).collect();
        ids.reverse();
        for epoch in 0..3 {
            let seen: Vec<String> =
                BatchIter::new(&ds, &ids, 5, false, 0, epoch).unwrap().flat_map(|b| b.ids).collect();
            let mut expect = ids.clone();
            expect.sort();
            assert_eq!(seen, expect);
        }
    }

    #[test]
    fn shuffle_depends_on_epoch() {
        let ds = Dataset::new(fake_set(10)).unwrap();
        let ids: Vec<String> = ds.samples().iter().map(|s| s.id.clone()).collect();
        let order = |epoch| -> Vec<String> {
            BatchIter::new(&ds, &ids, 8, true, 42, epoch).unwrap().flat_map(|b| b.ids).collect()
        };
        assert_eq!(order(1), order(1));
        assert_ne!(order(1), order(2));
    }

    #[test]
    fn batch_stacks_channels() {
        let ds = Dataset::new(fake_set(2)).unwrap();
        let ids = vec![ds.samples()[1].id.clone()];
        let b = BatchIter::new(&ds, &ids, 1, false, 0, 0).unwrap().channels(3).next().unwrap();
        assert_eq!(b.images.shape(), &[1, 3, 2, 2]);
        assert_eq!(b.masks.shape(), &[1, 1, 2, 2]);
        assert_eq!(b.labels, vec![0]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = fake(Label::Benign, 1);
        assert!(Dataset::new(vec![s.clone(), s]).is_err());
    }
}
