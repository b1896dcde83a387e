//! Datasets: synthetic Gaussian blobs, CIFAR-10 binary records, and
//! seeded splits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::supernet::Shape3;
use crate::tensor::Tensor;

/// Bytes per CIFAR-10 record: one label, then 32×32 R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images `[n, C, H, W]` with values in `[0, 1]` and labels below
/// `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        let (n, _, _, _) = images.dims4("dataset")?;
        if n != labels.len() {
            return Err(Error::Dataset(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn sample_shape(&self) -> Shape3 {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.slice_batch(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty subset".into()));
        }
        let (images, labels) = self.batch(indices);
        Dataset::new(images, labels, self.classes, provenance)
    }

    /// `a` followed by `b`; shapes and class counts must agree.
    pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
        if a.sample_shape() != b.sample_shape() || a.classes != b.classes {
            return Err(Error::Dataset(format!(
                "cannot join {:?}/{} classes with {:?}/{} classes",
                a.sample_shape(),
                a.classes,
                b.sample_shape(),
                b.classes
            )));
        }
        let (c, h, w) = a.sample_shape();
        let mut data = a.images.data().to_vec();
        data.extend_from_slice(b.images.data());
        let labels = a.labels.iter().chain(&b.labels).copied().collect();
        Dataset::new(
            Tensor::new(vec![a.len() + b.len(), c, h, w], data)?,
            labels,
            a.classes,
            format!("{}+{}", a.provenance, b.provenance),
        )
    }

    /// Keeps only the listed classes, relabelled `0..k` in list order, and
    /// at most `limit` images.
    pub fn select_classes(&self, keep: &[usize], limit: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .take(limit)
            .collect();
        if idx.is_empty() {
            return Err(Error::Dataset(format!("no images of classes {keep:?}")));
        }
        let images = self.images.slice_batch(&idx);
        let labels = idx
            .iter()
            .map(|&i| keep.iter().position(|&c| c == self.labels[i]).expect("filtered"))
            .collect();
        Dataset::new(images, labels, keep.len(), format!("{}[classes={keep:?},limit={limit}]", self.provenance))
    }
}

/// Grid cell of class `c` on a `g×g` layout.
fn blob_center(c: usize, classes: usize, size: usize) -> (f64, f64) {
    let g = (classes as f64).sqrt().ceil() as usize;
    let cell = size as f64 / g as f64;
    let (row, col) = (c / g, c % g);
    ((row as f64 + 0.5) * cell - 0.5, (col as f64 + 0.5) * cell - 0.5)
}

/// One-channel `size×size` images; sample `i` has class `i mod classes`, a
/// unit Gaussian bump centred on that class's grid cell, plus i.i.d.
/// `N(0, noise_sigma²)` noise, clipped to `[0, 1]`.
pub fn synth_blobs(n: usize, classes: usize, size: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n == 0 || size == 0 {
        return Err(Error::Dataset(format!("need classes >= 2, n > 0, size > 0 (got {classes}, {n}, {size})")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Dataset(format!("noise sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let g = (classes as f64).sqrt().ceil();
    let spread = size as f64 / (3.0 * g);
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let (cy, cx) = blob_center(c, classes, size);
            (0..size * size)
                .map(|k| {
                    let (y, x) = ((k / size) as f64, (k % size) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (-d2 / (2.0 * spread * spread)).exp()
                })
                .collect()
        })
        .collect();
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &t in &templates[c] {
            let v = if noise_sigma > 0.0 { t + noise_sigma * rng.normal() } else { t };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let images = Tensor::new(vec![n, 1, size, size], data)?;
    Dataset::new(
        images,
        labels,
        classes,
        format!("synth_blobs(n={n},classes={classes},size={size},noise={noise_sigma},seed={seed})"),
    )
}

/// Parses CIFAR-10 binary records.
pub fn parse_cifar10(bytes: &[u8], provenance: &str) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Dataset(format!("{provenance}: no records")));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{provenance}: length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Dataset(format!("{provenance}: record {r} has label {label} > 9")));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10, provenance)
}

pub fn load_cifar10_bin(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes, &format!("cifar10:{}", path.display()))
}

/// Encodes `[n, 3, 32, 32]` images as CIFAR-10 records, rounding pixels to
/// the nearest of 256 levels.
pub fn encode_cifar10(d: &Dataset) -> Result<Vec<u8>> {
    if d.sample_shape() != (3, 32, 32) {
        return Err(Error::Dataset(format!("CIFAR-10 records hold 3x32x32 images, got {:?}", d.sample_shape())));
    }
    let px = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(d.len() * CIFAR_RECORD);
    for (i, &label) in d.labels().iter().enumerate() {
        if label > 9 {
            return Err(Error::LabelOutOfRange { label, classes: 10 });
        }
        out.push(label as u8);
        out.extend(
            d.images().data()[i * px..(i + 1) * px]
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar10_bin(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    std::fs::write(path, encode_cifar10(d)?)?;
    Ok(())
}

/// Seeded shuffle, then the first `round(ratio·n)` items and the rest.
pub fn split_dataset(d: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(d.len(), ratio, seed)?;
    Ok((
        d.subset(&a, format!("{}[split {ratio} seed {seed} head]", d.provenance()))?,
        d.subset(&b, format!("{}[split {ratio} seed {seed} tail]", d.provenance()))?,
    ))
}

/// Index sets of [`split_dataset`].
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Dataset(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let head = (ratio * n as f64).round() as usize;
    if head == 0 || head >= n {
        return Err(Error::Dataset(format!("split of {n} items at {ratio} leaves a side empty")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut idx);
    let tail = idx.split_off(head);
    Ok((idx, tail))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let d = synth_blobs(103, 4, 8, 0.1, 7).unwrap();
        let mut counts = [0usize; 4];
        d.labels().iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c == 25 || c == 26), "{counts:?}");
        assert_eq!(d, synth_blobs(103, 4, 8, 0.1, 7).unwrap());
        assert!(d.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noiseless_blobs_nearest_template() {
        let d = synth_blobs(40, 5, 8, 0.0, 1).unwrap();
        let px = 64;
        let img = |i: usize| &d.images().data()[i * px..(i + 1) * px];
        for i in 0..d.len() {
            let best = (0..5)
                .min_by(|&a, &b| {
                    let da: f64 = img(i).iter().zip(img(a)).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = img(i).iter().zip(img(b)).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, d.labels()[i]);
        }
    }

    #[test]
    fn blobs_reject_one_class() {
        assert!(synth_blobs(10, 1, 8, 0.0, 0).is_err());
    }

    #[test]
    fn splits() {
        let d = synth_blobs(10, 2, 4, 0.0, 0).unwrap();
        let (a, b) = split_dataset(&d, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (ia, ib) = split_indices(10, 0.8, 3).unwrap();
        assert!(ia.iter().all(|i| !ib.contains(i)));
        let mut all: Vec<_> = ia.iter().chain(&ib).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.8, 3).unwrap(), (ia, ib));
        assert!(split_dataset(&d, 0.01, 0).is_err());
        assert!(split_dataset(&d, 1.0, 0).is_err());
    }

    #[test]
    fn select_classes_relabels() {
        let d = synth_blobs(12, 4, 4, 0.0, 0).unwrap();
        let s = d.select_classes(&[3, 1], 5).unwrap();
        assert_eq!(s.classes(), 2);
        assert_eq!(s.len(), 5);
        assert_eq!(s.labels(), &[1, 0, 1, 0, 1]);
    }
}
