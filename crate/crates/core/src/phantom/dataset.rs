use std::fs;
use std::path::Path;

use super::{decode_pgm, read_manifest, GrayImage, Manifest, Phantom, PhantomError};
use crate::localizer::BBox;
use crate::tensor::{Element, Tensor};

/// Square single-channel images held in memory with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    size: usize,
    images: Vec<GrayImage>,
    labels: Vec<usize>,
    boxes: Vec<Vec<BBox>>,
}

impl Dataset {
    pub fn from_parts(images: Vec<GrayImage>, labels: Vec<usize>, boxes: Vec<Vec<BBox>>) -> Result<Self, PhantomError> {
        if images.len() != labels.len() || images.len() != boxes.len() {
            return Err(PhantomError::Dataset("images, labels and boxes differ in length".into()));
        }
        let size = images.first().map_or(0, |i| i.width);
        if let Some(i) = images.iter().position(|im| im.width != size || im.height != size) {
            return Err(PhantomError::Dataset(format!(
                "image {i} is {}x{}, expected {size}x{size}",
                images[i].width, images[i].height
            )));
        }
        Ok(Dataset {
            size,
            images,
            labels,
            boxes,
        })
    }

    pub fn from_phantoms(phantoms: Vec<Phantom>) -> Self {
        let mut images = Vec::with_capacity(phantoms.len());
        let mut labels = Vec::with_capacity(phantoms.len());
        let mut boxes = Vec::with_capacity(phantoms.len());
        for p in phantoms {
            images.push(p.image);
            labels.push(p.label);
            boxes.push(p.boxes);
        }
        Dataset::from_parts(images, labels, boxes).expect("phantoms share one size")
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self, PhantomError> {
        let mut images = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let path = manifest.resolve(e);
            let bytes = fs::read(&path).map_err(|source| PhantomError::Io {
                path: path.clone(),
                source,
            })?;
            images.push(decode_pgm(&bytes).map_err(|source| PhantomError::Image { path, source })?);
        }
        Dataset::from_parts(
            images,
            manifest.entries.iter().map(|e| e.label).collect(),
            manifest.entries.iter().map(|e| e.boxes.clone()).collect(),
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self, PhantomError> {
        Self::from_manifest(&read_manifest(manifest_path)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn boxes(&self, i: usize) -> &[BBox] {
        &self.boxes[i]
    }

    pub fn image(&self, i: usize) -> &GrayImage {
        &self.images[i]
    }

    pub fn count_label(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// `[B, 1, S, S]` batch of the given indices, pixels rescaled to `[0, 1]`.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        let plane = self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend(self.images[i].to_unit().map(T::from_f64));
        }
        Tensor::new([indices.len(), 1, self.size, self.size], data).expect("batch extent")
    }
}
