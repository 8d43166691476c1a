use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{read_packed, write_packed, PackedArray};
use super::image::{ImageTensor, CHANNELS};
use super::ppm::load_ppm;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub source: DatasetSource,
    pub num_samples: usize,
    pub num_classes: usize,
    pub size: usize,
    pub split: Split,
    pub labels: Vec<usize>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.num_samples {
            return Err(Error::InvalidArgument(format!(
                "manifest lists {} labels for {} samples",
                self.labels.len(),
                self.num_samples
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<ImageTensor>) -> Result<Self> {
        manifest.validate()?;
        if images.len() != manifest.num_samples {
            return Err(Error::InvalidArgument(format!(
                "{} images for {} samples",
                images.len(),
                manifest.num_samples
            )));
        }
        Ok(Dataset { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.manifest.labels
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.manifest.split = split;
        self
    }

    /// Writes `<split>.json` and `<split>.bin` (packed, HWC) into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let split = self.manifest.split.name();
        let json_path = dir.join(format!("{split}.json"));
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let size = self.manifest.size;
        let values = self.images.iter().flat_map(|img| img.to_hwc()).collect();
        write_packed(
            dir.join(format!("{split}.bin")),
            &PackedArray {
                count: self.len(),
                height: size,
                width: size,
                channels: CHANNELS,
                values,
            },
        )
    }

    /// Reads `<split>.json` plus either `<split>.bin` or PPM files
    /// `<split>/00000.ppm, 00001.ppm, …`.
    pub fn load_dir(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let name = split.name();
        let json_path = dir.join(format!("{name}.json"));
        let text = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&text)?;
        manifest.validate()?;
        let packed_path = dir.join(format!("{name}.bin"));
        let images = if packed_path.exists() {
            let arr = read_packed(&packed_path)?;
            if arr.count != manifest.num_samples || arr.channels != CHANNELS {
                return Err(Error::Container(format!(
                    "{}: {}x{}x{}x{} does not match manifest",
                    packed_path.display(),
                    arr.count,
                    arr.height,
                    arr.width,
                    arr.channels
                )));
            }
            arr.values
                .chunks_exact(arr.item_len())
                .map(|c| ImageTensor::from_hwc(arr.height, arr.width, c))
                .collect::<Result<Vec<_>>>()?
        } else {
            (0..manifest.num_samples)
                .map(|i| load_ppm(dir.join(name).join(format!("{i:05}.ppm"))))
                .collect::<Result<Vec<_>>>()?
        };
        if let Some(img) = images.iter().find(|i| i.height() != manifest.size || i.width() != manifest.size) {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} does not match manifest size {}",
                img.height(),
                img.width(),
                manifest.size
            )));
        }
        Dataset::new(manifest, images)
    }
}
