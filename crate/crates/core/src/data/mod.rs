//! Images, datasets, seeded augmentation and the corruption suite.

mod augment;
mod container;
mod corrupt;
mod image;
mod manifest;
mod ppm;
mod rng;
mod synthetic;

pub use augment::{augment_view, standard_view, AugmentConfig, AugmentationFamily};
pub use container::{read_packed, write_packed, PackedArray, PACKED_MAGIC};
pub use corrupt::{apply_corruption, gaussian_kernel, CorruptionSpec};
pub use image::ImageTensor;
pub use manifest::{Dataset, DatasetManifest, DatasetSource, Split};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, write_ppm};
pub use rng::{mix_seed, RngStream};
pub use synthetic::{generate_synthetic_dataset, synthetic_splits, TEXTURE_FAMILIES};
