//! Synthetic scenes, the on-disk dataset layout, augmentation and metrics.

pub mod augment;
pub mod dataset;
pub mod metrics;
pub mod scene;

pub use augment::{augment, resize_bilinear, resize_nearest, AugmentPolicy};
pub use dataset::{load_dataset, read_image, read_labels, write_split, DatasetIndex, SampleEntry};
pub use metrics::{
    class_frequencies, class_weights, cm_update, iou_from_cm, ConfusionMatrix, IouReport,
};
pub use scene::{
    generate_scene, generate_scenes, quantize, ClassAppearance, LabelMap, SamplePair, SceneSpec,
};
