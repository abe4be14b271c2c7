//! File formats, dataset layouts and the synthetic scene generator.

pub mod color;
pub mod flo;
pub mod image_io;
pub mod layout;
pub mod scene;

pub use color::flow_to_color;
pub use flo::{read_flo, write_flo, FlowField};
pub use image_io::{overlay_mask, read_frame, read_mask, write_frame, write_mask, write_rgb};
pub use layout::{export_scene, load_davis_layout, load_flow_dataset, load_sequence, FlowDataset, SegDataset, Sequence};
pub use scene::{generate_corpus, generate_scene, sequence_id, Scene, SceneObject, SceneSampler, ShapeKind, ShapeSceneSpec};
