//! Light-field data model: images, PPM/PGM codecs, scene directories and
//! synthetic scene generation.

mod image;
pub mod pnm;
mod scene;
pub mod synthetic;

pub use image::Image;
pub use pnm::{decode_image, encode_image};
pub use scene::{
    load_dataset, load_scene, normalize_stack, write_scene, FocalStack, LfScene, SceneSource,
    STACK_SIZE,
};
pub use synthetic::generate_synthetic_scene;
