//! Networks: generators, the frozen feature extractor and discriminator heads.

pub mod checkpoint;
mod extractor;
mod generator;
mod head;
mod params;

pub use checkpoint::{load_generator, round_to_f32, save_generator, GeneratorManifest};
pub use extractor::{extract_features, FeatureExtractor};
pub use generator::{
    apply_weight_delta, build_generator, generator_forward, init_student_from_teacher, timestep_embedding, Arch,
    Bound, GeneratorNet, GeneratorSpec,
};
pub use head::{head_forward, init_head, DiscriminatorHead, HeadArch, HeadRecipe, HeadSpec, DEFAULT_HEAD_BUDGET};
pub use params::ParamSet;
