pub mod camera;
pub mod conditioning;
pub mod diffusion;
pub mod field;
pub mod hdr;
pub mod mask;
pub mod math;
pub mod metrics;
pub mod olat;
pub mod rng;
pub mod scene;
