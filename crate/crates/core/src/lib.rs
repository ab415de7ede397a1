pub mod geometry;
pub mod unscented;
pub mod semantic;
pub mod ego_motion;
pub mod motion_correction;
pub mod occlusion;
pub mod octree;
pub mod classes;
pub mod eval;
pub mod io;
pub mod synthetic;
pub mod pipeline;
pub mod artifacts;
pub mod workflow;
