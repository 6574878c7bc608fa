//! Synthetic terrain, vehicle oracle, patch extraction, and dataset
//! collection: the data source for everything downstream.

pub mod collect;
pub mod episode;
pub mod geometry;
pub mod heightmap;
pub mod patch;
pub mod terrain;
pub mod vehicle;

pub use collect::{collect_dataset, collect_episode, DatasetConfig, Manifest};
pub use episode::{Episode, Frame};
pub use geometry::{Action, Pose};
pub use heightmap::HeightMap;
pub use patch::{extract_patch, Patch, PatchConfig, PATCH_SIZE};
pub use terrain::{generate_terrain, TerrainConfig};
pub use vehicle::{settle, step_vehicle, StepStatus, VehicleConfig};
