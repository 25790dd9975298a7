//! Dynamics-aware evaluation for image-to-video generation.
//!
//! Frames are loaded by [`frame_io`], motion is measured by block-matching
//! [`flow`] and reduced to a dynamic score in [`dynamics`]. [`quality`]
//! gates quality by that score, [`degree`] grades how much motion a prompt
//! asks for, and [`benchmark`] turns both into DR, DC and DBQ. [`curation`]
//! filters training clips, [`mca`] holds the adapter reference and
//! [`human_study`] runs ranked preference studies.

pub mod benchmark;
pub mod curation;
pub mod degree;
pub mod dynamics;
pub mod flow;
pub mod frame_io;
pub mod human_study;
pub mod mca;
pub mod quality;

pub use benchmark::{run_benchmark, BenchConfig, BenchManifest, ModelReport};
pub use dynamics::{dynamic_score, DynamicsConfig, DynamicsProfile};
pub use flow::{estimate_flow, FlowField, FlowParams};
pub use frame_io::{load_sequence, Frame, FrameSequence};
