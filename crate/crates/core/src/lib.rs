//! Core engine for a gamified robot teleoperation platform.
//!
//! Operators steer a simulated 7-DoF arm through manipulation tasks; every
//! attempt is scored in stages and recorded as a demonstration episode.

pub mod arm;
pub mod cloud;
pub mod dataset;
pub mod gateway;
pub mod geometry;
pub mod ik;
pub mod progression;
pub mod scene;
pub mod script;
pub mod session;
pub mod task;
mod u64_text;
