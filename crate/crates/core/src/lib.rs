//! Motion vectorization: converts a motion-graphics frame sequence into an
//! SVG motion program (objects with canonical images, per-frame affine
//! transforms and z-indices) and provides a program-transformation toolkit
//! for producing timing/motion/appearance variations of that program.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`segmentation`] splits each frame into background and foreground
//!    regions.
//! 2. [`tracking`] builds forward/backward candidate mapping graphs between
//!    previous-frame objects and current-frame regions, scores candidate
//!    mappings with a visibility loss, greedily selects a conflict-free set
//!    and propagates object IDs.
//! 3. [`diffcomp`] is the differentiable compositing optimizer used
//!    throughout: soft z-layered rendering of affinely transformed sources
//!    with analytic gradients through bilinear sampling and the layering
//!    softmax.
//! 4. [`program`] refactors per-frame motion into canonical-to-frame
//!    transforms and emits the SVG motion program plus a lossless sidecar.
//!
//! [`xform`] implements the program transformation API (queries, retiming,
//! motion adjustment, appearance changes). [`synth`] procedurally generates
//! ground-truth scenes for validation. [`flow`] provides classical optical
//! flow and affine initialization.

pub mod config;
pub mod diffcomp;
pub mod error;
pub mod flow;
pub mod geom;
pub mod imaging;
pub mod parallel;
pub mod pipeline;
pub mod program;
pub mod segmentation;
pub mod synth;
pub mod tracking;
pub mod xform;

pub use config::Config;
pub use error::{Error, Result};
