//! Synthetic moiré: a stripe-subpixel screen captured through a posed
//! RGGB sensor, then developed by a small ISP.

pub mod capture;
pub mod clip;
pub mod content;
pub mod isp;
pub mod screen;

pub use capture::{capture_cfa, CapturePose, Sampler};
pub use clip::{generate_clip, generate_corpus, make_clip_pair, SynthConfig, VideoClipPair};
pub use isp::{isp_pipeline, pack_rggb, unpack_rggb, IspConfig};
pub use screen::render_screen;
