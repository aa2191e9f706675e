pub mod autodiff;
pub mod cohort;
pub mod detector;
pub mod error;
pub mod metrics;
pub mod oximetry;
pub mod pipeline;
pub mod preproc;
pub mod stager;
pub mod types;

pub use error::{Error, Result};
pub use types::{AnnotatedEvent, DetectedSegment, EventKind, Granularity, Hypnogram, SleepStage, SpO2Trace};
