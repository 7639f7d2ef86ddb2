//! Return probabilities, Green functions and local limit classification for
//! symmetric random walks on free products of nilpotent groups.

pub mod adapted;
pub mod classify;
pub mod engine;
pub mod error;
pub mod fit;
pub mod green;
pub mod groups;
pub mod measures;
pub mod oracles;
pub mod parabolic;

pub use error::{GroupError, MeasureError, NumericError};
pub use groups::{GroupElement, GroupSpec, Letter};
pub use measures::{AdaptedSpec, ConvolutionSeries, SeriesRow, SparseMeasure};
