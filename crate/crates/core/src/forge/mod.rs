//! Factorized dataset synthesis, weakly supervised pair construction and
//! train/test splits with held-out nuisance values.

pub mod digits;
pub mod factors;
pub mod manifest;
pub mod pairs;
pub mod rotate;
pub mod shapes;
pub mod splits;

pub use digits::{ColoredMnist, ColoredMnistConfig, Palette, RotationSets};
pub use factors::{Factor, FactorGrid, FactorSpec, FactorTuple, Image, ImageShape, Renderer};
pub use manifest::{Dataset, DatasetConfig, DatasetManifest};
pub use pairs::{sample_pair, sample_pair_seeded, PairBatch, PairSample};
pub use rotate::render_rotated;
pub use shapes::{synth_shapes_grid, ShapesConfig};
pub use splits::{make_splits, Side, Split, SplitPolicy};
