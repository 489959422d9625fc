//! Video ingestion, frame-pair sampling, and the synthetic sprite corpus.

pub mod dataset;
pub mod matrix;
pub mod sampling;
pub mod sprites;

pub use dataset::{write_dataset, Dataset, Manifest, ManifestEntry, Video};
pub use matrix::{read_matrix, write_matrix, BinMatrix, MatrixData};
pub use sampling::{crop_pair, epoch_pairs, sample_frame_pair, sample_pair, FrameIndices, FramePair, NormBox, PairMeta, SamplingConfig};
pub use sprites::{synth_step, Background, Direction, FlowMap, RenderedFrame, SegMap, Shape, Sprite, SpriteConfig, SpriteWorld};
