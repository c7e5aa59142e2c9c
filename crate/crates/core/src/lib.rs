//! Core engine for language-conditioned object arrangement on a pixel grid.
//!
//! The pipeline: render a scene, segment it into instances, embed instance
//! crops and the instruction into a joint space, fuse instance and global
//! context into per-pixel confidence maps, then run a two-stage policy that
//! picks a target pixel and places it by rotated cross-correlation.

pub mod embed;
pub mod error;
pub mod eval;
pub mod formats;
pub mod fusion;
pub mod grid;
pub mod policy;
pub mod scene;
pub mod seg;
pub mod train;

pub use embed::{
    encode_text, encode_visual, featurize_visual, resolve_partition, EmbeddingVector,
    EncoderGrads, EncoderParams, ParamSlot, ParameterPartition, PartitionPolicy, TextQuery,
    EMB_DIM, F_TXT, F_VIS,
};
pub use error::{EngineError, Result};
pub use eval::{
    run_benchmark, run_eval, BenchmarkConfig, BenchmarkReport, BenchmarkRow, EpisodeRecord,
    EvalConfig, EvalReport, ENGINE_VERSION,
};
pub use formats::{
    read_checkpoint, read_embeddings, read_episode, read_label_pgm, write_checkpoint,
    write_confidence_pgm, write_embeddings, write_episode, write_label_pgm, write_ppm,
    write_score_pgm,
};
pub use fusion::{
    confidence_map, cosine, fuse, fusion_weights, similarity_profile, ConfidenceMap, FusionConfig,
    SimilarityProfile, BACKGROUND_CONFIDENCE, DEFAULT_TAU,
};
pub use grid::{
    argmax_pixel, cross_correlate, cross_correlate_fast, cross_entropy, rot90, rotate_crop, rotate_crop_degrees,
    softmax2d,
    ConvLayer, ConvStack, Distribution2D, Grid2D, RotationAngle, NUM_ROTATIONS,
};
pub use policy::{
    act, extract_pick_crop, filter_text, predict_pick, predict_place, InstructionPair,
    PickDecision, PlaceDecision, PolicyNets, DEFAULT_CROP_SIZE, FEATURE_CHANNELS,
};
pub use scene::{
    check_success, containment_fraction, generate_scene, instruction_for, make_episode, render,
    Episode, ObjectKind, Pose, Scene, SceneObject, Split, Stencil, TaskSpec, GRID_SIZE, PALETTE,
    SUCCESS_THRESHOLD,
};
pub use seg::{crop, from_label_map, segment, to_label_map, InstanceMask, SegmentationResult};
pub use train::{
    gradient_check, loss, loss_and_grads, make_demonstrations, train_few_shot, Demonstration,
    LossParts, NetGrads, TrainConfig,
};
