//! Frame-to-frame registration and sequential stitching.

pub mod features;
pub mod icp;
pub mod pair;
pub mod rigid;

pub use features::{
    detect_features, detect_keypoints, detect_surface_features, match_features, Correspondence2D,
    Feature, FeatureParams, Keypoint,
};
pub use icp::{icp_refine, icp_refine_with, Association, IcpParams, IcpTarget};
pub use pair::{
    boundary_mask, build_map, chain_transforms, detect_frames, lift_correspondences, lift_point,
    register_pair, register_pair_detailed, stitch_sequence, voxel_downsample, Frame, GlobalMap,
    LiftResult, PairReport, RegistrationParams, StitchResult,
};
pub use rigid::{
    estimate_rigid_transform, estimate_rigid_transform_inliers, kabsch, Correspondence3D,
    RansacParams, RegistrationResult,
};
