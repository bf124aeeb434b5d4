pub mod attribution;
pub mod datahub;
pub mod diffcore;
pub mod fusion_model;
mod init;
pub mod journey_encoder;
pub mod replay;
pub mod user_cam;
