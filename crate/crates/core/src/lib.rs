pub mod config;
pub mod eskf;
pub mod frames;
pub mod geom;
pub mod mag_global;
pub mod mag_local;
pub mod mains;
pub mod sim;
pub mod slam_loose;
pub mod slam_tight;
pub mod trajectory;
