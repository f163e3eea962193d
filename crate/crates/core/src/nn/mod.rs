//! Neural-network building blocks on top of the tensor engine: parameter
//! store, primitive layers, composite blocks, and architecture audit plans.

pub mod audit;
pub mod blocks;
pub mod layers;
pub mod store;

pub use audit::{ArchPlan, ArchRow};
pub use blocks::{GegluMlp, Mhsa, ResNet2d, TransformerBlock, UpsampleResizeConv};
pub use layers::{Conv2d, GroupNorm, LayerNorm, Linear};
pub use store::{ParamId, ParamStore};
