pub mod audit;
pub mod config;
pub mod layers;
pub mod mask;
pub mod params;
pub mod svtr;

pub use config::{BlockKind, StageGeometry, SvtrConfig, PRESET_NAMES};
pub use mask::local_attention_mask;
pub use params::{EntryKind, ParamSpec, ParamStore};
pub use svtr::{Forward, Mode, SvtrModel};
