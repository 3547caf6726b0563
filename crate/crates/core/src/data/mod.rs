pub mod dataset;
pub mod font;
pub mod pnm;
pub mod render;

pub use dataset::{from_pnm, gen_dataset, load_dataset, stack_images, to_pnm, write_dataset, LabeledSample, LABELS_FILE};
pub use pnm::PnmImage;
pub use render::{render_text, Style};
