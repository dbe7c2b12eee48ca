mod altinc;
mod boundless;
mod eval;
mod gen;
mod pretrain;
mod render;
mod select;

pub use altinc::cmd_altinc;
pub use boundless::cmd_boundless;
pub use eval::cmd_eval;
pub use gen::cmd_gen;
pub use pretrain::cmd_pretrain;
pub use render::cmd_render;
pub use select::cmd_select;
