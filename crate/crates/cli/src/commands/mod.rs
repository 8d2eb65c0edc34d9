pub mod attn_export;
pub mod cv;
pub mod eval;
pub mod gen_data;
pub mod gradcheck;
pub mod train;
