//! White-box watermark schemes: keys, embedding, extraction.

mod bits;
mod embed;
mod extract;
mod key;

pub use bits::BitString;
pub use embed::{default_target, embed, embed_with_key, make_key, EmbedConfig, TRIGGERS};
pub use extract::{
    extract, extract_activation, extract_greedy, extract_passport, extract_sign_of_scale, extract_uchida, statistic,
};
pub use key::{Scheme, WatermarkKey};
