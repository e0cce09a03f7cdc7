// mdbook cannot compile snippets against a crate from crates.io or a path, so
// every chapter is pulled into this crate as a doc comment and `cargo test`
// runs the listings as doctests. One module per chapter keeps failures easy
// to locate.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/data.md")]
pub mod data {}
#[doc = include_str!("src/dtw.md")]
pub mod dtw {}
#[doc = include_str!("src/gak.md")]
pub mod gak {}
#[doc = include_str!("src/clustering.md")]
pub mod clustering {}
#[doc = include_str!("src/validity.md")]
pub mod validity {}
#[doc = include_str!("src/pipeline.md")]
pub mod pipeline {}
