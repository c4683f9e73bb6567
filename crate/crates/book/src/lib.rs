//! Compiles the guide chapters as doc-tests, one module per chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/reward.md")]
pub mod reward {}
#[doc = include_str!("../../../book/src/cis.md")]
pub mod cis {}
#[doc = include_str!("../../../book/src/larm.md")]
pub mod larm {}
#[doc = include_str!("../../../book/src/ppo.md")]
pub mod ppo {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/diffcore.md")]
pub mod diffcore {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
