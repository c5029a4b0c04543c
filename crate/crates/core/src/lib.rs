//! Navigation agents on gridworlds with an interleaved state/action
//! transformer and a next-state prediction auxiliary loss.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod metrics;
pub mod model;
pub mod rl;
pub mod il;
pub mod harness;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/environment.md")]
    struct Environment;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/causal_loss.md")]
    struct CausalLoss;
    #[doc = include_str!("../../../book/src/ppo.md")]
    struct Ppo;
    #[doc = include_str!("../../../book/src/imitation.md")]
    struct Imitation;
    #[doc = include_str!("../../../book/src/harness.md")]
    struct Harness;
}
