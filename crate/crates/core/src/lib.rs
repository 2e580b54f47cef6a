#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod corpus;
pub mod metrics;
pub mod mle;
pub mod negatives;
pub mod optim;
pub mod pipeline;
pub mod ppo;
pub mod reward;
pub mod seeding;
pub mod seqmodel;
pub mod verify;
