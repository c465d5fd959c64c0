//! Resource-aware reasoning orchestration: a simulator, a PPO trainer for the
//! ACT/THINK decider, and an experiment harness around both.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod cli;
pub mod diffnet;
pub mod domain;
pub mod envsim;
pub mod harness;
pub mod par;
pub mod policy;
pub mod ppo;
pub mod reasoning;
pub mod report;
pub mod rollout;
