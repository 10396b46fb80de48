//! Vision-grounded execution monitoring for symbolic robot tasks.
//!
//! A plan library drives execution, a simulated perception stack verifies
//! states before and after every action, and a sequence-to-sequence model
//! with atom-level attention proposes the next goal state.

pub mod symbolic;
pub mod pddl;
pub mod planner;
pub mod perception;
pub mod goalnet;
pub mod monitor;
pub mod harness;

pub use symbolic::{Atom, State, TaskSentence, TokenSeq, Vocabulary};
