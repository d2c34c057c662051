//! Action-contrastive self-training for conversational agents.
//!
//! The crate covers the full pipeline: the conversation data model
//! ([`conversation`]), auxiliary model clients ([`clients`]), trainable
//! policies ([`policy`]), action-contrastive preference construction
//! ([`prefs`]), the DPO numerics ([`dpo`]), the quasi-online training loop
//! ([`trainer`]), metrics ([`metrics`]), ambiguous text-to-SQL synthesis
//! ([`ambigsql`]) and multi-turn evaluation ([`eval`]).

pub mod ambigsql;
pub mod clients;
pub mod conversation;
pub mod dpo;
pub mod eval;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod policy;
pub mod prefs;
pub mod prompts;
pub mod trainer;

pub use conversation::{
    complement_action, extend_state, Action, ConversationTurnState, DialogueMessage, PairOrigin,
    PreferencePair, Provenance, Response, Speaker, Trajectory,
};
pub use error::{Error, Result};
