//! Event logs, session division, instance construction and in-batch negatives.

mod diversity;
mod event;
mod instance;
mod negatives;
mod session;

pub use diversity::{gini_of_counts, session_entropy, session_gini};
pub use event::{parse_events, parse_events_str, Behavior, Event, EventLog, Sequence, Vocab, MASK_ITEM};
pub use instance::{prefix_expand, ExpandParams, TrainingInstance};
pub use negatives::{sample_in_batch_negatives, ScoredTargets};
pub use session::{sess_div, Session};
