//! Engagement sequences as seen by the user tower.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Like,
    Comment,
    PostClick,
    Share,
    CommentClick,
    CommentLike,
    CommentReact,
    TimeSpent,
    View,
    /// Reserved for synthesized cold-start history; never observed in real streams.
    Backfill,
}

impl ActionType {
    /// Actions that can appear in an engagement stream.
    pub const OBSERVED: [ActionType; 9] = [
        ActionType::Like,
        ActionType::Comment,
        ActionType::PostClick,
        ActionType::Share,
        ActionType::CommentClick,
        ActionType::CommentLike,
        ActionType::CommentReact,
        ActionType::TimeSpent,
        ActionType::View,
    ];

    /// Row of the action embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionType::Like => "like",
            ActionType::Comment => "comment",
            ActionType::PostClick => "post_click",
            ActionType::Share => "share",
            ActionType::CommentClick => "comment_click",
            ActionType::CommentLike => "comment_like",
            ActionType::CommentReact => "comment_react",
            ActionType::TimeSpent => "time_spent",
            ActionType::View => "view",
            ActionType::Backfill => "backfill",
        }
    }
}

/// Action table rows: every [`ActionType`] plus the null slot used by CLS.
pub const ACTION_SLOTS: usize = 11;
pub const NULL_ACTION: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Feed,
    GroupsTab,
    Search,
    Notifications,
}

impl Surface {
    pub const ALL: [Surface; 4] = [Surface::Feed, Surface::GroupsTab, Surface::Search, Surface::Notifications];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const SURFACE_SLOTS: usize = 5;
pub const NULL_SURFACE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub post_id: u64,
    pub action: ActionType,
    pub surface: Surface,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetEvent {
    pub post_id: u64,
    pub timestamp: i64,
}

/// One training or evaluation example: a history window (oldest first) and
/// the posts engaged after `cutoff_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub user_id: u64,
    pub history: Vec<HistoryEvent>,
    pub long_targets: Vec<TargetEvent>,
    pub cutoff_time: i64,
}

impl SequenceSample {
    /// Entry `t` is the post engaged at history position `t + 1`.
    pub fn short_targets(&self) -> impl Iterator<Item = u64> + '_ {
        self.history.iter().skip(1).map(|e| e.post_id)
    }

    /// Checks ordering and leakage invariants.
    pub fn is_well_formed(&self) -> bool {
        let increasing = self.history.windows(2).all(|w| w[0].timestamp < w[1].timestamp);
        let before = self.history.iter().all(|e| e.timestamp < self.cutoff_time);
        let after = self.long_targets.iter().all(|t| t.timestamp >= self.cutoff_time);
        let disjoint = self
            .long_targets
            .iter()
            .all(|t| self.history.iter().all(|e| e.post_id != t.post_id));
        increasing && before && after && disjoint
    }

    /// Keeps only the most recent `l_max` history events.
    pub fn truncate_history(&mut self, l_max: usize) {
        if self.history.len() > l_max {
            let drop = self.history.len() - l_max;
            self.history.drain(..drop);
        }
    }
}

/// Read access to fixed post embeddings.
pub trait EmbeddingLookup {
    fn dim(&self) -> usize;
    fn get(&self, post_id: u64) -> Option<&[f64]>;
}

impl EmbeddingLookup for alloc::collections::BTreeMap<u64, Vec<f64>> {
    fn dim(&self) -> usize {
        self.values().next().map_or(0, Vec::len)
    }

    fn get(&self, post_id: u64) -> Option<&[f64]> {
        alloc::collections::BTreeMap::get(self, &post_id).map(Vec::as_slice)
    }
}
