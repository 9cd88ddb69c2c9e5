//! Which topics the proxy pair should tunnel, and in which direction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::codec::{NodeId, Origin};
use crate::control::TopicPresence;
use crate::table::{RegistryTable, Role};
use crate::topic::TopicName;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    EdgeToCloud,
    CloudToEdge,
}

impl Direction {
    /// The side messages are read from.
    pub fn source(self) -> Origin {
        match self {
            Direction::EdgeToCloud => Origin::Edge,
            Direction::CloudToEdge => Origin::Cloud,
        }
    }

    pub fn sink(self) -> Origin {
        self.source().other()
    }

    pub fn from_source(side: Origin) -> Self {
        match side {
            Origin::Edge => Direction::EdgeToCloud,
            Origin::Cloud => Direction::CloudToEdge,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::EdgeToCloud => "edge->cloud",
            Direction::CloudToEdge => "cloud->edge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BridgeEntry {
    pub topic: TopicName,
    pub direction: Direction,
}

/// The set of (topic, direction) pairs being tunneled. Being a set, each
/// topic has at most one entry per direction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BridgeTable {
    entries: BTreeSet<BridgeEntry>,
}

impl BridgeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, topic: TopicName, direction: Direction) -> bool {
        self.entries.insert(BridgeEntry { topic, direction })
    }

    pub fn remove(&mut self, entry: &BridgeEntry) -> bool {
        self.entries.remove(entry)
    }

    pub fn contains(&self, topic: &TopicName, direction: Direction) -> bool {
        self.entries.iter().any(|e| e.topic == *topic && e.direction == direction)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BridgeEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Restricts the table to the given topics.
    pub fn retain_topics(&mut self, allow: &[TopicName]) {
        self.entries.retain(|e| allow.contains(&e.topic));
    }

    /// Entries in `self` missing from `other`.
    pub fn difference<'a>(&'a self, other: &'a BridgeTable) -> impl Iterator<Item = &'a BridgeEntry> {
        self.entries.difference(&other.entries)
    }
}

impl FromIterator<BridgeEntry> for BridgeTable {
    fn from_iter<I: IntoIterator<Item = BridgeEntry>>(iter: I) -> Self {
        BridgeTable {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Per-topic (has_pub, has_sub) flags for one side.
pub type Presence = BTreeMap<TopicName, (bool, bool)>;

/// Summarizes a registry snapshot, ignoring registrations held by `exclude`
/// (the proxy endpoint itself).
pub fn summarize(table: &RegistryTable, exclude: Option<NodeId>) -> Presence {
    table
        .iter()
        .map(|(topic, rec)| {
            (
                topic.clone(),
                (
                    rec.has_other(Role::Publisher, exclude),
                    rec.has_other(Role::Subscriber, exclude),
                ),
            )
        })
        .filter(|(_, (p, s))| *p || *s)
        .collect()
}

pub fn presence_to_wire(p: &Presence) -> Vec<TopicPresence> {
    p.iter()
        .map(|(topic, &(has_pub, has_sub))| TopicPresence {
            topic: topic.clone(),
            has_pub,
            has_sub,
        })
        .collect()
}

pub fn presence_from_wire(entries: &[TopicPresence]) -> Presence {
    entries
        .iter()
        .map(|e| (e.topic.clone(), (e.has_pub, e.has_sub)))
        .collect()
}

/// A topic flows edge to cloud when the edge has a publisher and the cloud a
/// subscriber, and symmetrically the other way.
pub fn discover_from_presence(edge: &Presence, cloud: &Presence) -> BridgeTable {
    let mut out = BridgeTable::new();
    for (topic, &(edge_pub, edge_sub)) in edge {
        let (cloud_pub, cloud_sub) = cloud.get(topic).copied().unwrap_or((false, false));
        if edge_pub && cloud_sub {
            out.insert(topic.clone(), Direction::EdgeToCloud);
        }
        if cloud_pub && edge_sub {
            out.insert(topic.clone(), Direction::CloudToEdge);
        }
    }
    out
}

/// Computes the bridge table from two registry snapshots that already exclude
/// the proxy endpoints' own registrations.
pub fn discover_bridgeable(edge: &RegistryTable, cloud: &RegistryTable) -> BridgeTable {
    discover_from_presence(&summarize(edge, None), &summarize(cloud, None))
}
