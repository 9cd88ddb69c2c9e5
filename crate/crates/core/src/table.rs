//! The per-topic publisher/subscriber table a registry holds.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::codec::NodeId;
use crate::topic::TopicName;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Role {
    Publisher = 0,
    Subscriber = 1,
}

impl Role {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Role::Publisher),
            1 => Some(Role::Subscriber),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Role::Publisher => Role::Subscriber,
            Role::Subscriber => Role::Publisher,
        }
    }
}

/// A node as seen by the registry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub node_name: String,
    pub address: String,
    pub node_id: NodeId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TopicRecord {
    pub publishers: BTreeMap<NodeId, Endpoint>,
    pub subscribers: BTreeMap<NodeId, Endpoint>,
}

impl TopicRecord {
    pub fn role(&self, role: Role) -> &BTreeMap<NodeId, Endpoint> {
        match role {
            Role::Publisher => &self.publishers,
            Role::Subscriber => &self.subscribers,
        }
    }

    fn role_mut(&mut self, role: Role) -> &mut BTreeMap<NodeId, Endpoint> {
        match role {
            Role::Publisher => &mut self.publishers,
            Role::Subscriber => &mut self.subscribers,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.publishers.is_empty() && self.subscribers.is_empty()
    }

    /// True if some node other than `exclude` holds `role`.
    pub fn has_other(&self, role: Role, exclude: Option<NodeId>) -> bool {
        self.role(role).keys().any(|id| Some(*id) != exclude)
    }
}

/// Topics mapped to their publishers and subscribers. Endpoints are keyed by
/// node id, so a node appears at most once per role per topic, and a topic
/// whose two sets are both empty is dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegistryTable {
    topics: BTreeMap<TopicName, TopicRecord>,
}

impl RegistryTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `who` in `role` on `topic`. Returns false when the entry was
    /// already present (and leaves the table unchanged).
    pub fn insert(&mut self, topic: &TopicName, role: Role, who: Endpoint) -> bool {
        let set = self.topics.entry(topic.clone()).or_default().role_mut(role);
        match set.get(&who.node_id) {
            Some(existing) if *existing == who => false,
            _ => {
                set.insert(who.node_id, who);
                true
            }
        }
    }

    /// Removes `node` from `role` on `topic`, returning the removed endpoint.
    pub fn remove(&mut self, topic: &TopicName, role: Role, node: NodeId) -> Option<Endpoint> {
        let rec = self.topics.get_mut(topic)?;
        let removed = rec.role_mut(role).remove(&node);
        if rec.is_empty() {
            self.topics.remove(topic);
        }
        removed
    }

    /// Removes every entry held by `node`, returning what was removed.
    pub fn remove_node(&mut self, node: NodeId) -> Vec<(TopicName, Role, Endpoint)> {
        let mut removed = Vec::new();
        for (topic, rec) in self.topics.iter_mut() {
            for role in [Role::Publisher, Role::Subscriber] {
                if let Some(ep) = rec.role_mut(role).remove(&node) {
                    removed.push((topic.clone(), role, ep));
                }
            }
        }
        self.topics.retain(|_, rec| !rec.is_empty());
        removed
    }

    pub fn peers(&self, topic: &TopicName, role: Role) -> Vec<Endpoint> {
        self.topics
            .get(topic)
            .map(|rec| rec.role(role).values().cloned().collect())
            .unwrap_or_default()
    }

    pub fn get(&self, topic: &TopicName) -> Option<&TopicRecord> {
        self.topics.get(topic)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TopicName, &TopicRecord)> {
        self.topics.iter()
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn ep(n: u8) -> Endpoint {
        Endpoint {
            node_name: alloc::format!("n{n}"),
            address: "127.0.0.1:1".to_string(),
            node_id: NodeId([n; 16]),
        }
    }

    fn t(s: &str) -> TopicName {
        TopicName::new(s).unwrap()
    }

    #[test]
    fn insert_is_idempotent() {
        let mut tab = RegistryTable::new();
        assert!(tab.insert(&t("/t"), Role::Publisher, ep(1)));
        let before = tab.clone();
        assert!(!tab.insert(&t("/t"), Role::Publisher, ep(1)));
        assert_eq!(tab, before);
    }

    #[test]
    fn empty_topics_are_dropped() {
        let mut tab = RegistryTable::new();
        tab.insert(&t("/t"), Role::Publisher, ep(1));
        assert_eq!(tab.remove(&t("/t"), Role::Publisher, ep(1).node_id), Some(ep(1)));
        assert!(tab.is_empty());
        assert_eq!(tab.remove(&t("/t"), Role::Publisher, ep(1).node_id), None);
    }

    #[test]
    fn remove_node_clears_all_roles() {
        let mut tab = RegistryTable::new();
        tab.insert(&t("/a"), Role::Publisher, ep(1));
        tab.insert(&t("/b"), Role::Subscriber, ep(1));
        tab.insert(&t("/b"), Role::Publisher, ep(2));
        let removed = tab.remove_node(ep(1).node_id);
        assert_eq!(removed.len(), 2);
        assert_eq!(tab.len(), 1);
        assert_eq!(tab.peers(&t("/b"), Role::Publisher), [ep(2)]);
    }
}
