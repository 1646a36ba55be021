//! Node, relation and edge vocabulary shared by every module.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Seconds in one day; all timestamps are seconds since the epoch.
pub const DAY: f64 = 86_400.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Freelancer,
    Client,
    JobPost,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::Freelancer, NodeType::Client, NodeType::JobPost];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Freelancer => "freelancer",
            NodeType::Client => "client",
            NodeType::JobPost => "job_post",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        NodeType::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// client -> job_post
    Posted,
    /// freelancer -> job_post
    Applied,
    /// job_post -> freelancer
    Invited,
    /// job_post -> freelancer
    Interviewed,
    /// job_post -> freelancer, stamped at contract start
    Hired,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::Posted,
        Relation::Applied,
        Relation::Invited,
        Relation::Interviewed,
        Relation::Hired,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Posted => "posted",
            Relation::Applied => "applied",
            Relation::Invited => "invited",
            Relation::Interviewed => "interviewed",
            Relation::Hired => "hired",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Relation::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Traversed from the stored source to the stored destination.
    Forward,
    /// Traversed against the stored direction.
    Reverse,
}

/// A relation tag augmented with the traversal direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelDir {
    pub relation: Relation,
    pub direction: Direction,
}

impl RelDir {
    pub const COUNT: usize = Relation::COUNT * 2;

    pub fn new(relation: Relation, direction: Direction) -> Self {
        RelDir {
            relation,
            direction,
        }
    }

    pub fn index(self) -> usize {
        self.relation.index() * 2 + matches!(self.direction, Direction::Reverse) as usize
    }

    pub fn from_index(ix: usize) -> Self {
        let relation = Relation::ALL[ix / 2];
        let direction = if ix % 2 == 0 {
            Direction::Forward
        } else {
            Direction::Reverse
        };
        RelDir {
            relation,
            direction,
        }
    }

    pub fn all() -> impl Iterator<Item = RelDir> {
        (0..Self::COUNT).map(RelDir::from_index)
    }
}

impl fmt::Display for RelDir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.direction {
            Direction::Forward => write!(f, "{}", self.relation),
            Direction::Reverse => write!(f, "{}_rev", self.relation),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub node_type: NodeType,
    pub node_id: u32,
}

impl NodeRef {
    pub fn new(node_type: NodeType, node_id: u32) -> Self {
        NodeRef { node_type, node_id }
    }

    pub fn freelancer(id: u32) -> Self {
        Self::new(NodeType::Freelancer, id)
    }

    pub fn client(id: u32) -> Self {
        Self::new(NodeType::Client, id)
    }

    pub fn job_post(id: u32) -> Self {
        Self::new(NodeType::JobPost, id)
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node_type, self.node_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestampedEdge {
    pub src: NodeRef,
    pub dst: NodeRef,
    pub relation: Relation,
    pub timestamp: f64,
    pub edge_seq: u64,
}

impl TimestampedEdge {
    /// The endpoint reached when leaving `from` along this edge, with the
    /// direction of that traversal. `None` if `from` is not an endpoint.
    pub fn traverse_from(&self, from: NodeRef) -> Option<(NodeRef, RelDir)> {
        if self.src == from {
            Some((self.dst, RelDir::new(self.relation, Direction::Forward)))
        } else if self.dst == from {
            Some((self.src, RelDir::new(self.relation, Direction::Reverse)))
        } else {
            None
        }
    }
}

/// Retrieval task; the first side is the query side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "FL->JP")]
    FlToJp,
    #[serde(rename = "JP->FL")]
    JpToFl,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::FlToJp, Task::JpToFl];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::FlToJp => "FL->JP",
            Task::JpToFl => "JP->FL",
        }
    }

    pub fn query_type(self) -> NodeType {
        match self {
            Task::FlToJp => NodeType::Freelancer,
            Task::JpToFl => NodeType::JobPost,
        }
    }

    pub fn candidate_type(self) -> NodeType {
        match self {
            Task::FlToJp => NodeType::JobPost,
            Task::JpToFl => NodeType::Freelancer,
        }
    }

    /// Task whose query side has the given node type.
    pub fn for_query(node_type: NodeType) -> Option<Task> {
        match node_type {
            NodeType::Freelancer => Some(Task::FlToJp),
            NodeType::JobPost => Some(Task::JpToFl),
            NodeType::Client => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
