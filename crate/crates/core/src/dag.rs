//! Topologically sorted causal DAGs over input and chain nodes.
//!
//! Nodes `0..n_inputs` are the inputs; node `n_inputs + k` is chain position
//! `k` (zero-based), so the answer is node `n_inputs + n_chain - 1`. Chain
//! node `k` may only draw parents from nodes `0..n_inputs + k`.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeqRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dag {
    pub n_inputs: usize,
    pub n_chain: usize,
    pub fan_in: usize,
    pub parents: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DagViolation {
    Empty,
    ChainCount { expected: usize, found: usize },
    FanIn { fan_in: usize, n_inputs: usize },
    ParentCount { node: usize, expected: usize, found: usize },
    NotTopological { node: usize, parent: usize },
    DuplicateParent { node: usize, parent: usize },
}

impl fmt::Display for DagViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DagViolation::Empty => write!(f, "dag has no inputs or no chain nodes"),
            DagViolation::ChainCount { expected, found } => {
                write!(f, "expected {expected} parent lists, found {found}")
            }
            DagViolation::FanIn { fan_in, n_inputs } => {
                write!(f, "fan-in {fan_in} outside [1, {n_inputs}]")
            }
            DagViolation::ParentCount {
                node,
                expected,
                found,
            } => write!(f, "chain node {node} has {found} parents, expected {expected}"),
            DagViolation::NotTopological { node, parent } => write!(
                f,
                "chain node {node} lists parent {parent}, which is not an input or an earlier chain node"
            ),
            DagViolation::DuplicateParent { node, parent } => {
                write!(f, "chain node {node} lists parent {parent} more than once")
            }
        }
    }
}

impl std::error::Error for DagViolation {}

/// Samples a DAG from the class with `n_inputs` inputs, requested fan-in
/// `fan_in` (clamped to `n_inputs`) and `n_chain` chain nodes.
///
/// Each chain node draws its parents uniformly without replacement from all
/// earlier nodes. Parent lists are stored sorted.
pub fn sample_dag(n_inputs: usize, fan_in: usize, n_chain: usize, rng: &mut SeqRng) -> Result<Dag> {
    if n_inputs == 0 || fan_in == 0 || n_chain == 0 {
        return Err(Error::config(format!(
            "dag parameters must be >= 1 (N={n_inputs}, M={fan_in}, C={n_chain})"
        )));
    }
    let fan_in = fan_in.min(n_inputs);
    let parents = (0..n_chain)
        .map(|k| {
            let mut p = rng.choose_distinct(n_inputs + k, fan_in);
            p.sort_unstable();
            p
        })
        .collect();
    Ok(Dag {
        n_inputs,
        n_chain,
        fan_in,
        parents,
    })
}

impl Dag {
    /// Returns the first violated structural invariant, if any.
    pub fn validate(&self) -> std::result::Result<(), DagViolation> {
        if self.n_inputs == 0 || self.n_chain == 0 {
            return Err(DagViolation::Empty);
        }
        if self.parents.len() != self.n_chain {
            return Err(DagViolation::ChainCount {
                expected: self.n_chain,
                found: self.parents.len(),
            });
        }
        if self.fan_in == 0 || self.fan_in > self.n_inputs {
            return Err(DagViolation::FanIn {
                fan_in: self.fan_in,
                n_inputs: self.n_inputs,
            });
        }
        for (k, list) in self.parents.iter().enumerate() {
            let node = self.n_inputs + k;
            if list.len() != self.fan_in {
                return Err(DagViolation::ParentCount {
                    node,
                    expected: self.fan_in,
                    found: list.len(),
                });
            }
            for (i, &p) in list.iter().enumerate() {
                if p >= node {
                    return Err(DagViolation::NotTopological { node, parent: p });
                }
                if list[..i].contains(&p) {
                    return Err(DagViolation::DuplicateParent { node, parent: p });
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.n_inputs + self.n_chain
    }

    pub fn answer_node(&self) -> usize {
        self.num_nodes() - 1
    }

    /// Parents of a node; inputs have none.
    pub fn parents_of(&self, node: usize) -> &[usize] {
        if node < self.n_inputs {
            &[]
        } else {
            &self.parents[node - self.n_inputs]
        }
    }

    /// For every node, whether a directed path leads from it to the answer
    /// node. The answer node itself is marked reachable.
    pub fn reaches_answer(&self) -> Vec<bool> {
        let mut seen = vec![false; self.num_nodes()];
        let answer = self.answer_node();
        seen[answer] = true;
        let mut queue = VecDeque::from([answer]);
        while let Some(node) = queue.pop_front() {
            for &p in self.parents_of(node) {
                if !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        seen
    }

    /// One flag per intermediate chain step (positions `0..n_chain-1`): does
    /// the answer causally depend on it.
    pub fn steps_in_dag(&self) -> Vec<bool> {
        let reach = self.reaches_answer();
        (0..self.n_chain.saturating_sub(1))
            .map(|k| reach[self.n_inputs + k])
            .collect()
    }
}
