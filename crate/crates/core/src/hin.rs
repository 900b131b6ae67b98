//! Bipartite user–product graph and the random-walk corpus built on it.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{IdIndex, InteractionSet};
use crate::exec::Exec;
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    User(u32),
    Product(u32),
}

impl Node {
    pub fn is_user(self) -> bool {
        matches!(self, Node::User(_))
    }

    pub fn is_product(self) -> bool {
        matches!(self, Node::Product(_))
    }
}

/// Purchase graph over users and warm products. Every node has degree ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Hin {
    users: IdIndex,
    products: IdIndex,
    user_adj: Vec<Vec<u32>>,
    product_adj: Vec<Vec<u32>>,
}

/// Builds the graph from training interactions; every training product is
/// warm by construction.
pub fn build_hin(train: &InteractionSet) -> Result<Hin> {
    if train.is_empty() {
        return Err(Error::Precondition("cannot build a graph from no interactions".into()));
    }
    let mut user_adj = vec![Vec::new(); train.users().len()];
    let mut product_adj = vec![Vec::new(); train.products().len()];
    for &(u, p) in train.pairs() {
        user_adj[u].push(p as u32);
        product_adj[p].push(u as u32);
    }
    for adj in user_adj.iter_mut().chain(product_adj.iter_mut()) {
        adj.sort_unstable();
        adj.dedup();
    }

    // Both indices are derived from the interactions, so no node is isolated.
    debug_assert!(user_adj.iter().chain(&product_adj).all(|a| !a.is_empty()));

    Ok(Hin {
        users: train.users().clone(),
        products: train.products().clone(),
        user_adj,
        product_adj,
    })
}

impl Hin {
    pub fn users(&self) -> &IdIndex {
        &self.users
    }

    pub fn products(&self) -> &IdIndex {
        &self.products
    }

    pub fn n_users(&self) -> usize {
        self.user_adj.len()
    }

    pub fn n_products(&self) -> usize {
        self.product_adj.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users() + self.n_products()
    }

    pub fn n_edges(&self) -> usize {
        self.user_adj.iter().map(Vec::len).sum()
    }

    pub fn user_adj(&self, u: u32) -> &[u32] {
        &self.user_adj[u as usize]
    }

    pub fn product_adj(&self, p: u32) -> &[u32] {
        &self.product_adj[p as usize]
    }

    pub fn neighbours(&self, node: Node) -> impl Iterator<Item = Node> + '_ {
        let (adj, make): (&[u32], fn(u32) -> Node) = match node {
            Node::User(u) => (self.user_adj(u), Node::Product),
            Node::Product(p) => (self.product_adj(p), Node::User),
        };
        adj.iter().map(move |&i| make(i))
    }

    pub fn degree(&self, node: Node) -> usize {
        match node {
            Node::User(u) => self.user_adj(u).len(),
            Node::Product(p) => self.product_adj(p).len(),
        }
    }

    /// Dense position of a node: users first, then products.
    pub fn slot(&self, node: Node) -> usize {
        match node {
            Node::User(u) => u as usize,
            Node::Product(p) => self.n_users() + p as usize,
        }
    }

    pub fn node_at(&self, slot: usize) -> Node {
        if slot < self.n_users() {
            Node::User(slot as u32)
        } else {
            Node::Product((slot - self.n_users()) as u32)
        }
    }

    pub fn user(&self, id: &str) -> Option<Node> {
        self.users.get(id).map(|u| Node::User(u as u32))
    }

    pub fn product(&self, id: &str) -> Option<Node> {
        self.products.get(id).map(|p| Node::Product(p as u32))
    }

    pub fn token(&self, node: Node) -> NodeToken<'_> {
        NodeToken { hin: self, node }
    }
}

/// `u:<id>` / `p:<id>` display form used in corpus dumps.
pub struct NodeToken<'a> {
    hin: &'a Hin,
    node: Node,
}

impl fmt::Display for NodeToken<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Node::User(u) => write!(f, "u:{}", self.hin.users.id(u as usize)),
            Node::Product(p) => write!(f, "p:{}", self.hin.products.id(p as usize)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    pub nodes: Vec<Node>,
}

/// Uniform random walk of exactly `wl` nodes starting at `start`.
pub fn random_walk(h: &Hin, start: Node, wl: usize, rng: &mut Rng) -> Walk {
    let mut nodes = Vec::with_capacity(wl);
    let mut current = start;
    nodes.push(current);
    while nodes.len() < wl {
        current = match current {
            Node::User(u) => {
                let adj = h.user_adj(u);
                Node::Product(adj[rng.random_range(0..adj.len())])
            }
            Node::Product(p) => {
                let adj = h.product_adj(p);
                Node::User(adj[rng.random_range(0..adj.len())])
            }
        };
        nodes.push(current);
    }
    Walk { nodes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Walks started from every node.
    pub walks_per_node: usize,
    pub walk_length: usize,
    /// Full context width including the center; odd.
    pub window: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            walks_per_node: 10,
            walk_length: 15,
            window: 7,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walks_per_node == 0 {
            return Err(Error::Config("walks_per_node must be at least 1".into()));
        }
        if self.walk_length < 2 {
            return Err(Error::Config("walk_length must be at least 2".into()));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window must be odd and at least 3, got {}",
                self.window
            )));
        }
        Ok(())
    }

    pub fn half_width(&self) -> usize {
        (self.window - 1) / 2
    }
}

/// Walk corpus, regenerated on demand from its seed.
///
/// Walks are produced in passes: pass `r` starts one walk from every node,
/// visiting start nodes in a seed-shuffled order. Walk `(start, r)` draws
/// from its own stream keyed by the pair, so the sequence is the same
/// however many threads generate it.
#[derive(Debug, Clone)]
pub struct Corpus<'a> {
    hin: &'a Hin,
    cfg: CorpusConfig,
}

pub fn generate_corpus<'a>(h: &'a Hin, cfg: &CorpusConfig) -> Result<Corpus<'a>> {
    cfg.validate()?;
    Ok(Corpus { hin: h, cfg: *cfg })
}

impl<'a> Corpus<'a> {
    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    pub fn hin(&self) -> &'a Hin {
        self.hin
    }

    /// Total number of walks.
    pub fn len(&self) -> usize {
        self.cfg.walks_per_node * self.hin.n_nodes()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn passes(&self) -> usize {
        self.cfg.walks_per_node
    }

    pub fn pass_order(&self, pass: usize) -> Vec<Node> {
        let mut order: Vec<Node> = (0..self.hin.n_nodes())
            .map(|s| self.hin.node_at(s))
            .collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, &[u64::MAX, pass as u64]));
        order
    }

    pub fn pass(&self, pass: usize, exec: &Exec) -> Vec<Walk> {
        let order = self.pass_order(pass);
        exec.map(&order, |&start| {
            let mut rng = rng::stream(
                self.cfg.seed,
                &[self.hin.slot(start) as u64, pass as u64],
            );
            random_walk(self.hin, start, self.cfg.walk_length, &mut rng)
        })
    }

    /// All walks in corpus order, one pass held in memory at a time.
    pub fn walks<'e>(&'e self, exec: &'e Exec) -> impl Iterator<Item = Walk> + 'e {
        (0..self.passes()).flat_map(move |r| self.pass(r, exec))
    }

    /// One walk per line, space-separated `u:<id>` / `p:<id>` tokens.
    pub fn dump(&self, path: &Path, exec: &Exec) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for walk in self.walks(exec) {
            let line = walk
                .nodes
                .iter()
                .map(|&n| self.hin.token(n).to_string())
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Skip-gram pairs from one walk: each position paired with every other
/// position at most `(window - 1) / 2` away, truncated at the walk ends.
pub fn context_pairs(walk: &[Node], window: usize) -> impl Iterator<Item = (Node, Node)> + '_ {
    let half = window.saturating_sub(1) / 2;
    (0..walk.len()).flat_map(move |i| {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(walk.len() - 1);
        (lo..=hi)
            .filter(move |&j| j != i)
            .map(move |j| (walk[i], walk[j]))
    })
}
