//! Tree-structured joint graphs.
//!
//! Built-in layouts use the MPII (16 joints) and LSP (14 joints) orderings.
//! Their edges follow the usual kinematic tree:
//!
//! * MPII: ankle–knee–hip–pelvis per leg, pelvis–thorax–upper-neck–head-top,
//!   and thorax–shoulder–elbow–wrist per arm.
//! * LSP: ankle–knee–hip–neck per leg, neck–head-top, and
//!   neck–shoulder–elbow–wrist per arm.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::autodiff::NeighborLists;
use crate::error::{Error, Result};

/// Column groups of the per-joint evaluation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JointGroup {
    Head,
    Shoulder,
    Elbow,
    Wrist,
    Hip,
    Knee,
    Ankle,
    Other,
}

impl JointGroup {
    pub const TABLE: [JointGroup; 7] = [
        JointGroup::Head,
        JointGroup::Shoulder,
        JointGroup::Elbow,
        JointGroup::Wrist,
        JointGroup::Hip,
        JointGroup::Knee,
        JointGroup::Ankle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            JointGroup::Head => "Head",
            JointGroup::Shoulder => "Sho",
            JointGroup::Elbow => "Elb",
            JointGroup::Wrist => "Wri",
            JointGroup::Hip => "Hip",
            JointGroup::Knee => "Kne",
            JointGroup::Ankle => "Ank",
            JointGroup::Other => "Other",
        }
    }

    fn of(name: &str) -> JointGroup {
        let base = name
            .strip_prefix("r-")
            .or_else(|| name.strip_prefix("l-"))
            .unwrap_or(name);
        match base {
            "head-top" | "upper-neck" | "neck" | "head" => JointGroup::Head,
            "shoulder" => JointGroup::Shoulder,
            "elbow" => JointGroup::Elbow,
            "wrist" => JointGroup::Wrist,
            "hip" => JointGroup::Hip,
            "knee" => JointGroup::Knee,
            "ankle" => JointGroup::Ankle,
            _ => JointGroup::Other,
        }
    }
}

/// An undirected joint graph. Built-in skeletons are always trees; arbitrary
/// graphs can be constructed so [`SkeletonGraph::validate_tree`] has
/// something to reject.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    names: Vec<String>,
    edges: Vec<(usize, usize)>,
    flip_pairs: Vec<(usize, usize)>,
    root: usize,
    adjacency: Vec<Vec<usize>>,
}

pub const MPII_JOINTS: [&str; 16] = [
    "r-ankle",
    "r-knee",
    "r-hip",
    "l-hip",
    "l-knee",
    "l-ankle",
    "pelvis",
    "thorax",
    "upper-neck",
    "head-top",
    "r-wrist",
    "r-elbow",
    "r-shoulder",
    "l-shoulder",
    "l-elbow",
    "l-wrist",
];

pub const LSP_JOINTS: [&str; 14] = [
    "r-ankle",
    "r-knee",
    "r-hip",
    "l-hip",
    "l-knee",
    "l-ankle",
    "r-wrist",
    "r-elbow",
    "r-shoulder",
    "l-shoulder",
    "l-elbow",
    "l-wrist",
    "neck",
    "head-top",
];

impl SkeletonGraph {
    /// Builds a graph without structural checks beyond index ranges and
    /// self-loops. `root` orients edges for direction-aware message passing.
    pub fn new(
        names: Vec<String>,
        edges: Vec<(usize, usize)>,
        flip_pairs: Vec<(usize, usize)>,
        root: usize,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::invalid("skeleton needs at least one joint"));
        }
        if root >= n {
            return Err(Error::invalid(format!("root {root} out of range for {n} joints")));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({a}, {b}) out of range for {n} joints")));
            }
            if a == b {
                return Err(Error::invalid(format!("self-loop on joint {a}")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        for &(a, b) in &flip_pairs {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("flip pair ({a}, {b}) out of range")));
            }
        }
        Ok(SkeletonGraph {
            names,
            edges,
            flip_pairs,
            root,
            adjacency,
        })
    }

    /// Like [`SkeletonGraph::new`] but also requires a tree and a consistent
    /// left/right flip map.
    pub fn tree(
        names: Vec<String>,
        edges: Vec<(usize, usize)>,
        flip_pairs: Vec<(usize, usize)>,
        root: usize,
    ) -> Result<Self> {
        let g = Self::new(names, edges, flip_pairs, root)?;
        if !g.validate_tree() {
            return Err(Error::invalid("joint graph is not a tree"));
        }
        g.flip_permutation()?;
        Ok(g)
    }

    fn named(names: &[&str], edges: &[(&str, &str)], root: &str) -> Self {
        let idx = |s: &str| names.iter().position(|n| *n == s).expect("known joint");
        let edges = edges.iter().map(|&(a, b)| (idx(a), idx(b))).collect();
        let flip_pairs = names
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let other = n.strip_prefix("r-")?;
                Some((i, idx(&format!("l-{other}"))))
            })
            .collect();
        Self::tree(
            names.iter().map(|s| s.to_string()).collect(),
            edges,
            flip_pairs,
            idx(root),
        )
        .expect("built-in skeleton is a tree")
    }

    pub fn mpii_16() -> Self {
        Self::named(
            &MPII_JOINTS,
            &[
                ("r-ankle", "r-knee"),
                ("r-knee", "r-hip"),
                ("r-hip", "pelvis"),
                ("l-hip", "pelvis"),
                ("l-knee", "l-hip"),
                ("l-ankle", "l-knee"),
                ("pelvis", "thorax"),
                ("thorax", "upper-neck"),
                ("upper-neck", "head-top"),
                ("r-wrist", "r-elbow"),
                ("r-elbow", "r-shoulder"),
                ("r-shoulder", "thorax"),
                ("l-shoulder", "thorax"),
                ("l-elbow", "l-shoulder"),
                ("l-wrist", "l-elbow"),
            ],
            "pelvis",
        )
    }

    pub fn lsp_14() -> Self {
        Self::named(
            &LSP_JOINTS,
            &[
                ("r-ankle", "r-knee"),
                ("r-knee", "r-hip"),
                ("r-hip", "neck"),
                ("l-hip", "neck"),
                ("l-knee", "l-hip"),
                ("l-ankle", "l-knee"),
                ("neck", "head-top"),
                ("r-wrist", "r-elbow"),
                ("r-elbow", "r-shoulder"),
                ("r-shoulder", "neck"),
                ("l-shoulder", "neck"),
                ("l-elbow", "l-shoulder"),
                ("l-wrist", "l-elbow"),
            ],
            "neck",
        )
    }

    /// Looks up a built-in skeleton by its CLI/file name.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "mpii16" | "mpii_16" | "mpii" => Some(Self::mpii_16()),
            "lsp14" | "lsp_14" | "lsp" => Some(Self::lsp_14()),
            _ => None,
        }
    }

    /// Name of the built-in layout this graph equals, if any.
    pub fn builtin_name(&self) -> Option<&'static str> {
        if *self == Self::mpii_16() {
            Some("mpii16")
        } else if *self == Self::lsp_14() {
            Some("lsp14")
        } else {
            None
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn flip_pairs(&self) -> &[(usize, usize)] {
        &self.flip_pairs
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn group(&self, n: usize) -> JointGroup {
        JointGroup::of(&self.names[n])
    }

    /// Sorted neighbours of joint `n`.
    pub fn neighbors(&self, n: usize) -> Result<&[usize]> {
        self.adjacency
            .get(n)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("joint {n} out of range for {} joints", self.n_nodes())))
    }

    pub fn degree(&self, n: usize) -> usize {
        self.adjacency[n].len()
    }

    /// True iff the graph is connected, acyclic, has `|V| − 1` edges and no
    /// self-loops or duplicate edges.
    pub fn validate_tree(&self) -> bool {
        let n = self.n_nodes();
        if self.edges.len() + 1 != n {
            return false;
        }
        let mut seen_edges = std::collections::HashSet::new();
        for &(a, b) in &self.edges {
            if a == b || !seen_edges.insert((a.min(b), a.max(b))) {
                return false;
            }
        }
        self.hop_distances(0).iter().all(Option::is_some)
    }

    /// Breadth-first hop counts from `src`; `None` for unreachable joints.
    pub fn hop_distances(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_nodes()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued joints have a distance");
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// The left/right swap as a permutation, rejecting maps that are not an
    /// involution or that pair joints whose `l-`/`r-` labels disagree.
    pub fn flip_permutation(&self) -> Result<Vec<usize>> {
        let mut perm: Vec<usize> = (0..self.n_nodes()).collect();
        for &(a, b) in &self.flip_pairs {
            if perm[a] != a || perm[b] != b || a == b {
                return Err(Error::invalid(format!(
                    "flip pair ({a}, {b}) overlaps another pair"
                )));
            }
            perm[a] = b;
            perm[b] = a;
            let (na, nb) = (&self.names[a], &self.names[b]);
            let swapped = |x: &str, y: &str| {
                x.strip_prefix("r-").is_some_and(|s| y.strip_prefix("l-") == Some(s))
            };
            let labelled = |s: &str| s.starts_with("r-") || s.starts_with("l-");
            if (labelled(na) || labelled(nb)) && !(swapped(na, nb) || swapped(nb, na)) {
                return Err(Error::invalid(format!(
                    "flip pair {na:?}/{nb:?} is not a left/right pair"
                )));
            }
        }
        Ok(perm)
    }

    /// Neighbour lists for undirected message passing.
    pub fn neighbor_lists(&self) -> NeighborLists {
        Arc::new(self.adjacency.clone())
    }

    /// `(from_children, from_parent)` lists for direction-aware messages,
    /// with edges oriented away from the root.
    pub fn directed_lists(&self) -> (NeighborLists, NeighborLists) {
        let dist = self.hop_distances(self.root);
        let n = self.n_nodes();
        let mut children = vec![Vec::new(); n];
        let mut parent = vec![Vec::new(); n];
        for (u, nbrs) in self.adjacency.iter().enumerate() {
            for &v in nbrs {
                match (dist[u], dist[v]) {
                    (Some(du), Some(dv)) if dv == du + 1 => children[u].push(v),
                    (Some(du), Some(dv)) if du == dv + 1 => parent[u].push(v),
                    _ => {}
                }
            }
        }
        (Arc::new(children), Arc::new(parent))
    }

    /// Relabels joint `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(Error::invalid("not a permutation"));
        }
        let mut names = vec![String::new(); n];
        for (i, name) in self.names.iter().enumerate() {
            names[perm[i]] = name.clone();
        }
        Self::new(
            names,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
            self.flip_pairs.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
            perm[self.root],
        )
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn set(g: &SkeletonGraph, names: &[&str]) -> BTreeSet<usize> {
        names.iter().map(|n| g.index_of(n).unwrap()).collect()
    }

    #[test]
    fn mpii_structure() {
        let g = SkeletonGraph::mpii_16();
        assert_eq!(g.n_nodes(), 16);
        assert_eq!(g.edges().len(), 15);
        assert!(g.validate_tree());
        let pelvis = g.index_of("pelvis").unwrap();
        let nb: BTreeSet<_> = g.neighbors(pelvis).unwrap().iter().copied().collect();
        assert_eq!(nb, set(&g, &["r-hip", "l-hip", "thorax"]));
        let head = g.index_of("head-top").unwrap();
        assert_eq!(g.neighbors(head).unwrap(), &[g.index_of("upper-neck").unwrap()]);
    }

    #[test]
    fn lsp_structure() {
        let g = SkeletonGraph::lsp_14();
        assert_eq!(g.n_nodes(), 14);
        assert_eq!(g.edges().len(), 13);
        assert!(g.validate_tree());
        assert!((0..14).all(|n| g.degree(n) >= 1));
        let leaves: BTreeSet<_> = (0..14).filter(|&n| g.degree(n) == 1).collect();
        assert_eq!(
            leaves,
            set(&g, &["head-top", "r-wrist", "l-wrist", "r-ankle", "l-ankle"])
        );
    }

    #[test]
    fn adjacency_is_symmetric_exhaustively() {
        let g = SkeletonGraph::mpii_16();
        for a in 0..16 {
            for b in 0..16 {
                let ab = g.neighbors(a).unwrap().contains(&b);
                let ba = g.neighbors(b).unwrap().contains(&a);
                assert_eq!(ab, ba, "{a} {b}");
            }
        }
    }

    #[test]
    fn leaves_have_one_neighbour() {
        let g = SkeletonGraph::mpii_16();
        for leaf in ["r-ankle", "l-ankle", "r-wrist", "l-wrist", "head-top"] {
            assert_eq!(g.neighbors(g.index_of(leaf).unwrap()).unwrap().len(), 1);
        }
    }

    #[test]
    fn out_of_range_neighbour_query() {
        assert!(SkeletonGraph::mpii_16().neighbors(16).is_err());
    }

    #[test]
    fn validate_rejects_cycles_and_disconnection() {
        let g = SkeletonGraph::mpii_16();
        let mut edges = g.edges().to_vec();
        edges.push((0, 5));
        let cyc = SkeletonGraph::new(g.names().to_vec(), edges, vec![], 0).unwrap();
        assert!(!cyc.validate_tree());

        let names: Vec<String> = (0..4).map(|i| format!("j{i}")).collect();
        let split = SkeletonGraph::new(names.clone(), vec![(0, 1), (2, 3)], vec![], 0).unwrap();
        assert!(!split.validate_tree());
        let dup = SkeletonGraph::new(names, vec![(0, 1), (1, 0), (2, 3)], vec![], 0).unwrap();
        assert!(!dup.validate_tree());
    }

    #[test]
    fn flip_permutation_is_an_involution() {
        for g in [SkeletonGraph::mpii_16(), SkeletonGraph::lsp_14()] {
            let p = g.flip_permutation().unwrap();
            assert!((0..g.n_nodes()).all(|i| p[p[i]] == i));
            for &(a, b) in g.flip_pairs() {
                assert_eq!(&g.names()[a][2..], &g.names()[b][2..]);
            }
        }
    }

    #[test]
    fn inconsistent_flip_pairs_are_rejected() {
        let g = SkeletonGraph::mpii_16();
        let bad = SkeletonGraph::new(g.names().to_vec(), g.edges().to_vec(), vec![(0, 1)], 6).unwrap();
        assert!(bad.flip_permutation().is_err());
        let overlap =
            SkeletonGraph::new(g.names().to_vec(), g.edges().to_vec(), vec![(0, 5), (5, 0)], 6).unwrap();
        assert!(overlap.flip_permutation().is_err());
    }

    #[test]
    fn directed_lists_partition_neighbours() {
        let g = SkeletonGraph::mpii_16();
        let (children, parent) = g.directed_lists();
        for n in 0..16 {
            let mut all: Vec<usize> = children[n].iter().chain(&parent[n]).copied().collect();
            all.sort_unstable();
            assert_eq!(all, g.neighbors(n).unwrap());
            assert_eq!(parent[n].len(), usize::from(n != g.root()));
        }
    }
}
