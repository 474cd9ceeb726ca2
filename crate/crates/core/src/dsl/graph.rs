use std::collections::BTreeSet;

/// Directed communication graph; edge `(j, i)` means `i` received from `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DegreeStats {
    pub max_in: usize,
    pub max_out: usize,
    pub max_total: usize,
}

impl CommGraph {
    pub fn new(n: usize) -> Self {
        CommGraph { n, edges: BTreeSet::new() }
    }

    /// Every ordered pair of distinct agents.
    pub fn complete(n: usize) -> Self {
        let mut g = CommGraph::new(n);
        for i in 0..n {
            for j in 0..n {
                g.add_edge(j, i);
            }
        }
        g
    }

    /// Edges `j → i` for each `j` in `selections[i]`.
    pub fn from_selections(n: usize, selections: &[Vec<usize>]) -> Self {
        let mut g = CommGraph::new(n);
        for (i, sel) in selections.iter().enumerate() {
            for &j in sel {
                g.add_edge(j, i);
            }
        }
        g
    }

    /// Inserts `from → to`; self-loops and duplicates are ignored. Returns whether the edge is new.
    pub fn add_edge(&mut self, from: usize, to: usize) -> bool {
        assert!(from < self.n && to < self.n, "edge {from}->{to} outside {} agents", self.n);
        from != to && self.edges.insert((from, to))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Per-agent `(in, out)` degrees.
    pub fn degrees(&self) -> Vec<(usize, usize)> {
        let mut d = vec![(0, 0); self.n];
        for &(from, to) in &self.edges {
            d[from].1 += 1;
            d[to].0 += 1;
        }
        d
    }

    pub fn degree_stats(&self) -> DegreeStats {
        self.degrees().iter().fold(DegreeStats::default(), |s, &(i, o)| DegreeStats {
            max_in: s.max_in.max(i),
            max_out: s.max_out.max(o),
            max_total: s.max_total.max(i + o),
        })
    }
}

/// Largest in-degree plus out-degree over all agents.
pub fn max_degree(graph: &CommGraph) -> usize {
    graph.degree_stats().max_total
}
