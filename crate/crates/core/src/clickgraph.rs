//! Click-log ingestion, query–url bipartite projection, and the edge
//! sampling used by the reconstruction and transfer losses.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::textproc::{encode_query, Query, Vocab};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClickRecord {
    pub query_text: String,
    pub url: String,
    pub clicks: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClickLog {
    pub records: Vec<ClickRecord>,
    pub malformed_lines: usize,
}

/// Parses `query\turl[\tcount]` lines. Blank lines are ignored; malformed
/// lines are skipped and counted, and more than 10% malformed is an error.
pub fn parse_click_log(reader: impl BufRead) -> Result<ClickLog> {
    let mut log = ClickLog::default();
    let mut lines = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_click_line(&line) {
            Some(r) => log.records.push(r),
            None => log.malformed_lines += 1,
        }
    }
    if log.malformed_lines * 10 > lines {
        return Err(Error::Format(format!(
            "{} of {lines} click-log lines are malformed",
            log.malformed_lines
        )));
    }
    if log.malformed_lines > 0 {
        log::warn!("skipped {} malformed click-log lines", log.malformed_lines);
    }
    Ok(log)
}

fn parse_click_line(line: &str) -> Option<ClickRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    let (q, u, clicks) = match cols.as_slice() {
        [q, u] => (*q, *u, 1),
        [q, u, c] => (*q, *u, c.trim().parse::<u32>().ok()?),
        _ => return None,
    };
    let (q, u) = (q.trim(), u.trim());
    if q.is_empty() || u.is_empty() || clicks == 0 {
        return None;
    }
    Some(ClickRecord {
        query_text: q.to_string(),
        url: u.to_string(),
        clicks,
    })
}

pub fn ingest_click_log(path: impl AsRef<Path>) -> Result<ClickLog> {
    parse_click_log(BufReader::new(fs::File::open(path)?))
}

/// Undirected, unweighted query graph in compressed adjacency form.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGraph {
    texts: Vec<String>,
    offsets: Vec<usize>,
    adj: Vec<usize>,
}

impl QueryGraph {
    /// Builds from an undirected edge list; duplicates and orientation are
    /// normalized, self-loops rejected.
    pub fn from_edges(texts: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = texts.len();
        let mut lists = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Contract(format!("edge ({i},{j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(Error::Contract(format!("self-loop on node {i}")));
            }
            lists[i].push(j);
            lists[j].push(i);
        }
        Ok(Self::from_lists(texts, lists))
    }

    fn from_lists(texts: Vec<String>, mut lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut adj = Vec::new();
        offsets.push(0);
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
            adj.extend_from_slice(l);
            offsets.push(adj.len());
        }
        Self { texts, offsets, adj }
    }

    pub fn num_nodes(&self) -> usize {
        self.texts.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adj.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|i| self.degree(i)).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn text(&self, i: usize) -> &str {
        &self.texts[i]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    /// Edges as `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.texts.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect()
    }

    pub fn queries(&self, vocab: &Vocab, max_len: usize) -> Vec<Query> {
        self.texts
            .iter()
            .enumerate()
            .map(|(i, t)| encode_query(vocab, i, t, max_len))
            .collect()
    }

    /// Same nodes, minus the given edges.
    pub fn without_edges(&self, removed: &[(usize, usize)]) -> Self {
        let drop: HashSet<(usize, usize)> = removed.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        let lists = (0..self.num_nodes())
            .map(|i| {
                self.neighbors(i)
                    .iter()
                    .copied()
                    .filter(|&j| !drop.contains(&(i.min(j), i.max(j))))
                    .collect()
            })
            .collect();
        Self::from_lists(self.texts.clone(), lists)
    }

    /// Nodes within `hops` of any seed, ascending.
    pub fn k_hop_closure(&self, seeds: &[usize], hops: usize) -> Vec<usize> {
        let mut seen = vec![false; self.num_nodes()];
        let mut frontier: Vec<usize> = Vec::new();
        for &s in seeds {
            if !seen[s] {
                seen[s] = true;
                frontier.push(s);
            }
        }
        for _ in 0..hops {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        seen.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect()
    }

    /// Writes `n m` then one `i j` line per edge with `i < j`.
    pub fn write_edges(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = format!("{} {}\n", self.num_nodes(), self.num_edges());
        for (i, j) in self.edges() {
            s.push_str(&format!("{i} {j}\n"));
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Writes the `id\ttext` node table.
    pub fn write_nodes(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        for (i, t) in self.texts.iter().enumerate() {
            s.push_str(&format!("{i}\t{t}\n"));
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read(edges_path: impl AsRef<Path>, nodes_path: impl AsRef<Path>) -> Result<Self> {
        let nodes = fs::read_to_string(nodes_path)?;
        let mut texts = Vec::new();
        for (line_no, line) in nodes.lines().enumerate() {
            let (id, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("node table line {} has no tab", line_no + 1)))?;
            if id.parse::<usize>().ok() != Some(texts.len()) {
                return Err(Error::Format(format!("node table ids must be dense, got {id}")));
            }
            texts.push(text.to_string());
        }
        let edges_text = fs::read_to_string(edges_path)?;
        let mut lines = edges_text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty graph file".into()))?;
        let parse_pair = |l: &str| -> Result<(usize, usize)> {
            let mut it = l.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
                _ => Err(Error::Format(format!("bad graph line {l:?}"))),
            }
        };
        let (n, m) = parse_pair(header)?;
        if n != texts.len() {
            return Err(Error::Format(format!("graph has {n} nodes but node table has {}", texts.len())));
        }
        let edges = lines.map(parse_pair).collect::<Result<Vec<_>>>()?;
        if edges.len() != m || edges.iter().any(|&(i, j)| i >= j) {
            return Err(Error::Format("edge list must hold m pairs with i < j".into()));
        }
        Self::from_edges(texts, &edges)
    }
}

/// Distinct query texts become nodes in first-appearance order; two queries
/// are adjacent iff they clicked at least one common url.
pub fn project_bipartite(records: &[ClickRecord]) -> QueryGraph {
    let mut node_of: HashMap<&str, usize> = HashMap::new();
    let mut texts = Vec::new();
    let mut url_of: HashMap<&str, usize> = HashMap::new();
    let mut url_queries: Vec<Vec<usize>> = Vec::new();
    for r in records {
        let q = *node_of.entry(r.query_text.as_str()).or_insert_with(|| {
            texts.push(r.query_text.clone());
            texts.len() - 1
        });
        let u = *url_of.entry(r.url.as_str()).or_insert_with(|| {
            url_queries.push(Vec::new());
            url_queries.len() - 1
        });
        url_queries[u].push(q);
    }
    let mut lists = vec![Vec::new(); texts.len()];
    for qs in &mut url_queries {
        qs.sort_unstable();
        qs.dedup();
        for (a, &i) in qs.iter().enumerate() {
            for &j in &qs[a + 1..] {
                lists[i].push(j);
                lists[j].push(i);
            }
        }
    }
    QueryGraph::from_lists(texts, lists)
}

/// Uniform draw of `batch` items from `candidates`: without replacement when
/// possible, with replacement otherwise.
pub fn sample_from(candidates: &[usize], batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract("cannot sample anchors from an empty node set".into()));
    }
    if batch == 0 {
        return Err(Error::Contract("anchor batch size must be at least 1".into()));
    }
    if batch > candidates.len() {
        return Ok((0..batch).map(|_| candidates[rng.random_range(0..candidates.len())]).collect());
    }
    let mut pool = candidates.to_vec();
    let (chosen, _) = pool.partial_shuffle(rng, batch);
    Ok(chosen.to_vec())
}

pub fn sample_anchors(g: &QueryGraph, batch: usize, seed: u64) -> Result<Vec<usize>> {
    let nodes: Vec<usize> = (0..g.num_nodes()).collect();
    sample_from(&nodes, batch, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One anchor with its positive neighbors and an equal number of sampled
/// non-neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBatch {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Negatives requested but unavailable.
    pub shortfall: usize,
}

impl EdgeBatch {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// `(anchor, j)` pairs, positives first.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positives
            .iter()
            .chain(&self.negatives)
            .map(move |&j| (self.anchor, j))
    }

    /// 1 on positives, 0 on negatives, aligned with [`EdgeBatch::pairs`].
    pub fn labels(&self) -> Vec<f64> {
        let mut l = vec![1.0; self.positives.len()];
        l.resize(self.positives.len() + self.negatives.len(), 0.0);
        l
    }
}

pub fn make_edge_batch(g: &QueryGraph, anchor: usize, max_pos: usize, rng: &mut impl Rng) -> Result<EdgeBatch> {
    let n = g.num_nodes();
    if anchor >= n {
        return Err(Error::Contract(format!("anchor {anchor} not in graph of {n} nodes")));
    }
    let nbrs = g.neighbors(anchor);
    let mut positives = if nbrs.len() > max_pos {
        let mut pool = nbrs.to_vec();
        let (chosen, _) = pool.partial_shuffle(rng, max_pos);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        chosen
    } else {
        nbrs.to_vec()
    };
    if positives.is_empty() {
        return Ok(EdgeBatch {
            anchor,
            positives,
            negatives: Vec::new(),
            shortfall: 0,
        });
    }
    let want = positives.len();
    let available = n - 1 - nbrs.len();
    let negatives = if available <= 2 * want {
        let mut pool: Vec<usize> = (0..n).filter(|&j| j != anchor && !g.has_edge(anchor, j)).collect();
        pool.shuffle(rng);
        pool.truncate(want);
        pool
    } else {
        let mut chosen = Vec::with_capacity(want);
        let mut taken = HashSet::with_capacity(want);
        while chosen.len() < want {
            let j = rng.random_range(0..n);
            if j != anchor && !g.has_edge(anchor, j) && taken.insert(j) {
                chosen.push(j);
            }
        }
        chosen
    };
    let shortfall = want - negatives.len();
    if shortfall > 0 {
        log::debug!("anchor {anchor}: only {} of {want} negatives available", negatives.len());
    }
    positives.shrink_to_fit();
    Ok(EdgeBatch {
        anchor,
        positives,
        negatives,
        shortfall,
    })
}

/// Held-out edges with one matched negative each, plus the graph left for
/// training.
#[derive(Clone, Debug)]
pub struct Holdout {
    pub train: QueryGraph,
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<f64>,
}

/// Removes `fraction` of the edges (never isolating an endpoint) and pairs
/// each with a non-neighbor of its first endpoint in the full graph.
pub fn split_holdout(g: &QueryGraph, fraction: f64, rng: &mut impl Rng) -> Holdout {
    let mut edges: Vec<(usize, usize)> = g.edges().collect();
    edges.shuffle(rng);
    let target = (edges.len() as f64 * fraction).round() as usize;
    let mut deg = g.degrees();
    let mut held = Vec::with_capacity(target);
    for &(i, j) in &edges {
        if held.len() == target {
            break;
        }
        if deg[i] > 1 && deg[j] > 1 {
            deg[i] -= 1;
            deg[j] -= 1;
            held.push((i, j));
        }
    }
    let mut pairs = Vec::with_capacity(2 * held.len());
    let mut labels = Vec::with_capacity(2 * held.len());
    let n = g.num_nodes();
    for &(i, j) in &held {
        pairs.push((i, j));
        labels.push(1.0);
        if g.degree(i) + 1 < n {
            loop {
                let k = rng.random_range(0..n);
                if k != i && !g.has_edge(i, k) {
                    pairs.push((i, k));
                    labels.push(0.0);
                    break;
                }
            }
        }
    }
    Holdout {
        train: g.without_edges(&held),
        pairs,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: &str, u: &str) -> ClickRecord {
        ClickRecord {
            query_text: q.into(),
            url: u.into(),
            clicks: 1,
        }
    }

    #[test]
    fn parses_lines_with_and_without_counts() {
        let log = parse_click_log("q1\tu1\t3\nq1\tu1\n\n".as_bytes()).unwrap();
        assert_eq!(log.records[0], ClickRecord { query_text: "q1".into(), url: "u1".into(), clicks: 3 });
        assert_eq!(log.records[1].clicks, 1);
        assert_eq!(log.malformed_lines, 0);
        assert!(parse_click_log("".as_bytes()).unwrap().records.is_empty());
    }

    #[test]
    fn malformed_lines_are_counted_then_fatal_past_ten_percent() {
        let mut ok = String::new();
        for i in 0..19 {
            ok.push_str(&format!("q{i}\tu\n"));
        }
        let one_bad = format!("{ok}broken\n");
        assert_eq!(parse_click_log(one_bad.as_bytes()).unwrap().malformed_lines, 1);
        let many_bad = format!("{ok}a\nb\tc\t0\nd\te\tx\n");
        assert!(matches!(parse_click_log(many_bad.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn projection_definition() {
        let g = project_bipartite(&[rec("q1", "u1"), rec("q2", "u1"), rec("q3", "u2")]);
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn edge_batch_contract() {
        // star 0-{1,2,3} plus 6 isolated nodes
        let texts = (0..10).map(|i| format!("q{i}")).collect();
        let g = QueryGraph::from_edges(texts, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_edge_batch(&g, 0, 32, &mut rng).unwrap();
        assert_eq!(b.positives, vec![1, 2, 3]);
        assert_eq!(b.negatives.len(), 3);
        assert_eq!(b.labels(), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(b.negatives.iter().all(|&j| j > 3));
        let empty = make_edge_batch(&g, 5, 32, &mut rng).unwrap();
        assert!(empty.is_empty() && empty.negatives.is_empty());
        let capped = make_edge_batch(&g, 0, 2, &mut rng).unwrap();
        assert_eq!(capped.positives.len(), 2);
        assert_eq!(capped.negatives.len(), 2);
    }

    #[test]
    fn complete_graph_records_shortfall() {
        let texts = (0..4).map(|i| format!("q{i}")).collect();
        let edges: Vec<_> = (0..4).flat_map(|i| (i + 1..4).map(move |j| (i, j))).collect();
        let g = QueryGraph::from_edges(texts, &edges).unwrap();
        let b = make_edge_batch(&g, 0, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.positives.len(), 3);
        assert!(b.negatives.is_empty());
        assert_eq!(b.shortfall, 3);
    }

    #[test]
    fn anchors_permutation_and_determinism() {
        let texts = (0..20).map(|i| format!("q{i}")).collect();
        let g = QueryGraph::from_edges(texts, &[]).unwrap();
        let mut s = sample_anchors(&g, 20, 3).unwrap();
        assert_eq!(sample_anchors(&g, 20, 3).unwrap(), s);
        s.sort_unstable();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert_eq!(sample_anchors(&g, 50, 3).unwrap().len(), 50);
        let empty = QueryGraph::from_edges(Vec::new(), &[]).unwrap();
        assert!(sample_anchors(&empty, 1, 0).is_err());
    }

    #[test]
    fn closure_and_edge_removal() {
        let texts = (0..5).map(|i| format!("q{i}")).collect();
        let g = QueryGraph::from_edges(texts, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        assert_eq!(g.k_hop_closure(&[0], 2), vec![0, 1, 2]);
        assert_eq!(g.k_hop_closure(&[2], 0), vec![2]);
        let h = g.without_edges(&[(2, 1)]);
        assert_eq!(h.num_edges(), 3);
        assert!(!h.has_edge(1, 2) && !h.has_edge(2, 1));
    }

    #[test]
    fn holdout_keeps_endpoints_connected() {
        let texts = (0..30).map(|i| format!("q{i}")).collect();
        let edges: Vec<_> = (0..30).flat_map(|i| [(i, (i + 1) % 30), (i, (i + 7) % 30)]).collect();
        let g = QueryGraph::from_edges(texts, &edges).unwrap();
        let h = split_holdout(&g, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(h.train.num_edges() + h.labels.iter().filter(|&&l| l == 1.0).count(), g.num_edges());
        for (&(i, j), &l) in h.pairs.iter().zip(&h.labels) {
            assert_eq!(g.has_edge(i, j), l == 1.0);
            assert!(!h.train.has_edge(i, j));
        }
        assert!((0..30).all(|i| h.train.degree(i) > 0));
    }
}
