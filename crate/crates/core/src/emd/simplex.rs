//! Network simplex on a complete bipartite transportation graph.
//!
//! Nodes `0..m` are sources and `m..m+n` sinks. The basis is a spanning tree of
//! `m + n − 1` cells (degenerate zero-flow cells included). Pricing uses block
//! search over the cost matrix; after a run of degenerate pivots it switches to
//! lowest-index pricing until flow moves again.

const REDUCED_COST_EPS: f64 = 1e-12;

struct Tree {
    m: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    adj: Vec<Vec<usize>>,
}

impl Tree {
    fn node_of_col(&self, j: usize) -> usize {
        self.m + j
    }

    fn other_end(&self, entry: usize, node: usize) -> usize {
        let (i, j) = self.cells[entry];
        if node == i {
            self.m + j
        } else {
            i
        }
    }

    fn link(&mut self, entry: usize) {
        let (i, j) = self.cells[entry];
        let col = self.node_of_col(j);
        self.adj[i].push(entry);
        self.adj[col].push(entry);
    }

    fn unlink(&mut self, entry: usize) {
        let (i, j) = self.cells[entry];
        let col = self.node_of_col(j);
        for node in [i, col] {
            let list = &mut self.adj[node];
            let pos = list.iter().position(|e| *e == entry).expect("entry linked");
            list.swap_remove(pos);
        }
    }
}

/// North-west corner start: a staircase path through the cost matrix, always a spanning tree.
fn initial_tree(supply: &[f64], demand: &[f64]) -> Tree {
    let (m, n) = (supply.len(), demand.len());
    let mut tree = Tree {
        m,
        cells: Vec::with_capacity(m + n - 1),
        flow: Vec::with_capacity(m + n - 1),
        adj: vec![Vec::new(); m + n],
    };
    let (mut i, mut j) = (0, 0);
    let (mut rem_s, mut rem_d) = (supply[0], demand[0]);
    loop {
        let f = rem_s.min(rem_d).max(0.0);
        tree.cells.push((i, j));
        tree.flow.push(f);
        tree.link(tree.cells.len() - 1);
        rem_s -= f;
        rem_d -= f;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if (rem_s <= rem_d && i < m - 1) || j == n - 1 {
            i += 1;
            rem_s = supply[i];
        } else {
            j += 1;
            rem_d = demand[j];
        }
    }
    tree
}

/// Returns `(source, sink, flow)` for every basic cell of an optimal tree.
pub(super) fn solve(supply: &[f64], demand: &[f64], cost_of: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize, f64)> {
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let cost: Vec<f64> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| cost_of(i, j))
        .collect();
    let mut tree = initial_tree(supply, demand);
    let nodes = m + n;
    let total = m * n;
    let block = ((total as f64).sqrt().ceil() as usize).max(16).min(total);

    let mut pot = vec![0.0f64; nodes];
    let mut seen = vec![false; nodes];
    let mut parent_entry = vec![usize::MAX; nodes];
    let mut queue = Vec::with_capacity(nodes);

    let mut cursor = 0usize;
    let mut degenerate_run = 0usize;
    let max_iterations = 50 * total + 1000;

    for _ in 0..max_iterations {
        // potentials: pot[i] + pot[m + j] = c(i, j) on every basic cell
        seen.iter_mut().for_each(|s| *s = false);
        queue.clear();
        queue.push(0);
        seen[0] = true;
        pot[0] = 0.0;
        let mut head = 0;
        while head < queue.len() {
            let node = queue[head];
            head += 1;
            for &e in &tree.adj[node] {
                let other = tree.other_end(e, node);
                if !seen[other] {
                    seen[other] = true;
                    let (i, j) = tree.cells[e];
                    pot[other] = cost[i * n + j] - pot[node];
                    queue.push(other);
                }
            }
        }

        let reduced = |k: usize| cost[k] - pot[k / n] - pot[m + k % n];
        let entering = if degenerate_run > nodes {
            (0..total).find(|&k| reduced(k) < -REDUCED_COST_EPS)
        } else {
            let mut best: Option<(usize, f64)> = None;
            let mut scanned = 0;
            while scanned < total {
                let end = (scanned + block).min(total);
                for off in scanned..end {
                    let k = (cursor + off) % total;
                    let r = reduced(k);
                    if r < -REDUCED_COST_EPS && best.is_none_or(|(_, b)| r < b) {
                        best = Some((k, r));
                    }
                }
                scanned = end;
                if best.is_some() {
                    break;
                }
            }
            if best.is_some() {
                cursor = (cursor + scanned) % total;
            }
            best.map(|(k, _)| k)
        };
        let Some(k) = entering else { break };
        let (ei, ej) = (k / n, k % n);

        // tree path from source ei to sink ej
        let target = m + ej;
        seen.iter_mut().for_each(|s| *s = false);
        queue.clear();
        queue.push(ei);
        seen[ei] = true;
        let mut head = 0;
        'bfs: while head < queue.len() {
            let node = queue[head];
            head += 1;
            for &e in &tree.adj[node] {
                let other = tree.other_end(e, node);
                if !seen[other] {
                    seen[other] = true;
                    parent_entry[other] = e;
                    if other == target {
                        break 'bfs;
                    }
                    queue.push(other);
                }
            }
        }
        // walking back from the sink, path cells alternate −, +, −, …
        let mut path = Vec::new();
        let mut node = target;
        while node != ei {
            let e = parent_entry[node];
            path.push(e);
            node = tree.other_end(e, node);
        }
        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for &e in path.iter().step_by(2) {
            if tree.flow[e] < theta {
                theta = tree.flow[e];
                leaving = e;
            }
        }
        for (pos, &e) in path.iter().enumerate() {
            if pos % 2 == 0 {
                tree.flow[e] -= theta;
            } else {
                tree.flow[e] += theta;
            }
        }
        degenerate_run = if theta > 0.0 { 0 } else { degenerate_run + 1 };

        tree.unlink(leaving);
        tree.cells[leaving] = (ei, ej);
        tree.flow[leaving] = theta;
        tree.link(leaving);
    }

    tree.cells
        .iter()
        .zip(&tree.flow)
        .map(|(&(i, j), &f)| (i, j, f.max(0.0)))
        .collect()
}
