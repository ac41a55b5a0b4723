//! DOT emission for sampled graphs.

use cgflow::graph::Graph;

pub fn graph_to_dot(g: &Graph) -> String {
    let mut out = String::from("graph g {\n");
    for v in 0..g.n() {
        out.push_str(&format!("  {v};\n"));
    }
    for (u, v) in g.edges() {
        out.push_str(&format!("  {u} -- {v};\n"));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal undirected-DOT reader covering exactly the grammar subset
    /// the writer emits; round-trips the structure.
    fn parse_dot(text: &str) -> Option<(usize, Vec<(usize, usize)>)> {
        let mut lines = text.lines();
        if lines.next()?.trim() != "graph g {" {
            return None;
        }
        let mut max_node = 0usize;
        let mut edges = Vec::new();
        for line in lines {
            let line = line.trim();
            if line == "}" {
                return Some((max_node + 1, edges));
            }
            let stmt = line.strip_suffix(';')?;
            if let Some((a, b)) = stmt.split_once("--") {
                let u: usize = a.trim().parse().ok()?;
                let v: usize = b.trim().parse().ok()?;
                edges.push((u, v));
                max_node = max_node.max(u).max(v);
            } else {
                let v: usize = stmt.trim().parse().ok()?;
                max_node = max_node.max(v);
            }
        }
        None
    }

    #[test]
    fn emitted_dot_parses_and_round_trips() {
        let g = Graph::new(4, &[(0, 1), (1, 3), (2, 3)]).unwrap();
        let text = graph_to_dot(&g);
        let (n, edges) = parse_dot(&text).expect("valid dot");
        assert_eq!(n, 4);
        assert_eq!(Graph::new(n, &edges).unwrap(), g);
    }
}
