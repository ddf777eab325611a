use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};

/// Constants of the Li similarity `exp(-alpha*l) * tanh(beta*h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LiParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.6,
        }
    }
}

impl LiParams {
    /// Similarity for path length `l` and subsumer depth `h`.
    pub fn score(&self, path_length: usize, subsumer_depth: usize) -> f64 {
        let l = path_length as f64;
        let bh = self.beta * subsumer_depth as f64;
        (-self.alpha * l).exp() * ((bh.exp() - (-bh).exp()) / (bh.exp() + (-bh).exp()))
    }
}

/// Rooted hypernym hierarchy. Every word reaches the single root by
/// following parent links; a word may have several parents.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    index: HashMap<String, usize>,
    names: Vec<String>,
    parents: Vec<Vec<usize>>,
    depth: Vec<usize>,
    params: LiParams,
}

impl Taxonomy {
    /// Parses `child<TAB>parent` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (child, parent) = line.split_once('\t').ok_or_else(|| Error::TaxonomySyntax {
                line: i + 1,
                reason: "expected `child<TAB>parent`".into(),
            })?;
            let (child, parent) = (child.trim(), parent.trim());
            if child.is_empty() || parent.is_empty() {
                return Err(Error::TaxonomySyntax {
                    line: i + 1,
                    reason: "empty word".into(),
                });
            }
            edges.push((child.to_string(), parent.to_string()));
        }
        Self::from_edges(edges)
    }

    /// The hypernym list shipped for the ADE20K class words.
    pub fn ade20k() -> Self {
        Self::parse(crate::data::ADE20K_TAXONOMY).expect("shipped taxonomy is well formed")
    }

    pub fn from_edges<I, S>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut index = HashMap::new();
        let mut names: Vec<String> = Vec::new();
        let mut parents: Vec<Vec<usize>> = Vec::new();
        let mut intern = |w: String, names: &mut Vec<String>, parents: &mut Vec<Vec<usize>>| {
            *index.entry(w.clone()).or_insert_with(|| {
                names.push(w);
                parents.push(Vec::new());
                names.len() - 1
            })
        };
        for (c, p) in edges {
            let c = intern(c.into(), &mut names, &mut parents);
            let p = intern(p.into(), &mut names, &mut parents);
            if c == p {
                return Err(Error::TaxonomyStructure(format!("`{}` is its own parent", names[c])));
            }
            if !parents[c].contains(&p) {
                parents[c].push(p);
            }
        }
        let index: HashMap<String, usize> =
            names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();

        let roots: Vec<usize> = (0..names.len()).filter(|&i| parents[i].is_empty()).collect();
        let root = match roots[..] {
            [r] => r,
            [] => return Err(Error::TaxonomyStructure("no root (cycle?)".into())),
            _ => {
                return Err(Error::TaxonomyStructure(format!(
                    "{} roots: {}",
                    roots.len(),
                    roots.iter().map(|&r| names[r].as_str()).collect::<Vec<_>>().join(", ")
                )))
            }
        };

        let mut children = vec![Vec::new(); names.len()];
        for (c, ps) in parents.iter().enumerate() {
            for &p in ps {
                children[p].push(c);
            }
        }
        // depth = 1 + fewest edges up to the root
        let mut depth = vec![0usize; names.len()];
        depth[root] = 1;
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            for &c in &children[n] {
                if depth[c] == 0 {
                    depth[c] = depth[n] + 1;
                    queue.push_back(c);
                }
            }
        }
        if let Some(i) = depth.iter().position(|&d| d == 0) {
            return Err(Error::TaxonomyStructure(format!(
                "`{}` does not reach the root",
                names[i]
            )));
        }
        check_acyclic(&parents, &names)?;

        Ok(Self {
            index,
            names,
            parents,
            depth,
            params: LiParams::default(),
        })
    }

    pub fn with_params(mut self, params: LiParams) -> Self {
        self.params = params;
        self
    }

    pub fn params(&self) -> LiParams {
        self.params
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn depth(&self, word: &str) -> Result<usize> {
        Ok(self.depth[self.id(word)?])
    }

    /// Every ancestor of `node` (itself included) with its upward distance.
    fn ancestors(&self, node: usize) -> HashMap<usize, usize> {
        let mut dist = HashMap::from([(node, 0)]);
        let mut queue = VecDeque::from([node]);
        while let Some(n) = queue.pop_front() {
            let d = dist[&n];
            for &p in &self.parents[n] {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(p) {
                    e.insert(d + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }

    /// `(path length, subsumer depth)` for a word pair.
    pub fn path_and_subsumer(&self, w1: &str, w2: &str) -> Result<(usize, usize)> {
        let (a, b) = (self.id(w1)?, self.id(w2)?);
        let up_a = self.ancestors(a);
        let up_b = self.ancestors(b);
        let mut path = usize::MAX;
        let mut subsumer = 0;
        for (n, da) in &up_a {
            if let Some(db) = up_b.get(n) {
                path = path.min(da + db);
                subsumer = subsumer.max(self.depth[*n]);
            }
        }
        Ok((path, subsumer))
    }

    /// Shortest path between two words that passes through a common ancestor.
    pub fn path_length(&self, w1: &str, w2: &str) -> Result<usize> {
        Ok(self.path_and_subsumer(w1, w2)?.0)
    }

    /// Depth of the deepest common ancestor.
    pub fn subsumer_depth(&self, w1: &str, w2: &str) -> Result<usize> {
        Ok(self.path_and_subsumer(w1, w2)?.1)
    }

    /// Li similarity in `[0, 1]`; identical words score exactly 1.
    pub fn word_similarity(&self, w1: &str, w2: &str) -> Result<f64> {
        let (l, h) = self.path_and_subsumer(w1, w2)?;
        if w1 == w2 {
            return Ok(1.0);
        }
        Ok(self.params.score(l, h))
    }
}

fn check_acyclic(parents: &[Vec<usize>], names: &[String]) -> Result<()> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; parents.len()];
    for start in 0..parents.len() {
        if state[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        state[start] = 1;
        while let Some(&mut (n, ref mut next)) = stack.last_mut() {
            if *next < parents[n].len() {
                let p = parents[n][*next];
                *next += 1;
                match state[p] {
                    0 => {
                        state[p] = 1;
                        stack.push((p, 0));
                    }
                    1 => {
                        return Err(Error::TaxonomyStructure(format!(
                            "cycle through `{}`",
                            names[p]
                        )))
                    }
                    _ => {}
                }
            } else {
                state[n] = 2;
                stack.pop();
            }
        }
    }
    Ok(())
}
