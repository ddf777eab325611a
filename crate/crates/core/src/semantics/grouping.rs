use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use super::{ClassSet, Taxonomy};
use crate::error::{Error, Result};

/// Highest word similarity over the cross product of two class sets.
pub fn class_similarity(tax: &Taxonomy, l1: &ClassSet, l2: &ClassSet) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for w1 in l1.words() {
        for w2 in l2.words() {
            best = best.max(tax.word_similarity(w1, w2)?);
        }
    }
    Ok(best)
}

fn dedup(classes: &[ClassSet]) -> Vec<ClassSet> {
    classes.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Outcome of `d(C_A, C_B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    /// Resulting class table; always a subset of `C_B`.
    pub classes: Vec<ClassSet>,
    /// Where every class of `C_A` went. Classes shared with `C_B` map to
    /// themselves.
    pub mapping: BTreeMap<ClassSet, ClassSet>,
}

impl MergeResult {
    pub fn target(&self, class: &ClassSet) -> Option<&ClassSet> {
        self.mapping.get(class)
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().all(|(k, v)| k == v)
    }
}

/// Replaces each class of `a` missing from `b` by its most similar class in
/// `b`. Ties go to the lexicographically smallest canonical name.
pub fn difference_merge(tax: &Taxonomy, a: &[ClassSet], b: &[ClassSet]) -> Result<MergeResult> {
    let targets = dedup(b);
    if targets.is_empty() {
        return Err(Error::EmptyClassTable);
    }
    let mut by_name: Vec<(String, &ClassSet)> =
        targets.iter().map(|c| (c.canonical_name(), c)).collect();
    by_name.sort();

    let mut mapping = BTreeMap::new();
    for class in dedup(a) {
        if targets.binary_search(&class).is_ok() {
            mapping.insert(class.clone(), class);
            continue;
        }
        let mut best: Option<(f64, &ClassSet)> = None;
        for (_, candidate) in &by_name {
            let s = class_similarity(tax, &class, candidate)?;
            // strict comparison keeps the earliest (smallest name) on ties
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, candidate));
            }
        }
        let (_, target) = best.expect("targets are non-empty");
        mapping.insert(class, target.clone());
    }
    let classes = mapping.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    Ok(MergeResult { classes, mapping })
}

/// A set of classes merged into one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroup {
    /// Original class sets, sorted.
    pub members: Vec<ClassSet>,
    /// Union of the members' words.
    pub merged: ClassSet,
}

/// Partitions `classes` into groups connected by word pairs from different
/// class sets whose similarity is strictly above `theta`. Groups are sorted by
/// the canonical name of their merged class set.
pub fn class_reduction(tax: &Taxonomy, classes: &[ClassSet], theta: f64) -> Result<Vec<ClassGroup>> {
    class_reduction_with(classes, theta, |a, b| tax.word_similarity(a, b))
}

/// [`class_reduction`] with an arbitrary symmetric word similarity.
pub fn class_reduction_with<F>(classes: &[ClassSet], theta: f64, mut sim: F) -> Result<Vec<ClassGroup>>
where
    F: FnMut(&str, &str) -> Result<f64>,
{
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidThreshold(theta));
    }
    let classes = dedup(classes);
    let n = classes.len();

    let mut cache: HashMap<(&str, &str), f64> = HashMap::new();
    let mut adjacent = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let mut linked = false;
            'pairs: for w1 in classes[i].words() {
                for w2 in classes[j].words() {
                    let key = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
                    let s = match cache.get(&key) {
                        Some(&s) => s,
                        None => {
                            let s = sim(key.0, key.1)?;
                            cache.insert(key, s);
                            s
                        }
                    };
                    if s > theta {
                        linked = true;
                        break 'pairs;
                    }
                }
            }
            if linked {
                adjacent[i].push(j);
                adjacent[j].push(i);
            }
        }
    }

    // connected components by breadth-first search
    let mut component = vec![usize::MAX; n];
    let mut groups = Vec::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        component[start] = id;
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacent[u] {
                if component[v] == usize::MAX {
                    component[v] = id;
                    members.push(v);
                    queue.push_back(v);
                }
            }
        }
        members.sort_unstable();
        let members: Vec<ClassSet> = members.into_iter().map(|i| classes[i].clone()).collect();
        let merged = members[1..].iter().fold(members[0].clone(), |acc, c| acc.union(c));
        groups.push(ClassGroup { members, merged });
    }
    groups.sort_by_key(|g| g.merged.canonical_name());
    Ok(groups)
}

/// Shared class table for a content/style pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    /// Merged class table, sorted by canonical name.
    pub classes: Vec<ClassSet>,
    /// For each input content class, its index into `classes`.
    pub content_map: Vec<usize>,
    /// For each input style class, its index into `classes`.
    pub style_map: Vec<usize>,
}

impl Grouping {
    pub fn content_class(&self, i: usize) -> &ClassSet {
        &self.classes[self.content_map[i]]
    }

    pub fn style_class(&self, i: usize) -> &ClassSet {
        &self.classes[self.style_map[i]]
    }
}

/// Difference merge of the style classes onto the content classes, then of
/// the content classes onto that result, then class reduction of the shared
/// table at threshold `theta`.
pub fn group_semantics(
    tax: &Taxonomy,
    content: &[ClassSet],
    style: &[ClassSet],
    theta: f64,
) -> Result<Grouping> {
    if content.is_empty() || style.is_empty() {
        return Err(Error::EmptyClassTable);
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidThreshold(theta));
    }
    let style_merge = difference_merge(tax, style, content)?;
    let content_merge = difference_merge(tax, content, &style_merge.classes)?;

    let style_set: BTreeSet<&ClassSet> = style_merge.classes.iter().collect();
    let shared: Vec<ClassSet> = content_merge
        .classes
        .iter()
        .filter(|c| style_set.contains(c))
        .cloned()
        .collect();
    // d(C_S, C_I) lands inside C_I, so d(C_I, C_S*) reproduces C_S* exactly
    debug_assert_eq!(shared, style_merge.classes);

    let groups = class_reduction(tax, &shared, theta)?;
    let mut slot = BTreeMap::new();
    for (g, group) in groups.iter().enumerate() {
        for m in &group.members {
            slot.insert(m, g);
        }
    }
    let lookup = |merge: &MergeResult, class: &ClassSet| -> Result<usize> {
        let reduced = merge.target(class).expect("every input class is mapped");
        slot.get(reduced).copied().ok_or_else(|| {
            Error::TaxonomyStructure(format!("class {reduced} missing from the shared table"))
        })
    };
    let content_map = content
        .iter()
        .map(|c| lookup(&content_merge, c))
        .collect::<Result<_>>()?;
    let style_map = style
        .iter()
        .map(|c| lookup(&style_merge, c))
        .collect::<Result<_>>()?;
    Ok(Grouping {
        classes: groups.into_iter().map(|g| g.merged).collect(),
        content_map,
        style_map,
    })
}
