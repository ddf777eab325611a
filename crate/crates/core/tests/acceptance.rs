//! One line per acceptance criterion: `PASS name: detail` or `FAIL name: detail`.
//! Run with `cargo test -p photostyle --test acceptance -- --nocapture` to see them.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Vector3};
use photostyle::gradcheck::{central_difference, relative_error};
use photostyle::losses::{augmented_style_loss, style_loss};
use photostyle::optim::{self, AdamParams, AdamState, RunConfig};
use photostyle::segmentation::SegmentationMap;
use photostyle::semantics::{class_reduction_with, difference_merge};
use photostyle::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAPTURED: [&str; 6] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv4_2", "conv5_1"];

fn report(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

// ---------------------------------------------------------------- gradients

fn halves(h: usize, w: usize, vertical: bool) -> (Tensor64, Vec<ClassSet>) {
    let classes = vec![ClassSet::word("sea"), ClassSet::word("sky")];
    let mut data = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let first = if vertical { x < w / 2 } else { y < h / 2 };
            data[(if first { 0 } else { 1 }) * h * w + y * w + x] = 1.0;
        }
    }
    (Tensor::new(vec![2, h, w], data).unwrap(), classes)
}

fn objective_gradient_error(model: &VggModel64, config: LossConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = uniform(&[8, 8, 3], &mut rng);
    let style = uniform(&[8, 8, 3], &mut rng);
    let image = uniform(&[8, 8, 3], &mut rng);
    let (cm, classes) = halves(8, 8, true);
    let (sm, _) = halves(8, 8, false);
    let lap = build_matting_laplacian(&content, MattingParams::default()).unwrap();
    let obj = Objective::new(model, config, &content, &style, &cm, &sm, &classes)
        .unwrap()
        .with_laplacian(lap)
        .with_scorer(Box::new(ContrastScorer::default()));
    let (_, grad) = obj.evaluate(&image).unwrap();
    let fd = central_difference(&image, 1e-5, |x| Ok(obj.loss(x)?.total)).unwrap();
    relative_error(&grad, &fd)
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let model = VggModel64::synthetic(11);
    let only = |a, b, l, v| LossConfig::from_scalars(a, b, l, v, 0.6);
    let mut errors = vec![
        ("content", objective_gradient_error(&model, only(1.0, 0.0, 0.0, 0.0), 1)),
        ("augmented style (2 classes)", objective_gradient_error(&model, only(0.0, 100.0, 0.0, 0.0), 2)),
        ("affine", objective_gradient_error(&model, only(0.0, 0.0, 1e4, 0.0), 3)),
        ("toy assessment", objective_gradient_error(&model, only(0.0, 0.0, 0.0, 1e5), 4)),
        ("total", objective_gradient_error(&model, LossConfig::default(), 5)),
    ];

    // the affine term on its own, outside the objective
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let content = uniform(&[8, 8, 3], &mut rng);
    let image = uniform(&[8, 8, 3], &mut rng);
    let lap = build_matting_laplacian(&content, MattingParams::default()).unwrap();
    let g = affine_loss_grad(&lap, &image).unwrap();
    let fd = central_difference(&image, 1e-5, |x| affine_loss(&lap, x)).unwrap();
    errors.push(("affine_loss_grad", relative_error(&g, &fd)));

    let elapsed = start.elapsed();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        "gradient suite",
        worst < 1e-3 && elapsed.as_secs() < 120,
        format!("{detail}; {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn term_gradients_add_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = VggModel64::synthetic(12);
    let content = uniform(&[8, 8, 3], &mut rng);
    let style = uniform(&[8, 8, 3], &mut rng);
    let image = uniform(&[8, 8, 3], &mut rng);
    let (cm, classes) = halves(8, 8, true);
    let (sm, _) = halves(8, 8, false);
    let lap = build_matting_laplacian(&content, MattingParams::default()).unwrap();
    let obj = Objective::new(&model, LossConfig::default(), &content, &style, &cm, &sm, &classes)
        .unwrap()
        .with_laplacian(lap)
        .with_scorer(Box::new(ContrastScorer::default()));
    let (report_a, combined) = obj.evaluate(&image).unwrap();
    let (report_b, terms) = obj.evaluate_terms(&image).unwrap();
    let err = relative_error(&combined, &terms.total().unwrap());
    let sum = report_b.content + report_b.style + report_b.photorealism + report_b.assessment;
    let pass = err < 1e-6 && (report_a.total - report_b.total).abs() <= 1e-12 * report_a.total.abs()
        && (sum - report_b.total).abs() <= 1e-6 * sum.abs();
    report("loss report additivity", pass, format!("term gradients vs combined {err:.2e}"));
}

// ------------------------------------------------------------------ matting

/// Direct per-window construction into a dense matrix.
fn dense_laplacian(image: &Tensor64, eps: f64) -> DMatrix<f64> {
    let (h, w, _) = image.dims3().unwrap();
    let n = h * w;
    let px = |i: usize| Vector3::from_row_slice(&image.data()[3 * i..3 * i + 3]);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for cy in 1..h - 1 {
        for cx in 1..w - 1 {
            let idx: Vec<usize> = (0..9).map(|k| (cy + k / 3 - 1) * w + cx + k % 3 - 1).collect();
            let mu = idx.iter().map(|&i| px(i)).sum::<Vector3<f64>>() / 9.0;
            let mut cov = Matrix3::<f64>::zeros();
            for &i in &idx {
                let d = px(i) - mu;
                cov += d * d.transpose();
            }
            cov /= 9.0;
            let inv = (cov + Matrix3::identity() * (eps / 9.0)).try_inverse().unwrap();
            for &i in &idx {
                for &j in &idx {
                    let q = (px(i) - mu).dot(&(inv * (px(j) - mu)));
                    let delta = if i == j { 1.0 } else { 0.0 };
                    l[(i, j)] += delta - (1.0 + q) / 9.0;
                }
            }
        }
    }
    l
}

#[test]
fn matting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut max_diff, mut max_row_sum, mut min_quad, mut max_nnz, mut max_rel) = (0.0f64, 0.0f64, f64::MAX, 0, 0.0f64);
    for _ in 0..20 {
        let image = uniform(&[6, 6, 3], &mut rng);
        let sparse = build_matting_laplacian(&image, MattingParams::default()).unwrap();
        let dense = dense_laplacian(&image, 1e-7);
        let n = sparse.n();
        let got = DMatrix::from_row_slice(n, n, &sparse.to_dense());
        max_diff = max_diff.max((&got - &dense).abs().max());
        for r in 0..n {
            max_row_sum = max_row_sum.max(sparse.row(r).map(|(_, v)| v).sum::<f64>().abs());
            max_nnz = max_nnz.max(sparse.row_nnz(r));
        }
        for _ in 0..100 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v: Vec<f64> = v.iter().map(|x| x / norm).collect();
            min_quad = min_quad.min(sparse.quadratic_form(&v).unwrap());
        }
        let out = uniform(&[6, 6, 3], &mut rng);
        let oracle: f64 = (0..3)
            .map(|c| {
                let v = DMatrix::from_iterator(n, 1, (0..n).map(|i| out.data()[3 * i + c]));
                (v.transpose() * &dense * &v)[(0, 0)]
            })
            .sum();
        let loss = affine_loss(&sparse, &out).unwrap();
        max_rel = max_rel.max((loss - oracle).abs() / oracle.abs());
    }
    let pass = max_diff < 1e-10 && max_row_sum < 1e-8 && min_quad >= -1e-8 && max_nnz <= 25 && max_rel < 1e-8;
    report(
        "matting oracle",
        pass,
        format!(
            "max |sparse - dense| {max_diff:.2e}, max |row sum| {max_row_sum:.2e}, min xᵀLx {min_quad:.2e}, \
             max nnz/row {max_nnz}, affine loss vs dense {max_rel:.2e}"
        ),
    );
}

#[test]
fn affine_null_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let (h, w) = (8 + trial, 10 + 2 * trial);
        let content = uniform(&[h, w, 3], &mut rng);
        let lap = build_matting_laplacian(&content, MattingParams::default()).unwrap();
        let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut out = content.clone();
        for (o, i) in out.data_mut().chunks_exact_mut(3).zip(content.data().chunks_exact(3)) {
            for c in 0..3 {
                o[c] = a[3 * c] * i[0] + a[3 * c + 1] * i[1] + a[3 * c + 2] * i[2] + b[c];
            }
        }
        let n = (h * w) as f64;
        worst = worst.max(affine_loss(&lap, &out).unwrap() / n);
    }
    report("affine null space", worst <= 1e-4, format!("max L_m / n = {worst:.2e} (bound 1e-4)"));
}

// ---------------------------------------------------------------- semantics

/// Exhaustive reimplementation of the grouping pipeline. Ancestors come from
/// enumerating every upward path, components from fixed-point label merging.
struct Oracle {
    parents: BTreeMap<String, Vec<String>>,
}

impl Oracle {
    fn paths_up(&self, w: &str) -> Vec<Vec<String>> {
        let ps = &self.parents[w];
        if ps.is_empty() {
            return vec![vec![w.to_string()]];
        }
        let mut out = Vec::new();
        for p in ps {
            for mut path in self.paths_up(p) {
                path.insert(0, w.to_string());
                out.push(path);
            }
        }
        out
    }

    fn distances(&self, w: &str) -> BTreeMap<String, usize> {
        let mut d: BTreeMap<String, usize> = BTreeMap::new();
        for path in self.paths_up(w) {
            for (k, a) in path.into_iter().enumerate() {
                let e = d.entry(a).or_insert(k);
                *e = (*e).min(k);
            }
        }
        d
    }

    fn depth(&self, w: &str) -> usize {
        self.paths_up(w).iter().map(|p| p.len()).min().unwrap()
    }

    fn sim(&self, w1: &str, w2: &str) -> f64 {
        if w1 == w2 {
            return 1.0;
        }
        let (d1, d2) = (self.distances(w1), self.distances(w2));
        let common: Vec<&String> = d1.keys().filter(|a| d2.contains_key(*a)).collect();
        let l = common.iter().map(|a| d1[*a] + d2[*a]).min().unwrap() as f64;
        let h = common.iter().map(|a| self.depth(a)).max().unwrap() as f64;
        let bh = 0.6 * h;
        (-0.2 * l).exp() * ((bh.exp() - (-bh).exp()) / (bh.exp() + (-bh).exp()))
    }

    fn class_sim(&self, a: &ClassSet, b: &ClassSet) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for x in a.words() {
            for y in b.words() {
                best = best.max(self.sim(x, y));
            }
        }
        best
    }

    fn merge(&self, a: &[ClassSet], b: &[ClassSet]) -> BTreeMap<ClassSet, ClassSet> {
        a.iter()
            .map(|x| {
                if b.contains(x) {
                    return (x.clone(), x.clone());
                }
                let top = b.iter().map(|y| self.class_sim(x, y)).fold(f64::NEG_INFINITY, f64::max);
                let winner = b
                    .iter()
                    .filter(|y| self.class_sim(x, y) == top)
                    .min_by_key(|y| y.canonical_name())
                    .unwrap();
                (x.clone(), winner.clone())
            })
            .collect()
    }

    /// Groups as sorted lists of member indices into `shared`.
    fn reduce(&self, shared: &[ClassSet], theta: f64) -> Vec<Vec<usize>> {
        // one node per (class, word) occurrence; a class links its own words
        let nodes: Vec<(usize, String)> = shared
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.words().map(move |w| (i, w.to_string())))
            .collect();
        let mut label: Vec<usize> = (0..nodes.len()).collect();
        loop {
            let mut changed = false;
            for i in 0..nodes.len() {
                for j in 0..nodes.len() {
                    let linked = nodes[i].0 == nodes[j].0 || self.sim(&nodes[i].1, &nodes[j].1) > theta;
                    if linked && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (k, (class, _)) in nodes.iter().enumerate() {
            groups.entry(label[k]).or_default().insert(*class);
        }
        groups.into_values().map(|g| g.into_iter().collect()).collect()
    }

    fn group(&self, content: &[ClassSet], style: &[ClassSet], theta: f64) -> Grouping {
        let style_map = self.merge(style, content);
        let style_star: Vec<ClassSet> = style_map.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let content_map = self.merge(content, &style_star);
        let content_star: BTreeSet<ClassSet> = content_map.values().cloned().collect();
        let shared: Vec<ClassSet> = style_star.iter().filter(|c| content_star.contains(*c)).cloned().collect();

        let mut merged: Vec<(ClassSet, Vec<usize>)> = self
            .reduce(&shared, theta)
            .into_iter()
            .map(|members| {
                let words: BTreeSet<String> =
                    members.iter().flat_map(|&i| shared[i].words().map(String::from)).collect();
                (ClassSet::new(words).unwrap(), members)
            })
            .collect();
        merged.sort_by_key(|(c, _)| c.canonical_name());
        let slot = |c: &ClassSet| {
            let i = shared.iter().position(|s| s == c).unwrap();
            merged.iter().position(|(_, m)| m.contains(&i)).unwrap()
        };
        Grouping {
            content_map: content.iter().map(|c| slot(&content_map[c])).collect(),
            style_map: style.iter().map(|c| slot(&style_map[c])).collect(),
            classes: merged.into_iter().map(|(c, _)| c).collect(),
        }
    }
}

struct Instance {
    edges: Vec<(String, String)>,
    content: Vec<ClassSet>,
    style: Vec<ClassSet>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let mut pool = ["a", "ab", "b", "ba", "c", "ca", "d", "e_f", "f", "g", "h", "i"];
    pool.shuffle(rng);
    let n = rng.random_range(2..=12);
    let words = &pool[..n];
    let mut edges = Vec::new();
    for k in 1..n {
        let parents = if k >= 2 && rng.random_bool(0.25) { 2 } else { 1 };
        let mut chosen = BTreeSet::new();
        while chosen.len() < parents {
            chosen.insert(rng.random_range(0..k));
        }
        edges.extend(chosen.into_iter().map(|p| (words[k].to_string(), words[p].to_string())));
    }
    let table = |rng: &mut ChaCha8Rng| {
        let size = rng.random_range(1..=8);
        let mut set = BTreeSet::new();
        for _ in 0..size {
            let k = rng.random_range(1..=2usize.min(n));
            set.insert(ClassSet::new(words.choose_multiple(rng, k).copied()).unwrap());
        }
        let mut v: Vec<ClassSet> = set.into_iter().collect();
        v.shuffle(rng);
        v
    };
    let content = table(rng);
    let style = table(rng);
    Instance { edges, content, style }
}

fn refines(fine: &Grouping, coarse: &Grouping) -> bool {
    let subset = |a: &ClassSet, b: &ClassSet| a.words().all(|w| b.contains(w));
    (0..fine.content_map.len()).all(|i| subset(fine.content_class(i), coarse.content_class(i)))
        && (0..fine.style_map.len()).all(|i| subset(fine.style_class(i), coarse.style_class(i)))
        && fine.classes.iter().all(|f| coarse.classes.iter().any(|c| subset(f, c)))
}

#[test]
fn grouping_oracle() {
    let thetas = [0.0, 0.2, 0.4, 0.5, 0.6, 0.7, 0.9, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (mut equal, mut monotone, mut no_merge, mut merged_at_default) = (0, 0, 0, 0);
    let total = 200;
    for _ in 0..total {
        let inst = random_instance(&mut rng);
        let tax = Taxonomy::from_edges(inst.edges.iter().map(|(c, p)| (c.as_str(), p.as_str()))).unwrap();
        let oracle = Oracle {
            parents: {
                let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for (c, p) in &inst.edges {
                    m.entry(p.clone()).or_default();
                    m.entry(c.clone()).or_default().push(p.clone());
                }
                m
            },
        };
        let results: Vec<Grouping> = thetas
            .iter()
            .map(|&t| group_semantics(&tax, &inst.content, &inst.style, t).unwrap())
            .collect();
        if thetas.iter().zip(&results).all(|(&t, g)| *g == oracle.group(&inst.content, &inst.style, t)) {
            equal += 1;
        }
        if results.windows(2).all(|w| refines(&w[1], &w[0])) {
            monotone += 1;
        }
        // at θ = 1 the output is exactly the difference-merged shared table
        let last = results.last().unwrap();
        let mut shared = difference_merge(&tax, &inst.style, &inst.content).unwrap().classes;
        shared.sort_by_key(|c| c.canonical_name());
        if last.classes == shared {
            no_merge += 1;
        }
        let at_default = &results[thetas.iter().position(|&t| t == 0.6).unwrap()];
        if at_default.classes.len() < last.classes.len() {
            merged_at_default += 1;
        }
    }

    report(
        "grouping oracle",
        equal == total,
        format!("{equal}/{total} instances equal to brute force at θ ∈ {thetas:?}"),
    );
    report("grouping θ-monotonicity", monotone == total, format!("{monotone}/{total} refine as θ grows"));
    report("grouping θ = 1 no merges", no_merge == total, format!("{no_merge}/{total} keep every shared class"));
    report(
        "grouping θ = 0.6 exercised",
        merged_at_default > 0,
        format!("{merged_at_default}/{total} instances merge classes at θ = 0.6"),
    );
}

#[test]
fn reduction_threshold_example() {
    let table = |a: &str, b: &str| -> Result<f64> {
        let key = if a <= b { (a, b) } else { (b, a) };
        Ok(match key {
            _ if a == b => 1.0,
            ("a", "b") => 0.7,
            ("b", "c") => 0.65,
            _ => 0.2,
        })
    };
    let classes = [ClassSet::word("a"), ClassSet::word("b"), ClassSet::word("c")];
    let names = |theta| -> Vec<String> {
        class_reduction_with(&classes, theta, table)
            .unwrap()
            .iter()
            .map(|g| g.merged.canonical_name())
            .collect()
    };
    let (lo, hi) = (names(0.6), names(0.68));
    report(
        "class reduction example",
        lo == ["a;b;c"] && hi == ["a;b", "c"],
        format!("θ=0.6 {lo:?}, θ=0.68 {hi:?}"),
    );
}

#[test]
fn li_point_checks() {
    let tax = Taxonomy::parse("water\tentity\nriver\twater\nsea\twater\nrock\tentity\nidea\tentity\n").unwrap();
    let round4 = |x: f64| (x * 1e4).round() / 1e4;
    let river_sea = round4(tax.word_similarity("river", "sea").unwrap());
    let rock_idea = round4(tax.word_similarity("rock", "idea").unwrap());
    let water_sea = round4(tax.word_similarity("water", "sea").unwrap());
    report(
        "Li similarity point checks",
        river_sea == 0.5588 && rock_idea == 0.3600 && water_sea == 0.6825,
        format!("river–sea {river_sea:.4}, rock–idea {rock_idea:.4}, water–sea {water_sea:.4}"),
    );
}

// ------------------------------------------------------------------- losses

#[test]
fn single_class_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut worst = 0.0f64;
    let classes = [ClassSet::word("sky")];
    for _ in 0..20 {
        let (h, w) = (rng.random_range(4..12), rng.random_range(4..12));
        let layers = ["conv1_1", "conv2_1"];
        let pyramid = build_mask_pyramid(&Tensor::full(&[1, h, w], 1.0), &classes, &layers).unwrap();
        let mut out = BTreeMap::new();
        let mut sty = BTreeMap::new();
        let mut weights = BTreeMap::new();
        let mut plain = 0.0;
        for (k, layer) in layers.iter().enumerate() {
            let (lh, lw) = (h.div_ceil(1 << k), w.div_ceil(1 << k));
            let n = rng.random_range(2..7);
            let fo: Tensor64 = Tensor::from_fn(&[n, lh, lw], |_| rng.random_range(0.0..2.0));
            let fs: Tensor64 = Tensor::from_fn(&[n, lh, lw], |_| rng.random_range(0.0..2.0));
            let beta = rng.random_range(0.1..10.0);
            plain += beta * style_loss(&fo, &fs).unwrap().0;
            out.insert(layer.to_string(), fo);
            sty.insert(layer.to_string(), fs);
            weights.insert(layer.to_string(), beta);
        }
        let aug = augmented_style_loss(
            &FeatureCapture::new(out),
            &FeatureCapture::new(sty),
            &pyramid,
            &pyramid,
            &weights,
            1.0,
        )
        .unwrap();
        worst = worst.max((aug.value - plain).abs() / plain.abs());
    }
    report("single-class reduction", worst < 1e-6, format!("max relative gap {worst:.2e} over 20 captures"));
}

// ---------------------------------------------------------------- optimizer

#[test]
fn adam_closed_form() {
    let mut x: Tensor64 = Tensor::zeros(&[1]);
    let mut state = AdamState::new(&[1], AdamParams::default());
    state.step(&mut x, &Tensor::full(&[1], 2.0)).unwrap();
    let first = x.data()[0];

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut y = uniform(&[4, 5, 3], &mut rng);
    let before = y.clone();
    let mut state = AdamState::new(y.shape(), AdamParams::default());
    for _ in 0..10 {
        state.step(&mut y, &Tensor::zeros(&[4, 5, 3])).unwrap();
    }
    let fixed = y == before;
    report(
        "Adam closed form",
        (first + 1.0).abs() < 1e-6 && fixed,
        format!("first step x = {first:.9}, zero-gradient fixpoint {}", if fixed { "exact" } else { "moved" }),
    );
}

fn scene(h: usize, w: usize, seed: u64, colors: [[f32; 3]; 3], split: [usize; 2]) -> (Tensor32, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Vec::with_capacity(h * w * 3);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let l = if y < split[0] { 0 } else if y < split[1] { 1 } else { 2 };
            labels.push(l);
            for c in 0..3 {
                let tex = 0.08 * (x as f32 * 0.7 + y as f32 * 0.3 + c as f32).sin() + rng.random_range(-0.05..0.05);
                img.push((colors[l][c] + tex).clamp(0.0, 1.0));
            }
        }
    }
    (Tensor::new(vec![h, w, 3], img).unwrap(), labels)
}

fn descent_run() -> Vec<LossReport> {
    let (h, w) = (96, 96);
    let (content, cl) = scene(h, w, 1, [[0.55, 0.75, 0.95], [0.1, 0.35, 0.6], [0.85, 0.75, 0.5]], [30, 60]);
    let (style, sl) = scene(h, w, 2, [[0.95, 0.6, 0.3], [0.3, 0.2, 0.4], [0.6, 0.4, 0.2]], [40, 70]);
    let tax = Taxonomy::ade20k();
    let cc = vec![ClassSet::word("sky"), ClassSet::word("sea"), ClassSet::word("sand")];
    let sc = vec![ClassSet::word("sky"), ClassSet::word("water"), ClassSet::word("sand")];
    let g = group_semantics(&tax, &cc, &sc, 0.6).unwrap();
    let cmap = SegmentationMap::new(w, h, cl, cc).unwrap().relabel(&g.content_map, g.classes.clone()).unwrap();
    let smap = SegmentationMap::new(w, h, sl, sc).unwrap().relabel(&g.style_map, g.classes.clone()).unwrap();
    let model = VggModel32::synthetic(7);
    let lap = build_matting_laplacian(&content, MattingParams::default()).unwrap();
    let obj = Objective::new(
        &model,
        LossConfig::default(),
        &content,
        &style,
        &binary_masks(&cmap),
        &binary_masks(&smap),
        &g.classes,
    )
    .unwrap()
    .with_laplacian(lap)
    .with_scorer(Box::new(ContrastScorer::default()));
    let init = init_transfer_image(InitMode::Content, &content, &style, 0).unwrap();
    let config = RunConfig {
        iterations: 300,
        ..Default::default()
    };
    optim::run(&obj, &init, &config, |_, _, _| Ok(())).unwrap().log
}

#[test]
fn end_to_end_descent() {
    let start = Instant::now();
    let first = descent_run();
    let second = descent_run();
    let elapsed = start.elapsed().as_secs_f64() / 2.0;
    let (initial, last) = (first[0].total, first.last().unwrap().total);
    let same = first.len() == second.len()
        && first.iter().zip(&second).all(|(a, b)| a.csv_row(0) == b.csv_row(0) && a.total == b.total);
    report(
        "end-to-end descent",
        last < 0.5 * initial && same && elapsed < 600.0,
        format!(
            "96×96, 300 iterations: total {initial:.3e} -> {last:.3e} (ratio {:.3}), logs {}, {elapsed:.1}s per run",
            last / initial,
            if same { "identical" } else { "differ" }
        ),
    );
}

// ------------------------------------------------------------- segmentation

#[test]
fn mask_pyramid_partition_of_unity() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..30 {
        let (h, w) = (rng.random_range(1..70), rng.random_range(1..70));
        let c = rng.random_range(1..6);
        let classes: Vec<ClassSet> = (0..c).map(|i| ClassSet::word(&format!("class{i}"))).collect();
        let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..c)).collect();
        let map = SegmentationMap::new(w, h, labels, classes.clone()).unwrap();
        let pyramid: MaskPyramid64 = build_mask_pyramid(&binary_masks(&map), &classes, &CAPTURED).unwrap();
        for layer in CAPTURED {
            let level = pyramid.level(layer).unwrap();
            let (_, lh, lw) = level.dims3().unwrap();
            for p in 0..lh * lw {
                let s: f64 = (0..c).map(|k| level.data()[k * lh * lw + p]).sum();
                worst = worst.max((s - 1.0).abs());
                checked += 1;
            }
        }
    }
    report(
        "mask pyramid partition of unity",
        worst < 1e-5,
        format!("max |Σ_c mask - 1| {worst:.2e} over {checked} cells"),
    );
}
