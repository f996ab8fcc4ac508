//! Exact-greedy gradient-boosted regression trees with logistic loss.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Stand-in for missing cells; larger than any encoded value so splits can
/// isolate it.
pub const MISSING: f64 = 1.0e300;

pub const MIN_ROWS_PER_CLASS: usize = 10;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtSpec {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum hessian mass per child.
    pub min_child_weight: f64,
}

impl Default for GbdtSpec {
    fn default() -> Self {
        GbdtSpec {
            rounds: 100,
            max_depth: 6,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
        }
    }
}

impl GbdtSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.max_depth == 0 {
            return Err(Error::Config("gbdt rounds and max_depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::Config(format!("invalid gbdt spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(w) => return w,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] < threshold { left } else { right },
            }
        }
    }
}

struct Grower<'a> {
    spec: &'a GbdtSpec,
    /// Column-major features.
    x: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| (g + self.g[r], h + self.h[r]));
        self.nodes.push(Node::Leaf(-self.spec.learning_rate * g / (h + self.spec.lambda)));
        self.nodes.len() - 1
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        if depth == self.spec.max_depth || rows.len() < 2 {
            return self.leaf(&rows);
        }
        let lambda = self.spec.lambda;
        let mcw = self.spec.min_child_weight;
        let (gt, ht) = rows.iter().fold((0.0, 0.0), |(g, h), &r| (g + self.g[r], h + self.h[r]));
        let parent_score = gt * gt / (ht + lambda);

        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = rows.clone();
        for (f, col) in self.x.iter().enumerate() {
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..order.len() - 1 {
                let r = order[k];
                gl += self.g[r];
                hl += self.h[r];
                let (v, next) = (col[r], col[order[k + 1]]);
                if v == next {
                    continue;
                }
                let (gr, hr) = (gt - gl, ht - hl);
                if hl < mcw || hr < mcw {
                    continue;
                }
                let gain = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_score);
                if gain > 1e-12 && best.is_none_or(|(b, _, _)| gain > b) {
                    best = Some((gain, f, 0.5 * (v + next)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(&rows);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| self.x[feature][i] < threshold);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(0.0));
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

/// Binary classifier; margins start at 0 (probability 0.5).
#[derive(Clone, Debug)]
pub struct Gbdt {
    trees: Vec<Tree>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Gbdt {
    /// Fit on row-major features and 0/1 labels.
    pub fn fit(spec: &GbdtSpec, rows: &[Vec<f64>], labels: &[f64]) -> Result<Gbdt> {
        spec.validate()?;
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(Error::Shape(format!("{} rows, {} labels", rows.len(), labels.len())));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        if rows.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Eval("feature matrix contains NaN".into()));
        }
        let x: Vec<Vec<f64>> = (0..d).map(|f| rows.iter().map(|r| r[f]).collect()).collect();
        let n = rows.len();
        let mut margin = vec![0.0; n];
        let (mut g, mut h) = (vec![0.0; n], vec![0.0; n]);
        let mut trees = Vec::with_capacity(spec.rounds);
        for _ in 0..spec.rounds {
            for i in 0..n {
                let p = sigmoid(margin[i]);
                g[i] = p - labels[i];
                h[i] = p * (1.0 - p);
            }
            let mut grower = Grower {
                spec,
                x: &x,
                g: &g,
                h: &h,
                nodes: Vec::new(),
            };
            grower.grow((0..n).collect(), 0);
            let tree = Tree { nodes: grower.nodes };
            for (i, m) in margin.iter_mut().enumerate() {
                *m += tree.predict(&rows[i]);
            }
            trees.push(tree);
        }
        Ok(Gbdt { trees })
    }

    pub fn margin(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum()
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(self.margin(row))
    }

    /// Class 1 only when strictly more likely than class 0.
    pub fn predict(&self, row: &[f64]) -> u8 {
        u8::from(self.margin(row) > 0.0)
    }
}

/// Held-out accuracy of separating `real` (label 0) from `synth` (label 1).
///
/// The larger class is subsampled to the size of the smaller one and 20% of
/// each class is held out. Rows with identical features in both classes are
/// paired and a pair always lands on the same side of the split, so exact
/// copies cannot be told apart and score 0.5.
pub fn gbdt_fit_predict(spec: &GbdtSpec, real: &[Vec<f64>], synth: &[Vec<f64>], seed: u64, stream: &str) -> Result<f64> {
    if real.len() < MIN_ROWS_PER_CLASS || synth.len() < MIN_ROWS_PER_CLASS {
        return Err(Error::Eval(format!(
            "discriminator needs at least {MIN_ROWS_PER_CLASS} rows per class, got {} real and {} synthetic",
            real.len(),
            synth.len()
        )));
    }
    let mut rng = rng::stream(seed, stream);
    let m = real.len().min(synth.len());
    let keep = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
        idx.sort_unstable();
        idx
    };
    let real_idx = keep(real.len(), &mut rng);
    let synth_idx = keep(synth.len(), &mut rng);

    // Pair identical rows across classes.
    let key = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut pending: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
    for &i in &real_idx {
        pending.entry(key(&real[i])).or_default().push(i);
    }
    let mut units: Vec<(Option<usize>, Option<usize>)> = Vec::with_capacity(2 * m);
    for &j in &synth_idx {
        match pending.get_mut(&key(&synth[j])).and_then(|v| v.pop()) {
            Some(i) => units.push((Some(i), Some(j))),
            None => units.push((None, Some(j))),
        }
    }
    let mut unpaired: Vec<usize> = pending.into_values().flatten().collect();
    unpaired.sort_unstable();
    units.extend(unpaired.into_iter().map(|i| (Some(i), None)));
    units.sort_unstable();
    units.shuffle(&mut rng);

    let target = ((m as f64) * TEST_FRACTION).round() as usize;
    let (mut test_real, mut test_synth) = (0, 0);
    let (mut train_x, mut train_y, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (ri, si) in units {
        let fits = (ri.is_none() || test_real < target) && (si.is_none() || test_synth < target);
        if fits {
            test_real += usize::from(ri.is_some());
            test_synth += usize::from(si.is_some());
        }
        for (row, label) in ri.map(|i| (&real[i], 0.0)).into_iter().chain(si.map(|j| (&synth[j], 1.0))) {
            if fits {
                test.push((row, label));
            } else {
                train_x.push(row.clone());
                train_y.push(label);
            }
        }
    }
    if test.is_empty() {
        return Err(Error::Eval("empty discriminator test split".into()));
    }
    let model = Gbdt::fit(spec, &train_x, &train_y)?;
    let correct = test
        .iter()
        .filter(|(row, label)| f64::from(model.predict(row)) == *label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}
