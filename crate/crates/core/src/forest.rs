//! Random survival forest: log-rank splitting, Nelson–Aalen leaves, bagging.
//!
//! The scalar risk of a row is its ensemble mortality, the sum of the ensemble
//! cumulative hazard over the training event-time grid.

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::CoalitionModel;
use crate::data::{Schema, SurvivalDataset};
use crate::error::{Error, Result};
use crate::evaluation::concordance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features tried per node; `None` means `floor(sqrt(p))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub min_split: usize,
    /// `None` grows until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub seed: u64,
    /// Disable to grow every tree on the full training set.
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            mtry: None,
            min_leaf: 3,
            min_split: 6,
            max_depth: None,
            seed: 0,
            bootstrap: true,
        }
    }
}

impl ForestConfig {
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (p as f64).sqrt().floor() as usize)
            .max(1)
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Argument("n_trees must be >= 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::Argument("min_leaf must be >= 1".into()));
        }
        let mtry = self.resolved_mtry(p);
        if mtry > p {
            return Err(Error::Argument(format!("mtry {mtry} exceeds {p} features")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub times: Vec<f64>,
    /// Nelson–Aalen cumulative hazard at each of `times`.
    pub cumhaz: Vec<f64>,
    /// In-bag rows, counting bootstrap repeats.
    pub n_rows: usize,
    pub mortality: f64,
}

impl Leaf {
    fn nelson_aalen(time: &[f64], event: &[u8], rows: &[usize]) -> Self {
        let mut sorted: Vec<usize> = rows.to_vec();
        sorted.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
        let mut at_risk = sorted.len();
        let mut times = Vec::new();
        let mut cumhaz = Vec::new();
        let mut h = 0.0;
        let mut k = 0;
        while k < sorted.len() {
            let t = time[sorted[k]];
            let (mut d, mut leaving) = (0usize, 0usize);
            while k < sorted.len() && time[sorted[k]] == t {
                d += event[sorted[k]] as usize;
                leaving += 1;
                k += 1;
            }
            if d > 0 {
                h += d as f64 / at_risk as f64;
                times.push(t);
                cumhaz.push(h);
            }
            at_risk -= leaving;
        }
        Self {
            times,
            cumhaz,
            n_rows: rows.len(),
            mortality: 0.0,
        }
    }

    pub fn chf(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 0.0,
            k => self.cumhaz[k - 1],
        }
    }

    fn set_mortality(&mut self, grid: &[f64]) {
        let mut sum = 0.0;
        let mut k = 0;
        for &g in grid {
            while k < self.times.len() && self.times[k] <= g {
                k += 1;
            }
            if k > 0 {
                sum += self.cumhaz[k - 1];
            }
        }
        self.mortality = sum;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        column: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(Leaf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTree {
    /// Arena with the root at index 0.
    pub nodes: Vec<Node>,
    /// Training row indices drawn for this tree, with repeats.
    pub in_bag: Vec<u32>,
}

impl SurvivalTree {
    /// A single-leaf tree with the given hazard steps.
    pub fn stump(times: Vec<f64>, cumhaz: Vec<f64>) -> Self {
        Self {
            nodes: vec![Node::Leaf(Leaf {
                times,
                cumhaz,
                n_rows: 0,
                mortality: 0.0,
            })],
            in_bag: Vec::new(),
        }
    }

    pub fn leaf_for(&self, x: &[f64]) -> &Leaf {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Split {
                    column,
                    threshold,
                    left,
                    right,
                } => id = if x[*column] <= *threshold { *left } else { *right },
                Node::Leaf(leaf) => return leaf,
            }
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Leaf> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf(l) => Some(l),
            Node::Split { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<SurvivalTree>,
    pub event_time_grid: Vec<f64>,
    pub config: ForestConfig,
    pub n_features: usize,
    pub oob_concordance: Option<f64>,
}

impl ForestModel {
    /// Assemble a forest from prebuilt trees, computing leaf mortality on `grid`.
    pub fn from_trees(mut trees: Vec<SurvivalTree>, grid: Vec<f64>, n_features: usize) -> Self {
        for tree in &mut trees {
            for node in &mut tree.nodes {
                if let Node::Leaf(leaf) = node {
                    leaf.set_mortality(&grid);
                }
            }
        }
        Self {
            trees,
            event_time_grid: grid,
            config: ForestConfig::default(),
            n_features,
            oob_concordance: None,
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::Shape(format!(
                "row has {} columns, forest expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    pub fn predict_chf(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check(x)?;
        let sum: f64 = self.trees.iter().map(|tree| tree.leaf_for(x).chf(t)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict_risk(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.risk_unchecked(x))
    }

    pub(crate) fn risk_unchecked(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|tree| tree.leaf_for(x).mortality).sum();
        sum / self.trees.len() as f64
    }

    /// Risk for every row of an encoded matrix.
    pub fn predict_risk_matrix(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Shape(format!(
                "matrix has {} columns, forest expects {}",
                x.ncols(),
                self.n_features
            )));
        }
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|i| self.risk_unchecked(&x.row(i).to_vec()))
            .collect())
    }
}

/// A forest scored on source-feature vectors, as the attribution layer sees it.
pub struct SourceForest<'a> {
    forest: &'a ForestModel,
    schema: &'a Schema,
    /// Source feature behind each encoded column.
    owner: Vec<usize>,
}

impl<'a> SourceForest<'a> {
    pub fn new(forest: &'a ForestModel, schema: &'a Schema) -> Result<Self> {
        if schema.encoded_width() != forest.n_features {
            return Err(Error::Shape(format!(
                "schema encodes {} columns, forest expects {}",
                schema.encoded_width(),
                forest.n_features
            )));
        }
        let owner = schema
            .columns()
            .iter()
            .map(|c| schema.index_of(&c.feature).expect("column of a schema feature"))
            .collect();
        Ok(Self { forest, schema, owner })
    }

    fn encode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.schema.len() {
            return Err(Error::Shape(format!(
                "row has {} features, schema has {}",
                z.len(),
                self.schema.len()
            )));
        }
        Ok(self.schema.encode_source(z))
    }
}

impl CoalitionModel for SourceForest<'_> {
    fn value(&self, z: &[f64]) -> Result<f64> {
        Ok(self.forest.risk_unchecked(&self.encode(z)?))
    }

    /// One walk per tree: the walk forks only where `x` and `reference` part
    /// ways at a split whose feature is not yet fixed on the path, and each
    /// leaf credits every coalition consistent with the path. Sums run over
    /// trees in order, so values equal per-coalition evaluation exactly.
    fn all_coalitions(&self, x: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
        let m = x.len();
        if m >= 31 {
            return Err(Error::Mode(format!("coalition enumeration over {m} features")));
        }
        let (ex, er) = (self.encode(x)?, self.encode(reference)?);
        let full = (1u32 << m) - 1;
        let mut acc = vec![0.0f64; 1 << m];
        let mut stack: Vec<(usize, u32, u32)> = Vec::new();
        for tree in &self.forest.trees {
            stack.push((0, 0, 0));
            while let Some((id, on, off)) = stack.pop() {
                match &tree.nodes[id] {
                    Node::Split {
                        column,
                        threshold,
                        left,
                        right,
                    } => {
                        let bit = 1u32 << self.owner[*column];
                        let side = |v: f64| if v <= *threshold { *left } else { *right };
                        let (gx, gr) = (side(ex[*column]), side(er[*column]));
                        if on & bit != 0 || gx == gr {
                            stack.push((gx, on, off));
                        } else if off & bit != 0 {
                            stack.push((gr, on, off));
                        } else {
                            stack.push((gx, on | bit, off));
                            stack.push((gr, on, off | bit));
                        }
                    }
                    Node::Leaf(leaf) => {
                        let free = full & !(on | off);
                        let mut sub = free;
                        loop {
                            acc[(on | sub) as usize] += leaf.mortality;
                            if sub == 0 {
                                break;
                            }
                            sub = (sub - 1) & free;
                        }
                    }
                }
            }
        }
        let n = self.forest.trees.len() as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    }
}

/// Absolute standardized log-rank statistic for a two-way split.
///
/// Returns `None` when a side is empty or there is no event.
pub fn logrank_split_score(time: &[f64], event: &[u8], left: &[bool]) -> Option<f64> {
    let n_left = left.iter().filter(|&&l| l).count();
    if n_left == 0 || n_left == left.len() || !event.iter().any(|&e| e == 1) {
        return None;
    }
    let mut event_times: Vec<f64> = time
        .iter()
        .zip(event)
        .filter(|(_, &e)| e == 1)
        .map(|(&t, _)| t)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let (mut num, mut var) = (0.0f64, 0.0f64);
    for &t in &event_times {
        let (mut y, mut yl, mut d, mut dl) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..time.len() {
            if time[i] >= t {
                y += 1.0;
                if left[i] {
                    yl += 1.0;
                }
            }
            if time[i] == t && event[i] == 1 {
                d += 1.0;
                if left[i] {
                    dl += 1.0;
                }
            }
        }
        num += dl - yl * d / y;
        if y > 1.0 {
            var += yl / y * (1.0 - yl / y) * (y - d) / (y - 1.0) * d;
        }
    }
    Some(if var > 0.0 { num.abs() / var.sqrt() } else { 0.0 })
}

struct Grower<'a> {
    x: &'a Array2<f64>,
    time: &'a [f64],
    event: &'a [u8],
    config: &'a ForestConfig,
    mtry: usize,
}

/// Per-node split search state reused across candidate features.
struct NodeStats {
    event_times: Vec<f64>,
    /// Per row: number of node event times `<= time`.
    upper: Vec<usize>,
    /// Per row: index of its event time, if it had an event.
    event_idx: Vec<Option<usize>>,
    at_risk: Vec<f64>,
    deaths: Vec<f64>,
}

impl NodeStats {
    fn new(time: &[f64], event: &[u8], rows: &[usize]) -> Self {
        let mut event_times: Vec<f64> = rows
            .iter()
            .filter(|&&i| event[i] == 1)
            .map(|&i| time[i])
            .collect();
        event_times.sort_by(f64::total_cmp);
        event_times.dedup();
        let k = event_times.len();
        let mut upper = Vec::with_capacity(rows.len());
        let mut event_idx = Vec::with_capacity(rows.len());
        let mut count_upper = vec![0.0; k + 1];
        let mut deaths = vec![0.0; k];
        for &i in rows {
            let u = event_times.partition_point(|&s| s <= time[i]);
            upper.push(u);
            count_upper[u] += 1.0;
            let e = (event[i] == 1).then(|| u - 1);
            if let Some(e) = e {
                deaths[e] += 1.0;
            }
            event_idx.push(e);
        }
        // rows with upper > j are at risk at event time j
        let mut at_risk = vec![0.0; k];
        let mut acc = 0.0;
        for j in (0..k).rev() {
            acc += count_upper[j + 1];
            at_risk[j] = acc;
        }
        Self {
            event_times,
            upper,
            event_idx,
            at_risk,
            deaths,
        }
    }

    fn score(&self, left_upper: &[f64], left_deaths: &[f64]) -> f64 {
        let k = self.event_times.len();
        let (mut num, mut var) = (0.0, 0.0);
        let mut yl = 0.0;
        for j in (0..k).rev() {
            yl += left_upper[j + 1];
            let y = self.at_risk[j];
            let d = self.deaths[j];
            num += left_deaths[j] - yl * d / y;
            if y > 1.0 {
                var += yl / y * (1.0 - yl / y) * (y - d) / (y - 1.0) * d;
            }
        }
        if var > 0.0 {
            num.abs() / var.sqrt()
        } else {
            0.0
        }
    }
}

impl Grower<'_> {
    fn grow(&self, rows: Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<Node> {
        let mut nodes: Vec<Node> = Vec::new();
        let mut stack = vec![(0usize, rows, 0usize)];
        nodes.push(Node::Leaf(Leaf::nelson_aalen(self.time, self.event, &[])));
        while let Some((id, rows, depth)) = stack.pop() {
            match self.best_split(&rows, depth, rng) {
                Some((column, threshold)) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| self.x[[i, column]] <= threshold);
                    let left = nodes.len();
                    let right = left + 1;
                    nodes.push(Node::Leaf(Leaf::nelson_aalen(self.time, self.event, &[])));
                    nodes.push(Node::Leaf(Leaf::nelson_aalen(self.time, self.event, &[])));
                    nodes[id] = Node::Split {
                        column,
                        threshold,
                        left,
                        right,
                    };
                    stack.push((right, r, depth + 1));
                    stack.push((left, l, depth + 1));
                }
                None => {
                    nodes[id] = Node::Leaf(Leaf::nelson_aalen(self.time, self.event, &rows));
                }
            }
        }
        nodes
    }

    fn best_split(&self, rows: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let p = self.x.ncols();
        // draw features before any early exit so the stream does not depend on it
        let mut features: Vec<usize> = index::sample(rng, p, self.mtry).into_vec();
        features.sort_unstable();
        if rows.len() < self.config.min_split
            || rows.len() < 2 * self.config.min_leaf
            || self.config.max_depth.is_some_and(|d| depth >= d)
            || !rows.iter().any(|&i| self.event[i] == 1)
        {
            return None;
        }
        let stats = NodeStats::new(self.time, self.event, rows);
        let k = stats.event_times.len();
        let n = rows.len();
        let min_leaf = self.config.min_leaf;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = (0..n).collect();
        let mut left_upper = vec![0.0; k + 1];
        let mut left_deaths = vec![0.0; k];
        for &f in &features {
            let value = |pos: usize| self.x[[rows[pos], f]];
            order.sort_by(|&a, &b| value(a).total_cmp(&value(b)));
            left_upper.iter_mut().for_each(|v| *v = 0.0);
            left_deaths.iter_mut().for_each(|v| *v = 0.0);
            for (m, &pos) in order.iter().enumerate().take(n - 1) {
                left_upper[stats.upper[pos]] += 1.0;
                if let Some(e) = stats.event_idx[pos] {
                    left_deaths[e] += 1.0;
                }
                let (v, next) = (value(pos), value(order[m + 1]));
                let n_left = m + 1;
                if v == next || n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let score = stats.score(&left_upper, &left_deaths);
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, f, 0.5 * (v + next)));
                }
            }
        }
        match best {
            Some((score, f, threshold)) if score > 0.0 => Some((f, threshold)),
            _ => None,
        }
    }
}

/// Order rows by outcome then covariates so results do not depend on input order.
fn canonical_order(x: &Array2<f64>, time: &[f64], event: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| {
        time[a]
            .total_cmp(&time[b])
            .then(event[a].cmp(&event[b]))
            .then_with(|| {
                x.row(a)
                    .iter()
                    .zip(x.row(b).iter())
                    .map(|(u, v)| u.total_cmp(v))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    order
}

/// Grow a random survival forest on the encoded training matrix.
pub fn fit_rsf(train: &SurvivalDataset, config: &ForestConfig) -> Result<ForestModel> {
    let p = train.n_columns();
    config.validate(p)?;
    if train.n_events() == 0 {
        return Err(Error::Fit("random survival forest needs at least one event".into()));
    }
    let order = canonical_order(train.values(), train.time(), train.event());
    let x = train.values().select(ndarray::Axis(0), &order);
    let time: Vec<f64> = order.iter().map(|&i| train.time()[i]).collect();
    let event: Vec<u8> = order.iter().map(|&i| train.event()[i]).collect();
    let n = time.len();

    let mut grid: Vec<f64> = time
        .iter()
        .zip(&event)
        .filter(|(_, &e)| e == 1)
        .map(|(&t, _)| t)
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let grower = Grower {
        x: &x,
        time: &time,
        event: &event,
        config,
        mtry: config.resolved_mtry(p),
    };
    let mut trees: Vec<SurvivalTree> = (0..config.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(b as u64);
            let rows: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut nodes = grower.grow(rows.clone(), &mut rng);
            for node in &mut nodes {
                if let Node::Leaf(leaf) = node {
                    leaf.set_mortality(&grid);
                }
            }
            SurvivalTree {
                nodes,
                in_bag: rows.iter().map(|&i| order[i] as u32).collect(),
            }
        })
        .collect();
    trees.shrink_to_fit();

    let mut model = ForestModel {
        trees,
        event_time_grid: grid,
        config: *config,
        n_features: p,
        oob_concordance: None,
    };
    model.oob_concordance = oob_concordance(&model, train);
    Ok(model)
}

/// Concordance of out-of-bag mortality on the training rows, when defined.
fn oob_concordance(model: &ForestModel, train: &SurvivalDataset) -> Option<f64> {
    let n = train.n_rows();
    let in_bag: Vec<Vec<bool>> = model
        .trees
        .iter()
        .map(|tree| {
            let mut mask = vec![false; n];
            for &i in &tree.in_bag {
                mask[i as usize] = true;
            }
            mask
        })
        .collect();
    let oob: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = train.values().row(i).to_vec();
            let (mut sum, mut count) = (0.0, 0usize);
            for (tree, mask) in model.trees.iter().zip(&in_bag) {
                if !mask[i] {
                    sum += tree.leaf_for(&x).mortality;
                    count += 1;
                }
            }
            (count > 0).then(|| sum / count as f64)
        })
        .collect();
    let rows: Vec<usize> = (0..n).filter(|&i| oob[i].is_some()).collect();
    let risk: Vec<f64> = rows.iter().filter_map(|&i| oob[i]).collect();
    let time: Vec<f64> = rows.iter().map(|&i| train.time()[i]).collect();
    let event: Vec<u8> = rows.iter().map(|&i| train.event()[i]).collect();
    concordance(&time, &event, &risk).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureKind, FeatureSpec};
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Exp};

    fn dataset(source: Array2<f64>, time: Vec<f64>, event: Vec<u8>) -> SurvivalDataset {
        let names: Vec<FeatureSpec> = (0..source.ncols())
            .map(|j| FeatureSpec::continuous(format!("x{}", j + 1)))
            .collect();
        SurvivalDataset::from_source(Schema::new(names).unwrap(), source, time, event).unwrap()
    }

    fn random_dataset(n: usize, p: usize, seed: u64) -> SurvivalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, p), |_| (rng.random_range(0..20) as f64) / 4.0);
        let mut time = Vec::with_capacity(n);
        let mut event = Vec::with_capacity(n);
        for i in 0..n {
            let rate = (0.3 * x[[i, 0]] - 0.2 * x[[i, p - 1]]).exp();
            let t: f64 = Exp::new(rate).unwrap().sample(&mut rng);
            let c: f64 = Exp::new(0.3).unwrap().sample(&mut rng);
            time.push((t.min(c) * 10.0).ceil() / 10.0 + 0.1);
            event.push((t <= c) as u8);
        }
        dataset(x, time, event)
    }

    /// 2×2 table formulation: observed minus expected left deaths over each
    /// distinct event time, with the hypergeometric variance.
    fn textbook_logrank(time: &[f64], event: &[u8], left: &[bool]) -> f64 {
        let mut ts: Vec<f64> = (0..time.len()).filter(|&i| event[i] == 1).map(|i| time[i]).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let (mut o_minus_e, mut v) = (0.0, 0.0);
        for t in ts {
            let risk: Vec<usize> = (0..time.len()).filter(|&i| time[i] >= t).collect();
            let n1 = risk.iter().filter(|&&i| left[i]).count() as f64;
            let n = risk.len() as f64;
            let dead: Vec<usize> = risk.iter().copied().filter(|&i| time[i] == t && event[i] == 1).collect();
            let d = dead.len() as f64;
            let o1 = dead.iter().filter(|&&i| left[i]).count() as f64;
            o_minus_e += o1 - d * n1 / n;
            if n > 1.0 {
                v += d * (n1 / n) * ((n - n1) / n) * ((n - d) / (n - 1.0));
            }
        }
        o_minus_e.abs() / v.sqrt()
    }

    #[test]
    fn logrank_hand_values() {
        let time = [1., 1., 1., 1., 2., 2., 2., 2.];
        let event = [1, 1, 1, 1, 0, 0, 0, 0];
        let left = [true, true, true, true, false, false, false, false];
        // numerator 4 − 4·4/8 = 2, variance (1/2)(1/2)(4/7)·4 = 4/7
        let s = logrank_split_score(&time, &event, &left).unwrap();
        assert_abs_diff_eq!(s, 7f64.sqrt(), epsilon = 1e-12);

        let time = [1., 2., 3., 1., 2., 3.];
        let event = [1, 1, 0, 1, 1, 0];
        let left = [true, true, true, false, false, false];
        assert_eq!(logrank_split_score(&time, &event, &left).unwrap(), 0.0);
        assert!(logrank_split_score(&time, &event, &[true; 6]).is_none());
    }

    #[test]
    fn logrank_matches_textbook_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let time: Vec<f64> = (0..20).map(|_| rng.random_range(1..8) as f64).collect();
            let event: Vec<u8> = (0..20).map(|_| rng.random_range(0..2)).collect();
            let left: Vec<bool> = (0..20).map(|_| rng.random_bool(0.5)).collect();
            let (Some(s), true) = (
                logrank_split_score(&time, &event, &left),
                event.contains(&1) && left.contains(&true) && left.contains(&false),
            ) else {
                continue;
            };
            assert_abs_diff_eq!(s, textbook_logrank(&time, &event, &left), epsilon = 1e-10);
        }
    }

    #[test]
    fn root_split_is_argmax_of_enumerated_candidates() {
        for seed in 0..20 {
            let ds = random_dataset(12, 3, seed);
            let config = ForestConfig {
                n_trees: 1,
                mtry: Some(3),
                min_leaf: 2,
                min_split: 4,
                max_depth: Some(1),
                bootstrap: false,
                seed,
            };
            let model = fit_rsf(&ds, &config).unwrap();

            let mut best: Option<(f64, usize, f64)> = None;
            for f in 0..3 {
                let mut vals: Vec<f64> = ds.values().column(f).to_vec();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let thr = 0.5 * (w[0] + w[1]);
                    let left: Vec<bool> = ds.values().column(f).iter().map(|&v| v <= thr).collect();
                    let n_left = left.iter().filter(|&&l| l).count();
                    if n_left < 2 || 12 - n_left < 2 {
                        continue;
                    }
                    let s = textbook_logrank(ds.time(), ds.event(), &left);
                    if best.is_none_or(|(b, _, _)| s > b + 1e-12) {
                        best = Some((s, f, thr));
                    }
                }
            }
            match (&model.trees[0].nodes[0], best) {
                (Node::Split { column, threshold, .. }, Some((s, f, thr))) if s > 0.0 => {
                    assert_eq!((*column, *threshold), (f, thr), "seed {seed}");
                }
                (Node::Leaf(_), Some((s, _, _))) => assert!(s <= 0.0, "seed {seed}"),
                (node, b) => panic!("seed {seed}: {node:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn depth_zero_forest_is_nelson_aalen() {
        let ds = dataset(
            ndarray::array![[1.0], [2.0], [3.0], [4.0], [5.0]],
            vec![1., 2., 2., 3., 4.],
            vec![1, 1, 0, 1, 0],
        );
        let config = ForestConfig {
            n_trees: 3,
            max_depth: Some(0),
            bootstrap: false,
            ..ForestConfig::default()
        };
        let model = fit_rsf(&ds, &config).unwrap();
        assert!(model.trees.windows(2).all(|w| w[0].nodes == w[1].nodes));
        // 1/5 at t=1, 1/4 at t=2, 1/2 at t=3
        let h = [0.2, 0.2 + 0.25, 0.2 + 0.25 + 0.5];
        assert_abs_diff_eq!(model.predict_chf(&[9.0], 1.0).unwrap(), h[0], epsilon = 1e-12);
        assert_abs_diff_eq!(model.predict_chf(&[0.0], 2.5).unwrap(), h[1], epsilon = 1e-12);
        assert_abs_diff_eq!(model.predict_chf(&[3.0], 10.0).unwrap(), h[2], epsilon = 1e-12);
        assert_eq!(model.predict_chf(&[3.0], 0.0).unwrap(), 0.0);
        assert_eq!(model.event_time_grid, vec![1.0, 2.0, 3.0]);
        let risk = model.predict_risk(&[1.0]).unwrap();
        assert_abs_diff_eq!(risk, h.iter().sum::<f64>(), epsilon = 1e-12);
        assert_eq!(risk, model.predict_risk(&[5.0]).unwrap());
    }

    #[test]
    fn hand_built_ensembles() {
        let a = SurvivalTree::stump(vec![1.0], vec![0.2]);
        let b = SurvivalTree::stump(vec![1.0], vec![0.4]);
        let model = ForestModel::from_trees(vec![a.clone(), b], vec![1.0], 1);
        assert_abs_diff_eq!(model.predict_chf(&[0.0], 1.5).unwrap(), 0.3, epsilon = 1e-15);

        let single = ForestModel::from_trees(vec![SurvivalTree::stump(vec![1.0, 2.0], vec![0.1, 0.3])], vec![1.0, 2.0], 1);
        assert_abs_diff_eq!(single.predict_risk(&[0.0]).unwrap(), 0.4, epsilon = 1e-15);
        assert!(matches!(single.predict_risk(&[0.0, 1.0]), Err(Error::Shape(_))));

        let base = ForestModel::from_trees(vec![a.clone()], vec![1.0], 1);
        let grown = ForestModel::from_trees(vec![a, SurvivalTree::stump(vec![0.5], vec![0.9])], vec![1.0], 1);
        assert!(grown.predict_risk(&[0.0]).unwrap() >= base.predict_risk(&[0.0]).unwrap());
    }

    #[test]
    fn leaves_respect_min_leaf_and_monotone_hazard() {
        let ds = random_dataset(120, 4, 3);
        let config = ForestConfig {
            n_trees: 20,
            min_leaf: 5,
            min_split: 10,
            seed: 8,
            ..ForestConfig::default()
        };
        let model = fit_rsf(&ds, &config).unwrap();
        for tree in &model.trees {
            for leaf in tree.leaves() {
                assert!(leaf.n_rows >= 5);
                assert!(leaf.cumhaz.windows(2).all(|w| w[0] <= w[1]));
            }
        }
        assert!(model.oob_concordance.is_some());
    }

    #[test]
    fn identical_across_thread_counts() {
        let ds = random_dataset(80, 3, 5);
        let config = ForestConfig {
            n_trees: 16,
            seed: 42,
            ..ForestConfig::default()
        };
        let fit_with = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| fit_rsf(&ds, &config).unwrap())
        };
        assert_eq!(fit_with(1), fit_with(4));
    }

    #[test]
    fn row_order_does_not_change_predictions() {
        let ds = random_dataset(60, 3, 9);
        let perm: Vec<usize> = (0..60).rev().collect();
        let shuffled = ds.subset(&perm);
        let config = ForestConfig {
            n_trees: 10,
            seed: 1,
            ..ForestConfig::default()
        };
        let a = fit_rsf(&ds, &config).unwrap();
        let b = fit_rsf(&shuffled, &config).unwrap();
        assert_eq!(
            a.predict_risk_matrix(ds.values()).unwrap(),
            b.predict_risk_matrix(ds.values()).unwrap()
        );
    }

    #[test]
    fn batched_coalitions_equal_per_coalition_evaluation() {
        use rand::Rng;
        let schema = Schema::new(vec![
            FeatureSpec::continuous("a"),
            FeatureSpec::with_levels("b", FeatureKind::Nominal, &["p", "q", "r"]),
            FeatureSpec::continuous("c"),
            FeatureSpec::binary("d"),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 150;
        let source = Array2::from_shape_fn((n, 4), |(_, j)| match j {
            1 => f64::from(rng.random_range(0..3u8)),
            3 => f64::from(rng.random_range(0..2u8)),
            _ => rng.random::<f64>(),
        });
        let time: Vec<f64> = (0..n)
            .map(|i| Exp::new((source[[i, 0]] + source[[i, 1]]).exp()).unwrap().sample(&mut rng))
            .collect();
        let event: Vec<u8> = (0..n).map(|i| u8::from(i % 4 != 0)).collect();
        let ds = SurvivalDataset::from_source(schema.clone(), source.clone(), time, event).unwrap();
        let forest = fit_rsf(&ds, &ForestConfig { n_trees: 25, mtry: Some(3), ..Default::default() }).unwrap();
        let game = SourceForest::new(&forest, &schema).unwrap();
        let naive = |z: &[f64]| game.value(z);
        for (i, k) in [(0, 1), (7, 50), (33, 90)] {
            let x = source.row(i).to_vec();
            let r = source.row(k).to_vec();
            let fast = game.all_coalitions(&x, &r).unwrap();
            let slow = naive.all_coalitions(&x, &r).unwrap();
            assert_eq!(fast, slow);
            assert_eq!(fast[15], forest.predict_risk(&schema.encode_source(&x)).unwrap());
        }
    }

    #[test]
    fn no_events_rejected() {
        let ds = dataset(ndarray::array![[1.0], [2.0]], vec![1., 2.], vec![0, 0]);
        assert!(matches!(fit_rsf(&ds, &ForestConfig::default()), Err(Error::Fit(_))));
        let ds = random_dataset(10, 2, 0);
        let bad = ForestConfig {
            mtry: Some(3),
            ..ForestConfig::default()
        };
        assert!(fit_rsf(&ds, &bad).is_err());
    }
}
