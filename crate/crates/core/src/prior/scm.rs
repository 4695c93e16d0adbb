//! Random structural causal models.
//!
//! Nodes are created in topological order. Each edge carries its own
//! mechanism (affine, one-hidden-layer tanh MLP, or a step function), and a
//! node's value is the sum of its incoming edge outputs plus node noise.
//! Every node column is standardized over rows before it feeds children, so
//! mechanisms always see unit-scale inputs.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureKind, FeatureMatrix, PriorConfig, PriorError, Task, MAX_RESAMPLES};

enum Mechanism {
    Linear { weight: f64 },
    Mlp { w_in: Vec<f64>, b_in: Vec<f64>, w_out: Vec<f64> },
    Steps { thresholds: Vec<f64>, levels: Vec<f64> },
}

impl Mechanism {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Self::Linear { weight } => weight * x,
            Self::Mlp { w_in, b_in, w_out } => {
                w_in.iter().zip(b_in).zip(w_out).map(|((w, b), v)| v * (w * x + b).tanh()).sum()
            }
            Self::Steps { thresholds, levels } => {
                let k = thresholds.iter().take_while(|&&t| x >= t).count();
                levels[k]
            }
        }
    }
}

#[derive(Clone, Copy)]
enum NoiseKind {
    Normal,
    Uniform,
}

fn noise<R: Rng + ?Sized>(kind: NoiseKind, rng: &mut R) -> f64 {
    match kind {
        NoiseKind::Normal => StandardNormal.sample(rng),
        // Unit variance.
        NoiseKind::Uniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
    }
}

fn standardize(col: &mut [f64]) -> f64 {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in col.iter_mut() {
        *v -= mean;
        if sd > 1e-12 {
            *v /= sd;
        }
    }
    sd
}

fn sample_mechanism<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> Mechanism {
    let mix = cfg.mechanism_mix;
    let u: f64 = rng.random::<f64>() * (mix.linear + mix.mlp + mix.piecewise);
    let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    if u < mix.linear {
        Mechanism::Linear { weight: normal(rng) }
    } else if u < mix.linear + mix.mlp {
        let width = cfg.hidden_width.sample(rng);
        let scale = 1.0 / (width as f64).sqrt();
        Mechanism::Mlp {
            w_in: (0..width).map(|_| 1.5 * normal(rng)).collect(),
            b_in: (0..width).map(|_| normal(rng)).collect(),
            w_out: (0..width).map(|_| scale * normal(rng)).collect(),
        }
    } else {
        let steps = rng.random_range(2..=4usize);
        let mut thresholds: Vec<f64> = (0..steps - 1).map(|_| normal(rng)).collect();
        thresholds.sort_by(f64::total_cmp);
        Mechanism::Steps { thresholds, levels: (0..steps).map(|_| normal(rng)).collect() }
    }
}

/// Row grouping for tasks whose rows come in clusters (say, several samples per site).
struct RowGroups {
    count: usize,
    member: Vec<usize>,
    shared_root: Vec<bool>,
}

impl RowGroups {
    fn sample<R: Rng + ?Sized>(n_rows: usize, n_nodes: usize, rng: &mut R) -> Self {
        let count = rng.random_range(2..=(n_rows / 3).max(2));
        let member = (0..n_rows).map(|_| rng.random_range(0..count)).collect();
        // Node 0 is always a root, so at least one root is shared.
        let shared_root = (0..n_nodes).map(|j| j == 0 || rng.random::<bool>()).collect();
        Self { count, member, shared_root }
    }
}

pub(super) fn sample<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> Result<Task, PriorError> {
    for _ in 0..MAX_RESAMPLES {
        if let Some(task) = draw(cfg, rng)? {
            return Ok(task);
        }
    }
    Err(PriorError::Degenerate { attempts: MAX_RESAMPLES })
}

/// One attempt; `None` when the target came out constant.
fn draw<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> Result<Option<Task>, PriorError> {
    let n_features = rng.random_range(cfg.min_features..=cfg.max_features);
    let n_rows = rng.random_range(cfg.min_rows..=cfg.max_rows);
    let n_nodes = rng.random_range(cfg.dag_nodes.min.max(n_features + 1)..=cfg.dag_nodes.max.max(n_features + 1));

    // Graph: parents[j] ⊂ 0..j.
    let edge_prob = rng.random_range(0.2..0.7);
    let mut parents: Vec<Vec<usize>> = (0..n_nodes)
        .map(|j| (0..j).filter(|_| rng.random::<f64>() < edge_prob).collect())
        .collect();

    // Target: a non-root whose parents can all be exposed as features.
    let candidates: Vec<usize> =
        (1..n_nodes).filter(|&j| !parents[j].is_empty() && parents[j].len() <= n_features).collect();
    let target = match candidates.as_slice() {
        [] => {
            let j = n_nodes - 1;
            let k = rng.random_range(1..=n_features.min(j));
            let mut ps = index::sample(rng, j, k).into_vec();
            ps.sort_unstable();
            parents[j] = ps;
            j
        }
        cs => cs[rng.random_range(0..cs.len())],
    };

    let mechanisms: Vec<Vec<Mechanism>> =
        parents.iter().map(|ps| ps.iter().map(|_| sample_mechanism(cfg, rng)).collect()).collect();
    let noise_kinds: Vec<NoiseKind> = (0..n_nodes)
        .map(|_| if rng.random::<bool>() { NoiseKind::Normal } else { NoiseKind::Uniform })
        .collect();
    let noise_scales: Vec<f64> = (0..n_nodes).map(|_| cfg.noise_scale.sample(rng)).collect();

    let groups = if cfg.grouped_row_rate > 0.0 && rng.random::<f64>() < cfg.grouped_row_rate {
        Some(RowGroups::sample(n_rows, n_nodes, rng))
    } else {
        None
    };

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n_nodes);
    for j in 0..n_nodes {
        let mut col = vec![0.0; n_rows];
        if parents[j].is_empty() {
            match groups.as_ref().filter(|g| g.shared_root[j]) {
                Some(g) => {
                    let levels: Vec<f64> = (0..g.count).map(|_| noise(noise_kinds[j], rng)).collect();
                    for (v, &k) in col.iter_mut().zip(&g.member) {
                        *v = levels[k];
                    }
                }
                None => {
                    for v in col.iter_mut() {
                        *v = noise(noise_kinds[j], rng);
                    }
                }
            }
        } else {
            for (r, v) in col.iter_mut().enumerate() {
                let signal: f64 =
                    parents[j].iter().zip(&mechanisms[j]).map(|(&p, m)| m.apply(columns[p][r])).sum();
                *v = signal + noise_scales[j] * noise(noise_kinds[j], rng);
            }
        }
        standardize(&mut col);
        columns.push(col);
    }

    // Features: all target parents, topped up with other nodes.
    let mut features = parents[target].clone();
    let mut others: Vec<usize> = (0..n_nodes).filter(|&j| j != target && !features.contains(&j)).collect();
    others.shuffle(rng);
    features.extend(others.into_iter().take(n_features - features.len()));
    features.shuffle(rng);

    if let Some(g) = &groups {
        let sd = rng.random_range(0.2..1.0);
        let offsets: Vec<f64> = (0..g.count).map(|_| sd * noise(NoiseKind::Normal, rng)).collect();
        for (t, &k) in columns[target].iter_mut().zip(&g.member) {
            *t += offsets[k];
        }
    }

    let obs_sd = cfg.noise_scale.sample(rng);
    let y: Vec<f64> = columns[target].iter().map(|&t| t + obs_sd * noise(NoiseKind::Normal, rng)).collect();
    let mean = y.iter().sum::<f64>() / n_rows as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_rows as f64).sqrt();
    if !(sd > 1e-8) {
        return Ok(None);
    }

    // Optional integer coding of some features.
    let mut schema = Vec::with_capacity(n_features);
    let mut x_cols: Vec<Vec<f64>> = Vec::with_capacity(n_features);
    for &f in &features {
        let mut col = columns[f].clone();
        if rng.random::<f64>() < cfg.categorical_feature_rate {
            let k = rng.random_range(2..=6usize);
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            let cuts: Vec<f64> = (1..k).map(|i| sorted[i * n_rows / k]).collect();
            let mut codes: Vec<usize> = (0..k).collect();
            codes.shuffle(rng);
            for v in col.iter_mut() {
                let bin = cuts.iter().take_while(|&&c| *v >= c).count();
                *v = codes[bin] as f64;
            }
            schema.push(FeatureKind::Categorical);
        } else {
            schema.push(FeatureKind::Continuous);
        }
        x_cols.push(col);
    }

    let missing_rate = cfg.missing_input_rate.sample(rng);
    let mut values = Vec::with_capacity(n_rows * n_features);
    let mut missing = Vec::with_capacity(n_rows * n_features);
    for r in 0..n_rows {
        for col in &x_cols {
            let m = missing_rate > 0.0 && rng.random::<f64>() < missing_rate;
            values.push(if m { 0.0 } else { col[r] });
            missing.push(m);
        }
    }
    let all = FeatureMatrix::new(n_rows, n_features, values, missing)?;

    let frac = cfg.train_fraction.sample(rng);
    let n_train = ((frac * n_rows as f64).round() as usize).clamp(2, n_rows - 1);
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(rng);
    let (train_idx, test_idx) = order.split_at(n_train);

    let task = Task::new(
        all.select_rows(train_idx),
        train_idx.iter().map(|&i| y[i]).collect(),
        all.select_rows(test_idx),
        Some(test_idx.iter().map(|&i| y[i]).collect()),
        schema,
    )?;
    Ok(Some(task))
}
