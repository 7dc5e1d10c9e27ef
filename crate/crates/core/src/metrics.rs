//! Clustering error under label permutation, adjusted Rand index, and
//! cross-dataset rank / regret summaries.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{mean_sd, SdMode};
use crate::error::{Error, Result};

/// Largest K solved by enumerating all permutations.
pub const EXHAUSTIVE_MAX_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub error_count: usize,
    pub accuracy: f64,
    pub ari: f64,
    pub n: usize,
    /// `permutation[a - 1]` is the true label matched to predicted label `a`.
    pub permutation: Vec<usize>,
}

fn confusion(y_hat: &[usize], y: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if y_hat.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted labels vs {} true labels",
            y_hat.len(),
            y.len()
        )));
    }
    let mut c = vec![vec![0usize; k]; k];
    for (&a, &b) in y_hat.iter().zip(y) {
        if a == 0 || a > k || b == 0 || b > k {
            return Err(Error::InvalidArgument(format!("label pair ({a}, {b}) outside 1..={k}")));
        }
        c[a - 1][b - 1] += 1;
    }
    Ok(c)
}

/// Best total matches over all permutations (Heap's algorithm).
fn best_permutation_exhaustive(c: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let k = c.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let score = |p: &[usize]| -> usize { p.iter().enumerate().map(|(a, &b)| c[a][b]).sum() };
    let mut best = (score(&perm), perm.clone());
    let mut stack = vec![0usize; k];
    let mut i = 1;
    while i < k {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            let s = score(&perm);
            if s > best.0 {
                best = (s, perm.clone());
            }
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    best
}

/// Maximum-weight perfect matching via the Hungarian algorithm on `max - c`.
pub(crate) fn best_permutation_hungarian(c: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let k = c.len();
    let max = c.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost = |i: usize, j: usize| max - c[i][j] as i64;
    // 1-based potentials formulation.
    let mut u = vec![0i64; k + 1];
    let mut v = vec![0i64; k + 1];
    let mut way = vec![0usize; k + 1];
    let mut row_of_col = vec![0usize; k + 1];
    for i in 1..=k {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; k];
    for j in 1..=k {
        perm[row_of_col[j] - 1] = j - 1;
    }
    let total = perm.iter().enumerate().map(|(a, &b)| c[a][b]).sum();
    (total, perm)
}

/// Misclustered count minimized over relabelings of the predicted clusters.
pub fn clustering_error(y_hat: &[usize], y: &[usize], k: usize) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let c = confusion(y_hat, y, k)?;
    let (matched, perm) = if k <= EXHAUSTIVE_MAX_K {
        best_permutation_exhaustive(&c)
    } else {
        best_permutation_hungarian(&c)
    };
    let n = y.len();
    let error_count = n - matched;
    Ok(MetricsReport {
        error_count,
        accuracy: if n == 0 { 1.0 } else { matched as f64 / n as f64 },
        ari: ari(y_hat, y)?,
        n,
        permutation: perm.iter().map(|b| b + 1).collect(),
    })
}

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings (any integer coding).
pub fn ari(y_hat: &[usize], y: &[usize]) -> Result<f64> {
    if y_hat.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted labels vs {} true labels",
            y_hat.len(),
            y.len()
        )));
    }
    let n = y.len();
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in y_hat.iter().zip(y) {
        *cells.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        // Both partitions trivial (all-in-one or all singletons).
        return Ok(if index == max_index { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Error counts with methods as rows and datasets as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    /// `errors[method][dataset]`.
    pub errors: Vec<Vec<f64>>,
}

impl ErrorTable {
    /// CSV with a header row `method,<dataset>...` and one row per method.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Format {
                path: path.into(),
                message: e.to_string(),
            })?;
        let headers = reader.headers().map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        let datasets: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        let mut methods = Vec::new();
        let mut errors = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format {
                path: path.into(),
                message: e.to_string(),
            })?;
            if rec.len() != datasets.len() + 1 {
                return Err(Error::RaggedRow {
                    path: path.into(),
                    row: i + 2,
                    expected: datasets.len() + 1,
                    found: rec.len(),
                });
            }
            methods.push(rec[0].to_owned());
            let row = rec
                .iter()
                .enumerate()
                .skip(1)
                .map(|(c, cell)| {
                    cell.parse::<f64>().map_err(|_| Error::ParseCell {
                        path: path.into(),
                        row: i + 2,
                        col: c + 1,
                        cell: cell.to_owned(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            errors.push(row);
        }
        Ok(Self {
            methods,
            datasets,
            errors,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardReport {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    /// `ranks[method][dataset]`, fractional on ties.
    pub ranks: Vec<Vec<f64>>,
    /// `regrets[method][dataset]`; `None` where every method tied on that dataset.
    pub regrets: Vec<Vec<Option<f64>>>,
    pub rank_mean: Vec<f64>,
    pub rank_sd: Vec<f64>,
    pub regret_mean: Vec<f64>,
    pub regret_sd: Vec<f64>,
    /// Datasets left out of the regret summaries.
    pub flagged_datasets: Vec<String>,
}

impl LeaderboardReport {
    /// CSV footer rows `Rank(mean)`, `Rank(SD)`, `Regret(mean)`, `Regret(SD)` with two decimals.
    pub fn write_footer<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "summary,{}", self.methods.join(","))?;
        let rows: [(&str, &Vec<f64>); 4] = [
            ("Rank(mean)", &self.rank_mean),
            ("Rank(SD)", &self.rank_sd),
            ("Regret(mean)", &self.regret_mean),
            ("Regret(SD)", &self.regret_sd),
        ];
        for (name, vals) in rows {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.2}")).collect();
            writeln!(out, "{name},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Average ranks (1 = fewest errors) with ties sharing the mean of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn summarize(xs: &[f64]) -> (f64, f64) {
    match xs.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (xs[0], 0.0),
        _ => mean_sd(xs, SdMode::Sample),
    }
}

/// Per-dataset ranks and regrets `(e - e_min) / (e_max - e_min)`, with
/// means and sample standard deviations across datasets.
pub fn regret_and_rank(table: &ErrorTable) -> Result<LeaderboardReport> {
    let m = table.methods.len();
    let d = table.datasets.len();
    if m < 2 {
        return Err(Error::InvalidArgument("need at least 2 methods".into()));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("need at least 1 dataset".into()));
    }
    if table.errors.len() != m || table.errors.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch("error table is not methods x datasets".into()));
    }
    let mut ranks = vec![vec![0.0; d]; m];
    let mut regrets = vec![vec![None; d]; m];
    let mut flagged = Vec::new();
    for ds in 0..d {
        let col: Vec<f64> = (0..m).map(|mi| table.errors[mi][ds]).collect();
        for (mi, r) in fractional_ranks(&col).into_iter().enumerate() {
            ranks[mi][ds] = r;
        }
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for mi in 0..m {
                regrets[mi][ds] = Some((col[mi] - lo) / (hi - lo));
            }
        } else {
            flagged.push(table.datasets[ds].clone());
        }
    }
    let (rank_mean, rank_sd): (Vec<f64>, Vec<f64>) = ranks.iter().map(|r| summarize(r)).unzip();
    let (regret_mean, regret_sd): (Vec<f64>, Vec<f64>) = regrets
        .iter()
        .map(|r| summarize(&r.iter().flatten().copied().collect::<Vec<_>>()))
        .unzip();
    Ok(LeaderboardReport {
        methods: table.methods.clone(),
        datasets: table.datasets.clone(),
        ranks,
        regrets,
        rank_mean,
        rank_sd,
        regret_mean,
        regret_sd,
        flagged_datasets: flagged,
    })
}
