//! Minimum-redundancy maximum-relevance feature ranking.
//!
//! Mutual information is the plug-in (histogram) estimate in nats over
//! equal-width bins. The default ranking scores every feature once against
//! the full feature set,
//!
//! ```text
//! score_i = I(x_i; y) - (1/d) * sum_j I(x_i; x_j)
//! ```
//!
//! with the `j = i` term (the feature's own entropy) included, and sorts once.
//! The classical greedy variant is available as [`SelectionMethod::Incremental`].

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::par;

pub const DEFAULT_BINS: usize = 10;

/// Column mapped onto bin codes `0..bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedColumn {
    pub codes: Vec<usize>,
    pub bin_edges: Vec<f64>,
}

impl DiscretizedColumn {
    pub fn bins(&self) -> usize {
        self.bin_edges.len() - 1
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Wraps already-discrete codes (class labels, say) in `0..bins`.
    pub fn from_codes(codes: Vec<usize>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("bins must be positive".into()));
        }
        if let Some(&c) = codes.iter().find(|&&c| c >= bins) {
            return Err(Error::InvalidArgument(format!("code {c} outside 0..{bins}")));
        }
        Ok(Self {
            codes,
            bin_edges: (0..=bins).map(|b| b as f64 - 0.5).collect(),
        })
    }

    /// Class labels `1..=k` as codes `0..k`.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        if labels.contains(&0) {
            return Err(Error::InvalidArgument("labels start at 1".into()));
        }
        Self::from_codes(labels.iter().map(|&l| l - 1).collect(), k)
    }
}

/// Equal-width binning over `[min, max]`. The maximum falls in the last bin;
/// a constant column gets all-zero codes.
pub fn discretize(column: ArrayView1<'_, f64>, bins: usize) -> DiscretizedColumn {
    assert!(bins >= 2, "discretize needs at least 2 bins");
    let (lo, hi) = column
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if column.is_empty() || !(range > 0.0) {
        let base = if lo.is_finite() { lo } else { 0.0 };
        return DiscretizedColumn {
            codes: vec![0; column.len()],
            bin_edges: (0..=bins).map(|b| base + b as f64).collect(),
        };
    }
    let width = range / bins as f64;
    let codes = column
        .iter()
        .map(|&x| (((x - lo) / width) as usize).min(bins - 1))
        .collect();
    let mut bin_edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64).collect();
    bin_edges[bins] = hi;
    DiscretizedColumn { codes, bin_edges }
}

pub fn discretize_matrix(data: &Array2<f64>, bins: usize) -> Vec<DiscretizedColumn> {
    par::map_range(data.ncols(), |j| discretize(data.column(j), bins))
}

/// Plug-in entropy in nats.
pub fn entropy(a: &DiscretizedColumn) -> f64 {
    let n = a.len() as f64;
    let mut counts = vec![0usize; a.bins()];
    for &c in &a.codes {
        counts[c] += 1;
    }
    let mut terms: Vec<f64> = counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .collect();
    sorted_sum(&mut terms)
}

/// Plug-in mutual information in nats:
/// `sum p(a,b) ln(p(a,b) / (p(a) p(b)))` over the empirical joint table,
/// with empty cells contributing nothing.
///
/// The per-cell terms are summed in sorted order so that the result does not
/// depend on argument order: `mutual_info(a, b) == mutual_info(b, a)` bitwise.
pub fn mutual_info(a: &DiscretizedColumn, b: &DiscretizedColumn) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "mutual information of columns with {} and {} rows",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let (ba, bb) = (a.bins(), b.bins());
    let mut joint = vec![0usize; ba * bb];
    let mut ca = vec![0usize; ba];
    let mut cb = vec![0usize; bb];
    for (&x, &y) in a.codes.iter().zip(&b.codes) {
        joint[x * bb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let n = a.len() as f64;
    let mut terms = Vec::new();
    for x in 0..ba {
        for y in 0..bb {
            let c = joint[x * bb + y];
            if c == 0 {
                continue;
            }
            let c = c as f64;
            let marg = ca[x] as f64 * cb[y] as f64;
            terms.push(c / n * (c * n / marg).ln());
        }
    }
    Ok(sorted_sum(&mut terms).max(0.0))
}

fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `I(x_i; y)` for every column.
pub fn relevance(columns: &[DiscretizedColumn], labels: &DiscretizedColumn) -> Result<Vec<f64>> {
    par::map_slice(columns, |c| mutual_info(c, labels))
        .into_iter()
        .collect()
}

/// Symmetric matrix of pairwise `I(x_i; x_j)`; the diagonal holds `H(x_i)`.
/// Each cell is computed independently, so the result does not depend on the
/// number of workers.
pub fn redundancy_matrix(columns: &[DiscretizedColumn]) -> Result<Array2<f64>> {
    let d = columns.len();
    let rows: Vec<Vec<f64>> = par::map_range(d, |i| {
        (i..d)
            .map(|j| mutual_info(&columns[i], &columns[j]))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut m = Array2::zeros((d, d));
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            m[[i, i + off]] = v;
            m[[i + off, i]] = v;
        }
    }
    Ok(m)
}

/// Row means of the redundancy matrix (diagonal included).
pub fn mean_redundancy(matrix: &Array2<f64>) -> Vec<f64> {
    let d = matrix.ncols() as f64;
    matrix.outer_iter().map(|row| row.sum() / d).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMethod {
    /// One global score per feature, one sort.
    #[default]
    Literal,
    /// Greedy forward selection: each step takes the feature maximizing
    /// relevance minus mean redundancy with the features already chosen.
    Incremental,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrmrConfig {
    pub m: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub method: SelectionMethod,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for MrmrConfig {
    fn default() -> Self {
        Self {
            m: 70,
            bins: DEFAULT_BINS,
            method: SelectionMethod::Literal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub relevance: Vec<f64>,
    pub mean_redundancy: Vec<f64>,
    pub score: Vec<f64>,
    /// Feature indices by rank; the first `m` are the selection.
    pub order: Vec<usize>,
    pub method: SelectionMethod,
}

impl FeatureRanking {
    pub fn selected(&self, m: usize) -> &[usize] {
        &self.order[..m.min(self.order.len())]
    }

    /// Rank (0-based) of every feature.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (r, &f) in self.order.iter().enumerate() {
            ranks[f] = r;
        }
        ranks
    }

    /// CSV with columns `feature,relevance,mean_redundancy,score,rank`, one
    /// row per feature in rank order. Rank is 1-based.
    pub fn to_csv(&self, feature_names: &[String]) -> String {
        let mut out = String::from("feature,relevance,mean_redundancy,score,rank\n");
        for (r, &f) in self.order.iter().enumerate() {
            let name = feature_names.get(f).cloned().unwrap_or_else(|| f.to_string());
            out.push_str(&format!(
                "{name},{},{},{},{}\n",
                self.relevance[f],
                self.mean_redundancy[f],
                self.score[f],
                r + 1
            ));
        }
        out
    }
}

/// Descending order of `score`, ties broken by lower index.
fn rank_descending(score: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order
}

/// Ranks all columns of `data` against its labels.
pub fn rank_features(data: &Dataset, bins: usize, method: SelectionMethod) -> Result<FeatureRanking> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let columns = discretize_matrix(data.matrix(), bins);
    let labels = DiscretizedColumn::from_labels(data.labels(), data.n_classes())?;
    let relevance = relevance(&columns, &labels)?;
    let redundancy = redundancy_matrix(&columns)?;
    let mean_redundancy = mean_redundancy(&redundancy);
    let score: Vec<f64> = relevance
        .iter()
        .zip(&mean_redundancy)
        .map(|(r, m)| r - m)
        .collect();
    let order = match method {
        SelectionMethod::Literal => rank_descending(&score),
        SelectionMethod::Incremental => incremental_order(&relevance, &redundancy),
    };
    Ok(FeatureRanking {
        relevance,
        mean_redundancy,
        score,
        order,
        method,
    })
}

fn incremental_order(relevance: &[f64], redundancy: &Array2<f64>) -> Vec<usize> {
    let d = relevance.len();
    let mut chosen: Vec<usize> = Vec::with_capacity(d);
    let mut remaining: Vec<usize> = (0..d).collect();
    let mut red_sum = vec![0.0; d];
    while !remaining.is_empty() {
        let denom = chosen.len().max(1) as f64;
        let (pos, _) = remaining
            .iter()
            .enumerate()
            .map(|(pos, &f)| (pos, relevance[f] - red_sum[f] / denom))
            .fold((0, f64::NEG_INFINITY), |best, (pos, s)| if s > best.1 { (pos, s) } else { best });
        let f = remaining.remove(pos);
        chosen.push(f);
        for &g in &remaining {
            red_sum[g] += redundancy[[g, f]];
        }
    }
    chosen
}

/// Ranks the features and returns the top `m` columns in rank order.
pub fn select_features(data: &Dataset, cfg: &MrmrConfig) -> Result<(FeatureRanking, Dataset)> {
    let d = data.n_features();
    if cfg.m == 0 || cfg.m > d {
        return Err(Error::InvalidArgument(format!(
            "cannot select {} of {d} features",
            cfg.m
        )));
    }
    let ranking = rank_features(data, cfg.bins, cfg.method)?;
    let reduced = data.select_columns(ranking.selected(cfg.m))?;
    Ok((ranking, reduced))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng as _;

    use crate::rng;

    fn col(codes: &[usize], bins: usize) -> DiscretizedColumn {
        DiscretizedColumn::from_codes(codes.to_vec(), bins).unwrap()
    }

    // Independent route: explicit probabilities, double loop over the table.
    fn brute_mi(a: &[usize], b: &[usize], ba: usize, bb: usize) -> f64 {
        let n = a.len() as f64;
        let mut total = 0.0;
        for x in 0..ba {
            for y in 0..bb {
                let pxy = a.iter().zip(b).filter(|&(&p, &q)| p == x && q == y).count() as f64 / n;
                let px = a.iter().filter(|&&p| p == x).count() as f64 / n;
                let py = b.iter().filter(|&&q| q == y).count() as f64 / n;
                if pxy > 0.0 {
                    total += pxy * (pxy / (px * py)).ln();
                }
            }
        }
        total
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(array![0.0, 0.5, 1.0].view(), 2).codes, vec![0, 1, 1]);
        let c = discretize(array![3.0, 3.0, 3.0].view(), 4);
        assert_eq!(c.codes, vec![0, 0, 0]);
        assert!(c.bin_edges.windows(2).all(|w| w[0] < w[1]));
        let grid = Array1::from_iter((0..10).map(|i| i as f64));
        let g = discretize(grid.view(), 10);
        assert_eq!(g.codes, (0..10).collect::<Vec<_>>());
        assert!(g.bin_edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn identical_uniform_columns_give_ln4() {
        let codes: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let a = col(&codes, 4);
        let mi = mutual_info(&a, &a).unwrap();
        assert!((mi - 4f64.ln()).abs() < 1e-12);
        assert!((mi - entropy(&a)).abs() < 1e-12);
    }

    #[test]
    fn product_design_has_zero_information() {
        let a: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let b: Vec<usize> = (0..100).map(|i| (i / 5) % 4).collect();
        let mi = mutual_info(&col(&a, 5), &col(&b, 4)).unwrap();
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(mutual_info(&col(&[0, 1], 2), &col(&[0], 2)).is_err());
    }

    proptest! {
        #[test]
        fn mi_matches_brute_force(
            n in 1usize..50, ba in 1usize..=5, bb in 1usize..=5, seed in any::<u64>()
        ) {
            let mut r = rng::seeded(seed);
            let a: Vec<usize> = (0..n).map(|_| r.gen_range(0..ba)).collect();
            let b: Vec<usize> = (0..n).map(|_| r.gen_range(0..bb)).collect();
            let (ca, cb) = (col(&a, ba), col(&b, bb));
            let mi = mutual_info(&ca, &cb).unwrap();
            prop_assert!((mi - brute_mi(&a, &b, ba, bb)).abs() < 1e-12);
            prop_assert_eq!(mi.to_bits(), mutual_info(&cb, &ca).unwrap().to_bits());
            prop_assert!(mi >= 0.0);
            prop_assert!(mi <= entropy(&ca).min(entropy(&cb)) + 1e-12);
            prop_assert!((mutual_info(&ca, &ca).unwrap() - entropy(&ca)).abs() < 1e-12);
        }

        #[test]
        fn relevance_is_order_free(seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let n = 60;
            let x = Array2::from_shape_fn((n, 3), |_| r.gen_range(0.0..1.0));
            let y: Vec<usize> = (0..n).map(|_| r.gen_range(1..=3)).collect();
            let ds = Dataset::from_matrix(x, y, vec!["a".into(), "b".into(), "c".into()]).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
            let shuffled = ds.select_rows(&perm).unwrap();
            let rel = |d: &Dataset| {
                let cols = discretize_matrix(d.matrix(), 10);
                relevance(&cols, &DiscretizedColumn::from_labels(d.labels(), 3).unwrap()).unwrap()
            };
            prop_assert_eq!(rel(&ds), rel(&shuffled));
        }
    }

    #[test]
    fn label_copy_relevance_is_label_entropy() {
        let labels: Vec<usize> = (0..90).map(|i| [1, 1, 2, 3, 3, 3][i % 6]).collect();
        let x = Array2::from_shape_fn((90, 1), |(i, _)| labels[i] as f64);
        let ds = Dataset::from_matrix(x, labels.clone(), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let cols = discretize_matrix(ds.matrix(), 10);
        let y = DiscretizedColumn::from_labels(&labels, 3).unwrap();
        let rel = relevance(&cols, &y).unwrap();
        // H(y) for proportions 1/3, 1/6, 1/2
        let h = -[1.0 / 3.0, 1.0 / 6.0, 0.5f64].iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((rel[0] - h).abs() < 1e-12);
    }

    #[test]
    fn redundancy_matrix_properties() {
        let mut r = rng::seeded(3);
        let n = 200;
        let base: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let other: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| match j {
            0 | 1 => base[i],
            _ => other[i],
        });
        let cols = discretize_matrix(&x, 10);
        let m = redundancy_matrix(&cols).unwrap();
        assert_eq!(m, m.t());
        let h0 = entropy(&cols[0]);
        assert!((m[[0, 1]] - h0).abs() < 1e-12);
        assert!((m[[0, 0]] - h0).abs() < 1e-12);
        // independent draws: only estimator bias remains
        assert!(m[[0, 2]] < 0.35);
        let means = mean_redundancy(&m);
        assert!((means[2] - m.row(2).sum() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn select_all_is_a_permutation() {
        let mut r = rng::seeded(1);
        let x = Array2::from_shape_fn((50, 6), |_| r.gen_range(0.0..1.0));
        let y: Vec<usize> = (0..50).map(|i| i % 2 + 1).collect();
        let ds = Dataset::from_matrix(x, y, vec!["a".into(), "b".into()]).unwrap();
        let (ranking, reduced) = select_features(&ds, &MrmrConfig { m: 6, ..Default::default() }).unwrap();
        let mut sorted = ranking.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        for (k, &f) in ranking.order.iter().enumerate() {
            assert_eq!(reduced.matrix().column(k), ds.matrix().column(f));
        }
        for i in 0..6 {
            assert_eq!(ranking.score[i], ranking.relevance[i] - ranking.mean_redundancy[i]);
        }
        assert!(select_features(&ds, &MrmrConfig { m: 7, ..Default::default() }).is_err());
        assert!(select_features(&ds, &MrmrConfig { m: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn duplicate_never_outranks_original() {
        let mut r = rng::seeded(8);
        let n = 300;
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(1..=3)).collect();
        let x = Array2::from_shape_fn((n, 5), |(i, j)| match j {
            0 => y[i] as f64 + r.gen_range(0.0..1.5),
            _ => r.gen_range(0.0..1.0),
        });
        let dup = ndarray::concatenate(ndarray::Axis(1), &[x.view(), x.column(0).insert_axis(ndarray::Axis(1))]).unwrap();
        let ds = Dataset::from_matrix(dup, y, vec!["1".into(), "2".into(), "3".into()]).unwrap();
        let ranking = rank_features(&ds, 10, SelectionMethod::Literal).unwrap();
        assert_eq!(ranking.score[0], ranking.score[5]);
        let ranks = ranking.ranks();
        assert!(ranks[0] < ranks[5]);
    }

    #[test]
    fn incremental_starts_with_most_relevant() {
        let mut r = rng::seeded(2);
        let n = 200;
        let y: Vec<usize> = (0..n).map(|_| r.gen_range(1..=2)).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| if j == 2 { y[i] as f64 } else { r.gen_range(0.0..1.0) });
        let ds = Dataset::from_matrix(x, y, vec!["a".into(), "b".into()]).unwrap();
        let ranking = rank_features(&ds, 10, SelectionMethod::Incremental).unwrap();
        assert_eq!(ranking.order[0], 2);
        let mut sorted = ranking.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ranking_csv_layout() {
        let ranking = FeatureRanking {
            relevance: vec![0.5, 1.0],
            mean_redundancy: vec![0.25, 0.25],
            score: vec![0.25, 0.75],
            order: vec![1, 0],
            method: SelectionMethod::Literal,
        };
        let csv = ranking.to_csv(&["a".into(), "b".into()]);
        assert_eq!(
            csv,
            "feature,relevance,mean_redundancy,score,rank\nb,1,0.25,0.75,1\na,0.5,0.25,0.25,2\n"
        );
    }
}
