//! PCA projection of the embedding spaces and clustering scores against
//! ground-truth source labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::behavior::AssignmentMatrix;
use crate::error::{Error, Result};
use crate::fileio;

/// Largest cluster/label count searched exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 7;

/// Relative variance below which the fitted rows count as identical.
const RANK_TOL: f64 = 1e-12;

/// Mean-centering plus the top two principal directions of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first.
    pub components: [Vec<f64>; 2],
    /// Share of total variance along each component.
    pub explained: [f64; 2],
}

impl Pca {
    /// Fit on the rows of `x` (`M × d`, `M ≥ 2`, `d ≥ 2`).
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (m, d) = x.dims2();
        if m < 2 || d < 2 {
            return Err(Error::invalid(format!("PCA needs at least 2 rows and 2 columns, got {m} x {d}")));
        }
        let mean: Vec<f64> = (0..d).map(|j| (0..m).map(|i| x.get(i, j)).sum::<f64>() / m as f64).collect();
        let centered = DMatrix::from_fn(m, d, |i, j| x.get(i, j) - mean[j]);
        let cov = centered.transpose() * &centered / (m - 1) as f64;
        let total: f64 = cov.diagonal().iter().sum();
        let scale: f64 = (0..d).map(|j| mean[j] * mean[j]).sum::<f64>().max(1.0);
        if !(total > RANK_TOL * scale) {
            return Err(Error::RankDeficient(format!(
                "all {m} rows are identical (total variance {total:e}); nothing to project"
            )));
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let direction = |k: usize| -> Vec<f64> {
            let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        let ratio = |k: usize| (eig.eigenvalues[order[k]] / total).clamp(0.0, 1.0);
        Ok(Pca {
            mean,
            components: [direction(0), direction(1)],
            explained: [ratio(0), ratio(1)],
        })
    }

    pub fn project_row(&self, row: &[f64]) -> [f64; 2] {
        let c = |v: &[f64]| row.iter().zip(&self.mean).zip(v).map(|((x, m), w)| (x - m) * w).sum();
        [c(&self.components[0]), c(&self.components[1])]
    }

    pub fn project(&self, x: &Tensor) -> Vec<[f64; 2]> {
        (0..x.rows()).map(|r| self.project_row(x.row_slice(r))).collect()
    }
}

/// 2D coordinates of `W` rows, codebook rows and the policy embedding under
/// a PCA fitted on `W` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport {
    pub trajectories: Vec<[f64; 2]>,
    pub codebook: Vec<[f64; 2]>,
    pub policy: Option<[f64; 2]>,
    pub explained: [f64; 2],
}

/// Fit on `w`, then project `w`, the `codebook` rows and `policy`.
pub fn pca_project(w: &Tensor, codebook: Option<&Tensor>, policy: Option<&[f64]>) -> Result<ProjectionReport> {
    let pca = Pca::fit(w)?;
    Ok(ProjectionReport {
        trajectories: pca.project(w),
        codebook: codebook.map(|e| pca.project(e)).unwrap_or_default(),
        policy: policy.map(|p| pca.project_row(p)),
        explained: pca.explained,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterScores {
    /// Fraction of trajectories whose cluster maps to their label under the
    /// best one-to-one relabeling.
    pub accuracy: f64,
    pub ari: f64,
}

/// `table[c][l]`: trajectories in cluster `c` with the `l`-th distinct label.
fn contingency(clusters: &[usize], labels: &[usize]) -> Vec<Vec<u64>> {
    let mut cl: Vec<usize> = clusters.to_vec();
    cl.sort_unstable();
    cl.dedup();
    let mut lb: Vec<usize> = labels.to_vec();
    lb.sort_unstable();
    lb.dedup();
    let mut table = vec![vec![0u64; lb.len()]; cl.len()];
    for (c, l) in clusters.iter().zip(labels) {
        let i = cl.binary_search(c).expect("cluster present");
        let j = lb.binary_search(l).expect("label present");
        table[i][j] += 1;
    }
    table
}

/// Largest total of a one-to-one matching between rows and columns.
pub fn best_matching(table: &[Vec<u64>]) -> u64 {
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return 0;
    }
    let at = |r: usize, c: usize| if r < rows && c < cols { table[r][c] } else { 0 };
    if n <= EXHAUSTIVE_LIMIT {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = 0;
        permute(&mut perm, 0, &mut |p| {
            best = best.max((0..n).map(|r| at(r, p[r])).sum());
        });
        best
    } else {
        let weights = Matrix::from_fn(n, n, |(r, c)| at(r, c) as i64);
        let (total, _) = kuhn_munkres(&weights);
        total as u64
    }
}

fn permute(v: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let table = contingency(a, b);
    let n = a.len() as u64;
    let index: f64 = table.iter().flatten().map(|&x| pairs(x)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..table[0].len())
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(n);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        // Both partitions trivial in the same way.
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Best-permutation accuracy and ARI of `g` against source `labels`.
pub fn clustering_scores(g: &AssignmentMatrix, labels: &[usize]) -> Result<ClusterScores> {
    if labels.len() != g.m() {
        return Err(Error::invalid(format!("{} labels for {} trajectories", labels.len(), g.m())));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no trajectories to score"));
    }
    let table = contingency(&g.columns, labels);
    let matched = best_matching(&table);
    Ok(ClusterScores {
        accuracy: matched as f64 / labels.len() as f64,
        ari: adjusted_rand_index(&g.columns, labels),
    })
}

/// One line of the projection table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub id: usize,
    pub kind: String,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "return")]
    pub ret: Option<f64>,
    pub g: Option<usize>,
    pub z: Option<usize>,
    pub source_label: Option<usize>,
}

/// Per-trajectory data joined to the projected points.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryInfo {
    pub returns: Vec<f64>,
    pub discretized: Vec<usize>,
    /// 0-based posterior index.
    pub assignments: Vec<usize>,
    pub source_labels: Vec<usize>,
}

/// Rows for the projection table. Ids and `z` are 1-based; the policy row
/// carries `k*` (0-based in, 1-based out) as its `z`.
pub fn projection_rows(p: &ProjectionReport, info: &TrajectoryInfo, k_star: Option<usize>) -> Result<Vec<ProjectionRow>> {
    let m = p.trajectories.len();
    if [info.returns.len(), info.discretized.len(), info.assignments.len(), info.source_labels.len()]
        .iter()
        .any(|&n| n != m)
    {
        return Err(Error::invalid("trajectory info does not match the projection"));
    }
    let mut rows = Vec::with_capacity(m + p.codebook.len() + 1);
    for (i, xy) in p.trajectories.iter().enumerate() {
        rows.push(ProjectionRow {
            id: i + 1,
            kind: "traj".into(),
            x: xy[0],
            y: xy[1],
            ret: Some(info.returns[i]),
            g: Some(info.discretized[i]),
            z: Some(info.assignments[i] + 1),
            source_label: Some(info.source_labels[i]),
        });
    }
    for (k, xy) in p.codebook.iter().enumerate() {
        rows.push(ProjectionRow {
            id: k + 1,
            kind: "codebook".into(),
            x: xy[0],
            y: xy[1],
            ret: None,
            g: None,
            z: Some(k + 1),
            source_label: None,
        });
    }
    if let Some(xy) = p.policy {
        rows.push(ProjectionRow {
            id: 1,
            kind: "policy".into(),
            x: xy[0],
            y: xy[1],
            ret: None,
            g: None,
            z: k_star.map(|k| k + 1),
            source_label: None,
        });
    }
    Ok(rows)
}

fn header_lines(header: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in header {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out
}

/// Comma-separated projection table preceded by `# key = value` lines.
pub fn projection_csv(header: &BTreeMap<String, String>, rows: &[ProjectionRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    let body = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(header_lines(header) + &String::from_utf8(body).expect("csv output is UTF-8"))
}

pub fn parse_projection_csv(text: &str) -> Result<Vec<ProjectionRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                what: "projection table",
                detail: e.to_string(),
            })
        })
        .collect()
}

/// `key = value` lines: the header, then scores and explained variance.
pub fn scores_text(header: &BTreeMap<String, String>, scores: &ClusterScores, explained: [f64; 2]) -> String {
    let mut out = header_lines(header);
    let _ = writeln!(out, "accuracy = {}", scores.accuracy);
    let _ = writeln!(out, "ari = {}", scores.ari);
    let _ = writeln!(out, "explained_variance_1 = {}", explained[0]);
    let _ = writeln!(out, "explained_variance_2 = {}", explained[1]);
    out
}

/// Write both report files atomically.
pub fn export_report(
    projection_path: &Path,
    scores_path: &Path,
    header: &BTreeMap<String, String>,
    rows: &[ProjectionRow],
    scores: &ClusterScores,
    explained: [f64; 2],
) -> Result<()> {
    let table = projection_csv(header, rows)?;
    let text = scores_text(header, scores, explained);
    for p in [projection_path, scores_path] {
        if !p.parent().is_none_or(|d| d.as_os_str().is_empty() || d.is_dir()) {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
            ));
        }
    }
    fileio::write_atomic(projection_path, table.as_bytes())?;
    fileio::write_atomic(scores_path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    #[test]
    fn colinear_rows_have_no_second_component() {
        let dir = [0.3, -0.2, 0.5, 0.1];
        let rows: Vec<Vec<f64>> = (0..6).map(|i| dir.iter().map(|d| 1.0 + i as f64 * d).collect()).collect();
        let p = pca_project(&Tensor::from_rows(&rows).unwrap(), None, None).unwrap();
        assert!(p.explained[1] < 1e-8);
        assert!((p.explained[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_dims_preserve_distances() {
        let rows = [[0.1, 0.9], [-0.5, 0.3], [0.7, -0.2], [0.0, 0.0], [1.2, 0.4]];
        let w = Tensor::from_rows(&rows).unwrap();
        let p = pca_project(&w, None, None).unwrap();
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                assert!((dist(rows[i], rows[j]) - dist(p.trajectories[i], p.trajectories[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_rows_are_rejected() {
        let w = Tensor::from_rows(&[[0.5, 0.5, 0.1]; 4]).unwrap();
        assert!(matches!(pca_project(&w, None, None), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn sign_rule_and_ordering() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..5).map(|j| r.random::<f64>() * (j + 1) as f64).collect())
            .collect();
        let pca = Pca::fit(&Tensor::from_rows(&rows).unwrap()).unwrap();
        assert!(pca.explained[0] >= pca.explained[1]);
        for c in &pca.components {
            let lead = c.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(lead > 0.0);
            assert!((c.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_and_relabeled_scores() {
        let labels = [1, 1, 2, 2, 3, 3, 1];
        let exact = AssignmentMatrix::from_assignments(&[0, 0, 1, 1, 2, 2, 0], 3);
        let s = clustering_scores(&exact, &labels).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert!((s.ari - 1.0).abs() < 1e-12);
        let relabeled = AssignmentMatrix::from_assignments(&[2, 2, 0, 0, 1, 1, 2], 3);
        assert_eq!(clustering_scores(&relabeled, &labels).unwrap(), s);
    }

    #[test]
    fn ari_reference_value() {
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 2, 2];
        // Table [[2, 1, 0], [0, 1, 2]]: index = 2, rows = 3 + 3, cols = 1 + 1 + 1, total = 15.
        let expected = (2.0 - 6.0 * 3.0 / 15.0) / (0.5 * 9.0 - 6.0 * 3.0 / 15.0);
        assert!((adjusted_rand_index(&a, &b) - expected).abs() < 1e-12);
        // sklearn.metrics.adjusted_rand_score on the same labels.
        assert!((adjusted_rand_index(&a, &b) - 0.24242424242424243).abs() < 1e-12);
    }

    #[test]
    fn hungarian_agrees_with_exhaustive() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = 6;
            let table: Vec<Vec<u64>> = (0..n).map(|_| (0..n).map(|_| r.random_range(0..50)).collect()).collect();
            let weights = Matrix::from_fn(n, n, |(i, j)| table[i][j] as i64);
            assert_eq!(best_matching(&table), kuhn_munkres(&weights).0 as u64);
        }
    }

    #[test]
    fn csv_round_trip_and_row_count() {
        let w = Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.4, -0.1, 0.0], [-0.3, 0.3, 0.9], [0.2, 0.2, -0.5]]).unwrap();
        let e = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let p = pca_project(&w, Some(&e), Some(&[0.0, 0.0, 1.0])).unwrap();
        let info = TrajectoryInfo {
            returns: vec![1.5, 2.5, 0.1, 7.0],
            discretized: vec![33, 66, 0, 99],
            assignments: vec![0, 1, 0, 1],
            source_labels: vec![1, 2, 1, 2],
        };
        let rows = projection_rows(&p, &info, Some(1)).unwrap();
        assert_eq!(rows.len(), 4 + 2 + 1);
        let mut header = BTreeMap::new();
        header.insert("seed".to_string(), "3".to_string());
        let text = projection_csv(&header, &rows).unwrap();
        assert!(text.starts_with("# seed = 3\nid,kind,x,y,return,g,z,source_label\n"));
        assert_eq!(parse_projection_csv(&text).unwrap(), rows);
        let bare = pca_project(&w, None, None).unwrap();
        assert_eq!(projection_rows(&bare, &info, None).unwrap().len(), 4);
    }

    #[test]
    fn export_rejects_missing_directory() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("nope").join("p.csv");
        let s = ClusterScores { accuracy: 1.0, ari: 1.0 };
        assert!(export_report(&bad, &dir.path().join("s.txt"), &BTreeMap::new(), &[], &s, [1.0, 0.0]).is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
