//! Query/gallery retrieval evaluation: squared Euclidean ranking, CMC and mAP.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::{join_floats, parse_floats};

const EMBEDDING_MAGIC: &str = "mprl-embeddings";
const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<u64>,
    labels: Vec<usize>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<u64>, labels: Vec<usize>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != vectors.len() {
            return Err(Error::dim(format!(
                "{} ids, {} labels, {} vectors",
                ids.len(),
                labels.len(),
                vectors.len()
            )));
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            if vectors.iter().any(|v| v.len() != dim) {
                return Err(Error::dim("embeddings must share one dimension"));
            }
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(
                "embedding entries must be finite".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidValue(format!("duplicate embedding id {dup}")));
        }
        Ok(EmbeddingSet {
            ids,
            labels,
            vectors,
        })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "{EMBEDDING_MAGIC} {EMBEDDING_VERSION} n={} dim={}",
            self.len(),
            self.dim()
        )?;
        for ((id, label), v) in self.ids.iter().zip(&self.labels).zip(&self.vectors) {
            writeln!(out, "{id} {label} {}", join_floats(v))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty embedding file"))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let field = |i: usize, name: &str| -> Result<usize> {
            parts
                .get(i)
                .and_then(|t| t.strip_prefix(name))
                .and_then(|t| t.strip_prefix('='))
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::parse(1, format!("expected {name}=N in header")))
        };
        if parts.first() != Some(&EMBEDDING_MAGIC)
            || parts.get(1).and_then(|v| v.parse::<u32>().ok()) != Some(EMBEDDING_VERSION)
        {
            return Err(Error::parse(1, "not a version 1 embedding file"));
        }
        let n = field(2, "n")?;
        let dim = field(3, "dim")?;
        let (mut ids, mut labels, mut vectors) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut tokens = line.splitn(3, ' ');
            let id = tokens
                .next()
                .and_then(|t| t.parse::<u64>().ok())
                .ok_or_else(|| Error::parse(line_no, "bad id"))?;
            let label = tokens
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| Error::parse(line_no, "bad label"))?;
            let values = parse_floats(tokens.next().unwrap_or(""), dim, line_no)?;
            ids.push(id);
            labels.push(label);
            vectors.push(values);
        }
        if ids.len() != n {
            return Err(Error::parse(
                1,
                format!("header announces {n} rows, found {}", ids.len()),
            ));
        }
        EmbeddingSet::new(ids, labels, vectors)
    }
}

/// Row-major `queries x gallery` distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged distance matrix"));
        }
        Ok(DistanceMatrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DistanceMatrix {
        DistanceMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&d| f(d)).collect(),
        }
    }
}

pub fn pairwise_sq_euclidean(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
) -> Result<DistanceMatrix> {
    if !queries.is_empty() && !gallery.is_empty() && queries.dim() != gallery.dim() {
        return Err(Error::dim(format!(
            "query dim {} != gallery dim {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let data = queries
        .vectors
        .iter()
        .flat_map(|q| {
            gallery
                .vectors
                .iter()
                .map(move |g| q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        })
        .collect();
    Ok(DistanceMatrix {
        rows: queries.len(),
        cols: gallery.len(),
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rank1: f64,
    pub map: f64,
    /// `cmc[k]`: fraction of queries with a match in the top `k + 1`.
    pub cmc: Vec<f64>,
}

impl EvalReport {
    /// `{"rank1": .., "mAP": .., "cmc": [..]}` with six decimals.
    pub fn to_json(&self) -> String {
        let cmc: Vec<String> = self.cmc.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "{{\"rank1\": {:.6}, \"mAP\": {:.6}, \"cmc\": [{}]}}\n",
            self.rank1,
            self.map,
            cmc.join(", ")
        )
    }
}

/// Ranks each query's gallery by ascending distance (ties by gallery
/// index) and averages precision at every relevant position.
pub fn evaluate(
    dist: &DistanceMatrix,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<EvalReport> {
    if dist.rows != query_labels.len() || dist.cols != gallery_labels.len() {
        return Err(Error::dim(format!(
            "distance matrix is {}x{}, labels are {}x{}",
            dist.rows,
            dist.cols,
            query_labels.len(),
            gallery_labels.len()
        )));
    }
    if query_labels.is_empty() {
        return Err(Error::ProtocolViolation("no queries to evaluate".into()));
    }
    let gallery_classes: HashSet<usize> = gallery_labels.iter().copied().collect();
    if let Some((i, c)) = query_labels
        .iter()
        .enumerate()
        .find(|(_, c)| !gallery_classes.contains(c))
    {
        return Err(Error::ProtocolViolation(format!(
            "query {i} has class {c}, which is absent from the gallery"
        )));
    }
    if dist.data.iter().any(|d| d.is_nan()) {
        return Err(Error::InvalidValue("distance matrix contains NaN".into()));
    }

    // (average precision, rank of first match)
    let per_query: Vec<(f64, usize)> = (0..dist.rows)
        .into_par_iter()
        .map(|qi| {
            let row = dist.row(qi);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let target = query_labels[qi];
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            let mut first = usize::MAX;
            for (pos, &g) in order.iter().enumerate() {
                if gallery_labels[g] == target {
                    hits += 1;
                    precision_sum += hits as f64 / (pos + 1) as f64;
                    first = first.min(pos);
                }
            }
            (precision_sum / hits as f64, first)
        })
        .collect();

    let n = per_query.len() as f64;
    let map = per_query.iter().map(|(ap, _)| ap).sum::<f64>() / n;
    let mut first_counts = vec![0usize; dist.cols];
    for &(_, first) in &per_query {
        first_counts[first] += 1;
    }
    let mut cmc = Vec::with_capacity(dist.cols);
    let mut cumulative = 0usize;
    for c in first_counts {
        cumulative += c;
        cmc.push(cumulative as f64 / n);
    }
    let report = EvalReport {
        rank1: cmc[0],
        map,
        cmc,
    };
    assert!((0.0..=1.0).contains(&report.map), "mAP out of range");
    assert!(
        report.cmc.windows(2).all(|w| w[0] <= w[1]) && report.cmc.last().is_some_and(|v| *v <= 1.0),
        "CMC curve must be nondecreasing and bounded by 1"
    );
    Ok(report)
}

/// Distances and evaluation in one call.
pub fn evaluate_sets(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<EvalReport> {
    let dist = pairwise_sq_euclidean(queries, gallery)?;
    evaluate(&dist, queries.labels(), gallery.labels())
}
