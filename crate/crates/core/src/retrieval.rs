//! Text-to-image retrieval metrics.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

/// Query × gallery similarities with binary relevance.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Mat,
    relevance: Array2<bool>,
}

impl ScoreMatrix {
    pub fn new(scores: Mat, relevance: Array2<bool>) -> Result<Self> {
        if scores.dim() != relevance.dim() {
            return Err(Error::Shape(format!(
                "scores {:?} vs relevance {:?}",
                scores.dim(),
                relevance.dim()
            )));
        }
        if scores.ncols() == 0 {
            return Err(Error::Degenerate("empty gallery".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Degenerate("non-finite score".into()));
        }
        if let Some(q) = relevance
            .axis_iter(Axis(0))
            .position(|row| !row.iter().any(|&r| r))
        {
            return Err(Error::Label(format!("query {q} has no relevant gallery item")));
        }
        Ok(Self { scores, relevance })
    }

    /// Relevance from identity keys: query `i` matches gallery `j` when the
    /// keys are equal.
    pub fn from_ids<T: PartialEq>(scores: Mat, query_ids: &[T], gallery_ids: &[T]) -> Result<Self> {
        let relevance = Array2::from_shape_fn((query_ids.len(), gallery_ids.len()), |(i, j)| {
            query_ids[i] == gallery_ids[j]
        });
        Self::new(scores, relevance)
    }

    pub fn scores(&self) -> &Mat {
        &self.scores
    }

    pub fn relevance(&self) -> &Array2<bool> {
        &self.relevance
    }

    pub fn queries(&self) -> usize {
        self.scores.nrows()
    }

    pub fn gallery(&self) -> usize {
        self.scores.ncols()
    }

    /// Gallery indices of query `q` by descending score, ties by index.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.scores.row(q);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx
    }
}

/// Fraction of queries with a relevant item among the top `k`.
pub fn rank_k(m: &ScoreMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > m.gallery() {
        return Err(Error::Config(format!("k = {k} outside [1, {}]", m.gallery())));
    }
    let hits = (0..m.queries())
        .filter(|&q| m.ranking(q)[..k].iter().any(|&j| m.relevance[[q, j]]))
        .count();
    Ok(hits as f64 / m.queries() as f64)
}

/// Precision averaged over the ranks of the relevant items.
pub fn average_precision(m: &ScoreMatrix, q: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, j) in m.ranking(q).into_iter().enumerate() {
        if m.relevance[[q, j]] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / hits as f64
}

pub fn mean_average_precision(m: &ScoreMatrix) -> f64 {
    (0..m.queries()).map(|q| average_precision(m, q)).sum::<f64>() / m.queries() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub query_count: usize,
    pub gallery_count: usize,
}

/// Rank-1/5/10 and mAP; `k` is capped at the gallery size.
pub fn report(m: &ScoreMatrix) -> Result<MetricsReport> {
    let g = m.gallery();
    Ok(MetricsReport {
        rank1: rank_k(m, 1)?,
        rank5: rank_k(m, 5.min(g))?,
        rank10: rank_k(m, 10.min(g))?,
        map: mean_average_precision(m),
        query_count: m.queries(),
        gallery_count: g,
    })
}

/// Cosine similarity of every query row against every gallery row.
pub fn cosine_scores(queries: &Mat, gallery: &Mat) -> Result<Mat> {
    if queries.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!(
            "query width {} vs gallery width {}",
            queries.ncols(),
            gallery.ncols()
        )));
    }
    let unit = |m: &Mat| -> Result<Mat> {
        let mut out = m.clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("embedding {i} has norm {n}")));
            }
            row /= n;
        }
        Ok(out)
    };
    Ok(unit(queries)?.dot(&unit(gallery)?.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(scores: Mat) -> ScoreMatrix {
        let n = scores.nrows();
        ScoreMatrix::new(scores, Array2::from_shape_fn((n, n), |(i, j)| i == j)).unwrap()
    }

    #[test]
    fn unique_max_and_min() {
        let m = diag(array![[0.9, 0.1], [0.0, 0.5]]);
        assert_eq!(rank_k(&m, 1).unwrap(), 1.0);
        let m = diag(array![[0.1, 0.9], [0.8, 0.5]]);
        assert_eq!(rank_k(&m, 1).unwrap(), 0.0);
        assert!(matches!(rank_k(&m, 3), Err(Error::Config(_))));
    }

    #[test]
    fn ap_examples() {
        let m = diag(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(mean_average_precision(&m), 1.0);
        let m = diag(array![[0.0, 1.0], [0.0, 1.0]]);
        assert_eq!(average_precision(&m, 0), 0.5);
    }

    #[test]
    fn ties_go_to_lower_gallery_index() {
        let rel = array![[false, true, false]];
        let m = ScoreMatrix::new(array![[0.5, 0.5, 0.5]], rel).unwrap();
        assert_eq!(m.ranking(0), vec![0, 1, 2]);
        assert_eq!(rank_k(&m, 1).unwrap(), 0.0);
        assert_eq!(rank_k(&m, 2).unwrap(), 1.0);
    }

    #[test]
    fn query_without_positive_is_a_label_error() {
        let rel = array![[false, false]];
        assert!(matches!(
            ScoreMatrix::new(array![[0.1, 0.2]], rel),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn cosine_scores_are_scale_free() {
        let q = array![[1.0, 0.0], [1.0, 1.0]];
        let g = array![[2.0, 0.0], [0.0, 3.0]];
        let s = cosine_scores(&q, &g).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((s[[1, 1]] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metric_invariants(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, g) = (6, 12);
            let scores = Mat::from_shape_fn((q, g), |_| rng.random::<f64>());
            let relevance = Array2::from_shape_fn((q, g), |(i, j)| j % q == i);
            let m = ScoreMatrix::new(scores.clone(), relevance.clone()).unwrap();
            let r: Vec<f64> = (1..=g).map(|k| rank_k(&m, k).unwrap()).collect();
            for w in r.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert_eq!(r[g - 1], 1.0);
            let moved = ScoreMatrix::new(scores.mapv(|s| (3.0 * s).exp() - 7.0), relevance).unwrap();
            for k in 1..=g {
                prop_assert_eq!(rank_k(&m, k).unwrap(), rank_k(&moved, k).unwrap());
            }
            prop_assert_eq!(mean_average_precision(&m), mean_average_precision(&moved));
        }
    }
}
