//! Cosine ranking over product embeddings: personalized top-k, analogy
//! queries and cold-start scoring.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::mapper::{map_features, Encoder};
use crate::vectors::Vectors;
use crate::{Error, Result};

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-normalized product vectors, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    dim: usize,
    unit: Vec<f64>,
    norms: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn build(vectors: &Vectors) -> Result<Self> {
        let mut order: Vec<usize> = (0..vectors.len()).collect();
        order.sort_by(|&a, &b| vectors.ids()[a].cmp(&vectors.ids()[b]));
        let dim = vectors.dim();
        let mut ids = Vec::with_capacity(order.len());
        let mut unit = Vec::with_capacity(order.len() * dim);
        let mut norms = Vec::with_capacity(order.len());
        for i in order {
            let v = vectors.row(i);
            let n = norm(v);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "product `{}` has a zero or non-finite vector",
                    vectors.ids()[i]
                )));
            }
            ids.push(vectors.ids()[i].clone());
            unit.extend(v.iter().map(|x| x / n));
            norms.push(n);
        }
        Ok(EmbeddingIndex {
            ids,
            dim,
            unit,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn unit(&self, i: usize) -> &[f64] {
        &self.unit[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// Cosine of `query` against every indexed product, in index order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::Dimension(format!(
                "query length {} but index dim {}",
                query.len(),
                self.dim
            )));
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::Degenerate("zero query vector".into()));
        }
        Ok((0..self.len())
            .map(|i| {
                let d: f64 = self.unit(i).iter().zip(query).map(|(a, b)| a * b).sum();
                (d / qn).clamp(-1.0, 1.0)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub product_id: String,
    pub score: f64,
}

/// Descending score, ascending id among ties.
fn by_score(a: &Ranked, b: &Ranked) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.product_id.cmp(&b.product_id))
}

/// All indexed products not in `exclude`, best first.
pub fn rank_products(
    query: &[f64],
    index: &EmbeddingIndex,
    exclude: &HashSet<String>,
) -> Result<Vec<Ranked>> {
    let scores = index.scores(query)?;
    let mut ranked: Vec<Ranked> = index
        .ids
        .iter()
        .zip(scores)
        .filter(|(id, _)| !exclude.contains(*id))
        .map(|(id, score)| Ranked {
            product_id: id.clone(),
            score,
        })
        .collect();
    ranked.sort_by(by_score);
    Ok(ranked)
}

pub fn top_k(
    query: &[f64],
    index: &EmbeddingIndex,
    exclude: &HashSet<String>,
    k: usize,
) -> Result<Vec<Ranked>> {
    let mut ranked = rank_products(query, index, exclude)?;
    ranked.truncate(k);
    Ok(ranked)
}

/// `q = x_p1 + (x_u2 - x_u1)`; the k products nearest to `q` by cosine.
/// `p1` itself is not excluded.
pub fn analogy_recommend(
    p1: &str,
    u1: &str,
    u2: &str,
    products: &Vectors,
    users: &Vectors,
    index: &EmbeddingIndex,
    k: usize,
) -> Result<Vec<Ranked>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    fn lookup<'a>(table: &'a Vectors, kind: &'static str, id: &str) -> Result<&'a [f64]> {
        table.get(id).ok_or_else(|| Error::UnknownId {
            kind,
            id: id.to_string(),
        })
    }
    let xp = lookup(products, "product", p1)?;
    let xu1 = lookup(users, "user", u1)?;
    let xu2 = lookup(users, "user", u2)?;
    // Difference first: with u1 == u2 the offset is exactly zero and q == x_p1.
    let q: Vec<f64> = xp
        .iter()
        .zip(xu2.iter().zip(xu1))
        .map(|(p, (b, a))| p + (b - a))
        .collect();
    top_k(&q, index, &HashSet::new(), k)
}

/// Cosine between a user and a cold product's mapped embedding.
pub fn cold_score(user_vec: &[f64], f_cold: &[f64], encoder: &Encoder) -> Result<f64> {
    cosine(user_vec, &map_features(encoder, f_cold)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn vectors(rows: &[(&str, &[f64])]) -> Vectors {
        let mut v = Vectors::new(rows[0].1.len());
        for (id, x) in rows {
            v.push(*id, x).unwrap();
        }
        v
    }

    #[test]
    fn cosine_values() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-12);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn single_product_index() {
        let idx = EmbeddingIndex::build(&vectors(&[("p", &[1.0, 2.0])])).unwrap();
        let r = rank_products(&[-1.0, 0.5], &idx, &HashSet::new()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].product_id, "p");
    }

    #[test]
    fn exact_match_ranks_first_and_exclusions_apply() {
        let v = vectors(&[("a", &[1.0, 0.0]), ("b", &[0.6, 0.8]), ("c", &[0.0, 1.0])]);
        let idx = EmbeddingIndex::build(&v).unwrap();
        let r = rank_products(&[0.6, 0.8], &idx, &HashSet::new()).unwrap();
        assert_eq!(r[0].product_id, "b");
        let ex: HashSet<String> = ["b".to_string()].into();
        let r = rank_products(&[0.6, 0.8], &idx, &ex).unwrap();
        assert!(r.iter().all(|x| x.product_id != "b"));
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn ranking_matches_full_sort_oracle() {
        let mut r = rng::stream(8, &[]);
        let mut v = Vectors::new(6);
        for i in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            v.push(format!("p{i:03}"), &x).unwrap();
        }
        let idx = EmbeddingIndex::build(&v).unwrap();
        let q: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let got: Vec<String> = rank_products(&q, &idx, &HashSet::new())
            .unwrap()
            .into_iter()
            .map(|x| x.product_id)
            .collect();
        let mut oracle: Vec<(f64, String)> = v
            .iter()
            .map(|(id, x)| (cosine(&q, x).unwrap(), id.to_string()))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<String> = oracle.into_iter().map(|(_, id)| id).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn analogy_cancels_for_same_user() {
        let products = vectors(&[("p1", &[0.2, 0.9, -0.1]), ("p2", &[0.2, 0.8, 0.0]), ("p3", &[1.0, 0.0, 0.0])]);
        let users = vectors(&[("u", &[0.5, -0.3, 0.7])]);
        let idx = EmbeddingIndex::build(&products).unwrap();
        let r = analogy_recommend("p1", "u", "u", &products, &users, &idx, 1).unwrap();
        assert_eq!(r[0].product_id, "p1");
        assert!(matches!(
            analogy_recommend("p1", "u", "nobody", &products, &users, &idx, 1),
            Err(Error::UnknownId { kind: "user", .. })
        ));
    }

    #[test]
    fn analogy_orthogonal_fixture() {
        // q = [1,0,0] - [0,1,0] + [0,0,1] = [1,-1,1]; the x- and z-axis
        // products tie at 1/sqrt(3) and the tie goes to the smaller id.
        let products = vectors(&[("px", &[1.0, 0.0, 0.0]), ("py", &[0.0, 1.0, 0.0]), ("pz", &[0.0, 0.0, 1.0])]);
        let users = vectors(&[("u1", &[0.0, 1.0, 0.0]), ("u2", &[0.0, 0.0, 1.0])]);
        let idx = EmbeddingIndex::build(&products).unwrap();
        let r = analogy_recommend("px", "u1", "u2", &products, &users, &idx, 3).unwrap();
        let ids: Vec<&str> = r.iter().map(|x| x.product_id.as_str()).collect();
        assert_eq!(ids, ["px", "pz", "py"]);
        assert!((r[0].score - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((r[2].score + 1.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn index_rows_are_unit() {
        let mut r = rng::stream(9, &[]);
        let mut v = Vectors::new(5);
        for i in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
            v.push(format!("{i}"), &x).unwrap();
        }
        let idx = EmbeddingIndex::build(&v).unwrap();
        for i in 0..idx.len() {
            assert!((norm(idx.unit(i)) - 1.0).abs() < 1e-6);
        }
    }
}
