//! Retrieval metrics: Batch Hits@K and exact KNN Hits@K.
//!
//! Scores are dot products of unit vectors (cosines). A true pair is ranked
//! by counting strictly greater scores, so it wins ties.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::dot;

/// Hit count over a number of queries; the metric is `hits / n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Hits {
    pub hits: usize,
    pub n: usize,
}

impl Hits {
    pub fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.hits as f64 / self.n as f64
        }
    }

    pub fn merge(self, other: Hits) -> Hits {
        Hits { hits: self.hits + other.hits, n: self.n + other.n }
    }
}

/// Fraction of rows whose diagonal score is in the row's top `k`.
///
/// `user_vecs` and `post_vecs` are both `B × dim`; row `i` of each forms the
/// positive pair.
pub fn batch_hits_at_k(user_vecs: &[f64], post_vecs: &[f64], dim: usize, k: usize) -> Result<Hits> {
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    check_dim(user_vecs.len(), post_vecs.len())?;
    let b = user_vecs.len() / dim;
    let mut hits = 0;
    for (i, u) in user_vecs.chunks_exact(dim).enumerate() {
        let diag = dot(u, &post_vecs[i * dim..(i + 1) * dim]);
        let better = post_vecs.chunks_exact(dim).filter(|p| dot(u, p) > diag).count();
        if better < k {
            hits += 1;
        }
    }
    Ok(Hits { hits, n: b })
}

/// A set of unit-norm post vectors addressable by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f64>,
    index: BTreeMap<u64, usize>,
}

impl Corpus {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    /// Inserts or replaces the vector for `id`.
    pub fn insert(&mut self, id: u64, vector: &[f64]) -> Result<()> {
        check_dim(self.dim, vector.len())?;
        match self.index.get(&id) {
            Some(&i) => self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(id, self.ids.len());
                self.ids.push(id);
                self.vectors.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.index.get(&id).map(|&i| self.vector(i))
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.ids.iter().copied().zip(self.vectors.chunks_exact(self.dim.max(1)))
    }
}

/// Exact top-`k` by score, descending, ties broken by ascending id.
pub fn top_k(query: &[f64], corpus: &Corpus, k: usize) -> Vec<(u64, f64)> {
    let mut scored: Vec<(u64, f64)> = corpus.iter().map(|(id, v)| (id, dot(query, v))).collect();
    let order = |a: &(u64, f64), b: &(u64, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(order);
    scored
}

/// Fraction of queries with at least one target among the `k` nearest
/// corpus entries. Each query is `(unit user vector, target ids)`.
pub fn knn_hits_at_k<'a, I>(queries: I, corpus: &Corpus, k: usize) -> Result<Hits>
where
    I: IntoIterator<Item = (&'a [f64], &'a [u64])>,
{
    knn_hits_excluding(queries.into_iter().map(|(q, t)| (q, t, &[][..])), corpus, k)
}

/// As [`knn_hits_at_k`], with each query's `excluded` ids (typically posts
/// the user already engaged with) removed from its candidate list.
pub fn knn_hits_excluding<'a, I>(queries: I, corpus: &Corpus, k: usize) -> Result<Hits>
where
    I: IntoIterator<Item = (&'a [f64], &'a [u64], &'a [u64])>,
{
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    let mut out = Hits::default();
    let mut scores = Vec::with_capacity(corpus.len());
    let mut skip: Vec<usize> = Vec::new();
    for (q, targets, excluded) in queries {
        check_dim(corpus.dim(), q.len())?;
        scores.clear();
        scores.extend(corpus.iter().map(|(_, v)| dot(q, v)));
        skip.clear();
        skip.extend(excluded.iter().filter(|id| !targets.contains(id)).filter_map(|id| corpus.index.get(id).copied()));
        skip.sort_unstable();
        skip.dedup();
        let mut hit = false;
        for &t in targets {
            let ti = *corpus.index.get(&t).ok_or(Error::MissingEmbedding(t))?;
            let ts = scores[ti];
            let above = scores.iter().filter(|&&s| s > ts).count() - skip.iter().filter(|&&i| scores[i] > ts).count();
            if !hit && above < k {
                hit = true;
            }
        }
        out.n += 1;
        out.hits += usize::from(hit);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identity_batch_is_perfect() {
        let u = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(batch_hits_at_k(&u, &u, 2, 1).unwrap(), Hits { hits: 2, n: 2 });
    }

    #[test]
    fn two_by_two_example() {
        // cosines [[0.1, 0.9], [0.2, 0.8]] via users=identity and posts' columns.
        let users = [1.0, 0.0, 0.0, 1.0];
        // post j vector = (cos(u0, pj), cos(u1, pj))
        let posts = [0.1, 0.2, 0.9, 0.8];
        assert_eq!(batch_hits_at_k(&users, &posts, 2, 1).unwrap().value(), 0.5);
    }

    #[test]
    fn hits_monotone_in_k() {
        let users = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
        let posts = [0.0, 1.0, 1.0, 0.0, 0.8, 0.6];
        let mut prev = 0;
        for k in 1..=3 {
            let h = batch_hits_at_k(&users, &posts, 2, k).unwrap().hits;
            assert!(h >= prev);
            prev = h;
        }
        assert_eq!(prev, 3);
    }

    #[test]
    fn knn_edges() {
        let mut c = Corpus::new(2);
        c.insert(5, &[1.0, 0.0]).unwrap();
        c.insert(7, &[0.0, 1.0]).unwrap();
        let q0 = [1.0, 0.0];
        let q1 = [0.0, 1.0];
        let queries = vec![(&q0[..], &[5u64][..]), (&q1[..], &[7u64][..])];
        assert_eq!(knn_hits_at_k(queries.clone(), &c, 1).unwrap().value(), 1.0);
        let swapped = vec![(&q0[..], &[7u64][..]), (&q1[..], &[5u64][..])];
        assert_eq!(knn_hits_at_k(swapped.clone(), &c, 1).unwrap().value(), 0.0);
        assert_eq!(knn_hits_at_k(swapped, &c, 2).unwrap().value(), 1.0);
        let missing = vec![(&q0[..], &[9u64][..])];
        assert_eq!(knn_hits_at_k(missing, &c, 1), Err(Error::MissingEmbedding(9)));
        let excl = vec![(&q0[..], &[7u64][..], &[5u64][..])];
        assert_eq!(knn_hits_excluding(excl, &c, 1).unwrap().value(), 1.0);
    }

    #[test]
    fn top_k_breaks_ties_by_id() {
        let mut c = Corpus::new(2);
        for id in [9, 3, 6] {
            c.insert(id, &[1.0, 0.0]).unwrap();
        }
        c.insert(1, &[0.0, 1.0]).unwrap();
        let r = top_k(&[1.0, 0.0], &c, 2);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 6]);
        let all = top_k(&[1.0, 0.0], &c, 10);
        assert_eq!(all.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 6, 9, 1]);
    }
}
