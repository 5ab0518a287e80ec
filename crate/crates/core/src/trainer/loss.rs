//! Contrastive and triplet objectives over embedding batches.
//!
//! Batches are laid out pairwise: embeddings `2i` and `2i + 1` are the two
//! augmented views of patch `i`.

use crate::error::{Error, Result};

/// Loss hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    pub batch_pairs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            margin: 0.2,
            batch_pairs: 16,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "margin must be > 0, got {}",
                self.margin
            )));
        }
        if self.batch_pairs < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_pairs must be >= 2, got {}",
                self.batch_pairs
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Adds `coef * d cos(a, b) / d a` into `grad_a`.
fn add_cosine_grad(a: &[f64], b: &[f64], coef: f64, grad_a: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let s = dot(a, b) / (na * nb);
    for k in 0..a.len() {
        grad_a[k] += coef * (b[k] / (na * nb) - s * a[k] / (na * na));
    }
}

fn check_pairs(embeddings: &[Vec<f64>]) -> Result<usize> {
    if embeddings.len() % 2 != 0 || embeddings.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "expected an even batch of at least 2 pairs, got {} embeddings",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidArgument("embeddings differ in dimension".into()));
    }
    Ok(embeddings.len() / 2)
}

/// NT-Xent summed over pairs, with its gradient for every embedding.
///
/// Each pair term is
/// `-log(2 exp(s(i1, i2)/τ) / Σ_{j≠i} Σ_{m,n} exp(s(im, jn)/τ))`
/// with cosine similarity `s`. This differs from the usual SimCLR loss: the
/// numerator carries a factor 2 and the denominator holds only cross-pair
/// terms.
pub fn nt_xent_loss(embeddings: &[Vec<f64>], temperature: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let pairs = check_pairs(embeddings)?;
    let n = embeddings.len();
    let mut sim = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let s = cosine_similarity(&embeddings[a], &embeddings[b]);
            sim[a * n + b] = s;
            sim[b * n + a] = s;
        }
    }
    // coef[a*n+b]: derivative of the total loss with respect to s(a, b), ordered.
    let mut coef = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..pairs {
        let (i1, i2) = (2 * i, 2 * i + 1);
        let logits: Vec<(usize, usize, f64)> = [i1, i2]
            .into_iter()
            .flat_map(|a| (0..n).filter(move |&b| b / 2 != i).map(move |b| (a, b)))
            .map(|(a, b)| (a, b, sim[a * n + b] / temperature))
            .collect();
        let max = logits.iter().map(|l| l.2).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l.2 - max).exp()).sum();
        let log_denominator = max + z.ln();
        total += -(2f64.ln() + sim[i1 * n + i2] / temperature) + log_denominator;
        coef[i1 * n + i2] -= 1.0 / temperature;
        for &(a, b, l) in &logits {
            coef[a * n + b] += (l - max).exp() / z / temperature;
        }
    }
    let dim = embeddings[0].len();
    let mut grads = vec![vec![0.0; dim]; n];
    for a in 0..n {
        for b in 0..n {
            let c = coef[a * n + b];
            if c == 0.0 {
                continue;
            }
            add_cosine_grad(&embeddings[a], &embeddings[b], c, &mut grads[a]);
            add_cosine_grad(&embeddings[b], &embeddings[a], c, &mut grads[b]);
        }
    }
    Ok((total, grads))
}

/// `max(0, |a - p|² - |a - n|² + α)` and gradients for `(a, p, n)`.
pub fn triplet_margin_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<(f64, [Vec<f64>; 3])> {
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be > 0, got {margin}")));
    }
    let value = squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin;
    let dim = anchor.len();
    if value <= 0.0 {
        return Ok((0.0, [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]]));
    }
    let ga = (0..dim).map(|k| 2.0 * (negative[k] - positive[k])).collect();
    let gp = (0..dim).map(|k| -2.0 * (anchor[k] - positive[k])).collect();
    let gn = (0..dim).map(|k| 2.0 * (anchor[k] - negative[k])).collect();
    Ok((value, [ga, gp, gn]))
}

/// Picks a negative among squared anchor distances `candidates`.
///
/// Prefers the closest candidate inside `(d_ap, d_ap + α)`. Without one, takes
/// the closest candidate beyond `d_ap`; when every candidate is at most
/// `d_ap` away there is no useful triplet and `None` is returned. Ties go to
/// the lower index.
pub fn select_semi_hard(d_ap: f64, candidates: &[f64], margin: f64) -> Option<usize> {
    let closest = |keep: &dyn Fn(f64) -> bool| {
        candidates
            .iter()
            .enumerate()
            .filter(|(_, &d)| keep(d))
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    };
    closest(&|d| d > d_ap && d < d_ap + margin).or_else(|| closest(&|d| d > d_ap))
}

/// A selected `(anchor, positive, negative)` triple of batch indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Semi-hard negative for every embedding used as an anchor against its pair
/// partner. Entry `a` is `None` when the triplet is skipped.
pub fn semi_hard_negatives(embeddings: &[Vec<f64>], margin: f64) -> Result<Vec<Option<usize>>> {
    check_pairs(embeddings)?;
    let n = embeddings.len();
    Ok((0..n)
        .map(|a| {
            let p = a ^ 1;
            let d_ap = squared_distance(&embeddings[a], &embeddings[p]);
            let others: Vec<usize> = (0..n).filter(|&j| j / 2 != a / 2).collect();
            let d: Vec<f64> = others
                .iter()
                .map(|&j| squared_distance(&embeddings[a], &embeddings[j]))
                .collect();
            select_semi_hard(d_ap, &d, margin).map(|k| others[k])
        })
        .collect())
}

/// Summed triplet loss over the semi-hard selection, with embedding gradients.
pub fn batch_triplet_loss(embeddings: &[Vec<f64>], margin: f64) -> Result<(f64, Vec<Vec<f64>>, Vec<Triplet>)> {
    let selection = semi_hard_negatives(embeddings, margin)?;
    let triplets: Vec<Triplet> = selection
        .iter()
        .enumerate()
        .filter_map(|(a, neg)| {
            neg.map(|negative| Triplet {
                anchor: a,
                positive: a ^ 1,
                negative,
            })
        })
        .collect();
    let (total, grads) = triplet_loss_for(embeddings, &triplets, margin)?;
    Ok((total, grads, triplets))
}

/// Summed triplet loss for a fixed selection of triplets.
pub fn triplet_loss_for(embeddings: &[Vec<f64>], triplets: &[Triplet], margin: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    let mut total = 0.0;
    for t in triplets {
        let (v, [ga, gp, gn]) = triplet_margin_loss(
            &embeddings[t.anchor],
            &embeddings[t.positive],
            &embeddings[t.negative],
            margin,
        )?;
        total += v;
        for (idx, g) in [(t.anchor, ga), (t.positive, gp), (t.negative, gn)] {
            for (acc, x) in grads[idx].iter_mut().zip(g) {
                *acc += x;
            }
        }
    }
    Ok((total, grads))
}
