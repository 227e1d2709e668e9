use crate::error::{Error, Result};

/// Loss value and gradients w.r.t. every embedding of one tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_query: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(a - b) / ‖a - b‖`, or zero where the distance vanishes.
fn unit_difference(a: &[f64], b: &[f64], dist: f64) -> Vec<f64> {
    if dist == 0.0 {
        return vec![0.0; a.len()];
    }
    a.iter().zip(b).map(|(x, y)| (x - y) / dist).collect()
}

/// Summed hinge `Σ_k max(0, ‖q − p‖ + m − ‖q − n_k‖)`.
///
/// Inactive terms contribute neither loss nor gradient. The gradient of a
/// distance at zero is taken as zero.
pub fn triplet_loss(
    query: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    margin: f64,
) -> Result<TripletLoss> {
    let dim = query.len();
    if positive.len() != dim || negatives.iter().any(|n| n.len() != dim) {
        return Err(Error::config("triplet embeddings differ in dimension"));
    }
    let d_pos = distance(query, positive);
    let u_pos = unit_difference(query, positive, d_pos);
    let mut out = TripletLoss {
        loss: 0.0,
        grad_query: vec![0.0; dim],
        grad_positive: vec![0.0; dim],
        grad_negatives: vec![vec![0.0; dim]; negatives.len()],
    };
    for (k, neg) in negatives.iter().enumerate() {
        let d_neg = distance(query, neg);
        let violation = d_pos + margin - d_neg;
        if violation <= 0.0 {
            continue;
        }
        out.loss += violation;
        let u_neg = unit_difference(query, neg, d_neg);
        for c in 0..dim {
            out.grad_query[c] += u_pos[c] - u_neg[c];
            out.grad_positive[c] -= u_pos[c];
            out.grad_negatives[k][c] += u_neg[c];
        }
    }
    Ok(out)
}
