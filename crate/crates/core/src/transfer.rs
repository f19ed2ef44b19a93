//! Prior (encoder-side) and posterior (GNN-side) edge probabilities, and the
//! KL transfer loss `KL(posterior ‖ prior)`.

use qgraph_numcore::{Real, Tape, Tensor, Trainable, Var};

use crate::error::{Error, Result};
use crate::gnn;

fn scalar_prob(hi: &[Real], hj: &[Real]) -> Result<Real> {
    if hi.len() != hj.len() {
        return Err(Error::Contract(format!(
            "embedding dims differ: {} vs {}",
            hi.len(),
            hj.len()
        )));
    }
    let mut tape = Tape::with_trainable(Trainable::Nothing);
    let h = tape.constant(Tensor::from_rows(&[hi.to_vec(), hj.to_vec()])?);
    let p = gnn::inner_product_probs(&mut tape, h, &[(0, 1)])?;
    Ok(tape.value(p).data()[0])
}

/// Clamped `sigmoid(H_i · H_j)` from encoder embeddings.
pub fn prior_prob(hi: &[Real], hj: &[Real]) -> Result<Real> {
    scalar_prob(hi, hj)
}

/// Clamped `sigmoid(H̃_i · H̃_j)` from GNN embeddings.
pub fn posterior_prob(hi: &[Real], hj: &[Real]) -> Result<Real> {
    scalar_prob(hi, hj)
}

/// Prior and posterior probabilities for the same pairs, each `[P, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeDistributions {
    pub prior: Var,
    pub posterior: Var,
}

/// Builds both distributions from row-aligned encoder (`h`) and GNN
/// (`h_tilde`) embeddings.
pub fn edge_distributions(tape: &mut Tape, h: Var, h_tilde: Var, pairs: &[(usize, usize)]) -> Result<EdgeDistributions> {
    Ok(EdgeDistributions {
        prior: gnn::inner_product_probs(tape, h, pairs)?,
        posterior: gnn::inner_product_probs(tape, h_tilde, pairs)?,
    })
}

/// `Σ p̃ log(p̃/p) + (1 - p̃) log((1 - p̃)/(1 - p))`. With
/// `stop_posterior_grad` the posterior is a constant.
pub fn loss_kl(tape: &mut Tape, dist: EdgeDistributions, stop_posterior_grad: bool) -> Result<Var> {
    let n = tape.value(dist.prior).numel();
    if n == 0 {
        return Err(Error::Contract("KL loss needs at least one pair".into()));
    }
    if tape.shape(dist.prior) != tape.shape(dist.posterior) {
        return Err(Error::Contract(format!(
            "prior shape {:?} differs from posterior shape {:?}",
            tape.shape(dist.prior),
            tape.shape(dist.posterior)
        )));
    }
    let pt = if stop_posterior_grad {
        tape.detach(dist.posterior)
    } else {
        dist.posterior
    };
    let p = tape.clamp_prob(dist.prior);
    let pt = tape.clamp_prob(pt);

    let log_pt = tape.log(pt);
    let log_p = tape.log(p);
    let pos = tape.sub(log_pt, log_p)?;
    let pos = tape.mul(pt, pos)?;

    let qt = tape.one_minus(pt);
    let q = tape.one_minus(p);
    let log_qt = tape.log(qt);
    let log_q = tape.log(q);
    let neg = tape.sub(log_qt, log_q)?;
    let neg = tape.mul(qt, neg)?;

    let both = tape.add(pos, neg)?;
    Ok(tape.sum(both))
}
