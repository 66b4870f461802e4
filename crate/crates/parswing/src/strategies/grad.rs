//! Reverse-mode gradient of the training loss.
//!
//! [`batch_gradient`] re-records the smooth rollout of a strategy on a
//! [`Tape`], node for node in the same expression order as the plain f64
//! rollout, so the recorded path reward agrees bitwise with
//! [`roll_strategy`](super::roll_strategy). One backward sweep per path then
//! yields the gradient of the batch loss `-(1/B) sum_m reward_m` with respect
//! to every strategy parameter.
//!
//! Paths are processed in fixed-size blocks, each on its own tape with the
//! parameter leaves recorded once and the per-path graph truncated away
//! between paths. Block results are merged in block order, so the gradient is
//! bitwise independent of the number of worker threads.

use crate::autodiff::{NodeId, Tape};
use crate::models::{PathBatch, BLOCK_PATHS};
use crate::strategies::{RollContext, StrategyParams};
use crate::EngineError;
use rayon::prelude::*;

/// Unnormalized sums over a path set: the gradient of `-sum_m reward_m` and
/// the plain reward sum. Kept separate from [`BatchGradient`] so block merges
/// stay pure additions and the batch mean is formed by a single division.
#[derive(Debug, Clone)]
pub struct GradSums {
    pub grad: Vec<f64>,
    pub reward_sum: f64,
    pub n_paths: usize,
}

/// Gradient of the mean batch loss, plus the mean reward it descends.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// `d/dtheta [ -(1/B) sum_m reward_m ]`, flat parameter order.
    pub grad: Vec<f64>,
    /// `(1/B) sum_m reward_m`, the smooth-strategy value on this batch.
    pub mean_reward: f64,
}

/// Reusable node-id buffers for recording network layers.
#[derive(Debug, Default)]
struct NodeBuffers {
    input: Vec<NodeId>,
    cur: Vec<NodeId>,
    next: Vec<NodeId>,
    pairs: Vec<(NodeId, NodeId)>,
}

fn bind_leaves(tape: &mut Tape, params: &StrategyParams) -> Vec<NodeId> {
    params.values().iter().map(|v| tape.leaf(*v)).collect()
}

/// Records the smooth rollout of one path and returns the loss root together
/// with the path reward. The statement order here must stay in lockstep with
/// `roll_single`; any reordering breaks the bitwise agreement between the
/// trained loss and the evaluated reward.
fn record_path_loss(
    tape: &mut Tape,
    leaves: &[NodeId],
    params: &StrategyParams,
    ctx: &RollContext,
    spots: &[f64],
    states: &[f64],
    state_dim: usize,
    buffers: &mut NodeBuffers,
) -> (NodeId, f64) {
    let terms = ctx.terms;
    let zero = tape.constant(0.0);
    let mut q_cum = zero;
    let mut total = zero;
    for k in 0..terms.n {
        let payoff = tape.constant(spots[k] - terms.strike);
        let lower_c = tape.constant(ctx.corridor.lower[k + 1]);
        let upper_c = tape.constant(ctx.corridor.upper[k + 1]);
        let reach_lo = tape.scale_shift(q_cum, 1.0, terms.q_min[k]);
        let lo = tape.max(lower_c, reach_lo);
        let reach_hi = tape.scale_shift(q_cum, 1.0, terms.q_max[k]);
        let hi = tape.min(upper_c, reach_hi);
        let a_minus = tape.sub(lo, q_cum);
        let a_plus = tape.sub(hi, q_cum);
        let eta = tape.scale_shift(q_cum, ctx.eta_scale, ctx.eta_shift);
        let chi = match params {
            StrategyParams::PayoffVolume(_) => {
                let t1 = tape.mul(leaves[3 * k], payoff);
                let t2 = tape.mul(leaves[3 * k + 1], eta);
                let s = tape.add(t1, t2);
                tape.add(s, leaves[3 * k + 2])
            }
            StrategyParams::Network(net) => {
                let t_norm = tape.constant(ctx.times_norm[k]);
                buffers.input.clear();
                buffers.input.push(t_norm);
                buffers.input.push(payoff);
                buffers.input.push(eta);
                let state_row = &states[k * state_dim..k * state_dim + net.state_dim()];
                for s in state_row {
                    buffers.input.push(tape.constant(*s));
                }
                buffers.cur.clear();
                buffers.cur.extend_from_slice(&buffers.input);
                for layer in 0..net.n_layers() {
                    let (n_out, n_in) = (net.dims[layer + 1], net.dims[layer]);
                    let (w_off, b_off) = net.offsets(layer);
                    buffers.next.clear();
                    for i in 0..n_out {
                        buffers.pairs.clear();
                        for j in 0..n_in {
                            buffers.pairs.push((leaves[w_off + i * n_in + j], buffers.cur[j]));
                        }
                        let mut z = tape.affine(&buffers.pairs, leaves[b_off + i]);
                        if layer + 1 < net.n_layers() {
                            z = tape.relu(z);
                        }
                        buffers.next.push(z);
                    }
                    std::mem::swap(&mut buffers.cur, &mut buffers.next);
                }
                let t1 = tape.mul(buffers.cur[0], payoff);
                let t2 = tape.mul(buffers.cur[1], eta);
                let s = tape.add(t1, t2);
                tape.add(s, buffers.cur[2])
            }
        };
        let frac = tape.logistic(chi);
        let width = tape.sub(a_plus, a_minus);
        let scaled = tape.mul(width, frac);
        let q = tape.add(a_minus, scaled);
        let r = tape.mul(q, payoff);
        total = tape.add(total, r);
        q_cum = tape.add(q_cum, q);
    }
    let loss = tape.scale_shift(total, -1.0, 0.0);
    (loss, tape.value(total))
}

/// Gradient and reward sums for a whole batch, merged over fixed path blocks
/// in block order.
pub fn gradient_sums(
    ctx: &RollContext,
    params: &StrategyParams,
    batch: &PathBatch,
) -> Result<GradSums, EngineError> {
    params.check_compatible(ctx.terms, batch.state_dim)?;
    if batch.n_dates != ctx.terms.n {
        return Err(EngineError::Config(format!(
            "batch has {} dates but the contract has {}",
            batch.n_dates, ctx.terms.n
        )));
    }
    let n_params = params.n_params();
    let n_blocks = batch.n_paths.div_ceil(BLOCK_PATHS);
    let blocks: Vec<(Vec<f64>, f64)> = (0..n_blocks)
        .into_par_iter()
        .map(|blk| -> Result<(Vec<f64>, f64), EngineError> {
            let start = blk * BLOCK_PATHS;
            let end = ((blk + 1) * BLOCK_PATHS).min(batch.n_paths);
            let mut tape = Tape::new();
            let leaves = bind_leaves(&mut tape, params);
            if let Some((node, value)) = tape.first_invalid() {
                return Err(EngineError::Numeric {
                    message: format!(
                        "strategy parameter {} is non-finite ({value})",
                        node.0
                    ),
                    iteration: None,
                    seed: Some(batch.stream.seed),
                });
            }
            let base = tape.mark();
            let mut buffers = NodeBuffers::default();
            let mut grad = vec![0.0; n_params];
            let mut reward_sum = 0.0;
            for m in start..end {
                tape.truncate(base);
                let (loss, reward) = record_path_loss(
                    &mut tape,
                    &leaves,
                    params,
                    ctx,
                    batch.spots_of(m),
                    batch.states_of(m),
                    batch.state_dim,
                    &mut buffers,
                );
                if let Some((node, value)) = tape.first_invalid() {
                    return Err(EngineError::Numeric {
                        message: format!(
                            "non-finite value {value} at tape node {} while differentiating path {m}",
                            node.0
                        ),
                        iteration: None,
                        seed: Some(batch.stream.seed),
                    });
                }
                tape.backward(loss)?;
                for (g, leaf) in grad.iter_mut().zip(&leaves) {
                    *g += tape.adjoint(*leaf);
                }
                reward_sum += reward;
            }
            Ok((grad, reward_sum))
        })
        .collect::<Result<_, _>>()?;

    let mut grad = vec![0.0; n_params];
    let mut reward_sum = 0.0;
    for (g, r) in &blocks {
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
        reward_sum += r;
    }
    Ok(GradSums { grad, reward_sum, n_paths: batch.n_paths })
}

/// Mean-loss gradient of one batch: [`gradient_sums`] divided once by the
/// path count.
pub fn batch_gradient(
    ctx: &RollContext,
    params: &StrategyParams,
    batch: &PathBatch,
) -> Result<BatchGradient, EngineError> {
    if batch.n_paths == 0 {
        return Err(EngineError::Config("cannot differentiate an empty batch".into()));
    }
    let sums = gradient_sums(ctx, params, batch)?;
    let b = sums.n_paths as f64;
    let grad = sums.grad.iter().map(|g| g / b).collect();
    Ok(BatchGradient { grad, mean_reward: sums.reward_sum / b })
}
