//! Central finite-difference verification of tape gradients.
//!
//! The suite in [`run_op_suite`] exercises every [`OpKind`] on small random
//! 64-bit inputs. Inputs to kinked ops are kept at least 0.1 away from the
//! kink so a step of `1e-4` never crosses it.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fault, OpKind, ParamStore, SegmentIndex, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;
/// Tolerance for ops that are smooth everywhere.
pub const SMOOTH_TOLERANCE: f64 = 1e-5;
/// Tolerance for ops with kinks and for composite losses.
pub const KINK_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Worst disagreement found by [`check_store_gradients`].
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares backward gradients of `loss` against central differences over
/// every element of every parameter in `store`.
///
/// `loss` must be a deterministic function of the stored values.
pub fn check_store_gradients<F>(
    store: &ParamStore<f64>,
    fault: Option<Fault>,
    step: f64,
    mut loss: F,
) -> Result<GradReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::with_fault(fault);
    let out = loss(&mut tape, store)?;
    let mut bound = Vec::new();
    for id in store.ids() {
        bound.push(tape.param(store, id));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = bound.iter().map(|&v| grads.get_or_zero(v)).collect();

    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss(&mut tape, s)?;
        Ok(tape.value(v).item())
    };

    let mut probe = store.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, grad) in store.ids().zip(&analytic) {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

/// Outcome of checking one operation.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Values with magnitude in [0.1, 1) and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Contracts an op output to a scalar with fixed random weights so every
/// output element contributes a distinct amount.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let weighted = tape.mul(out, w)?;
    Ok(tape.sum_all(weighted))
}

fn check_op(kind: OpKind, fault: Option<Fault>) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ kind as u64);
    let mut store = ParamStore::new();
    let mut add = |name: &str, t: Tensor<f64>| store.register(name, t).expect("unique");
    let seed = 1000 + kind as u64;

    type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
    let build: Build = match kind {
        OpKind::Matmul => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            add("b", uniform(&mut rng, &[4, 2], -1.0, 1.0));
            Box::new(|t, v| t.matmul(v[0], v[1]))
        }
        OpKind::Transpose => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| t.transpose(v[0]))
        }
        OpKind::Reshape => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| t.reshape(v[0], &[2, 6]))
        }
        OpKind::Add => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            add("row", uniform(&mut rng, &[4], -1.0, 1.0));
            Box::new(|t, v| t.add(v[0], v[1]))
        }
        OpKind::Sub => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            add("b", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| t.sub(v[0], v[1]))
        }
        OpKind::Mul => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            add("row", uniform(&mut rng, &[1, 4], -1.0, 1.0));
            Box::new(|t, v| {
                let bc = t.mul(v[0], v[1])?;
                t.mul(bc, v[0])
            })
        }
        OpKind::ScalarMul => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| Ok(t.scalar_mul(v[0], -1.7)))
        }
        OpKind::AddScalar => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| {
                let s = t.add_scalar(v[0], 0.3);
                t.mul(s, s)
            })
        }
        OpKind::Neg => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| Ok(t.neg(v[0])))
        }
        OpKind::Exp => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| Ok(t.exp(v[0])))
        }
        OpKind::Log => {
            add("a", uniform(&mut rng, &[3, 4], 0.5, 2.0));
            Box::new(|t, v| t.log(v[0]))
        }
        OpKind::Relu => {
            add("a", away_from_zero(&mut rng, &[4, 5]));
            Box::new(|t, v| Ok(t.relu(v[0])))
        }
        OpKind::LeakyRelu => {
            add("a", away_from_zero(&mut rng, &[4, 5]));
            Box::new(|t, v| Ok(t.leaky_relu(v[0])))
        }
        OpKind::Softmax => {
            add("a", uniform(&mut rng, &[3, 5], -2.0, 2.0));
            Box::new(|t, v| t.softmax(v[0], 1))
        }
        OpKind::LogSoftmax => {
            add("a", uniform(&mut rng, &[4, 3], -2.0, 2.0));
            Box::new(|t, v| t.log_softmax(v[0], 0))
        }
        OpKind::Concat => {
            add("a", uniform(&mut rng, &[3, 2], -1.0, 1.0));
            add("b", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| t.concat(&[v[0], v[1], v[0]], 1))
        }
        OpKind::SumAll => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            })
        }
        OpKind::SumAxis => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| t.sum_axis(v[0], 0))
        }
        OpKind::LookupRows => {
            add("table", uniform(&mut rng, &[5, 3], -1.0, 1.0));
            Box::new(|t, v| t.lookup_rows(v[0], Rc::new(vec![4, 0, 4, 2])))
        }
        OpKind::SegmentWeightedSum => {
            add("values", uniform(&mut rng, &[4, 3], -1.0, 1.0));
            add("weights", uniform(&mut rng, &[6], -1.0, 1.0));
            let index = Rc::new(SegmentIndex::gathered(
                vec![0, 1, 1, 3, 2, 0],
                vec![0, 0, 2, 2, 2, 4],
                5,
            )?);
            Box::new(move |t, v| t.segment_weighted_sum(v[0], v[1], index.clone()))
        }
        OpKind::SegmentSoftmax => {
            add("scores", uniform(&mut rng, &[7, 1], -2.0, 2.0));
            let index = Rc::new(SegmentIndex::new(vec![0, 1, 0, 2, 2, 2, 0], 3)?);
            Box::new(move |t, v| t.segment_softmax(v[0], index.clone()))
        }
        OpKind::SelectColumn => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| t.select_column(v[0], 2))
        }
        OpKind::ScaleRows => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            add("scale", uniform(&mut rng, &[3, 1], -1.0, 1.0));
            Box::new(|t, v| t.scale_rows(v[0], v[1]))
        }
        OpKind::RowNorm => {
            add("a", uniform(&mut rng, &[4, 3], -1.0, 1.0));
            Box::new(|t, v| t.row_norm(v[0]))
        }
        OpKind::PickPerRow => {
            add("a", uniform(&mut rng, &[3, 4], -1.0, 1.0));
            Box::new(|t, v| t.pick_per_row(v[0], Rc::new(vec![3, 0, 3])))
        }
        OpKind::Dropout => {
            add("a", uniform(&mut rng, &[4, 5], -1.0, 1.0));
            Box::new(|t, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(77);
                t.dropout(v[0], 0.3, true, &mut mask_rng)
            })
        }
    };

    let report = check_store_gradients(&store, fault, FD_STEP, |tape, s| {
        let vars: Vec<Var> = s.ids().map(|id| tape.param(s, id)).collect();
        let out = build(tape, &vars)?;
        contract(tape, out, seed)
    })?;
    Ok(OpCheck {
        name: kind.name(),
        max_rel_err: report.max_rel_err,
        tolerance: if kind.is_smooth() {
            SMOOTH_TOLERANCE
        } else {
            KINK_TOLERANCE
        },
    })
}

/// Checks every op in [`OpKind::ALL`], once each, in that order.
pub fn run_op_suite(fault: Option<Fault>) -> Result<Vec<OpCheck>> {
    OpKind::ALL.iter().map(|&k| check_op(k, fault)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let results = run_op_suite(None).unwrap();
        assert_eq!(results.len(), OpKind::ALL.len());
        for r in &results {
            assert!(r.passed(), "{} max rel err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn sign_fault_is_detected() {
        let results = run_op_suite(Some(Fault::LeakyReluBackwardSign)).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
        assert_eq!(failed, vec!["leaky_relu"]);
    }
}
