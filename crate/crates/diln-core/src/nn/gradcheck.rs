//! Central finite-difference verification of analytic gradients.
//!
//! Backprop returns the exact gradient of the loss with every stop-gradient
//! output held constant, every relu on the side of its kink chosen by the
//! subgradient convention, and every discrete choice (nearest-code
//! assignment) fixed at the evaluation point. The checker therefore compares
//! against finite differences of that same frozen function: the target
//! records those choices on the base pass and replays them on perturbed
//! passes.

use super::store::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// A loss whose gradients can be finite-difference checked.
pub trait GradCheckTarget {
    /// Evaluate at the store's current values, accumulate analytic gradients
    /// into the store, and capture the frozen context (stop-gradient values,
    /// discrete assignments) for later replays.
    fn loss_and_grad(&mut self, store: &mut ParamStore) -> Result<f64>;

    /// Re-evaluate at the store's current values with the captured context
    /// frozen. No gradients.
    fn loss_frozen(&self, store: &ParamStore) -> Result<f64>;
}

/// Per-parameter-group comparison summary.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub params_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub analytic_at_worst: f64,
    pub fd_at_worst: f64,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub base_loss: f64,
    pub step: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    /// Largest relative error over all checked (unfrozen) groups.
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().filter(|g| !g.frozen).map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.groups.iter().filter(|g| !g.frozen).all(|g| g.max_rel_err < tolerance)
    }
}

// Relative-error floor: components smaller than this are compared absolutely
// at this scale, keeping finite-difference roundoff out of the verdict.
const REL_FLOOR: f64 = 1e-4;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients against central differences with the given
/// step, one scalar parameter at a time.
pub fn finite_diff_check(
    target: &mut dyn GradCheckTarget,
    store: &mut ParamStore,
    step: f64,
) -> Result<GradCheckReport> {
    store.zero_grads();
    let base_loss = target.loss_and_grad(store)?;

    let ids: Vec<ParamId> = store.ids().collect();
    let analytic: Vec<Tensor> = ids.iter().map(|&id| store.grad(id).clone()).collect();

    let mut groups: Vec<GroupReport> = Vec::new();
    for (&id, grad) in ids.iter().zip(&analytic) {
        let group_name = store.group(id).to_string();
        let frozen = store.is_frozen(id);
        let entry = match groups.iter_mut().find(|g| g.group == group_name) {
            Some(e) => e,
            None => {
                groups.push(GroupReport {
                    group: group_name.clone(),
                    params_checked: 0,
                    max_rel_err: 0.0,
                    worst_param: String::new(),
                    analytic_at_worst: 0.0,
                    fd_at_worst: 0.0,
                    frozen,
                });
                groups.last_mut().unwrap()
            }
        };
        if frozen {
            entry.frozen = true;
            continue;
        }

        let n = store.value(id).len();
        let name = store.name(id).to_string();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let plus = target.loss_frozen(store)?;
            store.value_mut(id).data_mut()[i] = orig - step;
            let minus = target.loss_frozen(store)?;
            store.value_mut(id).data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = rel_err(a, fd);
            entry.params_checked += 1;
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_param = format!("{name}[{i}]");
                entry.analytic_at_worst = a;
                entry.fd_at_worst = fd;
            }
        }
    }

    Ok(GradCheckReport { base_loss, step, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::{Activation, FrozenContext, Tape};

    // Quadratic loss on one dense layer: mean((relu-free dense(x) - t)^2).
    struct QuadraticTarget {
        x: Tensor,
        t: Tensor,
    }

    impl QuadraticTarget {
        fn build(&self, tape: &mut Tape, store: &ParamStore) -> crate::nn::ValueId {
            let x = tape.input(self.x.clone());
            let w = tape.param(store, store.id("layer.w").unwrap());
            let b = tape.param(store, store.id("layer.b").unwrap());
            let y = tape.dense(x, w, b, Activation::Identity);
            let t = tape.input(self.t.clone());
            let d = tape.sub(y, t);
            let sq = tape.mul(d, d);
            tape.mean_all(sq)
        }
    }

    impl GradCheckTarget for QuadraticTarget {
        fn loss_and_grad(&mut self, store: &mut ParamStore) -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let loss = self.build(&mut tape, store);
            let grads = tape.backward(loss);
            tape.accumulate_into(&grads, store);
            Ok(tape.value(loss).item())
        }

        fn loss_frozen(&self, store: &ParamStore) -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let loss = self.build(&mut tape, store);
            Ok(tape.value(loss).item())
        }
    }

    fn seeded_store() -> ParamStore {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.register("layer.w", Tensor::uniform(&[3, 2], 0.5, &mut rng));
        store.register("layer.b", Tensor::uniform(&[2], 0.5, &mut rng));
        store
    }

    #[test]
    fn quadratic_dense_layer_checks_below_1e7() {
        let mut store = seeded_store();
        let mut target = QuadraticTarget {
            x: Tensor::from_vec(&[2, 3], vec![0.3, -0.8, 1.2, 0.5, 0.1, -0.4]),
            t: Tensor::from_vec(&[2, 2], vec![0.25, -0.5, 1.0, 0.0]),
        };
        let report = finite_diff_check(&mut target, &mut store, 1e-5).unwrap();
        assert!(report.max_rel_err() < 1e-7, "max rel err {}", report.max_rel_err());
    }

    // Loss where the first layer sits behind a stop-gradient: both analytic
    // and (frozen) finite-difference gradients must be exactly zero.
    struct BlockedTarget {
        x: Tensor,
        frozen: Option<FrozenContext>,
    }

    impl BlockedTarget {
        fn build(&self, tape: &mut Tape, store: &ParamStore) -> crate::nn::ValueId {
            let x = tape.input(self.x.clone());
            let w1 = tape.param(store, store.id("hidden.w").unwrap());
            let b1 = tape.param(store, store.id("hidden.b").unwrap());
            let h = tape.dense(x, w1, b1, Activation::Relu);
            let h = tape.stop_gradient(h);
            let w2 = tape.param(store, store.id("head.w").unwrap());
            let b2 = tape.param(store, store.id("head.b").unwrap());
            let y = tape.dense(h, w2, b2, Activation::Identity);
            let sq = tape.mul(y, y);
            tape.mean_all(sq)
        }
    }

    impl GradCheckTarget for BlockedTarget {
        fn loss_and_grad(&mut self, store: &mut ParamStore) -> crate::error::Result<f64> {
            let mut tape = Tape::recording();
            let loss = self.build(&mut tape, store);
            let grads = tape.backward(loss);
            tape.accumulate_into(&grads, store);
            let out = tape.value(loss).item();
            self.frozen = Some(tape.take_frozen());
            Ok(out)
        }

        fn loss_frozen(&self, store: &ParamStore) -> crate::error::Result<f64> {
            let ctx = self.frozen.clone().expect("base pass first");
            let mut tape = Tape::replaying(ctx);
            let loss = self.build(&mut tape, store);
            Ok(tape.value(loss).item())
        }
    }

    #[test]
    fn layer_behind_stop_gradient_is_zero_on_both_sides() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.register("hidden.w", Tensor::uniform(&[3, 4], 0.5, &mut rng));
        store.register("hidden.b", Tensor::uniform(&[4], 0.5, &mut rng));
        store.register("head.w", Tensor::uniform(&[4, 1], 0.5, &mut rng));
        store.register("head.b", Tensor::uniform(&[1], 0.5, &mut rng));

        let mut target = BlockedTarget {
            x: Tensor::from_vec(&[2, 3], vec![0.4, -0.2, 0.9, -0.7, 0.3, 0.6]),
            frozen: None,
        };
        let report = finite_diff_check(&mut target, &mut store, 1e-5).unwrap();

        let hidden = report.groups.iter().find(|g| g.group == "hidden").unwrap();
        assert!(hidden.max_rel_err < 1e-9, "blocked group err {}", hidden.max_rel_err);
        let w_id = store.id("hidden.w").unwrap();
        assert!(store.grad(w_id).data().iter().all(|&g| g == 0.0));
        let head = report.groups.iter().find(|g| g.group == "head").unwrap();
        assert!(head.max_rel_err < 1e-7, "head group err {}", head.max_rel_err);
    }
}
