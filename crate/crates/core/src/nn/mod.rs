//! Neural-network building blocks on top of the tape.

pub mod candidate;
pub mod functional;
pub mod layers;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{
    finite_diff_check, BufferId, FiniteDiffReport, ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var,
};

pub use candidate::{OpInstance, OperatorKind};
pub use functional::{BatchStats, Conv2dOpts, CrossEntropy, PoolKind};
pub use layers::{BatchNorm2d, Conv2d, ConvBn};

/// Which parameter groups receive gradients during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Group(ParamGroup),
    Everything,
}

impl Trainable {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Group(g) => g == group,
            Trainable::Everything => true,
        }
    }
}

/// A pending running-statistics update produced by a training-mode
/// batch-norm call.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

/// State for one forward pass: the tape, read access to the parameters and
/// the mode flags.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    pub trainable: Trainable,
    vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool, trainable: Trainable) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            training,
            trainable,
            vars: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Evaluation mode without gradients.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Ctx::new(store, false, Trainable::Nothing)
    }

    /// The tape variable for a parameter, recorded once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.vars.get(&id) {
            return v;
        }
        let p = self.store.param(id);
        let v = self
            .tape
            .param_leaf(id, p.tensor.clone(), self.trainable.includes(p.group));
        self.vars.insert(id, v);
        v
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    /// Ends the pass, returning the tape and the pending batch-norm updates.
    pub fn finish(self) -> (Tape<T>, Vec<BnUpdate<T>>) {
        (self.tape, self.bn_updates)
    }
}

/// Exponential running-average update:
/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) -> Result<()> {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var_unbiased)] {
            let buf = store.buffer_mut(id);
            if buf.numel() != batch.len() {
                return Err(crate::Error::shape(format!(
                    "running statistics of {} vs batch of {}",
                    buf.numel(),
                    batch.len()
                )));
            }
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
    Ok(())
}

/// Default running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Gradient check of `⟨f(params), P⟩` for a fixed random projection `P`
/// (seeded by `seed`) against every parameter in `store`. The forward pass
/// runs in training mode.
pub fn projected_gradcheck<F>(store: &mut ParamStore<f64>, seed: u64, eps: f64, mut f: F) -> Result<FiniteDiffReport>
where
    F: FnMut(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut proj: Option<Tensor<f64>> = None;
    let ids: Vec<_> = store.ids().collect();
    finite_diff_check(store, &ids, eps, |s| {
        let mut ctx = Ctx::new(s, true, Trainable::Everything);
        let out = f(&mut ctx)?;
        let shape = ctx.value(out).shape().to_vec();
        let p = proj.get_or_insert_with(|| {
            let n: usize = shape.iter().product();
            Tensor::randn(&shape, 1.0 / (n as f64).sqrt(), &mut ChaCha8Rng::seed_from_u64(seed))
        });
        let loss = ctx.tape.dot_const(out, p)?;
        let (tape, _) = ctx.finish();
        Ok((tape, loss))
    })
}
