//! Layer helpers that bind named parameters from a [`ParamStore`] onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tape::{BatchStats, NormMode};
use super::{ParamStore, Scalar, Tape, Tensor, Var};

/// Parameters of one GRU cell, already on a tape.
///
/// `w_*` are `[d_h, d_in]`, `u_*` are `[d_h, d_h]`, `b_*` are `[d_h]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_r: Var,
    pub w_z: Var,
    pub w_n: Var,
    pub u_r: Var,
    pub u_z: Var,
    pub u_n: Var,
    pub b_r: Var,
    pub b_z: Var,
    pub b_n: Var,
}

/// One GRU update with the reset gate inside the candidate's recurrent term:
///
/// ```text
/// r  = σ(W_r x + U_r h + b_r)
/// z  = σ(W_z x + U_z h + b_z)
/// ñ  = tanh(W_n x + r ⊙ (U_n h + b_n))
/// h' = (1 − z) ⊙ ñ + z ⊙ h
/// ```
///
/// `x` is `[B, d_in]` or `[d_in]`, `h` is `[B, d_h]` or `[d_h]`.
pub fn gru_cell<T: Scalar>(tape: &mut Tape<T>, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let vector = tape.shape(x).len() == 1;
    if vector != (tape.shape(h).len() == 1) {
        return Err(Error::dim(format!(
            "gru input {:?} and state {:?} disagree on batching",
            tape.shape(x),
            tape.shape(h)
        )));
    }
    let (x2, h2) = if vector {
        let (dx, dh) = (tape.shape(x)[0], tape.shape(h)[0]);
        (tape.reshape(x, &[1, dx])?, tape.reshape(h, &[1, dh])?)
    } else {
        (x, h)
    };
    let d_h = tape.shape(h2)[1];
    if tape.shape(p.u_r) != [d_h, d_h] {
        return Err(Error::dim(format!(
            "gru recurrent weight {:?} for hidden size {d_h}",
            tape.shape(p.u_r)
        )));
    }

    let xr = tape.linear(x2, p.w_r, Some(p.b_r))?;
    let hr = tape.linear(h2, p.u_r, None)?;
    let r_pre = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_pre);

    let xz = tape.linear(x2, p.w_z, Some(p.b_z))?;
    let hz = tape.linear(h2, p.u_z, None)?;
    let z_pre = tape.add(xz, hz)?;
    let z = tape.sigmoid(z_pre);

    let xn = tape.linear(x2, p.w_n, None)?;
    let hn = tape.linear(h2, p.u_n, Some(p.b_n))?;
    let gated = tape.mul(r, hn)?;
    let n_pre = tape.add(xn, gated)?;
    let n = tape.tanh(n_pre);

    // (1 - z) ⊙ n + z ⊙ h  ==  n + z ⊙ (h - n)
    let diff = tape.sub(h2, n)?;
    let zd = tape.mul(z, diff)?;
    let out = tape.add(n, zd)?;
    if vector {
        tape.reshape(out, &[d_h])
    } else {
        Ok(out)
    }
}

/// A tape plus the parameter store it reads from.
///
/// Each named parameter is placed on the tape once; `backward` maps the
/// resulting gradients back to names.
pub struct Graph<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    loaded: BTreeMap<String, Var>,
    train: bool,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            loaded: BTreeMap::new(),
            train,
            stats: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.loaded.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let v = self.tape.variable(t);
        self.loaded.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// `x · Wᵀ + b` using `{prefix}.w` and, if present, `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let bias_name = format!("{prefix}.b");
        let b = if self.store.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.tape.linear(x, w, b)
    }

    /// Batchnorm with `{prefix}.gamma/.beta`; eval mode reads
    /// `{prefix}.running_mean/.running_var`, train mode records batch statistics.
    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        if self.train {
            let (y, stats) = self.tape.batchnorm(x, gamma, beta, NormMode::Train)?;
            self.stats.push((prefix.to_string(), stats.expect("train mode yields stats")));
            Ok(y)
        } else {
            let mean = self.store.require(&format!("{prefix}.running_mean"))?;
            let var = self.store.require(&format!("{prefix}.running_var"))?;
            let (y, _) = self.tape.batchnorm(
                x,
                gamma,
                beta,
                NormMode::Eval {
                    mean: mean.data(),
                    var: var.data(),
                },
            )?;
            Ok(y)
        }
    }

    pub fn gru_vars(&mut self, prefix: &str) -> Result<GruVars> {
        let mut p = |s: &str| self.param(&format!("{prefix}.{s}"));
        Ok(GruVars {
            w_r: p("w_r")?,
            w_z: p("w_z")?,
            w_n: p("w_n")?,
            u_r: p("u_r")?,
            u_z: p("u_z")?,
            u_n: p("u_n")?,
            b_r: p("b_r")?,
            b_z: p("b_z")?,
            b_n: p("b_n")?,
        })
    }

    /// Batch statistics recorded by training-mode batchnorm layers, in call order.
    pub fn batch_stats(&self) -> &[(String, BatchStats<T>)] {
        &self.stats
    }

    /// Gradients of `loss` with respect to every parameter used, by name.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .loaded
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect())
    }
}

/// Fresh GRU parameters under `prefix`.
pub fn init_gru<T: Scalar, R: rand::Rng>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) {
    for gate in ["r", "z", "n"] {
        store.init_weight(&format!("{prefix}.w_{gate}"), &[d_h, d_in], d_in, d_h, rng);
        store.init_weight(&format!("{prefix}.u_{gate}"), &[d_h, d_h], d_h, d_h, rng);
        store.init_zeros(&format!("{prefix}.b_{gate}"), &[d_h]);
    }
}

/// Folds batch statistics into running averages:
/// `running <- momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<T: Scalar>(
    store: &mut ParamStore<T>,
    stats: &[(String, BatchStats<T>)],
    momentum: f64,
) -> Result<()> {
    let m = T::of(momentum);
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{prefix}.{suffix}");
            let run = store
                .get_mut(&name)
                .ok_or_else(|| Error::Contract(format!("missing buffer {name:?}")))?;
            for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                *r = m * *r + (T::one() - m) * b;
            }
        }
    }
    Ok(())
}
