use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::{filled, he_normal};
use super::{ParamId, ParamStore};
use crate::autograd::{NormStats, Tape, Var};
use crate::error::Result;
use crate::real::Real;
use crate::sparse::KernelMap;

/// Training uses batch statistics; evaluation uses frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Batch,
    Instance,
}

impl std::str::FromStr for NormKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "instance" => Ok(Self::Instance),
            _ => Err(crate::error::Error::Parse(format!("unknown normalization `{s}`"))),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::Instance => "instance",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), he_normal(c_in, c_out, rng))?;
        let b = store.add(&format!("{name}.b"), filled(1, c_out, 0.0))?;
        Ok(Self { w, b: Some(b) })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel_size: usize,
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel_size: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let vol = kernel_size.pow(3);
        let w = store.add(&format!("{name}.w"), he_normal(vol * c_in, c_out, rng))?;
        let b = if bias { Some(store.add(&format!("{name}.b"), filled(1, c_out, 0.0))?) } else { None };
        Ok(Self { kernel_size, w, b })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, kmap: Arc<KernelMap>) -> Result<Var> {
        tape.conv(x, self.w, self.b, kmap)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, kind: NormKind) -> Result<Self> {
        Ok(Self {
            kind,
            gamma: store.add(&format!("{name}.gamma"), filled(1, c, 1.0))?,
            beta: store.add(&format!("{name}.beta"), filled(1, c, 0.0))?,
            mean: store.add_buffer(&format!("{name}.running_mean"), filled(1, c, 0.0))?,
            var: store.add_buffer(&format!("{name}.running_var"), filled(1, c, 1.0))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let stats = match (self.kind, mode) {
            (NormKind::Batch, Mode::Train) => NormStats::Batch { record: Some((self.mean, self.var)) },
            (NormKind::Batch, Mode::Eval) => NormStats::Running { mean: self.mean, var: self.var },
            (NormKind::Instance, _) => NormStats::Batch { record: None },
        };
        tape.norm(x, self.gamma, self.beta, stats)
    }
}

/// Folds recorded batch statistics into the running buffers.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[crate::autograd::NormStat], momentum: f64) {
    for s in stats {
        for (buf, vals) in [(s.mean_buffer, &s.mean), (s.var_buffer, &s.var)] {
            for (r, &v) in store.get_mut(buf).as_mut_slice().iter_mut().zip(vals.iter()) {
                *r = T::of((1.0 - momentum) * r.as_f64() + momentum * v);
            }
        }
    }
}
