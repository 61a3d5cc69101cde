//! Parameter handles for the small set of layers shared by encoder, decoder
//! and heads.

use rand::Rng;

use crate::autodiff::{AttnSpec, Graph, Var};
use crate::error::Result;
use crate::float::Real;
use crate::params::{ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        w_name: String,
        b_name: Option<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Linear {
        let w = store.linear_weight(w_name, fan_in, fan_out, rng);
        let b = b_name.map(|n| store.zeros(n, 1, fan_out));
        Linear { w, b }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, w_name: &str, b_name: Option<&str>) -> Result<Linear> {
        Ok(Linear { w: store.require(w_name)?, b: b_name.map(|n| store.require(n)).transpose()? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Norm {
        Norm { gain: store.ones(format!("{prefix}.g"), 1, dim), bias: store.zeros(format!("{prefix}.b"), 1, dim) }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Norm> {
        Ok(Norm { gain: store.require(&format!("{prefix}.g"))?, bias: store.require(&format!("{prefix}.b"))? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias, T::c(LN_EPS))
    }
}

/// Multi-head attention with bias-free Q/K/V projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl Attention {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut impl Rng) -> Attention {
        let mut lin = |n: &str, bias: bool| {
            Linear::init(store, format!("{prefix}.w{n}"), bias.then(|| format!("{prefix}.b{n}")), dim, dim, rng)
        };
        Attention { wq: lin("q", false), wk: lin("k", false), wv: lin("v", false), wo: lin("o", true) }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Attention> {
        let lin = |n: &str, bias: bool| {
            Linear::bind(store, &format!("{prefix}.w{n}"), bias.then(|| format!("{prefix}.b{n}")).as_deref())
        };
        Ok(Attention { wq: lin("q", false)?, wk: lin("k", false)?, wv: lin("v", false)?, wo: lin("o", true)? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, xq: Var, xkv: Var, spec: AttnSpec) -> Var {
        let q = self.wq.forward(g, store, xq);
        let k = self.wk.forward(g, store, xkv);
        let v = self.wv.forward(g, store, xkv);
        let a = g.attention(q, k, v, spec);
        self.wo.forward(g, store, a)
    }
}

/// Two-layer perceptron with a GELU between, named `{prefix}.{w1,b1,w2,b2}`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Mlp {
        let (din, hidden, dout) = dims;
        Mlp {
            fc1: Linear::init(store, format!("{prefix}.w1"), Some(format!("{prefix}.b1")), din, hidden, rng),
            fc2: Linear::init(store, format!("{prefix}.w2"), Some(format!("{prefix}.b2")), hidden, dout, rng),
        }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Mlp> {
        Ok(Mlp {
            fc1: Linear::bind(store, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?,
            fc2: Linear::bind(store, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}
