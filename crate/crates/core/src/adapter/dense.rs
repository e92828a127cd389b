//! Monolithic dense FFN adapter: LN -> linear -> SiLU -> linear -> LN,
//! applied identically to every token.

use rand_chacha::ChaCha8Rng;

use super::{fan_in_bound, init_linear, AdapterConfig, Slots};
use crate::error::Result;
use crate::kernels::{LayerNormParams, LinearParams};
use crate::scalar::Scalar;
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseAdapter<T> {
    pub config: AdapterConfig,
    pub ln_in: LayerNormParams<T>,
    pub w1: LinearParams<T>,
    pub w2: LinearParams<T>,
    pub ln_out: LayerNormParams<T>,
}

impl<T: Scalar> DenseAdapter<T> {
    pub(super) fn init(cfg: &AdapterConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.input_dim;
        let h = cfg.dense_hidden;
        let eps = T::from_f64(cfg.ln_epsilon);
        DenseAdapter {
            config: cfg.clone(),
            ln_in: LayerNormParams::identity(d, eps),
            w1: init_linear(rng, h, d, cfg.use_bias, fan_in_bound(d)),
            w2: init_linear(rng, d, h, cfg.use_bias, fan_in_bound(h)),
            ln_out: LayerNormParams::identity(d, eps),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("ln_in.gamma".to_string(), &self.ln_in.gamma),
            ("ln_in.beta".to_string(), &self.ln_in.beta),
            ("w1.weight".to_string(), &self.w1.weight),
        ];
        if let Some(b) = &self.w1.bias {
            out.push(("w1.bias".to_string(), b));
        }
        out.push(("w2.weight".to_string(), &self.w2.weight));
        if let Some(b) = &self.w2.bias {
            out.push(("w2.bias".to_string(), b));
        }
        out.push(("ln_out.gamma".to_string(), &self.ln_out.gamma));
        out.push(("ln_out.beta".to_string(), &self.ln_out.beta));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("ln_in.gamma".to_string(), &mut self.ln_in.gamma),
            ("ln_in.beta".to_string(), &mut self.ln_in.beta),
            ("w1.weight".to_string(), &mut self.w1.weight),
        ];
        if let Some(b) = &mut self.w1.bias {
            out.push(("w1.bias".to_string(), b));
        }
        out.push(("w2.weight".to_string(), &mut self.w2.weight));
        if let Some(b) = &mut self.w2.bias {
            out.push(("w2.bias".to_string(), b));
        }
        out.push(("ln_out.gamma".to_string(), &mut self.ln_out.gamma));
        out.push(("ln_out.beta".to_string(), &mut self.ln_out.beta));
        out
    }

    /// Slot consumption must mirror `named_params` exactly.
    pub(super) fn forward_tape(
        &self,
        tape: &mut GradTape<T>,
        slots: &mut Slots<'_>,
        x: NodeId,
    ) -> Result<NodeId> {
        let eps = self.ln_in.epsilon;
        let (g_in, b_in) = (slots.next(), slots.next());
        let w1 = slots.next();
        let b1 = self.w1.bias.as_ref().map(|_| slots.next());
        let w2 = slots.next();
        let b2 = self.w2.bias.as_ref().map(|_| slots.next());
        let (g_out, b_out) = (slots.next(), slots.next());

        let h = tape.layer_norm(x, g_in, b_in, eps)?;
        let h = tape.linear(h, w1, b1)?;
        let h = tape.silu(h)?;
        let h = tape.linear(h, w2, b2)?;
        tape.layer_norm(h, g_out, b_out, self.ln_out.epsilon)
    }

    /// Plain batched forward.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        use crate::kernels;
        let h = kernels::layer_norm(x, &self.ln_in)?;
        let h = kernels::linear(&h, &self.w1)?;
        let h = kernels::silu(&h)?;
        let h = kernels::linear(&h, &self.w2)?;
        kernels::layer_norm(&h, &self.ln_out)
    }
}
