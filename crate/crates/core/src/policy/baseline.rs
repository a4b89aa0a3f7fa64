//! Single-step feed-forward baseline: current observation in, next action out.

use super::act::split_output;
use super::{check_obs, target_arrays, ChunkModel, OutputGrads, PolicyConfig, PolicyError, PolicyOutput, TrainOutputs};
use crate::action::{Observation, CONTINUOUS_DIM};
use crate::dataset::TrainingSample;
use crate::nn::{gelu, gelu_grad, Layout, LayoutBuilder, Linear, Real};

#[derive(Debug, Clone)]
pub struct BaselinePolicy<F: Real> {
    cfg: PolicyConfig,
    layout: Layout,
    l1: Linear,
    l2: Linear,
    l3: Linear,
    params: Vec<F>,
}

pub struct BaselineCache<F> {
    n: usize,
    x: Vec<F>,
    pre1: Vec<F>,
    act1: Vec<F>,
    pre2: Vec<F>,
    act2: Vec<F>,
}

impl<F: Real> BaselinePolicy<F> {
    pub fn new(cfg: PolicyConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let mut lb = LayoutBuilder::new();
        let input = cfg.input_feature_len() + CONTINUOUS_DIM;
        let l1 = Linear::build(&mut lb, "mlp.l1", input, cfg.width);
        let l2 = Linear::build(&mut lb, "mlp.l2", cfg.width, cfg.width);
        let l3 = Linear::build(&mut lb, "mlp.l3", cfg.width, cfg.step_outputs());
        let layout = lb.finish();
        let params = layout.init(cfg.seed);
        Ok(Self {
            cfg,
            layout,
            l1,
            l2,
            l3,
            params,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn set_params(&mut self, params: Vec<F>) -> Result<(), PolicyError> {
        if params.len() != self.params.len() {
            return Err(PolicyError::ShapeMismatch {
                what: "parameter vector",
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    fn input(&self, obs: &[&Observation]) -> Vec<F> {
        let mut x = Vec::with_capacity(obs.len() * self.l1.input);
        for o in obs {
            x.extend(o.feature.iter().map(|&v| F::of(v)));
            x.extend(o.device_state.iter().map(|&v| F::of(v)));
        }
        x
    }

    fn run(&self, x: Vec<F>, n: usize) -> (Vec<F>, BaselineCache<F>) {
        let p = &self.params;
        let pre1 = self.l1.forward(p, &x, n);
        let act1: Vec<F> = pre1.iter().map(|&v| gelu(v)).collect();
        let pre2 = self.l2.forward(p, &act1, n);
        let act2: Vec<F> = pre2.iter().map(|&v| gelu(v)).collect();
        let out = self.l3.forward(p, &act2, n);
        (
            out,
            BaselineCache {
                n,
                x,
                pre1,
                act1,
                pre2,
                act2,
            },
        )
    }
}

impl<F: Real> ChunkModel<F> for BaselinePolicy<F> {
    type Cache = BaselineCache<F>;

    fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    fn horizon(&self) -> usize {
        1
    }

    fn latent_dim(&self) -> usize {
        0
    }

    fn params(&self) -> &[F] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    fn forward_train(
        &self,
        batch: &[TrainingSample],
        eps: &[F],
    ) -> Result<(TrainOutputs<F>, BaselineCache<F>), PolicyError> {
        if !eps.is_empty() {
            return Err(PolicyError::ShapeMismatch {
                what: "latent noise",
                expected: 0,
                actual: eps.len(),
            });
        }
        for s in batch {
            check_obs(&self.cfg, &s.obs)?;
            target_arrays(s, 1, self.cfg.num_buttons)?;
        }
        let n = batch.len();
        let obs: Vec<&Observation> = batch.iter().map(|s| &s.obs).collect();
        let (out, cache) = self.run(self.input(&obs), n);
        let nb = self.cfg.num_buttons;
        let mut continuous = Vec::with_capacity(n * CONTINUOUS_DIM);
        let mut logits = Vec::with_capacity(n * nb);
        for row in out.chunks_exact(self.cfg.step_outputs()) {
            continuous.extend_from_slice(&row[..CONTINUOUS_DIM]);
            logits.extend_from_slice(&row[CONTINUOUS_DIM..]);
        }
        Ok((
            TrainOutputs {
                batch: n,
                horizon: 1,
                num_buttons: nb,
                continuous,
                logits,
                mu: Vec::new(),
                logvar: Vec::new(),
            },
            cache,
        ))
    }

    fn backward_train(&self, c: &BaselineCache<F>, grads: &OutputGrads<F>) -> Vec<F> {
        let p = &self.params;
        let mut g = vec![F::zero(); p.len()];
        let nb = self.cfg.num_buttons;
        let mut dout = Vec::with_capacity(c.n * self.cfg.step_outputs());
        for r in 0..c.n {
            dout.extend_from_slice(&grads.d_continuous[r * CONTINUOUS_DIM..(r + 1) * CONTINUOUS_DIM]);
            dout.extend_from_slice(&grads.d_logits[r * nb..(r + 1) * nb]);
        }
        let mut d2 = self.l3.backward(p, &c.act2, c.n, &dout, &mut g, true);
        for (d, &pre) in d2.iter_mut().zip(&c.pre2) {
            *d *= gelu_grad(pre);
        }
        let mut d1 = self.l2.backward(p, &c.act1, c.n, &d2, &mut g, true);
        for (d, &pre) in d1.iter_mut().zip(&c.pre1) {
            *d *= gelu_grad(pre);
        }
        self.l1.backward(p, &c.x, c.n, &d1, &mut g, false);
        g
    }

    fn predict(&self, obs: &Observation, len: usize) -> Result<PolicyOutput, PolicyError> {
        check_obs(&self.cfg, obs)?;
        if len != 1 {
            return Err(PolicyError::ShapeMismatch {
                what: "decode length",
                expected: 1,
                actual: len,
            });
        }
        let (out, _) = self.run(self.input(&[obs]), 1);
        Ok(split_output(obs.step, &out, 1, self.cfg.num_buttons))
    }

    fn to_blob(&self) -> Vec<u8> {
        super::blob::encode(super::blob::ModelKind::Baseline, &self.cfg, &self.params)
    }
}
