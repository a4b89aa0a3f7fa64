//! Transformer encoder–decoder chunk policy with a CVAE posterior.
//!
//! Encoder tokens per sample: `[latent, device state, obs tokens...]`, each
//! with a sinusoidal position code added. Decoder queries are the position
//! codes of the `H` output steps; decoder self-attention is causal so a
//! prefix of `len ≤ H` steps can be decoded on its own.

use super::{
    check_obs, target_arrays, ChunkModel, LatentDist, OutputGrads, PolicyConfig, PolicyError, PolicyOutput,
    TrainOutputs, LOGVAR_MAX, LOGVAR_MIN,
};
use crate::action::{Observation, CONTINUOUS_DIM};
use crate::dataset::TrainingSample;
use crate::nn::{
    add_into, gelu, gelu_grad, sinusoid, Attention, AttnCache, FeedForward, FfnCache, LayerNorm, Layout, LayoutBuilder,
    Linear, LnCache, Real,
};

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Arch {
    obs_proj: Linear,
    state_proj: Linear,
    latent_proj: Linear,
    enc: Vec<EncLayer>,
    enc_norm: LayerNorm,
    dec: Vec<DecLayer>,
    dec_norm: LayerNorm,
    head: Linear,
    post_hidden: Linear,
    post_out: Linear,
}

fn build_arch(cfg: &PolicyConfig) -> (Arch, Layout) {
    let w = cfg.width;
    let mut lb = LayoutBuilder::new();
    let obs_proj = Linear::build(&mut lb, "obs_proj", cfg.obs_token_dim, w);
    let state_proj = Linear::build(&mut lb, "state_proj", CONTINUOUS_DIM, w);
    let latent_proj = Linear::build(&mut lb, "latent_proj", cfg.latent_dim, w);
    let enc = (0..cfg.enc_layers)
        .map(|i| {
            lb.push_scope(format!("enc{i}"));
            let l = EncLayer {
                ln1: LayerNorm::build(&mut lb, "ln1", w),
                attn: Attention::build(&mut lb, "attn", w, cfg.heads, false),
                ln2: LayerNorm::build(&mut lb, "ln2", w),
                ffn: FeedForward::build(&mut lb, "ffn", w, cfg.ffn_hidden),
            };
            lb.pop_scope();
            l
        })
        .collect();
    let enc_norm = LayerNorm::build(&mut lb, "enc_norm", w);
    let dec = (0..cfg.dec_layers)
        .map(|i| {
            lb.push_scope(format!("dec{i}"));
            let l = DecLayer {
                ln1: LayerNorm::build(&mut lb, "ln1", w),
                self_attn: Attention::build(&mut lb, "self_attn", w, cfg.heads, true),
                ln2: LayerNorm::build(&mut lb, "ln2", w),
                cross: Attention::build(&mut lb, "cross_attn", w, cfg.heads, false),
                ln3: LayerNorm::build(&mut lb, "ln3", w),
                ffn: FeedForward::build(&mut lb, "ffn", w, cfg.ffn_hidden),
            };
            lb.pop_scope();
            l
        })
        .collect();
    let dec_norm = LayerNorm::build(&mut lb, "dec_norm", w);
    let head = Linear::build(&mut lb, "head", w, cfg.step_outputs());
    let post_in = cfg.input_feature_len() + CONTINUOUS_DIM + cfg.horizon * cfg.step_outputs();
    let post_hidden = Linear::build(&mut lb, "posterior.hidden", post_in, w);
    let post_out = Linear::build(&mut lb, "posterior.out", w, 2 * cfg.latent_dim);
    let arch = Arch {
        obs_proj,
        state_proj,
        latent_proj,
        enc,
        enc_norm,
        dec,
        dec_norm,
        head,
        post_hidden,
        post_out,
    };
    (arch, lb.finish())
}

struct EncLayerCache<F> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    ln2: LnCache<F>,
    ffn: FfnCache<F>,
}

struct DecLayerCache<F> {
    ln1: LnCache<F>,
    self_attn: AttnCache<F>,
    ln2: LnCache<F>,
    cross: AttnCache<F>,
    ln3: LnCache<F>,
    ffn: FfnCache<F>,
}

struct EncodeCache<F> {
    n: usize,
    obs_tokens: Vec<F>,
    state: Vec<F>,
    z: Vec<F>,
    layers: Vec<EncLayerCache<F>>,
    norm: LnCache<F>,
}

struct DecodeCache<F> {
    n: usize,
    len: usize,
    layers: Vec<DecLayerCache<F>>,
    norm: LnCache<F>,
    normed: Vec<F>,
}

struct PosteriorCache<F> {
    x: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
    raw_logvar: Vec<F>,
    logvar: Vec<F>,
    eps: Vec<F>,
}

/// Saved activations of a training forward pass.
pub struct ActCache<F> {
    posterior: PosteriorCache<F>,
    encode: EncodeCache<F>,
    decode: DecodeCache<F>,
}

/// The chunking policy. Parameters are held in one flat vector.
#[derive(Debug, Clone)]
pub struct ActPolicy<F: Real> {
    cfg: PolicyConfig,
    layout: Layout,
    arch: Arch,
    params: Vec<F>,
}

impl<F: Real> ActPolicy<F> {
    pub fn new(cfg: PolicyConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let (arch, layout) = build_arch(&cfg);
        let params = layout.init(cfg.seed);
        Ok(Self {
            cfg,
            layout,
            arch,
            params,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
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

    /// Converts to another precision (parameters are cast value by value).
    pub fn cast<G: Real>(&self) -> ActPolicy<G> {
        ActPolicy {
            cfg: self.cfg,
            layout: self.layout.clone(),
            arch: self.arch.clone(),
            params: self.params.iter().map(|v| G::of(v.to_f())).collect(),
        }
    }

    fn obs_inputs(&self, obs: &[&Observation]) -> (Vec<F>, Vec<F>) {
        let k = self.cfg.obs_tokens();
        let td = self.cfg.obs_token_dim;
        let mut tokens = vec![F::zero(); obs.len() * k * td];
        let mut state = Vec::with_capacity(obs.len() * CONTINUOUS_DIM);
        for (b, o) in obs.iter().enumerate() {
            let dst = &mut tokens[b * k * td..(b + 1) * k * td];
            for (d, &v) in dst.iter_mut().zip(&o.feature) {
                *d = F::of(v);
            }
            state.extend(o.device_state.iter().map(|&v| F::of(v)));
        }
        (tokens, state)
    }

    fn encode(&self, obs_tokens: Vec<F>, state: Vec<F>, z: Vec<F>, n: usize) -> (Vec<F>, EncodeCache<F>) {
        let p = &self.params;
        let a = &self.arch;
        let w = self.cfg.width;
        let k = self.cfg.obs_tokens();
        let te = k + 2;
        let lat = a.latent_proj.forward(p, &z, n);
        let st = a.state_proj.forward(p, &state, n);
        let ob = a.obs_proj.forward(p, &obs_tokens, n * k);
        let mut x = vec![F::zero(); n * te * w];
        for b in 0..n {
            let base = b * te * w;
            x[base..base + w].copy_from_slice(&lat[b * w..(b + 1) * w]);
            x[base + w..base + 2 * w].copy_from_slice(&st[b * w..(b + 1) * w]);
            x[base + 2 * w..base + te * w].copy_from_slice(&ob[b * k * w..(b + 1) * k * w]);
            for t in 0..te {
                add_into(&mut x[base + t * w..base + (t + 1) * w], &sinusoid::<F>(t, w));
            }
        }
        let mut layers = Vec::with_capacity(a.enc.len());
        for l in &a.enc {
            let (h, ln1) = l.ln1.forward(p, &x);
            let (att, attn) = l.attn.forward(p, &h, &h, n, te, te);
            add_into(&mut x, &att);
            let (h2, ln2) = l.ln2.forward(p, &x);
            let (f, ffn) = l.ffn.forward(p, &h2, n * te);
            add_into(&mut x, &f);
            layers.push(EncLayerCache { ln1, attn, ln2, ffn });
        }
        let (mem, norm) = a.enc_norm.forward(p, &x);
        (
            mem,
            EncodeCache {
                n,
                obs_tokens,
                state,
                z,
                layers,
                norm,
            },
        )
    }

    /// Returns `dL/dz` and accumulates encoder gradients.
    fn encode_backward(&self, c: &EncodeCache<F>, dmem: &[F], g: &mut [F]) -> Vec<F> {
        let p = &self.params;
        let a = &self.arch;
        let w = self.cfg.width;
        let k = self.cfg.obs_tokens();
        let te = k + 2;
        let n = c.n;
        let mut dx = a.enc_norm.backward(p, &c.norm, dmem, g);
        for (l, lc) in a.enc.iter().zip(&c.layers).rev() {
            let dh2 = l.ffn.backward(p, &lc.ffn, &dx, g);
            add_into(&mut dx, &l.ln2.backward(p, &lc.ln2, &dh2, g));
            let (mut dq, dkv) = l.attn.backward(p, &lc.attn, &dx, g);
            add_into(&mut dq, &dkv);
            add_into(&mut dx, &l.ln1.backward(p, &lc.ln1, &dq, g));
        }
        let mut dlat = vec![F::zero(); n * w];
        let mut dst = vec![F::zero(); n * w];
        let mut dob = vec![F::zero(); n * k * w];
        for b in 0..n {
            let base = b * te * w;
            dlat[b * w..(b + 1) * w].copy_from_slice(&dx[base..base + w]);
            dst[b * w..(b + 1) * w].copy_from_slice(&dx[base + w..base + 2 * w]);
            dob[b * k * w..(b + 1) * k * w].copy_from_slice(&dx[base + 2 * w..base + te * w]);
        }
        a.obs_proj.backward(p, &c.obs_tokens, n * k, &dob, g, false);
        a.state_proj.backward(p, &c.state, n, &dst, g, false);
        a.latent_proj.backward(p, &c.z, n, &dlat, g, true)
    }

    fn decode(&self, mem: &[F], n: usize, len: usize) -> (Vec<F>, DecodeCache<F>) {
        let p = &self.params;
        let a = &self.arch;
        let w = self.cfg.width;
        let te = self.cfg.obs_tokens() + 2;
        let mut y = Vec::with_capacity(n * len * w);
        for _ in 0..n {
            for t in 0..len {
                y.extend(sinusoid::<F>(t, w));
            }
        }
        let mut layers = Vec::with_capacity(a.dec.len());
        for l in &a.dec {
            let (h, ln1) = l.ln1.forward(p, &y);
            let (sa, self_attn) = l.self_attn.forward(p, &h, &h, n, len, len);
            add_into(&mut y, &sa);
            let (h2, ln2) = l.ln2.forward(p, &y);
            let (ca, cross) = l.cross.forward(p, &h2, mem, n, len, te);
            add_into(&mut y, &ca);
            let (h3, ln3) = l.ln3.forward(p, &y);
            let (f, ffn) = l.ffn.forward(p, &h3, n * len);
            add_into(&mut y, &f);
            layers.push(DecLayerCache {
                ln1,
                self_attn,
                ln2,
                cross,
                ln3,
                ffn,
            });
        }
        let (normed, norm) = a.dec_norm.forward(p, &y);
        let out = a.head.forward(p, &normed, n * len);
        (
            out,
            DecodeCache {
                n,
                len,
                layers,
                norm,
                normed,
            },
        )
    }

    /// Returns `dL/dmemory` and accumulates decoder gradients.
    fn decode_backward(&self, c: &DecodeCache<F>, dout: &[F], g: &mut [F]) -> Vec<F> {
        let p = &self.params;
        let a = &self.arch;
        let te = self.cfg.obs_tokens() + 2;
        let rows = c.n * c.len;
        let dnormed = a.head.backward(p, &c.normed, rows, dout, g, true);
        let mut dy = a.dec_norm.backward(p, &c.norm, &dnormed, g);
        let mut dmem = vec![F::zero(); c.n * te * self.cfg.width];
        for (l, lc) in a.dec.iter().zip(&c.layers).rev() {
            let dh3 = l.ffn.backward(p, &lc.ffn, &dy, g);
            add_into(&mut dy, &l.ln3.backward(p, &lc.ln3, &dh3, g));
            let (dq, dkv) = l.cross.backward(p, &lc.cross, &dy, g);
            add_into(&mut dmem, &dkv);
            add_into(&mut dy, &l.ln2.backward(p, &lc.ln2, &dq, g));
            let (mut dq, dkv) = l.self_attn.backward(p, &lc.self_attn, &dy, g);
            add_into(&mut dq, &dkv);
            add_into(&mut dy, &l.ln1.backward(p, &lc.ln1, &dq, g));
        }
        dmem
    }

    fn posterior_input(&self, obs: &Observation, target_cont: &[f64], target_bools: &[f64]) -> Vec<F> {
        let h = self.cfg.horizon;
        let b = self.cfg.num_buttons;
        let mut x = Vec::with_capacity(self.arch.post_hidden.input);
        x.extend(obs.feature.iter().map(|&v| F::of(v)));
        x.extend(obs.device_state.iter().map(|&v| F::of(v)));
        for t in 0..h {
            x.extend(
                target_cont[t * CONTINUOUS_DIM..(t + 1) * CONTINUOUS_DIM]
                    .iter()
                    .map(|&v| F::of(v)),
            );
            x.extend(target_bools[t * b..(t + 1) * b].iter().map(|&v| F::of(v)));
        }
        x
    }

    /// `(pre, act, mu, raw_logvar, clamped_logvar)` for posterior inputs `x`.
    #[allow(clippy::type_complexity)]
    fn posterior_forward(&self, x: &[F], n: usize) -> (Vec<F>, Vec<F>, Vec<F>, Vec<F>, Vec<F>) {
        let p = &self.params;
        let zd = self.cfg.latent_dim;
        let pre = self.arch.post_hidden.forward(p, x, n);
        let act: Vec<F> = pre.iter().map(|&v| gelu(v)).collect();
        let out = self.arch.post_out.forward(p, &act, n);
        let mut mu = Vec::with_capacity(n * zd);
        let mut raw = Vec::with_capacity(n * zd);
        for row in out.chunks_exact(2 * zd) {
            mu.extend_from_slice(&row[..zd]);
            raw.extend_from_slice(&row[zd..]);
        }
        let lv = raw
            .iter()
            .map(|&v| v.max(F::of(LOGVAR_MIN)).min(F::of(LOGVAR_MAX)))
            .collect();
        (pre, act, mu, raw, lv)
    }

    /// Posterior `q(z | observation, target chunk)`.
    pub fn encode_posterior(
        &self,
        obs: &Observation,
        target: &crate::action::ActionChunk,
    ) -> Result<LatentDist, PolicyError> {
        check_obs(&self.cfg, obs)?;
        if target.frames.len() != self.cfg.horizon {
            return Err(PolicyError::ShapeMismatch {
                what: "target chunk length",
                expected: self.cfg.horizon,
                actual: target.frames.len(),
            });
        }
        let sample = TrainingSample {
            episode: 0,
            step: 0,
            obs: obs.clone(),
            target: target.clone(),
        };
        let (cont, bools) = target_arrays(&sample, self.cfg.horizon, self.cfg.num_buttons)?;
        let x = self.posterior_input(obs, &cont, &bools);
        let (_, _, mu, _, lv) = self.posterior_forward(&x, 1);
        Ok(LatentDist {
            mu: mu.iter().map(|v| v.to_f()).collect(),
            logvar: lv.iter().map(|v| v.to_f()).collect(),
        })
    }

    /// Decodes `len ≤ H` steps for observation `obs` and latent `z`.
    pub fn predict_with_latent(&self, obs: &Observation, z: &[f64], len: usize) -> Result<PolicyOutput, PolicyError> {
        check_obs(&self.cfg, obs)?;
        if z.len() != self.cfg.latent_dim {
            return Err(PolicyError::ShapeMismatch {
                what: "latent",
                expected: self.cfg.latent_dim,
                actual: z.len(),
            });
        }
        if len == 0 || len > self.cfg.horizon {
            return Err(PolicyError::ShapeMismatch {
                what: "decode length",
                expected: self.cfg.horizon,
                actual: len,
            });
        }
        let (tokens, state) = self.obs_inputs(&[obs]);
        let zf = z.iter().map(|&v| F::of(v)).collect();
        let (mem, _) = self.encode(tokens, state, zf, 1);
        let (out, _) = self.decode(&mem, 1, len);
        Ok(split_output(obs.step, &out, len, self.cfg.num_buttons))
    }

    /// Full-horizon prediction.
    pub fn predict_chunk(&self, obs: &Observation, z: &[f64]) -> Result<PolicyOutput, PolicyError> {
        self.predict_with_latent(obs, z, self.cfg.horizon)
    }
}

pub(crate) fn split_output<F: Real>(start_step: u64, out: &[F], len: usize, buttons: usize) -> PolicyOutput {
    let stride = CONTINUOUS_DIM + buttons;
    let mut continuous = Vec::with_capacity(len);
    let mut bool_logits = Vec::with_capacity(len);
    for row in out.chunks_exact(stride).take(len) {
        let mut c = [0.0; CONTINUOUS_DIM];
        for (d, s) in c.iter_mut().zip(row) {
            *d = s.to_f();
        }
        continuous.push(c);
        bool_logits.push(row[CONTINUOUS_DIM..].iter().map(|v| v.to_f()).collect());
    }
    PolicyOutput {
        start_step,
        continuous,
        bool_logits,
    }
}

impl<F: Real> ChunkModel<F> for ActPolicy<F> {
    type Cache = ActCache<F>;

    fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
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
    ) -> Result<(TrainOutputs<F>, ActCache<F>), PolicyError> {
        let n = batch.len();
        let h = self.cfg.horizon;
        let nb = self.cfg.num_buttons;
        let zd = self.cfg.latent_dim;
        if eps.len() != n * zd {
            return Err(PolicyError::ShapeMismatch {
                what: "latent noise",
                expected: n * zd,
                actual: eps.len(),
            });
        }
        let mut post_x = Vec::with_capacity(n * self.arch.post_hidden.input);
        for s in batch {
            check_obs(&self.cfg, &s.obs)?;
            let (cont, bools) = target_arrays(s, h, nb)?;
            post_x.extend(self.posterior_input(&s.obs, &cont, &bools));
        }
        let (pre, act, mu, raw_logvar, logvar) = self.posterior_forward(&post_x, n);
        let half = F::of(0.5);
        let z: Vec<F> = (0..n * zd).map(|i| mu[i] + (half * logvar[i]).exp() * eps[i]).collect();

        let obs: Vec<&Observation> = batch.iter().map(|s| &s.obs).collect();
        let (tokens, state) = self.obs_inputs(&obs);
        let (mem, encode) = self.encode(tokens, state, z, n);
        let (out, decode) = self.decode(&mem, n, h);

        let stride = self.cfg.step_outputs();
        let mut continuous = Vec::with_capacity(n * h * CONTINUOUS_DIM);
        let mut logits = Vec::with_capacity(n * h * nb);
        for row in out.chunks_exact(stride) {
            continuous.extend_from_slice(&row[..CONTINUOUS_DIM]);
            logits.extend_from_slice(&row[CONTINUOUS_DIM..]);
        }
        Ok((
            TrainOutputs {
                batch: n,
                horizon: h,
                num_buttons: nb,
                continuous,
                logits,
                mu,
                logvar: logvar.clone(),
            },
            ActCache {
                posterior: PosteriorCache {
                    x: post_x,
                    pre,
                    act,
                    raw_logvar,
                    logvar,
                    eps: eps.to_vec(),
                },
                encode,
                decode,
            },
        ))
    }

    fn backward_train(&self, c: &ActCache<F>, grads: &OutputGrads<F>) -> Vec<F> {
        let p = &self.params;
        let mut g = vec![F::zero(); p.len()];
        let n = c.decode.n;
        let h = c.decode.len;
        let nb = self.cfg.num_buttons;
        let zd = self.cfg.latent_dim;
        let stride = self.cfg.step_outputs();
        let mut dout = Vec::with_capacity(n * h * stride);
        for r in 0..n * h {
            dout.extend_from_slice(&grads.d_continuous[r * CONTINUOUS_DIM..(r + 1) * CONTINUOUS_DIM]);
            dout.extend_from_slice(&grads.d_logits[r * nb..(r + 1) * nb]);
        }
        let dmem = self.decode_backward(&c.decode, &dout, &mut g);
        let dz = self.encode_backward(&c.encode, &dmem, &mut g);

        // z = mu + exp(lv / 2)·eps, lv = clamp(raw).
        let pc = &c.posterior;
        let half = F::of(0.5);
        let mut dpost = vec![F::zero(); n * 2 * zd];
        for b in 0..n {
            for j in 0..zd {
                let i = b * zd + j;
                let dmu = dz[i] + grads.d_mu[i];
                let dlv = dz[i] * half * (half * pc.logvar[i]).exp() * pc.eps[i] + grads.d_logvar[i];
                let raw = pc.raw_logvar[i];
                let inside = raw >= F::of(LOGVAR_MIN) && raw <= F::of(LOGVAR_MAX);
                dpost[b * 2 * zd + j] = dmu;
                dpost[b * 2 * zd + zd + j] = if inside { dlv } else { F::zero() };
            }
        }
        let mut dact = self.arch.post_out.backward(p, &pc.act, n, &dpost, &mut g, true);
        for (d, &pre) in dact.iter_mut().zip(&pc.pre) {
            *d *= gelu_grad(pre);
        }
        self.arch.post_hidden.backward(p, &pc.x, n, &dact, &mut g, false);
        g
    }

    fn predict(&self, obs: &Observation, len: usize) -> Result<PolicyOutput, PolicyError> {
        self.predict_with_latent(obs, &vec![0.0; self.cfg.latent_dim], len)
    }

    fn to_blob(&self) -> Vec<u8> {
        super::blob::encode(super::blob::ModelKind::Chunked, &self.cfg, &self.params)
    }
}
