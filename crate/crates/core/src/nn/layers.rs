use super::{gelu, gelu_grad, gemm, Init, LayoutBuilder, MatMut, MatRef, Real, Slot};

const LN_EPS: f64 = 1e-5;

/// Affine map `y = x·W + b` with `W` stored as `input × output`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn build(lb: &mut LayoutBuilder, name: &str, input: usize, output: usize) -> Self {
        lb.push_scope(name);
        let w = lb.add("w", input, output, Init::FanIn(input));
        let b = lb.add("b", 1, output, Init::FanIn(input));
        lb.pop_scope();
        Self { w, b, input, output }
    }

    pub fn num_params(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &[F], n: usize) -> Vec<F> {
        assert_eq!(x.len(), n * self.input, "linear input shape");
        let bias = self.b.of(p);
        let mut y = Vec::with_capacity(n * self.output);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        gemm(
            F::one(),
            MatRef::new(x, n, self.input),
            MatRef::new(self.w.of(p), self.input, self.output),
            F::one(),
            MatMut::new(&mut y, n, self.output),
        );
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx` when
    /// `need_dx` is set (otherwise an empty vector).
    pub fn backward<F: Real>(&self, p: &[F], x: &[F], n: usize, dy: &[F], g: &mut [F], need_dx: bool) -> Vec<F> {
        assert_eq!(dy.len(), n * self.output, "linear grad shape");
        gemm(
            F::one(),
            MatRef::new(x, n, self.input).t(),
            MatRef::new(dy, n, self.output),
            F::one(),
            MatMut::new(self.w.of_mut(g), self.input, self.output),
        );
        let gb = self.b.of_mut(g);
        for row in dy.chunks_exact(self.output) {
            for (acc, d) in gb.iter_mut().zip(row) {
                *acc += *d;
            }
        }
        if !need_dx {
            return Vec::new();
        }
        let mut dx = vec![F::zero(); n * self.input];
        gemm(
            F::one(),
            MatRef::new(dy, n, self.output),
            MatRef::new(self.w.of(p), self.input, self.output).t(),
            F::zero(),
            MatMut::new(&mut dx, n, self.input),
        );
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: Slot,
    pub bias: Slot,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LnCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

impl LayerNorm {
    pub fn build(lb: &mut LayoutBuilder, name: &str, dim: usize) -> Self {
        lb.push_scope(name);
        let gain = lb.add("gain", 1, dim, Init::Const(1.0));
        let bias = lb.add("bias", 1, dim, Init::Const(0.0));
        lb.pop_scope();
        Self { gain, bias, dim }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &[F]) -> (Vec<F>, LnCache<F>) {
        let d = self.dim;
        let n = x.len() / d;
        let gain = self.gain.of(p);
        let bias = self.bias.of(p);
        let inv_d = F::one() / F::of(d as f64);
        let mut y = vec![F::zero(); x.len()];
        let mut xhat = vec![F::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv = F::one() / (var + F::of(LN_EPS)).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                y[r * d + c] = gain[c] * h + bias[c];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward<F: Real>(&self, p: &[F], cache: &LnCache<F>, dy: &[F], g: &mut [F]) -> Vec<F> {
        let d = self.dim;
        let n = dy.len() / d;
        let gain = self.gain.of(p);
        let inv_d = F::one() / F::of(d as f64);
        let mut dx = vec![F::zero(); dy.len()];
        let mut dgain = vec![F::zero(); d];
        let mut dbias = vec![F::zero(); d];
        for r in 0..n {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut mean_dxh = F::zero();
            let mut mean_dxh_xh = F::zero();
            for c in 0..d {
                dgain[c] += dyr[c] * xh[c];
                dbias[c] += dyr[c];
                let dxh = dyr[c] * gain[c];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[c];
            }
            mean_dxh *= inv_d;
            mean_dxh_xh *= inv_d;
            let inv = cache.inv_std[r];
            for c in 0..d {
                let dxh = dyr[c] * gain[c];
                dx[r * d + c] = inv * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
            }
        }
        for (a, v) in self.gain.of_mut(g).iter_mut().zip(&dgain) {
            *a += *v;
        }
        for (a, v) in self.bias.of_mut(g).iter_mut().zip(&dbias) {
            *a += *v;
        }
        dx
    }
}

/// Two-layer position-wise MLP with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, Default)]
pub struct FfnCache<F> {
    x: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
    n: usize,
}

impl FeedForward {
    pub fn build(lb: &mut LayoutBuilder, name: &str, dim: usize, hidden: usize) -> Self {
        lb.push_scope(name);
        let up = Linear::build(lb, "up", dim, hidden);
        let down = Linear::build(lb, "down", hidden, dim);
        lb.pop_scope();
        Self { up, down }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &[F], n: usize) -> (Vec<F>, FfnCache<F>) {
        let pre = self.up.forward(p, x, n);
        let act: Vec<F> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.down.forward(p, &act, n);
        (
            y,
            FfnCache {
                x: x.to_vec(),
                pre,
                act,
                n,
            },
        )
    }

    pub fn backward<F: Real>(&self, p: &[F], c: &FfnCache<F>, dy: &[F], g: &mut [F]) -> Vec<F> {
        let mut da = self.down.backward(p, &c.act, c.n, dy, g, true);
        for (d, &pre) in da.iter_mut().zip(&c.pre) {
            *d *= gelu_grad(pre);
        }
        self.up.backward(p, &c.x, c.n, &da, g, true)
    }
}

/// Multi-head scaled dot-product attention over a batch of sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
    pub causal: bool,
}

#[derive(Debug, Clone, Default)]
pub struct AttnCache<F> {
    xq: Vec<F>,
    xkv: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    mixed: Vec<F>,
    batch: usize,
    tq: usize,
    tk: usize,
}

impl Attention {
    pub fn build(lb: &mut LayoutBuilder, name: &str, dim: usize, heads: usize, causal: bool) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width must divide into heads");
        lb.push_scope(name);
        let q = Linear::build(lb, "q", dim, dim);
        let k = Linear::build(lb, "k", dim, dim);
        let v = Linear::build(lb, "v", dim, dim);
        let o = Linear::build(lb, "o", dim, dim);
        lb.pop_scope();
        Self {
            q,
            k,
            v,
            o,
            heads,
            dim,
            causal,
        }
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim)
    }

    /// `xq` holds `batch·tq` query rows and `xkv` holds `batch·tk` key/value
    /// rows; sequence `b` occupies a contiguous block of each.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        p: &[F],
        xq: &[F],
        xkv: &[F],
        batch: usize,
        tq: usize,
        tk: usize,
    ) -> (Vec<F>, AttnCache<F>) {
        let w = self.dim;
        let hd = w / self.heads;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let q = self.q.forward(p, xq, batch * tq);
        let k = self.k.forward(p, xkv, batch * tk);
        let v = self.v.forward(p, xkv, batch * tk);
        let mut probs = vec![F::zero(); batch * self.heads * tq * tk];
        let mut mixed = vec![F::zero(); batch * tq * w];
        for b in 0..batch {
            for h in 0..self.heads {
                let block = (b * self.heads + h) * tq * tk;
                let pr = &mut probs[block..block + tq * tk];
                gemm(
                    scale,
                    MatRef::new(&q, batch * tq, w).rows(b * tq, tq).cols(h * hd, hd),
                    MatRef::new(&k, batch * tk, w).rows(b * tk, tk).cols(h * hd, hd).t(),
                    F::zero(),
                    MatMut::new(pr, tq, tk),
                );
                for i in 0..tq {
                    let row = &mut pr[i * tk..(i + 1) * tk];
                    let visible = if self.causal { (i + 1).min(tk) } else { tk };
                    softmax_prefix(row, visible);
                }
                gemm(
                    F::one(),
                    MatRef::new(pr, tq, tk),
                    MatRef::new(&v, batch * tk, w).rows(b * tk, tk).cols(h * hd, hd),
                    F::zero(),
                    MatMut::new(&mut mixed, batch * tq, w).rows(b * tq, tq).cols(h * hd, hd),
                );
            }
        }
        let out = self.o.forward(p, &mixed, batch * tq);
        (
            out,
            AttnCache {
                xq: xq.to_vec(),
                xkv: xkv.to_vec(),
                q,
                k,
                v,
                probs,
                mixed,
                batch,
                tq,
                tk,
            },
        )
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward<F: Real>(&self, p: &[F], c: &AttnCache<F>, dout: &[F], g: &mut [F]) -> (Vec<F>, Vec<F>) {
        let (batch, tq, tk) = (c.batch, c.tq, c.tk);
        let w = self.dim;
        let hd = w / self.heads;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let dmixed = self.o.backward(p, &c.mixed, batch * tq, dout, g, true);
        let mut dq = vec![F::zero(); batch * tq * w];
        let mut dk = vec![F::zero(); batch * tk * w];
        let mut dv = vec![F::zero(); batch * tk * w];
        let mut dp = vec![F::zero(); tq * tk];
        for b in 0..batch {
            for h in 0..self.heads {
                let block = (b * self.heads + h) * tq * tk;
                let pr = &c.probs[block..block + tq * tk];
                let dmix = MatRef::new(&dmixed, batch * tq, w).rows(b * tq, tq).cols(h * hd, hd);
                gemm(
                    F::one(),
                    dmix,
                    MatRef::new(&c.v, batch * tk, w).rows(b * tk, tk).cols(h * hd, hd).t(),
                    F::zero(),
                    MatMut::new(&mut dp, tq, tk),
                );
                gemm(
                    F::one(),
                    MatRef::new(pr, tq, tk).t(),
                    dmix,
                    F::zero(),
                    MatMut::new(&mut dv, batch * tk, w).rows(b * tk, tk).cols(h * hd, hd),
                );
                // Softmax backward in place: dS = P ⊙ (dP − Σ_j dP·P).
                for i in 0..tq {
                    let prow = &pr[i * tk..(i + 1) * tk];
                    let drow = &mut dp[i * tk..(i + 1) * tk];
                    let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                gemm(
                    scale,
                    MatRef::new(&dp, tq, tk),
                    MatRef::new(&c.k, batch * tk, w).rows(b * tk, tk).cols(h * hd, hd),
                    F::zero(),
                    MatMut::new(&mut dq, batch * tq, w).rows(b * tq, tq).cols(h * hd, hd),
                );
                gemm(
                    scale,
                    MatRef::new(&dp, tq, tk).t(),
                    MatRef::new(&c.q, batch * tq, w).rows(b * tq, tq).cols(h * hd, hd),
                    F::zero(),
                    MatMut::new(&mut dk, batch * tk, w).rows(b * tk, tk).cols(h * hd, hd),
                );
            }
        }
        let dxq = self.q.backward(p, &c.xq, batch * tq, &dq, g, true);
        let mut dxkv = self.k.backward(p, &c.xkv, batch * tk, &dk, g, true);
        let dxv = self.v.backward(p, &c.xkv, batch * tk, &dv, g, true);
        super::add_into(&mut dxkv, &dxv);
        (dxq, dxkv)
    }
}

/// Softmax over the first `visible` entries; the rest are set to zero.
fn softmax_prefix<F: Real>(row: &mut [F], visible: usize) {
    let (live, masked) = row.split_at_mut(visible);
    masked.fill(F::zero());
    if live.is_empty() {
        return;
    }
    let max = live.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in live.iter_mut() {
        *v *= inv;
    }
}
