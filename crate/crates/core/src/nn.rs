//! Dense ReLU networks evaluated over many rows at once.
//!
//! Each row (one Gaussian) carries its own input; an optional shared input
//! (the per-sample conditioning) is folded into the first layer's bias, and
//! again into the skip layer if one is configured. Layer weights are stored
//! row-major as `out x (prev | row | shared)`.

use rand::Rng;
use rayon::prelude::*;

use crate::params::{ParamGroup, ParamId, ParamStore};

const ROW_CHUNK: usize = 64;

/// `C = alpha * A B + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub row_in: usize,
    pub shared_in: usize,
    pub hidden: Vec<usize>,
    pub out: usize,
    /// Hidden layer index whose input is `concat(previous, row, shared)`.
    pub skip: Option<usize>,
}

impl MlpSpec {
    fn layer_inputs(&self, l: usize) -> (usize, bool) {
        let prev = if l == 0 { 0 } else { self.hidden[l - 1] };
        let with_inputs = l == 0 || self.skip == Some(l);
        (prev, with_inputs)
    }

    fn layer_out(&self, l: usize) -> usize {
        if l < self.hidden.len() {
            self.hidden[l]
        } else {
            self.out
        }
    }

    pub fn layer_count(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(out, in)` shape of layer `l`.
    pub fn weight_shape(&self, l: usize) -> (usize, usize) {
        let (prev, with_inputs) = self.layer_inputs(l);
        let extra = if with_inputs { self.row_in + self.shared_in } else { 0 };
        (self.layer_out(l), prev + extra)
    }
}

/// How the output layer is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputInit {
    Zero,
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

/// Saved activations: `hidden[l]` is the post-ReLU output of hidden layer l.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub n: usize,
    pub hidden: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

impl Mlp {
    /// Registers the layers in `store`. Hidden weights are He-uniform; biases
    /// start at zero.
    pub fn register(store: &mut ParamStore, prefix: &str, spec: MlpSpec, out_init: OutputInit, rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.layer_count() {
            let (out, inp) = spec.weight_shape(l);
            let last = l + 1 == spec.layer_count();
            let bound = match (last, out_init) {
                (true, OutputInit::Zero) => 0.0,
                (true, OutputInit::Uniform(b)) => b,
                (false, _) => (6.0 / inp.max(1) as f64).sqrt(),
            };
            let w: Vec<f64> = (0..out * inp)
                .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
                .collect();
            weights.push(store.add(format!("{prefix}.{l}.weight"), out, inp, ParamGroup::Network, false, w));
            biases.push(store.add(format!("{prefix}.{l}.bias"), 1, out, ParamGroup::Network, false, vec![0.0; out]));
        }
        Self { spec, weights, biases }
    }

    /// Looks up previously registered layers by name.
    pub fn attach(store: &ParamStore, prefix: &str, spec: MlpSpec) -> crate::Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.layer_count() {
            let w = store.id(&format!("{prefix}.{l}.weight"))?;
            let (out, inp) = spec.weight_shape(l);
            if (store.get(w).rows, store.get(w).cols) != (out, inp) {
                return Err(crate::Error::invalid(format!("layer {prefix}.{l} has unexpected shape")));
            }
            weights.push(w);
            biases.push(store.id(&format!("{prefix}.{l}.bias"))?);
        }
        Ok(Self { spec, weights, biases })
    }

    /// Effective bias of layer `l`: `b + W_shared * shared`.
    fn effective_bias(&self, store: &ParamStore, l: usize, shared: &[f64]) -> Vec<f64> {
        let (out, inp) = self.spec.weight_shape(l);
        let mut bias = store.value(self.biases[l]).to_vec();
        let (prev, with_inputs) = self.spec.layer_inputs(l);
        if with_inputs && self.spec.shared_in > 0 {
            let w = store.value(self.weights[l]);
            let off = prev + self.spec.row_in;
            for (o, b) in bias.iter_mut().enumerate().take(out) {
                let row = &w[o * inp + off..o * inp + off + self.spec.shared_in];
                *b += row.iter().zip(shared).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        bias
    }

    /// Evaluates `n` rows. `rows` is `n x row_in`, `shared` has `shared_in`
    /// entries.
    pub fn forward(&self, store: &ParamStore, rows: &[f64], n: usize, shared: &[f64]) -> MlpCache {
        let spec = &self.spec;
        assert_eq!(rows.len(), n * spec.row_in);
        assert_eq!(shared.len(), spec.shared_in);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(spec.hidden.len());
        let mut out = Vec::new();
        for l in 0..spec.layer_count() {
            let (n_out, inp) = spec.weight_shape(l);
            let (prev, with_inputs) = spec.layer_inputs(l);
            let w = store.value(self.weights[l]);
            let bias = self.effective_bias(store, l, shared);
            let prev_act: &[f64] = if l == 0 { &[] } else { &hidden[l - 1] };
            let mut z = vec![0.0; n * n_out];
            let relu = l < spec.hidden.len();
            z.par_chunks_mut(ROW_CHUNK * n_out).enumerate().for_each(|(ci, zc)| {
                let r0 = ci * ROW_CHUNK;
                let m = zc.len() / n_out;
                for row in zc.chunks_mut(n_out) {
                    row.copy_from_slice(&bias);
                }
                if prev > 0 {
                    gemm(m, prev, n_out, 1.0, &prev_act[r0 * prev..], prev, 1, w, 1, inp, 1.0, zc, n_out, 1);
                }
                if with_inputs && spec.row_in > 0 {
                    gemm(m, spec.row_in, n_out, 1.0, &rows[r0 * spec.row_in..], spec.row_in, 1, &w[prev..], 1, inp, 1.0, zc, n_out, 1);
                }
                if relu {
                    zc.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            });
            if relu {
                hidden.push(z);
            } else {
                out = z;
            }
        }
        MlpCache { n, hidden, out }
    }

    /// Accumulates weight gradients into `store` and returns `dL/drows`.
    pub fn backward(&self, store: &mut ParamStore, rows: &[f64], shared: &[f64], cache: &MlpCache, d_out: &[f64]) -> Vec<f64> {
        let spec = self.spec.clone();
        let n = cache.n;
        assert_eq!(d_out.len(), n * spec.out);
        let mut d_rows = vec![0.0; n * spec.row_in];
        let mut dz = d_out.to_vec();
        for l in (0..spec.layer_count()).rev() {
            let (n_out, inp) = spec.weight_shape(l);
            let (prev, with_inputs) = spec.layer_inputs(l);
            if l < spec.hidden.len() {
                dz.iter_mut().zip(&cache.hidden[l]).for_each(|(d, h)| {
                    if *h <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let prev_act: &[f64] = if l == 0 { &[] } else { &cache.hidden[l - 1] };

            // bias and shared-input gradients from column sums of dz
            let mut col_sum = vec![0.0; n_out];
            for row in dz.chunks(n_out) {
                col_sum.iter_mut().zip(row).for_each(|(s, d)| *s += d);
            }
            store.grad_mut(self.biases[l]).iter_mut().zip(&col_sum).for_each(|(g, s)| *g += s);

            {
                let w_grad = store.grad_mut(self.weights[l]);
                // dW[o, :] += dz[:, o]^T X, split over output rows
                w_grad.par_chunks_mut(ROW_CHUNK * inp).enumerate().for_each(|(ci, gc)| {
                    let o0 = ci * ROW_CHUNK;
                    let mo = gc.len() / inp;
                    if prev > 0 {
                        gemm(mo, n, prev, 1.0, &dz[o0..], 1, n_out, prev_act, prev, 1, 1.0, gc, inp, 1);
                    }
                    if with_inputs && spec.row_in > 0 {
                        gemm(mo, n, spec.row_in, 1.0, &dz[o0..], 1, n_out, rows, spec.row_in, 1, 1.0, &mut gc[prev..], inp, 1);
                    }
                    if with_inputs && spec.shared_in > 0 {
                        let off = prev + spec.row_in;
                        for o in 0..mo {
                            let s = col_sum[o0 + o];
                            for (g, x) in gc[o * inp + off..o * inp + off + spec.shared_in].iter_mut().zip(shared) {
                                *g += s * x;
                            }
                        }
                    }
                });
            }

            let w = store.value(self.weights[l]);
            if with_inputs && spec.row_in > 0 {
                d_rows.par_chunks_mut(ROW_CHUNK * spec.row_in).enumerate().for_each(|(ci, dc)| {
                    let r0 = ci * ROW_CHUNK;
                    let m = dc.len() / spec.row_in;
                    gemm(m, n_out, spec.row_in, 1.0, &dz[r0 * n_out..], n_out, 1, &w[prev..], inp, 1, 1.0, dc, spec.row_in, 1);
                });
            }
            if prev > 0 {
                let mut d_prev = vec![0.0; n * prev];
                d_prev.par_chunks_mut(ROW_CHUNK * prev).enumerate().for_each(|(ci, dc)| {
                    let r0 = ci * ROW_CHUNK;
                    let m = dc.len() / prev;
                    gemm(m, n_out, prev, 1.0, &dz[r0 * n_out..], n_out, 1, w, inp, 1, 0.0, dc, prev, 1);
                });
                dz = d_prev;
            }
        }
        d_rows
    }
}
