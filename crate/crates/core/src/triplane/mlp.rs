//! Fully connected heads with squareplus hidden activations.

use rand::Rng;

/// Dense layer; `weight` is `out_dim x in_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn uniform(in_dim: usize, out_dim: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(in_dim, out_dim);
        if bound > 0.0 {
            for w in l.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
            for b in l.bias.iter_mut() {
                *b = rng.random_range(-bound..bound);
            }
        }
        l
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias))
        {
            let mut acc = *b;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o = acc;
        }
    }
}

/// `Linear -> squareplus -> ... -> Linear`; no activation after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer inputs, pre-activations and activation slopes recorded by a
/// forward pass, plus scratch space for the backward pass.
#[derive(Default, Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    slope: Vec<Vec<f64>>,
    delta: Vec<f64>,
    back: Vec<f64>,
    /// Feature scratch for callers that sample before the forward pass.
    pub(crate) feat: Vec<f64>,
}

/// Curvature of the hidden activation; the softplus-like
/// `(x + sqrt(x² + b)) / 2` needs no transcendental calls.
pub const SQUAREPLUS_B: f64 = 4.0;

/// Squareplus value and slope.
#[inline]
pub fn squareplus_and_slope(x: f64) -> (f64, f64) {
    let r = (x * x + SQUAREPLUS_B).sqrt();
    (0.5 * (x + r), 0.5 * (1.0 + x / r))
}

impl Mlp {
    /// `hidden_layers` hidden layers of width `hidden`. Hidden layers use
    /// U(±1/√fan_in); the output layer uses U(±out_scale/√fan_in).
    pub fn new(
        in_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        out_dim: usize,
        out_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut d = in_dim;
        for _ in 0..hidden_layers {
            layers.push(Linear::uniform(d, hidden, 1.0 / (d as f64).sqrt(), rng));
            d = hidden;
        }
        layers.push(Linear::uniform(d, out_dim, out_scale / (d as f64).sqrt(), rng));
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn last_mut(&mut self) -> &mut Linear {
        self.layers.last_mut().expect("mlp has at least one layer")
    }

    /// Layer shapes `(in, out)` in order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    /// Raw output; the returned slice lives in `cache`.
    pub fn forward<'c>(&self, x: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        let n = self.layers.len();
        if cache.inputs.len() != n {
            cache.inputs.resize(n, Vec::new());
            cache.pre.resize(n, Vec::new());
            cache.slope.resize(n, Vec::new());
        }
        cache.inputs[0].clear();
        cache.inputs[0].extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = &mut cache.pre[i];
            pre.resize(layer.out_dim, 0.0);
            layer.apply(&cache.inputs[i], pre);
            if i + 1 < n {
                let next = &mut cache.inputs[i + 1];
                next.resize(layer.out_dim, 0.0);
                let slope = &mut cache.slope[i];
                slope.resize(layer.out_dim, 0.0);
                for ((o, s), &p) in next.iter_mut().zip(slope.iter_mut()).zip(pre.iter()) {
                    (*o, *s) = squareplus_and_slope(p);
                }
            }
        }
        &cache.pre[n - 1]
    }

    /// Backpropagates `grad_out` (adjoint of the raw output) through the
    /// pass recorded in `cache`. Weight and bias adjoints are added to
    /// `grads[layer] = (dW, db)`; the input adjoint is added to `grad_in`.
    pub fn backward(
        &self,
        cache: &mut MlpCache,
        grad_out: &[f64],
        grads: &mut [(&mut [f64], &mut [f64])],
        grad_in: &mut [f64],
    ) {
        let MlpCache { inputs, slope, delta, back, .. } = cache;
        delta.clear();
        delta.extend_from_slice(grad_out);
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &inputs[i];
            let (gw, gb) = &mut grads[i];
            back.clear();
            back.resize(layer.in_dim, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let lo = o * layer.in_dim;
                let grow = &mut gw[lo..lo + layer.in_dim];
                let wrow = &layer.weight[lo..lo + layer.in_dim];
                for ((g, b), (xi, w)) in grow.iter_mut().zip(back.iter_mut()).zip(input.iter().zip(wrow)) {
                    *g += d * xi;
                    *b += d * w;
                }
            }
            if i == 0 {
                for (g, b) in grad_in.iter_mut().zip(back.iter()) {
                    *g += b;
                }
            } else {
                delta.clear();
                delta.extend(back.iter().zip(&slope[i - 1]).map(|(b, s)| b * s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squareplus_shape() {
        assert_eq!(squareplus_and_slope(0.0), (1.0, 0.5));
        for x in [-40.0, -3.0, -1e-3, 0.7, 25.0] {
            let (v, s) = squareplus_and_slope(x);
            assert!(v > 0.0 && v > x && s > 0.0 && s < 1.0);
            let h = 1e-6;
            let fd = (squareplus_and_slope(x + h).0 - squareplus_and_slope(x - h).0) / (2.0 * h);
            assert!((fd - s).abs() < 1e-8);
        }
        assert!(squareplus_and_slope(-1e3).0 < 1e-2);
        assert!((squareplus_and_slope(1e3).0 - 1e3).abs() < 1e-2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(4, 6, 2, 2, 1.0, &mut rng);
        let x = [0.3, -0.2, 0.9, 0.1];
        let go = [0.7, -1.3];
        let mut cache = MlpCache::default();
        mlp.forward(&x, &mut cache);
        let mut gbufs: Vec<(Vec<f64>, Vec<f64>)> = mlp
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect();
        let mut gin = vec![0.0; 4];
        {
            let mut views: Vec<(&mut [f64], &mut [f64])> = gbufs
                .iter_mut()
                .map(|(w, b)| (w.as_mut_slice(), b.as_mut_slice()))
                .collect();
            mlp.backward(&mut cache, &go, &mut views, &mut gin);
        }
        let obj = |m: &Mlp, x: &[f64]| {
            let mut c = MlpCache::default();
            let y = m.forward(x, &mut c).to_vec();
            y[0] * go[0] + y[1] * go[1]
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (obj(&mlp, &xp) - obj(&mlp, &xm)) / (2.0 * h);
            assert!((fd - gin[i]).abs() < 1e-7, "input {i}: {fd} vs {}", gin[i]);
        }
        for l in 0..mlp.layers.len() {
            for k in [0, mlp.layers[l].weight.len() - 1] {
                let orig = mlp.layers[l].weight[k];
                mlp.layers[l].weight[k] = orig + h;
                let fp = obj(&mlp, &x);
                mlp.layers[l].weight[k] = orig - h;
                let fm = obj(&mlp, &x);
                mlp.layers[l].weight[k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - gbufs[l].0[k]).abs() < 1e-7);
            }
        }
    }
}
