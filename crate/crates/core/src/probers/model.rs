use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;

/// A differentiable classifier over a fixed input type. Parameters live in one flat vector so
/// the optimizer can treat every prober the same way.
pub trait Prober: Sync {
    type Input: Sync;

    fn num_classes(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Whether parameter `k` is subject to L2 regularization (biases are not).
    fn regularized(&self, k: usize) -> bool;
    fn logits(&self, x: &Self::Input, out: &mut [f64]);
    /// Adds `∂(Σ_c dlogits_c · logit_c)/∂θ` to `grad`.
    fn backprop(&self, x: &Self::Input, dlogits: &[f64], grad: &mut [f64]);
}

/// Softmax in place.
pub fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}

pub fn probabilities<P: Prober>(model: &P, x: &P::Input) -> Vec<f64> {
    let mut z = vec![0.0; model.num_classes()];
    model.logits(x, &mut z);
    softmax(&mut z);
    z
}

/// Highest-scoring class; ties go to the lowest class id.
pub fn predict<P: Prober>(model: &P, x: &P::Input) -> usize {
    let mut z = vec![0.0; model.num_classes()];
    model.logits(x, &mut z);
    let mut best = 0;
    for c in 1..z.len() {
        if z[c] > z[best] {
            best = c;
        }
    }
    best
}

/// Mean cross-entropy over `batch` plus `l2/2 ‖θ_reg‖²`. When `grad` is given it is overwritten
/// with the gradient of that objective.
pub fn loss_and_grad<P: Prober>(
    model: &P,
    inputs: &[P::Input],
    labels: &[usize],
    batch: &[usize],
    l2: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let c = model.num_classes();
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut z = vec![0.0; c];
    let mut loss = 0.0;
    for &k in batch {
        model.logits(&inputs[k], &mut z);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_total - z[labels[k]];
        if let Some(g) = grad.as_deref_mut() {
            for (c_idx, v) in z.iter_mut().enumerate() {
                let p = (*v - log_total).exp();
                *v = (p - if c_idx == labels[k] { 1.0 } else { 0.0 }) * scale;
            }
            model.backprop(&inputs[k], &z, g);
        }
    }
    loss *= scale;
    let params = model.params();
    let mut penalty = 0.0;
    for (k, &w) in params.iter().enumerate() {
        if model.regularized(k) {
            penalty += w * w;
            if let Some(g) = grad.as_deref_mut() {
                g[k] += l2 * w;
            }
        }
    }
    loss + 0.5 * l2 * penalty
}

/// Multinomial logistic regression `z = W ((x − mean) / scale) + b`. Used as the attention
/// prober (x = per-head attention in both directions) and the sentence probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProber {
    pub classes: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `classes × dim` weights, row-major, then `classes` biases.
    pub params: Vec<f64>,
}

impl LinearProber {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            params: vec![0.0; classes * dim + classes],
        }
    }

    /// Sets per-feature centering and scaling from training inputs; constant features keep
    /// scale 1.
    pub fn standardize_from<'a>(&mut self, rows: impl Iterator<Item = &'a Vec<f64>>) {
        let mut count = 0.0;
        let mut sum = vec![0.0; self.dim];
        let mut sq = vec![0.0; self.dim];
        for row in rows {
            count += 1.0;
            for (d, v) in row.iter().enumerate() {
                sum[d] += v;
                sq[d] += v * v;
            }
        }
        if count == 0.0 {
            return;
        }
        for d in 0..self.dim {
            let mean = sum[d] / count;
            let var = (sq[d] / count - mean * mean).max(0.0);
            self.mean[d] = mean;
            self.scale[d] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.params[class * self.dim + feature]
    }
}

impl Prober for LinearProber {
    type Input = Vec<f64>;

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn regularized(&self, k: usize) -> bool {
        k < self.classes * self.dim
    }

    fn logits(&self, x: &Vec<f64>, out: &mut [f64]) {
        let bias = &self.params[self.classes * self.dim..];
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.params[c * self.dim..(c + 1) * self.dim];
            let mut acc = bias[c];
            for d in 0..self.dim {
                acc += w[d] * (x[d] - self.mean[d]) / self.scale[d];
            }
            *o = acc;
        }
    }

    fn backprop(&self, x: &Vec<f64>, dlogits: &[f64], grad: &mut [f64]) {
        let off = self.classes * self.dim;
        for (c, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let g = &mut grad[c * self.dim..(c + 1) * self.dim];
            for d in 0..self.dim {
                g[d] += dl * (x[d] - self.mean[d]) / self.scale[d];
            }
            grad[off + c] += dl;
        }
    }
}

/// Endpoint embeddings of a probed pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInput {
    pub ei: Vec<f64>,
    pub ej: Vec<f64>,
}

/// Bilinear embedding prober `z_c = w_c · (W_w e_i ⊙ W_μ e_j) + b_c`, one read-out vector per
/// class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearProber {
    pub classes: usize,
    pub dim: usize,
    /// `W_w` (dim × dim), `W_μ` (dim × dim), read-out (classes × dim), biases (classes).
    pub params: Vec<f64>,
}

impl BilinearProber {
    /// Projections start at the identity plus small noise so the prober initially reads the
    /// elementwise product of the raw embeddings; read-out weights start small.
    pub fn new(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "bilinear-init");
        let noise = Normal::new(0.0, 0.01).expect("valid std");
        let mut params = Vec::with_capacity(2 * dim * dim + classes * dim + classes);
        for _ in 0..2 {
            for r in 0..dim {
                for c in 0..dim {
                    params.push(if r == c { 1.0 } else { 0.0 } + noise.sample(&mut rng));
                }
            }
        }
        params.extend((0..classes * dim).map(|_| noise.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, classes));
        Self { classes, dim, params }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let d2 = self.dim * self.dim;
        let (ww, rest) = self.params.split_at(d2);
        let (wm, rest) = rest.split_at(d2);
        let (wc, b) = rest.split_at(self.classes * self.dim);
        (ww, wm, wc, b)
    }

    fn project(w: &[f64], e: &[f64], dim: usize) -> Vec<f64> {
        (0..dim).map(|r| w[r * dim..(r + 1) * dim].iter().zip(e).map(|(a, b)| a * b).sum()).collect()
    }
}

impl Prober for BilinearProber {
    type Input = PairInput;

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn regularized(&self, k: usize) -> bool {
        k < self.params.len() - self.classes
    }

    fn logits(&self, x: &PairInput, out: &mut [f64]) {
        let (ww, wm, wc, b) = self.split();
        let u = Self::project(ww, &x.ei, self.dim);
        let v = Self::project(wm, &x.ej, self.dim);
        for (c, o) in out.iter_mut().enumerate() {
            let w = &wc[c * self.dim..(c + 1) * self.dim];
            *o = b[c] + (0..self.dim).map(|r| w[r] * u[r] * v[r]).sum::<f64>();
        }
    }

    fn backprop(&self, x: &PairInput, dlogits: &[f64], grad: &mut [f64]) {
        let (ww, wm, wc, _) = self.split();
        let d = self.dim;
        let u = Self::project(ww, &x.ei, d);
        let v = Self::project(wm, &x.ej, d);
        let d2 = d * d;
        // dz_r = Σ_c dl_c w_{c,r}
        let mut dz = vec![0.0; d];
        for (c, &dl) in dlogits.iter().enumerate() {
            let w = &wc[c * d..(c + 1) * d];
            let gw = &mut grad[2 * d2 + c * d..2 * d2 + (c + 1) * d];
            for r in 0..d {
                dz[r] += dl * w[r];
                gw[r] += dl * u[r] * v[r];
            }
            grad[2 * d2 + self.classes * d + c] += dl;
        }
        for r in 0..d {
            let du = dz[r] * v[r];
            let dv = dz[r] * u[r];
            let g_ww = &mut grad[r * d..(r + 1) * d];
            for (g, e) in g_ww.iter_mut().zip(&x.ei) {
                *g += du * e;
            }
            let g_wm = &mut grad[d2 + r * d..d2 + (r + 1) * d];
            for (g, e) in g_wm.iter_mut().zip(&x.ej) {
                *g += dv * e;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let mut z = vec![1000.0, 1001.0, -5.0];
        softmax(&mut z);
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_logits_follow_standardization() {
        let mut p = LinearProber::new(2, 1);
        p.params = vec![2.0, -1.0, 0.5, 0.0];
        p.mean = vec![1.0];
        p.scale = vec![2.0];
        let mut z = [0.0; 2];
        p.logits(&vec![3.0], &mut z);
        assert_eq!(z, [2.5, -1.0]);
    }

    #[test]
    fn bilinear_identity_reads_product() {
        let mut p = BilinearProber::new(2, 2, 0);
        let d2 = 4;
        p.params[..d2].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.params[d2..2 * d2].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.params[2 * d2..2 * d2 + 4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut z = [0.0; 2];
        p.logits(&PairInput { ei: vec![2.0, 3.0], ej: vec![4.0, 5.0] }, &mut z);
        assert_eq!(z, [8.0, 15.0]);
    }
}
