//! Stage 2 building blocks: per-role adapters over frozen textual embeddings,
//! convex fusion with ID embeddings, and the InfoNCE alignment between the two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::ops::{affine_backward, affine_into, dot, log_sum_exp, tanh_backward};
use crate::nncore::{Grads, ParamId, ParamStore, Values};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceMode {
    /// Denominator over negatives only; the loss is unbounded below.
    ExcludePositive,
    /// Standard InfoNCE with the positive in the denominator.
    IncludePositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub dt: usize,
    pub mode: InfoNceMode,
    /// Identity hidden activation: the linear-adapter ablation.
    pub linear_adapter: bool,
    /// Roles with more entities than this align against in-batch negatives.
    pub full_limit: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: 0.5,
            alpha: 0.01,
            tau: 0.05,
            dt: 64,
            // the as-written denominator lets dot-product scores grow without
            // bound and swamps the diagnosis loss, so it is opt-in
            mode: InfoNceMode::IncludePositive,
            linear_adapter: false,
            full_limit: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Two-layer map `d → d_h → d_t`: activation on the hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub activation: Activation,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct AdapterPass {
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl Adapter {
    /// Registers Xavier-uniform weights and zero biases under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: (usize, usize, usize), activation: Activation, rng: &mut Rng) -> Self {
        let (d_in, d_hidden, d_out) = dims;
        let xavier = |rng: &mut Rng, a: usize, b: usize| rng::uniform_vec(rng, a * b, (6.0 / (a + b) as f64).sqrt());
        let w1 = store.add(format!("{prefix}.w1"), &[d_in, d_hidden], xavier(rng, d_in, d_hidden));
        let b1 = store.add(format!("{prefix}.b1"), &[d_hidden], vec![0.0; d_hidden]);
        let w2 = store.add(format!("{prefix}.w2"), &[d_hidden, d_out], xavier(rng, d_hidden, d_out));
        let b2 = store.add(format!("{prefix}.b2"), &[d_out], vec![0.0; d_out]);
        Adapter {
            d_in,
            d_hidden,
            d_out,
            activation,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, values: &Values, h: &[f64]) -> Result<AdapterPass> {
        if h.len() != self.d_in {
            return Err(Error::Shape(format!(
                "adapter expects dimension {}, got {}",
                self.d_in,
                h.len()
            )));
        }
        let mut hidden = values[self.b1].to_vec();
        affine_into(h, &values[self.w1], &mut hidden);
        if self.activation == Activation::Tanh {
            hidden.iter_mut().for_each(|v| *v = v.tanh());
        }
        let mut out = values[self.b2].to_vec();
        affine_into(&hidden, &values[self.w2], &mut out);
        Ok(AdapterPass { hidden, out })
    }

    /// Accumulates parameter gradients for `dout`; the input is frozen.
    pub fn backward(&self, values: &Values, grads: &mut Grads, h: &[f64], pass: &AdapterPass, dout: &[f64]) {
        let mut dhidden = vec![0.0; self.d_hidden];
        let (dw2, db2) = grads.pair_mut(self.w2, self.b2);
        affine_backward(&pass.hidden, &values[self.w2], dout, dw2, db2, Some(&mut dhidden));
        if self.activation == Activation::Tanh {
            for (g, &y) in dhidden.iter_mut().zip(&pass.hidden) {
                *g = tanh_backward(y, *g);
            }
        }
        let (dw1, db1) = grads.pair_mut(self.w1, self.b1);
        affine_backward(h, &values[self.w1], &dhidden, dw1, db1, None);
    }
}

/// `λ ĥ + (1 − λ) g`.
pub fn fuse(h_hat: &[f64], g: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("fusion factor must lie in [0, 1], got {lambda}")));
    }
    if h_hat.len() != g.len() {
        return Err(Error::Shape(format!(
            "textual part has dimension {}, ID part {}",
            h_hat.len(),
            g.len()
        )));
    }
    Ok(h_hat.iter().zip(g).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// InfoNCE loss between row-aligned textual and ID embeddings with its
/// gradients `(loss, dĤ, dG)`.
///
/// `s_ij = ĥ_i · g_j / τ` and
/// `loss = −(1/n) Σ_i [s_ii − log Σ_{j ∈ D_i} exp s_ij]`, where `D_i` omits
/// `j = i` in [`InfoNceMode::ExcludePositive`].
pub fn align_loss_grad(h_hat: &[Vec<f64>], g: &[Vec<f64>], tau: f64, mode: InfoNceMode) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = h_hat.len();
    if n < 2 || g.len() != n {
        return Err(Error::Invalid(format!(
            "alignment needs at least two row-aligned pairs, got {n} and {}",
            g.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let d = h_hat[0].len();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dh = vec![vec![0.0; d]; n];
    let mut dg = vec![vec![0.0; d]; n];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            scores[j] = dot(&h_hat[i], &g[j]) / tau;
        }
        let masked: Vec<f64> = match mode {
            InfoNceMode::IncludePositive => scores.clone(),
            InfoNceMode::ExcludePositive => scores
                .iter()
                .enumerate()
                .map(|(j, &s)| if j == i { f64::NEG_INFINITY } else { s })
                .collect(),
        };
        let lse = log_sum_exp(&masked);
        loss += (lse - scores[i]) * inv_n;
        for j in 0..n {
            let soft = (masked[j] - lse).exp();
            let ds = (soft - (i == j) as u8 as f64) * inv_n / tau;
            if ds == 0.0 {
                continue;
            }
            for t in 0..d {
                dh[i][t] += ds * g[j][t];
                dg[j][t] += ds * h_hat[i][t];
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("alignment loss is {loss}")));
    }
    Ok((loss, dh, dg))
}

pub fn align_loss(h_hat: &[Vec<f64>], g: &[Vec<f64>], tau: f64, mode: InfoNceMode) -> Result<f64> {
    align_loss_grad(h_hat, g, tau, mode).map(|(l, _, _)| l)
}

/// `L_CD + α Σ_roles L_align`.
pub fn total_loss(l_cd: f64, l_align: &[f64], alpha: f64) -> f64 {
    l_cd + alpha * l_align.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::grad_check;
    use crate::rng::stream;

    #[test]
    fn fuse_identities() {
        let (h, g) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(fuse(&h, &g, 1.0).unwrap(), h.to_vec());
        assert_eq!(fuse(&h, &g, 0.0).unwrap(), g.to_vec());
        assert_eq!(fuse(&h, &g, 0.5).unwrap(), vec![0.5, 0.5]);
        assert!(fuse(&h, &g, 1.01).is_err());
        assert!(fuse(&h, &g, -0.1).is_err());
    }

    #[test]
    fn fuse_is_linear_in_lambda() {
        let mut r = rng::seeded(1, stream::GRAD_CHECK);
        for _ in 0..100 {
            let h = rng::normal_vec(&mut r, 5, 1.0);
            let g = rng::normal_vec(&mut r, 5, 1.0);
            let (l1, l2) = (rng::uniform_vec(&mut r, 1, 0.5)[0] + 0.5, rng::uniform_vec(&mut r, 1, 0.5)[0] + 0.5);
            let a = fuse(&h, &g, l1).unwrap();
            let b = fuse(&h, &g, l2).unwrap();
            let m = fuse(&h, &g, (l1 + l2) / 2.0).unwrap();
            for t in 0..5 {
                assert!((a[t] + b[t] - 2.0 * m[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infonce_hand_values() {
        // ĥ_i·g_i = 1, ĥ_i·g_j = 0
        let h = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = align_loss(&h, &h, 1.0, InfoNceMode::ExcludePositive).unwrap();
        assert!((l + 1.0).abs() < 1e-9);
        // all similarities equal
        let same = vec![vec![1.0, 1.0]; 3];
        let ex = align_loss(&same, &same, 1.0, InfoNceMode::ExcludePositive).unwrap();
        let inc = align_loss(&same, &same, 1.0, InfoNceMode::IncludePositive).unwrap();
        assert!((ex - 2f64.ln()).abs() < 1e-9);
        assert!((inc - 3f64.ln()).abs() < 1e-9);
        assert!(align_loss(&same[..1], &same[..1], 1.0, InfoNceMode::IncludePositive).is_err());
    }

    #[test]
    fn infonce_uniform_bounds_and_temperature_scaling() {
        let mut r = rng::seeded(2, stream::GRAD_CHECK);
        for n in 2..7 {
            let same = vec![vec![0.3, -0.2, 0.9]; n];
            let ex = align_loss(&same, &same, 0.7, InfoNceMode::ExcludePositive).unwrap();
            assert!((ex - ((n - 1) as f64).ln()).abs() < 1e-9);
            let h: Vec<Vec<f64>> = (0..n).map(|_| rng::normal_vec(&mut r, 3, 1.0)).collect();
            let g: Vec<Vec<f64>> = (0..n).map(|_| rng::normal_vec(&mut r, 3, 1.0)).collect();
            assert!(align_loss(&h, &g, 0.5, InfoNceMode::IncludePositive).unwrap() >= 0.0);
            // τ → τ/c equals scaling the scores by c
            let scaled: Vec<Vec<f64>> = h.iter().map(|v| v.iter().map(|x| 3.0 * x).collect()).collect();
            let a = align_loss(&h, &g, 0.5 / 3.0, InfoNceMode::ExcludePositive).unwrap();
            let b = align_loss(&scaled, &g, 0.5, InfoNceMode::ExcludePositive).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn adapter_identity_and_zero() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0, stream::STAGE2_INIT);
        let ad = Adapter::new(&mut store, "a", (3, 3, 3), Activation::Identity, &mut r);
        let [w1, _, w2, _] = ad.params();
        for w in [w1, w2] {
            let v = store.value_mut(w);
            v.fill(0.0);
            for i in 0..3 {
                v[i * 3 + i] = 1.0;
            }
        }
        let x = [0.2, -1.5, 4.0];
        assert_eq!(ad.forward(store.values(), &x).unwrap().out, x.to_vec());
        for p in ad.params() {
            store.value_mut(p).fill(0.0);
        }
        assert_eq!(ad.forward(store.values(), &x).unwrap().out, vec![0.0; 3]);
        assert!(ad.forward(store.values(), &[1.0]).is_err());
    }

    /// Adapter, fusion and alignment composed the way stage 2 uses them.
    #[test]
    fn fused_alignment_gradient_matches_finite_differences() {
        for mode in [InfoNceMode::ExcludePositive, InfoNceMode::IncludePositive] {
            let mut store = ParamStore::new();
            let mut r = rng::seeded(3, stream::STAGE2_INIT);
            let ad = Adapter::new(&mut store, "a", (4, 6, 3), Activation::Tanh, &mut r);
            let ids = store.add("g", &[5, 3], rng::normal_vec(&mut r, 15, 0.5));
            let hs: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, 4, 1.0)).collect();
            let target = rng::normal_vec(&mut r, 3, 1.0);
            let (lambda, alpha, tau) = (0.4, 0.7, 0.3);
            let loss = |s: &mut ParamStore| {
                let (values, grads) = s.split_mut();
                let passes: Vec<AdapterPass> = hs.iter().map(|h| ad.forward(values, h).unwrap()).collect();
                let hh: Vec<Vec<f64>> = passes.iter().map(|p| p.out.clone()).collect();
                let g: Vec<Vec<f64>> = (0..5).map(|i| values.row(ids, 3, i).to_vec()).collect();
                // a quadratic stand-in for the diagnosis loss on the fused vectors
                let mut l_cd = 0.0;
                let mut demb = Vec::new();
                for i in 0..5 {
                    let e = fuse(&hh[i], &g[i], lambda).unwrap();
                    l_cd += e.iter().zip(&target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>();
                    demb.push(e.iter().zip(&target).map(|(a, b)| a - b).collect::<Vec<f64>>());
                }
                let (la, dh, dg) = align_loss_grad(&hh, &g, tau, mode).unwrap();
                for i in 0..5 {
                    let dhh: Vec<f64> = (0..3).map(|t| lambda * demb[i][t] + alpha * dh[i][t]).collect();
                    ad.backward(values, grads, &hs[i], &passes[i], &dhh);
                    let row = grads.row_mut(ids, i);
                    for t in 0..3 {
                        row[t] += (1.0 - lambda) * demb[i][t] + alpha * dg[i][t];
                    }
                }
                total_loss(l_cd, &[la], alpha)
            };
            let rep = grad_check(&mut store, loss, 1e-5, 40, 4);
            assert!(rep.max_rel_err < 1e-4, "{mode:?}: {rep:?}");
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, &[0.2], 0.0), 0.5);
        assert!((total_loss(0.5, &[0.2], 1.0) - 0.7).abs() < 1e-15);
        assert!((total_loss(0.5, &[0.1, 0.1, 0.0], 1.0) - 0.7).abs() < 1e-15);
    }
}
