//! Trainable parameter-efficient modules: low-rank (LoRA) deltas for the
//! attention projections and bottleneck serial adapters for the MLP, plus
//! the AdamW optimizer with cosine learning-rate decay that updates them.
//!
//! Fresh modules are exact no-ops: LoRA initializes `w_up` to zero and the
//! adapter initializes `w_b`/`b_b` to zero, so an untouched or killed module
//! leaves the backbone function bit-identical.

use crate::rng::{normal_tensor, Rng};
use crate::scalar::{silu, silu_grad, Scalar};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor, TensorError};
use alloc::vec;
use alloc::vec::Vec;

/// Spread of the normal init for the non-zero half of each module.
pub const INIT_STD: f64 = 0.02;

pub const ADAMW_BETA1: f64 = 0.9;
pub const ADAMW_BETA2: f64 = 0.999;
pub const ADAMW_EPS: f64 = 1e-8;
pub const ADAMW_WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeftKind {
    Lora,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeftConfig {
    pub kind: PeftKind,
    /// LoRA rank r.
    pub rank: usize,
    /// Adapter bottleneck width m.
    pub adapter_dim: usize,
    /// LoRA delta scale α.
    pub alpha: f64,
}

impl PeftConfig {
    pub fn lora(rank: usize, alpha: f64) -> Self {
        PeftConfig {
            kind: PeftKind::Lora,
            rank,
            adapter_dim: 0,
            alpha,
        }
    }

    pub fn adapter(adapter_dim: usize) -> Self {
        PeftConfig {
            kind: PeftKind::Adapter,
            rank: 0,
            adapter_dim,
            alpha: 1.0,
        }
    }
}

/// One low-rank pair: delta(h) = α·(h·w_downᵀ)·w_up.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraProjection<S: Scalar> {
    /// [r × d], small-normal init.
    pub w_down: Tensor<S>,
    /// [r × d], zero init so the initial delta vanishes.
    pub w_up: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule<S: Scalar> {
    pub q: LoraProjection<S>,
    pub k: LoraProjection<S>,
    pub v: LoraProjection<S>,
    pub alpha: S,
}

/// Bottleneck adapter: out = h + silu(h·w_a + b_a)·w_b + b_b.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModule<S: Scalar> {
    /// [d × m]
    pub w_a: Tensor<S>,
    /// [m]
    pub b_a: Tensor<S>,
    /// [m × d], zero init.
    pub w_b: Tensor<S>,
    /// [d], zero init.
    pub b_b: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeftModule<S: Scalar> {
    Lora(LoraModule<S>),
    Adapter(AdapterModule<S>),
}

/// Draw order is pinned (q, k, v down-projections; adapter `w_a`) so module
/// initialization is a pure function of the seed stream position.
pub fn init_module<S: Scalar>(cfg: &PeftConfig, d_model: usize, rng: &mut Rng) -> PeftModule<S> {
    match cfg.kind {
        PeftKind::Lora => {
            let proj = |rng: &mut Rng| LoraProjection {
                w_down: normal_tensor(rng, &[cfg.rank, d_model], INIT_STD),
                w_up: Tensor::zeros(&[cfg.rank, d_model]),
            };
            PeftModule::Lora(LoraModule {
                q: proj(rng),
                k: proj(rng),
                v: proj(rng),
                alpha: S::from_f64(cfg.alpha),
            })
        }
        PeftKind::Adapter => PeftModule::Adapter(AdapterModule {
            w_a: normal_tensor(rng, &[d_model, cfg.adapter_dim], INIT_STD),
            b_a: Tensor::zeros(&[cfg.adapter_dim]),
            w_b: Tensor::zeros(&[cfg.adapter_dim, d_model]),
            b_b: Tensor::zeros(&[d_model]),
        }),
    }
}

impl<S: Scalar> PeftModule<S> {
    pub fn kind(&self) -> PeftKind {
        match self {
            PeftModule::Lora(_) => PeftKind::Lora,
            PeftModule::Adapter(_) => PeftKind::Adapter,
        }
    }

    /// Learnable tensors in the pinned traversal order (the same order the
    /// optimizer state, the norm accumulation and the checkpoint use).
    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            PeftModule::Lora(m) => vec![
                &m.q.w_down,
                &m.q.w_up,
                &m.k.w_down,
                &m.k.w_up,
                &m.v.w_down,
                &m.v.w_up,
            ],
            PeftModule::Adapter(m) => vec![&m.w_a, &m.b_a, &m.w_b, &m.b_b],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            PeftModule::Lora(m) => vec![
                &mut m.q.w_down,
                &mut m.q.w_up,
                &mut m.k.w_down,
                &mut m.k.w_up,
                &mut m.v.w_down,
                &mut m.v.w_up,
            ],
            PeftModule::Adapter(m) => vec![&mut m.w_a, &mut m.b_a, &mut m.w_b, &mut m.b_b],
        }
    }
}

/// delta = α·(h·w_downᵀ)·w_up for h: [n × d].
pub fn lora_delta<S: Scalar>(
    h: &Tensor<S>,
    proj: &LoraProjection<S>,
    alpha: S,
) -> Result<Tensor<S>, TensorError> {
    let p = matmul_nt(h, &proj.w_down)?;
    Ok(matmul(&p, &proj.w_up)?.scale(alpha))
}

#[derive(Debug, Clone)]
pub struct LoraProjGrads<S: Scalar> {
    pub g_down: Tensor<S>,
    pub g_up: Tensor<S>,
    /// Gradient contribution flowing back into h through this branch.
    pub dh: Tensor<S>,
}

/// Backward of `lora_delta` given the upstream gradient at the delta.
pub fn lora_backward<S: Scalar>(
    h: &Tensor<S>,
    proj: &LoraProjection<S>,
    alpha: S,
    d_delta: &Tensor<S>,
) -> Result<LoraProjGrads<S>, TensorError> {
    let p = matmul_nt(h, &proj.w_down)?; // [n × r]
    let g_up = matmul_tn(&p, d_delta)?.scale(alpha); // [r × d]
    let dp = matmul_nt(d_delta, &proj.w_up)?.scale(alpha); // [n × r]
    let g_down = matmul_tn(&dp, h)?; // [r × d]
    let dh = matmul(&dp, &proj.w_down)?; // [n × d]
    Ok(LoraProjGrads { g_down, g_up, dh })
}

/// The adapter's non-residual branch: silu(h·w_a + b_a)·w_b + b_b, plus the
/// pre-activation cache the backward pass reuses.
pub fn adapter_delta<S: Scalar>(
    h: &Tensor<S>,
    m: &AdapterModule<S>,
) -> Result<(Tensor<S>, Tensor<S>), TensorError> {
    let mut z = matmul(h, &m.w_a)?;
    for i in 0..z.rows() {
        for (v, &b) in z.row_mut(i).iter_mut().zip(m.b_a.data()) {
            *v += b;
        }
    }
    let act = z.map(silu);
    let mut out = matmul(&act, &m.w_b)?;
    for i in 0..out.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(m.b_b.data()) {
            *v += b;
        }
    }
    Ok((out, z))
}

/// out = h + branch(h); the residual lives inside the module.
pub fn adapter_forward<S: Scalar>(
    h: &Tensor<S>,
    m: &AdapterModule<S>,
) -> Result<Tensor<S>, TensorError> {
    let (delta, _) = adapter_delta(h, m)?;
    h.add(&delta)
}

#[derive(Debug, Clone)]
pub struct AdapterGrads<S: Scalar> {
    pub g_wa: Tensor<S>,
    pub g_ba: Tensor<S>,
    pub g_wb: Tensor<S>,
    pub g_bb: Tensor<S>,
    pub dh: Tensor<S>,
}

/// Backward of the adapter *branch*: `dh` here excludes the identity path.
pub fn adapter_delta_backward<S: Scalar>(
    h: &Tensor<S>,
    m: &AdapterModule<S>,
    z: &Tensor<S>,
    d_delta: &Tensor<S>,
) -> Result<AdapterGrads<S>, TensorError> {
    let act = z.map(silu);
    let g_wb = matmul_tn(&act, d_delta)?;
    let mut g_bb = Tensor::zeros(&[d_delta.cols()]);
    for i in 0..d_delta.rows() {
        for (g, &v) in g_bb.data_mut().iter_mut().zip(d_delta.row(i)) {
            *g += v;
        }
    }
    let da = matmul_nt(d_delta, &m.w_b)?;
    let mut dz = da;
    for (v, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
        *v *= silu_grad(zv);
    }
    let g_wa = matmul_tn(h, &dz)?;
    let mut g_ba = Tensor::zeros(&[dz.cols()]);
    for i in 0..dz.rows() {
        for (g, &v) in g_ba.data_mut().iter_mut().zip(dz.row(i)) {
            *g += v;
        }
    }
    let dh = matmul_nt(&dz, &m.w_a)?;
    Ok(AdapterGrads {
        g_wa,
        g_ba,
        g_wb,
        g_bb,
        dh,
    })
}

/// Backward of `adapter_forward` (branch plus identity path).
pub fn adapter_backward<S: Scalar>(
    h: &Tensor<S>,
    m: &AdapterModule<S>,
    z: &Tensor<S>,
    d_out: &Tensor<S>,
) -> Result<AdapterGrads<S>, TensorError> {
    let mut grads = adapter_delta_backward(h, m, z, d_out)?;
    grads.dh.add_assign(d_out)?;
    Ok(grads)
}

/// sqrt(Σ p²) over every learnable scalar of the module, accumulated in f64
/// in the pinned parameter order.
pub fn module_l2_norm<S: Scalar>(module: &PeftModule<S>) -> f64 {
    let mut acc = 0.0f64;
    for t in module.params() {
        for &v in t.data() {
            let x = v.to_f64();
            acc += x * x;
        }
    }
    libm::sqrt(acc)
}

/// lr(t) = base_lr · ½·(1 + cos(π·t / total_steps)), evaluated at the number
/// of completed steps: the first step runs at full base LR, step
/// `total_steps` would run at 0.
pub fn cosine_lr(base_lr: f64, t: u64, total_steps: u64) -> f64 {
    debug_assert!(total_steps > 0);
    let frac = t as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

/// AdamW state for one module: first/second moments per parameter tensor and
/// the module's own completed-step counter (a killed module's clock pauses
/// with its weights).
#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    pub t: u64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(param_shapes: &[&[usize]], base_lr: f64, total_steps: u64) -> Self {
        OptimState {
            m: param_shapes.iter().map(|d| Tensor::zeros(d)).collect(),
            v: param_shapes.iter().map(|d| Tensor::zeros(d)).collect(),
            t: 0,
            base_lr,
            total_steps: total_steps.max(1),
            beta1: ADAMW_BETA1,
            beta2: ADAMW_BETA2,
            eps: ADAMW_EPS,
            weight_decay: ADAMW_WEIGHT_DECAY,
        }
    }

    pub fn for_module(module: &PeftModule<S>, base_lr: f64, total_steps: u64) -> Self {
        let shapes: Vec<&[usize]> = module.params().iter().map(|t| t.dims()).collect();
        Self::new(&shapes, base_lr, total_steps)
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.t, self.total_steps)
    }
}

/// One decoupled-weight-decay Adam step over a module's parameters.
/// `grads` must match the module's pinned parameter order.
pub fn adamw_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    s: &mut OptimState<S>,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != s.m.len() {
        return Err(TensorError::Msg(alloc::format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            s.m.len()
        )));
    }
    let lr = S::from_f64(s.current_lr());
    s.t += 1;
    let b1 = S::from_f64(s.beta1);
    let b2 = S::from_f64(s.beta2);
    let one_m_b1 = S::from_f64(1.0 - s.beta1);
    let one_m_b2 = S::from_f64(1.0 - s.beta2);
    // Bias corrections from the post-increment step count, computed in f64.
    let bc1 = S::from_f64(1.0 - libm::pow(s.beta1, s.t as f64));
    let bc2 = S::from_f64(1.0 - libm::pow(s.beta2, s.t as f64));
    let eps = S::from_f64(s.eps);
    let wd = S::from_f64(s.weight_decay);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(s.m.iter_mut().zip(s.v.iter_mut()))
    {
        if p.dims() != g.dims() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.dims().to_vec(),
                rhs: g.dims().to_vec(),
            });
        }
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mv = b1 * *mv + one_m_b1 * gv;
            *vv = b2 * *vv + one_m_b2 * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn fresh_lora_delta_is_zero() {
        let mut rng = Rng::new(1);
        let m = init_module::<f64>(&PeftConfig::lora(4, 1.0), 16, &mut rng);
        let PeftModule::Lora(l) = m else {
            unreachable!()
        };
        let h = normal_tensor(&mut rng, &[3, 16], 1.0);
        let d = lora_delta(&h, &l.q, l.alpha).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_scalar_hand_case() {
        // d = 1, r = 1, α = 2, w_down = [3], w_up = [5], h = [7] → 210.
        let proj = LoraProjection {
            w_down: t64(&[1, 1], &[3.0]),
            w_up: t64(&[1, 1], &[5.0]),
        };
        let d = lora_delta(&t64(&[1, 1], &[7.0]), &proj, 2.0).unwrap();
        assert_eq!(d.data(), &[210.0]);
    }

    #[test]
    fn lora_alpha_zero_kills_delta() {
        let mut rng = Rng::new(2);
        let h: Tensor<f64> = normal_tensor(&mut rng, &[4, 8], 1.0);
        let proj = LoraProjection {
            w_down: normal_tensor(&mut rng, &[2, 8], 1.0),
            w_up: normal_tensor(&mut rng, &[2, 8], 1.0),
        };
        let d = lora_delta(&h, &proj, 0.0).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_delta_is_linear_in_h() {
        let mut rng = Rng::new(4);
        let proj = LoraProjection::<f64> {
            w_down: normal_tensor(&mut rng, &[4, 8], 0.5),
            w_up: normal_tensor(&mut rng, &[4, 8], 0.5),
        };
        let h1: Tensor<f64> = normal_tensor(&mut rng, &[3, 8], 1.0);
        let h2: Tensor<f64> = normal_tensor(&mut rng, &[3, 8], 1.0);
        let lhs = lora_delta(&h1.add(&h2).unwrap(), &proj, 1.3).unwrap();
        let rhs = lora_delta(&h1, &proj, 1.3)
            .unwrap()
            .add(&lora_delta(&h2, &proj, 1.3).unwrap())
            .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            // The two summation orders agree to rounding error.
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs().max(b.abs())));
        }
    }

    #[test]
    fn lora_backward_zero_upstream_is_zero() {
        let mut rng = Rng::new(5);
        let proj = LoraProjection::<f64> {
            w_down: normal_tensor(&mut rng, &[2, 6], 1.0),
            w_up: normal_tensor(&mut rng, &[2, 6], 1.0),
        };
        let h = normal_tensor(&mut rng, &[3, 6], 1.0);
        let g = lora_backward(&h, &proj, 1.0, &Tensor::zeros(&[3, 6])).unwrap();
        assert!(g.g_down.data().iter().all(|&v| v == 0.0));
        assert!(g.g_up.data().iter().all(|&v| v == 0.0));
        assert!(g.dh.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_backward_scalar_hand_case() {
        let proj = LoraProjection {
            w_down: t64(&[1, 1], &[3.0]),
            w_up: t64(&[1, 1], &[5.0]),
        };
        let g = lora_backward(&t64(&[1, 1], &[7.0]), &proj, 2.0, &t64(&[1, 1], &[1.0])).unwrap();
        // g_up = α·(w_down·h)·dΔ = 2·21·1
        assert_eq!(g.g_up.data(), &[42.0]);
        // g_down = α·dΔ·w_up·h = 2·5·7
        assert_eq!(g.g_down.data(), &[70.0]);
        // dh = α·w_down·w_up·dΔ = 30
        assert_eq!(g.dh.data(), &[30.0]);
    }

    #[test]
    fn adapter_zero_weights_is_identity() {
        let m = AdapterModule::<f64> {
            w_a: Tensor::zeros(&[4, 3]),
            b_a: Tensor::zeros(&[3]),
            w_b: Tensor::zeros(&[3, 4]),
            b_b: Tensor::zeros(&[4]),
        };
        let mut rng = Rng::new(6);
        let h = normal_tensor(&mut rng, &[2, 4], 1.0);
        let out = adapter_forward(&h, &m).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn adapter_scalar_hand_case() {
        // d = m = 1, h = 2, w_a = 1, w_b = 3, zero biases:
        // out = 2 + 3·silu(2) = 7.28478…
        let m = AdapterModule {
            w_a: t64(&[1, 1], &[1.0]),
            b_a: t64(&[1], &[0.0]),
            w_b: t64(&[1, 1], &[3.0]),
            b_b: t64(&[1], &[0.0]),
        };
        let out = adapter_forward(&t64(&[1, 1], &[2.0]), &m).unwrap();
        let want = 2.0 + 3.0 * silu(2.0f64);
        assert!((out.data()[0] - want).abs() < 1e-12);
        assert!((out.data()[0] - 7.28478).abs() < 1e-4);
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = Rng::new(7);
        let m = init_module::<f64>(&PeftConfig::adapter(5), 8, &mut rng);
        let PeftModule::Adapter(a) = m else {
            unreachable!()
        };
        let h = normal_tensor(&mut rng, &[3, 8], 1.0);
        assert_eq!(adapter_forward(&h, &a).unwrap(), h);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn lora_backward_matches_fd() {
        let mut rng = Rng::new(8);
        let d = 6;
        let r = 2;
        let proj = LoraProjection::<f64> {
            w_down: normal_tensor(&mut rng, &[r, d], 0.5),
            w_up: normal_tensor(&mut rng, &[r, d], 0.5),
        };
        let h: Tensor<f64> = normal_tensor(&mut rng, &[3, d], 1.0);
        let up: Tensor<f64> = normal_tensor(&mut rng, &[3, d], 1.0);
        let alpha = 1.7;
        let g = lora_backward(&h, &proj, alpha, &up).unwrap();

        let objective = |p: &LoraProjection<f64>, hh: &Tensor<f64>| -> f64 {
            let delta = lora_delta(hh, p, alpha).unwrap();
            delta.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let hstep = 1e-5;
        for idx in 0..r * d {
            let mut p2 = proj.clone();
            p2.w_down.data_mut()[idx] += hstep;
            let upv = objective(&p2, &h);
            p2.w_down.data_mut()[idx] -= 2.0 * hstep;
            let dn = objective(&p2, &h);
            assert!(rel_err((upv - dn) / (2.0 * hstep), g.g_down.data()[idx]) < 1e-5);

            let mut p3 = proj.clone();
            p3.w_up.data_mut()[idx] += hstep;
            let upv = objective(&p3, &h);
            p3.w_up.data_mut()[idx] -= 2.0 * hstep;
            let dn = objective(&p3, &h);
            assert!(rel_err((upv - dn) / (2.0 * hstep), g.g_up.data()[idx]) < 1e-5);
        }
        for idx in 0..h.numel() {
            let mut h2 = h.clone();
            h2.data_mut()[idx] += hstep;
            let upv = objective(&proj, &h2);
            h2.data_mut()[idx] -= 2.0 * hstep;
            let dn = objective(&proj, &h2);
            assert!(rel_err((upv - dn) / (2.0 * hstep), g.dh.data()[idx]) < 1e-5);
        }
    }

    #[test]
    fn adapter_backward_matches_fd() {
        let mut rng = Rng::new(9);
        let d = 5;
        let w = 3;
        let m = AdapterModule::<f64> {
            w_a: normal_tensor(&mut rng, &[d, w], 0.6),
            b_a: normal_tensor(&mut rng, &[w], 0.3),
            w_b: normal_tensor(&mut rng, &[w, d], 0.6),
            b_b: normal_tensor(&mut rng, &[d], 0.3),
        };
        let h: Tensor<f64> = normal_tensor(&mut rng, &[2, d], 1.0);
        let up: Tensor<f64> = normal_tensor(&mut rng, &[2, d], 1.0);

        let (_, z) = adapter_delta(&h, &m).unwrap();
        let g = adapter_backward(&h, &m, &z, &up).unwrap();

        let objective = |mm: &AdapterModule<f64>, hh: &Tensor<f64>| -> f64 {
            let out = adapter_forward(hh, mm).unwrap();
            out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let hs = 1e-5;
        let check = |analytic: &Tensor<f64>,
                     field: fn(&mut AdapterModule<f64>) -> &mut Tensor<f64>| {
            for idx in 0..analytic.numel() {
                let mut m2 = m.clone();
                field(&mut m2).data_mut()[idx] += hs;
                let upv = objective(&m2, &h);
                field(&mut m2).data_mut()[idx] -= 2.0 * hs;
                let dn = objective(&m2, &h);
                assert!(rel_err((upv - dn) / (2.0 * hs), analytic.data()[idx]) < 1e-5);
            }
        };
        check(&g.g_wa, |m| &mut m.w_a);
        check(&g.g_ba, |m| &mut m.b_a);
        check(&g.g_wb, |m| &mut m.w_b);
        check(&g.g_bb, |m| &mut m.b_b);
        for idx in 0..h.numel() {
            let mut h2 = h.clone();
            h2.data_mut()[idx] += hs;
            let upv = objective(&m, &h2);
            h2.data_mut()[idx] -= 2.0 * hs;
            let dn = objective(&m, &h2);
            assert!(rel_err((upv - dn) / (2.0 * hs), g.dh.data()[idx]) < 1e-5);
        }
    }

    #[test]
    fn norm_of_zero_module_is_zero() {
        let m = PeftModule::Adapter(AdapterModule::<f32> {
            w_a: Tensor::zeros(&[3, 2]),
            b_a: Tensor::zeros(&[2]),
            w_b: Tensor::zeros(&[2, 3]),
            b_b: Tensor::zeros(&[3]),
        });
        assert_eq!(module_l2_norm(&m), 0.0);
    }

    #[test]
    fn norm_three_four_is_five() {
        let m = PeftModule::Lora(LoraModule {
            q: LoraProjection {
                w_down: t64(&[1, 2], &[3.0, 4.0]),
                w_up: Tensor::zeros(&[1, 2]),
            },
            k: LoraProjection {
                w_down: Tensor::zeros(&[1, 2]),
                w_up: Tensor::zeros(&[1, 2]),
            },
            v: LoraProjection {
                w_down: Tensor::zeros(&[1, 2]),
                w_up: Tensor::zeros(&[1, 2]),
            },
            alpha: 1.0,
        });
        assert!((module_l2_norm(&m) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn norm_is_absolutely_homogeneous() {
        let mut rng = Rng::new(10);
        let mut m = init_module::<f64>(&PeftConfig::lora(3, 1.0), 8, &mut rng);
        // give w_up some mass too
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += 0.1;
            }
        }
        let n1 = module_l2_norm(&m);
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v *= -2.5;
            }
        }
        let n2 = module_l2_norm(&m);
        assert!(rel_err(n2, 2.5 * n1) < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(3e-4, 0, 100), 3e-4);
        assert!(cosine_lr(3e-4, 100, 100).abs() < 1e-12);
        assert!((cosine_lr(2.0, 50, 100) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_minus_lr() {
        // Single scalar, g = 1, lr = 0.1, wd = 0 → Δp ≈ −0.1.
        let mut p = t64(&[1], &[0.0]);
        let g = t64(&[1], &[1.0]);
        let mut s = OptimState::new(&[&[1]], 0.1, 1_000_000);
        s.weight_decay = 0.0;
        adamw_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8, "got {}", p.data()[0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_fixed_point() {
        let mut p = t64(&[2], &[0.7, -0.3]);
        let before = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut s = OptimState::new(&[&[2]], 0.1, 10);
        s.weight_decay = 0.0;
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[&g], &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adamw_weight_decay_pulls_toward_zero() {
        let mut p = t64(&[1], &[1.0]);
        let g = Tensor::zeros(&[1]);
        let mut s = OptimState::new(&[&[1]], 0.1, 10);
        adamw_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 * ADAMW_WEIGHT_DECAY)).abs() < 1e-12);
    }

    #[test]
    fn adamw_shape_mismatch_errors() {
        let mut p = t64(&[2], &[0.0, 0.0]);
        let g = Tensor::zeros(&[3]);
        let mut s = OptimState::new(&[&[2]], 0.1, 10);
        assert!(adamw_step(&mut [&mut p], &[&g], &mut s).is_err());
    }
}
