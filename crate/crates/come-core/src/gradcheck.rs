//! Analytic directional derivatives (JVPs) for every learned parameter of
//! the connector (mixing logits, skew parameters, the residual gate, and
//! the attention projections), validated against a central finite-difference
//! oracle. This is the desk-scale certificate that the whole pipeline is
//! differentiable end to end.
//!
//! Tensor-valued derivatives are reduced to scalars by dotting with a fixed
//! random probe, so a single central difference checks the full Jacobian
//! action along a random direction.

use crate::error::{Error, Result};
use crate::fusion::{cross_attention_trace, rope2d, FusionParams, GridPositions};
use crate::grid::TokenGrid;
use crate::linalg::Lu;
use crate::ortho::{cayley, random_skew};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{softmax, Tensor};

/// Outcome of one analytic-vs-finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub component: String,
    pub param: String,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn csv_header() -> &'static str {
        "component,param,analytic,fd,rel_err,pass"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.12e},{:.12e},{:.3e},{}",
            self.component, self.param, self.analytic, self.fd, self.rel_err, self.pass
        )
    }
}

/// Renders a full report as CSV.
pub fn reports_to_csv(reports: &[GradReport]) -> String {
    let mut out = String::from(GradReport::csv_header());
    out.push('\n');
    for r in reports {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1e-12)
}

/// Central finite difference of a scalar function along direction `v`:
/// `(f(x + h v) - f(x - h v)) / (2 h)`.
pub fn fd_directional<F, Func>(f: Func, x: &[F], v: &[F], h: F) -> Result<F>
where
    F: Scalar,
    Func: Fn(&[F]) -> Result<F>,
{
    if h <= F::zero() {
        return Err(Error::InvalidValue(format!(
            "fd_directional: step must be positive, got {h}"
        )));
    }
    if x.len() != v.len() {
        return Err(Error::InvalidShape(format!(
            "fd_directional: point has {} entries, direction {}",
            x.len(),
            v.len()
        )));
    }
    let plus: Vec<F> = x.iter().zip(v).map(|(&a, &d)| a + h * d).collect();
    let minus: Vec<F> = x.iter().zip(v).map(|(&a, &d)| a - h * d).collect();
    let fp = f(&plus)?;
    let fm = f(&minus)?;
    if !(fp.is_finite() && fm.is_finite()) {
        return Err(Error::InvalidValue(
            "fd_directional: non-finite function value".into(),
        ));
    }
    Ok((fp - fm) / (F::cast(2.0) * h))
}

/// Directional derivative of the softmax-weighted layer sum
/// `V(s) = sum_l w_l(s) X_l` along a logit direction: the softmax Jacobian
/// gives `dw = w * (dir - <w, dir>)`.
pub fn jvp_mixing<F: Scalar>(
    logits: &[F],
    direction: &[F],
    layer_values: &[Tensor<F>],
) -> Result<Tensor<F>> {
    if logits.len() != direction.len() {
        return Err(Error::InvalidShape(format!(
            "jvp_mixing: {} logits vs {} direction entries",
            logits.len(),
            direction.len()
        )));
    }
    if logits.len() != layer_values.len() {
        return Err(Error::InvalidShape(format!(
            "jvp_mixing: {} logits vs {} layer tensors",
            logits.len(),
            layer_values.len()
        )));
    }
    let w = softmax(logits)?;
    let mut mean_dir = F::zero();
    for (wi, di) in w.iter().zip(direction) {
        mean_dir = mean_dir + *wi * *di;
    }
    let mut out = Tensor::zeros(layer_values[0].shape().to_vec())?;
    for ((wi, di), x) in w.iter().zip(direction).zip(layer_values) {
        let dw = *wi * (*di - mean_dir);
        out = out.add(&x.scale(dw)?)?;
    }
    Ok(out)
}

/// Directional derivative of the Cayley transform along a skew direction E:
/// `dQ = (E/2)(I - A/2)^-1 + Q (E/2)(I - A/2)^-1`, each inverse applied via
/// an LU solve.
pub fn jvp_cayley<F: Scalar>(a: &Tensor<F>, e: &Tensor<F>) -> Result<Tensor<F>> {
    let n = match a.shape() {
        [r, c] if r == c => *r,
        other => {
            return Err(Error::InvalidShape(format!(
                "jvp_cayley: A must be square, got {other:?}"
            )))
        }
    };
    if e.shape() != a.shape() {
        return Err(Error::InvalidShape(format!(
            "jvp_cayley: direction shape {:?} vs parameter {:?}",
            e.shape(),
            a.shape()
        )));
    }
    let half = F::cast(0.5);
    let mut minus = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let eye = if i == j { F::one() } else { F::zero() };
            minus[i * n + j] = eye - a.at(i, j) * half;
        }
    }
    let minus = Tensor::new(vec![n, n], minus)?;
    // S = (E/2) (I - A/2)^-1, via (I - A/2)^T S^T = (E/2)^T.
    let s = Lu::factor(&minus.transpose()?)?
        .solve(&e.scale(half)?.transpose()?)?
        .transpose()?;
    let q = cayley(a)?;
    s.add(&q.matmul(&s)?)
}

/// Derivative of the gated residual with respect to the gate:
/// `d/dgamma [base + tanh(gamma) attn] = sech^2(gamma) * attn`.
pub fn jvp_gate<F: Scalar>(gamma: F, direction: F, attn: &Tensor<F>) -> Result<Tensor<F>> {
    if !gamma.is_finite() {
        return Err(Error::InvalidValue("jvp_gate: gamma must be finite".into()));
    }
    let t = gamma.tanh();
    attn.scale((F::one() - t * t) * direction)
}

/// Which attention projection a directional derivative targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnParam {
    WQ,
    WK,
    WV,
}

/// Directional derivative of [`crate::fusion::cross_attention`] with respect
/// to one of the projection matrices, along `direction` (same shape as the
/// projection).
pub fn jvp_attention<F: Scalar>(
    queries: &TokenGrid<F>,
    context: &TokenGrid<F>,
    params: &FusionParams<F>,
    ln_epsilon: F,
    which: AttnParam,
    direction: &Tensor<F>,
) -> Result<Tensor<F>> {
    let target = match which {
        AttnParam::WQ => &params.w_q,
        AttnParam::WK => &params.w_k,
        AttnParam::WV => &params.w_v,
    };
    if direction.shape() != target.shape() {
        return Err(Error::InvalidShape(format!(
            "jvp_attention: direction shape {:?} vs parameter {:?}",
            direction.shape(),
            target.shape()
        )));
    }
    let trace = cross_attention_trace(queries, context, params, ln_epsilon)?;
    let pos_q = GridPositions::for_grid(queries);
    let pos_k = GridPositions::for_grid(context);
    let n_q = trace.out.nrows();
    let d_h = params.d_h;
    let inv_sqrt = F::cast(1.0 / (d_h as f64).sqrt());

    let head_slice = |all: &Tensor<F>, head: usize| -> Tensor<F> {
        let t = all.nrows();
        let mut data = Vec::with_capacity(t * d_h);
        for i in 0..t {
            data.extend_from_slice(&all.row(i)[head * d_h..(head + 1) * d_h]);
        }
        Tensor::new(vec![t, d_h], data).expect("finite slice")
    };

    // Softmax row Jacobian applied to a score perturbation:
    // dP = P o (dS - rowsum(P o dS)).
    let softmax_jvp = |p: &Tensor<F>, ds: &Tensor<F>| -> Result<Tensor<F>> {
        let (r, c) = (p.nrows(), p.ncols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let mut dot = F::zero();
            for j in 0..c {
                dot = dot + p.at(i, j) * ds.at(i, j);
            }
            for j in 0..c {
                out[i * c + j] = p.at(i, j) * (ds.at(i, j) - dot);
            }
        }
        Tensor::new(vec![r, c], out)
    };

    let mut d_heads: Vec<Tensor<F>> = Vec::with_capacity(params.heads);
    match which {
        AttnParam::WV => {
            let dv_all = trace.y.matmul(direction)?;
            for h in 0..params.heads {
                let dv = head_slice(&dv_all, h);
                d_heads.push(trace.probs[h].matmul(&dv)?);
            }
        }
        AttnParam::WQ => {
            let dq_all = trace.x.matmul(direction)?;
            for h in 0..params.heads {
                let dq = rope2d(
                    &head_slice(&dq_all, h),
                    &pos_q,
                    params.rope_base,
                    params.rope_scale,
                )?;
                let ds = dq.matmul(&trace.k[h].transpose()?)?.scale(inv_sqrt)?;
                let dp = softmax_jvp(&trace.probs[h], &ds)?;
                d_heads.push(dp.matmul(&trace.v[h])?);
            }
        }
        AttnParam::WK => {
            let dk_all = trace.y.matmul(direction)?;
            for h in 0..params.heads {
                let dk = rope2d(
                    &head_slice(&dk_all, h),
                    &pos_k,
                    params.rope_base,
                    params.rope_scale,
                )?;
                let ds = trace.q[h].matmul(&dk.transpose()?)?.scale(inv_sqrt)?;
                let dp = softmax_jvp(&trace.probs[h], &ds)?;
                d_heads.push(dp.matmul(&trace.v[h])?);
            }
        }
    }
    let mut concat = Vec::with_capacity(n_q * params.heads * d_h);
    for i in 0..n_q {
        for head in &d_heads {
            concat.extend_from_slice(head.row(i));
        }
    }
    Tensor::new(vec![n_q, params.heads * d_h], concat)?.matmul(&params.w_out)
}

/// Default finite-difference step for the suite.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Instances per component; each pairs one analytic JVP against one central
/// difference.
pub const INSTANCES_PER_COMPONENT: usize = 20;

const TOL_NONLINEAR: f64 = 1e-4;
const TOL_LINEAR: f64 = 1e-5;

fn probe_dot(probe: &Tensor<f64>, value: &Tensor<f64>) -> f64 {
    probe
        .data()
        .iter()
        .zip(value.data())
        .map(|(p, v)| p * v)
        .sum()
}

fn seeded_tensor(shape: Vec<usize>, key: &[u64], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let mut k = key.to_vec();
            k.push(i as u64);
            rng::range_f64(&k, -scale, scale)
        })
        .collect();
    Tensor::new(shape, data).expect("seeded tensor")
}

fn seeded_grid(rows: usize, cols: usize, dim: usize, key: &[u64]) -> TokenGrid<f64> {
    TokenGrid::new(rows, cols, seeded_tensor(vec![rows * cols, dim], key, 1.0), false)
        .expect("seeded grid")
}

fn mixing_instance(seed: u64, i: usize, h: f64) -> GradReport {
    let k = 2 + i % 5;
    let tokens = 1 + i % 4;
    let dim = 2 + i % 6;
    let key = |tag: u64| vec![seed, 10, tag, i as u64];
    let logits: Vec<f64> = (0..k)
        .map(|l| rng::range_f64(&[seed, 10, 1, i as u64, l as u64], -1.0, 1.0))
        .collect();
    let direction: Vec<f64> = (0..k)
        .map(|l| rng::range_f64(&[seed, 10, 2, i as u64, l as u64], -1.0, 1.0))
        .collect();
    let layers: Vec<Tensor<f64>> = (0..k)
        .map(|l| seeded_tensor(vec![tokens, dim], &[seed, 10, 3, i as u64, l as u64], 1.0))
        .collect();
    let probe = seeded_tensor(vec![tokens, dim], &key(4), 1.0);

    let analytic = probe_dot(&probe, &jvp_mixing(&logits, &direction, &layers).unwrap());
    let f = |s: &[f64]| -> Result<f64> {
        let w = softmax(s)?;
        let mut acc = Tensor::zeros(vec![tokens, dim])?;
        for (wi, x) in w.iter().zip(&layers) {
            acc = acc.add(&x.scale(*wi)?)?;
        }
        Ok(probe_dot(&probe, &acc))
    };
    let fd = fd_directional(f, &logits, &direction, h).unwrap();
    let rel_err = relative_error(analytic, fd);
    GradReport {
        component: "mixing".into(),
        param: format!("logits[{i:02}]"),
        analytic,
        fd,
        rel_err,
        pass: rel_err <= TOL_NONLINEAR,
    }
}

fn cayley_instance(seed: u64, i: usize, h: f64) -> GradReport {
    let d = [2usize, 4, 8, 16][i % 4];
    let a = random_skew::<f64>(d, 1.0, &[seed, 20, 1, i as u64]).unwrap();
    let e = random_skew::<f64>(d, 1.0, &[seed, 20, 2, i as u64]).unwrap();
    let probe = seeded_tensor(vec![d, d], &[seed, 20, 3, i as u64], 1.0);

    let analytic = probe_dot(&probe, &jvp_cayley(&a, &e).unwrap());
    let f = |flat: &[f64]| -> Result<f64> {
        let m = Tensor::new(vec![d, d], flat.to_vec())?;
        Ok(probe_dot(&probe, &cayley(&m)?))
    };
    let fd = fd_directional(f, a.data(), e.data(), h).unwrap();
    let rel_err = relative_error(analytic, fd);
    GradReport {
        component: "cayley".into(),
        param: format!("A[{i:02}]"),
        analytic,
        fd,
        rel_err,
        pass: rel_err <= TOL_NONLINEAR,
    }
}

fn gate_instance(seed: u64, i: usize, h: f64) -> GradReport {
    let shape = vec![1 + i % 3, 2 + i % 4];
    let base = seeded_tensor(shape.clone(), &[seed, 30, 1, i as u64], 1.0);
    let attn = seeded_tensor(shape.clone(), &[seed, 30, 2, i as u64], 1.0);
    let probe = seeded_tensor(shape, &[seed, 30, 3, i as u64], 1.0);
    let gamma = rng::range_f64(&[seed, 30, 4, i as u64], -1.5, 1.5);
    let dgamma = rng::range_f64(&[seed, 30, 5, i as u64], -1.0, 1.0);

    let analytic = probe_dot(&probe, &jvp_gate(gamma, dgamma, &attn).unwrap());
    let f = |g: &[f64]| -> Result<f64> {
        let fused = crate::fusion::gated_fuse(&base, &attn, g[0])?;
        Ok(probe_dot(&probe, &fused))
    };
    let fd = fd_directional(f, &[gamma], &[dgamma], h).unwrap();
    let rel_err = relative_error(analytic, fd);
    GradReport {
        component: "gate".into(),
        param: format!("gamma[{i:02}]"),
        analytic,
        fd,
        rel_err,
        pass: rel_err <= TOL_NONLINEAR,
    }
}

fn attention_instance(seed: u64, i: usize, which: AttnParam, h: f64) -> GradReport {
    let (component, param_name, tag) = match which {
        AttnParam::WQ => ("attn_wq", "W_Q", 40u64),
        AttnParam::WK => ("attn_wk", "W_K", 41),
        AttnParam::WV => ("attn_wv", "W_V", 42),
    };
    let heads = 1 + i % 2;
    let d_h = 4;
    let d_q = 3 + i % 4;
    let d_c = 3 + (i + 1) % 4;
    let (qr, qc) = ([1usize, 2][i % 2], [2usize, 1][i % 2]);
    let queries = seeded_grid(qr, qc, d_q, &[seed, tag, 1, i as u64]);
    let context = seeded_grid(2, 2, d_c, &[seed, tag, 2, i as u64]);
    let inner = heads * d_h;
    let params = FusionParams::new(
        seeded_tensor(vec![d_q, inner], &[seed, tag, 3, i as u64], 0.8),
        seeded_tensor(vec![d_c, inner], &[seed, tag, 4, i as u64], 0.8),
        seeded_tensor(vec![d_c, inner], &[seed, tag, 5, i as u64], 0.8),
        seeded_tensor(vec![inner, d_q], &[seed, tag, 6, i as u64], 0.8),
        heads,
        d_h,
        0.0,
        FusionParams::<f64>::DEFAULT_ROPE_BASE,
        FusionParams::<f64>::DEFAULT_ROPE_SCALE,
    )
    .unwrap();
    let target_shape = match which {
        AttnParam::WQ => params.w_q.shape().to_vec(),
        AttnParam::WK | AttnParam::WV => params.w_k.shape().to_vec(),
    };
    let direction = seeded_tensor(target_shape, &[seed, tag, 7, i as u64], 1.0);
    let probe = seeded_tensor(
        vec![queries.token_count(), d_q],
        &[seed, tag, 8, i as u64],
        1.0,
    );
    let ln_eps = 1e-6;

    let analytic = probe_dot(
        &probe,
        &jvp_attention(&queries, &context, &params, ln_eps, which, &direction).unwrap(),
    );
    let base = match which {
        AttnParam::WQ => params.w_q.clone(),
        AttnParam::WK => params.w_k.clone(),
        AttnParam::WV => params.w_v.clone(),
    };
    let f = |flat: &[f64]| -> Result<f64> {
        let w = Tensor::new(base.shape().to_vec(), flat.to_vec())?;
        let mut p = params.clone();
        match which {
            AttnParam::WQ => p.w_q = w,
            AttnParam::WK => p.w_k = w,
            AttnParam::WV => p.w_v = w,
        }
        let out = crate::fusion::cross_attention(&queries, &context, &p, ln_eps)?;
        Ok(probe_dot(&probe, &out))
    };
    let fd = fd_directional(f, base.data(), direction.data(), h).unwrap();
    let rel_err = relative_error(analytic, fd);
    let tol = if which == AttnParam::WV { TOL_LINEAR } else { TOL_NONLINEAR };
    GradReport {
        component: component.into(),
        param: format!("{param_name}[{i:02}]"),
        analytic,
        fd,
        rel_err,
        pass: rel_err <= tol,
    }
}

/// Runs every JVP-vs-FD check on seeded instances with the given step.
/// Report order is deterministic: components alphabetically, instances in
/// index order.
pub fn gradcheck_suite_with_step(seed: u64, h: f64) -> Vec<GradReport> {
    let mut reports = Vec::with_capacity(6 * INSTANCES_PER_COMPONENT);
    for i in 0..INSTANCES_PER_COMPONENT {
        reports.push(attention_instance(seed, i, AttnParam::WK, h));
    }
    for i in 0..INSTANCES_PER_COMPONENT {
        reports.push(attention_instance(seed, i, AttnParam::WQ, h));
    }
    for i in 0..INSTANCES_PER_COMPONENT {
        reports.push(attention_instance(seed, i, AttnParam::WV, h));
    }
    for i in 0..INSTANCES_PER_COMPONENT {
        reports.push(cayley_instance(seed, i, h));
    }
    for i in 0..INSTANCES_PER_COMPONENT {
        reports.push(gate_instance(seed, i, h));
    }
    for i in 0..INSTANCES_PER_COMPONENT {
        reports.push(mixing_instance(seed, i, h));
    }
    reports
}

/// [`gradcheck_suite_with_step`] at the default step.
pub fn gradcheck_suite(seed: u64) -> Vec<GradReport> {
    gradcheck_suite_with_step(seed, DEFAULT_FD_STEP)
}
