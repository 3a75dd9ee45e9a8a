//! Reverse-mode differentiation of the unrolled mean-field loop.
//!
//! [`forward_with_tape`] records coarse operations (kernel evaluation, message
//! gathers, compatibility products, softmax, Dice) together with every
//! intermediate buffer. [`backward`] walks the record in reverse with
//! hand-written adjoints. The forward arithmetic is the same as
//! [`crate::meanfield::mean_field_infer`], so `q` matches it bit for bit.

use crate::conv::{self, Offset};
use crate::error::{Error, Result};
use crate::meanfield::{first_non_finite, CamParams};
use crate::potentials::{compat_apply, smooth_offsets};
use crate::unary::{tinynet_backward, tinynet_forward, TinyNetParams, TinyNetTrace};
use crate::volume::{softmax_into, AtlasPair, Dims, ProbVolume, ScalarVolume};

/// Smoothing constant in the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// Where the unary logits come from during training.
#[derive(Debug, Clone, PartialEq)]
pub enum UnaryModel {
    /// Precomputed logits; nothing to learn.
    Fixed(ProbVolume),
    TinyNet(TinyNetParams),
}

impl UnaryModel {
    pub fn k(&self) -> usize {
        match self {
            UnaryModel::Fixed(u) => u.k(),
            UnaryModel::TinyNet(p) => p.k(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            UnaryModel::Fixed(_) => 0,
            UnaryModel::TinyNet(p) => p.flat().len(),
        }
    }

    /// Raw logits for `target`.
    pub fn logits(&self, target: &ScalarVolume) -> Result<ProbVolume> {
        let (u, _) = self.logits_traced(target)?;
        Ok(ProbVolume::from_parts(self.k(), target.dims(), u, false))
    }

    fn logits_traced(&self, target: &ScalarVolume) -> Result<(Vec<f64>, Option<TinyNetTrace>)> {
        match self {
            UnaryModel::Fixed(u) => {
                if u.dims() != target.dims() {
                    return Err(Error::shape(format!("unary {} vs target {}", u.dims(), target.dims())));
                }
                Ok((u.data().to_vec(), None))
            }
            UnaryModel::TinyNet(p) => {
                let trace = tinynet_forward(p, target);
                Ok((trace.logits.clone(), Some(trace)))
            }
        }
    }
}

/// Generalized multi-class Dice loss, evenly weighted over classes.
pub fn dice_loss(q: &ProbVolume, gt: &ProbVolume) -> Result<f64> {
    check_dice_shapes(q, gt)?;
    Ok(dice_value(q.k(), q.dims().len(), q.data(), gt.data()))
}

/// `∂ dice_loss / ∂ q`, channel-major like `q`.
pub fn dice_grad(q: &ProbVolume, gt: &ProbVolume) -> Result<Vec<f64>> {
    check_dice_shapes(q, gt)?;
    Ok(dice_grad_raw(q.k(), q.dims().len(), q.data(), gt.data(), 1.0))
}

fn check_dice_shapes(q: &ProbVolume, gt: &ProbVolume) -> Result<()> {
    if q.dims() != gt.dims() || q.k() != gt.k() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            q.k(),
            q.dims(),
            gt.k(),
            gt.dims()
        )));
    }
    Ok(())
}

fn dice_terms(n: usize, q: &[f64], g: &[f64], l: usize) -> (f64, f64) {
    let (ql, gl) = (&q[l * n..(l + 1) * n], &g[l * n..(l + 1) * n]);
    let inter: f64 = ql.iter().zip(gl).map(|(a, b)| a * b).sum();
    let total: f64 = ql.iter().sum::<f64>() + gl.iter().sum::<f64>();
    (2.0 * inter + DICE_EPS, total + DICE_EPS)
}

fn dice_value(k: usize, n: usize, q: &[f64], g: &[f64]) -> f64 {
    let s: f64 = (0..k).map(|l| {
        let (num, den) = dice_terms(n, q, g, l);
        num / den
    })
    .sum();
    1.0 - s / k as f64
}

fn dice_grad_raw(k: usize, n: usize, q: &[f64], g: &[f64], upstream: f64) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for l in 0..k {
        let (num, den) = dice_terms(n, q, g, l);
        let f = -upstream / (k as f64 * den * den);
        for i in 0..n {
            out[l * n + i] = f * (2.0 * g[l * n + i] * den - num);
        }
    }
    out
}

type Slot = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Term {
    Shared,
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Unary { out: Slot },
    Zeros { out: Slot },
    PriorKernel { sim: Slot, out: Slot },
    PriorMessage { kernel: Slot, out: Slot },
    SmoothKernel { out: Slot },
    Softmax { input: Slot, out: Slot },
    SmoothMessage { q: Slot, kernel: Slot, raw: Slot, out: Slot },
    Add { a: Slot, b: Slot, out: Slot },
    Compat { term: Term, input: Slot, out: Slot },
    Sub { a: Slot, b: Slot, out: Slot },
    Dice { q: Slot, out: Slot },
}

impl Op {
    fn code(&self) -> [u64; 5] {
        let s = |v: &Slot| *v as u64;
        match self {
            Op::Unary { out } => [1, s(out), 0, 0, 0],
            Op::Zeros { out } => [2, s(out), 0, 0, 0],
            Op::PriorKernel { sim, out } => [3, s(sim), s(out), 0, 0],
            Op::PriorMessage { kernel, out } => [4, s(kernel), s(out), 0, 0],
            Op::SmoothKernel { out } => [5, s(out), 0, 0, 0],
            Op::Softmax { input, out } => [6, s(input), s(out), 0, 0],
            Op::SmoothMessage { q, kernel, raw, out } => [7, s(q), s(kernel), s(raw), s(out)],
            Op::Add { a, b, out } => [8, s(a), s(b), s(out), 0],
            Op::Compat { term, input, out } => [9, *term as u64, s(input), s(out), 0],
            Op::Sub { a, b, out } => [10, s(a), s(b), s(out), 0],
            Op::Dice { q, out } => [11, s(q), s(out), 0, 0],
        }
    }
}

/// Gradients of the recorded loss; shapes mirror [`CamParams`] and the unary model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_mu: Vec<f64>,
    /// Present when the parameters carry a separate smoothness compatibility.
    pub d_mu_smooth: Option<Vec<f64>>,
    pub d_omega_p: ScalarVolume,
    pub d_omega_s: Vec<f64>,
    pub d_theta_p: f64,
    pub d_theta_s: f64,
    pub d_unary_params: Vec<f64>,
}

impl Gradients {
    pub fn zeros(params: &CamParams, dims: Dims, unary_params: usize) -> Self {
        let k = params.k();
        Gradients {
            d_mu: vec![0.0; k * k],
            d_mu_smooth: params.mu_smooth.as_ref().map(|_| vec![0.0; k * k]),
            d_omega_p: ScalarVolume::zeros(dims),
            d_omega_s: vec![0.0; k],
            d_theta_p: 0.0,
            d_theta_s: 0.0,
            d_unary_params: vec![0.0; unary_params],
        }
    }

    /// `self += other`, element by element.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        fn acc(a: &mut [f64], b: &[f64]) -> Result<()> {
            if a.len() != b.len() {
                return Err(Error::shape(format!("gradient length {} vs {}", a.len(), b.len())));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            Ok(())
        }
        acc(&mut self.d_mu, &other.d_mu)?;
        match (&mut self.d_mu_smooth, &other.d_mu_smooth) {
            (Some(a), Some(b)) => acc(a, b)?,
            (None, None) => {}
            _ => return Err(Error::shape("gradients disagree on the smoothness compatibility")),
        }
        acc(self.d_omega_p.data_mut(), other.d_omega_p.data())?;
        acc(&mut self.d_omega_s, &other.d_omega_s)?;
        acc(&mut self.d_unary_params, &other.d_unary_params)?;
        self.d_theta_p += other.d_theta_p;
        self.d_theta_s += other.d_theta_s;
        Ok(())
    }

    pub fn scale(&mut self, f: f64) {
        let all = self
            .d_mu
            .iter_mut()
            .chain(self.d_mu_smooth.iter_mut().flatten())
            .chain(self.d_omega_p.data_mut())
            .chain(&mut self.d_omega_s)
            .chain(&mut self.d_unary_params);
        all.for_each(|v| *v *= f);
        self.d_theta_p *= f;
        self.d_theta_s *= f;
    }

    pub fn is_finite(&self) -> bool {
        self.d_mu.iter().chain(self.d_mu_smooth.iter().flatten()).all(|v| v.is_finite())
            && self.d_omega_p.data().iter().chain(&self.d_omega_s).chain(&self.d_unary_params).all(|v| v.is_finite())
            && self.d_theta_p.is_finite()
            && self.d_theta_s.is_finite()
    }
}

/// Recorded forward pass: operations, intermediate buffers and a snapshot of
/// the inputs and parameters they were computed from.
#[derive(Debug, Clone)]
pub struct Tape {
    dims: Dims,
    k: usize,
    target: ScalarVolume,
    atlas: AtlasPair,
    gt: ProbVolume,
    params: CamParams,
    model: UnaryModel,
    trace: Option<TinyNetTrace>,
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
    q: Slot,
    loss: Slot,
    checksum: u64,
}

fn mix(h: u64, v: u64) -> u64 {
    (h.rotate_left(5) ^ v).wrapping_mul(0x0100_0000_01b3)
}

impl Tape {
    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    pub fn loss(&self) -> f64 {
        self.values[self.loss][0]
    }

    pub fn q(&self) -> ProbVolume {
        ProbVolume::from_parts(self.k, self.dims, self.values[self.q].clone(), true)
    }

    pub fn params(&self) -> &CamParams {
        &self.params
    }

    /// Hidden-unit activity of the recorded unary network, if any.
    pub fn relu_pattern(&self) -> Option<Vec<bool>> {
        self.trace.as_ref().map(|t| t.relu_pattern())
    }

    /// Raw access to a recorded buffer. Any change is reported as corruption
    /// by [`backward`] and [`Tape::replay`].
    pub fn slot_mut(&mut self, slot: usize) -> Option<&mut Vec<f64>> {
        self.values.get_mut(slot)
    }

    pub fn slot_count(&self) -> usize {
        self.values.len()
    }

    fn compute_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for op in &self.ops {
            for c in op.code() {
                h = mix(h, c);
            }
        }
        for v in &self.values {
            h = mix(h, v.len() as u64);
            for x in v {
                h = mix(h, x.to_bits());
            }
        }
        if let Some(t) = &self.trace {
            for x in t.hidden1.iter().chain(&t.hidden2).chain(&t.logits) {
                h = mix(h, x.to_bits());
            }
        }
        h
    }

    fn verify(&self) -> Result<()> {
        if self.compute_checksum() != self.checksum {
            return Err(Error::TapeIntegrity("recorded buffers were modified after the forward pass".into()));
        }
        Ok(())
    }

    /// Re-executes the recorded operations from the snapshot inputs and
    /// returns the final `Q`. Identical to the recorded `Q` bit for bit.
    pub fn replay(&self) -> Result<ProbVolume> {
        self.verify()?;
        let mut values = vec![Vec::new(); self.values.len()];
        let ctx = self.context();
        for op in &self.ops {
            ctx.exec(op, &mut values)?;
        }
        Ok(ProbVolume::from_parts(self.k, self.dims, std::mem::take(&mut values[self.q]), true))
    }

    fn context(&self) -> Ctx<'_> {
        Ctx {
            dims: self.dims,
            k: self.k,
            target: &self.target,
            atlas: &self.atlas,
            gt: &self.gt,
            params: &self.params,
            model: &self.model,
            offsets_p: self.params.conn_p.offsets(),
            offsets_s: smooth_offsets(self.params.conn_s),
        }
    }
}

struct Ctx<'a> {
    dims: Dims,
    k: usize,
    target: &'a ScalarVolume,
    atlas: &'a AtlasPair,
    gt: &'a ProbVolume,
    params: &'a CamParams,
    model: &'a UnaryModel,
    offsets_p: Vec<Offset>,
    offsets_s: Vec<Offset>,
}

impl Ctx<'_> {
    fn mu(&self, term: Term) -> &[f64] {
        match (term, &self.params.mu_smooth) {
            (Term::Smooth, Some(m)) => m.values(),
            _ => self.params.mu.values(),
        }
    }

    /// Runs one operation, writing its outputs into `values`.
    fn exec(&self, op: &Op, values: &mut [Vec<f64>]) -> Result<Option<TinyNetTrace>> {
        let (dims, k, n) = (self.dims, self.k, self.dims.len());
        let mut trace = None;
        match *op {
            Op::Unary { out } => {
                let (u, t) = self.model.logits_traced(self.target)?;
                if let Some(i) = first_non_finite(&u, n) {
                    return Err(Error::NonFinite { voxel: i, context: Some("unary logits".into()) });
                }
                values[out] = u;
                trace = t;
            }
            Op::Zeros { out } => values[out] = vec![0.0; k * n],
            Op::PriorKernel { sim, out } => {
                let e = conv::similarity_field(
                    dims,
                    &self.offsets_p,
                    self.target.data(),
                    self.atlas.scan().data(),
                    self.params.prior.theta_p,
                );
                let omega = self.params.prior.omega_p.data();
                let mut scaled = e.clone();
                for plane in scaled.chunks_mut(n.max(1)) {
                    for (v, &w) in plane.iter_mut().zip(omega) {
                        *v *= w;
                    }
                }
                values[sim] = e;
                values[out] = scaled;
            }
            Op::PriorMessage { kernel, out } => {
                values[out] =
                    conv::gather(dims, k, &self.offsets_p, &values[kernel], self.atlas.labels().data(), None);
            }
            Op::SmoothKernel { out } => {
                let t = self.target.data();
                values[out] = conv::similarity_field(dims, &self.offsets_s, t, t, self.params.smooth.theta_s);
            }
            Op::Softmax { input, out } => {
                let mut q = vec![0.0; k * n];
                softmax_into(k, n, &values[input], &mut q);
                values[out] = q;
            }
            Op::SmoothMessage { q, kernel, raw, out } => {
                let r = conv::gather(dims, k, &self.offsets_s, &values[kernel], &values[q], None);
                let w = &self.params.smooth.omega_s;
                let scaled = r.iter().enumerate().map(|(j, v)| v * w[j / n]).collect();
                values[raw] = r;
                values[out] = scaled;
            }
            Op::Add { a, b, out } => values[out] = crate::meanfield::add(&values[a], &values[b]),
            Op::Compat { term, input, out } => values[out] = compat_apply(self.mu(term), k, n, &values[input], false),
            Op::Sub { a, b, out } => {
                let z = crate::meanfield::sub(&values[a], &values[b]);
                if let Some(i) = first_non_finite(&z, n) {
                    return Err(Error::NonFinite { voxel: i, context: Some("mean-field energy".into()) });
                }
                values[out] = z;
            }
            Op::Dice { q, out } => values[out] = vec![dice_value(k, n, &values[q], self.gt.data())],
        }
        Ok(trace)
    }
}

struct Recorder<'a> {
    ctx: Ctx<'a>,
    ops: Vec<Op>,
    values: Vec<Vec<f64>>,
    trace: Option<TinyNetTrace>,
}

impl Recorder<'_> {
    fn slot(&mut self) -> Slot {
        self.values.push(Vec::new());
        self.values.len() - 1
    }

    fn run(&mut self, op: Op) -> Result<()> {
        if let Some(t) = self.ctx.exec(&op, &mut self.values)? {
            self.trace = Some(t);
        }
        self.ops.push(op);
        Ok(())
    }

    fn unary(&mut self, f: impl FnOnce(Slot) -> Op) -> Result<Slot> {
        let out = self.slot();
        self.run(f(out))?;
        Ok(out)
    }

    fn binary(&mut self, f: impl FnOnce(Slot, Slot) -> Op) -> Result<(Slot, Slot)> {
        let (a, b) = (self.slot(), self.slot());
        self.run(f(a, b))?;
        Ok((a, b))
    }
}

/// Runs mean-field inference while recording a tape, and evaluates the Dice
/// loss of the final `Q` against the one-hot `gt`.
pub fn forward_with_tape(
    target: &ScalarVolume,
    atlas: &AtlasPair,
    gt: &ProbVolume,
    params: &CamParams,
    model: &UnaryModel,
) -> Result<(ProbVolume, f64, Tape)> {
    let (k, dims) = (model.k(), target.dims());
    if atlas.dims() != dims || gt.dims() != dims {
        return Err(Error::shape(format!("target {dims}, atlas {}, ground truth {}", atlas.dims(), gt.dims())));
    }
    if atlas.k() != k || gt.k() != k {
        return Err(Error::shape(format!("unary model has {k} classes, atlas {}, ground truth {}", atlas.k(), gt.k())));
    }
    params.validate(k, dims)?;
    let offsets_p = params.conn_p.offsets();
    let offsets_s = smooth_offsets(params.conn_s);
    let mut r = Recorder {
        ctx: Ctx { dims, k, target, atlas, gt, params, model, offsets_p, offsets_s },
        ops: Vec::new(),
        values: Vec::new(),
        trace: None,
    };

    let u = r.unary(|out| Op::Unary { out })?;
    let mut q = r.unary(|out| Op::Softmax { input: u, out })?;
    if params.any_enabled() {
        let prior = if params.enable_prior {
            let (_, kp) = r.binary(|sim, out| Op::PriorKernel { sim, out })?;
            Some(r.unary(|out| Op::PriorMessage { kernel: kp, out })?)
        } else {
            None
        };
        let ks = if params.enable_smooth { Some(r.unary(|out| Op::SmoothKernel { out })?) } else { None };
        let zeros = if params.mu_smooth.is_some() && !(params.enable_prior && params.enable_smooth) {
            Some(r.unary(|out| Op::Zeros { out })?)
        } else {
            None
        };
        for _ in 0..params.iters {
            let smooth = match ks {
                Some(kernel) => {
                    let (_, out) = r.binary(|raw, out| Op::SmoothMessage { q, kernel, raw, out })?;
                    Some(out)
                }
                None => None,
            };
            let pairwise = match params.mu_smooth {
                None => {
                    let m = match (prior, smooth) {
                        (Some(p), Some(s)) => r.unary(|out| Op::Add { a: p, b: s, out })?,
                        (Some(m), None) | (None, Some(m)) => m,
                        (None, None) => unreachable!("some potential is enabled"),
                    };
                    r.unary(|out| Op::Compat { term: Term::Shared, input: m, out })?
                }
                Some(_) => {
                    let p_in = prior.or(zeros).expect("zero buffer recorded");
                    let s_in = smooth.or(zeros).expect("zero buffer recorded");
                    let p = r.unary(|out| Op::Compat { term: Term::Shared, input: p_in, out })?;
                    let s = r.unary(|out| Op::Compat { term: Term::Smooth, input: s_in, out })?;
                    r.unary(|out| Op::Add { a: p, b: s, out })?
                }
            };
            let z = r.unary(|out| Op::Sub { a: u, b: pairwise, out })?;
            q = r.unary(|out| Op::Softmax { input: z, out })?;
        }
    }
    let loss = r.unary(|out| Op::Dice { q, out })?;

    let Recorder { ops, values, trace, .. } = r;
    let mut tape = Tape {
        dims,
        k,
        target: target.clone(),
        atlas: atlas.clone(),
        gt: gt.clone(),
        params: params.clone(),
        model: model.clone(),
        trace,
        ops,
        values,
        q,
        loss,
        checksum: 0,
    };
    tape.checksum = tape.compute_checksum();
    Ok((tape.q(), tape.loss(), tape))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], slot: Slot, g: Vec<f64>) {
    match &mut grads[slot] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        none => *none = Some(g),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact gradients of the recorded loss with respect to every learnable
/// parameter.
pub fn backward(tape: &Tape) -> Result<Gradients> {
    tape.verify()?;
    let ctx = tape.context();
    let (dims, k, n) = (tape.dims, tape.k, tape.dims.len());
    let params = &tape.params;
    let values = &tape.values;
    let mut out = Gradients::zeros(params, dims, tape.model.param_count());
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; values.len()];
    grads[tape.loss] = Some(vec![1.0]);
    let corrupt = || Error::TapeIntegrity("operation record is inconsistent".into());

    for op in tape.ops.iter().rev() {
        let out_slot = match *op {
            Op::Unary { out }
            | Op::Zeros { out }
            | Op::PriorKernel { out, .. }
            | Op::PriorMessage { out, .. }
            | Op::SmoothKernel { out }
            | Op::Softmax { out, .. }
            | Op::SmoothMessage { out, .. }
            | Op::Add { out, .. }
            | Op::Compat { out, .. }
            | Op::Sub { out, .. }
            | Op::Dice { out, .. } => out,
        };
        let Some(g) = grads.get_mut(out_slot).ok_or_else(corrupt)?.take() else {
            continue;
        };
        match *op {
            Op::Dice { q, .. } => {
                accumulate(&mut grads, q, dice_grad_raw(k, n, &values[q], tape.gt.data(), g[0]));
            }
            Op::Softmax { input, out } => {
                let q = &values[out];
                let mut gz = vec![0.0; k * n];
                for i in 0..n {
                    let s: f64 = (0..k).map(|l| q[l * n + i] * g[l * n + i]).sum();
                    for l in 0..k {
                        gz[l * n + i] = q[l * n + i] * (g[l * n + i] - s);
                    }
                }
                accumulate(&mut grads, input, gz);
            }
            Op::Sub { a, b, .. } => {
                let neg = g.iter().map(|v| -v).collect();
                accumulate(&mut grads, a, g);
                accumulate(&mut grads, b, neg);
            }
            Op::Add { a, b, .. } => {
                accumulate(&mut grads, a, g.clone());
                accumulate(&mut grads, b, g);
            }
            Op::Compat { term, input, .. } => {
                let m = &values[input];
                let d_mu = match (term, &mut out.d_mu_smooth) {
                    (Term::Smooth, Some(d)) => d,
                    _ => &mut out.d_mu,
                };
                for l in 0..k {
                    for lp in 0..k {
                        d_mu[l * k + lp] += dot(&g[l * n..(l + 1) * n], &m[lp * n..(lp + 1) * n]);
                    }
                }
                accumulate(&mut grads, input, compat_apply(ctx.mu(term), k, n, &g, true));
            }
            Op::SmoothMessage { q, kernel, raw, .. } => {
                let w = &params.smooth.omega_s;
                for l in 0..k {
                    out.d_omega_s[l] += dot(&g[l * n..(l + 1) * n], &values[raw][l * n..(l + 1) * n]);
                }
                let gk = conv::gather_kernel_grad(dims, k, &ctx.offsets_s, &g, &values[q], Some(w));
                accumulate(&mut grads, kernel, gk);
                let gq = conv::gather_transpose(dims, k, &ctx.offsets_s, &values[kernel], &g, Some(w));
                accumulate(&mut grads, q, gq);
            }
            Op::SmoothKernel { out: ks } => {
                let t = tape.target.data();
                let theta = params.smooth.theta_s;
                let s = conv::weighted_sq_diff_sum(dims, &ctx.offsets_s, t, t, &g, &values[ks]);
                out.d_theta_s += s / theta.powi(3);
            }
            Op::PriorMessage { kernel, .. } => {
                let gk = conv::gather_kernel_grad(dims, k, &ctx.offsets_p, &g, tape.atlas.labels().data(), None);
                accumulate(&mut grads, kernel, gk);
            }
            Op::PriorKernel { sim, out: kp } => {
                let e = &values[sim];
                let d = out.d_omega_p.data_mut();
                for (gp, ep) in g.chunks(n.max(1)).zip(e.chunks(n.max(1))) {
                    for i in 0..n {
                        d[i] += gp[i] * ep[i];
                    }
                }
                let theta = params.prior.theta_p;
                let s = conv::weighted_sq_diff_sum(
                    dims,
                    &ctx.offsets_p,
                    tape.target.data(),
                    tape.atlas.scan().data(),
                    &g,
                    &values[kp],
                );
                out.d_theta_p += s / theta.powi(3);
            }
            Op::Unary { .. } => {
                if let UnaryModel::TinyNet(p) = &tape.model {
                    let trace = tape.trace.as_ref().ok_or_else(corrupt)?;
                    let gp = tinynet_backward(p, &tape.target, trace, &g)?;
                    out.d_unary_params.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
                }
            }
            Op::Zeros { .. } => {}
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { voxel: 0, context: Some("gradient".into()) });
    }
    Ok(out)
}
