//! Compilation of (system, spec, certificate, controller) into verification
//! conditions.
//!
//! A verification condition (VC) is a universally quantified strict
//! inequality `forall x in region [with gate]: violation(x) < 0`. The
//! violation function composes expression dynamics, network forward passes,
//! network input gradients, and finite expectations over the noise support;
//! it is evaluable at a point, differentiable with respect to the network
//! parameters, and enclosable over a box.

use crate::expr::{EvalError, Expr, Hyperbox, Interval, IntervalError, Var};
use crate::model::{
    step, step_box, ConstrainedSet, ModelError, Problem, SetClass, Spec, System, SystemKind,
};
use crate::net::{NetError, Network, ParamGrads};
use rand::Rng;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("spec/system mismatch: {0}")]
    SpecSystemMismatch(String),
    #[error("relu activations cannot be used with continuous-time rules")]
    ReluNotSupported,
    #[error("point lies outside the condition's region")]
    PointOutsideRegion,
    #[error("dynamics are not differentiable in the inputs: {0}")]
    NonDifferentiableDynamics(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A constrained set with carved-out subsets. Complements of constrained
/// sets are not constrained sets, so subtraction is kept explicit and
/// resolved by box classification during branch-and-bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub include: ConstrainedSet,
    pub exclude: Vec<ConstrainedSet>,
}

const EMPTY_REGION_REJECTION_LIMIT: usize = 1_000_000;

impl Region {
    pub fn whole(include: ConstrainedSet) -> Self {
        Self {
            include,
            exclude: Vec::new(),
        }
    }

    pub fn minus(include: ConstrainedSet, exclude: Vec<ConstrainedSet>) -> Self {
        Self { include, exclude }
    }

    pub fn dim(&self) -> usize {
        self.include.dim()
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool, ModelError> {
        if !self.include.contains(x)? {
            return Ok(false);
        }
        for ex in &self.exclude {
            if ex.contains(x)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Sound classification of a box against the region.
    pub fn classify(&self, b: &Hyperbox) -> SetClass {
        let mut class = self.include.classify_box(b);
        if class == SetClass::Outside {
            return SetClass::Outside;
        }
        for ex in &self.exclude {
            match ex.classify_box(b) {
                SetClass::Inside => return SetClass::Outside,
                SetClass::Outside => {}
                SetClass::Undecided => class = SetClass::Undecided,
            }
        }
        class
    }

    /// Rejection sampling uniform over the include base box.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(count);
        let mut rejections = 0usize;
        while out.len() < count {
            let x: Vec<f64> = self
                .include
                .base
                .intervals()
                .iter()
                .map(|iv| rng.gen_range(iv.lo..=iv.hi))
                .collect();
            if self.contains(&x).unwrap_or(false) {
                rejections = 0;
                out.push(x);
            } else {
                rejections += 1;
                if rejections >= EMPTY_REGION_REJECTION_LIMIT {
                    return Err(ModelError::EmptySetSuspected(rejections));
                }
            }
        }
        Ok(out)
    }
}

/// A conditional predicate restricting where the violation must be
/// negative. Gates are evaluated against the certificate's current weights:
/// at points in the learner, and by sound box pruning in the verifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    /// `V(x) <= 0`.
    CertNonpos,
    /// `V(x) < level`.
    CertBelow(f64),
    /// `|V(x)| <= band`.
    AbsBand(f64),
}

impl Gate {
    pub fn holds_at(&self, cert: &Network, x: &[f64]) -> Result<bool, NetError> {
        let v = cert.forward_scalar(x)?;
        Ok(match self {
            Gate::CertNonpos => v <= 0.0,
            Gate::CertBelow(level) => v < *level,
            Gate::AbsBand(band) => v.abs() <= *band,
        })
    }

    /// True when the gate provably fails everywhere on the box.
    pub fn provably_false_over(&self, cert: &Network, b: &Hyperbox) -> bool {
        let Ok(iv) = cert.interval_forward(b) else {
            return false;
        };
        let v = iv[0];
        match self {
            Gate::CertNonpos => v.lo > 0.0,
            Gate::CertBelow(level) => v.lo >= *level,
            Gate::AbsBand(band) => v.lo > *band || v.hi < -*band,
        }
    }
}

/// The algebraic shape of a violation function.
#[derive(Debug, Clone, PartialEq)]
pub enum ViolationForm {
    /// `sign * (V(x) - V(anchor)) + offset`; without an anchor just
    /// `sign * V(x) + offset`.
    Value {
        sign: f64,
        offset: f64,
        anchor: Option<Vec<f64>>,
    },
    /// `grad V(x) . f(x, g(x)) + offset` (continuous time).
    Lie { offset: f64 },
    /// `next * V(f(x, g(x))) + cur * V(x) + offset` (discrete time).
    StepDiff { next: f64, cur: f64, offset: f64 },
    /// `next * sum_m p_m V(f(x, g(x), w_m)) + cur * V(x) + offset`.
    ExpectedDiff { next: f64, cur: f64, offset: f64 },
    /// Strict membership of the successor in the union of the listed sets:
    /// `min_s max(per-bound and per-constraint violations of s at f(x))`.
    DomainReentry { sets: Vec<ConstrainedSet> },
}

/// One compiled proof-rule clause.
#[derive(Debug, Clone)]
pub struct VerificationCondition {
    pub id: String,
    pub region: Region,
    pub gate: Option<Gate>,
    pub form: ViolationForm,
    pub system: Arc<System>,
    pub cert: Network,
    pub ctrl: Option<Network>,
    /// `d f_i / d u_j`, present when a controller receives gradients.
    input_jacobian: Option<Vec<Vec<Expr>>>,
    /// Margin added on top of the violation inside the learner loss only.
    pub train_margin: f64,
}

/// Violation gradients with respect to the trainable networks.
#[derive(Debug, Clone)]
pub struct ViolationGrads {
    pub cert: ParamGrads,
    pub ctrl: Option<ParamGrads>,
}

impl VerificationCondition {
    /// Violation value at a region point; positive means the rule fails at
    /// `x`. Semantics exclude the training margin.
    pub fn violation(&self, x: &[f64]) -> Result<f64, RuleError> {
        if !self.region.contains(x)? {
            return Err(RuleError::PointOutsideRegion);
        }
        self.violation_with(&self.cert, self.ctrl.as_ref(), x)
    }

    /// Violation at `x` under explicit network weights (used by the learner
    /// while the embedded snapshots are stale).
    pub fn violation_with(
        &self,
        cert: &Network,
        ctrl: Option<&Network>,
        x: &[f64],
    ) -> Result<f64, RuleError> {
        let v = match &self.form {
            ViolationForm::Value {
                sign,
                offset,
                anchor,
            } => {
                let mut v = sign * cert.forward_scalar(x)?;
                if let Some(a) = anchor {
                    v -= sign * cert.forward_scalar(a)?;
                }
                v + offset
            }
            ViolationForm::Lie { offset } => {
                let grad = cert.input_gradient(x)?;
                let f = step(&self.system, ctrl, x, None)?;
                grad.iter().zip(&f).map(|(g, fi)| g * fi).sum::<f64>() + offset
            }
            ViolationForm::StepDiff { next, cur, offset } => {
                let y = step(&self.system, ctrl, x, None)?;
                next * cert.forward_scalar(&y)? + cur * cert.forward_scalar(x)? + offset
            }
            ViolationForm::ExpectedDiff { next, cur, offset } => {
                let mut expected = 0.0;
                for m in 0..self.system.noise.len() {
                    let y = step(&self.system, ctrl, x, Some(m))?;
                    expected += self.system.noise[m].1 * cert.forward_scalar(&y)?;
                }
                next * expected + cur * cert.forward_scalar(x)? + offset
            }
            ViolationForm::DomainReentry { sets } => {
                let y = step(&self.system, ctrl, x, None)?;
                let mut best = f64::INFINITY;
                for s in sets {
                    best = best.min(membership_violation(s, &y)?);
                }
                best
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(RuleError::Eval(EvalError::NonFiniteResult))
        }
    }

    /// Sound enclosure of the violation over `b`. Region constraints and
    /// gates are handled by the verifier's classification step, not here.
    pub fn enclosure(&self, b: &Hyperbox) -> Result<Interval, RuleError> {
        let cert = &self.cert;
        let ctrl = self.ctrl.as_ref();
        Ok(match &self.form {
            ViolationForm::Value {
                sign,
                offset,
                anchor,
            } => {
                let mut iv = cert.interval_forward(b)?[0].scale(*sign)?;
                if let Some(a) = anchor {
                    let va = cert.forward_scalar(a)?;
                    iv = iv.sub(&Interval::point(va)?.scale(*sign)?)?;
                }
                iv.add(&Interval::point(*offset)?)?
            }
            ViolationForm::Lie { offset } => {
                let grad = cert.interval_input_gradient(b)?;
                let f = step_box(&self.system, ctrl, b, None)?;
                let mut acc = Interval::point(*offset)?;
                for (g, fi) in grad.iter().zip(f.intervals()) {
                    acc = acc.add(&g.mul(fi)?)?;
                }
                acc
            }
            ViolationForm::StepDiff { next, cur, offset } => {
                let y = step_box(&self.system, ctrl, b, None)?;
                let v_next = cert.interval_forward(&y)?[0];
                let mut acc = v_next.scale(*next)?;
                if *cur != 0.0 {
                    let v_cur = cert.interval_forward(b)?[0];
                    acc = acc.add(&v_cur.scale(*cur)?)?;
                }
                acc.add(&Interval::point(*offset)?)?
            }
            ViolationForm::ExpectedDiff { next, cur, offset } => {
                let mut expected = Interval::point(0.0)?;
                for m in 0..self.system.noise.len() {
                    let y = step_box(&self.system, ctrl, b, Some(m))?;
                    let v = cert.interval_forward(&y)?[0];
                    expected = expected.add(&v.scale(self.system.noise[m].1)?)?;
                }
                let mut acc = expected.scale(*next)?;
                if *cur != 0.0 {
                    acc = acc.add(&cert.interval_forward(b)?[0].scale(*cur)?)?;
                }
                acc.add(&Interval::point(*offset)?)?
            }
            ViolationForm::DomainReentry { sets } => {
                let y = step_box(&self.system, ctrl, b, None)?;
                let mut best: Option<Interval> = None;
                for s in sets {
                    let mv = membership_violation_box(s, &y)?;
                    best = Some(match best {
                        Some(acc) => acc.min(&mv),
                        None => mv,
                    });
                }
                best.expect("reentry form always carries at least one set")
            }
        })
    }

    /// Violation value plus its gradients with respect to the parameters of
    /// both trainable networks.
    pub fn violation_grad(
        &self,
        cert: &Network,
        ctrl: Option<&Network>,
        x: &[f64],
    ) -> Result<(f64, ViolationGrads), RuleError> {
        let mut cert_grads = ParamGrads::zeros_like(cert);
        let mut ctrl_grads = ctrl.map(ParamGrads::zeros_like);
        let value = match &self.form {
            ViolationForm::Value {
                sign,
                offset,
                anchor,
            } => {
                let (_, g) = cert.backward(x, &[*sign])?;
                cert_grads.add_scaled(&g, 1.0);
                let mut v = sign * cert.forward_scalar(x)?;
                if let Some(a) = anchor {
                    let (_, ga) = cert.backward(a, &[-*sign])?;
                    cert_grads.add_scaled(&ga, 1.0);
                    v -= sign * cert.forward_scalar(a)?;
                }
                v + offset
            }
            ViolationForm::Lie { offset } => {
                let u = self.control_at(ctrl, x)?;
                let f = self.dynamics_at(x, &u, &[])?;
                let (_, y_dot, trace) = cert.forward_jvp(x, &f)?;
                let (g, grad_v) = cert.jvp_backward(&trace, &[1.0])?;
                cert_grads.add_scaled(&g, 1.0);
                if let (Some(ctrl_net), Some(cg)) = (ctrl, ctrl_grads.as_mut()) {
                    let upstream = self.input_chain_upstream(&grad_v, x, &u, 1.0)?;
                    let (_, g_ctrl) = ctrl_net.backward(x, &upstream)?;
                    cg.add_scaled(&g_ctrl, 1.0);
                }
                y_dot[0] + offset
            }
            ViolationForm::StepDiff { next, cur, offset } => {
                let u = self.control_at(ctrl, x)?;
                let y = self.dynamics_at(x, &u, &[])?;
                let (_, gy) = cert.backward(&y, &[*next])?;
                cert_grads.add_scaled(&gy, 1.0);
                if *cur != 0.0 {
                    let (_, gx) = cert.backward(x, &[*cur])?;
                    cert_grads.add_scaled(&gx, 1.0);
                }
                if let (Some(ctrl_net), Some(cg)) = (ctrl, ctrl_grads.as_mut()) {
                    let grad_v = cert.input_gradient(&y)?;
                    let upstream = self.input_chain_upstream(&grad_v, x, &u, *next)?;
                    let (_, g_ctrl) = ctrl_net.backward(x, &upstream)?;
                    cg.add_scaled(&g_ctrl, 1.0);
                }
                next * cert.forward_scalar(&y)? + cur * cert.forward_scalar(x)? + offset
            }
            ViolationForm::ExpectedDiff { next, cur, offset } => {
                let u = self.control_at(ctrl, x)?;
                let mut expected = 0.0;
                for (w, p) in &self.system.noise {
                    let y = self.dynamics_at(x, &u, w)?;
                    expected += p * cert.forward_scalar(&y)?;
                    let (_, gy) = cert.backward(&y, &[next * p])?;
                    cert_grads.add_scaled(&gy, 1.0);
                    if let (Some(ctrl_net), Some(cg)) = (ctrl, ctrl_grads.as_mut()) {
                        let grad_v = cert.input_gradient(&y)?;
                        let upstream = self.input_chain_upstream_noise(&grad_v, x, &u, w, next * p)?;
                        let (_, g_ctrl) = ctrl_net.backward(x, &upstream)?;
                        cg.add_scaled(&g_ctrl, 1.0);
                    }
                }
                if *cur != 0.0 {
                    let (_, gx) = cert.backward(x, &[*cur])?;
                    cert_grads.add_scaled(&gx, 1.0);
                }
                next * expected + cur * cert.forward_scalar(x)? + offset
            }
            ViolationForm::DomainReentry { sets } => {
                let u = self.control_at(ctrl, x)?;
                let y = self.dynamics_at(x, &u, &[])?;
                let mut best = f64::INFINITY;
                let mut best_grad_y: Option<Vec<f64>> = None;
                for s in sets {
                    let (mv, gy) = membership_violation_grad(s, &y)?;
                    if mv < best {
                        best = mv;
                        best_grad_y = gy;
                    }
                }
                // Subgradient through the active branch; certificate
                // parameters never appear in this form.
                if let (Some(ctrl_net), Some(cg), Some(gy)) =
                    (ctrl, ctrl_grads.as_mut(), best_grad_y)
                {
                    let upstream = self.input_chain_upstream(&gy, x, &u, 1.0)?;
                    let (_, g_ctrl) = ctrl_net.backward(x, &upstream)?;
                    cg.add_scaled(&g_ctrl, 1.0);
                }
                best
            }
        };
        if !value.is_finite() {
            return Err(RuleError::Eval(EvalError::NonFiniteResult));
        }
        Ok((
            value,
            ViolationGrads {
                cert: cert_grads,
                ctrl: ctrl_grads,
            },
        ))
    }

    fn control_at(&self, ctrl: Option<&Network>, x: &[f64]) -> Result<Vec<f64>, RuleError> {
        Ok(match ctrl {
            Some(net) => net.forward(x)?,
            None => Vec::new(),
        })
    }

    fn dynamics_at(&self, x: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<f64>, RuleError> {
        self.system
            .dynamics
            .iter()
            .map(|e| e.eval(x, u, w).map_err(RuleError::from))
            .collect()
    }

    /// `upstream_j = scale * sum_i grad_y[i] * d f_i / d u_j (x, u)`.
    fn input_chain_upstream(
        &self,
        grad_y: &[f64],
        x: &[f64],
        u: &[f64],
        scale: f64,
    ) -> Result<Vec<f64>, RuleError> {
        self.input_chain_upstream_noise(grad_y, x, u, &[], scale)
    }

    fn input_chain_upstream_noise(
        &self,
        grad_y: &[f64],
        x: &[f64],
        u: &[f64],
        w: &[f64],
        scale: f64,
    ) -> Result<Vec<f64>, RuleError> {
        let jac = self
            .input_jacobian
            .as_ref()
            .expect("input jacobian present whenever a controller is trained");
        let mut upstream = vec![0.0; u.len()];
        for (i, row) in jac.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                upstream[j] += scale * grad_y[i] * e.eval(x, u, w)?;
            }
        }
        Ok(upstream)
    }
}

/// Scalar membership violation of `y` in a constrained set: negative iff
/// `y` is strictly inside (box bounds and all constraints strictly
/// satisfied).
fn membership_violation(s: &ConstrainedSet, y: &[f64]) -> Result<f64, RuleError> {
    let mut worst = f64::NEG_INFINITY;
    for (iv, &v) in s.base.intervals().iter().zip(y) {
        worst = worst.max(iv.lo - v).max(v - iv.hi);
    }
    for g in &s.constraints {
        worst = worst.max(g.eval(y, &[], &[])?);
    }
    Ok(worst)
}

fn membership_violation_box(s: &ConstrainedSet, y: &Hyperbox) -> Result<Interval, RuleError> {
    let mut worst: Option<Interval> = None;
    let mut push = |iv: Interval| {
        worst = Some(match worst {
            Some(acc) => acc.max(&iv),
            None => iv,
        });
    };
    for (bound, yi) in s.base.intervals().iter().zip(y.intervals()) {
        push(Interval::point(bound.lo)?.sub(yi)?);
        push(yi.sub(&Interval::point(bound.hi)?)?);
    }
    let empty = Hyperbox::empty();
    for g in &s.constraints {
        push(g.interval_eval(y, &empty, &empty)?);
    }
    Ok(worst.expect("sets have at least one dimension"))
}

/// Violation value plus, when available, its gradient with respect to `y`
/// along the active branch.
fn membership_violation_grad(
    s: &ConstrainedSet,
    y: &[f64],
) -> Result<(f64, Option<Vec<f64>>), RuleError> {
    let mut worst = f64::NEG_INFINITY;
    let mut grad: Option<Vec<f64>> = None;
    for (d, (iv, &v)) in s.base.intervals().iter().zip(y).enumerate() {
        if iv.lo - v > worst {
            worst = iv.lo - v;
            let mut g = vec![0.0; y.len()];
            g[d] = -1.0;
            grad = Some(g);
        }
        if v - iv.hi > worst {
            worst = v - iv.hi;
            let mut g = vec![0.0; y.len()];
            g[d] = 1.0;
            grad = Some(g);
        }
    }
    for c in &s.constraints {
        let v = c.eval(y, &[], &[])?;
        if v > worst {
            worst = v;
            grad = (0..y.len())
                .map(|d| c.differentiate(d).ok().map(|e| e.eval(y, &[], &[])))
                .collect::<Option<Result<Vec<f64>, _>>>()
                .transpose()?;
        }
    }
    Ok((worst, grad))
}

/// Euclidean ball around `center` as a constrained set.
fn ball_set(center: &[f64], radius: f64) -> ConstrainedSet {
    let base = Hyperbox::from_bounds(
        &center
            .iter()
            .map(|&c| (c - radius, c + radius))
            .collect::<Vec<_>>(),
    )
    .expect("finite ball bounds");
    let mut sum = Expr::Const(0.0);
    for (i, &c) in center.iter().enumerate() {
        sum = Expr::add(
            sum,
            Expr::pow_int(Expr::sub(Expr::State(i), Expr::Const(c)), 2),
        );
    }
    let constraint = Expr::sub(sum, Expr::Const(radius * radius));
    ConstrainedSet {
        base,
        constraints: vec![constraint],
    }
}

/// Compile the proof rule for the problem's spec into verification
/// conditions over the given certificate and optional controller.
pub fn compile_rules(
    problem: &Problem,
    cert: &Network,
    ctrl: Option<&Network>,
) -> Result<Vec<VerificationCondition>, RuleError> {
    let system = Arc::new(problem.system.clone());
    let n = system.n_state;
    if cert.input_dim() != n || cert.output_dim() != 1 {
        return Err(RuleError::SpecSystemMismatch(format!(
            "certificate maps {} -> {}, expected {} -> 1",
            cert.input_dim(),
            cert.output_dim(),
            n
        )));
    }
    if system.n_input > 0 && ctrl.is_none() {
        return Err(RuleError::SpecSystemMismatch(
            "controlled system requires a controller network".into(),
        ));
    }
    let continuous = system.is_continuous();
    if continuous && cert.shape.uses_relu() {
        return Err(RuleError::ReluNotSupported);
    }
    let input_jacobian = match ctrl {
        Some(_) => Some(
            system
                .dynamics
                .iter()
                .map(|f| {
                    (0..system.n_input)
                        .map(|j| f.diff(Var::Input(j)))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| RuleError::NonDifferentiableDynamics(e.to_string()))?,
        ),
        None => None,
    };

    let rp = &problem.rule_params;
    let domain_scale = problem.domain.base.max_width();
    let mu_pos = rp.mu_pos * domain_scale;
    let mu_dec = rp.mu_dec;
    let domain = problem.domain.clone();
    // Learner-side training margin; deliberately larger than the
    // verification margins so training lands strictly inside the feasible
    // set.
    let train_margin = 0.01;

    let mut vcs = Vec::new();
    let mut push = |id: &str, region: Region, gate: Option<Gate>, form: ViolationForm| {
        vcs.push(VerificationCondition {
            id: id.to_string(),
            region,
            gate,
            form,
            system: Arc::clone(&system),
            cert: cert.clone(),
            ctrl: ctrl.cloned(),
            input_jacobian: input_jacobian.clone(),
            train_margin,
        });
    };

    match &problem.spec {
        Spec::Stability {
            equilibrium,
            exclusion_radius,
        } => {
            let punctured = Region::minus(
                domain.clone(),
                vec![ball_set(equilibrium, *exclusion_radius)],
            );
            push(
                "stab/pos",
                punctured.clone(),
                None,
                ViolationForm::Value {
                    sign: -1.0,
                    offset: mu_pos,
                    anchor: Some(equilibrium.clone()),
                },
            );
            let dec = if continuous {
                ViolationForm::Lie { offset: mu_dec }
            } else {
                ViolationForm::StepDiff {
                    next: 1.0,
                    cur: -1.0,
                    offset: mu_dec,
                }
            };
            push("stab/dec", punctured, None, dec);
        }
        Spec::Safety { init, unsafe_set } => {
            if system.is_stochastic() {
                return Err(RuleError::SpecSystemMismatch(
                    "deterministic safety on a stochastic system; use probabilistic-safety \
                     with a level"
                        .into(),
                ));
            }
            push(
                "safe/init",
                Region::whole(init.clone()),
                None,
                ViolationForm::Value {
                    sign: 1.0,
                    offset: mu_pos,
                    anchor: None,
                },
            );
            push(
                "safe/unsafe",
                Region::whole(unsafe_set.clone()),
                None,
                ViolationForm::Value {
                    sign: -1.0,
                    offset: mu_pos,
                    anchor: None,
                },
            );
            if continuous {
                push(
                    "safe/flow",
                    Region::whole(domain),
                    Some(Gate::AbsBand(rp.eps_band)),
                    ViolationForm::Lie { offset: mu_dec },
                );
            } else {
                push(
                    "safe/flow",
                    Region::whole(domain),
                    Some(Gate::CertNonpos),
                    ViolationForm::StepDiff {
                        next: 1.0,
                        cur: 0.0,
                        offset: 0.0,
                    },
                );
            }
        }
        Spec::Invariance { inv } => {
            push(
                "inv/neg",
                Region::whole(inv.clone()),
                None,
                ViolationForm::Value {
                    sign: 1.0,
                    offset: mu_pos,
                    anchor: None,
                },
            );
            if continuous {
                push(
                    "inv/flow",
                    Region::whole(domain),
                    Some(Gate::AbsBand(rp.eps_band)),
                    ViolationForm::Lie { offset: mu_dec },
                );
            } else {
                push(
                    "inv/step",
                    Region::whole(inv.clone()),
                    None,
                    ViolationForm::StepDiff {
                        next: 1.0,
                        cur: 0.0,
                        offset: 0.0,
                    },
                );
            }
        }
        Spec::Reachability { target, decrease } => {
            require_discrete_deterministic(&system, "reachability")?;
            let outside_target = Region::minus(domain.clone(), vec![target.clone()]);
            push(
                "reach/nonneg",
                outside_target.clone(),
                None,
                ViolationForm::Value {
                    sign: -1.0,
                    offset: 0.0,
                    anchor: None,
                },
            );
            push(
                "reach/rank",
                outside_target.clone(),
                None,
                ViolationForm::StepDiff {
                    next: 1.0,
                    cur: -1.0,
                    offset: *decrease,
                },
            );
            if rp.check_domain_invariance {
                push(
                    "reach/dominv",
                    outside_target,
                    None,
                    ViolationForm::DomainReentry {
                        sets: vec![domain, target.clone()],
                    },
                );
            }
        }
        Spec::ReachWhileAvoid {
            init,
            target,
            avoid,
            decrease,
        } => {
            require_discrete_deterministic(&system, "reach-while-avoid")?;
            push(
                "rwa/init",
                Region::whole(init.clone()),
                None,
                ViolationForm::Value {
                    sign: 1.0,
                    offset: 0.0,
                    anchor: None,
                },
            );
            push(
                "rwa/avoid",
                Region::whole(avoid.clone()),
                None,
                ViolationForm::Value {
                    sign: -1.0,
                    offset: mu_pos,
                    anchor: None,
                },
            );
            let progress = Region::minus(domain.clone(), vec![target.clone(), avoid.clone()]);
            push(
                "rwa/rank",
                progress.clone(),
                Some(Gate::CertNonpos),
                ViolationForm::StepDiff {
                    next: 1.0,
                    cur: -1.0,
                    offset: *decrease,
                },
            );
            if rp.check_domain_invariance {
                push(
                    "rwa/dominv",
                    progress,
                    None,
                    ViolationForm::DomainReentry {
                        sets: vec![domain, target.clone()],
                    },
                );
            }
        }
        Spec::ProbabilisticSafety {
            unsafe_set, level, ..
        } => {
            require_stochastic(&system, "probabilistic-safety")?;
            push(
                "psafe/nonneg",
                Region::whole(domain.clone()),
                None,
                ViolationForm::Value {
                    sign: -1.0,
                    offset: 0.0,
                    anchor: None,
                },
            );
            push(
                "psafe/level",
                Region::whole(unsafe_set.clone()),
                None,
                ViolationForm::Value {
                    sign: -1.0,
                    offset: *level,
                    anchor: None,
                },
            );
            // Supermartingale decrease is required only below the level:
            // trajectories must cross the `B = level` surface before
            // reaching the unsafe set, so optional stopping still yields
            // the `B(x0)/level` bound while keeping the condition
            // satisfiable on domains that trap trajectories.
            push(
                "psafe/super",
                Region::minus(domain, vec![unsafe_set.clone()]),
                Some(Gate::CertBelow(*level)),
                ViolationForm::ExpectedDiff {
                    next: 1.0,
                    cur: -1.0,
                    offset: 0.0,
                },
            );
        }
        Spec::ProbabilisticReachability { target, decrease } => {
            require_stochastic(&system, "probabilistic-reachability")?;
            let outside_target = Region::minus(domain, vec![target.clone()]);
            push(
                "preach/nonneg",
                outside_target.clone(),
                None,
                ViolationForm::Value {
                    sign: -1.0,
                    offset: 0.0,
                    anchor: None,
                },
            );
            push(
                "preach/edec",
                outside_target,
                None,
                ViolationForm::ExpectedDiff {
                    next: 1.0,
                    cur: -1.0,
                    offset: *decrease,
                },
            );
        }
    }
    Ok(vcs)
}

fn require_discrete_deterministic(system: &System, what: &str) -> Result<(), RuleError> {
    if system.kind != SystemKind::DiscreteDeterministic {
        return Err(RuleError::SpecSystemMismatch(format!(
            "{what} requires a discrete deterministic system"
        )));
    }
    Ok(())
}

fn require_stochastic(system: &System, what: &str) -> Result<(), RuleError> {
    if system.kind != SystemKind::DiscreteStochastic {
        return Err(RuleError::SpecSystemMismatch(format!(
            "{what} requires a discrete stochastic system"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Dims};
    use crate::model::{validate_problem, ProblemParts, RuleParams};
    use crate::net::{Activation, Layer, NetworkShape};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn box1(lo: f64, hi: f64) -> Hyperbox {
        Hyperbox::from_bounds(&[(lo, hi)]).unwrap()
    }

    fn set1(lo: f64, hi: f64) -> ConstrainedSet {
        ConstrainedSet::unconstrained(box1(lo, hi))
    }

    /// V(x) = x^2 exactly: square activation, unit weights, zero biases.
    fn square_net() -> Network {
        Network {
            shape: NetworkShape::new(1, vec![(1, Activation::Square)], 1),
            layers: vec![
                Layer {
                    weights: vec![vec![1.0]],
                    bias: vec![0.0],
                    activation: Some(Activation::Square),
                },
                Layer {
                    weights: vec![vec![1.0]],
                    bias: vec![0.0],
                    activation: None,
                },
            ],
        }
    }

    /// V(x) = x exactly: single affine layer.
    fn identity_net() -> Network {
        Network {
            shape: NetworkShape::new(1, vec![], 1),
            layers: vec![Layer {
                weights: vec![vec![1.0]],
                bias: vec![0.0],
                activation: None,
            }],
        }
    }

    fn problem(kind: SystemKind, dynamics: &str, spec: Spec, domain: ConstrainedSet) -> Problem {
        let n_noise = if kind == SystemKind::DiscreteStochastic {
            1
        } else {
            0
        };
        let dims = Dims::new(1, 0, n_noise);
        let noise = if n_noise > 0 {
            vec![(vec![-0.1], 0.5), (vec![0.1], 0.5)]
        } else {
            vec![]
        };
        validate_problem(ProblemParts {
            system: System {
                kind,
                n_state: 1,
                n_input: 0,
                dynamics: vec![parse_expr(dynamics, dims).unwrap()],
                noise,
                input_box: None,
            },
            domain,
            spec,
            certificate_shape: NetworkShape::new(1, vec![(1, Activation::Square)], 1),
            controller_shape: None,
            rule_params: RuleParams::default(),
            seed: 7,
        })
        .unwrap()
    }

    fn find<'a>(vcs: &'a [VerificationCondition], id: &str) -> &'a VerificationCondition {
        vcs.iter().find(|vc| vc.id == id).unwrap()
    }

    #[test]
    fn rule_arity_matches_contract() {
        let stab = problem(
            SystemKind::ContinuousDeterministic,
            "-x1",
            Spec::Stability {
                equilibrium: vec![0.0],
                exclusion_radius: 0.1,
            },
            set1(-1.0, 1.0),
        );
        let cert = square_net();
        assert_eq!(compile_rules(&stab, &cert, None).unwrap().len(), 2);

        let safe = problem(
            SystemKind::ContinuousDeterministic,
            "-x1",
            Spec::Safety {
                init: set1(-0.2, 0.2),
                unsafe_set: set1(0.8, 1.0),
            },
            set1(-1.0, 1.0),
        );
        assert_eq!(compile_rules(&safe, &cert, None).unwrap().len(), 3);

        let reach = problem(
            SystemKind::DiscreteDeterministic,
            "x1-1",
            Spec::Reachability {
                target: set1(0.0, 1.0),
                decrease: 0.5,
            },
            set1(0.0, 10.0),
        );
        assert_eq!(compile_rules(&reach, &cert, None).unwrap().len(), 3);
        let mut no_dominv = reach.clone();
        no_dominv.rule_params.check_domain_invariance = false;
        assert_eq!(compile_rules(&no_dominv, &cert, None).unwrap().len(), 2);

        let rwa = problem(
            SystemKind::DiscreteDeterministic,
            "x1-1",
            Spec::ReachWhileAvoid {
                init: set1(8.0, 9.0),
                target: set1(0.0, 1.0),
                avoid: set1(9.5, 10.0),
                decrease: 0.5,
            },
            set1(0.0, 10.0),
        );
        assert_eq!(compile_rules(&rwa, &cert, None).unwrap().len(), 4);

        let psafe = problem(
            SystemKind::DiscreteStochastic,
            "0.5*x1+w1",
            Spec::ProbabilisticSafety {
                init: set1(-0.1, 0.1),
                unsafe_set: set1(0.9, 1.0),
                level: 5.0,
            },
            set1(-1.0, 1.0),
        );
        assert_eq!(compile_rules(&psafe, &cert, None).unwrap().len(), 3);

        let preach = problem(
            SystemKind::DiscreteStochastic,
            "0.5*x1+w1",
            Spec::ProbabilisticReachability {
                target: set1(-0.2, 0.2),
                decrease: 0.05,
            },
            set1(-1.0, 1.0),
        );
        assert_eq!(compile_rules(&preach, &cert, None).unwrap().len(), 2);
    }

    #[test]
    fn lyapunov_decrease_matches_closed_form() {
        // V(x) = x^2, x' = -x: grad V . f = -2 x^2, so at x = 0.5 the
        // decrease violation is -0.5 + mu_dec.
        let p = problem(
            SystemKind::ContinuousDeterministic,
            "-x1",
            Spec::Stability {
                equilibrium: vec![0.0],
                exclusion_radius: 0.1,
            },
            set1(-1.0, 1.0),
        );
        let vcs = compile_rules(&p, &square_net(), None).unwrap();
        let dec = find(&vcs, "stab/dec");
        assert_relative_eq!(dec.violation(&[0.5]).unwrap(), -0.4999, max_relative = 1e-12);
        // Positivity at x = 0.5: -(V(x) - V(0)) + mu_pos * scale, scale = 2.
        let pos = find(&vcs, "stab/pos");
        assert_relative_eq!(
            pos.violation(&[0.5]).unwrap(),
            -0.25 + 2e-4,
            max_relative = 1e-12
        );
        // Inside the exclusion ball the point is rejected.
        assert_eq!(pos.violation(&[0.05]), Err(RuleError::PointOutsideRegion));
    }

    #[test]
    fn ranking_decrease_matches_closed_form() {
        // V(x) = x, f(x) = x - 1, delta = 0.5: violation is -1 + 0.5 = -0.5.
        let p = problem(
            SystemKind::DiscreteDeterministic,
            "x1-1",
            Spec::Reachability {
                target: set1(0.0, 1.0),
                decrease: 0.5,
            },
            set1(0.0, 10.0),
        );
        let vcs = compile_rules(&p, &identity_net(), None).unwrap();
        let rank = find(&vcs, "reach/rank");
        assert_relative_eq!(rank.violation(&[3.0]).unwrap(), -0.5, max_relative = 1e-12);
        // Successor 2.0 is interior to the domain, so reentry is negative.
        let dominv = find(&vcs, "reach/dominv");
        assert_relative_eq!(dominv.violation(&[3.0]).unwrap(), -2.0, max_relative = 1e-12);
    }

    #[test]
    fn expected_decrease_matches_closed_form() {
        // V(x) = x^2, x+ = 0.5 x + w, w = +-0.1 equiprobable:
        // E[V(x+)] = 0.25 x^2 + 0.01, so at x = 0.8 with delta = 0.05 the
        // violation is 0.16 + 0.01 - 0.64 + 0.05 = -0.42.
        let p = problem(
            SystemKind::DiscreteStochastic,
            "0.5*x1+w1",
            Spec::ProbabilisticReachability {
                target: set1(-0.2, 0.2),
                decrease: 0.05,
            },
            set1(-1.0, 1.0),
        );
        let vcs = compile_rules(&p, &square_net(), None).unwrap();
        let edec = find(&vcs, "preach/edec");
        assert_relative_eq!(edec.violation(&[0.8]).unwrap(), -0.42, max_relative = 1e-12);
    }

    #[test]
    fn enclosure_contains_point_violations() {
        let p = problem(
            SystemKind::ContinuousDeterministic,
            "-x1",
            Spec::Stability {
                equilibrium: vec![0.0],
                exclusion_radius: 0.1,
            },
            set1(-1.0, 1.0),
        );
        let cert = Network::init(&NetworkShape::new(1, vec![(8, Activation::Tanh)], 1), 3);
        let vcs = compile_rules(&p, &cert, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for vc in &vcs {
            let b = box1(0.3, 0.6);
            let iv = vc.enclosure(&b).unwrap();
            for _ in 0..200 {
                let x = [rng.gen_range(0.3..=0.6)];
                let v = vc.violation(&x).unwrap();
                assert!(iv.lo <= v && v <= iv.hi, "{}: {v} not in {iv:?}", vc.id);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = problem(
            SystemKind::DiscreteStochastic,
            "0.5*x1+w1",
            Spec::ProbabilisticReachability {
                target: set1(-0.2, 0.2),
                decrease: 0.05,
            },
            set1(-1.0, 1.0),
        );
        let cert = Network::init(&NetworkShape::new(1, vec![(4, Activation::Tanh)], 1), 5);
        let vcs = compile_rules(&p, &cert, None).unwrap();
        let x = [0.7];
        for vc in &vcs {
            let (_, grads) = vc.violation_grad(&cert, None, &x).unwrap();
            let h = 1e-6;
            for l in 0..cert.layers.len() {
                for r in 0..cert.layers[l].weights.len() {
                    for c in 0..cert.layers[l].weights[r].len() {
                        let mut plus = cert.clone();
                        plus.layers[l].weights[r][c] += h;
                        let mut minus = cert.clone();
                        minus.layers[l].weights[r][c] -= h;
                        let fd = (vc.violation_with(&plus, None, &x).unwrap()
                            - vc.violation_with(&minus, None, &x).unwrap())
                            / (2.0 * h);
                        assert_relative_eq!(
                            grads.cert.layers[l].0[r][c],
                            fd,
                            max_relative = 1e-4,
                            epsilon = 1e-8
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn lie_gradient_matches_finite_differences() {
        let p = problem(
            SystemKind::ContinuousDeterministic,
            "-x1",
            Spec::Stability {
                equilibrium: vec![0.0],
                exclusion_radius: 0.1,
            },
            set1(-1.0, 1.0),
        );
        let cert = Network::init(&NetworkShape::new(1, vec![(4, Activation::Tanh)], 1), 9);
        let vcs = compile_rules(&p, &cert, None).unwrap();
        let dec = find(&vcs, "stab/dec");
        let x = [0.6];
        let (v, grads) = dec.violation_grad(&cert, None, &x).unwrap();
        assert_relative_eq!(v, dec.violation_with(&cert, None, &x).unwrap());
        let h = 1e-6;
        for l in 0..cert.layers.len() {
            for r in 0..cert.layers[l].bias.len() {
                let mut plus = cert.clone();
                plus.layers[l].bias[r] += h;
                let mut minus = cert.clone();
                minus.layers[l].bias[r] -= h;
                let fd = (dec.violation_with(&plus, None, &x).unwrap()
                    - dec.violation_with(&minus, None, &x).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(
                    grads.cert.layers[l].1[r],
                    fd,
                    max_relative = 1e-4,
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn gates_prune_soundly() {
        let cert = square_net();
        // V(x) = x^2 on [0.5, 1]: range [0.25, 1].
        let b = box1(0.5, 1.0);
        assert!(Gate::CertNonpos.provably_false_over(&cert, &b));
        assert!(Gate::CertBelow(0.2).provably_false_over(&cert, &b));
        assert!(!Gate::CertBelow(0.5).provably_false_over(&cert, &b));
        assert!(Gate::AbsBand(0.1).provably_false_over(&cert, &b));
        assert!(!Gate::AbsBand(0.3).provably_false_over(&cert, &b));
        assert!(Gate::CertNonpos.holds_at(&cert, &[0.0]).unwrap());
        assert!(!Gate::CertNonpos.holds_at(&cert, &[0.5]).unwrap());
    }

    #[test]
    fn relu_rejected_for_continuous_rules() {
        let p = problem(
            SystemKind::ContinuousDeterministic,
            "-x1",
            Spec::Stability {
                equilibrium: vec![0.0],
                exclusion_radius: 0.1,
            },
            set1(-1.0, 1.0),
        );
        let cert = Network::init(&NetworkShape::new(1, vec![(4, Activation::Relu)], 1), 1);
        assert!(matches!(
            compile_rules(&p, &cert, None),
            Err(RuleError::ReluNotSupported)
        ));
    }

    #[test]
    fn region_subtraction_classifies_soundly() {
        let region = Region::minus(set1(-1.0, 1.0), vec![ball_set(&[0.0], 0.1)]);
        assert_eq!(region.classify(&box1(0.5, 0.9)), SetClass::Inside);
        assert_eq!(region.classify(&box1(-0.05, 0.05)), SetClass::Outside);
        assert_eq!(region.classify(&box1(1.5, 2.0)), SetClass::Outside);
        assert_eq!(region.classify(&box1(0.05, 0.3)), SetClass::Undecided);
        assert!(region.contains(&[0.5]).unwrap());
        assert!(!region.contains(&[0.05]).unwrap());
    }
}
