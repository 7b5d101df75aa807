//! SMT-LIB 2 export of verification conditions.
//!
//! The emitted query asks for the negation of the condition: a region point
//! (satisfying the gate, when present) whose violation is nonnegative. An
//! `unsat` answer from an external solver therefore confirms the condition.
//!
//! Two dialects are supported. `Polynomial` stays inside QF_NRA: square
//! activations and polynomial dynamics only, with `abs`/`min`/`max` lowered
//! to `ite`. `Dreal` additionally emits `tanh`, `sin`, `cos`, and `exp`
//! applications and lowers relu to `ite`, matching dReal's extended
//! language.
//!
//! Constants are encoded as exact binary rationals, so the query denotes
//! precisely the floating-point model the verifier saw.

use crate::expr::Expr;
use crate::net::{Activation, Network, OutputTransform};
use crate::rules::{Gate, VerificationCondition, ViolationForm};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmtError {
    #[error("`{0}` cannot be expressed in {1} mode")]
    UnsupportedNode(String, SmtMode),
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmtMode {
    Polynomial,
    Dreal,
}

impl std::fmt::Display for SmtMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SmtMode::Polynomial => "polynomial",
            SmtMode::Dreal => "dreal",
        })
    }
}

/// Decimal string of `2^p`, by repeated doubling.
fn pow2_decimal(p: u32) -> String {
    let mut digits = vec![1u8];
    for _ in 0..p {
        let mut carry = 0;
        for d in digits.iter_mut() {
            let v = *d * 2 + carry;
            *d = v % 10;
            carry = v / 10;
        }
        if carry > 0 {
            digits.push(carry);
        }
    }
    digits.iter().rev().map(|d| (d + b'0') as char).collect()
}

/// Exact rational encoding of a finite double.
pub fn smt_f64(v: f64) -> String {
    assert!(v.is_finite());
    let neg = v < 0.0;
    let mut m = v.abs();
    let body = if m.fract() == 0.0 {
        format!("{m:.1}")
    } else {
        let mut p = 0u32;
        while m.fract() != 0.0 {
            m *= 2.0;
            p += 1;
        }
        format!("(/ {m:.1} {}.0)", pow2_decimal(p))
    };
    if neg {
        format!("(- {body})")
    } else {
        body
    }
}

/// Translate an expression; `vars` supplies the term for each variable
/// kind and index.
fn expr_smt(
    e: &Expr,
    vars: &dyn Fn(char, usize) -> String,
    mode: SmtMode,
) -> Result<String, SmtError> {
    let unsupported = |what: &str| Err(SmtError::UnsupportedNode(what.to_string(), mode));
    let bin = |op: &str, a: &Expr, b: &Expr| -> Result<String, SmtError> {
        Ok(format!(
            "({op} {} {})",
            expr_smt(a, vars, mode)?,
            expr_smt(b, vars, mode)?
        ))
    };
    match e {
        Expr::Const(c) => Ok(smt_f64(*c)),
        Expr::State(i) => Ok(vars('x', *i)),
        Expr::Input(i) => Ok(vars('u', *i)),
        Expr::Noise(i) => Ok(vars('w', *i)),
        Expr::Add(a, b) => bin("+", a, b),
        Expr::Sub(a, b) => bin("-", a, b),
        Expr::Mul(a, b) => bin("*", a, b),
        Expr::Div(a, b) => bin("/", a, b),
        Expr::Neg(a) => Ok(format!("(- {})", expr_smt(a, vars, mode)?)),
        Expr::PowInt(a, p) => {
            let base = expr_smt(a, vars, mode)?;
            Ok(match p {
                0 => "1.0".to_string(),
                1 => base,
                _ => {
                    let reps = vec![base; *p as usize];
                    format!("(* {})", reps.join(" "))
                }
            })
        }
        Expr::Exp(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Tanh(a) => {
            let name = match e {
                Expr::Exp(_) => "exp",
                Expr::Sin(_) => "sin",
                Expr::Cos(_) => "cos",
                _ => "tanh",
            };
            if mode != SmtMode::Dreal {
                return unsupported(name);
            }
            Ok(format!("({name} {})", expr_smt(a, vars, mode)?))
        }
        Expr::Abs(a) => {
            let s = expr_smt(a, vars, mode)?;
            Ok(format!("(ite (>= {s} 0.0) {s} (- {s}))"))
        }
        Expr::Min(a, b) => {
            let (sa, sb) = (expr_smt(a, vars, mode)?, expr_smt(b, vars, mode)?);
            Ok(format!("(ite (<= {sa} {sb}) {sa} {sb})"))
        }
        Expr::Max(a, b) => {
            let (sa, sb) = (expr_smt(a, vars, mode)?, expr_smt(b, vars, mode)?);
            Ok(format!("(ite (>= {sa} {sb}) {sa} {sb})"))
        }
    }
}

fn activation_smt(act: Activation, arg: &str, mode: SmtMode) -> Result<String, SmtError> {
    match act {
        Activation::Square => Ok(format!("(* {arg} {arg})")),
        Activation::Tanh => {
            if mode != SmtMode::Dreal {
                return Err(SmtError::UnsupportedNode("tanh".into(), mode));
            }
            Ok(format!("(tanh {arg})"))
        }
        Activation::Relu => {
            if mode != SmtMode::Dreal {
                return Err(SmtError::UnsupportedNode("relu".into(), mode));
            }
            Ok(format!("(ite (>= {arg} 0.0) {arg} 0.0)"))
        }
    }
}

/// Derivative of the activation at pre-activation term `arg`.
fn activation_deriv_smt(act: Activation, arg: &str, mode: SmtMode) -> Result<String, SmtError> {
    match act {
        Activation::Square => Ok(format!("(* 2.0 {arg})")),
        Activation::Tanh => {
            if mode != SmtMode::Dreal {
                return Err(SmtError::UnsupportedNode("tanh".into(), mode));
            }
            Ok(format!("(- 1.0 (* (tanh {arg}) (tanh {arg})))"))
        }
        Activation::Relu => Err(SmtError::UnsupportedNode("relu".into(), mode)),
    }
}

/// Emit `define-fun` bindings for one network pass over symbolic inputs,
/// returning the output term names. Binding names are prefixed so several
/// passes can coexist.
fn emit_network(
    out: &mut String,
    net: &Network,
    prefix: &str,
    inputs: &[String],
    mode: SmtMode,
) -> Result<Vec<String>, SmtError> {
    let mut z: Vec<String> = inputs.to_vec();
    for (l, layer) in net.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(layer.weights.len());
        for (i, (row, bias)) in layer.weights.iter().zip(&layer.bias).enumerate() {
            let mut terms = vec![smt_f64(*bias)];
            for (w, zj) in row.iter().zip(&z) {
                terms.push(format!("(* {} {zj})", smt_f64(*w)));
            }
            let a = format!("{prefix}a{l}_{i}");
            writeln!(out, "(define-fun {a} () Real (+ {}))", terms.join(" ")).unwrap();
            let zname = format!("{prefix}z{l}_{i}");
            let body = match layer.activation {
                Some(act) => activation_smt(act, &a, mode)?,
                None => a.clone(),
            };
            writeln!(out, "(define-fun {zname} () Real {body})").unwrap();
            next.push(zname);
        }
        z = next;
    }
    match &net.shape.transform {
        OutputTransform::Identity => Ok(z),
        OutputTransform::BoxClamp(target) => {
            if mode != SmtMode::Dreal {
                return Err(SmtError::UnsupportedNode("tanh".into(), mode));
            }
            let mut outs = Vec::with_capacity(z.len());
            for (i, (zi, iv)) in z.iter().zip(target.intervals()).enumerate() {
                let name = format!("{prefix}out{i}");
                writeln!(
                    out,
                    "(define-fun {name} () Real (+ {} (* {} (tanh {zi}))))",
                    smt_f64(iv.midpoint()),
                    smt_f64(0.5 * iv.width())
                )
                .unwrap();
                outs.push(name);
            }
            Ok(outs)
        }
    }
}

/// Emit a tangent-forward pass of a scalar identity-output network: the
/// returned term is the directional derivative of the output along the
/// tangent `dirs` at the symbolic input `inputs`.
fn emit_network_jvp(
    out: &mut String,
    net: &Network,
    prefix: &str,
    inputs: &[String],
    dirs: &[String],
    mode: SmtMode,
) -> Result<String, SmtError> {
    let mut z: Vec<String> = inputs.to_vec();
    let mut dz: Vec<String> = dirs.to_vec();
    for (l, layer) in net.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(layer.weights.len());
        let mut dnext = Vec::with_capacity(layer.weights.len());
        for (i, (row, bias)) in layer.weights.iter().zip(&layer.bias).enumerate() {
            let mut terms = vec![smt_f64(*bias)];
            let mut dterms = vec!["0.0".to_string()];
            for (w, (zj, dzj)) in row.iter().zip(z.iter().zip(&dz)) {
                let ws = smt_f64(*w);
                terms.push(format!("(* {ws} {zj})"));
                dterms.push(format!("(* {ws} {dzj})"));
            }
            let a = format!("{prefix}a{l}_{i}");
            let da = format!("{prefix}da{l}_{i}");
            writeln!(out, "(define-fun {a} () Real (+ {}))", terms.join(" ")).unwrap();
            writeln!(out, "(define-fun {da} () Real (+ {}))", dterms.join(" ")).unwrap();
            let zname = format!("{prefix}z{l}_{i}");
            let dzname = format!("{prefix}dz{l}_{i}");
            match layer.activation {
                Some(act) => {
                    writeln!(
                        out,
                        "(define-fun {zname} () Real {})",
                        activation_smt(act, &a, mode)?
                    )
                    .unwrap();
                    writeln!(
                        out,
                        "(define-fun {dzname} () Real (* {} {da}))",
                        activation_deriv_smt(act, &a, mode)?
                    )
                    .unwrap();
                }
                None => {
                    writeln!(out, "(define-fun {zname} () Real {a})").unwrap();
                    writeln!(out, "(define-fun {dzname} () Real {da})").unwrap();
                }
            }
            next.push(zname);
            dnext.push(dzname);
        }
        z = next;
        dz = dnext;
    }
    Ok(dz[0].clone())
}

/// State-only variable mapping for set constraints.
fn state_vars(names: &[String]) -> impl Fn(char, usize) -> String + '_ {
    move |kind, i| match kind {
        'x' => names[i].clone(),
        _ => unreachable!("set constraints are state-only"),
    }
}

fn membership_terms(
    s: &crate::model::ConstrainedSet,
    names: &[String],
    mode: SmtMode,
) -> Result<Vec<String>, SmtError> {
    let mut terms = Vec::new();
    for (iv, n) in s.base.intervals().iter().zip(names) {
        terms.push(format!("(<= {} {n})", smt_f64(iv.lo)));
        terms.push(format!("(<= {n} {})", smt_f64(iv.hi)));
    }
    for g in &s.constraints {
        terms.push(format!("(<= {} 0.0)", expr_smt(g, &state_vars(names), mode)?));
    }
    Ok(terms)
}

/// Strict-interior membership, used for reentry violations.
fn strict_membership(
    s: &crate::model::ConstrainedSet,
    names: &[String],
    mode: SmtMode,
) -> Result<String, SmtError> {
    let mut terms = Vec::new();
    for (iv, n) in s.base.intervals().iter().zip(names) {
        terms.push(format!("(< {} {n})", smt_f64(iv.lo)));
        terms.push(format!("(< {n} {})", smt_f64(iv.hi)));
    }
    for g in &s.constraints {
        terms.push(format!("(< {} 0.0)", expr_smt(g, &state_vars(names), mode)?));
    }
    Ok(format!("(and {})", terms.join(" ")))
}

/// Export the negation query for one condition.
pub fn export_smtlib(vc: &VerificationCondition, mode: SmtMode) -> Result<String, SmtError> {
    let n = vc.system.n_state;
    let mut out = String::new();
    writeln!(out, "; negation query for condition {}", vc.id).unwrap();
    writeln!(out, "; sat = counterexample, unsat = condition holds").unwrap();
    writeln!(out, "(set-logic QF_NRA)").unwrap();
    let xs: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    for x in &xs {
        writeln!(out, "(declare-const {x} Real)").unwrap();
    }

    // Region membership.
    for t in membership_terms(&vc.region.include, &xs, mode)? {
        writeln!(out, "(assert {t})").unwrap();
    }
    for ex in &vc.region.exclude {
        let terms = membership_terms(ex, &xs, mode)?;
        writeln!(out, "(assert (not (and {})))", terms.join(" ")).unwrap();
    }

    // Controller output, when present.
    let us: Vec<String> = match &vc.ctrl {
        Some(ctrl) => emit_network(&mut out, ctrl, "c_", &xs, mode)?,
        None => Vec::new(),
    };
    let dyn_vars = |noise: &[f64]| {
        let xs = xs.clone();
        let us = us.clone();
        let noise = noise.to_vec();
        move |kind: char, i: usize| match kind {
            'x' => xs[i].clone(),
            'u' => us[i].clone(),
            'w' => smt_f64(noise[i]),
            _ => unreachable!(),
        }
    };

    // Gate, evaluated on the certificate at x.
    let vx = emit_network(&mut out, &vc.cert, "v_", &xs, mode)?[0].clone();
    if let Some(gate) = &vc.gate {
        let term = match gate {
            Gate::CertNonpos => format!("(<= {vx} 0.0)"),
            Gate::CertBelow(level) => format!("(< {vx} {})", smt_f64(*level)),
            Gate::AbsBand(band) => {
                let b = smt_f64(*band);
                format!("(and (<= (- {b}) {vx}) (<= {vx} {b}))")
            }
        };
        writeln!(out, "(assert {term})").unwrap();
    }

    // Violation term.
    let violation = match &vc.form {
        ViolationForm::Value {
            sign,
            offset,
            anchor,
        } => {
            let mut term = format!("(* {} {vx})", smt_f64(*sign));
            if let Some(a) = anchor {
                let anames: Vec<String> = a.iter().map(|&v| smt_f64(v)).collect();
                let va = emit_network(&mut out, &vc.cert, "va_", &anames, mode)?[0].clone();
                term = format!("(- {term} (* {} {va}))", smt_f64(*sign));
            }
            format!("(+ {term} {})", smt_f64(*offset))
        }
        ViolationForm::Lie { offset } => {
            let vars = dyn_vars(&[]);
            let mut fs = Vec::with_capacity(n);
            for (i, f) in vc.system.dynamics.iter().enumerate() {
                let name = format!("f{}", i + 1);
                writeln!(
                    out,
                    "(define-fun {name} () Real {})",
                    expr_smt(f, &vars, mode)?
                )
                .unwrap();
                fs.push(name);
            }
            let dv = emit_network_jvp(&mut out, &vc.cert, "j_", &xs, &fs, mode)?;
            format!("(+ {dv} {})", smt_f64(*offset))
        }
        ViolationForm::StepDiff { next, cur, offset } => {
            let vars = dyn_vars(&[]);
            let ys = emit_successor(&mut out, vc, "y", &vars, mode)?;
            let vy = emit_network(&mut out, &vc.cert, "vn_", &ys, mode)?[0].clone();
            format!(
                "(+ (* {} {vy}) (* {} {vx}) {})",
                smt_f64(*next),
                smt_f64(*cur),
                smt_f64(*offset)
            )
        }
        ViolationForm::ExpectedDiff { next, cur, offset } => {
            let mut terms = Vec::new();
            for (m, (w, p)) in vc.system.noise.iter().enumerate() {
                let vars = dyn_vars(w);
                let ys = emit_successor(&mut out, vc, &format!("y{m}_"), &vars, mode)?;
                let vy = emit_network(&mut out, &vc.cert, &format!("vn{m}_"), &ys, mode)?[0].clone();
                terms.push(format!("(* {} {vy})", smt_f64(*p)));
            }
            format!(
                "(+ (* {} (+ {})) (* {} {vx}) {})",
                smt_f64(*next),
                terms.join(" "),
                smt_f64(*cur),
                smt_f64(*offset)
            )
        }
        ViolationForm::DomainReentry { sets } => {
            // The violation is negative exactly when the successor lies
            // strictly inside some listed set; its negation asserts strict
            // membership fails everywhere.
            let vars = dyn_vars(&[]);
            let ys = emit_successor(&mut out, vc, "y", &vars, mode)?;
            for s in sets {
                writeln!(out, "(assert (not {}))", strict_membership(s, &ys, mode)?).unwrap();
            }
            writeln!(out, "(check-sat)").unwrap();
            writeln!(out, "(get-model)").unwrap();
            return Ok(out);
        }
    };
    writeln!(out, "(define-fun violation () Real {violation})").unwrap();
    writeln!(out, "(assert (>= violation 0.0))").unwrap();
    writeln!(out, "(check-sat)").unwrap();
    writeln!(out, "(get-model)").unwrap();
    Ok(out)
}

fn emit_successor(
    out: &mut String,
    vc: &VerificationCondition,
    prefix: &str,
    vars: &dyn Fn(char, usize) -> String,
    mode: SmtMode,
) -> Result<Vec<String>, SmtError> {
    let mut ys = Vec::with_capacity(vc.system.dynamics.len());
    for (i, f) in vc.system.dynamics.iter().enumerate() {
        let name = format!("{prefix}{}", i + 1);
        writeln!(out, "(define-fun {name} () Real {})", expr_smt(f, vars, mode)?).unwrap();
        ys.push(name);
    }
    Ok(ys)
}

/// Syntactic well-formedness check of an SMT-LIB script: balanced
/// s-expressions, every top-level form a list, and the minimal command
/// skeleton (`set-logic`, a declaration, an `assert`, `check-sat`).
pub fn check_smtlib_syntax(text: &str) -> Result<(), SmtError> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut heads: Vec<String> = Vec::new();
    let mut atom_start: Option<usize> = None;
    let mut head_pending = false;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b';' => {
                if atom_start.is_some() && depth == 0 {
                    return Err(SmtError::Syntax {
                        pos: i,
                        message: "bare atom at top level".into(),
                    });
                }
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            b'(' => {
                if depth == 0 {
                    head_pending = true;
                }
                depth += 1;
                atom_start = None;
            }
            b')' => {
                if depth == 0 {
                    return Err(SmtError::Syntax {
                        pos: i,
                        message: "unbalanced closing parenthesis".into(),
                    });
                }
                if head_pending && atom_start.is_some() {
                    heads.push(text[atom_start.unwrap()..i].to_string());
                    head_pending = false;
                }
                depth -= 1;
                atom_start = None;
            }
            _ if c.is_ascii_whitespace() => {
                if head_pending {
                    if let Some(s) = atom_start {
                        heads.push(text[s..i].to_string());
                        head_pending = false;
                    }
                }
                atom_start = None;
            }
            _ => {
                if depth == 0 {
                    return Err(SmtError::Syntax {
                        pos: i,
                        message: "bare atom at top level".into(),
                    });
                }
                if atom_start.is_none() {
                    atom_start = Some(i);
                }
            }
        }
        i += 1;
    }
    if depth != 0 {
        return Err(SmtError::Syntax {
            pos: bytes.len(),
            message: format!("{depth} unclosed parenthesis(es)"),
        });
    }
    for required in ["set-logic", "assert", "check-sat"] {
        if !heads.iter().any(|h| h == required) {
            return Err(SmtError::Syntax {
                pos: bytes.len(),
                message: format!("missing `({required} ...)` command"),
            });
        }
    }
    if !heads
        .iter()
        .any(|h| h == "declare-const" || h == "declare-fun")
    {
        return Err(SmtError::Syntax {
            pos: bytes.len(),
            message: "missing variable declarations".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Dims, Hyperbox};
    use crate::model::{
        validate_problem, ConstrainedSet, ProblemParts, RuleParams, Spec, System, SystemKind,
    };
    use crate::net::{Activation, Network, NetworkShape};
    use crate::rules::compile_rules;

    fn stability_vcs(act: Activation) -> Vec<VerificationCondition> {
        let problem = validate_problem(ProblemParts {
            system: System {
                kind: SystemKind::ContinuousDeterministic,
                n_state: 1,
                n_input: 0,
                dynamics: vec![parse_expr("-x1", Dims::state_only(1)).unwrap()],
                noise: vec![],
                input_box: None,
            },
            domain: ConstrainedSet::unconstrained(Hyperbox::from_bounds(&[(-1.0, 1.0)]).unwrap()),
            spec: Spec::Stability {
                equilibrium: vec![0.0],
                exclusion_radius: 0.1,
            },
            certificate_shape: NetworkShape::new(1, vec![(3, act)], 1),
            controller_shape: None,
            rule_params: RuleParams::default(),
            seed: 0,
        })
        .unwrap();
        let cert = Network::init(&problem.certificate_shape, 2);
        compile_rules(&problem, &cert, None).unwrap()
    }

    #[test]
    fn polynomial_export_passes_the_checker() {
        for vc in stability_vcs(Activation::Square) {
            let text = export_smtlib(&vc, SmtMode::Polynomial).unwrap();
            check_smtlib_syntax(&text).unwrap_or_else(|e| panic!("{}: {e}\n{text}", vc.id));
            assert!(text.contains("(set-logic QF_NRA)"));
            assert!(text.contains("(check-sat)"));
        }
    }

    #[test]
    fn tanh_is_rejected_in_polynomial_mode() {
        let vc = &stability_vcs(Activation::Tanh)[0];
        assert!(matches!(
            export_smtlib(vc, SmtMode::Polynomial),
            Err(SmtError::UnsupportedNode(name, SmtMode::Polynomial)) if name == "tanh"
        ));
        let text = export_smtlib(vc, SmtMode::Dreal).unwrap();
        check_smtlib_syntax(&text).unwrap();
        assert!(text.contains("(tanh "));
    }

    #[test]
    fn constants_are_exact_rationals() {
        assert_eq!(smt_f64(0.0), "0.0");
        assert_eq!(smt_f64(3.0), "3.0");
        assert_eq!(smt_f64(-3.0), "(- 3.0)");
        assert_eq!(smt_f64(0.5), "(/ 1.0 2.0)");
        assert_eq!(smt_f64(0.75), "(/ 3.0 4.0)");
        // 0.1 is not a dyadic rational; its double rounds to this exact
        // fraction.
        assert_eq!(
            smt_f64(0.1),
            "(/ 3602879701896397.0 36028797018963968.0)"
        );
    }

    #[test]
    fn checker_rejects_malformed_scripts() {
        assert!(check_smtlib_syntax("(set-logic QF_NRA").is_err());
        assert!(check_smtlib_syntax("stray (assert true)").is_err());
        assert!(check_smtlib_syntax("(set-logic QF_NRA) (assert (> x 0)) (check-sat)").is_err());
        assert!(check_smtlib_syntax(
            "(set-logic QF_NRA) (declare-const x Real) (assert (> x 0.0)) (check-sat)"
        )
        .is_ok());
        assert!(check_smtlib_syntax("; just a comment").is_err());
    }
}
