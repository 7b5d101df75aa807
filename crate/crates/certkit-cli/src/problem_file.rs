//! TOML problem files.
//!
//! Unknown keys are rejected everywhere: a typoed parameter name is an
//! error, never a silently applied default. Loading validates down to a
//! `Problem` plus fully resolved loop configuration, and
//! `to_canonical_toml` writes a file that loads back to the identical
//! problem with every parameter explicit.

use anyhow::{anyhow, bail, Result};
use certkit::cegis::CegisConfig;
use certkit::expr::{parse_expr, Dims, Hyperbox};
use certkit::learner::TrainConfig;
use certkit::model::{
    validate_problem, ConstrainedSet, Problem, ProblemParts, RuleParams, Spec, System, SystemKind,
};
use certkit::net::{Activation, NetworkShape, OutputTransform};
use certkit::verifier::VerifierConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub system: SystemSection,
    pub domain: SetSection,
    pub spec: SpecSection,
    pub certificate: NetSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<NetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<RulesSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cegis: Option<CegisSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// "continuous", "discrete", or "stochastic".
    pub kind: String,
    pub n_state: usize,
    #[serde(default)]
    pub n_input: usize,
    pub dynamics: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<NoisePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_box: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePoint {
    pub value: Vec<f64>,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSection {
    #[serde(rename = "box")]
    pub bounds: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equilibrium: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decrease: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<SetSection>,
    #[serde(default, rename = "unsafe", skip_serializing_if = "Option::is_none")]
    pub unsafe_set: Option<SetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<SetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avoid: Option<SetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inv: Option<SetSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub hidden: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_pos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_dec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_band: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_domain_invariance: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_exponent: Option<u32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_width_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_boxes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_box: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CegisSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cex_spread: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cex_radius_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cex_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub falsify_attempts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_restarts: Option<usize>,
}

/// A validated problem plus the fully resolved loop configuration.
#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub problem: Problem,
    pub config: CegisConfig,
}

fn parse_box(bounds: &[[f64; 2]], what: &str) -> Result<Hyperbox> {
    let pairs: Vec<(f64, f64)> = bounds.iter().map(|b| (b[0], b[1])).collect();
    Hyperbox::from_bounds(&pairs).map_err(|e| anyhow!("{what}: malformed box: {e}"))
}

fn parse_set(s: &SetSection, n_state: usize, what: &str) -> Result<ConstrainedSet> {
    let base = parse_box(&s.bounds, what)?;
    let constraints = s
        .constraints
        .iter()
        .map(|c| {
            parse_expr(c, Dims::state_only(n_state))
                .map_err(|e| anyhow!("{what}: constraint `{c}`: {e}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConstrainedSet { base, constraints })
}

fn parse_activation(name: &str) -> Result<Activation> {
    Activation::from_name(name)
        .ok_or_else(|| anyhow!("unknown activation `{name}` (expected tanh, relu, or square)"))
}

fn parse_shape(net: &NetSection, input_dim: usize, output_dim: usize) -> Result<NetworkShape> {
    let hidden = net
        .hidden
        .iter()
        .map(|l| Ok((l.width, parse_activation(&l.activation)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkShape::new(input_dim, hidden, output_dim))
}

fn parse_spec(file: &SpecSection, n_state: usize) -> Result<Spec> {
    let need_set = |s: &Option<SetSection>, field: &str| -> Result<ConstrainedSet> {
        let sec = s
            .as_ref()
            .ok_or_else(|| anyhow!("spec kind `{}` requires [spec.{field}]", file.kind))?;
        parse_set(sec, n_state, &format!("spec.{field}"))
    };
    let need = |v: Option<f64>, field: &str| -> Result<f64> {
        v.ok_or_else(|| anyhow!("spec kind `{}` requires `{field}`", file.kind))
    };
    let spec = match file.kind.as_str() {
        "stability" => Spec::Stability {
            equilibrium: file
                .equilibrium
                .clone()
                .ok_or_else(|| anyhow!("spec kind `stability` requires `equilibrium`"))?,
            exclusion_radius: need(file.exclusion_radius, "exclusion_radius")?,
        },
        "safety" => Spec::Safety {
            init: need_set(&file.init, "init")?,
            unsafe_set: need_set(&file.unsafe_set, "unsafe")?,
        },
        "invariance" => Spec::Invariance {
            inv: need_set(&file.inv, "inv")?,
        },
        "reachability" => Spec::Reachability {
            target: need_set(&file.target, "target")?,
            decrease: need(file.decrease, "decrease")?,
        },
        "reach-while-avoid" => Spec::ReachWhileAvoid {
            init: need_set(&file.init, "init")?,
            target: need_set(&file.target, "target")?,
            avoid: need_set(&file.avoid, "avoid")?,
            decrease: need(file.decrease, "decrease")?,
        },
        "probabilistic-safety" => Spec::ProbabilisticSafety {
            init: need_set(&file.init, "init")?,
            unsafe_set: need_set(&file.unsafe_set, "unsafe")?,
            level: need(file.level, "level")?,
        },
        "probabilistic-reachability" => Spec::ProbabilisticReachability {
            target: need_set(&file.target, "target")?,
            decrease: need(file.decrease, "decrease")?,
        },
        other => bail!(
            "unknown spec kind `{other}` (expected stability, safety, invariance, reachability, \
             reach-while-avoid, probabilistic-safety, or probabilistic-reachability)"
        ),
    };
    // Reject fields that do not belong to the chosen kind.
    let forbid = |present: bool, field: &str| -> Result<()> {
        if present {
            bail!("spec kind `{}` does not take `{field}`", file.kind);
        }
        Ok(())
    };
    match &spec {
        Spec::Stability { .. } => {
            forbid(file.init.is_some(), "init")?;
            forbid(file.target.is_some(), "target")?;
            forbid(file.level.is_some(), "level")?;
            forbid(file.decrease.is_some(), "decrease")?;
        }
        _ => {
            forbid(file.equilibrium.is_some(), "equilibrium")?;
            forbid(file.exclusion_radius.is_some(), "exclusion_radius")?;
        }
    }
    Ok(spec)
}

/// Parse and validate a problem file.
pub fn load_problem(text: &str) -> Result<LoadedProblem> {
    let file: ProblemFile = toml::from_str(text).map_err(|e| anyhow!("problem file: {e}"))?;
    let sys = &file.system;
    let kind = match sys.kind.as_str() {
        "continuous" => SystemKind::ContinuousDeterministic,
        "discrete" => SystemKind::DiscreteDeterministic,
        "stochastic" => SystemKind::DiscreteStochastic,
        other => bail!("unknown system kind `{other}` (expected continuous, discrete, or stochastic)"),
    };
    let n_noise = sys.noise.first().map_or(0, |p| p.value.len());
    let dims = Dims::new(sys.n_state, sys.n_input, n_noise);
    let dynamics = sys
        .dynamics
        .iter()
        .map(|d| parse_expr(d, dims).map_err(|e| anyhow!("system.dynamics `{d}`: {e}")))
        .collect::<Result<Vec<_>>>()?;
    let input_box = sys
        .input_box
        .as_ref()
        .map(|b| parse_box(b, "system.input_box"))
        .transpose()?;
    let system = System {
        kind,
        n_state: sys.n_state,
        n_input: sys.n_input,
        dynamics,
        noise: sys.noise.iter().map(|p| (p.value.clone(), p.prob)).collect(),
        input_box: input_box.clone(),
    };
    let domain = parse_set(&file.domain, sys.n_state, "domain")?;
    let spec = parse_spec(&file.spec, sys.n_state)?;
    let certificate_shape = parse_shape(&file.certificate, sys.n_state, 1)?;
    let controller_shape = file
        .controller
        .as_ref()
        .map(|net| -> Result<NetworkShape> {
            let shape = parse_shape(net, sys.n_state, sys.n_input)?;
            let b = input_box
                .clone()
                .ok_or_else(|| anyhow!("controller given but system.input_box is missing"))?;
            Ok(shape.with_box_clamp(b))
        })
        .transpose()?;

    let defaults = RuleParams::default();
    let r = file.rules.clone().unwrap_or_default();
    let rule_params = RuleParams {
        mu_pos: r.mu_pos.unwrap_or(defaults.mu_pos),
        mu_dec: r.mu_dec.unwrap_or(defaults.mu_dec),
        eps_band: r.eps_band.unwrap_or(defaults.eps_band),
        check_domain_invariance: r
            .check_domain_invariance
            .unwrap_or(defaults.check_domain_invariance),
    };

    let problem = validate_problem(ProblemParts {
        system,
        domain,
        spec,
        certificate_shape,
        controller_shape,
        rule_params,
        seed: file.seed.unwrap_or(0),
    })
    .map_err(|diags| {
        anyhow!(
            "invalid problem:\n{}",
            diags
                .iter()
                .map(|d| format!("  {d}"))
                .collect::<Vec<_>>()
                .join("\n")
        )
    })?;

    let mut config = CegisConfig::default();
    if let Some(t) = &file.train {
        let d = TrainConfig::default();
        config.train = TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            penalty_exponent: t.penalty_exponent.unwrap_or(d.penalty_exponent),
            ..d
        };
        if !matches!(config.train.penalty_exponent, 1 | 2) {
            bail!("train.penalty_exponent must be 1 or 2");
        }
    }
    if let Some(v) = &file.verify {
        let d = VerifierConfig::default();
        config.verifier = VerifierConfig {
            min_width_rel: v.min_width_rel.unwrap_or(d.min_width_rel),
            max_boxes: v.max_boxes.unwrap_or(d.max_boxes),
            samples_per_box: v.samples_per_box.unwrap_or(d.samples_per_box),
            ..d
        };
    }
    config.verifier.seed = problem.seed;
    if let Some(c) = &file.cegis {
        let d = CegisConfig::default();
        config.max_iterations = c.max_iterations.unwrap_or(d.max_iterations);
        config.initial_samples = c.initial_samples.unwrap_or(d.initial_samples);
        config.cex_spread = c.cex_spread.unwrap_or(d.cex_spread);
        config.cex_radius_rel = c.cex_radius_rel.unwrap_or(d.cex_radius_rel);
        config.cex_weight = c.cex_weight.unwrap_or(d.cex_weight);
        config.falsify_attempts = c.falsify_attempts.unwrap_or(d.falsify_attempts);
        config.max_restarts = c.max_restarts.unwrap_or(d.max_restarts);
    }
    Ok(LoadedProblem { problem, config })
}

fn set_section(s: &ConstrainedSet) -> SetSection {
    SetSection {
        bounds: s.base.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect(),
        constraints: s.constraints.iter().map(|c| c.to_string()).collect(),
    }
}

fn net_section(shape: &NetworkShape) -> NetSection {
    NetSection {
        hidden: shape
            .hidden
            .iter()
            .map(|(w, a)| LayerSpec {
                width: *w,
                activation: a.name().to_string(),
            })
            .collect(),
    }
}

/// Canonical serialization: every parameter explicit, fixed section order.
/// Loading the output yields a Problem identical to the input.
pub fn to_canonical_toml(loaded: &LoadedProblem) -> String {
    let p = &loaded.problem;
    let c = &loaded.config;
    let sys = &p.system;
    let spec = match &p.spec {
        Spec::Stability {
            equilibrium,
            exclusion_radius,
        } => SpecSection {
            kind: "stability".into(),
            equilibrium: Some(equilibrium.clone()),
            exclusion_radius: Some(*exclusion_radius),
            decrease: None,
            level: None,
            init: None,
            unsafe_set: None,
            target: None,
            avoid: None,
            inv: None,
        },
        Spec::Safety { init, unsafe_set } => SpecSection {
            kind: "safety".into(),
            equilibrium: None,
            exclusion_radius: None,
            decrease: None,
            level: None,
            init: Some(set_section(init)),
            unsafe_set: Some(set_section(unsafe_set)),
            target: None,
            avoid: None,
            inv: None,
        },
        Spec::Invariance { inv } => SpecSection {
            kind: "invariance".into(),
            equilibrium: None,
            exclusion_radius: None,
            decrease: None,
            level: None,
            init: None,
            unsafe_set: None,
            target: None,
            avoid: None,
            inv: Some(set_section(inv)),
        },
        Spec::Reachability { target, decrease } => SpecSection {
            kind: "reachability".into(),
            equilibrium: None,
            exclusion_radius: None,
            decrease: Some(*decrease),
            level: None,
            init: None,
            unsafe_set: None,
            target: Some(set_section(target)),
            avoid: None,
            inv: None,
        },
        Spec::ReachWhileAvoid {
            init,
            target,
            avoid,
            decrease,
        } => SpecSection {
            kind: "reach-while-avoid".into(),
            equilibrium: None,
            exclusion_radius: None,
            decrease: Some(*decrease),
            level: None,
            init: Some(set_section(init)),
            unsafe_set: None,
            target: Some(set_section(target)),
            avoid: Some(set_section(avoid)),
            inv: None,
        },
        Spec::ProbabilisticSafety {
            init,
            unsafe_set,
            level,
        } => SpecSection {
            kind: "probabilistic-safety".into(),
            equilibrium: None,
            exclusion_radius: None,
            decrease: None,
            level: Some(*level),
            init: Some(set_section(init)),
            unsafe_set: Some(set_section(unsafe_set)),
            target: None,
            avoid: None,
            inv: None,
        },
        Spec::ProbabilisticReachability { target, decrease } => SpecSection {
            kind: "probabilistic-reachability".into(),
            equilibrium: None,
            exclusion_radius: None,
            decrease: Some(*decrease),
            level: None,
            init: None,
            unsafe_set: None,
            target: Some(set_section(target)),
            avoid: None,
            inv: None,
        },
    };
    let controller = p.controller_shape.as_ref().map(|shape| {
        debug_assert!(matches!(shape.transform, OutputTransform::BoxClamp(_)));
        net_section(shape)
    });
    let file = ProblemFile {
        seed: Some(p.seed),
        system: SystemSection {
            kind: match sys.kind {
                SystemKind::ContinuousDeterministic => "continuous",
                SystemKind::DiscreteDeterministic => "discrete",
                SystemKind::DiscreteStochastic => "stochastic",
            }
            .into(),
            n_state: sys.n_state,
            n_input: sys.n_input,
            dynamics: sys.dynamics.iter().map(|d| d.to_string()).collect(),
            noise: sys
                .noise
                .iter()
                .map(|(value, prob)| NoisePoint {
                    value: value.clone(),
                    prob: *prob,
                })
                .collect(),
            input_box: sys
                .input_box
                .as_ref()
                .map(|b| b.intervals().iter().map(|iv| [iv.lo, iv.hi]).collect()),
        },
        domain: set_section(&p.domain),
        spec,
        certificate: net_section(&p.certificate_shape),
        controller,
        rules: Some(RulesSection {
            mu_pos: Some(p.rule_params.mu_pos),
            mu_dec: Some(p.rule_params.mu_dec),
            eps_band: Some(p.rule_params.eps_band),
            check_domain_invariance: Some(p.rule_params.check_domain_invariance),
        }),
        train: Some(TrainSection {
            epochs: Some(c.train.epochs),
            learning_rate: Some(c.train.learning_rate),
            penalty_exponent: Some(c.train.penalty_exponent),
        }),
        verify: Some(VerifySection {
            min_width_rel: Some(c.verifier.min_width_rel),
            max_boxes: Some(c.verifier.max_boxes),
            samples_per_box: Some(c.verifier.samples_per_box),
        }),
        cegis: Some(CegisSection {
            max_iterations: Some(c.max_iterations),
            initial_samples: Some(c.initial_samples),
            cex_spread: Some(c.cex_spread),
            cex_radius_rel: Some(c.cex_radius_rel),
            cex_weight: Some(c.cex_weight),
            falsify_attempts: Some(c.falsify_attempts),
            max_restarts: Some(c.max_restarts),
        }),
    };
    toml::to_string_pretty(&file).expect("problem files serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const STABILITY_FIXTURE: &str = r#"
seed = 7

[system]
kind = "continuous"
n_state = 1
dynamics = ["-x1"]

[domain]
box = [[-1.0, 1.0]]

[spec]
kind = "stability"
equilibrium = [0.0]
exclusion_radius = 0.1

[certificate]
hidden = [{ width = 6, activation = "square" }]
"#;

    #[test]
    fn loads_and_round_trips() {
        let loaded = load_problem(STABILITY_FIXTURE).unwrap();
        assert_eq!(loaded.problem.seed, 7);
        assert_eq!(loaded.problem.system.n_state, 1);
        let canonical = to_canonical_toml(&loaded);
        let again = load_problem(&canonical).unwrap();
        assert_eq!(loaded.problem, again.problem);
        assert_eq!(to_canonical_toml(&again), canonical);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = STABILITY_FIXTURE.replace("exclusion_radius", "exclusion_radiux");
        let err = load_problem(&text).unwrap_err().to_string();
        assert!(err.contains("exclusion_radiux"), "{err}");
    }

    #[test]
    fn missing_spec_fields_are_named() {
        let text = STABILITY_FIXTURE.replace("equilibrium = [0.0]\n", "");
        let err = load_problem(&text).unwrap_err().to_string();
        assert!(err.contains("equilibrium"), "{err}");
    }

    #[test]
    fn foreign_spec_fields_are_rejected() {
        let text = STABILITY_FIXTURE.replace("exclusion_radius = 0.1", "exclusion_radius = 0.1\ndecrease = 0.5");
        let err = load_problem(&text).unwrap_err().to_string();
        assert!(err.contains("decrease"), "{err}");
    }

    #[test]
    fn stochastic_fixture_parses() {
        let text = r#"
seed = 3

[system]
kind = "stochastic"
n_state = 1
dynamics = ["0.5*x1 + w1"]
noise = [{ value = [-0.1], prob = 0.5 }, { value = [0.1], prob = 0.5 }]

[domain]
box = [[-1.0, 1.0]]

[spec]
kind = "probabilistic-safety"
level = 5.0

[spec.init]
box = [[-0.1, 0.1]]

[spec.unsafe]
box = [[0.9, 1.0]]

[certificate]
hidden = [{ width = 6, activation = "square" }]
"#;
        let loaded = load_problem(text).unwrap();
        assert!(loaded.problem.system.is_stochastic());
        let canonical = to_canonical_toml(&loaded);
        assert_eq!(load_problem(&canonical).unwrap().problem, loaded.problem);
    }
}
