//! Experiment configuration: TOML with embedded expression strings.

use hindex::expr::{parse, parse_matrix};
use hindex::heisenberg::HeisenbergDim;
use hindex::hypoelliptic::{ModelOperatorSpec, Term};
use hindex::C64;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Algebra,
    Defects,
    Correspondence,
    Functional,
    Index,
    Diagram,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Algebra, Suite::Defects, Suite::Correspondence, Suite::Functional, Suite::Index, Suite::Diagram];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Algebra => "algebra",
            Suite::Defects => "defects",
            Suite::Correspondence => "correspondence",
            Suite::Functional => "functional",
            Suite::Index => "index",
            Suite::Diagram => "diagram",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            format!(
                "unknown suite `{s}` (expected one of algebra, defects, correspondence, functional, index, diagram)"
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Heisenberg dimension parameter `n` of `H_n`.
    pub n: usize,
    /// Points per axis (odd).
    pub points: usize,
    /// Half-width `L`; the lattice covers `[−L, L]` per axis.
    pub extent: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n: 1, points: 13, extent: 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TGrid {
    pub t0: f64,
    pub ratio: f64,
    pub count: usize,
}

impl Default for TGrid {
    fn default() -> Self {
        TGrid { t0: 1.0, ratio: 2.0, count: 4 }
    }
}

impl TGrid {
    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.t0 * self.ratio.powi(k as i32)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgebraConfig {
    /// Randomized cases per identity.
    pub cases: usize,
    /// Coordinates are drawn uniformly from `[−range, range]`.
    pub range: f64,
    /// Polynomial test functions for the vector-field identities.
    pub polynomials: Vec<String>,
}

impl Default for AlgebraConfig {
    fn default() -> Self {
        AlgebraConfig {
            cases: 10_000,
            range: 2.0,
            polynomials: vec![
                "x0".into(),
                "x1*x2".into(),
                "x0^2 + 3*x1^3*x2".into(),
                "x0*x1 - 2*x2^2 + x0^3".into(),
                "sqnorm(x)^2".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectsConfig {
    pub a: String,
    /// Second factor of the product; defaults to `a`.
    pub b: Option<String>,
    /// Multiplier `f(x)` of the commutator defect.
    pub multiplier: String,
    /// Radius beyond which the symbols are negligible in `y`.
    pub radius: f64,
    /// Defects are measured on sites within this fraction of the extent.
    pub band: f64,
}

impl Default for DefectsConfig {
    fn default() -> Self {
        DefectsConfig {
            a: "exp(-sqnorm(x)/16)*exp(-4*sqnorm)".into(),
            b: None,
            multiplier: "x1*exp(-sqnorm(x)/16)".into(),
            radius: 6.0,
            band: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrespondenceConfig {
    /// `α̃(x, v)` on the tangent side, `y` read as `v`.
    pub tangent: String,
    /// `α̂(x, ξ)` with `α̃ = (2π)^{−m} ∫ α̂ e^{ivξ} dξ`.
    pub cotangent: String,
    /// `α̂` is negligible beyond this frequency radius.
    pub frequency_radius: f64,
    /// Test function for Parseval.
    pub parseval: String,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        CorrespondenceConfig {
            tangent: "(2*pi)^(-1.5)*exp(-sqnorm/2)".into(),
            cotangent: "exp(-sqnorm(xi)/2)".into(),
            frequency_radius: 9.0,
            parseval: "exp(-sqnorm(x))*(1 + i*x1)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunctionalConfig {
    pub spec: String,
    /// Scalar functions `α(λ)`, written in `x0`.
    pub functions: Vec<String>,
    pub band: f64,
}

impl Default for FunctionalConfig {
    fn default() -> Self {
        FunctionalConfig {
            spec: "sublaplacian".into(),
            functions: vec!["exp(-x0^2)".into(), "-2*i/(x0 + i)".into()],
            band: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub specs: Vec<String>,
    /// Symbol expected to satisfy the vanishing criterion.
    pub vanishing: String,
    pub vanishing_radius: f64,
    /// The vanishing probe continues the t-grid by this many further steps,
    /// since the criterion concerns the large-t tail.
    pub vanishing_extra_scales: usize,
    /// Planck parameters for the Rockland check.
    pub lambdas: Vec<f64>,
    /// Hermite cutoff `K`.
    pub cutoff: usize,
    /// Points per axis of the refinement sequence for the a-priori constant.
    pub apriori_points: Vec<usize>,
    pub apriori_extent: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            specs: vec![
                "sublaplacian".into(),
                "identity".into(),
                "folland_stein(0.5)".into(),
                "X1 + i*X2".into(),
                "drop_row(sublaplacian)".into(),
            ],
            vanishing: "sqnorm^4*exp(-sqnorm)".into(),
            vanishing_radius: 8.0,
            vanishing_extra_scales: 2,
            lambdas: vec![-2.0, -1.0, -0.5, 0.5, 1.0, 2.0],
            cutoff: 32,
            apriori_points: vec![9, 13, 17],
            apriori_extent: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagramConfig {
    pub specs: Vec<String>,
    /// Symbol whose correspondence certificate is reported.
    pub symbol: String,
    pub radius: f64,
}

impl Default for DiagramConfig {
    fn default() -> Self {
        DiagramConfig {
            specs: vec!["sublaplacian".into(), "drop_row(sublaplacian)".into(), "identity".into()],
            symbol: "exp(-sqnorm)".into(),
            radius: 6.0,
        }
    }
}

/// Pass/fail thresholds; the defaults are the acceptance values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub algebra_max_error: f64,
    pub algebra_seconds: f64,
    pub fields_seconds: f64,
    pub defect_exponent: f64,
    pub boundedness_ratio: f64,
    pub defects_seconds: f64,
    pub correspondence_relative: f64,
    pub parseval: f64,
    pub correspondence_seconds: f64,
    pub functional_exponent: f64,
    pub functional_seconds: f64,
    pub integrality: f64,
    pub t_derivative: f64,
    pub min_agreeing_specs: usize,
    pub index_seconds: f64,
    pub rockland_relative: f64,
    pub degenerate_below: f64,
    pub nondegenerate_above: f64,
    /// Largest-to-smallest ratio of the a-priori constant that still counts as stable.
    pub apriori_stable_ratio: f64,
    /// Growth factor over the refinement sequence that counts as divergent.
    pub apriori_divergent_growth: f64,
    pub rockland_seconds: f64,
    pub diagram_difference: f64,
    pub certificate: f64,
    pub diagram_seconds: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            algebra_max_error: 1e-12,
            algebra_seconds: 10.0,
            fields_seconds: 5.0,
            defect_exponent: -0.8,
            boundedness_ratio: 1.10,
            defects_seconds: 300.0,
            correspondence_relative: 1e-6,
            parseval: 1e-10,
            correspondence_seconds: 60.0,
            functional_exponent: -0.5,
            functional_seconds: 600.0,
            integrality: 0.05,
            t_derivative: 0.02,
            min_agreeing_specs: 3,
            index_seconds: 600.0,
            rockland_relative: 0.01,
            degenerate_below: 1e-3,
            nondegenerate_above: 0.1,
            apriori_stable_ratio: 2.0,
            apriori_divergent_growth: 1.5,
            rockland_seconds: 120.0,
            diagram_difference: 0.05,
            certificate: 2.0,
            diagram_seconds: 600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into(), plots: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: Suite,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub t_grid: TGrid,
    #[serde(default)]
    pub algebra: AlgebraConfig,
    #[serde(default)]
    pub defects: DefectsConfig,
    #[serde(default)]
    pub correspondence: CorrespondenceConfig,
    #[serde(default)]
    pub functional: FunctionalConfig,
    #[serde(default)]
    pub index: IndexConfig,
    #[serde(default)]
    pub diagram: DiagramConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn new(suite: Suite) -> Self {
        ExperimentConfig {
            suite,
            seed: 0,
            grid: GridConfig::default(),
            t_grid: TGrid::default(),
            algebra: AlgebraConfig::default(),
            defects: DefectsConfig::default(),
            correspondence: CorrespondenceConfig::default(),
            functional: FunctionalConfig::default(),
            index: IndexConfig::default(),
            diagram: DiagramConfig::default(),
            tolerances: Tolerances::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn dim(&self) -> HeisenbergDim {
        HeisenbergDim::new(self.grid.n).expect("validated")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Configuration error with a location: `line:column` for syntax, a field path for semantics.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Syntax { line: usize, column: usize, message: String },
    Semantic { path: String, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, column, message } => write!(f, "syntax error at {line}:{column}: {message}"),
            ConfigError::Semantic { path, message } => write!(f, "invalid `{path}`: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn semantic(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Semantic { path: path.into(), message: message.into() }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parse and validate. Expression strings are parsed so that errors surface
/// here, reported at `field[:line:column]` inside the string.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Syntax { line, column, message: e.message().to_string() }
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

fn check_expr(path: &str, src: &str) -> Result<(), ConfigError> {
    parse_matrix(src).map(|_| ()).map_err(|e| dsl_error(path, e))
}

fn dsl_error(path: &str, e: hindex::Error) -> ConfigError {
    match e {
        hindex::Error::Parse { line, column, message } => {
            semantic(path, format!("expression error at line {line}, column {column}: {message}"))
        }
        other => semantic(path, other.to_string()),
    }
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(semantic(path, format!("must be positive, got {v}")))
    }
}

pub fn validate(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    let g = &cfg.grid;
    if g.n == 0 {
        return Err(semantic("grid.n", "must be at least 1"));
    }
    if g.points < 3 || g.points % 2 == 0 {
        return Err(semantic("grid.points", format!("must be odd and at least 3, got {}", g.points)));
    }
    positive("grid.extent", g.extent)?;
    let t = &cfg.t_grid;
    positive("t_grid.t0", t.t0)?;
    if !(t.ratio > 1.0) {
        return Err(semantic("t_grid.ratio", format!("must exceed 1, got {}", t.ratio)));
    }
    if t.count < 3 {
        return Err(semantic("t_grid.count", format!("need at least 3 scales, got {}", t.count)));
    }
    if cfg.algebra.cases == 0 {
        return Err(semantic("algebra.cases", "must be positive"));
    }
    positive("algebra.range", cfg.algebra.range)?;
    for (k, p) in cfg.algebra.polynomials.iter().enumerate() {
        parse(p).map_err(|e| dsl_error(&format!("algebra.polynomials[{k}]"), e))?;
    }
    check_expr("defects.a", &cfg.defects.a)?;
    if let Some(b) = &cfg.defects.b {
        check_expr("defects.b", b)?;
    }
    parse(&cfg.defects.multiplier).map_err(|e| dsl_error("defects.multiplier", e))?;
    positive("defects.radius", cfg.defects.radius)?;
    band("defects.band", cfg.defects.band)?;
    check_expr("correspondence.tangent", &cfg.correspondence.tangent)?;
    check_expr("correspondence.cotangent", &cfg.correspondence.cotangent)?;
    check_expr("correspondence.parseval", &cfg.correspondence.parseval)?;
    positive("correspondence.frequency_radius", cfg.correspondence.frequency_radius)?;
    let dim = HeisenbergDim::new(g.n).map_err(|e| semantic("grid.n", e.to_string()))?;
    parse_spec(&cfg.functional.spec, dim).map_err(|m| semantic("functional.spec", m))?;
    for (k, f) in cfg.functional.functions.iter().enumerate() {
        parse(f).map_err(|e| dsl_error(&format!("functional.functions[{k}]"), e))?;
    }
    band("functional.band", cfg.functional.band)?;
    for (k, s) in cfg.index.specs.iter().enumerate() {
        parse_spec(s, dim).map_err(|m| semantic(format!("index.specs[{k}]"), m))?;
    }
    check_expr("index.vanishing", &cfg.index.vanishing)?;
    positive("index.vanishing_radius", cfg.index.vanishing_radius)?;
    if let Some(l) = cfg.index.lambdas.iter().find(|l| **l == 0.0 || !l.is_finite()) {
        return Err(semantic("index.lambdas", format!("Planck parameters must be nonzero, got {l}")));
    }
    if cfg.index.cutoff < 4 {
        return Err(semantic("index.cutoff", "Hermite cutoff must be at least 4"));
    }
    if let Some(p) = cfg.index.apriori_points.iter().find(|p| **p < 3 || **p % 2 == 0) {
        return Err(semantic("index.apriori_points", format!("points must be odd and at least 3, got {p}")));
    }
    positive("index.apriori_extent", cfg.index.apriori_extent)?;
    for (k, s) in cfg.diagram.specs.iter().enumerate() {
        parse_spec(s, dim).map_err(|m| semantic(format!("diagram.specs[{k}]"), m))?;
    }
    check_expr("diagram.symbol", &cfg.diagram.symbol)?;
    positive("diagram.radius", cfg.diagram.radius)?;
    if cfg.output.dir.is_empty() {
        return Err(semantic("output.dir", "must not be empty"));
    }
    Ok(())
}

fn band(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(semantic(path, format!("must lie in (0, 1], got {v}")))
    }
}

/// A model operator named in a config, with the optional removal of one target row.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecText {
    pub spec: ModelOperatorSpec,
    pub drop_row: bool,
}

/// Operator text: `sublaplacian`, `identity`, `folland_stein(γ)`,
/// `drop_row(<spec>)`, or a sum of terms `c*X_{i}*X_{j}…` such as `X1 + i*X2`
/// or `-X1^2 - X2^2 + 0.5*i*X0`. Coefficients are real numbers, `i`, or a
/// product of the two.
pub fn parse_spec(text: &str, dim: HeisenbergDim) -> Result<SpecText, String> {
    let s = text.trim();
    if let Some(inner) = s.strip_prefix("drop_row(").and_then(|r| r.strip_suffix(')')) {
        let inner = parse_spec(inner, dim)?;
        if inner.drop_row {
            return Err("drop_row cannot be nested".into());
        }
        return Ok(SpecText { spec: inner.spec, drop_row: true });
    }
    let spec = match s {
        "sublaplacian" => ModelOperatorSpec::sub_laplacian(dim),
        "identity" => ModelOperatorSpec::identity(dim, 1),
        _ => {
            if let Some(g) = s.strip_prefix("folland_stein(").and_then(|r| r.strip_suffix(')')) {
                let gamma: f64 = g.trim().parse().map_err(|_| format!("bad Folland–Stein parameter `{g}`"))?;
                ModelOperatorSpec::folland_stein(dim, gamma)
            } else {
                let terms = parse_terms(s, dim)?;
                ModelOperatorSpec::new(dim, 1, 1, terms).map_err(|e| e.to_string())?
            }
        }
    };
    Ok(SpecText { spec, drop_row: false })
}

fn parse_terms(s: &str, dim: HeisenbergDim) -> Result<Vec<Term>, String> {
    if s.is_empty() {
        return Err("empty operator".into());
    }
    let mut terms = Vec::new();
    let mut sign = 1.0;
    let mut cur = String::new();
    let flush = |cur: &mut String, sign: f64, terms: &mut Vec<Term>| -> Result<(), String> {
        let t = cur.trim();
        if t.is_empty() {
            return Err("dangling sign".into());
        }
        let (c, ix) = parse_term(t, dim)?;
        terms.push(Term { indices: ix, coeff: vec![c * sign] });
        cur.clear();
        Ok(())
    };
    for ch in s.chars() {
        match ch {
            '+' | '-' => {
                if cur.trim().is_empty() {
                    if ch == '-' {
                        sign = -sign;
                    }
                    continue;
                }
                // exponent sign of a float literal
                if cur.ends_with(['e', 'E'])
                    && cur.trim_end_matches(['e', 'E']).chars().last().is_some_and(|c| c.is_ascii_digit())
                {
                    cur.push(ch);
                    continue;
                }
                flush(&mut cur, sign, &mut terms)?;
                sign = if ch == '-' { -1.0 } else { 1.0 };
            }
            _ => cur.push(ch),
        }
    }
    flush(&mut cur, sign, &mut terms)?;
    Ok(terms)
}

fn parse_term(t: &str, dim: HeisenbergDim) -> Result<(C64, Vec<usize>), String> {
    let mut c = C64::new(1.0, 0.0);
    let mut ix = Vec::new();
    for f in t.split('*').map(str::trim) {
        if f == "i" {
            c *= C64::new(0.0, 1.0);
        } else if let Some(rest) = f.strip_prefix('X') {
            let (idx, pow) = match rest.split_once('^') {
                Some((a, p)) => (a, p.trim().parse::<usize>().map_err(|_| format!("bad power in `{f}`"))?),
                None => (rest, 1),
            };
            let k: usize = idx.trim().parse().map_err(|_| format!("bad field `{f}`"))?;
            if k >= dim.dim() {
                return Err(format!("field X{k} out of range for n = {}", dim.n()));
            }
            ix.extend(std::iter::repeat_n(k, pow));
        } else {
            let v: f64 = f.parse().map_err(|_| format!("bad factor `{f}`"))?;
            c *= v;
        }
    }
    Ok((c, ix))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("suite = \"defects\"").unwrap();
        assert_eq!(c.grid.points, 13);
        assert_eq!(c.grid.extent, 6.0);
        assert_eq!(c.t_grid.values(), vec![1.0, 2.0, 4.0, 8.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse_config("suite = \"index\"\n[grid]\npoints = 9\nwidth = 3").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 4, .. }), "{e}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let e = parse_config("suite = \"algebra\"\n[grid]\npoints = 10").unwrap_err();
        assert_eq!(e, semantic("grid.points", "must be odd and at least 3, got 10"));
        let e = parse_config("suite = \"algebra\"\n[t_grid]\nt0 = -1.0").unwrap_err();
        assert!(matches!(e, ConfigError::Semantic { ref path, .. } if path == "t_grid.t0"));
    }

    #[test]
    fn dangling_paren_is_located() {
        let e = parse_config("suite = \"defects\"\n[defects]\na = \"exp(-\"").unwrap_err();
        let ConfigError::Semantic { path, message } = e else { panic!() };
        assert_eq!(path, "defects.a");
        assert!(message.contains("column 4"), "{message}");
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = ExperimentConfig::new(Suite::Index);
        c.seed = 42;
        c.defects.b = Some("exp(-2*sqnorm)".into());
        let back = parse_config(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn operator_texts() {
        let d = HeisenbergDim::new(1).unwrap();
        let s = parse_spec("X1 + i*X2", d).unwrap();
        assert_eq!(s.spec.terms().len(), 2);
        assert_eq!(s.spec.terms()[1].coeff[0], C64::new(0.0, 1.0));
        let s = parse_spec("-X1^2 - X2^2", d).unwrap().spec;
        assert_eq!(s, ModelOperatorSpec::sub_laplacian(d));
        assert!(parse_spec("drop_row(sublaplacian)", d).unwrap().drop_row);
        assert!(parse_spec("X3", d).is_err());
        assert!(parse_spec("1e-3*X0 + X1", d).is_ok());
        assert_eq!(parse_spec("folland_stein(0.5)", d).unwrap().spec, ModelOperatorSpec::folland_stein(d, 0.5));
    }
}
