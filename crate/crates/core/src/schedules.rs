//! Sampling-probability schedules.
//!
//! Every schedule returns the probability of feeding the *golden* token.
//! `f(i)` is evaluated over training steps, `g(t)` over decoding steps and
//! `h(i, t)` combines both. All families are defined on a continuous
//! domain so that compositions such as `g(t * (1 - f(i)))` are well formed;
//! integer callers simply pass integral arguments.
//!
//! The accumulated-error integral `accum(t) = ∫₀ᵗ (1 - g(x)) dx` is
//! evaluated in closed form for every family.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `max(ε, k·x + b)`, `k < 0`.
    Linear,
    /// `k^x`, `0 < k < 1`.
    Exponential,
    /// Inverse sigmoid `k / (k + e^{x/k})`, `k ≥ 1`.
    Sigmoid,
    /// Never feeds golden tokens.
    AlwaysSample,
    /// Constant golden probability `uniform_p`.
    Uniform,
    /// `1 - err[x]` from a measured per-step error table.
    Empirical,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Decay,
    /// Mirror image of the decay curve: `1 - decay(x)`.
    Increase,
}

/// Raw, serializable description of a schedule. Use [`Schedule::new`] (or
/// [`ScheduleSpec::build`]) to validate it before evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    pub family: Family,
    pub direction: Direction,
    /// Slope (linear), radix (exponential) or temperature (sigmoid).
    pub k: f64,
    /// Floor of the linear family.
    pub epsilon: f64,
    /// Offset of the linear family.
    pub b: f64,
    pub uniform_p: f64,
    /// Per-step error rates for [`Family::Empirical`].
    pub empirical_table: Option<Vec<f64>>,
    /// Optional cap on the schedule argument; beyond it the schedule is flat.
    pub max_arg: Option<f64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            family: Family::Exponential,
            direction: Direction::Decay,
            k: 0.99,
            epsilon: 0.2,
            b: 1.0,
            uniform_p: 0.5,
            empirical_table: None,
            max_arg: None,
        }
    }
}

impl ScheduleSpec {
    pub fn linear(k: f64, epsilon: f64, b: f64) -> Self {
        Self {
            family: Family::Linear,
            k,
            epsilon,
            b,
            ..Self::default()
        }
    }

    pub fn exponential(k: f64) -> Self {
        Self {
            family: Family::Exponential,
            k,
            ..Self::default()
        }
    }

    pub fn sigmoid(k: f64) -> Self {
        Self {
            family: Family::Sigmoid,
            k,
            ..Self::default()
        }
    }

    pub fn always_sample() -> Self {
        Self {
            family: Family::AlwaysSample,
            ..Self::default()
        }
    }

    pub fn uniform(p: f64) -> Self {
        Self {
            family: Family::Uniform,
            uniform_p: p,
            ..Self::default()
        }
    }

    /// Golden probability `1 - error_rates[t]`.
    pub fn empirical(error_rates: Vec<f64>) -> Self {
        Self {
            family: Family::Empirical,
            empirical_table: Some(error_rates),
            ..Self::default()
        }
    }

    /// Golden probability fixed at 1 (plain teacher forcing).
    pub fn never_sample() -> Self {
        Self::always_sample().increase()
    }

    pub fn increase(mut self) -> Self {
        self.direction = Direction::Increase;
        self
    }

    pub fn decay(mut self) -> Self {
        self.direction = Direction::Decay;
        self
    }

    pub fn with_max_arg(mut self, max_arg: f64) -> Self {
        self.max_arg = Some(max_arg);
        self
    }

    pub fn build(&self) -> Result<Schedule> {
        Schedule::new(self.clone())
    }

    /// Validates and evaluates in one go.
    pub fn eval(&self, step: u64) -> Result<f64> {
        Ok(self.build()?.eval(step))
    }

    /// Short human-readable label, used as a CSV column name.
    pub fn label(&self) -> String {
        let dir = match self.direction {
            Direction::Decay => "decay",
            Direction::Increase => "increase",
        };
        match self.family {
            Family::Linear => format!("linear_{dir}(k={},eps={},b={})", self.k, self.epsilon, self.b),
            Family::Exponential => format!("exponential_{dir}(k={})", self.k),
            Family::Sigmoid => format!("sigmoid_{dir}(k={})", self.k),
            Family::AlwaysSample => format!("always_sample_{dir}"),
            Family::Uniform => format!("uniform_{dir}(p={})", self.uniform_p),
            Family::Empirical => format!("empirical_{dir}"),
        }
    }
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

/// A validated schedule. Evaluation is infallible and pure.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    spec: ScheduleSpec,
}

impl Schedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let bad = |msg: String| Err(Error::config(format!("{}: {msg}", spec.label())));
        if !spec.k.is_finite() || !spec.epsilon.is_finite() || !spec.b.is_finite() {
            return bad("parameters must be finite".into());
        }
        match spec.family {
            Family::Linear => {
                if spec.k >= 0.0 {
                    return bad(format!("linear slope must be negative, got {}", spec.k));
                }
                if !in_unit(spec.epsilon) {
                    return bad(format!("epsilon must lie in [0, 1], got {}", spec.epsilon));
                }
            }
            Family::Exponential => {
                if !(spec.k > 0.0 && spec.k < 1.0) {
                    return bad(format!("exponential radix must lie in (0, 1), got {}", spec.k));
                }
            }
            Family::Sigmoid => {
                if spec.k < 1.0 {
                    return bad(format!("sigmoid k must be >= 1, got {}", spec.k));
                }
            }
            Family::AlwaysSample => {}
            Family::Uniform => {
                if !in_unit(spec.uniform_p) {
                    return bad(format!("uniform_p must lie in [0, 1], got {}", spec.uniform_p));
                }
            }
            Family::Empirical => match &spec.empirical_table {
                None => return bad("empirical family requires a table".into()),
                Some(t) if t.is_empty() => return bad("empirical table is empty".into()),
                Some(t) => {
                    if let Some(v) = t.iter().find(|v| !in_unit(**v)) {
                        return bad(format!("empirical error rate {v} outside [0, 1]"));
                    }
                }
            },
        }
        if let Some(m) = spec.max_arg {
            if !(m >= 0.0) {
                return bad(format!("max_arg must be non-negative, got {m}"));
            }
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Golden probability at an integral step.
    pub fn eval(&self, step: u64) -> f64 {
        self.value_at(step as f64)
    }

    /// Golden probability at a real-valued, non-negative argument.
    pub fn value_at(&self, x: f64) -> f64 {
        let x = self.clamp_arg(x.max(0.0));
        let d = self.decay_value(x);
        match self.spec.direction {
            Direction::Decay => d,
            Direction::Increase => 1.0 - d,
        }
    }

    /// `∫₀ᵗ (1 - g(x)) dx`, the expected number of predicted tokens fed in
    /// the first `t` decoding steps.
    pub fn accumulated_errors(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self.spec.max_arg {
            Some(m) if t > m => self.accumulated_unclamped(m) + (t - m) * (1.0 - self.value_at(m)),
            _ => self.accumulated_unclamped(t),
        }
    }

    fn clamp_arg(&self, x: f64) -> f64 {
        match self.spec.max_arg {
            Some(m) => x.min(m),
            None => x,
        }
    }

    fn decay_value(&self, x: f64) -> f64 {
        let s = &self.spec;
        match s.family {
            Family::Linear => (s.k * x + s.b).max(s.epsilon).min(1.0),
            Family::Exponential => s.k.powf(x),
            Family::Sigmoid => {
                let e = (x / s.k).exp();
                if e.is_infinite() {
                    0.0
                } else {
                    s.k / (s.k + e)
                }
            }
            Family::AlwaysSample => 0.0,
            Family::Uniform => s.uniform_p,
            Family::Empirical => 1.0 - interp_table(self.table(), x),
        }
    }

    fn table(&self) -> &[f64] {
        self.spec.empirical_table.as_deref().unwrap_or(&[])
    }

    fn accumulated_unclamped(&self, t: f64) -> f64 {
        // integral of (1 - decay) over [0, t]
        let decay_errors = self.decay_accumulated(t);
        let v = match self.spec.direction {
            Direction::Decay => decay_errors,
            Direction::Increase => t - decay_errors,
        };
        v.clamp(0.0, t)
    }

    fn decay_accumulated(&self, t: f64) -> f64 {
        let s = &self.spec;
        match s.family {
            Family::Linear => t - linear_clamped_integral(s.k, s.b, s.epsilon, t),
            Family::Exponential => {
                let ln_k = s.k.ln();
                t - (t * ln_k).exp_m1() / ln_k
            }
            Family::Sigmoid => {
                // ∫₀ᵗ (1 - k/(k+e^{x/k})) dx = k·ln((k + e^{t/k}) / (k + 1))
                let k = s.k;
                let u = t / k;
                if u < 30.0 {
                    k * (u.exp_m1() / (k + 1.0)).ln_1p()
                } else {
                    k * (u + (k * (-u).exp()).ln_1p() - k.ln_1p())
                }
            }
            Family::AlwaysSample => t,
            Family::Uniform => (1.0 - s.uniform_p) * t,
            Family::Empirical => trapezoid_table(self.table(), t),
        }
    }
}

/// `∫₀ᵗ min(1, max(eps, k·x + b)) dx` for `k < 0`.
fn linear_clamped_integral(k: f64, b: f64, eps: f64, t: f64) -> f64 {
    // the line crosses 1 at x_hi and eps at x_lo; x_hi <= x_lo since k < 0
    let x_hi = ((1.0 - b) / k).clamp(0.0, t);
    let x_lo = ((eps - b) / k).clamp(x_hi, t);
    let line = |x: f64| 0.5 * k * x * x + b * x;
    x_hi + (line(x_lo) - line(x_hi)) + eps * (t - x_lo)
}

/// Linear interpolation of a table indexed by integer steps; flat beyond
/// the last entry.
fn interp_table(table: &[f64], x: f64) -> f64 {
    let last = table.len() - 1;
    if x >= last as f64 {
        return table[last];
    }
    let lo = x.floor() as usize;
    let frac = x - lo as f64;
    table[lo] + frac * (table[lo + 1] - table[lo])
}

/// Exact integral of [`interp_table`] over `[0, t]`.
fn trapezoid_table(table: &[f64], t: f64) -> f64 {
    let last = table.len() - 1;
    let mut acc = 0.0;
    let full = (t.floor() as usize).min(last);
    for j in 0..full {
        acc += 0.5 * (table[j] + table[j + 1]);
    }
    if full < last {
        let frac = t - full as f64;
        if frac > 0.0 {
            let end = interp_table(table, t);
            acc += 0.5 * (table[full] + end) * frac;
        }
    } else {
        acc += table[last] * (t - last as f64);
    }
    acc
}

/// How `f(i)` and `g(t)` are combined into `h(i, t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMethod {
    /// `f(i) · g(t)`
    Product,
    /// `(f(i) + g(t)) / 2`
    ArithmeticMean,
    /// `g(t · (1 - f(i)))`
    Composite,
    /// `f(i · (1 - g(t)))`
    CompositeAlt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointSpec {
    pub method: JointMethod,
    /// Training-step schedule.
    pub f: ScheduleSpec,
    /// Decoding-step schedule.
    pub g: ScheduleSpec,
}

impl Default for JointSpec {
    fn default() -> Self {
        Self::new(
            JointMethod::Composite,
            ScheduleSpec::sigmoid(20000.0),
            ScheduleSpec::exponential(0.99),
        )
    }
}

impl JointSpec {
    pub fn new(method: JointMethod, f: ScheduleSpec, g: ScheduleSpec) -> Self {
        Self { method, f, g }
    }

    pub fn build(&self) -> Result<Joint> {
        Ok(Joint {
            method: self.method,
            f: self.f.build()?,
            g: self.g.build()?,
        })
    }

    pub fn eval(&self, train_step: u64, dec_step: u64) -> Result<f64> {
        Ok(self.build()?.eval(train_step, dec_step))
    }

    pub fn label(&self) -> String {
        format!("{:?}[{} x {}]", self.method, self.f.label(), self.g.label())
    }
}

/// A validated joint schedule `h(i, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub method: JointMethod,
    pub f: Schedule,
    pub g: Schedule,
}

impl Joint {
    pub fn eval(&self, train_step: u64, dec_step: u64) -> f64 {
        self.value_at(train_step as f64, dec_step as f64)
    }

    pub fn value_at(&self, i: f64, t: f64) -> f64 {
        let v = match self.method {
            JointMethod::Product => self.f.value_at(i) * self.g.value_at(t),
            JointMethod::ArithmeticMean => 0.5 * (self.f.value_at(i) + self.g.value_at(t)),
            JointMethod::Composite => self.g.value_at(t * (1.0 - self.f.value_at(i))),
            JointMethod::CompositeAlt => self.f.value_at(i * (1.0 - self.g.value_at(t))),
        };
        v.clamp(0.0, 1.0)
    }
}

/// Preset hyperparameters for the translation and summarization settings.
/// Each preset is `(max_value, linear, exponential, sigmoid)`.
pub mod presets {
    use super::ScheduleSpec;

    pub struct Preset {
        pub max_value: u64,
        pub linear: ScheduleSpec,
        pub exponential: ScheduleSpec,
        pub sigmoid: ScheduleSpec,
    }

    impl Preset {
        pub fn all(&self) -> [ScheduleSpec; 3] {
            [self.linear.clone(), self.exponential.clone(), self.sigmoid.clone()]
        }
    }

    pub fn translation_training_steps() -> Preset {
        Preset {
            max_value: 300_000,
            linear: ScheduleSpec::linear(-1.0 / 150_000.0, 0.2, 1.0),
            exponential: ScheduleSpec::exponential(0.99999),
            sigmoid: ScheduleSpec::sigmoid(20_000.0),
        }
    }

    pub fn summarization_training_steps() -> Preset {
        Preset {
            max_value: 100_000,
            linear: ScheduleSpec::linear(-1.0 / 50_000.0, 0.2, 1.0),
            exponential: ScheduleSpec::exponential(0.9999),
            sigmoid: ScheduleSpec::sigmoid(15_000.0),
        }
    }

    pub fn translation_decoding_steps() -> Preset {
        Preset {
            max_value: 128,
            linear: ScheduleSpec::linear(-1.0 / 64.0, 0.2, 1.0),
            exponential: ScheduleSpec::exponential(0.99),
            sigmoid: ScheduleSpec::sigmoid(20.0),
        }
    }

    pub fn summarization_decoding_steps() -> Preset {
        Preset {
            max_value: 512,
            linear: ScheduleSpec::linear(-1.0 / 256.0, 0.2, 1.0),
            exponential: ScheduleSpec::exponential(0.999),
            sigmoid: ScheduleSpec::sigmoid(50.0),
        }
    }
}

/// A schedule with a column name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedSchedule {
    pub name: String,
    #[serde(flatten)]
    pub spec: ScheduleSpec,
}

/// Schedule values and accumulated errors tabulated on an integer grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTable {
    pub steps: Vec<u64>,
    pub names: Vec<String>,
    /// `values[c][r]`: column `c` at `steps[r]`.
    pub values: Vec<Vec<f64>>,
    pub accumulated: Vec<Vec<f64>>,
}

impl ScheduleTable {
    pub fn values_csv(&self) -> String {
        self.render(&self.values)
    }

    pub fn accumulated_csv(&self) -> String {
        self.render(&self.accumulated)
    }

    fn render(&self, cols: &[Vec<f64>]) -> String {
        let mut out = String::from("step");
        for n in &self.names {
            out.push(',');
            out.push_str(&csv_field(n));
        }
        out.push('\n');
        for (r, step) in self.steps.iter().enumerate() {
            out.push_str(&step.to_string());
            for c in cols {
                out.push(',');
                out.push_str(&c[r].to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Tabulates every schedule over `0, stride, 2·stride, … < max_step`.
pub fn dump_curves(specs: &[NamedSchedule], max_step: u64, stride: u64) -> Result<ScheduleTable> {
    if max_step == 0 || stride == 0 {
        return Err(Error::config("max_step and stride must be >= 1"));
    }
    let schedules = specs.iter().map(|s| s.spec.build()).collect::<Result<Vec<_>>>()?;
    let steps: Vec<u64> = (0..max_step).step_by(stride as usize).collect();
    let values = schedules.iter().map(|s| steps.iter().map(|&x| s.eval(x)).collect()).collect();
    let accumulated = schedules
        .iter()
        .map(|s| steps.iter().map(|&x| s.accumulated_errors(x as f64)).collect())
        .collect();
    Ok(ScheduleTable {
        steps,
        names: specs.iter().map(|s| s.name.clone()).collect(),
        values,
        accumulated,
    })
}

/// `h(i, t)` over the grid `i < max_i`, `t < max_t`, row-major in `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGrid {
    pub max_i: u64,
    pub max_t: u64,
    pub i_stride: u64,
    pub values: Vec<f64>,
}

impl JointGrid {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn n_i(&self) -> usize {
        self.max_i.div_ceil(self.i_stride) as usize
    }

    pub fn get(&self, i_index: usize, t: usize) -> f64 {
        self.values[i_index * self.max_t as usize + t]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,t,value\n");
        let n_t = self.max_t as usize;
        for (row, v) in self.values.iter().enumerate() {
            let i = (row / n_t) as u64 * self.i_stride;
            let t = row % n_t;
            out.push_str(&format!("{i},{t},{v}\n"));
        }
        out
    }
}

pub fn dump_joint_grid(joint: &JointSpec, max_i: u64, max_t: u64, i_stride: u64) -> Result<JointGrid> {
    if max_i == 0 || max_t == 0 || i_stride == 0 {
        return Err(Error::config("max_i, max_t and stride must be >= 1"));
    }
    let h = joint.build()?;
    let mut values = Vec::new();
    for i in (0..max_i).step_by(i_stride as usize) {
        for t in 0..max_t {
            values.push(h.eval(i, t));
        }
    }
    Ok(JointGrid {
        max_i,
        max_t,
        i_stride,
        values,
    })
}
