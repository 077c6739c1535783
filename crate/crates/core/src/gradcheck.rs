//! Central-difference gradient checks against the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfsa::{lfsa_forward_var, LfsaParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::toy::{loss_var, ToyConfig, ToyModel};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const LFSA_TOLERANCE: f64 = 1e-6;
pub const END2END_TOLERANCE: f64 = 1e-5;

/// Central differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite evaluation at coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub seed: u64,
    /// Relative bias injected into every analytic gradient. Zero in normal use.
    pub fault: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, seed: 0, fault: 0.0 }
    }
}

/// Worst absolute discrepancy and gradient magnitude for one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrepancy {
    pub max_diff: f64,
    pub scale: f64,
}

impl Discrepancy {
    /// `max|a - n| / max(max|a|, max|n|)`, zero when both gradients vanish.
    pub fn relative(parts: &[Discrepancy]) -> f64 {
        let diff = parts.iter().map(|d| d.max_diff).fold(0.0, f64::max);
        let scale = parts.iter().map(|d| d.scale).fold(0.0, f64::max);
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Compares analytic and numeric gradients of `sum(R * build(inputs))` for a
/// fixed random projection `R`, per input.
pub fn check_graph<F>(inputs: &[Tensor], build: F, opts: &GradCheckOptions) -> Result<Vec<Discrepancy>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xdead_beef);
    let proj = Tensor::uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let grads = tape.backward(out, &proj)?;

    let mut report = Vec::with_capacity(inputs.len());
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).map(|g| g * (1.0 + opts.fault));
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if j == i { probe.clone() } else { x.clone() }))
                    .collect();
                let o = build(&mut t, &vs)?;
                t.value(o).dot(&proj)
            },
            &inputs[i],
            opts.eps,
        )?;
        report.push(Discrepancy {
            max_diff: analytic.max_abs_diff(&numeric)?,
            scale: analytic.max_abs().max(numeric.max_abs()),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitive,
    Lfsa,
    End2end,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Primitive, Scope::Lfsa, Scope::End2end];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Primitive => "primitive",
            Scope::Lfsa => "lfsa",
            Scope::End2end => "end2end",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient-check scope {s:?}")))
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Primitive => PRIMITIVE_TOLERANCE,
            Scope::Lfsa => LFSA_TOLERANCE,
            Scope::End2end => END2END_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

pub fn run_scope(scope: Scope, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let entries = match scope {
        Scope::Primitive => primitive_suite(opts)?,
        Scope::Lfsa => lfsa_suite(opts)?,
        Scope::End2end => end2end_suite(opts)?,
    };
    Ok(GradCheckReport { scope, tolerance: scope.tolerance(), entries })
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One case per tape operation.
pub fn primitive_suite(opts: &GradCheckOptions) -> Result<Vec<GradEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, &mut rng);
    let m = [3, 4];
    let cases: Vec<(&str, Vec<Tensor>, Builder)> = vec![
        ("add", vec![u(&m, -1.0, 1.0), u(&m, -1.0, 1.0)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![u(&m, -1.0, 1.0), u(&m, -1.0, 1.0)], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![u(&m, -1.0, 1.0), u(&m, -1.0, 1.0)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![u(&m, -1.0, 1.0), u(&m, 0.5, 2.0)], Box::new(|t, v| t.div(v[0], v[1]))),
        ("minimum", vec![u(&m, -1.0, 1.0), u(&m, -1.0, 1.0)], Box::new(|t, v| t.minimum(v[0], v[1]))),
        ("maximum", vec![u(&m, -1.0, 1.0), u(&m, -1.0, 1.0)], Box::new(|t, v| t.maximum(v[0], v[1]))),
        ("scale", vec![u(&m, -1.0, 1.0)], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("offset", vec![u(&m, -1.0, 1.0)], Box::new(|t, v| t.offset(v[0], 0.75))),
        ("sigmoid", vec![u(&m, -3.0, 3.0)], Box::new(|t, v| t.sigmoid(v[0]))),
        ("silu", vec![u(&m, -3.0, 3.0)], Box::new(|t, v| t.silu(v[0]))),
        ("relu", vec![u(&m, -1.0, 1.0)], Box::new(|t, v| t.relu(v[0]))),
        ("square", vec![u(&m, -2.0, 2.0)], Box::new(|t, v| t.square(v[0]))),
        ("atan", vec![u(&m, -3.0, 3.0)], Box::new(|t, v| t.atan(v[0]))),
        ("sum", vec![u(&m, -1.0, 1.0)], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![u(&m, -1.0, 1.0)], Box::new(|t, v| t.mean(v[0]))),
        ("reshape", vec![u(&m, -1.0, 1.0)], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("gather", vec![u(&m, -1.0, 1.0)], Box::new(|t, v| t.gather(v[0], vec![0, 5, 5, 11, 3]))),
        ("slice_channels", vec![u(&[5, 2, 3], -1.0, 1.0)], Box::new(|t, v| t.slice_channels(v[0], 1, 3))),
        (
            "concat_channels",
            vec![u(&[2, 2, 3], -1.0, 1.0), u(&[3, 2, 3], -1.0, 1.0)],
            Box::new(|t, v| t.concat_channels(&[v[0], v[1], v[0]])),
        ),
        ("transpose", vec![u(&[2, 3, 4], -1.0, 1.0)], Box::new(|t, v| t.transpose(v[0]))),
        ("matmul", vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 4, 5], -1.0, 1.0)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("softmax", vec![u(&[2, 3, 4], -2.0, 2.0)], Box::new(|t, v| t.softmax(v[0]))),
        (
            "conv2d",
            vec![u(&[4, 5, 6], -1.0, 1.0), u(&[6, 2, 3, 3], -1.0, 1.0), u(&[6], -1.0, 1.0)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 2)),
        ),
        (
            "conv2d_nobias",
            vec![u(&[3, 4, 4], -1.0, 1.0), u(&[2, 3, 1, 1], -1.0, 1.0)],
            Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, 0, 1)),
        ),
        (
            "depthwise_conv2d",
            vec![u(&[2, 5, 4], -1.0, 1.0), u(&[2, 1, 7, 7], -1.0, 1.0), u(&[2], -1.0, 1.0)],
            Box::new(|t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]))),
        ),
        (
            "bce_with_logits",
            vec![u(&m, -4.0, 4.0)],
            Box::new(|t, v| {
                let target = Tensor::new(&[3, 4], (0..12).map(|i| (i % 3) as f64 / 2.0).collect())?;
                t.bce_with_logits(v[0], target)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| {
            let d = check_graph(&inputs, build, opts)?;
            Ok(GradEntry { name: name.to_string(), rel_error: Discrepancy::relative(&d) })
        })
        .collect()
}

/// Input plus every parameter group of one layer with `C=4, H=W=8`.
pub fn lfsa_suite(opts: &GradCheckOptions) -> Result<Vec<GradEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let params = LfsaParams::random(4, 0.5, &mut rng);
    let x = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(params.tensors().into_iter().cloned());
    let d = check_graph(
        &inputs,
        |t, v| {
            let vars = crate::lfsa::LfsaVars {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                row_conv: v[4],
                row_conv_bias: v[5],
                col_conv: v[6],
                col_conv_bias: v[7],
                row_dw: v[8],
                row_dw_bias: v[9],
                col_dw: v[10],
                col_dw_bias: v[11],
            };
            lfsa_forward_var(t, v[0], &vars)
        },
        opts,
    )?;
    let names = std::iter::once("x").chain(LfsaParams::GROUP_NAMES);
    Ok(names.zip(&d).map(|(n, d)| GradEntry { name: n.to_string(), rel_error: Discrepancy::relative(&[*d]) }).collect())
}

/// Full loss of the miniature detector with the assignment held fixed, per
/// parameter group.
pub fn end2end_suite(opts: &GradCheckOptions) -> Result<Vec<GradEntry>> {
    let config = ToyConfig::miniature();
    let mut model = ToyModel::new(config.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    for l in &mut model.lfsa {
        *l = LfsaParams::random(l.channels, 0.5, &mut rng);
    }
    for t in model.head.tensors_mut() {
        if t.rank() == 1 {
            *t = Tensor::uniform(t.shape(), -0.1, 0.1, &mut rng);
        }
    }
    let scene = config.scene(opts.seed.wrapping_add(3), 2)?;
    let raws = model.forward(&scene.image)?;
    let assignments = model.assign(&raws, &scene.gts)?;
    if assignments.assignments.is_empty() {
        return Err(Error::Contract("gradient-check scene produced no positives".into()));
    }
    let levels = config.grid_levels();

    let mut inputs = vec![scene.image.clone()];
    inputs.extend(model.tensors().into_iter().cloned());
    let d = check_graph(
        &inputs,
        |t, v| {
            let vars = model.vars_from(&v[1..]);
            let raws = model.forward_var(t, v[0], &vars)?;
            Ok(loss_var(t, &raws, &assignments, &scene.gts, &levels, config.weights)?.total)
        },
        opts,
    )?;

    let mut entries = vec![GradEntry { name: "image".into(), rel_error: Discrepancy::relative(&d[..1]) }];
    let mut start = 1;
    for (name, n) in model.groups() {
        if n > 0 {
            entries.push(GradEntry { name: name.into(), rel_error: Discrepancy::relative(&d[start..start + n]) });
        }
        start += n;
    }
    Ok(entries)
}
