//! Central finite-difference checks of analytic gradients, in `f64`.
//!
//! For an input element `x` the step is `h = 1e-3·max(1, |x|)` and the
//! numeric derivative is `(f(x+h) − f(x−h)) / 2h`. Non-scalar outputs are
//! reduced to `Σ R ⊙ y` with a fixed pseudo-random `R`, so no op is checked
//! through an all-ones adjoint. The error of one input is
//! `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-6)`; a case fails if any input exceeds
//! the tolerance.

use crate::masking::MaskPlan;
use crate::model::{self, ModelParams, PositionTables, ViTConfig};
use crate::par::{self, Execution};
use crate::patch::PatchConfig;
use crate::probe;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// A scalar function of several tensors with an analytic gradient.
pub trait Differentiable: Send + Sync {
    fn name(&self) -> &str;
    fn inputs(&self) -> &[Tensor<f64>];
    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
}

type Build = Box<dyn for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A case whose gradient comes from the tape.
pub struct TapeCase {
    name: String,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl TapeCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        build: impl for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        TapeCase {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }

    /// Places the inputs on `tape` and reduces the case output to a scalar.
    fn scalar<'t>(
        &self,
        tape: &mut Tape<'t, f64>,
        inputs: &'t [Tensor<f64>],
        grad: bool,
    ) -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if grad { tape.param_ref(t) } else { tape.constant_ref(t) })
            .collect();
        let out = (self.build)(tape, &vars)?;
        if tape.value(out).numel() == 1 {
            return Ok((vars, out));
        }
        let shape = tape.shape(out).to_vec();
        let weights = Tensor::uniform(&shape, -1.0, 1.0, &mut rng::from_seed(0x9e37));
        let w = tape.constant(weights);
        let y = tape.mul(out, w)?;
        Ok((vars, tape.sum(y)?))
    }
}

impl Differentiable for TapeCase {
    fn name(&self) -> &str {
        &self.name
    }

    fn inputs(&self) -> &[Tensor<f64>] {
        &self.inputs
    }

    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let (_, l) = self.scalar(&mut tape, inputs, false)?;
        Ok(tape.value(l).item())
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let mut tape = Tape::new();
        let (vars, l) = self.scalar(&mut tape, inputs, true)?;
        let mut grads = tape.backward(l)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Input with the largest error.
    pub worst_input: usize,
    pub elements: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of `case` with central differences.
pub fn check(case: &dyn Differentiable, tol: f64, exec: Execution) -> Result<GradReport> {
    let inputs = case.inputs();
    let analytic = case.gradient(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::contract(format!(
            "{}: {} gradients for {} inputs",
            case.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    let mut worst = (0.0f64, 0usize);
    let mut elements = 0;
    for (i, (x, a)) in inputs.iter().zip(&analytic).enumerate() {
        let numeric: Vec<Result<f64>> = par::map_range(exec, x.numel(), |j| {
            let mut probe = inputs.to_vec();
            let x0 = x.data()[j];
            let h = 1e-3 * x0.abs().max(1.0);
            probe[i].data_mut()[j] = x0 + h;
            let up = case.loss(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = case.loss(&probe)?;
            Ok((up - down) / (2.0 * h))
        });
        let numeric = numeric.into_iter().collect::<Result<Vec<f64>>>()?;
        let diff = a
            .data()
            .iter()
            .zip(&numeric)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        let scale = a
            .data()
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-6, f64::max);
        let rel = diff / scale;
        if rel > worst.0 || (rel.is_nan() && !worst.0.is_nan()) {
            worst = (rel, i);
        }
        elements += x.numel();
    }
    Ok(GradReport {
        name: case.name().to_string(),
        max_rel_err: worst.0,
        worst_input: worst.1,
        elements,
        passed: worst.0 < tol,
    })
}

/// One case per differentiable tape op, on small shapes drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<Box<dyn Differentiable>> {
    use rand::Rng as _;
    let mut r = rng::from_seed(seed);
    let (m, k, n) = (r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..5));
    let mut g = |shape: &[usize]| Tensor::<f64>::gaussian(shape, 0.0, 1.0, &mut r);
    let (a, b, c) = (g(&[m, k]), g(&[m, k]), g(&[k, n]));
    let (bias, cat, x3) = (g(&[k]), g(&[m, n]), g(&[2, m, k]));
    // Rows spread by a ramp so no row is nearly constant.
    let w = k + 1;
    let ln_x = g(&[m, w]);
    let ln_x = Tensor::from_fn(&[m, w], |i| ln_x.data()[i] * 0.1 + (i % w) as f64 * 0.8);
    let (ln_g, ln_b) = (g(&[w]), g(&[w]));
    let sm = g(&[m, k]).map(|v| 3.0 * v);
    let positive = g(&[m, k]).map(|v| 0.5 + v.abs());
    let gelu_x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0]).expect("4 values");

    let mut cases: Vec<Box<dyn Differentiable>> = Vec::new();
    let mut add = |case: TapeCase| cases.push(Box::new(case));
    add(TapeCase::new("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])));
    add(TapeCase::new("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])));
    add(TapeCase::new("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])));
    add(TapeCase::new("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7)));
    add(TapeCase::new("add_bias", vec![a.clone(), bias], |t, v| t.add_bias(v[0], v[1])));
    add(TapeCase::new("matmul", vec![a.clone(), c.clone()], |t, v| t.matmul(v[0], v[1])));
    add(TapeCase::new("transpose", vec![x3.clone()], |t, v| t.transpose(v[0])));
    add(TapeCase::new("reshape", vec![a.clone()], move |t, v| t.reshape(v[0], &[k, m])));
    add(TapeCase::new("concat", vec![a.clone(), cat, b.clone()], |t, v| {
        let rows = t.concat(&[v[0], v[2]], 0)?;
        let cols = t.concat(&[v[0], v[1]], 1)?;
        let rs = t.sum(rows)?;
        let cs = t.mul(cols, cols)?;
        let cs = t.sum(cs)?;
        t.add(rs, cs)
    }));
    add(TapeCase::new("slice_last", vec![a.clone()], move |t, v| t.slice_last(v[0], 1, k - 1)));
    add(TapeCase::new("gather_rows", vec![a.clone()], move |t, v| {
        t.gather_rows(v[0], &[m - 1, 0, m - 1, 1])
    }));
    add(TapeCase::new("sum", vec![a.clone()], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    }));
    add(TapeCase::new("mean", vec![a.clone()], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.mean(sq)
    }));
    add(TapeCase::new("sqrt", vec![positive], |t, v| t.sqrt(v[0])));
    add(TapeCase::new("softmax", vec![sm], |t, v| t.softmax(v[0])));
    add(TapeCase::new("layer_norm", vec![ln_x, ln_g, ln_b], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    }));
    add(TapeCase::new("gelu", vec![gelu_x], |t, v| t.gelu(v[0])));
    add(TapeCase::new("unary", vec![a], |t, v| t.unary(v[0], f64::sin, f64::cos)));
    cases
}

/// A deliberately wrong derivative, for exercising the harness itself.
pub fn broken_case() -> Box<dyn Differentiable> {
    let x = Tensor::new(vec![3], vec![-0.7, 0.2, 1.1]).expect("3 values");
    Box::new(TapeCase::new("broken_unary", vec![x], |t, v| {
        t.unary(v[0], f64::sin, |x| x.cos() + 0.25)
    }))
}

/// Configuration used by the end-to-end model check: 16 tokens of width 16,
/// one encoder and one decoder block.
pub fn toy_model_config() -> ViTConfig {
    ViTConfig {
        patch: PatchConfig {
            image_side: 16,
            patch_side: 4,
            embed_dim: 16,
        },
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        mlp_ratio: 2,
    }
}

/// Composite cases: op chains, model components, the full MAE loss, and the
/// probe cross-entropy.
pub fn model_cases(seed: u64) -> Result<Vec<Box<dyn Differentiable>>> {
    let mut r = rng::from_seed(seed);
    let mut cases: Vec<Box<dyn Differentiable>> = Vec::new();

    let (x, w, g, b) = (
        Tensor::<f64>::gaussian(&[3, 4], 0.0, 1.0, &mut r),
        Tensor::<f64>::gaussian(&[4, 5], 0.0, 1.0, &mut r),
        Tensor::<f64>::gaussian(&[5], 1.0, 0.2, &mut r),
        Tensor::<f64>::gaussian(&[5], 0.0, 0.2, &mut r),
    );
    cases.push(Box::new(TapeCase::new("chain_matmul_softmax_layer_norm", vec![x, w, g, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let s = t.softmax(y)?;
        let n = t.layer_norm(s, v[2], v[3], 1e-5)?;
        let sq = t.mul(n, n)?;
        t.mean(sq)
    })));

    let (p, pw, pb) = (
        Tensor::<f64>::uniform(&[4, 9], 0.0, 1.0, &mut r),
        Tensor::<f64>::gaussian(&[9, 8], 0.0, 0.3, &mut r),
        Tensor::<f64>::gaussian(&[8], 0.0, 0.3, &mut r),
    );
    cases.push(Box::new(TapeCase::new("embed_patches", vec![p, pw, pb], |t, v| {
        crate::patch::embed_patches(t, v[0], v[1], v[2])
    })));

    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::gaussian(&[5, 8], 0.0, 1.0, &mut r)).collect();
    cases.push(Box::new(TapeCase::new("attention", qkv, |t, v| {
        model::attention(t, v[0], v[1], v[2], 2)
    })));

    let cfg = toy_model_config();
    let params = perturbed_params(&cfg, seed)?;
    let names: usize = params.slot_count();
    let tokens = Tensor::<f64>::gaussian(&[4, cfg.enc_dim()], 0.0, 1.0, &mut r);
    let mut enc_inputs: Vec<Tensor<f64>> = params.fields().into_iter().map(|f| f.2.clone()).collect();
    enc_inputs.push(tokens);
    cases.push(Box::new(TapeCase::new("encoder_block", enc_inputs, move |t, v| {
        let p = ModelParams::from_slots(cfg.enc_depth, cfg.dec_depth, v[..names].iter().copied())?;
        model::encoder_forward(t, &p, &cfg, v[names])
    })));

    let img = Tensor::<f64>::uniform(&[cfg.patch.num_tokens(), cfg.patch.patch_len()], 0.0, 1.0, &mut r);
    let plan = MaskPlan::with_masked(16, vec![0, 2, 3, 5, 7, 8, 10, 11, 12, 15])?;
    let pos = PositionTables::<f64>::new(&cfg)?;
    let inputs: Vec<Tensor<f64>> = params.fields().into_iter().map(|f| f.2.clone()).collect();
    cases.push(Box::new(TapeCase::new("mae_end_to_end", inputs, move |t, v| {
        let p = ModelParams::from_slots(cfg.enc_depth, cfg.dec_depth, v.iter().copied())?;
        let patches = t.constant(img.clone());
        let enc_pos = t.constant(pos.enc.clone());
        let dec_pos = t.constant(pos.dec.clone());
        let latents = model::encode_tokens(t, &p, &cfg, patches, enc_pos, plan.visible())?;
        let pred = model::decoder_forward(t, &p, &cfg, latents, &plan, dec_pos)?;
        model::mae_loss(t, pred, patches, &plan)
    })));

    cases.push(Box::new(probe::CrossEntropyCase::random(seed)));
    Ok(cases)
}

/// Initialized toy parameters with biases, gains and norms moved off their
/// initial constants so every path carries a non-trivial gradient.
pub fn perturbed_params(cfg: &ViTConfig, seed: u64) -> Result<ModelParams<Tensor<f64>>> {
    let base = model::init_params::<f64>(cfg, seed)?;
    let mut r = rng::from_seed(seed ^ 0x5eed);
    Ok(base.map(|_, kind, t| {
        let noise = Tensor::<f64>::gaussian(t.shape(), 0.0, 0.1, &mut r);
        // Weights are scaled up from σ = 0.02 so attention is far from uniform.
        let mut out = if kind == model::ParamKind::Weight {
            t.map(|v| v * 10.0)
        } else {
            t.clone()
        };
        out.add_assign(&noise).expect("same shape");
        out
    }))
}

/// Runs every op case and model case.
pub fn run_suite(seed: u64, tol: f64, exec: Execution) -> Result<Vec<GradReport>> {
    let mut cases = op_cases(seed);
    cases.extend(model_cases(seed)?);
    cases.iter().map(|c| check(c.as_ref(), tol, exec)).collect()
}
