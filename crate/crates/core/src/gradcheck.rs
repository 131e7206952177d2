//! Central finite-difference checks for every hand-written backward pass.
//!
//! Each layer output `y` is reduced to a scalar with a fixed random
//! projection `L = Σ r·y`, so the upstream gradient is simply `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::network::{
    cross_entropy, global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward,
    Conv3x3, LayerSpec, Linear, Model, Pass,
};
use crate::norm::{Mode, NormLayer, NormVariant};
use crate::tensor::{Shape4, Tensor4};

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// `max|a − n| / max(‖a‖∞, ‖n‖∞)`, the denominator floored at 1e-12.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-12)
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub case: String,
    pub tensor: String,
    pub max_rel_error: f64,
}

type CaseFn = Box<dyn Fn(bool) -> Result<Vec<CheckResult>>>;

/// One named check. The flag passed to the closure asks it to corrupt its
/// analytic gradient, which lets callers confirm that failures are caught.
pub struct GradCheckCase {
    pub name: String,
    run: CaseFn,
}

impl GradCheckCase {
    pub fn run(&self) -> Result<Vec<CheckResult>> {
        (self.run)(false)
    }

    pub fn run_corrupted(&self) -> Result<Vec<CheckResult>> {
        (self.run)(true)
    }
}

impl std::fmt::Debug for GradCheckCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCheckCase").field("name", &self.name).finish()
    }
}

/// Named input tensors, analytic gradients for each, and a loss over all of
/// them. Every element of every input is perturbed in turn.
fn compare(
    case: &str,
    inputs: &[(&str, Vec<f64>)],
    mut analytic: Vec<Vec<f64>>,
    corrupt: bool,
    loss: impl Fn(&[Vec<f64>]) -> Result<f64>,
) -> Result<Vec<CheckResult>> {
    if corrupt {
        for g in &mut analytic {
            g.iter_mut().for_each(|v| *v *= 1.5);
        }
    }
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut out = Vec::new();
    for (t, (name, base)) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(base, FD_STEP, |p| {
            values[t].copy_from_slice(p);
            loss(&values)
        })?;
        values[t].copy_from_slice(base);
        out.push(CheckResult {
            case: case.to_string(),
            tensor: name.to_string(),
            max_rel_error: relative_error(&analytic[t], &numeric),
        });
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn projection(y: &Tensor4, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn tensor(shape: Shape4, data: &[f64]) -> Result<Tensor4> {
    Tensor4::from_vec(shape, data.to_vec())
}

/// Random small shape with `groups` dividing the channel count and at least
/// `min_per_group` channels in each group.
fn random_shape(rng: &mut ChaCha8Rng, groups: usize, min_per_group: usize) -> Shape4 {
    let per_group = rng.gen_range(min_per_group..=8 / groups);
    let side = rng.gen_range(2..=4);
    Shape4::new(rng.gen_range(2..=3), groups * per_group, side, side)
}

fn conv_case(seed: u64, stride: usize) -> GradCheckCase {
    let name = format!("conv3x3_stride{stride}");
    GradCheckCase {
        name: name.clone(),
        run: Box::new(move |corrupt| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cin = rng.gen_range(1..=4);
            let cout = rng.gen_range(1..=4);
            let side = rng.gen_range(2..=4);
            let xs = Shape4::new(rng.gen_range(1..=3), cin, side, side);
            let mut conv = Conv3x3::new(cin, cout, stride)?;
            let x = uniform(&mut rng, xs.len(), -1.0, 1.0);
            conv.weight = uniform(&mut rng, conv.weight.len(), -1.0, 1.0);
            conv.bias = uniform(&mut rng, cout, -1.0, 1.0);
            let ys = conv.output_shape(xs)?;
            let r = uniform(&mut rng, ys.len(), -1.0, 1.0);
            let (_, cache) = conv.forward(&tensor(xs, &x)?)?;
            let (dx, dw, db) = conv.backward(&cache, &tensor(ys, &r)?)?;
            let inputs = [("x", x), ("weight", conv.weight.clone()), ("bias", conv.bias.clone())];
            compare(&name, &inputs, vec![dx.into_vec(), dw, db], corrupt, |v| {
                let mut c = conv.clone();
                c.weight.copy_from_slice(&v[1]);
                c.bias.copy_from_slice(&v[2]);
                Ok(projection(&c.forward(&tensor(xs, &v[0])?)?.0, &r))
            })
        }),
    }
}

fn relu_case(seed: u64) -> GradCheckCase {
    GradCheckCase {
        name: "relu".into(),
        run: Box::new(move |corrupt| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_shape(&mut rng, 1, 1);
            // Keep inputs away from the kink at zero.
            let x: Vec<f64> = (0..s.len())
                .map(|_| {
                    let m = rng.gen_range(0.1..1.0);
                    if rng.gen_bool(0.5) { m } else { -m }
                })
                .collect();
            let r = uniform(&mut rng, s.len(), -1.0, 1.0);
            let dx = relu_backward(&tensor(s, &x)?, &tensor(s, &r)?)?;
            compare("relu", &[("x", x)], vec![dx.into_vec()], corrupt, |v| {
                Ok(projection(&relu_forward(&tensor(s, &v[0])?), &r))
            })
        }),
    }
}

fn pool_case(seed: u64) -> GradCheckCase {
    GradCheckCase {
        name: "global_avg_pool".into(),
        run: Box::new(move |corrupt| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_shape(&mut rng, 1, 1);
            let x = uniform(&mut rng, s.len(), -1.0, 1.0);
            let r = uniform(&mut rng, s.n * s.c, -1.0, 1.0);
            let dx = global_avg_pool_backward(s, &tensor(Shape4::new(s.n, s.c, 1, 1), &r)?)?;
            compare("global_avg_pool", &[("x", x)], vec![dx.into_vec()], corrupt, |v| {
                Ok(projection(&global_avg_pool_forward(&tensor(s, &v[0])?)?, &r))
            })
        }),
    }
}

fn linear_case(seed: u64) -> GradCheckCase {
    GradCheckCase {
        name: "linear".into(),
        run: Box::new(move |corrupt| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, fin, fout) = (rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(2..=6));
            let mut lin = Linear::new(fin, fout)?;
            lin.weight = uniform(&mut rng, fin * fout, -1.0, 1.0);
            lin.bias = uniform(&mut rng, fout, -1.0, 1.0);
            let xs = Shape4::new(n, fin, 1, 1);
            let x = uniform(&mut rng, xs.len(), -1.0, 1.0);
            let r = uniform(&mut rng, n * fout, -1.0, 1.0);
            let (dx, dw, db) = lin.backward(&tensor(xs, &x)?, &tensor(Shape4::new(n, fout, 1, 1), &r)?)?;
            let inputs = [("x", x), ("weight", lin.weight.clone()), ("bias", lin.bias.clone())];
            compare("linear", &inputs, vec![dx.into_vec(), dw, db], corrupt, |v| {
                let mut l = lin.clone();
                l.weight.copy_from_slice(&v[1]);
                l.bias.copy_from_slice(&v[2]);
                Ok(projection(&l.forward(&tensor(xs, &v[0])?)?, &r))
            })
        }),
    }
}

fn cross_entropy_case(seed: u64) -> GradCheckCase {
    GradCheckCase {
        name: "cross_entropy".into(),
        run: Box::new(move |corrupt| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, k) = (rng.gen_range(1..=3), rng.gen_range(2..=8));
            let s = Shape4::new(n, k, 1, 1);
            let logits = uniform(&mut rng, s.len(), -3.0, 3.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let (_, d) = cross_entropy(&tensor(s, &logits)?, &labels)?;
            compare("cross_entropy", &[("logits", logits)], vec![d.into_vec()], corrupt, |v| {
                Ok(cross_entropy(&tensor(s, &v[0])?, &labels)?.0)
            })
        }),
    }
}

/// Normalization layer with random affine parameters (and gate), checked in
/// training mode with batch statistics.
pub fn norm_case(seed: u64, variant: NormVariant, groups: usize) -> GradCheckCase {
    let name = format!("{variant}_g{groups}");
    GradCheckCase {
        name: name.clone(),
        run: Box::new(move |corrupt| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let groups = if variant.uses_groups() { groups } else { 1 };
            // With one channel per group BN∘GN equals GN up to ε, which
            // leaves dλ at rounding-noise level and not resolvable by
            // finite differences.
            let min_per_group = if variant == NormVariant::GnPlusGnFirst { 2 } else { 1 };
            let s = random_shape(&mut rng, groups, min_per_group);
            let mut layer = NormLayer::new(variant, s.c, groups)?;
            layer.set_mode(Mode::Train);
            let x = uniform(&mut rng, s.len(), -2.0, 2.0);
            layer.affine_mut().gamma = uniform(&mut rng, s.c, 0.5, 1.5);
            layer.affine_mut().beta = uniform(&mut rng, s.c, -0.5, 0.5);
            let lam = rng.gen_range(-1.0..1.0);
            if let Some(l) = layer.lambda_mut() {
                *l = lam;
            }
            let r = uniform(&mut rng, s.len(), -1.0, 1.0);
            let (_, cache) = layer.forward_frozen(&tensor(s, &x)?)?;
            let g = layer.backward(&cache, &tensor(s, &r)?)?;
            let a = layer.affine().clone();
            let mut inputs = vec![("x", x), ("gamma", a.gamma), ("beta", a.beta)];
            let mut analytic = vec![g.dx.into_vec(), g.dgamma, g.dbeta];
            if let Some(dl) = g.dlambda {
                inputs.push(("lambda", vec![lam]));
                analytic.push(vec![dl]);
            }
            compare(&name, &inputs, analytic, corrupt, |v| {
                let mut l = layer.clone();
                l.affine_mut().gamma.copy_from_slice(&v[1]);
                l.affine_mut().beta.copy_from_slice(&v[2]);
                if let Some(lp) = l.lambda_mut() {
                    *lp = v[3][0];
                }
                Ok(projection(&l.forward_frozen(&tensor(s, &v[0])?)?.0, &r))
            })
        }),
    }
}

/// Two conv/norm/relu blocks, pooling and a classifier, checked through the
/// cross-entropy loss on a batch of two images.
pub fn two_block_specs(variant: NormVariant, groups: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv3x3 { in_channels: 3, out_channels: 4, stride: 1 },
        LayerSpec::Norm { variant, groups },
        LayerSpec::Relu,
        LayerSpec::Conv3x3 { in_channels: 4, out_channels: 4, stride: 2 },
        LayerSpec::Norm { variant, groups },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear { in_features: 4, out_features: 3 },
    ]
}

pub fn model_case(seed: u64, variant: NormVariant) -> GradCheckCase {
    let name = format!("model_{variant}");
    GradCheckCase {
        name: name.clone(),
        run: Box::new(move |corrupt| {
            let groups = if variant.uses_groups() { 2 } else { 1 };
            let mut model = Model::build(&two_block_specs(variant, groups), 3, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            // Move the gates and affine parameters off their initial values.
            let mut flat = model.flat_params();
            let kinds = model.param_kinds();
            let mut off = 0;
            let mut sizes = Vec::new();
            model.visit_params(|_, _, p| sizes.push(p.len()));
            for (k, len) in kinds.iter().zip(&sizes) {
                if k.is_norm_param() {
                    for v in &mut flat[off..off + len] {
                        *v += rng.gen_range(-0.3..0.3);
                    }
                }
                off += len;
            }
            model.set_flat_params(&flat)?;
            let s = Shape4::new(2, 3, 5, 5);
            let x = Tensor4::from_vec(s, uniform(&mut rng, s.len(), -1.0, 1.0))?;
            let labels = vec![0, 2];
            let (_, _, grads) = model.loss_and_grad(&x, &labels, Pass::Probe)?;
            let inputs = [("params", flat)];
            compare(&name, &inputs, vec![grads.flatten()], corrupt, |v| {
                let mut m = model.clone();
                m.set_flat_params(&v[0])?;
                m.probe_loss(&x, &labels)
            })
        }),
    }
}

/// Every layer and normalization variant, with randomized shapes derived
/// from `seed`.
pub fn standard_suite(seed: u64) -> Vec<GradCheckCase> {
    let mut cases = vec![
        conv_case(seed, 1),
        conv_case(seed.wrapping_add(1), 2),
        relu_case(seed.wrapping_add(2)),
        pool_case(seed.wrapping_add(3)),
        linear_case(seed.wrapping_add(4)),
        cross_entropy_case(seed.wrapping_add(5)),
    ];
    let mut k = 10;
    for variant in NormVariant::ALL {
        let group_counts: &[usize] = if variant.uses_groups() { &[1, 2, 4] } else { &[1] };
        for &g in group_counts {
            cases.push(norm_case(seed.wrapping_add(k), variant, g));
            k += 1;
        }
    }
    for variant in NormVariant::ALL {
        cases.push(model_case(seed.wrapping_add(k), variant));
        k += 1;
    }
    cases
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results
            .iter()
            .filter(move |r| !(r.max_rel_error <= self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    /// Largest error per case.
    pub fn per_case(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for r in &self.results {
            match out.last_mut() {
                Some((name, e)) if *name == r.case => *e = e.max(r.max_rel_error),
                _ => out.push((r.case.clone(), r.max_rel_error)),
            }
        }
        out
    }
}

/// Runs `cases`, corrupting the analytic gradient of any case whose name is
/// in `corrupt`.
pub fn run_suite(cases: &[GradCheckCase], tolerance: f64, corrupt: &[String]) -> Result<GradCheckReport> {
    let mut results = Vec::new();
    for case in cases {
        let r = if corrupt.contains(&case.name) {
            case.run_corrupted()?
        } else {
            case.run()?
        };
        results.extend(r);
    }
    Ok(GradCheckReport { tolerance, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn numeric_gradient_of_cubic() {
        let g = numeric_gradient(&[2.0, -1.0], 1e-5, |p| Ok(p[0].powi(3) + 3.0 * p[1])).unwrap();
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn corruption_is_detected() {
        let case = linear_case(0);
        assert!(case.run().unwrap().iter().all(|r| r.max_rel_error <= DEFAULT_TOLERANCE));
        assert!(case.run_corrupted().unwrap().iter().all(|r| r.max_rel_error > 0.1));
    }

    #[test]
    fn suite_covers_every_variant() {
        let names: Vec<String> = standard_suite(0).into_iter().map(|c| c.name).collect();
        for v in NormVariant::ALL {
            assert!(names.iter().any(|n| n.starts_with(&format!("{v}_g"))), "{v}");
            assert!(names.contains(&format!("model_{v}")));
        }
    }
}
