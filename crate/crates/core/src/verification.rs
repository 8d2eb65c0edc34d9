//! Finite-difference gradient suite over every differentiable op, one
//! attention block, and the end-to-end tiny model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{synth_study, GeneratorConfig};
use crate::error::Result;
use crate::model::{stack_studies, ModelConfig, MultiHeadAttention, ParamSet, ScaNet, NORM_EPS};
use crate::tensor::{grad_check_with, Precision, Tensor};
use crate::training::cross_entropy_loss;

pub const DEFAULT_EPS: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// One line of the gradient table, worst case over every shape tried.
///
/// A row passes when the kink-aware error is within tolerance and every
/// kink-crossing element was resolved by a smaller step. The plain
/// `max_relative_error` at the requested `eps` is reported alongside.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub name: String,
    pub max_relative_error: f64,
    pub kink_aware_max_relative_error: f64,
    pub elements: usize,
    pub kinks_crossed: usize,
    pub unresolved_kinks: usize,
    pub passed: bool,
}

type Objective = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

struct Case {
    inputs: Vec<Tensor>,
    f: Objective,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng).requiring_grad()
}

/// Values at least `gap` away from `pivot`, so a central difference never
/// straddles a kink.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], pivot: f32, gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = gap + rng.random::<f32>();
            if rng.random::<bool>() { pivot + m } else { pivot - m }
        })
        .collect();
    Tensor::parameter(v, shape).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::parameter(v, shape).expect("shape matches data")
}

/// Distinct values on a 0.01 grid in random order; pooling windows then
/// have a unique maximum with a margin well above eps.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::parameter(v, shape).expect("shape matches data")
}

/// Weighted sum of `y` against fixed random weights, so every output
/// element reaches the loss with a distinct coefficient.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(y.shape(), 1.0, &mut rng);
    Ok(y.mul(&w)?.sum())
}

fn unary(x: Tensor, seed: u64, op: impl Fn(&Tensor) -> Result<Tensor> + 'static) -> Case {
    Case {
        inputs: vec![x],
        f: Box::new(move |t| project(&op(&t[0])?, seed)),
    }
}

fn binary(a: Tensor, b: Tensor, seed: u64, op: impl Fn(&Tensor, &Tensor) -> Result<Tensor> + 'static) -> Case {
    Case {
        inputs: vec![a, b],
        f: Box::new(move |t| project(&op(&t[0], &t[1])?, seed)),
    }
}

fn op_cases(name: &str, rng: &mut ChaCha8Rng) -> Vec<Case> {
    let s = rng.random::<u64>();
    let r = rng;
    match name {
        "add" => [(vec![3], vec![3]), (vec![2, 3], vec![3]), (vec![2, 3, 4], vec![3, 4])]
            .into_iter()
            .map(|(a, b)| binary(normal(r, &a), normal(r, &b), s, |a, b| a.add(b)))
            .collect(),
        "sub" => [(vec![4], vec![4]), (vec![3, 2], vec![2]), (vec![2, 2, 3], vec![2, 2, 3])]
            .into_iter()
            .map(|(a, b)| binary(normal(r, &a), normal(r, &b), s, |a, b| a.sub(b)))
            .collect(),
        "mul" => [(vec![5], vec![5]), (vec![2, 4], vec![4]), (vec![3, 2, 2], vec![2, 2])]
            .into_iter()
            .map(|(a, b)| binary(normal(r, &a), normal(r, &b), s, |a, b| a.mul(b)))
            .collect(),
        "scale" => shapes3().map(|sh| unary(normal(r, &sh), s, |x| Ok(x.scale(-1.7)))).collect(),
        "add_scalar" => shapes3().map(|sh| unary(normal(r, &sh), s, |x| Ok(x.add_scalar(0.4)))).collect(),
        "relu" => shapes3().map(|sh| unary(away_from(r, &sh, 0.0, 0.05), s, |x| Ok(x.relu()))).collect(),
        "ln" => shapes3().map(|sh| unary(uniform(r, &sh, 0.5, 2.0), s, |x| x.ln())).collect(),
        "clamp_min" => shapes3()
            .map(|sh| unary(away_from(r, &sh, 0.2, 0.05), s, |x| Ok(x.clamp_min(0.2))))
            .collect(),
        "sum" => shapes3().map(|sh| unary(normal(r, &sh), s, |x| Ok(x.sum()))).collect(),
        "mean" => shapes3().map(|sh| unary(normal(r, &sh), s, |x| Ok(x.mean()))).collect(),
        "mean_axis" => [(vec![4, 3], 0), (vec![2, 3, 4], 1), (vec![2, 2, 5], 2)]
            .into_iter()
            .map(|(sh, ax)| unary(normal(r, &sh), s, move |x| x.mean_axis(ax)))
            .collect(),
        "reshape" => [(vec![6], vec![2, 3]), (vec![2, 6], vec![3, 4]), (vec![2, 3, 4], vec![4, 6])]
            .into_iter()
            .map(|(sh, to)| unary(normal(r, &sh), s, move |x| x.reshape(&to)))
            .collect(),
        "permute" => [(vec![2, 3], vec![1, 0]), (vec![2, 3, 4], vec![2, 0, 1]), (vec![2, 1, 3, 2], vec![0, 2, 1, 3])]
            .into_iter()
            .map(|(sh, ax)| unary(normal(r, &sh), s, move |x| x.permute(&ax)))
            .collect(),
        "index_select" => [(vec![4, 2], vec![3, 0, 0]), (vec![3, 2, 2], vec![2, 2, 1, 0]), (vec![5], vec![4, 1])]
            .into_iter()
            .map(|(sh, idx)| unary(normal(r, &sh), s, move |x| x.index_select(&idx)))
            .collect(),
        "concat" => [(vec![1, 3], vec![2, 3]), (vec![2, 2, 2], vec![1, 2, 2]), (vec![3], vec![4])]
            .into_iter()
            .map(|(a, b)| binary(normal(r, &a), normal(r, &b), s, |a, b| Tensor::concat(&[a.clone(), b.clone()])))
            .collect(),
        "pick" => [(vec![2, 2], vec![1, 0]), (vec![3, 4], vec![3, 0, 2]), (vec![4, 3], vec![1, 1, 2, 0])]
            .into_iter()
            .map(|(sh, cols)| unary(normal(r, &sh), s, move |x| x.pick(&cols)))
            .collect(),
        "matmul" => [(vec![2, 3], vec![3, 4]), (vec![1, 5], vec![5, 1]), (vec![4, 2], vec![2, 3])]
            .into_iter()
            .map(|(a, b)| binary(normal(r, &a), normal(r, &b), s, |a, b| a.matmul(b)))
            .collect(),
        "bmm" => [(vec![2, 2, 3], vec![2, 3, 2]), (vec![1, 3, 4], vec![1, 4, 2]), (vec![3, 1, 2], vec![3, 2, 3])]
            .into_iter()
            .map(|(a, b)| binary(normal(r, &a), normal(r, &b), s, |a, b| a.bmm(b)))
            .collect(),
        "transpose" => [vec![2, 3], vec![2, 3, 4], vec![1, 4, 2]]
            .into_iter()
            .map(|sh| unary(normal(r, &sh), s, |x| x.transpose()))
            .collect(),
        "conv2d" => [
            (vec![1, 1, 5, 5], vec![2, 1, 3, 3], 1, 0),
            (vec![2, 2, 6, 6], vec![3, 2, 3, 3], 2, 1),
            (vec![1, 3, 7, 5], vec![2, 3, 1, 1], 1, 0),
        ]
        .into_iter()
        .map(|(x, k, stride, pad)| {
            let f = k[0];
            Case {
                inputs: vec![normal(r, &x), normal(r, &k), normal(r, &[f])],
                f: Box::new(move |t| project(&t[0].conv2d(&t[1], Some(&t[2]), stride, pad)?, s)),
            }
        })
        .collect(),
        "max_pool2d" => [(vec![1, 1, 4, 4], 2, 2), (vec![1, 2, 5, 5], 3, 2), (vec![2, 1, 3, 4], 2, 1)]
            .into_iter()
            .map(|(sh, k, st)| unary(spaced(r, &sh), s, move |x| x.max_pool2d(k, st)))
            .collect(),
        "mean_pool2d" => [vec![1, 1, 2, 2], vec![2, 3, 3, 2], vec![1, 2, 4, 4]]
            .into_iter()
            .map(|sh| unary(normal(r, &sh), s, |x| x.mean_pool2d()))
            .collect(),
        "softmax" => [(vec![4], 0), (vec![3, 4], 1), (vec![2, 3, 2], 1)]
            .into_iter()
            .map(|(sh, ax)| unary(normal(r, &sh), s, move |x| x.softmax(ax)))
            .collect(),
        "layer_norm" => [vec![2, 4], vec![3, 5], vec![2, 2, 6]]
            .into_iter()
            .map(|sh| {
                let d = *sh.last().unwrap();
                Case {
                    inputs: vec![normal(r, &sh), normal(r, &[d]), normal(r, &[d])],
                    f: Box::new(move |t| project(&t[0].layer_norm(&t[1], &t[2], NORM_EPS)?, s)),
                }
            })
            .collect(),
        "group_norm" => [(vec![1, 4, 2, 2], 2), (vec![2, 6, 3, 1], 3), (vec![2, 2, 2, 3], 1)]
            .into_iter()
            .map(|(sh, groups)| {
                let c = sh[1];
                Case {
                    inputs: vec![normal(r, &sh), normal(r, &[c]), normal(r, &[c])],
                    f: Box::new(move |t| project(&t[0].group_norm(groups, &t[1], &t[2], NORM_EPS)?, s)),
                }
            })
            .collect(),
        "dropout" => shapes3()
            .map(|sh| unary(normal(r, &sh), s, move |x| x.dropout(0.3, &mut ChaCha8Rng::seed_from_u64(s))))
            .collect(),
        "cross_entropy" => [vec![0u8, 1], vec![1, 1, 0], vec![0, 1, 0, 1, 1]]
            .into_iter()
            .map(|labels| {
                let n = labels.len();
                Case {
                    inputs: vec![uniform(r, &[n, 2], 0.1, 0.9)],
                    f: Box::new(move |t| cross_entropy_loss(&t[0], &labels)),
                }
            })
            .collect(),
        _ => unreachable!("unknown op {name}"),
    }
}

fn shapes3() -> impl Iterator<Item = Vec<usize>> {
    [vec![4], vec![2, 3], vec![2, 2, 3]].into_iter()
}

pub const OP_NAMES: [&str; 27] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "ln",
    "clamp_min",
    "sum",
    "mean",
    "mean_axis",
    "reshape",
    "permute",
    "index_select",
    "concat",
    "pick",
    "matmul",
    "bmm",
    "transpose",
    "conv2d",
    "max_pool2d",
    "mean_pool2d",
    "softmax",
    "layer_norm",
    "group_norm",
    "dropout",
    "cross_entropy",
];

fn attention_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut ps = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", 8, 2, rng)?;
    let x = normal(rng, &[2, 4, 8]);
    let s = rng.random::<u64>();
    let mut inputs = vec![x];
    inputs.extend(ps.tensors());
    Ok(Case {
        inputs,
        f: Box::new(move |t| project(&mha.forward(&t[0])?.0, s)),
    })
}

/// Cross-entropy of the tiny model on one study of each class, checked
/// against every parameter.
fn end_to_end_case(seed: u64) -> Result<Case> {
    let cfg = ModelConfig::tiny();
    let model = ScaNet::new(&cfg, seed)?;
    let gen = GeneratorConfig::with_shape(cfg.num_slices, cfg.slice_height, cfg.slice_width);
    let studies = [synth_study(0, seed, &gen)?, synth_study(1, seed, &gen)?];
    let labels: Vec<u8> = studies.iter().map(|s| s.label).collect();
    let x = stack_studies(&studies.iter().collect::<Vec<_>>())?;
    Ok(Case {
        inputs: model.params().tensors(),
        f: Box::new(move |_| cross_entropy_loss(&model.forward(&x, None, false)?.probabilities, &labels)),
    })
}

fn run(name: &str, cases: Vec<Case>, eps: f32, tolerance: f64) -> Result<GradRow> {
    let mut row = GradRow {
        name: name.to_string(),
        max_relative_error: 0.0,
        kink_aware_max_relative_error: 0.0,
        elements: 0,
        kinks_crossed: 0,
        unresolved_kinks: 0,
        passed: false,
    };
    for case in cases {
        let r = grad_check_with(&case.f, &case.inputs, eps, Precision::Wide, None)?;
        row.max_relative_error = row.max_relative_error.max(r.max_relative_error);
        row.kink_aware_max_relative_error = row.kink_aware_max_relative_error.max(r.kink_aware_max_relative_error);
        row.elements += r.elements_checked;
        row.kinks_crossed += r.kinks_crossed;
        row.unresolved_kinks += r.unresolved_kinks;
    }
    row.passed = row.kink_aware_max_relative_error <= tolerance && row.unresolved_kinks == 0;
    Ok(row)
}

/// Runs every row on the calling thread. Each op is tried on three shapes.
pub fn gradient_suite(eps: f32, tolerance: f64, seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(OP_NAMES.len() + 2);
    for name in OP_NAMES {
        rows.push(run(name, op_cases(name, &mut rng), eps, tolerance)?);
    }
    rows.push(run("attention_block", vec![attention_case(&mut rng)?], eps, tolerance)?);
    rows.push(run("scanet_tiny_end_to_end", vec![end_to_end_case(seed)?], eps, tolerance)?);
    Ok(rows)
}

/// Fixed-width table with one line per row.
pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = format!(
        "{:<24} {:>12} {:>12} {:>9} {:>7}  result\n",
        "check", "rel err", "kink-aware", "elements", "kinks"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>12.3e} {:>12.3e} {:>9} {:>7}  {}\n",
            r.name,
            r.max_relative_error,
            r.kink_aware_max_relative_error,
            r.elements,
            r.kinks_crossed,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
