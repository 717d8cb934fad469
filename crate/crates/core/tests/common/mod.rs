//! Central finite-difference oracle, kept apart from the tape's backward code.
#![allow(dead_code)]

use care_core::tape::{Graph, Var};
use care_core::train::TrainItem;
use care_core::{CareModel, Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: Real = 1e-5;
pub const TOLERANCE: Real = 1e-4;
/// Denominator floor: central differences at `STEP` carry ~1e-10 roundoff
/// on O(10) losses, so gradients smaller than this are held to an absolute
/// error of `TOLERANCE * FLOOR`.
pub const FLOOR: Real = 1e-5;

pub fn rel_err(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `[0.05, 1]` in magnitude with random sign, so ReLU kinks sit
/// well outside the finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar probe `sum(out * weights)` built on top of `build`.
fn probe<F>(inputs: &[Tensor], weights: &Tensor, build: &F, as_variables: bool) -> Result<(Real, Option<Vec<Vec<Real>>>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if as_variables { g.variable(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = build(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    if !as_variables {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((value, Some(per_input)))
}

/// Largest relative error between backward and central differences over
/// every element of every input listed in `wrt`.
pub fn check_primitive<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, wrt: &[usize], build: F) -> Result<Real>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let weights = random_tensor(rng, &out_shape, -1.0, 1.0);
    let (_, analytic) = probe(&inputs, &weights, &build, true)?;
    let analytic = analytic.unwrap();
    let mut worst: Real = 0.0;
    for &k in wrt {
        for e in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= STEP;
            let fp = probe(&plus, &weights, &build, false)?.0;
            let fm = probe(&minus, &weights, &build, false)?.0;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k][e], numeric));
        }
    }
    Ok(worst)
}

fn model_loss(model: &CareModel, item: &TrainItem) -> Result<Real> {
    let mut g = Graph::new();
    let out = model.loss(&mut g, item.input(), &item.gold)?;
    Ok(g.value(out.total).item())
}

/// Compares the full training loss gradient against central differences.
/// With `per_param = Some(k)` only `k` evenly spread coordinates of each
/// parameter are probed.
pub fn check_model(model: &mut CareModel, item: &TrainItem, per_param: Option<usize>) -> Result<(Real, usize)> {
    let mut g = Graph::new();
    let out = model.loss(&mut g, item.input(), &item.gold)?;
    let grads = g.backward(out.total)?;
    model.params_mut().clear_grads();
    model.params_mut().accumulate(&grads);
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    let mut worst: Real = 0.0;
    let mut probed = 0;
    for id in ids {
        let analytic = model.params().get(id).grad().unwrap().to_vec();
        let n = analytic.len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for e in coords {
            let orig = model.params().get(id).value().data()[e];
            model.params_mut().get_mut(id).value_mut().data_mut()[e] = orig + STEP;
            let fp = model_loss(model, item)?;
            model.params_mut().get_mut(id).value_mut().data_mut()[e] = orig - STEP;
            let fm = model_loss(model, item)?;
            model.params_mut().get_mut(id).value_mut().data_mut()[e] = orig;
            let nm = (fp - fm) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[e], nm));
            probed += 1;
        }
    }
    model.params_mut().clear_grads();
    Ok((worst, probed))
}

/// Random shape with `rank` dims in `1..=max`.
pub fn random_shape(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// Runs `trials` randomized finite-difference checks for every tape
/// primitive and returns the worst relative error per primitive.
pub fn primitive_suite(seed: u64, trials: usize) -> Result<Vec<(&'static str, Real)>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, r: &mut ChaCha8Rng, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Real>| -> Result<()> {
        let mut worst: Real = 0.0;
        for _ in 0..trials {
            worst = worst.max(f(r)?);
        }
        out.push((name, worst));
        Ok(())
    };
    run("matmul", &mut r, &mut |r| {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = random_tensor(r, &[m, k], -1.0, 1.0);
        let b = random_tensor(r, &[k, n], -1.0, 1.0);
        check_primitive(r, vec![a, b], &[0, 1], |g, v| g.matmul(v[0], v[1]))
    })?;
    run("add", &mut r, &mut |r| {
        let rank = r.random_range(1..4);
        let s = random_shape(r, rank, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        let b = random_tensor(r, &s, -1.0, 1.0);
        check_primitive(r, vec![a, b], &[0, 1], |g, v| g.add(v[0], v[1]))
    })?;
    run("mul", &mut r, &mut |r| {
        let rank = r.random_range(1..4);
        let s = random_shape(r, rank, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        let b = random_tensor(r, &s, -1.0, 1.0);
        check_primitive(r, vec![a, b], &[0, 1], |g, v| g.mul(v[0], v[1]))
    })?;
    run("add_bias", &mut r, &mut |r| {
        let rank = r.random_range(1..4);
        let s = random_shape(r, rank, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        let b = random_tensor(r, &[*s.last().unwrap()], -1.0, 1.0);
        check_primitive(r, vec![a, b], &[0, 1], |g, v| g.add_bias(v[0], v[1]))
    })?;
    run("scale", &mut r, &mut |r| {
        let s = random_shape(r, 2, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        let f = r.random_range(-2.0..2.0);
        check_primitive(r, vec![a], &[0], move |g, v| Ok(g.scale(v[0], f)))
    })?;
    run("concat", &mut r, &mut |r| {
        let lead_rank = r.random_range(0..3);
        let lead = random_shape(r, lead_rank, 3);
        let parts: Vec<Tensor> = (0..r.random_range(1..4))
            .map(|_| {
                let mut s = lead.clone();
                s.push(r.random_range(1..4));
                random_tensor(r, &s, -1.0, 1.0)
            })
            .collect();
        let wrt: Vec<usize> = (0..parts.len()).collect();
        check_primitive(r, parts, &wrt, |g, v| g.concat(v))
    })?;
    run("relu", &mut r, &mut |r| {
        let s = random_shape(r, 2, 5);
        let a = away_from_zero(r, &s);
        check_primitive(r, vec![a], &[0], |g, v| Ok(g.relu(v[0])))
    })?;
    run("sigmoid", &mut r, &mut |r| {
        let s = random_shape(r, 2, 5);
        let a = random_tensor(r, &s, -4.0, 4.0);
        check_primitive(r, vec![a], &[0], |g, v| Ok(g.sigmoid(v[0])))
    })?;
    run("softmax", &mut r, &mut |r| {
        let rank = r.random_range(1..4);
        let s = random_shape(r, rank, 5);
        let a = random_tensor(r, &s, -3.0, 3.0);
        check_primitive(r, vec![a], &[0], |g, v| Ok(g.softmax(v[0])))
    })?;
    run("embedding", &mut r, &mut |r| {
        let (rows, d) = (r.random_range(1..6), r.random_range(1..4));
        let table = random_tensor(r, &[rows, d], -1.0, 1.0);
        let idx: Vec<usize> = (0..r.random_range(1..7)).map(|_| r.random_range(0..rows)).collect();
        check_primitive(r, vec![table], &[0], move |g, v| g.embedding(v[0], &idx))
    })?;
    run("conv2d", &mut r, &mut |r| {
        let k = if r.random_bool(0.5) { 3 } else { 1 };
        let (h, w, cin, cout) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..4), r.random_range(1..4));
        let x = random_tensor(r, &[h, w, cin], -1.0, 1.0);
        let kern = random_tensor(r, &[k, k, cin, cout], -1.0, 1.0);
        check_primitive(r, vec![x, kern], &[0, 1], |g, v| g.conv2d(v[0], v[1]))
    })?;
    run("transpose", &mut r, &mut |r| {
        let rank = r.random_range(2..4);
        let s = random_shape(r, rank, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        check_primitive(r, vec![a], &[0], |g, v| g.transpose(v[0]))
    })?;
    run("sum", &mut r, &mut |r| {
        let s = random_shape(r, 2, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        check_primitive(r, vec![a], &[0], |g, v| Ok(g.sum(v[0])))
    })?;
    run("mean", &mut r, &mut |r| {
        let s = random_shape(r, 3, 3);
        let a = random_tensor(r, &s, -1.0, 1.0);
        check_primitive(r, vec![a], &[0], |g, v| Ok(g.mean(v[0])))
    })?;
    run("reshape", &mut r, &mut |r| {
        let s = random_shape(r, 2, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        let flat = [s[0] * s[1]];
        check_primitive(r, vec![a], &[0], move |g, v| g.reshape(v[0], &flat))
    })?;
    run("grid_rows", &mut r, &mut |r| {
        let s = random_shape(r, 2, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        check_primitive(r, vec![a], &[0], |g, v| g.grid_rows(v[0]))
    })?;
    run("grid_cols", &mut r, &mut |r| {
        let s = random_shape(r, 2, 4);
        let a = random_tensor(r, &s, -1.0, 1.0);
        check_primitive(r, vec![a], &[0], |g, v| g.grid_cols(v[0]))
    })?;
    run("bce_sum", &mut r, &mut |r| {
        let s = random_shape(r, 3, 3);
        let p = random_tensor(r, &s, 0.05, 0.95);
        let y = Tensor::from_fn(&s, |_| if r.random_bool(0.3) { 1.0 } else { 0.0 });
        let m = Tensor::from_fn(&s, |_| if r.random_bool(0.7) { 1.0 } else { 0.0 });
        check_primitive(r, vec![p], &[0], move |g, v| g.bce_sum(v[0], &y, &m))
    })?;
    Ok(out)
}

use care_core::data::{AnnotatedSentence, EntityMention, RelationTriplet};

/// Random valid sentence with up to `max_len` tokens, nested and
/// overlapping mentions, and relations between mentions whose last tokens
/// differ.
pub fn random_sentence(r: &mut ChaCha8Rng, max_len: usize, n_entity: usize, n_relation: usize) -> AnnotatedSentence {
    let n = r.random_range(1..=max_len);
    let tokens = (0..n).map(|i| format!("t{}", (i * 7 + r.random_range(0..3)) % 11)).collect();
    let mut entities: Vec<EntityMention> = Vec::new();
    for _ in 0..r.random_range(0..=n.min(6)) {
        let start = r.random_range(0..n);
        let end = r.random_range(start..n.min(start + 4));
        let m = EntityMention::new(start, end, r.random_range(0..n_entity));
        if !entities.contains(&m) {
            entities.push(m);
        }
        // sometimes nest a second mention inside the first
        if end > start && r.random_bool(0.4) {
            let inner = EntityMention::new(r.random_range(start..=end), end, r.random_range(0..n_entity));
            if !entities.contains(&inner) {
                entities.push(inner);
            }
        }
    }
    let mut relations: Vec<RelationTriplet> = Vec::new();
    if entities.len() >= 2 {
        for _ in 0..r.random_range(0..4) {
            let head = entities[r.random_range(0..entities.len())];
            let tail = entities[r.random_range(0..entities.len())];
            if head.end == tail.end {
                continue;
            }
            let t = RelationTriplet { head, tail, label: r.random_range(0..n_relation) };
            if !relations.contains(&t) {
                relations.push(t);
            }
        }
    }
    AnnotatedSentence::new(tokens, entities, relations)
}
