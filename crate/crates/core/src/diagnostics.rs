//! Finite-difference checks of every training objective on random small
//! batches, shared by the test suite and the command line.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    ce_supervised, cluster_loss, style_corr, style_cossimi, style_orth, style_removal, sup_contrastive, total_loss,
    unsup_contrastive, BatchViews, LossConfig, StyleObjective, TeacherTargets,
};
use crate::seed::rng_from;
use crate::tensor::{grad_check, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientEntry {
    pub name: String,
    pub batches: u64,
    pub max_rel_error: f64,
}

impl GradientEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOL
    }
}

type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn gaussian(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.sample::<f64, _>(StandardNormal))
}

fn distributions(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor<f64> {
    let raw: Vec<f64> = (0..b * k).map(|_| rng.gen_range(0.05..1.0)).collect();
    Tensor::from_fn(&[b, k], |idx| {
        let i = idx / k;
        raw[idx] / raw[i * k..(i + 1) * k].iter().sum::<f64>()
    })
}

fn unsup_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, LossFn) {
    let b = rng.gen_range(2..6);
    (vec![gaussian(rng, &[b, 4]), gaussian(rng, &[b, 4])], Box::new(|t, v| unsup_contrastive(t, v[0], v[1], 0.5)))
}

fn sup_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, LossFn) {
    let b = rng.gen_range(3..7);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
    (
        vec![gaussian(rng, &[b, 4]), gaussian(rng, &[b, 4])],
        Box::new(move |t, v| sup_contrastive(t, v[0], v[1], &labels, 0.7)),
    )
}

fn cluster_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, LossFn) {
    let (b, k) = (rng.gen_range(2..5), rng.gen_range(2..5));
    let q = distributions(rng, b, k);
    let qp = distributions(rng, b, k);
    (
        vec![gaussian(rng, &[b, k]), gaussian(rng, &[b, k])],
        Box::new(move |t, v| {
            let p = t.softmax(v[0], 1.0)?;
            let pp = t.softmax(v[1], 1.0)?;
            cluster_loss(t, p, pp, &q, &qp, 0.8)
        }),
    )
}

fn ce_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, LossFn) {
    let (b, k) = (rng.gen_range(1..5), rng.gen_range(2..5));
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
    (
        vec![gaussian(rng, &[b, k])],
        Box::new(move |t, v| {
            let p = t.softmax(v[0], 0.5)?;
            ce_supervised(t, p, &labels)
        }),
    )
}

fn pair_case(rng: &mut ChaCha8Rng, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> (Vec<Tensor<f64>>, LossFn) {
    let b = rng.gen_range(1..5);
    (vec![gaussian(rng, &[b, 5]), gaussian(rng, &[b, 5])], Box::new(move |t, v| f(t, v[0], v[1])))
}

fn unified_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, LossFn) {
    let obj = [StyleObjective::Orth, StyleObjective::CosSimi, StyleObjective::Corr][rng.gen_range(0..3)];
    let cfg = LossConfig::default().with_style(obj, 1.0);
    let b = rng.gen_range(2..5);
    (vec![gaussian(rng, &[b, 5]), gaussian(rng, &[b, 5])], Box::new(move |t, v| style_removal(t, v[0], v[1], &cfg)))
}

fn total_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, LossFn) {
    let obj = [StyleObjective::Orth, StyleObjective::CosSimi, StyleObjective::Corr][rng.gen_range(0..3)];
    let cfg = LossConfig { tau_u: 0.5, tau_t: 0.2, tau_s: 0.3, ..LossConfig::default() }.with_style(obj, 0.5);
    let b = 6;
    let labels: Vec<Option<usize>> = (0..b).map(|i| if i < 4 { Some(i % 2) } else { None }).collect();
    let inputs = vec![
        gaussian(rng, &[b, 4]),
        gaussian(rng, &[b, 4]),
        gaussian(rng, &[b, 5]),
        gaussian(rng, &[b, 5]),
        gaussian(rng, &[b, 4]),
        gaussian(rng, &[b, 4]),
        gaussian(rng, &[3, 5]),
    ];
    let teacher = {
        let mut t = Tape::new();
        let h = t.constant(inputs[2].clone());
        let hp = t.constant(inputs[3].clone());
        let c = t.constant(inputs[6].clone());
        let views = BatchViews { z: h, z_prime: hp, h, h_prime: hp, v: None, v_prime: None, labels: labels.clone() };
        TeacherTargets::from_views(&t, &views, c, &cfg)
    };
    (
        inputs,
        Box::new(move |t, v| {
            let teacher = teacher.as_ref().map_err(|e| e.with_context("teacher"))?;
            let views = BatchViews {
                z: v[0],
                z_prime: v[1],
                h: v[2],
                h_prime: v[3],
                v: Some(v[4]),
                v_prime: Some(v[5]),
                labels: labels.clone(),
            };
            Ok(total_loss(t, &views, v[6], teacher, &cfg)?.0)
        }),
    )
}

/// Runs every objective on `batches` random batches and reports the worst
/// relative error of each.
pub fn gradient_suite(batches: u64, seed: u64) -> Result<Vec<GradientEntry>> {
    type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, LossFn);
    let cases: [(&str, Case); 9] = [
        ("unsup_contrastive", unsup_case),
        ("sup_contrastive", sup_case),
        ("cluster_loss", cluster_case),
        ("ce_supervised", ce_case),
        ("style_orth", |r| pair_case(r, style_orth)),
        ("style_cossimi", |r| pair_case(r, style_cossimi)),
        ("style_corr", |r| pair_case(r, style_corr)),
        ("style_removal", unified_case),
        ("total_loss", total_case),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, case)) in cases.iter().enumerate() {
        let mut worst = 0.0f64;
        for b in 0..batches {
            let mut rng = rng_from(&[seed, i as u64, b]);
            let (inputs, f) = case(&mut rng);
            let report = grad_check(|t, v| f(t, v), &inputs, GRAD_EPS)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(GradientEntry { name: name.to_string(), batches, max_rel_error: worst });
    }
    Ok(out)
}
