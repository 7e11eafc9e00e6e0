//! Objective functions: gradients against finite differences and the
//! symmetry properties each one must satisfy.

use ncdlab_core::losses::{
    ce_supervised, cluster_loss, style_corr, style_cossimi, style_orth, sup_contrastive, total_loss,
    unsup_contrastive, BatchViews, LossConfig, StyleObjective, TeacherTargets,
};
use ncdlab_core::models::{InitSpec, ModelBundle, ModelDims};
use ncdlab_core::tensor::{grad_check, Tape, Tensor, Var};
use ncdlab_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-4;
const BATCHES: u64 = 20;

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

fn check(name: &str, eps: f64, case: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>)) {
    let mut worst = 0.0f64;
    for batch in 0..BATCHES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + batch);
        let (inputs, f) = case(&mut rng);
        let r = grad_check(|t, v| f(t, v), &inputs, eps).unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(r.max_rel_error);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn unsup_contrastive_gradients() {
    check("unsup", 1e-5, |rng| {
        let b = rng.gen_range(2..6);
        (
            vec![gaussian(rng, &[b, 4]), gaussian(rng, &[b, 4])],
            Box::new(|t, v| unsup_contrastive(t, v[0], v[1], 0.5)),
        )
    });
}

#[test]
fn sup_contrastive_gradients() {
    check("sup", 1e-5, |rng| {
        let b = rng.gen_range(3..7);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
        (
            vec![gaussian(rng, &[b, 4]), gaussian(rng, &[b, 4])],
            Box::new(move |t, v| sup_contrastive(t, v[0], v[1], &labels, 0.7)),
        )
    });
}

#[test]
fn cluster_loss_gradients() {
    check("cluster", 1e-5, |rng| {
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
    });
}

#[test]
fn ce_supervised_gradients() {
    check("ce", 1e-5, |rng| {
        let (b, k) = (rng.gen_range(1..5), rng.gen_range(2..5));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        (
            vec![gaussian(rng, &[b, k])],
            Box::new(move |t, v| {
                let p = t.softmax(v[0], 0.5)?;
                ce_supervised(t, p, &labels)
            }),
        )
    });
}

#[test]
fn style_objective_gradients() {
    type StyleFn = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
    let fns: [(&str, StyleFn); 3] = [("orth", style_orth), ("cossimi", style_cossimi), ("corr", style_corr)];
    for (name, f) in fns {
        check(name, 1e-5, move |rng| {
            let b = rng.gen_range(1..5);
            (vec![gaussian(rng, &[b, 5]), gaussian(rng, &[b, 5])], Box::new(move |t, v| f(t, v[0], v[1])))
        });
    }
}

struct Views {
    z: Tensor<f64>,
    zp: Tensor<f64>,
    h: Tensor<f64>,
    hp: Tensor<f64>,
    v: Tensor<f64>,
    vp: Tensor<f64>,
    c: Tensor<f64>,
    labels: Vec<Option<usize>>,
}

fn random_views(rng: &mut ChaCha8Rng) -> Views {
    let b = 6;
    let labels = (0..b).map(|i| if i < 4 { Some(i % 2) } else { None }).collect();
    Views {
        z: gaussian(rng, &[b, 4]),
        zp: gaussian(rng, &[b, 4]),
        h: gaussian(rng, &[b, 5]),
        hp: gaussian(rng, &[b, 5]),
        v: gaussian(rng, &[b, 4]),
        vp: gaussian(rng, &[b, 4]),
        c: gaussian(rng, &[3, 5]),
        labels,
    }
}

fn bind(vars: &[Var], labels: &[Option<usize>], with_style: bool) -> BatchViews {
    BatchViews {
        z: vars[0],
        z_prime: vars[1],
        h: vars[2],
        h_prime: vars[3],
        v: with_style.then_some(vars[4]),
        v_prime: with_style.then_some(vars[5]),
        labels: labels.to_vec(),
    }
}

#[test]
fn total_loss_gradients() {
    for obj in [StyleObjective::Orth, StyleObjective::CosSimi, StyleObjective::Corr] {
        let cfg = LossConfig { tau_u: 0.5, tau_t: 0.2, tau_s: 0.3, ..LossConfig::default() }.with_style(obj, 0.5);
        check(obj.name(), 1e-5, move |rng| {
            let s = random_views(rng);
            let teacher = {
                let mut t = Tape::new();
                let h = t.constant(s.h.clone());
                let hp = t.constant(s.hp.clone());
                let c = t.constant(s.c.clone());
                let views = BatchViews { z: h, z_prime: hp, h, h_prime: hp, v: None, v_prime: None, labels: s.labels.clone() };
                TeacherTargets::from_views(&t, &views, c, &cfg).unwrap()
            };
            let labels = s.labels.clone();
            (
                vec![s.z, s.zp, s.h, s.hp, s.v, s.vp, s.c],
                Box::new(move |t, v| {
                    let views = bind(v, &labels, true);
                    Ok(total_loss(t, &views, v[6], &teacher, &cfg)?.0)
                }),
            )
        });
    }
}

fn eval_total(s: &Views, cfg: &LossConfig, with_style: bool) -> (f64, ncdlab_core::losses::LossBreakdown) {
    let mut t = Tape::new();
    let vars: Vec<Var> = [&s.z, &s.zp, &s.h, &s.hp, &s.v, &s.vp, &s.c]
        .into_iter()
        .map(|x| t.constant(x.clone()))
        .collect();
    let views = bind(&vars, &s.labels, with_style);
    let teacher = TeacherTargets::from_views(&t, &views, vars[6], cfg).unwrap();
    let (l, bd) = total_loss(&mut t, &views, vars[6], &teacher, cfg).unwrap();
    (t.value(l).item().unwrap(), bd)
}

#[test]
fn zero_style_weight_is_bitwise_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let s = random_views(&mut rng);
        let cfg = LossConfig::default().with_style(StyleObjective::CosSimi, 0.0);
        let (with, bd) = eval_total(&s, &cfg, true);
        let (without, _) = eval_total(&s, &cfg, false);
        assert_eq!(with.to_bits(), without.to_bits());
        assert!(bd.style.is_finite() && bd.style > 0.0, "style value still logged");
        let weighted = eval_total(&s, &cfg.with_style(StyleObjective::CosSimi, 0.3), true).0;
        assert!((weighted - with - 0.3 * bd.style).abs() < 1e-9);
    }
}

#[test]
fn lambda_one_drops_unsupervised_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random_views(&mut rng);
    let cfg = LossConfig { lambda: 1.0, ..LossConfig::default() };
    let (total, bd) = eval_total(&s, &cfg, false);
    assert_eq!((bd.rep_u, bd.cls_u), (0.0, 0.0));
    assert!((total - bd.rep_s - bd.cls_s).abs() < 1e-12);
    let (_, bd) = eval_total(&s, &LossConfig::default(), false);
    assert!(bd.rep_u != 0.0 && bd.cls_u != 0.0);
    let expect = 0.65 * (bd.rep_u + bd.cls_u) + 0.35 * (bd.rep_s + bd.cls_s);
    assert!((bd.total - expect).abs() < 1e-9);
}

#[test]
fn zero_style_weight_sends_no_gradient_to_style_encoder() {
    let dims = ModelDims { image_size: 8, num_seen: 2, num_novel: 2, ..ModelDims::default() };
    let mut model = ModelBundle::<f64>::new(dims, InitSpec::new(3), true).unwrap();
    model.set_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[6, dims.input_len()], |_| rng.gen_range(0.0..1.0));
    let xp = Tensor::from_fn(&[6, dims.input_len()], |_| rng.gen_range(0.0..1.0));
    let cfg = LossConfig::default().with_style(StyleObjective::Corr, 0.0);
    let mut t = Tape::new();
    let bound = model.bind(&mut t);
    let xv = t.constant(x);
    let xpv = t.constant(xp);
    let (h, z) = bound.forward_content(&mut t, xv).unwrap();
    let (hp, zp) = bound.forward_content(&mut t, xpv).unwrap();
    let v = bound.forward_style(&mut t, xv).unwrap();
    let vp = bound.forward_style(&mut t, xpv).unwrap();
    let labels = vec![Some(0), Some(0), Some(1), Some(1), None, None];
    let views = BatchViews { z, z_prime: zp, h, h_prime: hp, v: Some(v), v_prime: Some(vp), labels };
    let teacher = TeacherTargets::from_views(&t, &views, bound.prototypes, &cfg).unwrap();
    let (l, _) = total_loss(&mut t, &views, bound.prototypes, &teacher, &cfg).unwrap();
    t.backward(l).unwrap();
    model.collect_grads(&t, &bound).unwrap();
    for (name, p) in model.named_params() {
        let nonzero = p.grad().is_some_and(|g| g.iter().any(|&x| x != 0.0));
        assert_eq!(nonzero, !name.starts_with("style."), "{name}");
    }
}

#[test]
fn cluster_loss_without_regularizer_on_own_targets_is_mean_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let p = distributions(&mut rng, 5, 4);
        let mean_h: f64 = (0..5).map(|i| -p.row(i).iter().map(|x| x * x.ln()).sum::<f64>()).sum::<f64>() / 5.0;
        let mut t = Tape::new();
        let pv = t.constant(p.clone());
        let l = cluster_loss(&mut t, pv, pv, &p, &p, 0.0).unwrap();
        assert!((t.value(l).item().unwrap() - mean_h).abs() < 1e-6);
    }
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
    let a = gaussian(rng, &[d, d]);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = a.row(i).to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.iter().map(|x| x / n).collect());
    }
    Tensor::from_rows(&q).unwrap()
}

fn rotate(x: &Tensor<f64>, r: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let a = t.constant(x.clone());
    let b = t.constant(r.clone());
    let y = t.matmul(a, b).unwrap();
    t.value(y).clone()
}

fn scalar2(f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut t = Tape::new();
    let x = t.constant(a.clone());
    let y = t.constant(b.clone());
    let l = f(&mut t, x, y).unwrap();
    t.value(l).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_losses_are_rotation_invariant(seed in any::<u64>(), b in 2usize..7, d in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(&mut rng, &[b, d]);
        let zp = gaussian(&mut rng, &[b, d]);
        let r = orthogonal(&mut rng, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
        let u = |t: &mut Tape<f64>, x, y| unsup_contrastive(t, x, y, 0.07);
        let s = |t: &mut Tape<f64>, x, y| sup_contrastive(t, x, y, &labels, 1.0);
        let (zr, zpr) = (rotate(&z, &r), rotate(&zp, &r));
        prop_assert!((scalar2(u, &z, &zp) - scalar2(u, &zr, &zpr)).abs() < 1e-5);
        prop_assert!((scalar2(s, &z, &zp) - scalar2(s, &zr, &zpr)).abs() < 1e-5);
    }

    #[test]
    fn unsup_contrastive_is_permutation_invariant(seed in any::<u64>(), b in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(&mut rng, &[b, 3]);
        let zp = gaussian(&mut rng, &[b, 3]);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.rotate_left(rng.gen_range(0..b));
        perm.swap(0, b - 1);
        let permute = |x: &Tensor<f64>| Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let u = |t: &mut Tape<f64>, x, y| unsup_contrastive(t, x, y, 0.3);
        prop_assert!((scalar2(u, &z, &zp) - scalar2(u, &permute(&z), &permute(&zp))).abs() < 1e-9);
    }

    #[test]
    fn style_scale_properties(seed in any::<u64>(), b in 1usize..5, d in 3usize..7, a in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(&mut rng, &[b, d]);
        let v = gaussian(&mut rng, &[b, d]);
        let scales: Vec<f64> = (0..b).map(|_| rng.gen_range(0.1..10.0)).collect();
        let zs = Tensor::from_fn(&[b, d], |idx| z.data()[idx] * scales[idx / d]);
        let vs = Tensor::from_fn(&[b, d], |idx| v.data()[idx] * scales[b - 1 - idx / d]);
        for f in [style_cossimi::<f64> as fn(&mut Tape<f64>, Var, Var) -> Result<Var>, style_corr::<f64>] {
            let base = scalar2(f, &z, &v);
            prop_assert!((base - scalar2(f, &zs, &v)).abs() < 1e-6);
            prop_assert!((base - scalar2(f, &z, &vs)).abs() < 1e-6);
        }
        let za = Tensor::from_fn(&[b, d], |idx| z.data()[idx] * a);
        let va = Tensor::from_fn(&[b, d], |idx| v.data()[idx] * a);
        let o = scalar2(style_orth::<f64>, &z, &v);
        prop_assert!((scalar2(style_orth::<f64>, &za, &v) - a * o).abs() < 1e-9 * (1.0 + a * o));
        prop_assert!((scalar2(style_orth::<f64>, &z, &va) - a * o).abs() < 1e-9 * (1.0 + a * o));
    }
}
