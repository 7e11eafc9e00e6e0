//! Training objectives.
//!
//! Representation terms work on projections `z`, classification terms on
//! prototype soft labels `p`, and the style-removal terms on pairs of
//! content and style embeddings `(z, v)`. Every function records its
//! computation on a [`Tape`] and returns a scalar [`Var`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{soft_labels, teacher_soft_labels};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Floor applied inside every cross-entropy logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Rows whose coordinate standard deviation falls below this are skipped
/// by the correlation objective.
pub const CORR_MIN_STD: f64 = 1e-8;
const DIST_TOL: f64 = 1e-6;

/// Temperatures, balance weights and the style-removal selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_u: f64,
    pub tau_c: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub lambda: f64,
    pub eps_reg: f64,
    pub w: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_u: 0.07,
            tau_c: 1.0,
            tau_s: 0.1,
            tau_t: 0.07,
            lambda: 0.35,
            eps_reg: 1.0,
            w: 0.0,
            lambda_a: 0.0,
            lambda_b: 1.0,
            lambda_c: 0.0,
        }
    }
}

/// Which single style objective a valid selector picks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StyleObjective {
    Orth,
    CosSimi,
    Corr,
}

impl StyleObjective {
    pub fn selector(self) -> (f64, f64, f64) {
        match self {
            Self::Orth => (1.0, 0.0, 0.0),
            Self::CosSimi => (0.0, 1.0, 0.0),
            Self::Corr => (0.0, 0.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Orth => "orth",
            Self::CosSimi => "cossimi",
            Self::Corr => "corr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "orth" => Ok(Self::Orth),
            "cossimi" => Ok(Self::CosSimi),
            "corr" => Ok(Self::Corr),
            other => Err(Error::Config(format!("unknown style objective {other:?}"))),
        }
    }
}

impl LossConfig {
    pub fn with_style(mut self, objective: StyleObjective, w: f64) -> Self {
        (self.lambda_a, self.lambda_b, self.lambda_c) = objective.selector();
        self.w = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_u", self.tau_u), ("tau_c", self.tau_c), ("tau_s", self.tau_s), ("tau_t", self.tau_t)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.eps_reg >= 0.0 && self.eps_reg.is_finite()) {
            return Err(Error::Config(format!("eps_reg must be nonnegative, got {}", self.eps_reg)));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("w must be nonnegative, got {}", self.w)));
        }
        self.style_objective().map(|_| ())
    }

    pub fn style_objective(&self) -> Result<StyleObjective> {
        let sel = [self.lambda_a, self.lambda_b, self.lambda_c];
        if sel.iter().any(|&l| l != 0.0 && l != 1.0) || sel.iter().sum::<f64>() != 1.0 {
            return Err(Error::Config(format!(
                "style selector must be one-hot, got ({}, {}, {})",
                sel[0], sel[1], sel[2]
            )));
        }
        Ok(if sel[0] == 1.0 {
            StyleObjective::Orth
        } else if sel[1] == 1.0 {
            StyleObjective::CosSimi
        } else {
            StyleObjective::Corr
        })
    }
}

fn batch_rows<T: Scalar>(tape: &Tape<T>, a: Var) -> Result<usize> {
    match tape.dims(a) {
        [m, _] => Ok(*m),
        d => Err(Error::Shape(format!("expected [B, d], got {d:?}"))),
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    if tape.dims(a) != tape.dims(b) {
        return Err(Error::Shape(format!("{:?} vs {:?}", tape.dims(a), tape.dims(b))));
    }
    Ok(())
}

/// `Z Z'ᵀ / τ` on row-normalized inputs.
fn cross_view_logits<T: Scalar>(tape: &mut Tape<T>, z: Var, z_prime: Var, tau: f64) -> Result<Var> {
    same_shape(tape, z, z_prime)?;
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    let zn = tape.normalize_rows(z)?;
    let zpn = tape.normalize_rows(z_prime)?;
    let zpt = tape.transpose(zpn)?;
    let s = tape.matmul(zn, zpt)?;
    tape.scale(s, T::of(1.0 / tau))
}

fn off_diagonal(m: usize) -> Vec<bool> {
    (0..m * m).map(|idx| idx / m != idx % m).collect()
}

/// Unsupervised contrastive loss; the positive pair is left out of the
/// denominator, so the value can be negative.
pub fn unsup_contrastive<T: Scalar>(tape: &mut Tape<T>, z: Var, z_prime: Var, tau_u: f64) -> Result<Var> {
    let b = batch_rows(tape, z)?;
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("contrastive loss needs B >= 2, got {b}")));
    }
    let s = cross_view_logits(tape, z, z_prime, tau_u)?;
    let lse = tape.logsumexp_rows(s, Some(off_diagonal(b)))?;
    let eye = tape.constant(Tensor::eye(b));
    let masked = tape.mul(s, eye)?;
    let pos = tape.row_sum(masked)?;
    let per_row = tape.sub(lse, pos)?;
    tape.mean(per_row)
}

/// Supervised contrastive loss over a labeled sub-batch. Positives of row
/// `i` are the other rows with the same label; rows without any are left
/// out of the average, and a batch with no positives at all scores 0.
pub fn sup_contrastive<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    z_prime: Var,
    labels: &[usize],
    tau_c: f64,
) -> Result<Var> {
    let m = batch_rows(tape, z)?;
    if m == 0 || labels.is_empty() {
        return Err(Error::DegenerateBatch("no labeled rows".into()));
    }
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} rows", labels.len())));
    }
    let peers: Vec<usize> = (0..m)
        .map(|i| (0..m).filter(|&q| q != i && labels[q] == labels[i]).count())
        .collect();
    let valid = peers.iter().filter(|&&c| c > 0).count();
    if valid == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let s = cross_view_logits(tape, z, z_prime, tau_c)?;
    let lse = tape.logsumexp_rows(s, Some(off_diagonal(m)))?;
    let weights = Tensor::from_fn(&[m, m], |idx| {
        let (i, q) = (idx / m, idx % m);
        if i != q && labels[i] == labels[q] {
            T::of(1.0 / peers[i] as f64)
        } else {
            T::zero()
        }
    });
    let row_mask = Tensor::from_fn(&[m, 1], |i| if peers[i] > 0 { T::one() } else { T::zero() });
    let w = tape.constant(weights);
    let rm = tape.constant(row_mask);
    let pos = tape.mul(s, w)?;
    let pos = tape.sum(pos)?;
    let neg = tape.mul(lse, rm)?;
    let neg = tape.sum(neg)?;
    let total = tape.sub(neg, pos)?;
    tape.scale(total, T::of(1.0 / valid as f64))
}

fn check_distributions<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    let (m, _) = t.matrix_dims()?;
    for i in 0..m {
        let row = t.row(i);
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|v| v.as_f64() < 0.0) || (s - 1.0).abs() > DIST_TOL {
            return Err(Error::NumericDomain(format!("{what} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// `(1/B) Σ_i Σ_k -target_ik log p_ik`, with the log floored.
fn soft_cross_entropy<T: Scalar>(tape: &mut Tape<T>, target: &Tensor<T>, p: Var) -> Result<Var> {
    if target.dims() != tape.dims(p) {
        return Err(Error::Shape(format!("target {:?} vs prediction {:?}", target.dims(), tape.dims(p))));
    }
    let b = batch_rows(tape, p)?;
    let logp = tape.clamped_log(p, T::of(LOG_FLOOR))?;
    let t = tape.constant(target.detached());
    let prod = tape.mul(t, logp)?;
    let s = tape.sum(prod)?;
    tape.scale(s, T::of(-1.0 / b as f64))
}

/// Self-distillation loss with mean-entropy regularization, symmetrized
/// over the two views: `½[ℓ(q', p) + ℓ(q, p')] − ε·H(p̄)` where `p̄`
/// averages `p` and `p'` over the batch.
pub fn cluster_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    p_prime: Var,
    q: &Tensor<T>,
    q_prime: &Tensor<T>,
    eps_reg: f64,
) -> Result<Var> {
    same_shape(tape, p, p_prime)?;
    check_distributions(tape.value(p), "p")?;
    check_distributions(tape.value(p_prime), "p'")?;
    check_distributions(q, "q")?;
    check_distributions(q_prime, "q'")?;
    let b = batch_rows(tape, p)?;
    let a = soft_cross_entropy(tape, q_prime, p)?;
    let c = soft_cross_entropy(tape, q, p_prime)?;
    let ce = tape.add(a, c)?;
    let ce = tape.scale(ce, T::of(0.5))?;
    if eps_reg == 0.0 {
        return Ok(ce);
    }
    let ones = tape.constant(Tensor::full(&[1, b], T::one()));
    let col_p = tape.matmul(ones, p)?;
    let col_pp = tape.matmul(ones, p_prime)?;
    let both = tape.add(col_p, col_pp)?;
    let mean_p = tape.scale(both, T::of(0.5 / b as f64))?;
    let logm = tape.clamped_log(mean_p, T::of(LOG_FLOOR))?;
    let plogp = tape.mul(mean_p, logm)?;
    let neg_h = tape.sum(plogp)?;
    let reg = tape.scale(neg_h, T::of(eps_reg))?;
    tape.add(ce, reg)
}

/// Mean cross-entropy of predicted distributions against hard labels.
pub fn ce_supervised<T: Scalar>(tape: &mut Tape<T>, p: Var, labels: &[usize]) -> Result<Var> {
    let (m, k) = tape.value(p).matrix_dims()?;
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index(format!("label {bad} with {k} classes")));
    }
    check_distributions(tape.value(p), "p")?;
    let onehot = Tensor::from_fn(&[m, k], |idx| if labels[idx / k] == idx % k { T::one() } else { T::zero() });
    soft_cross_entropy(tape, &onehot, p)
}

/// Batch mean of `|z_i · v_i|`.
pub fn style_orth<T: Scalar>(tape: &mut Tape<T>, z: Var, v: Var) -> Result<Var> {
    same_shape(tape, z, v)?;
    let d = tape.row_dot(z, v)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Batch mean of `|cos(z_i, v_i)|`.
pub fn style_cossimi<T: Scalar>(tape: &mut Tape<T>, z: Var, v: Var) -> Result<Var> {
    same_shape(tape, z, v)?;
    let zn = tape.normalize_rows(z)?;
    let vn = tape.normalize_rows(v)?;
    let d = tape.row_dot(zn, vn)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

fn row_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    (row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt()
}

/// Indices of rows where `z_i` or `v_i` has (near) constant coordinates.
pub fn corr_degenerate_rows<T: Scalar>(z: &Tensor<T>, v: &Tensor<T>) -> Result<Vec<usize>> {
    let (m, _) = z.matrix_dims()?;
    let degenerate = |t: &Tensor<T>, i: usize| {
        let row: Vec<f64> = t.row(i).iter().map(|x| x.as_f64()).collect();
        row_std(&row) < CORR_MIN_STD
    };
    Ok((0..m).filter(|&i| degenerate(z, i) || degenerate(v, i)).collect())
}

/// Batch mean of `|pearson(z_i, v_i)|` across coordinates. Degenerate rows
/// contribute zero but still count in the batch size.
pub fn style_corr<T: Scalar>(tape: &mut Tape<T>, z: Var, v: Var) -> Result<Var> {
    same_shape(tape, z, v)?;
    let (m, d) = tape.value(z).matrix_dims()?;
    let bad = corr_degenerate_rows(tape.value(z), tape.value(v))?;
    let keep: Vec<usize> = (0..m).filter(|i| !bad.contains(i)).collect();
    if keep.is_empty() {
        return Err(Error::NumericDomain("every row has zero coordinate variance".into()));
    }
    let center = |tape: &mut Tape<T>, a: Var| -> Result<Var> {
        let a = if keep.len() == m { a } else { tape.select_rows(a, &keep)? };
        let s = tape.row_sum(a)?;
        let mu = tape.scale(s, T::of(1.0 / d as f64))?;
        let mu = tape.broadcast_cols(mu, d)?;
        let c = tape.sub(a, mu)?;
        tape.normalize_rows(c)
    };
    let zc = center(tape, z)?;
    let vc = center(tape, v)?;
    let r = tape.row_dot(zc, vc)?;
    let a = tape.abs(r)?;
    let s = tape.sum(a)?;
    tape.scale(s, T::of(1.0 / m as f64))
}

/// The selected style objective, `λ_a L_orth + λ_b L_cossimi + λ_c L_corr`
/// with a one-hot selector.
pub fn style_removal<T: Scalar>(tape: &mut Tape<T>, z: Var, v: Var, cfg: &LossConfig) -> Result<Var> {
    match cfg.style_objective()? {
        StyleObjective::Orth => style_orth(tape, z, v),
        StyleObjective::CosSimi => style_cossimi(tape, z, v),
        StyleObjective::Corr => style_corr(tape, z, v),
    }
}

/// Forward outputs of both augmented views of one batch.
#[derive(Clone, Debug)]
pub struct BatchViews {
    pub z: Var,
    pub z_prime: Var,
    pub h: Var,
    pub h_prime: Var,
    /// Style embeddings; absent for a model without a style encoder.
    pub v: Option<Var>,
    pub v_prime: Option<Var>,
    /// Class id for labeled rows, `None` for unlabeled rows.
    pub labels: Vec<Option<usize>>,
}

impl BatchViews {
    pub fn labeled_rows(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter_map(|(i, l)| l.map(|_| i)).collect()
    }

    pub fn labeled_classes(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }

    fn check<T: Scalar>(&self, tape: &Tape<T>) -> Result<usize> {
        let b = batch_rows(tape, self.z)?;
        let mut all = vec![self.z_prime, self.h, self.h_prime];
        all.extend(self.v.iter().chain(&self.v_prime));
        for x in all {
            if batch_rows(tape, x)? != b {
                return Err(Error::Shape(format!("batch views disagree on B = {b}")));
            }
        }
        if self.labels.len() != b {
            return Err(Error::Shape(format!("{} labels for B = {b}", self.labels.len())));
        }
        if self.v.is_some() != self.v_prime.is_some() {
            return Err(Error::Shape("style embedding present for only one view".into()));
        }
        Ok(b)
    }
}

/// Detached teacher distributions for both views.
#[derive(Clone, Debug)]
pub struct TeacherTargets<T: Scalar> {
    pub q: Tensor<T>,
    pub q_prime: Tensor<T>,
}

impl<T: Scalar> TeacherTargets<T> {
    pub fn from_views(tape: &Tape<T>, views: &BatchViews, prototypes: Var, cfg: &LossConfig) -> Result<Self> {
        let c = tape.value(prototypes);
        Ok(Self {
            q: teacher_soft_labels(tape.value(views.h), c, T::of(cfg.tau_t))?,
            q_prime: teacher_soft_labels(tape.value(views.h_prime), c, T::of(cfg.tau_t))?,
        })
    }
}

/// Per-term values of one evaluation of [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rep_u: f64,
    pub rep_s: f64,
    pub cls_u: f64,
    pub cls_s: f64,
    /// Style objective value, also reported when its weight is zero.
    pub style: f64,
    pub total: f64,
    /// Mean `|cos(z_i, v_i)|` over the first view.
    pub mean_abs_cos: f64,
}

/// `(1−λ)L_rep^u + λL_rep^s + (1−λ)L_cls^u + λL_cls^s + w·L_style`.
///
/// Terms with zero weight are not recorded on the tape, so with `w = 0`
/// the result is bitwise the baseline objective and no gradient reaches
/// the style encoder. The supervised classification and style terms are
/// averaged over both views.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    views: &BatchViews,
    prototypes: Var,
    teacher: &TeacherTargets<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    views.check(tape)?;
    let mut bd = LossBreakdown::default();
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let lam = cfg.lambda;

    let p = soft_labels(tape, views.h, prototypes, T::of(cfg.tau_s))?;
    let p_prime = soft_labels(tape, views.h_prime, prototypes, T::of(cfg.tau_s))?;

    if lam < 1.0 {
        let rep_u = unsup_contrastive(tape, views.z, views.z_prime, cfg.tau_u)?;
        let cls_u = cluster_loss(tape, p, p_prime, &teacher.q, &teacher.q_prime, cfg.eps_reg)?;
        bd.rep_u = tape.value(rep_u).item()?.as_f64();
        bd.cls_u = tape.value(cls_u).item()?.as_f64();
        terms.push((rep_u, 1.0 - lam));
        terms.push((cls_u, 1.0 - lam));
    }
    if lam > 0.0 {
        let rows = views.labeled_rows();
        if rows.is_empty() {
            return Err(Error::DegenerateBatch("batch has no labeled rows".into()));
        }
        let classes = views.labeled_classes();
        let zl = tape.select_rows(views.z, &rows)?;
        let zpl = tape.select_rows(views.z_prime, &rows)?;
        let rep_s = sup_contrastive(tape, zl, zpl, &classes, cfg.tau_c)?;
        let pl = tape.select_rows(p, &rows)?;
        let ppl = tape.select_rows(p_prime, &rows)?;
        let a = ce_supervised(tape, pl, &classes)?;
        let b = ce_supervised(tape, ppl, &classes)?;
        let cls_s = tape.add(a, b)?;
        let cls_s = tape.scale(cls_s, T::of(0.5))?;
        bd.rep_s = tape.value(rep_s).item()?.as_f64();
        bd.cls_s = tape.value(cls_s).item()?.as_f64();
        terms.push((rep_s, lam));
        terms.push((cls_s, lam));
    }

    if let (Some(v), Some(v_prime)) = (views.v, views.v_prime) {
        bd.mean_abs_cos = mean_abs_cosine(tape.value(views.z), tape.value(v))?;
        if cfg.w > 0.0 {
            let a = style_removal(tape, views.z, v, cfg)?;
            let b = style_removal(tape, views.z_prime, v_prime, cfg)?;
            let s = tape.add(a, b)?;
            let s = tape.scale(s, T::of(0.5))?;
            bd.style = tape.value(s).item()?.as_f64();
            terms.push((s, cfg.w));
        } else {
            bd.style = detached_style_value(tape, views, cfg).unwrap_or(f64::NAN);
        }
    } else {
        bd.mean_abs_cos = f64::NAN;
        bd.style = f64::NAN;
    }

    let mut total: Option<Var> = None;
    for (term, weight) in terms {
        let scaled = tape.scale(term, T::of(weight))?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("objective has no active terms".into()))?;
    bd.total = tape.value(total).item()?.as_f64();
    Ok((total, bd))
}

fn detached_style_value<T: Scalar>(tape: &Tape<T>, views: &BatchViews, cfg: &LossConfig) -> Result<f64> {
    let (Some(v), Some(vp)) = (views.v, views.v_prime) else {
        return Err(Error::Config("no style embeddings".into()));
    };
    let mut scratch = Tape::new();
    let z = scratch.constant(tape.value(views.z).detached());
    let zp = scratch.constant(tape.value(views.z_prime).detached());
    let v = scratch.constant(tape.value(v).detached());
    let vp = scratch.constant(tape.value(vp).detached());
    let a = style_removal(&mut scratch, z, v, cfg)?;
    let b = style_removal(&mut scratch, zp, vp, cfg)?;
    Ok(0.5 * (scratch.value(a).item()?.as_f64() + scratch.value(b).item()?.as_f64()))
}

/// Mean `|cos|` between matching rows; zero-norm rows count as 0.
pub fn mean_abs_cosine<T: Scalar>(z: &Tensor<T>, v: &Tensor<T>) -> Result<f64> {
    let (m, _) = z.matrix_dims()?;
    if z.dims() != v.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z.dims(), v.dims())));
    }
    let mut acc = 0.0;
    for i in 0..m {
        let (a, b) = (z.row(i), v.row(i));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
        let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if na > 1e-12 && nb > 1e-12 {
            acc += (dot / (na * nb)).abs();
        }
    }
    Ok(acc / m as f64)
}
