//! White-box attacks through `classify(encode(x).mu_p)`.

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, config, Result};
use crate::tape::{Graph, Mat, Var};
use crate::vae::{argmax, Vae};

/// Anything with differentiable logits of flat inputs in `[0, 1]`.
pub trait Classifier {
    fn input_len(&self) -> usize;
    fn logits_graph(&self, g: &mut Graph, x: Var) -> Var;
}

impl Classifier for Vae {
    fn input_len(&self) -> usize {
        self.config().image.len()
    }

    fn logits_graph(&self, g: &mut Graph, x: Var) -> Var {
        let b = self.bind(g, &[]);
        Vae::logits_graph(self, g, &b, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in pixel units.
    pub epsilon: f64,
    pub pgd_steps: usize,
    /// Defaults to `epsilon / 10`.
    pub pgd_step_size: Option<f64>,
    pub random_start: bool,
    pub cw_c: f64,
    pub cw_iters: usize,
    pub cw_lr: f64,
    pub cw_kappa: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon: 0.1,
            pgd_steps: 40,
            pgd_step_size: None,
            random_start: true,
            cw_c: 1.0,
            cw_iters: 200,
            cw_lr: 0.01,
            cw_kappa: 0.0,
        }
    }
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self { kind: AttackKind::Fgsm, epsilon, ..Self::default() }
    }

    pub fn pgd(epsilon: f64) -> Self {
        Self { kind: AttackKind::Pgd, epsilon, ..Self::default() }
    }

    pub fn cw(c: f64) -> Self {
        Self { kind: AttackKind::Cw, cw_c: c, ..Self::default() }
    }

    pub fn step_size(&self) -> f64 {
        self.pgd_step_size.unwrap_or(self.epsilon / 10.0)
    }

    /// Sweep axis value: ε for FGSM/PGD, c for C&W.
    pub fn strength(&self) -> f64 {
        match self.kind {
            AttackKind::Cw => self.cw_c,
            _ => self.epsilon,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => format!("fgsm eps={}", self.epsilon),
            AttackKind::Pgd => format!(
                "pgd eps={} steps={} step={} rs={}",
                self.epsilon,
                self.pgd_steps,
                self.step_size(),
                self.random_start
            ),
            AttackKind::Cw => format!("cw c={} iters={} lr={}", self.cw_c, self.cw_iters, self.cw_lr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttackKind::Fgsm | AttackKind::Pgd => {
                check_epsilon(self.epsilon)?;
                if self.kind == AttackKind::Pgd {
                    if self.pgd_steps == 0 {
                        return Err(config("pgd needs at least one step"));
                    }
                    let step = self.step_size();
                    if !(step >= 0.0) || step > self.epsilon {
                        return Err(config(format!("pgd step size {step} exceeds epsilon {}", self.epsilon)));
                    }
                }
            }
            AttackKind::Cw => {
                if !(self.cw_c > 0.0) || !self.cw_c.is_finite() {
                    return Err(config(format!("cw constant must be positive, got {}", self.cw_c)));
                }
                if self.cw_iters == 0 || !(self.cw_lr > 0.0) || !(self.cw_kappa >= 0.0) {
                    return Err(config("cw needs iters ≥ 1, lr > 0 and kappa ≥ 0"));
                }
            }
        }
        Ok(())
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(argument(format!("epsilon must lie in [0, 1], got {eps}")));
    }
    Ok(())
}

fn check_batch(model: &impl Classifier, x: &Mat, y: &[usize]) -> Result<()> {
    if x.ncols() != model.input_len() {
        return Err(argument(format!("inputs have {} values, model expects {}", x.ncols(), model.input_len())));
    }
    if x.nrows() != y.len() {
        return Err(argument(format!("{} inputs but {} labels", x.nrows(), y.len())));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(argument("inputs must lie in [0, 1]"));
    }
    Ok(())
}

fn onehot(labels: &[usize], classes: usize) -> Mat {
    let mut m = Mat::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        m[[i, y]] = 1.0;
    }
    m
}

/// Gradient of the summed cross-entropy with respect to the inputs.
pub fn input_gradient(model: &impl Classifier, x: &Mat, y: &[usize]) -> Result<(Mat, f64)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let logits = model.logits_graph(&mut g, xv);
    let classes = g.shape(logits).1;
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(argument(format!("label {bad} out of range for {classes} classes")));
    }
    let ls = g.log_softmax(logits);
    let mask = g.constant(onehot(y, classes));
    let picked = g.mul(ls, mask);
    let total = g.sum_all(picked);
    let loss = g.scale(total, -1.0);
    let grads = g.backward(loss);
    let grad = grads.get(xv).cloned().unwrap_or_else(|| Mat::zeros(x.dim()));
    Ok((grad, g.scalar(loss)))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves `v` toward `x0` until `|v − x0| ≤ eps` holds in floating point.
fn within_budget(v: f64, x0: f64, eps: f64) -> f64 {
    let mut v = v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    while v - x0 > eps {
        v = v.next_down();
    }
    while x0 - v > eps {
        v = v.next_up();
    }
    v
}

/// One signed-gradient step from `cur`, projected onto the ε-ball around `x0` and `[0, 1]`.
fn signed_step(x0: &Mat, cur: &Mat, grad: &Mat, step: f64, eps: f64) -> Mat {
    let mut out = cur.clone();
    ndarray::Zip::from(&mut out).and(x0).and(grad).for_each(|o, &x, &g| {
        *o = within_budget(*o + step * sign(g), x, eps);
    });
    out
}

/// `clip(x + ε·sign(∇_x CE), 0, 1)`.
pub fn fgsm(model: &impl Classifier, x: &Mat, y: &[usize], eps: f64) -> Result<Mat> {
    check_epsilon(eps)?;
    check_batch(model, x, y)?;
    let (grad, _) = input_gradient(model, x, y)?;
    Ok(signed_step(x, x, &grad, eps, eps))
}

/// Iterated signed steps with projection after every step.
#[allow(clippy::too_many_arguments)]
pub fn pgd(
    model: &impl Classifier,
    x: &Mat,
    y: &[usize],
    eps: f64,
    steps: usize,
    step_size: f64,
    random_start: bool,
    rng: &mut impl Rng,
) -> Result<Mat> {
    check_epsilon(eps)?;
    if steps == 0 {
        return Err(config("pgd needs at least one step"));
    }
    if !(step_size >= 0.0) || step_size > eps {
        return Err(config(format!("pgd step size {step_size} exceeds epsilon {eps}")));
    }
    check_batch(model, x, y)?;
    let mut cur = x.clone();
    if random_start && eps > 0.0 {
        cur.zip_mut_with(x, |c, &x0| *c = within_budget(x0 + rng.random_range(-eps..=eps), x0, eps));
    }
    for _ in 0..steps {
        let (grad, _) = input_gradient(model, &cur, y)?;
        cur = signed_step(x, &cur, &grad, step_size, eps);
    }
    Ok(cur)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CwResult {
    pub adversarial: Mat,
    /// Rows where no misclassifying perturbation was found; those rows hold the original input.
    pub failed: Vec<bool>,
}

/// Carlini–Wagner L2 with a fixed constant: minimizes
/// `‖δ‖² + c·max(Z_y − max_{j≠y} Z_j, −κ)` in tanh space with Adam and keeps
/// the smallest misclassifying perturbation seen.
pub fn cw_l2(model: &impl Classifier, x: &Mat, y: &[usize], c: f64, iters: usize, lr: f64, kappa: f64) -> Result<CwResult> {
    let cfg = AttackConfig { kind: AttackKind::Cw, cw_c: c, cw_iters: iters, cw_lr: lr, cw_kappa: kappa, ..Default::default() };
    cfg.validate()?;
    check_batch(model, x, y)?;
    let (n, d) = x.dim();
    let squeeze = 1.0 - 1e-6;
    let mut w = x.mapv(|v| ((2.0 * v - 1.0) * squeeze).atanh());
    let (mut m1, mut m2) = (Mat::zeros((n, d)), Mat::zeros((n, d)));
    let (b1, b2, adam_eps) = (0.9, 0.999, 1e-8);
    let mut best = x.clone();
    let mut best_l2 = vec![f64::INFINITY; n];
    for t in 1..=iters {
        let mut g = Graph::new();
        let wv = g.input(w.clone());
        let th = g.tanh(wv);
        let shifted = g.add_scalar(th, 1.0);
        let xp = g.scale(shifted, 0.5);
        let x0 = g.constant(x.clone());
        let diff = g.sub(xp, x0);
        let sq = g.square(diff);
        let l2 = g.sum_cols(sq);
        let logits = model.logits_graph(&mut g, xp);
        let z = g.value(logits).clone();
        let classes = z.ncols();
        // subgradient of Z_y − max_{j≠y} Z_j
        let mut pick = Mat::zeros((n, classes));
        for i in 0..n {
            let other = (0..classes)
                .filter(|&j| j != y[i])
                .fold(None, |b: Option<usize>, j| match b {
                    Some(k) if z[[i, k]] >= z[[i, j]] => b,
                    _ => Some(j),
                });
            if let Some(j) = other {
                pick[[i, j]] = -1.0;
                pick[[i, y[i]]] = 1.0;
            }
        }
        let pick = g.constant(pick);
        let gap = g.mul(logits, pick);
        let margin = g.sum_cols(gap);
        let shifted_margin = g.add_scalar(margin, kappa);
        let hinge = g.relu(shifted_margin);
        let weighted = g.scale(hinge, c);
        let per_row = g.add(l2, weighted);
        let loss = g.sum_all(per_row);

        let xp_val = g.value(xp).clone();
        let l2_val = g.value(l2).clone();
        for i in 0..n {
            let pred = argmax(z.row(i).iter().copied());
            if pred != y[i] && l2_val[[i, 0]] < best_l2[i] {
                best_l2[i] = l2_val[[i, 0]];
                best.row_mut(i).assign(&xp_val.row(i));
            }
        }
        if t == iters {
            break;
        }
        let grads = g.backward(loss);
        let Some(gw) = grads.get(wv) else { break };
        m1 = &m1 * b1 + &(gw * (1.0 - b1));
        m2 = &m2 * b2 + &(gw.mapv(|v| v * v) * (1.0 - b2));
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        ndarray::Zip::from(&mut w).and(&m1).and(&m2).for_each(|w, &a, &b| {
            *w -= lr * (a / c1) / ((b / c2).sqrt() + adam_eps);
        });
    }
    let failed = best_l2.iter().map(|v| !v.is_finite()).collect();
    Ok(CwResult { adversarial: best, failed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: AttackKind,
    pub label: String,
    pub strength: f64,
    pub clean_accuracy: f64,
    pub attacked_accuracy: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
    /// C&W rows where no adversarial example was found.
    pub failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
}

/// Slack for "attacked accuracy ≤ clean accuracy" before a warning.
pub const ACCURACY_SLACK: f64 = 0.01;

fn predictions(model: &impl Classifier, x: &Mat) -> Vec<usize> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let logits = model.logits_graph(&mut g, xv);
    g.value(logits).rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
}

/// Runs one attack on a batch, returning adversarial inputs and C&W failure count.
pub fn run_attack(model: &impl Classifier, x: &Mat, y: &[usize], cfg: &AttackConfig, rng: &mut impl Rng) -> Result<(Mat, usize)> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Fgsm => Ok((fgsm(model, x, y, cfg.epsilon)?, 0)),
        AttackKind::Pgd => {
            Ok((pgd(model, x, y, cfg.epsilon, cfg.pgd_steps, cfg.step_size(), cfg.random_start, rng)?, 0))
        }
        AttackKind::Cw => {
            let r = cw_l2(model, x, y, cfg.cw_c, cfg.cw_iters, cfg.cw_lr, cfg.cw_kappa)?;
            let failures = r.failed.iter().filter(|&&f| f).count();
            Ok((r.adversarial, failures))
        }
    }
}

/// Clean and attacked accuracy for every config, processed in chunks of `batch` rows.
///
/// Config `i` draws its random starts from stream `i` of a generator seeded
/// with `seed`, so rows are reproducible and independent of config order.
pub fn evaluate_attacks(
    model: &impl Classifier,
    x: &Mat,
    y: &[usize],
    configs: &[AttackConfig],
    batch: usize,
    seed: u64,
) -> Result<AttackReport> {
    if x.nrows() == 0 {
        return Err(argument("attack evaluation needs at least one sample"));
    }
    check_batch(model, x, y)?;
    for cfg in configs {
        cfg.validate()?;
    }
    let batch = batch.max(1);
    let n = x.nrows() as f64;
    let mut clean_correct = 0usize;
    for (start, chunk) in x.axis_chunks_iter(Axis(0), batch).enumerate() {
        let off = start * batch;
        let preds = predictions(model, &chunk.to_owned());
        clean_correct += preds.iter().enumerate().filter(|&(i, &p)| p == y[off + i]).count();
    }
    let clean_accuracy = clean_correct as f64 / n;
    let mut rows = Vec::with_capacity(configs.len());
    for (ci, cfg) in configs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        let (mut correct, mut linf, mut l2, mut failures) = (0usize, 0.0, 0.0, 0usize);
        for start in (0..x.nrows()).step_by(batch) {
            let end = (start + batch).min(x.nrows());
            let xb: Array2<f64> = x.slice(s![start..end, ..]).to_owned();
            let yb = &y[start..end];
            let (adv, fails) = run_attack(model, &xb, yb, cfg, &mut rng)?;
            failures += fails;
            let preds = predictions(model, &adv);
            correct += preds.iter().zip(yb).filter(|(p, y)| p == y).count();
            for (a, o) in adv.rows().into_iter().zip(xb.rows()) {
                let diff: Vec<f64> = a.iter().zip(o.iter()).map(|(a, o)| a - o).collect();
                linf += diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                l2 += diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        let attacked_accuracy = correct as f64 / n;
        if attacked_accuracy > clean_accuracy + ACCURACY_SLACK {
            log::warn!("{}: attacked accuracy {attacked_accuracy} above clean {clean_accuracy}", cfg.label());
        }
        rows.push(AttackRow {
            attack: cfg.kind,
            label: cfg.label(),
            strength: cfg.strength(),
            clean_accuracy,
            attacked_accuracy,
            mean_linf: linf / n,
            mean_l2: l2 / n,
            failures,
        });
    }
    Ok(AttackReport { rows })
}

/// The ε grid used for FGSM sweeps.
pub const FGSM_SWEEP: [f64; 6] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3];

/// FGSM and PGD at ε ∈ {0.1, 0.2}, C&W at c ∈ {0.01, 0.1, 1}.
pub fn default_grid() -> Vec<AttackConfig> {
    let mut v: Vec<AttackConfig> = FGSM_SWEEP.iter().map(|&e| AttackConfig::fgsm(e)).collect();
    v.extend([0.1, 0.2].map(AttackConfig::pgd));
    v.extend([0.01, 0.1, 1.0].map(AttackConfig::cw));
    v
}


#[cfg(test)]
mod tests {
    use super::toy::Linear;
    use super::*;
    use crate::testutil::numeric_grad;
    use crate::vae::ModelConfig;
    use ndarray::array;

    fn logistic() -> Linear {
        // two-class logits (0, w·x + b) on 2-dim inputs
        Linear { w: array![[0.0, 1.5], [0.0, -2.0]], b: array![[0.0, 0.3]] }
    }

    fn ce(model: &Linear, x: &Mat, y: &[usize]) -> f64 {
        input_gradient(model, x, y).unwrap().1
    }

    #[test]
    fn fgsm_matches_linear_closed_form() {
        let m = logistic();
        let x = array![[0.4, 0.5], [0.7, 0.2]];
        let y = [1, 0];
        let eps = 0.1;
        let adv = fgsm(&m, &x, &y, eps).unwrap();
        // label 1 pushes w·x down: x − ε·sign(w); label 0 pushes it up
        let w = [1.5f64, -2.0];
        for (i, &label) in y.iter().enumerate() {
            let dir = if label == 1 { -1.0 } else { 1.0 };
            for k in 0..2 {
                let expected = x[[i, k]] + eps * dir * w[k].signum();
                assert!((adv[[i, k]] - expected).abs() < 1e-15);
            }
        }
        let softplus = |t: f64| t.exp().ln_1p();
        let closed: f64 = (0..2)
            .map(|i| {
                let s = w[0] * adv[[i, 0]] + w[1] * adv[[i, 1]] + 0.3;
                if y[i] == 1 {
                    softplus(-s)
                } else {
                    softplus(s)
                }
            })
            .sum();
        let attacked = ce(&m, &adv, &y);
        assert!((attacked - closed).abs() < 1e-12);
        assert!(attacked >= ce(&m, &x, &y));
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = logistic();
        let x = array![[0.0, 1.0], [0.3, 0.6]];
        let y = [0, 1];
        assert_eq!(fgsm(&m, &x, &y, 0.0).unwrap(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pgd(&m, &x, &y, 0.0, 5, 0.0, true, &mut rng).unwrap(), x);
    }

    #[test]
    fn pgd_single_step_equals_fgsm() {
        let m = logistic();
        let x = array![[0.05, 0.95], [0.5, 0.5]];
        let y = [1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for eps in [0.03, 0.1, 0.3] {
            let a = fgsm(&m, &x, &y, eps).unwrap();
            let b = pgd(&m, &x, &y, eps, 1, eps, false, &mut rng).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn budgets_and_ranges_hold() {
        let m = logistic();
        let x = array![[0.0, 1.0], [0.999, 0.001], [0.1234567, 0.7654321]];
        let y = [0, 1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for eps in [0.01, 0.1, 0.37] {
            let a = pgd(&m, &x, &y, eps, 7, eps / 3.0, true, &mut rng).unwrap();
            let f = fgsm(&m, &x, &y, eps).unwrap();
            for adv in [a, f] {
                for (v, o) in adv.iter().zip(x.iter()) {
                    assert!((v - o).abs() <= eps);
                    assert!((0.0..=1.0).contains(v));
                }
            }
        }
    }

    #[test]
    fn bad_arguments() {
        let m = logistic();
        let x = array![[0.5, 0.5]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(fgsm(&m, &x, &[0], -0.1), Err(crate::Error::Argument(_))));
        assert!(matches!(pgd(&m, &x, &[0], 0.1, 3, 0.2, false, &mut rng), Err(crate::Error::Config(_))));
        assert!(cw_l2(&m, &x, &[0], 0.0, 10, 0.01, 0.0).is_err());
        assert!(evaluate_attacks(&m, &Mat::zeros((0, 2)), &[], &[AttackConfig::fgsm(0.1)], 8, 0).is_err());
    }

    #[test]
    fn cw_finds_nearby_adversarial() {
        let m = logistic();
        // close to the decision boundary w·x + b = 0
        let x = array![[0.5, 0.55], [0.5, 0.45]];
        let y = [0, 1];
        assert_eq!(predictions(&m, &x), y);
        let r = cw_l2(&m, &x, &y, 1.0, 200, 0.01, 0.0).unwrap();
        let preds = predictions(&m, &r.adversarial);
        for i in 0..2 {
            assert!(!r.failed[i]);
            assert_ne!(preds[i], y[i]);
        }
        let tiny = cw_l2(&m, &x, &y, 1e-6, 50, 0.01, 0.0).unwrap();
        assert!(tiny.failed.iter().all(|&f| f));
        assert_eq!(tiny.adversarial, x);
    }

    #[test]
    fn gradient_sign_agrees_with_finite_differences() {
        let cfg = ModelConfig {
            image: crate::forge::factors::ImageShape::new(1, 8, 8),
            conv_channels: vec![4],
            encoder_hidden: vec![16],
            decoder_hidden: vec![16],
            classifier_hidden: vec![8],
            projection_hidden: 8,
            projection_dim: 4,
            num_classes: 3,
            ..ModelConfig::default()
        };
        let model = Vae::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Mat::from_shape_fn((2, 64), |_| rng.random_range(0.2..0.8));
        let y = [0, 2];
        let (grad, _) = input_gradient(&model, &x, &y).unwrap();
        let numeric = numeric_grad(&x, |xp| input_gradient(&model, xp, &y).unwrap().1);
        let considered: Vec<(f64, f64)> =
            grad.iter().zip(numeric.iter()).map(|(&a, &b)| (a, b)).filter(|(_, b)| b.abs() > 1e-8).collect();
        let agree = considered.iter().filter(|(a, b)| sign(*a) == sign(*b)).count();
        assert!(agree as f64 >= 0.99 * considered.len() as f64, "{agree}/{}", considered.len());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let m = logistic();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Mat::from_shape_fn((40, 2), |_| rng.random_range(0.0..1.0));
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let grid = vec![AttackConfig::fgsm(0.1), AttackConfig::pgd(0.1), AttackConfig::cw(0.1)];
        let a = evaluate_attacks(&m, &x, &y, &grid, 16, 7).unwrap();
        let b = evaluate_attacks(&m, &x, &y, &grid, 16, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 3);
        for r in &a.rows {
            assert!(r.mean_linf <= r.strength.max(1.0));
        }
    }
}
