//! Training loops: alternating (classifier head vs. everything else), joint
//! and a cross-entropy-only baseline.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{concatenate, s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::pairs::{eligible_factors, sample_pair_tuples};
use crate::forge::{Dataset, FactorTuple, PairBatch};
use crate::invariance::{
    class_average_sample_graph, mix_rows, supcon_graph, total_loss, LossBreakdown, LossWeights,
};
use crate::loss::{cross_entropy_graph, distance_graph, distance_rows, elbo_graph, Distance};
use crate::optim::{Adam, AdamConfig};
use crate::swap::{
    curriculum_step, plan_batch, swap_mask, CurriculumConfig, CurriculumState, DivergenceConfig,
};
use crate::tape::{sigmoid, Gradients, Graph, Mat, Var};
use crate::vae::{reparameterize_graph, standard_normal, CodeBatch, ParamGroup, Vae};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Classifier head on detached `μ_p`, then the generative objective.
    #[default]
    Alternating,
    /// One optimizer over the full objective including cross-entropy.
    Joint,
    /// Encoder and classifier on cross-entropy alone.
    CeOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub weights: LossWeights,
    pub distance: Distance,
    pub divergence: DivergenceConfig,
    pub curriculum: CurriculumConfig,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub pairs_per_batch: usize,
    /// Exclude the class factor from the factors a pair may change.
    pub pairs_fix_class: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Alternating,
            weights: LossWeights::default(),
            distance: Distance::Bce,
            divergence: DivergenceConfig::default(),
            curriculum: CurriculumConfig::default(),
            optimizer: AdamConfig::default(),
            steps: 2000,
            pairs_per_batch: 64,
            pairs_fix_class: false,
        }
    }
}

/// Per-step knobs shared by the step functions.
#[derive(Clone, Copy, Debug)]
pub struct StepSettings {
    pub weights: LossWeights,
    pub distance: Distance,
    pub divergence: DivergenceConfig,
    /// Number of nuisance dimensions kept out of the swap.
    pub keep: usize,
    /// Upper bound on swapped dimensions; `None` swaps all non-kept ones.
    pub num_swap: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub k: usize,
    pub num_swap: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Graph nodes of the generative objective.
pub struct GenerativeTerms {
    pub mu: Var,
    pub recon: Var,
    pub kl: Var,
    pub disentangle: Var,
    pub supcon: Var,
    pub zp: Var,
}

/// Builds every generative term on a pair batch. `eps` is the reparameterization
/// noise; it travels with its coordinates through the swap and is reused for
/// the class-average sample.
pub fn generative_graph(
    model: &Vae,
    g: &mut Graph,
    bound: &crate::vae::Bound,
    batch: &PairBatch,
    settings: &StepSettings,
    eps: &Mat,
) -> Result<GenerativeTerms> {
    let part = model.partition();
    let pairs = batch.num_pairs();
    if pairs == 0 || batch.images.nrows() != 2 * pairs {
        return Err(Error::Argument("pair batch must hold 2P rows with P >= 1".into()));
    }
    let x = g.constant(batch.images.clone());
    let (mu, log_var) = model.encode_graph(g, bound, x);
    let z = reparameterize_graph(g, mu, log_var, eps);
    let logits = model.decode_graph(g, bound, z);
    let (recon, kl) = elbo_graph(g, &batch.images, logits, mu, log_var);
    let target = g.value(logits).mapv(sigmoid);

    let code = CodeBatch::new(g.value(mu).clone(), g.value(log_var).clone(), part)?;
    let plans = plan_batch(&code, settings.keep, settings.num_swap, settings.divergence)?;
    let half = swap_mask(&plans, &part)?;
    let mask = concatenate(Axis(0), &[half.view(), half.view()]).expect("matching widths");
    let perm: Vec<usize> = (pairs..2 * pairs).chain(0..pairs).collect();
    let z_hat = mix_rows(g, z, &perm, Rc::new(mask));
    let hat_logits = model.decode_graph(g, bound, z_hat);
    let rows = distance_rows(g, settings.distance, hat_logits, &target);
    let total = g.sum_all(rows);
    let disentangle = g.scale(total, 1.0 / pairs as f64);

    let mu_p = g.slice_cols(mu, 0, part.dim_p);
    let lv_p = g.slice_cols(log_var, 0, part.dim_p);
    let eps_p = eps.slice(s![.., part.p_range()]).to_owned();
    let z_bar_p = class_average_sample_graph(g, mu_p, lv_p, &batch.labels, &eps_p);
    let z_n = g.slice_cols(z, part.dim_p, part.dim_n());
    let z_bar = g.concat_cols(&[z_bar_p, z_n]);
    let bar_logits = model.decode_graph(g, bound, z_bar);
    let zp = distance_graph(g, settings.distance, bar_logits, &target);

    let features = model.project_graph(g, bound, mu_p);
    let supcon = supcon_graph(g, features, &batch.labels, settings.weights.tau);
    Ok(GenerativeTerms {
        mu,
        recon,
        kl,
        disentangle,
        supcon,
        zp,
    })
}

fn weighted(g: &mut Graph, t: &GenerativeTerms, w: &LossWeights) -> Var {
    let vae = g.add(t.recon, t.kl);
    let a = g.scale(t.disentangle, w.alpha);
    let b = g.scale(t.supcon, w.beta);
    let c = g.scale(t.zp, w.gamma);
    let ab = g.add(a, b);
    let abc = g.add(ab, c);
    g.add(vae, abc)
}

fn breakdown(g: &Graph, t: &GenerativeTerms, ce: f64, w: &LossWeights) -> Result<LossBreakdown> {
    total_loss(
        LossBreakdown {
            ce,
            recon: g.scalar(t.recon),
            kl: g.scalar(t.kl),
            disentangle: g.scalar(t.disentangle),
            supcon: g.scalar(t.supcon),
            zp: g.scalar(t.zp),
            total: 0.0,
        },
        w,
    )
}

fn check_alternating_groups(generative: &Adam, classifier: &Adam) -> Result<()> {
    if classifier.groups() != [ParamGroup::Classifier] || generative.groups().contains(&ParamGroup::Classifier) {
        return Err(Error::Config(
            "alternating training needs a classifier-only optimizer and a generative optimizer".into(),
        ));
    }
    Ok(())
}

/// Cross-entropy of the classifier head on detached `μ_p`, with gradients for
/// the head only.
fn classifier_grads(model: &Vae, images: &Mat, labels: &[usize]) -> Result<(f64, Gradients)> {
    let mu_p = model.encode(images)?.mu_p();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &[ParamGroup::Classifier]);
    let zp = g.constant(mu_p);
    let logits = model.classify_graph(&mut g, &bound, zp);
    let ce = cross_entropy_graph(&mut g, logits, labels);
    let value = g.scalar(ce);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss term ce is {value}")));
    }
    Ok((value, g.backward(ce)))
}

/// Sub-step A: updates only the classifier head on cross-entropy over
/// detached `μ_p`. Returns the loss.
pub fn classifier_substep(model: &mut Vae, images: &Mat, labels: &[usize], optimizer: &mut Adam) -> Result<f64> {
    if optimizer.groups() != [ParamGroup::Classifier] {
        return Err(Error::Config("classifier sub-step needs a classifier-only optimizer".into()));
    }
    let (ce, grads) = classifier_grads(model, images, labels)?;
    optimizer.step(model.params_mut(), &grads)?;
    Ok(ce)
}

/// Sub-step B: updates encoder, decoder and projection head on
/// `L_VAE + α·L_dis + β·L_Sup + γ·L_Zp`. The returned breakdown has `ce = 0`.
pub fn generative_substep(
    model: &mut Vae,
    batch: &PairBatch,
    optimizer: &mut Adam,
    settings: &StepSettings,
    eps: &Mat,
) -> Result<LossBreakdown> {
    if optimizer.groups().contains(&ParamGroup::Classifier) {
        return Err(Error::Config("generative sub-step must not own the classifier".into()));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &ParamGroup::GENERATIVE);
    let terms = generative_graph(model, &mut g, &bound, batch, settings, eps)?;
    let objective = weighted(&mut g, &terms, &settings.weights);
    let report = breakdown(&g, &terms, 0.0, &settings.weights)?;
    let grads = g.backward(objective);
    optimizer.step(model.params_mut(), &grads)?;
    Ok(report)
}

/// One alternating iteration: sub-step A then sub-step B, both computed from
/// the parameters at entry. Nothing is updated if any term is not finite.
pub fn alternate_step(
    model: &mut Vae,
    batch: &PairBatch,
    generative: &mut Adam,
    classifier: &mut Adam,
    settings: &StepSettings,
    eps: &Mat,
) -> Result<LossBreakdown> {
    check_alternating_groups(generative, classifier)?;
    let (ce, grads_a) = classifier_grads(model, &batch.images, &batch.labels)?;
    let mut report = generative_substep(model, batch, generative, settings, eps)?;
    // Taken before sub-step B moved the encoder.
    classifier.step(model.params_mut(), &grads_a)?;
    report.ce = ce;
    report.total += ce;
    Ok(report)
}

/// Full objective under a single optimizer over every parameter group.
pub fn joint_step(
    model: &mut Vae,
    batch: &PairBatch,
    optimizer: &mut Adam,
    settings: &StepSettings,
    eps: &Mat,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &ParamGroup::ALL);
    let terms = generative_graph(model, &mut g, &bound, batch, settings, eps)?;
    let gen = weighted(&mut g, &terms, &settings.weights);
    let mu_p = g.slice_cols(terms.mu, 0, model.partition().dim_p);
    let logits = model.classify_graph(&mut g, &bound, mu_p);
    let ce = cross_entropy_graph(&mut g, logits, &batch.labels);
    let objective = g.add(gen, ce);
    let report = breakdown(&g, &terms, g.scalar(ce), &settings.weights)?;
    let grads = g.backward(objective);
    optimizer.step(model.params_mut(), &grads)?;
    Ok(report)
}

/// Cross-entropy on `classify(encode(x).μ_p)`; only encoder and classifier move.
pub fn ce_only_step(model: &mut Vae, images: &Mat, labels: &[usize], optimizer: &mut Adam) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &[ParamGroup::Encoder, ParamGroup::Classifier]);
    let x = g.constant(images.clone());
    let logits = model.logits_graph(&mut g, &bound, x);
    let ce = cross_entropy_graph(&mut g, logits, labels);
    let report = total_loss(
        LossBreakdown {
            ce: g.scalar(ce),
            ..Default::default()
        },
        &LossWeights::default(),
    )?;
    let grads = g.backward(ce);
    optimizer.step(model.params_mut(), &grads)?;
    Ok(report)
}

/// Draws rendered pair batches from a dataset's training split, caching
/// rendered rows by factor tuple.
pub struct PairSource {
    dataset: Dataset,
    cache: HashMap<FactorTuple, Arc<Vec<f64>>>,
    eligible: usize,
    fix_class: bool,
}

impl PairSource {
    pub fn new(dataset: Dataset, fix_class: bool) -> Result<Self> {
        let eligible = eligible_factors(&dataset.grid, &dataset.train, fix_class).len();
        if eligible == 0 {
            return Err(Error::Config("no factor can vary within the training split".into()));
        }
        Ok(Self {
            dataset,
            cache: HashMap::new(),
            eligible,
            fix_class,
        })
    }

    pub fn eligible(&self) -> usize {
        self.eligible
    }

    fn row(&mut self, t: &FactorTuple) -> Result<Arc<Vec<f64>>> {
        if let Some(r) = self.cache.get(t) {
            return Ok(r.clone());
        }
        let img = self.dataset.grid.render(t)?;
        let row = Arc::new(img.into_raw_vec_and_offset().0);
        self.cache.insert(t.clone(), row.clone());
        Ok(row)
    }

    pub fn next_batch(&mut self, pairs: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<PairBatch> {
        let k = k.min(self.eligible);
        let len = self.dataset.image_shape().len();
        let mut images = Mat::zeros((2 * pairs, len));
        let mut labels = vec![0; 2 * pairs];
        for i in 0..pairs {
            let (v_l, v_m, _) =
                sample_pair_tuples(&self.dataset.grid, &self.dataset.train, k, self.fix_class, rng)?;
            for (row, t) in [(i, &v_l), (pairs + i, &v_m)] {
                let r = self.row(t)?;
                images.row_mut(row).assign(&ndarray::ArrayView1::from(r.as_slice()));
                labels[row] = self.dataset.grid.label(t);
            }
        }
        Ok(PairBatch { images, labels, k })
    }
}

/// Owns a model, its optimizers and the curricula for one training run.
pub struct Trainer {
    model: Vae,
    config: TrainConfig,
    primary: Adam,
    classifier: Option<Adam>,
    curriculum: CurriculumState,
    noise: ChaCha8Rng,
    data: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Vae, config: TrainConfig, seed: u64) -> Result<Self> {
        config.weights.validate()?;
        if config.pairs_per_batch == 0 {
            return Err(Error::Config("pairs_per_batch must be positive".into()));
        }
        let (primary, classifier) = match config.mode {
            TrainMode::Alternating => (
                Adam::new(config.optimizer.clone(), &ParamGroup::GENERATIVE)?,
                Some(Adam::new(config.optimizer.clone(), &[ParamGroup::Classifier])?),
            ),
            TrainMode::Joint => (Adam::new(config.optimizer.clone(), &ParamGroup::ALL)?, None),
            TrainMode::CeOnly => (
                Adam::new(config.optimizer.clone(), &[ParamGroup::Encoder, ParamGroup::Classifier])?,
                None,
            ),
        };
        let curriculum = CurriculumState::new(config.curriculum, model.partition().dim_n())?;
        let mut data = ChaCha8Rng::seed_from_u64(seed);
        data.set_stream(1);
        Ok(Self {
            model,
            config,
            primary,
            classifier,
            curriculum,
            noise: ChaCha8Rng::seed_from_u64(seed),
            data,
        })
    }

    pub fn model(&self) -> &Vae {
        &self.model
    }

    pub fn into_model(self) -> Vae {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn curriculum(&self) -> &CurriculumState {
        &self.curriculum
    }

    /// Current `(num_swap, k_effective)`.
    pub fn schedule(&self) -> (usize, usize) {
        curriculum_step(&self.curriculum)
    }

    /// One optimization step on `batch`. On error the model is untouched.
    pub fn step(&mut self, batch: &PairBatch) -> Result<StepReport> {
        let (num_swap, _) = self.schedule();
        let part = self.model.partition();
        let settings = StepSettings {
            weights: self.config.weights,
            distance: self.config.distance,
            divergence: self.config.divergence,
            keep: batch.k.min(part.dim_n()),
            num_swap: self.config.curriculum.amount.then_some(num_swap),
        };
        let loss = match self.config.mode {
            TrainMode::Alternating => {
                let eps = standard_normal((batch.images.nrows(), part.d_z()), &mut self.noise);
                let cls = self.classifier.as_mut().expect("alternating has a classifier optimizer");
                alternate_step(&mut self.model, batch, &mut self.primary, cls, &settings, &eps)?
            }
            TrainMode::Joint => {
                let eps = standard_normal((batch.images.nrows(), part.d_z()), &mut self.noise);
                joint_step(&mut self.model, batch, &mut self.primary, &settings, &eps)?
            }
            TrainMode::CeOnly => ce_only_step(&mut self.model, &batch.images, &batch.labels, &mut self.primary)?,
        };
        let report = StepReport {
            step: self.curriculum.step,
            k: batch.k,
            num_swap: settings.num_swap.unwrap_or(part.dim_n() - settings.keep),
            lr: self.primary.lr(),
            loss,
        };
        self.curriculum.advance();
        Ok(report)
    }

    /// Runs `config.steps` steps on pairs drawn from `source`.
    pub fn fit(
        &mut self,
        source: &mut PairSource,
        mut on_step: impl FnMut(&StepReport, &Vae) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..self.config.steps {
            let (_, k_eff) = self.schedule();
            let batch = source.next_batch(self.config.pairs_per_batch, k_eff, &mut self.data)?;
            let report = self.step(&batch)?;
            on_step(&report, &self.model)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::ImageShape;
    use crate::testutil::{assert_grad_close, numeric_grad};
    use crate::vae::{LatentPartition, ModelConfig};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image: ImageShape::new(1, 4, 4),
            partition: LatentPartition::new(2, 1, 1).unwrap(),
            num_classes: 2,
            conv_channels: vec![2],
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            classifier_hidden: vec![],
            projection_hidden: 4,
            projection_dim: 3,
            log_var_bound: 10.0,
            center_input: false,
        }
    }

    fn batch(seed: u64) -> PairBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Mat::from_shape_simple_fn((6, 16), || rng.random::<f64>());
        PairBatch {
            images,
            labels: vec![0, 1, 0, 0, 1, 1],
            k: 1,
        }
    }

    fn settings() -> StepSettings {
        StepSettings {
            weights: LossWeights::default(),
            distance: Distance::Bce,
            divergence: DivergenceConfig::default(),
            keep: 1,
            num_swap: None,
        }
    }

    #[test]
    fn alternating_substeps_touch_only_their_groups() {
        let mut model = Vae::new(tiny(), 3).unwrap();
        let b = batch(1);
        let eps = standard_normal((6, 4), &mut ChaCha8Rng::seed_from_u64(2));
        let mut gen = Adam::new(AdamConfig::default(), &ParamGroup::GENERATIVE).unwrap();
        let mut cls = Adam::new(AdamConfig::default(), &[ParamGroup::Classifier]).unwrap();

        let enc = model.params().snapshot(ParamGroup::Encoder);
        let dec = model.params().snapshot(ParamGroup::Decoder);
        let head = model.params().snapshot(ParamGroup::Classifier);
        classifier_substep(&mut model, &b.images, &b.labels, &mut cls).unwrap();
        assert_eq!(model.params().snapshot(ParamGroup::Encoder), enc);
        assert_eq!(model.params().snapshot(ParamGroup::Decoder), dec);
        let head_after = model.params().snapshot(ParamGroup::Classifier);
        assert_ne!(head_after, head);

        generative_substep(&mut model, &b, &mut gen, &settings(), &eps).unwrap();
        assert_eq!(model.params().snapshot(ParamGroup::Classifier), head_after);
        assert_ne!(model.params().snapshot(ParamGroup::Encoder), enc);
    }

    #[test]
    fn group_mismatch_is_config_error() {
        let mut model = Vae::new(tiny(), 3).unwrap();
        let eps = Mat::zeros((6, 4));
        let mut all = Adam::new(AdamConfig::default(), &ParamGroup::ALL).unwrap();
        let mut cls = Adam::new(AdamConfig::default(), &[ParamGroup::Classifier]).unwrap();
        let err = alternate_step(&mut model, &batch(1), &mut all, &mut cls, &settings(), &eps);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn breakdown_sums_to_graph_total() {
        let model = Vae::new(tiny(), 5).unwrap();
        let b = batch(2);
        let eps = standard_normal((6, 4), &mut ChaCha8Rng::seed_from_u64(3));
        let w = LossWeights {
            alpha: 0.3,
            beta: 2.0,
            gamma: 0.7,
            tau: 0.2,
        };
        let s = StepSettings { weights: w, ..settings() };
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &ParamGroup::GENERATIVE);
        let t = generative_graph(&model, &mut g, &bound, &b, &s, &eps).unwrap();
        let total = weighted(&mut g, &t, &w);
        let report = breakdown(&g, &t, 0.0, &w).unwrap();
        assert!((report.total - g.scalar(total)).abs() < 1e-6);
        for v in report.values() {
            assert!(v.is_finite());
        }
        assert!(report.disentangle >= -1e-9 && report.zp >= -1e-9 && report.kl >= 0.0);
    }

    #[test]
    fn identical_pair_with_no_swap_has_zero_disentangle_loss() {
        let model = Vae::new(tiny(), 5).unwrap();
        let mut b = batch(2);
        // Pairs are copies of each other, so exchanging z_p changes nothing.
        for i in 0..3 {
            let row = b.images.row(i).to_owned();
            b.images.row_mut(3 + i).assign(&row);
        }
        let mut eps = standard_normal((6, 4), &mut ChaCha8Rng::seed_from_u64(3));
        for i in 0..3 {
            let row = eps.row(i).to_owned();
            eps.row_mut(3 + i).assign(&row);
        }
        let s = StepSettings { keep: 2, ..settings() };
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &[]);
        let t = generative_graph(&model, &mut g, &bound, &b, &s, &eps).unwrap();
        assert!(g.scalar(t.disentangle).abs() < 1e-9);
    }

    /// Gradient of the disentangle term with respect to encoder outputs.
    #[test]
    fn disentangle_gradient_matches_finite_differences() {
        let model = Vae::new(tiny(), 9).unwrap();
        let part = model.partition();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu0 = Mat::from_shape_simple_fn((4, 4), || rng.random::<f64>() * 2.0 - 1.0);
        let lv0 = Mat::from_shape_simple_fn((4, 4), || rng.random::<f64>() * 0.5 - 0.25);
        let eps = standard_normal((4, 4), &mut rng);
        let target = Mat::from_shape_simple_fn((4, 16), || rng.random::<f64>());
        // The swap mask is fixed so the objective is smooth in the codes.
        let half = ndarray::array![[true, true, false, true], [true, true, true, false]];
        let mask = Rc::new(concatenate(Axis(0), &[half.view(), half.view()]).unwrap());
        let eval = |mu: &Mat, lv: &Mat, g: &mut Graph| {
            let bound = model.bind(g, &[]);
            let m = g.input(mu.clone());
            let v = g.input(lv.clone());
            let z = reparameterize_graph(g, m, v, &eps);
            let z_hat = mix_rows(g, z, &[2, 3, 0, 1], mask.clone());
            let logits = model.decode_graph(g, &bound, z_hat);
            let rows = distance_rows(g, Distance::Bce, logits, &target);
            let s = g.sum_all(rows);
            (g.scale(s, 0.5), m, v)
        };
        let mut g = Graph::new();
        let (loss, m, v) = eval(&mu0, &lv0, &mut g);
        let grads = g.backward(loss);
        let nm = numeric_grad(&mu0, |x| {
            let mut g = Graph::new();
            let (l, _, _) = eval(x, &lv0, &mut g);
            g.scalar(l)
        });
        let nv = numeric_grad(&lv0, |x| {
            let mut g = Graph::new();
            let (l, _, _) = eval(&mu0, x, &mut g);
            g.scalar(l)
        });
        assert_grad_close(grads.get(m).unwrap(), &nm, 1e-4);
        assert_grad_close(grads.get(v).unwrap(), &nv, 1e-4);
        assert_eq!(part.d_z(), 4);
    }

    #[test]
    fn joint_and_alternating_trajectories_differ() {
        let b = batch(7);
        let run = |mode| {
            let cfg = TrainConfig {
                mode,
                pairs_per_batch: 3,
                curriculum: CurriculumConfig {
                    k_max: 1,
                    ..Default::default()
                },
                ..Default::default()
            };
            let mut t = Trainer::new(Vae::new(tiny(), 1).unwrap(), cfg, 1).unwrap();
            for _ in 0..3 {
                t.step(&b).unwrap();
            }
            t.into_model().params().clone()
        };
        let alt = run(TrainMode::Alternating);
        assert_ne!(alt, run(TrainMode::Joint));
        assert_eq!(alt, run(TrainMode::Alternating));
        let ce = run(TrainMode::CeOnly);
        let init = Vae::new(tiny(), 1).unwrap();
        assert_eq!(
            ce.snapshot(ParamGroup::Decoder),
            init.params().snapshot(ParamGroup::Decoder)
        );
    }
}
