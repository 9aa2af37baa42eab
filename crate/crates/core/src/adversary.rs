//! Domain-adversarial training of the linear mapping.
//!
//! A two-hidden-layer perceptron is trained to tell mapped source vectors
//! from target vectors while the mapping is trained to fool it, with label
//! smoothing on both sides, input dropout on the discriminator, plain SGD
//! for both players, and an orthogonality-restoring update on the mapping
//! after every step. Model selection runs once per epoch through the
//! unsupervised criterion; the best-criterion snapshot is returned.
//!
//! All forward/backward passes are hand-rolled in `f64` so analytic
//! gradients can be verified against central finite differences.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::embed::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::linmap::MappingMatrix;
use crate::modelsel::{validation_criterion, CriterionConfig};

const CKPT_MAGIC: &[u8; 4] = b"ADVC";
const CKPT_VERSION: u8 = 1;

/// Probability clamp for the cross-entropy value.
const P_EPS: f64 = 1e-12;

/// The discriminator: input(d) -> h1 -> h2 -> 1 with leaky-rectifier
/// activations and a sigmoid output. Input dropout uses inverted scaling at
/// train time, so evaluation applies the weights unscaled.
#[derive(Clone, Debug)]
pub struct Discriminator {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
    leaky_slope: f64,
    dropout_rate: f64,
    smoothing: f64,
}

/// Gradients for every discriminator tensor, in parameter order.
#[derive(Clone, Debug)]
pub struct DiscGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Which player's loss to evaluate: the two are label flips of each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Sources labeled source (1−s), targets labeled target (s).
    Discriminator,
    /// Labels flipped: the mapping wins when the discriminator is wrong.
    Mapping,
}

impl Discriminator {
    pub fn new(
        dim: usize,
        hidden: (usize, usize),
        leaky_slope: f64,
        dropout_rate: f64,
        smoothing: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if dim == 0 || hidden.0 == 0 || hidden.1 == 0 {
            return Err(Error::InvalidInput("zero-sized discriminator layer".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidInput(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        if !(0.0..0.5).contains(&smoothing) {
            return Err(Error::InvalidInput(format!(
                "smoothing coefficient {smoothing} outside [0, 0.5)"
            )));
        }
        // Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
        let mut init = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let w1 = init(hidden.0, dim, dim);
        let w2 = init(hidden.1, hidden.0, hidden.0);
        let w3 = init(1, hidden.1, hidden.1);
        let mut initb = |len: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array1::from_shape_fn(len, |_| rng.gen_range(-bound..bound))
        };
        let b1 = initb(hidden.0, dim);
        let b2 = initb(hidden.1, hidden.0);
        let b3 = initb(1, hidden.1);
        Ok(Discriminator {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            leaky_slope,
            dropout_rate,
            smoothing,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> (usize, usize) {
        (self.w1.nrows(), self.w2.nrows())
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    /// P(source = 1 | z) for a single vector. In train mode the input is
    /// corrupted with dropout (inverted scaling); evaluation is
    /// deterministic.
    pub fn forward(
        &self,
        z: ArrayView1<'_, f64>,
        train_mode: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<f64> {
        if z.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "discriminator input",
                expected: self.input_dim(),
                actual: z.len(),
            });
        }
        let input = z.insert_axis(ndarray::Axis(0));
        let cache = if train_mode && self.dropout_rate > 0.0 {
            self.forward_batch(input, Some(rng))
        } else {
            self.forward_batch(input, None)
        };
        Ok(cache.p[0])
    }

    /// Batched forward pass; `dropout_rng` enables input dropout.
    fn forward_batch(
        &self,
        input: ArrayView2<'_, f64>,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> ForwardCache {
        let (mask, z) = match dropout_rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 - self.dropout_rate;
                let mask = Array2::from_shape_fn(input.dim(), |_| {
                    if rng.gen::<f64>() < self.dropout_rate {
                        0.0
                    } else {
                        1.0 / keep
                    }
                });
                let z = &input * &mask;
                (Some(mask), z)
            }
            _ => (None, input.to_owned()),
        };
        let a1 = z.dot(&self.w1.t()) + &self.b1;
        let h1 = a1.mapv(|v| if v > 0.0 { v } else { self.leaky_slope * v });
        let a2 = h1.dot(&self.w2.t()) + &self.b2;
        let h2 = a2.mapv(|v| if v > 0.0 { v } else { self.leaky_slope * v });
        let logits = h2.dot(&self.w3.t()) + &self.b3;
        let p = logits.column(0).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        ForwardCache {
            mask,
            z,
            a1,
            h1,
            a2,
            h2,
            p,
        }
    }

    fn sgd_update(&mut self, grads: &DiscGradients, lr: f64) {
        self.w1.scaled_add(-lr, &grads.w1);
        self.b1.scaled_add(-lr, &grads.b1);
        self.w2.scaled_add(-lr, &grads.w2);
        self.b2.scaled_add(-lr, &grads.b2);
        self.w3.scaled_add(-lr, &grads.w3);
        self.b3.scaled_add(-lr, &grads.b3);
    }

    /// Named views of every parameter tensor, flattened row-major. Exposed
    /// for checkpoint inspection and numerical gradient verification.
    pub fn parameter_tensors(&self) -> Vec<(&'static str, Vec<f64>)> {
        vec![
            ("w1", self.w1.iter().copied().collect()),
            ("b1", self.b1.to_vec()),
            ("w2", self.w2.iter().copied().collect()),
            ("b2", self.b2.to_vec()),
            ("w3", self.w3.iter().copied().collect()),
            ("b3", self.b3.to_vec()),
        ]
    }

    /// Add `delta` to one parameter entry, addressed by tensor name and
    /// row-major flat index.
    pub fn perturb_parameter(&mut self, tensor: &str, flat_index: usize, delta: f64) {
        let slice: &mut [f64] = match tensor {
            "w1" => self.w1.as_slice_mut().expect("contiguous"),
            "b1" => self.b1.as_slice_mut().expect("contiguous"),
            "w2" => self.w2.as_slice_mut().expect("contiguous"),
            "b2" => self.b2.as_slice_mut().expect("contiguous"),
            "w3" => self.w3.as_slice_mut().expect("contiguous"),
            "b3" => self.b3.as_slice_mut().expect("contiguous"),
            other => panic!("unknown tensor {other:?}"),
        };
        slice[flat_index] += delta;
    }

    fn all_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
            && self.w3.iter().all(|v| v.is_finite())
            && self.b3.iter().all(|v| v.is_finite())
    }
}

struct ForwardCache {
    mask: Option<Array2<f64>>,
    z: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
    p: Array1<f64>,
}

/// Loss value plus gradients for both players.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub loss: f64,
    pub disc: DiscGradients,
    /// Gradient with respect to the mapping matrix.
    pub mapping: Array2<f64>,
}

/// Smoothed binary cross-entropy of the adversarial game, with analytic
/// gradients for every discriminator tensor and for the mapping.
///
/// `batch_src` holds raw (unmapped) source rows; they are mapped with `w`
/// inside. Evaluation mode: no dropout, fully deterministic. Passing a
/// dropout RNG enables train-mode input corruption.
pub fn loss_with_grads(
    disc: &Discriminator,
    w: &MappingMatrix,
    batch_src: ArrayView2<'_, f64>,
    batch_tgt: ArrayView2<'_, f64>,
    kind: LossKind,
    smoothing: f64,
    dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<LossGradients> {
    if batch_src.nrows() == 0 || batch_tgt.nrows() == 0 {
        return Err(Error::InvalidInput("empty adversarial batch".into()));
    }
    if batch_src.ncols() != w.dim() || batch_tgt.ncols() != disc.input_dim() {
        return Err(Error::Dimension {
            context: "adversarial batch",
            expected: disc.input_dim(),
            actual: batch_src.ncols().max(batch_tgt.ncols()),
        });
    }
    let n_src = batch_src.nrows();
    let n_tgt = batch_tgt.nrows();
    let mapped = w.apply(batch_src)?;
    let mut input = Array2::zeros((n_src + n_tgt, disc.input_dim()));
    input.slice_mut(s![..n_src, ..]).assign(&mapped);
    input.slice_mut(s![n_src.., ..]).assign(&batch_tgt);

    let cache = disc.forward_batch(input.view(), dropout_rng);

    // Targets: sources carry label 1−s for the discriminator, s for the
    // mapping; target-language rows are the mirror image.
    let (src_label, tgt_label) = match kind {
        LossKind::Discriminator => (1.0 - smoothing, smoothing),
        LossKind::Mapping => (smoothing, 1.0 - smoothing),
    };

    let mut loss = 0.0;
    let mut dlogits = Array1::zeros(n_src + n_tgt);
    for i in 0..n_src + n_tgt {
        let (t, weight) = if i < n_src {
            (src_label, 1.0 / n_src as f64)
        } else {
            (tgt_label, 1.0 / n_tgt as f64)
        };
        let p = cache.p[i];
        let pc = p.clamp(P_EPS, 1.0 - P_EPS);
        loss -= weight * (t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
        dlogits[i] = weight * (p - t);
    }

    // Backward pass.
    let slope = disc.leaky_slope;
    let dl = dlogits.view().insert_axis(ndarray::Axis(1)); // B x 1
    let g_w3 = dl.t().dot(&cache.h2);
    let g_b3 = Array1::from_elem(1, dlogits.sum());
    let dh2 = dl.dot(&disc.w3); // B x h2
    let da2 = &dh2 * &cache.a2.mapv(|v| if v > 0.0 { 1.0 } else { slope });
    let g_w2 = da2.t().dot(&cache.h1);
    let g_b2 = da2.sum_axis(ndarray::Axis(0));
    let dh1 = da2.dot(&disc.w2);
    let da1 = &dh1 * &cache.a1.mapv(|v| if v > 0.0 { 1.0 } else { slope });
    let g_w1 = da1.t().dot(&cache.z);
    let g_b1 = da1.sum_axis(ndarray::Axis(0));
    let mut d_input = da1.dot(&disc.w1);
    if let Some(mask) = &cache.mask {
        d_input = &d_input * mask;
    }
    // Only the mapped source rows flow into W: dW = sum_i dz_i x_i^T.
    let g_w = d_input.slice(s![..n_src, ..]).t().dot(&batch_src);

    Ok(LossGradients {
        loss,
        disc: DiscGradients {
            w1: g_w1,
            b1: g_b1,
            w2: g_w2,
            b2: g_b2,
            w3: g_w3,
            b3: g_b3,
        },
        mapping: g_w,
    })
}

/// The discriminator's smoothed cross-entropy (evaluation mode, no dropout).
pub fn discriminator_loss(
    disc: &Discriminator,
    w: &MappingMatrix,
    batch_src: ArrayView2<'_, f64>,
    batch_tgt: ArrayView2<'_, f64>,
) -> Result<f64> {
    loss_with_grads(
        disc,
        w,
        batch_src,
        batch_tgt,
        LossKind::Discriminator,
        disc.smoothing,
        None,
    )
    .map(|g| g.loss)
}

/// The mapping's loss: same cross-entropy with the labels flipped.
pub fn mapping_loss(
    disc: &Discriminator,
    w: &MappingMatrix,
    batch_src: ArrayView2<'_, f64>,
    batch_tgt: ArrayView2<'_, f64>,
) -> Result<f64> {
    loss_with_grads(
        disc,
        w,
        batch_src,
        batch_tgt,
        LossKind::Mapping,
        disc.smoothing,
        None,
    )
    .map(|g| g.loss)
}

/// Training hyper-parameters.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Divisor applied on top of the decay whenever the validation
    /// criterion drops below the best seen.
    pub lr_shrink: f64,
    /// Floor under both schedules.
    pub min_lr: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Batches are sampled uniformly from the top rows of each space.
    pub discriminator_feed_limit: usize,
    /// Discriminator updates per mapping update.
    pub dis_steps: usize,
    pub rng_seed: u64,
    pub smoothing: f64,
    /// Apply the smoothing coefficient to the mapping loss too (mirror
    /// image of the discriminator loss). Disable to train the mapping
    /// against hard labels.
    pub smooth_mapping_loss: bool,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub hidden: (usize, usize),
    /// Strength of the orthogonality-restoring update.
    pub beta: f64,
    pub criterion_queries: usize,
    pub criterion_csls_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.1,
            lr_decay: 0.95,
            lr_shrink: 2.0,
            min_lr: 1e-6,
            epochs: 5,
            iterations_per_epoch: 100_000 / 32,
            discriminator_feed_limit: 50_000,
            dis_steps: 1,
            rng_seed: 0,
            smoothing: 0.2,
            smooth_mapping_loss: true,
            leaky_slope: 0.2,
            dropout_rate: 0.1,
            hidden: (2048, 2048),
            beta: 0.01,
            criterion_queries: 10_000,
            criterion_csls_k: 10,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations_per_epoch == 0 || self.dis_steps == 0 {
            return Err(Error::InvalidInput(
                "batch_size, iterations_per_epoch and dis_steps must be positive".into(),
            ));
        }
        if self.discriminator_feed_limit == 0 {
            return Err(Error::InvalidInput(
                "discriminator_feed_limit must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !(0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return Err(Error::InvalidInput("lr_decay must be in (0, 1]".into()));
        }
        if self.lr_shrink < 1.0 {
            return Err(Error::InvalidInput("lr_shrink must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub criterion: f64,
    /// Mean discriminator loss over the epoch's steps.
    pub disc_loss: f64,
    /// Mean mapping loss over the epoch's steps.
    pub map_loss: f64,
    /// Held-out discriminator accuracy at the end of the epoch.
    pub disc_accuracy: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
}

/// Result of a training run: the best-criterion snapshot plus the
/// per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub mapping: MappingMatrix,
    pub history: Vec<EpochStats>,
}

/// Adversarial trainer owning all mutable training state. Single-threaded;
/// snapshots handed out are immutable copies. Supports exact checkpoint
/// resume: every RNG stream is serialized.
pub struct Trainer {
    cfg: TrainConfig,
    disc: Discriminator,
    w: MappingMatrix,
    best_w: MappingMatrix,
    best_criterion: f64,
    lr: f64,
    epoch: usize,
    history: Vec<EpochStats>,
    batch_rng: ChaCha12Rng,
    dropout_rng: ChaCha12Rng,
    eval_rng: ChaCha12Rng,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_normalized(space: &EmbeddingSpace, name: &str) -> Result<()> {
    for (i, row) in space.vectors().rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidInput(format!(
                "{name} space is not unit-normalized (word {:?} has norm {norm:.6})",
                space.word(i)
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(src: &EmbeddingSpace, tgt: &EmbeddingSpace, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if src.dim() != tgt.dim() {
            return Err(Error::Dimension {
                context: "adversarial training (source vs target dimension)",
                expected: src.dim(),
                actual: tgt.dim(),
            });
        }
        check_normalized(src, "source")?;
        check_normalized(tgt, "target")?;
        let mut init_rng = sub_rng(cfg.rng_seed, 0);
        let disc = Discriminator::new(
            src.dim(),
            cfg.hidden,
            cfg.leaky_slope,
            cfg.dropout_rate,
            cfg.smoothing,
            &mut init_rng,
        )?;
        let w = MappingMatrix::identity(src.dim()).with_beta(cfg.beta);
        Ok(Trainer {
            best_w: w.clone(),
            best_criterion: f64::NEG_INFINITY,
            lr: cfg.learning_rate,
            epoch: 0,
            history: Vec::new(),
            batch_rng: sub_rng(cfg.rng_seed, 1),
            dropout_rng: sub_rng(cfg.rng_seed, 2),
            eval_rng: sub_rng(cfg.rng_seed, 3),
            disc,
            w,
            cfg,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn current_mapping(&self) -> &MappingMatrix {
        &self.w
    }

    pub fn best_mapping(&self) -> &MappingMatrix {
        &self.best_w
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    fn sample_batch(
        &mut self,
        src: &EmbeddingSpace,
        tgt: &EmbeddingSpace,
    ) -> (Array2<f64>, Array2<f64>) {
        let feed_src = self.cfg.discriminator_feed_limit.min(src.len());
        let feed_tgt = self.cfg.discriminator_feed_limit.min(tgt.len());
        let b = self.cfg.batch_size;
        let mut xs = Array2::zeros((b, src.dim()));
        let mut ys = Array2::zeros((b, tgt.dim()));
        for i in 0..b {
            let si = self.batch_rng.gen_range(0..feed_src);
            xs.row_mut(i).assign(&src.vector(si));
            let ti = self.batch_rng.gen_range(0..feed_tgt);
            ys.row_mut(i).assign(&tgt.vector(ti));
        }
        (xs, ys)
    }

    /// One training step: `dis_steps` discriminator updates, then one
    /// mapping update on the last batch, then the orthogonality update.
    /// Returns (discriminator loss, mapping loss) of the step.
    fn step(&mut self, src: &EmbeddingSpace, tgt: &EmbeddingSpace) -> Result<(f64, f64)> {
        let mut disc_loss = 0.0;
        let mut last_batch = None;
        for _ in 0..self.cfg.dis_steps {
            let (xs, ys) = self.sample_batch(src, tgt);
            let grads = loss_with_grads(
                &self.disc,
                &self.w,
                xs.view(),
                ys.view(),
                LossKind::Discriminator,
                self.cfg.smoothing,
                Some(&mut self.dropout_rng),
            )?;
            self.disc.sgd_update(&grads.disc, self.lr);
            disc_loss = grads.loss;
            last_batch = Some((xs, ys));
        }
        let (xs, ys) = last_batch.expect("dis_steps >= 1");
        let map_smoothing = if self.cfg.smooth_mapping_loss {
            self.cfg.smoothing
        } else {
            0.0
        };
        // Mapping step scores in evaluation mode: no dropout.
        let grads = loss_with_grads(
            &self.disc,
            &self.w,
            xs.view(),
            ys.view(),
            LossKind::Mapping,
            map_smoothing,
            None,
        )?;
        let updated = &self.w.matrix() - &(&grads.mapping * self.lr);
        self.w = MappingMatrix::from_matrix(updated)?
            .with_beta(self.cfg.beta)
            .orthogonalize_step();
        Ok((disc_loss, grads.loss))
    }

    /// Held-out accuracy of the discriminator at the current mapping.
    fn evaluate_accuracy(&mut self, src: &EmbeddingSpace, tgt: &EmbeddingSpace) -> Result<f64> {
        let feed_src = self.cfg.discriminator_feed_limit.min(src.len());
        let feed_tgt = self.cfg.discriminator_feed_limit.min(tgt.len());
        let n = 256usize;
        let mut xs = Array2::zeros((n, src.dim()));
        let mut ys = Array2::zeros((n, tgt.dim()));
        for i in 0..n {
            xs.row_mut(i).assign(&src.vector(self.eval_rng.gen_range(0..feed_src)));
            ys.row_mut(i).assign(&tgt.vector(self.eval_rng.gen_range(0..feed_tgt)));
        }
        let mapped = self.w.apply(xs.view())?;
        let p_src = self.disc.forward_batch(mapped.view(), None).p;
        let p_tgt = self.disc.forward_batch(ys.view(), None).p;
        let correct = p_src.iter().filter(|&&p| p > 0.5).count()
            + p_tgt.iter().filter(|&&p| p <= 0.5).count();
        Ok(correct as f64 / (2 * n) as f64)
    }

    /// Run one epoch of steps plus the end-of-epoch schedule: decay the
    /// learning rate, evaluate the criterion, halve the rate if the
    /// criterion fell below the best seen, snapshot the best mapping.
    pub fn run_epoch(&mut self, src: &EmbeddingSpace, tgt: &EmbeddingSpace) -> Result<&EpochStats> {
        let lr_in_effect = self.lr;
        let mut disc_sum = 0.0;
        let mut map_sum = 0.0;
        for iter in 0..self.cfg.iterations_per_epoch {
            let (dl, ml) = self.step(src, tgt)?;
            if !dl.is_finite() || !ml.is_finite() || !self.disc.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {} iteration {iter} (disc {dl}, map {ml})",
                    self.epoch
                )));
            }
            disc_sum += dl;
            map_sum += ml;
        }
        self.lr = (self.lr * self.cfg.lr_decay).max(self.cfg.min_lr);
        let crit_cfg = CriterionConfig {
            n_queries: self.cfg.criterion_queries,
            metric: crate::metric::Method::Csls,
            csls_k: self.cfg.criterion_csls_k,
        };
        let criterion = validation_criterion(&self.w, src, tgt, &crit_cfg)?;
        if criterion < self.best_criterion {
            self.lr = (self.lr / self.cfg.lr_shrink).max(self.cfg.min_lr);
        }
        if criterion > self.best_criterion {
            self.best_criterion = criterion;
            self.best_w = self.w.clone();
        }
        let disc_accuracy = self.evaluate_accuracy(src, tgt)?;
        let iters = self.cfg.iterations_per_epoch as f64;
        self.history.push(EpochStats {
            epoch: self.epoch,
            criterion,
            disc_loss: disc_sum / iters,
            map_loss: map_sum / iters,
            disc_accuracy,
            lr: lr_in_effect,
        });
        self.epoch += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            mapping: self.best_w,
            history: self.history,
        }
    }

    /// Serialize the complete training state: epoch, schedules, both
    /// matrices, discriminator tensors, history and every RNG stream, so a
    /// restored trainer continues bit-for-bit identically.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        out.write_all(CKPT_MAGIC).map_err(io)?;
        out.write_all(&[CKPT_VERSION]).map_err(io)?;
        let cfg_json = serde_json::to_vec(&self.cfg).expect("config serialization");
        out.write_all(&(cfg_json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&cfg_json).map_err(io)?;
        out.write_all(&(self.epoch as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&self.lr.to_le_bytes()).map_err(io)?;
        out.write_all(&self.best_criterion.to_le_bytes()).map_err(io)?;
        for rng in [&self.batch_rng, &self.dropout_rng, &self.eval_rng] {
            out.write_all(&rng.get_seed()).map_err(io)?;
            out.write_all(&rng.get_stream().to_le_bytes()).map_err(io)?;
            let pos = rng.get_word_pos();
            out.write_all(&(pos as u64).to_le_bytes()).map_err(io)?;
            out.write_all(&((pos >> 64) as u64).to_le_bytes()).map_err(io)?;
        }
        let write_matrix = |out: &mut BufWriter<File>, m: ArrayView2<'_, f64>| -> Result<()> {
            out.write_all(&(m.nrows() as u64).to_le_bytes()).map_err(io)?;
            out.write_all(&(m.ncols() as u64).to_le_bytes()).map_err(io)?;
            for v in m.iter() {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            Ok(())
        };
        write_matrix(&mut out, self.w.matrix())?;
        write_matrix(&mut out, self.best_w.matrix())?;
        write_matrix(&mut out, self.disc.w1.view())?;
        write_matrix(&mut out, self.disc.w2.view())?;
        write_matrix(&mut out, self.disc.w3.view())?;
        for b in [&self.disc.b1, &self.disc.b2, &self.disc.b3] {
            out.write_all(&(b.len() as u64).to_le_bytes()).map_err(io)?;
            for v in b.iter() {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        let hist_json = serde_json::to_vec(&self.history).expect("history serialization");
        out.write_all(&(hist_json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&hist_json).map_err(io)?;
        out.flush().map_err(io)
    }

    /// Restore a trainer saved with [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: &str| Error::parse(path, 0, msg);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated checkpoint"))?;
        if &magic != CKPT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic bytes)"));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(|_| bad("truncated checkpoint"))?;
        if version[0] != CKPT_VERSION {
            return Err(Error::parse(
                path,
                0,
                format!("unsupported checkpoint version {}", version[0]),
            ));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut u64buf).map_err(|_| bad("truncated checkpoint"))?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let cfg_len = read_u64(&mut r)? as usize;
        let mut cfg_json = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_json).map_err(|_| bad("truncated checkpoint"))?;
        let cfg: TrainConfig = serde_json::from_slice(&cfg_json)
            .map_err(|e| Error::parse(path, 0, format!("bad config block: {e}")))?;
        let epoch = read_u64(&mut r)? as usize;
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
            r.read_exact(&mut f64buf).map_err(|_| bad("truncated checkpoint"))?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let lr = read_f64(&mut r)?;
        let best_criterion = read_f64(&mut r)?;
        let read_rng = |r: &mut BufReader<File>| -> Result<ChaCha12Rng> {
            let mut seed = [0u8; 32];
            r.read_exact(&mut seed).map_err(|_| bad("truncated checkpoint"))?;
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            let stream = u64::from_le_bytes(b8);
            r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            let lo = u64::from_le_bytes(b8) as u128;
            r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            let hi = u64::from_le_bytes(b8) as u128;
            let mut rng = ChaCha12Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(lo | (hi << 64));
            Ok(rng)
        };
        let batch_rng = read_rng(&mut r)?;
        let dropout_rng = read_rng(&mut r)?;
        let eval_rng = read_rng(&mut r)?;
        let read_matrix = |r: &mut BufReader<File>| -> Result<Array2<f64>> {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            let rows = u64::from_le_bytes(b8) as usize;
            r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            let cols = u64::from_le_bytes(b8) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
                data.push(f64::from_le_bytes(b8));
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("shape"))
        };
        let w = read_matrix(&mut r)?;
        let best_w = read_matrix(&mut r)?;
        let w1 = read_matrix(&mut r)?;
        let w2 = read_matrix(&mut r)?;
        let w3 = read_matrix(&mut r)?;
        let read_vector = |r: &mut BufReader<File>| -> Result<Array1<f64>> {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            let len = u64::from_le_bytes(b8) as usize;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
                data.push(f64::from_le_bytes(b8));
            }
            Ok(Array1::from_vec(data))
        };
        let b1 = read_vector(&mut r)?;
        let b2 = read_vector(&mut r)?;
        let b3 = read_vector(&mut r)?;
        let hist_len = {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            u64::from_le_bytes(b8) as usize
        };
        let mut hist_json = vec![0u8; hist_len];
        r.read_exact(&mut hist_json).map_err(|_| bad("truncated checkpoint"))?;
        let history: Vec<EpochStats> = serde_json::from_slice(&hist_json)
            .map_err(|e| Error::parse(path, 0, format!("bad history block: {e}")))?;

        let disc = Discriminator {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            leaky_slope: cfg.leaky_slope,
            dropout_rate: cfg.dropout_rate,
            smoothing: cfg.smoothing,
        };
        Ok(Trainer {
            w: MappingMatrix::from_matrix(w)?.with_beta(cfg.beta),
            best_w: MappingMatrix::from_matrix(best_w)?.with_beta(cfg.beta),
            best_criterion,
            lr,
            epoch,
            history,
            batch_rng,
            dropout_rng,
            eval_rng,
            disc,
            cfg,
        })
    }
}

/// Run the full adversarial phase and return the best-criterion mapping
/// with the per-epoch history.
pub fn train_adversarial(
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_adversarial_with(src, tgt, cfg, |_, _| {})
}

/// [`train_adversarial`] with a per-epoch observer receiving the epoch
/// record and the current (end-of-epoch) mapping.
pub fn train_adversarial_with(
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochStats, &MappingMatrix),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(src, tgt, cfg.clone())?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(src, tgt)?;
        let stats = trainer.history().last().expect("epoch recorded").clone();
        observer(&stats, trainer.current_mapping());
    }
    Ok(trainer.into_outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pair, Rotation, SynthConfig};
    use ndarray::array;

    fn tiny_disc(seed: u64, d: usize, h: usize, smoothing: f64) -> Discriminator {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Discriminator::new(d, (h, h), 0.2, 0.1, smoothing, &mut rng).unwrap()
    }

    fn zero_disc(d: usize, h: usize, smoothing: f64) -> Discriminator {
        let mut disc = tiny_disc(0, d, h, smoothing);
        for t in ["w1", "b1", "w2", "b2", "w3", "b3"] {
            let len = disc
                .parameter_tensors()
                .iter()
                .find(|(n, _)| *n == t)
                .unwrap()
                .1
                .len();
            for i in 0..len {
                let current = disc
                    .parameter_tensors()
                    .iter()
                    .find(|(n, _)| *n == t)
                    .unwrap()
                    .1[i];
                disc.perturb_parameter(t, i, -current);
            }
        }
        disc
    }

    #[test]
    fn zero_network_outputs_half() {
        let disc = zero_disc(4, 3, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let z = array![0.3, -0.7, 2.0, 0.1];
        let p = disc.forward(z.view(), false, &mut rng).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
    }

    /// Hand evaluation of the two-hidden-layer arithmetic on a fixed tiny
    /// network.
    #[test]
    fn forward_matches_hand_evaluation() {
        let mut disc = zero_disc(2, 3, 0.0);
        // w1 (3x2), b1 (3), w2 (3x3), b2 (3), w3 (1x3), b3 (1).
        let w1 = [0.5, -1.0, 0.25, 0.75, -0.5, 0.125];
        let b1 = [0.1, -0.2, 0.3];
        let w2 = [1.0, 0.0, -1.0, 0.5, 0.5, 0.5, -0.25, 0.75, 0.0];
        let b2 = [0.0, 0.05, -0.1];
        let w3 = [2.0, -1.0, 0.5];
        let b3 = [0.2];
        for (i, v) in w1.iter().enumerate() {
            disc.perturb_parameter("w1", i, *v);
        }
        for (i, v) in b1.iter().enumerate() {
            disc.perturb_parameter("b1", i, *v);
        }
        for (i, v) in w2.iter().enumerate() {
            disc.perturb_parameter("w2", i, *v);
        }
        for (i, v) in b2.iter().enumerate() {
            disc.perturb_parameter("b2", i, *v);
        }
        for (i, v) in w3.iter().enumerate() {
            disc.perturb_parameter("w3", i, *v);
        }
        disc.perturb_parameter("b3", 0, b3[0]);

        let z = [0.4, -0.6];
        let slope = 0.2;
        let leaky = |x: f64| if x > 0.0 { x } else { slope * x };
        let a1 = [
            w1[0] * z[0] + w1[1] * z[1] + b1[0],
            w1[2] * z[0] + w1[3] * z[1] + b1[1],
            w1[4] * z[0] + w1[5] * z[1] + b1[2],
        ];
        let h1 = [leaky(a1[0]), leaky(a1[1]), leaky(a1[2])];
        let a2 = [
            w2[0] * h1[0] + w2[1] * h1[1] + w2[2] * h1[2] + b2[0],
            w2[3] * h1[0] + w2[4] * h1[1] + w2[5] * h1[2] + b2[1],
            w2[6] * h1[0] + w2[7] * h1[1] + w2[8] * h1[2] + b2[2],
        ];
        let h2 = [leaky(a2[0]), leaky(a2[1]), leaky(a2[2])];
        let logit = w3[0] * h2[0] + w3[1] * h2[1] + w3[2] * h2[2] + b3[0];
        let expected = 1.0 / (1.0 + (-logit).exp());

        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let got = disc
            .forward(array![z[0], z[1]].view(), false, &mut rng)
            .unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let disc = Discriminator::new(5, (4, 4), 0.2, 0.0, 0.2, &mut rng).unwrap();
        let z = array![0.1, -0.4, 0.9, 0.0, 0.3];
        let mut r1 = ChaCha12Rng::seed_from_u64(4);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let train = disc.forward(z.view(), true, &mut r1).unwrap();
        let eval = disc.forward(z.view(), false, &mut r2).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let disc = tiny_disc(0, 4, 3, 0.2);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        assert!(disc.forward(array![1.0, 2.0].view(), false, &mut rng).is_err());
    }

    #[test]
    fn uniform_predictor_loss_is_two_log_two() {
        let disc = zero_disc(3, 2, 0.0);
        let w = MappingMatrix::identity(3);
        let src = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let tgt = array![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let ld = discriminator_loss(&disc, &w, src.view(), tgt.view()).unwrap();
        assert!((ld - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let lm = mapping_loss(&disc, &w, src.view(), tgt.view()).unwrap();
        assert!((lm - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    /// A separating network drives the unsmoothed loss toward zero.
    #[test]
    fn perfect_predictor_loss_approaches_zero() {
        let mut disc = zero_disc(1, 1, 0.0);
        // Linear chain with gain K: logit(z) ~ K for z=1, -0.04K for z=-1.
        let k = 2000.0;
        disc.perturb_parameter("w1", 0, k);
        disc.perturb_parameter("w2", 0, 1.0);
        disc.perturb_parameter("w3", 0, 1.0);
        let w = MappingMatrix::identity(1);
        let src = array![[1.0]];
        let tgt = array![[-1.0]];
        let loss = discriminator_loss(&disc, &w, src.view(), tgt.view()).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    /// Predictor fixed at p=0.8 on sources and q=0.2 on targets with s=0.2:
    /// each side contributes −(0.8 ln 0.8 + 0.2 ln 0.2) ≈ 0.5004.
    #[test]
    fn smoothed_loss_hand_value() {
        let mut disc = zero_disc(1, 1, 0.2);
        let l = 4.0f64.ln();
        // logit(1) = c·(1·1) + b3 = L and logit(-1) = c·(-0.04) + b3 = -L.
        let c = 2.0 * l / 1.04;
        let b3 = l - c;
        disc.perturb_parameter("w1", 0, 1.0);
        disc.perturb_parameter("w2", 0, 1.0);
        disc.perturb_parameter("w3", 0, c);
        disc.perturb_parameter("b3", 0, b3);
        let w = MappingMatrix::identity(1);
        let src = array![[1.0]];
        let tgt = array![[-1.0]];
        let loss = discriminator_loss(&disc, &w, src.view(), tgt.view()).unwrap();
        let per_side = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((per_side - 0.50040242).abs() < 1e-8);
        assert!((loss - 2.0 * per_side).abs() < 1e-9, "loss {loss}");
    }

    /// mapping_loss with predictor p equals discriminator_loss with
    /// predictor 1−p; negating the output layer realizes 1−p exactly.
    #[test]
    fn label_flip_symmetry() {
        let disc = tiny_disc(7, 4, 5, 0.0);
        let mut flipped = disc.clone();
        let n3 = flipped.parameter_tensors()[4].1.len();
        for i in 0..n3 {
            let v = flipped.parameter_tensors()[4].1[i];
            flipped.perturb_parameter("w3", i, -2.0 * v);
        }
        let vb = flipped.parameter_tensors()[5].1[0];
        flipped.perturb_parameter("b3", 0, -2.0 * vb);

        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let src = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let tgt = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let w = MappingMatrix::identity(4);
        let a = mapping_loss(&disc, &w, src.view(), tgt.view()).unwrap();
        let b = discriminator_loss(&flipped, &w, src.view(), tgt.view()).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite differences over every parameter tensor and the
    /// mapping, for both losses, on a d=3 / hidden-4 / batch-2 instance.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let disc = Discriminator::new(3, (4, 4), 0.2, 0.0, 0.2, &mut rng).unwrap();
        let w = {
            let m = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-0.8..0.8));
            MappingMatrix::from_matrix(Array2::eye(3) + m * 0.3).unwrap()
        };
        let src = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let tgt = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let h = 1e-5;

        for kind in [LossKind::Discriminator, LossKind::Mapping] {
            let grads =
                loss_with_grads(&disc, &w, src.view(), tgt.view(), kind, 0.2, None).unwrap();
            let analytic: Vec<(&str, Vec<f64>)> = vec![
                ("w1", grads.disc.w1.iter().copied().collect()),
                ("b1", grads.disc.b1.to_vec()),
                ("w2", grads.disc.w2.iter().copied().collect()),
                ("b2", grads.disc.b2.to_vec()),
                ("w3", grads.disc.w3.iter().copied().collect()),
                ("b3", grads.disc.b3.to_vec()),
            ];
            for (tensor, grad) in analytic {
                for (i, &g) in grad.iter().enumerate() {
                    let mut plus = disc.clone();
                    plus.perturb_parameter(tensor, i, h);
                    let mut minus = disc.clone();
                    minus.perturb_parameter(tensor, i, -h);
                    let lp = loss_with_grads(&plus, &w, src.view(), tgt.view(), kind, 0.2, None)
                        .unwrap()
                        .loss;
                    let lm = loss_with_grads(&minus, &w, src.view(), tgt.view(), kind, 0.2, None)
                        .unwrap()
                        .loss;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(
                        relative_error(g, fd) < 1e-4,
                        "{kind:?} {tensor}[{i}]: analytic {g} vs fd {fd}"
                    );
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    let mut mp = w.matrix().to_owned();
                    mp[[i, j]] += h;
                    let mut mm = w.matrix().to_owned();
                    mm[[i, j]] -= h;
                    let wp = MappingMatrix::from_matrix(mp).unwrap();
                    let wm = MappingMatrix::from_matrix(mm).unwrap();
                    let lp = loss_with_grads(&disc, &wp, src.view(), tgt.view(), kind, 0.2, None)
                        .unwrap()
                        .loss;
                    let lm = loss_with_grads(&disc, &wm, src.view(), tgt.view(), kind, 0.2, None)
                        .unwrap()
                        .loss;
                    let fd = (lp - lm) / (2.0 * h);
                    let g = grads.mapping[[i, j]];
                    assert!(
                        relative_error(g, fd) < 1e-4,
                        "{kind:?} W[{i}][{j}]: analytic {g} vs fd {fd}"
                    );
                }
            }
        }
    }

    fn desk_cfg(epochs: usize, iters: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            iterations_per_epoch: iters,
            hidden: (32, 32),
            criterion_queries: 500,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_identity_and_empty_history() {
        let pair = generate_pair(&SynthConfig {
            n_words: 60,
            dim: 8,
            rng_seed: 1,
            ..Default::default()
        })
        .unwrap();
        let out = train_adversarial(&pair.src, &pair.tgt, &desk_cfg(0, 10)).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.mapping.matrix(), Array2::<f64>::eye(8));
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let pair = generate_pair(&SynthConfig {
            n_words: 80,
            dim: 8,
            rng_seed: 2,
            noise_sigma: 0.1,
            ..Default::default()
        })
        .unwrap();
        let cfg = desk_cfg(2, 20);
        let a = train_adversarial(&pair.src, &pair.tgt, &cfg).unwrap();
        let b = train_adversarial(&pair.src, &pair.tgt, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.mapping.matrix(), b.mapping.matrix());
    }

    #[test]
    fn mapping_stays_near_orthogonal_every_step() {
        let pair = generate_pair(&SynthConfig {
            n_words: 80,
            dim: 8,
            rng_seed: 3,
            ..Default::default()
        })
        .unwrap();
        let mut trainer = Trainer::new(&pair.src, &pair.tgt, desk_cfg(1, 1)).unwrap();
        for _ in 0..150 {
            trainer.step(&pair.src, &pair.tgt).unwrap();
            let err = trainer.current_mapping().orthogonality_error();
            assert!(err <= 0.1, "orthogonality error {err}");
        }
    }

    #[test]
    fn identical_spaces_keep_criterion_high_and_accuracy_low() {
        let pair = generate_pair(&SynthConfig {
            n_words: 300,
            dim: 16,
            rotation: Rotation::Identity,
            rng_seed: 4,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = desk_cfg(3, 60);
        cfg.hidden = (64, 64);
        let out = train_adversarial(&pair.src, &pair.tgt, &cfg).unwrap();
        let best = out
            .history
            .iter()
            .map(|e| e.criterion)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= 0.95, "best criterion {best}");
        let last = out.history.last().unwrap();
        assert!(
            last.disc_accuracy <= 0.65,
            "held-out accuracy {}",
            last.disc_accuracy
        );
    }

    #[test]
    fn mismatched_dims_and_unnormalized_spaces_are_rejected() {
        let a = generate_pair(&SynthConfig {
            n_words: 30,
            dim: 6,
            rng_seed: 5,
            ..Default::default()
        })
        .unwrap();
        let b = generate_pair(&SynthConfig {
            n_words: 30,
            dim: 8,
            rng_seed: 5,
            ..Default::default()
        })
        .unwrap();
        assert!(Trainer::new(&a.src, &b.tgt, desk_cfg(1, 1)).is_err());

        let unnorm = crate::embed::EmbeddingSpace::new(
            "x",
            (0..30).map(|i| format!("w{i}")).collect(),
            Array2::from_elem((30, 6), 2.0),
        )
        .unwrap();
        assert!(Trainer::new(&a.src, &unnorm, desk_cfg(1, 1)).is_err());
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let pair = generate_pair(&SynthConfig {
            n_words: 80,
            dim: 8,
            rng_seed: 6,
            noise_sigma: 0.05,
            ..Default::default()
        })
        .unwrap();
        let cfg = desk_cfg(4, 15);

        let straight = train_adversarial(&pair.src, &pair.tgt, &cfg).unwrap();

        let mut first = Trainer::new(&pair.src, &pair.tgt, cfg.clone()).unwrap();
        first.run_epoch(&pair.src, &pair.tgt).unwrap();
        first.run_epoch(&pair.src, &pair.tgt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("trainer.ckpt");
        first.save_checkpoint(&ckpt).unwrap();

        let mut resumed = Trainer::load_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed.epoch(), 2);
        resumed.run_epoch(&pair.src, &pair.tgt).unwrap();
        resumed.run_epoch(&pair.src, &pair.tgt).unwrap();
        let out = resumed.into_outcome();
        assert_eq!(out.history, straight.history);
        assert_eq!(out.mapping.matrix(), straight.mapping.matrix());
    }

    use ndarray::Array2;
}
