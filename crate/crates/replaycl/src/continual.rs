//! Hybrid continual learner: one shared VAE retrained across all tasks,
//! a private VAE + classifier head grown (and later frozen) per task,
//! generative replay from the frozen private decoders, and the composite
//! loss `λ1 L_task + λ2 L_S + λ3 L_P`.
//!
//! Classifier input is the channel-wise concatenation of the shared and
//! private reconstructions. Those reconstructions use zero class
//! conditioning and the posterior mean — identically at training and test
//! time, since labels are unavailable when predicting.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::ckpt;
use crate::datasets::{derive_seed, preset, Preset, Sample, TaskSequence};
use crate::error::{Error, Result};
use crate::nn::conv::{conv_out_size, Conv2dCache, LayerGrads};
use crate::nn::linear::LinearCache;
use crate::nn::par::{map_chunks, sum_into, CHUNK};
use crate::nn::{tanh_backward, tanh_forward, Adam, Conv2d, Linear, ParamBundle, Scalar, SliceCursor};
use crate::vae::{bce_sum, kl_sum, ConditionalVae, VaeCheckpointMeta, VaeConfig, VaeForward};

const TAG_SHARED: u64 = 0x7368_6172;
const TAG_PRIVATE: u64 = 0x7072_6976;
const TAG_REPLAY: u64 = 0x7265_706C;
const TAG_SHUFFLE: u64 = 0x7368_7566;
const TAG_NOISE: u64 = 0x6570_7331;

/// Epochs at which [`train_task`] emits checkpoint events.
pub const CHECKPOINT_EPOCHS: &[usize] = &[25, 50];

/// Learning-rate factor for the shared VAE on every task after the first.
pub const SHARED_LR_DAMP: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// `(channels, height, width)` of the concatenated reconstruction
    /// pair, i.e. twice the data channel count.
    pub input_shape: (usize, usize, usize),
    pub channels: Vec<usize>,
    pub fc_hidden: Option<usize>,
    /// Fixed logit width: every class of the dataset. Training and
    /// prediction restrict the softmax/argmax to the relevant subset, so
    /// per-task growth stays constant-size.
    pub num_classes: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl HeadConfig {
    pub fn for_preset(p: &Preset) -> Self {
        Self {
            input_shape: (2 * p.input_shape.0, p.input_shape.1, p.input_shape.2),
            channels: p.head_channels.to_vec(),
            fc_hidden: p.head_fc_hidden,
            num_classes: p.num_classes,
            kernel: 4,
            stride: 2,
            pad: 1,
        }
    }

    fn spatial_trace(&self) -> Vec<(usize, usize)> {
        let mut trace = vec![(self.input_shape.1, self.input_shape.2)];
        for _ in &self.channels {
            let (h, w) = *trace.last().unwrap();
            trace.push((
                conv_out_size(h, self.kernel, self.stride, self.pad),
                conv_out_size(w, self.kernel, self.stride, self.pad),
            ));
        }
        trace
    }

    fn flat_dim(&self) -> usize {
        let (h, w) = *self.spatial_trace().last().unwrap();
        self.channels.last().unwrap() * h * w
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.num_classes == 0 {
            return Err(Error::Config("head needs conv stages and classes".into()));
        }
        let (h, w) = *self.spatial_trace().last().unwrap();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "head input {:?} collapses to zero after {} conv stages",
                self.input_shape,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Per-task classifier: conv trunk with tanh stages, optional hidden FC,
/// and a logit layer.
#[derive(Debug, Clone)]
pub struct Head<S> {
    pub config: HeadConfig,
    pub convs: Vec<Conv2d<S>>,
    pub fc_hidden: Option<Linear<S>>,
    pub fc_out: Linear<S>,
}

pub struct HeadCache<S> {
    conv_caches: Vec<Conv2dCache<S>>,
    acts: Vec<Array4<S>>,
    hid: Option<(LinearCache<S>, Array2<S>)>,
    out_cache: LinearCache<S>,
}

impl<S: Scalar> Head<S> {
    pub fn new<R: Rng>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut prev = config.input_shape.0;
        for &c in &config.channels {
            convs.push(Conv2d::new(rng, prev, c, config.kernel, config.stride, config.pad));
            prev = c;
        }
        let flat = config.flat_dim();
        let (fc_hidden, out_in) = match config.fc_hidden {
            Some(h) => (Some(Linear::new(rng, flat, h)), h),
            None => (None, flat),
        };
        let fc_out = Linear::new(rng, out_in, config.num_classes);
        Ok(Self {
            config,
            convs,
            fc_hidden,
            fc_out,
        })
    }

    pub fn forward(&self, x: &Array4<S>) -> (Array2<S>, HeadCache<S>) {
        let n = x.dim().0;
        let mut conv_caches = Vec::new();
        let mut acts = Vec::new();
        let mut cur = x.clone();
        for conv in &self.convs {
            let (y, cache) = conv.forward(&cur.view());
            let a = tanh_forward(&y);
            conv_caches.push(cache);
            acts.push(a.clone());
            cur = a;
        }
        let flat_len = cur.len() / n;
        debug_assert!(cur.is_standard_layout());
        let mut flat = cur.into_shape((n, flat_len)).unwrap();
        let hid = self.fc_hidden.as_ref().map(|l| {
            let (y, cache) = l.forward(&flat);
            let a = tanh_forward(&y);
            (cache, a)
        });
        if let Some((_, a)) = &hid {
            flat = a.clone();
        }
        let (logits, out_cache) = self.fc_out.forward(&flat);
        (
            logits,
            HeadCache {
                conv_caches,
                acts,
                hid,
                out_cache,
            },
        )
    }

    /// Returns the gradient wrt the head input and flat parameter grads in
    /// canonical order (convs, optional hidden FC, logit FC).
    pub fn backward(&self, grad_logits: &Array2<S>, cache: &HeadCache<S>) -> (Array4<S>, Vec<S>) {
        let (mut g2, out_grads) = self.fc_out.backward(grad_logits, &cache.out_cache);
        let hid_grads = self.fc_hidden.as_ref().map(|l| {
            let (lc, act) = cache.hid.as_ref().unwrap();
            let g_pre = tanh_backward(&g2, act);
            let (gx, lg) = l.backward(&g_pre, lc);
            g2 = gx;
            lg
        });
        let last = cache.acts.last().unwrap();
        debug_assert!(g2.is_standard_layout());
        let mut g = g2.into_shape(last.dim()).unwrap();
        let mut rev: Vec<LayerGrads<S>> = Vec::new();
        for i in (0..self.convs.len()).rev() {
            let g_pre = tanh_backward(&g, &cache.acts[i]);
            let (gx, lg) = self.convs[i].backward(&g_pre, &cache.conv_caches[i]);
            rev.push(lg);
            g = gx;
        }
        rev.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for lg in &rev {
            flat.extend_from_slice(&lg.w);
            flat.extend_from_slice(&lg.b);
        }
        if let Some(lg) = &hid_grads {
            flat.extend_from_slice(&lg.w);
            flat.extend_from_slice(&lg.b);
        }
        flat.extend_from_slice(&out_grads.w);
        flat.extend_from_slice(&out_grads.b);
        (g, flat)
    }
}

impl<S: Scalar> ParamBundle<S> for Head<S> {
    fn param_count(&self) -> usize {
        self.convs.iter().map(|l| l.param_count()).sum::<usize>()
            + self.fc_hidden.as_ref().map_or(0, |l| l.param_count())
            + self.fc_out.param_count()
    }

    fn append_params(&self, out: &mut Vec<S>) {
        for l in &self.convs {
            l.append_params(out);
        }
        if let Some(l) = &self.fc_hidden {
            l.append_params(out);
        }
        self.fc_out.append_params(out);
    }

    fn load_params(&mut self, src: &mut SliceCursor<'_, S>) {
        for l in &mut self.convs {
            l.load_params(src);
        }
        if let Some(l) = &mut self.fc_hidden {
            l.load_params(src);
        }
        self.fc_out.load_params(src);
    }
}

/// Task-specific VAE and classifier; frozen once the next task arrives.
#[derive(Debug, Clone)]
pub struct PrivateModule<S> {
    pub task_id: usize,
    pub vae: ConditionalVae<S>,
    pub head: Head<S>,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct LearnerState<S> {
    pub dataset: String,
    pub shared: ConditionalVae<S>,
    pub privates: Vec<PrivateModule<S>>,
    /// 0 before any task arrives; otherwise the newest task id.
    pub current_task: usize,
    pub lambdas: (f64, f64, f64),
    pub lr: f64,
    pub replay_per_class: usize,
    pub seed: u64,
    pub vae_config: VaeConfig,
    pub head_config: HeadConfig,
}

pub fn init_learner<S: Scalar>(
    dataset: &str,
    lambdas: (f64, f64, f64),
    lr: f64,
    replay_per_class: usize,
    seed: u64,
) -> Result<LearnerState<S>> {
    let p = preset(dataset)?;
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    let vae_config = VaeConfig::for_preset(p);
    let head_config = HeadConfig::for_preset(p);
    head_config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SHARED]));
    let shared = ConditionalVae::new(vae_config.clone(), &mut rng)?;
    Ok(LearnerState {
        dataset: p.name.to_string(),
        shared,
        privates: Vec::new(),
        current_task: 0,
        lambdas,
        lr,
        replay_per_class,
        seed,
        vae_config,
        head_config,
    })
}

impl<S: Scalar> LearnerState<S> {
    pub fn module(&self, task: usize) -> Result<&PrivateModule<S>> {
        if task < 1 || task > self.privates.len() {
            return Err(Error::TaskOutOfRange {
                t: task,
                max: self.privates.len(),
            });
        }
        Ok(&self.privates[task - 1])
    }

    /// Flat trainable parameters at the current task:
    /// `[shared | private VAE t | head t]`.
    pub fn trainable_params(&self) -> Vec<S> {
        let m = &self.privates[self.current_task - 1];
        let mut v = Vec::with_capacity(
            self.shared.param_count() + m.vae.param_count() + m.head.param_count(),
        );
        self.shared.append_params(&mut v);
        m.vae.append_params(&mut v);
        m.head.append_params(&mut v);
        v
    }

    pub fn set_trainable_params(&mut self, params: &[S]) {
        let mut cur = SliceCursor::new(params);
        self.shared.load_params(&mut cur);
        let m = &mut self.privates[self.current_task - 1];
        m.vae.load_params(&mut cur);
        m.head.load_params(&mut cur);
        assert!(cur.is_empty());
    }
}

/// Append a fresh private module for task `t` (which must be
/// `current_task + 1`) and freeze its predecessor. The shared VAE is
/// untouched.
pub fn grow_private<S: Scalar>(state: &mut LearnerState<S>, t: usize) -> Result<()> {
    if t != state.current_task + 1 {
        return Err(Error::NonConsecutiveTask {
            expected: state.current_task + 1,
            got: t,
        });
    }
    if let Some(prev) = state.privates.last_mut() {
        prev.frozen = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, &[TAG_PRIVATE, t as u64]));
    let vae = ConditionalVae::new(state.vae_config.clone(), &mut rng)?;
    let head = Head::new(state.head_config.clone(), &mut rng)?;
    state.privates.push(PrivateModule {
        task_id: t,
        vae,
        head,
        frozen: false,
    });
    state.current_task = t;
    Ok(())
}

/// Synthesize `replay_per_class` samples for every class of tasks
/// `1..t`, each from the frozen private decoder that owns the class.
/// Deterministic given the learner seed; `t = 1` yields an empty buffer.
pub fn build_replay<S: Scalar>(
    state: &LearnerState<S>,
    seq: &TaskSequence,
    t: usize,
) -> Result<Vec<Sample>> {
    let n = state.replay_per_class;
    if t <= 1 || n == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for i in 1..t {
        let module = state.module(i)?;
        if !module.frozen {
            return Err(Error::UnfrozenPrior(i));
        }
        for &c in &seq.task(i)?.class_labels {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(state.seed, &[TAG_REPLAY, t as u64, c as u64]));
            let mut samples = module.vae.sample_conditional(c, n, &mut rng)?;
            for s in &mut samples {
                s.task_label = i;
            }
            out.extend(samples);
        }
    }
    Ok(out)
}

/// Fresh draw of the replay set for one training epoch: same frozen
/// decoders and per-class count as [`build_replay`], but an epoch-tagged
/// noise stream, so successive epochs see different synthetic views.
fn redraw_replay<S: Scalar>(
    state: &LearnerState<S>,
    seq: &TaskSequence,
    t: usize,
    n_per_class: usize,
    epoch: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for i in 1..t {
        let module = state.module(i)?;
        for &c in &seq.task(i)?.class_labels {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                state.seed,
                &[TAG_REPLAY, t as u64, epoch as u64, c as u64],
            ));
            let mut samples = module.vae.sample_conditional(c, n_per_class, &mut rng)?;
            for s in &mut samples {
                s.task_label = i;
            }
            out.extend(samples);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_task: f64,
    pub l_shared: f64,
    pub l_private: f64,
    pub total: f64,
}

struct ChunkOut<S> {
    l_task: S,
    l_shared: S,
    l_private: S,
    grads: Option<Vec<S>>,
}

fn batch_images<S: Scalar>(samples: &[&Sample], shape: (usize, usize, usize)) -> Array4<S> {
    let (c, h, w) = shape;
    let mut x = Array4::zeros((samples.len(), c, h, w));
    for (i, s) in samples.iter().enumerate() {
        x.slice_mut(s![i, .., .., ..])
            .assign(&s.image.mapv(S::from_f32));
    }
    x
}

fn concat_channels<S: Scalar>(a: &Array4<S>, b: &Array4<S>) -> Array4<S> {
    let (n, c, h, w) = a.dim();
    let mut out = Array4::zeros((n, 2 * c, h, w));
    out.slice_mut(s![.., ..c, .., ..]).assign(a);
    out.slice_mut(s![.., c.., .., ..]).assign(b);
    out
}

/// Sum-normalized cross-entropy with the softmax restricted to `seen`
/// classes. Returns `(loss sum, grad at the logits)`.
fn cross_entropy_restricted<S: Scalar>(
    logits: &Array2<S>,
    labels: &[usize],
    seen: &[bool],
) -> Result<(S, Array2<S>)> {
    let (n, k) = logits.dim();
    let mut loss = S::zero();
    let mut grad = Array2::<S>::zeros((n, k));
    for r in 0..n {
        let y = labels[r];
        if y >= k || !seen[y] {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes: k,
            });
        }
        let row = logits.row(r);
        let mut max = S::neg_infinity();
        for c in 0..k {
            if seen[c] && row[c] > max {
                max = row[c];
            }
        }
        let mut denom = S::zero();
        for c in 0..k {
            if seen[c] {
                denom += (row[c] - max).exp();
            }
        }
        loss += denom.ln() - (row[y] - max);
        for c in 0..k {
            if seen[c] {
                grad[[r, c]] = (row[c] - max).exp() / denom;
            }
        }
        grad[[r, y]] -= S::one();
    }
    Ok((loss, grad))
}

/// ELBO gradient triple for one forward pass, sum-normalized.
fn elbo_grads<S: Scalar>(fwd: &VaeForward<S>, x: &Array4<S>) -> (Array4<S>, Array2<S>, Array2<S>) {
    let grad_logits = &fwd.x_hat - x;
    let grad_mu = fwd.mu.clone();
    let half = S::from_f64(0.5);
    let grad_logvar = fwd.logvar.mapv(|lv| half * (lv.exp() - S::one()));
    (grad_logits, grad_mu, grad_logvar)
}

fn elbo_sum<S: Scalar>(fwd: &VaeForward<S>, x: &Array4<S>) -> S {
    let n = x.dim().0;
    let mut total = S::zero();
    for i in 0..n {
        total += bce_sum(
            x.index_axis(Axis(0), i).iter(),
            fwd.x_hat.index_axis(Axis(0), i).iter(),
        );
        total += kl_sum(
            fwd.mu.index_axis(Axis(0), i).iter(),
            fwd.logvar.index_axis(Axis(0), i).iter(),
        );
    }
    total
}

/// One joint pass over a chunk: shared and private ELBOs under true-label
/// conditioning with the given noise, plus the classifier pass over
/// zero-conditioned mean reconstructions. Losses and gradients are sums
/// over the chunk; the caller divides by the batch size.
#[allow(clippy::too_many_arguments)]
fn chunk_pass<S: Scalar>(
    shared: &ConditionalVae<S>,
    module: &PrivateModule<S>,
    samples: &[&Sample],
    eps_s: Array2<S>,
    eps_p: Array2<S>,
    seen: &[bool],
    lambdas: (f64, f64, f64),
    want_grads: bool,
) -> Result<ChunkOut<S>> {
    let shape = shared.config.input_shape;
    let x = batch_images::<S>(samples, shape);
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    let (l1, l2, l3) = (
        S::from_f64(lambdas.0),
        S::from_f64(lambdas.1),
        S::from_f64(lambdas.2),
    );

    let fwd_s = shared.forward_batch(&x, Some(&labels), Some(eps_s))?;
    let fwd_p = module.vae.forward_batch(&x, Some(&labels), Some(eps_p))?;
    let l_shared = elbo_sum(&fwd_s, &x);
    let l_private = elbo_sum(&fwd_p, &x);

    let rec_s = shared.forward_batch(&x, None, None)?;
    let rec_p = module.vae.forward_batch(&x, None, None)?;
    let head_in = concat_channels(&rec_s.x_hat, &rec_p.x_hat);
    let (logits, head_cache) = module.head.forward(&head_in);
    let (l_task, grad_ce) = cross_entropy_restricted(&logits, &labels, seen)?;

    let grads = if want_grads {
        let scaled_ce = grad_ce.mapv(|v| v * l1);
        let (grad_head_in, head_grads) = module.head.backward(&scaled_ce, &head_cache);
        let c = shape.0;
        // Chain through the sigmoid that produced each reconstruction.
        let mut grad_pre_s = grad_head_in.slice(s![.., ..c, .., ..]).to_owned();
        grad_pre_s.zip_mut_with(&rec_s.x_hat, |g, &h| *g = *g * h * (S::one() - h));
        let mut grad_pre_p = grad_head_in.slice(s![.., c.., .., ..]).to_owned();
        grad_pre_p.zip_mut_with(&rec_p.x_hat, |g, &h| *g = *g * h * (S::one() - h));
        let g_shared_head = shared.backward_batch(&rec_s, &grad_pre_s, None, None);
        let g_private_head = module.vae.backward_batch(&rec_p, &grad_pre_p, None, None);

        let (gl_s, gm_s, gv_s) = elbo_grads(&fwd_s, &x);
        let g_shared_elbo = shared.backward_batch(&fwd_s, &gl_s, Some(&gm_s), Some(&gv_s));
        let (gl_p, gm_p, gv_p) = elbo_grads(&fwd_p, &x);
        let g_private_elbo = module.vae.backward_batch(&fwd_p, &gl_p, Some(&gm_p), Some(&gv_p));

        let n_s = g_shared_elbo.len();
        let n_p = g_private_elbo.len();
        let mut flat = Vec::with_capacity(n_s + n_p + head_grads.len());
        for i in 0..n_s {
            flat.push(l2 * g_shared_elbo[i] + g_shared_head[i]);
        }
        for i in 0..n_p {
            flat.push(l3 * g_private_elbo[i] + g_private_head[i]);
        }
        flat.extend_from_slice(&head_grads);
        Some(flat)
    } else {
        None
    };

    Ok(ChunkOut {
        l_task,
        l_shared,
        l_private,
        grads,
    })
}

/// Run the composite pass over a whole batch in deterministic chunks.
fn batch_pass<S: Scalar>(
    state: &LearnerState<S>,
    batch: &[&Sample],
    eps_s: &Array2<S>,
    eps_p: &Array2<S>,
    seen: &[bool],
    want_grads: bool,
) -> Result<(LossComponents, Option<Vec<S>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let module = state.module(state.current_task)?;
    let n_chunks = batch.len().div_ceil(CHUNK);
    let ids: Vec<usize> = (0..n_chunks).collect();
    let outs: Vec<Result<ChunkOut<S>>> = map_chunks(&ids, 1, |c| {
        let ci = c[0];
        let lo = ci * CHUNK;
        let hi = (lo + CHUNK).min(batch.len());
        chunk_pass(
            &state.shared,
            module,
            &batch[lo..hi],
            eps_s.slice(s![lo..hi, ..]).to_owned(),
            eps_p.slice(s![lo..hi, ..]).to_owned(),
            seen,
            state.lambdas,
            want_grads,
        )
    });
    let inv_n = 1.0 / batch.len() as f64;
    let mut l_task = 0.0;
    let mut l_shared = 0.0;
    let mut l_private = 0.0;
    let mut grads: Option<Vec<S>> = None;
    for out in outs {
        let out = out?;
        l_task += out.l_task.to_f64();
        l_shared += out.l_shared.to_f64();
        l_private += out.l_private.to_f64();
        if let Some(g) = out.grads {
            match &mut grads {
                Some(acc) => sum_into(acc, &g),
                None => grads = Some(g),
            }
        }
    }
    l_task *= inv_n;
    l_shared *= inv_n;
    l_private *= inv_n;
    if let Some(g) = &mut grads {
        let scale = S::from_f64(inv_n);
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    let (a, b, c) = state.lambdas;
    Ok((
        LossComponents {
            l_task,
            l_shared,
            l_private,
            total: a * l_task + b * l_shared + c * l_private,
        },
        grads,
    ))
}

/// Composite loss on one batch without touching any parameters. The noise
/// arrays (`batch_len x latent_dim`) make the stochastic ELBO terms
/// reproducible.
pub fn task_loss<S: Scalar>(
    state: &LearnerState<S>,
    batch: &[Sample],
    classes_seen: &[usize],
    eps_s: &Array2<S>,
    eps_p: &Array2<S>,
) -> Result<LossComponents> {
    let seen = seen_mask(classes_seen, state.head_config.num_classes)?;
    let refs: Vec<&Sample> = batch.iter().collect();
    let (components, _) = batch_pass(state, &refs, eps_s, eps_p, &seen, false)?;
    Ok(components)
}

/// [`task_loss`] plus its analytic gradient wrt the trainable parameters,
/// in [`LearnerState::trainable_params`] order.
pub fn task_loss_grads<S: Scalar>(
    state: &LearnerState<S>,
    batch: &[Sample],
    classes_seen: &[usize],
    eps_s: &Array2<S>,
    eps_p: &Array2<S>,
) -> Result<(LossComponents, Vec<S>)> {
    let seen = seen_mask(classes_seen, state.head_config.num_classes)?;
    let refs: Vec<&Sample> = batch.iter().collect();
    let (components, grads) = batch_pass(state, &refs, eps_s, eps_p, &seen, true)?;
    Ok((components, grads.expect("gradients requested")))
}

fn seen_mask(classes_seen: &[usize], num_classes: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; num_classes];
    for &c in classes_seen {
        if c >= num_classes {
            return Err(Error::ClassOutOfRange {
                class: c,
                num_classes,
            });
        }
        mask[c] = true;
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::Config("no classes seen".into()));
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_task: f64,
    pub l_shared: f64,
    pub l_private: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: usize,
    pub epoch_losses: Vec<EpochLoss>,
    pub checkpoint_epochs: Vec<usize>,
}

/// Train the shared VAE, the current private VAE, and the current head
/// jointly on `real ∪ replay` with Adam, leaving earlier private modules
/// untouched. `on_checkpoint` fires at epochs 25 and 50.
#[allow(clippy::too_many_arguments)]
pub fn train_task<S: Scalar>(
    state: &mut LearnerState<S>,
    seq: &TaskSequence,
    t: usize,
    real: &[Sample],
    replay: &[Sample],
    epochs: usize,
    batch_size: usize,
    mut on_checkpoint: impl FnMut(&LearnerState<S>, usize) -> Result<()>,
) -> Result<TrainReport> {
    if t != state.current_task || t < 1 || t > state.privates.len() {
        return Err(Error::TaskOutOfRange {
            t,
            max: state.current_task,
        });
    }
    if state.privates[t - 1].frozen {
        return Err(Error::Config(format!("private module {t} is frozen")));
    }
    for i in 1..t {
        if !state.privates[i - 1].frozen {
            return Err(Error::UnfrozenPrior(i));
        }
    }
    if real.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if t >= 2 && state.replay_per_class > 0 && replay.is_empty() {
        return Err(Error::MissingReplay(t));
    }
    if batch_size == 0 || epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let classes_seen = seq.classes_through(t);
    let seen = seen_mask(&classes_seen, state.head_config.num_classes)?;
    let zdim = state.vae_config.latent_dim;

    // The replay buffer holds only a handful of samples per old class, so
    // two measures keep the old classes from being swamped by thousands of
    // real samples: the buffer is repeated within each epoch so every old
    // class contributes a meaningful share of the gradient, and from the
    // second epoch on it is redrawn from the same frozen decoders (fresh
    // prior noise, epoch-tagged stream) so the learner sees diverse
    // synthetic views instead of memorizing the boundary buffer.
    let new_classes = seq.task(t)?.class_labels.len().max(1);
    let old_classes = classes_seen.len().saturating_sub(new_classes);
    let per_class_real = (real.len() / new_classes).max(1);
    let (reps, n_per_class) = if replay.is_empty() || old_classes == 0 {
        (1, 0)
    } else {
        (
            ((per_class_real / 8).max(1) * old_classes).div_ceil(replay.len()),
            replay.len() / old_classes,
        )
    };
    // The fresh private VAE and head train at the configured rate; from
    // the second task on, the shared VAE takes damped steps. It only needs
    // to *extend* its reconstruction to the new classes, and full-rate
    // updates drift its output for old classes faster than the replay
    // stream can anchor it, which degrades every earlier task's inputs to
    // the classifier.
    let n_shared = state.shared.param_count();
    let shared_lr = if t == 1 {
        state.lr
    } else {
        state.lr * SHARED_LR_DAMP
    };
    let mut params = state.trainable_params();
    let mut adam_shared = Adam::<S>::new(shared_lr, n_shared);
    let mut adam_rest = Adam::<S>::new(state.lr, params.len() - n_shared);
    let mut report = TrainReport {
        task: t,
        epoch_losses: Vec::new(),
        checkpoint_epochs: Vec::new(),
    };

    for epoch in 1..=epochs {
        let redrawn: Vec<Sample>;
        let buf: &[Sample] = if epoch == 1 || replay.is_empty() {
            replay
        } else {
            redrawn = redraw_replay(state, seq, t, n_per_class, epoch)?;
            &redrawn
        };
        let mut data: Vec<&Sample> = real.iter().collect();
        for _ in 0..reps {
            data.extend(buf.iter());
        }
        let mut shuf = ChaCha8Rng::seed_from_u64(derive_seed(
            state.seed,
            &[TAG_SHUFFLE, t as u64, epoch as u64],
        ));
        rand::seq::SliceRandom::shuffle(data.as_mut_slice(), &mut shuf);
        let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(
            state.seed,
            &[TAG_NOISE, t as u64, epoch as u64],
        ));
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for batch in data.chunks(batch_size) {
            let b = batch.len();
            let eps_s = Array2::from_shape_fn((b, zdim), |_| {
                S::from_f64(noise.sample::<f64, _>(StandardNormal))
            });
            let eps_p = Array2::from_shape_fn((b, zdim), |_| {
                S::from_f64(noise.sample::<f64, _>(StandardNormal))
            });
            let (components, grads) = batch_pass(state, batch, &eps_s, &eps_p, &seen, true)?;
            let grads = grads.expect("gradients requested");
            adam_shared.step(&mut params[..n_shared], &grads[..n_shared]);
            adam_rest.step(&mut params[n_shared..], &grads[n_shared..]);
            state.set_trainable_params(&params);
            sums.0 += components.l_task;
            sums.1 += components.l_shared;
            sums.2 += components.l_private;
            sums.3 += components.total;
            n_batches += 1;
        }
        let inv = 1.0 / n_batches as f64;
        report.epoch_losses.push(EpochLoss {
            epoch,
            l_task: sums.0 * inv,
            l_shared: sums.1 * inv,
            l_private: sums.2 * inv,
            total: sums.3 * inv,
        });
        if CHECKPOINT_EPOCHS.contains(&epoch) {
            on_checkpoint(state, epoch)?;
            report.checkpoint_epochs.push(epoch);
        }
    }
    Ok(report)
}

/// Classify a batch routed by task label: the input is reconstructed by
/// the shared VAE and by the *newest* private VAE (zero conditioning,
/// posterior mean), the channel concatenation goes through the *newest*
/// head, and the argmax is restricted to the queried task's class set.
///
/// The newest module/head pair is the only one whose replay training saw
/// old classes through the shared VAE's current state; routing an old
/// task through its frozen module and head collapses once the shared
/// reconstruction drifts. The task label still selects the class set and
/// must name an existing module. Deterministic.
pub fn predict_batch<S: Scalar>(
    state: &LearnerState<S>,
    images: &[&Sample],
    task: usize,
    task_classes: &[usize],
) -> Result<Vec<usize>> {
    state.module(task)?; // validate the task label
    let newest = state.module(state.current_task)?;
    if task_classes.is_empty() {
        return Err(Error::Config("empty class set for prediction".into()));
    }
    let shape = state.vae_config.input_shape;
    let x = batch_images::<S>(images, shape);
    let rec_s = state.shared.forward_batch(&x, None, None)?;
    let rec_p = newest.vae.forward_batch(&x, None, None)?;
    let head_in = concat_channels(&rec_s.x_hat, &rec_p.x_hat);
    let (logits, _) = newest.head.forward(&head_in);
    Ok((0..images.len())
        .map(|r| {
            let row = logits.row(r);
            *task_classes
                .iter()
                .max_by(|&&a, &&b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap()
        })
        .collect())
}

/// Single-image prediction with the task label given.
pub fn predict<S: Scalar>(
    state: &LearnerState<S>,
    image: &Array3<f32>,
    task: usize,
    seq: &TaskSequence,
) -> Result<usize> {
    let sample = Sample {
        image: image.clone(),
        class_label: 0,
        task_label: task,
        provenance: crate::datasets::Provenance::Real,
    };
    let classes = &seq.task(task)?.class_labels;
    Ok(predict_batch(state, &[&sample], task, classes)?[0])
}

/// Accuracy row `R[current][1..=current]` in percent: for each trained
/// task, the fraction of its test samples predicted correctly under
/// routed inference. `tests[i-1]` holds task `i`'s test set.
pub fn evaluate_row<S: Scalar>(
    state: &LearnerState<S>,
    seq: &TaskSequence,
    tests: &[Vec<Sample>],
) -> Result<Vec<f64>> {
    let t = state.current_task;
    if tests.len() < t {
        return Err(Error::Config(format!(
            "need {t} test sets, got {}",
            tests.len()
        )));
    }
    let mut row = Vec::with_capacity(t);
    for i in 1..=t {
        let set = &tests[i - 1];
        if set.is_empty() {
            return Err(Error::EmptyTestSet(i));
        }
        let classes = &seq.task(i)?.class_labels;
        let refs: Vec<&Sample> = set.iter().collect();
        let counts: Vec<usize> = map_chunks(&refs, CHUNK, |chunk| {
            let preds = predict_batch(state, chunk, i, classes).expect("evaluation pass");
            preds
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.class_label)
                .count()
        });
        let correct: usize = counts.iter().sum();
        row.push(100.0 * correct as f64 / set.len() as f64);
    }
    Ok(row)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerManifest {
    pub dataset: String,
    pub current_task: usize,
    pub lambdas: (f64, f64, f64),
    pub lr: f64,
    pub replay_per_class: usize,
    pub seed: u64,
    /// `(class, owning task)` pairs in task order.
    pub class_to_task: Vec<(usize, usize)>,
    pub frozen: Vec<bool>,
}

/// Persist the learner as a directory: `manifest.json`, `shared.vae`, and
/// `private_<t>.vae` / `private_<t>.head` per module.
pub fn save_learner<S: Scalar>(dir: &Path, state: &LearnerState<S>, seq: &TaskSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut class_to_task = Vec::new();
    for spec in &seq.tasks[..state.current_task.min(seq.tasks.len())] {
        for &c in &spec.class_labels {
            class_to_task.push((c, spec.task_id));
        }
    }
    let manifest = LearnerManifest {
        dataset: state.dataset.clone(),
        current_task: state.current_task,
        lambdas: state.lambdas,
        lr: state.lr,
        replay_per_class: state.replay_per_class,
        seed: state.seed,
        class_to_task,
        frozen: state.privates.iter().map(|m| m.frozen).collect(),
    };
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::rename(&tmp, dir.join("manifest.json"))?;
    let meta = VaeCheckpointMeta {
        config: state.vae_config.clone(),
        dataset: state.dataset.clone(),
        created_task: 0,
    };
    crate::vae::save_vae(&dir.join("shared.vae"), &state.shared, &meta)?;
    for m in &state.privates {
        let meta = VaeCheckpointMeta {
            config: state.vae_config.clone(),
            dataset: state.dataset.clone(),
            created_task: m.task_id,
        };
        crate::vae::save_vae(&dir.join(format!("private_{}.vae", m.task_id)), &m.vae, &meta)?;
        let params: Vec<f32> = m.head.flat_params().iter().map(|&p| p.to_f64() as f32).collect();
        ckpt::write_blob(
            &dir.join(format!("private_{}.head", m.task_id)),
            "head",
            &serde_json::to_value(&m.head.config)?,
            &params,
        )?;
    }
    Ok(())
}

pub fn load_learner<S: Scalar>(dir: &Path) -> Result<LearnerState<S>> {
    let manifest: LearnerManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let p = preset(&manifest.dataset)?;
    let mut state = init_learner::<S>(
        &manifest.dataset,
        manifest.lambdas,
        manifest.lr,
        manifest.replay_per_class,
        manifest.seed,
    )?;
    let (shared, _) = crate::vae::load_vae::<S>(&dir.join("shared.vae"))?;
    state.shared = shared;
    for t in 1..=manifest.current_task {
        let (vae, _) = crate::vae::load_vae::<S>(&dir.join(format!("private_{t}.vae")))?;
        let (kind, meta, params) = ckpt::read_blob(&dir.join(format!("private_{t}.head")))?;
        if kind != "head" {
            return Err(Error::Checkpoint(format!("expected head blob, got {kind}")));
        }
        let config: HeadConfig = serde_json::from_value(meta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Head::<S>::new(config, &mut rng)?;
        if params.len() != head.param_count() {
            return Err(Error::Checkpoint(format!(
                "head parameter count {} != expected {}",
                params.len(),
                head.param_count()
            )));
        }
        let typed: Vec<S> = params.iter().map(|&v| S::from_f32(v)).collect();
        head.set_flat_params(&typed);
        state.privates.push(PrivateModule {
            task_id: t,
            vae,
            head,
            frozen: manifest.frozen.get(t - 1).copied().unwrap_or(t != manifest.current_task),
        });
    }
    state.current_task = manifest.current_task;
    let _ = p;
    Ok(state)
}
